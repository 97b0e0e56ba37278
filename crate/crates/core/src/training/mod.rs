//! Paired training: Adam updates alternating between the discriminator and
//! the joint encoder/decoder/generator/recognizer objective.

mod data;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use data::{make_splits, Batch, Corpus, FacePair, SubjectScans, NEUTRAL_FILE};

use crate::config::TrainConfig;
use crate::diff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss_tape, generator_loss_tape, identity_ce_tape, latent_l1_tape, reconstruction_tape,
    weighted_sum_tape, LossReport,
};
use crate::mesh::{adjacency, build_laplacian, GraphOperator};
use crate::models::{Checkpoint, FaceNet, FaceNetVars, Normalization, Part};

/// Adam with bias-corrected moments over a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam", format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.m.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

const MAIN_PARTS: [Part; 4] = [Part::Encoder, Part::Decoder, Part::Generator, Part::Recognizer];

/// Parameters, graph operator and optimizer moments of a run in progress.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: FaceNet,
    pub op: GraphOperator,
    pub config: TrainConfig,
    adam_main: Adam,
    adam_d: Adam,
}

impl TrainState {
    pub fn new(net: FaceNet, op: GraphOperator, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if op.n() != net.n {
            return Err(Error::shape("train state", format!("graph n = {}, model n = {}", op.n(), net.n)));
        }
        let main: Vec<&Tensor> = net
            .named_tensors()
            .into_iter()
            .filter(|(name, _)| !name.starts_with("disc."))
            .map(|(_, t)| t)
            .collect();
        let adam_main = Adam::new(&config, &main);
        let disc: Vec<&Tensor> = net
            .named_tensors()
            .into_iter()
            .filter(|(name, _)| name.starts_with("disc."))
            .map(|(_, t)| t)
            .collect();
        let adam_d = Adam::new(&config, &disc);
        Ok(Self {
            net,
            op,
            config,
            adam_main,
            adam_d,
        })
    }

    /// Fresh network initialized from `config.seed`.
    pub fn init(n_subjects: usize, op: GraphOperator, config: TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = FaceNet::init(op.n(), n_subjects, config.model_flags(), rng)?;
        if config.zero_init_heads {
            net.recognizer.zero_head();
            net.discriminator.zero_head();
        }
        Self::new(net, op, config)
    }
}

fn collect_grads(tape: &Tape, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| grads.get_or_zeros(tape, v)).collect()
}

/// One discriminator phase followed by one main update. The reported
/// `gan_d` is the discriminator loss before its first update; every other
/// term is evaluated before the main update.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    let cfg = state.config.clone();
    let w = cfg.weights;
    let scaled = state.op.scaled().clone();

    let mut tape = Tape::new();
    let mut vars: FaceNetVars = state.net.bind(&mut tape, |p| p != Part::Discriminator);
    let x_e = tape.constant(batch.expressive.clone());
    let x_n = tape.constant(batch.neutral.clone());
    let z_e = vars.encode(&mut tape, &scaled, x_e)?;
    let z_n = vars.encode(&mut tape, &scaled, x_n)?;
    let g = vars.translate(&mut tape, z_e)?;

    // discriminator phase on detached codes
    let (ze_val, zn_val, g_val) = (tape.value(z_e).clone(), tape.value(z_n).clone(), tape.value(g).clone());
    let mut gan_d = f64::NAN;
    for k in 0..cfg.d_steps_per_g_step {
        let mut dt = Tape::new();
        let dv = state.net.bind(&mut dt, |p| p == Part::Discriminator);
        let cond = dt.constant(ze_val.clone());
        let real = dt.constant(zn_val.clone());
        let fake = dt.constant(g_val.clone());
        let d_real = dv.discriminate(&mut dt, real, cond)?;
        let d_fake = dv.discriminate(&mut dt, fake, cond)?;
        let d_loss = discriminator_loss_tape(&mut dt, d_real, d_fake)?;
        let value = dt.value(d_loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss {value}")));
        }
        if k == 0 {
            gan_d = value;
        }
        let grads = dt.backward(d_loss)?;
        let dg = collect_grads(&dt, &grads, &dv.vars(Part::Discriminator));
        state.adam_d.step(state.net.tensors_mut(Part::Discriminator), &dg)?;
    }

    // main phase against the updated discriminator
    vars.discriminator = state.net.discriminator.bind(&mut tape, false);
    let dec_n = vars.decode(&mut tape, &scaled, z_n)?;
    let dec_g = vars.decode(&mut tape, &scaled, g)?;
    let l1 = latent_l1_tape(&mut tape, g, z_n)?;
    let d_fake = vars.discriminate(&mut tape, g, z_e)?;
    let gan_g = generator_loss_tape(&mut tape, d_fake, cfg.saturating_gan);
    let l2l = weighted_sum_tape(&mut tape, &[(w.l1, l1), (w.gan, gan_g)])?;
    let p_g = vars.recognize(&mut tape, g)?;
    let p_n = vars.recognize(&mut tape, z_n)?;
    let ce_g = identity_ce_tape(&mut tape, p_g, &batch.labels)?;
    let ce_n = identity_ce_tape(&mut tape, p_n, &batch.labels)?;
    let id = weighted_sum_tape(&mut tape, &[(0.5, ce_g), (0.5, ce_n)])?;
    let rec = reconstruction_tape(&mut tape, dec_n, dec_g, x_n)?;
    let total = weighted_sum_tape(&mut tape, &[(w.l2l, l2l), (w.id, id), (w.rec, rec)])?;

    let report = LossReport {
        l1_latent: tape.value(l1).item(),
        gan_d,
        gan_g: tape.value(gan_g).item(),
        id: tape.value(id).item(),
        rec: tape.value(rec).item(),
        total: tape.value(total).item(),
    };
    if !report.is_finite() {
        return Err(Error::NonFinite(format!("training loss terms {report:?}")));
    }
    let grads = tape.backward(total)?;
    let main_vars: Vec<Var> = MAIN_PARTS.iter().flat_map(|&p| vars.vars(p)).collect();
    let main_grads = collect_grads(&tape, &grads, &main_vars);
    let params: Vec<&mut Tensor> = main_params(&mut state.net);
    state.adam_main.step(params, &main_grads)?;
    Ok(report)
}

fn main_params(net: &mut FaceNet) -> Vec<&mut Tensor> {
    let FaceNet {
        encoder,
        decoder,
        generator,
        recognizer,
        ..
    } = net;
    let mut out = encoder.tensors_mut();
    out.extend(decoder.tensors_mut());
    out.extend(generator.tensors_mut());
    out.extend(recognizer.tensors_mut());
    out
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One report per epoch: batch means of the step reports.
    pub history: Vec<LossReport>,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    /// Subjects whose meshes actually reached a training step.
    pub seen_subjects: BTreeSet<String>,
}

impl TrainOutcome {
    /// Fails if any mesh outside the training split reached the optimizer.
    pub fn audit_split(&self) -> Result<()> {
        let train: BTreeSet<&String> = self.train_subjects.iter().collect();
        if let Some(leak) = self.seen_subjects.iter().find(|s| !train.contains(s)) {
            return Err(Error::Corpus(format!("subject {leak} was trained on but is not in the training split")));
        }
        if let Some(both) = self.train_subjects.iter().find(|s| self.test_subjects.contains(s)) {
            return Err(Error::Corpus(format!("subject {both} is in both splits")));
        }
        Ok(())
    }
}

/// Trains on the training split of `corpus` chosen by
/// `make_splits(names, config.train_fraction, config.seed)`.
/// Normalization fitted on every mesh of the training subjects only.
pub fn fit_normalization(corpus: &Corpus, train_subjects: &[String], config: &TrainConfig) -> Result<Normalization> {
    let meshes = train_subjects
        .iter()
        .filter_map(|s| corpus.subject(s))
        .flat_map(|s| std::iter::once(&s.neutral).chain(s.expressions.iter().map(|(_, m)| m)));
    if config.template_normalization {
        Normalization::fit_template(meshes)
    } else {
        Normalization::fit(meshes)
    }
}

pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(corpus, config, |_, _| {})
}

pub fn train_with_progress(
    corpus: &Corpus,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_subjects, test_subjects) = make_splits(&corpus.names(), config.train_fraction, config.seed)?;
    let pairs = corpus.pairs(&train_subjects)?;
    if pairs.is_empty() {
        return Err(Error::Corpus("training split has no expressive meshes".into()));
    }
    let labels: Vec<usize> = pairs
        .iter()
        .map(|p| train_subjects.binary_search(&p.subject).expect("pair from split"))
        .collect();
    let normalization = fit_normalization(corpus, &train_subjects, config)?;

    let template = corpus.template();
    let op = build_laplacian(&adjacency(template))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainState::init(train_subjects.len(), op, config.clone(), &mut rng)?;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut seen = BTreeSet::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossReport::default();
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch_pairs: Vec<&FacePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let batch = Batch::new(&batch_pairs, chunk.iter().map(|&i| labels[i]).collect(), &normalization)?;
            for p in &batch_pairs {
                seen.insert(p.subject.clone());
            }
            let r = train_step(&mut state, &batch).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            sum.l1_latent += r.l1_latent;
            sum.gan_d += r.gan_d;
            sum.gan_g += r.gan_g;
            sum.id += r.id;
            sum.rec += r.rec;
            steps += 1;
        }
        let k = steps as f64;
        let mut mean = LossReport {
            l1_latent: sum.l1_latent / k,
            gan_d: sum.gan_d / k,
            gan_g: sum.gan_g / k,
            id: sum.id / k,
            rec: sum.rec / k,
            total: 0.0,
        };
        mean.total = mean.recomputed_total(&config.weights);
        log::debug!("epoch {epoch}: {mean:?}");
        on_epoch(epoch, &mean);
        history.push(mean);
    }

    let checkpoint = Checkpoint {
        topology_hash: template.topology_hash(),
        e_max: state.op.e_max(),
        normalization,
        subjects: train_subjects.clone(),
        config_echo: config.to_text(),
        net: state.net,
    };
    let outcome = TrainOutcome {
        checkpoint,
        history,
        train_subjects,
        test_subjects,
        seen_subjects: seen,
    };
    outcome.audit_split()?;
    Ok(outcome)
}

pub fn loss_csv(history: &[LossReport]) -> String {
    let mut s = String::from(LossReport::CSV_HEADER);
    s.push('\n');
    for (epoch, r) in history.iter().enumerate() {
        let _ = writeln!(s, "{}", r.csv_row(epoch));
    }
    s
}

pub fn write_loss_csv(path: impl AsRef<Path>, history: &[LossReport]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_csv(history)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossWeights;
    use crate::synthetic::{SyntheticModel, SyntheticSpec};

    fn toy_corpus(subjects: usize, expressions: usize) -> Corpus {
        let spec = SyntheticSpec {
            n_vertices: 24,
            subjects,
            expressions,
            identity_rank: 3,
            expression_rank: 2,
            ..SyntheticSpec::default()
        };
        let model = SyntheticModel::build(&spec).unwrap();
        let scans = (0..subjects)
            .map(|s| SubjectScans {
                name: crate::synthetic::subject_name(s),
                neutral: model.neutral(s).unwrap(),
                expressions: (0..expressions)
                    .map(|e| (crate::synthetic::expression_name(e), model.expressive(s, e).unwrap()))
                    .collect(),
            })
            .collect();
        Corpus::new(scans).unwrap()
    }

    fn toy_state(corpus: &Corpus, cfg: TrainConfig) -> (TrainState, Batch) {
        let names = corpus.names();
        let pairs = corpus.pairs(&names).unwrap();
        let refs: Vec<&FacePair> = pairs.iter().collect();
        let labels = pairs.iter().map(|p| names.binary_search(&p.subject).unwrap()).collect();
        let all: Vec<_> = corpus.subjects.iter().map(|s| &s.neutral).collect();
        let norm = Normalization::fit(all).unwrap();
        let batch = Batch::new(&refs, labels, &norm).unwrap();
        let op = build_laplacian(&adjacency(corpus.template())).unwrap();
        let state = TrainState::init(names.len(), op, cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (state, batch)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.0]);
        let mut adam = Adam::new(&cfg, &[&p]);
        adam.step(vec![&mut p], &[Tensor::vector(vec![0.5, -3.0, 0.0])]).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.data()[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p.data()[2], 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = TrainConfig {
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let mut p = Tensor::vector(vec![3.0, -1.5]);
        let mut adam = Adam::new(&cfg, &[&p]);
        for _ in 0..2000 {
            let g = Tensor::vector(p.data().iter().map(|v| 2.0 * (v - 1.0)).collect());
            adam.step(vec![&mut p], &[g]).unwrap();
        }
        assert!(p.data().iter().all(|v| (v - 1.0).abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn zero_heads_give_chance_level_first_losses() {
        let corpus = toy_corpus(3, 2);
        let cfg = TrainConfig {
            zero_init_heads: true,
            ..TrainConfig::default()
        };
        let (mut state, batch) = toy_state(&corpus, cfg);
        let r = train_step(&mut state, &batch).unwrap();
        assert!((r.id - 3f64.ln()).abs() < 1e-12, "{r:?}");
        assert!((r.gan_d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn phases_touch_only_their_parameters() {
        let corpus = toy_corpus(2, 2);
        let (mut state, batch) = toy_state(&corpus, TrainConfig::default());
        let before = state.net.clone();
        // lr 0 in the main phase isolates the discriminator phase
        state.adam_main.lr = 0.0;
        train_step(&mut state, &batch).unwrap();
        for part in Part::ALL {
            let changed = before.clone().tensors_mut(part).iter().zip(state.net.tensors_mut(part)).any(|(a, b)| **a != *b);
            assert_eq!(changed, part == Part::Discriminator, "{part:?}");
        }
        let before = state.net.clone();
        state.adam_main.lr = 1e-3;
        state.adam_d.lr = 0.0;
        train_step(&mut state, &batch).unwrap();
        for part in Part::ALL {
            let changed = before.clone().tensors_mut(part).iter().zip(state.net.tensors_mut(part)).any(|(a, b)| **a != *b);
            assert_eq!(changed, part != Part::Discriminator, "{part:?}");
        }
    }

    #[test]
    fn zero_identity_weight_freezes_recognizer() {
        let corpus = toy_corpus(2, 2);
        let cfg = TrainConfig {
            weights: LossWeights {
                id: 0.0,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        };
        let (mut state, batch) = toy_state(&corpus, cfg);
        let before = state.net.recognizer.clone();
        for _ in 0..3 {
            train_step(&mut state, &batch).unwrap();
        }
        assert_eq!(state.net.recognizer, before);
    }

    #[test]
    fn reconstruction_only_training_reduces_loss() {
        let corpus = toy_corpus(2, 3);
        let cfg = TrainConfig {
            weights: LossWeights {
                l2l: 0.0,
                l1: 0.0,
                gan: 0.0,
                id: 0.0,
                rec: 2.0,
            },
            ..TrainConfig::default()
        };
        let (mut state, batch) = toy_state(&corpus, cfg);
        let first = train_step(&mut state, &batch).unwrap();
        assert!((first.total - 2.0 * first.rec).abs() < 1e-12);
        let mut last = first;
        for _ in 0..199 {
            last = train_step(&mut state, &batch).unwrap();
        }
        assert!(last.rec * 10.0 <= first.rec, "rec {} -> {}", first.rec, last.rec);
    }

    #[test]
    fn training_is_deterministic_and_audited() {
        let corpus = toy_corpus(4, 2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&corpus, &cfg).unwrap();
        let b = train(&corpus, &cfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(loss_csv(&a.history), loss_csv(&b.history));
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.train_subjects.len(), 3);
        assert_eq!(a.seen_subjects.iter().cloned().collect::<Vec<_>>(), a.train_subjects);
        a.audit_split().unwrap();
        for r in &a.history {
            assert!((r.total - r.recomputed_total(&cfg.weights)).abs() < 1e-9);
        }
        let mut leaked = a.clone();
        leaked.seen_subjects.insert(a.test_subjects[0].clone());
        assert!(leaked.audit_split().is_err());
    }
}
