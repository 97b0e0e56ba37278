//! Training objectives: latent L1, conditional adversarial losses, identity
//! cross-entropy, mesh reconstruction, and their weighted combinations.
//!
//! Each objective has a tape form used for training and a plain form on
//! values. Batch aggregation is always the mean over samples; L1 norms are
//! plain sums within a sample.

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs in
/// the adversarial losses.
pub const PROB_EPS: f64 = 1e-7;
/// Lower clamp on class probabilities before the cross-entropy log.
pub const CE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l2l: f64,
    pub l1: f64,
    pub gan: f64,
    pub id: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l2l: 0.5,
            l1: 0.4,
            gan: 1.0,
            id: 0.05,
            rec: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l2l, self.l1, self.gan, self.id, self.rec];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Per-term values of one step or one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l1_latent: f64,
    pub gan_d: f64,
    pub gan_g: f64,
    pub id: f64,
    pub rec: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "epoch,l1_latent,gan_d,gan_g,id,rec,total";

    pub fn csv_row(&self, epoch: usize) -> String {
        format!(
            "{epoch},{},{},{},{},{},{}",
            self.l1_latent, self.gan_d, self.gan_g, self.id, self.rec, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.l1_latent, self.gan_d, self.gan_g, self.id, self.rec, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Total recomputed from the logged terms.
    pub fn recomputed_total(&self, w: &LossWeights) -> f64 {
        total_loss(l2l_total(self.l1_latent, self.gan_g, w), self.id, self.rec, w)
    }
}

/// Sum of absolute differences of one pair of codes.
pub fn latent_l1(z_gen: &[f64], z_n: &[f64]) -> Result<f64> {
    if z_gen.len() != z_n.len() {
        return Err(Error::shape("latent_l1", format!("{} vs {}", z_gen.len(), z_n.len())));
    }
    Ok(z_gen.iter().zip(z_n).map(|(a, b)| (a - b).abs()).sum())
}

/// `(d_loss, g_loss)` for one sample. `d_loss = -[ln D(real) + ln(1 - D(fake))]`;
/// `g_loss = -ln D(fake)`, or `ln(1 - D(fake))` when `saturating`.
pub fn gan_losses(d_real: f64, d_fake: f64, saturating: bool) -> (f64, f64) {
    let r = d_real.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let f = d_fake.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let d_loss = -(r.ln() + (1.0 - f).ln());
    let g_loss = if saturating { (1.0 - f).ln() } else { -f.ln() };
    (d_loss, g_loss)
}

pub fn l2l_total(l1: f64, g_loss: f64, w: &LossWeights) -> f64 {
    w.l1 * l1 + w.gan * g_loss
}

/// `-ln p[label]` with `p` clamped below at [`CE_EPS`].
pub fn identity_ce(pred: &[f64], label: usize) -> Result<f64> {
    if label >= pred.len() {
        return Err(Error::InvalidLabel {
            label,
            classes: pred.len(),
        });
    }
    Ok(-pred[label].max(CE_EPS).ln())
}

/// `|dec_n - gt|_1 + |dec_gen - gt|_1` for one sample.
pub fn reconstruction(dec_n: &[f64], dec_gen: &[f64], gt_n: &[f64]) -> Result<f64> {
    if dec_n.len() != gt_n.len() || dec_gen.len() != gt_n.len() {
        return Err(Error::shape(
            "reconstruction",
            format!("{} / {} vs {}", dec_n.len(), dec_gen.len(), gt_n.len()),
        ));
    }
    let a: f64 = dec_n.iter().zip(gt_n).map(|(p, g)| (p - g).abs()).sum();
    let b: f64 = dec_gen.iter().zip(gt_n).map(|(p, g)| (p - g).abs()).sum();
    Ok(a + b)
}

pub fn total_loss(l2l: f64, id: f64, rec: f64, w: &LossWeights) -> f64 {
    w.l2l * l2l + w.id * id + w.rec * rec
}

fn batch_of(tape: &Tape, v: Var) -> usize {
    tape.value(v).shape()[0]
}

/// Batch mean of per-sample code L1 distances; inputs `[batch, d]`.
pub fn latent_l1_tape(tape: &mut Tape, z_gen: Var, z_n: Var) -> Result<Var> {
    let b = batch_of(tape, z_gen);
    let diff = tape.sub(z_gen, z_n)?;
    let s = tape.abs_sum(diff);
    Ok(tape.scale(s, 1.0 / b as f64))
}

fn clamped_log(tape: &mut Tape, p: Var) -> Var {
    let c = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    tape.log(c)
}

fn clamped_log_complement(tape: &mut Tape, p: Var) -> Var {
    let c = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let neg = tape.scale(c, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    tape.log(one_minus)
}

/// Discriminator objective, batch mean.
pub fn discriminator_loss_tape(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let lr = clamped_log(tape, d_real);
    let lf = clamped_log_complement(tape, d_fake);
    let both = tape.add(lr, lf)?;
    let m = tape.mean(both);
    Ok(tape.scale(m, -1.0))
}

/// Generator objective, batch mean.
pub fn generator_loss_tape(tape: &mut Tape, d_fake: Var, saturating: bool) -> Var {
    if saturating {
        let l = clamped_log_complement(tape, d_fake);
        tape.mean(l)
    } else {
        let l = clamped_log(tape, d_fake);
        let m = tape.mean(l);
        tape.scale(m, -1.0)
    }
}

/// Mean cross-entropy of `probs: [batch, s]` against integer labels,
/// written as `-sum_j y_j ln p_j` with one-hot `y`.
pub fn identity_ce_tape(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("identity_ce", format!("probs {shape:?} for {} labels", labels.len())));
    }
    let classes = shape[1];
    let mut onehot = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidLabel { label: l, classes });
        }
        onehot[i * classes + l] = 1.0;
    }
    let y = tape.constant(crate::diff::Tensor::new(shape, onehot)?);
    let c = tape.clamp(probs, CE_EPS, f64::INFINITY);
    let logp = tape.log(c);
    let picked = tape.mul(y, logp)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / labels.len() as f64))
}

/// Batch mean of the two reconstruction L1 terms; inputs `[batch, n, 3]`.
pub fn reconstruction_tape(tape: &mut Tape, dec_n: Var, dec_gen: Var, gt_n: Var) -> Result<Var> {
    let b = batch_of(tape, gt_n);
    let dn = tape.sub(dec_n, gt_n)?;
    let dg = tape.sub(dec_gen, gt_n)?;
    let a = tape.abs_sum(dn);
    let c = tape.abs_sum(dg);
    let s = tape.add(a, c)?;
    Ok(tape.scale(s, 1.0 / b as f64))
}

/// Weighted sum `w_a * a + w_b * b` of two scalar nodes.
pub fn weighted_sum_tape(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let s = tape.scale(v, w);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    acc.ok_or_else(|| Error::Invalid("empty weighted sum".into()))
}
