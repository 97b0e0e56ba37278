//! Self-checks shared by the command line and the acceptance suite:
//! finite-difference gradient checks, the spectral filter oracle, and
//! randomized invariants of the graph operators, losses and metrics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{gradient_check, gradient_check_sampled, GradCheckReport, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evaluation::{cosine_similarity, mean_vertex_error, rank1_identify};
use crate::layers::{cheb_conv, fully_connected, spectral_oracle, ChebConvParams, FcParams};
use crate::losses::{
    discriminator_loss_tape, gan_losses, generator_loss_tape, identity_ce, identity_ce_tape, latent_l1,
    latent_l1_tape, reconstruction, reconstruction_tape, total_loss, weighted_sum_tape, LossWeights,
};
use crate::mesh::{adjacency, build_laplacian, GraphOperator, GraphTopology, TriMesh};
use crate::models::{FaceNet, FaceNetVars, ModelFlags, Part, LATENT_DIM};
use crate::synthetic::template_mesh;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-10;
/// Coordinates probed per parameter tensor and point in model checks.
const SAMPLED_COORDS: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst observed value of the checked quantity.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value < tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {:.3e} (tolerance {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

fn merge(reports: &[GradCheckReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

/// `sum(y * w)` for a fixed random `w`, which keeps the checked scalar O(1)
/// and gives every output coordinate a distinct weight.
fn probe_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn small_operator() -> Result<(TriMesh, GraphOperator)> {
    let mesh = template_mesh(12)?;
    let op = build_laplacian(&adjacency(&mesh))?;
    Ok((mesh, op))
}

/// Finite-difference checks of every layer, model and loss at `points`
/// random points each.
pub fn gradient_suite(seed: u64, points: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, op) = small_operator()?;
    let n = op.n();
    let mut out = Vec::new();

    // layers
    let mut cheb = Vec::new();
    let mut fc = Vec::new();
    for _ in 0..points {
        let order = rng.random_range(1..=6);
        let (fi, fo) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let params = ChebConvParams::new(
            order,
            Tensor::uniform([order * fi, fo], 1.0, &mut rng),
            Tensor::uniform([fo], 1.0, &mut rng),
        )?;
        let x = Tensor::uniform([2, n, fi], 1.0, &mut rng);
        let w = Tensor::uniform([2, n, fo], 1.0, &mut rng);
        let scaled = op.scaled();
        cheb.push(gradient_check(
            |t, xv| {
                let v = params.bind(t, false);
                let y = cheb_conv(t, xv, scaled, &v)?;
                probe_sum(t, y, &w)
            },
            &x,
            GRAD_STEP,
        )?);
        cheb.push(gradient_check(
            |t, th| {
                let mut v = params.bind(t, false);
                v.theta = th;
                let xv = t.constant(x.clone());
                let y = cheb_conv(t, xv, scaled, &v)?;
                probe_sum(t, y, &w)
            },
            &params.theta,
            GRAD_STEP,
        )?);
        cheb.push(gradient_check(
            |t, b| {
                let mut v = params.bind(t, false);
                v.bias = b;
                let xv = t.constant(x.clone());
                let y = cheb_conv(t, xv, scaled, &v)?;
                probe_sum(t, y, &w)
            },
            &params.bias,
            GRAD_STEP,
        )?);

        let (fi, fo) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let params = FcParams::new(Tensor::uniform([fi, fo], 1.0, &mut rng), Tensor::uniform([fo], 1.0, &mut rng))?;
        let x = Tensor::uniform([3, fi], 1.0, &mut rng);
        let w = Tensor::uniform([3, fo], 1.0, &mut rng);
        for which in 0..3 {
            let point = [&x, &params.weight, &params.bias][which];
            fc.push(gradient_check(
                |t, p| {
                    let mut v = params.bind(t, false);
                    let xv = match which {
                        0 => p,
                        1 => {
                            v.weight = p;
                            t.constant(x.clone())
                        }
                        _ => {
                            v.bias = p;
                            t.constant(x.clone())
                        }
                    };
                    let y = fully_connected(t, xv, &v)?;
                    probe_sum(t, y, &w)
                },
                point,
                GRAD_STEP,
            )?);
        }
    }
    out.push(CheckResult::below("layer cheb_conv", merge(&cheb), GRAD_TOLERANCE));
    out.push(CheckResult::below("layer fully_connected", merge(&fc), GRAD_TOLERANCE));

    // models: gradients with respect to the input and to every parameter
    type Forward = fn(&mut Tape, &FaceNetVars, &GraphOperator, Var, Var) -> Result<Var>;
    let models: [(&str, Part, Forward); 6] = [
        ("model encoder", Part::Encoder, |t, v, op, x, _| v.encode(t, op.scaled(), x)),
        ("model decoder", Part::Decoder, |t, v, op, z, _| v.decode(t, op.scaled(), z)),
        ("model generator", Part::Generator, |t, v, _, z, _| v.translate(t, z)),
        ("model generator (linear head)", Part::Generator, |t, v, _, z, _| v.translate(t, z)),
        ("model discriminator", Part::Discriminator, |t, v, _, z, c| v.discriminate(t, z, c)),
        ("model recognizer", Part::Recognizer, |t, v, _, z, _| v.recognize(t, z)),
    ];
    for (name, part, forward) in models {
        let mut reports = Vec::new();
        for _ in 0..points {
            let flags = ModelFlags {
                paper_literal_decoder_relu: false,
                generator_linear_head: name.contains("linear"),
            };
            let net = FaceNet::init(n, 4, flags, &mut rng)?;
            let input = if part == Part::Encoder {
                Tensor::uniform([2, n, 3], 1.0, &mut rng)
            } else {
                Tensor::uniform([2, LATENT_DIM], 1.0, &mut rng)
            };
            let cond = Tensor::uniform([2, LATENT_DIM], 1.0, &mut rng);
            let out_shape = {
                let mut t = Tape::new();
                let v = net.bind(&mut t, |_| false);
                let (x, c) = (t.constant(input.clone()), t.constant(cond.clone()));
                let y = forward(&mut t, &v, &op, x, c)?;
                t.value(y).shape().to_vec()
            };
            let w = Tensor::uniform(out_shape, 1.0, &mut rng);
            reports.push(gradient_check(
                |t, x| {
                    let v = net.bind(t, |_| false);
                    let c = t.constant(cond.clone());
                    let y = forward(t, &v, &op, x, c)?;
                    probe_sum(t, y, &w)
                },
                &input,
                GRAD_STEP,
            )?);
            if part == Part::Discriminator {
                reports.push(gradient_check(
                    |t, c| {
                        let v = net.bind(t, |_| false);
                        let x = t.constant(input.clone());
                        let y = forward(t, &v, &op, x, c)?;
                        probe_sum(t, y, &w)
                    },
                    &cond,
                    GRAD_STEP,
                )?);
            }
            let tensors: Vec<Tensor> = net.clone().tensors_mut(part).into_iter().map(|t| t.clone()).collect();
            for (k, tensor) in tensors.iter().enumerate() {
                reports.push(gradient_check_sampled(
                    |t, p| {
                        let mut v = net.bind(t, |_| false);
                        v.replace(part, k, p)?;
                        let (x, c) = (t.constant(input.clone()), t.constant(cond.clone()));
                        let y = forward(t, &v, &op, x, c)?;
                        probe_sum(t, y, &w)
                    },
                    tensor,
                    GRAD_STEP,
                    SAMPLED_COORDS,
                    &mut rng,
                )?);
            }
        }
        out.push(CheckResult::below(name, merge(&reports), GRAD_TOLERANCE));
    }

    // losses
    let mut l1 = Vec::new();
    let mut gan = Vec::new();
    let mut ce = Vec::new();
    let mut rec = Vec::new();
    let mut total = Vec::new();
    for _ in 0..points {
        let other = Tensor::uniform([2, LATENT_DIM], 1.0, &mut rng);
        l1.push(gradient_check(
            |t, x| {
                let o = t.constant(other.clone());
                latent_l1_tape(t, x, o)
            },
            &Tensor::uniform([2, LATENT_DIM], 1.0, &mut rng),
            GRAD_STEP,
        )?);

        let probs = |rng: &mut ChaCha8Rng| Tensor::new([3, 1], (0..3).map(|_| rng.random_range(0.05..0.95)).collect());
        let (real, fake) = (probs(&mut rng)?, probs(&mut rng)?);
        gan.push(gradient_check(
            |t, r| {
                let f = t.constant(fake.clone());
                discriminator_loss_tape(t, r, f)
            },
            &real,
            GRAD_STEP,
        )?);
        gan.push(gradient_check(
            |t, f| {
                let r = t.constant(real.clone());
                discriminator_loss_tape(t, r, f)
            },
            &fake,
            GRAD_STEP,
        )?);
        for saturating in [false, true] {
            gan.push(gradient_check(|t, f| Ok(generator_loss_tape(t, f, saturating)), &fake, GRAD_STEP)?);
        }

        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
        ce.push(gradient_check(
            |t, logits| {
                let p = t.softmax_last_axis(logits);
                identity_ce_tape(t, p, &labels)
            },
            &Tensor::uniform([3, 5], 2.0, &mut rng),
            GRAD_STEP,
        )?);

        let gt = Tensor::uniform([2, n, 3], 1.0, &mut rng);
        let dec_other = Tensor::uniform([2, n, 3], 1.0, &mut rng);
        rec.push(gradient_check(
            |t, x| {
                let (o, g) = (t.constant(dec_other.clone()), t.constant(gt.clone()));
                reconstruction_tape(t, x, o, g)
            },
            &Tensor::uniform([2, n, 3], 1.0, &mut rng),
            GRAD_STEP,
        )?);

        // the full training objective, differentiated through every network
        let net = FaceNet::init(n, 3, ModelFlags::default(), &mut rng)?;
        let x_n = Tensor::uniform([2, n, 3], 1.0, &mut rng);
        let labels = vec![rng.random_range(0..3), rng.random_range(0..3)];
        let weights = LossWeights::default();
        let scaled = op.scaled();
        total.push(gradient_check(
            |t, x_e| {
                let v = net.bind(t, |_| false);
                let x_n = t.constant(x_n.clone());
                let z_e = v.encode(t, scaled, x_e)?;
                let z_n = v.encode(t, scaled, x_n)?;
                let g = v.translate(t, z_e)?;
                let l1 = latent_l1_tape(t, g, z_n)?;
                let d = v.discriminate(t, g, z_e)?;
                let gl = generator_loss_tape(t, d, false);
                let l2l = weighted_sum_tape(t, &[(weights.l1, l1), (weights.gan, gl)])?;
                let (pg, pn) = (v.recognize(t, g)?, v.recognize(t, z_n)?);
                let (cg, cn) = (identity_ce_tape(t, pg, &labels)?, identity_ce_tape(t, pn, &labels)?);
                let id = weighted_sum_tape(t, &[(0.5, cg), (0.5, cn)])?;
                let (dn, dg) = (v.decode(t, scaled, z_n)?, v.decode(t, scaled, g)?);
                let rec = reconstruction_tape(t, dn, dg, x_n)?;
                weighted_sum_tape(t, &[(weights.l2l, l2l), (weights.id, id), (weights.rec, rec)])
            },
            &Tensor::uniform([2, n, 3], 1.0, &mut rng),
            GRAD_STEP,
        )?);
    }
    out.push(CheckResult::below("loss latent_l1", merge(&l1), GRAD_TOLERANCE));
    out.push(CheckResult::below("loss gan", merge(&gan), GRAD_TOLERANCE));
    out.push(CheckResult::below("loss identity_ce", merge(&ce), GRAD_TOLERANCE));
    out.push(CheckResult::below("loss reconstruction", merge(&rec), GRAD_TOLERANCE));
    out.push(CheckResult::below("loss total", merge(&total), GRAD_TOLERANCE));
    Ok(out)
}

/// Random connected graph: a random tree plus each remaining pair with
/// probability `extra`.
pub fn random_connected_graph(n: usize, extra: f64, rng: &mut impl Rng) -> Result<GraphTopology> {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.random_range(0..v), v));
    }
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(extra) {
                edges.push((a, b));
            }
        }
    }
    GraphTopology::new(n, edges)
}

fn dense_eigenvalues(m: &crate::sparse::CsrMatrix) -> Result<Vec<f64>> {
    let n = m.rows();
    SymmetricEigen::try_new(DMatrix::from_row_slice(n, n, &m.to_dense()), 1e-14, 10_000)
        .map(|e| e.eigenvalues.iter().copied().collect())
        .ok_or_else(|| Error::Eigen("dense eigensolver did not converge".into()))
}

/// Chebyshev recursion against the dense spectral filter on `graphs`
/// random connected graphs, and power iteration against the dense
/// eigensolver on the same graphs.
pub fn oracle_suite(seed: u64, graphs: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_filter: f64 = 0.0;
    let mut worst_emax: f64 = 0.0;
    for _ in 0..graphs {
        let n = rng.random_range(2..=8);
        let topo = random_connected_graph(n, 0.3, &mut rng)?;
        let op = build_laplacian(&topo)?;
        let (fi, fo, order) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=6));
        let params = ChebConvParams::new(
            order,
            Tensor::uniform([order * fi, fo], 1.0, &mut rng),
            Tensor::uniform([fo], 1.0, &mut rng),
        )?;
        let x = Tensor::uniform([n, fi], 1.0, &mut rng);
        let fast = params.forward(&x, &op)?;
        let slow = spectral_oracle(&x, op.laplacian(), op.e_max(), &params)?;
        worst_filter = worst_filter.max(fast.max_abs_diff(&slow));
        let exact = dense_eigenvalues(op.laplacian())?.into_iter().fold(f64::MIN, f64::max);
        worst_emax = worst_emax.max((op.e_max() - exact).abs() / exact);
    }
    Ok(vec![
        CheckResult::below("cheb_conv vs spectral oracle (max abs diff)", worst_filter, ORACLE_TOLERANCE),
        CheckResult::below("e_max vs dense eigensolver (relative)", worst_emax, 1e-8),
    ])
}

/// Randomized invariants of the graph operators, the losses and the
/// evaluation metrics. Each value is the worst violation found.
pub fn invariant_suite(seed: u64, trials: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row_sum: f64 = 0.0;
    let mut asym: f64 = 0.0;
    let mut psd: f64 = 0.0;
    let mut spectrum: f64 = 0.0;
    for i in 0..trials {
        let topo = if i % 4 == 0 {
            adjacency(&template_mesh([12, 16, 20, 24][i / 4 % 4])?)
        } else {
            random_connected_graph(rng.random_range(2..=16), 0.25, &mut rng)?
        };
        let op = build_laplacian(&topo)?;
        let l = op.laplacian();
        row_sum = row_sum.max(l.row_sums().iter().map(|v| v.abs()).fold(0.0, f64::max));
        for r in 0..l.rows() {
            for (c, v) in l.row(r) {
                asym = asym.max((v - l.get(c, r)).abs());
            }
        }
        for _ in 0..100 {
            let x: Vec<f64> = (0..l.rows()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lx = l.matvec(&x);
            let q: f64 = x.iter().zip(&lx).map(|(a, b)| a * b).sum();
            psd = psd.max(-q);
        }
        for e in dense_eigenvalues(op.scaled())? {
            spectrum = spectrum.max(-1.0 - e).max(e - 1.0);
        }
    }

    let mut loss_violation: f64 = 0.0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..LATENT_DIM).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..LATENT_DIM).map(|_| rng.random_range(-3.0..3.0)).collect();
        loss_violation = loss_violation
            .max(latent_l1(&a, &a)?.abs())
            .max(reconstruction(&a, &a, &a)?.abs())
            .max(-latent_l1(&a, &b)?)
            .max(-reconstruction(&a, &b, &a)?);
        let s = rng.random_range(2..10);
        let label = rng.random_range(0..s);
        let mut onehot = vec![0.0; s];
        onehot[label] = 1.0;
        loss_violation = loss_violation.max(identity_ce(&onehot, label)?.abs());
        let (d, g) = gan_losses(rng.random(), rng.random(), false);
        loss_violation = loss_violation.max(-d).max(-g);
        let w = LossWeights::default();
        let (x, y, z) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        let base = total_loss(x, y, z, &w);
        loss_violation = loss_violation
            .max(base - total_loss(x + 0.1, y, z, &w))
            .max(base - total_loss(x, y + 0.1, z, &w))
            .max(base - total_loss(x, y, z + 0.1, &w));
    }

    let mut metric: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let template = template_mesh(12)?;
    let jitter = |rng: &mut ChaCha8Rng| {
        let v = template
            .vertices()
            .iter()
            .map(|p| p.map(|c| c + rng.random_range(-5.0..5.0)))
            .collect();
        template.with_vertices(v)
    };
    for _ in 0..trials {
        let (a, b, c) = (jitter(&mut rng)?, jitter(&mut rng)?, jitter(&mut rng)?);
        let ab = mean_vertex_error(&a, &b)?;
        metric = metric
            .max((ab - mean_vertex_error(&b, &a)?).abs())
            .max(mean_vertex_error(&a, &a)?)
            .max(ab - mean_vertex_error(&a, &c)? - mean_vertex_error(&c, &b)?)
            .max(-ab);

        let dim = 6;
        let gallery: Vec<(Vec<f64>, String)> = (0..5)
            .map(|i| ((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), format!("s{i}")))
            .collect();
        let probes: Vec<(Vec<f64>, String)> = (0..8)
            .map(|i| ((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), format!("s{}", i % 5)))
            .collect();
        let scaled = |set: &[(Vec<f64>, String)], rng: &mut ChaCha8Rng| -> Vec<(Vec<f64>, String)> {
            set.iter()
                .map(|(e, l)| {
                    let k = rng.random_range(0.01..100.0);
                    (e.iter().map(|v| v * k).collect(), l.clone())
                })
                .collect()
        };
        let acc = rank1_identify(&gallery, &probes)?;
        let acc_scaled = rank1_identify(&scaled(&gallery, &mut rng), &scaled(&probes, &mut rng))?;
        scale = scale.max((acc - acc_scaled).abs());
        let (e, _) = &gallery[0];
        let k = rng.random_range(0.01..100.0);
        let e2: Vec<f64> = e.iter().map(|v| v * k).collect();
        scale = scale.max((cosine_similarity(e, &e2)? - 1.0).abs());
    }

    Ok(vec![
        CheckResult::below("laplacian row sums", row_sum, 1e-12),
        CheckResult::below("laplacian symmetry", asym, 1e-15),
        CheckResult::below("laplacian quadratic form >= 0", psd, 1e-10),
        CheckResult::below("scaled laplacian spectrum in [-1, 1]", spectrum, 1e-6),
        CheckResult::below("losses nonnegative, zero at fixed point, monotone total", loss_violation, 1e-12),
        CheckResult::below("vertex error metric axioms", metric, 1e-9),
        CheckResult::below("cosine / rank-1 scale invariance", scale, 1e-12),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_at_reduced_size() {
        for r in gradient_suite(1, 2).unwrap() {
            assert!(r.passed, "{}", r.line());
        }
        for r in oracle_suite(2, 5).unwrap() {
            assert!(r.passed, "{}", r.line());
        }
        for r in invariant_suite(3, 8).unwrap() {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn random_graphs_are_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 2..12 {
            assert_eq!(random_connected_graph(n, 0.1, &mut rng).unwrap().connected_components(), 1);
        }
    }
}
