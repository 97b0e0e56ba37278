//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check over a set of coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±step` probes landed on a different side of a
    /// relu/abs/clamp kink than the base point; central differences are
    /// meaningless there, so they are excluded.
    pub skipped_kinks: usize,
    pub worst: Option<WorstCoordinate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, point: &Tensor) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let root = f(&mut tape, x)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::shape("gradient_check", format!("root shape {:?}", v.shape())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok((v, tape.kink_signature()))
}

/// Compares the tape gradient of `f` at `point` with central differences
/// over every coordinate. `f` receives the tape and the leaf holding the
/// (perturbed) point and returns a scalar node.
pub fn gradient_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    gradient_check_coords(f, point, step, &coords)
}

/// Same as [`gradient_check`] restricted to `count` coordinates sampled
/// without replacement; used for large parameter tensors.
pub fn gradient_check_sampled<F, R>(f: F, point: &Tensor, step: f64, count: usize, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut coords = sample(rng, point.len(), count.min(point.len())).into_vec();
    coords.sort_unstable();
    gradient_check_coords(f, point, step, &coords)
}

pub fn gradient_check_coords<F>(f: F, point: &Tensor, step: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let root = f(&mut tape, x)?;
    let analytic = tape.backward(root)?.get_or_zeros(&tape, x);
    if !analytic.is_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let base_sig = tape.kink_signature();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (plus, sig_plus) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let (minus, sig_minus) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(WorstCoordinate {
                index: i,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}
