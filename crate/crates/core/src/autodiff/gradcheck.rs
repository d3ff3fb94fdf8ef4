use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{FrozenValues, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// both essentially zero compare by absolute difference.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink (different branch of
    /// `abs`, `min`, `clamp`, a bilinear cell boundary, …).
    pub skipped: usize,
    pub passed: bool,
}

fn evaluate<F>(f: &F, inputs: &[Tensor], frozen: Option<&FrozenValues>) -> Result<(Tape, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = match frozen {
        Some(v) => Tape::replaying(v.clone()),
        None => Tape::new(),
    };
    tape.track_branches(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::Autodiff(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(root)
        )));
    }
    Ok((tape, root))
}

/// Compares tape gradients of `f` against central finite differences.
///
/// Values produced through [`Tape::frozen`] in the unperturbed evaluation
/// are replayed in the perturbed ones, so stop-gradient quantities stay
/// constant exactly as the analytic gradient assumes.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(cfg.eps > 0.0) || !(cfg.tol > 0.0) || !(cfg.abs_floor > 0.0) {
        return Err(Error::invalid("eps, tol and abs_floor must be positive"));
    }
    let (mut tape, root) = evaluate(&f, inputs, None)?;
    let base_hash = tape.branch_hash();
    let frozen = tape.frozen_values();
    let vars: Vec<Var> = (0..inputs.len()).map(tape_var).collect();
    let grads = tape.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        passed: false,
    };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input.numel());
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < input.numel() => {
                let mut c = index::sample(&mut rng, input.numel(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.numel()).collect(),
        };
        let mut perturbed = inputs.to_vec();
        for j in coords {
            let x = input.data()[j];
            let mut side = |delta: f64| -> Result<(f64, u64)> {
                perturbed[i].data_mut()[j] = x + delta;
                let (t, r) = evaluate(&f, &perturbed, Some(&frozen))?;
                Ok((t.value(r).item(), t.branch_hash()))
            };
            let (fp, hp) = side(cfg.eps)?;
            let (fm, hm) = side(-cfg.eps)?;
            perturbed[i].data_mut()[j] = x;
            if hp != base_hash || hm != base_hash {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.checked > 0 && report.max_rel_error <= cfg.tol;
    Ok(report)
}

// Inputs are registered first, so their ids are their positions.
fn tape_var(i: usize) -> Var {
    Var::from_index(i)
}
