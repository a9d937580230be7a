use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    Step(f64),
    #[error("loss function is not reproducible: {first} then {second}")]
    NotReproducible { first: f64, second: f64 },
    #[error("loss function returned {got} gradients for {want} parameters")]
    GradientCount { want: usize, got: usize },
    #[error("loss evaluation failed: {0}")]
    Loss(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares analytic gradients against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on `samples` randomly chosen coordinates
/// (all coordinates when `samples` covers them). The error of one
/// coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F, E>(
    params: &[Tensor],
    mut loss_and_grad: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>), E>,
    E: std::fmt::Display,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(GradCheckError::Step(eps));
    }
    let mut eval = |p: &[Tensor]| loss_and_grad(p).map_err(|e| GradCheckError::Loss(e.to_string()));
    let (first, grads) = eval(params)?;
    let (second, _) = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NotReproducible { first, second });
    }
    if grads.len() != params.len() {
        return Err(GradCheckError::GradientCount {
            want: params.len(),
            got: grads.len(),
        });
    }

    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        let mut picks = sample(&mut rng, total, samples).into_vec();
        picks.sort_unstable();
        picks
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: chosen.len(),
        worst: None,
    };
    for flat in chosen {
        let (mut p, mut idx) = (0, flat);
        while idx >= params[p].len() {
            idx -= params[p].len();
            p += 1;
        }
        let original = params[p].data()[idx];
        work[p].data_mut()[idx] = original + eps;
        let (plus, _) = eval(&work)?;
        work[p].data_mut()[idx] = original - eps;
        let (minus, _) = eval(&work)?;
        work[p].data_mut()[idx] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[p].data()[idx];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((p, idx, analytic, numeric));
        }
    }
    Ok(report)
}
