//! Central-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Coordinates checked per tensor; larger tensors are sampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub coords_checked: usize,
    /// Sampled coordinates where every tried step changed the branch of
    /// some piecewise op; central differences are not valid there.
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub step: f64,
    pub tol: f64,
    pub max_rel_error: f64,
    pub kinks_skipped: usize,
    /// Error within `tol` and at most half of the sampled coordinates skipped.
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Function value and branch digest.
fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, Option<u64>)>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::with_branch_tracking();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = tape.value(f(&tape, &vars)?);
    if out.numel() != 1 {
        return Err(shape_err!(
            "grad_check needs a scalar function, got {:?}",
            out.dims()
        ));
    }
    let v = out.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    Ok((v, tape.branch_digest()))
}

/// Compares the tape gradient of the scalar function `f` with central
/// differences `(f(p + h) - f(p - h)) / 2h`.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    step: f64,
    tol: f64,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let (analytic, digest) = {
        let tape = Tape::with_branch_tracking();
        let vars = params
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        let digest = tape.branch_digest();
        let grads = tape.backward_scalar(out)?;
        let g = vars
            .iter()
            .zip(params)
            .map(|(v, p)| grads.get_or_zeros(*v, p.dims()))
            .collect::<Vec<_>>();
        (g, digest)
    };
    for g in &analytic {
        if !g.all_finite() {
            return Err(Error::Numeric("analytic gradient is not finite".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (k, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = if n <= options.max_coords {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, options.max_coords).into_vec()
        };
        let mut worst = (0.0f64, 0usize);
        let mut skipped = 0;
        'coord: for &i in &coords {
            let base = param.data()[i];
            // A step that crosses a kink is retried twice at a tenth of the size.
            let mut h = step;
            for _ in 0..3 {
                work[k].data_mut()[i] = base + h;
                let (plus, d_plus) = evaluate(&f, &work)?;
                work[k].data_mut()[i] = base - h;
                let (minus, d_minus) = evaluate(&f, &work)?;
                work[k].data_mut()[i] = base;
                if d_plus == digest && d_minus == digest {
                    let numeric = (plus - minus) / (2.0 * h);
                    let err = relative_error(analytic[k].data()[i], numeric);
                    if err > worst.0 {
                        worst = (err, i);
                    }
                    continue 'coord;
                }
                h *= 0.1;
            }
            skipped += 1;
        }
        reports.push(ParamCheck {
            coords_checked: coords.len() - skipped,
            kinks_skipped: skipped,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let kinks_skipped: usize = reports.iter().map(|r| r.kinks_skipped).sum();
    let checked: usize = reports.iter().map(|r| r.coords_checked).sum();
    Ok(GradCheckReport {
        params: reports,
        step,
        tol,
        max_rel_error,
        kinks_skipped,
        passed: max_rel_error <= tol && kinks_skipped <= checked,
    })
}
