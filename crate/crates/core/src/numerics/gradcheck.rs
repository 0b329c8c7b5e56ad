use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Denominator floor for relative errors, so that coordinates whose true
/// gradient is (near) zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per tensor; tensors at most this large are checked
    /// exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    /// `(tensor index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check function must return a scalar"));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences in double precision.
///
/// `f` receives a fresh graph and one leaf per entry of `params` (in order)
/// and returns the scalar output node.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let n = params[ti].numel();
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, n, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = params[ti].data()[j];
            work[ti].data_mut()[j] = orig + opts.step;
            let plus = eval(&f, &work)?;
            work[ti].data_mut()[j] = orig - opts.step;
            let minus = eval(&f, &work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel = relative_error(analytic[j], numeric);
            report.max_abs_error = report.max_abs_error.max((analytic[j] - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, j));
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 4.5]).unwrap();
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.coords_checked, 5);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let s = g.stop_gradient(v[0]);
                let z = g.scale(s, 0.0);
                Ok(g.sum(z))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_abs_error, 0.0);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn samples_large_tensors() {
        let x = Tensor::new(vec![200], (0..200).map(|i| i as f64 * 0.01).collect()).unwrap();
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.coords_checked, 64);
    }
}
