//! Symmetric InfoNCE over a batch of aligned video/text embeddings.
//!
//! With `S = Z_v Z_t^T / tau`, the video->text term is the mean over pairs of
//! `-log softmax_row(S)_ii` and the text->video term the same over columns.
//! Diagonal entries are positives; every off-diagonal entry is an in-batch
//! negative in both directions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub temperature: f64,
    /// L2-normalize embeddings before the dot product.
    pub normalize: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            normalize: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::config(format!("temperature must be positive, got {}", self.temperature)))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Optimized loss: `v2t + t2v`, i.e. the summed loss divided by batch size.
    pub total: f64,
    /// Summed over pairs and both directions.
    pub sum: f64,
    pub v2t: f64,
    pub t2v: f64,
    /// Off-diagonal similarity statistics, before temperature scaling.
    /// Zero for a batch of one.
    pub mean_neg_sim: f64,
    pub max_neg_sim: f64,
    pub batch: usize,
}

/// `sim[i][j] = z_v(i) . z_t(j)` for `[N, d]` embedding matrices.
pub fn similarity<T: Scalar>(zv: &Tensor<T>, zt: &Tensor<T>) -> Result<Tensor<T>> {
    if zv.dims().len() != 2 || zv.dims() != zt.dims() {
        return Err(Error::shape(format!(
            "similarity needs equal [N, d] batches, got {:?} and {:?}",
            zv.dims(),
            zt.dims()
        )));
    }
    ops::matmul(zv, &ops::transpose(zt)?)
}

fn negative_stats<T: Scalar>(sim: &Tensor<T>) -> (f64, f64) {
    let n = sim.rows();
    if n < 2 {
        return (0.0, 0.0);
    }
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = sim.get(i, j).as_f64();
                sum += v;
                max = max.max(v);
            }
        }
    }
    (sum / (n * (n - 1)) as f64, max)
}

/// Loss nodes built by [`info_nce_graph`].
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub v2t: Var,
    pub t2v: Var,
    pub sim: Var,
}

/// Differentiable loss over `[N, d]` video and text embedding nodes.
pub fn info_nce_graph<T: Scalar>(
    g: &mut Graph<T>,
    zv: Var,
    zt: Var,
    config: &ObjectiveConfig,
) -> Result<LossNodes> {
    config.validate()?;
    let (dv, dt) = (g.value(zv).dims().to_vec(), g.value(zt).dims().to_vec());
    if dv.len() != 2 || dv != dt {
        return Err(Error::shape(format!("info_nce needs equal [N, d] batches, got {dv:?} and {dt:?}")));
    }
    let (zv, zt) = if config.normalize {
        (g.normalize_rows(zv)?, g.normalize_rows(zt)?)
    } else {
        (zv, zt)
    };
    let n = dv[0];
    let ztt = g.transpose(zt)?;
    let sim = g.matmul(zv, ztt)?;
    if !g.value(sim).is_finite() {
        return Err(Error::Training {
            tensor: "similarity".into(),
            message: "non-finite similarity".into(),
        });
    }
    let inv_n = T::from_f64(-1.0 / n as f64);
    let rows = g.log_softmax_rows(sim, config.temperature)?;
    let tr = g.trace(rows)?;
    let v2t = g.scale(tr, inv_n);
    let simt = g.transpose(sim)?;
    let cols = g.log_softmax_rows(simt, config.temperature)?;
    let tc = g.trace(cols)?;
    let t2v = g.scale(tc, inv_n);
    let total = g.add(v2t, t2v)?;
    Ok(LossNodes { total, v2t, t2v, sim })
}

/// Reads a [`LossReport`] off evaluated loss nodes.
pub fn report<T: Scalar>(g: &Graph<T>, nodes: &LossNodes) -> LossReport {
    let sim = g.value(nodes.sim);
    let n = sim.rows();
    let (mean_neg_sim, max_neg_sim) = negative_stats(sim);
    let v2t = g.value(nodes.v2t).data()[0].as_f64();
    let t2v = g.value(nodes.t2v).data()[0].as_f64();
    LossReport {
        total: v2t + t2v,
        sum: (v2t + t2v) * n as f64,
        v2t,
        t2v,
        mean_neg_sim,
        max_neg_sim,
        batch: n,
    }
}

/// Loss on a precomputed (temperature-free) similarity matrix.
pub fn info_nce<T: Scalar>(sim: &Tensor<T>, temperature: f64) -> Result<LossReport> {
    if sim.dims().len() != 2 || sim.rows() != sim.cols() || sim.rows() == 0 {
        return Err(Error::shape(format!("similarity must be square, got {:?}", sim.dims())));
    }
    if !sim.is_finite() {
        return Err(Error::input("non-finite similarity"));
    }
    let n = sim.rows();
    let diag_mean = |m: &Tensor<T>| -> f64 { -(0..n).map(|i| m.get(i, i).as_f64()).sum::<f64>() / n as f64 };
    let v2t = diag_mean(&ops::log_softmax_rows(sim, temperature)?);
    let t2v = diag_mean(&ops::log_softmax_rows(&ops::transpose(sim)?, temperature)?);
    let (mean_neg_sim, max_neg_sim) = negative_stats(sim);
    Ok(LossReport {
        total: v2t + t2v,
        sum: (v2t + t2v) * n as f64,
        v2t,
        t2v,
        mean_neg_sim,
        max_neg_sim,
        batch: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let r = info_nce(&t(&[vec![3.7]]), 1.0).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.mean_neg_sim, 0.0);
    }

    #[test]
    fn uniform_two_by_two() {
        let r = info_nce(&t(&[vec![0.5, 0.5], vec![0.5, 0.5]]), 1.0).unwrap();
        assert!((r.sum - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((r.sum - 2.77259).abs() < 1e-5);
    }

    #[test]
    fn diagonal_two_by_two() {
        let r = info_nce(&t(&[vec![2.0, 0.0], vec![0.0, 2.0]]), 1.0).unwrap();
        let e2 = 2f64.exp();
        assert!((r.sum + 4.0 * (e2 / (e2 + 1.0)).ln()).abs() < 1e-12);
        assert!((r.sum - 0.507712).abs() < 1e-6);
        assert_eq!(r.max_neg_sim, 0.0);
    }

    #[test]
    fn similarity_examples() {
        let e = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(similarity(&e, &e).unwrap(), e);
        let u = t(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert!(similarity(&u, &u).unwrap().data().iter().all(|&v| v == 5.0));
        assert!(similarity(&e, &u).is_err());
    }

    #[test]
    fn graph_matches_direct_evaluation() {
        let zv = t(&[vec![0.3, -1.0, 0.2], vec![0.9, 0.1, -0.4], vec![-0.2, 0.5, 0.7]]);
        let zt = t(&[vec![0.1, -0.8, 0.3], vec![1.1, 0.0, -0.2], vec![0.0, 0.2, 0.9]]);
        let cfg = ObjectiveConfig {
            temperature: 0.7,
            normalize: false,
        };
        let mut g = Graph::new();
        let (a, b) = (g.leaf(zv.clone()), g.leaf(zt.clone()));
        let nodes = info_nce_graph(&mut g, a, b, &cfg).unwrap();
        let via_graph = report(&g, &nodes);
        let direct = info_nce(&similarity(&zv, &zt).unwrap(), 0.7).unwrap();
        assert!((via_graph.total - direct.total).abs() < 1e-12);
        assert!((via_graph.v2t - direct.v2t).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_temperature() {
        assert!(matches!(info_nce(&t(&[vec![1.0]]), 0.0), Err(Error::Config(_))));
    }
}
