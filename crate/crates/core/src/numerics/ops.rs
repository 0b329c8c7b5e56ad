//! Forward kernels on plain tensors.
//!
//! Every reduction walks its operands left to right in a fixed order so that
//! identical inputs give bit-identical outputs. The differentiable versions
//! live on [`Graph`](super::Graph) and call into these.

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn expect_2d<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.dims() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        d => Err(Error::shape(format!("{what}: expected a matrix, got dims {d:?}"))),
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`, i-k-j loop order. Each output element sums its
/// `k` products in ascending `k`.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_ip * b_pj;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_2d(a, "matmul lhs")?;
    let (k2, n) = expect_2d(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(Tensor::from_parts(
        vec![m, n],
        matmul_raw(a.data(), b.data(), m, k, n),
    ))
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = expect_2d(a, "transpose")?;
    Ok(Tensor::from_parts(vec![c, r], transpose_raw(a.data(), r, c)))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "add: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.dims().to_vec(), data))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "mul: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_parts(a.dims().to_vec(), data))
}

/// Adds a `[d]` or `[1, d]` row to every row of `x`.
pub fn add_row<T: Scalar>(x: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = expect_2d(x, "add_row")?;
    if row.numel() != c {
        return Err(Error::shape(format!(
            "add_row: row of {} elements for {c} columns",
            row.numel()
        )));
    }
    let mut data = x.data().to_vec();
    for i in 0..r {
        for (v, &b) in data[i * c..(i + 1) * c].iter_mut().zip(row.data()) {
            *v = *v + b;
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), data))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "temperature must be positive and finite, got {temperature}"
        )))
    }
}

/// Row-wise softmax of `x / temperature`, stabilized by subtracting the row max.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let (r, c) = expect_2d(x, "softmax_rows")?;
    let inv = T::from_f64(1.0 / temperature);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let o = &mut out[i * c..(i + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut denom = T::zero();
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = ((v - max) * inv).exp();
            denom = denom + *dst;
        }
        for dst in o.iter_mut() {
            *dst = *dst / denom;
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

/// Row-wise log-softmax of `x / temperature`.
pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let (r, c) = expect_2d(x, "log_softmax_rows")?;
    let inv = T::from_f64(1.0 / temperature);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let o = &mut out[i * c..(i + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut denom = T::zero();
        for &v in row {
            denom = denom + ((v - max) * inv).exp();
        }
        let log_denom = denom.ln();
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = (v - max) * inv - log_denom;
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh form.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let data = x
        .data()
        .iter()
        .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
        .collect();
    Tensor::from_parts(x.dims().to_vec(), data)
}

pub(crate) fn gelu_grad<T: Scalar>(v: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (v + a * v * v * v)).tanh();
    half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v)
}

pub(crate) struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_raw<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rows: usize,
    cols: usize,
) -> LayerNormOut<T> {
    let n = T::from_f64(cols as f64);
    let eps = T::from_f64(LAYER_NORM_EPS);
    let mut y = vec![T::zero(); rows * cols];
    let mut xhat = vec![T::zero(); rows * cols];
    let mut rstd = vec![T::zero(); rows];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
        let var = row
            .iter()
            .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
            / n;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..cols {
            let h = (row[j] - mean) * r;
            xhat[i * cols + j] = h;
            y[i * cols + j] = h * gamma[j] + beta[j];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

/// Per-row normalization to zero mean and unit variance, then scale and shift.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (r, c) = expect_2d(x, "layer_norm")?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape("layer_norm: gamma/beta width mismatch"));
    }
    let out = layer_norm_raw(x.data(), gamma.data(), beta.data(), r, c);
    Ok(Tensor::from_parts(x.dims().to_vec(), out.y))
}

/// Column means of a matrix, as a `[1, d]` row.
pub fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = expect_2d(x, "mean_rows")?;
    let mut out = vec![T::zero(); c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(&x.data()[i * c..(i + 1) * c]) {
            *o = *o + v;
        }
    }
    let n = T::from_f64(r as f64);
    for o in &mut out {
        *o = *o / n;
    }
    Ok(Tensor::from_parts(vec![1, c], out))
}

pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (v, d) = expect_2d(table, "embedding table")?;
    if ids.is_empty() {
        return Err(Error::input("embedding lookup with no ids"));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::input(format!(
                "token id {id} out of vocabulary of size {v}"
            )));
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], out))
}

/// Plain dot product, summed left to right.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]);
        assert_eq!(matmul(&id, &m).unwrap(), m);

        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[1, 3], &[0.0, 0.0, 0.0]), 1.0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax_rows(&t(&[1, 2], &[2.0, 0.0]), 1.0).unwrap();
        let e2 = 2f64.exp();
        assert!((s.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((s.data()[0] - 0.8808).abs() < 1e-4);
        assert!((s.data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_high_temperature_is_near_uniform() {
        let x = t(&[1, 4], &[-1.0, 1.0, 0.3, -0.7]);
        let s = softmax_rows(&x, 1e4).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let x = t(&[1, 2], &[0.0, 1.0]);
        assert!(matches!(softmax_rows(&x, 0.0), Err(Error::Config(_))));
        assert!(matches!(softmax_rows(&x, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn mean_rows_examples() {
        let r = [0.5, -2.0, 3.0];
        let x = t(&[3, 3], &[r, r, r].concat());
        assert_eq!(mean_rows(&x).unwrap().data(), &r);
        let x = t(&[2, 2], &[1.0, 3.0, 3.0, 1.0]);
        assert_eq!(mean_rows(&x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = t(&[2, 3], &[0.1, -3.0, 2.0, 5.0, 5.0, -1.0]);
        let a = log_softmax_rows(&x, 0.7).unwrap();
        let b = softmax_rows(&x, 0.7).unwrap();
        for (la, pb) in a.data().iter().zip(b.data()) {
            assert!((la - pb.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let table = t(&[3, 2], &[0.0; 6]);
        assert!(embedding_lookup(&table, &[0, 2]).is_ok());
        assert!(matches!(
            embedding_lookup(&table, &[3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]);
        let g = t(&[4], &[1.0; 4]);
        let b = t(&[4], &[0.0; 4]);
        let y = layer_norm(&x, &g, &b).unwrap();
        for i in 0..2 {
            let row = y.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
