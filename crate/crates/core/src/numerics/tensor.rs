// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense array of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch(format!(
                "add {:?} + {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Copy of rows `start..end` as a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Copy of columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * c + start..r * c + end]);
        }
        Tensor {
            shape: vec![rows, end - start],
            data,
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts
            .first()
            .ok_or_else(|| Error::Shape("vstack of nothing".into()))?
            .cols();
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "vstack columns {} vs {cols}",
                    p.cols()
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let rows = data.len() / cols;
        Tensor::new(vec![rows, cols], data)
    }
}

fn matrix_dims(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::DimensionMismatch(format!(
            "{name} must be 2-D, got {s:?}"
        ))),
    }
}

/// Matrix product `a · b` with a sequential reduction over the inner
/// dimension.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "lhs")?;
    let (k2, n) = matrix_dims(b, "rhs")?;
    if k != k2 {
        return Err(Error::DimensionMismatch(format!(
            "matmul {m}x{k} by {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Numerically stable softmax of a slice, written in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the last dimension.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if !v.is_finite() {
        return Err(Error::NonFiniteInput("softmax".into()));
    }
    let mut out = v.clone();
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Layer normalisation over the last dimension with affine gain and bias.
pub fn layer_norm(v: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor> {
    let c = v.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::DimensionMismatch(format!(
            "layer_norm width {c}, gain {}, bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = v.clone();
    for row in out.data.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, x) in row.iter_mut().enumerate() {
            *x = (*x - mean) * inv * gain[j] + bias[j];
        }
    }
    Ok(out)
}

/// GELU using the exact error-function form `x * Φ(x)`.
pub fn gelu(v: &Tensor) -> Tensor {
    let mut out = v.clone();
    for x in out.data.iter_mut() {
        *x = 0.5 * *x * (1.0 + libm::erf(*x / std::f64::consts::SQRT_2));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small() {
        let i = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);

        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let got = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut want = 0.0;
                for k in 0..7 {
                    want += a.get(i, k) * b.get(k, j);
                }
                assert!(close(got.get(i, j), want, 1e-12));
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap()).unwrap();
        assert!(close(s.data()[0], 2.0 / 3.0, 1e-15));
        assert!(close(s.data()[1], 1.0 / 3.0, 1e-15));

        let mut rng = Rng::new(3);
        let row = random(&mut rng, 1, 64);
        let s = softmax(&row).unwrap();
        assert!(close(s.data().iter().sum::<f64>(), 1.0, 1e-12));
        assert!(s.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_rejects_nan() {
        let t = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax(&t), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 4];
        let zeros = [0.0; 4];
        let t = Tensor::new(vec![4], vec![3.0; 4]).unwrap();
        let out = layer_norm(&t, &ones, &zeros, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let t = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let out = layer_norm(&t, &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap();
        assert!(close(out.data()[0], 1.0, 1e-5));
        assert!(close(out.data()[1], -1.0, 1e-5));

        // Row with spread well above eps: moments recomputed from the output.
        let mut rng = Rng::new(11);
        let t = random(&mut rng, 1, 32);
        let scaled = Tensor::new(vec![32], t.data().iter().map(|v| 10.0 * v).collect()).unwrap();
        let in_mean = scaled.data().iter().sum::<f64>() / 32.0;
        let in_var = scaled
            .data()
            .iter()
            .map(|v| (v - in_mean).powi(2))
            .sum::<f64>()
            / 32.0;
        let out = layer_norm(&scaled, &[1.0; 32], &[0.0; 32], 1e-5).unwrap();
        let mean = out.data().iter().sum::<f64>() / 32.0;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
        assert!(close(var, in_var / (in_var + 1e-5), 1e-12));
    }

    #[test]
    fn layer_norm_width_mismatch() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(layer_norm(&t, &[1.0; 2], &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn gelu_values() {
        let t = Tensor::new(vec![3], vec![0.0, 40.0, -40.0]).unwrap();
        let g = gelu(&t);
        assert_eq!(g.data()[0], 0.0);
        assert!(close(g.data()[1], 40.0, 1e-12));
        assert!(close(g.data()[2], 0.0, 1e-12));

        // Φ(1) by composite Simpson quadrature of the normal density on [0, 1].
        let n = 2000;
        let h = 1.0 / n as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(i as f64 * h);
        }
        let phi1 = 0.5 + s * h / 3.0;
        let g1 = gelu(&Tensor::new(vec![1], vec![1.0]).unwrap()).data()[0];
        assert!(close(g1, phi1, 1e-6));
        assert!(close(g1, 0.8413447, 1e-6));
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let mut rng = Rng::new(5);
        let a = random(&mut rng, 4, 6);
        let b = random(&mut rng, 6, 4);
        assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
        assert_eq!(softmax(&a).unwrap(), softmax(&a).unwrap());
        assert_eq!(gelu(&a), gelu(&a));
    }
}
