use super::{axis_split, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Plain 2-D matrix product.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a.dims(), b.dims())?;
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), T::zero(), &mut out, n as isize);
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(shape_err!("matmul {a:?} x {b:?}")),
    }
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.dims(), axis)?;
    let mut out = x.clone().with_requires_grad(false);
    softmax_in_place(out.data_mut(), outer, len, inner);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(data: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(data[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (data[base + j * inner] - max).exp();
                data[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                data[base + j * inner] = data[base + j * inner] / total;
            }
        }
    }
}

/// Row-wise normalization over the last axis, no affine part.
/// Returns the normalized tensor and the per-row inverse standard deviation.
pub fn layer_norm_rows<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let width = *x.dims().last().expect("rank >= 1");
    let rows = x.numel() / width;
    let mut out = x.clone().with_requires_grad(false);
    let mut inv_std = Vec::with_capacity(rows);
    let w = T::of(width as f64);
    for row in out.data_mut().chunks_mut(width) {
        let mean = row.iter().copied().sum::<T>() / w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
        let inv = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Per-token rotation angles for three-axis rotary embeddings.
///
/// The head dimension is split into equal (frame, row, col) groups; within a
/// group of width `d`, pair `j` rotates by `pos * base^(-2j/d)`.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    head_dim: usize,
    tokens: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    pub fn new(positions: &[[usize; 3]], head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 6 != 0 {
            return Err(Error::Config(format!("head_dim {head_dim} must be a positive multiple of 6")));
        }
        let axis_dim = head_dim / 3;
        let pairs_per_axis = axis_dim / 2;
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for pos in positions {
            for q in 0..half {
                let axis = q / pairs_per_axis;
                let j = q % pairs_per_axis;
                let freq = base.powf(-2.0 * j as f64 / axis_dim as f64);
                let angle = pos[axis] as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Ok(Self { head_dim, tokens: positions.len(), cos, sin })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Rotates `x` laid out as `[tokens, ..., head_dim]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x.dims())?;
        let mut out = x.clone().with_requires_grad(false);
        self.rotate(out.data_mut(), false);
        Ok(out)
    }

    pub(crate) fn check(&self, dims: &[usize]) -> Result<()> {
        if dims.first() != Some(&self.tokens) || dims.last() != Some(&self.head_dim) {
            return Err(shape_err!(
                "rope table for {} tokens x {} dims applied to {dims:?}",
                self.tokens,
                self.head_dim
            ));
        }
        Ok(())
    }

    /// In-place rotation; `inverse` rotates by the negated angles.
    pub(crate) fn rotate(&self, data: &mut [T], inverse: bool) {
        let half = self.head_dim / 2;
        let per_token = data.len() / self.tokens;
        for (l, chunk) in data.chunks_mut(per_token).enumerate() {
            let cos = &self.cos[l * half..(l + 1) * half];
            let sin = &self.sin[l * half..(l + 1) * half];
            for head in chunk.chunks_mut(self.head_dim) {
                for q in 0..half {
                    let (c, s) = (cos[q], if inverse { -sin[q] } else { sin[q] });
                    let x0 = head[2 * q];
                    let x1 = head[2 * q + 1];
                    head[2 * q] = x0 * c - x1 * s;
                    head[2 * q + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_example() {
        let a = Tensor::<f64>::from_fn(&[3, 3], |i| i as f64 * 0.5 - 1.0);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);

        let a = Tensor::<f64>::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::new(&[2, 1], vec![0., 1.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.dims(), &[2, 1]);
        assert_eq!(c.data(), &[2., 4.]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 5]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::<f64>::new(&[2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&Tensor::<f32>::new(&[2], vec![1000.0, 1000.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&Tensor::<f64>::new(&[2], vec![0.0, 3f64.ln()]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::<f64>::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Tensor::<f64>::new(&[2, 4], vec![1., 2., 3., 4., -1., 0., 5., 8.]).unwrap();
        let (y, _) = layer_norm_rows(&x, 1e-9);
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_rejects_bad_head_dim() {
        assert!(matches!(RopeTable::<f32>::new(&[[0, 0, 0]], 8, 10000.0), Err(Error::Config(_))));
    }
}
