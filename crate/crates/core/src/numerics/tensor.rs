//! Dense row-major tensors and the raw kernels the graph ops are built on.

use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Dense tensor of 64-bit floats, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!(
                    "shape {:?} holds {} elements, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows; rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::ShapeMismatch {
                op: "Tensor::from_rows",
                detail: "ragged rows".into(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, NumericsError> {
        Tensor::new(shape, self.data.clone())
    }

    /// Reorder axes by `perm` (a permutation of 0..rank), moving data.
    pub fn permuted(&self, perm: &[usize]) -> Result<Tensor, NumericsError> {
        let rank = self.shape.len();
        if perm.len() != rank || {
            let mut seen = vec![false; rank];
            perm.iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        } {
            return Err(NumericsError::BadShape(format!(
                "permutation {:?} invalid for rank {}",
                perm, rank
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let out_strides = strides(&out_shape);
        let mut out = vec![0.0; self.data.len()];
        let mut idx = vec![0usize; rank];
        for (flat, &v) in self.data.iter().enumerate() {
            // decode flat -> multi-index in input space
            let mut rem = flat;
            for (d, s) in in_strides.iter().enumerate() {
                idx[d] = rem / s;
                rem %= s;
            }
            let mut out_flat = 0;
            for (d, &p) in perm.iter().enumerate() {
                out_flat += idx[p] * out_strides[d];
            }
            out[out_flat] = v;
        }
        Tensor::new(out_shape, out)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// `out = a · b` where `a` is [m,k] ([k,m] if `ta`) and `b` is [k,n] ([n,k] if `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    out: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        for l in 0..k {
            let av = if ta { a[l * m + i] } else { a[i * k + l] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + l];
                }
            } else {
                let bs = &b[l * n..(l + 1) * n];
                for (o, &bv) in row.iter_mut().zip(bs) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Row-wise stable softmax for a 2-D [rows, cols] tensor; each row sums to 1.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumericsError> {
    if x.shape().len() != 2 {
        return Err(NumericsError::BadShape(format!(
            "softmax_rows wants 2-D, got {:?}",
            x.shape()
        )));
    }
    Ok(softmax_last_raw(x))
}

/// Stable softmax over the trailing axis of any tensor.
pub(crate) fn softmax_last_raw(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Sinusoidal position table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Result<Tensor, NumericsError> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(NumericsError::BadShape(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut data = Vec::with_capacity(seq_len * d_model);
    for pos in 0..seq_len {
        for i in 0..d_model / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 * freq;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![seq_len, d_model], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let p = t.permuted(&[1, 2, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 4, 2]);
        let back = p.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let tt = t.permuted(&[1, 0]).unwrap();
        assert_eq!(tt.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gemm_hand_case() {
        // [1,1] x [[2],[3]] with a 2-vector input
        let a = [1.0, 1.0];
        let b = [2.0, 3.0];
        let mut out = [0.0];
        gemm_into(&mut out, &a, &b, 1, 2, 1, false, false);
        assert_eq!(out[0], 5.0);
    }

    #[test]
    fn gemm_transpose_flags_agree() {
        // random-ish small case: C = A·B computed four ways
        let a = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.5]).unwrap();
        let b = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let mut plain = vec![0.0; 8];
        gemm_into(&mut plain, a.data(), b.data(), 2, 3, 4, false, false);
        let at = a.permuted(&[1, 0]).unwrap();
        let bt = b.permuted(&[1, 0]).unwrap();
        let mut via_ta = vec![0.0; 8];
        gemm_into(&mut via_ta, at.data(), b.data(), 2, 3, 4, true, false);
        let mut via_tb = vec![0.0; 8];
        gemm_into(&mut via_tb, a.data(), bt.data(), 2, 3, 4, false, true);
        assert_eq!(plain, via_ta);
        assert_eq!(plain, via_tb);
    }

    #[test]
    fn softmax_symmetry_and_known_values() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_rows(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for (got, want) in s.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        let sum: f64 = s.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 4.0, 2.2]]).unwrap();
        let shifted = x.map(|v| v + 123.456);
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_encoding_known_rows() {
        let pe = positional_encoding(2, 4).unwrap();
        // pos 0 -> [sin 0, cos 0, sin 0, cos 0]
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        let row1 = &pe.data()[4..];
        let expect = [0.8415, 0.5403, 0.0100, 0.99995];
        for (got, want) in row1.iter().zip(expect) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_encoding_rejects_odd_dim() {
        assert!(positional_encoding(3, 5).is_err());
    }
}
