//! Dense row-major `f64` tensors and the forward kernels shared by the
//! autodiff graph and the inference path.
//!
//! All reductions accumulate sequentially in index order, so two calls with
//! identical inputs produce bit-identical results.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
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

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input; meant for
    /// fixtures and tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(dim_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows and columns of a 2-D tensor; 1-D tensors are one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "elementwise op on {:?} and {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · other` for `[m×k]·[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(dim_err!("matmul [{m}×{k}]·[{k2}×{n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// `self · otherᵀ` for `[m×k]·[n×k]ᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(dim_err!("matmul_nt [{m}×{k}]·[{n}×{k2}]ᵀ"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// `selfᵀ · other` for `[k×m]ᵀ·[k×n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(dim_err!("matmul_tn [{k}×{m}]ᵀ·[{k2}×{n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm_tn(&self.data, &other.data, &mut out, k, m, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Keeps the listed rows of a 2-D tensor (or entries of a 1-D tensor), in
    /// the order given.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if self.shape.len() == 1 {
            let data = idx
                .iter()
                .map(|&i| {
                    self.data
                        .get(i)
                        .copied()
                        .ok_or_else(|| dim_err!("index {i} out of range {cols}"))
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(Tensor::from_vec(data));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(dim_err!("row {i} out of range {rows}"));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), cols], data)
    }

    /// Keeps the listed columns of a 2-D tensor, in the order given.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if self.shape.len() != 2 {
            return Err(dim_err!("select_cols needs a matrix, got {:?}", self.shape));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(dim_err!("column {bad} out of range {cols}"));
        }
        let mut data = Vec::with_capacity(rows * idx.len());
        for i in 0..rows {
            let row = self.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Tensor::new(vec![rows, idx.len()], data)
    }
}

pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
}

pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Four-lane dot product. The lane split is fixed, so results do not depend
/// on anything but the inputs.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::Input(format!("non-finite value in {what}")));
    }
    Ok(())
}

/// Row-wise `log softmax(x / tau)` of one slice, written into `out`.
pub(crate) fn log_softmax_row(x: &[f64], tau: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let s = (v - max) / tau;
        *o = s;
        z += s.exp();
    }
    let lz = z.ln();
    for o in out.iter_mut() {
        *o -= lz;
    }
}

/// Tempered softmax over the last axis, computed in shift-by-max form.
pub fn softmax_temp(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let mut out = log_softmax_temp(logits, tau)?;
    for v in out.data_mut() {
        *v = v.exp();
    }
    Ok(out)
}

pub fn log_softmax_temp(logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    check_finite(logits, "logits")?;
    let v = *logits
        .shape()
        .last()
        .ok_or_else(|| dim_err!("softmax on a rank-0 tensor"))?;
    let mut out = vec![0.0; logits.numel()];
    if v > 0 {
        for (src, dst) in logits.data().chunks(v).zip(out.chunks_mut(v)) {
            log_softmax_row(src, tau, dst);
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Depthwise causal convolution over one sequence. `x` is `[L×C]`, `kernel`
/// is `[K×C]` with row `K-1` the tap on the current position, `bias` is `[C]`.
pub fn conv1d_causal(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (l, _) = x.dims2()?;
    conv1d_causal_batched(x, kernel, bias, l.max(1))
}

/// [`conv1d_causal`] over a stack of equal-length sequences laid out as
/// consecutive blocks of `seq_len` rows.
pub(crate) fn conv1d_causal_batched(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    seq_len: usize,
) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    let (k, kc) = kernel.dims2()?;
    if kc != c || bias.numel() != c {
        return Err(dim_err!(
            "conv1d: input has {c} channels, kernel {kc}, bias {}",
            bias.numel()
        ));
    }
    if k == 0 {
        return Err(Error::Parameter("conv1d kernel width must be ≥ 1".into()));
    }
    if seq_len == 0 || n % seq_len != 0 {
        return Err(dim_err!("{n} rows do not split into sequences of {seq_len}"));
    }
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; n * c];
    for s0 in (0..n).step_by(seq_len) {
        for t in 0..seq_len {
            let orow = &mut out[(s0 + t) * c..(s0 + t + 1) * c];
            orow.copy_from_slice(bias.data());
            for tap in 0..k {
                // tap K-1 reads position t, tap 0 reads t-(K-1)
                let back = k - 1 - tap;
                if back > t {
                    continue;
                }
                let xrow = &xd[(s0 + t - back) * c..(s0 + t - back + 1) * c];
                let krow = &kd[tap * c..(tap + 1) * c];
                for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
                    *o += kv * xv;
                }
            }
        }
    }
    Tensor::new(vec![n, c], out)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(i2.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_selector_row() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let b = Tensor::from_rows(&[vec![2.0], vec![5.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                assert!((c.at2(i, j) - s).abs() < 1e-12);
            }
        }
        let bt = b.transpose2().unwrap();
        assert!(a.matmul_nt(&bt).unwrap().max_abs_diff(&c) < 1e-12);
        let at = a.transpose2().unwrap();
        assert!(at.matmul_tn(&b).unwrap().max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&Tensor::from_vec(vec![0.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);

        let p = softmax_temp(&Tensor::from_vec(vec![2.0, 0.0]), 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);

        let p = softmax_temp(&Tensor::from_vec(vec![1000.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[5, 7], 10.0, &mut rng);
        let p = softmax_temp(&x, 0.7).unwrap();
        for r in 0..5 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_errors() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(softmax_temp(&x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax_temp(&x, -1.0), Err(Error::Parameter(_))));
        let bad = Tensor::from_vec(vec![f64::NAN, 0.0]);
        assert!(matches!(softmax_temp(&bad, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn conv_running_window() {
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![4, 1], vec![1.0; 4]).unwrap();
        let b = Tensor::from_vec(vec![0.0]);
        let y = conv1d_causal(&x, &k, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 6.0, 10.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let mut k = Tensor::zeros(&[4, 3]);
        k.data_mut()[9..12].copy_from_slice(&[1.0, 1.0, 1.0]);
        let y = conv1d_causal(&x, &k, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[8, 2], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[2], 1.0, &mut rng);
        let y = conv1d_causal(&x, &k, &b).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[3 * 2] += 5.0;
        let y2 = conv1d_causal(&x2, &k, &b).unwrap();
        assert_eq!(&y.data()[..6], &y2.data()[..6]);
        assert_ne!(y.data()[6], y2.data()[6]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[4, 2]);
        let k = Tensor::zeros(&[3, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(conv1d_causal(&x, &k, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn select_rows_and_cols() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(m.select_cols(&[2, 0]).unwrap().data(), &[3.0, 1.0, 6.0, 4.0]);
        assert_eq!(m.select_rows(&[1]).unwrap().data(), &[4.0, 5.0, 6.0]);
        let v = Tensor::from_vec(vec![7.0, 8.0, 9.0]);
        assert_eq!(v.select_rows(&[2, 1]).unwrap().data(), &[9.0, 8.0]);
        assert!(m.select_cols(&[3]).is_err());
    }
}
