//! TopK sparse coders: the transcoder that stands in for an MLP block and the
//! sparse autoencoder on the residual stream.
//!
//! Both compute `W2 · TopK(W1 x + b1) + b2`, the transcoder adding a linear
//! skip term `W_skip · x`. TopK picks the `k` largest pre-activations by raw
//! value and then clamps any negative survivor to zero, so latents are always
//! non-negative and at most `k` are nonzero.

mod io;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{dot, topk_indices, Matrix, Real, SplitMix64};

pub use train::{train_coder, CoderTrainConfig, TrainLog};

/// Bound of the uniform W1 init is `W1_GAIN / sqrt(d_model)`.
pub const W1_GAIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoderKind {
    Transcoder,
    Sae,
}

/// Sparse latent vector: `(latent, value)` pairs in ascending latent order,
/// every value strictly positive.
pub type SparseLatents = Vec<(u32, f32)>;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseCoder<T: Real = f32> {
    pub kind: CoderKind,
    pub k: usize,
    /// n_latents × d_model
    pub w1: Matrix<T>,
    /// 1 × n_latents
    pub b1: Matrix<T>,
    /// d_model × n_latents
    pub w2: Matrix<T>,
    /// d_model × d_model; absent for the SAE.
    pub w_skip: Option<Matrix<T>>,
    /// 1 × d_model
    pub b2: Matrix<T>,
}

/// Paired coder inputs and regression targets, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDataset {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl ActivationDataset {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(invalid(format!(
                "inputs have {} rows but targets have {}",
                inputs.rows(),
                targets.rows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Keeps the top `k` entries of `pre` and clamps negatives to zero, in place.
pub fn topk_clamped<T: Real>(pre: &mut [T], k: usize) -> Result<()> {
    let keep = topk_indices(pre, k)?;
    let mut next = keep.iter().peekable();
    for (i, v) in pre.iter_mut().enumerate() {
        if next.peek() == Some(&&i) {
            next.next();
            if v.as_f64() < 0.0 {
                *v = T::zero();
            }
        } else {
            *v = T::zero();
        }
    }
    Ok(())
}

impl<T: Real> SparseCoder<T> {
    /// Fresh coder that outputs the sample mean for every input.
    pub fn init(
        kind: CoderKind,
        n_latents: usize,
        k: usize,
        target_sample: &Matrix<T>,
        seed: u64,
    ) -> Result<Self> {
        let d = target_sample.cols();
        if target_sample.rows() == 0 {
            return Err(invalid("cannot initialize a coder from an empty sample"));
        }
        if d == 0 || n_latents == 0 {
            return Err(invalid("coder dimensions must be positive"));
        }
        if k > n_latents {
            return Err(invalid(format!("k = {k} exceeds n_latents = {n_latents}")));
        }
        let mut rng = SplitMix64::derive(seed, "coder-init");
        let bound = W1_GAIN / (d as f64).sqrt();
        let w1 = Matrix::from_fn(n_latents, d, |_, _| T::cast(rng.uniform(-bound, bound)));
        let n = target_sample.rows() as f64;
        let b2: Vec<T> = target_sample
            .col_sums()
            .into_iter()
            .map(|s| T::cast(s / n))
            .collect();
        Ok(Self {
            kind,
            k,
            w1,
            b1: Matrix::zeros(1, n_latents),
            w2: Matrix::zeros(d, n_latents),
            w_skip: (kind == CoderKind::Transcoder).then(|| Matrix::zeros(d, d)),
            b2: Matrix::row_vector(b2),
        })
    }

    /// Drops the skip connection.
    pub fn without_skip(mut self) -> Self {
        self.w_skip = None;
        self
    }

    pub fn d_model(&self) -> usize {
        self.w1.cols()
    }

    pub fn n_latents(&self) -> usize {
        self.w1.rows()
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.d_model() {
            return Err(invalid(format!(
                "input has length {}, coder expects {}",
                x.len(),
                self.d_model()
            )));
        }
        Ok(())
    }

    /// `W1 x + b1`.
    pub fn pre_activations(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        Ok(self
            .w1
            .matvec(x)
            .into_iter()
            .zip(self.b1.data())
            .map(|(a, b)| a + *b)
            .collect())
    }

    /// Dense post-TopK latent vector.
    pub fn encode_dense(&self, x: &[T]) -> Result<Vec<T>> {
        let mut pre = self.pre_activations(x)?;
        topk_clamped(&mut pre, self.k)?;
        Ok(pre)
    }

    /// Output for a dense latent vector; only its nonzeros are read.
    pub fn decode(&self, latents: &[T], x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        if latents.len() != self.n_latents() {
            return Err(invalid("latent vector length does not match coder"));
        }
        let d = self.d_model();
        let active: Vec<(usize, f64)> = latents
            .iter()
            .enumerate()
            .filter(|(_, v)| v.as_f64() != 0.0)
            .map(|(j, v)| (j, v.as_f64()))
            .collect();
        let mut out = Vec::with_capacity(d);
        for i in 0..d {
            let row = self.w2.row(i);
            let mut acc = active
                .iter()
                .map(|&(j, v)| row[j].as_f64() * v)
                .sum::<f64>();
            if let Some(ws) = &self.w_skip {
                acc += dot(ws.row(i), x);
            }
            out.push(T::cast(acc + self.b2.data()[i].as_f64()));
        }
        Ok(out)
    }

    /// Skip path plus bias: the output when every latent is zero.
    pub fn skip_only(&self, x: &[T]) -> Result<Vec<T>> {
        self.decode(&vec![T::zero(); self.n_latents()], x)
    }

    /// Returns the output and the dense latent vector.
    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let z = self.encode_dense(x)?;
        let y = self.decode(&z, x)?;
        Ok((y, z))
    }

    /// Outputs for every row of `x`.
    pub fn forward_batch(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = Vec::with_capacity(x.rows() * self.d_model());
        for r in 0..x.rows() {
            out.extend(self.forward(x.row(r))?.0);
        }
        Matrix::new(x.rows(), self.d_model(), out)
    }

    pub fn tensor_names(&self) -> Vec<&'static str> {
        let mut v = vec!["w1", "b1", "w2"];
        if self.w_skip.is_some() {
            v.push("w_skip");
        }
        v.push("b2");
        v
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut v = vec![&self.w1, &self.b1, &self.w2];
        if let Some(s) = &self.w_skip {
            v.push(s);
        }
        v.push(&self.b2);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = vec![&mut self.w1, &mut self.b1, &mut self.w2];
        if let Some(s) = &mut self.w_skip {
            v.push(s);
        }
        v.push(&mut self.b2);
        v
    }

    pub fn convert<U: Real>(&self) -> SparseCoder<U> {
        SparseCoder {
            kind: self.kind,
            k: self.k,
            w1: self.w1.convert(),
            b1: self.b1.convert(),
            w2: self.w2.convert(),
            w_skip: self.w_skip.as_ref().map(|m| m.convert()),
            b2: self.b2.convert(),
        }
    }

    /// Summed squared error over the batch, with gradients (scaled by
    /// `grad_scale`) accumulated into `grads`.
    pub fn loss_and_grad(
        &self,
        x: &Matrix<T>,
        target: &Matrix<T>,
        grads: &mut SparseCoder<T>,
        grad_scale: f64,
    ) -> Result<f64> {
        let d = self.d_model();
        if x.cols() != d || target.cols() != d || x.rows() != target.rows() {
            return Err(invalid("batch shape does not match coder"));
        }
        let w2t = self.w2.transpose();
        let mut loss = 0.0;
        for r in 0..x.rows() {
            let xr = x.row(r);
            let (y, z) = self.forward(xr)?;
            let dy: Vec<f64> = y
                .iter()
                .zip(target.row(r))
                .map(|(a, b)| a.as_f64() - b.as_f64())
                .collect();
            loss += dy.iter().map(|v| v * v).sum::<f64>();
            let dy: Vec<f64> = dy.iter().map(|v| 2.0 * v * grad_scale).collect();
            for (g, v) in grads.b2.data_mut().iter_mut().zip(&dy) {
                *g += T::cast(*v);
            }
            if let (Some(gs), Some(_)) = (&mut grads.w_skip, &self.w_skip) {
                for (i, dv) in dy.iter().enumerate() {
                    for (g, xv) in gs.row_mut(i).iter_mut().zip(xr) {
                        *g += T::cast(dv * xv.as_f64());
                    }
                }
            }
            for (j, zv) in z.iter().enumerate() {
                let zv = zv.as_f64();
                if zv == 0.0 {
                    continue;
                }
                for (i, dv) in dy.iter().enumerate() {
                    let g = &mut grads.w2.data_mut()[i * self.n_latents() + j];
                    *g += T::cast(dv * zv);
                }
                let dpre: f64 = w2t
                    .row(j)
                    .iter()
                    .zip(&dy)
                    .map(|(w, v)| w.as_f64() * v)
                    .sum();
                grads.b1.data_mut()[j] += T::cast(dpre);
                for (g, xv) in grads.w1.row_mut(j).iter_mut().zip(xr) {
                    *g += T::cast(dpre * xv.as_f64());
                }
            }
        }
        Ok(loss)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(T::zero()));
        z
    }
}

impl SparseCoder<f32> {
    /// Sparse latents of one input.
    pub fn encode(&self, x: &[f32]) -> Result<SparseLatents> {
        Ok(to_sparse(&self.encode_dense(x)?))
    }

    /// Sparse latents of every row of `x`.
    pub fn encode_batch(&self, x: &Matrix) -> Result<Vec<SparseLatents>> {
        (0..x.rows()).map(|r| self.encode(x.row(r))).collect()
    }
}

pub fn to_sparse(dense: &[f32]) -> SparseLatents {
    dense
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(j, v)| (j as u32, *v))
        .collect()
}

pub fn to_dense(sparse: &SparseLatents, n_latents: usize) -> Vec<f32> {
    let mut out = vec![0f32; n_latents];
    for &(j, v) in sparse {
        out[j as usize] = v;
    }
    out
}

/// Fraction of variance unexplained: squared residuals over squared
/// deviations of the targets from their mean.
pub fn fvu(coder: &SparseCoder, data: &ActivationDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let n = data.len() as f64;
    let means: Vec<f64> = data.targets.col_sums().into_iter().map(|s| s / n).collect();
    let mut ssr = 0.0;
    let mut sst = 0.0;
    for r in 0..data.len() {
        let (y, _) = coder.forward(data.inputs.row(r))?;
        for ((yv, tv), m) in y.iter().zip(data.targets.row(r)).zip(&means) {
            let t = *tv as f64;
            ssr += (*yv as f64 - t).powi(2);
            sst += (t - m).powi(2);
        }
    }
    if sst == 0.0 {
        return Err(Error::UndefinedMetric("targets have zero variance".into()));
    }
    Ok(ssr / sst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(rows: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = SplitMix64::new(seed);
        Matrix::from_fn(rows, d, |_, c| (rng.normal() + c as f64) as f32)
    }

    #[test]
    fn constant_at_init() {
        let s = sample(50, 6, 1);
        let c = SparseCoder::init(CoderKind::Transcoder, 24, 4, &s, 3).unwrap();
        let mut rng = SplitMix64::new(9);
        for _ in 0..100 {
            let x: Vec<f32> = (0..6).map(|_| (rng.normal() * 10.0) as f32).collect();
            assert_eq!(c.forward(&x).unwrap().0, c.b2.data());
        }
        let data = ActivationDataset::new(s.clone(), s.clone()).unwrap();
        assert!((fvu(&c, &data).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn init_rejects_bad_input_and_is_seeded() {
        let empty = Matrix::<f32>::zeros(0, 4);
        assert!(SparseCoder::init(CoderKind::Sae, 8, 2, &empty, 0).is_err());
        let s = sample(5, 4, 2);
        assert!(SparseCoder::init(CoderKind::Sae, 8, 9, &s, 0).is_err());
        let a = SparseCoder::init(CoderKind::Sae, 8, 2, &s, 5).unwrap();
        let b = SparseCoder::init(CoderKind::Sae, 8, 2, &s, 5).unwrap();
        assert_eq!(a.w1, b.w1);
        assert!(a.w_skip.is_none());
    }

    #[test]
    fn init_mse_equals_sample_variance() {
        let s = sample(40, 3, 4);
        let c = SparseCoder::init(CoderKind::Transcoder, 6, 2, &s, 0).unwrap();
        let mut grads = c.zeros_like();
        let sse = c.loss_and_grad(&s, &s, &mut grads, 0.0).unwrap();
        let n = 40.0;
        let var_sum: f64 = (0..3)
            .map(|col| {
                let xs: Vec<f64> = (0..40).map(|r| s.get(r, col) as f64).collect();
                let m = xs.iter().sum::<f64>() / n;
                xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
            })
            .sum();
        assert!((sse / n - var_sum).abs() < 1e-4 * var_sum);
    }

    #[test]
    fn hand_built_three_dim_case() {
        // k = n, W1 = I, W2 = I, no skip: output = clamp(x + b1) + b2.
        let c = SparseCoder::<f64> {
            kind: CoderKind::Transcoder,
            k: 3,
            w1: Matrix::identity(3),
            b1: Matrix::row_vector(vec![0.5, 0.0, -1.0]),
            w2: Matrix::identity(3),
            w_skip: Some(Matrix::zeros(3, 3)),
            b2: Matrix::row_vector(vec![1.0, 2.0, 3.0]),
        };
        let (y, z) = c.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(z, vec![1.5, 0.0, 0.0]);
        assert_eq!(y, vec![2.5, 2.0, 3.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = sample(5, 4, 2);
        let c = SparseCoder::init(CoderKind::Transcoder, 8, 2, &s, 0).unwrap();
        assert!(c.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_variance_fvu_is_undefined() {
        let s = Matrix::from_fn(4, 2, |_, _| 1.0f32);
        let c = SparseCoder::init(CoderKind::Sae, 4, 1, &s, 0).unwrap();
        let data = ActivationDataset::new(s.clone(), s).unwrap();
        assert!(matches!(fvu(&c, &data), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(11);
        let d = 8;
        let x = Matrix::<f64>::from_fn(12, d, |_, _| rng.normal());
        let t = Matrix::<f64>::from_fn(12, d, |_, _| rng.normal());
        let mut c = SparseCoder::<f64>::init(CoderKind::Transcoder, 16, 4, &t, 2).unwrap();
        for m in c.tensors_mut() {
            for v in m.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        let mut grads = c.zeros_like();
        c.loss_and_grad(&x, &t, &mut grads, 1.0).unwrap();
        let h = 1e-6;
        let names = c.tensor_names();
        for ti in 0..names.len() {
            let analytic = grads.tensors()[ti].clone();
            let mut numeric = analytic.clone();
            for i in 0..analytic.data().len() {
                let orig = c.tensors()[ti].data()[i];
                let mut g = c.zeros_like();
                c.tensors_mut()[ti].data_mut()[i] = orig + h;
                let lp = c.loss_and_grad(&x, &t, &mut g, 0.0).unwrap();
                c.tensors_mut()[ti].data_mut()[i] = orig - h;
                let lm = c.loss_and_grad(&x, &t, &mut g, 0.0).unwrap();
                c.tensors_mut()[ti].data_mut()[i] = orig;
                numeric.data_mut()[i] = (lp - lm) / (2.0 * h);
            }
            let mut diff = analytic.clone();
            numeric.scale(-1.0);
            diff.add_assign(&numeric);
            let scale = analytic.sum_sq().sqrt().max(numeric.sum_sq().sqrt());
            let rel = diff.sum_sq().sqrt() / scale;
            assert!(rel <= 1e-3, "{}: relative error {rel:e}", names[ti]);
        }
    }

    proptest! {
        #[test]
        fn latents_are_sparse_and_nonnegative(seed in 0u64..500, k in 0usize..12) {
            let s = sample(3, 5, seed);
            let mut c = SparseCoder::init(CoderKind::Transcoder, 12, k, &s, seed).unwrap();
            let mut rng = SplitMix64::new(seed);
            c.b1 = Matrix::from_fn(1, 12, |_, _| rng.normal() as f32);
            let x: Vec<f32> = (0..5).map(|_| rng.normal() as f32).collect();
            let z = c.encode_dense(&x).unwrap();
            let nnz = z.iter().filter(|v| **v != 0.0).count();
            prop_assert!(nnz <= k);
            prop_assert!(z.iter().all(|v| *v >= 0.0));
            let pre = c.pre_activations(&x).unwrap();
            let positive = pre.iter().filter(|v| **v > 0.0).count();
            if positive >= k {
                prop_assert_eq!(nnz, k);
            }
            let mut again = pre.clone();
            topk_clamped(&mut again, k).unwrap();
            prop_assert_eq!(again, z);
        }
    }
}
