//! Pre-norm decoder-only transformer with learned positional embeddings,
//! GELU MLPs and hand-derived backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{dot, Matrix, Real, SplitMix64};

const LN_EPS: f64 = 1e-5;
/// Standard deviation of the normal weight init. With layer-normed features
/// of unit scale the initial logits have std ≈ 0.02·√d_model, which keeps
/// the initial cross entropy within a few percent of ln(vocab).
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub hook_layer: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            layers: 4,
            d_model: 128,
            d_mlp: 512,
            heads: 4,
            seq_len: 64,
            hook_layer: 2,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2
            || self.layers == 0
            || self.d_model == 0
            || self.d_mlp == 0
            || self.seq_len < 2
        {
            return Err(invalid(format!("degenerate model config {self:?}")));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.hook_layer >= self.layers {
            return Err(invalid(format!(
                "hook_layer {} must be below layers {}",
                self.hook_layer, self.layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookPoint {
    /// Input of the hook layer's MLP (the second layer norm's output).
    MlpIn,
    /// Output of the hook layer's MLP, before it is added to the residual.
    MlpOut,
    /// Residual stream after the hook layer.
    Resid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Real> {
    pub ln1_g: Matrix<T>,
    pub ln1_b: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ln2_g: Matrix<T>,
    pub ln2_b: Matrix<T>,
    pub w_in: Matrix<T>,
    pub b_in: Matrix<T>,
    pub w_out: Matrix<T>,
    pub b_out: Matrix<T>,
}

const BLOCK_TENSORS: [&str; 12] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w_in", "b_in", "w_out", "b_out",
];

impl<T: Real> Block<T> {
    fn tensors(&self) -> [&Matrix<T>; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_in,
            &self.b_in,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix<T>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

/// The toy language model. The same type doubles as a gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLm<T: Real = f32> {
    pub config: LmConfig,
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Matrix<T>,
    pub lnf_b: Matrix<T>,
    pub unembed: Matrix<T>,
}

/// Captured hook-layer activations from one forward pass.
#[derive(Clone, Debug)]
pub struct HookedRun<T: Real> {
    pub logits: Matrix<T>,
    pub mlp_in: Matrix<T>,
    pub mlp_out: Matrix<T>,
    pub resid: Matrix<T>,
}

/// Everything needed to re-evaluate the last position's logits after the
/// hook layer's output at that position has been replaced.
///
/// Positions before the last are unaffected by such a patch (attention is
/// causal), so the keys and values of the layers above the hook are cached.
#[derive(Clone, Debug)]
pub struct PrefixState<T: Real> {
    pub mlp_in: Vec<T>,
    pub mlp_out: Vec<T>,
    /// Residual at the last position after attention, before the MLP add.
    pub resid_mid: Vec<T>,
    /// Residual at the last position after the hook layer.
    pub resid: Vec<T>,
    upper_kv: Vec<(Matrix<T>, Matrix<T>)>,
}

struct LnCache<T: Real> {
    xhat: Matrix<T>,
    rstd: Vec<f64>,
}

struct LayerCache<T: Real> {
    ln1: LnCache<T>,
    a: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    o: Matrix<T>,
    ln2: LnCache<T>,
    x_mid: Matrix<T>,
    h: Matrix<T>,
    u: Matrix<T>,
    g: Matrix<T>,
}

struct ForwardCache<T: Real> {
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    xf: Matrix<T>,
}

fn layer_norm<T: Real>(x: &Matrix<T>, g: &Matrix<T>, b: &Matrix<T>) -> (Matrix<T>, LnCache<T>) {
    let (rows, d) = x.shape();
    let mut xhat = Matrix::zeros(rows, d);
    let mut out = Matrix::zeros(rows, d);
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (g.data(), b.data());
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (i, v) in row.iter().enumerate() {
            xh[i] = T::cast((v.as_f64() - mean) * rs);
        }
        let o = out.row_mut(r);
        for i in 0..d {
            o[i] = T::cast(xh_at(&xhat, r, i) * g[i].as_f64() + b[i].as_f64());
        }
    }
    (out, LnCache { xhat, rstd })
}

#[inline]
fn xh_at<T: Real>(m: &Matrix<T>, r: usize, c: usize) -> f64 {
    m.get(r, c).as_f64()
}

fn layer_norm_backward<T: Real>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    g: &Matrix<T>,
    dg: &mut Matrix<T>,
    db: &mut Matrix<T>,
) -> Matrix<T> {
    let (rows, d) = dy.shape();
    let mut dx = Matrix::zeros(rows, d);
    let g = g.data();
    let mut dg_acc = vec![0f64; d];
    let mut db_acc = vec![0f64; d];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut dxhat = vec![0f64; d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let dyv = dyr[i].as_f64();
            let xv = xh[i].as_f64();
            dg_acc[i] += dyv * xv;
            db_acc[i] += dyv;
            dxhat[i] = dyv * g[i].as_f64();
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xv;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for i in 0..d {
            out[i] = T::cast(rs * (dxhat[i] - mean_dxhat - xh[i].as_f64() * mean_dxhat_xhat));
        }
    }
    for i in 0..d {
        dg.data_mut()[i] += T::cast(dg_acc[i]);
        db.data_mut()[i] += T::cast(db_acc[i]);
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax over the causal prefix `0..=i` of row `i`, in f64.
fn causal_softmax<T: Real>(scores: &Matrix<T>, offset: usize) -> Matrix<T> {
    let (rows, cols) = scores.shape();
    let mut p = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let limit = (i + offset + 1).min(cols);
        let row = &scores.row(i)[..limit];
        let m = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out = p.row_mut(i);
        for (j, e) in exps.iter().enumerate() {
            out[j] = T::cast(e / z);
        }
    }
    p
}

fn add_bias<T: Real>(m: &mut Matrix<T>, b: &Matrix<T>) {
    m.add_row_broadcast(b.data());
}

fn accumulate_col_sums<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.col_sums()) {
        *d += T::cast(s);
    }
}

impl<T: Real> ToyLm<T> {
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(seed, "lm-init");
        let d = config.d_model;
        let mut normal = |rows: usize, cols: usize, std: f64| {
            Matrix::from_fn(rows, cols, |_, _| T::cast(rng.normal() * std))
        };
        let resid_std = INIT_STD / (2.0 * config.layers as f64).sqrt();
        let tok_emb = normal(config.vocab_size, d, INIT_STD);
        let pos_emb = normal(config.seq_len, d, INIT_STD);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_g: Matrix::from_fn(1, d, |_, _| T::cast(1.0)),
                ln1_b: Matrix::zeros(1, d),
                wq: normal(d, d, INIT_STD),
                wk: normal(d, d, INIT_STD),
                wv: normal(d, d, INIT_STD),
                wo: normal(d, d, resid_std),
                ln2_g: Matrix::from_fn(1, d, |_, _| T::cast(1.0)),
                ln2_b: Matrix::zeros(1, d),
                w_in: normal(config.d_mlp, d, INIT_STD),
                b_in: Matrix::zeros(1, config.d_mlp),
                w_out: normal(d, config.d_mlp, resid_std),
                b_out: Matrix::zeros(1, d),
            })
            .collect();
        let unembed = normal(config.vocab_size, d, INIT_STD);
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Matrix::from_fn(1, d, |_, _| T::cast(1.0)),
            lnf_b: Matrix::zeros(1, d),
            unembed,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn tensor_names(config: &LmConfig) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..config.layers {
            names.extend(BLOCK_TENSORS.iter().map(|n| format!("blocks.{l}.{n}")));
        }
        names.extend(["lnf_g", "lnf_b", "unembed"].map(String::from));
        names
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.unembed]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.unembed]);
        out
    }

    /// Rebuilds a model from tensors in `tensor_names` order.
    pub fn from_tensors(config: LmConfig, tensors: Vec<Matrix<T>>) -> Result<Self> {
        config.validate()?;
        let mut template = Self::init(config.clone(), 0)?;
        if tensors.len() != template.tensors().len() {
            return Err(invalid("wrong number of tensors for model config"));
        }
        for (dst, src) in template.tensors_mut().into_iter().zip(tensors) {
            if !dst.same_shape(&src) {
                return Err(invalid(format!(
                    "tensor shape {:?} does not match config {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
        Ok(template)
    }

    pub fn convert<U: Real>(&self) -> ToyLm<U> {
        let tensors = self.tensors().into_iter().map(|t| t.convert()).collect();
        ToyLm::from_tensors(self.config.clone(), tensors).expect("same config")
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.rows() * t.cols()).sum()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        if tokens.len() > self.config.seq_len {
            return Err(invalid(format!(
                "sequence of {} tokens exceeds seq_len {}",
                tokens.len(),
                self.config.seq_len
            )));
        }
        if let Some(t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(invalid(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Matrix<T> {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            let (e, p) = (self.tok_emb.row(tok as usize), self.pos_emb.row(t));
            for (i, o) in x.row_mut(t).iter_mut().enumerate() {
                *o = e[i] + p[i];
            }
        }
        x
    }

    fn attention(
        &self,
        blk: &Block<T>,
        a: &Matrix<T>,
    ) -> (
        Matrix<T>,
        Matrix<T>,
        Matrix<T>,
        Matrix<T>,
        Vec<Matrix<T>>,
        Matrix<T>,
    ) {
        let q = a.matmul_nt(&blk.wq);
        let k = a.matmul_nt(&blk.wk);
        let v = a.matmul_nt(&blk.wv);
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = Matrix::zeros(a.rows(), self.config.d_model);
        let mut probs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (qh, kh, vh) = (
                q.col_slice(h * dh, dh),
                k.col_slice(h * dh, dh),
                v.col_slice(h * dh, dh),
            );
            let mut s = qh.matmul_nt(&kh);
            s.scale(scale);
            let p = causal_softmax(&s, 0);
            o.set_col_slice(h * dh, &p.matmul(&vh));
            probs.push(p);
        }
        let out = o.matmul_nt(&blk.wo);
        (out, q, k, v, probs, o)
    }

    fn mlp(&self, blk: &Block<T>, h: &Matrix<T>) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let mut u = h.matmul_nt(&blk.w_in);
        add_bias(&mut u, &blk.b_in);
        let g = u.map(|x| T::cast(gelu(x.as_f64())));
        let mut out = g.matmul_nt(&blk.w_out);
        add_bias(&mut out, &blk.b_out);
        (out, u, g)
    }

    fn unembed_logits(&self, x: &Matrix<T>) -> (Matrix<T>, LnCache<T>, Matrix<T>) {
        let (xf, cache) = layer_norm(x, &self.lnf_g, &self.lnf_b);
        (xf.matmul_nt(&self.unembed), cache, xf)
    }

    fn forward_impl(
        &self,
        tokens: &[u32],
        hook: &mut dyn FnMut(HookPoint, &mut Matrix<T>),
        mut cache: Option<&mut Vec<LayerCache<T>>>,
    ) -> Result<(Matrix<T>, LnCache<T>, Matrix<T>)> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        for (l, blk) in self.blocks.iter().enumerate() {
            let hooked = l == self.config.hook_layer;
            let (a, ln1) = layer_norm(&x, &blk.ln1_g, &blk.ln1_b);
            let (attn_out, q, k, v, probs, o) = self.attention(blk, &a);
            x.add_assign(&attn_out);
            let (mut h, ln2) = layer_norm(&x, &blk.ln2_g, &blk.ln2_b);
            let x_mid = if cache.is_some() {
                x.clone()
            } else {
                Matrix::zeros(0, 0)
            };
            if hooked {
                hook(HookPoint::MlpIn, &mut h);
            }
            let (mut mlp_out, u, g) = self.mlp(blk, &h);
            if hooked {
                hook(HookPoint::MlpOut, &mut mlp_out);
            }
            x.add_assign(&mlp_out);
            if hooked {
                hook(HookPoint::Resid, &mut x);
            }
            if let Some(c) = cache.as_deref_mut() {
                c.push(LayerCache {
                    ln1,
                    a,
                    q,
                    k,
                    v,
                    probs,
                    o,
                    ln2,
                    x_mid,
                    h,
                    u,
                    g,
                });
            }
        }
        Ok(self.unembed_logits(&x))
    }

    /// Plain forward pass; returns `tokens.len() × vocab` logits.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        Ok(self.forward_impl(tokens, &mut |_, _| {}, None)?.0)
    }

    /// Forward pass with a callback that may read or overwrite the hook-layer
    /// activations in place.
    pub fn forward_patched(
        &self,
        tokens: &[u32],
        hook: &mut dyn FnMut(HookPoint, &mut Matrix<T>),
    ) -> Result<Matrix<T>> {
        Ok(self.forward_impl(tokens, hook, None)?.0)
    }

    /// Forward pass capturing the MLP input/output and residual at the hook
    /// layer.
    pub fn run_with_hooks(&self, tokens: &[u32]) -> Result<HookedRun<T>> {
        let mut mlp_in = None;
        let mut mlp_out = None;
        let mut resid = None;
        let logits = self.forward_patched(tokens, &mut |p, m| match p {
            HookPoint::MlpIn => mlp_in = Some(m.clone()),
            HookPoint::MlpOut => mlp_out = Some(m.clone()),
            HookPoint::Resid => resid = Some(m.clone()),
        })?;
        Ok(HookedRun {
            logits,
            mlp_in: mlp_in.expect("hook fired"),
            mlp_out: mlp_out.expect("hook fired"),
            resid: resid.expect("hook fired"),
        })
    }

    /// Clean forward pass that also returns the state needed by
    /// [`ToyLm::logits_from_resid`], plus the clean last-position logits.
    pub fn prefix_state(&self, tokens: &[u32]) -> Result<(PrefixState<T>, Vec<T>)> {
        let mut cache = Vec::new();
        let mut resid = None;
        let mut mlp_out = None;
        let last = tokens.len().saturating_sub(1);
        let (logits, _, _) = self.forward_impl(
            tokens,
            &mut |p, m| match p {
                HookPoint::MlpOut => mlp_out = Some(m.row(last).to_vec()),
                HookPoint::Resid => resid = Some(m.row(last).to_vec()),
                HookPoint::MlpIn => {}
            },
            Some(&mut cache),
        )?;
        let hook = self.config.hook_layer;
        let mlp_out: Vec<T> = mlp_out.expect("hook fired");
        let resid: Vec<T> = resid.expect("hook fired");
        let resid_mid = cache[hook].x_mid.row(last).to_vec();
        let upper_kv = cache[hook + 1..]
            .iter()
            .map(|c| (c.k.clone(), c.v.clone()))
            .collect();
        let state = PrefixState {
            mlp_in: cache[hook].h.row(last).to_vec(),
            mlp_out,
            resid_mid,
            resid,
            upper_kv,
        };
        Ok((state, logits.row(last).to_vec()))
    }

    /// Last-position logits when the residual after the hook layer at the
    /// last position is replaced by `resid`.
    pub fn logits_from_resid(&self, state: &PrefixState<T>, resid: &[T]) -> Vec<T> {
        let d = self.config.d_model;
        assert_eq!(resid.len(), d);
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = Matrix::row_vector(resid.to_vec());
        for (blk, (kc, vc)) in self.blocks[self.config.hook_layer + 1..]
            .iter()
            .zip(&state.upper_kv)
        {
            let pos = kc.rows() - 1;
            let (a, _) = layer_norm(&x, &blk.ln1_g, &blk.ln1_b);
            let q = a.matmul_nt(&blk.wq);
            let mut k = kc.clone();
            let mut v = vc.clone();
            k.row_mut(pos).copy_from_slice(a.matmul_nt(&blk.wk).row(0));
            v.row_mut(pos).copy_from_slice(a.matmul_nt(&blk.wv).row(0));
            let mut o = Matrix::zeros(1, d);
            for h in 0..self.config.heads {
                let (qh, kh, vh) = (
                    q.col_slice(h * dh, dh),
                    k.col_slice(h * dh, dh),
                    v.col_slice(h * dh, dh),
                );
                let mut s = qh.matmul_nt(&kh);
                s.scale(scale);
                let p = causal_softmax(&s, pos);
                o.set_col_slice(h * dh, &p.matmul(&vh));
            }
            x.add_assign(&o.matmul_nt(&blk.wo));
            let (hn, _) = layer_norm(&x, &blk.ln2_g, &blk.ln2_b);
            let (mlp_out, _, _) = self.mlp(blk, &hn);
            x.add_assign(&mlp_out);
        }
        self.unembed_logits(&x).0.into_data()
    }

    /// The hook layer's MLP applied to a batch of inputs.
    pub fn hook_mlp(&self, mlp_in: &Matrix<T>) -> Matrix<T> {
        self.mlp(&self.blocks[self.config.hook_layer], mlp_in).0
    }

    /// Summed next-token cross entropy over the sequence, and its gradient
    /// (scaled by `grad_scale`) accumulated into `grads`.
    pub fn loss_and_grad(
        &self,
        tokens: &[u32],
        grads: &mut ToyLm<T>,
        grad_scale: f64,
    ) -> Result<f64> {
        let mut cache = Vec::new();
        let (logits, lnf, xf) = self.forward_impl(tokens, &mut |_, _| {}, Some(&mut cache))?;
        let fc = ForwardCache {
            layers: cache,
            lnf,
            xf,
        };
        let n = tokens.len();
        let vocab = self.config.vocab_size;
        let mut dlogits = Matrix::<T>::zeros(n, vocab);
        let mut loss = 0.0;
        for t in 0..n - 1 {
            let row = logits.row(t);
            let m = row
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
            let target = tokens[t + 1] as usize;
            loss += -(row[target].as_f64() - m - z.ln());
            let dr = dlogits.row_mut(t);
            for (j, v) in row.iter().enumerate() {
                let p = (v.as_f64() - m).exp() / z;
                dr[j] = T::cast(grad_scale * (p - if j == target { 1.0 } else { 0.0 }));
            }
        }
        self.backward(tokens, &fc, &dlogits, grads);
        Ok(loss)
    }

    fn backward(
        &self,
        tokens: &[u32],
        fc: &ForwardCache<T>,
        dlogits: &Matrix<T>,
        grads: &mut ToyLm<T>,
    ) {
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        grads.unembed.add_assign(&dlogits.matmul_tn(&fc.xf));
        let dxf = dlogits.matmul(&self.unembed);
        let mut dx = layer_norm_backward(
            &dxf,
            &fc.lnf,
            &self.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
        );
        for l in (0..self.config.layers).rev() {
            let blk = &self.blocks[l];
            let c = &fc.layers[l];
            let gb = &mut grads.blocks[l];
            // MLP
            gb.w_out.add_assign(&dx.matmul_tn(&c.g));
            accumulate_col_sums(&mut gb.b_out, &dx);
            let dg = dx.matmul(&blk.w_out);
            let mut du = dg;
            for (dv, uv) in du.data_mut().iter_mut().zip(c.u.data()) {
                *dv = T::cast(dv.as_f64() * gelu_grad(uv.as_f64()));
            }
            gb.w_in.add_assign(&du.matmul_tn(&c.h));
            accumulate_col_sums(&mut gb.b_in, &du);
            let dh_in = du.matmul(&blk.w_in);
            let dmid =
                layer_norm_backward(&dh_in, &c.ln2, &blk.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);
            dx.add_assign(&dmid);
            // attention
            gb.wo.add_assign(&dx.matmul_tn(&c.o));
            let d_o = dx.matmul(&blk.wo);
            let n = tokens.len();
            let mut dq = Matrix::<T>::zeros(n, d);
            let mut dk = Matrix::<T>::zeros(n, d);
            let mut dv = Matrix::<T>::zeros(n, d);
            for h in 0..self.config.heads {
                let p = &c.probs[h];
                let doh = d_o.col_slice(h * dh, dh);
                let (qh, kh, vh) = (
                    c.q.col_slice(h * dh, dh),
                    c.k.col_slice(h * dh, dh),
                    c.v.col_slice(h * dh, dh),
                );
                let dp = doh.matmul_nt(&vh);
                dv.set_col_slice(h * dh, &p.matmul_tn(&doh));
                let mut ds = Matrix::<T>::zeros(n, n);
                for i in 0..n {
                    let pr = &p.row(i)[..=i];
                    let dpr = &dp.row(i)[..=i];
                    let inner = dot(pr, dpr);
                    let dsr = ds.row_mut(i);
                    for j in 0..=i {
                        dsr[j] = T::cast(pr[j].as_f64() * (dpr[j].as_f64() - inner) * scale);
                    }
                }
                dq.set_col_slice(h * dh, &ds.matmul(&kh));
                dk.set_col_slice(h * dh, &ds.matmul_tn(&qh));
            }
            gb.wq.add_assign(&dq.matmul_tn(&c.a));
            gb.wk.add_assign(&dk.matmul_tn(&c.a));
            gb.wv.add_assign(&dv.matmul_tn(&c.a));
            let mut da = dq.matmul(&blk.wq);
            da.add_assign(&dk.matmul(&blk.wk));
            da.add_assign(&dv.matmul(&blk.wv));
            let din = layer_norm_backward(&da, &c.ln1, &blk.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
            dx.add_assign(&din);
        }
        for (t, &tok) in tokens.iter().enumerate() {
            let src = dx.row(t);
            for (g, s) in grads.tok_emb.row_mut(tok as usize).iter_mut().zip(src) {
                *g += *s;
            }
            for (g, s) in grads.pos_emb.row_mut(t).iter_mut().zip(src) {
                *g += *s;
            }
        }
    }
}

/// Mean next-token cross entropy of the last position, from its logits.
pub fn token_ce<T: Real>(logits: &[T], target: u32) -> f64 {
    let m = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v.as_f64() - m).exp()).sum();
    -(logits[target as usize].as_f64() - m - z.ln())
}
