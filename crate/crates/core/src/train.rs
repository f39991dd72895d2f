//! Next-byte training with hand-written backpropagation and Adam.
//!
//! The training forward pass always uses vanilla RoPE positions `0..c`;
//! there is no attention-mode parameter here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{gelu, gelu_grad, rms_norm_rows, Layout, ModelCheckpoint, ModelConfig};
use crate::rope::RotaryTable;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Sequence length per example; must not exceed the model's `c`.
    pub context: usize,
    pub warmup: usize,
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-3,
            batch: 8,
            context: 128,
            warmup: 100,
            grad_clip: 1.0,
            log_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Splits off the trailing `heldout_frac` of the corpus for evaluation.
pub fn split_corpus(corpus: &[u8], heldout_frac: f64) -> (&[u8], &[u8]) {
    let cut = ((corpus.len() as f64) * (1.0 - heldout_frac)).round() as usize;
    corpus.split_at(cut.min(corpus.len()))
}

pub fn corpus_fingerprint(corpus: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(corpus).into()
}

/// Warmup then cosine decay to a tenth of the peak rate.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup).max(1) as f64;
    let progress = ((step - cfg.warmup) as f64 / span).min(1.0);
    let floor = 0.1 * cfg.lr;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Runs `cfg.steps` Adam steps on random windows of `corpus`.
///
/// Windows are sampled from a ChaCha8 stream seeded by the model seed and
/// the checkpoint's step count, so the result is a pure function of the
/// inputs.
pub fn train(
    ckpt: &ModelCheckpoint,
    corpus: &[u8],
    cfg: &TrainConfig,
    mut log: impl FnMut(TrainLog),
) -> Result<ModelCheckpoint> {
    let model_cfg = &ckpt.config;
    model_cfg.validate()?;
    if cfg.context < 2 || cfg.context > model_cfg.train_context {
        return Err(Error::InvalidArgument(format!(
            "training context {} must lie in [2, {}]",
            cfg.context, model_cfg.train_context
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch must be ≥ 1".into()));
    }
    if corpus.len() <= cfg.context {
        return Err(Error::CorpusTooShort {
            len: corpus.len(),
            needed: cfg.context,
        });
    }
    let mut out = ckpt.clone();
    if cfg.steps == 0 {
        return Ok(out);
    }

    let layout = Layout::new(model_cfg);
    let mut grads = Grads::new(model_cfg, &layout, cfg.batch, cfg.context)?;
    let mut adam = Adam::new(layout.total);
    let mut rng = ChaCha8Rng::seed_from_u64(model_cfg.seed ^ ckpt.step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x0074_7261_696e);
    let mut batch = vec![0u8; cfg.batch * (cfg.context + 1)];
    for step in 0..cfg.steps {
        for row in batch.chunks_exact_mut(cfg.context + 1) {
            let start = rng.gen_range(0..corpus.len() - cfg.context);
            row.copy_from_slice(&corpus[start..start + cfg.context + 1]);
        }
        let loss = grads.loss_and_grad(&out.params, &batch)?;
        let lr = learning_rate(cfg, step);
        clip(&mut grads.grad, cfg.grad_clip);
        adam.step(&mut out.params, &grads.grad, lr);
        out.step += 1;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log(TrainLog {
                step: out.step,
                loss,
                lr,
            });
        }
    }
    Ok(out)
}

fn clip(grad: &mut [f32], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.99;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (Self::BETA1 as f32, Self::BETA2 as f32);
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps = (Self::EPS * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step_size * *m / (v.sqrt() + eps);
        }
    }
}

/// `c = a · b (+ c)` over strided views.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    rsc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + n - 1 < c.len());
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the debug assertions above describe the in-bounds condition the
    // callers uphold; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Row-major `(rows × inner) · (inner × cols)`.
fn matmul<T: Real>(a: &[T], b: &[T], c: &mut [T], rows: usize, inner: usize, cols: usize, acc: bool) {
    gemm(rows, inner, cols, a, (inner, 1), b, (cols, 1), c, cols, acc);
}

/// `aᵀ · b` with `a: rows × m`, `b: rows × n`, result `m × n`.
fn matmul_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], rows: usize, m: usize, n: usize, acc: bool) {
    gemm(m, rows, n, a, (1, m), b, (n, 1), c, n, acc);
}

/// `a · bᵀ` with `a: m × k`, `b: n × k`, result `m × n`.
fn matmul_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    gemm(m, k, n, a, (k, 1), b, (1, k), c, n, acc);
}

fn rms_norm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    inv: &[T],
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    accumulate_dx: bool,
) {
    let d = gain.len();
    let dn = T::of(d as f64);
    for (r, ((xr, dyr), dxr)) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate() {
        let s = inv[r];
        let mut dot = T::zero();
        for ((xv, dyv), g) in xr.iter().zip(dyr).zip(gain) {
            dot += *g * *dyv * *xv;
        }
        let coef = s * s * s * dot / dn;
        for (((o, xv), dyv), (g, dg)) in dxr.iter_mut().zip(xr).zip(dyr).zip(gain.iter().zip(dgain.iter_mut())) {
            *dg += *dyv * *xv * s;
            let v = s * *g * *dyv - *xv * coef;
            if accumulate_dx {
                *o += v;
            } else {
                *o = v;
            }
        }
    }
}

struct LayerCache<T> {
    x: Vec<T>,
    n1: Vec<T>,
    r1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    cat: Vec<T>,
    h: Vec<T>,
    n2: Vec<T>,
    r2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

impl<T: Real> LayerCache<T> {
    fn new(n: usize, d: usize, f: usize, attn: usize) -> Self {
        let z = |len| vec![T::zero(); len];
        Self {
            x: z(n * d),
            n1: z(n * d),
            r1: z(n),
            q: z(n * d),
            k: z(n * d),
            v: z(n * d),
            probs: z(attn),
            cat: z(n * d),
            h: z(n * d),
            n2: z(n * d),
            r2: z(n),
            u: z(n * f),
            g: z(n * f),
        }
    }
}

/// Activation caches and gradient buffers for one batch shape.
pub(crate) struct Grads<T> {
    cfg: ModelConfig,
    layout: Layout,
    table: RotaryTable,
    batch: usize,
    seq: usize,
    caches: Vec<LayerCache<T>>,
    xf: Vec<T>,
    nf: Vec<T>,
    rf: Vec<T>,
    logits: Vec<T>,
    pub(crate) grad: Vec<T>,
}

impl<T: Real> Grads<T> {
    pub(crate) fn new(cfg: &ModelConfig, layout: &Layout, batch: usize, seq: usize) -> Result<Self> {
        let (d, f) = (cfg.model_dim, cfg.ffn_dim());
        let n = batch * seq;
        let attn = batch * cfg.heads * seq * seq;
        Ok(Self {
            cfg: cfg.clone(),
            layout: layout.clone(),
            table: RotaryTable::new(cfg.head_dim(), cfg.rope_base, seq)?,
            batch,
            seq,
            caches: (0..cfg.layers).map(|_| LayerCache::new(n, d, f, attn)).collect(),
            xf: vec![T::zero(); n * d],
            nf: vec![T::zero(); n * d],
            rf: vec![T::zero(); n],
            logits: vec![T::zero(); n * cfg.vocab],
            grad: vec![T::zero(); layout.total],
        })
    }

    /// Mean next-byte cross-entropy of `batch` rows of `seq + 1` bytes;
    /// fills `self.grad` with its gradient.
    pub(crate) fn loss_and_grad<P: Real>(&mut self, params: &[P], windows: &[u8]) -> Result<f64> {
        let p: Vec<T> = params.iter().map(|x| T::of(x.as_f64())).collect();
        let loss = self.forward(&p, windows)?;
        self.backward(&p, windows);
        Ok(loss)
    }

    fn forward(&mut self, p: &[T], windows: &[u8]) -> Result<f64> {
        let (b, t) = (self.batch, self.seq);
        if windows.len() != b * (t + 1) {
            return Err(Error::DimensionMismatch(format!(
                "expected {} window bytes, got {}",
                b * (t + 1),
                windows.len()
            )));
        }
        let (d, f, vocab, heads) = (self.cfg.model_dim, self.cfg.ffn_dim(), self.cfg.vocab, self.cfg.heads);
        let hd = d / heads;
        let n = b * t;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let lay = &self.layout;

        let mut x = vec![T::zero(); n * d];
        for bi in 0..b {
            for ti in 0..t {
                let tok = windows[bi * (t + 1) + ti] as usize;
                let src = &p[lay.embed + tok * d..lay.embed + (tok + 1) * d];
                x[(bi * t + ti) * d..(bi * t + ti + 1) * d].copy_from_slice(src);
            }
        }

        let mut scores = vec![T::zero(); t * t];
        for (l, o) in lay.layers.iter().enumerate() {
            let c = &mut self.caches[l];
            c.x.copy_from_slice(&x);
            c.r1 = rms_norm_rows(&c.x, &p[o.attn_norm..o.attn_norm + d], &mut c.n1);
            matmul(&c.n1, &p[o.wq..o.wq + d * d], &mut c.q, n, d, d, false);
            matmul(&c.n1, &p[o.wk..o.wk + d * d], &mut c.k, n, d, d, false);
            matmul(&c.n1, &p[o.wv..o.wv + d * d], &mut c.v, n, d, d, false);
            for r in 0..n {
                let pos = (r % t) as f64;
                for h in 0..heads {
                    let s = r * d + h * hd;
                    self.table.rotate_in_place(&mut c.q[s..s + hd], pos, 1.0);
                    self.table.rotate_in_place(&mut c.k[s..s + hd], pos, 1.0);
                }
            }
            for bi in 0..b {
                for h in 0..heads {
                    let base = bi * t * d + h * hd;
                    gemm(t, hd, t, &c.q[base..], (d, 1), &c.k[base..], (1, d), &mut scores, t, false);
                    let pr = &mut c.probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                    for i in 0..t {
                        let row = &scores[i * t..i * t + i + 1];
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max) * scale;
                        let out = &mut pr[i * t..(i + 1) * t];
                        let mut sum = T::zero();
                        for j in 0..=i {
                            let e = (row[j] * scale - max).exp();
                            out[j] = e;
                            sum += e;
                        }
                        for o in &mut out[..=i] {
                            *o = *o / sum;
                        }
                        for o in &mut out[i + 1..] {
                            *o = T::zero();
                        }
                    }
                    gemm(t, t, hd, pr, (t, 1), &c.v[base..], (d, 1), &mut c.cat[base..], d, false);
                }
            }
            c.h.copy_from_slice(&c.x);
            matmul(&c.cat, &p[o.wo..o.wo + d * d], &mut c.h, n, d, d, true);
            c.r2 = rms_norm_rows(&c.h, &p[o.mlp_norm..o.mlp_norm + d], &mut c.n2);
            matmul(&c.n2, &p[o.w1..o.w1 + d * f], &mut c.u, n, d, f, false);
            for (g, u) in c.g.iter_mut().zip(&c.u) {
                *g = gelu(*u);
            }
            x.copy_from_slice(&c.h);
            matmul(&c.g, &p[o.w2..o.w2 + f * d], &mut x, n, f, d, true);
        }

        self.xf.copy_from_slice(&x);
        self.rf = rms_norm_rows(&self.xf, &p[lay.final_norm..lay.final_norm + d], &mut self.nf);
        matmul(&self.nf, &p[lay.unembed..lay.unembed + d * vocab], &mut self.logits, n, d, vocab, false);

        // logits become softmax probabilities in place
        let mut loss = 0.0f64;
        for bi in 0..b {
            for ti in 0..t {
                let r = bi * t + ti;
                let target = windows[bi * (t + 1) + ti + 1] as usize;
                let row = &mut self.logits[r * vocab..(r + 1) * vocab];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for z in row.iter_mut() {
                    *z = (*z - max).exp();
                    sum += *z;
                }
                for z in row.iter_mut() {
                    *z = *z / sum;
                }
                loss -= row[target].as_f64().max(f64::MIN_POSITIVE).ln();
            }
        }
        Ok(loss / n as f64)
    }

    fn backward(&mut self, p: &[T], windows: &[u8]) {
        let (b, t) = (self.batch, self.seq);
        let (d, f, vocab, heads) = (self.cfg.model_dim, self.cfg.ffn_dim(), self.cfg.vocab, self.cfg.heads);
        let hd = d / heads;
        let n = b * t;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let lay = self.layout.clone();
        self.grad.iter_mut().for_each(|g| *g = T::zero());
        let grad = &mut self.grad;

        let inv_n = T::of(1.0 / n as f64);
        for bi in 0..b {
            for ti in 0..t {
                let r = bi * t + ti;
                let target = windows[bi * (t + 1) + ti + 1] as usize;
                let row = &mut self.logits[r * vocab..(r + 1) * vocab];
                row[target] = row[target] - T::one();
                row.iter_mut().for_each(|z| *z = *z * inv_n);
            }
        }
        let dlogits = &self.logits;
        matmul_tn(&self.nf, dlogits, &mut grad[lay.unembed..lay.unembed + d * vocab], n, d, vocab, false);
        let mut dnf = vec![T::zero(); n * d];
        matmul_nt(dlogits, &p[lay.unembed..lay.unembed + d * vocab], &mut dnf, n, vocab, d, false);
        let mut dx = vec![T::zero(); n * d];
        {
            let (gain, dgain) = (&p[lay.final_norm..lay.final_norm + d], &mut grad[lay.final_norm..lay.final_norm + d]);
            rms_norm_backward(&self.xf, gain, &self.rf, &dnf, &mut dx, dgain, false);
        }

        let mut dh = vec![T::zero(); n * d];
        let mut dg = vec![T::zero(); n * f];
        let mut dn = vec![T::zero(); n * d];
        let mut dcat = vec![T::zero(); n * d];
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); t * t];
        for (l, o) in lay.layers.iter().enumerate().rev() {
            let c = &self.caches[l];
            // x' = h + gelu(n2 W1) W2
            dh.copy_from_slice(&dx);
            matmul_tn(&c.g, &dx, &mut grad[o.w2..o.w2 + f * d], n, f, d, false);
            matmul_nt(&dx, &p[o.w2..o.w2 + f * d], &mut dg, n, d, f, false);
            for (g, u) in dg.iter_mut().zip(&c.u) {
                *g = *g * gelu_grad(*u);
            }
            matmul_tn(&c.n2, &dg, &mut grad[o.w1..o.w1 + d * f], n, d, f, false);
            matmul_nt(&dg, &p[o.w1..o.w1 + d * f], &mut dn, n, f, d, false);
            rms_norm_backward(
                &c.h,
                &p[o.mlp_norm..o.mlp_norm + d],
                &c.r2,
                &dn,
                &mut dh,
                &mut grad[o.mlp_norm..o.mlp_norm + d],
                true,
            );

            // h = x + attn(n1) Wo
            dx.copy_from_slice(&dh);
            matmul_tn(&c.cat, &dh, &mut grad[o.wo..o.wo + d * d], n, d, d, false);
            matmul_nt(&dh, &p[o.wo..o.wo + d * d], &mut dcat, n, d, d, false);
            for bi in 0..b {
                for h in 0..heads {
                    let base = bi * t * d + h * hd;
                    let pr = &c.probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                    // dP = dO Vᵀ, dV = Pᵀ dO
                    gemm(t, hd, t, &dcat[base..], (d, 1), &c.v[base..], (1, d), &mut dp, t, false);
                    gemm(t, t, hd, pr, (1, t), &dcat[base..], (d, 1), &mut dv[base..], d, false);
                    for i in 0..t {
                        let prow = &pr[i * t..(i + 1) * t];
                        let drow = &mut dp[i * t..(i + 1) * t];
                        let mut dot = T::zero();
                        for j in 0..=i {
                            dot += prow[j] * drow[j];
                        }
                        for j in 0..t {
                            drow[j] = if j <= i { prow[j] * (drow[j] - dot) * scale } else { T::zero() };
                        }
                    }
                    // dQ = dS K, dK = dSᵀ Q
                    gemm(t, t, hd, &dp, (t, 1), &c.k[base..], (d, 1), &mut dq[base..], d, false);
                    gemm(t, t, hd, &dp, (1, t), &c.q[base..], (d, 1), &mut dk[base..], d, false);
                }
            }
            for r in 0..n {
                let pos = (r % t) as f64;
                for h in 0..heads {
                    let s = r * d + h * hd;
                    self.table.rotate_in_place(&mut dq[s..s + hd], pos, -1.0);
                    self.table.rotate_in_place(&mut dk[s..s + hd], pos, -1.0);
                }
            }
            matmul_tn(&c.n1, &dq, &mut grad[o.wq..o.wq + d * d], n, d, d, false);
            matmul_tn(&c.n1, &dk, &mut grad[o.wk..o.wk + d * d], n, d, d, false);
            matmul_tn(&c.n1, &dv, &mut grad[o.wv..o.wv + d * d], n, d, d, false);
            matmul_nt(&dq, &p[o.wq..o.wq + d * d], &mut dn, n, d, d, false);
            matmul_nt(&dk, &p[o.wk..o.wk + d * d], &mut dn, n, d, d, true);
            matmul_nt(&dv, &p[o.wv..o.wv + d * d], &mut dn, n, d, d, true);
            rms_norm_backward(
                &c.x,
                &p[o.attn_norm..o.attn_norm + d],
                &c.r1,
                &dn,
                &mut dx,
                &mut grad[o.attn_norm..o.attn_norm + d],
                true,
            );
        }

        for bi in 0..b {
            for ti in 0..t {
                let tok = windows[bi * (t + 1) + ti] as usize;
                let r = bi * t + ti;
                let dst = &mut grad[lay.embed + tok * d..lay.embed + (tok + 1) * d];
                for (g, v) in dst.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                    *g += *v;
                }
            }
        }
    }
}

/// Gradient in f64 for checking against finite differences.
#[doc(hidden)]
pub fn loss_and_grad_f64(ckpt: &ModelCheckpoint, windows: &[u8], batch: usize, seq: usize) -> Result<(f64, Vec<f64>)> {
    let layout = Layout::new(&ckpt.config);
    let mut g = Grads::<f64>::new(&ckpt.config, &layout, batch, seq)?;
    let loss = g.loss_and_grad(&ckpt.params, windows)?;
    Ok((loss, g.grad))
}

/// Loss in f64 at explicit parameter values.
#[doc(hidden)]
pub fn loss_f64(cfg: &ModelConfig, params: &[f64], windows: &[u8], batch: usize, seq: usize) -> Result<f64> {
    let layout = Layout::new(cfg);
    let mut g = Grads::<f64>::new(cfg, &layout, batch, seq)?;
    g.forward(params, windows)
}
