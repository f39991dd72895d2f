//! Causal single-head attention under a selectable position regime.
//!
//! Two independent routes compute the same thing:
//!
//! * [`oracle_attention`] scores every `(i, j)` pair with [`rotary_inner`]
//!   using positions taken from the schedule operations, then applies one
//!   softmax per row.
//! * [`chunked_attention`] rotates keys once, rotates each query once per
//!   pass (intra, successive, inter), runs a max-shifted softmax per pass and
//!   merges the [`AttentionPartial`]s.
//!
//! [`DcaKvCache`] is the incremental form of the chunked route used for
//! greedy decoding.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rope::{rotary_inner, RotaryTable};
use crate::schedules::{
    inter_query_positions, intra_query_positions, key_positions, pi_scale_factor,
    pi_scaled_positions, succ_position, succ_query_positions, vanilla_positions, ChunkConfig,
};
use crate::tensor::{dot, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionMode {
    /// Plain RoPE, positions `0..l`.
    Vanilla,
    /// Position interpolation, positions `i / ⌈l / c⌉`.
    Pi,
    /// Same-chunk keys only.
    IntraOnly,
    /// Same chunk plus every earlier chunk at the inter schedule.
    IntraInter,
    /// Intra, successive and inter schedules.
    FullDca,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 5] = [
        AttentionMode::Vanilla,
        AttentionMode::Pi,
        AttentionMode::IntraOnly,
        AttentionMode::IntraInter,
        AttentionMode::FullDca,
    ];

    pub const ABLATION: [AttentionMode; 3] = [
        AttentionMode::IntraOnly,
        AttentionMode::IntraInter,
        AttentionMode::FullDca,
    ];

    pub fn is_chunked(self) -> bool {
        matches!(
            self,
            AttentionMode::IntraOnly | AttentionMode::IntraInter | AttentionMode::FullDca
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Vanilla => "vanilla",
            AttentionMode::Pi => "pi",
            AttentionMode::IntraOnly => "intra",
            AttentionMode::IntraInter => "intra-inter",
            AttentionMode::FullDca => "dca",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|m| m.name()).join(", ")
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown attention mode '{s}' (valid: {})",
                    Self::valid_names()
                ))
            })
    }
}

/// Per-head queries, keys and values, `l × head_dim` each.
#[derive(Clone, Debug)]
pub struct AttentionInputs<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub scale: T,
}

impl<T: Real> AttentionInputs<T> {
    /// Inputs with the usual `1/√d` score scale.
    pub fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        let shape = (q.rows(), q.cols());
        if (k.rows(), k.cols()) != shape || (v.rows(), v.cols()) != shape {
            return Err(Error::DimensionMismatch(format!(
                "q {}x{}, k {}x{}, v {}x{}",
                q.rows(),
                q.cols(),
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            )));
        }
        if !(q.all_finite() && k.all_finite() && v.all_finite()) {
            return Err(Error::NonFinite("attention inputs"));
        }
        let scale = T::of(1.0 / (shape.1 as f64).sqrt());
        Ok(Self { q, k, v, scale })
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }
}

/// Unnormalized result of one softmax pass, shifted by `max_score`:
/// `out = Σ exp(score − max_score)·v` and `mass = Σ exp(score − max_score)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPartial<T> {
    pub out: Vec<T>,
    pub mass: T,
    pub max_score: T,
    pub keys: usize,
}

impl<T: Real> AttentionPartial<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            out: vec![T::zero(); dim],
            mass: T::zero(),
            max_score: T::neg_infinity(),
            keys: 0,
        }
    }

    /// Pass over explicit scores and their value rows.
    pub fn from_scores<'a>(scores: &[T], values: impl IntoIterator<Item = &'a [T]>, dim: usize) -> Self {
        let mut part = Self::empty(dim);
        if scores.is_empty() {
            return part;
        }
        let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        part.max_score = max;
        for (score, row) in scores.iter().zip(values) {
            let p = (*score - max).exp();
            part.mass += p;
            for (o, v) in part.out.iter_mut().zip(row) {
                *o += p * *v;
            }
        }
        part.keys = scores.len();
        part
    }

    pub fn is_empty(&self) -> bool {
        self.keys == 0
    }

    /// Combines two partials into one covering both key sets.
    pub fn merge(&self, other: &Self) -> Self {
        if other.is_empty() {
            return self.clone();
        }
        if self.is_empty() {
            return other.clone();
        }
        let max = self.max_score.max(other.max_score);
        let a = (self.max_score - max).exp();
        let b = (other.max_score - max).exp();
        Self {
            out: self
                .out
                .iter()
                .zip(&other.out)
                .map(|(x, y)| a * *x + b * *y)
                .collect(),
            mass: a * self.mass + b * other.mass,
            max_score: max,
            keys: self.keys + other.keys,
        }
    }

    /// `out / mass`.
    pub fn normalized(&self) -> Result<Vec<T>> {
        if self.is_empty() || self.mass <= T::zero() {
            return Err(Error::NoAttendedKeys);
        }
        Ok(self.out.iter().map(|x| *x / self.mass).collect())
    }
}

/// Normalized output from several passes: `Σ massₚ·outₚ / Σ massₚ`, with
/// every pass rescaled to the global maximum score first.
pub fn merge_partials<T: Real>(parts: &[AttentionPartial<T>]) -> Result<Vec<T>> {
    let (num, den) = merged_sums(parts)?;
    Ok(num.into_iter().map(|x| x / den).collect())
}

/// Fraction of the total softmax mass captured by each pass.
pub fn pass_shares<T: Real>(parts: &[AttentionPartial<T>]) -> Result<Vec<T>> {
    let max = global_max(parts)?;
    let scaled: Vec<T> = parts
        .iter()
        .map(|p| {
            if p.is_empty() {
                T::zero()
            } else {
                p.mass * (p.max_score - max).exp()
            }
        })
        .collect();
    let total: T = scaled.iter().copied().sum();
    Ok(scaled.into_iter().map(|m| m / total).collect())
}

fn global_max<T: Real>(parts: &[AttentionPartial<T>]) -> Result<T> {
    parts
        .iter()
        .filter(|p| !p.is_empty() && p.mass > T::zero())
        .map(|p| p.max_score)
        .reduce(T::max)
        .ok_or(Error::NoAttendedKeys)
}

fn merged_sums<T: Real>(parts: &[AttentionPartial<T>]) -> Result<(Vec<T>, T)> {
    let max = global_max(parts)?;
    let dim = parts[0].out.len();
    let mut num = vec![T::zero(); dim];
    let mut den = T::zero();
    for p in parts.iter().filter(|p| !p.is_empty()) {
        let w = (p.max_score - max).exp();
        den += w * p.mass;
        for (n, o) in num.iter_mut().zip(&p.out) {
            *n += w * *o;
        }
    }
    Ok((num, den))
}

/// Key ranges of the three dual-chunk passes for query `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PassPlan {
    pub intra: Range<usize>,
    pub succ: Range<usize>,
    pub inter: Range<usize>,
}

impl PassPlan {
    /// `(intra, successive, inter)` key counts.
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.intra.len(), self.succ.len(), self.inter.len())
    }
}

/// With `n = ⌊i/s⌋`: intra covers `ns..=i`, successive covers chunk `n − 1`,
/// inter covers everything before it.
pub fn pass_plan(i: usize, chunk: usize) -> PassPlan {
    let n = i / chunk;
    let start = n * chunk;
    PassPlan {
        intra: start..i + 1,
        succ: if n >= 1 { start - chunk..start } else { start..start },
        inter: if n >= 2 { 0..start - chunk } else { 0..0 },
    }
}

/// Positions for one mode over a sequence of known length.
#[derive(Clone, Copy, Debug)]
struct Regime {
    mode: AttentionMode,
    cfg: Option<ChunkConfig>,
    pi_factor: f64,
}

#[derive(Clone, Debug)]
struct Segments {
    items: [(Range<usize>, f64); 3],
    len: usize,
}

impl Segments {
    fn push(&mut self, range: Range<usize>, pos: f64) {
        if !range.is_empty() {
            self.items[self.len] = (range, pos);
            self.len += 1;
        }
    }

    fn iter(&self) -> impl Iterator<Item = &(Range<usize>, f64)> {
        self.items[..self.len].iter()
    }
}

impl Regime {
    fn new(mode: AttentionMode, cfg: Option<&ChunkConfig>, len: usize) -> Result<Self> {
        let cfg = cfg.copied();
        if let Some(cfg) = &cfg {
            crate::schedules::validate_config(cfg)?;
        }
        let pi_factor = match mode {
            AttentionMode::Pi => {
                let c = cfg.ok_or(Error::MissingChunkConfig(mode))?;
                pi_scale_factor(len, c.context) as f64
            }
            m if m.is_chunked() && cfg.is_none() => return Err(Error::MissingChunkConfig(m)),
            _ => 1.0,
        };
        Ok(Self {
            mode,
            cfg,
            pi_factor,
        })
    }

    #[inline]
    fn key_pos(&self, j: usize) -> f64 {
        match self.mode {
            AttentionMode::Vanilla => j as f64,
            AttentionMode::Pi => j as f64 / self.pi_factor,
            _ => (j % self.cfg.unwrap().chunk) as f64,
        }
    }

    fn segments(&self, i: usize) -> Segments {
        let mut segs = Segments {
            items: [(0..0, 0.0), (0..0, 0.0), (0..0, 0.0)],
            len: 0,
        };
        match self.mode {
            AttentionMode::Vanilla => segs.push(0..i + 1, i as f64),
            AttentionMode::Pi => segs.push(0..i + 1, i as f64 / self.pi_factor),
            mode => {
                let cfg = self.cfg.unwrap();
                let plan = pass_plan(i, cfg.chunk);
                let offset = i % cfg.chunk;
                let inter = (cfg.context - 1) as f64;
                segs.push(plan.intra.clone(), offset as f64);
                match mode {
                    AttentionMode::IntraInter => segs.push(0..plan.intra.start, inter),
                    AttentionMode::FullDca => {
                        segs.push(plan.succ, succ_position(offset, &cfg) as f64);
                        segs.push(plan.inter, inter);
                    }
                    _ => {}
                }
            }
        }
        segs
    }
}

/// Softmax pass of a rotated query over key rows `range`.
fn pass<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    dim: usize,
    range: Range<usize>,
    scale: T,
    scores: &mut Vec<T>,
) -> AttentionPartial<T> {
    scores.clear();
    scores.extend(range.clone().map(|j| dot(q, &keys[j * dim..(j + 1) * dim]) * scale));
    AttentionPartial::from_scores(
        scores,
        range.map(|j| &values[j * dim..(j + 1) * dim]),
        dim,
    )
}

fn rotated_rows<T: Real>(m: &Matrix<T>, table: &RotaryTable, pos: impl Fn(usize) -> f64) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        table.rotate_in_place(out.row_mut(i), pos(i), 1.0);
    }
    out
}

fn check_table<T: Real>(inputs: &AttentionInputs<T>, table: &RotaryTable) -> Result<()> {
    if inputs.head_dim() != table.head_dim() {
        return Err(Error::DimensionMismatch(format!(
            "head_dim {} vs rotary table {}",
            inputs.head_dim(),
            table.head_dim()
        )));
    }
    Ok(())
}

/// Pass-decomposed attention for every mode.
pub fn chunked_attention<T: Real>(
    inputs: &AttentionInputs<T>,
    mode: AttentionMode,
    cfg: Option<&ChunkConfig>,
    table: &RotaryTable,
) -> Result<Matrix<T>> {
    check_table(inputs, table)?;
    let len = inputs.len();
    let dim = inputs.head_dim();
    if len == 0 {
        return Ok(Matrix::zeros(0, dim));
    }
    let regime = Regime::new(mode, cfg, len)?;
    let keys = rotated_rows(&inputs.k, table, |j| regime.key_pos(j));
    let mut out = Matrix::zeros(len, dim);
    let mut scores = Vec::with_capacity(len);
    let mut q = vec![T::zero(); dim];
    let mut parts: Vec<AttentionPartial<T>> = Vec::with_capacity(3);
    for i in 0..len {
        parts.clear();
        for (range, pos) in regime.segments(i).iter() {
            q.copy_from_slice(inputs.q.row(i));
            table.rotate_in_place(&mut q, *pos, 1.0);
            parts.push(pass(
                &q,
                keys.as_slice(),
                inputs.v.as_slice(),
                dim,
                range.clone(),
                inputs.scale,
                &mut scores,
            ));
        }
        out.row_mut(i).copy_from_slice(&merge_partials(&parts)?);
    }
    Ok(out)
}

/// Three-pass dual chunk attention (intra, successive, inter) per query.
pub fn dca_attention_chunked<T: Real>(
    inputs: &AttentionInputs<T>,
    cfg: &ChunkConfig,
    table: &RotaryTable,
) -> Result<Matrix<T>> {
    chunked_attention(inputs, AttentionMode::FullDca, Some(cfg), table)
}

/// Per-query partials of the three dual-chunk passes, in
/// `[intra, successive, inter]` order; empty passes are included.
pub fn dca_partials<T: Real>(
    inputs: &AttentionInputs<T>,
    cfg: &ChunkConfig,
    table: &RotaryTable,
    i: usize,
) -> Result<[AttentionPartial<T>; 3]> {
    check_table(inputs, table)?;
    crate::schedules::validate_config(cfg)?;
    let dim = inputs.head_dim();
    let keys = rotated_rows(&inputs.k, table, |j| (j % cfg.chunk) as f64);
    let plan = pass_plan(i, cfg.chunk);
    let offset = i % cfg.chunk;
    let mut scores = Vec::new();
    let mut run = |range: Range<usize>, pos: f64| {
        let mut q = inputs.q.row(i).to_vec();
        table.rotate_in_place(&mut q, pos, 1.0);
        pass(&q, keys.as_slice(), inputs.v.as_slice(), dim, range, inputs.scale, &mut scores)
    };
    Ok([
        run(plan.intra, offset as f64),
        run(plan.succ, succ_position(offset, cfg) as f64),
        run(plan.inter, (cfg.context - 1) as f64),
    ])
}

/// Softmax weights from brute-force scoring; masked entries are exactly zero.
pub fn attention_weights<T: Real>(
    inputs: &AttentionInputs<T>,
    mode: AttentionMode,
    cfg: Option<&ChunkConfig>,
    table: &RotaryTable,
) -> Result<Matrix<T>> {
    check_table(inputs, table)?;
    let len = inputs.len();
    if len == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    if let Some(cfg) = cfg {
        crate::schedules::validate_config(cfg)?;
    }
    if mode.is_chunked() && cfg.is_none() {
        return Err(Error::MissingChunkConfig(mode));
    }

    // Per-mode (query positions by region, key positions), straight from the
    // schedule operations.
    let (pk, vanilla_q, intra, succ, inter) = match mode {
        AttentionMode::Vanilla => {
            let p = vanilla_positions(len)?.to_f64();
            (p.clone(), p, vec![], vec![], vec![])
        }
        AttentionMode::Pi => {
            let c = cfg.ok_or(Error::MissingChunkConfig(mode))?;
            let p = pi_scaled_positions(len, c.context)?.to_f64();
            (p.clone(), p, vec![], vec![], vec![])
        }
        _ => {
            let c = cfg.unwrap();
            (
                key_positions(len, c.chunk)?.to_f64(),
                vec![],
                intra_query_positions(len, c.chunk)?.to_f64(),
                succ_query_positions(len, c)?.to_f64(),
                inter_query_positions(len, c.context)?.to_f64(),
            )
        }
    };

    let mut weights = Matrix::zeros(len, len);
    for i in 0..len {
        let mut scored: Vec<(usize, T)> = Vec::with_capacity(i + 1);
        for j in 0..=i {
            let pq = match mode {
                AttentionMode::Vanilla | AttentionMode::Pi => Some(vanilla_q[i]),
                _ => {
                    let c = cfg.unwrap();
                    match (c.chunk_of(i) - c.chunk_of(j), mode) {
                        (0, _) => Some(intra[i]),
                        (_, AttentionMode::IntraOnly) => None,
                        (_, AttentionMode::IntraInter) => Some(inter[i]),
                        (1, _) => Some(succ[i]),
                        _ => Some(inter[i]),
                    }
                }
            };
            if let Some(pq) = pq {
                let s = rotary_inner(inputs.q.row(i), inputs.k.row(j), pq, pk[j], table)?;
                scored.push((j, s * inputs.scale));
            }
        }
        let max = scored.iter().map(|(_, s)| *s).fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = scored.iter().map(|(_, s)| (*s - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        for ((j, _), e) in scored.iter().zip(exps) {
            weights.set(i, *j, e / total);
        }
    }
    Ok(weights)
}

/// Brute-force attention: explicit weights times values.
pub fn oracle_attention<T: Real>(
    inputs: &AttentionInputs<T>,
    mode: AttentionMode,
    cfg: Option<&ChunkConfig>,
    table: &RotaryTable,
) -> Result<Matrix<T>> {
    let weights = attention_weights(inputs, mode, cfg, table)?;
    let len = inputs.len();
    let dim = inputs.head_dim();
    let mut out = Matrix::zeros(len, dim);
    for i in 0..len {
        let row = out.row_mut(i);
        for j in 0..=i {
            let w = weights.get(i, j);
            for (o, v) in row.iter_mut().zip(inputs.v.row(j)) {
                *o += w * *v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Kernel {
    /// Pass-decomposed kernel in the caller's precision.
    #[default]
    Chunked,
    /// Brute-force weights, evaluated in f64.
    Oracle,
}

/// Projection weights, stored `in × out` so that `x · w` projects.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
}

/// Projects `x` to per-head q/k/v, runs the selected kernel on every head,
/// concatenates and applies the output projection.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Real>(
    x: &Matrix<T>,
    params: &AttentionParams<T>,
    heads: usize,
    mode: AttentionMode,
    cfg: Option<&ChunkConfig>,
    table: &RotaryTable,
    kernel: Kernel,
) -> Result<Matrix<T>> {
    let model_dim = x.cols();
    if heads == 0 || !model_dim.is_multiple_of(heads) {
        return Err(Error::DimensionMismatch(format!(
            "model_dim {model_dim} not divisible by {heads} heads"
        )));
    }
    for (name, w) in [("wq", &params.wq), ("wk", &params.wk), ("wv", &params.wv), ("wo", &params.wo)] {
        if w.rows() != model_dim || w.cols() != model_dim {
            return Err(Error::DimensionMismatch(format!(
                "{name} is {}x{}, expected {model_dim}x{model_dim}",
                w.rows(),
                w.cols()
            )));
        }
    }
    let head_dim = model_dim / heads;
    let q = x.matmul(&params.wq)?;
    let k = x.matmul(&params.wk)?;
    let v = x.matmul(&params.wv)?;
    let mut concat = Matrix::zeros(x.rows(), model_dim);
    for h in 0..heads {
        let cols = h * head_dim;
        let inputs = AttentionInputs::new(
            q.column_block(cols, head_dim),
            k.column_block(cols, head_dim),
            v.column_block(cols, head_dim),
        )?;
        let out = match kernel {
            Kernel::Chunked => chunked_attention(&inputs, mode, cfg, table)?,
            Kernel::Oracle => {
                let wide = AttentionInputs::new(inputs.q.cast::<f64>(), inputs.k.cast(), inputs.v.cast())?;
                oracle_attention(&wide, mode, cfg, table)?.cast::<T>()
            }
        };
        concat.set_column_block(cols, &out);
    }
    concat.matmul(&params.wo)
}

/// Rotated keys and values for incremental decoding.
///
/// Keys are rotated once, at insertion, with their fixed key position;
/// every new query re-runs its passes over the cache.
#[derive(Clone, Debug)]
pub struct DcaKvCache<T> {
    regime: Regime,
    dim: usize,
    scale: T,
    keys: Vec<T>,
    values: Vec<T>,
    len: usize,
}

impl<T: Real> DcaKvCache<T> {
    /// `max_len` fixes the interpolation factor for [`AttentionMode::Pi`];
    /// other modes ignore it.
    pub fn new(
        mode: AttentionMode,
        cfg: Option<&ChunkConfig>,
        head_dim: usize,
        max_len: usize,
    ) -> Result<Self> {
        Ok(Self {
            regime: Regime::new(mode, cfg, max_len.max(1))?,
            dim: head_dim,
            scale: T::of(1.0 / (head_dim as f64).sqrt()),
            keys: Vec::new(),
            values: Vec::new(),
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends the next token's key and value and returns the attention
    /// output for that token's query.
    pub fn step(&mut self, q: &[T], k: &[T], v: &[T], table: &RotaryTable) -> Result<Vec<T>> {
        if q.len() != self.dim || k.len() != self.dim || v.len() != self.dim || table.head_dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "cache head_dim {} vs q {}, k {}, v {}, table {}",
                self.dim,
                q.len(),
                k.len(),
                v.len(),
                table.head_dim()
            )));
        }
        let i = self.len;
        let mut key = k.to_vec();
        table.rotate_in_place(&mut key, self.regime.key_pos(i), 1.0);
        self.keys.extend_from_slice(&key);
        self.values.extend_from_slice(v);
        self.len += 1;

        let mut scores = Vec::with_capacity(self.len);
        let mut parts = Vec::with_capacity(3);
        let mut rotated = vec![T::zero(); self.dim];
        for (range, pos) in self.regime.segments(i).iter() {
            rotated.copy_from_slice(q);
            table.rotate_in_place(&mut rotated, *pos, 1.0);
            parts.push(pass(
                &rotated,
                &self.keys,
                &self.values,
                self.dim,
                range.clone(),
                self.scale,
                &mut scores,
            ));
        }
        merge_partials(&parts)
    }
}
