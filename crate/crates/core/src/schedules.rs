//! Position-index schedules for dual chunk attention and the relative
//! position matrix they induce.
//!
//! Keys always use their offset inside a chunk. Queries use one of three
//! schedules depending on how far back the key's chunk lies:
//!
//! * same chunk: the query's own offset (intra),
//! * previous chunk: `s + t` for the first `w` offsets `t`, `c - 1` after (successive),
//! * two or more chunks back: `c - 1` (inter).
//!
//! Every schedule is a function of `i mod s`, so a trailing partial chunk
//! needs no padding.

use std::fmt;

use thiserror::Error;

use crate::error::{Error, Result};

/// Violated [`ChunkConfig`] invariant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("s must be > 0")]
    ZeroChunk,
    #[error("s must be < c")]
    ChunkNotBelowContext,
    #[error("w must be ≤ c − s")]
    WindowExceedsSlack,
    #[error("w must be ≤ s")]
    WindowExceedsChunk,
}

/// Chunk size `s`, pretraining window `c`, and local window `w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChunkConfig {
    pub chunk: usize,
    pub context: usize,
    pub window: usize,
}

impl ChunkConfig {
    /// Validated config with an explicit local window.
    pub fn new(chunk: usize, context: usize, window: usize) -> std::result::Result<Self, ConfigError> {
        let cfg = Self {
            chunk,
            context,
            window,
        };
        validate_config(&cfg)?;
        Ok(cfg)
    }

    /// Validated config with `w = c − s`.
    pub fn with_default_window(chunk: usize, context: usize) -> std::result::Result<Self, ConfigError> {
        let window = default_window(chunk, context)?;
        Self::new(chunk, context, window)
    }

    /// `s = ⌊3c/4⌋` and `w = c − s`.
    pub fn for_context(context: usize) -> std::result::Result<Self, ConfigError> {
        Self::with_default_window(3 * context / 4, context)
    }

    /// Number of (possibly partial) chunks covering `len` tokens.
    pub fn num_chunks(&self, len: usize) -> usize {
        len.div_ceil(self.chunk)
    }

    #[inline]
    pub fn chunk_of(&self, i: usize) -> usize {
        i / self.chunk
    }
}

impl fmt::Display for ChunkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s={} c={} w={}", self.chunk, self.context, self.window)
    }
}

pub fn validate_config(cfg: &ChunkConfig) -> std::result::Result<(), ConfigError> {
    if cfg.chunk == 0 {
        return Err(ConfigError::ZeroChunk);
    }
    if cfg.chunk >= cfg.context {
        return Err(ConfigError::ChunkNotBelowContext);
    }
    if cfg.window > cfg.context - cfg.chunk {
        return Err(ConfigError::WindowExceedsSlack);
    }
    if cfg.window > cfg.chunk {
        return Err(ConfigError::WindowExceedsChunk);
    }
    Ok(())
}

/// Default local window `c − s`.
pub fn default_window(chunk: usize, context: usize) -> std::result::Result<usize, ConfigError> {
    if chunk == 0 {
        return Err(ConfigError::ZeroChunk);
    }
    if chunk >= context {
        return Err(ConfigError::ChunkNotBelowContext);
    }
    Ok(context - chunk)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Keys,
    IntraQ,
    InterQ,
    SuccQ,
    Vanilla,
    PiScaled,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Positions {
    Int(Vec<usize>),
    Real(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionSchedule {
    pub kind: ScheduleKind,
    pub values: Positions,
}

impl PositionSchedule {
    fn int(kind: ScheduleKind, values: Vec<usize>) -> Self {
        Self {
            kind,
            values: Positions::Int(values),
        }
    }

    pub fn len(&self) -> usize {
        match &self.values {
            Positions::Int(v) => v.len(),
            Positions::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Integer values, or `None` for the real-valued PI schedule.
    pub fn as_ints(&self) -> Option<&[usize]> {
        match &self.values {
            Positions::Int(v) => Some(v),
            Positions::Real(_) => None,
        }
    }

    pub fn position(&self, i: usize) -> f64 {
        match &self.values {
            Positions::Int(v) => v[i] as f64,
            Positions::Real(v) => v[i],
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }
}

fn nonzero(len: usize, what: &'static str) -> Result<()> {
    if len == 0 {
        Err(Error::Degenerate(what))
    } else {
        Ok(())
    }
}

/// Key positions `i mod s`.
pub fn key_positions(len: usize, chunk: usize) -> Result<PositionSchedule> {
    nonzero(len, "sequence length must be ≥ 1")?;
    nonzero(chunk, "chunk size must be ≥ 1")?;
    Ok(PositionSchedule::int(
        ScheduleKind::Keys,
        (0..len).map(|i| i % chunk).collect(),
    ))
}

/// Intra-chunk query positions; identical values to [`key_positions`].
pub fn intra_query_positions(len: usize, chunk: usize) -> Result<PositionSchedule> {
    let mut sched = key_positions(len, chunk)?;
    sched.kind = ScheduleKind::IntraQ;
    Ok(sched)
}

/// Inter-chunk query positions, all pinned to `c − 1`.
pub fn inter_query_positions(len: usize, context: usize) -> Result<PositionSchedule> {
    nonzero(len, "sequence length must be ≥ 1")?;
    nonzero(context, "context must be ≥ 1")?;
    Ok(PositionSchedule::int(
        ScheduleKind::InterQ,
        vec![context - 1; len],
    ))
}

#[inline]
pub(crate) fn succ_position(offset: usize, cfg: &ChunkConfig) -> usize {
    if offset < cfg.window {
        cfg.chunk + offset
    } else {
        cfg.context - 1
    }
}

/// Successive-chunk query positions: offsets `t < w` map to `s + t`, the rest to `c − 1`.
pub fn succ_query_positions(len: usize, cfg: &ChunkConfig) -> Result<PositionSchedule> {
    validate_config(cfg)?;
    nonzero(len, "sequence length must be ≥ 1")?;
    Ok(PositionSchedule::int(
        ScheduleKind::SuccQ,
        (0..len).map(|i| succ_position(i % cfg.chunk, cfg)).collect(),
    ))
}

/// Standard RoPE positions `0..len`.
pub fn vanilla_positions(len: usize) -> Result<PositionSchedule> {
    nonzero(len, "sequence length must be ≥ 1")?;
    Ok(PositionSchedule::int(ScheduleKind::Vanilla, (0..len).collect()))
}

/// Interpolation factor `max(1, ⌈len / c⌉)`.
pub fn pi_scale_factor(len: usize, context: usize) -> usize {
    len.div_ceil(context).max(1)
}

/// Position-interpolated indices `i / ⌈len / c⌉`.
pub fn pi_scaled_positions(len: usize, context: usize) -> Result<PositionSchedule> {
    nonzero(len, "sequence length must be ≥ 1")?;
    nonzero(context, "context must be ≥ 1")?;
    let factor = pi_scale_factor(len, context) as f64;
    Ok(PositionSchedule {
        kind: ScheduleKind::PiScaled,
        values: Positions::Real((0..len).map(|i| i as f64 / factor).collect()),
    })
}

/// Lower-triangular matrix of relative distances; entries with `j > i` are unused.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelPosMatrix {
    len: usize,
    // Row i holds entries j = 0..=i, packed.
    entries: Vec<usize>,
}

impl RelPosMatrix {
    fn from_fn(len: usize, mut f: impl FnMut(usize, usize) -> usize) -> Self {
        let mut entries = Vec::with_capacity(len * (len + 1) / 2);
        for i in 0..len {
            for j in 0..=i {
                entries.push(f(i, j));
            }
        }
        Self { len, entries }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `M[i][j]` for `j ≤ i`, `None` above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.len || j > i {
            return None;
        }
        Some(self.entries[i * (i + 1) / 2 + j])
    }

    pub fn row(&self, i: usize) -> &[usize] {
        let start = i * (i + 1) / 2;
        &self.entries[start..start + i + 1]
    }

    /// Rows as tab-separated values, blank cells for `j > i`.
    pub fn to_tsv(&self) -> String {
        render_tsv(self.len, |i, j| self.get(i, j).map(|v| v.to_string()))
    }
}

/// Relative position matrix under dual chunk attention.
pub fn relative_position_matrix(len: usize, cfg: &ChunkConfig) -> Result<RelPosMatrix> {
    validate_config(cfg)?;
    nonzero(len, "sequence length must be ≥ 1")?;
    let keys = key_positions(len, cfg.chunk)?;
    let intra = intra_query_positions(len, cfg.chunk)?;
    let succ = succ_query_positions(len, cfg)?;
    let inter = inter_query_positions(len, cfg.context)?;
    let (keys, intra, succ, inter) = (
        keys.as_ints().unwrap(),
        intra.as_ints().unwrap(),
        succ.as_ints().unwrap(),
        inter.as_ints().unwrap(),
    );
    Ok(RelPosMatrix::from_fn(len, |i, j| {
        let query = match cfg.chunk_of(i) - cfg.chunk_of(j) {
            0 => intra[i],
            1 => succ[i],
            _ => inter[i],
        };
        query - keys[j]
    }))
}

/// Standard RoPE relative positions `i − j`.
pub fn rope_matrix(len: usize) -> Result<RelPosMatrix> {
    nonzero(len, "sequence length must be ≥ 1")?;
    Ok(RelPosMatrix::from_fn(len, |i, j| i - j))
}

/// Position-interpolated relative positions `(i − j) / ⌈len / c⌉`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealRelPosMatrix {
    len: usize,
    entries: Vec<f64>,
}

impl RealRelPosMatrix {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i >= self.len || j > i {
            return None;
        }
        Some(self.entries[i * (i + 1) / 2 + j])
    }

    pub fn to_tsv(&self) -> String {
        render_tsv(self.len, |i, j| self.get(i, j).map(|v| format!("{v}")))
    }
}

pub fn pi_matrix(len: usize, context: usize) -> Result<RealRelPosMatrix> {
    let pos = pi_scaled_positions(len, context)?.to_f64();
    let mut entries = Vec::with_capacity(len * (len + 1) / 2);
    for i in 0..len {
        for j in 0..=i {
            entries.push(pos[i] - pos[j]);
        }
    }
    Ok(RealRelPosMatrix { len, entries })
}

fn render_tsv(len: usize, cell: impl Fn(usize, usize) -> Option<String>) -> String {
    let mut out = String::new();
    for i in 0..len {
        let row: Vec<String> = (0..len).map(|j| cell(i, j).unwrap_or_default()).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}
