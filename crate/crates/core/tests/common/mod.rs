//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dca_core::attention::{AttentionInputs, AttentionMode};
use dca_core::schedules::ChunkConfig;
use dca_core::tensor::Matrix;
use rand::Rng;

/// Effective distance `M[i][j]` for `j ≤ i`, straight from the piecewise
/// definition: the query index depends on how many chunks separate i and j.
pub fn m_entry(i: usize, j: usize, cfg: &ChunkConfig) -> usize {
    let (s, c, w) = (cfg.chunk, cfg.context, cfg.window);
    let key = j % s;
    let t = i % s;
    let query = match i / s - j / s {
        0 => t,
        1 if t < w => s + t,
        _ => c - 1,
    };
    query - key
}

/// Relative distance used by `mode` for `(i, j)`, as a real number.
pub fn distance(mode: AttentionMode, i: usize, j: usize, len: usize, cfg: &ChunkConfig) -> Option<f64> {
    let same_chunk = i / cfg.chunk == j / cfg.chunk;
    let dist = match mode {
        AttentionMode::Vanilla => (i - j) as f64,
        AttentionMode::Pi => (i - j) as f64 / len.div_ceil(cfg.context) as f64,
        AttentionMode::FullDca => m_entry(i, j, cfg) as f64,
        AttentionMode::IntraOnly if same_chunk => m_entry(i, j, cfg) as f64,
        AttentionMode::IntraOnly => return None,
        AttentionMode::IntraInter if same_chunk => m_entry(i, j, cfg) as f64,
        AttentionMode::IntraInter => (cfg.context - 1 - j % cfg.chunk) as f64,
    };
    Some(dist)
}

/// Interleaved-pair rotation by `pos · base^(−2k/d)`.
pub fn rotate(v: &[f64], pos: f64, base: f64) -> Vec<f64> {
    let d = v.len();
    let mut out = v.to_vec();
    for k in 0..d / 2 {
        let theta = pos * base.powf(-(2.0 * k as f64) / d as f64);
        let (sin, cos) = theta.sin_cos();
        out[2 * k] = v[2 * k] * cos - v[2 * k + 1] * sin;
        out[2 * k + 1] = v[2 * k] * sin + v[2 * k + 1] * cos;
    }
    out
}

/// Single softmax over all visible keys with scores `⟨R(M[i][j])·q_i, k_j⟩/√d`.
pub fn brute_attention(inputs: &AttentionInputs<f64>, mode: AttentionMode, cfg: &ChunkConfig, base: f64) -> Matrix<f64> {
    let (len, d) = (inputs.q.rows(), inputs.q.cols());
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(len, d);
    for i in 0..len {
        let mut scores = Vec::new();
        for j in 0..=i {
            if let Some(dist) = distance(mode, i, j, len, cfg) {
                let q = rotate(inputs.q.row(i), dist, base);
                let s: f64 = q.iter().zip(inputs.k.row(j)).map(|(a, b)| a * b).sum();
                scores.push((j, s * scale));
            }
        }
        let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
        let row = out.row_mut(i);
        for (j, s) in scores {
            let p = (s - max).exp() / total;
            for (o, v) in row.iter_mut().zip(inputs.v.row(j)) {
                *o += p * v;
            }
        }
    }
    out
}

/// Uniformly random valid config with `c ≤ max_context`.
pub fn random_config(rng: &mut impl Rng, max_context: usize) -> ChunkConfig {
    let c = rng.gen_range(2..=max_context);
    let s = rng.gen_range(1..c);
    let w = rng.gen_range(0..=s.min(c - s));
    ChunkConfig::new(s, c, w).unwrap()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

pub fn random_inputs(rng: &mut impl Rng, len: usize, dim: usize) -> AttentionInputs<f64> {
    AttentionInputs::new(
        random_matrix(rng, len, dim, 2.0),
        random_matrix(rng, len, dim, 2.0),
        random_matrix(rng, len, dim, 1.0),
    )
    .unwrap()
}
