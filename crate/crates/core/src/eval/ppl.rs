//! Sliding-window perplexity.
//!
//! The model reads windows of at most `eval_len` tokens whose ends advance
//! by `stride`. Row `p` of a window predicts the token right after it, so a
//! window `[a, e)` can score targets `a + 1 ..= e`; each window scores only
//! the targets no earlier window reached. Every token after the first is
//! scored exactly once, and past the first window each target sees at least
//! `eval_len − stride + 1` tokens of context.

use std::ops::Range;

use rayon::prelude::*;

use super::LanguageModel;
use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::schedules::ChunkConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    /// Model input.
    pub input: Range<usize>,
    /// Target indices scored from this window; target `t` is predicted by
    /// input row `t − 1 − input.start`.
    pub targets: Range<usize>,
}

pub fn windows(n_tokens: usize, eval_len: usize, stride: usize) -> Result<Vec<Window>> {
    if eval_len < 2 {
        return Err(Error::InvalidArgument(format!("eval_len {eval_len} must be ≥ 2")));
    }
    if stride == 0 || stride > eval_len {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} must lie in [1, eval_len = {eval_len}]"
        )));
    }
    if n_tokens < eval_len.max(2) {
        return Err(Error::InsufficientTokens {
            have: n_tokens,
            need: eval_len,
        });
    }
    let last = n_tokens - 1;
    let mut out = Vec::new();
    let mut scored_to = 0;
    let mut end = eval_len.min(last);
    loop {
        out.push(Window {
            input: end.saturating_sub(eval_len)..end,
            targets: scored_to + 1..end + 1,
        });
        scored_to = end;
        if end == last {
            break;
        }
        end = (end + stride).min(last);
    }
    Ok(out)
}

fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|z| (*z as f64 - max).exp()).sum::<f64>().ln() + max;
    row[target] as f64 - lse
}

/// Negative log-likelihood of tokens `1..n`, in order.
pub fn sliding_window_nll<M: LanguageModel + ?Sized>(
    model: &M,
    tokens: &[u8],
    eval_len: usize,
    stride: usize,
    mode: AttentionMode,
    cfg: Option<&ChunkConfig>,
) -> Result<Vec<f64>> {
    let wins = windows(tokens.len(), eval_len, stride)?;
    let per_window: Vec<Result<Vec<f64>>> = wins
        .par_iter()
        .map(|w| {
            let logits = model.logits(&tokens[w.input.clone()], mode, cfg)?;
            Ok(w.targets
                .clone()
                .map(|t| -log_softmax_at(logits.row(t - 1 - w.input.start), tokens[t] as usize))
                .collect())
        })
        .collect();
    let mut nll = Vec::with_capacity(tokens.len() - 1);
    for w in per_window {
        nll.extend(w?);
    }
    Ok(nll)
}

/// `exp(mean NLL)` over every token after the first.
pub fn sliding_window_ppl<M: LanguageModel + ?Sized>(
    model: &M,
    tokens: &[u8],
    eval_len: usize,
    stride: usize,
    mode: AttentionMode,
    cfg: Option<&ChunkConfig>,
) -> Result<f64> {
    let nll = sliding_window_nll(model, tokens, eval_len, stride, mode, cfg)?;
    Ok((nll.iter().sum::<f64>() / nll.len() as f64).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PplReport {
    pub mode: AttentionMode,
    pub stride: usize,
    pub lengths: Vec<usize>,
    pub ppl: Vec<f64>,
}

impl PplReport {
    pub fn evaluate<M: LanguageModel + ?Sized>(
        model: &M,
        tokens: &[u8],
        lengths: &[usize],
        stride: usize,
        mode: AttentionMode,
        cfg: Option<&ChunkConfig>,
    ) -> Result<Self> {
        if lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("lengths must be strictly increasing".into()));
        }
        let ppl = lengths
            .iter()
            .map(|&len| sliding_window_ppl(model, tokens, len, stride.min(len), mode, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            stride,
            lengths: lengths.to_vec(),
            ppl,
        })
    }

    pub fn get(&self, length: usize) -> Option<f64> {
        self.lengths.iter().position(|l| *l == length).map(|i| self.ppl[i])
    }
}

/// `mode,length,ppl` rows under a config comment.
pub fn ppl_csv(reports: &[PplReport], config: &[(&str, String)]) -> String {
    let mut out = super::csv_preamble(config, "mode,length,ppl");
    for r in reports {
        for (len, ppl) in r.lengths.iter().zip(&r.ppl) {
            out.push_str(&format!("{},{len},{ppl:.6}\n", r.mode));
        }
    }
    out
}
