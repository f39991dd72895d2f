//! Intra-only, intra+inter and full DCA compared on perplexity and passkey.

use super::passkey::{min_prompt_len, passkey_accuracy, passkey_grid};
use super::ppl::sliding_window_ppl;
use super::LanguageModel;
use crate::attention::AttentionMode;
use crate::error::Result;
use crate::schedules::ChunkConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub lengths: Vec<usize>,
    pub stride: usize,
    pub depths: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            lengths: vec![128, 256, 512],
            stride: 32,
            depths: vec![0.0, 0.5, 1.0],
            trials: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: AttentionMode,
    pub length: usize,
    pub ppl: f64,
    /// `None` when the length cannot hold a passkey prompt or `trials` is 0.
    pub passkey_accuracy: Option<f64>,
}

/// One row per (mode, length) over [`AttentionMode::ABLATION`].
pub fn ablation_run<M: LanguageModel + ?Sized>(
    model: &M,
    tokens: &[u8],
    cfg: &ChunkConfig,
    ab: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for mode in AttentionMode::ABLATION {
        for &length in &ab.lengths {
            let ppl = sliding_window_ppl(model, tokens, length, ab.stride.min(length), mode, Some(cfg))?;
            let passkey_accuracy = if ab.trials > 0 && length >= min_prompt_len() && !ab.depths.is_empty() {
                let cases = passkey_grid(&[length], &ab.depths, ab.trials, ab.seed)?;
                Some(passkey_accuracy(model, &cases, mode, Some(cfg))?.accuracy)
            } else {
                None
            };
            rows.push(AblationRow {
                mode,
                length,
                ppl,
                passkey_accuracy,
            });
        }
    }
    Ok(rows)
}

/// `mode,length,ppl,passkey_accuracy` rows; a missing accuracy is left blank.
pub fn ablation_csv(rows: &[AblationRow], config: &[(&str, String)]) -> String {
    let mut out = super::csv_preamble(config, "mode,length,ppl,passkey_accuracy");
    for r in rows {
        let acc = r.passkey_accuracy.map(|a| format!("{a:.4}")).unwrap_or_default();
        out.push_str(&format!("{},{},{:.6},{acc}\n", r.mode, r.length, r.ppl));
    }
    out
}
