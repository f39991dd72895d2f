//! Evaluation protocols: sliding-window perplexity, passkey retrieval and
//! the three-arm ablation over the dual-chunk passes.

pub mod ablation;
pub mod passkey;
pub mod ppl;

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::model::{argmax, ToyModel};
use crate::schedules::ChunkConfig;
use crate::tensor::Matrix;

pub use ablation::{ablation_csv, ablation_run, AblationConfig, AblationRow};
pub use passkey::{gen_passkey_case, passkey_accuracy, passkey_csv, passkey_grid, PasskeyCase, PasskeyReport};
pub use ppl::{ppl_csv, sliding_window_nll, sliding_window_ppl, PplReport};

/// Anything that maps a byte sequence to next-byte logits.
pub trait LanguageModel: Sync {
    /// `l × 256` causal logits.
    fn logits(&self, tokens: &[u8], mode: AttentionMode, cfg: Option<&ChunkConfig>) -> Result<Matrix<f32>>;

    /// Greedy continuation. The default re-runs [`LanguageModel::logits`]
    /// on the growing sequence.
    fn generate(&self, prompt: &[u8], n: usize, mode: AttentionMode, cfg: Option<&ChunkConfig>) -> Result<Vec<u8>> {
        if prompt.is_empty() {
            return Err(Error::Degenerate("empty prompt"));
        }
        let mut seq = prompt.to_vec();
        for _ in 0..n {
            let logits = self.logits(&seq, mode, cfg)?;
            seq.push(argmax(logits.row(logits.rows() - 1)) as u8);
        }
        Ok(seq.split_off(prompt.len()))
    }
}

impl LanguageModel for ToyModel {
    fn logits(&self, tokens: &[u8], mode: AttentionMode, cfg: Option<&ChunkConfig>) -> Result<Matrix<f32>> {
        self.forward(tokens, mode, cfg)
    }

    fn generate(&self, prompt: &[u8], n: usize, mode: AttentionMode, cfg: Option<&ChunkConfig>) -> Result<Vec<u8>> {
        self.generate_greedy(prompt, n, mode, cfg)
    }
}

/// `# key=value ...` comment line followed by the header row.
pub fn csv_preamble(config: &[(&str, String)], header: &str) -> String {
    let pairs: Vec<String> = config.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\n{header}\n", pairs.join(" "))
}
