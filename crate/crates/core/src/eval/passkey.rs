//! Passkey retrieval: a five-digit number planted in repeated filler text.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::LanguageModel;
use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::schedules::ChunkConfig;

pub const PREAMBLE: &str = "There is an important info hidden inside a lot of irrelevant text. \
Find it and memorize them. I will quiz you about the important information there.";
pub const FILLER: [&str; 5] = [
    " The grass is green.",
    " The sky is blue.",
    " The sun is yellow.",
    " Here we go.",
    " There and back again.",
];
pub const QUESTION: &str = " What is the pass key? The pass key is";

/// Bytes decoded after the prompt.
pub const DECODE_LEN: usize = 7;

fn key_sentence(passkey: &str) -> String {
    format!(" The pass key is {passkey}. Remember it.")
}

/// Shortest prompt [`gen_passkey_case`] can build: no filler at all.
pub fn min_prompt_len() -> usize {
    PREAMBLE.len() + key_sentence("00000").len() + QUESTION.len()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PasskeyCase {
    /// Filler sentences in order, without the key sentence.
    pub filler: String,
    pub passkey: String,
    pub depth: f64,
    pub total_len: usize,
    pub prompt: String,
    pub expected: String,
    /// Byte offset of the key sentence in `prompt`.
    pub key_offset: usize,
}

/// Builds a prompt of exactly `total_len` bytes. The key sentence goes
/// after `round(depth · n)` of the `n` filler sentences; leftover bytes are
/// spaces between the preamble and the filler.
pub fn gen_passkey_case<R: Rng + ?Sized>(total_len: usize, depth: f64, rng: &mut R) -> Result<PasskeyCase> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::InvalidArgument(format!("depth {depth} outside [0, 1]")));
    }
    let needed = min_prompt_len();
    if total_len < needed {
        return Err(Error::PasskeyTooShort { total_len, needed });
    }
    let passkey = rng.gen_range(10_000u32..100_000).to_string();
    let key = key_sentence(&passkey);

    let mut budget = total_len - needed;
    let mut sentences = Vec::new();
    for s in FILLER.iter().cycle() {
        if s.len() > budget {
            break;
        }
        budget -= s.len();
        sentences.push(*s);
    }
    let at = (depth * sentences.len() as f64).round() as usize;
    let before: String = sentences[..at].concat();
    let after: String = sentences[at..].concat();

    let mut prompt = String::with_capacity(total_len);
    prompt.push_str(PREAMBLE);
    prompt.push_str(&" ".repeat(budget));
    prompt.push_str(&before);
    let key_offset = prompt.len();
    prompt.push_str(&key);
    prompt.push_str(&after);
    prompt.push_str(QUESTION);
    debug_assert_eq!(prompt.len(), total_len);

    Ok(PasskeyCase {
        filler: sentences.concat(),
        expected: passkey.clone(),
        passkey,
        depth,
        total_len,
        prompt,
        key_offset,
    })
}

/// `trials` cases for every (length, depth) cell, drawn in that order from
/// one generator seeded with `seed`.
pub fn passkey_grid(lengths: &[usize], depths: &[f64], trials: usize, seed: u64) -> Result<Vec<PasskeyCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(lengths.len() * depths.len() * trials);
    for &len in lengths {
        for &depth in depths {
            for _ in 0..trials {
                cases.push(gen_passkey_case(len, depth, &mut rng)?);
            }
        }
    }
    Ok(cases)
}

/// True when the decoded bytes, after leading whitespace, start with the key.
pub fn is_correct(decoded: &[u8], expected: &str) -> bool {
    let start = decoded.iter().position(|b| !b.is_ascii_whitespace()).unwrap_or(decoded.len());
    decoded[start..].starts_with(expected.as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PasskeyCell {
    pub length: usize,
    pub depth: f64,
    pub trials: usize,
    pub correct: usize,
}

impl PasskeyCell {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.trials as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PasskeyReport {
    pub mode: AttentionMode,
    pub accuracy: f64,
    /// Sorted by length, then depth.
    pub grid: Vec<PasskeyCell>,
}

impl PasskeyReport {
    pub fn cell(&self, length: usize, depth: f64) -> Option<&PasskeyCell> {
        self.grid.iter().find(|c| c.length == length && c.depth == depth)
    }
}

pub fn passkey_accuracy<M: LanguageModel + ?Sized>(
    model: &M,
    cases: &[PasskeyCase],
    mode: AttentionMode,
    cfg: Option<&ChunkConfig>,
) -> Result<PasskeyReport> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no passkey cases".into()));
    }
    let hits = cases
        .par_iter()
        .map(|c| {
            let out = model.generate(c.prompt.as_bytes(), DECODE_LEN, mode, cfg)?;
            Ok(is_correct(&out, &c.expected))
        })
        .collect::<Result<Vec<bool>>>()?;

    let mut grid: Vec<PasskeyCell> = Vec::new();
    for (case, hit) in cases.iter().zip(&hits) {
        match grid.iter_mut().find(|g| g.length == case.total_len && g.depth == case.depth) {
            Some(g) => {
                g.trials += 1;
                g.correct += *hit as usize;
            }
            None => grid.push(PasskeyCell {
                length: case.total_len,
                depth: case.depth,
                trials: 1,
                correct: *hit as usize,
            }),
        }
    }
    grid.sort_by(|a, b| a.length.cmp(&b.length).then(a.depth.total_cmp(&b.depth)));
    let correct = hits.iter().filter(|h| **h).count();
    Ok(PasskeyReport {
        mode,
        accuracy: correct as f64 / cases.len() as f64,
        grid,
    })
}

/// `mode,length,depth,accuracy` rows under a config comment.
pub fn passkey_csv(reports: &[PasskeyReport], config: &[(&str, String)]) -> String {
    let mut out = super::csv_preamble(config, "mode,length,depth,accuracy");
    for r in reports {
        for c in &r.grid {
            out.push_str(&format!("{},{},{},{:.4}\n", r.mode, c.length, c.depth, c.accuracy()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    /// Answers with whatever follows the last "pass key is " before the question.
    struct CopyOracle;

    impl LanguageModel for CopyOracle {
        fn logits(&self, tokens: &[u8], _: AttentionMode, _: Option<&ChunkConfig>) -> Result<Matrix<f32>> {
            Ok(Matrix::zeros(tokens.len(), 256))
        }

        fn generate(&self, prompt: &[u8], n: usize, _: AttentionMode, _: Option<&ChunkConfig>) -> Result<Vec<u8>> {
            let text = std::str::from_utf8(prompt).unwrap();
            let at = text.find("pass key is ").unwrap() + "pass key is ".len();
            let mut out = b" ".to_vec();
            out.extend(text[at..].bytes().take_while(u8::is_ascii_digit));
            out.resize(n, b' ');
            Ok(out)
        }
    }

    struct Constant;

    impl LanguageModel for Constant {
        fn logits(&self, tokens: &[u8], _: AttentionMode, _: Option<&ChunkConfig>) -> Result<Matrix<f32>> {
            Ok(Matrix::from_fn(tokens.len(), 256, |_, j| if j == b'7' as usize { 1.0 } else { 0.0 }))
        }
    }

    #[test]
    fn prompt_has_exact_length_and_one_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [min_prompt_len(), 300, 513, 2048] {
            for depth in [0.0, 0.3, 0.5, 1.0] {
                let c = gen_passkey_case(len, depth, &mut rng).unwrap();
                assert_eq!(c.prompt.len(), len);
                assert_eq!(c.prompt.matches(&c.passkey).count(), 1);
                assert_eq!(c.passkey.len(), 5);
                assert!(c.prompt.ends_with(QUESTION));
                assert_eq!(&c.prompt[c.key_offset..c.key_offset + 17], " The pass key is ");
            }
        }
    }

    #[test]
    fn depth_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = gen_passkey_case(600, 0.0, &mut rng).unwrap();
        assert!(c.prompt[..c.key_offset].trim_end() == PREAMBLE);
        let c = gen_passkey_case(600, 1.0, &mut rng).unwrap();
        let key = key_sentence(&c.passkey);
        assert!(c.prompt.ends_with(&format!("{key}{QUESTION}")));
    }

    #[test]
    fn insertion_tracks_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let offsets: Vec<usize> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|d| gen_passkey_case(1024, *d, &mut rng).unwrap().key_offset)
            .collect();
        assert!(offsets.windows(2).all(|w| w[0] < w[1]), "{offsets:?}");
    }

    #[test]
    fn too_short_and_bad_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            gen_passkey_case(min_prompt_len() - 1, 0.5, &mut rng),
            Err(Error::PasskeyTooShort { .. })
        ));
        assert!(matches!(gen_passkey_case(1000, 1.5, &mut rng), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn seeded_cases_reproduce() {
        let a = gen_passkey_case(2048, 0.5, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = gen_passkey_case(2048, 0.5, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let keys: std::collections::HashSet<String> = (0..20)
            .map(|s| gen_passkey_case(2048, 0.5, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().passkey)
            .collect();
        assert_eq!(keys.len(), 20);
    }

    #[test]
    fn stubs_bound_the_score() {
        let cases = passkey_grid(&[256, 512], &[0.0, 0.5, 1.0], 4, 9).unwrap();
        let copy = passkey_accuracy(&CopyOracle, &cases, AttentionMode::FullDca, None).unwrap();
        assert_eq!(copy.accuracy, 1.0);
        assert_eq!(copy.grid.len(), 6);
        assert!(copy.grid.iter().all(|c| c.trials == 4 && c.correct == 4));
        let constant = passkey_accuracy(&Constant, &cases, AttentionMode::FullDca, None).unwrap();
        assert_eq!(constant.accuracy, 0.0);
    }

    #[test]
    fn correctness_ignores_leading_space_only() {
        assert!(is_correct(b" 12345.", "12345"));
        assert!(is_correct(b"12345", "12345"));
        assert!(!is_correct(b" 1234 ", "12345"));
        assert!(!is_correct(b"x12345", "12345"));
    }

    #[test]
    fn csv_rows_per_cell() {
        let cases = passkey_grid(&[256], &[0.0, 1.0], 2, 5).unwrap();
        let r = passkey_accuracy(&CopyOracle, &cases, AttentionMode::Vanilla, None).unwrap();
        let csv = passkey_csv(&[r], &[("seed", "5".into())]);
        assert_eq!(
            csv,
            "# seed=5\nmode,length,depth,accuracy\nvanilla,256,0,1.0000\nvanilla,256,1,1.0000\n"
        );
    }
}
