//! Toy-model logits against a stored vector produced by the brute-force
//! attention route. Set `DCA_REGEN_GOLDEN=1` to rewrite the file.

use std::fs;
use std::path::PathBuf;

use dca_core::attention::{AttentionMode, Kernel};
use dca_core::model::{init_model, ModelConfig, ToyModel};
use dca_core::schedules::ChunkConfig;
use dca_core::tensor::Matrix;

const INPUT: &[u8; 16] = b"Dual chunk attn!";

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_logits.txt")
}

fn setup() -> (ToyModel, ChunkConfig) {
    let cfg = ModelConfig {
        model_dim: 16,
        heads: 2,
        layers: 2,
        train_context: 8,
        ..ModelConfig::default()
    };
    let model = ToyModel::new(&init_model(&cfg, 1234).unwrap()).unwrap();
    (model, ChunkConfig::new(6, 8, 2).unwrap())
}

fn render(m: &Matrix<f32>) -> String {
    let mut out = format!("# seed=1234 d=16 heads=2 layers=2 s=6 c=8 w=2 input={:?}\n", std::str::from_utf8(INPUT).unwrap());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:.9e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn parse(text: &str) -> Vec<Vec<f32>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(' ').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn chunked_logits_match_golden() {
    let (model, cfg) = setup();
    if std::env::var_os("DCA_REGEN_GOLDEN").is_some() {
        let oracle = model.forward_with(INPUT, AttentionMode::FullDca, Some(&cfg), Kernel::Oracle).unwrap();
        fs::write(golden_path(), render(&oracle)).unwrap();
    }
    let golden = parse(&fs::read_to_string(golden_path()).expect("golden file; regenerate with DCA_REGEN_GOLDEN=1"));
    assert_eq!(golden.len(), INPUT.len());
    let got = model.forward(INPUT, AttentionMode::FullDca, Some(&cfg)).unwrap();
    let mut worst = 0f32;
    for (i, row) in golden.iter().enumerate() {
        assert_eq!(row.len(), 256);
        for (a, b) in row.iter().zip(got.row(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-4, "max abs diff {worst}");

    // Past s + w tokens the remapped positions change the logits.
    let vanilla = model.forward(INPUT, AttentionMode::Vanilla, None).unwrap();
    let last = INPUT.len() - 1;
    let gap = golden[last].iter().zip(vanilla.row(last)).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    assert!(gap > 1e-3, "{gap}");
}

#[test]
fn golden_input_spans_three_chunks() {
    let (_, cfg) = setup();
    assert_eq!(cfg.num_chunks(INPUT.len()), 3);
}
