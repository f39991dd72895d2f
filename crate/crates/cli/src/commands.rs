use std::fs;
use std::path::{Path, PathBuf};

use dca_core::attention::AttentionMode;
use dca_core::checkpoint::{self, write_atomic};
use dca_core::eval::{ablation_csv, ablation_run, csv_preamble, passkey_accuracy, passkey_csv, passkey_grid, ppl_csv, AblationConfig, PplReport};
use dca_core::model::{init_model, ModelCheckpoint, ModelConfig, ToyModel};
use dca_core::schedules::{pi_matrix, relative_position_matrix, rope_matrix, ChunkConfig};
use dca_core::train::{corpus_fingerprint, split_corpus, train as run_training, TrainConfig};

use crate::config::Resolver;
use crate::{AblateArgs, ChunkArgs, CliError, EvalPplArgs, MatrixArgs, OutArgs, PasskeyArgs, TrainArgs};

fn path_flag(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn out_dir(r: &mut Resolver, out: OutArgs) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(r.get("out-dir", path_flag(out.out_dir), "out".into())?);
    fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn existing_file(r: &mut Resolver, key: &'static str, flag: Option<PathBuf>, default: Option<&Path>) -> Result<PathBuf, CliError> {
    let path = match r.opt(key, path_flag(flag))? {
        Some(p) => PathBuf::from(p),
        None => match default {
            Some(d) => {
                r.note(key, d.display());
                d.to_path_buf()
            }
            None => return Err(CliError::Usage(format!("--{key} is required"))),
        },
    };
    if !path.is_file() {
        return Err(CliError::Usage(format!("{key} not found: {}", path.display())));
    }
    Ok(path)
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn chunk_config(r: &mut Resolver, args: ChunkArgs, context: usize) -> Result<ChunkConfig, CliError> {
    r.note("ctx", context);
    let chunk = r.get("chunk", args.chunk, 3 * context / 4)?;
    let window = r.get("window", args.window, context.saturating_sub(chunk))?;
    Ok(ChunkConfig::new(chunk, context, window)?)
}

fn heldout_tokens(r: &mut Resolver, corpus: &[u8], heldout: Option<f64>, eval_tokens: Option<usize>) -> Result<Vec<u8>, CliError> {
    let frac = r.get("heldout", heldout, 0.05)?;
    if !(0.0..1.0).contains(&frac) || frac == 0.0 {
        return Err(CliError::Usage(format!("--heldout {frac} must lie in (0, 1)")));
    }
    let n = r.get("eval-tokens", eval_tokens, 8192)?;
    let (_, ho) = split_corpus(corpus, frac);
    Ok(ho[..n.min(ho.len())].to_vec())
}

fn load_model(path: &Path) -> Result<(ModelCheckpoint, ToyModel), CliError> {
    let ckpt = checkpoint::load(path)?;
    let model = ToyModel::new(&ckpt)?;
    Ok((ckpt, model))
}

fn write_csv(dir: &Path, name: &str, body: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    write_atomic(&path, body.as_bytes())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn train(a: TrainArgs, mut r: Resolver) -> Result<(), CliError> {
    let corpus_path = existing_file(&mut r, "corpus", a.corpus, None)?;
    let dir = out_dir(&mut r, a.out)?;
    let ckpt_path = match r.opt("checkpoint", path_flag(a.checkpoint))? {
        Some(p) => PathBuf::from(p),
        None => dir.join("model.ckpt"),
    };
    let d = ModelConfig::default();
    let seed = r.get("seed", a.seed, 0)?;
    let model_cfg = ModelConfig {
        model_dim: r.get("model-dim", a.model_dim, d.model_dim)?,
        heads: r.get("heads", a.heads, d.heads)?,
        layers: r.get("layers", a.layers, d.layers)?,
        train_context: r.get("ctx", a.ctx, d.train_context)?,
        seed,
        ..d
    };
    let td = TrainConfig::default();
    let cfg = TrainConfig {
        steps: r.get("steps", a.steps, td.steps)?,
        lr: r.get("lr", a.lr, td.lr)?,
        batch: r.get("batch", a.batch, td.batch)?,
        context: model_cfg.train_context,
        warmup: r.get("warmup", a.warmup, td.warmup)?,
        grad_clip: r.get("grad-clip", a.grad_clip, td.grad_clip)?,
        log_every: r.get("log-every", a.log_every, td.log_every)?,
    };
    let heldout = r.get("heldout", a.heldout, 0.05)?;
    if !(0.0..1.0).contains(&heldout) {
        return Err(CliError::Usage(format!("--heldout {heldout} must lie in [0, 1)")));
    }

    let corpus = read(&corpus_path)?;
    let (train_part, _) = split_corpus(&corpus, heldout);
    let mut init = init_model(&model_cfg, seed)?;
    init.corpus_fingerprint = corpus_fingerprint(train_part);
    let mut log = String::new();
    let ckpt = run_training(&init, train_part, &cfg, |l| {
        eprintln!("step {:>6}  loss {:.4}  lr {:.3e}", l.step, l.loss, l.lr);
        log.push_str(&format!("{},{:.6},{:.6e}\n", l.step, l.loss, l.lr));
    })?;
    checkpoint::save(&ckpt, &ckpt_path)?;
    eprintln!("wrote {}", ckpt_path.display());
    let csv = format!("{}{log}", csv_preamble(&r.resolved(), "step,loss,lr"));
    write_csv(&dir, "train_log.csv", &csv)
}

pub fn eval_ppl(a: EvalPplArgs, mut r: Resolver) -> Result<(), CliError> {
    let dir = out_dir(&mut r, a.out)?;
    let default_ckpt = dir.join("model.ckpt");
    let ckpt_path = existing_file(&mut r, "checkpoint", a.checkpoint, Some(&default_ckpt))?;
    let corpus_path = existing_file(&mut r, "corpus", a.corpus, None)?;
    let modes: Vec<AttentionMode> = r.list("modes", a.modes, "vanilla,dca")?;
    let lengths: Vec<usize> = r.list("lengths", a.lengths, "128,256,512,1024")?;
    let stride = r.get("stride", a.stride, 32)?;
    let corpus = read(&corpus_path)?;
    let tokens = heldout_tokens(&mut r, &corpus, a.heldout, a.eval_tokens)?;
    let (ckpt, model) = load_model(&ckpt_path)?;
    let cfg = chunk_config(&mut r, a.chunk, ckpt.config.train_context)?;

    let mut reports = Vec::new();
    for mode in modes {
        let report = PplReport::evaluate(&model, &tokens, &lengths, stride, mode, Some(&cfg))?;
        for (len, ppl) in report.lengths.iter().zip(&report.ppl) {
            eprintln!("{mode:>12} {len:>6} {ppl:.4}");
        }
        reports.push(report);
    }
    write_csv(&dir, "ppl.csv", &ppl_csv(&reports, &r.resolved()))
}

pub fn passkey(a: PasskeyArgs, mut r: Resolver) -> Result<(), CliError> {
    let dir = out_dir(&mut r, a.out)?;
    let default_ckpt = dir.join("model.ckpt");
    let ckpt_path = existing_file(&mut r, "checkpoint", a.checkpoint, Some(&default_ckpt))?;
    let modes: Vec<AttentionMode> = r.list("modes", a.modes, "vanilla,dca")?;
    let lengths: Vec<usize> = r.list("lengths", a.lengths, "256,512")?;
    let depths: Vec<f64> = r.list("depths", a.depths, "0,0.5,1")?;
    let trials = r.get("trials", a.trials, 20)?;
    if trials == 0 {
        return Err(CliError::Usage("--trials must be ≥ 1".into()));
    }
    let seed = r.get("seed", a.seed, 0)?;
    let cases = passkey_grid(&lengths, &depths, trials, seed)?;
    let (ckpt, model) = load_model(&ckpt_path)?;
    let cfg = chunk_config(&mut r, a.chunk, ckpt.config.train_context)?;

    let mut reports = Vec::new();
    for mode in modes {
        let report = passkey_accuracy(&model, &cases, mode, Some(&cfg))?;
        eprintln!("{mode:>12} accuracy {:.3}", report.accuracy);
        reports.push(report);
    }
    write_csv(&dir, "passkey.csv", &passkey_csv(&reports, &r.resolved()))
}

pub fn ablate(a: AblateArgs, mut r: Resolver) -> Result<(), CliError> {
    let dir = out_dir(&mut r, a.out)?;
    let default_ckpt = dir.join("model.ckpt");
    let ckpt_path = existing_file(&mut r, "checkpoint", a.checkpoint, Some(&default_ckpt))?;
    let corpus_path = existing_file(&mut r, "corpus", a.corpus, None)?;
    let d = AblationConfig::default();
    let lengths: Vec<usize> = r.list("lengths", a.lengths, "128,256,512")?;
    let depths: Vec<f64> = r.list("depths", a.depths, "0,0.5,1")?;
    let ab = AblationConfig {
        lengths,
        stride: r.get("stride", a.stride, d.stride)?,
        depths,
        trials: r.get("trials", a.trials, d.trials)?,
        seed: r.get("seed", a.seed, d.seed)?,
    };
    let corpus = read(&corpus_path)?;
    let tokens = heldout_tokens(&mut r, &corpus, a.heldout, a.eval_tokens)?;
    let (ckpt, model) = load_model(&ckpt_path)?;
    let cfg = chunk_config(&mut r, a.chunk, ckpt.config.train_context)?;

    let rows = ablation_run(&model, &tokens, &cfg, &ab)?;
    for row in &rows {
        let acc = row.passkey_accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into());
        eprintln!("{:>12} {:>6} ppl {:.4} passkey {acc}", row.mode, row.length, row.ppl);
    }
    write_csv(&dir, "ablation.csv", &ablation_csv(&rows, &r.resolved()))
}

pub fn matrix(a: MatrixArgs, mut r: Resolver) -> Result<(), CliError> {
    let len = r
        .opt("len", a.len)?
        .ok_or_else(|| CliError::Usage("matrix requires --len".into()))?;
    let mode = r.get("mode", a.mode, "dca".into())?;
    let ctx = r.opt("ctx", a.ctx)?;
    let need_ctx = || CliError::Usage(format!("--mode {mode} requires --ctx"));
    let tsv = match mode.as_str() {
        "rope" => rope_matrix(len)?.to_tsv(),
        "pi" => pi_matrix(len, ctx.ok_or_else(need_ctx)?)?.to_tsv(),
        "dca" => {
            let cfg = chunk_config(&mut r, a.chunk, ctx.ok_or_else(need_ctx)?)?;
            relative_position_matrix(len, &cfg)?.to_tsv()
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown matrix mode '{other}' (valid: dca, rope, pi)"
            )))
        }
    };
    print!("{tsv}");
    Ok(())
}
