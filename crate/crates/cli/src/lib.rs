//! Command-line front end: `parse`, `fragment`, `pretrain`, `finetune`, `explain`,
//! `expresstest`, `isomer-gen` and `evaluate`.

pub mod manifest;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mvcib::evalx::{
    cross_view_reconstruct, explain, fidelity_pair, jsd_groups, metric, JsdMode, MetricKind,
};
use mvcib::expressiveness::{
    default_suite, format_pairs, isomer_pairs, parse_pairs, run_suite, IsomerKind, Suite, EMBED_TOL,
};
use mvcib::fragmenter::brics_fragment;
use mvcib::model::MvcibModel;
use mvcib::molio::{ensure_3d, format_record, parse_dataset, parse_labels, Record};
use mvcib::trainer::{
    align_labels, finetune, prepare_all, pretrain_prepared, DownstreamHead, FinetuneConfig, Task,
    TrainConfig,
};

pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "mvcib",
    version,
    about = "Multi-view 2D/3D molecular pre-training",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a dataset, attach coordinates where missing and write it back with XYZ blocks.
    Parse(ParseArgs),
    /// Write BRICS fragments as JSON lines.
    Fragment(FragmentArgs),
    /// Pre-train on a dataset.
    Pretrain(PretrainArgs),
    /// Train a downstream head on a pre-trained checkpoint.
    Finetune(FinetuneArgs),
    /// Attention-based explanations, with fidelity when a head is given.
    Explain(ExplainArgs),
    /// Count graph pairs a method tells apart.
    Expresstest(ExpressArgs),
    /// Generate cis/trans or enantiomer pairs.
    IsomerGen(IsomerArgs),
    /// Reconstruction, JSD and task metrics for a checkpoint.
    Evaluate(EvaluateArgs),
}

/// Flat `key = value` config with overrides; later sources win.
#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Radius-graph cutoff in Å.
    #[arg(long)]
    cutoff: Option<f64>,
}

impl ConfigArgs {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(c) = self.cutoff {
            cfg.model.cutoff = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct ParseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = mvcib::molio::DEFAULT_CUTOFF)]
    cutoff: f64,
}

#[derive(Debug, Args)]
struct FragmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `id<TAB>v1,v2,...` rows.
    #[arg(long)]
    labels: PathBuf,
    /// `cls` or `reg`.
    #[arg(long, default_value = "cls")]
    task: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Update the encoders too instead of training a linear probe.
    #[arg(long)]
    unfreeze: bool,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Downstream head from `finetune`; enables fidelity.
    #[arg(long)]
    head: Option<PathBuf>,
    /// Label column the fidelity refers to.
    #[arg(long, default_value_t = 0)]
    task_index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExpressArgs {
    /// `wl1`, `ego` or `model`.
    #[arg(long, default_value = "wl1")]
    suite: String,
    /// Pair file; the built-in suite when absent.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = EMBED_TOL)]
    tol: f64,
    /// Ego-network radius for the `ego` suite.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Per-pair results as TSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct IsomerArgs {
    /// `cistrans` or `enantiomer`.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = mvcib::expressiveness::DEFAULT_PAIR_COUNT)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Labels for JSD groups (first column) and task metrics.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

/// Parses `argv` (program name first) and runs the command. Returns the process exit code:
/// 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Parse(a) => cmd_parse(a),
        Command::Fragment(a) => cmd_fragment(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Expresstest(a) => cmd_expresstest(a),
        Command::IsomerGen(a) => cmd_isomer_gen(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

/// `dir/manifest.json` for directory outputs, `<file>.manifest.json` otherwise.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

fn load_records(path: &Path) -> Result<Vec<Record>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_dataset(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn load_labels(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_labels(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn load_head(path: &Path) -> Result<DownstreamHead> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(DownstreamHead::from_bytes(&bytes)?)
}

fn load_model(path: &Path) -> Result<MvcibModel> {
    MvcibModel::load(path).with_context(|| format!("loading {}", path.display()))
}

fn finish(mut m: RunManifest, started: Instant, artifacts: &[&Path], out: &Path) -> Result<()> {
    for a in artifacts {
        m.add_artifact(a)?;
    }
    m.wall_clock_secs = started.elapsed().as_secs_f64();
    m.write(&manifest_path(out))
}

fn cmd_parse(a: ParseArgs) -> Result<()> {
    let started = Instant::now();
    let records = load_records(&a.input)?;
    let mut out = String::new();
    for r in &records {
        let mol = ensure_3d(r.mol.clone(), a.cutoff)?;
        out.push_str(&format_record(&r.id, &r.smiles, Some(&mol))?);
        out.push('\n');
    }
    std::fs::write(&a.out, out)?;
    println!("parsed {} molecules", records.len());
    let m = RunManifest::new(
        "parse",
        format!("cutoff = {}\n", a.cutoff),
        0,
        Some(&a.input),
    )?;
    finish(m, started, &[&a.out], &a.out)
}

fn cmd_fragment(a: FragmentArgs) -> Result<()> {
    let started = Instant::now();
    let records = load_records(&a.input)?;
    let mut out = String::new();
    for r in &records {
        let fs = brics_fragment(&r.mol);
        out.push_str(&json!({ "id": r.id, "fragments": fs.node_sets() }).to_string());
        out.push('\n');
    }
    std::fs::write(&a.out, out)?;
    println!("fragmented {} molecules", records.len());
    let m = RunManifest::new("fragment", String::new(), 0, Some(&a.input))?;
    finish(m, started, &[&a.out], &a.out)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let started = Instant::now();
    let mut cfg = a.config.train_config()?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let records = load_records(&a.data)?;
    let mols: Vec<_> = records.into_iter().map(|r| r.mol).collect();
    let preps = prepare_all(&mols, &cfg.model)?;
    let outcome = pretrain_prepared(&preps, &cfg, |e, r| {
        println!(
            "epoch {e} total {:.6} skl {:.6} jsmi {:.6} 2d {:.6} 3d {:.6} 2d_to_3d {:.6} 3d_to_2d {:.6}",
            r.total, r.l_skl, r.l_jsmi, r.l_2d, r.l_3d, r.l_2d_to_3d, r.l_3d_to_2d
        );
    })?;
    outcome.write(&a.out, &cfg)?;
    let m = RunManifest::new("pretrain", cfg.to_text(), cfg.seed, Some(&a.data))?;
    let files: Vec<PathBuf> = ["final.ckpt", "best.ckpt", "metrics.csv", "config.txt"]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    finish(m, started, &refs, &a.out)
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let started = Instant::now();
    let task: Task = a.task.parse().map_err(anyhow::Error::msg)?;
    let model = load_model(&a.ckpt)?;
    let records = load_records(&a.data)?;
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let labels = align_labels(&ids, &load_labels(&a.labels)?)?;
    let mols: Vec<_> = records.iter().map(|r| r.mol.clone()).collect();
    let preps = prepare_all(&mols, &model.config)?;
    let cfg = FinetuneConfig {
        task,
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        unfreeze: a.unfreeze,
        ..FinetuneConfig::default()
    };
    let outcome = finetune(&model, &preps, &labels, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let head_path = a.out.join("head.bin");
    std::fs::write(&head_path, outcome.head.to_bytes())?;
    let p = outcome.model.store.bind_frozen();
    let mut preds = String::from("id,split,prediction\n");
    let split_of = |i: usize| {
        if outcome.split.train.contains(&i) {
            "train"
        } else if outcome.split.valid.contains(&i) {
            "valid"
        } else {
            "test"
        }
    };
    for (i, prep) in preps.iter().enumerate() {
        let y = outcome.head.predict(&outcome.model.embed(&p, prep)?)?;
        let ys: Vec<String> = y.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(preds, "{},{},{}", prep.id, split_of(i), ys.join(";"));
    }
    let preds_path = a.out.join("predictions.csv");
    std::fs::write(&preds_path, preds)?;
    let kind = match outcome.metric_kind {
        MetricKind::RocAuc => "rocauc",
        MetricKind::Rmse => "rmse",
        MetricKind::Mae => "mae",
    };
    let metrics_path = a.out.join("metrics.csv");
    std::fs::write(
        &metrics_path,
        format!(
            "split,{kind}\nvalid,{}\ntest,{}\n",
            outcome.valid_metric, outcome.test_metric
        ),
    )?;
    println!(
        "valid {kind} {:.4} test {kind} {:.4}",
        outcome.valid_metric, outcome.test_metric
    );
    let mut artifacts = vec![head_path, preds_path, metrics_path];
    if a.unfreeze {
        let ckpt = a.out.join("model.ckpt");
        std::fs::write(&ckpt, outcome.model.checkpoint_bytes())?;
        artifacts.push(ckpt);
    }
    let config = format!(
        "task = {}\nepochs = {}\nlr = {}\nbatch_size = {}\nunfreeze = {}\n",
        task, a.epochs, a.lr, a.batch_size, a.unfreeze
    );
    let m = RunManifest::new("finetune", config, a.seed, Some(&a.data))?;
    let refs: Vec<&Path> = artifacts.iter().map(PathBuf::as_path).collect();
    finish(m, started, &refs, &a.out)
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let started = Instant::now();
    let model = load_model(&a.ckpt)?;
    let head = a.head.as_deref().map(load_head).transpose()?;
    let records = load_records(&a.data)?;
    let mols: Vec<_> = records.iter().map(|r| r.mol.clone()).collect();
    let preps = prepare_all(&mols, &model.config)?;
    let p = model.store.bind_frozen();
    let mut out = String::from("id,atom_index,max_xi_weight,selected\n");
    let mut fid = String::from("id,fid_minus,fid_plus\n");
    let (mut fm, mut fp) = (0.0, 0.0);
    for prep in &preps {
        let e = explain(&model, &p, prep)?;
        for (v, s) in e.scores.iter().enumerate() {
            let sel = e.selected.binary_search(&v).is_ok() as u8;
            let _ = writeln!(out, "{},{v},{s},{sel}", e.id);
        }
        if head.is_some() {
            let (minus, plus) = fidelity_pair(&model, head.as_ref(), prep, &e, a.task_index)?;
            let _ = writeln!(fid, "{},{minus},{plus}", e.id);
            fm += minus;
            fp += plus;
        }
    }
    std::fs::write(&a.out, out)?;
    let fid_path = fidelity_path(&a.out);
    let mut artifacts = vec![a.out.as_path()];
    if head.is_some() {
        std::fs::write(&fid_path, fid)?;
        artifacts.push(&fid_path);
        if !preps.is_empty() {
            let n = preps.len() as f64;
            println!("mean fid- {:.4} mean fid+ {:.4}", fm / n, fp / n);
        }
    }
    println!("explained {} molecules", preps.len());
    let m = RunManifest::new(
        "explain",
        format!("task_index = {}\n", a.task_index),
        0,
        Some(&a.data),
    )?;
    finish(m, started, &artifacts, &a.out)
}

/// `<out>` with `.fidelity.csv` appended to its file stem.
pub fn fidelity_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.fidelity.csv"))
}

fn cmd_expresstest(a: ExpressArgs) -> Result<()> {
    let started = Instant::now();
    let suite: Suite = a.suite.parse()?;
    if a.k == 0 {
        bail!("--k must be at least 1");
    }
    let cfg = a.config.train_config()?;
    let pairs = match &a.pairs {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            parse_pairs(&text)?
        }
        None => default_suite(cfg.seed)?,
    };
    let hits = run_suite(&pairs, suite, a.k, &cfg.model, a.tol)?;
    let n_dist = hits.iter().filter(|&&h| h).count();
    println!(
        "suite {}: distinguished {n_dist} of {}; undistinguished {}",
        a.suite,
        pairs.len(),
        pairs.len() - n_dist
    );
    if let Some(out) = &a.out {
        let mut s = String::from("pair\texpected\tdistinguished\n");
        for (i, (p, h)) in pairs.iter().zip(&hits).enumerate() {
            let _ = writeln!(s, "{i}\t{}\t{h}", p.expected);
        }
        std::fs::write(out, s)?;
        let config = format!(
            "suite = {}\nk = {}\ntol = {}\n{}",
            a.suite,
            a.k,
            a.tol,
            cfg.model.to_meta()
        );
        let m = RunManifest::new("expresstest", config, cfg.seed, a.pairs.as_deref())?;
        finish(m, started, &[out], out)?;
    }
    Ok(())
}

fn cmd_isomer_gen(a: IsomerArgs) -> Result<()> {
    let started = Instant::now();
    let kind: IsomerKind = a.kind.parse()?;
    let pairs = isomer_pairs(kind, a.count, a.seed)?;
    std::fs::write(&a.out, format_pairs(&pairs))?;
    println!("wrote {} {} pairs", pairs.len(), a.kind);
    let config = format!("kind = {}\ncount = {}\n", a.kind, a.count);
    let m = RunManifest::new("isomer-gen", config, a.seed, None)?;
    finish(m, started, &[&a.out], &a.out)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let model = load_model(&a.ckpt)?;
    let records = load_records(&a.data)?;
    let mols: Vec<_> = records.iter().map(|r| r.mol.clone()).collect();
    let preps = prepare_all(&mols, &model.config)?;
    let mut rows: Vec<(String, f64)> = Vec::new();
    let r = cross_view_reconstruct(&model, &preps)?;
    rows.push(("mse_adj_from_3d".into(), r.mse_adj_from_3d));
    rows.push(("mse_adj_baseline".into(), r.mse_adj_baseline));
    rows.push(("mse_dist_from_2d".into(), r.mse_dist_from_2d));
    rows.push(("mse_dist_baseline".into(), r.mse_dist_baseline));
    if let Some(lp) = &a.labels {
        let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let labels = align_labels(&ids, &load_labels(lp)?)?;
        let p = model.store.bind_frozen();
        let latent = model.config.latent;
        let mut groups = Vec::new();
        let mut embeds = Vec::new();
        for (prep, y) in preps.iter().zip(&labels) {
            let e = model.embed(&p, prep)?;
            let label = y[0].to_string();
            groups.push((e[..latent].to_vec(), label.clone(), "2d".to_string()));
            groups.push((e[latent..].to_vec(), label, "3d".to_string()));
            embeds.push(e);
        }
        rows.push((
            "jsd_distinguish".into(),
            jsd_groups(&groups, JsdMode::Distinguish)?,
        ));
        rows.push(("jsd_align".into(), jsd_groups(&groups, JsdMode::Align)?));
        if let Some(hp) = &a.head {
            let head = load_head(hp)?;
            let kind = match head.task {
                Task::Classification => MetricKind::RocAuc,
                Task::Regression => MetricKind::Rmse,
            };
            let preds: Vec<f64> = embeds
                .iter()
                .map(|e| head.predict(e).map(|v| v[0]))
                .collect::<mvcib::Result<_>>()?;
            let ys: Vec<f64> = labels.iter().map(|y| y[0]).collect();
            let name = match kind {
                MetricKind::RocAuc => "rocauc",
                _ => "rmse",
            };
            rows.push((name.into(), metric(&preds, &ys, kind)?));
        }
    }
    let mut s = String::from("metric,value\n");
    for (k, v) in &rows {
        let _ = writeln!(s, "{k},{v}");
        println!("{k} {v:.6}");
    }
    std::fs::write(&a.report, s)?;
    let m = RunManifest::new(
        "evaluate",
        model.config.to_meta(),
        model.config.init_seed,
        Some(&a.data),
    )?;
    finish(m, started, &[&a.report], &a.report)
}
