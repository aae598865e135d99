//! Command-line front end: synthetic data generation, training, evaluation,
//! variant batteries, embedding probes, and a gradient self-check.
//!
//! Every flag has a config-file twin (see `config.example.toml`); command-line
//! values win over the file, which wins over built-in defaults. Errors leave
//! on stderr as a single `error kind=... msg="..."` line and set the exit
//! code by kind: 2 usage, 3 data, 4 numeric.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stae::analysis::{
    adjacent_vs_distant, frame_correlation, run_ablation, shuffle_probe, dump_embedding,
};
use stae::config::{parse_horizons, pick, pick_opt, resolve_seed, FileConfig};
use stae::data::{
    chronological_split, generate_synthetic, Normalizer, SplitSpec, SyntheticConfig,
    TrafficDataset, WindowSet,
};
use stae::error::{Error, Result};
use stae::gradcheck::grad_check;
use stae::metrics::{evaluate, EvalConfig};
use stae::model::{
    load_checkpoint, save_checkpoint, Checkpoint, EmbeddingKind, Model, ModelConfig, Variant,
};
use stae::stts::{atomic_write, load_dataset, save_dataset};
use stae::training::{history_to_csv, train, TrainConfig};
use stae::transformer::AttentionScale;

#[derive(Parser)]
#[command(name = "stae", version, about = "Spatio-temporal traffic forecasting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic traffic series and save it as .stts
    GenData(GenDataArgs),
    /// Train a model and write history.csv plus a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test stretch of a series
    Eval(EvalArgs),
    /// Train and compare model variants on one dataset
    Ablate(AblateArgs),
    /// Measure sensitivity to frame order via input-shuffle probes
    ShuffleTest(ShuffleArgs),
    /// Export a learned embedding table (and its frame correlations)
    DumpEmbedding(DumpArgs),
    /// Compare analytic gradients against central differences
    GradCheck(GradCheckArgs),
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// Model variant: full, no-adaptive, no-periodicity, no-temporal,
    /// no-transformer, or spatial-embedding
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    input_len: Option<usize>,
    #[arg(long)]
    output_len: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    adaptive_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Attention scaling: per-head or model-dim
    #[arg(long)]
    scale_mode: Option<String>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    lr0: Option<f64>,
    /// Comma-separated 1-based epochs where the rate decays
    #[arg(long, value_delimiter = ',')]
    decay_milestones: Option<Vec<usize>>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    null_value: Option<f64>,
    #[arg(long)]
    mape_epsilon: Option<f64>,
    /// Stop early once the epoch's training MAE drops below this
    #[arg(long)]
    target_train_mae: Option<f64>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory the .stts file is written into
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input series (.stts)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for history.csv and the checkpoint
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train:validation:test weights, e.g. 7:1:2
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint prefix (the path without .manifest/.blob)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated 1-based horizons to print; default prints all
    #[arg(long)]
    horizons: Option<String>,
    #[arg(long)]
    null_value: Option<f64>,
    #[arg(long)]
    mape_epsilon: Option<f64>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Optional directory for metrics.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for ablation.csv
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated variant names; default runs all six
    #[arg(long)]
    variants: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct ShuffleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for shuffle.csv
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trained full-variant checkpoint prefix; give both or neither
    #[arg(long)]
    adaptive_checkpoint: Option<PathBuf>,
    /// Trained spatial-embedding checkpoint prefix
    #[arg(long)]
    node_checkpoint: Option<PathBuf>,
    #[arg(long)]
    n_perms: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Table to export: adaptive, node, day-of-week, or time-of-day
    #[arg(long)]
    which: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Check preset; only "tiny" is defined
    #[arg(long)]
    preset: Option<String>,
    /// Central-difference step, within [1e-6, 1e-4]
    #[arg(long)]
    h: Option<f64>,
    /// Relative-error tolerance
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let to_stderr = e.use_stderr();
            let _ = e.print();
            if to_stderr {
                eprintln!("error kind=usage msg=\"invalid command line\"");
                std::process::exit(2);
            }
            std::process::exit(0);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error kind={} msg={:?}", e.kind().label(), e.to_string());
        std::process::exit(e.kind().exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::ShuffleTest(args) => cmd_shuffle_test(args),
        Command::DumpEmbedding(args) => cmd_dump_embedding(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    }
}

// ── shared resolution ──

fn required_path(flag: Option<PathBuf>, file: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    pick_opt(flag, file).ok_or_else(|| Error::Config(format!("--{name} is required")))
}

fn resolve_model(flags: &ModelFlags, file: &FileConfig, nodes: usize) -> Result<ModelConfig> {
    let variant = match pick_opt(flags.variant.as_deref(), file.variant.as_deref()) {
        Some(s) => s.parse::<Variant>()?,
        None => Variant::Full,
    };
    let scale_mode = match pick_opt(flags.scale_mode.as_deref(), file.scale_mode.as_deref()) {
        Some(s) => s.parse::<AttentionScale>()?,
        None => AttentionScale::PerHead,
    };
    let d = ModelConfig::default();
    let cfg = ModelConfig {
        variant,
        input_len: pick(flags.input_len, file.input_len, d.input_len),
        output_len: pick(flags.output_len, file.output_len, d.output_len),
        nodes,
        feature_dim: pick(flags.feature_dim, file.feature_dim, d.feature_dim),
        adaptive_dim: pick(flags.adaptive_dim, file.adaptive_dim, d.adaptive_dim),
        heads: pick(flags.heads, file.heads, d.heads),
        layers: pick(flags.layers, file.layers, d.layers),
        ffn_dim: pick(flags.ffn_dim, file.ffn_dim, d.ffn_dim),
        dropout: pick(flags.dropout, file.dropout, d.dropout),
        scale_mode,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_train(flags: &TrainFlags, file: &FileConfig, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr0: pick(flags.lr0, file.lr0, d.lr0),
        decay_milestones: pick(
            flags.decay_milestones.clone(),
            file.decay_milestones.clone(),
            d.decay_milestones,
        ),
        decay_factor: pick(flags.decay_factor, file.decay_factor, d.decay_factor),
        batch_size: pick(flags.batch_size, file.batch_size, d.batch_size),
        max_epochs: pick(flags.max_epochs, file.max_epochs, d.max_epochs),
        patience: pick(flags.patience, file.patience, d.patience),
        seed,
        null_value: pick(flags.null_value, file.null_value, d.null_value),
        mape_epsilon: pick(flags.mape_epsilon, file.mape_epsilon, d.mape_epsilon),
        target_train_mae: pick_opt(flags.target_train_mae, file.target_train_mae),
        eval_batch_size: pick(flags.eval_batch_size, file.eval_batch_size, d.eval_batch_size),
        threads: pick(flags.threads, file.threads, d.threads),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_split(flag: Option<&str>, file: &FileConfig) -> Result<SplitSpec> {
    match pick_opt(flag, file.split.as_deref()) {
        Some(s) => s.parse(),
        None => SplitSpec::new([7.0, 1.0, 2.0]),
    }
}

fn parse_variants(text: Option<&str>, file: &FileConfig) -> Result<Vec<Variant>> {
    match pick_opt(text, file.variants.as_deref()) {
        None => Ok(Variant::ALL.to_vec()),
        Some(csv) => csv.split(',').map(|s| s.trim().parse()).collect(),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_series(path: &Path) -> Result<TrafficDataset> {
    let ds = load_dataset(path)?;
    ds.validate()?;
    Ok(ds)
}

fn check_nodes(ck: &Checkpoint, ds: &TrafficDataset) -> Result<()> {
    if ck.model.config.nodes != ds.nodes {
        return Err(Error::Contract(format!(
            "checkpoint was trained on {} nodes but the series has {}",
            ck.model.config.nodes, ds.nodes
        )));
    }
    Ok(())
}

// ── subcommands ──

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let file = FileConfig::load_optional(args.config.as_deref())?;
    let out = required_path(args.out, file.out.clone(), "out")?;
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        name: pick(args.name, file.name.clone(), d.name),
        nodes: pick(args.nodes, file.nodes, d.nodes),
        steps: pick(args.steps, file.steps, d.steps),
        clusters: pick(args.clusters, file.clusters, d.clusters),
        noise_std: pick(args.noise_std, file.noise_std, d.noise_std),
        seed: resolve_seed(args.seed, file.seed)?,
    };
    let ds = generate_synthetic(&cfg)?;
    ensure_dir(&out)?;
    let path = out.join(format!("{}.stts", cfg.name));
    save_dataset(&ds, &path)?;
    println!(
        "gen-data: wrote {} ({} nodes x {} steps, {} clusters, seed {})",
        path.display(),
        ds.nodes,
        ds.steps(),
        cfg.clusters,
        cfg.seed
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load_optional(args.config.as_deref())?;
    let data = required_path(args.data, file.data.clone(), "data")?;
    let out = required_path(args.out, file.out.clone(), "out")?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let split = resolve_split(args.split.as_deref(), &file)?;

    let ds = load_series(&data)?;
    let model_cfg = resolve_model(&args.model, &file, ds.nodes)?;
    let train_cfg = resolve_train(&args.train, &file, seed)?;

    let [train_ds, val_ds, _] = chronological_split(&ds, split);
    let norm = Normalizer::fit(&train_ds.values)?;
    let train_ws = WindowSet::new(&train_ds, model_cfg.input_len, model_cfg.output_len)?;
    let val_ws = WindowSet::new(&val_ds, model_cfg.input_len, model_cfg.output_len)?;

    let mut model = Model::new(model_cfg, seed)?;
    let outcome = train(&mut model, &train_ws, &val_ws, &norm, &train_cfg)?;

    ensure_dir(&out)?;
    atomic_write(&out.join("history.csv"), history_to_csv(&outcome.history).as_bytes())?;
    let prefix = out.join("model");
    save_checkpoint(&model, &norm, outcome.history.len(), &prefix)?;
    println!(
        "train: {} for {} epochs ({}), best epoch {} val MAE {:.4}, checkpoint {}",
        model_cfg.variant,
        outcome.history.len(),
        outcome.stop,
        outcome.best_epoch,
        outcome.best_val_mae,
        prefix.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load_optional(args.config.as_deref())?;
    let prefix = required_path(args.checkpoint, file.checkpoint.clone(), "checkpoint")?;
    let data = required_path(args.data, file.data.clone(), "data")?;
    let split = resolve_split(args.split.as_deref(), &file)?;

    let ck = load_checkpoint(&prefix)?;
    let ds = load_series(&data)?;
    check_nodes(&ck, &ds)?;
    let cfg = ck.model.config;
    let [_, _, test_ds] = chronological_split(&ds, split);
    let test_ws = WindowSet::new(&test_ds, cfg.input_len, cfg.output_len)?;

    let d = EvalConfig::default();
    let eval_cfg = EvalConfig {
        null_value: pick(args.null_value, file.null_value, d.null_value),
        mape_epsilon: pick(args.mape_epsilon, file.mape_epsilon, d.mape_epsilon),
        batch_size: pick(args.eval_batch_size, file.eval_batch_size, d.batch_size),
        threads: pick(args.threads, file.threads, d.threads),
    };
    let report = evaluate(&ck.model, &test_ws, &ck.normalizer, &eval_cfg)?;

    let horizons = match pick_opt(args.horizons.as_deref(), file.horizons.as_deref()) {
        Some(text) => parse_horizons(text, cfg.output_len)?,
        None => (1..=cfg.output_len).collect(),
    };
    for h in &horizons {
        match report.per_horizon.iter().find(|r| r.horizon == *h) {
            Some(r) => println!(
                "horizon {:>2}: MAE {:.4} RMSE {:.4} MAPE {:.2}%",
                r.horizon, r.mae, r.rmse, r.mape
            ),
            None => println!("horizon {h:>2}: no unmasked entries"),
        }
    }
    if let Some(out) = pick_opt(args.out, file.out.clone()) {
        ensure_dir(&out)?;
        atomic_write(&out.join("metrics.csv"), report.to_csv().as_bytes())?;
    }
    println!(
        "eval: MAE {:.4} RMSE {:.4} MAPE {:.2}% over {} windows of {}",
        report.mae,
        report.rmse,
        report.mape,
        test_ws.len(),
        data.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let file = FileConfig::load_optional(args.config.as_deref())?;
    let data = required_path(args.data, file.data.clone(), "data")?;
    let out = required_path(args.out, file.out.clone(), "out")?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let split = resolve_split(args.split.as_deref(), &file)?;
    let variants = parse_variants(args.variants.as_deref(), &file)?;

    let ds = load_series(&data)?;
    let base = resolve_model(&args.model, &file, ds.nodes)?;
    let train_cfg = resolve_train(&args.train, &file, seed)?;

    let outcome = run_ablation(&ds, split, &base, &train_cfg, &variants)?;
    for row in &outcome.rows {
        if row.status == "ok" {
            println!(
                "variant {:<17} params {:>9} MAE {:.4} RMSE {:.4} MAPE {:.2}% best epoch {}",
                row.variant.as_str(),
                row.parameter_count,
                row.mae,
                row.rmse,
                row.mape,
                row.best_epoch
            );
        } else {
            println!("variant {:<17} failed: {}", row.variant.as_str(), row.status);
        }
    }
    ensure_dir(&out)?;
    let path = out.join("ablation.csv");
    atomic_write(&path, outcome.to_csv().as_bytes())?;
    println!("ablate: {} variants, seed {}, results in {}", outcome.rows.len(), seed, path.display());
    Ok(())
}

fn cmd_shuffle_test(args: ShuffleArgs) -> Result<()> {
    let file = FileConfig::load_optional(args.config.as_deref())?;
    let data = required_path(args.data, file.data.clone(), "data")?;
    let out = required_path(args.out, file.out.clone(), "out")?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let split = resolve_split(args.split.as_deref(), &file)?;
    let n_perms = pick(args.n_perms, file.n_perms, 10);

    let adaptive_prefix = pick_opt(args.adaptive_checkpoint, file.adaptive_checkpoint.clone());
    let node_prefix = pick_opt(args.node_checkpoint, file.node_checkpoint.clone());
    if adaptive_prefix.is_some() != node_prefix.is_some() {
        return Err(Error::Config(
            "give both --adaptive-checkpoint and --node-checkpoint, or neither".into(),
        ));
    }
    let ds = load_series(&data)?;
    let (adaptive, node_only) = match (adaptive_prefix, node_prefix) {
        (Some(a), Some(n)) => {
            let a = load_checkpoint(&a)?;
            let n = load_checkpoint(&n)?;
            check_nodes(&a, &ds)?;
            check_nodes(&n, &ds)?;
            if a.model.config.input_len != n.model.config.input_len
                || a.model.config.output_len != n.model.config.output_len
            {
                return Err(Error::Contract(
                    "the two checkpoints disagree on window geometry".into(),
                ));
            }
            (a, n)
        }
        (None, None) => {
            let base = resolve_model(&args.model, &file, ds.nodes)?;
            let train_cfg = resolve_train(&args.train, &file, seed)?;
            let pair = [Variant::Full, Variant::SpatialEmbedding];
            let outcome = run_ablation(&ds, split, &base, &train_cfg, &pair)?;
            let norm = outcome.normalizer;
            let mut rows = outcome.rows.into_iter();
            let mut models = outcome.models.into_iter();
            let mut take = |name: &str| -> Result<Checkpoint> {
                let row = rows.next().expect("row per variant");
                let model = models.next().expect("slot per variant");
                match model {
                    Some(model) if row.status == "ok" => Ok(Checkpoint {
                        model,
                        normalizer: norm,
                        trained_epochs: row.epochs_run,
                    }),
                    _ => Err(Error::Data(format!("{name} training failed: {}", row.status))),
                }
            };
            (take("full")?, take("spatial-embedding")?)
        }
        _ => unreachable!("pairing validated above"),
    };

    let cfg = adaptive.model.config;
    let [_, _, test_ds] = chronological_split(&ds, split);
    let test_ws = WindowSet::new(&test_ds, cfg.input_len, cfg.output_len)?;
    let d = EvalConfig::default();
    let eval_cfg = EvalConfig {
        null_value: pick(args.train.null_value, file.null_value, d.null_value),
        mape_epsilon: pick(args.train.mape_epsilon, file.mape_epsilon, d.mape_epsilon),
        batch_size: pick(args.train.eval_batch_size, file.eval_batch_size, d.batch_size),
        threads: pick(args.train.threads, file.threads, d.threads),
    };
    let report = shuffle_probe(&adaptive, &node_only, &test_ws, &eval_cfg, n_perms, seed)?;

    ensure_dir(&out)?;
    let path = out.join("shuffle.csv");
    atomic_write(&path, report.to_csv().as_bytes())?;
    println!(
        "shuffle-test: adaptive delta {:.4}, node-only delta {:.4}, ratio {:.2} over {} permutations, results in {}",
        report.adaptive.delta,
        report.node_only.delta,
        report.ratio,
        report.permutations,
        path.display()
    );
    Ok(())
}

fn cmd_dump_embedding(args: DumpArgs) -> Result<()> {
    let file = FileConfig::load_optional(args.config.as_deref())?;
    let prefix = required_path(args.checkpoint, file.checkpoint.clone(), "checkpoint")?;
    let out = required_path(args.out, file.out.clone(), "out")?;
    let which = pick_opt(args.which.as_deref(), file.which.as_deref())
        .ok_or_else(|| Error::Config("--which is required".into()))?
        .parse::<EmbeddingKind>()?;

    let ck = load_checkpoint(&prefix)?;
    ensure_dir(&out)?;
    let table_path = out.join(format!("{}.stts", which.as_str()));
    dump_embedding(&ck.model, which, &table_path)?;
    let mut written = vec![table_path.display().to_string()];

    if which == EmbeddingKind::Adaptive {
        let (_, table) = ck.model.embedding_table(which)?;
        let corr = frame_correlation(&table)?;
        let csv_path = out.join("frame_correlation.csv");
        let ppm_path = out.join("frame_correlation.ppm");
        atomic_write(&csv_path, corr.to_csv().as_bytes())?;
        atomic_write(&ppm_path, &corr.to_ppm())?;
        written.push(csv_path.display().to_string());
        written.push(ppm_path.display().to_string());
        if let Some((near, far)) = adjacent_vs_distant(&corr, 6) {
            println!("frame correlation: adjacent mean {near:.4}, distant mean {far:.4}");
        }
    }
    println!("dump-embedding: wrote {}", written.join(", "));
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let file = FileConfig::load_optional(args.config.as_deref())?;
    let preset = pick_opt(args.preset.as_deref(), file.preset.as_deref()).unwrap_or("tiny");
    if preset != "tiny" {
        return Err(Error::Config(format!("unknown preset {preset:?}; only \"tiny\" exists")));
    }
    let h = pick(args.h, file.h, 1e-5);
    let tol = pick(args.tol, file.tol, 1e-4);
    let seed = resolve_seed(args.seed, file.seed)?;

    let cfg = ModelConfig {
        variant: Variant::Full,
        input_len: 4,
        output_len: 4,
        nodes: 3,
        feature_dim: 4,
        adaptive_dim: 4,
        heads: 2,
        layers: 1,
        ffn_dim: 16,
        dropout: 0.0,
        scale_mode: AttentionScale::PerHead,
    };
    let model = Model::new(cfg, seed)?;
    let ds = generate_synthetic(&SyntheticConfig {
        nodes: cfg.nodes,
        steps: 64,
        clusters: 1,
        noise_std: 0.3,
        seed,
        ..Default::default()
    })?;
    let norm = Normalizer::fit(&ds.values)?;
    let ws = WindowSet::new(&ds, cfg.input_len, cfg.output_len)?;
    let batch = ws.batch(&[0, 7], Some(&norm))?;
    let target: Vec<f64> = batch.y.iter().map(|&v| norm.normalize(v)).collect();

    let report = grad_check(
        &model.params,
        |tape, vars| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let pred = model.forward(tape, vars, &batch, false, &mut rng)?;
            let y = tape.leaf_from(
                vec![batch.size, cfg.output_len, cfg.nodes, 1],
                target.clone(),
                false,
            )?;
            let diff = tape.sub(pred, y)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean(sq))
        },
        h,
        tol,
    )?;
    println!("{report}");
    let worst = report.worst();
    if !report.passed() {
        return Err(Error::Numeric(format!(
            "gradient check failed: {} groups over tol {tol:e}, worst {} at {:.3e}",
            report.flagged().len(),
            worst.name,
            worst.max_rel_err
        )));
    }
    println!(
        "grad-check tiny: {} parameter groups pass, worst rel err {:.3e} in {} (h {h:e}, tol {tol:e})",
        report.groups.len(),
        worst.max_rel_err,
        worst.name
    );
    Ok(())
}
