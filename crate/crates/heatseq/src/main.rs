use clap::{Parser, Subcommand};
use heatseq::config::RunConfig;
use heatseq::encodings::MaskKind;
use heatseq::error::{Error, Result};
use heatseq::fdsolver::{generate_dataset, Trajectory};
use heatseq::formats::{
    fmt_float, frame_to_matrix, load_checkpoint, load_trajectories, read_kv_file,
    save_checkpoint, save_trajectories, write_grayscale_pgm, write_history_csv,
    write_matrix_csv, write_metrics_csv,
};
use heatseq::inference::{
    autoregressive_rollout, block_predict, evaluate_test_set, projection_weight_heatmap,
};
use heatseq::losses::LossWeights;
use heatseq::training::{make_batch, train};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "heatseq",
    about = "Transformer surrogate for 2D transient heat conduction: data generation, training, evaluation, analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and write train/val/test containers
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed from the config file
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset's test split
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation mode; must match the checkpoint's mask type
        #[arg(long)]
        mode: Option<MaskKind>,
        /// Comma-separated frame indices to export as image pairs
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
    },
    /// Export the output-projection weight heatmap
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn split_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("train.htfd"),
        dir.join("val.htfd"),
        dir.join("test.htfd"),
    )
}

fn steadiness_stats(set: &[Trajectory]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in set {
        lo = lo.min(t.steadiness);
        hi = hi.max(t.steadiness);
    }
    (lo, hi)
}

fn cmd_generate(config_path: &Path, out: &Path) -> Result<()> {
    let config = RunConfig::from_kv(&read_kv_file(config_path)?)?;
    let split = generate_dataset(&config.dataset_params()?)?;
    std::fs::create_dir_all(out)?;
    let (train_p, val_p, test_p) = split_paths(out);
    for (name, path, set) in [
        ("train", &train_p, &split.train),
        ("val", &val_p, &split.validation),
        ("test", &test_p, &split.test),
    ] {
        save_trajectories(path, config.mode, set)?;
        let (lo, hi) = steadiness_stats(set);
        println!(
            "{name}: {} cases -> {} (steadiness {} .. {})",
            set.len(),
            path.display(),
            fmt_float(lo),
            fmt_float(hi)
        );
    }
    Ok(())
}

fn check_dataset_matches(config: &RunConfig, set: &[Trajectory]) -> Result<()> {
    let first = set
        .first()
        .ok_or_else(|| Error::Format("dataset split is empty".into()))?;
    let (t, ny, nx) = first.frames.dim();
    if (ny, nx, t) != (config.ny, config.nx, config.seq_len) {
        return Err(Error::Config(format!(
            "dataset is {ny}x{nx} with seq_len {t}, config expects {}x{} with seq_len {}",
            config.ny, config.nx, config.seq_len
        )));
    }
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    dataset: &Path,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<()> {
    let mut config = RunConfig::from_kv(&read_kv_file(config_path)?)?;
    if let Some(seed) = seed_override {
        config.train_seed = seed;
    }
    let (train_p, val_p, _) = split_paths(dataset);
    let (_, train_set) = load_trajectories(&train_p)?;
    let (_, val_set) = load_trajectories(&val_p)?;
    check_dataset_matches(&config, &train_set)?;
    let model_config = config.model_config()?;
    let schedule = config.schedule()?;
    let settings = config.train_settings();
    let (params, history) = train(
        &train_set,
        &val_set,
        &model_config,
        &config.weights,
        &schedule,
        &settings,
    )?;
    std::fs::create_dir_all(out)?;
    save_checkpoint(
        &out.join("checkpoint.htck"),
        &params,
        &model_config,
        &config.to_kv(),
    )?;
    write_history_csv(&out.join("history.csv"), &history)?;
    if let Some(last) = history.records.last() {
        println!(
            "epoch {}: train total {} (mse {}), val total {} (mse {})",
            last.epoch,
            fmt_float(last.train.total),
            fmt_float(last.train.mse),
            fmt_float(last.val.total),
            fmt_float(last.val.mse)
        );
    }
    Ok(())
}

fn weights_from_extra(extra: &std::collections::BTreeMap<String, String>) -> LossWeights {
    let get = |key: &str, default: f64| {
        extra
            .get(key)
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };
    LossWeights {
        lambda_pi: get("lambda_pi", 1.0),
        lambda_bc: get("lambda_bc", 1.0),
        lambda_ic: get("lambda_ic", 1.0),
        eps: get("loss_eps", 1e-8),
    }
}

fn cmd_evaluate(
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    mode: Option<MaskKind>,
    frames: &[usize],
) -> Result<()> {
    let (params, model_config, extra) = load_checkpoint(checkpoint)?;
    if let Some(requested) = mode {
        if requested != model_config.mask_kind {
            return Err(Error::Config(format!(
                "requested {requested} evaluation but the checkpoint is a {} model",
                model_config.mask_kind
            )));
        }
    }
    let (_, _, test_p) = split_paths(dataset);
    let (_, test_set) = load_trajectories(&test_p)?;
    let first = test_set
        .first()
        .ok_or_else(|| Error::Format("test split is empty".into()))?;
    let (t, ny, nx) = first.frames.dim();
    if (ny, nx, t) != (model_config.ny, model_config.nx, model_config.seq_len) {
        return Err(Error::Config(format!(
            "dataset is {ny}x{nx} with seq_len {t}, checkpoint expects {}x{} with seq_len {}",
            model_config.ny, model_config.nx, model_config.seq_len
        )));
    }
    let weights = weights_from_extra(&extra);
    let (losses, mean) = evaluate_test_set(&params, &model_config, &test_set, &weights)?;
    std::fs::create_dir_all(out)?;
    write_metrics_csv(&out.join("metrics.csv"), &losses, mean)?;
    for (i, loss) in losses.iter().enumerate() {
        println!("case {i}: {}", fmt_float(*loss));
    }
    println!("mean: {}", fmt_float(mean));

    if !frames.is_empty() {
        let batch = make_batch(&[first])?;
        let result = match model_config.mask_kind {
            MaskKind::Block => block_predict(&params, &model_config, &batch, &weights)?,
            MaskKind::Causal => autoregressive_rollout(&params, &model_config, &batch)?,
        };
        for &fi in frames {
            if fi >= model_config.seq_len {
                return Err(Error::Config(format!(
                    "frame index {fi} outside 0..{}",
                    model_config.seq_len
                )));
            }
            let truth = frame_to_matrix(&batch.src, 0, fi);
            let pred = frame_to_matrix(&result.predicted, 0, fi);
            write_grayscale_pgm(&out.join(format!("frame{fi}_truth.pgm")), &truth)?;
            write_grayscale_pgm(&out.join(format!("frame{fi}_pred.pgm")), &pred)?;
        }
    }
    Ok(())
}

fn cmd_analyze(checkpoint: &Path, out: &Path) -> Result<()> {
    let (params, model_config, _) = load_checkpoint(checkpoint)?;
    let map = projection_weight_heatmap(&params, &model_config);
    std::fs::create_dir_all(out)?;
    write_matrix_csv(&out.join("heatmap.csv"), &map)?;
    write_grayscale_pgm(&out.join("heatmap.pgm"), &map)?;
    println!(
        "heatmap {}x{} -> {}",
        model_config.ny,
        model_config.nx,
        out.join("heatmap.{csv,pgm}").display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => cmd_generate(&config, &out),
        Command::Train {
            config,
            dataset,
            out,
            seed,
        } => cmd_train(&config, &dataset, &out, seed),
        Command::Evaluate {
            checkpoint,
            dataset,
            out,
            mode,
            frames,
        } => cmd_evaluate(&checkpoint, &dataset, &out, mode, &frames),
        Command::Analyze { checkpoint, out } => cmd_analyze(&checkpoint, &out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // let clap print help/version normally; usage mistakes exit 1
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
