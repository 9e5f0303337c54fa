use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use suparc_core::data::{generate_synthetic, load_split, load_splits, Split, SyntheticConfig};
use suparc_core::evaluation::{all_variants, export_embeddings};
use suparc_core::gradcheck::{run_gradcheck, GRADCHECK_TOLERANCE};
use suparc_core::model::{FusionModel, ModalityMask};
use suparc_core::training::{ablate, evaluate, fit_with, ConfigOverrides, TrainConfig};
use suparc_core::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.json";
const RUN_LOG_FILE: &str = "run_log.jsonl";
const TIMINGS_FILE: &str = "timings.jsonl";
const CONFIG_FILE: &str = "config.toml";
const ABLATION_FILE: &str = "ablation.json";

/// Multimodal sentiment regression with angular contrastive training.
///
/// Settings resolve in three layers: built-in defaults, then keys from the
/// --config file, then command-line flags. Set LOG_LEVEL to error, info, or
/// debug to control diagnostics on stderr.
#[derive(Debug, Parser)]
#[command(name = "suparc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic three-modality dataset.
    Synth(SynthArgs),
    /// Train one model and write its checkpoint and run log.
    Train(TrainArgs),
    /// Score a checkpoint on one split; metrics JSON goes to stdout.
    Eval(EvalArgs),
    /// Train the four objective ablations and tabulate them.
    Ablate(AblateArgs),
    /// Export 2-D PCA projections of fusion vectors.
    Embed(EmbedArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Total sample count, split 70/15/15 (default: 2000/430/430).
    #[arg(long)]
    n: Option<usize>,
    /// Probability that one non-text modality carries a conflicting signal.
    #[arg(long)]
    conflict: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file of `key = value` settings.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: FlagOverrides,
}

#[derive(Debug, Args)]
struct FlagOverrides {
    /// Weight of the SupArc term (overrides the config file).
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the modality triplet term (overrides the config file).
    #[arg(long)]
    beta: Option<f64>,
    /// Seed for initialization and shuffling (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Comma-separated variants (full, mask-t, mask-tv, ...) or `all`.
    #[arg(long, default_value = "all")]
    variants: String,
    /// CSV destination.
    #[arg(long)]
    out: PathBuf,
    /// Optional SVG scatter plot destination.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Random cases per check.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => run_ablation(a),
        Command::Embed(a) => embed(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

fn resolve_config(file: &Path, flags: Option<&FlagOverrides>) -> Result<TrainConfig> {
    let text = fs::read_to_string(file).map_err(io_err(file))?;
    let mut cfg = TrainConfig::default();
    ConfigOverrides::from_toml_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", file.display())))?
        .apply(&mut cfg);
    if let Some(f) = flags {
        ConfigOverrides {
            alpha: f.alpha,
            beta: f.beta,
            seed: f.seed,
            ..ConfigOverrides::default()
        }
        .apply(&mut cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = SyntheticConfig {
        seed: args.seed,
        ..SyntheticConfig::default()
    };
    if let Some(n) = args.n {
        cfg = cfg.with_total(n);
    }
    if let Some(p) = args.conflict {
        cfg.conflict_prob = p;
    }
    let splits = generate_synthetic(&cfg)?;
    suparc_core::data::save_splits(&args.out, &splits)?;
    println!(
        "wrote {} train / {} valid / {} test utterances to {}",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, Some(&args.overrides))?;
    let splits = load_splits(&args.data)?;
    let model = FusionModel::init(&cfg.encoder_for(&splits.train)?, cfg.seed)?;
    log::info!("{} parameters", model.num_parameters());

    create_dir(&args.out)?;
    write_file(&args.out.join(CONFIG_FILE), &cfg.to_toml_string())?;
    let log_path = args.out.join(RUN_LOG_FILE);
    let time_path = args.out.join(TIMINGS_FILE);
    let mut run_log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let mut timings = BufWriter::new(File::create(&time_path).map_err(io_err(&time_path))?);

    let outcome = fit_with(model, &splits, &cfg, |report| {
        writeln!(run_log, "{}", to_json(report))
            .and_then(|_| run_log.flush())
            .map_err(io_err(&log_path))?;
        writeln!(
            timings,
            "{{\"epoch\":{},\"wall_clock_secs\":{}}}",
            report.epoch, report.wall_clock_secs
        )
        .map_err(io_err(&time_path))
    })?;
    timings.flush().map_err(io_err(&time_path))?;

    outcome.best.save(args.out.join(CHECKPOINT_FILE))?;
    let test = evaluate(&outcome.best, &splits.test)?;
    println!(
        "{}",
        serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "initial_valid": outcome.initial_valid,
            "test": test,
        })
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = FusionModel::load(&args.checkpoint)?;
    let data = load_split(&args.data, args.split)?;
    println!("{}", to_json(&evaluate(&model, &data)?));
    Ok(())
}

fn run_ablation(args: AblateArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, None)?;
    let splits = load_splits(&args.data)?;
    let table = ablate(&cfg, &splits)?;

    create_dir(&args.out)?;
    write_file(&args.out.join(CONFIG_FILE), &cfg.to_toml_string())?;
    for row in &table.rows {
        let dir = args.out.join(row.variant.name());
        create_dir(&dir)?;
        let log: String = row.reports.iter().map(|r| to_json(r) + "\n").collect();
        write_file(&dir.join(RUN_LOG_FILE), &log)?;
        if let Some(model) = &row.model {
            model.save(dir.join(CHECKPOINT_FILE))?;
        }
    }
    write_file(&args.out.join(ABLATION_FILE), &table.to_json())?;
    print!("{}", table.to_text());
    Ok(())
}

fn parse_variants(list: &str) -> Result<Vec<ModalityMask>> {
    if list.trim() == "all" {
        return Ok(all_variants());
    }
    let variants = list
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<ModalityMask>>>()?;
    if variants.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    Ok(variants)
}

fn embed(args: EmbedArgs) -> Result<()> {
    let variants = parse_variants(&args.variants)?;
    let model = FusionModel::load(&args.checkpoint)?;
    let data = load_split(&args.data, args.split)?;
    let dump = export_embeddings(&model, &data, &variants)?;
    dump.write_csv(&args.out)?;
    if let Some(svg) = &args.svg {
        dump.write_svg(svg)?;
    }
    log::info!("{} rows written to {}", dump.rows.len(), args.out.display());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let results = run_gradcheck(args.trials, args.seed)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<width$} trials={} max_rel_err={:.3e}",
            r.name, r.trials, r.worst_rel_err
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "{} exceeded {GRADCHECK_TOLERANCE:e}: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}
