use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use ndarray::s;
use stci::datagen::{generate, true_effects, CausalDataset};
use stci::io::{read_dataset, write_dataset};
use stci::stcinet::{evaluate, evaluate_predictions, train, ModelConfig, TrainedModel, Variant};

use crate::config::{ExperimentConfig, DESK_SCALE_STEPS};
use crate::figures;
use crate::report::{
    collect_reports, effect_curves_csv, format_table, DatasetInfo, Report, TableRow, ABLATION_FILE,
};
use crate::CliError;

/// Spatiotemporal causal inference benchmark: generate data, train, evaluate.
#[derive(Debug, Parser)]
#[command(name = "stci", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate diffusion datasets with paired counterfactuals.
    Generate(GenerateArgs),
    /// Train one model variant and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint against the ground-truth effects.
    Evaluate(EvaluateArgs),
    /// Train and evaluate all five variants and tabulate the results.
    Ablate(AblateArgs),
    /// Collect report.json files into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON experiment configuration; omitted blocks take defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed overriding the configuration.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Write only the dataset with spillover, directly into --out.
    #[arg(long, conflicts_with = "no_interference")]
    pub interference: bool,
    /// Write only the dataset without spillover, directly into --out.
    #[arg(long)]
    pub no_interference: bool,
    /// Multiplier applied to X inside the treated region.
    #[arg(long, value_name = "F")]
    pub update_factor: Option<f64>,
    /// Treated region as half-open ranges `i0:i1,j0:j1`.
    #[arg(long, value_name = "i0:i1,j0:j1")]
    pub region: Option<String>,
    /// Number of generated time steps.
    #[arg(long, value_name = "T")]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory; generated from the configuration when omitted.
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Use every time step instead of the first 500.
    #[arg(long)]
    pub full: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model variant: full, dagger, na, sa or ag.
    #[arg(long, value_name = "VARIANT")]
    pub variant: Option<Variant>,
    /// Maximum training epochs.
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Samples per optimisation step.
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Weight of the reconstruction loss; the prediction loss gets 1 - lambda1.
    #[arg(long, value_name = "F")]
    pub lambda1: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint directory written by `train`.
    #[arg(long, value_name = "DIR", required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Score the ground-truth predictor instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    /// Number of time steps drawn in the heatmap figure.
    #[arg(long, value_name = "N")]
    pub panels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Maximum training epochs.
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Samples per optimisation step.
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Weight of the reconstruction loss; the prediction loss gets 1 - lambda1.
    #[arg(long, value_name = "F")]
    pub lambda1: Option<f64>,
    /// Variants trained concurrently.
    #[arg(long, value_name = "K", default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory receiving `table.tsv`; the table always goes to stdout.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// report.json files or directories searched for them.
    #[arg(required = true, value_name = "PATH")]
    pub inputs: Vec<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

fn out_dir(common: &CommonArgs, fallback: &str) -> Result<PathBuf, CliError> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(fallback));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(args.common.config.as_deref())?.generation;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(f) = args.update_factor {
        cfg.update_factor = f;
    }
    if let Some(region) = &args.region {
        cfg.region = region.clone();
    }
    let grid = cfg.grid()?;
    let spec = cfg.intervention(&grid)?;
    let out = out_dir(&args.common, "data")?;

    let worlds: Vec<(bool, PathBuf)> = match (args.interference, args.no_interference) {
        (true, _) => vec![(true, out.clone())],
        (_, true) => vec![(false, out.clone())],
        _ => vec![(true, out.join("interference")), (false, out.join("no_interference"))],
    };
    for (interference, dir) in worlds {
        let params = if interference {
            stci::datagen::DiffusionParams {
                interference: true,
                ..cfg.params.clone()
            }
        } else {
            cfg.params.clone().without_interference()
        };
        let dataset = generate(&grid, &params, &spec, cfg.seed)?;
        write_dataset(&dataset, &dir)?;
        let oracle = true_effects(&dataset, grid.lag)?;
        println!(
            "{} -> {}: DATE={:.6} IATE={:.6} LATE={:.6}",
            if interference { "interference" } else { "no_interference" },
            dir.display(),
            oracle.date,
            oracle.iate,
            oracle.late
        );
    }
    Ok(())
}

/// Loads `--dataset` (or the configured one) or generates it, then keeps the
/// first 500 steps unless `full`.
pub fn resolve_dataset(
    cfg: &ExperimentConfig,
    data: &DataArgs,
    seed: Option<u64>,
) -> Result<(CausalDataset, Option<PathBuf>), CliError> {
    let path = data.dataset.clone().or_else(|| cfg.dataset.clone());
    let dataset = match &path {
        Some(dir) => read_dataset(dir)?,
        None => {
            let mut gen = cfg.generation.clone();
            if let Some(seed) = seed {
                gen.seed = seed;
            }
            if !data.full {
                gen.steps = gen.steps.min(DESK_SCALE_STEPS);
            }
            let grid = gen.grid()?;
            let spec = gen.intervention(&grid)?;
            info!("generating {} steps (seed {})", grid.n_steps, gen.seed);
            generate(&grid, &gen.params, &spec, gen.seed)?
        }
    };
    if !data.full && dataset.grid.n_steps > DESK_SCALE_STEPS {
        info!("using the first {DESK_SCALE_STEPS} of {} steps", dataset.grid.n_steps);
        return Ok((dataset.prefix(DESK_SCALE_STEPS)?, path));
    }
    Ok((dataset, path))
}

fn apply_model_overrides(
    mut model: ModelConfig,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lambda1: Option<f64>,
) -> Result<ModelConfig, CliError> {
    if let Some(seed) = seed {
        model.seed = seed;
    }
    if let Some(e) = epochs {
        model.epochs = e;
    }
    if let Some(b) = batch_size {
        model.batch_size = b;
    }
    if let Some(l) = lambda1 {
        if !(0.0..=1.0).contains(&l) {
            return Err(CliError::Validation(format!("--lambda1 must lie in [0, 1], got {l}")));
        }
        model.lambda1 = l;
        model.lambda2 = 1.0 - l;
    }
    model.validate()?;
    Ok(model)
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    let mut model_cfg = apply_model_overrides(
        cfg.model.clone(),
        args.common.seed,
        args.model.epochs,
        args.model.batch_size,
        args.model.lambda1,
    )?;
    if let Some(v) = args.model.variant {
        model_cfg = model_cfg.with_variant(v);
    }
    let out = out_dir(&args.common, "checkpoint")?;
    let (dataset, _) = resolve_dataset(&cfg, &args.data, args.common.seed)?;
    let model = train(&dataset, &model_cfg)?;
    model.save(&out)?;
    let last = model.training_log.last();
    println!(
        "{} ({} parameters): {} epochs, final loss {:.6} -> {}",
        model_cfg.variant.label(),
        model.parameter_count(),
        model.training_log.len(),
        last.map_or(f64::NAN, |r| r.loss),
        out.display()
    );
    Ok(())
}

/// Ground-truth predictions `Y[t + lag]` and `Y_cf[t + lag]` for the steps a
/// model with `config` would score.
pub fn oracle_predictions(
    dataset: &CausalDataset,
    config: &ModelConfig,
) -> Result<(ndarray::Array3<f32>, ndarray::Array3<f32>), CliError> {
    let first = config.first_step();
    let lag = config.lag;
    let t = dataset.grid.n_steps;
    if first + lag >= t {
        return Err(CliError::Validation(format!(
            "dataset with {t} steps is too short for first step {first} and lag {lag}"
        )));
    }
    let range = s![first + lag..t, .., ..];
    Ok((
        dataset.y.values.slice(range).to_owned(),
        dataset.y_cf.values.slice(range).to_owned(),
    ))
}

/// Writes `report.json`, effect curves and heatmaps into `dir`.
pub fn write_evaluation(
    dir: &Path,
    output: &stci::stcinet::EvaluationOutput,
    report: &Report,
    panels: usize,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    report.write(dir)?;
    write_text(
        &dir.join("effect_curves.csv"),
        &effect_curves_csv(&output.oracle, &output.predicted),
    )?;
    figures::effect_curves(&output.oracle, &output.predicted, &dir.join("effect_curves.png"))?;
    let layout = figures::spillover_heatmaps(&output.oracle, &output.predicted, panels, &dir.join("spillover_heatmaps.png"))?;
    let json = serde_json::to_string_pretty(&layout).expect("layout serializes");
    write_text(&dir.join("figures.json"), &(json + "\n"))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    let (dataset, path) = resolve_dataset(&cfg, &args.data, args.common.seed)?;
    let out = match &args.common.out {
        Some(dir) => dir.clone(),
        None => cfg.evaluation.out_dir.clone().unwrap_or_else(|| PathBuf::from("eval")),
    };
    let panels = args.panels.unwrap_or(cfg.evaluation.heatmap_panels);
    let info = DatasetInfo::new(&dataset, path.as_deref());

    let (output, report) = match &args.checkpoint {
        Some(dir) if !args.oracle => {
            let model = TrainedModel::load(dir)?;
            if model.grid() != (dataset.grid.n_rows, dataset.grid.n_cols) {
                return Err(CliError::Validation(format!(
                    "checkpoint grid {:?} does not match dataset grid {}x{}",
                    model.grid(),
                    dataset.grid.n_rows,
                    dataset.grid.n_cols
                )));
            }
            let output = evaluate(&model, &dataset)?;
            let variant = model.config.variant;
            let report = Report::new(variant.name(), variant.label(), model.parameter_count(), info, &output.metrics);
            (output, report)
        }
        _ => {
            let (f, cf) = oracle_predictions(&dataset, &cfg.model)?;
            let output = evaluate_predictions(&dataset, cfg.model.lag, cfg.model.first_step(), f, cf)?;
            let report = Report::new("oracle", "ground truth", 0, info, &output.metrics);
            (output, report)
        }
    };
    write_evaluation(&out, &output, &report, panels)?;
    println!(
        "{}: date_pehe={:.6} iate_pehe={:.6} late_pehe={:.6} rmse={:.6} -> {}",
        report.label,
        report.date_pehe,
        report.iate_pehe,
        report.late_pehe,
        report.rmse,
        out.display()
    );
    Ok(())
}

fn ablate_one(
    variant: Variant,
    base: &ModelConfig,
    dataset: &CausalDataset,
    info: &DatasetInfo,
    out: &Path,
    panels: usize,
) -> TableRow {
    let dir = out.join(variant.name());
    let result = (|| -> Result<Report, CliError> {
        let config = base.clone().with_variant(variant);
        let model = train(dataset, &config)?;
        model.save(&dir.join("checkpoint"))?;
        let output = evaluate(&model, dataset)?;
        let report = Report::new(variant.name(), variant.label(), model.parameter_count(), info.clone(), &output.metrics);
        write_evaluation(&dir, &output, &report, panels)?;
        Ok(report)
    })();
    match result {
        Ok(report) => {
            info!("{}: late_pehe={:.6} rmse={:.6}", variant.label(), report.late_pehe, report.rmse);
            TableRow::from_report(&report)
        }
        Err(err) => {
            warn!("{} failed: {err}", variant.label());
            TableRow {
                model: variant.name().into(),
                label: variant.label().into(),
                parameter_count: None,
                metrics: None,
                status: format!("failed (exit {}): {err}", err.exit_code()),
            }
        }
    }
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    let base = apply_model_overrides(cfg.model.clone(), args.common.seed, args.epochs, args.batch_size, args.lambda1)?;
    if args.parallel == 0 {
        return Err(CliError::Validation("--parallel must be at least 1".into()));
    }
    let out = out_dir(&args.common, "ablation")?;
    let (dataset, path) = resolve_dataset(&cfg, &args.data, args.common.seed)?;
    let info = DatasetInfo::new(&dataset, path.as_deref());
    let panels = cfg.evaluation.heatmap_panels;

    let rows: Mutex<Vec<Option<TableRow>>> = Mutex::new(vec![None; Variant::ALL.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..args.parallel.min(Variant::ALL.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&variant) = Variant::ALL.get(k) else { break };
                let row = ablate_one(variant, &base, &dataset, &info, &out, panels);
                rows.lock().expect("no worker panicked")[k] = Some(row);
            });
        }
    });
    let rows: Vec<TableRow> = rows.into_inner().expect("no worker panicked").into_iter().flatten().collect();
    let table = format_table(&rows);
    write_text(&out.join(ABLATION_FILE), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let paths = collect_reports(&args.inputs)?;
    if paths.is_empty() {
        return Err(CliError::Validation("no report.json files found".into()));
    }
    let rows = paths
        .iter()
        .map(|p| Report::read(p).map(|r| TableRow::from_report(&r)))
        .collect::<Result<Vec<_>, _>>()?;
    let table = format_table(&rows);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_text(&dir.join("table.tsv"), &table)?;
    }
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "stci", "train", "--variant", "NA", "--epochs", "2", "--batch-size", "8", "--lambda1", "0.5", "--seed", "3",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.model.variant, Some(Variant::Na));
        assert_eq!(a.common.seed, Some(3));
        assert!(Cli::try_parse_from(["stci", "train", "--variant", "big"]).is_err());
        assert!(Cli::try_parse_from(["stci", "generate", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["stci", "generate", "--interference", "--no-interference"]).is_err());
        assert!(Cli::try_parse_from(["stci", "evaluate"]).is_err());
        assert!(Cli::try_parse_from(["stci", "evaluate", "--oracle"]).is_ok());
    }

    #[test]
    fn lambda_override_keeps_weights_normalised() {
        let m = apply_model_overrides(ModelConfig::default(), None, None, None, Some(0.4)).unwrap();
        assert!((m.lambda1 + m.lambda2 - 1.0).abs() < 1e-12);
        assert!(apply_model_overrides(ModelConfig::default(), None, None, None, Some(1.5)).is_err());
        assert!(apply_model_overrides(ModelConfig::default(), None, Some(0), None, None).is_err());
    }

    #[test]
    fn desk_scale_truncates_long_series() {
        let mut cfg = ExperimentConfig::default();
        cfg.generation.steps = 520;
        let short = DataArgs {
            dataset: None,
            full: false,
        };
        let (d, _) = resolve_dataset(&cfg, &short, None).unwrap();
        assert_eq!(d.grid.n_steps, DESK_SCALE_STEPS);
        let full = DataArgs {
            dataset: None,
            full: true,
        };
        let (f, _) = resolve_dataset(&cfg, &full, None).unwrap();
        assert_eq!(f.grid.n_steps, 520);
        assert_eq!(f.prefix(DESK_SCALE_STEPS).unwrap().y.values, d.y.values);
    }
}
