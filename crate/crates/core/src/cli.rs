//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 when
//! training or density evaluation fails numerically.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cohort::{build_cohort_densities, impute_missing, rejection_subsample, DemographicsTable, PooledCohort};
use crate::data::Dataset;
use crate::density::ModelInfo;
use crate::ensembles::{bma_weights, EnsembleStrategy, StrategyKind};
use crate::error::{Result, SmcError};
use crate::experiments::{build_scenario, run_bench, write_plot_csv, BenchConfig, ScenarioKind};
use crate::model::{Expert, MlpExpert, ModelBundle, OutputKind, Prediction};
use crate::pipeline::{self, FitConfig};
use crate::representation::{balance_losses, LatentMap, RepresentationConfig};
use crate::weights::{LatentDensitySet, WeightConfig, WeightEngine};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const OUTPUT_ENV: &str = "SMC_OUTPUT_DIR";
const MAP_FILE: &str = "latent_map.json";
const DENSITIES_FILE: &str = "latent_densities.json";
const ENGINE_FILE: &str = "weights.json";
const TRACE_FILE: &str = "loss_trace.csv";

#[derive(Debug, Parser)]
#[command(name = "smc", version, about = "Synthetic model combination of pre-trained experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit densities, learn the representation and save the weight checkpoint.
    Fit(FitArgs),
    /// Predict with a saved checkpoint.
    Predict(PredictArgs),
    /// Run a benchmark scenario and write reports.
    Bench(BenchArgs),
    /// Filter a pooled cohort by demographic likelihood.
    Subsample(SubsampleArgs),
    /// Search connection/separation weights that keep reconstruction close to
    /// a reconstruction-only reference.
    Balance(BalanceArgs),
    /// Write a scenario's experts, information files, data and a pipeline
    /// config to disk.
    ExportScenario(ExportArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory (default: $SMC_OUTPUT_DIR, then ./smc-output).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides the number of representation training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides gamma.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `fit` (default: the output directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Feature CSV to predict on.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV (default: <output dir>/predictions.csv).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Bench config (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// regression-standard, regression-gap, regression-overlap or digits.
    #[arg(long)]
    scenario: Option<String>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long)]
    seeds: Option<usize>,
    /// Comma-separated strategy names.
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<String>,
    /// Digits only: comma-separated information sample counts.
    #[arg(long, value_delimiter = ',')]
    info_counts: Vec<usize>,
    /// Also run reconstruction-only SMC.
    #[arg(long)]
    ablation: bool,
    #[arg(long)]
    steps: Option<usize>,
    /// Digits corpus CSV (default: bundled copy).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SubsampleArgs {
    /// Demographics table (JSON).
    #[arg(long)]
    demographics: PathBuf,
    /// Pooled cohort CSV with an __origin__ column.
    #[arg(long)]
    cohort: PathBuf,
    /// Output CSV (default: <output dir>/subsampled.csv).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BalanceArgs {
    #[command(flatten)]
    common: Common,
    /// Allowed relative increase of the final reconstruction error.
    #[arg(long, default_value_t = 0.025)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

/// Everything `fit`, `predict` and `balance` read. Relative paths are
/// resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub experts: Vec<PathBuf>,
    pub infos: Vec<PathBuf>,
    pub test: PathBuf,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default)]
    pub representation: RepresentationConfig,
    #[serde(default)]
    pub weights: WeightConfig,
    #[serde(default)]
    pub strategies: Vec<StrategyKind>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SmcError::file(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| SmcError::file(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.experts.iter_mut().for_each(resolve);
        cfg.infos.iter_mut().for_each(resolve);
        resolve(&mut cfg.test);
        if let Some(v) = cfg.validation.as_mut() {
            resolve(v);
        }
        if let Some(o) = cfg.output_dir.as_mut() {
            resolve(o);
        }
        if cfg.experts.len() != cfg.infos.len() {
            return Err(SmcError::file(
                path,
                format!("{} experts but {} information files", cfg.experts.len(), cfg.infos.len()),
            ));
        }
        Ok(cfg)
    }

    pub fn fit_config(&self) -> FitConfig {
        let mut representation = self.representation.clone();
        representation.seed = self.seed;
        FitConfig {
            representation,
            weights: self.weights,
        }
    }

    pub fn load_bundle(&self) -> Result<ModelBundle> {
        let pairs = self
            .experts
            .iter()
            .zip(&self.infos)
            .map(|(e, i)| {
                let expert: Arc<dyn Expert> = Arc::new(MlpExpert::load(e)?);
                Ok((expert, ModelInfo::load(i)?))
            })
            .collect::<Result<Vec<_>>>()?;
        ModelBundle::from_pairs(pairs)
    }
}

fn output_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("smc-output"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SmcError::file(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| SmcError::file(path, e))
}

fn load_common(common: &Common) -> Result<(PipelineConfig, PathBuf)> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.steps {
        cfg.representation.steps = s;
    }
    if let Some(g) = common.gamma {
        cfg.weights.gamma = g;
    }
    let dir = output_dir(common.output_dir.as_deref(), cfg.output_dir.as_deref());
    Ok((cfg, dir))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct EngineFile {
    gamma: f64,
    tau: f64,
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let (cfg, dir) = load_common(&args.common)?;
    let bundle = cfg.load_bundle()?;
    let test = Dataset::from_csv_path(&cfg.test)?;
    let fitted = pipeline::fit(&bundle, &test, &cfg.fit_config())?;
    create_dir(&dir)?;
    fitted.engine.map.save(dir.join(MAP_FILE))?;
    fitted.engine.densities.save(dir.join(DENSITIES_FILE))?;
    let engine = EngineFile {
        gamma: fitted.engine.gamma,
        tau: fitted.engine.tau,
    };
    let path = dir.join(ENGINE_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&engine)?).map_err(|e| SmcError::file(&path, e))?;
    let trace_path = dir.join(TRACE_FILE);
    fitted.trace.write_csv(create_file(&trace_path)?)?;
    println!("loss trace: {}", trace_path.display());
    println!("checkpoint: {}", dir.display());
    Ok(())
}

fn load_engine(dir: &Path) -> Result<WeightEngine> {
    let map = LatentMap::load(dir.join(MAP_FILE))?;
    let densities = LatentDensitySet::load(dir.join(DENSITIES_FILE))?;
    let path = dir.join(ENGINE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| SmcError::file(&path, e))?;
    let e: EngineFile = serde_json::from_str(&text).map_err(|e| SmcError::file(&path, e))?;
    if map.latent_dim() != densities.latent_dim() {
        return Err(SmcError::file(dir, "latent map and densities disagree on the latent dimension"));
    }
    Ok(WeightEngine {
        map,
        densities,
        gamma: e.gamma,
        tau: e.tau,
    })
}

/// Writes one row per instance: the combined prediction, the weights,
/// confidence and the low-confidence flag.
///
/// Each entry of `extra` adds a column `pred_<name>` holding that strategy's
/// regression value or predicted class.
pub fn write_predictions<W: Write>(
    bundle: &ModelBundle,
    engine: &WeightEngine,
    extra: &[(StrategyKind, EnsembleStrategy<'_>)],
    data: &Dataset,
    writer: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = Vec::new();
    match bundle.output_kind() {
        OutputKind::Regression => header.push("prediction".to_string()),
        OutputKind::Classification { classes } => {
            header.extend((0..classes).map(|k| format!("p{k}")));
            header.push("class".into());
        }
    }
    header.extend((0..bundle.len()).map(|j| format!("w{j}")));
    header.push("confidence".into());
    header.push("flag".into());
    header.extend(extra.iter().map(|(k, _)| format!("pred_{k}")));
    wtr.write_record(&header)?;
    let strategy = EnsembleStrategy::Smc(engine);
    for x in data.features().iter_rows() {
        let wv = engine.weights(x)?;
        let pred = strategy.predict(bundle, x)?;
        let mut rec: Vec<String> = match &pred {
            Prediction::Regression(v) => vec![v.to_string()],
            Prediction::Probabilities(p) => {
                let mut r: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                r.push(pred.argmax().unwrap_or(0).to_string());
                r
            }
        };
        rec.extend(wv.weights.iter().map(|w| w.to_string()));
        rec.push(wv.confidence.to_string());
        rec.push(engine.flag(&wv).as_str().to_string());
        for (_, s) in extra {
            rec.push(match s.predict(bundle, x)? {
                Prediction::Regression(v) => v.to_string(),
                p => p.argmax().unwrap_or(0).to_string(),
            });
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let (cfg, dir) = load_common(&args.common)?;
    let bundle = cfg.load_bundle()?;
    let checkpoint = args.checkpoint.clone().unwrap_or_else(|| dir.clone());
    let engine = load_engine(&checkpoint)?;
    if engine.map.input_dim() != bundle.input_dim() || engine.n_models() != bundle.len() {
        return Err(SmcError::invalid(format!(
            "checkpoint expects {} features and {} models, config has {} and {}",
            engine.map.input_dim(),
            engine.n_models(),
            bundle.input_dim(),
            bundle.len()
        )));
    }
    let data = Dataset::from_csv_path(&args.input)?;
    if data.dim() != bundle.input_dim() {
        return Err(SmcError::file(
            &args.input,
            SmcError::DimensionMismatch {
                expected: bundle.input_dim(),
                got: data.dim(),
            },
        ));
    }
    let out = match &args.output {
        Some(p) => p.clone(),
        None => {
            create_dir(&dir)?;
            dir.join("predictions.csv")
        }
    };
    let extra_kinds: Vec<StrategyKind> = cfg.strategies.iter().copied().filter(|k| *k != StrategyKind::Smc).collect();
    let bma = if extra_kinds.iter().any(|k| k.needs_validation()) {
        let path = cfg
            .validation
            .as_ref()
            .ok_or_else(|| SmcError::invalid("model averaging strategies need a validation file in the config"))?;
        Some(bma_weights(&bundle, &Dataset::from_csv_path(path)?)?)
    } else {
        None
    };
    let extra = extra_kinds
        .iter()
        .map(|&k| {
            if k.classification_only() && bundle.output_kind() == OutputKind::Regression {
                return Err(SmcError::invalid(format!("strategy {k} needs classification experts")));
            }
            let s = match k {
                StrategyKind::GlobalAverage => EnsembleStrategy::GlobalAverage,
                StrategyKind::MajorityVote => EnsembleStrategy::MajorityVote,
                StrategyKind::EntropyWeighted => EnsembleStrategy::EntropyWeighted {
                    floor: crate::ensembles::DEFAULT_ENTROPY_FLOOR,
                },
                StrategyKind::Bma => EnsembleStrategy::Fixed(bma.clone().unwrap_or_default()),
                StrategyKind::SmcBma => EnsembleStrategy::SmcBma {
                    engine: &engine,
                    fixed: bma.clone().unwrap_or_default(),
                },
                StrategyKind::Smc => EnsembleStrategy::Smc(&engine),
            };
            Ok((k, s))
        })
        .collect::<Result<Vec<_>>>()?;
    write_predictions(&bundle, &engine, &extra, &data, create_file(&out)?)?;
    println!("predictions: {} ({} rows)", out.display(), data.len());
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| SmcError::file(p, e))?;
            serde_json::from_str::<BenchConfig>(&text).map_err(|e| SmcError::file(p, e))?
        }
        None => BenchConfig::default(),
    };
    if let Some(s) = &args.scenario {
        cfg.scenario = s.parse::<ScenarioKind>()?;
    }
    if args.seed.is_some() || args.seeds.is_some() {
        let start = args.seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0);
        let n = args.seeds.unwrap_or(1) as u64;
        cfg.seeds = (start..start + n).collect();
    }
    if !args.strategies.is_empty() {
        cfg.strategies = args
            .strategies
            .iter()
            .map(|s| s.parse::<StrategyKind>())
            .collect::<Result<Vec<_>>>()?;
    }
    if !args.info_counts.is_empty() {
        cfg.info_counts = args.info_counts.clone();
    }
    cfg.ablation |= args.ablation;
    if let Some(s) = args.steps {
        let mut fit = cfg.fit_config();
        fit.representation.steps = s;
        cfg.fit = Some(fit);
    }
    if let Some(c) = &args.corpus {
        cfg.digits.corpus = Some(c.clone());
    }
    let dir = output_dir(args.output_dir.as_deref(), None);
    let out = run_bench(&cfg)?;
    create_dir(&dir)?;
    out.report.write_csv(create_file(&dir.join("report.csv"))?)?;
    out.report.write_json(create_file(&dir.join("report.json"))?)?;
    write_plot_csv(&out.plot, create_file(&dir.join("plot.csv"))?)?;
    let mut timings = csv::Writer::from_writer(create_file(&dir.join("timings.csv"))?);
    for t in &out.timings {
        timings.serialize(t)?;
        eprintln!("seed {} {}: {:.1}s", t.seed, t.setting, t.seconds);
    }
    timings.flush()?;
    println!("report: {}", dir.join("report.csv").display());
    Ok(())
}

fn cmd_subsample(args: &SubsampleArgs) -> Result<()> {
    let table = DemographicsTable::load(&args.demographics)?;
    let table = if table.has_missing() {
        log::info!("imputing missing demographic cells");
        impute_missing(&table)?
    } else {
        table
    };
    let densities = build_cohort_densities(&table)?;
    let cohort = PooledCohort::load(&args.cohort)?;
    if cohort.instances().dim() != table.covariates.len() {
        return Err(SmcError::file(
            &args.cohort,
            format!(
                "cohort has {} feature columns, demographics list {} covariates",
                cohort.instances().dim(),
                table.covariates.len()
            ),
        ));
    }
    let kept = rejection_subsample(&cohort, &densities)?;
    let out = match &args.output {
        Some(p) => p.clone(),
        None => {
            let dir = output_dir(args.output_dir.as_deref(), None);
            create_dir(&dir)?;
            dir.join("subsampled.csv")
        }
    };
    kept.to_csv_writer(create_file(&out)?)?;
    let before = cohort.counts(densities.len());
    let after = kept.counts(densities.len());
    for (j, row) in table.models.iter().enumerate() {
        println!("{}: kept {} of {}", row.id, after[j], before[j]);
    }
    println!("subsampled cohort: {} ({} of {} rows)", out.display(), kept.len(), cohort.len());
    Ok(())
}

fn cmd_balance(args: &BalanceArgs) -> Result<()> {
    let (cfg, dir) = load_common(&args.common)?;
    let bundle = cfg.load_bundle()?;
    let test = Dataset::from_csv_path(&cfg.test)?;
    let densities = pipeline::feature_densities(&bundle)?;
    let base = cfg.fit_config().representation;
    let outcome = balance_losses(&bundle, &densities, &test, &base, args.threshold)?;
    create_dir(&dir)?;
    let path = dir.join("balance.json");
    let body = serde_json::json!({
        "weights": outcome.weights,
        "reference_rec": outcome.reference_rec,
        "ladder": outcome.ladder.iter().map(|(l, r)| serde_json::json!({"lambda": l, "rec": r})).collect::<Vec<_>>(),
        "qualified": outcome.qualified,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&body)?).map_err(|e| SmcError::file(&path, e))?;
    println!(
        "lambda_con = lambda_sep = {} ({}), reference reconstruction {:.6}",
        outcome.weights.con,
        if outcome.qualified { "within threshold" } else { "fallback" },
        outcome.reference_rec
    );
    println!("balance: {}", path.display());
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let kind: ScenarioKind = args.scenario.parse()?;
    let scenario = build_scenario(kind, args.seed, &BenchConfig::default())?;
    let fit = kind.default_fit();
    let dir = output_dir(args.output_dir.as_deref(), None);
    create_dir(&dir)?;
    let mut experts = Vec::new();
    let mut infos = Vec::new();
    for (j, train) in scenario.train.iter().enumerate() {
        let e = PathBuf::from(format!("expert_{j}.json"));
        let i = PathBuf::from(format!("info_{j}.json"));
        scenario.experts[j].save(dir.join(&e))?;
        ModelInfo::samples(train.features().clone())?.save(dir.join(&i))?;
        experts.push(e);
        infos.push(i);
    }
    scenario.test.to_csv_path(dir.join("test.csv"))?;
    scenario.validation.to_csv_path(dir.join("validation.csv"))?;
    let cfg = PipelineConfig {
        experts,
        infos,
        test: "test.csv".into(),
        validation: Some("validation.csv".into()),
        representation: fit.representation,
        weights: fit.weights,
        strategies: Vec::new(),
        output_dir: None,
        seed: args.seed,
    };
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg)?).map_err(|e| SmcError::file(&path, e))?;
    println!("scenario {kind} written to {}", dir.display());
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Subsample(a) => cmd_subsample(a),
        Command::Balance(a) => cmd_balance(a),
        Command::ExportScenario(a) => cmd_export(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            }
        }
    }
}
