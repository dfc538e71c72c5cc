//! Command-line front end. Each command reads one strict JSON config and
//! writes its CSV/JSON artifacts to `--out` (or the primary one to stdout).
//!
//! Exit codes: 0 success, 1 check or runtime failure, 2 config error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{gen_correlated_gaussians, load_csv, mnist_dataset, Dataset, GaussianSpec};
use crate::diagnostics::{axis_swap_demo, whiteness_report, WhitenessReport};
use crate::exec::{init_thread_pool_from_env, Exec};
use crate::experiments::{
    conditioning_trace, gradcheck_grid, ordering_fraction, presets, separated_input, GradGridConfig, GroupChoice, Method,
    NamedGroup,
};
use crate::linalg::Matrix;
use crate::net::{init_params, Network, NetworkSpec};
use crate::norm::{DbnState, NormConfig, NormMode};
use crate::seed::derive_seed;
use crate::train::{train, write_metrics_csv, EpochMetrics, TrainConfig, TrainError};

#[derive(Debug, Parser)]
#[command(name = "whitenorm", version, about = "Decorrelated batch normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference check of the normalization backward over a grid.
    Gradcheck(CommonArgs),
    /// Whiten a dataset and report how white the result is.
    Whiten(CommonArgs),
    /// PCA vs ZCA on a batch pair whose principal axes trade places.
    DemoAxisSwap(CommonArgs),
    /// Train a network and write per-epoch metrics plus the final model.
    Train(TrainArgs),
    /// Track the last layer's Fisher condition number during training.
    Conditioning(CommonArgs),
    /// Time forward and backward passes across group sizes.
    Bench(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; without it the primary artifact goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run every cell of the config's `sweep` section.
    #[arg(long)]
    sweep: bool,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_thread_pool_from_env();
    let result = match &cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Whiten(a) => cmd_whiten(a),
        Command::DemoAxisSwap(a) => cmd_demo_axis_swap(a),
        Command::Train(a) => cmd_train(a),
        Command::Conditioning(a) => cmd_conditioning(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Config(msg) => eprintln!("config error: {msg}"),
                CliError::Failed(msg) => eprintln!("error: {msg}"),
            }
            e.code()
        }
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Where artifacts go.
struct Output {
    dir: Option<PathBuf>,
}

impl Output {
    fn new(dir: &Option<PathBuf>) -> Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|e| failed(format!("{}: {e}", d.display())))?;
        }
        Ok(Output { dir: dir.clone() })
    }

    /// Writes `name` into the output directory; the primary artifact goes to
    /// stdout when there is no directory.
    fn emit(&self, name: &str, bytes: &[u8], primary: bool) -> Result<()> {
        match &self.dir {
            Some(d) => fs::write(d.join(name), bytes).map_err(|e| failed(format!("{name}: {e}"))),
            None if primary => {
                use std::io::Write;
                std::io::stdout().write_all(bytes).map_err(failed)
            }
            None => Ok(()),
        }
    }

    fn emit_json<T: Serialize>(&self, name: &str, value: &T, primary: bool) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(failed)?;
        text.push('\n');
        self.emit(name, text.as_bytes(), primary)
    }
}

fn one() -> usize {
    1
}

/// Where a command's examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Class-conditional Gaussians with unit variances and a shared
    /// correlation; seeded from the run seed.
    Gaussian {
        dim: usize,
        n: usize,
        #[serde(default = "one")]
        classes: usize,
        #[serde(default)]
        correlation: f64,
        #[serde(default)]
        separation: f64,
    },
    /// CSV with a header and a `label` column.
    Csv { path: PathBuf },
    /// IDX image and label files (MNIST layout).
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DataSource {
    fn load(&self, base: &Path, seed: u64) -> Result<Dataset> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        match self {
            DataSource::Gaussian { dim, n, classes, correlation, separation } => {
                gen_correlated_gaussians(&GaussianSpec {
                    dim: *dim,
                    n: *n,
                    classes: *classes,
                    correlation: *correlation,
                    separation: *separation,
                    seed,
                })
                .map_err(config_err)
            }
            DataSource::Csv { path } => load_csv(resolve(path)).map_err(failed),
            DataSource::Idx { images, labels, limit } => {
                mnist_dataset(resolve(images), resolve(labels), *limit).map_err(failed)
            }
        }
    }
}

// ---------------------------------------------------------------- gradcheck

fn cmd_gradcheck(args: &CommonArgs) -> Result<()> {
    let mut cfg: GradGridConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if !(cfg.h > 0.0) || cfg.tolerance < 0.0 {
        return Err(config_err("h must be positive and tolerance non-negative"));
    }
    if cfg.batch_sizes.iter().any(|&m| m < 2) || cfg.dims.contains(&0) {
        return Err(config_err("dimensions must be positive and batch sizes at least 2"));
    }
    let report = gradcheck_grid(&cfg).map_err(config_err)?;
    let out = Output::new(&args.out)?;
    out.emit_json("gradcheck.json", &report, true)?;
    if report.pass {
        Ok(())
    } else {
        Err(failed(format!("max relative error {:e} exceeds tolerance {:e}", report.max_rel_error, report.tolerance)))
    }
}

// ---------------------------------------------------------------- whiten

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WhitenConfig {
    data: DataSource,
    norm: NormConfig,
    #[serde(default)]
    seed: u64,
    /// Fail (exit 1) when the per-group deviation from `I − εΣ⁻¹` exceeds this.
    #[serde(default)]
    max_deviation: Option<f64>,
}

#[derive(Serialize)]
struct WhitenOutput<'a> {
    mode: NormMode,
    group_size: usize,
    epsilon: f64,
    examples: usize,
    #[serde(flatten)]
    report: &'a WhitenessReport,
}

fn activations_csv(input: &Matrix, output: &Matrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = input.rows();
    let header: Vec<String> =
        (0..d).map(|i| format!("input_{i}")).chain((0..output.rows()).map(|i| format!("output_{i}"))).collect();
    w.write_record(&header).map_err(failed)?;
    for j in 0..input.cols() {
        let row: Vec<String> = input.column(j).iter().chain(&output.column(j)).map(|v| v.to_string()).collect();
        w.write_record(&row).map_err(failed)?;
    }
    w.into_inner().map_err(failed)
}

fn cmd_whiten(args: &CommonArgs) -> Result<()> {
    let cfg: WhitenConfig = read_config(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let data = cfg.data.load(&config_dir(&args.config), derive_seed(seed, "data"))?;
    let state = DbnState::new(data.dim(), cfg.norm.clone()).map_err(config_err)?;
    let (normalized, _, _) = state.forward_batch(&data.features).map_err(failed)?;
    let report = whiteness_report(&normalized, &data.features, state.epsilon(), state.group_size()).map_err(failed)?;
    let out = Output::new(&args.out)?;
    out.emit("activations.csv", &activations_csv(&data.features, &normalized)?, false)?;
    let summary = WhitenOutput {
        mode: state.mode(),
        group_size: state.group_size(),
        epsilon: state.epsilon(),
        examples: data.len(),
        report: &report,
    };
    out.emit_json("whiteness.json", &summary, true)?;
    if let Some(limit) = cfg.max_deviation {
        let worst = report.group_deviation.iter().cloned().fold(0.0, f64::max);
        if worst > limit {
            return Err(failed(format!("whiteness deviation {worst:e} exceeds {limit:e}")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- demo-axis-swap

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisSwapConfig {
    #[serde(default)]
    seed: u64,
}

fn cmd_demo_axis_swap(args: &CommonArgs) -> Result<()> {
    let cfg: AxisSwapConfig = read_config(&args.config)?;
    let report = axis_swap_demo(args.seed.unwrap_or(cfg.seed)).map_err(failed)?;
    Output::new(&args.out)?.emit_json("axis_swap.json", &report, true)?;
    let ok = report.flipping.pca_permutation == [1, 0]
        && report.flipping.zca_permutation == [0, 1]
        && report.control.pca_permutation == [0, 1]
        && report.control.zca_permutation == [0, 1]
        && report.flipping.zca_displacement < 0.5 * report.flipping.pca_displacement;
    if ok {
        Ok(())
    } else {
        Err(failed("axis-swap checks failed"))
    }
}

// ---------------------------------------------------------------- train

/// An MLP described by its hidden widths and normalization method.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpConfig {
    hidden: Vec<usize>,
    #[serde(default = "plain")]
    method: Method,
}

fn plain() -> Method {
    Method::Plain
}

/// Lists of values to combine; empty lists keep the base value.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepConfig {
    #[serde(default)]
    lr: Vec<f64>,
    #[serde(default)]
    momentum: Vec<f64>,
    #[serde(default)]
    weight_decay: Vec<f64>,
    #[serde(default)]
    batch_size: Vec<usize>,
    #[serde(default)]
    method: Vec<Method>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCliConfig {
    data: DataSource,
    #[serde(default)]
    test_data: Option<DataSource>,
    #[serde(default)]
    network: Option<NetworkSpec>,
    #[serde(default)]
    mlp: Option<MlpConfig>,
    /// Its `seed` field is replaced by one derived from the run seed.
    train: TrainConfig,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, Serialize)]
struct Cell {
    index: usize,
    method: Option<String>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    batch_size: usize,
    diverged: bool,
    final_train_loss: Option<f64>,
    final_train_acc: Option<f64>,
}

struct CellPlan {
    spec: NetworkSpec,
    method: Option<Method>,
    train: TrainConfig,
}

fn base_spec(cfg: &TrainCliConfig, data: &Dataset, method: Option<Method>) -> Result<NetworkSpec> {
    match (&cfg.network, &cfg.mlp) {
        (Some(spec), None) => {
            if method.is_some() {
                return Err(config_err("sweeping `method` needs an `mlp` network"));
            }
            Ok(spec.clone())
        }
        (None, Some(mlp)) => Ok(method.unwrap_or(mlp.method).mlp(data.dim(), &mlp.hidden, data.classes)),
        _ => Err(config_err("give exactly one of `network` and `mlp`")),
    }
}

fn plan_cells(cfg: &TrainCliConfig, data: &Dataset, sweep: bool, shuffle_seed: u64) -> Result<Vec<CellPlan>> {
    let base = TrainConfig { seed: shuffle_seed, ..cfg.train.clone() };
    let grid = match (sweep, &cfg.sweep) {
        (false, _) => SweepConfig::default(),
        (true, Some(s)) => s.clone(),
        (true, None) => return Err(config_err("--sweep needs a `sweep` section")),
    };
    let or = |v: &Vec<f64>, b: f64| if v.is_empty() { vec![b] } else { v.clone() };
    let methods: Vec<Option<Method>> =
        if grid.method.is_empty() { vec![None] } else { grid.method.iter().copied().map(Some).collect() };
    let batches = if grid.batch_size.is_empty() { vec![base.batch_size] } else { grid.batch_size.clone() };
    let mut cells = Vec::new();
    for &method in &methods {
        let spec = base_spec(cfg, data, method)?;
        spec.widths().map_err(config_err)?;
        for &lr in &or(&grid.lr, base.lr) {
            for &momentum in &or(&grid.momentum, base.momentum) {
                for &weight_decay in &or(&grid.weight_decay, base.weight_decay) {
                    for &batch_size in &batches {
                        let train = TrainConfig { lr, momentum, weight_decay, batch_size, ..base.clone() };
                        train.validate().map_err(config_err)?;
                        cells.push(CellPlan { spec: spec.clone(), method, train });
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn run_cell(plan: &CellPlan, init_seed: u64, data: &Dataset, test: Option<&Dataset>) -> std::result::Result<(Network, Vec<EpochMetrics>), TrainError> {
    let mut net = init_params(&plan.spec, init_seed)?;
    let log = train(&mut net, data, test, &plan.train)?;
    Ok((net, log))
}

fn metrics_bytes(log: &[EpochMetrics]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics_csv(log, &mut buf).map_err(failed)?;
    Ok(buf)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let common = &args.common;
    let cfg: TrainCliConfig = read_config(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let base = config_dir(&common.config);
    let data = cfg.data.load(&base, derive_seed(seed, "data"))?;
    let test = cfg.test_data.as_ref().map(|t| t.load(&base, derive_seed(seed, "test_data"))).transpose()?;
    if let Some(t) = &test {
        if t.dim() != data.dim() {
            return Err(config_err(format!("test data has {} features, training data {}", t.dim(), data.dim())));
        }
    }
    let cells = plan_cells(&cfg, &data, args.sweep, derive_seed(seed, "train"))?;
    let init_seed = derive_seed(seed, "init");
    for c in &cells {
        if c.spec.input_dim != data.dim() {
            return Err(config_err(format!("network expects {} inputs, data has {}", c.spec.input_dim, data.dim())));
        }
    }
    let out = Output::new(&common.out)?;

    if !args.sweep {
        let (net, log) = run_cell(&cells[0], init_seed, &data, test.as_ref()).map_err(|e| match e {
            TrainError::InvalidConfig(m) => CliError::Config(m),
            other => failed(other),
        })?;
        out.emit("metrics.csv", &metrics_bytes(&log)?, true)?;
        return out.emit_json("model.json", &net, false);
    }

    // Cells share nothing mutable, so they can train in parallel.
    let results = Exec::default().map_slice(&cells, |c| run_cell(c, init_seed, &data, test.as_ref()));
    let mut summary = Vec::with_capacity(cells.len());
    for (index, (plan, result)) in cells.iter().zip(results).enumerate() {
        let (diverged, last) = match result {
            Ok((net, log)) => {
                out.emit(&format!("metrics_{index:03}.csv"), &metrics_bytes(&log)?, false)?;
                out.emit_json(&format!("model_{index:03}.json"), &net, false)?;
                (false, log.last().copied())
            }
            Err(TrainError::Diverged { .. }) => (true, None),
            Err(e) => return Err(failed(e)),
        };
        summary.push(Cell {
            index,
            method: plan.method.map(|m| m.name()),
            lr: plan.train.lr,
            momentum: plan.train.momentum,
            weight_decay: plan.train.weight_decay,
            batch_size: plan.train.batch_size,
            diverged,
            final_train_loss: last.map(|m| m.train_loss),
            final_train_acc: last.map(|m| m.train_acc),
        });
    }
    out.emit_json("sweep.json", &summary, true)
}

// ---------------------------------------------------------------- conditioning

fn default_every() -> usize {
    5
}

fn default_conditioning_methods() -> Vec<Method> {
    presets::conditioning_methods()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditioningConfig {
    data: DataSource,
    hidden: Vec<usize>,
    /// Expected order from worst to best conditioned.
    #[serde(default = "default_conditioning_methods")]
    methods: Vec<Method>,
    train: TrainConfig,
    #[serde(default = "default_every")]
    every: usize,
    #[serde(default)]
    seed: u64,
    /// Fail when the expected ordering holds at fewer logged points.
    #[serde(default)]
    min_fraction: Option<f64>,
}

#[derive(Serialize)]
struct ConditioningOutput {
    methods: Vec<String>,
    iterations: Vec<usize>,
    /// Fraction of logged points where each method is at most the previous one.
    ordering_fraction: f64,
    final_train_loss: Vec<f64>,
}

fn cmd_conditioning(args: &CommonArgs) -> Result<()> {
    let cfg: ConditioningConfig = read_config(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    cfg.train.validate().map_err(config_err)?;
    if cfg.every == 0 || cfg.methods.is_empty() {
        return Err(config_err("`every` must be positive and `methods` non-empty"));
    }
    let data = cfg.data.load(&config_dir(&args.config), derive_seed(seed, "data"))?;
    let train_cfg = TrainConfig { seed: derive_seed(seed, "train"), ..cfg.train.clone() };
    let init_seed = derive_seed(seed, "init");
    let traces = Exec::default().map_slice(&cfg.methods, |&m| conditioning_trace(&data, m, &cfg.hidden, &train_cfg, init_seed, cfg.every));
    let traces: Vec<_> = traces.into_iter().collect::<std::result::Result<_, _>>().map_err(failed)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iteration".to_string()];
    header.extend(traces.iter().map(|t| t.method.clone()));
    w.write_record(&header).map_err(failed)?;
    let rows = traces.iter().map(|t| t.iterations.len()).min().unwrap_or(0);
    for i in 0..rows {
        let mut row = vec![traces[0].iterations[i].to_string()];
        row.extend(traces.iter().map(|t| t.condition[i].to_string()));
        w.write_record(&row).map_err(failed)?;
    }
    let csv_bytes = w.into_inner().map_err(failed)?;
    let conds: Vec<&[f64]> = traces.iter().map(|t| t.condition.as_slice()).collect();
    let summary = ConditioningOutput {
        methods: traces.iter().map(|t| t.method.clone()).collect(),
        iterations: traces[0].iterations.clone(),
        ordering_fraction: ordering_fraction(&conds),
        final_train_loss: traces.iter().map(|t| t.log.last().map_or(f64::NAN, |m| m.train_loss)).collect(),
    };
    let out = Output::new(&args.out)?;
    out.emit("conditioning.csv", &csv_bytes, false)?;
    out.emit_json("conditioning.json", &summary, true)?;
    match cfg.min_fraction {
        Some(min) if summary.ordering_fraction < min => {
            Err(failed(format!("ordering held at {:.3} of points, below {min}", summary.ordering_fraction)))
        }
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------- bench

fn default_bench_modes() -> Vec<NormMode> {
    vec![NormMode::Zca]
}
fn default_bench_dims() -> Vec<usize> {
    vec![256]
}
fn default_bench_batch() -> usize {
    512
}
fn default_bench_groups() -> Vec<GroupChoice> {
    vec![GroupChoice::Size(1), GroupChoice::Size(16), GroupChoice::Named(NamedGroup::Full)]
}
fn default_repeats() -> usize {
    3
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchConfig {
    #[serde(default = "default_bench_modes")]
    modes: Vec<NormMode>,
    #[serde(default = "default_bench_dims")]
    dims: Vec<usize>,
    #[serde(default = "default_bench_batch")]
    batch: usize,
    #[serde(default = "default_bench_groups")]
    group_sizes: Vec<GroupChoice>,
    #[serde(default = "default_repeats")]
    repeats: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
struct BenchRow {
    mode: NormMode,
    d: usize,
    m: usize,
    #[serde(rename = "k_G")]
    k_g: usize,
    fwd_us: f64,
    bwd_us: f64,
}

fn cmd_bench(args: &CommonArgs) -> Result<()> {
    let cfg: BenchConfig = read_config(&args.config)?;
    if cfg.batch < 2 {
        return Err(config_err(format!("batch must hold at least 2 examples, got {}", cfg.batch)));
    }
    if cfg.repeats == 0 || cfg.dims.contains(&0) {
        return Err(config_err("repeats and dims must be positive"));
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let mut w = csv::Writer::from_writer(Vec::new());
    for &d in &cfg.dims {
        let x = separated_input(d, cfg.batch, seed);
        for &g in &cfg.group_sizes {
            let k = g.resolve(d);
            for &mode in &cfg.modes {
                let state = DbnState::new(d, NormConfig { mode, ..NormConfig::zca(k) }).map_err(config_err)?;
                let (mut fwd, mut bwd) = (f64::INFINITY, f64::INFINITY);
                for _ in 0..cfg.repeats {
                    let t = Instant::now();
                    let (out, cache, _) = state.forward_batch(&x).map_err(failed)?;
                    fwd = fwd.min(t.elapsed().as_secs_f64() * 1e6);
                    let t = Instant::now();
                    state.backward(&cache, &out).map_err(failed)?;
                    bwd = bwd.min(t.elapsed().as_secs_f64() * 1e6);
                }
                let k_g = if mode == NormMode::Bn { 1 } else { k };
                w.serialize(BenchRow { mode, d, m: cfg.batch, k_g, fwd_us: fwd, bwd_us: bwd }).map_err(failed)?;
            }
        }
    }
    Output::new(&args.out)?.emit("bench.csv", &w.into_inner().map_err(failed)?, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn run(args: &[&str]) -> i32 {
        main_with_args(std::iter::once("whitenorm").chain(args.iter().copied()))
    }

    #[test]
    fn malformed_and_unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bad = write(dir.path(), "bad.json", "{ not json");
        assert_eq!(run(&["gradcheck", "--config", bad.to_str().unwrap()]), 2);
        let typo = write(dir.path(), "typo.json", r#"{"dimz": [2]}"#);
        assert_eq!(run(&["gradcheck", "--config", typo.to_str().unwrap()]), 2);
        assert_eq!(run(&["gradcheck", "--config", "/nonexistent/config.json"]), 2);
        assert_eq!(run(&["no-such-command"]), 2);
    }

    #[test]
    fn gradcheck_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(dir.path(), "ok.json", r#"{"dims": [3], "batch_sizes": [12]}"#);
        let out = dir.path().join("out");
        assert_eq!(run(&["gradcheck", "--config", ok.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("gradcheck.json")).unwrap()).unwrap();
        assert_eq!(report["pass"], true);
        let strict = write(dir.path(), "strict.json", r#"{"dims": [3], "batch_sizes": [12], "tolerance": 0}"#);
        assert_eq!(run(&["gradcheck", "--config", strict.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
    }

    #[test]
    fn bench_rejects_empty_batch_and_writes_schema() {
        let dir = tempfile::tempdir().unwrap();
        let zero = write(dir.path(), "zero.json", r#"{"batch": 0}"#);
        assert_eq!(run(&["bench", "--config", zero.to_str().unwrap()]), 2);
        let small = write(dir.path(), "small.json", r#"{"dims": [8], "batch": 16, "group_sizes": [1, "full"], "modes": ["zca", "bn"]}"#);
        let out = dir.path().join("b");
        assert_eq!(run(&["bench", "--config", small.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        let text = fs::read_to_string(out.join("bench.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "mode,d,m,k_G,fwd_us,bwd_us");
        assert_eq!(lines.count(), 4);
    }

    #[test]
    fn whiten_identity_and_correlated_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let white = write(
            dir.path(),
            "white.json",
            r#"{"data": {"kind": "gaussian", "dim": 3, "n": 20000}, "norm": {"mode": "zca"}}"#,
        );
        let out = dir.path().join("w");
        assert_eq!(run(&["whiten", "--config", white.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        let mut reader = csv::Reader::from_path(out.join("activations.csv")).unwrap();
        let mut worst: f64 = 0.0;
        for rec in reader.records() {
            let v: Vec<f64> = rec.unwrap().iter().map(|s| s.parse().unwrap()).collect();
            for i in 0..3 {
                worst = worst.max((v[i] - v[3 + i]).abs());
            }
        }
        // Sample mean/covariance differ from the truth by O(1/√n).
        assert!(worst < 0.2, "{worst}");

        let zca = write(
            dir.path(),
            "zca.json",
            r#"{"data": {"kind": "gaussian", "dim": 4, "n": 500, "correlation": 0.9},
                "norm": {"mode": "zca"}, "max_deviation": 1e-8}"#,
        );
        assert_eq!(run(&["whiten", "--config", zca.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        let bn = write(
            dir.path(),
            "bn.json",
            r#"{"data": {"kind": "gaussian", "dim": 4, "n": 5000, "correlation": 0.9}, "norm": {"mode": "bn"}}"#,
        );
        assert_eq!(run(&["whiten", "--config", bn.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("whiteness.json")).unwrap()).unwrap();
        let corr = report["correlation"]["data"][1].as_f64().unwrap();
        assert!((corr - 0.9).abs() < 0.02, "{corr}");
    }

    #[test]
    fn train_writes_metrics_and_model_and_sweeps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(
            dir.path(),
            "train.json",
            r#"{"data": {"kind": "gaussian", "dim": 4, "n": 64, "classes": 2, "correlation": 0.5, "separation": 3},
                "mlp": {"hidden": [8], "method": {"kind": "dbn", "mode": "zca", "group_size": 4}},
                "train": {"lr": 0.1, "epochs": 3, "batch_size": 16},
                "sweep": {"lr": [0.05, 0.1], "method": [{"kind": "plain"}, {"kind": "bn"}]}}"#,
        );
        let out = dir.path().join("t");
        assert_eq!(run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 4);
        let model: Network = serde_json::from_slice(&fs::read(out.join("model.json")).unwrap()).unwrap();
        assert_eq!(model.spec().input_dim, 4);

        assert_eq!(run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--sweep"]), 0);
        let summary: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(out.join("sweep.json")).unwrap()).unwrap();
        assert_eq!(summary.len(), 4);
        assert!(out.join("metrics_003.csv").exists());

        let both = write(
            dir.path(),
            "both.json",
            r#"{"data": {"kind": "gaussian", "dim": 4, "n": 64}, "mlp": {"hidden": []},
                "network": {"input_dim": 4, "layers": [{"kind": "softmax_nll"}]},
                "train": {"lr": 0.1, "epochs": 1, "batch_size": 16}}"#,
        );
        assert_eq!(run(&["train", "--config", both.to_str().unwrap()]), 2);
    }

    #[test]
    fn axis_swap_and_conditioning_commands() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(dir.path(), "swap.json", r#"{"seed": 4}"#);
        let out = dir.path().join("s");
        assert_eq!(run(&["demo-axis-swap", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("axis_swap.json")).unwrap()).unwrap();
        assert_eq!(report["flipping"]["pca_permutation"], serde_json::json!([1, 0]));

        let cond = write(
            dir.path(),
            "cond.json",
            r#"{"data": {"kind": "gaussian", "dim": 6, "n": 200, "classes": 3, "correlation": 0.9, "separation": 2},
                "hidden": [8], "train": {"lr": 0.5, "epochs": 10, "full_batch": true}, "every": 5}"#,
        );
        assert_eq!(run(&["conditioning", "--config", cond.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        let csv = fs::read_to_string(out.join("conditioning.csv")).unwrap();
        assert!(csv.starts_with("iteration,plain,bn,dbn-zca\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
