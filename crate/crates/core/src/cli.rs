//! Command-line front end. All artifacts of a run live in one directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{Input, Model, Strategy};
use crate::profiler::profile_step;
use crate::selector::SelectionReport;
use crate::synth::{gen_task, pretrain, SyntheticTaskSpec, TaskInfo};
use crate::tensor::TensorError;
use crate::train::experiment::write_rows_csv;
use crate::train::{run_experiment, sweep, Axis, ExperimentConfig, LayerSel};
use crate::vit::{load_weights_expecting, save_weights, FormatError, ViTConfig, ViTWeights};

pub const TEACHER_FILE: &str = "teacher.vqtw";
pub const BACKBONE_FILE: &str = "backbone.vqtw";
pub const MODEL_FILE: &str = "model.vqtw";
pub const PRETEXT_FILE: &str = "pretext.vqtd";
pub const TRAIN_FILE: &str = "train.vqtd";
pub const TEST_FILE: &str = "test.vqtd";
pub const TASK_FILE: &str = "task.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const SELECTION_FILE: &str = "selection.json";
pub const MEMORY_FILE: &str = "memory.json";
pub const LAYER_IMPORTANCE_FILE: &str = "layer_importance.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TensorError::Contract(_) => CliError::Config(e.to_string()),
            TensorError::Shape { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub vit: ViTConfig,
    pub task: SyntheticTaskSpec,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vit: ViTConfig::desk(),
            task: SyntheticTaskSpec::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.task.validate(&self.vit).map_err(|e| CliError::Config(e.to_string()))?;
        self.experiment.validate().map_err(CliError::Config)
    }
}

#[derive(Debug, Parser)]
#[command(name = "vqtlab", version, about = "Query tuning and transfer baselines on a small ViT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisName {
    DataFraction,
    T,
    F,
    Layers,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON file with optional `vit`, `task` and `experiment` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long = "F")]
    pub f: Option<f64>,
    /// `all` or `last:k`.
    #[arg(long)]
    pub layers: Option<LayerSel>,
    #[arg(long)]
    pub data_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub cache: Option<Switch>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Directory holding inputs from earlier steps; defaults to `--out`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a teacher, a pretext set and downstream train/test sets.
    GenTask(Common),
    /// Pre-train the backbone on the pretext labels.
    Pretrain(Common),
    /// Train and evaluate one strategy.
    Probe(Common),
    /// Train with group-lasso feature selection.
    Select(Common),
    /// One run per value of an axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AxisName,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Measure retained activation bytes of one training step.
    Profile(Common),
    /// Summaries computed from earlier outputs.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        layer_importance: bool,
    },
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let e = &mut rc.experiment;
        if let Some(s) = self.seed {
            e.seed = s;
            rc.task.teacher_seed = s;
        }
        if let Some(s) = self.strategy {
            e.strategy = s;
        }
        if let Some(t) = self.t {
            e.t = t;
        }
        if let Some(f) = self.f {
            e.f = f;
        }
        if let Some(l) = self.layers {
            e.layers = l;
        }
        if let Some(x) = self.data_fraction {
            e.data_fraction = x;
        }
        if let Some(c) = self.cache {
            e.cache = c == Switch::On;
        }
        rc.validate()?;
        Ok(rc)
    }

    fn data_dir(&self) -> &Path {
        self.data.as_deref().unwrap_or(&self.out)
    }

    fn input(&self, name: &str) -> Result<PathBuf> {
        let p = self.data_dir().join(name);
        if !p.exists() {
            return Err(CliError::Data(format!("missing input file {}", p.display())));
        }
        Ok(p)
    }

    fn output(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::Data(format!("{}: {e}", self.out.display())))?;
        Ok(self.out.join(name))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn csv_text(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Data(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| CliError::Data(e.to_string()))
}

fn load_dataset(c: &Common, name: &str, cfg: &ViTConfig) -> Result<Dataset> {
    let d = Dataset::load(&c.input(name)?)?;
    if d.channels != cfg.channels || d.height != cfg.image || d.width != cfg.image {
        return Err(CliError::Data(format!(
            "{name} holds {}x{}x{} images, config expects {}x{}x{}",
            d.channels, d.height, d.width, cfg.channels, cfg.image, cfg.image
        )));
    }
    Ok(d)
}

fn load_backbone(c: &Common, cfg: &ViTConfig) -> Result<ViTWeights> {
    Ok(load_weights_expecting(&c.input(BACKBONE_FILE)?, cfg)?.weights)
}

#[derive(Serialize)]
struct TaskFile<'a> {
    vit: &'a ViTConfig,
    info: &'a TaskInfo,
}

fn cmd_gen_task(c: &Common) -> Result<()> {
    let rc = c.resolve()?;
    let task = gen_task(&rc.vit, &rc.task)?;
    save_weights(&c.output(TEACHER_FILE)?, &rc.vit, &task.teacher, None)?;
    task.pretext.save(&c.output(PRETEXT_FILE)?)?;
    task.train.save(&c.output(TRAIN_FILE)?)?;
    task.test.save(&c.output(TEST_FILE)?)?;
    write_json(
        &c.output(TASK_FILE)?,
        &TaskFile {
            vit: &rc.vit,
            info: &task.info,
        },
    )
}

fn cmd_pretrain(c: &Common) -> Result<()> {
    let rc = c.resolve()?;
    let teacher = load_weights_expecting(&c.input(TEACHER_FILE)?, &rc.vit)?.weights;
    let pretext = load_dataset(c, PRETEXT_FILE, &rc.vit)?;
    let w = pretrain(
        &rc.vit,
        &teacher,
        &pretext,
        rc.task.pretrain_steps,
        rc.task.pretrain_lr,
        rc.experiment.seed,
    )?;
    save_weights(&c.output(BACKBONE_FILE)?, &rc.vit, &w, None)?;
    Ok(())
}

fn cmd_probe(c: &Common, require_selection: bool) -> Result<()> {
    let rc = c.resolve()?;
    let exp = &rc.experiment;
    if require_selection && !(exp.strategy == Strategy::Head2Toe || (exp.strategy.queries() && exp.f < 1.0)) {
        return Err(CliError::Config(format!(
            "select needs head2toe or a query strategy with F < 1 (got {} with F = {})",
            exp.strategy, exp.f
        )));
    }
    let backbone = load_backbone(c, &rc.vit)?;
    let train = load_dataset(c, TRAIN_FILE, &rc.vit)?;
    let test = load_dataset(c, TEST_FILE, &rc.vit)?;
    let out = run_experiment(&rc.vit, &backbone, &train, &test, exp)?;
    let text = csv_text(|b| write_rows_csv(std::slice::from_ref(&out.row), None, b))?;
    write_text(&c.output(RESULTS_FILE)?, &text)?;
    if let Some(sel) = &out.selection {
        write_json(&c.output(SELECTION_FILE)?, sel)?;
    }
    save_weights(&c.output(MODEL_FILE)?, &rc.vit, &out.model.backbone, out.model.queries.as_ref())?;
    print!("{text}");
    Ok(())
}

fn parse_values<T: std::str::FromStr>(values: &[String]) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    values
        .iter()
        .map(|v| v.trim().parse::<T>().map_err(|e| CliError::Config(format!("axis value {v:?}: {e}"))))
        .collect()
}

fn cmd_sweep(c: &Common, axis: AxisName, values: &[String]) -> Result<()> {
    let rc = c.resolve()?;
    let axis = match axis {
        AxisName::DataFraction => Axis::DataFraction(parse_values(values)?),
        AxisName::T => Axis::T(parse_values(values)?),
        AxisName::F => Axis::F(parse_values(values)?),
        AxisName::Layers => Axis::Layers(parse_values(values)?),
    };
    let backbone = load_backbone(c, &rc.vit)?;
    let train = load_dataset(c, TRAIN_FILE, &rc.vit)?;
    let test = load_dataset(c, TEST_FILE, &rc.vit)?;
    let rows = sweep(&rc.vit, &backbone, &train, &test, &rc.experiment, &axis)?;
    let labels: Vec<String> = rows.iter().map(|(l, _)| l.clone()).collect();
    let rows: Vec<_> = rows.into_iter().map(|(_, r)| r).collect();
    let text = csv_text(|b| write_rows_csv(&rows, Some((axis.name(), &labels)), b))?;
    write_text(&c.output(RESULTS_FILE)?, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_profile(c: &Common) -> Result<()> {
    let rc = c.resolve()?;
    let backbone = load_backbone(c, &rc.vit)?;
    let train = load_dataset(c, TRAIN_FILE, &rc.vit)?;
    let spec = rc.experiment.model_spec(&rc.vit, train.classes).map_err(CliError::Config)?;
    let model = Model::new(&rc.vit, backbone, spec, rc.experiment.seed)?;
    let idx: Vec<usize> = (0..rc.experiment.batch_size.min(train.len())).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
    let report = profile_step(&model, Input::Images(&train.image_refs(&idx)), &labels)?;
    write_json(&c.output(MEMORY_FILE)?, &report)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?);
    Ok(())
}

fn cmd_report(c: &Common, layer_importance: bool) -> Result<()> {
    if !layer_importance {
        return Err(CliError::Config("report needs --layer-importance".into()));
    }
    let path = c.input(SELECTION_FILE)?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let sel: SelectionReport =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let li = sel.layer_importance()?;
    write_json(&c.output(LAYER_IMPORTANCE_FILE)?, &li)?;
    println!("{}", serde_json::to_string_pretty(&li).map_err(|e| CliError::Data(e.to_string()))?);
    Ok(())
}

/// Caps the global thread pool when `VQTLAB_THREADS` is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("VQTLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("VQTLAB_THREADS = {v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenTask(c) => cmd_gen_task(c),
        Command::Pretrain(c) => cmd_pretrain(c),
        Command::Probe(c) => cmd_probe(c, false),
        Command::Select(c) => cmd_probe(c, true),
        Command::Sweep { common, axis, values } => cmd_sweep(common, *axis, values),
        Command::Profile(c) => cmd_profile(c),
        Command::Report {
            common,
            layer_importance,
        } => cmd_report(common, *layer_importance),
    }
}
