//! Experiment configuration: a sectioned TOML file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mflab::data::{ClassProbability, DataModel, InputLaw, LabelModel, MixtureComponent, NoiseLaw, Target};
use mflab::diagnostics::Thresholds;
use mflab::field::{probe_grid, read_grid_csv, ActivationSpec};
use mflab::flow::{check_compatibility, BatchMode, FlowConfig, Freeze, FrozenProfile, Integrator};
use mflab::loss::{LossKind, LossModel};
use mflab::params::Ensemble;
use serde::Deserialize;

/// A configuration problem, anchored to a line of the file when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.path, l, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub data: DataSection,
    pub loss: LossSection,
    pub init: InitSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub admissible: AdmissibleSection,
    #[serde(default)]
    pub sard: SardSection,
    #[serde(default)]
    pub output: OutputSection,
    /// `"section.key" = [values...]`; one run per element of the product.
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    UniformSphere,
    UniformBall,
    Gaussian,
    Mixture,
    Empirical,
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Binary,
    Regression,
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityKind {
    Constant,
    Halfspace,
    Logistic,
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Zero,
    Linear,
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Gaussian,
    Laplace,
    Uniform,
    TwoPoint,
}

#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub mean: Vec<f64>,
    pub scale: f64,
    pub weight: f64,
}

#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub input: InputKind,
    #[serde(default = "one")]
    pub radius: f64,
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    pub labels: LabelKind,
    pub class_probability: Option<ProbabilityKind>,
    pub p: Option<f64>,
    pub normal: Option<Vec<f64>>,
    #[serde(default)]
    pub offset: f64,
    pub positive: Option<f64>,
    pub negative: Option<f64>,
    pub logistic_w: Option<Vec<f64>>,
    #[serde(default)]
    pub logistic_b: f64,
    pub target: Option<TargetKind>,
    pub target_w: Option<Vec<f64>>,
    #[serde(default)]
    pub target_b: f64,
    #[serde(default = "no_noise")]
    pub noise: NoiseKind,
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Reject empirical input laws outright.
    #[serde(default)]
    pub strict: bool,
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Huber,
    PseudoHuber,
    Softplus,
    Power,
}

#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossName,
    pub p: Option<f64>,
    pub clip: Option<f64>,
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InitLaw {
    Omni,
    File,
}

#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub m: usize,
    pub d: usize,
    #[serde(default = "omni")]
    pub law: InitLaw,
    #[serde(default)]
    pub seed: u64,
    /// Ensemble CSV for `law = "file"`, relative to the config file.
    pub path: Option<PathBuf>,
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorName {
    Euler,
    Rk4,
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BatchModeName {
    Fresh,
    Pool,
}

#[derive(Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FreezeName {
    Snapshot,
    Constant,
}

#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(rename = "T", default = "one")]
    pub horizon: f64,
    #[serde(default = "rk4")]
    pub integrator: IntegratorName,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "fresh")]
    pub batch_mode: BatchModeName,
    pub pool_size: Option<usize>,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    pub freeze_field: Option<FreezeName>,
    #[serde(default)]
    pub freeze_at: f64,
    pub freeze_residual: Option<f64>,
    #[serde(default)]
    pub leak: f64,
    #[serde(default)]
    pub cutoff: bool,
    #[serde(default = "default_cone_tol")]
    pub cone_tol: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        toml::from_str("").expect("flow defaults")
    }
}

#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default)]
    pub grid_seed: u64,
    /// Headerless CSV of unit directions, relative to the config file.
    pub grid_file: Option<PathBuf>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        toml::from_str("").expect("probe defaults")
    }
}

#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default = "default_mbr_samples")]
    pub mbr_samples: usize,
    /// Size of an independent batch for the final risk; 0 uses the last
    /// recorded batch risk.
    #[serde(default)]
    pub eval_samples: usize,
    #[serde(default = "default_gap_sigmas")]
    pub gap_sigmas: f64,
    #[serde(default = "default_trend_fraction")]
    pub trend_fraction: f64,
    #[serde(default = "default_moment_sigmas")]
    pub moment_sigmas: f64,
    #[serde(default = "default_stall_slope")]
    pub stall_slope: f64,
}

impl Default for ReportSection {
    fn default() -> Self {
        toml::from_str("").expect("report defaults")
    }
}

#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct AdmissibleSection {
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_adm_samples")]
    pub samples: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

impl Default for AdmissibleSection {
    fn default() -> Self {
        toml::from_str("").expect("admissible defaults")
    }
}

#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct SardSection {
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_a_min")]
    pub a_min: f64,
    #[serde(default = "default_kink_tol")]
    pub kink_tol: f64,
    #[serde(default = "default_batch")]
    pub samples: usize,
    /// Ensemble to probe instead of the initial one, relative to the config file.
    pub ensemble: Option<PathBuf>,
}

impl Default for SardSection {
    fn default() -> Self {
        toml::from_str("").expect("sard defaults")
    }
}

#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        toml::from_str("").expect("output defaults")
    }
}

fn one() -> f64 {
    1.0
}
fn no_noise() -> NoiseKind {
    NoiseKind::None
}
fn omni() -> InitLaw {
    InitLaw::Omni
}
fn rk4() -> IntegratorName {
    IntegratorName::Rk4
}
fn fresh() -> BatchModeName {
    BatchModeName::Fresh
}
fn default_dt() -> f64 {
    1e-2
}
fn default_batch() -> usize {
    1024
}
fn default_record_every() -> usize {
    10
}
fn default_cone_tol() -> f64 {
    1e-9
}
fn default_grid_size() -> usize {
    512
}
fn default_mbr_samples() -> usize {
    10_000
}
fn default_gap_sigmas() -> f64 {
    Thresholds::default().gap_sigmas
}
fn default_moment_sigmas() -> f64 {
    Thresholds::default().moment_sigmas
}
fn default_trend_fraction() -> f64 {
    Thresholds::default().trend_fraction
}
fn default_stall_slope() -> f64 {
    Thresholds::default().stall_slope
}
fn default_pairs() -> usize {
    200
}
fn default_adm_samples() -> usize {
    20_000
}
fn default_delta() -> f64 {
    0.1
}
fn default_bins() -> usize {
    20
}
fn default_a_min() -> f64 {
    1e-3
}
fn default_kink_tol() -> f64 {
    1e-8
}
fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

/// A validated experiment, ready to run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub model: DataModel,
    pub loss: LossModel,
    pub ensemble: Ensemble,
    pub flow: FlowConfig,
    pub grid: Vec<Vec<f64>>,
    pub thresholds: Thresholds,
    pub mbr_samples: usize,
    pub eval_samples: usize,
    pub admissible: AdmissibleSection,
    pub sard: SardSection,
    pub sard_ensemble: Option<Ensemble>,
    pub out_dir: PathBuf,
}

/// Source text plus its parsed form.
#[derive(Clone, Debug)]
pub struct ConfigFile {
    pub path: PathBuf,
    pub text: String,
    pub raw: RawConfig,
}

/// Sweep labels `(key, value)` and the configuration they produce.
pub type SweepCell = (Vec<(String, String)>, ConfigFile);

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.display().to_string(),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(path, text)
    }

    pub fn parse(path: &Path, text: String) -> Result<Self, ConfigError> {
        let raw = toml::from_str::<RawConfig>(&text).map_err(|e| ConfigError {
            path: path.display().to_string(),
            line: e.span().map(|s| line_of_offset(&text, s.start)),
            message: e.message().to_string(),
        })?;
        Ok(Self { path: path.to_path_buf(), text, raw })
    }

    fn err(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            path: self.path.display().to_string(),
            line: locate(&self.text, section, key).or_else(|| locate_section(&self.text, section)),
            message: message.into(),
        }
    }

    fn base_dir(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    /// Replaces the init and data seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.raw.init.seed = seed;
        self.raw.data.seed = seed;
    }

    /// One configuration per cell of the sweep product, in row-major order
    /// over the sorted sweep keys, each paired with its `(key, value)` labels.
    pub fn sweep_cells(&self) -> Result<Vec<SweepCell>, ConfigError> {
        let keys: Vec<&String> = self.raw.sweep.keys().collect();
        for k in &keys {
            if self.raw.sweep[*k].is_empty() {
                return Err(self.err("sweep", k, format!("sweep over {k} lists no values")));
            }
        }
        let mut table: toml::Table = toml::from_str(&self.text).expect("parsed once already");
        table.remove("sweep");
        let mut cells = Vec::new();
        let sizes: Vec<usize> = keys.iter().map(|k| self.raw.sweep[*k].len()).collect();
        let total: usize = sizes.iter().product();
        for cell in 0..total {
            let mut rest = cell;
            let mut idx = vec![0; keys.len()];
            for i in (0..keys.len()).rev() {
                idx[i] = rest % sizes[i];
                rest /= sizes[i];
            }
            let mut t = table.clone();
            let mut labels = Vec::new();
            for (i, k) in keys.iter().enumerate() {
                let (section, key) =
                    k.split_once('.').ok_or_else(|| self.err("sweep", k, format!("sweep key {k:?} must look like \"section.key\"")))?;
                let value = self.raw.sweep[*k][idx[i]].clone();
                labels.push(((*k).clone(), value_label(&value)));
                let entry = t.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                match entry {
                    toml::Value::Table(s) => {
                        s.insert(key.to_string(), value);
                    }
                    _ => return Err(self.err("sweep", k, format!("{section} is not a section"))),
                }
            }
            let raw: RawConfig = toml::Value::Table(t)
                .try_into()
                .map_err(|e: toml::de::Error| self.err("sweep", keys[0], format!("sweep cell {cell}: {}", e.message())))?;
            cells.push((labels, ConfigFile { path: self.path.clone(), text: self.text.clone(), raw }));
        }
        Ok(cells)
    }

    /// Builds and cross-checks every component.
    pub fn build(&self) -> Result<Experiment, ConfigError> {
        let r = &self.raw;
        let d = r.init.d;
        if d == 0 {
            return Err(self.err("init", "d", "d must be >= 1"));
        }
        if r.init.m == 0 {
            return Err(self.err("init", "m", "m must be >= 1"));
        }
        let model = self.build_data(d)?;
        let loss = self.build_loss()?;
        check_compatibility(&model, &loss).map_err(|e| self.err("loss", "kind", e.to_string()))?;
        let activation = ActivationSpec::new(r.flow.leak, r.flow.cutoff).map_err(|e| self.err("flow", "leak", e.to_string()))?;
        let ensemble = match r.init.law {
            InitLaw::Omni => Ensemble::init_omni(r.init.m, d, r.init.seed).map_err(|e| self.err("init", "m", e.to_string()))?,
            InitLaw::File => {
                let path = r.init.path.as_ref().ok_or_else(|| self.err("init", "law", "law = \"file\" needs path"))?;
                let e = self.read_ensemble(path, r.init.seed).map_err(|m| self.err("init", "path", m))?;
                if e.dim() != d {
                    return Err(self.err("init", "d", format!("ensemble file has d = {}, config says {d}", e.dim())));
                }
                e
            }
        };
        let batch_mode = match r.flow.batch_mode {
            BatchModeName::Fresh => BatchMode::Fresh,
            BatchModeName::Pool => BatchMode::FixedPool(r.flow.pool_size.unwrap_or(r.flow.batch_size)),
        };
        let freeze = match r.flow.freeze_field {
            None => None,
            Some(FreezeName::Snapshot) => Some(Freeze { at: r.flow.freeze_at, profile: FrozenProfile::Snapshot }),
            Some(FreezeName::Constant) => {
                let c = r
                    .flow
                    .freeze_residual
                    .ok_or_else(|| self.err("flow", "freeze_field", "freeze_field = \"constant\" needs freeze_residual"))?;
                Some(Freeze { at: r.flow.freeze_at, profile: FrozenProfile::Constant(c) })
            }
        };
        let flow = FlowConfig {
            dt: r.flow.dt,
            horizon: r.flow.horizon,
            integrator: match r.flow.integrator {
                IntegratorName::Euler => Integrator::Euler,
                IntegratorName::Rk4 => Integrator::Rk4,
            },
            batch_size: r.flow.batch_size,
            batch_mode,
            record_every: r.flow.record_every,
            freeze,
            activation,
            perturb: 0.0,
            cone_tol: r.flow.cone_tol,
        };
        flow.validate().map_err(|e| {
            let msg = e.to_string();
            let key = if msg.contains("need dt < T") {
                "T"
            } else if msg.contains("batch_size") {
                "batch_size"
            } else if msg.contains("pool") {
                "pool_size"
            } else if msg.contains("record_every") {
                "record_every"
            } else if msg.contains("freeze") {
                "freeze_at"
            } else {
                "dt"
            };
            self.err("flow", key, msg)
        })?;
        let grid = match &r.probe.grid_file {
            Some(p) => {
                let file = fs::File::open(self.base_dir().join(p)).map_err(|e| self.err("probe", "grid_file", e.to_string()))?;
                read_grid_csv(file, d).map_err(|e| self.err("probe", "grid_file", e.to_string()))?
            }
            None => {
                if r.probe.grid_size == 0 {
                    return Err(self.err("probe", "grid_size", "grid_size must be >= 1"));
                }
                probe_grid(d, r.probe.grid_size, r.probe.grid_seed)
            }
        };
        let thresholds = Thresholds {
            gap_sigmas: r.report.gap_sigmas,
            trend_fraction: r.report.trend_fraction,
            moment_sigmas: r.report.moment_sigmas,
            stall_slope: r.report.stall_slope,
        };
        if !(thresholds.trend_fraction > 0.0 && thresholds.trend_fraction <= 1.0) {
            return Err(self.err("report", "trend_fraction", "trend_fraction must lie in (0, 1]"));
        }
        if r.report.mbr_samples == 0 {
            return Err(self.err("report", "mbr_samples", "mbr_samples must be >= 1"));
        }
        let sard_ensemble = match &r.sard.ensemble {
            Some(p) => Some(self.read_ensemble(p, r.init.seed).map_err(|m| self.err("sard", "ensemble", m))?),
            None => None,
        };
        Ok(Experiment {
            model,
            loss,
            ensemble,
            flow,
            grid,
            thresholds,
            mbr_samples: r.report.mbr_samples,
            eval_samples: r.report.eval_samples,
            admissible: r.admissible.clone(),
            sard: r.sard.clone(),
            sard_ensemble,
            out_dir: r.output.directory.clone(),
        })
    }

    fn read_ensemble(&self, path: &Path, seed: u64) -> Result<Ensemble, String> {
        let file = fs::File::open(self.base_dir().join(path)).map_err(|e| format!("{}: {e}", path.display()))?;
        Ensemble::read_csv(file, seed).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn build_data(&self, d: usize) -> Result<DataModel, ConfigError> {
        let s = &self.raw.data;
        let dim_check = |key: &str, v: &[f64]| -> Result<(), ConfigError> {
            if v.len() != d {
                return Err(self.err("data", key, format!("{key} has {} entries, expected d = {d}", v.len())));
            }
            Ok(())
        };
        let input = match s.input {
            InputKind::UniformSphere => InputLaw::UniformSphere { radius: s.radius },
            InputKind::UniformBall => InputLaw::UniformBall { radius: s.radius },
            InputKind::Gaussian => InputLaw::standard_gaussian(d),
            InputKind::Mixture => {
                for c in &s.components {
                    dim_check("components", &c.mean)?;
                }
                InputLaw::GaussianMixture(
                    s.components.iter().map(|c| MixtureComponent { mean: c.mean.clone(), scale: c.scale, weight: c.weight }).collect(),
                )
            }
            InputKind::Empirical => {
                for p in &s.points {
                    dim_check("points", p)?;
                }
                InputLaw::Empirical(s.points.clone())
            }
        };
        let labels = match s.labels {
            LabelKind::Binary => {
                let kind = s.class_probability.ok_or_else(|| self.err("data", "labels", "binary labels need class_probability"))?;
                let need = |key: &str, v: Option<f64>| v.ok_or_else(|| self.err("data", "class_probability", format!("missing {key}")));
                LabelModel::Binary(match kind {
                    ProbabilityKind::Constant => ClassProbability::Constant(need("p", s.p)?),
                    ProbabilityKind::Halfspace => {
                        let normal = s.normal.clone().ok_or_else(|| self.err("data", "class_probability", "missing normal"))?;
                        dim_check("normal", &normal)?;
                        ClassProbability::HalfSpace {
                            normal,
                            offset: s.offset,
                            positive: need("positive", s.positive)?,
                            negative: need("negative", s.negative)?,
                        }
                    }
                    ProbabilityKind::Logistic => {
                        let w = s.logistic_w.clone().ok_or_else(|| self.err("data", "class_probability", "missing logistic_w"))?;
                        dim_check("logistic_w", &w)?;
                        ClassProbability::Logistic { w, b: s.logistic_b }
                    }
                })
            }
            LabelKind::Regression => {
                let target = match s.target.ok_or_else(|| self.err("data", "labels", "regression labels need target"))? {
                    TargetKind::Zero => Target::Zero,
                    TargetKind::Linear => {
                        let w = s.target_w.clone().ok_or_else(|| self.err("data", "target", "missing target_w"))?;
                        dim_check("target_w", &w)?;
                        Target::Linear { w, b: s.target_b }
                    }
                };
                let sc = s.noise_scale;
                let noise = match s.noise {
                    NoiseKind::None => NoiseLaw::None,
                    NoiseKind::Gaussian => NoiseLaw::Gaussian(sc),
                    NoiseKind::Laplace => NoiseLaw::Laplace(sc),
                    NoiseKind::Uniform => NoiseLaw::Uniform(sc),
                    NoiseKind::TwoPoint => NoiseLaw::TwoPoint(sc),
                };
                if s.noise != NoiseKind::None && !(sc > 0.0) {
                    return Err(self.err("data", "noise_scale", "noise_scale must be > 0"));
                }
                LabelModel::Regression { target, noise }
            }
        };
        let model = DataModel::new(input, labels, d, s.seed).map_err(|e| self.err("data", "input", e.to_string()))?;
        Ok(if s.strict { model.strict() } else { model })
    }

    fn build_loss(&self) -> Result<LossModel, ConfigError> {
        let s = &self.raw.loss;
        let kind = match s.kind {
            LossName::Huber => LossKind::Huber,
            LossName::PseudoHuber => LossKind::PseudoHuber,
            LossName::Softplus => LossKind::Softplus,
            LossName::Power => LossKind::Power(s.p.ok_or_else(|| self.err("loss", "kind", "power loss needs p"))?),
        };
        let lm = LossModel::new(kind).map_err(|e| self.err("loss", "p", e.to_string()))?;
        match s.clip {
            Some(c) => lm.with_clip(c).map_err(|e| self.err("loss", "clip", e.to_string())),
            None => Ok(lm),
        }
    }
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line of the header `[section]`.
fn locate_section(text: &str, section: &str) -> Option<usize> {
    text.lines().position(|l| header(l) == Some(section)).map(|i| i + 1)
}

/// 1-based line of `key = ...` inside `[section]`.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = None;
    for (i, line) in text.lines().enumerate() {
        if let Some(h) = header(line) {
            current = Some(h);
            continue;
        }
        if current != Some(section) {
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            if k.trim().trim_matches('"') == key {
                return Some(i + 1);
            }
        }
    }
    None
}

fn header(line: &str) -> Option<&str> {
    let t = line.trim();
    t.strip_prefix('[').and_then(|r| r.strip_suffix(']')).map(str::trim)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[data]
input = "uniform_sphere"
labels = "binary"
class_probability = "constant"
p = 0.5

[loss]
kind = "softplus"

[init]
m = 64
d = 2
seed = 3

[flow]
dt = 0.05
T = 0.5
batch_size = 128
"#;

    fn parse(text: &str) -> Result<ConfigFile, ConfigError> {
        ConfigFile::parse(Path::new("exp.toml"), text.to_string())
    }

    #[test]
    fn base_config_builds() {
        let c = parse(BASE).unwrap();
        let e = c.build().unwrap();
        assert_eq!(e.ensemble.len(), 64);
        assert_eq!(e.flow.steps(), 10);
        assert_eq!(e.grid.len(), 512);
    }

    #[test]
    fn unknown_enum_value_is_line_anchored() {
        let text = BASE.replace("\"softplus\"", "\"hinge\"");
        let err = parse(&text).unwrap_err();
        assert_eq!(err.line, Some(9));
    }

    #[test]
    fn power_with_gaussian_data_is_rejected_at_the_loss_line() {
        let text = BASE.replace("\"uniform_sphere\"", "\"gaussian\"").replace("kind = \"softplus\"", "kind = \"power\"\np = 2.0");
        let err = parse(&text).unwrap().build().unwrap_err();
        assert_eq!(err.line, Some(9));
        assert!(err.message.contains("compact support"), "{}", err.message);
    }

    #[test]
    fn flow_errors_point_at_the_key() {
        let err = parse(&BASE.replace("dt = 0.05", "dt = -1.0")).unwrap().build().unwrap_err();
        assert_eq!(err.line, Some(17));
        let err = parse(&BASE.replace("batch_size = 128", "batch_size = 0")).unwrap().build().unwrap_err();
        assert_eq!(err.line, Some(19));
    }

    #[test]
    fn sweep_cells_are_row_major() {
        let text = format!("{BASE}\n[sweep]\n\"init.seed\" = [1, 2]\n\"flow.dt\" = [0.05, 0.1]\n");
        let c = parse(&text).unwrap();
        let cells = c.sweep_cells().unwrap();
        assert_eq!(cells.len(), 4);
        let labels: Vec<String> = cells.iter().map(|(l, _)| format!("{}={}|{}={}", l[0].0, l[0].1, l[1].0, l[1].1)).collect();
        assert_eq!(labels, ["flow.dt=0.05|init.seed=1", "flow.dt=0.05|init.seed=2", "flow.dt=0.1|init.seed=1", "flow.dt=0.1|init.seed=2"]);
        assert_eq!(cells[3].1.raw.init.seed, 2);
        assert_eq!(cells[3].1.raw.flow.dt, 0.1);
    }

    #[test]
    fn seed_override_touches_init_and_data() {
        let mut c = parse(BASE).unwrap();
        c.override_seed(99);
        assert_eq!((c.raw.init.seed, c.raw.data.seed), (99, 99));
    }
}
