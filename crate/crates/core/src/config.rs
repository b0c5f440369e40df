//! Versioned JSON experiment configuration with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dynamics::{MonitorCeilings, SolverConfig};
use crate::error::{Error, Result};
use crate::ldp::{OptimizerConfig, Perturbation, RateProblem, Target};
use crate::noise::{ConditionConstants, CovarianceSpec, DiffusionFamily, DiffusionSpec, RkhsVector, TimeModulation};
use crate::spectral::{ModelParams, ShellModel, ShellState, C64};

pub const SCHEMA_VERSION: u32 = 1;

/// Per-shell real profile: explicit values or `scale * k_n^{-exponent}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Explicit(Vec<f64>),
    PowerLaw { scale: f64, exponent: f64 },
}

impl Profile {
    pub fn uniform(value: f64) -> Self {
        Profile::PowerLaw {
            scale: value,
            exponent: 0.0,
        }
    }

    pub fn resolve(&self, model: &ShellModel, pointer: &str) -> Result<Vec<f64>> {
        match self {
            Profile::Explicit(v) => {
                if v.len() != model.m() {
                    return Err(Error::config(
                        pointer,
                        format!("expected {} values, got {}", model.m(), v.len()),
                    ));
                }
                Ok(v.clone())
            }
            Profile::PowerLaw { scale, exponent } => {
                Ok((1..=model.m()).map(|n| scale * model.k(n).powf(-exponent)).collect())
            }
        }
    }
}

/// Initial condition: explicit shells or `scale * k_n^{-exponent} e^{i phase n}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateProfile {
    Explicit(ShellState),
    PowerLaw {
        scale: f64,
        exponent: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl StateProfile {
    pub fn resolve(&self, model: &ShellModel, pointer: &str) -> Result<ShellState> {
        match self {
            StateProfile::Explicit(s) => {
                if s.len() != model.m() {
                    return Err(Error::config(
                        pointer,
                        format!("expected {} shells, got {}", model.m(), s.len()),
                    ));
                }
                Ok(s.clone())
            }
            StateProfile::PowerLaw { scale, exponent, phase } => Ok(ShellState::from_vec(
                (1..=model.m())
                    .map(|n| C64::from_polar(scale * model.k(n).powf(-exponent), phase * n as f64))
                    .collect(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyConfig {
    ConstantDiagonal { gains: Profile },
    LinearDiagonal { gains: Profile, slopes: Profile },
    SaturatedNemytskii { gains: Profile, scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub family: FamilyConfig,
    #[serde(default)]
    pub time: TimeModulation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConditionConstants>,
}

impl DiffusionConfig {
    pub fn constant(gains: Profile) -> Self {
        DiffusionConfig {
            family: FamilyConfig::ConstantDiagonal { gains },
            time: TimeModulation::default(),
            constants: None,
        }
    }

    pub fn resolve(&self, model: &ShellModel, pointer: &str) -> Result<DiffusionSpec> {
        let p = |f: &str| format!("{pointer}.family.{f}");
        let family = match &self.family {
            FamilyConfig::ConstantDiagonal { gains } => DiffusionFamily::ConstantDiagonal {
                gains: gains.resolve(model, &p("gains"))?,
            },
            FamilyConfig::LinearDiagonal { gains, slopes } => DiffusionFamily::LinearDiagonal {
                gains: gains.resolve(model, &p("gains"))?,
                slopes: slopes.resolve(model, &p("slopes"))?,
            },
            FamilyConfig::SaturatedNemytskii { gains, scale } => DiffusionFamily::SaturatedNemytskii {
                gains: gains.resolve(model, &p("gains"))?,
                scale: *scale,
            },
        };
        let spec = DiffusionSpec {
            family,
            time: self.time.clone(),
            constants: self.constants.clone(),
        };
        spec.validate(model.m()).map_err(|e| match e {
            Error::Config { message, .. } => Error::config(pointer, message),
            other => other,
        })?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// File name stem; defaults to the study name.
    #[serde(default)]
    pub prefix: Option<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            prefix: None,
        }
    }
}

/// Constant-in-time control `h(t) = value` on `cells` cells; zero when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub cells: usize,
    #[serde(default)]
    pub value: Option<RkhsVector>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig { cells: 1, value: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateParams {
    #[serde(default)]
    pub control: ControlConfig,
    pub ceilings: MonitorCeilings,
    #[serde(default)]
    pub control_energy_cap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitiesParams {
    pub samples: usize,
    pub truncations: Vec<usize>,
    /// Relative tolerance for antisymmetry and energy residuals.
    pub tol: f64,
    /// Relative tolerance for the enstrophy residual.
    pub enstrophy_tol: f64,
    /// Samples of the diffusion-condition check; 0 skips it.
    #[serde(default)]
    pub condition_samples: usize,
    #[serde(default)]
    pub nu_grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateParams {
    pub target: Target,
    pub cells: usize,
    pub m_cap: f64,
    #[serde(default = "quarter")]
    pub alpha: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn quarter() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McLdpParams {
    pub rate: RateParams,
    pub nu_grid: Vec<f64>,
    pub n_paths: usize,
    /// Importance-sample around the computed minimizer.
    #[serde(default)]
    pub tilted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakParams {
    #[serde(default)]
    pub control: ControlConfig,
    pub perturbation: Perturbation,
    pub nu_grid: Vec<f64>,
    pub paths: usize,
    pub m_cap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementsParams {
    pub paths: usize,
    pub n_min: u32,
    pub n_max: u32,
    #[serde(default)]
    pub control: ControlConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSetParams {
    pub m_cap: f64,
    pub n_controls: usize,
    pub cells: usize,
    pub ceiling: f64,
    #[serde(default = "quarter")]
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "kebab-case")]
pub enum StudyConfig {
    Simulate(SimulateParams),
    Skeleton(SimulateParams),
    Identities(IdentitiesParams),
    Rate(RateParams),
    McLdp(McLdpParams),
    WeakConvergence(WeakParams),
    Increments(IncrementsParams),
    Levelset(LevelSetParams),
}

impl StudyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StudyConfig::Simulate(_) => "simulate",
            StudyConfig::Skeleton(_) => "skeleton",
            StudyConfig::Identities(_) => "identities",
            StudyConfig::Rate(_) => "rate",
            StudyConfig::McLdp(_) => "mc-ldp",
            StudyConfig::WeakConvergence(_) => "weak-convergence",
            StudyConfig::Increments(_) => "increments",
            StudyConfig::Levelset(_) => "levelset",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelParams,
    pub covariance: Profile,
    pub diffusion: DiffusionConfig,
    /// `sigma_bar` of `sigma_nu = sigma + sqrt(nu) sigma_bar`; zero when absent.
    #[serde(default)]
    pub diffusion_bar: Option<DiffusionConfig>,
    pub initial: StateProfile,
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    pub study: StudyConfig,
}

/// A validated configuration with its built objects.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub model: ShellModel,
    pub covariance: CovarianceSpec,
    pub sigma: DiffusionSpec,
    pub sigma_bar: DiffusionSpec,
    pub xi: ShellState,
    /// Hex sha256 of the canonical JSON of the effective configuration,
    /// without the output directory.
    pub hash: String,
}

impl Resolved {
    pub fn rate_problem(&self, rate: &RateParams) -> RateProblem {
        RateProblem {
            model: self.config.model.clone(),
            sigma: self.sigma.clone(),
            covariance: self.covariance.clone(),
            xi: self.xi.clone(),
            horizon: self.config.solver.horizon,
            steps: self.config.solver.steps,
            cells: rate.cells,
            target: rate.target.clone(),
            m_cap: rate.m_cap,
            alpha: rate.alpha,
            cfl: self.config.solver.cfl,
        }
    }
}

/// Set `path` (dot-separated, array indices allowed) in `root` to `raw`,
/// parsed as JSON when possible and as a string otherwise.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(path, "malformed override path"));
    }
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::config(path, format!("`{part}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(path, format!("index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::config(path, format!("`{part}` does not name a field"))),
        };
    }
    Ok(())
}

/// Hex sha256 of the compact JSON of `value` (object keys are sorted).
pub fn config_hash(value: &Value) -> String {
    let text = serde_json::to_string(value).expect("JSON values always serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn read_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::config("", format!("{}: {e}", path.display())))
}

/// Deserialize with `serde_path_to_error`, apply semantic validation and
/// build the model objects.
pub fn resolve(value: Value) -> Result<Resolved> {
    let mut identity = value.clone();
    if let Some(output) = identity.get_mut("output").and_then(Value::as_object_mut) {
        output.remove("dir");
    }
    let hash = config_hash(&identity);
    let config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::config(
            if path == "." { String::new() } else { path },
            e.into_inner().to_string(),
        )
    })?;
    if config.schema_version != SCHEMA_VERSION {
        return Err(Error::config(
            "schema_version",
            format!(
                "unsupported version {}, expected {SCHEMA_VERSION}",
                config.schema_version
            ),
        ));
    }
    let model = ShellModel::new(config.model.clone())?;
    let q = config.covariance.resolve(&model, "covariance")?;
    let covariance = CovarianceSpec::new(q).map_err(|e| match e {
        Error::Config { pointer, message } => Error::config(pointer.replacen("covariance.q", "covariance", 1), message),
        other => other,
    })?;
    let sigma = config.diffusion.resolve(&model, "diffusion")?;
    let sigma_bar = match &config.diffusion_bar {
        Some(d) => d.resolve(&model, "diffusion_bar")?,
        None => DiffusionSpec::zero(model.m()),
    };
    let xi = config.initial.resolve(&model, "initial")?;
    config.solver.validate()?;
    Ok(Resolved {
        config,
        model,
        covariance,
        sigma,
        sigma_bar,
        xi,
        hash,
    })
}

/// Base configuration: a GOY model satisfying the enstrophy condition
/// (`mu = 2, a = 1, b = -5/4`) with smooth data, used by every default study.
pub fn standard_scenario(study: StudyConfig) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        seed: 20240601,
        model: ModelParams::goy_enstrophy(1.0, 2.0, 0.03125, 8).expect("valid standard model"),
        covariance: Profile::PowerLaw {
            scale: 0.1,
            exponent: 1.0,
        },
        diffusion: DiffusionConfig {
            family: FamilyConfig::LinearDiagonal {
                gains: Profile::uniform(0.5),
                slopes: Profile::uniform(0.1),
            },
            time: TimeModulation::default(),
            constants: None,
        },
        diffusion_bar: None,
        initial: StateProfile::PowerLaw {
            scale: 0.5,
            exponent: 0.5,
            phase: 0.7,
        },
        solver: SolverConfig::viscous(1.0, 1024, 0.01),
        output: OutputConfig::default(),
        study,
    }
}
