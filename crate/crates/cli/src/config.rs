//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use msdscope::estimator::SubsampleSpec;
use msdscope::rheology::SmoothMethod;
use msdscope::simkit::DynamicsModel;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: `{field}` {message}")]
    Field { field: String, message: String },
}

impl ConfigError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Field { field: field.to_string(), message: message.into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
    pub out: PathBuf,
    pub simulate: SimulateConfig,
    pub render: RenderConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<DynamicsModel>,
    pub analyze: AnalyzeConfig,
    pub subsample: SubsampleSpec,
    pub moduli: ModuliConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            out: PathBuf::from("out"),
            simulate: SimulateConfig::default(),
            render: RenderConfig::default(),
            model: None,
            analyze: AnalyzeConfig::default(),
            subsample: SubsampleSpec::default(),
            moduli: ModuliConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Square frame side in pixels.
    pub size: usize,
    pub frames: usize,
    pub particles: usize,
    pub dt_min: f64,
    pub px_size: f64,
    pub trajectories: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            preset: None,
            size: 256,
            frames: 200,
            particles: 100,
            dt_min: 1.0,
            px_size: 1.0,
            trajectories: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub y_max: f64,
    pub sigma_p: f64,
    pub noise_b: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { y_max: 255.0, sigma_p: 2.0, noise_b: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    None,
    DdmUq,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub uq: bool,
    /// Effective particle count for the Fisher scaling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub particles: Option<f64>,
    pub baseline: Baseline,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig { input: None, uq: false, particles: None, baseline: Baseline::None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Smooth {
    None,
    Spline,
    Poly4,
}

impl Smooth {
    pub fn method(self) -> Option<SmoothMethod> {
        match self {
            Smooth::None => None,
            Smooth::Spline => Some(SmoothMethod::Spline),
            Smooth::Poly4 => Some(SmoothMethod::Poly4),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuliConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Kelvin.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius_nm: Option<f64>,
    pub draws: usize,
    pub smooth: Smooth,
    /// Matérn range over log lag for the Monte Carlo draws.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_range: Option<f64>,
}

impl Default for ModuliConfig {
    fn default() -> Self {
        ModuliConfig { input: None, temperature: None, radius_nm: None, draws: 1000, smooth: Smooth::None, mc_range: None }
    }
}

pub const PRESETS: [&str; 6] = ["slow-bm", "fast-bm", "sub-fbm", "super-fbm", "ou", "ou-fbm"];

pub fn preset(name: &str) -> Option<DynamicsModel> {
    Some(match name {
        "slow-bm" => DynamicsModel::Bm { sigma2: 0.02 },
        "fast-bm" => DynamicsModel::Bm { sigma2: 2.0 },
        "sub-fbm" => DynamicsModel::Fbm { sigma2: 8.0, alpha: 0.6 },
        "super-fbm" => DynamicsModel::Fbm { sigma2: 0.5, alpha: 1.2 },
        "ou" => DynamicsModel::Ou { sigma2: 64.0, rho: 0.95 },
        "ou-fbm" => DynamicsModel::OuFbm { sigma2_ou: 9.0, rho: 0.85, sigma2_fbm: 2.0, alpha: 0.45 },
        _ => return None,
    })
}

fn required_model_fields(kind: &str) -> Option<&'static [&'static str]> {
    Some(match kind {
        "bm" => &["sigma2"],
        "ou" => &["sigma2", "rho"],
        "fbm" => &["sigma2", "alpha"],
        "ou_fbm" => &["sigma2_ou", "rho", "sigma2_fbm", "alpha"],
        _ => return None,
    })
}

/// Checks the `[model]` table by hand so errors name the missing key.
fn parse_model(table: &toml::Table) -> Result<DynamicsModel, ConfigError> {
    let kind = match table.get("kind") {
        Some(toml::Value::String(s)) => s.as_str(),
        Some(_) => return Err(ConfigError::field("model.kind", "must be a string")),
        None => return Err(ConfigError::field("model.kind", "is missing")),
    };
    let fields = required_model_fields(kind)
        .ok_or_else(|| ConfigError::field("model.kind", format!("unknown model '{kind}' (bm, ou, fbm, ou_fbm)")))?;
    for f in fields {
        match table.get(*f) {
            None => return Err(ConfigError::field(&format!("model.{f}"), "is missing")),
            Some(toml::Value::Float(_) | toml::Value::Integer(_)) => {}
            Some(_) => return Err(ConfigError::field(&format!("model.{f}"), "must be a number")),
        }
    }
    if let Some(extra) = table.keys().find(|k| *k != "kind" && !fields.contains(&k.as_str())) {
        return Err(ConfigError::field(&format!("model.{extra}"), "is not a parameter of this model"));
    }
    let mut t = table.clone();
    for f in fields {
        if let Some(toml::Value::Integer(i)) = t.get(*f) {
            let v = *i as f64;
            t.insert(f.to_string(), toml::Value::Float(v));
        }
    }
    let model: DynamicsModel = toml::Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::field("model", e.message().to_string()))?;
    model.validate().map_err(|e| ConfigError::field("model", e.to_string()))?;
    Ok(model)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let model = match table.remove("model") {
            Some(toml::Value::Table(t)) => Some(parse_model(&t)?),
            Some(_) => return Err(ConfigError::field("model", "must be a table")),
            None => None,
        };
        let mut cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.model = model;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The explicit `[model]` table wins over the preset.
    pub fn resolved_model(&self) -> Result<DynamicsModel, ConfigError> {
        if let Some(m) = self.model {
            return Ok(m);
        }
        match &self.simulate.preset {
            Some(name) => preset(name).ok_or_else(|| {
                ConfigError::field("simulate.preset", format!("unknown preset '{name}' ({})", PRESETS.join(", ")))
            }),
            None => Err(ConfigError::field("model", "is missing; give a [model] table or a preset")),
        }
    }

    pub fn material_radius_m(&self) -> Result<(f64, f64), ConfigError> {
        let t = self.moduli.temperature.ok_or_else(|| ConfigError::field("moduli.temperature", "is missing"))?;
        let r = self.moduli.radius_nm.ok_or_else(|| ConfigError::field("moduli.radius_nm", "is missing"))?;
        if !(t > 0.0) {
            return Err(ConfigError::field("moduli.temperature", "must be positive"));
        }
        if !(r > 0.0) {
            return Err(ConfigError::field("moduli.radius_nm", "must be positive"));
        }
        Ok((t, r * 1e-9))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.subsample, SubsampleSpec::default());
    }

    #[test]
    fn model_table_parses() {
        let cfg = RunConfig::from_toml("seed = 3\n[model]\nkind = \"ou\"\nsigma2 = 64\nrho = 0.95\n").unwrap();
        assert_eq!(cfg.model, Some(DynamicsModel::Ou { sigma2: 64.0, rho: 0.95 }));
        assert_eq!(cfg.seed, 3);
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again.model, cfg.model);
    }

    #[test]
    fn missing_sigma2_names_the_field() {
        let err = RunConfig::from_toml("[model]\nkind = \"bm\"\n").unwrap_err();
        assert!(err.to_string().contains("model.sigma2"), "{err}");
        let err = RunConfig::from_toml("[model]\nkind = \"bm\"\nsigma2 = 1\nrho = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("model.rho"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[analyze]\nuqq = true\n").is_err());
        assert!(RunConfig::from_toml("[subsample]\nlag_count = 8\n").unwrap().subsample.lag_count == 8);
    }

    #[test]
    fn presets_resolve() {
        for p in PRESETS {
            let mut cfg = RunConfig::default();
            cfg.simulate.preset = Some(p.to_string());
            cfg.resolved_model().unwrap().validate().unwrap();
        }
        let mut cfg = RunConfig::default();
        cfg.simulate.preset = Some("nope".into());
        assert!(cfg.resolved_model().is_err());
    }
}
