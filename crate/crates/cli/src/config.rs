use anyhow::{anyhow, bail, Context};
use m2m::controller::ControllerConfig;
use m2m::datagen::{DatasetKind, NsConfig, PoissonConfig};
use m2m::experts::ExpertSpec;
use m2m::router::Strategy;
use m2m::training::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Everything one invocation needs, loaded from a single TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialisation.
    pub seed: u64,
    /// Where `train` and `bench` write their artifacts.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub poisson: PoissonConfig,
    pub ns: NsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub controller: ControllerConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            poisson: PoissonConfig::default(),
            ns: NsConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            controller: ControllerConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Dataset directory holding `train/` and `test/` splits.
    pub path: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Poisson,
            path: PathBuf::from("data/poisson"),
        }
    }
}

/// One mixture-of-experts row of a benchmark sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub strategy: Strategy,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Single-expert baselines trained at scale 1, one per entry.
    pub fno_modes: Vec<usize>,
    pub variants: Vec<Variant>,
    pub warmups: usize,
    pub repeats: usize,
    /// Samples per timed forward pass.
    pub batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            fno_modes: vec![16, 32, 64, 128],
            variants: vec![
                Variant {
                    name: "m2m_top1".into(),
                    strategy: Strategy::TopK,
                    k: 1,
                },
                Variant {
                    name: "m2m_top2".into(),
                    strategy: Strategy::TopK,
                    k: 2,
                },
                Variant {
                    name: "m2m_dense".into(),
                    strategy: Strategy::Dense,
                    k: 2,
                },
            ],
            warmups: 3,
            repeats: 20,
            batch: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.experts.len())?;
        self.controller.validate()?;
        match self.data.kind {
            DatasetKind::Poisson => self.poisson.validate()?,
            DatasetKind::Ns => self.ns.validate()?,
            DatasetKind::Cylinder => {}
        }
        Ok(())
    }

    /// Checks the sweep settings used only by `bench`.
    pub fn validate_bench(&self) -> anyhow::Result<()> {
        if self.bench.batch == 0 {
            bail!("bench.batch must be at least 1");
        }
        for v in &self.bench.variants {
            if v.k == 0 || v.k > self.model.experts.len() {
                bail!(
                    "bench variant {} uses k = {} with {} experts",
                    v.name,
                    v.k,
                    self.model.experts.len()
                );
            }
        }
        for &m in &self.bench.fno_modes {
            ExpertSpec {
                modes: m,
                ..self.baseline_template()
            }
            .validate()?;
        }
        Ok(())
    }

    /// Expert architecture shared by the single-expert baselines.
    pub fn baseline_template(&self) -> ExpertSpec {
        self.model
            .experts
            .first()
            .cloned()
            .unwrap_or_else(|| ExpertSpec::new(16, 1, 1))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    #[cfg(test)]
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) and applies `key.path=value` overrides before validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let source = path.map_or("defaults".into(), |p| p.display().to_string());
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .with_context(|| format!("invalid configuration in {source}"))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets a dotted key such as `train.epochs=5`; the value is parsed as TOML, falling back to a string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key.path=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} has an empty segment");
    }
    let value = parse_value(raw.trim());
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {p} is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use m2m::router::PriorSpec;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn customised_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.model.prior = PriorSpec::hard(vec![0.0, 1.0, 0.0, 0.0]);
        cfg.controller.enabled = false;
        cfg.ns.viscosity = 1e-4;
        cfg.poisson.mu_std = 0.0;
        cfg.train.learning_rate = 3.3e-4;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nepoch = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("epoch"));
    }

    #[test]
    fn overrides_set_nested_values() {
        let mut doc = toml::Table::new();
        apply_override(&mut doc, "train.epochs=7").unwrap();
        apply_override(&mut doc, "model.router.pooling=cls").unwrap();
        apply_override(&mut doc, "model.prior.weights=[0,1,0,0]").unwrap();
        let cfg: RunConfig = toml::Value::Table(doc).try_into().unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.router.pooling, m2m::router::Pooling::Cls);
        assert_eq!(cfg.model.prior.weights, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn malformed_override_is_an_error() {
        let mut doc = toml::Table::new();
        assert!(apply_override(&mut doc, "train.epochs").is_err());
        assert!(apply_override(&mut doc, "train..epochs=1").is_err());
    }
}
