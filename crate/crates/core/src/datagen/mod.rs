//! Dataset generation and loading.
//!
//! A dataset split lives in a directory holding `arrays.bin` (see [`crate::io`],
//! 32-bit floats, arrays `inputs` `[N, T_in, H, W]` and `targets` `[N, T_out, H, W]`)
//! and `manifest.json`.

pub mod ns;
pub mod poisson;

use crate::error::{M2mError, Result};
use crate::io::{load_arrays, save_arrays, take, DType};
use ndarray::{s, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::Path;

pub use ns::{Forcing, NsSolver};
pub use poisson::{multiscale_field, poisson_solve};

pub const ARRAYS_FILE: &str = "arrays.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Poisson,
    Ns,
    Cylinder,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Poisson => "poisson",
            DatasetKind::Ns => "ns",
            DatasetKind::Cylinder => "cylinder",
        }
    }
}

/// Paired inputs and targets with per-sample metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub inputs: Array4<f64>,
    pub targets: Array4<f64>,
    pub meta: Vec<Value>,
}

impl SampleSet {
    pub fn new(inputs: Array4<f64>, targets: Array4<f64>, meta: Vec<Value>) -> Result<Self> {
        let (ni, _, hi, wi) = inputs.dim();
        let (nt, _, ht, wt) = targets.dim();
        if ni != nt || hi != ht || wi != wt {
            return Err(M2mError::ShapeMismatch(format!(
                "inputs {:?} and targets {:?} do not pair up",
                inputs.shape(),
                targets.shape()
            )));
        }
        if !meta.is_empty() && meta.len() != ni {
            return Err(M2mError::ShapeMismatch(format!("{} meta entries for {ni} samples", meta.len())));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(M2mError::NonFinite("dataset values".into()));
        }
        Ok(Self { inputs, targets, meta })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> SampleSet {
        SampleSet {
            inputs: self.inputs.slice(s![start..end, .., .., ..]).to_owned(),
            targets: self.targets.slice(s![start..end, .., .., ..]).to_owned(),
            meta: self.meta.get(start..end).map(|m| m.to_vec()).unwrap_or_default(),
        }
    }

    /// First `n` samples (or all if fewer).
    pub fn head(&self, n: usize) -> SampleSet {
        self.slice(0, n.min(self.len()))
    }

    pub fn select(&self, indices: &[usize]) -> SampleSet {
        SampleSet {
            inputs: self.inputs.select(Axis(0), indices),
            targets: self.targets.select(Axis(0), indices),
            meta: if self.meta.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.meta[i].clone()).collect()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoissonConfig {
    pub grid: usize,
    pub blocks: usize,
    pub mu_mean: f64,
    pub mu_std: f64,
    pub n_samples: usize,
    pub train_split: usize,
    pub high_freq_factor: f64,
    pub seed: u64,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self {
            grid: 128,
            blocks: 2,
            mu_mean: 1.0,
            mu_std: 0.1,
            n_samples: 1000,
            train_split: 700,
            high_freq_factor: 7.0,
            seed: 0,
        }
    }
}

impl PoissonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.grid % self.blocks != 0 || self.grid / self.blocks < 3 {
            return Err(M2mError::InvalidConfig(format!(
                "poisson grid {} must split into {} blocks of at least 3 nodes",
                self.grid, self.blocks
            )));
        }
        if !(self.mu_std >= 0.0) || !self.mu_std.is_finite() || !self.mu_mean.is_finite() {
            return Err(M2mError::InvalidConfig("mu_std must be finite and nonnegative".into()));
        }
        if self.train_split > self.n_samples {
            return Err(M2mError::InvalidConfig(format!(
                "train_split {} exceeds n_samples {}",
                self.train_split, self.n_samples
            )));
        }
        if !(self.high_freq_factor > 0.0) {
            return Err(M2mError::InvalidConfig("high_freq_factor must be positive".into()));
        }
        Ok(())
    }

    /// `μ` of sample `index`.
    pub fn draw_mu(&self, index: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(index as u64));
        Normal::new(self.mu_mean, self.mu_std)
            .expect("validated std")
            .sample(&mut rng)
    }
}

/// One Poisson sample: `([1, G, G], [1, G, G])` built with frequency factors `μ` and `7μ`.
pub fn make_multiscale_sample(mu: f64, cfg: &PoissonConfig) -> Result<(Array4<f64>, Array4<f64>)> {
    if !(mu > 0.0) {
        return Err(M2mError::InvalidConfig(format!("mu must be positive, got {mu}")));
    }
    let g = cfg.grid;
    let input = multiscale_field(g, cfg.blocks, mu)?;
    let target = multiscale_field(g, cfg.blocks, cfg.high_freq_factor * mu)?;
    Ok((
        input.into_shape((1, 1, g, g)).unwrap(),
        target.into_shape((1, 1, g, g)).unwrap(),
    ))
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: SampleSet,
    pub test: SampleSet,
}

pub fn generate_poisson_dataset(cfg: &PoissonConfig) -> Result<Splits> {
    cfg.validate()?;
    let g = cfg.grid;
    let n = cfg.n_samples;
    let mut inputs = Array4::zeros((n, 1, g, g));
    let mut targets = Array4::zeros((n, 1, g, g));
    let mut meta = Vec::with_capacity(n);
    for i in 0..n {
        let mu = cfg.draw_mu(i);
        let (x, y) = make_multiscale_sample(mu, cfg)?;
        inputs.slice_mut(s![i..i + 1, .., .., ..]).assign(&x);
        targets.slice_mut(s![i..i + 1, .., .., ..]).assign(&y);
        meta.push(json!({ "mu": mu }));
    }
    let all = SampleSet::new(inputs, targets, meta)?;
    Ok(Splits {
        train: all.slice(0, cfg.train_split),
        test: all.slice(cfg.train_split, n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NsSource {
    Load,
    #[default]
    Generate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NsConfig {
    pub grid: usize,
    pub viscosity: f64,
    pub t_in: usize,
    pub t_out: usize,
    pub source: NsSource,
    /// External benchmark data used when `source = "load"`.
    pub path: Option<String>,
    pub forcing: Forcing,
    pub dt: f64,
    /// Solver steps between recorded snapshots.
    pub record_stride: usize,
    /// Solver steps discarded before the first snapshot.
    pub burn_in: usize,
    pub ic_alpha: f64,
    pub ic_tau: f64,
    pub n_samples: usize,
    pub train_split: usize,
    pub seed: u64,
}

impl Default for NsConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            viscosity: 1e-5,
            t_in: 10,
            t_out: 10,
            source: NsSource::Generate,
            path: None,
            forcing: Forcing::DiagonalSinCos,
            dt: 5e-3,
            record_stride: 200,
            burn_in: 0,
            ic_alpha: 2.5,
            ic_tau: 7.0,
            n_samples: 20,
            train_split: 16,
            seed: 0,
        }
    }
}

impl NsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.viscosity > 0.0) {
            return Err(M2mError::InvalidConfig("NS viscosity must be positive".into()));
        }
        if !self.grid.is_power_of_two() || self.grid < 4 {
            return Err(M2mError::InvalidConfig(format!("NS grid {} must be a power of two", self.grid)));
        }
        if self.t_in == 0 || self.t_out == 0 || self.record_stride == 0 {
            return Err(M2mError::InvalidConfig("NS windows and record_stride must be positive".into()));
        }
        if self.train_split > self.n_samples {
            return Err(M2mError::InvalidConfig("NS train_split exceeds n_samples".into()));
        }
        if self.source == NsSource::Load && self.path.is_none() {
            return Err(M2mError::InvalidConfig("NS source \"load\" needs a path".into()));
        }
        Ok(())
    }
}

/// Simulates `n_samples` trajectories; each yields one `(t_in, t_out)` window pair.
pub fn ns_generate(cfg: &NsConfig, n_samples: usize, seed: u64) -> Result<SampleSet> {
    cfg.validate()?;
    let n = cfg.grid;
    let solver = NsSolver::new(n, cfg.viscosity, cfg.dt, &cfg.forcing)?;
    let frames = cfg.t_in + cfg.t_out;
    let mut inputs = Array4::zeros((n_samples, cfg.t_in, n, n));
    let mut targets = Array4::zeros((n_samples, cfg.t_out, n, n));
    let mut meta = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let sample_seed = seed.wrapping_add(s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let w0 = ns::gaussian_random_field(n, cfg.ic_alpha, cfg.ic_tau, &mut rng);
        let mut w = solver.to_spectral(&w0);
        for _ in 0..cfg.burn_in {
            w = solver.step(&w)?;
        }
        for f in 0..frames {
            for _ in 0..cfg.record_stride {
                w = solver.step(&w)?;
            }
            let phys = solver.to_physical(&w);
            if f < cfg.t_in {
                inputs.slice_mut(s![s, f, .., ..]).assign(&phys);
            } else {
                targets.slice_mut(s![s, f - cfg.t_in, .., ..]).assign(&phys);
            }
        }
        meta.push(json!({ "ic_seed": sample_seed }));
    }
    SampleSet::new(inputs, targets, meta)
}

/// Writes one split directory.
pub fn save_dataset(dir: &Path, set: &SampleSet, kind: DatasetKind, extra: Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let arrays = vec![
        ("inputs".to_string(), set.inputs.clone().into_dyn()),
        ("targets".to_string(), set.targets.clone().into_dyn()),
    ];
    save_arrays(&dir.join(ARRAYS_FILE), &arrays, DType::F32)?;
    let manifest = json!({
        "kind": kind.name(),
        "format_version": crate::io::VERSION,
        "shapes": { "inputs": set.inputs.shape(), "targets": set.targets.shape() },
        "meta": set.meta,
        "extra": extra,
    });
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn check_axis(name: &str, axis: usize, label: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(M2mError::ShapeMismatch(format!(
            "{name} axis {axis} ({label}) has size {got}, expected {expected}"
        )));
    }
    Ok(())
}

/// Validates array shapes for `kind`.
pub fn validate_shapes(set: &SampleSet, kind: DatasetKind) -> Result<()> {
    for (name, a) in [("inputs", &set.inputs), ("targets", &set.targets)] {
        let sh = a.shape();
        match kind {
            DatasetKind::Poisson => {
                check_axis(name, 1, "T", sh[1], 1)?;
                check_axis(name, 3, "W", sh[3], sh[2])?;
            }
            DatasetKind::Ns => {
                let label = if name == "inputs" { "T_in" } else { "T_out" };
                check_axis(name, 1, label, sh[1], 10)?;
            }
            DatasetKind::Cylinder => {
                check_axis(name, 2, "H", sh[2], 192)?;
                check_axis(name, 3, "W", sh[3], 112)?;
            }
        }
    }
    Ok(())
}

/// Loads and shape-checks a split directory (or a bare container file).
pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<SampleSet> {
    let file = if path.is_dir() { path.join(ARRAYS_FILE) } else { path.to_path_buf() };
    let (_, mut arrays) = load_arrays(&file)?;
    let to4 = |a: ndarray::ArrayD<f64>, name: &str| {
        a.into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| M2mError::ShapeMismatch(format!("{name} must be 4-dimensional [N, T, H, W]")))
    };
    let inputs = to4(take(&mut arrays, "inputs")?, "inputs")?;
    let targets = to4(take(&mut arrays, "targets")?, "targets")?;
    let meta = std::fs::read_to_string(file.with_file_name(MANIFEST_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|m| m.get("meta").and_then(|v| v.as_array().cloned()))
        .unwrap_or_default();
    let meta = if meta.len() == inputs.shape()[0] { meta } else { Vec::new() };
    let set = SampleSet::new(inputs, targets, meta)?;
    validate_shapes(&set, kind)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PoissonConfig {
        PoissonConfig {
            grid: 16,
            n_samples: 6,
            train_split: 4,
            seed: 3,
            ..PoissonConfig::default()
        }
    }

    #[test]
    fn split_sizes_and_meta() {
        let splits = generate_poisson_dataset(&small_cfg()).unwrap();
        assert_eq!(splits.train.len(), 4);
        assert_eq!(splits.test.len(), 2);
        let mu = splits.test.meta[1]["mu"].as_f64().unwrap();
        assert_eq!(mu, small_cfg().draw_mu(5));
        assert_eq!(PoissonConfig::default().train_split, 700);
        assert_eq!(PoissonConfig::default().n_samples - PoissonConfig::default().train_split, 300);
    }

    #[test]
    fn zero_spread_gives_identical_samples() {
        let cfg = PoissonConfig {
            mu_std: 0.0,
            ..small_cfg()
        };
        let s = generate_poisson_dataset(&cfg).unwrap().train;
        for i in 1..s.len() {
            assert_eq!(s.inputs.index_axis(Axis(0), i), s.inputs.index_axis(Axis(0), 0));
        }
    }

    #[test]
    fn mu_sample_mean_is_consistent() {
        let cfg = PoissonConfig::default();
        let n = 1000;
        let mean = (0..n).map(|i| cfg.draw_mu(i)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * 0.1 / (n as f64).sqrt());
    }

    #[test]
    fn save_load_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate_poisson_dataset(&small_cfg()).unwrap().train;
        let b = generate_poisson_dataset(&small_cfg()).unwrap().train;
        save_dataset(&dir.path().join("a"), &a, DatasetKind::Poisson, json!({})).unwrap();
        save_dataset(&dir.path().join("b"), &b, DatasetKind::Poisson, json!({})).unwrap();
        let bytes_a = std::fs::read(dir.path().join("a").join(ARRAYS_FILE)).unwrap();
        let bytes_b = std::fs::read(dir.path().join("b").join(ARRAYS_FILE)).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let back = load_dataset(&dir.path().join("a"), DatasetKind::Poisson).unwrap();
        let as_f32 = |x: &Array4<f64>| x.mapv(|v| v as f32 as f64);
        assert_eq!(back.inputs, as_f32(&a.inputs));
        assert_eq!(back.targets, as_f32(&a.targets));
        assert_eq!(back.meta, a.meta);
        let again = load_dataset(&dir.path().join("a"), DatasetKind::Poisson).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn shape_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cyl = SampleSet::new(Array4::zeros((2, 1, 192, 100)), Array4::zeros((2, 1, 192, 100)), vec![]).unwrap();
        save_dataset(dir.path(), &cyl, DatasetKind::Cylinder, json!({})).unwrap();
        assert!(matches!(load_dataset(dir.path(), DatasetKind::Cylinder), Err(M2mError::ShapeMismatch(_))));
        let ok = SampleSet::new(Array4::zeros((1, 1, 192, 112)), Array4::zeros((1, 1, 192, 112)), vec![]).unwrap();
        save_dataset(dir.path(), &ok, DatasetKind::Cylinder, json!({})).unwrap();
        assert!(load_dataset(dir.path(), DatasetKind::Cylinder).is_ok());
        let ns = SampleSet::new(Array4::zeros((1, 7, 8, 8)), Array4::zeros((1, 10, 8, 8)), vec![]).unwrap();
        save_dataset(dir.path(), &ns, DatasetKind::Ns, json!({})).unwrap();
        match load_dataset(dir.path(), DatasetKind::Ns) {
            Err(M2mError::ShapeMismatch(msg)) => assert!(msg.contains("T_in"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_dataset(&dir.path().join("missing"), DatasetKind::Ns),
            Err(M2mError::Missing(_))
        ));
    }

    #[test]
    fn ns_sample_shapes() {
        let cfg = NsConfig {
            grid: 16,
            viscosity: 1e-3,
            dt: 1e-2,
            record_stride: 2,
            ..NsConfig::default()
        };
        let set = ns_generate(&cfg, 2, 5).unwrap();
        assert_eq!(set.inputs.shape(), &[2, 10, 16, 16]);
        assert_eq!(set.targets.shape(), &[2, 10, 16, 16]);
        assert_ne!(set.inputs.index_axis(Axis(0), 0), set.inputs.index_axis(Axis(0), 1));
        validate_shapes(&set, DatasetKind::Ns).unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(PoissonConfig { grid: 10, blocks: 3, ..PoissonConfig::default() }.validate().is_err());
        assert!(PoissonConfig { mu_std: -1.0, ..PoissonConfig::default() }.validate().is_err());
        assert!(PoissonConfig { train_split: 2000, ..PoissonConfig::default() }.validate().is_err());
        assert!(NsConfig { viscosity: 0.0, ..NsConfig::default() }.validate().is_err());
        assert!(make_multiscale_sample(0.0, &small_cfg()).is_err());
    }
}
