use crate::datagen::SampleSet;
use crate::error::{M2mError, Result};
use crate::experts::{build_ensemble, expert_seed, Expert, ExpertSpec};
use crate::fields::{make_patch_batch, Field, PatchBatch, ResampleSpec};
use crate::io::{load_arrays, save_arrays, DType};
use crate::autograd::ParamSet;
use crate::router::{dispatch_with, PriorSpec, ResolvedPrior, Router, RouterConfig, RoutingOutput, Strategy};
use ndarray::{s, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_ARRAYS: &str = "checkpoint.bin";
pub const CHECKPOINT_META: &str = "checkpoint.json";
const CHECKPOINT_VERSION: u32 = 1;

/// Patches per expert call during inference.
pub(crate) const EVAL_CHUNK: usize = 16;

/// Architecture of a full multi-scale multi-expert model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub experts: Vec<ExpertSpec>,
    pub router: RouterConfig,
    pub scale: usize,
    pub resample: ResampleSpec,
    pub prior: PriorSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            experts: [32, 128, 64, 16].iter().map(|&m| ExpertSpec::new(m, 1, 1)).collect(),
            router: RouterConfig::default(),
            scale: 4,
            resample: ResampleSpec::default(),
            prior: PriorSpec::none(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(M2mError::InvalidConfig("at least one expert is required".into()));
        }
        if self.scale == 0 {
            return Err(M2mError::InvalidConfig("scale must be positive".into()));
        }
        for spec in &self.experts {
            spec.validate()?;
        }
        self.router.validate()?;
        self.resample.validate()?;
        self.prior.resolve(self.experts.len(), self.scale * self.scale, self.router.epsilon_prior)?;
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.experts.first().map_or(0, |e| e.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.experts.first().map_or(0, |e| e.out_channels)
    }

    /// Checks that `[B, T_in, H, W] -> [B, T_out, H, W]` data fits this model.
    pub fn check_data(&self, set: &SampleSet) -> Result<()> {
        let (_, ti, h, w) = set.inputs.dim();
        let to = set.targets.shape()[1];
        if ti != self.in_channels() || to != self.out_channels() {
            return Err(M2mError::ShapeMismatch(format!(
                "data maps {ti} -> {to} channels but the experts expect {} -> {}",
                self.in_channels(),
                self.out_channels()
            )));
        }
        if h % self.scale != 0 || w % self.scale != 0 {
            return Err(M2mError::IndivisibleDimensions {
                height: h,
                width: w,
                scale: self.scale,
            });
        }
        for spec in &self.experts {
            spec.check_grid(h, w)?;
        }
        Ok(())
    }
}

/// Scalar rescaling between physical and model units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_scale: f64,
    pub target_scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            input_scale: 1.0,
            target_scale: 1.0,
        }
    }
}

impl Normalization {
    /// Root-mean-square of the training inputs and targets.
    pub fn fit(set: &SampleSet) -> Self {
        let rms = |a: &Array4<f64>| {
            let v = (a.iter().map(|x| x * x).sum::<f64>() / a.len().max(1) as f64).sqrt();
            if v > 0.0 && v.is_finite() {
                v
            } else {
                1.0
            }
        };
        Self {
            input_scale: rms(&set.inputs),
            target_scale: rms(&set.targets),
        }
    }
}

/// Experts, router and the dispatch settings used at inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub experts: Vec<Expert>,
    pub router: Router,
    pub norm: Normalization,
    pub strategy: Strategy,
    pub k: usize,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let experts = build_ensemble(&config.experts, seed)?;
        let m = experts.len();
        let mut rng = ChaCha8Rng::seed_from_u64(expert_seed(seed, usize::MAX));
        let router = Router::new(config.router.clone(), m, config.in_channels(), &mut rng)?;
        Ok(Self {
            config,
            experts,
            router,
            norm: Normalization::default(),
            strategy: Strategy::TopK,
            k: m.min(2),
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    pub fn num_positions(&self) -> usize {
        self.config.scale * self.config.scale
    }

    pub fn set_dispatch(&mut self, strategy: Strategy, k: usize) -> Result<()> {
        if k == 0 || k > self.num_experts() {
            return Err(M2mError::TopKOutOfRange {
                k,
                num_experts: self.num_experts(),
            });
        }
        self.strategy = strategy;
        self.k = k;
        Ok(())
    }

    pub fn resolved_prior(&self) -> Result<ResolvedPrior> {
        self.config
            .prior
            .resolve(self.num_experts(), self.num_positions(), self.config.router.epsilon_prior)
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(Expert::count_params).sum::<usize>() + self.router.params().num_scalars()
    }

    /// Segments and upsamples inputs already in model units.
    pub fn patch_batch(&self, x: Array4<f64>) -> Result<PatchBatch> {
        make_patch_batch(&Field::new(x)?, self.config.scale, &self.config.resample)
    }

    /// Routing of inputs in model units.
    pub fn route(&self, batch: &PatchBatch) -> Result<RoutingOutput> {
        self.router.route(batch, &self.resolved_prior()?, self.k)
    }

    /// Prediction in model units; `eval_count[j]` receives the number of patches expert `j` processed.
    pub fn predict_normalized(&self, x: Array4<f64>, eval_count: Option<&mut [usize]>) -> Result<Array4<f64>> {
        let batch = self.patch_batch(x)?;
        let routing = self.route(&batch)?;
        let mut counts = vec![0; self.num_experts()];
        let field = dispatch_with(
            &batch,
            &routing,
            self.strategy,
            self.k,
            &self.config.resample,
            |j, input| {
                counts[j] += input.shape()[0];
                predict_chunked(&self.experts[j], input)
            },
        )?;
        if let Some(out) = eval_count {
            for (o, c) in out.iter_mut().zip(&counts) {
                *o += c;
            }
        }
        Ok(field.into_values())
    }

    /// One forward pass on a physical-units field `[B, T_in, H, W]`.
    pub fn predict(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (b, _, h, w) = x.dim();
        let mut out = Array4::zeros((b, self.config.out_channels(), h, w));
        let step = EVAL_CHUNK.div_ceil(self.num_positions()).max(1);
        for start in (0..b).step_by(step) {
            let end = (start + step).min(b);
            let xs = x.slice(s![start..end, .., .., ..]).mapv(|v| v / self.norm.input_scale);
            let y = self.predict_normalized(xs, None)?;
            out.slice_mut(s![start..end, .., .., ..])
                .assign(&y.mapv(|v| v * self.norm.target_scale));
        }
        Ok(out)
    }

    /// Writes the checkpoint container and its JSON description into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut arrays = Vec::new();
        for (j, e) in self.experts.iter().enumerate() {
            for (name, v) in e.params().iter() {
                arrays.push((format!("expert{j}/{name}"), v.clone()));
            }
        }
        for (name, v) in self.router.params().iter() {
            arrays.push((format!("router/{name}"), v.clone()));
        }
        save_arrays(&dir.join(CHECKPOINT_ARRAYS), &arrays, DType::F64)?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            model: self.config.clone(),
            norm: self.norm,
            strategy: self.strategy,
            k: self.k,
        };
        std::fs::write(dir.join(CHECKPOINT_META), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(CHECKPOINT_META);
        if !meta_path.exists() {
            return Err(M2mError::Missing(format!("{} not found", meta_path.display())));
        }
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(M2mError::Format(format!(
                "unsupported checkpoint version {}",
                meta.format_version
            )));
        }
        meta.model.validate()?;
        let (_, arrays) = load_arrays(&dir.join(CHECKPOINT_ARRAYS))?;
        let mut groups: Vec<ParamSet> = vec![ParamSet::new(); meta.model.experts.len() + 1];
        for (name, v) in arrays {
            let (prefix, rest) = name
                .split_once('/')
                .ok_or_else(|| M2mError::Format(format!("unexpected array name {name}")))?;
            let slot = if prefix == "router" {
                meta.model.experts.len()
            } else {
                prefix
                    .strip_prefix("expert")
                    .and_then(|i| i.parse::<usize>().ok())
                    .filter(|&i| i < meta.model.experts.len())
                    .ok_or_else(|| M2mError::Format(format!("unexpected array name {name}")))?
            };
            groups[slot].push(rest, v);
        }
        let router_params = groups.pop().expect("router slot");
        let experts = meta
            .model
            .experts
            .iter()
            .zip(groups)
            .map(|(spec, params)| Expert::from_params(spec.clone(), params))
            .collect::<Result<Vec<_>>>()?;
        let router = Router::from_params(
            meta.model.router.clone(),
            experts.len(),
            meta.model.in_channels(),
            router_params,
        )?;
        let mut model = Self {
            config: meta.model,
            experts,
            router,
            norm: meta.norm,
            strategy: meta.strategy,
            k: 1,
        };
        model.set_dispatch(meta.strategy, meta.k)?;
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    model: ModelConfig,
    norm: Normalization,
    strategy: Strategy,
    k: usize,
}

/// Inference forward pass in bounded chunks of patches.
pub(crate) fn predict_chunked(expert: &Expert, input: &Array4<f64>) -> Result<Array4<f64>> {
    let n = input.shape()[0];
    if n <= EVAL_CHUNK {
        return expert.predict(input);
    }
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        parts.push(expert.predict(&input.slice(s![start..end, .., .., ..]).to_owned())?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("consistent chunk shapes"))
}
