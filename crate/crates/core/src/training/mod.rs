//! Alternating optimisation of experts and router under a PI-scheduled objective.

mod log;
mod model;

pub use log::{EpochLog, RunLog, RUN_LOG_CSV, RUN_LOG_JSON};
pub use model::{Model, ModelConfig, Normalization, CHECKPOINT_ARRAYS, CHECKPOINT_META};

use crate::autograd::{Adam, Bound, GradBuffer, Graph, Var};
use crate::controller::{Controller, ControllerConfig, Feedback};
use crate::datagen::SampleSet;
use crate::error::{M2mError, Result};
use crate::evalbench::relative_l2_per_sample;
use crate::fields::{aggregate_stacked, aggregate_var, downsample, downsample_var, segment_stacked, PatchBatch};
use crate::router::{
    mix_var, mixing_weights, mixing_weights_var, patch_tokens, router_loss, router_loss_var, selection_mask,
    ExpertPart, ResolvedPrior, RoutingOutput, Strategy,
};
use model::predict_chunked;
use ndarray::{Array2, Array3, Array4, ArrayView4, Axis, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which predictions the expert phase supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Each expert is fitted on the patches it serves.
    #[default]
    PerExpert,
    /// The weighted, reassembled prediction is fitted to the target.
    Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// All expert updates of an epoch, then all router updates.
    #[default]
    PerEpoch,
    /// One expert update and one router update per batch.
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub strategy: Strategy,
    pub k: usize,
    pub supervision: Supervision,
    pub alternation: Alternation,
    pub seed: u64,
    pub rollout_steps: usize,
    /// Validation interval in epochs; 0 validates only after the final epoch.
    pub val_every: usize,
    /// Router phase optimises only the λ-weighted router loss.
    pub router_only: bool,
    /// Rescale inputs and targets by their training RMS.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            strategy: Strategy::TopK,
            k: 2,
            supervision: Supervision::PerExpert,
            alternation: Alternation::PerEpoch,
            seed: 0,
            rollout_steps: 1,
            val_every: 1,
            router_only: false,
            normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_experts: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(M2mError::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(M2mError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.rollout_steps != 1 {
            return Err(M2mError::InvalidConfig(format!(
                "only single-step rollouts are supported, got rollout_steps = {}",
                self.rollout_steps
            )));
        }
        if self.k == 0 || self.k > num_experts {
            return Err(M2mError::TopKOutOfRange {
                k: self.k,
                num_experts,
            });
        }
        Ok(())
    }
}

/// Mean squared error over all cells.
pub fn mse(pred: ArrayView4<'_, f64>, truth: ArrayView4<'_, f64>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(M2mError::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sse: f64 = pred.iter().zip(truth.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / pred.len() as f64)
}

/// Sum over experts of the MSE on the patches each one serves; `parts[j] = (predictions, truth)`.
pub fn per_expert_loss(parts: &[(ArrayView4<'_, f64>, ArrayView4<'_, f64>)]) -> Result<f64> {
    parts.iter().map(|(p, t)| mse(p.view(), t.view())).sum()
}

/// `λ · router_loss + expert_loss`.
pub fn total_loss(router_loss: f64, expert_loss: f64, lambda: f64) -> f64 {
    lambda * router_loss + expert_loss
}

/// Every parameter of a [`Model`] registered in one graph.
pub struct ModelBounds<'g> {
    pub experts: Vec<Bound<'g>>,
    pub router: Bound<'g>,
}

impl<'g> ModelBounds<'g> {
    pub fn bind(graph: &'g Graph, model: &Model, trainable: bool) -> Self {
        Self {
            experts: model.experts.iter().map(|e| graph.bind(e.params(), trainable)).collect(),
            router: graph.bind(model.router.params(), trainable),
        }
    }
}

/// Rows of each expert's selection: `rows[j]` lists patches with `mask[r, j] > 0`.
fn selected_rows(mask: &Array2<f64>) -> Vec<Vec<usize>> {
    (0..mask.ncols())
        .map(|j| (0..mask.nrows()).filter(|&r| mask[[r, j]] > 0.0).collect())
        .collect()
}

fn flat_patches(batch: &PatchBatch) -> ndarray::ArrayView4<'_, f64> {
    let (b, s2, t, h, w) = batch.patches.dim();
    batch
        .patches
        .view()
        .into_shape((b * s2, t, h, w))
        .expect("contiguous patches")
}

fn to2(v: Var<'_>) -> Array2<f64> {
    v.to_tensor().into_dimensionality::<Ix2>().expect("2d tensor")
}

fn sum_vars<'g>(vars: Vec<Var<'g>>) -> Option<Var<'g>> {
    vars.into_iter().reduce(|a, b| a.add(b))
}

/// Differentiable `λ · router_loss + expert_loss` on model-unit data, with experts and router bound in `bounds`.
///
/// Routing selection is treated as constant; gradients reach the router through the mixing
/// weights (aggregate supervision) and the router loss.
pub fn joint_objective<'g>(
    model: &Model,
    bounds: &ModelBounds<'g>,
    x: &Array4<f64>,
    y: &Array4<f64>,
    lambda: f64,
    supervision: Supervision,
) -> Result<Var<'g>> {
    let graph = bounds.router.get(0).graph();
    let prior = model.resolved_prior()?;
    let scale = model.scale();
    let spec = model.config.resample;
    let batch = model.patch_batch(x.clone())?;
    let tokens = patch_tokens(&batch, model.config.router.pool_size);
    let logits = model.router.logits(&bounds.router, &tokens)?;
    let probs = prior.probs(logits);
    let routing = RoutingOutput::from_logits_probs(to2(logits), to2(probs), model.k)?;
    let mask = selection_mask(&routing, model.strategy, model.k)?;
    let rows = selected_rows(&mask);
    let flat = flat_patches(&batch);
    let truth = segment_stacked(y.view(), scale)?;
    let mut parts = Vec::new();
    for (j, sel) in rows.iter().enumerate() {
        if sel.is_empty() {
            continue;
        }
        let out = model.experts[j].forward(&bounds.experts[j], &flat.select(Axis(0), sel))?;
        parts.push(ExpertPart {
            expert: j,
            rows: sel.clone(),
            output: downsample_var(out, scale, &spec),
        });
    }
    let expert_term = match supervision {
        Supervision::PerExpert => sum_vars(
            parts
                .iter()
                .map(|p| p.output.mse(&truth.select(Axis(0), &p.rows).into_dyn()))
                .collect(),
        )
        .unwrap_or_else(|| graph.scalar(0.0)),
        Supervision::Aggregate => {
            let weights = mixing_weights_var(probs, &mask);
            aggregate_var(mix_var(weights, &parts), scale).mse(&y.clone().into_dyn())
        }
    };
    let router_term = router_loss_var(probs, &prior, model.config.router.entropy_weight);
    Ok(expert_term.add(router_term.scale(lambda)))
}

/// Native-resolution expert outputs per (sample, patch, expert), valid while expert weights are unchanged.
struct OutputCache {
    s2: usize,
    m: usize,
    entries: Vec<Option<Array3<f64>>>,
}

impl OutputCache {
    fn new(samples: usize, s2: usize, m: usize) -> Self {
        Self {
            s2,
            m,
            entries: vec![None; samples * s2 * m],
        }
    }

    fn key(&self, sample: usize, patch: usize, j: usize) -> usize {
        (sample * self.s2 + patch) * self.m + j
    }

    fn clear(&mut self) {
        self.entries.iter_mut().for_each(|e| *e = None);
    }

    /// Computes missing outputs for every selected (row, expert) of a batch of `samples`.
    fn fill(
        &mut self,
        model: &Model,
        batch: &PatchBatch,
        samples: &[usize],
        mask: &Array2<f64>,
    ) -> Result<()> {
        let flat = flat_patches(batch);
        let (_, _, h, w) = flat.dim();
        let scale = model.scale();
        for j in 0..self.m {
            let missing: Vec<usize> = (0..mask.nrows())
                .filter(|&r| {
                    mask[[r, j]] > 0.0 && self.entries[self.key(samples[r / self.s2], r % self.s2, j)].is_none()
                })
                .collect();
            if missing.is_empty() {
                continue;
            }
            let full = predict_chunked(&model.experts[j], &flat.select(Axis(0), &missing))?;
            let native = downsample(full.view(), (h / scale, w / scale), &model.config.resample)?;
            for (n, &r) in missing.iter().enumerate() {
                let key = self.key(samples[r / self.s2], r % self.s2, j);
                self.entries[key] = Some(native.index_axis(Axis(0), n).to_owned());
            }
        }
        Ok(())
    }

    /// Stacked outputs of expert `j` for batch `rows`.
    fn stack(&self, samples: &[usize], rows: &[usize], j: usize) -> Array4<f64> {
        let views: Vec<_> = rows
            .iter()
            .map(|&r| {
                self.entries[self.key(samples[r / self.s2], r % self.s2, j)]
                    .as_ref()
                    .expect("cache filled before use")
                    .view()
                    .insert_axis(Axis(0))
            })
            .collect();
        ndarray::concatenate(Axis(0), &views).expect("consistent cached shapes")
    }
}

struct TrainEval {
    norm_mse: f64,
    rmse: f64,
    rel_l2: f64,
    expert_loss: f64,
    router_loss: f64,
    router_probs: Vec<Vec<f64>>,
    argmax_counts: Vec<Vec<usize>>,
}

/// Epoch-by-epoch training driver; see [`train`] for the one-call form.
pub struct Trainer<'a> {
    model: Model,
    cfg: TrainConfig,
    train: &'a SampleSet,
    val: Option<&'a SampleSet>,
    controller: Controller,
    prior: ResolvedPrior,
    expert_opts: Vec<Adam>,
    router_opt: Adam,
    rng: ChaCha8Rng,
    cache: OutputCache,
    log: RunLog,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        mut model: Model,
        train: &'a SampleSet,
        val: Option<&'a SampleSet>,
        cfg: TrainConfig,
        controller: ControllerConfig,
    ) -> Result<Self> {
        let m = model.num_experts();
        cfg.validate(m)?;
        if train.is_empty() {
            return Err(M2mError::Missing("training set is empty".into()));
        }
        model.config.check_data(train)?;
        if let Some(v) = val {
            model.config.check_data(v)?;
        }
        model.set_dispatch(cfg.strategy, cfg.k)?;
        model.norm = if cfg.normalize {
            Normalization::fit(train)
        } else {
            Normalization::default()
        };
        let prior = model.resolved_prior()?;
        let expert_opts = model
            .experts
            .iter()
            .map(|e| Adam::new(e.params(), cfg.learning_rate))
            .collect();
        let router_opt = Adam::new(model.router.params(), cfg.learning_rate);
        let cache = OutputCache::new(train.len(), model.num_positions(), m);
        Ok(Self {
            controller: Controller::new(controller)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            train,
            val,
            prior,
            expert_opts,
            router_opt,
            cache,
            log: RunLog::default(),
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn batch_arrays(&self, set: &SampleSet, idx: &[usize]) -> (Array4<f64>, Array4<f64>) {
        let n = self.model.norm;
        let x = set.inputs.select(Axis(0), idx).mapv(|v| v / n.input_scale);
        let y = set.targets.select(Axis(0), idx).mapv(|v| v / n.target_scale);
        (x, y)
    }

    fn diverged(&self, what: impl Into<String>) -> M2mError {
        M2mError::Diverged {
            epoch: self.epoch,
            what: what.into(),
        }
    }

    /// One expert update on the samples `idx` with the router frozen.
    fn expert_step(&mut self, idx: &[usize], patch_counts: &mut [usize]) -> Result<f64> {
        let (x, y) = self.batch_arrays(self.train, idx);
        let model = &self.model;
        let scale = model.scale();
        let s2 = model.num_positions();
        let spec = model.config.resample;
        let batch = model.patch_batch(x)?;
        let routing = model.router.route(&batch, &self.prior, model.k)?;
        let mask = selection_mask(&routing, model.strategy, model.k)?;
        let weights = mixing_weights(routing.probs.view(), &mask);
        let rows = selected_rows(&mask);
        let totals: Vec<usize> = rows.iter().map(Vec::len).collect();
        let flat = flat_patches(&batch);
        let truth = segment_stacked(y.view(), scale)?;
        let b = idx.len();
        let mut buffers: Vec<GradBuffer> = model.experts.iter().map(|e| GradBuffer::zeros_like(e.params())).collect();
        let mut total = 0.0;
        for bi in 0..b {
            let graph = Graph::new();
            let local = |r: usize| r >= bi * s2 && r < (bi + 1) * s2;
            let bounds: Vec<Option<Bound<'_>>> = model
                .experts
                .iter()
                .zip(&rows)
                .map(|(e, sel)| sel.iter().any(|&r| local(r)).then(|| graph.bind(e.params(), true)))
                .collect();
            let mut parts = Vec::new();
            for (j, sel) in rows.iter().enumerate() {
                let mine: Vec<usize> = sel.iter().copied().filter(|&r| local(r)).collect();
                let Some(bound) = bounds[j].as_ref() else { continue };
                patch_counts[j] += mine.len();
                let out = model.experts[j].forward(bound, &flat.select(Axis(0), &mine))?;
                parts.push(ExpertPart {
                    expert: j,
                    rows: mine,
                    output: downsample_var(out, scale, &spec),
                });
            }
            let loss = match self.cfg.supervision {
                Supervision::PerExpert => sum_vars(
                    parts
                        .iter()
                        .map(|p| {
                            let t = truth.select(Axis(0), &p.rows).into_dyn();
                            p.output.mse(&t).scale(p.rows.len() as f64 / totals[p.expert] as f64)
                        })
                        .collect(),
                ),
                Supervision::Aggregate => {
                    let local_w = weights.slice(ndarray::s![bi * s2..(bi + 1) * s2, ..]).to_owned();
                    let w = graph.constant(local_w.into_dyn());
                    let shifted: Vec<ExpertPart<'_>> = parts
                        .iter()
                        .map(|p| ExpertPart {
                            expert: p.expert,
                            rows: p.rows.iter().map(|r| r - bi * s2).collect(),
                            output: p.output,
                        })
                        .collect();
                    let target = y.slice(ndarray::s![bi..bi + 1, .., .., ..]).to_owned().into_dyn();
                    Some(aggregate_var(mix_var(w, &shifted), scale).mse(&target).scale(1.0 / b as f64))
                }
            };
            let Some(loss) = loss else { continue };
            let value = loss.item();
            if !value.is_finite() {
                return Err(self.diverged("expert loss is not finite"));
            }
            total += value;
            let grads = graph.backward(loss);
            for (buf, bound) in buffers.iter_mut().zip(&bounds) {
                if let Some(bound) = bound {
                    buf.accumulate(bound, &grads);
                }
            }
        }
        for (j, buf) in buffers.iter().enumerate() {
            if totals[j] == 0 {
                continue;
            }
            if !buf.is_finite() {
                return Err(self.diverged(format!("expert {j} gradient is not finite")));
            }
            self.expert_opts[j].step(self.model.experts[j].params_mut(), &buf.grads);
            if !self.model.experts[j].params().is_finite() {
                return Err(self.diverged(format!("expert {j} parameters are not finite")));
            }
        }
        self.cache.clear();
        Ok(total)
    }

    /// One router update on the samples `idx` with the experts frozen.
    fn router_step(&mut self, idx: &[usize], lambda: f64) -> Result<f64> {
        let (x, y) = self.batch_arrays(self.train, idx);
        let scale = self.model.scale();
        let batch = self.model.patch_batch(x)?;
        let tokens = patch_tokens(&batch, self.model.config.router.pool_size);
        let graph = Graph::new();
        let bound = graph.bind(self.model.router.params(), true);
        let logits = self.model.router.logits(&bound, &tokens)?;
        let probs = self.prior.probs(logits);
        let routing = RoutingOutput::from_logits_probs(to2(logits), to2(probs), self.model.k)?;
        let mask = selection_mask(&routing, self.model.strategy, self.model.k)?;
        let router_term = router_loss_var(probs, &self.prior, self.model.config.router.entropy_weight).scale(lambda);
        let loss = if self.cfg.router_only {
            router_term
        } else {
            self.cache.fill(&self.model, &batch, idx, &mask)?;
            let weights = mixing_weights_var(probs, &mask);
            let parts: Vec<ExpertPart<'_>> = selected_rows(&mask)
                .into_iter()
                .enumerate()
                .filter(|(_, rows)| !rows.is_empty())
                .map(|(j, rows)| ExpertPart {
                    expert: j,
                    output: graph.constant(self.cache.stack(idx, &rows, j).into_dyn()),
                    rows,
                })
                .collect();
            let pred = aggregate_var(mix_var(weights, &parts), scale);
            pred.mse(&y.into_dyn()).add(router_term)
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(self.diverged("router objective is not finite"));
        }
        let grads = bound.grads(&graph.backward(loss));
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(self.diverged("router gradient is not finite"));
        }
        self.router_opt.step(self.model.router.params_mut(), &grads);
        if !self.model.router.params().is_finite() {
            return Err(self.diverged("router parameters are not finite"));
        }
        Ok(value)
    }

    /// Inference pass over the training set reusing cached expert outputs.
    fn evaluate_train(&mut self) -> Result<TrainEval> {
        let n = self.train.len();
        let m = self.model.num_experts();
        let s2 = self.model.num_positions();
        let scale = self.model.scale();
        let mut sse = 0.0;
        let mut cells = 0usize;
        let mut rel_sum = 0.0;
        let mut expert_sse = vec![0.0; m];
        let mut expert_rows = vec![0usize; m];
        let mut router_sum = 0.0;
        let mut probs_acc = vec![vec![0.0; m]; s2];
        let mut argmax_counts = vec![vec![0usize; m]; s2];
        let order: Vec<usize> = (0..n).collect();
        for idx in order.chunks(self.cfg.batch_size) {
            let (x, y) = self.batch_arrays(self.train, idx);
            let batch = self.model.patch_batch(x)?;
            let routing = self.model.router.route(&batch, &self.prior, self.model.k)?;
            let mask = selection_mask(&routing, self.model.strategy, self.model.k)?;
            let weights = mixing_weights(routing.probs.view(), &mask);
            self.cache.fill(&self.model, &batch, idx, &mask)?;
            let truth = segment_stacked(y.view(), scale)?;
            let (rows, t, ph, pw) = truth.dim();
            let mut native = Array4::<f64>::zeros((rows, t, ph, pw));
            for (j, sel) in selected_rows(&mask).iter().enumerate() {
                if sel.is_empty() {
                    continue;
                }
                let out = self.cache.stack(idx, sel, j);
                for (k, &r) in sel.iter().enumerate() {
                    let o = out.index_axis(Axis(0), k);
                    native.index_axis_mut(Axis(0), r).scaled_add(weights[[r, j]], &o);
                    let d = &o - &truth.index_axis(Axis(0), r);
                    expert_sse[j] += d.iter().map(|v| v * v).sum::<f64>();
                }
                expert_rows[j] += sel.len();
            }
            let pred = aggregate_stacked(native.view(), scale)?;
            sse += pred.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            cells += pred.len();
            rel_sum += relative_l2_per_sample(pred.view(), y.view())?.iter().sum::<f64>();
            router_sum += router_loss(
                routing.probs.view(),
                &self.prior,
                self.model.config.router.entropy_weight,
            )? * rows as f64;
            for (r, (row, best)) in routing.probs.outer_iter().zip(routing.argmax()).enumerate() {
                for (acc, &p) in probs_acc[r % s2].iter_mut().zip(row.iter()) {
                    *acc += p;
                }
                argmax_counts[r % s2][best] += 1;
            }
        }
        let patch_cells = {
            let (_, t, h, w) = self.train.targets.dim();
            t * (h / scale) * (w / scale)
        };
        let per_expert: f64 = (0..m)
            .filter(|&j| expert_rows[j] > 0)
            .map(|j| expert_sse[j] / (expert_rows[j] * patch_cells) as f64)
            .sum();
        let norm_mse = sse / cells as f64;
        for row in probs_acc.iter_mut() {
            row.iter_mut().for_each(|p| *p /= n as f64);
        }
        Ok(TrainEval {
            norm_mse,
            rmse: norm_mse.sqrt() * self.model.norm.target_scale,
            rel_l2: rel_sum / n as f64,
            expert_loss: match self.cfg.supervision {
                Supervision::PerExpert => per_expert,
                Supervision::Aggregate => norm_mse,
            },
            router_loss: router_sum / (n * s2) as f64,
            router_probs: probs_acc,
            argmax_counts,
        })
    }

    fn validate_now(&self) -> Result<Option<f64>> {
        let Some(val) = self.val else { return Ok(None) };
        if val.is_empty() {
            return Ok(None);
        }
        let due = (self.cfg.val_every > 0 && self.epoch % self.cfg.val_every == 0) || self.epoch == self.cfg.epochs;
        if !due {
            return Ok(None);
        }
        let pred = self.model.predict(&val.inputs)?;
        let rel = relative_l2_per_sample(pred.view(), val.targets.view())?;
        Ok(Some(rel.iter().sum::<f64>() / rel.len() as f64))
    }

    /// Runs one epoch of expert phase, router phase, evaluation and controller update.
    pub fn run_epoch(&mut self) -> Result<&EpochLog> {
        self.epoch += 1;
        let lambda = self.controller.lambda();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let batches: Vec<Vec<usize>> = order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect();
        let m = self.model.num_experts();
        let mut counts = vec![0usize; m];
        let (mut expert_sum, mut router_sum) = (0.0, 0.0);
        let mut router_frozen_ok = true;
        let mut experts_frozen_ok = true;
        let expert_fp = |model: &Model| model.experts.iter().map(|e| e.params().fingerprint()).collect::<Vec<_>>();
        let mut expert_phase = |this: &mut Self, group: &[Vec<usize>], counts: &mut [usize]| -> Result<f64> {
            let before = this.model.router.params().fingerprint();
            let mut s = 0.0;
            for idx in group {
                s += this.expert_step(idx, counts)?;
            }
            router_frozen_ok &= before == this.model.router.params().fingerprint();
            Ok(s)
        };
        let mut router_phase = |this: &mut Self, group: &[Vec<usize>]| -> Result<f64> {
            let before = expert_fp(&this.model);
            let mut s = 0.0;
            for idx in group {
                s += this.router_step(idx, lambda)?;
            }
            experts_frozen_ok &= before == expert_fp(&this.model);
            Ok(s)
        };
        match self.cfg.alternation {
            Alternation::PerEpoch => {
                expert_sum += expert_phase(self, &batches, &mut counts)?;
                router_sum += router_phase(self, &batches)?;
            }
            Alternation::PerBatch => {
                for idx in &batches {
                    let one = std::slice::from_ref(idx);
                    expert_sum += expert_phase(self, one, &mut counts)?;
                    router_sum += router_phase(self, one)?;
                }
            }
        }
        let eval = self.evaluate_train()?;
        if !(eval.norm_mse.is_finite() && eval.router_loss.is_finite()) {
            return Err(self.diverged("evaluation loss is not finite"));
        }
        let val_rel_l2 = self.validate_now()?;
        let total = total_loss(eval.router_loss, eval.expert_loss, lambda);
        let feedback = match self.controller.config().feedback {
            Feedback::Rmse => eval.norm_mse.sqrt(),
            Feedback::TotalLoss => total,
        };
        let record = self.controller.step(feedback)?;
        let nb = batches.len() as f64;
        self.log.push(EpochLog {
            epoch: self.epoch,
            train_rmse: eval.rmse,
            train_rel_l2: eval.rel_l2,
            val_rel_l2,
            expert_loss: eval.expert_loss,
            router_loss: eval.router_loss,
            total_loss: total,
            expert_phase_loss: expert_sum / nb,
            router_phase_loss: router_sum / nb,
            lambda_used: lambda,
            controller: record,
            router_probs: eval.router_probs,
            argmax_counts: eval.argmax_counts,
            router_frozen_ok,
            experts_frozen_ok,
            expert_patch_counts: counts,
        });
        Ok(self.log.last().expect("just pushed"))
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: RunLog,
}

/// Trains `model` for `cfg.epochs` epochs.
pub fn train(
    model: Model,
    train_set: &SampleSet,
    val: Option<&SampleSet>,
    cfg: TrainConfig,
    controller: ControllerConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, train_set, val, cfg, controller)?;
    while !trainer.is_finished() {
        trainer.run_epoch()?;
    }
    let log = trainer.log().clone();
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
    })
}
