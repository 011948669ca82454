//! Patch router: a small transformer classifier with prior injection, top-k
//! selection and the two dispatch strategies.

use crate::autograd::{Bound, Graph, ParamSet, Tensor, Var};
use crate::error::{M2mError, Result};
use crate::fields::{aggregate_stacked, downsample, Field, PatchBatch, ResampleSpec};
use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const MASKED_LOGIT: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub pooling: Pooling,
    /// Side of the square grid each patch channel is pooled to before embedding.
    pub pool_size: usize,
    pub epsilon_prior: f64,
    /// Signed weight of the load-entropy term in the router loss.
    pub entropy_weight: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            num_heads: 4,
            num_layers: 2,
            pooling: Pooling::Mean,
            pool_size: 16,
            epsilon_prior: 1e-3,
            entropy_weight: 1.0,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(M2mError::InvalidConfig(format!(
                "router embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.epsilon_prior > 0.0 && self.epsilon_prior < 0.1) {
            return Err(M2mError::InvalidConfig(format!(
                "epsilon_prior {} must lie in (0, 0.1)",
                self.epsilon_prior
            )));
        }
        if self.pool_size == 0 {
            return Err(M2mError::InvalidConfig("router pool_size must be positive".into()));
        }
        if !self.entropy_weight.is_finite() {
            return Err(M2mError::InvalidConfig("entropy_weight must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    #[default]
    None,
    Soft,
    Hard,
}

/// Expert prior, either one row for all patches or one row per patch position.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub mode: PriorMode,
    pub weights: Vec<f64>,
    pub per_patch: Option<Vec<Vec<f64>>>,
}

impl PriorSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn soft(weights: Vec<f64>) -> Self {
        Self {
            mode: PriorMode::Soft,
            weights,
            per_patch: None,
        }
    }

    pub fn hard(weights: Vec<f64>) -> Self {
        Self {
            mode: PriorMode::Hard,
            weights,
            per_patch: None,
        }
    }

    /// Normalises and smooths the prior for `num_experts` experts and `num_patches` patch positions.
    pub fn resolve(&self, num_experts: usize, num_patches: usize, epsilon: f64) -> Result<ResolvedPrior> {
        let m = num_experts;
        if m == 0 {
            return Err(M2mError::InvalidConfig("router needs at least one expert".into()));
        }
        let rows: Vec<Vec<f64>> = match (&self.per_patch, self.mode) {
            (_, PriorMode::None) => vec![vec![0.0; m]; num_patches],
            (Some(rows), _) => {
                if rows.len() != num_patches {
                    return Err(M2mError::PriorDimension {
                        expected: num_patches,
                        got: rows.len(),
                    });
                }
                rows.clone()
            }
            (None, _) => vec![self.weights.clone(); num_patches],
        };
        let mut raw = Array2::<f64>::zeros((num_patches, m));
        let mut log_q = Array2::<f64>::zeros((num_patches, m));
        let mut hard_bias = Array2::<f64>::zeros((num_patches, m));
        let mut any_informative = false;
        for (r, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(M2mError::PriorDimension {
                    expected: m,
                    got: row.len(),
                });
            }
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(M2mError::InvalidConfig(format!("prior row {row:?} must be nonnegative")));
            }
            let total: f64 = row.iter().sum();
            let p: Vec<f64> = if total > 0.0 {
                any_informative = true;
                row.iter().map(|v| v / total).collect()
            } else {
                vec![1.0 / m as f64; m]
            };
            for j in 0..m {
                raw[[r, j]] = p[j];
                log_q[[r, j]] = ((1.0 - epsilon * m as f64) * p[j] + epsilon).ln();
                hard_bias[[r, j]] = if p[j] > 0.0 { p[j].ln() } else { MASKED_LOGIT };
            }
        }
        let mode = if any_informative { self.mode } else { PriorMode::None };
        Ok(ResolvedPrior {
            mode,
            epsilon,
            raw,
            log_q,
            hard_bias,
        })
    }
}

/// A prior ready for use: `raw` rows are normalised, `log_q` is the log of the smoothed rows.
#[derive(Debug, Clone)]
pub struct ResolvedPrior {
    pub mode: PriorMode,
    pub epsilon: f64,
    pub raw: Array2<f64>,
    pub log_q: Array2<f64>,
    hard_bias: Array2<f64>,
}

impl ResolvedPrior {
    pub fn num_experts(&self) -> usize {
        self.raw.ncols()
    }

    pub fn num_positions(&self) -> usize {
        self.raw.nrows()
    }

    /// Smoothed prior rows `(1 - εM) P + ε`.
    pub fn smoothed(&self) -> Array2<f64> {
        self.log_q.mapv(f64::exp)
    }

    fn expand(&self, table: &Array2<f64>, rows: usize) -> Tensor {
        let n = self.num_positions();
        Array2::from_shape_fn((rows, self.num_experts()), |(p, j)| table[[p % n, j]]).into_dyn()
    }

    /// Log smoothed prior tiled over `rows` sample-major patches.
    pub fn log_q_rows(&self, rows: usize) -> Tensor {
        self.expand(&self.log_q, rows)
    }

    /// Probabilities from logits `[P, M]` under this prior.
    pub fn probs<'g>(&self, logits: Var<'g>) -> Var<'g> {
        let rows = logits.shape()[0];
        match self.mode {
            PriorMode::None => logits.softmax_last(),
            PriorMode::Soft => logits.add_const(&self.log_q_rows(rows)).softmax_last(),
            PriorMode::Hard => {
                let m = self.num_experts() as f64;
                logits
                    .add_const(&self.expand(&self.hard_bias, rows))
                    .softmax_last()
                    .scale(1.0 - self.epsilon * m)
                    .add_scalar(self.epsilon)
            }
        }
    }
}

/// Router output for `P` patches and `M` experts.
#[derive(Debug, Clone)]
pub struct RoutingOutput {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub topk_indices: Array2<usize>,
    pub topk_weights: Array2<f64>,
}

impl RoutingOutput {
    pub fn from_logits_probs(logits: Array2<f64>, probs: Array2<f64>, k: usize) -> Result<Self> {
        let (topk_indices, topk_weights) = select_topk(probs.view(), k)?;
        Ok(Self {
            logits,
            probs,
            topk_indices,
            topk_weights,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_experts(&self) -> usize {
        self.probs.ncols()
    }

    /// Highest-probability expert per patch, ties to the lower index.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Keeps the `k` most probable experts per row and renormalises their weights.
pub fn select_topk(probs: ArrayView2<'_, f64>, k: usize) -> Result<(Array2<usize>, Array2<f64>)> {
    let (p, m) = probs.dim();
    if k == 0 || k > m {
        return Err(M2mError::TopKOutOfRange { k, num_experts: m });
    }
    let mut idx = Array2::<usize>::zeros((p, k));
    let mut wts = Array2::<f64>::zeros((p, k));
    for (r, row) in probs.outer_iter().enumerate() {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let kept = &order[..k];
        let total: f64 = kept.iter().map(|&j| row[j]).sum();
        for (c, &j) in kept.iter().enumerate() {
            idx[[r, c]] = j;
            wts[[r, c]] = if total > 0.0 { row[j] / total } else { 1.0 / k as f64 };
        }
    }
    Ok((idx, wts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Strategy {
    /// Evaluate only the `k` selected experts per patch.
    #[default]
    #[serde(rename = "topk")]
    TopK,
    /// Evaluate every expert and weight by the full probability row.
    #[serde(rename = "dense")]
    Dense,
}

/// Which experts each patch uses: `mask[p, j]` is 1 for evaluated experts.
pub fn selection_mask(out: &RoutingOutput, strategy: Strategy, k: usize) -> Result<Array2<f64>> {
    let (p, m) = out.probs.dim();
    match strategy {
        Strategy::Dense => Ok(Array2::ones((p, m))),
        Strategy::TopK => {
            if k == 0 || k > m {
                return Err(M2mError::TopKOutOfRange { k, num_experts: m });
            }
            let (idx, _) = select_topk(out.probs.view(), k)?;
            let mut mask = Array2::zeros((p, m));
            for r in 0..p {
                for c in 0..k {
                    mask[[r, idx[[r, c]]]] = 1.0;
                }
            }
            Ok(mask)
        }
    }
}

/// Mixing weights: probabilities restricted to `mask` and renormalised per row.
pub fn mixing_weights(probs: ArrayView2<'_, f64>, mask: &Array2<f64>) -> Array2<f64> {
    let mut w = &probs * mask;
    for mut row in w.outer_iter_mut() {
        let total = row.sum();
        if total > 0.0 {
            row /= total;
        }
    }
    w
}

/// Differentiable [`mixing_weights`].
pub fn mixing_weights_var<'g>(probs: Var<'g>, mask: &Array2<f64>) -> Var<'g> {
    let masked = probs.mul_const(&mask.clone().into_dyn());
    let value = {
        let v = masked.value();
        let v2 = v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        mixing_weights(v2, &Array2::ones(v2.raw_dim())).into_dyn()
    };
    let y = value.clone();
    masked.graph().op(&[masked], value, move |g, p, _| {
        let x = p[0];
        let m = *x.shape().last().unwrap();
        let mut gx = Tensor::zeros(x.raw_dim());
        let (gs, ys, xs) = (g.as_slice().unwrap(), y.as_slice().unwrap(), x.as_slice().unwrap());
        let out = gx.as_slice_mut().unwrap();
        for r in 0..xs.len() / m {
            let total: f64 = xs[r * m..(r + 1) * m].iter().sum();
            if total <= 0.0 {
                continue;
            }
            let inner: f64 = (0..m).map(|j| gs[r * m + j] * ys[r * m + j]).sum();
            for j in 0..m {
                out[r * m + j] = (gs[r * m + j] - inner) / total;
            }
        }
        vec![Some(gx)]
    })
}

/// Outputs of one expert for a subset of patch rows.
#[derive(Debug, Clone)]
pub struct ExpertPart<'g> {
    pub expert: usize,
    pub rows: Vec<usize>,
    /// `[rows.len(), T, h, w]`
    pub output: Var<'g>,
}

/// `y[r] = Σ_j w[r, j] · out_j[r]` over the parts, for weights `[P, M]`; result `[P, T, h, w]`.
pub fn mix_var<'g>(weights: Var<'g>, parts: &[ExpertPart<'g>]) -> Var<'g> {
    assert!(!parts.is_empty(), "mix_var needs at least one part");
    let layout: Vec<(usize, Vec<usize>)> = parts.iter().map(|p| (p.expert, p.rows.clone())).collect();
    let value = {
        let w = weights.value();
        let rows = w.shape()[0];
        let first = parts[0].output.value();
        let mut shape = first.shape().to_vec();
        shape[0] = rows;
        let mut out = Tensor::zeros(IxDyn(&shape));
        for part in parts {
            let o = part.output.value();
            for (n, &r) in part.rows.iter().enumerate() {
                let c = w[[r, part.expert]];
                out.index_axis_mut(Axis(0), r)
                    .scaled_add(c, &o.index_axis(Axis(0), n));
            }
        }
        out
    };
    let mut parents = vec![weights];
    parents.extend(parts.iter().map(|p| p.output));
    weights.graph().op(&parents, value, move |g, p, _| {
        let w = p[0];
        let mut gw = Tensor::zeros(w.raw_dim());
        let mut grads = Vec::with_capacity(p.len());
        let mut part_grads = Vec::with_capacity(layout.len());
        for (k, (j, rows)) in layout.iter().enumerate() {
            let out = p[k + 1];
            let mut go = Tensor::zeros(out.raw_dim());
            for (n, &r) in rows.iter().enumerate() {
                let gr = g.index_axis(Axis(0), r);
                gw[[r, *j]] += (&gr * &out.index_axis(Axis(0), n)).sum();
                go.index_axis_mut(Axis(0), n).scaled_add(w[[r, *j]], &gr);
            }
            part_grads.push(Some(go));
        }
        grads.push(Some(gw));
        grads.extend(part_grads);
        grads
    })
}

/// Adaptive average pooling of every `[H, W]` plane of `[N, T, H, W]` to `n x n` tokens `[N, T, n²]`.
pub fn pool_tokens(x: ndarray::ArrayView4<'_, f64>, n: usize) -> Array3<f64> {
    let (b, t, h, w) = x.dim();
    let bounds = |i: usize, len: usize| (i * len / n, ((i + 1) * len).div_ceil(n));
    let mut out = Array3::<f64>::zeros((b, t, n * n));
    for bi in 0..b {
        for ti in 0..t {
            for i in 0..n {
                let (r0, r1) = bounds(i, h);
                for j in 0..n {
                    let (c0, c1) = bounds(j, w);
                    let block = x.slice(s![bi, ti, r0..r1, c0..c1]);
                    out[[bi, ti, i * n + j]] = block.sum() / block.len() as f64;
                }
            }
        }
    }
    out
}

/// Router tokens `[B·S², T, pool²]` for a patch batch, sample-major.
pub fn patch_tokens(batch: &PatchBatch, pool: usize) -> Array3<f64> {
    let sh = batch.patches.shape();
    let flat = batch
        .patches
        .view()
        .into_shape((sh[0] * sh[1], sh[2], sh[3], sh[4]))
        .expect("contiguous patches");
    pool_tokens(flat, pool)
}

/// Transformer classifier producing one logit per expert for each patch.
#[derive(Debug, Clone)]
pub struct Router {
    config: RouterConfig,
    num_experts: usize,
    in_channels: usize,
    params: ParamSet,
}

impl Router {
    pub fn new(config: RouterConfig, num_experts: usize, in_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if num_experts == 0 || in_channels == 0 {
            return Err(M2mError::InvalidConfig(
                "router needs at least one expert and one input channel".into(),
            ));
        }
        let d = config.embed_dim;
        let tokens_in = config.pool_size * config.pool_size;
        let seq = in_channels + usize::from(config.pooling == Pooling::Cls);
        let mut params = ParamSet::new();
        push_linear(&mut params, "embed", tokens_in, d, rng);
        params.push("pos", uniform(&[seq, d], 0.02, rng));
        if config.pooling == Pooling::Cls {
            params.push("cls", uniform(&[d], 0.02, rng));
        }
        for l in 0..config.num_layers {
            push_norm(&mut params, &format!("layer{l}.ln1"), d);
            for name in ["q", "k", "v", "o"] {
                push_linear(&mut params, &format!("layer{l}.attn.{name}"), d, d, rng);
            }
            push_norm(&mut params, &format!("layer{l}.ln2"), d);
            push_linear(&mut params, &format!("layer{l}.ff1"), d, 4 * d, rng);
            push_linear(&mut params, &format!("layer{l}.ff2"), 4 * d, d, rng);
        }
        push_norm(&mut params, "ln_out", d);
        push_linear(&mut params, "head", d, num_experts, rng);
        Ok(Self {
            config,
            num_experts,
            in_channels,
            params,
        })
    }

    pub fn from_params(
        config: RouterConfig,
        num_experts: usize,
        in_channels: usize,
        params: ParamSet,
    ) -> Result<Self> {
        let template = Self::new(
            config.clone(),
            num_experts,
            in_channels,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        if template.params.len() != params.len()
            || template
                .params
                .iter()
                .zip(params.iter())
                .any(|((tn, tv), (n, v))| tn != n || tv.shape() != v.shape())
        {
            return Err(M2mError::ShapeMismatch("router parameters do not match config".into()));
        }
        if !params.is_finite() {
            return Err(M2mError::NonFinite("router parameters".into()));
        }
        Ok(Self {
            config,
            num_experts,
            in_channels,
            params,
        })
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Logits `[P, M]` for tokens `[P, T, pool²]`.
    pub fn logits<'g>(&self, bound: &Bound<'g>, tokens: &Array3<f64>) -> Result<Var<'g>> {
        let (_, t, f) = tokens.dim();
        let pool = self.config.pool_size;
        if t != self.in_channels || f != pool * pool {
            return Err(M2mError::ShapeMismatch(format!(
                "router expects tokens [P, {}, {}], got {:?}",
                self.in_channels,
                pool * pool,
                tokens.shape()
            )));
        }
        let graph = bound.get(0).graph();
        let mut i = 0;
        let mut next = || {
            let v = bound.get(i);
            i += 1;
            v
        };
        let x = graph.constant(tokens.clone().into_dyn());
        let (ew, eb) = (next(), next());
        let mut x = x.linear(ew, eb);
        let pos = next();
        if self.config.pooling == Pooling::Cls {
            x = prepend_token(x, next());
        }
        x = x.add_suffix(pos);
        let heads = self.config.num_heads;
        for _ in 0..self.config.num_layers {
            let (g1, b1) = (next(), next());
            let h = x.layer_norm(g1, b1, LN_EPS);
            let (qw, qb, kw, kb, vw, vb, ow, ob) =
                (next(), next(), next(), next(), next(), next(), next(), next());
            let q = h.linear(qw, qb);
            let k = h.linear(kw, kb);
            let v = h.linear(vw, vb);
            x = x.add(q.attention(k, v, heads).linear(ow, ob));
            let (g2, b2) = (next(), next());
            let h = x.layer_norm(g2, b2, LN_EPS);
            let (f1w, f1b, f2w, f2b) = (next(), next(), next(), next());
            x = x.add(h.linear(f1w, f1b).gelu().linear(f2w, f2b));
        }
        let (g, b) = (next(), next());
        let x = x.layer_norm(g, b, LN_EPS);
        let pooled = match self.config.pooling {
            Pooling::Mean => x.mean_axis(1),
            Pooling::Cls => first_token(x),
        };
        let (hw, hb) = (next(), next());
        Ok(pooled.linear(hw, hb))
    }

    /// Inference-mode routing of a patch batch.
    pub fn route(&self, batch: &PatchBatch, prior: &ResolvedPrior, k: usize) -> Result<RoutingOutput> {
        check_prior(prior, self.num_experts, batch.num_patches())?;
        let tokens = patch_tokens(batch, self.config.pool_size);
        let graph = Graph::new();
        let bound = graph.bind(&self.params, false);
        let logits = self.logits(&bound, &tokens)?;
        let probs = prior.probs(logits);
        let to2 = |v: Var<'_>| v.to_tensor().into_dimensionality::<ndarray::Ix2>().unwrap();
        RoutingOutput::from_logits_probs(to2(logits), to2(probs), k)
    }
}

fn check_prior(prior: &ResolvedPrior, m: usize, positions: usize) -> Result<()> {
    if prior.num_experts() != m {
        return Err(M2mError::PriorDimension {
            expected: m,
            got: prior.num_experts(),
        });
    }
    if prior.num_positions() != positions {
        return Err(M2mError::PriorDimension {
            expected: positions,
            got: prior.num_positions(),
        });
    }
    Ok(())
}

/// Routes `batch` with `router` under `prior` and keeps the top `k` experts.
pub fn route(router: &Router, batch: &PatchBatch, prior: &PriorSpec, k: usize) -> Result<RoutingOutput> {
    let resolved = prior.resolve(router.num_experts(), batch.num_patches(), router.config().epsilon_prior)?;
    router.route(batch, &resolved, k)
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

fn push_linear(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    params.push(format!("{name}.weight"), uniform(&[fan_in, fan_out], bound, rng));
    params.push(format!("{name}.bias"), uniform(&[fan_out], bound, rng));
}

fn push_norm(params: &mut ParamSet, name: &str, d: usize) {
    params.push(format!("{name}.gamma"), Tensor::ones(IxDyn(&[d])));
    params.push(format!("{name}.beta"), Tensor::zeros(IxDyn(&[d])));
}

/// `[P, T, D]` with a learned `[D]` token prepended: `[P, T + 1, D]`.
fn prepend_token<'g>(x: Var<'g>, token: Var<'g>) -> Var<'g> {
    let value = {
        let (xv, tv) = (x.value(), token.value());
        let (p, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Tensor::zeros(IxDyn(&[p, t + 1, d]));
        for r in 0..p {
            out.slice_mut(s![r, 0, ..]).assign(&*tv);
            out.slice_mut(s![r, 1.., ..]).assign(&xv.slice(s![r, .., ..]));
        }
        out
    };
    x.graph().op(&[x, token], value, |g, _, _| {
        let gx = g.slice(s![.., 1.., ..]).to_owned().into_dyn();
        let gt = g.slice(s![.., 0, ..]).sum_axis(Axis(0)).into_dyn();
        vec![Some(gx), Some(gt)]
    })
}

/// Token 0 of `[P, T, D]` as `[P, D]`.
fn first_token(x: Var<'_>) -> Var<'_> {
    let value = x.value().slice(s![.., 0, ..]).to_owned().into_dyn();
    x.graph().op(&[x], value, |g, p, _| {
        let mut gx = Tensor::zeros(p[0].raw_dim());
        gx.slice_mut(s![.., 0, ..]).assign(g);
        vec![Some(gx)]
    })
}

/// Evaluates the selected experts per patch and reassembles the weighted prediction.
///
/// `eval(j, x)` runs expert `j` on a stack of upsampled patches `[n, T_in, H, W]`.
pub fn dispatch_with<F>(
    batch: &PatchBatch,
    out: &RoutingOutput,
    strategy: Strategy,
    k: usize,
    spec: &ResampleSpec,
    mut eval: F,
) -> Result<Field>
where
    F: FnMut(usize, &Array4<f64>) -> Result<Array4<f64>>,
{
    let (b, s2, t, h, w) = batch.patches.dim();
    let rows = b * s2;
    if out.num_patches() != rows {
        return Err(M2mError::PatchCount {
            expected: rows,
            got: out.num_patches(),
        });
    }
    let scale = batch.scale();
    let mask = selection_mask(out, strategy, k)?;
    let weights = mixing_weights(out.probs.view(), &mask);
    let flat = batch
        .patches
        .view()
        .into_shape((rows, t, h, w))
        .expect("contiguous patches");
    let (ph, pw) = (h / scale, w / scale);
    let mut combined: Option<Array4<f64>> = None;
    for j in 0..out.num_experts() {
        let selected: Vec<usize> = (0..rows).filter(|&r| mask[[r, j]] > 0.0).collect();
        if selected.is_empty() {
            continue;
        }
        let input = flat.select(Axis(0), &selected);
        let full = eval(j, &input)?;
        if full.shape()[0] != selected.len() || full.shape()[2..] != [h, w] {
            return Err(M2mError::ShapeMismatch(format!(
                "expert {j} returned {:?} for {} patches of {h}x{w}",
                full.shape(),
                selected.len()
            )));
        }
        let native = downsample(full.view(), (ph, pw), spec)?;
        let acc = combined.get_or_insert_with(|| Array4::zeros((rows, native.shape()[1], ph, pw)));
        for (n, &r) in selected.iter().enumerate() {
            acc.index_axis_mut(Axis(0), r)
                .scaled_add(weights[[r, j]], &native.index_axis(Axis(0), n));
        }
    }
    let combined = combined.ok_or_else(|| M2mError::InvalidConfig("no expert was selected".into()))?;
    Field::new(aggregate_stacked(combined.view(), scale)?)
}

/// [`dispatch_with`] using the experts' inference forward pass.
pub fn dispatch(
    batch: &PatchBatch,
    experts: &[crate::experts::Expert],
    out: &RoutingOutput,
    strategy: Strategy,
    k: usize,
    spec: &ResampleSpec,
) -> Result<Field> {
    if experts.len() != out.num_experts() {
        return Err(M2mError::PriorDimension {
            expected: experts.len(),
            got: out.num_experts(),
        });
    }
    dispatch_with(batch, out, strategy, k, spec, |j, x| experts[j].predict(x))
}

/// `Σ p ln(p / q)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(M2mError::PriorDimension {
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut total = 0.0;
    for (j, (&pj, &qj)) in p.iter().zip(q).enumerate() {
        if pj > 0.0 {
            if qj <= 0.0 {
                return Err(M2mError::ZeroPrior(j));
            }
            total += pj * (pj / qj).ln();
        }
    }
    Ok(total.max(0.0))
}

/// Shannon entropy of each row, summed over rows.
pub fn load_entropy(probs: ArrayView2<'_, f64>) -> f64 {
    probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Mean over patches of `KL(p || q) + entropy_weight · H(p)`.
pub fn router_loss(probs: ArrayView2<'_, f64>, prior: &ResolvedPrior, entropy_weight: f64) -> Result<f64> {
    let rows = probs.nrows();
    if rows == 0 {
        return Ok(0.0);
    }
    let q = prior.log_q_rows(rows).mapv(f64::exp);
    let q2 = q.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut total = 0.0;
    for (p, qrow) in probs.outer_iter().zip(q2.outer_iter()) {
        total += kl_divergence(&p.to_vec(), &qrow.to_vec())?;
        total += entropy_weight * load_entropy(p.insert_axis(Axis(0)));
    }
    Ok(total / rows as f64)
}

/// Differentiable [`router_loss`] on probabilities `[P, M]`.
pub fn router_loss_var<'g>(probs: Var<'g>, prior: &ResolvedPrior, entropy_weight: f64) -> Var<'g> {
    let rows = probs.shape()[0];
    let log_q = prior.log_q_rows(rows);
    let inv = 1.0 / rows as f64;
    let neg_entropy = probs.xlogx().sum();
    let cross = probs.mul_const(&log_q).sum();
    neg_entropy.scale((1.0 - entropy_weight) * inv).sub(cross.scale(inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::assert_gradients;
    use crate::fields::{make_patch_batch, ResampleSpec};
    use approx::assert_abs_diff_eq;
    use super::Strategy;
    use rand::Rng;
    use proptest::prelude::*;

    fn probs_for(logits: Array2<f64>, prior: &ResolvedPrior) -> Array2<f64> {
        let g = Graph::new();
        let l = g.constant(logits.into_dyn());
        prior.probs(l).to_tensor().into_dimensionality().unwrap()
    }

    fn output(probs: Array2<f64>, k: usize) -> RoutingOutput {
        RoutingOutput::from_logits_probs(probs.clone(), probs, k).unwrap()
    }

    fn small_config(pooling: Pooling) -> RouterConfig {
        RouterConfig {
            embed_dim: 8,
            num_heads: 2,
            num_layers: 1,
            pooling,
            pool_size: 2,
            ..RouterConfig::default()
        }
    }

    fn random_batch(b: usize, t: usize, n: usize, scale: usize, seed: u64) -> PatchBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Field::new(Array4::from_shape_fn((b, t, n, n), |_| rng.gen_range(-1.0..1.0))).unwrap();
        make_patch_batch(&f, scale, &ResampleSpec::default()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let none = PriorSpec::none().resolve(2, 1, 1e-3).unwrap();
        let p = probs_for(Array2::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap(), &none);
        assert_abs_diff_eq!(p[[0, 0]], 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(p[[0, 1]], 0.73106, epsilon = 1e-5);
        let none4 = PriorSpec::none().resolve(4, 3, 1e-3).unwrap();
        let p = probs_for(Array2::zeros((3, 4)), &none4);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_prior_means_uniform() {
        let r = PriorSpec::hard(vec![0.0; 4]).resolve(4, 1, 1e-3).unwrap();
        assert_eq!(r.mode, PriorMode::None);
        assert!(r.smoothed().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hard_prior_dominates_logits() {
        let eps = 1e-3;
        let prior = PriorSpec::hard(vec![0.0, 1.0, 0.0, 0.0]).resolve(4, 4, eps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bound in [eps.ln().abs(), 50.0] {
            let logits = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-bound..bound));
            let mut adversarial = logits.clone();
            adversarial.column_mut(1).fill(-bound);
            adversarial.column_mut(0).fill(bound);
            for l in [logits, adversarial] {
                let p = probs_for(l, &prior);
                for row in p.outer_iter() {
                    assert!(row[1] >= 1.0 - 3.0 * eps - 1e-12, "row {row}");
                    for j in [0, 2, 3] {
                        assert!(row[j] <= eps * 4.0);
                    }
                }
                assert!(output(p, 1).argmax().iter().all(|&j| j == 1));
            }
        }
    }

    #[test]
    fn prior_dimension_errors() {
        assert!(matches!(
            PriorSpec::soft(vec![0.5, 0.5]).resolve(4, 1, 1e-3),
            Err(M2mError::PriorDimension { expected: 4, got: 2 })
        ));
        let per_patch = PriorSpec {
            mode: PriorMode::Soft,
            weights: vec![],
            per_patch: Some(vec![vec![1.0, 0.0]; 3]),
        };
        assert!(per_patch.resolve(2, 4, 1e-3).is_err());
        assert!(PriorSpec::soft(vec![-1.0, 2.0]).resolve(2, 1, 1e-3).is_err());
        let ok = PriorSpec {
            mode: PriorMode::Hard,
            weights: vec![],
            per_patch: Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        }
        .resolve(2, 2, 1e-3)
        .unwrap();
        let p = probs_for(Array2::zeros((4, 2)), &ok);
        assert_eq!(output(p, 1).argmax(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn topk_examples() {
        let probs = Array2::from_shape_vec((1, 4), vec![0.5, 0.3, 0.15, 0.05]).unwrap();
        let (idx, w) = select_topk(probs.view(), 2).unwrap();
        assert_eq!(idx.row(0).to_vec(), vec![0, 1]);
        assert_abs_diff_eq!(w[[0, 0]], 0.625, epsilon = 1e-12);
        assert_abs_diff_eq!(w[[0, 1]], 0.375, epsilon = 1e-12);
        let (idx, w) = select_topk(probs.view(), 1).unwrap();
        assert_eq!((idx[[0, 0]], w[[0, 0]]), (0, 1.0));
        let (idx, w) = select_topk(probs.view(), 4).unwrap();
        for c in 0..4 {
            assert_abs_diff_eq!(w[[0, c]], probs[[0, idx[[0, c]]]], epsilon = 1e-15);
        }
        let ties = Array2::from_elem((1, 3), 1.0 / 3.0);
        assert_eq!(select_topk(ties.view(), 2).unwrap().0.row(0).to_vec(), vec![0, 1]);
        assert!(matches!(select_topk(probs.view(), 0), Err(M2mError::TopKOutOfRange { .. })));
        assert!(matches!(select_topk(probs.view(), 5), Err(M2mError::TopKOutOfRange { .. })));
    }

    #[test]
    fn kl_and_entropy_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert!(matches!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), Err(M2mError::ZeroPrior(1))));
        let rows = Array2::from_shape_vec(
            (3, 4),
            vec![0.0, 1.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25, 0.5, 0.5, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(load_entropy(rows.slice(s![0..1, ..])), 0.0);
        assert_abs_diff_eq!(load_entropy(rows.slice(s![1..2, ..])), 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(load_entropy(rows.slice(s![2..3, ..])), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(load_entropy(rows.view()), 4f64.ln() + 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn router_loss_examples() {
        let none = PriorSpec::none().resolve(4, 1, 1e-3).unwrap();
        let uniform = Array2::from_elem((1, 4), 0.25);
        assert_abs_diff_eq!(router_loss(uniform.view(), &none, 1.0).unwrap(), 4f64.ln(), epsilon = 1e-12);
        let hard = PriorSpec::hard(vec![0.0, 1.0, 0.0, 0.0]).resolve(4, 1, 1e-3).unwrap();
        let onehot = Array2::from_shape_vec((1, 4), vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(router_loss(onehot.view(), &hard, 1.0).unwrap() < 1e-2);
        let far = Array2::from_shape_vec((1, 4), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(router_loss(far.view(), &hard, 1.0).unwrap().is_finite());
    }

    #[test]
    fn router_loss_var_matches_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prior = PriorSpec {
            mode: PriorMode::Soft,
            weights: vec![],
            per_patch: Some(vec![vec![0.1, 0.6, 0.3], vec![0.0, 0.0, 1.0]]),
        }
        .resolve(3, 2, 1e-3)
        .unwrap();
        let logits = Tensor::from_shape_fn(IxDyn(&[4, 3]), |_| rng.gen_range(-2.0..2.0));
        for w in [1.0, -0.5, 0.0] {
            let g = Graph::new();
            let p = g.constant(logits.clone()).softmax_last();
            let pv: Array2<f64> = p.to_tensor().into_dimensionality().unwrap();
            let direct = router_loss(pv.view(), &prior, w).unwrap();
            assert_abs_diff_eq!(router_loss_var(p, &prior, w).item(), direct, epsilon = 1e-12);
            let pr = prior.clone();
            assert_gradients(&[logits.clone()], move |_, v| router_loss_var(v[0].softmax_last(), &pr, w));
        }
    }

    #[test]
    fn mixing_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::from_shape_fn(IxDyn(&[3, 4]), |_| rng.gen_range(-1.0..1.0));
        let out_a = Tensor::from_shape_fn(IxDyn(&[2, 2, 2, 2]), |_| rng.gen_range(-1.0..1.0));
        let out_b = Tensor::from_shape_fn(IxDyn(&[2, 2, 2, 2]), |_| rng.gen_range(-1.0..1.0));
        let t = Tensor::from_shape_fn(IxDyn(&[3, 2, 2, 2]), |_| rng.gen_range(-1.0..1.0));
        let mask = Array2::from_shape_fn((3, 4), |(r, j)| if (r + j) % 2 == 0 { 1.0 } else { 0.0 });
        assert_gradients(&[logits, out_a, out_b], move |_, v| {
            let w = mixing_weights_var(v[0].softmax_last(), &mask);
            let parts = [
                ExpertPart { expert: 0, rows: vec![0, 2], output: v[1] },
                ExpertPart { expert: 1, rows: vec![1, 2], output: v[2] },
            ];
            mix_var(w, &parts).mse(&t)
        });
    }

    #[test]
    fn mixing_matches_dense_sum() {
        let g = Graph::new();
        let w = Array2::from_shape_vec((2, 2), vec![0.25, 0.75, 1.0, 0.0]).unwrap();
        let a = Tensor::from_elem(IxDyn(&[2, 1, 1, 1]), 2.0);
        let b = Tensor::from_elem(IxDyn(&[1, 1, 1, 1]), 4.0);
        let parts = [
            ExpertPart { expert: 0, rows: vec![0, 1], output: g.constant(a) },
            ExpertPart { expert: 1, rows: vec![0], output: g.constant(b) },
        ];
        let y = mix_var(g.constant(w.into_dyn()), &parts).to_tensor();
        assert_eq!(y.into_raw_vec(), vec![0.5 + 3.0, 2.0]);
    }

    #[test]
    fn router_logits_shape_and_gradients() {
        for pooling in [Pooling::Mean, Pooling::Cls] {
            let r = Router::new(small_config(pooling), 3, 2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
            let batch = random_batch(1, 2, 8, 2, 7);
            let tokens = patch_tokens(&batch, 2);
            assert_eq!(tokens.dim(), (4, 2, 4));
            let out = route(&r, &batch, &PriorSpec::none(), 2).unwrap();
            assert_eq!(out.probs.dim(), (4, 3));
            assert_eq!(out.topk_indices.dim(), (4, 2));
            let again = route(&r, &batch, &PriorSpec::none(), 2).unwrap();
            assert_eq!(out.probs, again.probs);
            let params: Vec<Tensor> = r.params().iter().map(|(_, v)| v.clone()).collect();
            let target = Tensor::from_shape_fn(IxDyn(&[4, 3]), |i| (i[0] + i[1]) as f64 * 0.1);
            assert_gradients(&params, move |_, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                r.logits(&bound, &tokens).unwrap().softmax_last().mse(&target)
            });
        }
    }

    #[test]
    fn router_rejects_bad_config_and_tokens() {
        let mut c = small_config(Pooling::Mean);
        c.num_heads = 3;
        assert!(Router::new(c, 2, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut c = small_config(Pooling::Mean);
        c.epsilon_prior = 0.2;
        assert!(c.validate().is_err());
        let r = Router::new(small_config(Pooling::Mean), 2, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = random_batch(1, 2, 8, 2, 0);
        assert!(route(&r, &batch, &PriorSpec::none(), 1).is_err());
        let ok = random_batch(1, 1, 8, 2, 0);
        assert!(route(&r, &ok, &PriorSpec::soft(vec![1.0, 0.0, 0.0]), 1).is_err());
        let copy = Router::from_params(r.config().clone(), 2, 1, r.params().clone()).unwrap();
        assert_eq!(copy.params().fingerprint(), r.params().fingerprint());
    }

    #[test]
    fn adaptive_pooling() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let p = pool_tokens(x.view(), 2);
        assert_eq!(p.into_raw_vec(), vec![2.5, 4.5, 10.5, 12.5]);
        let p = pool_tokens(x.view(), 4);
        assert_eq!(p.into_raw_vec(), (0..16).map(f64::from).collect::<Vec<_>>());
        let small = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (i * 2 + j) as f64);
        assert_eq!(pool_tokens(small.view(), 4).len(), 16);
    }

    fn scaled_expert(j: usize, x: &Array4<f64>) -> Array4<f64> {
        x.mapv(|v| (j as f64 + 1.0) * v + j as f64)
    }

    #[test]
    fn single_expert_dispatch_is_the_expert() {
        let batch = random_batch(2, 1, 8, 2, 8);
        let out = output(Array2::ones((8, 1)), 1);
        let spec = ResampleSpec::matched();
        for strategy in [Strategy::TopK, Strategy::Dense] {
            let f = dispatch_with(&batch, &out, strategy, 1, &spec, |j, x| Ok(scaled_expert(j, x))).unwrap();
            let full = batch.patches.clone().into_shape((8, 1, 8, 8)).unwrap();
            let native = downsample(scaled_expert(0, &full).view(), (4, 4), &spec).unwrap();
            let expect = aggregate_stacked(native.view(), 2).unwrap();
            assert_eq!(f.values(), &expect);
        }
    }

    #[test]
    fn dense_one_hot_equals_top1_and_dense_equals_top_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = random_batch(1, 1, 8, 2, 10);
        let spec = ResampleSpec::default();
        let mut onehot = Array2::zeros((4, 3));
        for r in 0..4 {
            onehot[[r, rng.gen_range(0..3)]] = 1.0;
        }
        let run = |p: &Array2<f64>, strategy, k| {
            dispatch_with(&batch, &output(p.clone(), 1), strategy, k, &spec, |j, x| Ok(scaled_expert(j, x)))
                .unwrap()
        };
        assert_eq!(run(&onehot, Strategy::Dense, 1).values(), run(&onehot, Strategy::TopK, 1).values());
        let soft = Array2::from_shape_fn((4, 3), |_| rng.gen_range(0.1..1.0));
        let soft = &soft / &soft.sum_axis(Axis(1)).insert_axis(Axis(1));
        assert_eq!(run(&soft, Strategy::Dense, 3).values(), run(&soft, Strategy::TopK, 3).values());
    }

    #[test]
    fn topk_dispatch_evaluates_only_selected_experts() {
        let batch = random_batch(2, 1, 8, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let probs = Array2::from_shape_fn((8, 4), |_| rng.gen_range(0.0..1.0));
        let out = output(probs, 2);
        let mut per_expert = [0usize; 4];
        dispatch_with(&batch, &out, Strategy::TopK, 2, &ResampleSpec::default(), |j, x| {
            per_expert[j] += x.shape()[0];
            Ok(scaled_expert(j, x))
        })
        .unwrap();
        assert_eq!(per_expert.iter().sum::<usize>(), 2 * 8);
        for j in 0..4 {
            let expected = out.topk_indices.iter().filter(|&&i| i == j).count();
            assert_eq!(per_expert[j], expected);
        }
        let mut dense_calls = 0;
        dispatch_with(&batch, &out, Strategy::Dense, 2, &ResampleSpec::default(), |j, x| {
            dense_calls += x.shape()[0];
            Ok(scaled_expert(j, x))
        })
        .unwrap();
        assert_eq!(dense_calls, 4 * 8);
    }

    fn logits_strategy(rows: usize, m: usize) -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-30.0..30.0f64, rows * m)
    }

    proptest! {
        #[test]
        fn rows_stay_on_simplex(logits in logits_strategy(3, 4), w in proptest::collection::vec(0.0..1.0f64, 4), mode in 0u8..3) {
            let spec = PriorSpec { mode: [PriorMode::None, PriorMode::Soft, PriorMode::Hard][mode as usize], weights: w, per_patch: None };
            let prior = spec.resolve(4, 3, 1e-3).unwrap();
            let p = probs_for(Array2::from_shape_vec((3, 4), logits).unwrap(), &prior);
            for row in p.outer_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                let e = load_entropy(row.insert_axis(Axis(0)));
                prop_assert!(e >= 0.0 && e <= 4f64.ln() + 1e-12);
            }
            let (_, tw) = select_topk(p.view(), 2).unwrap();
            for row in tw.outer_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn uniform_prior_preserves_ranking(logits in logits_strategy(2, 5)) {
            let l = Array2::from_shape_vec((2, 5), logits).unwrap();
            let plain = probs_for(l.clone(), &PriorSpec::none().resolve(5, 2, 1e-3).unwrap());
            let soft = probs_for(l, &PriorSpec::soft(vec![0.2; 5]).resolve(5, 2, 1e-3).unwrap());
            let a = output(plain, 3);
            let b = output(soft, 3);
            prop_assert_eq!(a.argmax(), b.argmax());
            prop_assert_eq!(a.topk_indices, b.topk_indices);
        }

        #[test]
        fn kl_is_nonnegative(a in proptest::collection::vec(0.0..1.0f64, 4), b in proptest::collection::vec(0.0..1.0f64, 4)) {
            let smooth = |v: &Vec<f64>| {
                let t: f64 = v.iter().sum::<f64>() + 4e-3;
                v.iter().map(|x| (x + 1e-3) / t).collect::<Vec<_>>()
            };
            let (p, q) = (smooth(&a), smooth(&b));
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
            let gap: f64 = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum();
            if gap > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn one_hot_rows_have_lower_loss(raw in proptest::collection::vec(0.01..1.0f64, 3), hot in 0usize..3) {
            let prior = PriorSpec::none().resolve(3, 1, 1e-3).unwrap();
            let t: f64 = raw.iter().sum();
            let interior = Array2::from_shape_vec((1, 3), raw.iter().map(|v| v / t).collect()).unwrap();
            let mut onehot = Array2::zeros((1, 3));
            onehot[[0, hot]] = 1.0;
            let q = prior.smoothed().row(0).to_vec();
            let excess = |p: &Array2<f64>| {
                router_loss(p.view(), &prior, 1.0).unwrap() - kl_divergence(&p.row(0).to_vec(), &q).unwrap()
            };
            prop_assert!(excess(&onehot) < excess(&interior));
        }
    }
}
