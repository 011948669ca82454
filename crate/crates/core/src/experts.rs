//! Fourier neural operator experts and ensembles.

use crate::autograd::{Bound, Graph, ParamSet, Tensor, Var};
use crate::error::{M2mError, Result};
use crate::spectral::{check_modes, spectral_conv};
use ndarray::{Array4, ArrayView4, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }
}

fn default_hidden() -> usize {
    6
}

fn default_layers() -> usize {
    4
}

fn default_channels() -> usize {
    1
}

/// Architecture of one expert. `projection_channels` of zero means `4 * hidden_channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub modes: usize,
    #[serde(default = "default_hidden")]
    pub hidden_channels: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    #[serde(default = "default_channels")]
    pub out_channels: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub projection_channels: usize,
}

impl ExpertSpec {
    pub fn new(modes: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            modes,
            hidden_channels: default_hidden(),
            num_layers: default_layers(),
            in_channels,
            out_channels,
            activation: Activation::Gelu,
            projection_channels: 0,
        }
    }

    pub fn projection_width(&self) -> usize {
        if self.projection_channels == 0 {
            4 * self.hidden_channels
        } else {
            self.projection_channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("modes", self.modes),
            ("hidden_channels", self.hidden_channels),
            ("num_layers", self.num_layers),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(M2mError::InvalidConfig(format!("expert {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Checks that the spec can process `h x w` inputs.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        check_modes(self.modes, h, w)
    }

    /// Number of trainable scalars, complex weights counted twice.
    pub fn param_count(&self) -> usize {
        let (h, k, p) = (self.hidden_channels, self.modes, self.projection_width());
        let lift = (self.in_channels + 2) * h + h;
        let layer = 2 * h * h * k * k + h * h + h;
        let proj = h * p + p + p * self.out_channels + self.out_channels;
        lift + self.num_layers * layer + proj
    }

    /// Display name such as `FNO16`.
    pub fn label(&self) -> String {
        format!("FNO{}", self.modes)
    }
}

/// One expert: a spec and its parameters.
#[derive(Debug, Clone)]
pub struct Expert {
    spec: ExpertSpec,
    params: ParamSet,
}

const LIFT: usize = 0;

impl Expert {
    /// Builds an expert with weights drawn from `rng`.
    pub fn new(spec: ExpertSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let h = spec.hidden_channels;
        let cin = spec.in_channels + 2;
        push_linear(&mut params, "lift", cin, h, rng);
        let scale = 1.0 / (h * h) as f64;
        let k = spec.modes;
        for l in 0..spec.num_layers {
            for part in ["re", "im"] {
                let w = Tensor::from_shape_fn(IxDyn(&[h, h, k, k]), |_| scale * rng.gen::<f64>());
                params.push(format!("layer{l}.spectral.{part}"), w);
            }
            push_linear(&mut params, &format!("layer{l}.pointwise"), h, h, rng);
        }
        let p = spec.projection_width();
        push_linear(&mut params, "proj1", h, p, rng);
        push_linear(&mut params, "proj2", p, spec.out_channels, rng);
        Ok(Self { spec, params })
    }

    /// Wraps existing parameters, checking names and shapes against the spec.
    pub fn from_params(spec: ExpertSpec, params: ParamSet) -> Result<Self> {
        let template = Self::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        if template.params.len() != params.len() {
            return Err(M2mError::ShapeMismatch(format!(
                "expert expects {} arrays, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((tn, tv), (n, v)) in template.params.iter().zip(params.iter()) {
            if tn != n || tv.shape() != v.shape() {
                return Err(M2mError::ShapeMismatch(format!(
                    "expert array {n} {:?} does not match {tn} {:?}",
                    v.shape(),
                    tv.shape()
                )));
            }
        }
        if !params.is_finite() {
            return Err(M2mError::NonFinite("expert parameters".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ExpertSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(M2mError::ShapeMismatch(format!(
                "{} expects [B, {}, H, W], got {shape:?}",
                self.spec.label(),
                self.spec.in_channels
            )));
        }
        self.spec.check_grid(shape[2], shape[3])
    }

    /// Differentiable forward pass on `x: [B, T_in, H, W]` using parameters bound in `graph`.
    pub fn forward<'g>(&self, bound: &Bound<'g>, x: &Array4<f64>) -> Result<Var<'g>> {
        self.check_input(x.shape())?;
        let graph = bound.get(LIFT).graph();
        let input = graph.constant(with_grid(x.view()).into_dyn());
        let act = self.spec.activation;
        let mut h = input.channel_linear(bound.get(0), bound.get(1));
        let mut idx = 2;
        for l in 0..self.spec.num_layers {
            let s = spectral_conv(h, bound.get(idx), bound.get(idx + 1))?;
            let p = h.channel_linear(bound.get(idx + 2), bound.get(idx + 3));
            idx += 4;
            let z = s.add(p);
            h = if l + 1 < self.spec.num_layers { act.apply(z) } else { z };
        }
        let z = act.apply(h.channel_linear(bound.get(idx), bound.get(idx + 1)));
        Ok(z.channel_linear(bound.get(idx + 2), bound.get(idx + 3)))
    }

    /// Inference-only forward pass.
    pub fn predict(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let graph = Graph::new();
        let bound = graph.bind(&self.params, false);
        let y = self.forward(&bound, x)?;
        let out = y.to_tensor();
        Ok(out.into_dimensionality().expect("4d output"))
    }
}

fn push_linear(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Tensor::from_shape_fn(IxDyn(&[fan_out, fan_in]), |_| rng.gen_range(-bound..bound));
    let b = Tensor::from_shape_fn(IxDyn(&[fan_out]), |_| rng.gen_range(-bound..bound));
    params.push(format!("{name}.weight"), w);
    params.push(format!("{name}.bias"), b);
}

/// Appends normalised x and y coordinate channels.
fn with_grid(x: ArrayView4<'_, f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::zeros((b, c + 2, h, w));
    out.slice_mut(ndarray::s![.., ..c, .., ..]).assign(&x);
    let coord = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    for mut sample in out.axis_iter_mut(Axis(0)) {
        for i in 0..h {
            for j in 0..w {
                sample[[c, i, j]] = coord(j, w);
                sample[[c + 1, i, j]] = coord(i, h);
            }
        }
    }
    out
}

/// Seed used for expert `index` of an ensemble built from `seed`.
pub fn expert_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x5851_F42D_4C95_7F2D_u64.wrapping_mul(index as u64 + 1))
}

/// Builds experts in the given order with independent initialisations.
pub fn build_ensemble(specs: &[ExpertSpec], seed: u64) -> Result<Vec<Expert>> {
    let first = specs
        .first()
        .ok_or_else(|| M2mError::InvalidConfig("ensemble needs at least one expert".into()))?;
    for s in specs {
        if s.in_channels != first.in_channels || s.out_channels != first.out_channels {
            return Err(M2mError::InvalidConfig(format!(
                "inconsistent expert channels: {}->{} vs {}->{}",
                s.in_channels, s.out_channels, first.in_channels, first.out_channels
            )));
        }
    }
    specs
        .iter()
        .enumerate()
        .map(|(j, s)| Expert::new(s.clone(), &mut ChaCha8Rng::seed_from_u64(expert_seed(seed, j))))
        .collect()
}

pub fn count_params(expert: &Expert) -> usize {
    expert.count_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::assert_gradients;

    fn random_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn output_shape_matches_input_grid() {
        let e = Expert::new(ExpertSpec::new(8, 1, 1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let y = e.predict(&random_input((1, 1, 64, 64), 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
        let e = Expert::new(ExpertSpec::new(4, 3, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let y = e.predict(&random_input((2, 3, 16, 12), 2)).unwrap();
        assert_eq!(y.shape(), &[2, 2, 16, 12]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut e = Expert::new(ExpertSpec::new(4, 1, 1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for v in e.params_mut().values_mut() {
            v.fill(0.0);
        }
        let y = e.predict(&random_input((1, 1, 16, 16), 3)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inference_is_deterministic() {
        let e = Expert::new(ExpertSpec::new(6, 2, 1), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x = random_input((2, 2, 16, 16), 4);
        let a = e.predict(&x).unwrap();
        let b = e.predict(&x).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn shape_and_mode_errors() {
        let e = Expert::new(ExpertSpec::new(16, 1, 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            e.predict(&random_input((1, 2, 32, 32), 0)),
            Err(M2mError::ShapeMismatch(_))
        ));
        assert!(matches!(
            e.predict(&random_input((1, 1, 16, 16), 0)),
            Err(M2mError::ModeOverflow { .. })
        ));
        let mut spec = ExpertSpec::new(4, 1, 1);
        spec.num_layers = 0;
        assert!(Expert::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn default_ensemble_and_ordering() {
        let specs: Vec<_> = [32, 128, 64, 16].iter().map(|&k| ExpertSpec::new(k, 1, 1)).collect();
        let experts = build_ensemble(&specs, 7).unwrap();
        assert_eq!(experts.len(), 4);
        for (e, k) in experts.iter().zip([32, 128, 64, 16]) {
            assert_eq!(e.spec().modes, k);
            assert_eq!(e.spec().hidden_channels, 6);
        }
        assert_eq!(build_ensemble(&specs[..1], 7).unwrap().len(), 1);
    }

    #[test]
    fn duplicate_specs_get_distinct_parameters() {
        let specs = vec![ExpertSpec::new(4, 1, 1); 3];
        let experts = build_ensemble(&specs, 0).unwrap();
        let prints: Vec<u64> = experts.iter().map(|e| e.params().fingerprint()).collect();
        assert_ne!(prints[0], prints[1]);
        assert_ne!(prints[1], prints[2]);
        assert_ne!(prints[0], prints[2]);
        let again = build_ensemble(&specs, 0).unwrap();
        assert_eq!(again[1].params().fingerprint(), prints[1]);
    }

    #[test]
    fn inconsistent_channels_rejected() {
        let specs = vec![ExpertSpec::new(4, 1, 1), ExpertSpec::new(4, 2, 1)];
        assert!(build_ensemble(&specs, 0).is_err());
        assert!(build_ensemble(&[], 0).is_err());
    }

    #[test]
    fn parameter_counts() {
        let e = Expert::new(ExpertSpec::new(16, 1, 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = count_params(&e);
        assert_eq!(n, e.spec().param_count());
        assert!((20_000..=100_000).contains(&n), "FNO16 has {n} parameters");

        // Independent audit of the spectral share: 2 * hidden^2 * k^2 per layer.
        let spectral = |k: usize| {
            let e = Expert::new(ExpertSpec::new(k, 1, 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            e.params()
                .iter()
                .filter(|(name, _)| name.contains("spectral"))
                .map(|(_, v)| v.len())
                .sum::<usize>()
        };
        assert_eq!(spectral(8), 4 * 2 * 36 * 64);
        assert_eq!(spectral(16), 4 * spectral(8));
    }

    #[test]
    fn from_params_roundtrip() {
        let spec = ExpertSpec::new(4, 1, 1);
        let e = Expert::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let copy = Expert::from_params(spec.clone(), e.params().clone()).unwrap();
        assert_eq!(copy.params().fingerprint(), e.params().fingerprint());
        let other = Expert::new(ExpertSpec::new(5, 1, 1), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(Expert::from_params(spec, other.params().clone()).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut spec = ExpertSpec::new(2, 1, 1);
        spec.num_layers = 2;
        spec.hidden_channels = 3;
        spec.projection_channels = 4;
        let e = Expert::new(spec, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let x = random_input((2, 1, 8, 8), 22);
        let t = random_input((2, 1, 8, 8), 23).into_dyn();
        let params: Vec<Tensor> = e.params().iter().map(|(_, v)| v.clone()).collect();
        assert_gradients(&params, move |_, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            e.forward(&bound, &x).unwrap().mse(&t)
        });
    }
}
