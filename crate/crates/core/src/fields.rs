//! Grid fields and the multi-scale segmentation / resampling / reassembly
//! pipeline.
//!
//! Patches are numbered row-major: patch `(i, j)` of an `S x S` split has
//! index `i * S + j`. The router, the dispatch step and the run logs all use
//! this numbering.

use crate::autograd::{Tensor, Var};
use crate::error::{M2mError, Result};
use ndarray::{s, Array4, Array5, ArrayView4, Axis, IxDyn};

/// A discretised space-time block `[batch, time, height, width]` on the unit square.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    values: Array4<f64>,
    grid_spacing: f64,
}

impl Field {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        let (_, t, h, w) = values.dim();
        if t < 1 || h < 2 || w < 2 {
            return Err(M2mError::ShapeMismatch(format!(
                "field needs T >= 1 and H, W >= 2, got {:?}",
                values.shape()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(M2mError::NonFinite("field values".into()));
        }
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        Ok(Self {
            grid_spacing: 1.0 / (h as f64 - 1.0),
            values,
        })
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array4<f64> {
        self.values
    }

    pub fn grid_spacing(&self) -> f64 {
        self.grid_spacing
    }

    /// `(batch, time, height, width)`
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpMethod {
    Nearest,
    #[default]
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownMethod {
    Nearest,
    #[default]
    Area,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResampleSpec {
    pub up_method: UpMethod,
    pub down_method: DownMethod,
    /// Requires `downsample(interpolate_up(p)) == p` exactly.
    pub matched: bool,
}

impl Default for ResampleSpec {
    fn default() -> Self {
        Self {
            up_method: UpMethod::Bilinear,
            down_method: DownMethod::Area,
            matched: false,
        }
    }
}

impl ResampleSpec {
    /// Nearest up / nearest down: exact mutual inverses.
    pub fn matched() -> Self {
        Self {
            up_method: UpMethod::Nearest,
            down_method: DownMethod::Nearest,
            matched: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.matched
            && (self.up_method != UpMethod::Nearest || self.down_method != DownMethod::Nearest)
        {
            return Err(M2mError::InvalidConfig(
                "a matched resample spec must use nearest/nearest".into(),
            ));
        }
        Ok(())
    }
}

/// Row-major patch numbering for an `S x S` split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    scale: usize,
}

impl PatchLayout {
    pub fn new(scale: usize) -> Self {
        assert!(scale >= 1, "scale must be positive");
        Self { scale }
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.scale * self.scale
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.scale && j < self.scale);
        i * self.scale + j
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        debug_assert!(index < self.len());
        (index / self.scale, index % self.scale)
    }
}

/// The `S²`-way segmented and upsampled view of a field.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    /// `[B, S², T, H, W]`
    pub patches: Array5<f64>,
    pub layout: PatchLayout,
}

impl PatchBatch {
    pub fn scale(&self) -> usize {
        self.layout.scale()
    }

    pub fn batch(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.layout.len()
    }

    /// Patch `p` of sample `b` as `[T, H, W]`.
    pub fn patch(&self, b: usize, p: usize) -> ndarray::ArrayView3<'_, f64> {
        self.patches.slice(s![b, p, .., .., ..])
    }
}

fn check_divisible(h: usize, w: usize, scale: usize) -> Result<()> {
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(M2mError::IndivisibleDimensions {
            height: h,
            width: w,
            scale,
        });
    }
    Ok(())
}

/// Splits `[B, T, H, W]` into `S²` non-overlapping `[B, T, H/S, W/S]` patches.
pub fn segment(field: ArrayView4<'_, f64>, scale: usize) -> Result<Vec<Array4<f64>>> {
    let (_, _, h, w) = field.dim();
    check_divisible(h, w, scale)?;
    let (ph, pw) = (h / scale, w / scale);
    let layout = PatchLayout::new(scale);
    Ok((0..layout.len())
        .map(|idx| {
            let (i, j) = layout.coords(idx);
            field
                .slice(s![.., .., i * ph..(i + 1) * ph, j * pw..(j + 1) * pw])
                .to_owned()
        })
        .collect())
}

/// Inverse of [`segment`]: tiles `S²` patches back into one field.
pub fn aggregate(patches: &[Array4<f64>], scale: usize) -> Result<Field> {
    Field::new(aggregate_array(patches, scale)?)
}

pub fn aggregate_array(patches: &[Array4<f64>], scale: usize) -> Result<Array4<f64>> {
    let layout = PatchLayout::new(scale);
    if patches.len() != layout.len() {
        return Err(M2mError::PatchCount {
            expected: layout.len(),
            got: patches.len(),
        });
    }
    let dim = patches[0].dim();
    if let Some(bad) = patches.iter().find(|p| p.dim() != dim) {
        return Err(M2mError::ShapeMismatch(format!(
            "patch shapes differ: {:?} vs {:?}",
            bad.shape(),
            patches[0].shape()
        )));
    }
    let (b, t, ph, pw) = dim;
    let mut out = Array4::<f64>::zeros((b, t, ph * scale, pw * scale));
    for (idx, patch) in patches.iter().enumerate() {
        let (i, j) = layout.coords(idx);
        out.slice_mut(s![.., .., i * ph..(i + 1) * ph, j * pw..(j + 1) * pw])
            .assign(patch);
    }
    Ok(out)
}

fn factors(src: (usize, usize), target: (usize, usize)) -> Result<(usize, usize)> {
    let err = || M2mError::NonMultipleTarget {
        source_dims: src,
        target,
    };
    if src.0 == 0 || src.1 == 0 || target.0 % src.0 != 0 || target.1 % src.1 != 0 {
        return Err(err());
    }
    let f = (target.0 / src.0, target.1 / src.1);
    if f.0 == 0 || f.1 == 0 {
        return Err(err());
    }
    Ok(f)
}

/// Half-pixel-centred linear interpolation weights for one axis:
/// output index -> (i0, i1, weight of i1).
fn linear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Upsamples `[B, T, h, w]` to `[B, T, H, W]`.
pub fn interpolate_up(
    patch: ArrayView4<'_, f64>,
    target: (usize, usize),
    spec: &ResampleSpec,
) -> Result<Array4<f64>> {
    spec.validate()?;
    let (b, t, h, w) = patch.dim();
    let (fh, fw) = factors((h, w), target)?;
    let mut out = Array4::<f64>::zeros((b, t, target.0, target.1));
    match spec.up_method {
        UpMethod::Nearest => {
            for ((bi, ti, y, x), v) in out.indexed_iter_mut() {
                *v = patch[[bi, ti, y / fh, x / fw]];
            }
        }
        UpMethod::Bilinear => {
            let rows = linear_taps(h, fh);
            let cols = linear_taps(w, fw);
            for bi in 0..b {
                for ti in 0..t {
                    let src = patch.slice(s![bi, ti, .., ..]);
                    let mut dst = out.slice_mut(s![bi, ti, .., ..]);
                    for (y, &(r0, r1, wy)) in rows.iter().enumerate() {
                        for (x, &(c0, c1, wx)) in cols.iter().enumerate() {
                            let top = src[[r0, c0]] * (1.0 - wx) + src[[r0, c1]] * wx;
                            let bot = src[[r1, c0]] * (1.0 - wx) + src[[r1, c1]] * wx;
                            dst[[y, x]] = top * (1.0 - wy) + bot * wy;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reduces `[B, T, H, W]` to `[B, T, h, w]`.
pub fn downsample(
    full: ArrayView4<'_, f64>,
    target: (usize, usize),
    spec: &ResampleSpec,
) -> Result<Array4<f64>> {
    spec.validate()?;
    let (b, t, h, w) = full.dim();
    let (fh, fw) = factors(target, (h, w))?;
    let out = match spec.down_method {
        DownMethod::Nearest => {
            Array4::from_shape_fn((b, t, target.0, target.1), |(bi, ti, y, x)| {
                full[[bi, ti, y * fh, x * fw]]
            })
        }
        DownMethod::Area => {
            let norm = 1.0 / (fh * fw) as f64;
            Array4::from_shape_fn((b, t, target.0, target.1), |(bi, ti, y, x)| {
                full.slice(s![bi, ti, y * fh..(y + 1) * fh, x * fw..(x + 1) * fw])
                    .sum()
                    * norm
            })
        }
    };
    Ok(out)
}

/// Segments every sample and upsamples each patch back to full resolution.
pub fn make_patch_batch(field: &Field, scale: usize, spec: &ResampleSpec) -> Result<PatchBatch> {
    let (b, t, h, w) = field.dim();
    let parts = segment(field.values().view(), scale)?;
    let layout = PatchLayout::new(scale);
    let mut patches = Array5::<f64>::zeros((b, layout.len(), t, h, w));
    for (idx, part) in parts.iter().enumerate() {
        let up = interpolate_up(part.view(), (h, w), spec)?;
        patches.index_axis_mut(Axis(1), idx).assign(&up);
    }
    Ok(PatchBatch { patches, layout })
}

/// Differentiable [`downsample`] on a `[N, T, H, W]` variable.
pub fn downsample_var<'g>(x: Var<'g>, factor: usize, spec: &ResampleSpec) -> Var<'g> {
    if factor == 1 {
        return x;
    }
    let method = spec.down_method;
    let value = {
        let v = x.value();
        let v4 = v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (_, _, h, w) = v4.dim();
        downsample(v4, (h / factor, w / factor), spec)
            .expect("downsample_var: indivisible")
            .into_dyn()
    };
    x.graph().op(&[x], value, move |g, p, _| {
        let mut gx = Tensor::zeros(p[0].raw_dim());
        let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (n, t, h, w) = g4.dim();
        let norm = 1.0 / (factor * factor) as f64;
        for ni in 0..n {
            for ti in 0..t {
                for y in 0..h {
                    for xx in 0..w {
                        let gv = g4[[ni, ti, y, xx]];
                        match method {
                            DownMethod::Nearest => {
                                gx[IxDyn(&[ni, ti, y * factor, xx * factor])] += gv;
                            }
                            DownMethod::Area => {
                                gx.slice_mut(s![
                                    ni,
                                    ti,
                                    y * factor..(y + 1) * factor,
                                    xx * factor..(xx + 1) * factor
                                ])
                                .mapv_inplace(|a| a + gv * norm);
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gx)]
    })
}

/// Differentiable [`aggregate`]: `[B·S², T, h, w]` (sample-major) to `[B, T, S·h, S·w]`.
pub fn aggregate_var(x: Var<'_>, scale: usize) -> Var<'_> {
    let value = {
        let v = x.value();
        let v4 = v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        assemble(v4, scale).into_dyn()
    };
    x.graph().op(&[x], value, move |g, _, _| {
        let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        vec![Some(disassemble(g4, scale).into_dyn())]
    })
}

/// Non-differentiable counterpart of [`aggregate_var`] on sample-major stacked patches.
pub fn aggregate_stacked(x: ArrayView4<'_, f64>, scale: usize) -> Result<Array4<f64>> {
    let s2 = scale * scale;
    if scale == 0 || x.shape()[0] % s2 != 0 {
        return Err(M2mError::PatchCount {
            expected: s2,
            got: x.shape()[0],
        });
    }
    Ok(assemble(x, scale))
}

/// Segments `[B, T, H, W]` into sample-major stacked patches `[B·S², T, H/S, W/S]`.
pub fn segment_stacked(x: ArrayView4<'_, f64>, scale: usize) -> Result<Array4<f64>> {
    let (_, _, h, w) = x.dim();
    check_divisible(h, w, scale)?;
    Ok(disassemble(x, scale))
}

fn assemble(x: ArrayView4<'_, f64>, scale: usize) -> Array4<f64> {
    let s2 = scale * scale;
    let (n, t, ph, pw) = x.dim();
    assert_eq!(n % s2, 0, "patch count is not a multiple of S²");
    let b = n / s2;
    let layout = PatchLayout::new(scale);
    let mut out = Array4::<f64>::zeros((b, t, ph * scale, pw * scale));
    for bi in 0..b {
        for idx in 0..s2 {
            let (i, j) = layout.coords(idx);
            out.slice_mut(s![bi, .., i * ph..(i + 1) * ph, j * pw..(j + 1) * pw])
                .assign(&x.index_axis(Axis(0), bi * s2 + idx));
        }
    }
    out
}

fn disassemble(x: ArrayView4<'_, f64>, scale: usize) -> Array4<f64> {
    let (b, t, h, w) = x.dim();
    let (ph, pw) = (h / scale, w / scale);
    let s2 = scale * scale;
    let layout = PatchLayout::new(scale);
    let mut out = Array4::<f64>::zeros((b * s2, t, ph, pw));
    for bi in 0..b {
        for idx in 0..s2 {
            let (i, j) = layout.coords(idx);
            out.index_axis_mut(Axis(0), bi * s2 + idx)
                .assign(&x.slice(s![bi, .., i * ph..(i + 1) * ph, j * pw..(j + 1) * pw]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn field_rejects_bad_shapes() {
        assert!(Field::new(Array4::zeros((1, 1, 1, 4))).is_err());
        assert!(Field::new(Array4::zeros((1, 0, 4, 4))).is_err());
        let mut v = Array4::zeros((1, 1, 4, 4));
        v[[0, 0, 1, 1]] = f64::NAN;
        assert!(Field::new(v).is_err());
        let f = Field::new(Array4::zeros((1, 1, 5, 5))).unwrap();
        assert_eq!(f.grid_spacing(), 0.25);
    }

    #[test]
    fn segment_128_into_quadrants() {
        let u = Array4::<f64>::zeros((1, 1, 128, 128));
        let parts = segment(u.view(), 2).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|p| p.dim() == (1, 1, 64, 64)));
    }

    #[test]
    fn segment_scale_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = random_field(&mut rng, (2, 3, 6, 4));
        let parts = segment(u.view(), 1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], u);
    }

    #[test]
    fn segment_index_arithmetic_6x6_scale_3() {
        // Cell (r, c) carries the value 10·r + c, so every patch cell can be
        // traced back to its source coordinates.
        let u = Array4::from_shape_fn((1, 1, 6, 6), |(_, _, r, c)| (10 * r + c) as f64);
        let parts = segment(u.view(), 3).unwrap();
        assert_eq!(parts.len(), 9);
        let p7 = &parts[7];
        assert_eq!(p7.dim(), (1, 1, 2, 2));
        let expected = array![[42.0, 43.0], [52.0, 53.0]];
        assert_eq!(p7.slice(s![0, 0, .., ..]), expected);
        // Every source cell appears exactly once across all patches.
        let mut seen = vec![0usize; 36];
        for part in &parts {
            for v in part.iter() {
                let code = *v as usize;
                seen[(code / 10) * 6 + code % 10] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn segment_rejects_indivisible() {
        let u = Array4::<f64>::zeros((1, 1, 6, 6));
        assert!(matches!(
            segment(u.view(), 4),
            Err(M2mError::IndivisibleDimensions { .. })
        ));
    }

    #[test]
    fn nearest_up_replicates_cells() {
        let p = array![[1.0, 2.0], [3.0, 4.0]].into_shape((1, 1, 2, 2)).unwrap();
        let up = interpolate_up(p.view(), (4, 4), &ResampleSpec::matched()).unwrap();
        let expected = array![
            [1.0, 1.0, 2.0, 2.0],
            [1.0, 1.0, 2.0, 2.0],
            [3.0, 3.0, 4.0, 4.0],
            [3.0, 3.0, 4.0, 4.0]
        ];
        assert_eq!(up.slice(s![0, 0, .., ..]), expected);
    }

    #[test]
    fn bilinear_ramp() {
        let p = array![[0.0, 1.0], [0.0, 1.0]].into_shape((1, 1, 2, 2)).unwrap();
        let up = interpolate_up(p.view(), (4, 4), &ResampleSpec::default()).unwrap();
        let first = up.slice(s![0, 0, 0, ..]).to_owned();
        assert_eq!(first, array![0.0, 0.25, 0.75, 1.0]);
        for r in 0..4 {
            assert_eq!(up.slice(s![0, 0, r, ..]), first);
        }
        assert!(first.windows(2).into_iter().all(|w| w[0] < w[1]));
        assert_eq!(first[0], 0.0);
        assert_eq!(first[3], 1.0);
    }

    #[test]
    fn constants_are_fixed_points() {
        let p = Array4::from_elem((1, 2, 3, 3), 2.5);
        for spec in [ResampleSpec::default(), ResampleSpec::matched()] {
            let up = interpolate_up(p.view(), (12, 9), &spec).unwrap();
            assert!(up.iter().all(|&v| v == 2.5));
            let down = downsample(up.view(), (3, 3), &spec).unwrap();
            assert!(down.iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn area_mean_of_blocks() {
        let full = array![
            [1.0, 1.0, 2.0, 2.0],
            [1.0, 1.0, 2.0, 2.0],
            [3.0, 3.0, 4.0, 4.0],
            [3.0, 3.0, 4.0, 4.0]
        ]
        .into_shape((1, 1, 4, 4))
        .unwrap();
        let down = downsample(full.view(), (2, 2), &ResampleSpec::default()).unwrap();
        assert_eq!(down.slice(s![0, 0, .., ..]), array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn resample_rejects_non_multiples() {
        let p = Array4::<f64>::zeros((1, 1, 3, 3));
        assert!(interpolate_up(p.view(), (4, 6), &ResampleSpec::default()).is_err());
        assert!(downsample(p.view(), (2, 3), &ResampleSpec::default()).is_err());
        let bad = ResampleSpec {
            up_method: UpMethod::Bilinear,
            down_method: DownMethod::Nearest,
            matched: true,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn aggregate_constant_quadrants() {
        let patches: Vec<_> = (1..=4).map(|c| Array4::from_elem((1, 1, 2, 2), c as f64)).collect();
        let f = aggregate(&patches, 2).unwrap();
        let v = f.values();
        assert_eq!(v[[0, 0, 0, 0]], 1.0);
        assert_eq!(v[[0, 0, 0, 3]], 2.0);
        assert_eq!(v[[0, 0, 3, 0]], 3.0);
        assert_eq!(v[[0, 0, 3, 3]], 4.0);
        assert!(aggregate(&patches[..3], 2).is_err());
        let mut odd = patches.clone();
        odd[2] = Array4::zeros((1, 1, 3, 2));
        assert!(aggregate(&odd, 2).is_err());
    }

    #[test]
    fn aggregate_segment_roundtrip_128() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = random_field(&mut rng, (1, 1, 128, 128));
        for s in [1, 2, 4, 8] {
            let back = aggregate_array(&segment(u.view(), s).unwrap(), s).unwrap();
            assert_eq!(back, u);
        }
    }

    #[test]
    fn patch_batch_layout() {
        let u = Array4::from_shape_fn((2, 1, 4, 4), |(b, _, r, c)| (b * 100 + r * 10 + c) as f64);
        let pb = make_patch_batch(&Field::new(u).unwrap(), 2, &ResampleSpec::matched()).unwrap();
        assert_eq!(pb.patches.dim(), (2, 4, 1, 4, 4));
        // patch (1, 0) of sample 1 starts at source row 2, column 0
        assert_eq!(pb.patch(1, pb.layout.index(1, 0))[[0, 0, 0]], 120.0);
        for idx in 0..4 {
            let (i, j) = pb.layout.coords(idx);
            assert_eq!(pb.layout.index(i, j), idx);
        }
    }

    #[test]
    fn var_ops_match_array_ops() {
        use crate::autograd::Graph;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_field(&mut rng, (8, 2, 4, 4));
        let g = Graph::new();
        let v = g.constant(x.clone().into_dyn());
        let agg = aggregate_var(v, 2).to_tensor();
        let parts: Vec<Array4<f64>> = (0..4)
            .map(|i| x.slice(s![i..i + 1, .., .., ..]).to_owned())
            .collect();
        assert_eq!(agg.slice(s![0..1, .., .., ..]).to_owned().into_dimensionality().unwrap(),
            aggregate_array(&parts, 2).unwrap());
        let d = downsample_var(v, 2, &ResampleSpec::default()).to_tensor();
        assert_eq!(
            d.into_dimensionality::<ndarray::Ix4>().unwrap(),
            downsample(x.view(), (2, 2), &ResampleSpec::default()).unwrap()
        );
    }

    #[test]
    fn var_ops_gradients() {
        use crate::autograd::check::assert_gradients;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_field(&mut rng, (4, 1, 4, 4)).into_dyn();
        let w = Array::from_shape_fn((1, 1, 4, 4), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        for spec in [ResampleSpec::default(), ResampleSpec::matched()] {
            let w = w.clone();
            assert_gradients(&[x.clone()], move |_, v| {
                let d = downsample_var(v[0], 2, &spec);
                aggregate_var(d, 2).mul_const(&w).sum()
            });
        }
    }

    proptest! {
        #[test]
        fn partition_and_roundtrip(s in 1usize..5, ph in 1usize..5, pw in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_field(&mut rng, (1, 2, s * ph, s * pw));
            let parts = segment(u.view(), s).unwrap();
            prop_assert_eq!(parts.len(), s * s);
            let total: usize = parts.iter().map(|p| p.len()).sum();
            prop_assert_eq!(total, u.len());
            prop_assert_eq!(aggregate_array(&parts, s).unwrap(), u);
        }

        #[test]
        fn stacked_segments_roundtrip(s in 1usize..5, b in 1usize..3, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_field(&mut rng, (b, 2, 2 * s, 3 * s));
            let stacked = segment_stacked(u.view(), s).unwrap();
            let parts = segment(u.view(), s).unwrap();
            for bi in 0..b {
                for (idx, part) in parts.iter().enumerate() {
                    prop_assert_eq!(stacked.index_axis(Axis(0), bi * s * s + idx), part.index_axis(Axis(0), bi));
                }
            }
            prop_assert_eq!(aggregate_stacked(stacked.view(), s).unwrap(), u);
        }

        #[test]
        fn matched_resample_roundtrip(f in 1usize..5, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_field(&mut rng, (1, 1, h, w));
            let spec = ResampleSpec::matched();
            let up = interpolate_up(p.view(), (h * f, w * f), &spec).unwrap();
            prop_assert_eq!(downsample(up.view(), (h, w), &spec).unwrap(), p);
        }

        #[test]
        fn interpolation_respects_bounds(f in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_field(&mut rng, (1, 1, 3, 4));
            let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for spec in [ResampleSpec::default(), ResampleSpec::matched()] {
                let up = interpolate_up(p.view(), (3 * f, 4 * f), &spec).unwrap();
                prop_assert!(up.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
            }
        }
    }
}
