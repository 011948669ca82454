//! Truncated 2D real Fourier transforms and the spectral convolution kernel.
//!
//! The retained spectrum of a `k`-mode layer is the `k x k` block made of
//! row frequencies `0..ceil(k/2)` and `-floor(k/2)..0` (stored in that
//! order) and column frequencies `0..k` of the half spectrum.

use crate::autograd::{Tensor, Var};
use crate::error::{M2mError, Result};
use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;
use realfft::RealFftPlanner;
use rustfft::FftPlanner;
use std::cell::RefCell;

thread_local! {
    static PLANNERS: RefCell<(RealFftPlanner<f64>, FftPlanner<f64>)> =
        RefCell::new((RealFftPlanner::new(), FftPlanner::new()));
}

/// Largest mode count a `h x w` grid can represent.
pub fn max_modes(h: usize, w: usize) -> usize {
    (h / 2 + 1).min(w / 2 + 1)
}

pub fn check_modes(modes: usize, h: usize, w: usize) -> Result<()> {
    if modes == 0 || modes > max_modes(h, w) {
        return Err(M2mError::ModeOverflow {
            modes,
            height: h,
            width: w,
        });
    }
    Ok(())
}

/// Grid row index of each retained row frequency.
pub fn retained_rows(modes: usize, h: usize) -> Vec<usize> {
    let pos = modes.div_ceil(2);
    let neg = modes / 2;
    (0..pos).chain(h - neg..h).collect()
}

/// Hermitian multiplicity of half-spectrum column `q` for width `w`.
fn column_weight(q: usize, w: usize) -> f64 {
    if q == 0 || (w % 2 == 0 && q == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// Unnormalised forward DFT of one real `h x w` plane, restricted to the
/// retained `k x k` block (row-major `[r, q]`).
pub fn rfft2_retained(plane: &[f64], h: usize, w: usize, modes: usize) -> Vec<Complex64> {
    let rows = retained_rows(modes, h);
    let half = w / 2 + 1;
    PLANNERS.with(|p| {
        let (rp, cp) = &mut *p.borrow_mut();
        let r2c = rp.plan_fft_forward(w);
        let fft = cp.plan_fft_forward(h);
        let mut input = r2c.make_input_vec();
        let mut spec = r2c.make_output_vec();
        // column-major staging: cols[q][row]
        let mut cols = vec![Complex64::new(0.0, 0.0); modes * h];
        for row in 0..h {
            input.copy_from_slice(&plane[row * w..(row + 1) * w]);
            r2c.process(&mut input, &mut spec).expect("r2c length");
            debug_assert_eq!(spec.len(), half);
            for q in 0..modes {
                cols[q * h + row] = spec[q];
            }
        }
        for q in 0..modes {
            fft.process(&mut cols[q * h..(q + 1) * h]);
        }
        let mut out = vec![Complex64::new(0.0, 0.0); modes * modes];
        for (r, &row) in rows.iter().enumerate() {
            for q in 0..modes {
                out[r * modes + q] = cols[q * h + row];
            }
        }
        out
    })
}

/// `Σ_{retained (r, q)} c_q · Re(z[r, q] · e^{+iθ})` on the `h x w` grid, i.e. the
/// unnormalised inverse real transform of the zero-padded half spectrum.
pub fn irfft2_retained(block: &[Complex64], h: usize, w: usize, modes: usize) -> Vec<f64> {
    let rows = retained_rows(modes, h);
    let half = w / 2 + 1;
    PLANNERS.with(|p| {
        let (rp, cp) = &mut *p.borrow_mut();
        let c2r = rp.plan_fft_inverse(w);
        let ifft = cp.plan_fft_inverse(h);
        let mut cols = vec![Complex64::new(0.0, 0.0); modes * h];
        for (r, &row) in rows.iter().enumerate() {
            for q in 0..modes {
                cols[q * h + row] = block[r * modes + q];
            }
        }
        for q in 0..modes {
            ifft.process(&mut cols[q * h..(q + 1) * h]);
        }
        let mut spec = vec![Complex64::new(0.0, 0.0); half];
        let mut out_row = c2r.make_output_vec();
        let mut out = vec![0.0; h * w];
        for row in 0..h {
            spec.fill(Complex64::new(0.0, 0.0));
            for q in 0..modes {
                spec[q] = cols[q * h + row];
            }
            spec[0].im = 0.0;
            if w % 2 == 0 {
                spec[half - 1].im = 0.0;
            }
            c2r.process(&mut spec, &mut out_row).expect("c2r length");
            out[row * w..(row + 1) * w].copy_from_slice(&out_row);
        }
        out
    })
}

/// Spectral convolution of `x: [N, C_in, H, W]` with complex weights given as
/// real/imaginary parts `[C_in, C_out, k, k]`.
pub fn spectral_conv_forward(
    x: &Tensor,
    wr: &Tensor,
    wi: &Tensor,
) -> Result<(Tensor, Vec<Complex64>)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(M2mError::ShapeMismatch(format!(
            "spectral conv expects [N, C, H, W], got {shape:?}"
        )));
    }
    let (n, cin, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (wcin, cout, k) = (wr.shape()[0], wr.shape()[1], wr.shape()[2]);
    if wcin != cin || wi.shape() != wr.shape() || wr.shape()[3] != k {
        return Err(M2mError::ShapeMismatch(format!(
            "spectral weights {:?} do not fit input {shape:?}",
            wr.shape()
        )));
    }
    check_modes(k, h, w)?;
    let xs = x.as_slice().expect("standard layout");
    let (wrs, wis) = (wr.as_slice().unwrap(), wi.as_slice().unwrap());
    let kk = k * k;
    let plane = h * w;
    let mut spectra = Vec::with_capacity(n * cin * kk);
    for ni in 0..n {
        for c in 0..cin {
            let off = (ni * cin + c) * plane;
            spectra.extend(rfft2_retained(&xs[off..off + plane], h, w, k));
        }
    }
    let norm = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(n * cout * plane);
    let mut acc = vec![Complex64::new(0.0, 0.0); kk];
    for ni in 0..n {
        for o in 0..cout {
            acc.fill(Complex64::new(0.0, 0.0));
            for c in 0..cin {
                let xsp = &spectra[(ni * cin + c) * kk..(ni * cin + c + 1) * kk];
                let woff = (c * cout + o) * kk;
                for m in 0..kk {
                    acc[m] += xsp[m] * Complex64::new(wrs[woff + m], wis[woff + m]);
                }
            }
            out.extend(irfft2_retained(&acc, h, w, k).into_iter().map(|v| v * norm));
        }
    }
    let value = ArrayD::from_shape_vec(IxDyn(&[n, cout, h, w]), out).unwrap();
    Ok((value, spectra))
}

fn spectral_conv_backward(
    g: &Tensor,
    x: &Tensor,
    wr: &Tensor,
    wi: &Tensor,
    spectra: &[Complex64],
) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (wr.shape()[1], wr.shape()[2]);
    let kk = k * k;
    let plane = h * w;
    let norm = 1.0 / (h * w) as f64;
    let gs = g.as_slice().unwrap();
    let (wrs, wis) = (wr.as_slice().unwrap(), wi.as_slice().unwrap());
    // complex gradient of the retained output spectrum
    let mut gy = Vec::with_capacity(n * cout * kk);
    for ni in 0..n {
        for o in 0..cout {
            let off = (ni * cout + o) * plane;
            let mut s = rfft2_retained(&gs[off..off + plane], h, w, k);
            for (m, v) in s.iter_mut().enumerate() {
                *v *= column_weight(m % k, w) * norm;
            }
            gy.extend(s);
        }
    }
    let mut gwr = vec![0.0; wrs.len()];
    let mut gwi = vec![0.0; wis.len()];
    let mut gx = Vec::with_capacity(x.len());
    let mut gxs = vec![Complex64::new(0.0, 0.0); kk];
    for ni in 0..n {
        for c in 0..cin {
            gxs.fill(Complex64::new(0.0, 0.0));
            let xsp = &spectra[(ni * cin + c) * kk..(ni * cin + c + 1) * kk];
            for o in 0..cout {
                let gyo = &gy[(ni * cout + o) * kk..(ni * cout + o + 1) * kk];
                let woff = (c * cout + o) * kk;
                for m in 0..kk {
                    let gw = gyo[m] * xsp[m].conj();
                    gwr[woff + m] += gw.re;
                    gwi[woff + m] += gw.im;
                    gxs[m] += gyo[m] * Complex64::new(wrs[woff + m], -wis[woff + m]);
                }
            }
            for (m, v) in gxs.iter_mut().enumerate() {
                *v /= column_weight(m % k, w);
            }
            gx.extend(irfft2_retained(&gxs, h, w, k));
        }
    }
    (
        ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap(),
        ArrayD::from_shape_vec(wr.raw_dim(), gwr).unwrap(),
        ArrayD::from_shape_vec(wi.raw_dim(), gwi).unwrap(),
    )
}

/// Differentiable spectral convolution.
pub fn spectral_conv<'g>(x: Var<'g>, wr: Var<'g>, wi: Var<'g>) -> Result<Var<'g>> {
    let (value, spectra) = {
        let (xv, wrv, wiv) = (x.value(), wr.value(), wi.value());
        spectral_conv_forward(&xv, &wrv, &wiv)?
    };
    Ok(x.graph().op(&[x, wr, wi], value, move |g, p, _| {
        let (gx, gwr, gwi) = spectral_conv_backward(g, p[0], p[1], p[2], &spectra);
        vec![Some(gx), Some(gwr), Some(gwi)]
    }))
}
