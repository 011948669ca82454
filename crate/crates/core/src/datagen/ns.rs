//! Pseudo-spectral 2D Navier–Stokes solver in vorticity form on the periodic unit square.
//!
//! Integrates `∂w/∂t + u·∇w = ν∇²w + f` with an integrating-factor RK4 scheme
//! and 2/3-rule dealiasing. Velocity comes from the streamfunction `-∇²ψ = w`,
//! `u = ∂ψ/∂y`, `v = -∂ψ/∂x`.

use crate::error::{M2mError, Result};
use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

type Spectrum = Vec<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Forcing {
    /// `amplitude · (sin 2π(x+y) + cos 2π(x+y))`
    #[default]
    DiagonalSinCos,
    None,
    Scaled {
        amplitude: f64,
    },
}

impl Forcing {
    pub fn field(&self, n: usize) -> Array2<f64> {
        let amplitude = match *self {
            Forcing::DiagonalSinCos => 0.1,
            Forcing::None => 0.0,
            Forcing::Scaled { amplitude } => amplitude,
        };
        Array2::from_shape_fn((n, n), |(i, j)| {
            let s = 2.0 * PI * (i as f64 + j as f64) / n as f64;
            amplitude * (s.sin() + s.cos())
        })
    }
}

struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn transform(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        fft.process(data);
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = data[i * n + j];
            }
            fft.process(&mut col);
            for i in 0..n {
                data[i * n + j] = col[i];
            }
        }
    }

    fn forward(&self, real: &[f64]) -> Spectrum {
        let mut data: Spectrum = real.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, &self.fwd);
        data
    }

    fn inverse(&self, spec: &[Complex64]) -> Vec<f64> {
        let mut data = spec.to_vec();
        self.transform(&mut data, &self.inv);
        let norm = 1.0 / (self.n * self.n) as f64;
        data.iter().map(|c| c.re * norm).collect()
    }
}

/// Solver for one grid size, viscosity and time step.
pub struct NsSolver {
    n: usize,
    nu: f64,
    dt: f64,
    fft: Fft2,
    /// Signed integer wavenumbers along x (columns) and y (rows).
    kx: Vec<f64>,
    ky: Vec<f64>,
    dealias: Vec<f64>,
    half_step: Vec<f64>,
    forcing_hat: Spectrum,
    cfl_limit: f64,
}

fn wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

impl NsSolver {
    pub fn new(n: usize, nu: f64, dt: f64, forcing: &Forcing) -> Result<Self> {
        if n < 4 || !n.is_power_of_two() {
            return Err(M2mError::InvalidConfig(format!("NS grid {n} must be a power of two >= 4")));
        }
        if !(nu >= 0.0 && nu.is_finite()) || !(dt > 0.0 && dt.is_finite()) {
            return Err(M2mError::InvalidConfig("NS needs nu >= 0 and dt > 0".into()));
        }
        let fft = Fft2::new(n);
        let mut kx = vec![0.0; n * n];
        let mut ky = vec![0.0; n * n];
        let mut dealias = vec![0.0; n * n];
        let mut half_step = vec![0.0; n * n];
        let cut = n as f64 / 3.0;
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (wavenumber(j, n), wavenumber(i, n));
                let idx = i * n + j;
                kx[idx] = a;
                ky[idx] = b;
                dealias[idx] = if a.abs() < cut && b.abs() < cut { 1.0 } else { 0.0 };
                let lap = 4.0 * PI * PI * (a * a + b * b);
                half_step[idx] = (-nu * lap * dt / 2.0).exp();
            }
        }
        let forcing_hat = fft.forward(forcing.field(n).as_slice().unwrap());
        Ok(Self {
            n,
            nu,
            dt,
            fft,
            kx,
            ky,
            dealias,
            half_step,
            forcing_hat,
            cfl_limit: 1.0,
        })
    }

    pub fn grid(&self) -> usize {
        self.n
    }

    pub fn viscosity(&self) -> f64 {
        self.nu
    }

    pub fn to_spectral(&self, w: &Array2<f64>) -> Spectrum {
        self.fft.forward(w.as_standard_layout().as_slice().unwrap())
    }

    pub fn to_physical(&self, w_hat: &[Complex64]) -> Array2<f64> {
        Array2::from_shape_vec((self.n, self.n), self.fft.inverse(w_hat)).unwrap()
    }

    fn streamfunction(&self, w_hat: &[Complex64]) -> Spectrum {
        w_hat
            .iter()
            .enumerate()
            .map(|(idx, &w)| {
                let k2 = self.kx[idx] * self.kx[idx] + self.ky[idx] * self.ky[idx];
                if k2 == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    w / (4.0 * PI * PI * k2)
                }
            })
            .collect()
    }

    fn derivative(&self, f_hat: &[Complex64], along_x: bool) -> Spectrum {
        let k = if along_x { &self.kx } else { &self.ky };
        f_hat
            .iter()
            .zip(k)
            .map(|(&f, &kk)| f * Complex64::new(0.0, 2.0 * PI * kk))
            .collect()
    }

    /// Velocity `(u, v)` in physical space.
    pub fn velocity(&self, w_hat: &[Complex64]) -> (Array2<f64>, Array2<f64>) {
        let psi = self.streamfunction(w_hat);
        let u = self.to_physical(&self.derivative(&psi, false));
        let v = self.to_physical(&self.derivative(&psi, true)).mapv(|x| -x);
        (u, v)
    }

    /// Root-mean-square of the spectral divergence of a physical velocity field.
    pub fn spectral_divergence(&self, u: &Array2<f64>, v: &Array2<f64>) -> f64 {
        let du = self.derivative(&self.to_spectral(u), true);
        let dv = self.derivative(&self.to_spectral(v), false);
        let div = self.to_physical(&du.iter().zip(&dv).map(|(a, b)| a + b).collect::<Vec<_>>());
        (div.iter().map(|x| x * x).sum::<f64>() / div.len() as f64).sqrt()
    }

    pub fn kinetic_energy(&self, w_hat: &[Complex64]) -> f64 {
        let (u, v) = self.velocity(w_hat);
        0.5 * u.iter().zip(v.iter()).map(|(a, b)| a * a + b * b).sum::<f64>() / (self.n * self.n) as f64
    }

    fn rhs(&self, w_hat: &[Complex64]) -> Result<Spectrum> {
        let (u, v) = self.velocity(w_hat);
        let max_speed = u.iter().chain(v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        let cfl = max_speed * self.dt * self.n as f64;
        if !cfl.is_finite() || cfl > self.cfl_limit {
            return Err(M2mError::Cfl(format!("CFL number {cfl:.3} exceeds {}", self.cfl_limit)));
        }
        let wx = self.to_physical(&self.derivative(w_hat, true));
        let wy = self.to_physical(&self.derivative(w_hat, false));
        let adv: Vec<f64> = (0..self.n * self.n)
            .map(|i| {
                let (r, c) = (i / self.n, i % self.n);
                -(u[[r, c]] * wx[[r, c]] + v[[r, c]] * wy[[r, c]])
            })
            .collect();
        let adv_hat = self.fft.forward(&adv);
        Ok(adv_hat
            .iter()
            .zip(&self.dealias)
            .zip(&self.forcing_hat)
            .map(|((&a, &d), &f)| a * d + f)
            .collect())
    }

    /// One integrating-factor RK4 step.
    pub fn step(&self, w_hat: &[Complex64]) -> Result<Spectrum> {
        let dt = self.dt;
        let e = &self.half_step;
        let n = w_hat.len();
        let k1 = self.rhs(w_hat)?;
        let s2: Spectrum = (0..n).map(|i| e[i] * (w_hat[i] + 0.5 * dt * k1[i])).collect();
        let k2 = self.rhs(&s2)?;
        let s3: Spectrum = (0..n).map(|i| e[i] * w_hat[i] + 0.5 * dt * k2[i]).collect();
        let k3 = self.rhs(&s3)?;
        let s4: Spectrum = (0..n).map(|i| e[i] * e[i] * w_hat[i] + dt * e[i] * k3[i]).collect();
        let k4 = self.rhs(&s4)?;
        Ok((0..n)
            .map(|i| {
                let e2 = e[i] * e[i];
                e2 * w_hat[i] + dt / 6.0 * (e2 * k1[i] + 2.0 * e[i] * (k2[i] + k3[i]) + k4[i])
            })
            .collect())
    }
}

/// Gaussian random field with spectrum `σ (4π²|k|² + τ²)^(-α/2)`, zero mean.
pub fn gaussian_random_field(n: usize, alpha: f64, tau: f64, rng: &mut impl Rng) -> Array2<f64> {
    let fft = Fft2::new(n);
    let sigma = tau.powf(0.5 * (2.0 * alpha - 2.0));
    let mut coeff = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (wavenumber(j, n), wavenumber(i, n));
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let amp = (n * n) as f64
                * std::f64::consts::SQRT_2
                * sigma
                * (4.0 * PI * PI * (a * a + b * b) + tau * tau).powf(-alpha / 2.0);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            coeff[i * n + j] = amp * Complex64::new(re, im);
        }
    }
    Array2::from_shape_vec((n, n), fft.inverse(&coeff)).unwrap()
}
