//! Five-point finite-difference Poisson solver and the multi-scale Poisson samples.

use crate::error::{M2mError, Result};
use ndarray::{s, Array2, ArrayView2};
use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

/// Above this many unknowns the iterative solver is used.
const DIRECT_LIMIT: usize = 40_000;
const CG_TOL: f64 = 1e-10;

/// Cholesky factor of `-∇²_h` on the interior of an `n x m` node block, in band storage.
struct BandCholesky {
    n: usize,
    band: usize,
    /// `l[i * (band + 1) + k]` holds `L[i, i - k]`.
    l: Vec<f64>,
}

impl BandCholesky {
    fn new(rows: usize, cols: usize) -> Self {
        let (ni, nj) = (rows - 2, cols - 2);
        let n = ni * nj;
        let band = nj;
        let w = band + 1;
        let (hx, hy) = (1.0 / (cols - 1) as f64, 1.0 / (rows - 1) as f64);
        let (cx, cy) = (1.0 / (hx * hx), 1.0 / (hy * hy));
        let a = |i: usize, k: usize| -> f64 {
            match k {
                0 => 2.0 * (cx + cy),
                1 if i % nj != 0 => -cx,
                k if k == nj => -cy,
                _ => 0.0,
            }
        };
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            for k in (0..=band.min(i)).rev() {
                let j = i - k;
                let mut sum = a(i, k);
                let start = i.saturating_sub(band);
                for p in start..j {
                    sum -= l[i * w + (i - p)] * l[j * w + (j - p)];
                }
                if k == 0 {
                    l[i * w] = sum.sqrt();
                } else {
                    l[i * w + k] = sum / l[j * w];
                }
            }
        }
        Self { n, band, l }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let w = self.band + 1;
        for i in 0..self.n {
            let mut s = rhs[i];
            for k in 1..=self.band.min(i) {
                s -= self.l[i * w + k] * rhs[i - k];
            }
            rhs[i] = s / self.l[i * w];
        }
        for i in (0..self.n).rev() {
            let mut s = rhs[i];
            for k in 1..=self.band.min(self.n - 1 - i) {
                s -= self.l[(i + k) * w + k] * rhs[i + k];
            }
            rhs[i] = s / self.l[i * w];
        }
    }
}

thread_local! {
    static FACTORS: RefCell<HashMap<(usize, usize), Rc<BandCholesky>>> = RefCell::new(HashMap::new());
}

fn factor(rows: usize, cols: usize) -> Rc<BandCholesky> {
    FACTORS.with(|f| {
        f.borrow_mut()
            .entry((rows, cols))
            .or_insert_with(|| Rc::new(BandCholesky::new(rows, cols)))
            .clone()
    })
}

/// Applies the five-point `∇²_h` at interior nodes (boundary entries of the result are 0).
pub fn laplacian(u: ArrayView2<'_, f64>) -> Array2<f64> {
    let (rows, cols) = u.dim();
    let (hx, hy) = (1.0 / (cols - 1) as f64, 1.0 / (rows - 1) as f64);
    let mut out = Array2::zeros((rows, cols));
    for i in 1..rows - 1 {
        for j in 1..cols - 1 {
            out[[i, j]] = (u[[i, j - 1]] - 2.0 * u[[i, j]] + u[[i, j + 1]]) / (hx * hx)
                + (u[[i - 1, j]] - 2.0 * u[[i, j]] + u[[i + 1, j]]) / (hy * hy);
        }
    }
    out
}

/// Largest interior `|∇²_h u - f|`.
pub fn residual(u: ArrayView2<'_, f64>, f: ArrayView2<'_, f64>) -> f64 {
    let lap = laplacian(u);
    let (rows, cols) = u.dim();
    let mut worst = 0.0f64;
    for i in 1..rows - 1 {
        for j in 1..cols - 1 {
            worst = worst.max((lap[[i, j]] - f[[i, j]]).abs());
        }
    }
    worst
}

fn apply_neg_laplacian(x: &[f64], out: &mut [f64], ni: usize, nj: usize, cx: f64, cy: f64) {
    for i in 0..ni {
        for j in 0..nj {
            let idx = i * nj + j;
            let mut v = 2.0 * (cx + cy) * x[idx];
            if j > 0 {
                v -= cx * x[idx - 1];
            }
            if j + 1 < nj {
                v -= cx * x[idx + 1];
            }
            if i > 0 {
                v -= cy * x[idx - nj];
            }
            if i + 1 < ni {
                v -= cy * x[idx + nj];
            }
            out[idx] = v;
        }
    }
}

fn conjugate_gradient(rows: usize, cols: usize, b: &[f64], max_iter: usize) -> Result<Vec<f64>> {
    let (ni, nj) = (rows - 2, cols - 2);
    let (cx, cy) = (((cols - 1) * (cols - 1)) as f64, ((rows - 1) * (rows - 1)) as f64);
    let n = b.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    for _ in 0..max_iter {
        apply_neg_laplacian(&p, &mut ap, ni, nj, cx, cy);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= CG_TOL * bnorm {
            return Ok(x);
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(M2mError::NoConvergence {
        iterations: max_iter,
        residual: rr.sqrt() / bnorm,
    })
}

/// Solves `∇²u = f` on one block with `u = 0` on the block boundary.
///
/// `f` is sampled at the block nodes `x_j = j/(cols-1)`, `y_i = i/(rows-1)`; its boundary values are ignored.
pub fn poisson_solve(f: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (rows, cols) = f.dim();
    if rows < 3 || cols < 3 {
        return Err(M2mError::ShapeMismatch(format!(
            "poisson block must be at least 3x3, got {rows}x{cols}"
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(M2mError::NonFinite("poisson source".into()));
    }
    let (ni, nj) = (rows - 2, cols - 2);
    let rhs: Vec<f64> = f.slice(s![1..rows - 1, 1..cols - 1]).iter().map(|v| -v).collect();
    let sol = if ni * nj <= DIRECT_LIMIT {
        let mut x = rhs;
        factor(rows, cols).solve(&mut x);
        x
    } else {
        conjugate_gradient(rows, cols, &rhs, 20 * (ni + nj) + 1000)?
    };
    let mut u = Array2::zeros((rows, cols));
    for i in 0..ni {
        for j in 0..nj {
            u[[i + 1, j + 1]] = sol[i * nj + j];
        }
    }
    Ok(u)
}

/// `sin(π a x) sin(π a y)` on the nodes of an `n x n` block with local coordinates in `[0, 1]`.
pub fn block_source(n: usize, a: f64) -> Array2<f64> {
    let h = 1.0 / (n - 1) as f64;
    Array2::from_shape_fn((n, n), |(i, j)| (PI * a * j as f64 * h).sin() * (PI * a * i as f64 * h).sin())
}

/// Field of `blocks x blocks` independently solved blocks; block `(bi, bj)` uses frequency `(bi·blocks + bj + 1)·factor`.
pub fn multiscale_field(grid: usize, blocks: usize, factor: f64) -> Result<Array2<f64>> {
    if blocks == 0 || grid % blocks != 0 {
        return Err(M2mError::IndivisibleDimensions {
            height: grid,
            width: grid,
            scale: blocks,
        });
    }
    let nb = grid / blocks;
    let mut out = Array2::zeros((grid, grid));
    for bi in 0..blocks {
        for bj in 0..blocks {
            let k = (bi * blocks + bj + 1) as f64;
            let u = poisson_solve(block_source(nb, k * factor).view())?;
            out.slice_mut(s![bi * nb..(bi + 1) * nb, bj * nb..(bj + 1) * nb]).assign(&u);
        }
    }
    Ok(out)
}
