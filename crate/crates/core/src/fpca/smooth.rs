//! Binned local-linear smoothers with Epanechnikov kernels.

use nalgebra::{Matrix3, Vector3};

pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// An evenly spaced grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub size: usize,
}

impl Grid {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.size - 1) as f64
    }

    pub fn point(&self, k: usize) -> f64 {
        if k + 1 == self.size {
            self.hi
        } else {
            self.lo + k as f64 * self.step()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.size).map(|k| self.point(k)).collect()
    }

    /// Left neighbour and interpolation weight of `t`, which must be in range.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let x = ((t - self.lo) / self.step()).clamp(0.0, (self.size - 1) as f64);
        let k = (x.floor() as usize).min(self.size - 2);
        (k, x - k as f64)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && t <= self.hi
    }

    /// Trapezoid quadrature weights.
    pub fn trapezoid(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.size).map(|k| if k == 0 || k + 1 == self.size { h / 2.0 } else { h }).collect()
    }
}

/// Linear interpolation of grid values.
pub fn interpolate(grid: &Grid, values: &[f64], t: f64) -> f64 {
    let (k, f) = grid.locate(t);
    values[k] * (1.0 - f) + values[k + 1] * f
}

/// Count, sum and sum of squares per grid point, filled by linear binning.
#[derive(Debug, Clone)]
pub struct Bins1 {
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    pub q: Vec<f64>,
}

impl Bins1 {
    pub fn new(g: usize) -> Self {
        Bins1 { c: vec![0.0; g], s: vec![0.0; g], q: vec![0.0; g] }
    }

    pub fn add(&mut self, grid: &Grid, t: f64, y: f64) {
        let (k, f) = grid.locate(t);
        for (idx, w) in [(k, 1.0 - f), (k + 1, f)] {
            self.c[idx] += w;
            self.s[idx] += w * y;
            self.q[idx] += w * y * y;
        }
    }

    pub fn minus(&self, other: &Bins1) -> Bins1 {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        Bins1 { c: sub(&self.c, &other.c), s: sub(&self.s, &other.s), q: sub(&self.q, &other.q) }
    }

    /// `Σ (y − fit)²` approximated from the bins.
    pub fn sse(&self, fit: &[f64]) -> f64 {
        (0..self.c.len()).map(|k| self.q[k] - 2.0 * fit[k] * self.s[k] + fit[k] * fit[k] * self.c[k]).sum()
    }
}

/// Same as [`Bins1`] on the product grid, row-major `G × G`.
#[derive(Debug, Clone)]
pub struct Bins2 {
    pub g: usize,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    pub q: Vec<f64>,
}

impl Bins2 {
    pub fn new(g: usize) -> Self {
        Bins2 { g, c: vec![0.0; g * g], s: vec![0.0; g * g], q: vec![0.0; g * g] }
    }

    pub fn add(&mut self, grid: &Grid, a: f64, b: f64, y: f64) {
        let (i, fi) = grid.locate(a);
        let (j, fj) = grid.locate(b);
        for (ii, wi) in [(i, 1.0 - fi), (i + 1, fi)] {
            for (jj, wj) in [(j, 1.0 - fj), (j + 1, fj)] {
                let w = wi * wj;
                let idx = ii * self.g + jj;
                self.c[idx] += w;
                self.s[idx] += w * y;
                self.q[idx] += w * y * y;
            }
        }
    }

    pub fn minus(&self, other: &Bins2) -> Bins2 {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        Bins2 { g: self.g, c: sub(&self.c, &other.c), s: sub(&self.s, &other.s), q: sub(&self.q, &other.q) }
    }

    pub fn sse(&self, fit: &[f64]) -> f64 {
        (0..self.c.len()).map(|k| self.q[k] - 2.0 * fit[k] * self.s[k] + fit[k] * fit[k] * self.c[k]).sum()
    }
}

/// Local-linear fit at every grid point. A point whose kernel window holds
/// too little data is refit with a wider window.
pub fn local_linear_1d(grid: &Grid, bins: &Bins1, h: f64) -> Option<Vec<f64>> {
    let pts = grid.points();
    let range = grid.hi - grid.lo;
    let mut out = Vec::with_capacity(grid.size);
    for &x0 in &pts {
        let mut bw = h;
        let v = loop {
            let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (k, &xk) in pts.iter().enumerate() {
                if bins.c[k] <= 0.0 {
                    continue;
                }
                let d = xk - x0;
                let kw = epanechnikov(d / bw);
                if kw == 0.0 {
                    continue;
                }
                let w = kw * bins.c[k];
                let ws = kw * bins.s[k];
                s0 += w;
                s1 += w * d;
                s2 += w * d * d;
                t0 += ws;
                t1 += ws * d;
            }
            let det = s0 * s2 - s1 * s1;
            if s0 > 0.0 && det > 1e-10 * s0 * s2.max(f64::MIN_POSITIVE) {
                break Some((s2 * t0 - s1 * t1) / det);
            }
            if bw > 2.0 * range {
                break if s0 > 0.0 { Some(t0 / s0) } else { None };
            }
            bw *= 1.5;
        };
        out.push(v?);
    }
    Some(out)
}

/// Local-linear (plane) fit of a symmetric surface at every grid pair.
pub fn local_linear_2d(grid: &Grid, bins: &Bins2, h: f64) -> Option<Vec<f64>> {
    let g = grid.size;
    let pts = grid.points();
    let step = grid.step();
    let range = grid.hi - grid.lo;
    let mut out = vec![0.0; g * g];
    for a in 0..g {
        for b in a..g {
            let mut bw = h;
            let v = loop {
                let r = (bw / step).ceil() as usize;
                let (alo, ahi) = (a.saturating_sub(r), (a + r).min(g - 1));
                let (blo, bhi) = (b.saturating_sub(r), (b + r).min(g - 1));
                let mut m = Matrix3::<f64>::zeros();
                let mut rhs = Vector3::<f64>::zeros();
                for i in alo..=ahi {
                    let di = pts[i] - pts[a];
                    let ki = epanechnikov(di / bw);
                    if ki == 0.0 {
                        continue;
                    }
                    for j in blo..=bhi {
                        let idx = i * g + j;
                        let c = bins.c[idx];
                        if c <= 0.0 {
                            continue;
                        }
                        let dj = pts[j] - pts[b];
                        let kw = ki * epanechnikov(dj / bw);
                        if kw == 0.0 {
                            continue;
                        }
                        let w = kw * c;
                        let ws = kw * bins.s[idx];
                        let z = Vector3::new(1.0, di, dj);
                        m += z * z.transpose() * w;
                        rhs += z * ws;
                    }
                }
                if m[(0, 0)] > 0.0 {
                    // Scale-free conditioning check on the normalized system.
                    let d = Vector3::new(1.0, 1.0 / bw, 1.0 / bw);
                    let mn = Matrix3::from_diagonal(&d) * m * Matrix3::from_diagonal(&d);
                    if let Some(ch) = mn.cholesky() {
                        let det = ch.l().diagonal().product().powi(2);
                        if det > 1e-8 * mn[(0, 0)].powi(3) {
                            let sol = ch.solve(&(Matrix3::from_diagonal(&d) * rhs));
                            break Some(sol[0]);
                        }
                    }
                }
                if bw > 2.0 * range {
                    break if m[(0, 0)] > 0.0 { Some(rhs[0] / m[(0, 0)]) } else { None };
                }
                bw *= 1.5;
            };
            let v = v?;
            out[a * g + b] = v;
            out[b * g + a] = v;
        }
    }
    Some(out)
}

/// Candidate bandwidths as fractions of the domain length.
pub const BANDWIDTH_FRACTIONS: [f64; 6] = [0.03, 0.05, 0.08, 0.12, 0.18, 0.25];

/// Picks the candidate with the smallest held-out error. `folds[f]` holds the
/// bins of fold `f` and `total` their sum.
pub fn cross_validate<B, F, E>(candidates: &[f64], total: &B, folds: &[B], minus: impl Fn(&B, &B) -> B, fit: F, sse: E) -> Option<f64>
where
    F: Fn(&B, f64) -> Option<Vec<f64>>,
    E: Fn(&B, &[f64]) -> f64,
{
    let mut best: Option<(f64, f64)> = None;
    for &h in candidates {
        let mut err = 0.0;
        let mut ok = true;
        for fold in folds {
            let train = minus(total, fold);
            match fit(&train, h) {
                Some(pred) => err += sse(fold, &pred),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok && err.is_finite() && best.is_none_or(|(_, e)| err < e) {
            best = Some((h, err));
        }
    }
    best.map(|(h, _)| h)
}
