//! Band-limited real fields on `𝕋² = [−π, π)²` and Fourier multipliers.
//!
//! A component is stored as its Fourier coefficients `c_k`, `f(x) = Σ c_k e^{ik·x}`,
//! on the half box `{|k|_∞ ≤ band, k_2 ≥ 0}`; the other half follows from
//! `c_{−k} = conj(c_k)`. Physical samples on the grid `x_j = −π + 2πj/m` are
//! synthesized on demand for any `m ≥ 2·band + 2`.
//!
//! Pointwise products are exact: both factors are synthesized on a grid large
//! enough to hold the product band, so nothing aliases. A product whose band
//! exceeds the run grid's limit `n/2 − 1` is rejected.

use crate::geometry::sym_norm;
use crate::{par, Error, Result};
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

pub type C64 = Complex64;
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Uniform grid of `n × n` points on the torus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::BadGrid(n));
        }
        Ok(Self { n })
    }

    /// Largest band a field (or a product) may occupy on this grid.
    pub fn max_band(&self) -> usize {
        self.n / 2 - 1
    }

    /// Largest retained `|k|_∞`; products below it are computed without aliasing.
    pub fn dealias_cutoff(&self) -> usize {
        self.max_band()
    }

    pub fn dx(&self) -> f64 {
        2.0 * PI / self.n as f64
    }

    pub fn coord(&self, j: usize) -> f64 {
        -PI + 2.0 * PI * j as f64 / self.n as f64
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Smallest power-of-two grid holding a field of the given band.
pub fn grid_for_band(band: usize) -> usize {
    (2 * band + 2).next_power_of_two().max(4)
}

// ---------------------------------------------------------------------------
// FFT plumbing

type Plan = Arc<dyn Fft<f64>>;

fn plans(m: usize) -> (Plan, Plan) {
    static CACHE: OnceLock<Mutex<HashMap<usize, (Plan, Plan)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("fft plan cache");
    guard
        .entry(m)
        .or_insert_with(|| {
            let mut p = FftPlanner::new();
            (p.plan_fft_forward(m), p.plan_fft_inverse(m))
        })
        .clone()
}

const ROWS_PER_TASK: usize = 8;

fn fft_rows(buf: &mut [C64], m: usize, plan: &Plan) {
    let scratch_len = plan.get_inplace_scratch_len();
    par::for_rows(buf, m * ROWS_PER_TASK, |_, chunk| {
        let mut scratch = vec![ZERO; scratch_len];
        plan.process_with_scratch(chunk, &mut scratch);
    });
}

fn transpose(src: &[C64], dst: &mut [C64], m: usize) {
    par::for_rows(dst, m, |r, row| {
        for (c, o) in row.iter_mut().enumerate() {
            *o = src[c * m + r];
        }
    });
}

/// In-place unnormalized 2D DFT of a row-major `m × m` array.
pub fn fft2(buf: &mut [C64], m: usize, inverse: bool) {
    let (f, b) = plans(m);
    let plan = if inverse { b } else { f };
    fft_rows(buf, m, &plan);
    let mut t = vec![ZERO; m * m];
    transpose(buf, &mut t, m);
    fft_rows(&mut t, m, &plan);
    transpose(&t, buf, m);
}

#[inline]
fn wrap(k: i64, m: usize) -> usize {
    k.rem_euclid(m as i64) as usize
}

#[inline]
fn parity_sign(k1: i64, k2: i64) -> f64 {
    if (k1 + k2).rem_euclid(2) == 0 {
        1.0
    } else {
        -1.0
    }
}

// ---------------------------------------------------------------------------
// Spectrum

/// Fourier coefficients of one real component on the half box.
///
/// Row `k_2 = 0` stores both signs of `k_1` and is kept exactly Hermitian.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    band: usize,
    data: Arc<Vec<C64>>,
}

impl Spectrum {
    pub fn zeros(band: usize) -> Self {
        let w = 2 * band + 1;
        Self {
            band,
            data: Arc::new(vec![ZERO; w * (band + 1)]),
        }
    }

    /// Builds a spectrum from `f(k1, k2)` evaluated on `k2 ≥ 0`; row `k2 = 0` is
    /// made Hermitian from its `k1 ≥ 0` half.
    pub fn from_fn(band: usize, f: impl Fn(i64, i64) -> C64 + Sync) -> Self {
        let w = 2 * band + 1;
        let b = band as i64;
        let mut data = vec![ZERO; w * (band + 1)];
        par::fill(&mut data, |idx| {
            let k2 = (idx / w) as i64;
            let k1 = (idx % w) as i64 - b;
            f(k1, k2)
        });
        let mut s = Self {
            band,
            data: Arc::new(data),
        };
        s.canonicalize();
        s
    }

    fn canonicalize(&mut self) {
        let b = self.band;
        let d = Arc::make_mut(&mut self.data);
        d[b].im = 0.0;
        for k1 in 1..=b {
            d[b - k1] = d[b + k1].conj();
        }
    }

    pub fn band(&self) -> usize {
        self.band
    }

    #[inline]
    fn width(&self) -> usize {
        2 * self.band + 1
    }

    #[inline]
    fn index(&self, k1: i64, k2: i64) -> usize {
        k2 as usize * self.width() + (k1 + self.band as i64) as usize
    }

    /// Coefficient at any `k`; zero outside the box.
    #[inline]
    pub fn get(&self, k1: i64, k2: i64) -> C64 {
        let b = self.band as i64;
        if k1.abs() > b || k2.abs() > b {
            return ZERO;
        }
        if k2 >= 0 {
            self.data[self.index(k1, k2)]
        } else {
            self.data[self.index(-k1, -k2)].conj()
        }
    }

    pub fn mean(&self) -> f64 {
        self.data[self.band].re
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    /// Visits every stored `(k1, k2, c)` with `k2 ≥ 0`.
    pub fn entries(&self) -> impl Iterator<Item = (i64, i64, C64)> + '_ {
        let w = self.width();
        let b = self.band as i64;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, &c)| ((i % w) as i64 - b, (i / w) as i64, c))
    }

    /// Multiplies by `m(k)`; `m(−k) = conj(m(k))` is assumed.
    pub fn multiply(&self, m: impl Fn(i64, i64) -> C64 + Sync) -> Self {
        Self::from_fn(self.band, |k1, k2| m(k1, k2) * self.get(k1, k2))
    }

    /// Truncates or zero-extends to `band`.
    pub fn with_band(&self, band: usize) -> Self {
        if band == self.band {
            return self.clone();
        }
        Self::from_fn(band, |k1, k2| self.get(k1, k2))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            band: self.band,
            data: Arc::new(self.data.iter().map(|c| c * s).collect()),
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        self.zip(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.zip(o, |a, b| a - b)
    }

    fn zip(&self, o: &Self, f: impl Fn(C64, C64) -> C64 + Sync) -> Self {
        if self.band == o.band {
            return Self {
                band: self.band,
                data: Arc::new(self.data.iter().zip(o.data.iter()).map(|(&a, &b)| f(a, b)).collect()),
            };
        }
        let band = self.band.max(o.band);
        Self::from_fn(band, |k1, k2| f(self.get(k1, k2), o.get(k1, k2)))
    }

    /// `Σ_k |c_k|²` over the full box, i.e. the spatial mean of `f²`.
    pub fn energy(&self) -> f64 {
        let b = self.band as i64;
        par::sum_by(self.data.len(), |i| {
            let w = self.width();
            let (k1, k2) = ((i % w) as i64 - b, (i / w) as i64);
            let c = self.data[i];
            if k2 > 0 {
                2.0 * c.norm_sqr()
            } else if k1 >= 0 {
                if k1 == 0 {
                    c.norm_sqr()
                } else {
                    2.0 * c.norm_sqr()
                }
            } else {
                0.0
            }
        })
    }

    /// Energy of the modes selected by `keep`.
    pub fn energy_where(&self, keep: impl Fn(i64, i64) -> bool + Sync) -> f64 {
        self.multiply(|k1, k2| if keep(k1, k2) { C64::new(1.0, 0.0) } else { ZERO })
            .energy()
    }

    /// Largest `|k|_∞` carrying a nonzero coefficient.
    pub fn support_band(&self) -> usize {
        self.entries()
            .filter(|e| e.2.re != 0.0 || e.2.im != 0.0)
            .map(|(k1, k2, _)| k1.unsigned_abs().max(k2.unsigned_abs()) as usize)
            .max()
            .unwrap_or(0)
    }

    /// Value at an arbitrary point by direct summation.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let b = self.band as i64;
        let ex: Vec<C64> = (-b..=b).map(|k| C64::from_polar(1.0, k as f64 * x)).collect();
        let mut acc = 0.0;
        for k2 in 0..=b {
            let ey = C64::from_polar(1.0, k2 as f64 * y);
            for k1 in -b..=b {
                if k2 == 0 && k1 < 0 {
                    continue;
                }
                let c = self.data[self.index(k1, k2)];
                let t = (c * ex[(k1 + b) as usize] * ey).re;
                acc += if k1 == 0 && k2 == 0 { t } else { 2.0 * t };
            }
        }
        acc
    }

    fn scatter(&self, out: &mut [C64], m: usize, weight: C64) {
        let b = self.band as i64;
        for k2 in 0..=b {
            for k1 in -b..=b {
                let c = self.data[self.index(k1, k2)];
                if c.re == 0.0 && c.im == 0.0 {
                    continue;
                }
                let s = parity_sign(k1, k2);
                out[wrap(k2, m) * m + wrap(k1, m)] += weight * c * s;
                if k2 > 0 {
                    out[wrap(-k2, m) * m + wrap(-k1, m)] += weight * c.conj() * s;
                }
            }
        }
    }
}

/// Physical samples of `specs` on the `m × m` grid, two components per FFT.
pub fn synthesize(specs: &[&Spectrum], m: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(specs.len());
    for pair in specs.chunks(2) {
        for s in pair {
            assert!(2 * s.band + 2 <= m, "band {} does not fit grid {m}", s.band);
        }
        let mut buf = vec![ZERO; m * m];
        pair[0].scatter(&mut buf, m, C64::new(1.0, 0.0));
        if let Some(s) = pair.get(1) {
            s.scatter(&mut buf, m, I);
        }
        fft2(&mut buf, m, true);
        out.push(buf.iter().map(|c| c.re).collect());
        if pair.len() == 2 {
            out.push(buf.iter().map(|c| c.im).collect());
        }
    }
    out
}

/// Fourier coefficients (band `band ≤ m/2 − 1`) of real samples on the `m × m` grid.
pub fn analyze(phys: &[&[f64]], m: usize, band: usize) -> Vec<Spectrum> {
    assert!(2 * band + 2 <= m, "band {band} does not fit grid {m}");
    let norm = 1.0 / (m * m) as f64;
    let mut out = Vec::with_capacity(phys.len());
    for pair in phys.chunks(2) {
        let mut buf: Vec<C64> = match pair {
            [a, b] => a.iter().zip(b.iter()).map(|(&x, &y)| C64::new(x, y)).collect(),
            [a] => a.iter().map(|&x| C64::new(x, 0.0)).collect(),
            _ => unreachable!(),
        };
        fft2(&mut buf, m, false);
        let z = |k1: i64, k2: i64| buf[wrap(k2, m) * m + wrap(k1, m)];
        let scale = |k1: i64, k2: i64| norm * parity_sign(k1, k2);
        if pair.len() == 1 {
            out.push(Spectrum::from_fn(band, |k1, k2| z(k1, k2) * scale(k1, k2)));
        } else {
            out.push(Spectrum::from_fn(band, |k1, k2| {
                (z(k1, k2) + z(-k1, -k2).conj()) * 0.5 * scale(k1, k2)
            }));
            out.push(Spectrum::from_fn(band, |k1, k2| {
                (z(k1, k2) - z(-k1, -k2).conj()) * C64::new(0.0, -0.5) * scale(k1, k2)
            }));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Fields

/// A real field with `N` components: 1 scalar, 2 vector, 3 symmetric tensor
/// stored as `(xx, xy, yy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<const N: usize> {
    pub grid: Grid,
    pub comps: [Spectrum; N],
}

pub type ScalarField = Field<1>;
pub type VectorField = Field<2>;
pub type SymTensorField = Field<3>;

/// Pointwise norm convention: absolute value, Euclidean length, or operator
/// norm of the symmetric matrix.
#[inline]
pub fn point_norm<const N: usize>(v: [f64; N]) -> f64 {
    match N {
        1 => v[0].abs(),
        2 => v[0].hypot(v[1]),
        3 => sym_norm([v[0], v[1], v[2]]),
        _ => unreachable!(),
    }
}

/// Operator norm of a general 2×2 matrix `[[a, b], [c, d]]`.
#[inline]
pub fn mat_norm(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let s = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    let disc = (s * s - 4.0 * det * det).max(0.0).sqrt();
    (0.5 * (s + disc)).sqrt()
}

impl<const N: usize> Field<N> {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            comps: std::array::from_fn(|_| Spectrum::zeros(0)),
        }
    }

    pub fn new(grid: Grid, comps: [Spectrum; N]) -> Result<Self> {
        for c in &comps {
            if c.band() > grid.max_band() {
                return Err(Error::ShellOverflow {
                    reach: c.band(),
                    limit: grid.max_band(),
                });
            }
        }
        Ok(Self { grid, comps })
    }

    pub fn band(&self) -> usize {
        self.comps.iter().map(Spectrum::band).max().unwrap_or(0)
    }

    pub fn mean(&self) -> [f64; N] {
        std::array::from_fn(|i| self.comps[i].mean())
    }

    pub fn map_comps(&self, f: impl Fn(&Spectrum) -> Spectrum) -> Self {
        Self {
            grid: self.grid,
            comps: std::array::from_fn(|i| f(&self.comps[i])),
        }
    }

    fn check_grid(&self, o: &Self) -> Result<()> {
        if self.grid != o.grid {
            return Err(Error::GridMismatch(self.grid.n, o.grid.n));
        }
        Ok(())
    }

    pub fn add(&self, o: &Self) -> Self {
        self.check_grid(o).expect("common grid");
        Self {
            grid: self.grid,
            comps: std::array::from_fn(|i| self.comps[i].add(&o.comps[i])),
        }
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.check_grid(o).expect("common grid");
        Self {
            grid: self.grid,
            comps: std::array::from_fn(|i| self.comps[i].sub(&o.comps[i])),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map_comps(|c| c.scale(s))
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn with_band(&self, band: usize) -> Self {
        self.map_comps(|c| c.with_band(band))
    }

    pub fn is_zero(&self) -> bool {
        self.comps.iter().all(Spectrum::is_zero)
    }

    /// Spatial mean of `|f|²` summed over components.
    pub fn energy(&self) -> f64 {
        self.comps.iter().map(Spectrum::energy).sum()
    }

    /// Physical samples on the `m × m` grid.
    pub fn physical_on(&self, m: usize) -> [Vec<f64>; N] {
        let refs: Vec<&Spectrum> = self.comps.iter().collect();
        let mut v = synthesize(&refs, m).into_iter();
        std::array::from_fn(|_| v.next().expect("component"))
    }

    /// Physical samples on the field's grid.
    pub fn physical(&self) -> [Vec<f64>; N] {
        self.physical_on(self.grid.n)
    }

    /// Builds a field from samples on an `m × m` grid, keeping `|k|_∞ ≤ band`.
    pub fn from_physical(grid: Grid, m: usize, comps: &[Vec<f64>; N], band: usize) -> Self {
        let refs: Vec<&[f64]> = comps.iter().map(Vec::as_slice).collect();
        let mut v = analyze(&refs, m, band).into_iter();
        Self {
            grid,
            comps: std::array::from_fn(|_| v.next().expect("component")),
        }
    }

    /// Values at an arbitrary point.
    pub fn eval(&self, x: f64, y: f64) -> [f64; N] {
        std::array::from_fn(|i| self.comps[i].eval(x, y))
    }

    /// Sup over the field's grid of the pointwise norm.
    pub fn sup_norm(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let p = self.physical();
        par::max_by(self.grid.len(), |j| point_norm::<N>(std::array::from_fn(|i| p[i][j])))
    }

    /// `‖f‖₀ + ‖∇f‖₀`; the gradient is measured as the Euclidean length
    /// (scalars), the Jacobian operator norm (vectors) or the larger of the two
    /// directional operator norms (tensors).
    pub fn c1_norm(&self) -> f64 {
        self.sup_norm() + self.gradient_sup()
    }

    /// Sup of the gradient, measured as in [`Field::c1_norm`].
    pub fn gradient_sup(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let d: Vec<Spectrum> = self
            .comps
            .iter()
            .flat_map(|c| [deriv(c, 0), deriv(c, 1)])
            .collect();
        let refs: Vec<&Spectrum> = d.iter().collect();
        let p = synthesize(&refs, self.grid.n);
        par::max_by(self.grid.len(), |j| match N {
            1 => p[0][j].hypot(p[1][j]),
            2 => mat_norm(p[0][j], p[1][j], p[2][j], p[3][j]),
            3 => sym_norm([p[0][j], p[2][j], p[4][j]]).max(sym_norm([p[1][j], p[3][j], p[5][j]])),
            _ => unreachable!(),
        })
    }

    /// Applies the sharp mask `keep(k)` (assumed even in `k`) to all components.
    pub fn masked(&self, band: usize, keep: impl Fn(i64, i64) -> bool + Sync) -> Self {
        self.map_comps(|c| {
            let b = band.min(c.band());
            Spectrum::from_fn(b, |k1, k2| if keep(k1, k2) { c.get(k1, k2) } else { ZERO })
        })
    }
}

/// `∂_x` (`dir = 0`) or `∂_y` (`dir = 1`).
pub fn deriv(s: &Spectrum, dir: usize) -> Spectrum {
    s.multiply(|k1, k2| I * if dir == 0 { k1 as f64 } else { k2 as f64 })
}

#[inline]
fn knorm(k1: i64, k2: i64) -> f64 {
    ((k1 * k1 + k2 * k2) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Multipliers

/// Tolerance for treating a mean as zero before a negative power.
const MEAN_TOL: f64 = 1e-12;

/// `Λ^s` with symbol `|k|^s`; the mean is kept for `s = 0` and annihilated for
/// `s > 0`. Negative `s` requires a mean-zero input.
pub fn lambda_pow<const N: usize>(f: &Field<N>, s: f64) -> Result<Field<N>> {
    if s < 0.0 {
        for c in &f.comps {
            let scale = c.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
            if c.mean().abs() > MEAN_TOL * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::NonzeroMean { s, mean: c.mean() });
            }
        }
    }
    if s == 0.0 {
        return Ok(f.clone());
    }
    Ok(f.map_comps(|c| {
        c.multiply(|k1, k2| {
            if k1 == 0 && k2 == 0 {
                ZERO
            } else {
                C64::new(knorm(k1, k2).powf(s), 0.0)
            }
        })
    }))
}

/// `Λ = (−Δ)^{1/2}`.
pub fn lambda<const N: usize>(f: &Field<N>) -> Field<N> {
    f.map_comps(|c| c.multiply(|k1, k2| C64::new(knorm(k1, k2), 0.0)))
}

pub fn laplacian<const N: usize>(f: &Field<N>) -> Field<N> {
    f.map_comps(|c| c.multiply(|k1, k2| C64::new(-((k1 * k1 + k2 * k2) as f64), 0.0)))
}

pub fn grad(f: &ScalarField) -> VectorField {
    VectorField {
        grid: f.grid,
        comps: [deriv(&f.comps[0], 0), deriv(&f.comps[0], 1)],
    }
}

/// `∇⊥f = (−∂_y f, ∂_x f)`.
pub fn grad_perp(f: &ScalarField) -> VectorField {
    VectorField {
        grid: f.grid,
        comps: [deriv(&f.comps[0], 1).scale(-1.0), deriv(&f.comps[0], 0)],
    }
}

pub fn div(v: &VectorField) -> ScalarField {
    ScalarField {
        grid: v.grid,
        comps: [deriv(&v.comps[0], 0).add(&deriv(&v.comps[1], 1))],
    }
}

/// `∇⊥·v = ∂_x v_2 − ∂_y v_1`.
pub fn perp_div(v: &VectorField) -> ScalarField {
    ScalarField {
        grid: v.grid,
        comps: [deriv(&v.comps[1], 0).sub(&deriv(&v.comps[0], 1))],
    }
}

/// Row divergence of a symmetric tensor.
pub fn div_tensor(t: &SymTensorField) -> VectorField {
    let [xx, xy, yy] = &t.comps;
    VectorField {
        grid: t.grid,
        comps: [
            deriv(xx, 0).add(&deriv(xy, 1)),
            deriv(xy, 0).add(&deriv(yy, 1)),
        ],
    }
}

fn vector_map(v: &VectorField, f: impl Fn(i64, i64, C64, C64) -> [C64; 2] + Sync) -> VectorField {
    let band = v.band();
    let (a, b) = (&v.comps[0], &v.comps[1]);
    let x = Spectrum::from_fn(band, |k1, k2| f(k1, k2, a.get(k1, k2), b.get(k1, k2))[0]);
    let y = Spectrum::from_fn(band, |k1, k2| f(k1, k2, a.get(k1, k2), b.get(k1, k2))[1]);
    VectorField {
        grid: v.grid,
        comps: [x, y],
    }
}

/// Leray projection `Id − k⊗k/|k|²`; the mean mode is kept.
pub fn leray(v: &VectorField) -> VectorField {
    vector_map(v, |k1, k2, a, b| {
        if k1 == 0 && k2 == 0 {
            return [a, b];
        }
        let (x, y) = (k1 as f64, k2 as f64);
        let n2 = x * x + y * y;
        let dot = (a * x + b * y) / n2;
        [a - dot * x, b - dot * y]
    })
}

/// Anti-divergence `B = B₀ℙ`, `(B₀g)^{ij} = −(−Δ)^{−1}(∂_i g^j + ∂_j g^i)`.
/// Satisfies `div B f = ℙf − mean(f)` and `B∇g = 0`.
pub fn antidiv(f: &VectorField) -> SymTensorField {
    let p = leray(f);
    let band = p.band();
    let (a, b) = (&p.comps[0], &p.comps[1]);
    let entry = |k1: i64, k2: i64, which: usize| -> C64 {
        if k1 == 0 && k2 == 0 {
            return ZERO;
        }
        let (x, y) = (k1 as f64, k2 as f64);
        let inv = -1.0 / (x * x + y * y);
        let (ga, gb) = (a.get(k1, k2), b.get(k1, k2));
        match which {
            0 => I * (2.0 * x) * ga * inv,
            1 => I * (x * gb + y * ga) * inv,
            _ => I * (2.0 * y) * gb * inv,
        }
    };
    SymTensorField {
        grid: f.grid,
        comps: [
            Spectrum::from_fn(band, |k1, k2| entry(k1, k2, 0)),
            Spectrum::from_fn(band, |k1, k2| entry(k1, k2, 1)),
            Spectrum::from_fn(band, |k1, k2| entry(k1, k2, 2)),
        ],
    }
}

/// Sharp Fourier cutoffs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mask {
    /// `|k| ≤ n`.
    LowPass { n: f64 },
    /// `|k| < n` (strict), the complement of [`Mask::HighPass`].
    LowPassStrict { n: f64 },
    /// `|k| ≥ n`.
    HighPass { n: f64 },
    /// `(1 − width)λ ≤ |k| ≤ (1 + width)λ`.
    Shell { lambda: f64, width: f64 },
    /// `|k ∓ λ·dir| ≤ width·λ` (both signs, so real fields stay real).
    Directional {
        dir: [f64; 2],
        lambda: f64,
        width: f64,
    },
}

impl Mask {
    #[inline]
    pub fn keeps(&self, k1: i64, k2: i64) -> bool {
        let (x, y) = (k1 as f64, k2 as f64);
        match *self {
            Mask::LowPass { n } => x.hypot(y) <= n,
            Mask::LowPassStrict { n } => x.hypot(y) < n,
            Mask::HighPass { n } => x.hypot(y) >= n,
            Mask::Shell { lambda, width } => {
                let r = x.hypot(y);
                r >= (1.0 - width) * lambda && r <= (1.0 + width) * lambda
            }
            Mask::Directional { dir, lambda, width } => {
                let (cx, cy) = (lambda * dir[0], lambda * dir[1]);
                let r = width * lambda;
                (x - cx).hypot(y - cy) <= r || (x + cx).hypot(y + cy) <= r
            }
        }
    }

    /// Largest `|k|_∞` the mask can keep, if bounded.
    pub fn reach(&self) -> Option<usize> {
        match *self {
            Mask::LowPass { n } | Mask::LowPassStrict { n } => Some(n.floor() as usize),
            Mask::HighPass { .. } => None,
            Mask::Shell { lambda, width } => Some(((1.0 + width) * lambda).floor() as usize),
            Mask::Directional { dir, lambda, width } => {
                let m = dir[0].abs().max(dir[1].abs());
                Some((lambda * (m + width)).floor() as usize)
            }
        }
    }
}

/// Applies a sharp mask. Shells reaching past the grid's band limit are rejected.
pub fn lp_project<const N: usize>(f: &Field<N>, mask: Mask) -> Result<Field<N>> {
    let band = match mask {
        Mask::Shell { .. } | Mask::Directional { .. } => {
            let reach = mask.reach().expect("bounded");
            if reach > f.grid.max_band() {
                return Err(Error::ShellOverflow {
                    reach,
                    limit: f.grid.max_band(),
                });
            }
            reach
        }
        _ => mask.reach().unwrap_or(usize::MAX),
    };
    Ok(f.masked(band, |k1, k2| mask.keeps(k1, k2)))
}

/// `ℙ_{λ,k} = ℙ ∘ P_{|ξ ∓ λk| ≤ width·λ}`.
pub fn shell_project(v: &VectorField, dir: [f64; 2], lambda: f64, width: f64) -> Result<VectorField> {
    let m = lp_project(
        v,
        Mask::Directional {
            dir,
            lambda,
            width,
        },
    )?;
    Ok(leray(&m))
}

// ---------------------------------------------------------------------------
// Products

/// Grid on which a product of total band `band` is computed without aliasing.
pub fn product_grid(grid: Grid, a: usize, b: usize) -> Result<usize> {
    if a + b > grid.max_band() {
        return Err(Error::DealiasOverflow {
            a,
            b,
            limit: grid.max_band(),
        });
    }
    Ok(grid_for_band(a + b).min(grid.n))
}

/// Evaluates `f` pointwise on the product grid and returns `nout` spectra of
/// band `band_out`. Inputs are synthesized on the same grid.
pub fn pointwise(
    grid: Grid,
    inputs: &[&Spectrum],
    band_out: usize,
    nout: usize,
    f: impl Fn(&[f64], &mut [f64]) + Sync,
) -> Vec<Spectrum> {
    let m = grid_for_band(band_out).min(grid.n);
    let phys = synthesize(inputs, m);
    let nin = inputs.len();
    let mut out = vec![vec![0.0; m * m]; nout];
    let mut cols: Vec<&mut [f64]> = out.iter_mut().map(|v| v.as_mut_slice()).collect();
    let chunk = m;
    let results = par::map_collect(m, |r| {
        let mut vals = vec![0.0; nout * chunk];
        let mut inp = vec![0.0; nin];
        let mut o = vec![0.0; nout];
        for c in 0..chunk {
            let j = r * m + c;
            for (i, p) in phys.iter().enumerate() {
                inp[i] = p[j];
            }
            f(&inp, &mut o);
            for (q, v) in o.iter().enumerate() {
                vals[q * chunk + c] = *v;
            }
        }
        vals
    });
    for (r, vals) in results.into_iter().enumerate() {
        for (q, col) in cols.iter_mut().enumerate() {
            col[r * m..(r + 1) * m].copy_from_slice(&vals[q * chunk..(q + 1) * chunk]);
        }
    }
    let refs: Vec<&[f64]> = out.iter().map(Vec::as_slice).collect();
    analyze(&refs, m, band_out)
}

fn jacobian(w: &VectorField) -> [Spectrum; 4] {
    [
        deriv(&w.comps[0], 0),
        deriv(&w.comps[0], 1),
        deriv(&w.comps[1], 0),
        deriv(&w.comps[1], 1),
    ]
}

/// `a·∇w − (∇w)^T a`, i.e. `Σ_j a_j(∂_j w_i − ∂_i w_j)`.
pub fn bracket(a: &VectorField, w: &VectorField) -> Result<VectorField> {
    let band = a.band() + w.band();
    product_grid(a.grid, a.band(), w.band())?;
    if a.is_zero() || w.is_zero() {
        return Ok(VectorField::zeros(a.grid));
    }
    let j = jacobian(w);
    let ins = [&a.comps[0], &a.comps[1], &j[0], &j[1], &j[2], &j[3]];
    let out = pointwise(a.grid, &ins, band, 2, |p, o| {
        let (a1, a2, w11, w12, w21, w22) = (p[0], p[1], p[2], p[3], p[4], p[5]);
        // (a·∇w)_i = a_1 ∂_1 w_i + a_2 ∂_2 w_i; ((∇w)^T a)_i = ∂_i w_1 a_1 + ∂_i w_2 a_2
        o[0] = (a1 * w11 + a2 * w12) - (w11 * a1 + w21 * a2);
        o[1] = (a1 * w21 + a2 * w22) - (w12 * a1 + w22 * a2);
    });
    let mut it = out.into_iter();
    Ok(VectorField {
        grid: a.grid,
        comps: [it.next().unwrap(), it.next().unwrap()],
    })
}

/// `Λv·∇w − (∇w)^T·Λv`.
pub fn sqg_nonlinearity(v: &VectorField, w: &VectorField) -> Result<VectorField> {
    bracket(&lambda(v), w)
}

/// `N(v) = Λv·∇v − (∇v)^T·Λv`.
pub fn sqg_full(v: &VectorField) -> Result<VectorField> {
    sqg_nonlinearity(v, v)
}

/// `a·∇w` (advection of each component of `w`).
pub fn advect(a: &VectorField, w: &VectorField) -> Result<VectorField> {
    let band = a.band() + w.band();
    product_grid(a.grid, a.band(), w.band())?;
    if a.is_zero() || w.is_zero() {
        return Ok(VectorField::zeros(a.grid));
    }
    let j = jacobian(w);
    let ins = [&a.comps[0], &a.comps[1], &j[0], &j[1], &j[2], &j[3]];
    let out = pointwise(a.grid, &ins, band, 2, |p, o| {
        o[0] = p[0] * p[2] + p[1] * p[3];
        o[1] = p[0] * p[4] + p[1] * p[5];
    });
    let mut it = out.into_iter();
    Ok(VectorField {
        grid: a.grid,
        comps: [it.next().unwrap(), it.next().unwrap()],
    })
}

/// `(∇a)^T·w`, i.e. `Σ_j ∂_i a_j w_j`.
pub fn grad_transpose_dot(a: &VectorField, w: &VectorField) -> Result<VectorField> {
    let band = a.band() + w.band();
    product_grid(a.grid, a.band(), w.band())?;
    if a.is_zero() || w.is_zero() {
        return Ok(VectorField::zeros(a.grid));
    }
    let j = jacobian(a);
    let ins = [&j[0], &j[1], &j[2], &j[3], &w.comps[0], &w.comps[1]];
    let out = pointwise(a.grid, &ins, band, 2, |p, o| {
        let (a11, a12, a21, a22, w1, w2) = (p[0], p[1], p[2], p[3], p[4], p[5]);
        o[0] = a11 * w1 + a21 * w2;
        o[1] = a12 * w1 + a22 * w2;
    });
    let mut it = out.into_iter();
    Ok(VectorField {
        grid: a.grid,
        comps: [it.next().unwrap(), it.next().unwrap()],
    })
}

/// `a·b` pointwise.
pub fn dot(a: &VectorField, b: &VectorField) -> Result<ScalarField> {
    let band = a.band() + b.band();
    product_grid(a.grid, a.band(), b.band())?;
    if a.is_zero() || b.is_zero() {
        return Ok(ScalarField::zeros(a.grid));
    }
    let ins = [&a.comps[0], &a.comps[1], &b.comps[0], &b.comps[1]];
    let out = pointwise(a.grid, &ins, band, 1, |p, o| o[0] = p[0] * p[2] + p[1] * p[3]);
    Ok(ScalarField {
        grid: a.grid,
        comps: [out.into_iter().next().unwrap()],
    })
}

/// `s·a⊥` pointwise for scalar `s` and vector `a`.
pub fn scalar_times_perp(s: &ScalarField, a: &VectorField) -> Result<VectorField> {
    let band = s.band() + a.band();
    product_grid(a.grid, s.band(), a.band())?;
    if s.is_zero() || a.is_zero() {
        return Ok(VectorField::zeros(a.grid));
    }
    let ins = [&s.comps[0], &a.comps[0], &a.comps[1]];
    let out = pointwise(a.grid, &ins, band, 2, |p, o| {
        o[0] = -p[0] * p[2];
        o[1] = p[0] * p[1];
    });
    let mut it = out.into_iter();
    Ok(VectorField {
        grid: a.grid,
        comps: [it.next().unwrap(), it.next().unwrap()],
    })
}

/// `a·∇θ` for scalar `θ`.
pub fn advect_scalar(a: &VectorField, theta: &ScalarField) -> Result<ScalarField> {
    let band = a.band() + theta.band();
    product_grid(a.grid, a.band(), theta.band())?;
    if a.is_zero() || theta.is_zero() {
        return Ok(ScalarField::zeros(a.grid));
    }
    let gx = deriv(&theta.comps[0], 0);
    let gy = deriv(&theta.comps[0], 1);
    let ins = [&a.comps[0], &a.comps[1], &gx, &gy];
    let out = pointwise(a.grid, &ins, band, 1, |p, o| o[0] = p[0] * p[2] + p[1] * p[3]);
    Ok(ScalarField {
        grid: a.grid,
        comps: [out.into_iter().next().unwrap()],
    })
}

// ---------------------------------------------------------------------------
// Hölder estimator

/// Littlewood–Paley estimator `‖f‖₀ + sup_j 2^{jα}‖Δ_j f‖₀` with sharp dyadic
/// blocks `Δ_0 = {|k| ≤ 1}`, `Δ_j = {2^{j−1} < |k| ≤ 2^j}`. An equivalent-norm
/// diagnostic, not the Hölder norm itself.
pub fn holder_norm<const N: usize>(f: &Field<N>, alpha: f64) -> f64 {
    let band = f.band();
    let kmax = (2.0f64).sqrt() * band as f64;
    let mut best = 0.0f64;
    let mut j = 0u32;
    loop {
        let hi = 2f64.powi(j as i32);
        let lo = if j == 0 { -1.0 } else { hi / 2.0 };
        let block = f.masked(band, |k1, k2| {
            let r = knorm(k1, k2);
            r > lo && r <= hi
        });
        best = best.max(2f64.powf(j as f64 * alpha) * block.sup_norm());
        if hi >= kmax {
            break;
        }
        j += 1;
    }
    f.sup_norm() + best
}

// ---------------------------------------------------------------------------
// Random band-limited fields

/// Random real field with `|k|_∞ ≤ band`, coefficients uniform in the unit disk
/// scaled by `(1 + |k|²)^{-1}`.
pub fn random_field<const N: usize, R: Rng>(grid: Grid, band: usize, rng: &mut R) -> Field<N> {
    let comps = std::array::from_fn(|_| {
        let b = band as i64;
        let w = 2 * band + 1;
        let draws: Vec<C64> = (0..w * (band + 1))
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        Spectrum::from_fn(band, |k1, k2| {
            let idx = k2 as usize * w + (k1 + b) as usize;
            draws[idx] / (1.0 + (k1 * k1 + k2 * k2) as f64)
        })
    });
    Field { grid, comps }
}

/// Random divergence-free, mean-zero vector field.
pub fn random_div_free<R: Rng>(grid: Grid, band: usize, rng: &mut R) -> VectorField {
    let v: VectorField = random_field(grid, band, rng);
    leray(&v).map_comps(|c| c.multiply(|k1, k2| if k1 == 0 && k2 == 0 { ZERO } else { C64::new(1.0, 0.0) }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn grid_rejects_non_power_of_two() {
        assert!(Grid::new(96).is_err());
        assert!(Grid::new(2).is_err());
        assert_eq!(Grid::new(64).unwrap().max_band(), 31);
    }

    #[test]
    fn single_mode_samples() {
        let g = Grid::new(16).unwrap();
        // f = cos(3x + 2y)
        let s = Spectrum::from_fn(4, |k1, k2| {
            if (k1, k2) == (3, 2) {
                C64::new(0.5, 0.0)
            } else {
                ZERO
            }
        });
        let f = ScalarField { grid: g, comps: [s] };
        let p = &f.physical()[0];
        for iy in 0..16 {
            for ix in 0..16 {
                let want = (3.0 * g.coord(ix) + 2.0 * g.coord(iy)).cos();
                assert!((p[iy * 16 + ix] - want).abs() < 1e-14);
            }
        }
        assert!((f.comps[0].eval(0.3, -1.2) - (0.9f64 - 2.4).cos()).abs() < 1e-14);
    }

    #[test]
    fn round_trip_and_parseval() {
        let g = Grid::new(64).unwrap();
        let f: VectorField = random_field(g, 20, &mut rng());
        let p = f.physical();
        let back = VectorField::from_physical(g, 64, &p, 20);
        for i in 0..2 {
            let d = back.comps[i].sub(&f.comps[i]).energy().sqrt();
            assert!(d < 1e-14 * f.comps[i].energy().sqrt());
        }
        let phys_l2: f64 = p.iter().flat_map(|c| c.iter()).map(|x| x * x).sum::<f64>() / 4096.0;
        assert!((phys_l2 / f.energy() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_on_mode() {
        let g = Grid::new(32).unwrap();
        let s = Spectrum::from_fn(5, |k1, k2| if (k1, k2) == (3, 4) { C64::new(1.0, 0.5) } else { ZERO });
        let f = ScalarField { grid: g, comps: [s] };
        let l = lambda(&f);
        assert!((l.comps[0].get(3, 4) - C64::new(5.0, 2.5)).norm() < 1e-15);
        assert!((l.comps[0].get(-3, -4) - C64::new(5.0, -2.5)).norm() < 1e-15);
    }

    #[test]
    fn negative_power_needs_zero_mean() {
        let g = Grid::new(16).unwrap();
        let s = Spectrum::from_fn(2, |k1, k2| if (k1, k2) == (0, 0) { C64::new(1.0, 0.0) } else { ZERO });
        let f = ScalarField { grid: g, comps: [s] };
        assert!(matches!(lambda_pow(&f, -1.0), Err(Error::NonzeroMean { .. })));
        assert!(lambda_pow(&f, 0.5).unwrap().is_zero());
        assert_eq!(lambda_pow(&f, 0.0).unwrap(), f);
    }

    #[test]
    fn antidiv_single_mode() {
        // f = e_1 cos y  ⇒  B f has xy = sin y and zero diagonal.
        let g = Grid::new(16).unwrap();
        let c = Spectrum::from_fn(1, |k1, k2| if (k1, k2) == (0, 1) { C64::new(0.5, 0.0) } else { ZERO });
        let f = VectorField { grid: g, comps: [c, Spectrum::zeros(1)] };
        let b = antidiv(&f);
        assert!(b.comps[0].is_zero() && b.comps[2].is_zero());
        assert!((b.comps[1].get(0, 1) - C64::new(0.0, -0.5)).norm() < 1e-15);
        assert!((b.comps[1].eval(0.0, 0.7) - 0.7f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn product_rejects_overflow() {
        let g = Grid::new(32).unwrap();
        let v = random_div_free(g, 10, &mut rng());
        assert!(matches!(sqg_full(&v), Err(Error::DealiasOverflow { .. })));
        let v = random_div_free(g, 7, &mut rng());
        assert!(sqg_full(&v).is_ok());
    }

    #[test]
    fn product_is_exact() {
        // cos(3x)·cos(5y) evaluated through the product grid.
        let g = Grid::new(32).unwrap();
        let a = Spectrum::from_fn(3, |k1, k2| if (k1, k2) == (3, 0) { C64::new(0.5, 0.0) } else { ZERO });
        let b = Spectrum::from_fn(5, |k1, k2| if (k1, k2) == (0, 5) { C64::new(0.5, 0.0) } else { ZERO });
        let out = pointwise(g, &[&a, &b], 8, 1, |p, o| o[0] = p[0] * p[1]);
        assert!((out[0].get(3, 5) - C64::new(0.25, 0.0)).norm() < 1e-16);
        assert!((out[0].get(3, -5) - C64::new(0.25, 0.0)).norm() < 1e-16);
        assert!((out[0].energy() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn holder_single_block() {
        let g = Grid::new(64).unwrap();
        let s = Spectrum::from_fn(8, |k1, k2| if (k1, k2) == (8, 0) { C64::new(0.5, 0.0) } else { ZERO });
        let f = ScalarField { grid: g, comps: [s] };
        for alpha in [0.0, 0.5, 1.0, 2.0] {
            let e = holder_norm(&f, alpha);
            let p = 8f64.powf(alpha);
            assert!(e >= p - 1e-12 && e <= 2.0 * p + 1.0 + 1e-12, "{alpha} {e}");
        }
    }

    #[test]
    fn masks() {
        let m = Mask::Directional { dir: [1.0, 0.0], lambda: 100.0, width: 0.25 };
        assert!(m.keeps(100, 0) && m.keeps(-100, 0) && m.keeps(120, 10));
        assert!(!m.keeps(0, 100) && !m.keeps(60, 0));
        assert_eq!(m.reach(), Some(125));
        let g = Grid::new(128).unwrap();
        let f: ScalarField = random_field(g, 10, &mut rng());
        assert!(lp_project(&f, m).is_err());
    }
}
