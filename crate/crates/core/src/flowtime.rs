//! Time grids, time series of fields, the temporal mollifier, the partition of
//! unity `χ_i` and the Lagrangian flow maps `Φ_i`.

use crate::geometry::SetTag;
use crate::params::ParameterTable;
use crate::spectral::{lambda, Field, Grid, Spectrum, VectorField, C64};
use crate::{par, Error, Result};
use std::f64::consts::PI;
use std::sync::Arc;

/// Uniform samples `t_j = t0 + j·dt`, `j = 0..nt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub nt: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, nt: usize) -> Result<Self> {
        if !(dt > 0.0) || !t0.is_finite() || nt == 0 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs dt > 0 and nt > 0 (t0 = {t0}, dt = {dt}, nt = {nt})"
            )));
        }
        Ok(Self { t0, dt, nt })
    }

    /// Grid on `[t0, t1]` with `nt` samples.
    pub fn from_endpoints(t0: f64, t1: f64, nt: usize) -> Result<Self> {
        if nt < 2 || !(t1 > t0) {
            return Err(Error::InvalidParameter(format!(
                "need t1 > t0 and nt >= 2 (t0 = {t0}, t1 = {t1}, nt = {nt})"
            )));
        }
        Self::new(t0, (t1 - t0) / (nt - 1) as f64, nt)
    }

    /// Grid whose samples are the integer multiples `j·dt` for `j = first..first + nt`.
    pub fn aligned(first: i64, dt: f64, nt: usize) -> Result<Self> {
        Self::new(first as f64 * dt, dt, nt)
    }

    #[inline]
    pub fn t(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    pub fn t1(&self) -> f64 {
        self.t(self.nt - 1)
    }

    /// Index of a sample within `1e-9·dt` of `t`.
    pub fn sample_at(&self, t: f64) -> Option<usize> {
        let j = ((t - self.t0) / self.dt).round();
        if j < 0.0 || j >= self.nt as f64 {
            return None;
        }
        let j = j as usize;
        ((self.t(j) - t).abs() <= 1e-9 * self.dt).then_some(j)
    }
}

/// A field sampled on a [`TimeGrid`]. Values outside the slab are taken to be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Series<const N: usize> {
    pub time: TimeGrid,
    pub samples: Vec<Field<N>>,
}

pub type VectorSeries = Series<2>;
pub type TensorSeries = Series<3>;
pub type ScalarSeries = Series<1>;

impl<const N: usize> Series<N> {
    pub fn new(time: TimeGrid, samples: Vec<Field<N>>) -> Result<Self> {
        if samples.len() != time.nt {
            return Err(Error::TimeGridMismatch);
        }
        Ok(Self { time, samples })
    }

    pub fn zeros(time: TimeGrid, grid: Grid) -> Self {
        Self {
            time,
            samples: vec![Field::zeros(grid); time.nt],
        }
    }

    pub fn grid(&self) -> Grid {
        self.samples[0].grid
    }

    pub fn map<const M: usize>(&self, f: impl Fn(&Field<N>) -> Field<M>) -> Series<M> {
        Series {
            time: self.time,
            samples: self.samples.iter().map(f).collect(),
        }
    }

    pub fn try_map<const M: usize>(&self, f: impl Fn(&Field<N>) -> Result<Field<M>>) -> Result<Series<M>> {
        Ok(Series {
            time: self.time,
            samples: self.samples.iter().map(f).collect::<Result<_>>()?,
        })
    }

    fn zip(&self, o: &Self, f: impl Fn(&Field<N>, &Field<N>) -> Field<N>) -> Self {
        assert_eq!(self.time, o.time, "series on different time grids");
        Self {
            time: self.time,
            samples: self.samples.iter().zip(&o.samples).map(|(a, b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        self.zip(o, Field::add)
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.zip(o, Field::sub)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|f| f.scale(s))
    }

    pub fn is_zero(&self) -> bool {
        self.samples.iter().all(Field::is_zero)
    }

    /// Sample `j`, or zero outside the slab.
    pub fn at(&self, j: i64) -> Option<&Field<N>> {
        (j >= 0 && (j as usize) < self.time.nt).then(|| &self.samples[j as usize])
    }

    /// `max_j ‖f(t_j)‖₀`.
    pub fn sup_norm(&self) -> f64 {
        self.samples.iter().map(Field::sup_norm).fold(0.0, f64::max)
    }

    /// `max_j ‖f(t_j)‖_{C¹}`.
    pub fn c1_norm(&self) -> f64 {
        self.samples.iter().map(Field::c1_norm).fold(0.0, f64::max)
    }

    /// First and last sample indices carrying a nonzero field.
    pub fn support(&self) -> Option<(usize, usize)> {
        let first = self.samples.iter().position(|f| !f.is_zero())?;
        let last = self.samples.iter().rposition(|f| !f.is_zero())?;
        Some((first, last))
    }

    /// Symmetric difference quotient with step `h·dt`, zero outside the slab.
    pub fn difference(&self, h: usize) -> Self {
        let inv = 1.0 / (2.0 * h as f64 * self.time.dt);
        let grid = self.grid();
        let zero = Field::zeros(grid);
        let samples = (0..self.time.nt as i64)
            .map(|j| {
                let fwd = self.at(j + h as i64).unwrap_or(&zero);
                let bwd = self.at(j - h as i64).unwrap_or(&zero);
                fwd.sub(bwd).scale(inv)
            })
            .collect();
        Self {
            time: self.time,
            samples,
        }
    }

    /// Centered time derivative `(f_{j+1} − f_{j−1}) / (2dt)` with zero ghosts.
    pub fn time_derivative(&self) -> Self {
        self.difference(1)
    }

    /// Spatial mean of `|f|²` summed over samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(Field::energy).sum()
    }
}

/// Convergence ratio of the centered difference, `‖D_{4h} − D_{2h}‖ / ‖D_{2h} − D_h‖`
/// in the space-time L² norm; about 4 for resolved second-order differences.
pub fn richardson_ratio<const N: usize>(s: &Series<N>) -> Option<f64> {
    let d1 = s.difference(1);
    let d2 = s.difference(2);
    let d4 = s.difference(4);
    let num = d4.sub(&d2).energy().sqrt();
    let den = d2.sub(&d1).energy().sqrt();
    (den > 0.0).then(|| num / den)
}

// ---------------------------------------------------------------------------
// Mollifier

fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s * s)).exp()
    }
}

/// Discrete weights `w_m`, `m = −r..=r`, of the bump of radius `tau`, summing to one.
pub fn mollifier_weights(tau: f64, dt: f64) -> Result<Vec<f64>> {
    if dt > tau / 8.0 {
        return Err(Error::TimeStepTooLarge { dt, limit: tau / 8.0 });
    }
    let r = (tau / dt).floor() as i64;
    let raw: Vec<f64> = (-r..=r).map(|m| bump(m as f64 * dt / tau)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// First-moment constant `Σ |s_m| w_m` in units of `tau`; the mollification
/// error satisfies `‖f − ψ*f‖₀ ≤ C·tau·‖∂_t f‖₀`.
pub fn first_moment(tau: f64, dt: f64) -> Result<f64> {
    let w = mollifier_weights(tau, dt)?;
    let r = (w.len() / 2) as i64;
    Ok((-r..=r)
        .zip(&w)
        .map(|(m, w)| (m as f64 * dt / tau).abs() * w)
        .sum())
}

/// `ψ^τ * f` sampled on the same grid; the series is extended by zero on both sides.
pub fn mollify_time<const N: usize>(series: &Series<N>, tau: f64) -> Result<Series<N>> {
    let w = mollifier_weights(tau, series.time.dt)?;
    let r = (w.len() / 2) as i64;
    if series.time.nt < w.len() {
        return Err(Error::SlabTooShort {
            nt: series.time.nt,
            needed: w.len(),
        });
    }
    let grid = series.grid();
    let samples = (0..series.time.nt as i64)
        .map(|j| {
            let mut acc = Field::<N>::zeros(grid);
            for m in -r..=r {
                if let Some(f) = series.at(j - m) {
                    if !f.is_zero() {
                        acc = acc.add(&f.scale(w[(m + r) as usize]));
                    }
                }
            }
            acc
        })
        .collect();
    Ok(Series {
        time: series.time,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Partition of unity

fn smooth_step_kernel(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        (-1.0 / s).exp()
    }
}

/// `σ(s) = f(s)/(f(s) + f(1−s))`, `f(s) = e^{−1/s}`: smooth, 0 at 0, 1 at 1.
fn sigma(s: f64) -> f64 {
    let a = smooth_step_kernel(s);
    let b = smooth_step_kernel(1.0 - s);
    a / (a + b)
}

fn sigma_prime(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    let (a, b) = (smooth_step_kernel(s), smooth_step_kernel(1.0 - s));
    let (da, db) = (a / (s * s), -b / ((1.0 - s) * (1.0 - s)));
    (da * (a + b) - a * (da + db)) / ((a + b) * (a + b))
}

/// Profiles `χ_i(t) = cos(π/2 · σ(|t − t_i|/τ))` on `(t_{i−1}, t_{i+1})`, so
/// `χ_i² + χ_{i+1}² = 1` on `[t_i, t_{i+1}]` exactly up to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePartition {
    pub tau: f64,
    /// Active indices, consecutive.
    pub indices: Vec<i64>,
    /// Iteration index `q` of the step using the partition.
    pub q: i64,
    /// Interval on which `Σχ_i² = 1` is guaranteed.
    pub covered: (f64, f64),
}

impl TimePartition {
    #[inline]
    pub fn t_i(&self, i: i64) -> f64 {
        i as f64 * self.tau
    }

    pub fn chi(&self, i: i64, t: f64) -> f64 {
        let s = (t - self.t_i(i)).abs() / self.tau;
        if s >= 1.0 {
            0.0
        } else {
            (0.5 * PI * sigma(s)).cos()
        }
    }

    pub fn dchi(&self, i: i64, t: f64) -> f64 {
        let d = t - self.t_i(i);
        let s = d.abs() / self.tau;
        if s >= 1.0 {
            return 0.0;
        }
        -(0.5 * PI * sigma(s)).sin() * 0.5 * PI * sigma_prime(s) * d.signum() / self.tau
    }

    pub fn sum_sq(&self, t: f64) -> f64 {
        self.indices.iter().map(|&i| self.chi(i, t).powi(2)).sum()
    }

    /// Open support `(t_{i−1}, t_{i+1})` of `χ_i`.
    pub fn support_of(&self, i: i64) -> (f64, f64) {
        (self.t_i(i - 1), self.t_i(i + 1))
    }

    /// Union of the supports.
    pub fn support(&self) -> (f64, f64) {
        let lo = *self.indices.first().expect("nonempty partition");
        let hi = *self.indices.last().expect("nonempty partition");
        (self.t_i(lo - 1), self.t_i(hi + 1))
    }

    /// Direction family for interval `i`.
    pub fn tag(&self, i: i64) -> SetTag {
        SetTag::for_step(self.q, i)
    }

    /// `τ · max |∂_tχ_i|`, measured on a fine sampling of one interval.
    pub fn derivative_constant(&self) -> f64 {
        let i = self.indices[0];
        (1..4000)
            .map(|m| {
                let t = self.t_i(i) + m as f64 * self.tau / 2000.0 - self.tau;
                self.dchi(i, t).abs() * self.tau
            })
            .fold(0.0, f64::max)
    }
}

/// Partition with `t_i = i·τ_{c,q+1}` covering `support = [ta, tb]`: `Σχ_i² = 1`
/// there and `Σχ_i² = 0` on `[0, τ]`.
pub fn build_partition(table: &ParameterTable, q: i64, support: (f64, f64)) -> Result<TimePartition> {
    let tau = table.tau_c_at(q + 1)?;
    partition_with_tau(tau, q, support)
}

/// [`build_partition`] with an explicit cutoff scale.
pub fn partition_with_tau(tau: f64, q: i64, support: (f64, f64)) -> Result<TimePartition> {
    let (ta, tb) = support;
    if !(tau > 0.0) || !(tb >= ta) || !ta.is_finite() || !tb.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "partition needs tau > 0 and a bounded support (tau = {tau}, support = [{ta}, {tb}])"
        )));
    }
    let lo = (ta / tau).floor() as i64;
    let hi = ((tb / tau).ceil() as i64).max(lo + 1);
    if lo < 2 {
        return Err(Error::InvalidParameter(format!(
            "support starting at {ta} is within 2 tau = {} of t = 0",
            2.0 * tau
        )));
    }
    Ok(TimePartition {
        tau,
        indices: (lo..=hi).collect(),
        q,
        covered: (lo as f64 * tau, hi as f64 * tau),
    })
}

// ---------------------------------------------------------------------------
// Flow maps

/// `Λv` as a sparse list of modes with per-sample coefficients, evaluated at
/// arbitrary points by direct summation and in time by cubic Lagrange
/// interpolation through zero ghosts outside the slab.
pub struct Advector {
    time: TimeGrid,
    band: i64,
    /// `(k1, k2, weight)` with weight 1 for `k = 0` and 2 otherwise (half-box sum).
    modes: Vec<(i64, i64, f64)>,
    /// `coeffs[j][m] = [c_x, c_y]` for sample `j` and mode `m`.
    coeffs: Vec<Vec<[C64; 2]>>,
    /// `max_j ‖Λv(t_j)‖₀`.
    pub speed: f64,
    /// `max_j ‖Λv(t_j)‖₁` (C¹ norm).
    pub c1: f64,
}

impl Advector {
    pub fn new(v: &VectorField, time: TimeGrid) -> Self {
        Self::from_series(&Series {
            time,
            samples: vec![v.clone(); time.nt],
        })
    }

    /// Advecting field `Λv` of a series.
    pub fn from_series(v: &Series<2>) -> Self {
        let lv: Vec<VectorField> = v.samples.iter().map(lambda).collect();
        let band = lv.iter().map(|f| f.band()).max().unwrap_or(0);
        let mut modes = Vec::new();
        let b = band as i64;
        for k2 in 0..=b {
            for k1 in -b..=b {
                if k2 == 0 && k1 < 0 {
                    continue;
                }
                let live = lv.iter().any(|f| {
                    let (x, y) = (f.comps[0].get(k1, k2), f.comps[1].get(k1, k2));
                    x.norm_sqr() + y.norm_sqr() > 0.0
                });
                if live {
                    modes.push((k1, k2, if k1 == 0 && k2 == 0 { 1.0 } else { 2.0 }));
                }
            }
        }
        let coeffs = lv
            .iter()
            .map(|f| {
                modes
                    .iter()
                    .map(|&(k1, k2, _)| [f.comps[0].get(k1, k2), f.comps[1].get(k1, k2)])
                    .collect()
            })
            .collect();
        let speed = lv.iter().map(VectorField::sup_norm).fold(0.0, f64::max);
        let c1 = lv.iter().map(VectorField::c1_norm).fold(0.0, f64::max);
        Self {
            time: v.time,
            band: b,
            modes,
            coeffs,
            speed,
            c1,
        }
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    /// Mode coefficients at time `s`.
    pub fn coefficients_at(&self, s: f64) -> Vec<[C64; 2]> {
        let x = (s - self.time.t0) / self.time.dt;
        let j = x.floor() as i64;
        let mut out = vec![[C64::new(0.0, 0.0); 2]; self.modes.len()];
        let nodes = [j - 1, j, j + 1, j + 2];
        for (a, &na) in nodes.iter().enumerate() {
            if na < 0 || na >= self.time.nt as i64 {
                continue;
            }
            let mut w = 1.0;
            for (b, &nb) in nodes.iter().enumerate() {
                if a != b {
                    w *= (x - nb as f64) / ((na - nb) as f64);
                }
            }
            if w == 0.0 {
                continue;
            }
            for (o, c) in out.iter_mut().zip(&self.coeffs[na as usize]) {
                o[0] += c[0] * w;
                o[1] += c[1] * w;
            }
        }
        out
    }

    /// `Λv(x)` for the given coefficients.
    #[inline]
    pub fn eval(&self, coeffs: &[[C64; 2]], x: [f64; 2], scratch: &mut Vec<C64>) -> [f64; 2] {
        if self.modes.is_empty() {
            return [0.0, 0.0];
        }
        let b = self.band;
        let w = (2 * b + 1) as usize;
        scratch.clear();
        scratch.resize(w + (b as usize + 1), C64::new(0.0, 0.0));
        let (ex, ey) = scratch.split_at_mut(w);
        let e1 = C64::from_polar(1.0, x[0]);
        let e2 = C64::from_polar(1.0, x[1]);
        ex[b as usize] = C64::new(1.0, 0.0);
        for k in 1..=b as usize {
            ex[b as usize + k] = ex[b as usize + k - 1] * e1;
            ex[b as usize - k] = ex[b as usize + k].conj();
        }
        ey[0] = C64::new(1.0, 0.0);
        for k in 1..=b as usize {
            ey[k] = ey[k - 1] * e2;
        }
        let mut u = [0.0, 0.0];
        for (&(k1, k2, wt), c) in self.modes.iter().zip(coeffs) {
            let e = ex[(k1 + b) as usize] * ey[k2 as usize];
            u[0] += wt * (c[0] * e).re;
            u[1] += wt * (c[1] * e).re;
        }
        u
    }

    /// Follows the characteristic `dX/ds = Λv(s, X)` from `X(t_from) = x` to
    /// `t_to` with `steps` RK4 steps.
    pub fn trace(&self, x: [f64; 2], t_from: f64, t_to: f64, steps: usize) -> [f64; 2] {
        let path = self.stage_coefficients(t_from, t_to, steps);
        let mut scratch = Vec::new();
        self.trace_with(&path, x, (t_to - t_from) / steps as f64, &mut scratch)
    }

    fn stage_coefficients(&self, t_from: f64, t_to: f64, steps: usize) -> Vec<[Vec<[C64; 2]>; 3]> {
        let h = (t_to - t_from) / steps as f64;
        (0..steps)
            .map(|s| {
                let t = t_from + s as f64 * h;
                [
                    self.coefficients_at(t),
                    self.coefficients_at(t + 0.5 * h),
                    self.coefficients_at(t + h),
                ]
            })
            .collect()
    }

    fn trace_with(
        &self,
        path: &[[Vec<[C64; 2]>; 3]],
        x: [f64; 2],
        h: f64,
        scratch: &mut Vec<C64>,
    ) -> [f64; 2] {
        let mut p = x;
        for [c0, c1, c2] in path {
            let k1 = self.eval(c0, p, scratch);
            let k2 = self.eval(c1, [p[0] + 0.5 * h * k1[0], p[1] + 0.5 * h * k1[1]], scratch);
            let k3 = self.eval(c1, [p[0] + 0.5 * h * k2[0], p[1] + 0.5 * h * k2[1]], scratch);
            let k4 = self.eval(c2, [p[0] + h * k3[0], p[1] + h * k3[1]], scratch);
            for d in 0..2 {
                p[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
            }
        }
        p
    }

    /// Substeps per `dt` needed for `h·‖Λv‖₀ ≤ dx/2`.
    pub fn required_substeps(&self, grid: Grid) -> usize {
        ((self.time.dt * self.speed) / (0.5 * grid.dx())).ceil().max(1.0) as usize
    }
}

/// Displacement `Φ_i(t, x) − x` (unwrapped) on the samples where `χ_i ≠ 0`.
#[derive(Debug, Clone)]
pub struct FlowMap {
    pub index: i64,
    pub anchor_time: f64,
    pub grid: Grid,
    pub time: TimeGrid,
    /// `displacement[j]` for samples inside the support of `χ_i`.
    pub displacement: Vec<Option<Arc<[Vec<f64>; 2]>>>,
    /// RK4 substeps per `dt` used.
    pub substeps: usize,
}

impl FlowMap {
    pub fn sample(&self, j: usize) -> Option<&[Vec<f64>; 2]> {
        self.displacement[j].as_deref()
    }

    /// Sample sitting on the anchor time, if the grid hits it.
    pub fn anchor_sample(&self) -> Option<usize> {
        self.time.sample_at(self.anchor_time)
    }

    /// `∇(Φ − x)` at sample `j` as `(∂₁d₁, ∂₂d₁, ∂₁d₂, ∂₂d₂)`, by spectral
    /// differentiation of the periodic displacement.
    pub fn displacement_gradient(&self, j: usize) -> Option<[Vec<f64>; 4]> {
        let d = self.sample(j)?;
        let n = self.grid.n;
        let f = VectorField::from_physical(self.grid, n, d, self.grid.max_band());
        let parts: Vec<Spectrum> = f
            .comps
            .iter()
            .flat_map(|c| [crate::spectral::deriv(c, 0), crate::spectral::deriv(c, 1)])
            .collect();
        let refs: Vec<&Spectrum> = parts.iter().collect();
        let mut p = crate::spectral::synthesize(&refs, n).into_iter();
        Some(std::array::from_fn(|_| p.next().expect("four components")))
    }

    /// `max |det ∇Φ − 1|` at sample `j`.
    pub fn det_deviation(&self, j: usize) -> Option<f64> {
        let g = self.displacement_gradient(j)?;
        Some(par::max_by(self.grid.len(), |p| {
            let (a, b, c, d) = (1.0 + g[0][p], g[1][p], g[2][p], 1.0 + g[3][p]);
            (a * d - b * c - 1.0).abs()
        }))
    }

    /// `‖∇Φ − Id‖₀` (operator norm) at sample `j`.
    pub fn deformation(&self, j: usize) -> Option<f64> {
        let g = self.displacement_gradient(j)?;
        Some(par::max_by(self.grid.len(), |p| {
            crate::spectral::mat_norm(g[0][p], g[1][p], g[2][p], g[3][p])
        }))
    }
}

/// Solves `D_{t,Λv}Φ_i = 0`, `Φ_i(t_i, x) = x` by backward characteristics from
/// every grid point at every sample in the support of `χ_i`. `substeps = None`
/// picks the CFL minimum.
pub fn solve_flow(
    v: &Series<2>,
    i: i64,
    partition: &TimePartition,
    substeps: Option<usize>,
) -> Result<FlowMap> {
    let adv = Advector::from_series(v);
    solve_flow_with(&adv, v.grid(), i, partition, substeps)
}

/// [`solve_flow`] with a prebuilt advector (shared between intervals).
pub fn solve_flow_with(
    adv: &Advector,
    grid: Grid,
    i: i64,
    partition: &TimePartition,
    substeps: Option<usize>,
) -> Result<FlowMap> {
    let time = adv.time;
    let (lo, hi) = partition.support_of(i);
    if lo < time.t0 - 1e-9 * time.dt || hi > time.t1() + 1e-9 * time.dt {
        return Err(Error::SlabCoverage { index: i });
    }
    let required = adv.required_substeps(grid);
    let substeps = match substeps {
        Some(s) if s < required => {
            return Err(Error::Cfl {
                required,
                given: s,
            })
        }
        Some(s) => s,
        None => required,
    };
    let t_i = partition.t_i(i);
    let h = time.dt / substeps as f64;
    let n = grid.n;
    let coords: Vec<f64> = (0..n).map(|j| grid.coord(j)).collect();
    let displacement = (0..time.nt)
        .map(|j| {
            let t = time.t(j);
            if partition.chi(i, t) == 0.0 {
                return None;
            }
            if (t - t_i).abs() <= 1e-9 * time.dt || adv.mode_count() == 0 {
                return Some(Arc::new([vec![0.0; n * n], vec![0.0; n * n]]));
            }
            let steps = ((t_i - t).abs() / h).ceil().max(1.0) as usize;
            let path = adv.stage_coefficients(t, t_i, steps);
            let hs = (t_i - t) / steps as f64;
            let mut dx = vec![0.0; n * n];
            let mut dy = vec![0.0; n * n];
            let rows = par::map_collect(n, |r| {
                let mut scratch = Vec::new();
                let mut out = vec![[0.0; 2]; n];
                for (c, o) in out.iter_mut().enumerate() {
                    let x = [coords[c], coords[r]];
                    let y = adv.trace_with(&path, x, hs, &mut scratch);
                    *o = [y[0] - x[0], y[1] - x[1]];
                }
                out
            });
            for (r, row) in rows.into_iter().enumerate() {
                for (c, d) in row.into_iter().enumerate() {
                    dx[r * n + c] = d[0];
                    dy[r * n + c] = d[1];
                }
            }
            Some(Arc::new([dx, dy]))
        })
        .collect();
    Ok(FlowMap {
        index: i,
        anchor_time: t_i,
        grid,
        time,
        displacement,
        substeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::ScalarField;

    fn scalar_series(time: TimeGrid, grid: Grid, f: impl Fn(f64) -> f64) -> Series<1> {
        let one = Spectrum::from_fn(1, |k1, k2| {
            if (k1, k2) == (1, 0) {
                C64::new(0.5, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        Series {
            time,
            samples: (0..time.nt)
                .map(|j| ScalarField { grid, comps: [one.scale(f(time.t(j)))] })
                .collect(),
        }
    }

    #[test]
    fn weights_have_unit_mass_and_bounded_moment() {
        let w = mollifier_weights(1.0, 0.01).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let c = first_moment(1.0, 0.01).unwrap();
        assert!(c > 0.0 && c < 1.0);
        assert!(matches!(mollifier_weights(1.0, 0.2), Err(Error::TimeStepTooLarge { .. })));
    }

    #[test]
    fn mollifier_keeps_linear_series_in_interior() {
        let grid = Grid::new(8).unwrap();
        let time = TimeGrid::new(0.0, 0.01, 200).unwrap();
        let s = scalar_series(time, grid, |t| 3.0 + 2.0 * t);
        let m = mollify_time(&s, 0.1).unwrap();
        for j in 20..180 {
            let a = m.samples[j].comps[0].get(1, 0).re;
            let b = s.samples[j].comps[0].get(1, 0).re;
            assert!((a - b).abs() < 1e-12, "{j}");
        }
        let short = Series { time: TimeGrid::new(0.0, 0.01, 5).unwrap(), samples: s.samples[..5].to_vec() };
        assert!(matches!(mollify_time(&short, 0.1), Err(Error::SlabTooShort { .. })));
    }

    #[test]
    fn partition_sums_to_one() {
        let p = partition_with_tau(0.1, 0, (1.03, 1.27)).unwrap();
        for m in 0..=240 {
            let t = 1.03 + m as f64 * 0.001;
            assert!((p.sum_sq(t) - 1.0).abs() < 1e-12, "{t}");
        }
        assert_eq!(p.sum_sq(0.05), 0.0);
        let c = p.derivative_constant();
        assert!(c > 1.0 && c <= 4.0, "{c}");
        assert!(partition_with_tau(0.1, 0, (0.1, 0.5)).is_err());
    }

    #[test]
    fn centered_difference_is_second_order() {
        let grid = Grid::new(8).unwrap();
        let time = TimeGrid::new(0.0, 0.01, 101).unwrap();
        let s = scalar_series(time, grid, |t| (3.0 * t).sin() * (t * (1.0 - t)).powi(4));
        let r = richardson_ratio(&s).unwrap();
        assert!((r - 4.0).abs() < 0.5, "{r}");
    }
}
