//! The alternating iteration: initialization from a prescribed field, one
//! iteration step, the role swap, momentum and scalar residuals.
//!
//! The state holds two momentum systems sharing the force `F`:
//!
//! ```text
//! ∂_t u + N(u) + ∇π = div F (+ div R if u is active)
//! ∂_t v + N(v) + ∇p = div F (+ div R if v is active)
//! ```
//!
//! with `N(f) = Λf·∇f − (∇f)^TΛf`. Pressures are never stored; every residual
//! is Leray projected.

use crate::flowtime::{build_partition, partition_with_tau, Series, TensorSeries, TimeGrid, VectorSeries};
use crate::geometry::sym_norm;
use crate::params::ParameterTable;
use crate::perturb::{
    build_perturbation, mask_overlap, mass_outside, step_masks, PerturbationOptions, PerturbationReport,
    DEFAULT_SHELL_WIDTH,
};
use crate::spectral::{
    advect_scalar, antidiv, deriv, div, div_tensor, grad_perp, lambda, lambda_pow, leray, perp_div, sqg_full,
    Field, Grid, ScalarField, Spectrum, SymTensorField, VectorField, C64,
};
use crate::stress::{assemble, AssemblyOptions, NormThresholds, StressBreakdown, StressInputs};
use crate::{par, Error, Result};
use std::sync::Arc;

/// Which field carries the stress.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    VActive,
    UActive,
}

impl Role {
    pub fn flip(self) -> Self {
        match self {
            Role::VActive => Role::UActive,
            Role::UActive => Role::VActive,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::VActive => "v_active",
            Role::UActive => "u_active",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Active,
    Inactive,
}

/// A tensor series with a sign flag; negation never touches the data.
#[derive(Debug, Clone)]
pub struct SignedSeries {
    /// `+1` or `−1`.
    pub sign: f64,
    pub data: Arc<TensorSeries>,
}

impl SignedSeries {
    pub fn new(data: TensorSeries) -> Self {
        Self {
            sign: 1.0,
            data: Arc::new(data),
        }
    }

    pub fn neg(&self) -> Self {
        Self {
            sign: -self.sign,
            data: Arc::clone(&self.data),
        }
    }

    pub fn sample(&self, j: usize) -> SymTensorField {
        let f = &self.data.samples[j];
        if self.sign > 0.0 {
            f.clone()
        } else {
            f.neg()
        }
    }

    /// The signed series as plain data (shared when the sign is `+1`).
    pub fn materialize(&self) -> TensorSeries {
        if self.sign > 0.0 {
            (*self.data).clone()
        } else {
            self.data.scale(-1.0)
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.is_zero()
    }

    /// Same data object with the opposite sign.
    pub fn cancels(&self, o: &Self) -> bool {
        Arc::ptr_eq(&self.data, &o.data) && self.sign == -o.sign
    }

    pub fn bitwise_eq(&self, o: &Self) -> bool {
        self.sign.to_bits() == o.sign.to_bits()
            && (Arc::ptr_eq(&self.data, &o.data) || series_bitwise_eq(&self.data, &o.data))
    }
}

/// The force `F` as an ordered sum of signed terms. Adding the exact negation
/// of the last term removes it, so a double swap restores the ledger exactly.
#[derive(Debug, Clone, Default)]
pub struct ForceLedger {
    terms: Vec<SignedSeries>,
}

impl ForceLedger {
    pub fn new(first: SignedSeries) -> Self {
        Self { terms: vec![first] }
    }

    pub fn terms(&self) -> &[SignedSeries] {
        &self.terms
    }

    /// `F + term`.
    pub fn plus(&self, term: SignedSeries) -> Self {
        let mut terms = self.terms.clone();
        if terms.last().is_some_and(|l| l.cancels(&term)) {
            terms.pop();
        } else {
            terms.push(term);
        }
        Self { terms }
    }

    /// `F(t_j)`, summed in ledger order.
    pub fn sample(&self, j: usize, grid: Grid) -> SymTensorField {
        let mut it = self.terms.iter();
        let Some(first) = it.next() else {
            return SymTensorField::zeros(grid);
        };
        it.fold(first.sample(j), |acc, t| {
            let s = t.sample(j);
            if s.is_zero() {
                acc
            } else {
                acc.add(&s)
            }
        })
    }

    pub fn materialize(&self, time: TimeGrid, grid: Grid) -> TensorSeries {
        Series {
            time,
            samples: (0..time.nt).map(|j| self.sample(j, grid)).collect(),
        }
    }

    pub fn bitwise_eq(&self, o: &Self) -> bool {
        self.terms.len() == o.terms.len() && self.terms.iter().zip(&o.terms).all(|(a, b)| a.bitwise_eq(b))
    }

    /// First and last sample where some term is nonzero.
    pub fn support(&self) -> Option<(usize, usize)> {
        self.terms.iter().filter_map(|t| t.data.support()).reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
    }
}

fn spectrum_bitwise_eq(a: &Spectrum, b: &Spectrum) -> bool {
    a.band() == b.band()
        && a
            .entries()
            .zip(b.entries())
            .all(|(x, y)| x.2.re.to_bits() == y.2.re.to_bits() && x.2.im.to_bits() == y.2.im.to_bits())
}

pub fn field_bitwise_eq<const N: usize>(a: &Field<N>, b: &Field<N>) -> bool {
    a.grid == b.grid && a.comps.iter().zip(&b.comps).all(|(x, y)| spectrum_bitwise_eq(x, y))
}

/// Equality of every stored bit, including the sign of zeros.
pub fn series_bitwise_eq<const N: usize>(a: &Series<N>, b: &Series<N>) -> bool {
    a.time.t0.to_bits() == b.time.t0.to_bits()
        && a.time.dt.to_bits() == b.time.dt.to_bits()
        && a.time.nt == b.time.nt
        && a.samples.iter().zip(&b.samples).all(|(x, y)| field_bitwise_eq(x, y))
}

/// The relaxed pair `(u, v, F, R)` at iteration `q`.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub q: i64,
    pub time: TimeGrid,
    pub grid: Grid,
    pub u: Arc<VectorSeries>,
    pub v: Arc<VectorSeries>,
    pub force: ForceLedger,
    pub stress: SignedSeries,
    pub role: Role,
    pub table: Arc<ParameterTable>,
}

impl SystemState {
    /// Assembles a state from its parts after checking grids and time grids agree.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        q: i64,
        u: VectorSeries,
        v: VectorSeries,
        force: ForceLedger,
        stress: SignedSeries,
        role: Role,
        table: Arc<ParameterTable>,
    ) -> Result<Self> {
        let time = v.time;
        let grid = v.grid();
        let times = [u.time, stress.data.time]
            .into_iter()
            .chain(force.terms.iter().map(|t| t.data.time));
        for t in times {
            if t != time {
                return Err(Error::TimeGridMismatch);
            }
        }
        let grids = [u.grid(), stress.data.grid()]
            .into_iter()
            .chain(force.terms.iter().map(|t| t.data.grid()));
        for g in grids {
            if g != grid {
                return Err(Error::GridMismatch(g.n, grid.n));
            }
        }
        Ok(Self {
            q,
            time,
            grid,
            u: Arc::new(u),
            v: Arc::new(v),
            force,
            stress,
            role,
            table,
        })
    }

    pub fn active(&self) -> &Arc<VectorSeries> {
        match self.role {
            Role::VActive => &self.v,
            Role::UActive => &self.u,
        }
    }

    pub fn inactive(&self) -> &Arc<VectorSeries> {
        match self.role {
            Role::VActive => &self.u,
            Role::UActive => &self.v,
        }
    }

    pub fn field(&self, which: Which) -> &Arc<VectorSeries> {
        match which {
            Which::Active => self.active(),
            Which::Inactive => self.inactive(),
        }
    }

    /// `1 − Σ_{i≤q} τ_{m,i}`: every field vanishes before this time.
    pub fn quiet_until(&self) -> Result<f64> {
        let mut s = 0.0;
        for i in 0..=self.q {
            s += self.table.tau_m_at(i)?;
        }
        Ok(1.0 - s)
    }

    /// Largest sup norm of any field at samples `t ≤ 1 − Σ_{i≤q} τ_{m,i}`.
    pub fn support_violation(&self) -> Result<f64> {
        let cut = self.quiet_until()?;
        let mut worst = 0.0f64;
        for j in (0..self.time.nt).take_while(|&j| self.time.t(j) <= cut) {
            worst = worst
                .max(self.u.samples[j].sup_norm())
                .max(self.v.samples[j].sup_norm())
                .max(self.stress.data.samples[j].sup_norm());
            for t in &self.force.terms {
                worst = worst.max(t.data.samples[j].sup_norm());
            }
        }
        Ok(worst)
    }

    /// `max ‖div f‖₀` over both fields and all samples.
    pub fn divergence(&self) -> f64 {
        self.u
            .samples
            .iter()
            .chain(&self.v.samples)
            .map(|f| if f.is_zero() { 0.0 } else { div(f).sup_norm() })
            .fold(0.0, f64::max)
    }

    /// Largest band of `(u, v, F, R)`.
    pub fn bands(&self) -> [usize; 4] {
        let b = |s: &[VectorField]| s.iter().map(|f| support_band(f)).max().unwrap_or(0);
        let bt = |s: &[SymTensorField]| s.iter().map(|f| support_band(f)).max().unwrap_or(0);
        let fb = self.force.terms.iter().map(|t| bt(&t.data.samples)).max().unwrap_or(0);
        [b(&self.u.samples), b(&self.v.samples), fb, bt(&self.stress.data.samples)]
    }
}

fn support_band<const N: usize>(f: &Field<N>) -> usize {
    f.comps.iter().map(Spectrum::support_band).max().unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Initial data

/// `φ(t) = exp(1 − 1/(1 − s²))` with `s` the affine map of `(start, end)` onto
/// `(−1, 1)`; peak value 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeBump {
    pub start: f64,
    pub end: f64,
}

impl TimeBump {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(end > start) || !start.is_finite() || !end.is_finite() {
            return Err(Error::InitialData(format!("bump needs start < end, got ({start}, {end})")));
        }
        Ok(Self { start, end })
    }

    fn s(&self, t: f64) -> f64 {
        (2.0 * t - self.start - self.end) / (self.end - self.start)
    }

    fn c(&self) -> f64 {
        2.0 / (self.end - self.start)
    }

    /// `(φ, φ', φ'')` at `t`.
    pub fn eval(&self, t: f64) -> [f64; 3] {
        let s = self.s(t);
        if s.abs() >= 1.0 {
            return [0.0; 3];
        }
        let e = 1.0 - s * s;
        let phi = (1.0 - 1.0 / e).exp();
        let g1 = -2.0 * s / (e * e);
        let g2 = -2.0 / (e * e) - 8.0 * s * s / (e * e * e);
        let c = self.c();
        [phi, phi * g1 * c, phi * (g1 * g1 + g2) * c * c]
    }
}

/// `V(t, x) = φ(t) V_s(x)`.
#[derive(Debug, Clone)]
pub struct InitialData {
    pub profile: VectorField,
    pub bump: TimeBump,
}

/// `A k⊥ cos(k·x + phase)` summed over the given modes, as a band-1 field.
pub fn cosine_modes(grid: Grid, modes: &[([i64; 2], f64, f64)]) -> VectorField {
    let mk = |comp: usize| {
        Spectrum::from_fn(1, |k1, k2| {
            let mut c = C64::new(0.0, 0.0);
            for &(k, amp, phase) in modes {
                let perp = [-k[1] as f64, k[0] as f64];
                if [k1, k2] == k {
                    c += C64::from_polar(0.5 * amp * perp[comp], phase);
                }
                if [k1, k2] == [-k[0], -k[1]] {
                    c += C64::from_polar(0.5 * amp * perp[comp], -phase);
                }
            }
            c
        })
    };
    VectorField {
        grid,
        comps: [mk(0), mk(1)],
    }
}

impl InitialData {
    pub fn new(profile: VectorField, bump: TimeBump) -> Result<Self> {
        let d = Self { profile, bump };
        d.validate()?;
        Ok(d)
    }

    /// Rejects data that is zero, not mean-zero, not divergence-free, not in
    /// `P_{≤1}` or not supported after `t = 1`.
    pub fn validate(&self) -> Result<()> {
        let p = &self.profile;
        if p.is_zero() {
            return Err(Error::InitialData("profile is zero".into()));
        }
        let scale = p.sup_norm();
        let mean = p.mean().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if mean > 1e-14 * scale {
            return Err(Error::InitialData(format!("profile mean {mean:e} is not zero")));
        }
        let d = div(p).sup_norm();
        if d > 1e-12 * scale {
            return Err(Error::InitialData(format!("profile divergence {d:e} is not zero")));
        }
        let outside: f64 = p.comps.iter().map(|c| c.energy_where(|k1, k2| k1 * k1 + k2 * k2 > 1)).sum();
        if outside > 0.0 {
            return Err(Error::InitialData("profile has modes with |k| > 1".into()));
        }
        if !(self.bump.start > 1.0) {
            return Err(Error::InitialData(format!(
                "time support starts at {} which is not after t = 1",
                self.bump.start
            )));
        }
        Ok(())
    }

    /// Support of `V^ζ(t) = ζV(ζt)`.
    pub fn support(&self, zeta: f64) -> (f64, f64) {
        (self.bump.start / zeta, self.bump.end / zeta)
    }

    /// `V^ζ` sampled on `time`.
    pub fn sample(&self, zeta: f64, time: TimeGrid, grid: Grid) -> VectorSeries {
        let prof = VectorField {
            grid,
            comps: self.profile.comps.clone(),
        };
        Series {
            time,
            samples: (0..time.nt)
                .map(|j| {
                    let [phi, _, _] = self.bump.eval(zeta * time.t(j));
                    if phi == 0.0 {
                        VectorField::zeros(grid)
                    } else {
                        prof.scale(zeta * phi)
                    }
                })
                .collect(),
        }
    }
}

/// Norms entering the initial inductive estimates, at `ζ = 1`; each scales as a
/// fixed power of `ζ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialNorms {
    /// `max_t(‖V‖₁ + ‖ΛV‖₀)`, power 1.
    pub field: f64,
    /// `max λ₀^{−1}‖F₀‖₁ + max ‖R₀‖₀ + max λ₀^{−1}‖R₀‖₁`, power 2.
    pub stress: f64,
    /// `max ‖∂_tF₀‖₀ + max ‖∂_tR₀‖₀`, power 3.
    pub stress_dt: f64,
}

/// Bounds of the initial inductive estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialBounds {
    /// `Mλ₀δ₀^{1/2}` for `u₀`.
    pub field_u: f64,
    /// `Mλ_{−1}δ_{−1}^{1/2}` for `v₀`.
    pub field_v: f64,
    /// `ελ₁δ₁`.
    pub stress: f64,
    /// `τ_{m,0}^{−1}λ₁δ₁`.
    pub stress_dt: f64,
}

const NORM_GRID: usize = 128;
const NORM_TIMES: usize = 801;

struct PhysTensor {
    vals: [Vec<f64>; 3],
    d1: [Vec<f64>; 3],
    d2: [Vec<f64>; 3],
}

fn phys_tensor(f: &SymTensorField) -> PhysTensor {
    let d: Vec<Spectrum> = f.comps.iter().flat_map(|c| [deriv(c, 0), deriv(c, 1)]).collect();
    let refs: Vec<&Spectrum> = d.iter().collect();
    let mut g = crate::spectral::synthesize(&refs, NORM_GRID).into_iter();
    let mut nx = || g.next().expect("component");
    let (a0, b0, a1, b1, a2, b2) = (nx(), nx(), nx(), nx(), nx(), nx());
    PhysTensor {
        vals: f.physical_on(NORM_GRID),
        d1: [a0, a1, a2],
        d2: [b0, b1, b2],
    }
}

/// `(max ‖αA + βB‖₀, max ‖∇(αA + βB)‖₀)` at one time.
fn combo_norms(a: &PhysTensor, b: &PhysTensor, al: f64, be: f64) -> (f64, f64) {
    let n = a.vals[0].len();
    let c = |x: &[Vec<f64>; 3], y: &[Vec<f64>; 3], j: usize| {
        [
            al * x[0][j] + be * y[0][j],
            al * x[1][j] + be * y[1][j],
            al * x[2][j] + be * y[2][j],
        ]
    };
    let c0 = par::max_by(n, |j| sym_norm(c(&a.vals, &b.vals, j)));
    let c1 = par::max_by(n, |j| sym_norm(c(&a.d1, &b.d1, j)).max(sym_norm(c(&a.d2, &b.d2, j))));
    (c0, c1)
}

/// Measures [`InitialNorms`] from the closed-form time dependence
/// `F₀ = −φ'BV_s + φ²BN(V_s)`, `R₀ = 2φ'BV_s` on a fine time sampling.
pub fn initial_norms(data: &InitialData, table: &ParameterTable) -> Result<InitialNorms> {
    let grid = Grid::new(NORM_GRID)?;
    let vs = VectorField {
        grid,
        comps: data.profile.comps.clone(),
    };
    let a = phys_tensor(&antidiv(&vs));
    let nn = phys_tensor(&antidiv(&sqg_full(&vs)?));
    let zero = phys_tensor(&SymTensorField::zeros(grid));
    let lam0 = table.lambda_at(0)? as f64;
    let vs_norm = vs.c1_norm() + lambda(&vs).sup_norm();
    let (mut f1, mut r0, mut r1, mut dtf, mut dtr) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut phi_max = 0.0f64;
    for m in 0..NORM_TIMES {
        let t = data.bump.start + (data.bump.end - data.bump.start) * m as f64 / (NORM_TIMES - 1) as f64;
        let [p, p1, p2] = data.bump.eval(t);
        phi_max = phi_max.max(p);
        let (c0, c1) = combo_norms(&a, &nn, -p1, p * p);
        f1 = f1.max(c0 + c1);
        let (c0, c1) = combo_norms(&a, &zero, 2.0 * p1, 0.0);
        r0 = r0.max(c0);
        r1 = r1.max(c0 + c1);
        dtf = dtf.max(combo_norms(&a, &nn, -p2, 2.0 * p * p1).0);
        dtr = dtr.max(combo_norms(&a, &zero, 2.0 * p2, 0.0).0);
    }
    Ok(InitialNorms {
        field: phi_max * vs_norm,
        stress: f1 / lam0 + r0 + r1 / lam0,
        stress_dt: dtf + dtr,
    })
}

pub fn initial_bounds(table: &ParameterTable) -> Result<InitialBounds> {
    let c = &table.config;
    let l = |q| table.lambda_at(q).map(|x| x as f64);
    Ok(InitialBounds {
        field_u: c.m * l(0)? * table.delta_at(0)?.sqrt(),
        field_v: c.m * l(-1)? * table.delta_at(-1)?.sqrt(),
        stress: c.eps * l(1)? * table.delta_at(1)?,
        stress_dt: l(1)? * table.delta_at(1)? / table.tau_m_at(0)?,
    })
}

fn admissible(n: &InitialNorms, b: &InitialBounds, z: f64) -> bool {
    z * n.field <= b.field_u.min(b.field_v) && z * z * n.stress <= b.stress && z * z * z * n.stress_dt <= b.stress_dt
}

/// Largest `ζ ∈ (0, zeta_max]` meeting the initial estimates, by bisection.
pub fn select_zeta(data: &InitialData, zeta_max: f64, table: &ParameterTable) -> Result<(f64, InitialNorms)> {
    if !(zeta_max > 0.0) || !zeta_max.is_finite() {
        return Err(Error::InvalidParameter(format!("zeta must be positive, got {zeta_max}")));
    }
    let norms = initial_norms(data, table)?;
    let bounds = initial_bounds(table)?;
    if admissible(&norms, &bounds, zeta_max) {
        return Ok((zeta_max, norms));
    }
    let (mut lo, mut hi) = (0.0, zeta_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if admissible(&norms, &bounds, mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo == 0.0 {
        return Err(Error::InitialData("no positive zeta meets the initial estimates".into()));
    }
    Ok((lo, norms))
}

/// Time grid resolving `steps` iterations from data supported in `support`:
/// `dt = min τ_{c,q+1}/per_tau_c` (and at most `τ_{m,q+1}/8`), padded by
/// `τ_{m,q+1} + 2τ_{c,q+1}` per step on each side.
pub fn plan_time_grid(table: &ParameterTable, support: (f64, f64), steps: usize, per_tau_c: usize) -> Result<TimeGrid> {
    if per_tau_c == 0 || steps == 0 {
        return Err(Error::InvalidParameter("steps and samples per tau_c must be positive".into()));
    }
    let mut dt = f64::INFINITY;
    let mut pad = 0.0;
    for q in 0..steps as i64 {
        let (tm, tc) = (table.tau_m_at(q + 1)?, table.tau_c_at(q + 1)?);
        dt = dt.min(tc / per_tau_c as f64).min(tm / 8.0);
        pad += tm + 2.0 * tc;
    }
    pad += 4.0 * dt;
    let first = ((support.0 - pad) / dt).floor() as i64;
    let last = ((support.1 + pad) / dt).ceil() as i64;
    TimeGrid::aligned(first, dt, (last - first + 1) as usize)
}

/// Diagnostics of [`initialize`].
#[derive(Debug, Clone, PartialEq)]
pub struct InitReport {
    pub zeta: f64,
    pub norms: InitialNorms,
    pub bounds: InitialBounds,
    pub residual_u: Residual,
    pub residual_v: Residual,
}

/// `v₀ = V^ζ`, `u₀ = −V^ζ`, `F₀ = B(∂_tu₀ + N(u₀))`, `R₀ = B(∂_tv₀ + N(v₀)) − F₀`,
/// with `∂_t` the centered difference on `time` and `ζ ≤ zeta` the largest
/// admissible value.
pub fn initialize(
    data: &InitialData,
    zeta: f64,
    table: Arc<ParameterTable>,
    time: TimeGrid,
    grid: Grid,
) -> Result<(SystemState, InitReport)> {
    data.validate()?;
    let (zeta, norms) = select_zeta(data, zeta, &table)?;
    let (ta, tb) = data.support(zeta);
    if !(ta > 1.0) {
        return Err(Error::InitialData(format!("rescaled support starts at {ta}, not after t = 1")));
    }
    if !(time.t0 < ta && time.t1() > tb) {
        return Err(Error::InitialData(format!(
            "time grid [{}, {}] does not contain the support [{ta}, {tb}]",
            time.t0,
            time.t1()
        )));
    }
    let v = data.sample(zeta, time, grid);
    let u = v.map(|f| if f.is_zero() { f.clone() } else { f.neg() });
    let du = u.time_derivative();
    let dv = v.time_derivative();
    let mut f0 = Vec::with_capacity(time.nt);
    let mut r0 = Vec::with_capacity(time.nt);
    for j in 0..time.nt {
        let fu = antidiv(&du.samples[j].add(&sqg_full(&u.samples[j])?));
        let fv = antidiv(&dv.samples[j].add(&sqg_full(&v.samples[j])?));
        r0.push(fv.sub(&fu));
        f0.push(fu);
    }
    let state = SystemState::from_parts(
        0,
        u,
        v,
        ForceLedger::new(SignedSeries::new(Series { time, samples: f0 })),
        SignedSeries::new(Series { time, samples: r0 }),
        Role::VActive,
        Arc::clone(&table),
    )?;
    let report = InitReport {
        zeta,
        norms,
        bounds: initial_bounds(&table)?,
        residual_u: residual(&state, Which::Inactive)?,
        residual_v: residual(&state, Which::Active)?,
    };
    Ok((state, report))
}

// ---------------------------------------------------------------------------
// Residuals

/// A residual sup norm and the largest sup norm of the terms it balances.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residual {
    pub value: f64,
    pub scale: f64,
}

impl Residual {
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            self.value
        } else {
            self.value / self.scale
        }
    }

    fn merge(&mut self, o: Residual) {
        self.value = self.value.max(o.value);
        self.scale = self.scale.max(o.scale);
    }
}

fn centered(s: &VectorSeries, j: usize) -> VectorField {
    let zero = VectorField::zeros(s.grid());
    let jj = j as i64;
    let fwd = s.at(jj + 1).unwrap_or(&zero);
    let bwd = s.at(jj - 1).unwrap_or(&zero);
    fwd.sub(bwd).scale(1.0 / (2.0 * s.time.dt))
}

fn supn<const N: usize>(f: &Field<N>) -> f64 {
    if f.is_zero() {
        0.0
    } else {
        f.sup_norm()
    }
}

/// Terms of the momentum equation at sample `j`: `∂_t f`, `N(f)`, `div F`,
/// `div R` (zero for the inactive field).
fn momentum_terms(state: &SystemState, which: Which, j: usize) -> Result<[VectorField; 4]> {
    let f = state.field(which);
    let dt = centered(f, j);
    let n = sqg_full(&f.samples[j])?;
    let df = div_tensor(&state.force.sample(j, state.grid));
    let dr = match which {
        Which::Active => div_tensor(&state.stress.sample(j)),
        Which::Inactive => VectorField::zeros(state.grid),
    };
    Ok([dt, n, df, dr])
}

/// `∂_t f + N(f) − div F − div R` (unprojected) at sample `j`.
pub fn momentum_residual_sample(state: &SystemState, which: Which, j: usize) -> Result<VectorField> {
    let [dt, n, df, dr] = momentum_terms(state, which, j)?;
    Ok(dt.add(&n).sub(&df).sub(&dr))
}

/// `max_t ‖ℙ[∂_t f + N(f) − div F − div R]‖₀`.
pub fn residual(state: &SystemState, which: Which) -> Result<Residual> {
    let mut out = Residual::default();
    for j in 0..state.time.nt {
        let terms = momentum_terms(state, which, j)?;
        if terms.iter().all(Field::is_zero) {
            continue;
        }
        let [dt, n, df, dr] = &terms;
        let r = leray(&dt.add(n).sub(df).sub(dr));
        let scale = terms.iter().map(supn).fold(0.0, f64::max);
        out.merge(Residual {
            value: supn(&r),
            scale,
        });
    }
    Ok(out)
}

/// Pressure at sample `j`: `Δp = div(div F + div R − ∂_t f − N(f))`.
pub fn pressure(state: &SystemState, which: Which, j: usize) -> Result<ScalarField> {
    let r = momentum_residual_sample(state, which, j)?;
    let d = div(&r.neg());
    Ok(d.map_comps(|c| {
        c.multiply(|k1, k2| {
            let k = (k1 * k1 + k2 * k2) as f64;
            if k == 0.0 {
                C64::new(0.0, 0.0)
            } else {
                C64::new(-1.0 / k, 0.0)
            }
        })
    }))
}

/// The scalar picture `θ = −∇⊥·f` of both fields and the forcing `−∇⊥·div F`.
#[derive(Debug, Clone)]
pub struct ScalarRecovery {
    pub theta_u: Series<1>,
    pub theta_v: Series<1>,
    pub forcing: Series<1>,
    /// `max ‖∂_tθ + Λ^{−1}∇⊥θ·∇θ − f − g‖₀` for the inactive and active field, where `g = −∇⊥·div R` for the active one.
    pub residual_inactive: Residual,
    pub residual_active: Residual,
}

/// `Λ^{−1}∇⊥θ`.
pub fn scalar_velocity(theta: &ScalarField) -> Result<VectorField> {
    lambda_pow(&grad_perp(theta), -1.0)
}

fn theta_series(s: &VectorSeries) -> Series<1> {
    s.map(|f| if f.is_zero() { ScalarField::zeros(f.grid) } else { perp_div(f).neg() })
}

fn scalar_terms(
    theta: &Series<1>,
    forcing: &ScalarField,
    stress: Option<&SymTensorField>,
    j: usize,
) -> Result<[ScalarField; 4]> {
    let grid = theta.grid();
    let zero = ScalarField::zeros(grid);
    let jj = j as i64;
    let fwd = theta.at(jj + 1).unwrap_or(&zero);
    let bwd = theta.at(jj - 1).unwrap_or(&zero);
    let dt = fwd.sub(bwd).scale(1.0 / (2.0 * theta.time.dt));
    let th = &theta.samples[j];
    let adv = if th.is_zero() {
        zero.clone()
    } else {
        advect_scalar(&scalar_velocity(th)?, th)?
    };
    let g = match stress {
        Some(r) if !r.is_zero() => perp_div(&div_tensor(r)).neg(),
        _ => zero,
    };
    Ok([dt, adv, forcing.clone(), g])
}

/// Recovers the scalar fields and measures the scalar residuals.
pub fn scalar_recover(state: &SystemState) -> Result<ScalarRecovery> {
    let theta_u = theta_series(&state.u);
    let theta_v = theta_series(&state.v);
    let forcing = Series {
        time: state.time,
        samples: (0..state.time.nt)
            .map(|j| {
                let f = state.force.sample(j, state.grid);
                if f.is_zero() {
                    ScalarField::zeros(state.grid)
                } else {
                    perp_div(&div_tensor(&f)).neg()
                }
            })
            .collect(),
    };
    let (ta, ti) = match state.role {
        Role::VActive => (&theta_v, &theta_u),
        Role::UActive => (&theta_u, &theta_v),
    };
    let mut res_a = Residual::default();
    let mut res_i = Residual::default();
    for j in 0..state.time.nt {
        let r = state.stress.sample(j);
        for (th, stress, out) in [(ta, Some(&r), &mut res_a), (ti, None, &mut res_i)] {
            let t = scalar_terms(th, &forcing.samples[j], stress, j)?;
            let sum = t[0].add(&t[1]).sub(&t[2]).sub(&t[3]);
            out.merge(Residual {
                value: supn(&sum),
                scale: t.iter().map(supn).fold(0.0, f64::max),
            });
        }
    }
    Ok(ScalarRecovery {
        theta_u,
        theta_v,
        forcing,
        residual_inactive: res_i,
        residual_active: res_a,
    })
}

/// `max_t ‖−∇⊥·(momentum residual) − (scalar residual)‖₀`, the two sides built
/// independently, with the largest term of either side as scale.
pub fn scalar_commutation(state: &SystemState, which: Which) -> Result<Residual> {
    let theta = theta_series(state.field(which));
    let mut out = Residual::default();
    for j in 0..state.time.nt {
        let m = momentum_terms(state, which, j)?;
        let lhs = perp_div(&m[0].add(&m[1]).sub(&m[2]).sub(&m[3])).neg();
        let f = state.force.sample(j, state.grid);
        let forcing = if f.is_zero() {
            ScalarField::zeros(state.grid)
        } else {
            perp_div(&div_tensor(&f)).neg()
        };
        let r = state.stress.sample(j);
        let stress = (which == Which::Active).then_some(&r);
        let s = scalar_terms(&theta, &forcing, stress, j)?;
        let rhs = s[0].add(&s[1]).sub(&s[2]).sub(&s[3]);
        let scale = m
            .iter()
            .map(|x| supn(&perp_div(x)))
            .chain(s.iter().map(supn))
            .fold(0.0, f64::max);
        out.merge(Residual {
            value: supn(&lhs.sub(&rhs)),
            scale,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Iteration

/// Options of [`iterate_once`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub width: f64,
    /// RK4 substeps per `dt` for the flows; `None` picks the CFL minimum.
    pub substeps: Option<usize>,
    /// Multiplies `τ_{c,q+1}`.
    pub tau_c_scale: f64,
    pub assembly: AssemblyOptions,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            width: DEFAULT_SHELL_WIDTH,
            substeps: None,
            tau_c_scale: 1.0,
            assembly: AssemblyOptions::default(),
        }
    }
}

/// Everything measured during one step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub q: i64,
    pub lambda: u64,
    pub delta: f64,
    pub tau_m: f64,
    pub tau_c: f64,
    pub intervals: usize,
    pub perturbation: Option<PerturbationReport>,
    pub stress: StressBreakdown,
    /// `max ‖v_{q+1} − v_q‖₀` against `Mδ_{q+1}^{1/2}`.
    pub increment: f64,
    pub increment_bound: f64,
    /// `max (‖v_{q+1}‖₁ + ‖Λv_{q+1}‖₀)` against `Mλ_{q+1}δ_{q+1}^{1/2}`.
    pub field_norm: f64,
    pub field_bound: f64,
    /// Energy fraction of `v_{q+1} − v_q` outside this step's shells.
    pub outside_mass: f64,
    /// Lattice points shared by this step's shells and the next step's.
    pub mask_overlap: usize,
    /// Largest field value before `1 − Σ_{i≤q+1} τ_{m,i}`.
    pub support_violation: f64,
}

fn series_support_times<const N: usize>(s: &Series<N>) -> Option<(f64, f64)> {
    s.support().map(|(a, b)| (s.time.t(a), s.time.t(b)))
}

fn hull(a: Option<(f64, f64)>, b: Option<(f64, f64)>) -> Option<(f64, f64)> {
    match (a, b) {
        (Some(x), Some(y)) => Some((x.0.min(y.0), x.1.max(y.1))),
        (x, None) => x,
        (None, y) => y,
    }
}

/// One iteration on the active field: mollify `R_q`, partition time, solve the
/// flows, build `w_{q+1}` and assemble `R_{q+1}`. The inactive field and `F`
/// are shared with the input state.
pub fn iterate_once(state: &SystemState, opts: StepOptions) -> Result<(SystemState, StepReport)> {
    let table = &state.table;
    let q = state.q;
    let lam = table.lambda_at(q + 1)?;
    let delta = table.delta_at(q + 1)?;
    let tau_m = table.tau_m_at(q + 1)?;
    let tau_c = table.tau_c_at(q + 1)? * opts.tau_c_scale;
    let grid = state.grid;
    let time = state.time;
    let cfg = &table.config;

    let r_q = state.stress.materialize();
    let r_ell = crate::flowtime::mollify_time(&state.stress.data, tau_m)?;
    let r_ell = if state.stress.sign > 0.0 { r_ell } else { r_ell.scale(-1.0) };
    let active = state.active();

    let support = [
        series_support_times(active.as_ref()),
        state.force.support().map(|(a, b)| (time.t(a), time.t(b))),
        series_support_times(&r_q),
        series_support_times(&r_ell),
    ]
    .into_iter()
    .fold(None, hull);

    let (w, perturbation, intervals) = match support {
        None => (Series::zeros(time, grid), None, 0),
        Some(sup) => {
            let partition = if opts.tau_c_scale == 1.0 {
                build_partition(table, q, sup)?
            } else {
                partition_with_tau(tau_c, q, sup)?
            };
            let p = build_perturbation(
                &r_ell,
                active,
                &partition,
                q,
                lam,
                delta,
                PerturbationOptions {
                    width: opts.width,
                    substeps: opts.substeps,
                    eps: cfg.eps,
                },
            )?;
            (p.w, Some(p.report), partition.indices.len())
        }
    };

    let lam_next = lam as f64;
    let l2 = table.lambda_at(q + 2)? as f64;
    let d2 = table.delta_at(q + 2)?;
    let inputs = StressInputs {
        r_q: &r_q,
        r_ell: &r_ell,
        w: &w,
        v: active,
        thresholds: NormThresholds {
            lambda_next: lam_next,
            c0_c1: cfg.eps * l2 * d2,
            dt: l2 * d2 / tau_m,
        },
        low_scale: table.lambda_at(q)? as f64 * delta,
    };
    let (r_next, breakdown) = assemble(&inputs, opts.assembly)?;
    drop(r_ell);
    drop(r_q);

    let updated: VectorSeries = Series {
        time,
        samples: active
            .samples
            .iter()
            .zip(&w.samples)
            .map(|(a, b)| if b.is_zero() { a.clone() } else { a.add(b) })
            .collect(),
    };
    let masks = step_masks(q, lam, opts.width)?;
    let next_masks = step_masks(q + 1, table.lambda_at(q + 2)?, opts.width)?;
    let mut increment = 0.0f64;
    let mut outside = 0.0f64;
    let mut field_norm = 0.0f64;
    for (new, old) in updated.samples.iter().zip(&active.samples) {
        let d = new.sub(old);
        if !d.is_zero() {
            increment = increment.max(d.sup_norm());
            outside = outside.max(mass_outside(&d, &masks));
        }
        if !new.is_zero() {
            field_norm = field_norm.max(new.c1_norm() + lambda(new).sup_norm());
        }
    }
    drop(w);

    let updated = Arc::new(updated);
    let (u, v) = match state.role {
        Role::VActive => (Arc::clone(&state.u), updated),
        Role::UActive => (updated, Arc::clone(&state.v)),
    };
    let next = SystemState {
        q: q + 1,
        time,
        grid,
        u,
        v,
        force: state.force.clone(),
        stress: SignedSeries::new(r_next),
        role: state.role,
        table: Arc::clone(table),
    };
    let report = StepReport {
        q,
        lambda: lam,
        delta,
        tau_m,
        tau_c,
        intervals,
        perturbation,
        stress: breakdown,
        increment,
        increment_bound: cfg.m * delta.sqrt(),
        field_norm,
        field_bound: cfg.m * lam_next * delta.sqrt(),
        outside_mass: outside,
        mask_overlap: mask_overlap(&masks, &next_masks),
        support_violation: next.support_violation()?,
    };
    Ok((next, report))
}

/// `R ← −R̃`, `F ← F + R̃`, and the other field becomes active.
pub fn swap_roles(state: &SystemState) -> SystemState {
    SystemState {
        force: state.force.plus(state.stress.clone()),
        stress: state.stress.neg(),
        role: state.role.flip(),
        ..state.clone()
    }
}

/// `(u, v, F, R, role)` agree bit for bit.
pub fn states_bitwise_eq(a: &SystemState, b: &SystemState) -> bool {
    a.q == b.q
        && a.role == b.role
        && series_bitwise_eq(&a.u, &b.u)
        && series_bitwise_eq(&a.v, &b.v)
        && a.force.bitwise_eq(&b.force)
        && a.stress.bitwise_eq(&b.stress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{build_table, Mode, ParameterConfig};

    fn desk_table() -> Arc<ParameterTable> {
        let cfg = ParameterConfig::new(1e4, 1.01, 0.8, 7.0 / 25.0, 1.0, 0.1).unwrap();
        Arc::new(build_table(cfg, 2, Mode::Desk, Some(&[85, 170, 255])).unwrap())
    }

    fn small_state(amp: f64) -> (SystemState, InitReport) {
        let grid = Grid::new(16).unwrap();
        let table = desk_table();
        let v = cosine_modes(grid, &[([1, 0], amp, 0.0), ([0, 1], amp, 0.7)]);
        let data = InitialData::new(v, TimeBump::new(1.001, 1.004).unwrap()).unwrap();
        let (zeta, _) = select_zeta(&data, 1.0, &table).unwrap();
        let time = plan_time_grid(&table, data.support(zeta), 1, 9).unwrap();
        initialize(&data, zeta, table, time, grid).unwrap()
    }

    #[test]
    fn bump_derivatives_match_differences() {
        let b = TimeBump::new(1.0, 2.0).unwrap();
        let h = 1e-5;
        for t in [1.2, 1.5, 1.77] {
            let [p, p1, p2] = b.eval(t);
            let [pp, _, _] = b.eval(t + h);
            let [pm, _, _] = b.eval(t - h);
            assert!(((pp - pm) / (2.0 * h) - p1).abs() < 1e-6);
            assert!(((pp - 2.0 * p + pm) / (h * h) - p2).abs() < 1e-3 * p2.abs().max(1.0));
        }
    }

    #[test]
    fn initialization_solves_both_systems() {
        let (s, rep) = small_state(1e-7);
        assert_eq!(rep.zeta, 1.0);
        assert!(rep.residual_u.relative() < 1e-10, "{:?}", rep.residual_u);
        assert!(rep.residual_v.relative() < 1e-10, "{:?}", rep.residual_v);
        for (a, b) in s.u.samples.iter().zip(&s.v.samples) {
            assert!(field_bitwise_eq(a, &b.neg()) || (a.is_zero() && b.is_zero()));
        }
        assert_eq!(s.support_violation().unwrap(), 0.0);
    }

    #[test]
    fn large_data_forces_small_zeta() {
        let grid = Grid::new(16).unwrap();
        let table = desk_table();
        let v = cosine_modes(grid, &[([1, 0], 10.0, 0.0)]);
        let data = InitialData::new(v, TimeBump::new(1.001, 1.004).unwrap()).unwrap();
        let (z, n) = select_zeta(&data, 1.0, &table).unwrap();
        let b = initial_bounds(&table).unwrap();
        assert!(z < 1.0);
        assert!(admissible(&n, &b, z) && !admissible(&n, &b, z * (1.0 + 1e-9) + 1e-300));
    }

    #[test]
    fn rejects_high_modes_and_early_support() {
        let grid = Grid::new(16).unwrap();
        let v = cosine_modes(grid, &[([1, 1], 1.0, 0.0)]);
        assert!(InitialData::new(v, TimeBump::new(1.1, 1.2).unwrap()).is_err());
        let v = cosine_modes(grid, &[([1, 0], 1.0, 0.0)]);
        assert!(InitialData::new(v, TimeBump::new(0.9, 1.2).unwrap()).is_err());
    }

    #[test]
    fn double_swap_is_identity() {
        let (s, _) = small_state(1e-7);
        let once = swap_roles(&s);
        let twice = swap_roles(&once);
        assert!(states_bitwise_eq(&s, &twice));
        assert_eq!(once.force.terms().len(), 2);
        assert!(once.force.terms()[1].bitwise_eq(&s.stress));
        let r = residual(&once, Which::Inactive).unwrap();
        assert!(r.relative() < 1e-10, "{r:?}");
        let r = residual(&once, Which::Active).unwrap();
        assert!(r.relative() < 1e-10, "{r:?}");
    }

    #[test]
    fn scalar_side_commutes() {
        let (s, _) = small_state(1e-3);
        for which in [Which::Active, Which::Inactive] {
            let c = scalar_commutation(&s, which).unwrap();
            assert!(c.value <= 1e-11 * c.scale, "{c:?}");
        }
        let rec = scalar_recover(&s).unwrap();
        assert!(rec.theta_v.samples.iter().all(|t| t.mean()[0] == 0.0));
    }
}
