//! The new stress `R_{q+1} = (R_q − R_ℓ) + R_osc + R_tran + R_Nash` and its
//! diagnostics.
//!
//! Every component passes through `B = B₀ℙ`, so pressure terms never appear:
//! - transport `B(∂_t w + Λv·∇w)`,
//! - Nash `B(Λw·∇v − (∇v)^TΛw + (∇Λv)^Tw)`,
//! - oscillation `B(div R_ℓ + Λw·∇w − (∇w)^TΛw)`.

use crate::flowtime::{richardson_ratio, Series, TensorSeries, VectorSeries};
use crate::spectral::{
    advect, antidiv, bracket, div_tensor, grad_transpose_dot, lambda, perp_div, scalar_times_perp,
    Grid, Mask, SymTensorField, VectorField,
};
use crate::Result;
use std::fmt::Write as _;

/// The four components in assembly order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Mollification,
    Oscillation,
    Transport,
    Nash,
    Total,
}

impl Component {
    pub const PARTS: [Component; 4] = [
        Component::Mollification,
        Component::Oscillation,
        Component::Transport,
        Component::Nash,
    ];
    pub const ALL: [Component; 5] = [
        Component::Mollification,
        Component::Oscillation,
        Component::Transport,
        Component::Nash,
        Component::Total,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::Mollification => "mollification",
            Component::Oscillation => "oscillation",
            Component::Transport => "transport",
            Component::Nash => "nash",
            Component::Total => "total",
        }
    }
}

fn zero_tensor(grid: Grid) -> SymTensorField {
    SymTensorField::zeros(grid)
}

/// `D_{t,Λv}w` at sample `j`: centered difference in time plus `Λv·∇w`.
pub fn material_derivative(w: &VectorSeries, v: &VectorSeries, j: usize) -> Result<VectorField> {
    let grid = w.grid();
    let zero = VectorField::zeros(grid);
    let jj = j as i64;
    let fwd = w.at(jj + 1).unwrap_or(&zero);
    let bwd = w.at(jj - 1).unwrap_or(&zero);
    let dtw = fwd.sub(bwd).scale(1.0 / (2.0 * w.time.dt));
    let adv = advect(&lambda(&v.samples[j]), &w.samples[j])?;
    Ok(dtw.add(&adv))
}

/// `R_tran(t_j) = B D_{t,Λv}w`.
pub fn transport_sample(w: &VectorSeries, v: &VectorSeries, j: usize) -> Result<SymTensorField> {
    Ok(antidiv(&material_derivative(w, v, j)?))
}

/// The Nash bracket `Λw·∇v − (∇v)^TΛw + (∇Λv)^Tw`.
pub fn nash_bracket(w: &VectorField, v: &VectorField) -> Result<VectorField> {
    let lw = lambda(w);
    Ok(bracket(&lw, v)?.add(&grad_transpose_dot(&lambda(v), w)?))
}

/// `R_Nash = B(Nash bracket)` at one sample.
pub fn nash_sample(w: &VectorField, v: &VectorField) -> Result<SymTensorField> {
    Ok(antidiv(&nash_bracket(w, v)?))
}

/// `‖B(Λw·∇v − (∇v)^TΛw) − B((∇⊥·v)(Λw)⊥)‖₀`, both sides computed independently.
pub fn nash_scalar_discrepancy(w: &VectorField, v: &VectorField) -> Result<(f64, f64)> {
    let lw = lambda(w);
    let lhs = antidiv(&bracket(&lw, v)?);
    let rhs = antidiv(&scalar_times_perp(&perp_div(v), &lw)?);
    Ok((lhs.sub(&rhs).sup_norm(), lhs.sup_norm().max(rhs.sup_norm())))
}

/// Frequency split of the oscillation bracket at one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HighLow {
    /// `‖B(P_{<λ/8} bracket)‖₀`.
    pub low: f64,
    /// `‖B(P_{≥λ/8} bracket)‖₀`.
    pub high: f64,
    /// `‖B(div R_ℓ)‖₀`, the scale the low part is cancelling.
    pub reference: f64,
}

/// Cutoff between the low- and high-frequency parts of the oscillation bracket.
pub fn low_cutoff(lambda: f64) -> f64 {
    lambda / 8.0
}

/// `div R_ℓ + Λw·∇w − (∇w)^TΛw`.
pub fn oscillation_bracket(w: &VectorField, r_ell: &SymTensorField) -> Result<VectorField> {
    let n = bracket(&lambda(w), w)?;
    Ok(div_tensor(r_ell).add(&n))
}

/// `R_osc = B(oscillation bracket)` plus its low/high split at cutoff `λ/8`.
pub fn oscillation_sample(
    w: &VectorField,
    r_ell: &SymTensorField,
    lambda_next: f64,
) -> Result<(SymTensorField, HighLow)> {
    let br = oscillation_bracket(w, r_ell)?;
    let cut = low_cutoff(lambda_next);
    let low = br.masked(br.band(), |a, b| Mask::LowPassStrict { n: cut }.keeps(a, b));
    let high = br.masked(br.band(), |a, b| Mask::HighPass { n: cut }.keeps(a, b));
    let split = HighLow {
        low: antidiv(&low).sup_norm(),
        high: antidiv(&high).sup_norm(),
        reference: antidiv(&div_tensor(r_ell)).sup_norm(),
    };
    Ok((antidiv(&br), split))
}

/// Series-level transport error.
pub fn transport_error(w: &VectorSeries, v: &VectorSeries) -> Result<TensorSeries> {
    let samples = (0..w.time.nt)
        .map(|j| transport_sample(w, v, j))
        .collect::<Result<_>>()?;
    Ok(Series { time: w.time, samples })
}

/// Series-level Nash error.
pub fn nash_error(w: &VectorSeries, v: &VectorSeries) -> Result<TensorSeries> {
    let samples = w
        .samples
        .iter()
        .zip(&v.samples)
        .map(|(a, b)| nash_sample(a, b))
        .collect::<Result<_>>()?;
    Ok(Series { time: w.time, samples })
}

/// Series-level oscillation error with the per-sample split.
pub fn oscillation_error(
    w: &VectorSeries,
    r_ell: &TensorSeries,
    lambda_next: f64,
) -> Result<(TensorSeries, Vec<HighLow>)> {
    let mut samples = Vec::with_capacity(w.time.nt);
    let mut split = Vec::with_capacity(w.time.nt);
    for (a, r) in w.samples.iter().zip(&r_ell.samples) {
        let (s, h) = oscillation_sample(a, r, lambda_next)?;
        samples.push(s);
        split.push(h);
    }
    Ok((Series { time: w.time, samples }, split))
}

/// Thresholds of the norm table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormThresholds {
    /// `λ_{q+1}`, scaling the C¹ norm.
    pub lambda_next: f64,
    /// `ελ_{q+2}δ_{q+2}`.
    pub c0_c1: f64,
    /// `τ_{m,q+1}^{−1}λ_{q+2}δ_{q+2}`.
    pub dt: f64,
}

/// One row of the norm table.
#[derive(Debug, Clone, PartialEq)]
pub struct NormRow {
    pub component: &'static str,
    pub norm: &'static str,
    pub value: f64,
    pub threshold: Option<f64>,
}

impl NormRow {
    pub fn passes(&self) -> bool {
        self.threshold.is_none_or(|t| self.value <= t)
    }
}

pub const NORM_HEADER: &str = "component,norm,value,threshold,pass";

/// CSV text of a norm table.
pub fn norm_csv(rows: &[NormRow]) -> String {
    let mut s = String::from(NORM_HEADER);
    s.push('\n');
    for r in rows {
        let t = r.threshold.map(|t| format!("{t:.17e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.17e},{},{}", r.component, r.norm, r.value, t, r.passes());
    }
    s
}

/// Transport diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransportDiagnostic {
    /// Richardson ratio of the centered difference of `w`.
    pub richardson: Option<f64>,
    /// `max ‖D_t w‖₀`.
    pub material_sup: f64,
    /// `λ_{q+1}‖R_tran‖₀ / ‖D_t w‖₀`.
    pub gain_constant: f64,
}

impl TransportDiagnostic {
    /// Whether the time resolution is adequate (ratio in `[3, 5]`).
    pub fn resolved(&self) -> bool {
        self.richardson.is_some_and(|r| (3.0..=5.0).contains(&r))
    }
}

/// Result of [`assemble`].
#[derive(Debug, Clone)]
pub struct StressBreakdown {
    /// Components in [`Component::PARTS`] order, when kept.
    pub components: Option<[TensorSeries; 4]>,
    pub norms: Vec<NormRow>,
    /// Worst-sample split of the oscillation bracket.
    pub high_low: HighLow,
    /// `λ_q δ_{q+1}`, the scale the low part is compared against.
    pub low_scale: f64,
    pub transport: TransportDiagnostic,
    /// Largest discrepancy of the Nash scalar-form identity over the largest
    /// size of either side, both maxima taken over samples.
    pub nash_discrepancy: f64,
}

/// Inputs of one assembly.
pub struct StressInputs<'a> {
    pub r_q: &'a TensorSeries,
    pub r_ell: &'a TensorSeries,
    pub w: &'a VectorSeries,
    /// The active field before the update.
    pub v: &'a VectorSeries,
    pub thresholds: NormThresholds,
    /// `λ_q δ_{q+1}`.
    pub low_scale: f64,
}

/// What [`assemble`] computes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssemblyOptions {
    pub keep_components: bool,
    /// Only the oscillation component (for deformation sweeps); the total is then partial.
    pub oscillation_only: bool,
    /// Compute the norm table (C¹ and time-derivative norms).
    pub norms: bool,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            keep_components: false,
            oscillation_only: false,
            norms: true,
        }
    }
}

#[derive(Default, Clone, Copy)]
struct Acc {
    c0: f64,
    c1: f64,
    dt: f64,
}

/// Builds `R_{q+1}` sample by sample; components are summed in
/// [`Component::PARTS`] order. Time-derivative norms use the centered
/// difference on a sliding window, so components need not be stored.
pub fn assemble(inp: &StressInputs, opts: AssemblyOptions) -> Result<(TensorSeries, StressBreakdown)> {
    let time = inp.w.time;
    let grid = inp.w.grid();
    let nt = time.nt;
    let lam = inp.thresholds.lambda_next;
    let mut totals = Vec::with_capacity(nt);
    let mut kept: [Vec<SymTensorField>; 4] = Default::default();
    let mut acc = [Acc::default(); 5];
    let mut window: Vec<[SymTensorField; 5]> = Vec::new();
    let mut high_low = HighLow::default();
    let mut transport = TransportDiagnostic {
        richardson: richardson_ratio(inp.w),
        ..Default::default()
    };
    let mut nash_worst = (0.0f64, 0.0f64);
    let inv2dt = 1.0 / (2.0 * time.dt);

    let dt_norm = |acc: &mut [Acc; 5], prev: Option<&[SymTensorField; 5]>, next: Option<&[SymTensorField; 5]>| {
        for c in 0..5 {
            let a = next.map_or_else(|| zero_tensor(grid), |x| x[c].clone());
            let b = prev.map_or_else(|| zero_tensor(grid), |x| x[c].clone());
            let d = a.sub(&b);
            if !d.is_zero() {
                acc[c].dt = acc[c].dt.max(d.scale(inv2dt).sup_norm());
            }
        }
    };

    for j in 0..nt {
        let w = &inp.w.samples[j];
        let v = &inp.v.samples[j];
        let moll = inp.r_q.samples[j].sub(&inp.r_ell.samples[j]);
        let (osc, split) = oscillation_sample(w, &inp.r_ell.samples[j], lam)?;
        if split.low > high_low.low {
            high_low = split;
        }
        let (tran, nash) = if opts.oscillation_only {
            (zero_tensor(grid), zero_tensor(grid))
        } else {
            let dw = material_derivative(inp.w, inp.v, j)?;
            let tran = antidiv(&dw);
            if !dw.is_zero() {
                let m = dw.sup_norm();
                transport.material_sup = transport.material_sup.max(m);
                transport.gain_constant = transport.gain_constant.max(lam * tran.sup_norm() / m);
            }
            let nash = nash_sample(w, v)?;
            if !w.is_zero() && !v.is_zero() {
                let (d, s) = nash_scalar_discrepancy(w, v)?;
                nash_worst = (nash_worst.0.max(d), nash_worst.1.max(s));
            }
            (tran, nash)
        };
        let total = moll.add(&osc).add(&tran).add(&nash);
        let parts = [moll, osc, tran, nash, total];
        if opts.norms {
            for (a, f) in acc.iter_mut().zip(&parts) {
                if !f.is_zero() {
                    a.c0 = a.c0.max(f.sup_norm());
                    a.c1 = a.c1.max(f.c1_norm());
                }
            }
            // The centered difference at j − 1 needs samples j − 2 and j.
            if j >= 1 {
                let prev = if j >= 2 { window.first() } else { None };
                dt_norm(&mut acc, prev, Some(&parts));
            }
            window.push(parts.clone());
            if window.len() > 2 {
                window.remove(0);
            }
        }
        let [moll, osc, tran, nash, total] = parts;
        if opts.keep_components {
            kept[0].push(moll);
            kept[1].push(osc);
            kept[2].push(tran);
            kept[3].push(nash);
        }
        totals.push(total);
    }
    if opts.norms && nt >= 1 {
        let prev = if nt >= 2 { window.first() } else { None };
        dt_norm(&mut acc, prev, None);
    }

    let mut norms = Vec::new();
    if opts.norms {
        for (c, a) in Component::ALL.iter().zip(&acc) {
            norms.push(NormRow { component: c.name(), norm: "C0", value: a.c0, threshold: None });
            norms.push(NormRow { component: c.name(), norm: "C1_over_lambda", value: a.c1 / lam, threshold: None });
            norms.push(NormRow {
                component: c.name(),
                norm: "C0_plus_C1_over_lambda",
                value: a.c0 + a.c1 / lam,
                threshold: Some(inp.thresholds.c0_c1),
            });
            norms.push(NormRow {
                component: c.name(),
                norm: "dt_C0",
                value: a.dt,
                threshold: Some(inp.thresholds.dt),
            });
        }
    }
    let nash_discrepancy = if nash_worst.1 > 0.0 { nash_worst.0 / nash_worst.1 } else { 0.0 };
    let components = opts.keep_components.then(|| kept.map(|s| Series { time, samples: s }));
    Ok((
        Series { time, samples: totals },
        StressBreakdown {
            components,
            norms,
            high_low,
            low_scale: inp.low_scale,
            transport,
            nash_discrepancy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowtime::TimeGrid;
    use crate::spectral::random_div_free;
    use rand::SeedableRng;

    #[test]
    fn zero_inputs_give_zero_stress() {
        let grid = Grid::new(32).unwrap();
        let time = TimeGrid::new(1.0, 0.01, 5).unwrap();
        let z3 = Series::<3>::zeros(time, grid);
        let z2 = Series::<2>::zeros(time, grid);
        let inp = StressInputs {
            r_q: &z3,
            r_ell: &z3,
            w: &z2,
            v: &z2,
            thresholds: NormThresholds { lambda_next: 10.0, c0_c1: 1.0, dt: 1.0 },
            low_scale: 1.0,
        };
        let (tot, br) = assemble(&inp, AssemblyOptions::default()).unwrap();
        assert!(tot.is_zero());
        assert!(br.norms.iter().all(NormRow::passes));
    }

    #[test]
    fn nash_scalar_form_agrees() {
        let grid = Grid::new(64).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v = random_div_free(grid, 8, &mut rng);
        let w = random_div_free(grid, 12, &mut rng);
        let (d, s) = nash_scalar_discrepancy(&w, &v).unwrap();
        assert!(d < 1e-12 * s, "{d} {s}");
    }
}
