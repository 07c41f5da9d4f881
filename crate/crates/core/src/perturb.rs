//! Beltrami waves, the amplitudes `a_k`, and the perturbation
//! `w_{q+1} = Σ_i Σ_k ℙ_{q+1,k}(χ_i a_k b_k(λ_{q+1}Φ_i))`.

use crate::flowtime::{solve_flow_with, Advector, FlowMap, Series, TimePartition, VectorSeries};
use crate::geometry::{direction_set, sym_norm, GammaSolver, RationalVec, SetTag};
use crate::spectral::{
    analyze, leray, Grid, Mask, ScalarField, Spectrum, SymTensorField, VectorField, C64,
};
use crate::{par, Error, Result};
use std::f64::consts::PI;

/// Default half-width of the directional shells, in units of `λ`.
pub const DEFAULT_SHELL_WIDTH: f64 = 0.2;

/// The wave pair `b_{±k}(λx)`, `c_{±k}(λx)` at an integer frequency `λk`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveSpec {
    pub k: RationalVec,
    pub lambda: u64,
    /// `λk ∈ ℤ²`.
    pub lattice: [i64; 2],
    pub dir: [f64; 2],
}

impl WaveSpec {
    pub fn new(k: &RationalVec, lambda: u64) -> Result<Self> {
        if lambda == 0 || lambda % 85 != 0 {
            return Err(Error::NotMultipleOf85 { index: 0, value: lambda });
        }
        Ok(Self {
            k: k.clone(),
            lambda,
            lattice: k.lattice(lambda),
            dir: k.to_f64(),
        })
    }

    pub fn band(&self) -> usize {
        self.lattice[0].unsigned_abs().max(self.lattice[1].unsigned_abs()) as usize
    }

    fn single_mode(&self, coeff: C64) -> Spectrum {
        let [l1, l2] = self.lattice;
        let (u1, u2, c) = if l2 > 0 || (l2 == 0 && l1 > 0) {
            (l1, l2, coeff)
        } else {
            (-l1, -l2, coeff.conj())
        };
        Spectrum::from_fn(self.band(), move |k1, k2| {
            if (k1, k2) == (u1, u2) {
                c
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }

    /// `A(b_k(λx) + b_{−k}(λx)) = −2A sin(λk·x) k⊥`.
    pub fn beltrami_pair(&self, grid: Grid, amp: f64) -> VectorField {
        let [k1, k2] = self.dir;
        let perp = [-k2, k1];
        VectorField {
            grid,
            comps: [
                self.single_mode(C64::new(0.0, amp * perp[0])),
                self.single_mode(C64::new(0.0, amp * perp[1])),
            ],
        }
    }

    /// `A(c_k(λx) + c_{−k}(λx)) = 2A cos(λk·x)`.
    pub fn c_pair(&self, grid: Grid, amp: f64) -> ScalarField {
        ScalarField {
            grid,
            comps: [self.single_mode(C64::new(amp, 0.0))],
        }
    }

    /// Directional shell mask `|ξ ∓ λk| ≤ width·λ`.
    pub fn mask(&self, width: f64) -> Mask {
        Mask::Directional {
            dir: self.dir,
            lambda: self.lambda as f64,
            width,
        }
    }

    /// `λk·x` on grid point `(c, r)`, reduced exactly through integer arithmetic.
    #[inline]
    fn grid_phase(&self, n: usize, c: usize, r: usize) -> f64 {
        let [l1, l2] = self.lattice;
        let m = (l1 * c as i64 + l2 * r as i64).rem_euclid(n as i64);
        let parity = (l1 + l2).rem_euclid(2) as f64;
        2.0 * PI * m as f64 / n as f64 + PI * parity
    }
}

/// Waves of the two families used at step `q` (parity `q mod 2`), interval parity 0 first.
pub fn step_waves(q: i64, lambda: u64) -> Result<Vec<(SetTag, Vec<WaveSpec>)>> {
    (0..2)
        .map(|j| {
            let tag = SetTag::for_step(q, j);
            let set = direction_set(tag);
            let waves = set.base.iter().map(|k| WaveSpec::new(k, lambda)).collect::<Result<_>>()?;
            Ok((tag, waves))
        })
        .collect()
}

/// All directional masks of step `q` at frequency `lambda`.
pub fn step_masks(q: i64, lambda: u64, width: f64) -> Result<Vec<Mask>> {
    Ok(step_waves(q, lambda)?
        .into_iter()
        .flat_map(|(_, ws)| ws.into_iter().map(move |w| w.mask(width)))
        .collect())
}

/// Fraction of the energy of `f` outside the union of `masks`.
pub fn mass_outside<const N: usize>(f: &crate::spectral::Field<N>, masks: &[Mask]) -> f64 {
    let total = f.energy();
    if total == 0.0 {
        return 0.0;
    }
    let outside: f64 = f
        .comps
        .iter()
        .map(|c| c.energy_where(|k1, k2| !masks.iter().any(|m| m.keeps(k1, k2))))
        .sum();
    outside / total
}

/// Lattice points kept by some mask of `a` and some mask of `b`.
pub fn mask_overlap(a: &[Mask], b: &[Mask]) -> usize {
    let reach = a
        .iter()
        .chain(b)
        .filter_map(Mask::reach)
        .max()
        .unwrap_or(0) as i64;
    let mut count = 0;
    for k2 in -reach..=reach {
        for k1 in -reach..=reach {
            if a.iter().any(|m| m.keeps(k1, k2)) && b.iter().any(|m| m.keeps(k1, k2)) {
                count += 1;
            }
        }
    }
    count
}

// ---------------------------------------------------------------------------
// Amplitudes

/// Pointwise amplitudes `a_{k_j}` (`j = 1..3`, with `a_{−k} = a_k`) of one family
/// at one time sample, on the physical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Amplitudes {
    pub tag: SetTag,
    pub values: [Vec<f64>; 3],
    /// `max_x ‖(λδ)^{−1}R_ℓ(x)‖`.
    pub ball_norm: f64,
}

impl Amplitudes {
    pub fn sup(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }
}

/// `a_k = δ^{1/2} γ_k(Id − (λδ)^{−1}R_ℓ)` at every grid point; `r` holds the
/// physical components `(xx, xy, yy)` of `R_ℓ`, or `None` for `R_ℓ = 0`.
pub fn amplitudes(
    r: Option<&[Vec<f64>; 3]>,
    npts: usize,
    lambda: f64,
    delta: f64,
    eps: f64,
    solver: &GammaSolver,
    sample: usize,
    n: usize,
) -> Result<Amplitudes> {
    let sd = delta.sqrt();
    let inv = 1.0 / (lambda * delta);
    let Some(r) = r else {
        let g = solver.gamma([1.0, 0.0, 1.0])?;
        return Ok(Amplitudes {
            tag: solver.tag,
            values: g.map(|gj| vec![sd * gj; npts]),
            ball_norm: 0.0,
        });
    };
    let (worst, norm) = (0..npts)
        .map(|p| (p, sym_norm([r[0][p] * inv, r[1][p] * inv, r[2][p] * inv])))
        .fold((0, 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });
    if norm > eps {
        return Err(Error::AmplitudeOutOfBall {
            sample,
            ix: worst % n,
            iy: worst / n,
            norm,
            eps,
        });
    }
    let mut values = [vec![0.0; npts], vec![0.0; npts], vec![0.0; npts]];
    let mut bad = None;
    for p in 0..npts {
        let arg = [1.0 - r[0][p] * inv, -r[1][p] * inv, 1.0 - r[2][p] * inv];
        let c = solver.coefficients(arg);
        if c.iter().any(|&v| !(v > 0.0)) {
            bad.get_or_insert(c);
            continue;
        }
        for j in 0..3 {
            values[j][p] = sd * c[j].sqrt();
        }
    }
    if let Some(c) = bad {
        return Err(Error::OutOfBall { c });
    }
    Ok(Amplitudes {
        tag: solver.tag,
        values,
        ball_norm: norm,
    })
}

/// Physical samples of a tensor field on its grid, or `None` when it is zero.
pub fn tensor_samples(r: &SymTensorField) -> Option<[Vec<f64>; 3]> {
    (!r.is_zero()).then(|| r.physical())
}

/// `max_x ‖R_ℓ/λ + ½Σ_k a_k² (k⊥⊗k⊥) − δ Id‖`.
pub fn cancellation_residual(
    amps: &Amplitudes,
    r: Option<&[Vec<f64>; 3]>,
    solver: &GammaSolver,
    lambda: f64,
    delta: f64,
) -> f64 {
    let npts = amps.values[0].len();
    let t = &solver.tensors_f64;
    par::max_by(npts, |p| {
        let rl = r.map_or([0.0; 3], |r| [r[0][p], r[1][p], r[2][p]]);
        let e: [f64; 3] = std::array::from_fn(|c| {
            let s: f64 = (0..3).map(|j| amps.values[j][p].powi(2) * t[j][c]).sum();
            let id = if c == 1 { 0.0 } else { delta };
            rl[c] / lambda + s - id
        });
        sym_norm(e)
    })
}

// ---------------------------------------------------------------------------
// Perturbation

/// `ℙ_{λ,k}(χ a (b_k(λΦ) + b_{−k}(λΦ)))` at one sample, from physical amplitudes
/// and the flow displacement (`None` for `Φ = id`).
pub fn perturbation_piece(
    grid: Grid,
    wave: &WaveSpec,
    chi: f64,
    amp: &[f64],
    displacement: Option<&[Vec<f64>; 2]>,
    width: f64,
) -> Result<VectorField> {
    let n = grid.n;
    let mask = wave.mask(width);
    let reach = mask.reach().expect("bounded");
    if reach > grid.max_band() {
        return Err(Error::ShellOverflow {
            reach,
            limit: grid.max_band(),
        });
    }
    let [k1, k2] = wave.dir;
    let [l1, l2] = wave.lattice.map(|l| l as f64);
    let mut px = vec![0.0; n * n];
    let mut py = vec![0.0; n * n];
    let rows = par::map_collect(n, |r| {
        (0..n)
            .map(|c| {
                let p = r * n + c;
                let mut theta = wave.grid_phase(n, c, r);
                if let Some(d) = displacement {
                    theta += l1 * d[0][p] + l2 * d[1][p];
                }
                -2.0 * chi * amp[p] * theta.sin()
            })
            .collect::<Vec<f64>>()
    });
    for (r, row) in rows.into_iter().enumerate() {
        for (c, s) in row.into_iter().enumerate() {
            px[r * n + c] = -k2 * s;
            py[r * n + c] = k1 * s;
        }
    }
    let mut spec = analyze(&[&px, &py], n, reach).into_iter();
    let raw = VectorField {
        grid,
        comps: [spec.next().unwrap(), spec.next().unwrap()],
    };
    Ok(leray(&raw.masked(reach, |a, b| mask.keeps(a, b))))
}

/// Options of [`build_perturbation`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationOptions {
    pub width: f64,
    /// RK4 substeps per `dt`; `None` picks the CFL minimum.
    pub substeps: Option<usize>,
    /// Admissible ball radius for the amplitude argument.
    pub eps: f64,
}

/// Per-interval flow diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDiagnostic {
    pub index: i64,
    pub substeps: usize,
    /// `max_t |det ∇Φ_i − 1|`.
    pub det_deviation: f64,
    /// `max_t ‖∇Φ_i − Id‖₀ / (|t − t_i|·‖Λv‖₁)` over samples off the anchor.
    pub transport_constant: f64,
    pub max_deformation: f64,
}

/// Diagnostics of one perturbation build.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    /// `max ‖R_ℓ/λ + ½Σa_k²k⊥⊗k⊥ − δId‖ / δ` over samples and intervals.
    pub cancellation: f64,
    /// `max ‖(λδ)^{−1}R_ℓ‖` seen by the amplitudes.
    pub ball_norm: f64,
    /// `max ‖a_k‖₀ / δ^{1/2}`.
    pub amplitude_constant: f64,
    /// `‖w‖₀ / δ^{1/2}`, the measured constant `M`.
    pub m_measured: f64,
    /// Energy fraction of `w` outside the step's shells, worst sample.
    pub outside_mass: f64,
    pub flows: Vec<FlowDiagnostic>,
}

/// The perturbation and its diagnostics.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub w: VectorSeries,
    pub report: PerturbationReport,
}

/// Builds `w_{q+1}` interval by interval. Each flow map is solved, used for
/// every wave of its family and dropped before the next interval.
#[allow(clippy::too_many_arguments)]
pub fn build_perturbation(
    r_ell: &Series<3>,
    v: &VectorSeries,
    partition: &TimePartition,
    q: i64,
    lambda: u64,
    delta: f64,
    opts: PerturbationOptions,
) -> Result<Perturbation> {
    let grid = v.grid();
    let time = v.time;
    let n = grid.n;
    let waves = step_waves(q, lambda)?;
    let masks = step_masks(q, lambda, opts.width)?;
    let solvers: Vec<(SetTag, GammaSolver)> = waves
        .iter()
        .map(|(tag, _)| (*tag, GammaSolver::new(&direction_set(*tag))))
        .collect();
    let adv = Advector::from_series(v);
    let lam = lambda as f64;
    let mut w: Vec<VectorField> = vec![VectorField::zeros(grid); time.nt];
    let mut report = PerturbationReport {
        cancellation: 0.0,
        ball_norm: 0.0,
        amplitude_constant: 0.0,
        m_measured: 0.0,
        outside_mass: 0.0,
        flows: Vec::new(),
    };
    for &i in &partition.indices {
        let tag = partition.tag(i);
        let (_, family) = waves.iter().find(|(t, _)| *t == tag).expect("family");
        let (_, solver) = solvers.iter().find(|(t, _)| *t == tag).expect("solver");
        let flow = solve_flow_with(&adv, grid, i, partition, opts.substeps)?;
        report.flows.push(flow_diagnostic(&flow, &adv));
        for (j, wj) in w.iter_mut().enumerate() {
            let Some(d) = flow.sample(j) else { continue };
            let chi = partition.chi(i, time.t(j));
            let r = tensor_samples(&r_ell.samples[j]);
            let amps = amplitudes(r.as_ref(), n * n, lam, delta, opts.eps, solver, j, n)?;
            report.cancellation = report
                .cancellation
                .max(cancellation_residual(&amps, r.as_ref(), solver, lam, delta) / delta);
            report.ball_norm = report.ball_norm.max(amps.ball_norm);
            report.amplitude_constant = report.amplitude_constant.max(amps.sup() / delta.sqrt());
            let trivial = d.iter().all(|c| c.iter().all(|&x| x == 0.0));
            for (wave, a) in family.iter().zip(&amps.values) {
                let piece = perturbation_piece(grid, wave, chi, a, (!trivial).then_some(d), opts.width)?;
                *wj = wj.add(&piece);
            }
        }
    }
    for wj in &w {
        report.m_measured = report.m_measured.max(wj.sup_norm() / delta.sqrt());
        report.outside_mass = report.outside_mass.max(mass_outside(wj, &masks));
    }
    Ok(Perturbation {
        w: Series { time, samples: w },
        report,
    })
}

fn flow_diagnostic(flow: &FlowMap, adv: &Advector) -> FlowDiagnostic {
    let mut det = 0.0f64;
    let mut cst = 0.0f64;
    let mut def = 0.0f64;
    for j in 0..flow.time.nt {
        if flow.sample(j).is_none() || adv.mode_count() == 0 {
            continue;
        }
        let dt = (flow.time.t(j) - flow.anchor_time).abs();
        if dt <= 1e-9 * flow.time.dt {
            continue;
        }
        det = det.max(flow.det_deviation(j).unwrap_or(0.0));
        let d = flow.deformation(j).unwrap_or(0.0);
        def = def.max(d);
        if adv.c1 > 0.0 {
            cst = cst.max(d / (dt * adv.c1));
        }
    }
    FlowDiagnostic {
        index: flow.index,
        substeps: flow.substeps,
        det_deviation: det,
        transport_constant: cst,
        max_deformation: def,
    }
}

/// `ψ = e^{iλk·(Φ − x)}` at one sample, as `(re, im)`.
pub fn phase_field(flow: &FlowMap, j: usize, wave: &WaveSpec) -> Option<(Vec<f64>, Vec<f64>)> {
    let d = flow.sample(j)?;
    let [l1, l2] = wave.lattice.map(|l| l as f64);
    let theta: Vec<f64> = d[0].iter().zip(&d[1]).map(|(a, b)| l1 * a + l2 * b).collect();
    Some((theta.iter().map(|t| t.cos()).collect(), theta.iter().map(|t| t.sin()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_direction_sets;
    use crate::spectral::{div, grad_perp, lambda as lam_op, perp_div};

    #[test]
    fn beltrami_relations() {
        let grid = Grid::new(512).unwrap();
        for set in build_direction_sets() {
            for k in &set.base {
                let w = WaveSpec::new(k, 170).unwrap();
                let b = w.beltrami_pair(grid, 1.0);
                let c = w.c_pair(grid, 1.0);
                let l = 170.0;
                let gc = grad_perp(&c).scale(1.0 / l);
                assert!(gc.sub(&b).energy().sqrt() < 1e-13);
                let pc = perp_div(&b).scale(-1.0 / l);
                assert!(pc.sub(&c).energy().sqrt() < 1e-13);
                assert!(div(&b).energy() < 1e-26);
                assert!(lam_op(&b).scale(1.0 / l).sub(&b).energy().sqrt() < 1e-13);
            }
        }
    }

    #[test]
    fn overlap_between_parities_vanishes_at_default_width() {
        let a = step_masks(0, 170, DEFAULT_SHELL_WIDTH).unwrap();
        let b = step_masks(1, 255, DEFAULT_SHELL_WIDTH).unwrap();
        assert_eq!(mask_overlap(&a, &b), 0);
        let a = step_masks(0, 170, 0.25).unwrap();
        let b = step_masks(1, 255, 0.25).unwrap();
        assert!(mask_overlap(&a, &b) > 0);
    }

    #[test]
    fn constant_amplitude_piece_is_exact_wave() {
        let grid = Grid::new(512).unwrap();
        let k = &build_direction_sets()[0].base[1];
        let wave = WaveSpec::new(k, 170).unwrap();
        let amp = vec![0.3; 512 * 512];
        let piece = perturbation_piece(grid, &wave, 0.5, &amp, None, DEFAULT_SHELL_WIDTH).unwrap();
        let want = wave.beltrami_pair(grid, 0.15);
        assert!(piece.sub(&want).energy().sqrt() < 1e-14);
        assert!((piece.sup_norm() - 0.3).abs() < 1e-3);
    }

    #[test]
    fn zero_stress_amplitudes_are_identity_coefficients() {
        let solver = GammaSolver::new(&build_direction_sets()[2]);
        let a = amplitudes(None, 16, 170.0, 1e-3, 0.28, &solver, 0, 4).unwrap();
        let r = cancellation_residual(&a, None, &solver, 170.0, 1e-3);
        assert!(r < 1e-13 * 1e-3);
    }
}
