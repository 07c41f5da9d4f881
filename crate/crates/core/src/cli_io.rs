//! Run manifests, the SQGF snapshot format, CSV and JSON outputs, and the
//! bodies of the command-line subcommands.
//!
//! Exit codes: 0 pass, 1 check failure, 2 usage, 3 I/O.

use crate::geometry::{audit, build_direction_sets, scheme_eps, DirectionSet};
use crate::params::{build_table, check_inequalities, report_csv, Mode, ParameterConfig, ParameterTable};
use crate::scheme::{
    cosine_modes, initialize, iterate_once, plan_time_grid, residual, scalar_commutation, select_zeta,
    series_bitwise_eq, states_bitwise_eq, swap_roles, InitReport, InitialData, StepOptions, StepReport,
    SystemState, TimeBump, Which,
};
use crate::spectral::{
    antidiv, div_tensor, dot, grad, grad_transpose_dot, lambda, leray, perp_div, random_div_free, random_field,
    sqg_full, advect_scalar, Field, Grid, ScalarField, VectorField, C64,
};
use crate::stress::{nash_scalar_discrepancy, norm_csv};
use crate::{Error, Result};
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Exit code for an error: usage for bad input, I/O for file trouble, check
/// failure otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::InvalidParameter(_)
        | Error::Manifest(_)
        | Error::BadGrid(_)
        | Error::NotMultipleOf85 { .. }
        | Error::InitialData(_) => EXIT_USAGE,
        _ => EXIT_CHECK_FAIL,
    }
}

/// Formats a float so that parsing it back gives the same bits.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// CSV float formatting.
fn csv_f64(x: f64) -> String {
    format!("{x:.17e}")
}

// ---------------------------------------------------------------------------
// Manifest

/// A `key = value` run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub n: usize,
    pub mode: Mode,
    pub a: f64,
    pub b: f64,
    pub beta: f64,
    pub lambda: Option<Vec<u64>>,
    pub qmax: usize,
    pub eps: f64,
    pub m: f64,
    pub smallness: f64,
    pub zeta: f64,
    pub width: f64,
    pub seed: u64,
    pub amplitude: f64,
    pub bump_start: f64,
    pub bump_end: f64,
    pub steps: usize,
    /// Explicit time step; otherwise `τ_{c,1}/samples_per_tau_c`.
    pub dt: Option<f64>,
    pub samples_per_tau_c: usize,
    pub substeps: Option<usize>,
    pub snapshots: bool,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            n: 1024,
            mode: Mode::Desk,
            a: 1e4,
            b: 1.01,
            beta: 0.8,
            lambda: Some(vec![85, 170, 255]),
            qmax: 2,
            eps: scheme_eps().to_f64().unwrap_or(0.28),
            m: 1.0,
            smallness: 0.1,
            zeta: 1.0,
            width: crate::perturb::DEFAULT_SHELL_WIDTH,
            seed: 42,
            amplitude: 1.5e-7,
            bump_start: 1.001,
            bump_end: 1.004,
            steps: 1,
            dt: None,
            samples_per_tau_c: 9,
            substeps: None,
            snapshots: true,
        }
    }
}

pub const MANIFEST_KEYS: [&str; 21] = [
    "n",
    "mode",
    "a",
    "b",
    "beta",
    "lambda",
    "qmax",
    "eps",
    "m",
    "smallness",
    "zeta",
    "width",
    "seed",
    "amplitude",
    "bump_start",
    "bump_end",
    "steps",
    "dt",
    "samples_per_tau_c",
    "substeps",
    "snapshots",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Manifest(format!("cannot parse {key} = {v:?}")))
}

impl RunManifest {
    /// Parses `key = value` lines; `#` starts a comment, unknown or repeated keys
    /// are errors, missing keys take their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Manifest(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k.to_string()) {
                return Err(Error::Manifest(format!("key {k} given twice")));
            }
            seen.push(k.to_string());
            match k {
                "n" => m.n = parse_num(k, v)?,
                "mode" => {
                    m.mode = match v {
                        "desk" => Mode::Desk,
                        "rigor" => Mode::Rigor,
                        _ => return Err(Error::Manifest(format!("mode must be desk or rigor, got {v}"))),
                    }
                }
                "a" => m.a = parse_num(k, v)?,
                "b" => m.b = parse_num(k, v)?,
                "beta" => m.beta = parse_num(k, v)?,
                "lambda" => {
                    m.lambda = if v == "none" {
                        None
                    } else {
                        Some(v.split(',').map(|x| parse_num(k, x.trim())).collect::<Result<_>>()?)
                    }
                }
                "qmax" => m.qmax = parse_num(k, v)?,
                "eps" => m.eps = parse_num(k, v)?,
                "m" => m.m = parse_num(k, v)?,
                "smallness" => m.smallness = parse_num(k, v)?,
                "zeta" => m.zeta = parse_num(k, v)?,
                "width" => m.width = parse_num(k, v)?,
                "seed" => m.seed = parse_num(k, v)?,
                "amplitude" => m.amplitude = parse_num(k, v)?,
                "bump_start" => m.bump_start = parse_num(k, v)?,
                "bump_end" => m.bump_end = parse_num(k, v)?,
                "steps" => m.steps = parse_num(k, v)?,
                "dt" => m.dt = if v == "auto" { None } else { Some(parse_num(k, v)?) },
                "samples_per_tau_c" => m.samples_per_tau_c = parse_num(k, v)?,
                "substeps" => m.substeps = if v == "auto" { None } else { Some(parse_num(k, v)?) },
                "snapshots" => m.snapshots = parse_num(k, v)?,
                _ => return Err(Error::Manifest(format!("unknown key {k}"))),
            }
        }
        Ok(m)
    }

    /// Canonical text; `parse(to_text())` reproduces every field bit for bit.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n", self.n.to_string());
        kv("mode", self.mode.as_str().to_string());
        kv("a", fmt_f64(self.a));
        kv("b", fmt_f64(self.b));
        kv("beta", fmt_f64(self.beta));
        kv(
            "lambda",
            self.lambda.as_ref().map_or("none".into(), |l| {
                l.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
            }),
        );
        kv("qmax", self.qmax.to_string());
        kv("eps", fmt_f64(self.eps));
        kv("m", fmt_f64(self.m));
        kv("smallness", fmt_f64(self.smallness));
        kv("zeta", fmt_f64(self.zeta));
        kv("width", fmt_f64(self.width));
        kv("seed", self.seed.to_string());
        kv("amplitude", fmt_f64(self.amplitude));
        kv("bump_start", fmt_f64(self.bump_start));
        kv("bump_end", fmt_f64(self.bump_end));
        kv("steps", self.steps.to_string());
        kv("dt", self.dt.map_or("auto".into(), fmt_f64));
        kv("samples_per_tau_c", self.samples_per_tau_c.to_string());
        kv("substeps", self.substeps.map_or("auto".into(), |x| x.to_string()));
        kv("snapshots", self.snapshots.to_string());
        s
    }

    pub fn table(&self) -> Result<ParameterTable> {
        let cfg = ParameterConfig::new(self.a, self.b, self.beta, self.eps, self.m, self.smallness)?;
        build_table(cfg, self.qmax, self.mode, self.lambda.as_deref())
    }

    /// Profile `A k⊥ cos(k·x + φ_k)` over `k = (1,0), (0,1)` with phases drawn
    /// from the seed.
    pub fn initial_data(&self, grid: Grid) -> Result<InitialData> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let p1: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let p2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let v = cosine_modes(grid, &[([1, 0], self.amplitude, p1), ([0, 1], self.amplitude, p2)]);
        InitialData::new(v, TimeBump::new(self.bump_start, self.bump_end)?)
    }
}

/// Manifest with the hash of the file it was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub config_sha256: String,
    pub tool_version: &'static str,
    pub seed: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn read_manifest(path: &Path) -> Result<(RunManifest, Provenance)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Manifest("manifest is not UTF-8".into()))?;
    let m = RunManifest::parse(&text)?;
    let p = Provenance {
        config_sha256: sha256_hex(&bytes),
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: m.seed,
    };
    Ok((m, p))
}

// ---------------------------------------------------------------------------
// SQGF snapshots

pub const SQGF_MAGIC: &[u8; 4] = b"SQGF";
pub const SQGF_VERSION: u32 = 1;

/// One field at one time on an `n × n` grid, component-major, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub n: usize,
    pub time: f64,
    pub comps: Vec<Vec<f64>>,
}

impl Snapshot {
    pub fn of<const N: usize>(f: &Field<N>, time: f64) -> Self {
        Self {
            n: f.grid.n,
            time,
            comps: f.physical().into_iter().collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 8 * self.n * self.n * self.comps.len());
        buf.extend_from_slice(SQGF_MAGIC);
        buf.extend_from_slice(&SQGF_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n as u32).to_le_bytes());
        buf.extend_from_slice(&(self.comps.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.time.to_le_bytes());
        for c in &self.comps {
            for x in c {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 24];
        r.read_exact(&mut head)?;
        if &head[0..4] != SQGF_MAGIC {
            return Err(Error::Io("not an SQGF file".into()));
        }
        let u = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
        if u(4) != SQGF_VERSION {
            return Err(Error::Io(format!("unsupported SQGF version {}", u(4))));
        }
        let (n, nc) = (u(8) as usize, u(12) as usize);
        let time = f64::from_le_bytes(head[16..24].try_into().expect("8 bytes"));
        let mut body = vec![0u8; 8 * n * n * nc];
        r.read_exact(&mut body)?;
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            n,
            time,
            comps: vals.chunks(n * n).map(<[f64]>::to_vec).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
        );
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
        );
        Self::read_from(&mut f)
    }

    /// `x y c0 c1 …` rows with a blank line after each grid row.
    pub fn columns(&self) -> String {
        let n = self.n;
        let mut s = format!("# t = {}\n# x y", fmt_f64(self.time));
        for i in 0..self.comps.len() {
            let _ = write!(s, " c{i}");
        }
        s.push('\n');
        for r in 0..n {
            for c in 0..n {
                let _ = write!(s, "{} {}", -std::f64::consts::PI + std::f64::consts::TAU * c as f64 / n as f64,
                    -std::f64::consts::PI + std::f64::consts::TAU * r as f64 / n as f64);
                for comp in &self.comps {
                    let _ = write!(s, " {:.17e}", comp[r * n + c]);
                }
                s.push('\n');
            }
            s.push('\n');
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Checks and reports

/// One pass/fail comparison `value <= tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
        }
    }

    /// Boolean checks are encoded as `value ∈ {0, 1}` against tolerance 0.
    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self::new(name, if ok { 0.0 } else { 1.0 }, 0.0)
    }

    pub fn passes(&self) -> bool {
        self.value <= self.tolerance
    }
}

pub const CHECK_HEADER: &str = "name,value,tolerance,pass";

pub fn checks_csv(checks: &[Check]) -> String {
    let mut s = format!("{CHECK_HEADER}\n");
    for c in checks {
        let _ = writeln!(s, "{},{},{},{}", c.name, csv_f64(c.value), csv_f64(c.tolerance), c.passes());
    }
    s
}

pub const TABLE_HEADER: &str = "q,lambda,delta,tau_m,tau_c";

pub fn table_csv(t: &ParameterTable) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for q in 0..=t.qmax {
        let tc = t.tau_c[q].map(csv_f64).unwrap_or_default();
        let _ = writeln!(s, "{q},{},{},{},{tc}", t.lambda[q], csv_f64(t.delta[q]), csv_f64(t.tau_m[q]));
    }
    s
}

pub fn init_csv(r: &InitReport) -> String {
    let rows = [
        ("zeta", r.zeta, None),
        ("field_norm", r.zeta * r.norms.field, Some(r.bounds.field_u.min(r.bounds.field_v))),
        ("stress_norm", r.zeta.powi(2) * r.norms.stress, Some(r.bounds.stress)),
        ("stress_dt_norm", r.zeta.powi(3) * r.norms.stress_dt, Some(r.bounds.stress_dt)),
        ("residual_u", r.residual_u.value, None),
        ("residual_u_scale", r.residual_u.scale, None),
        ("residual_v", r.residual_v.value, None),
        ("residual_v_scale", r.residual_v.scale, None),
    ];
    let mut s = String::from("name,value,bound\n");
    for (n, v, b) in rows {
        let _ = writeln!(s, "{n},{},{}", csv_f64(v), b.map(csv_f64).unwrap_or_default());
    }
    s
}

/// Scalar diagnostics of one step.
pub fn step_csv(r: &StepReport) -> String {
    let mut rows: Vec<(&str, f64, Option<f64>)> = vec![
        ("lambda", r.lambda as f64, None),
        ("delta", r.delta, None),
        ("tau_m", r.tau_m, None),
        ("tau_c", r.tau_c, None),
        ("intervals", r.intervals as f64, None),
        ("increment", r.increment, Some(r.increment_bound)),
        ("field_norm", r.field_norm, Some(r.field_bound)),
        ("outside_mass", r.outside_mass, None),
        ("mask_overlap", r.mask_overlap as f64, None),
        ("support_violation", r.support_violation, None),
        ("oscillation_low", r.stress.high_low.low, Some(r.stress.low_scale)),
        ("oscillation_high", r.stress.high_low.high, None),
        ("oscillation_reference", r.stress.high_low.reference, None),
        ("transport_material_sup", r.stress.transport.material_sup, None),
        ("transport_gain_constant", r.stress.transport.gain_constant, None),
        ("transport_richardson", r.stress.transport.richardson.unwrap_or(f64::NAN), None),
        ("nash_discrepancy", r.stress.nash_discrepancy, None),
    ];
    if let Some(p) = &r.perturbation {
        rows.extend([
            ("cancellation", p.cancellation, None),
            ("ball_norm", p.ball_norm, None),
            ("amplitude_constant", p.amplitude_constant, None),
            ("m_measured", p.m_measured, None),
        ]);
        let det = p.flows.iter().map(|f| f.det_deviation).fold(0.0, f64::max);
        let c = p.flows.iter().map(|f| f.transport_constant).fold(0.0, f64::max);
        rows.extend([("flow_det_deviation", det, None), ("flow_transport_constant", c, None)]);
    }
    let mut s = String::from("name,value,bound\n");
    for (n, v, b) in rows {
        let _ = writeln!(s, "{n},{},{}", csv_f64(v), b.map(csv_f64).unwrap_or_default());
    }
    s
}

/// Result of [`run_manifest`].
pub struct RunOutcome {
    /// `(label, state)`: `init`, then `step{q}` and `swap{q}` per step.
    pub states: Vec<(String, SystemState)>,
    pub init: InitReport,
    pub steps: Vec<StepReport>,
    pub checks: Vec<Check>,
    /// `(file name, contents)` of every CSV output.
    pub csv: Vec<(String, String)>,
    pub summary: serde_json::Value,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passes)
    }
}

/// Drops all states except the labelled ones.
pub fn keep_states(outcome: &mut RunOutcome, labels: &[&str]) {
    outcome.states.retain(|(l, _)| labels.contains(&l.as_str()));
}

/// Initializes from the manifest and runs `steps` iterations, each followed by
/// a role swap, recording identity-class checks. Writes outputs to `out` when
/// given.
pub fn run_manifest(m: &RunManifest, prov: Option<&Provenance>, out: Option<&Path>) -> Result<RunOutcome> {
    let grid = Grid::new(m.n)?;
    let table = Arc::new(m.table()?);
    let data = m.initial_data(grid)?;
    let (zeta, _) = select_zeta(&data, m.zeta, &table)?;
    let time = match m.dt {
        Some(dt) => {
            let (ta, tb) = data.support(zeta);
            let pad = (0..m.steps as i64)
                .map(|q| Ok(table.tau_m_at(q + 1)? + 2.0 * table.tau_c_at(q + 1)?))
                .sum::<Result<f64>>()?
                + 4.0 * dt;
            let first = ((ta - pad) / dt).floor() as i64;
            let last = ((tb + pad) / dt).ceil() as i64;
            crate::flowtime::TimeGrid::aligned(first, dt, (last - first + 1) as usize)?
        }
        None => plan_time_grid(&table, data.support(zeta), m.steps, m.samples_per_tau_c)?,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    let (s0, init) = initialize(&data, zeta, Arc::clone(&table), time, grid)?;
    let mut checks = vec![
        Check::new("init_residual_u", init.residual_u.relative(), 1e-10),
        Check::new("init_residual_v", init.residual_v.relative(), 1e-10),
        Check::new("init_support", s0.support_violation()?, 1e-13),
    ];
    let mut csv = vec![
        ("params.csv".to_string(), table_csv(&table)),
        ("init.csv".to_string(), init_csv(&init)),
    ];
    let peak = peak_sample(&s0);
    let mut snaps: Vec<(String, Snapshot)> = Vec::new();
    if m.snapshots {
        snaps.push(("init_v.sqgf".into(), Snapshot::of(&s0.v.samples[peak], time.t(peak))));
    }
    let mut states = vec![("init".to_string(), s0.clone())];
    let mut steps = Vec::new();
    let mut cur = s0;
    for _ in 0..m.steps {
        let q = cur.q;
        let (next, rep) = iterate_once(
            &cur,
            StepOptions {
                width: m.width,
                substeps: m.substeps,
                ..Default::default()
            },
        )?;
        checks.extend(step_checks(&cur, &next, &rep)?);
        let swapped = swap_roles(&next);
        checks.extend(swap_checks(&next, &swapped)?);
        csv.push((format!("norms_q{q}.csv"), norm_csv(&rep.stress.norms)));
        csv.push((format!("step_q{q}.csv"), step_csv(&rep)));
        if m.snapshots {
            snaps.push((format!("step{q}_v.sqgf"), Snapshot::of(&next.v.samples[peak], time.t(peak))));
            snaps.push((format!("step{q}_u.sqgf"), Snapshot::of(&next.u.samples[peak], time.t(peak))));
            snaps.push((
                format!("step{q}_R.sqgf"),
                Snapshot::of(&next.stress.sample(peak), time.t(peak)),
            ));
        }
        states.push((format!("step{q}"), next));
        states.push((format!("swap{q}"), swapped.clone()));
        steps.push(rep);
        cur = swapped;
    }
    csv.push(("checks.csv".to_string(), checks_csv(&checks)));
    let summary = summary_json(m, prov, &init, &steps, &checks, time, zeta);
    if let Some(dir) = out {
        for (name, text) in &csv {
            write_file(&dir.join(name), text.as_bytes())?;
        }
        for (name, s) in &snaps {
            s.save(&dir.join(name))?;
        }
        let js = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?;
        write_file(&dir.join("summary.json"), js.as_bytes())?;
        write_file(&dir.join("manifest.txt"), m.to_text().as_bytes())?;
    }
    Ok(RunOutcome {
        states,
        init,
        steps,
        checks,
        csv,
        summary,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Sample where the active field of the initial state is largest.
fn peak_sample(s: &SystemState) -> usize {
    let e: Vec<f64> = s.v.samples.iter().map(Field::energy).collect();
    e.iter()
        .enumerate()
        .fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

/// Checks tying a step's input and output together.
pub fn step_checks(before: &SystemState, after: &SystemState, rep: &StepReport) -> Result<Vec<Check>> {
    let q = before.q;
    let inactive_same = series_bitwise_eq(before.inactive(), after.inactive());
    let force_same = before.force.bitwise_eq(&after.force);
    let mut out = vec![
        Check::flag(format!("q{q}_inactive_unchanged"), inactive_same),
        Check::flag(format!("q{q}_force_unchanged"), force_same),
        Check::new(format!("q{q}_outside_mass"), rep.outside_mass, 1e-10),
        Check::new(format!("q{q}_mask_overlap"), rep.mask_overlap as f64, 0.0),
        Check::new(format!("q{q}_support"), rep.support_violation, 1e-13),
        Check::new(format!("q{q}_residual_active"), residual(after, Which::Active)?.relative(), 1e-10),
        Check::new(format!("q{q}_residual_inactive"), residual(after, Which::Inactive)?.relative(), 1e-10),
        Check::new(
            format!("q{q}_scalar_commutation"),
            scalar_commutation(after, Which::Active)?.relative(),
            1e-11,
        ),
        Check::new(format!("q{q}_divergence"), after.divergence(), 1e-12),
    ];
    if let Some(p) = &rep.perturbation {
        out.push(Check::new(format!("q{q}_cancellation"), p.cancellation, 1e-11));
    }
    Ok(out)
}

/// Checks of a role swap.
pub fn swap_checks(before: &SystemState, after: &SystemState) -> Result<Vec<Check>> {
    let q = before.q - 1;
    let back = swap_roles(after);
    let last = after.force.terms().last();
    Ok(vec![
        Check::flag(format!("q{q}_double_swap"), states_bitwise_eq(before, &back)),
        Check::flag(
            format!("q{q}_force_increment"),
            last.is_some_and(|t| t.bitwise_eq(&before.stress)),
        ),
        Check::new(format!("q{q}_swap_residual_active"), residual(after, Which::Active)?.relative(), 1e-10),
        Check::new(
            format!("q{q}_swap_residual_inactive"),
            residual(after, Which::Inactive)?.relative(),
            1e-10,
        ),
    ])
}

fn summary_json(
    m: &RunManifest,
    prov: Option<&Provenance>,
    init: &InitReport,
    steps: &[StepReport],
    checks: &[Check],
    time: crate::flowtime::TimeGrid,
    zeta: f64,
) -> serde_json::Value {
    use serde_json::json;
    let steps: Vec<_> = steps
        .iter()
        .map(|r| {
            json!({
                "q": r.q,
                "lambda": r.lambda,
                "intervals": r.intervals,
                "increment_within_bound": r.increment <= r.increment_bound,
                "field_norm_within_bound": r.field_norm <= r.field_bound,
                "stress_norms_within_bounds": r.stress.norms.iter().all(|n| n.passes()),
                "oscillation_low_below_scale": r.stress.high_low.low <= r.stress.low_scale,
                "transport_time_resolved": r.stress.transport.resolved(),
            })
        })
        .collect();
    json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config_sha256": prov.map(|p| p.config_sha256.clone()),
        "seed": m.seed,
        "grid": m.n,
        "time": { "t0": time.t0, "dt": time.dt, "nt": time.nt },
        "zeta": zeta,
        "init_estimates_hold": {
            "field": zeta * init.norms.field <= init.bounds.field_u.min(init.bounds.field_v),
            "stress": zeta * zeta * init.norms.stress <= init.bounds.stress,
            "stress_dt": zeta.powi(3) * init.norms.stress_dt <= init.bounds.stress_dt,
        },
        "identity_checks": checks.iter().map(|c| json!({"name": c.name, "pass": c.passes()})).collect::<Vec<_>>(),
        "identity_checks_pass": checks.iter().all(Check::passes),
        "estimates": steps,
    })
}

// ---------------------------------------------------------------------------
// Commands

/// Outcome of a command: exit code plus the text it prints.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub code: i32,
    pub stdout: String,
}

fn from_error(e: &Error) -> CommandOutput {
    CommandOutput {
        code: exit_code(e),
        stdout: format!("error: {e}\n"),
    }
}

/// Rigor-mode inequality report for `q = 1..=qmax−2`; exit 0 iff every record
/// and threshold comparison holds.
pub fn cmd_params(beta: f64, b: f64, a: f64, qmax: usize, smallness: f64) -> CommandOutput {
    let run = || -> Result<(bool, String)> {
        let eps = scheme_eps().to_f64().unwrap_or(0.28);
        let cfg = ParameterConfig::new(a, b, beta, eps, 1.0, smallness)?;
        let table = build_table(cfg, qmax, Mode::Rigor, None)?;
        let reports = (1..=qmax as i64 - 2)
            .map(|q| check_inequalities(&table, &cfg, q))
            .collect::<Result<Vec<_>>>()?;
        let ok = reports.iter().all(|r| r.all_pass());
        Ok((ok, report_csv(&reports)))
    };
    match run() {
        Ok((ok, text)) => CommandOutput {
            code: if ok { EXIT_PASS } else { EXIT_CHECK_FAIL },
            stdout: text,
        },
        Err(e) => from_error(&e),
    }
}

/// Audit of the direction sets; `corrupt` swaps a vector between two families
/// first, which must make the audit fail.
pub fn cmd_geometry(corrupt: bool) -> CommandOutput {
    let mut sets: Vec<DirectionSet> = build_direction_sets().into_iter().collect();
    if corrupt {
        let k = sets[0].base[0].clone();
        sets[1].base[0] = k;
    }
    let a = audit(&sets);
    CommandOutput {
        code: if a.passed { EXIT_PASS } else { EXIT_CHECK_FAIL },
        stdout: a.text,
    }
}

/// Runs a manifest file and writes outputs into `out`.
pub fn cmd_run(config: &Path, out: &Path) -> CommandOutput {
    let run = || -> Result<(bool, String)> {
        let (m, p) = read_manifest(config)?;
        let o = run_manifest(&m, Some(&p), Some(out))?;
        Ok((o.passed(), checks_csv(&o.checks)))
    };
    match run() {
        Ok((ok, text)) => CommandOutput {
            code: if ok { EXIT_PASS } else { EXIT_CHECK_FAIL },
            stdout: text,
        },
        Err(e) => from_error(&e),
    }
}

/// Relative residuals of the operator identities over `count` random fields.
pub fn identity_suite(seed: u64, n: usize, count: usize) -> Result<Vec<Check>> {
    let grid = Grid::new(n)?;
    if n < 16 {
        return Err(Error::InvalidParameter(format!("identity suite needs n >= 16, got {n}")));
    }
    let band = (grid.max_band() / 3).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = [
        "leray_of_gradient",
        "antidiv_of_gradient",
        "div_antidiv",
        "gradient_product_rule",
        "nash_scalar_form",
        "nonlinearity_mean",
        "scalar_nonlinearity",
    ];
    let mut worst = [0.0f64; 7];
    let rel = |a: f64, s: f64| if s == 0.0 { a } else { a / s };
    for _ in 0..count {
        let f: ScalarField = random_field(grid, band, &mut rng);
        let vf: VectorField = random_field(grid, band, &mut rng);
        let v = random_div_free(grid, band, &mut rng);
        let w = random_div_free(grid, band, &mut rng);
        let g = grad(&f);
        let gs = g.sup_norm();
        worst[0] = worst[0].max(rel(leray(&g).sup_norm(), gs));
        worst[1] = worst[1].max(rel(antidiv(&g).sup_norm(), gs));
        let lhs = div_tensor(&antidiv(&vf));
        let zero_mean = vf.map_comps(|c| c.multiply(|k1, k2| C64::new(if k1 == 0 && k2 == 0 { 0.0 } else { 1.0 }, 0.0)));
        let rhs = leray(&zero_mean);
        worst[2] = worst[2].max(rel(lhs.sub(&rhs).sup_norm(), vf.sup_norm()));
        let lv = lambda(&v);
        let a = grad_transpose_dot(&w, &lv)?.add(&grad_transpose_dot(&lv, &w)?);
        let b = grad(&dot(&w, &lv)?);
        worst[3] = worst[3].max(rel(a.sub(&b).sup_norm(), a.sup_norm().max(b.sup_norm())));
        let (d, s) = nash_scalar_discrepancy(&w, &v)?;
        worst[4] = worst[4].max(rel(d, s));
        let nl = sqg_full(&v.add(&w))?;
        let m = nl.mean();
        worst[5] = worst[5].max(rel(m[0].hypot(m[1]), nl.sup_norm()));
        let theta = perp_div(&v).neg();
        let lhs = perp_div(&sqg_full(&v)?).neg();
        let rhs = advect_scalar(&lv, &theta)?;
        worst[6] = worst[6].max(rel(lhs.sub(&rhs).sup_norm(), lhs.sup_norm().max(rhs.sup_norm())));
    }
    Ok(names.iter().zip(worst).map(|(n, w)| Check::new(*n, w, 1e-11)).collect())
}

pub fn cmd_check_identities(seed: u64, n: usize, count: usize) -> CommandOutput {
    if n < 16 || !n.is_power_of_two() {
        return from_error(&Error::InvalidParameter(format!("n = {n} must be a power of two >= 16")));
    }
    match identity_suite(seed, n, count) {
        Ok(checks) => CommandOutput {
            code: if checks.iter().all(Check::passes) { EXIT_PASS } else { EXIT_CHECK_FAIL },
            stdout: checks_csv(&checks),
        },
        Err(e) => from_error(&e),
    }
}

/// Gnuplot-ready columns from a CSV table or an SQGF snapshot.
pub fn cmd_report(path: &Path) -> CommandOutput {
    let run = || -> Result<String> {
        if path.extension().is_some_and(|e| e == "sqgf") {
            return Ok(Snapshot::load(path)?.columns());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(csv_to_columns(&text))
    };
    match run() {
        Ok(s) => CommandOutput { code: EXIT_PASS, stdout: s },
        Err(e) => from_error(&e),
    }
}

/// Header becomes a `#` comment, commas become spaces, empty cells become `NaN`.
pub fn csv_to_columns(text: &str) -> String {
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').map(|c| if c.is_empty() { "NaN" } else { c }).collect();
        if i == 0 {
            out.push_str("# ");
        }
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

/// Every file a run writes, relative to its output directory.
pub fn run_outputs(m: &RunManifest) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = ["params.csv", "init.csv", "checks.csv", "summary.json", "manifest.txt"]
        .iter()
        .map(PathBuf::from)
        .collect();
    for q in 0..m.steps {
        v.push(format!("norms_q{q}.csv").into());
        v.push(format!("step_q{q}.csv").into());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let mut m = RunManifest::default();
        m.dt = Some(0.1 + 0.2);
        m.amplitude = 1.0 / 3.0;
        let back = RunManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), m.to_text());
    }

    #[test]
    fn manifest_rejects_unknown_and_repeated_keys() {
        assert!(RunManifest::parse("colour = red").is_err());
        assert!(RunManifest::parse("n = 8\nn = 16").is_err());
        assert!(RunManifest::parse("n = many").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let s = Snapshot {
            n: 4,
            time: 1.25,
            comps: vec![(0..16).map(|i| i as f64 * 0.1).collect(), vec![-0.0; 16]],
        };
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SQGF");
        let back = Snapshot::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(Snapshot::read_from(&mut &b"JUNKJUNKJUNKJUNKJUNKJUNK"[..]).is_err());
    }

    #[test]
    fn exit_codes_partition_errors() {
        assert_eq!(exit_code(&Error::Io("x".into())), EXIT_IO);
        assert_eq!(exit_code(&Error::Manifest("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Cfl { required: 2, given: 1 }), EXIT_CHECK_FAIL);
    }

    #[test]
    fn csv_columns() {
        assert_eq!(csv_to_columns("a,b\n1,\n"), "# a b\n1 NaN\n");
    }
}
