//! Iteration parameters λ_q, δ_q, τ_{m,q}, τ_{c,q} and the parameter calculus
//! relating the time and frequency scales.
//!
//! All scale products are evaluated in the log domain: every quantity is a
//! monomial in the λ's, so `ln lhs − ln rhs` is a short sum of logarithms and
//! stays accurate near equality.

use crate::{Error, Result};

/// Global configuration of the scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterConfig {
    /// Base frequency parameter.
    pub a: f64,
    /// Super-exponential rate.
    pub b: f64,
    /// Hölder target.
    pub beta: f64,
    /// Radius of the admissible ball for the coefficient functions.
    pub eps: f64,
    /// Inductive constant.
    pub m: f64,
    /// A record `lhs ≪ rhs` holds iff `lhs/rhs ≤ smallness`.
    pub smallness: f64,
}

impl ParameterConfig {
    pub fn new(a: f64, b: f64, beta: f64, eps: f64, m: f64, smallness: f64) -> Result<Self> {
        let c = Self {
            a,
            b,
            beta,
            eps,
            m,
            smallness,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(Error::InvalidParameter(s));
        if !(self.b > 1.0 && self.b < 2.0) {
            return bad(format!("b = {} must lie in (1, 2)", self.b));
        }
        if !(self.a >= 2.0) || !self.a.is_finite() {
            return bad(format!("a = {} must be finite and at least 2", self.a));
        }
        if !(self.beta > 0.75 && self.beta < 1.0) {
            return bad(format!("beta = {} must lie in (3/4, 1)", self.beta));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps = {} must be positive", self.eps));
        }
        if !(self.m > 0.0) {
            return bad(format!("M = {} must be positive", self.m));
        }
        if !(self.smallness > 0.0 && self.smallness < 1.0) {
            return bad(format!("smallness = {} must lie in (0, 1)", self.smallness));
        }
        Ok(())
    }
}

/// How the frequency sequence was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// `λ_q = 85⌈a^{b^q}⌉` for every integer q.
    Rigor,
    /// Small surrogate frequencies; asymptotic comparisons are diagnostics only.
    Desk,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Rigor => "rigor",
            Mode::Desk => "desk",
        }
    }
}

/// Scale sequences for `q = 0..=qmax`.
///
/// Indices outside the stored range are resolved by [`ParameterTable::lambda_at`]:
/// rigor tables evaluate the defining formula for any integer q, desk tables
/// clamp negative indices to `λ_0` and have nothing above `qmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTable {
    pub qmax: usize,
    pub lambda: Vec<u64>,
    pub delta: Vec<f64>,
    pub tau_m: Vec<f64>,
    /// `None` where `λ_{q+1}` is not available (desk tables at `q = qmax`).
    pub tau_c: Vec<Option<f64>>,
    pub mode: Mode,
    pub config: ParameterConfig,
}

fn rigor_lambda(a: f64, b: f64, q: i64) -> Result<u64> {
    let x = a.powf(b.powi(q as i32));
    if !x.is_finite() || x * 85.0 >= u64::MAX as f64 {
        return Err(Error::LambdaOverflow { q });
    }
    // Powers that land on an integer up to rounding (a integral, q = 0) must not
    // be pushed to the next integer by the ceiling.
    let r = x.round();
    let c = if (x - r).abs() <= 8.0 * f64::EPSILON * x {
        r
    } else {
        x.ceil()
    };
    Ok(85 * c as u64)
}

/// Builds the table. Desk mode uses `override_lambda` when given (its first
/// `qmax + 1` entries) and the rigor formula otherwise.
pub fn build_table(
    config: ParameterConfig,
    qmax: usize,
    mode: Mode,
    override_lambda: Option<&[u64]>,
) -> Result<ParameterTable> {
    config.validate()?;
    if qmax < 2 {
        return Err(Error::InvalidParameter(format!("qmax = {qmax} must be at least 2")));
    }
    let lambda: Vec<u64> = match (mode, override_lambda) {
        (Mode::Desk, Some(list)) => {
            if list.len() < qmax + 1 {
                return Err(Error::InvalidParameter(format!(
                    "override has {} entries, qmax = {qmax} needs {}",
                    list.len(),
                    qmax + 1
                )));
            }
            for (i, &l) in list.iter().enumerate() {
                if l == 0 || l % 85 != 0 {
                    return Err(Error::NotMultipleOf85 { index: i, value: l });
                }
            }
            if list.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidParameter(
                    "override frequencies must be strictly increasing".into(),
                ));
            }
            list[..=qmax].to_vec()
        }
        (Mode::Rigor, Some(_)) => {
            return Err(Error::InvalidParameter(
                "frequency override is only allowed in desk mode".into(),
            ))
        }
        (_, None) => (0..=qmax as i64)
            .map(|q| rigor_lambda(config.a, config.b, q))
            .collect::<Result<_>>()?,
    };
    let mut table = ParameterTable {
        qmax,
        delta: lambda.iter().map(|&l| (-2.0 * config.beta * (l as f64).ln()).exp()).collect(),
        lambda,
        tau_m: Vec::new(),
        tau_c: Vec::new(),
        mode,
        config,
    };
    table.tau_m = (0..=qmax as i64)
        .map(|q| table.ln_tau_m(q).map(f64::exp))
        .collect::<Result<_>>()?;
    table.tau_c = (0..=qmax as i64)
        .map(|q| table.ln_tau_c(q).ok().map(f64::exp))
        .collect();
    Ok(table)
}

impl ParameterTable {
    /// `λ_q` for any integer index, extended as described on the type.
    pub fn lambda_at(&self, q: i64) -> Result<u64> {
        if q >= 0 && (q as usize) <= self.qmax {
            return Ok(self.lambda[q as usize]);
        }
        match self.mode {
            Mode::Rigor => rigor_lambda(self.config.a, self.config.b, q),
            Mode::Desk if q < 0 => Ok(self.lambda[0]),
            Mode::Desk => Err(Error::IndexOutOfTable {
                q,
                reason: "desk tables stop at qmax",
            }),
        }
    }

    pub fn ln_lambda(&self, q: i64) -> Result<f64> {
        Ok((self.lambda_at(q)? as f64).ln())
    }

    /// `ln δ_q = −2β ln λ_q`.
    pub fn ln_delta(&self, q: i64) -> Result<f64> {
        Ok(-2.0 * self.config.beta * self.ln_lambda(q)?)
    }

    pub fn delta_at(&self, q: i64) -> Result<f64> {
        Ok(self.ln_delta(q)?.exp())
    }

    /// `τ_{m,q} = (λ_{q−2} λ_q δ_{q−2}^{1/2})^{−1}`, the mollification scale used
    /// at step `q−1 → q`.
    pub fn ln_tau_m(&self, q: i64) -> Result<f64> {
        Ok(-(self.ln_lambda(q - 2)? + self.ln_lambda(q)? + 0.5 * self.ln_delta(q - 2)?))
    }

    /// `τ_{c,q} = (λ_q λ_{q+1} δ_q^{−1/2} δ_{q+1})^{−1}`, the cutoff scale used at
    /// step `q−1 → q`.
    pub fn ln_tau_c(&self, q: i64) -> Result<f64> {
        Ok(-(self.ln_lambda(q)? + self.ln_lambda(q + 1)? - 0.5 * self.ln_delta(q)?
            + self.ln_delta(q + 1)?))
    }

    pub fn tau_m_at(&self, q: i64) -> Result<f64> {
        Ok(self.ln_tau_m(q)?.exp())
    }

    pub fn tau_c_at(&self, q: i64) -> Result<f64> {
        Ok(self.ln_tau_c(q)?.exp())
    }
}

/// Kind of bound a threshold places on β.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Upper,
    Lower,
}

/// The six closed-form β thresholds at rate `b`, as `(name, value, bound)`.
pub fn beta_thresholds(b: f64) -> Result<[(&'static str, f64, Bound); 6]> {
    if !(b > 1.0 && b < 2.0) {
        return Err(Error::InvalidParameter(format!("b = {b} must lie in (1, 2)")));
    }
    let b2 = b * b;
    let b3 = b2 * b;
    Ok([
        ("T1", (b3 + b2 + b - 1.0) / (2.0 * b3 + b2 - 1.0), Bound::Upper),
        ("T2", (b2 + 1.0) / (2.0 * b2), Bound::Upper),
        ("T3", (b2 + b + 2.0) / (2.0 * b2 + b + 1.0), Bound::Upper),
        ("T4", (b + 1.0) / (2.0 * b), Bound::Upper),
        ("T5", (b2 + b + 1.0) / (2.0 * b2 + b + 1.0), Bound::Lower),
        ("T6", 1.0 / (b + 1.0), Bound::Lower),
    ])
}

/// One scale comparison `lhs ≪ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct InequalityRecord {
    pub name: &'static str,
    pub q: i64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub holds: bool,
}

/// β compared against one threshold; `margin > 0` means the constraint is met.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRecord {
    pub name: &'static str,
    pub value: f64,
    pub beta: f64,
    pub bound: Bound,
    pub margin: f64,
}

impl ThresholdRecord {
    pub fn passes(&self) -> bool {
        self.margin > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InequalityReport {
    pub q: i64,
    pub mode: Mode,
    pub records: Vec<InequalityRecord>,
    pub thresholds: Vec<ThresholdRecord>,
    /// Set for desk tables: the asymptotic comparisons are not asserted there.
    pub diagnostic_only: bool,
}

impl InequalityReport {
    pub fn records_hold(&self) -> bool {
        self.records.iter().all(|r| r.holds)
    }

    pub fn thresholds_pass(&self) -> bool {
        self.thresholds.iter().all(ThresholdRecord::passes)
    }

    pub fn all_pass(&self) -> bool {
        self.records_hold() && self.thresholds_pass()
    }
}

/// Names of the comparisons in report order.
pub const RECORD_NAMES: [&str; 9] = [
    "cutoff_scale",
    "mollified_time_derivative",
    "transport_mollifier",
    "transport_total",
    "cutoff_product",
    "oscillation_low",
    "time_scale_cutoff",
    "time_scale_mollifier",
    "time_scale_oscillation",
];

/// Evaluates every scale comparison at level `q` (`1 ≤ q ≤ qmax − 2`) and
/// compares β with the six thresholds.
///
/// With `l_j = ln λ_{q+j}`, `d_j = ln δ_{q+j}`, `tm = ln τ_{m,q}`,
/// `tc = ln τ_{c,q+1}`, `tm1 = ln τ_{m,q+1}`, the records are
///
/// | name | lhs | rhs |
/// |---|---|---|
/// | cutoff_scale | λ_{q−1}λ_qδ_{q−1}^{1/2} | τ_{c,q+1}^{−1} |
/// | mollified_time_derivative | λ_{q−1}^{−1}τ_{m,q}^{−1}δ_{q−1}^{−1/2}δ_{q+1} | λ_{q+2}δ_{q+2} |
/// | transport_mollifier | λ_{q+1}^{−1}δ_{q+1}^{1/2}τ_{m,q}^{−1} | λ_{q+2}δ_{q+2} |
/// | transport_total | λ_{q+1}^{−1}δ_{q+1}^{1/2}(τ_{m,q}^{−1}+τ_{c,q+1}^{−1}) | λ_{q+2}δ_{q+2} |
/// | cutoff_product | λ_{q−1}²λ_q^{−1}λ_{q+1}τ_{c,q+1}δ_{q−1}^{1/2} | 1 |
/// | oscillation_low | λ_qδ_{q+1} | λ_{q+2}δ_{q+2} |
/// | time_scale_cutoff | τ_{c,q+1}^{−1} | τ_{m,q+1}^{−1} |
/// | time_scale_mollifier | τ_{m,q}^{−1} | τ_{m,q+1}^{−1} |
/// | time_scale_oscillation | λ_q²λ_{q+1}δ_{q+1}(λ_{q−1}δ_{q−1}^{1/2})^{−1} | τ_{m,q+1}^{−1} |
pub fn check_inequalities(
    table: &ParameterTable,
    config: &ParameterConfig,
    q: i64,
) -> Result<InequalityReport> {
    if q < 1 || q + 2 > table.qmax as i64 {
        return Err(Error::IndexOutOfTable {
            q,
            reason: "comparisons need 1 <= q <= qmax - 2",
        });
    }
    let l = |j: i64| table.ln_lambda(q + j);
    let d = |j: i64| table.ln_delta(q + j);
    let (lm1, l0, l1, l2) = (l(-1)?, l(0)?, l(1)?, l(2)?);
    let (dm1, d1, d2) = (d(-1)?, d(1)?, d(2)?);
    let tm = table.ln_tau_m(q)?;
    let tc = table.ln_tau_c(q + 1)?;
    let tm1 = table.ln_tau_m(q + 1)?;
    let target = l2 + d2;
    let mut records = Vec::with_capacity(RECORD_NAMES.len());
    let mut push = |name: &'static str, ln_lhs: f64, ln_rhs: f64| {
        let ratio = (ln_lhs - ln_rhs).exp();
        records.push(InequalityRecord {
            name,
            q,
            lhs: ln_lhs.exp(),
            rhs: ln_rhs.exp(),
            ratio,
            holds: ratio <= config.smallness,
        });
    };
    push("cutoff_scale", lm1 + l0 + 0.5 * dm1, -tc);
    push("mollified_time_derivative", -lm1 - tm - 0.5 * dm1 + d1, target);
    push("transport_mollifier", -l1 + 0.5 * d1 - tm, target);
    // ln(e^{-tm} + e^{-tc}) without overflow.
    let (hi, lo) = if -tm > -tc { (-tm, -tc) } else { (-tc, -tm) };
    let ln_sum = hi + (lo - hi).exp().ln_1p();
    push("transport_total", -l1 + 0.5 * d1 + ln_sum, target);
    push("cutoff_product", 2.0 * lm1 - l0 + l1 + tc + 0.5 * dm1, 0.0);
    push("oscillation_low", l0 + d1, target);
    push("time_scale_cutoff", -tc, -tm1);
    push("time_scale_mollifier", -tm, -tm1);
    push(
        "time_scale_oscillation",
        2.0 * l0 + l1 + d1 - lm1 - 0.5 * dm1,
        -tm1,
    );
    let thresholds = beta_thresholds(config.b)?
        .iter()
        .map(|&(name, value, bound)| ThresholdRecord {
            name,
            value,
            beta: config.beta,
            bound,
            margin: match bound {
                Bound::Upper => value - config.beta,
                Bound::Lower => config.beta - value,
            },
        })
        .collect();
    Ok(InequalityReport {
        q,
        mode: table.mode,
        records,
        thresholds,
        diagnostic_only: table.mode == Mode::Desk,
    })
}

/// CSV header of [`report_csv`].
pub const REPORT_HEADER: &str = "name,q,lhs,rhs,ratio,holds";

/// Serializes reports as `name,q,lhs,rhs,ratio,holds`. Threshold rows follow
/// the records of each report with `q` left empty, `lhs = β`, `rhs` the
/// threshold and `holds` the comparison outcome.
pub fn report_csv(reports: &[InequalityReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for rep in reports {
        for r in &rep.records {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{}\n",
                r.name, r.q, r.lhs, r.rhs, r.ratio, r.holds
            ));
        }
    }
    if let Some(rep) = reports.first() {
        for t in &rep.thresholds {
            let kind = match t.bound {
                Bound::Upper => "upper",
                Bound::Lower => "lower",
            };
            out.push_str(&format!(
                "{}_{},,{:e},{:e},{:e},{}\n",
                t.name,
                kind,
                t.beta,
                t.value,
                t.beta / t.value,
                t.passes()
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(a: f64, b: f64, beta: f64) -> ParameterConfig {
        ParameterConfig::new(a, b, beta, 0.28, 1.0, 0.1).unwrap()
    }

    #[test]
    fn rigor_lambda_examples() {
        let t = build_table(cfg(2.0, 1.2, 0.8), 3, Mode::Rigor, None).unwrap();
        assert_eq!(t.lambda[0], 170);
        assert_eq!(t.lambda[1], 255);
        let t = build_table(cfg(7.0, 1.3, 0.8), 2, Mode::Rigor, None).unwrap();
        assert_eq!(t.lambda[0], 85 * 7);
    }

    #[test]
    fn delta_matches_power() {
        let t = build_table(cfg(2.0, 1.2, 0.8), 3, Mode::Rigor, None).unwrap();
        assert!((t.delta[0] - 170f64.powf(-1.6)).abs() < 1e-18);
        assert!((t.delta[0] / 2.70e-4 - 1.0).abs() < 0.01);
        for (l, d) in t.lambda.iter().zip(&t.delta) {
            assert!((d * (*l as f64).powf(1.6) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn override_rejections() {
        let c = cfg(2.0, 1.2, 0.8);
        assert!(matches!(
            build_table(c, 2, Mode::Desk, Some(&[85, 170, 250])),
            Err(Error::NotMultipleOf85 { index: 2, value: 250 })
        ));
        assert!(build_table(c, 2, Mode::Desk, Some(&[170, 85, 255])).is_err());
        assert!(build_table(c, 2, Mode::Desk, Some(&[85, 170])).is_err());
        assert!(build_table(c, 1, Mode::Rigor, None).is_err());
        assert!(ParameterConfig::new(2.0, 1.0, 0.8, 0.1, 1.0, 0.1).is_err());
        assert!(ParameterConfig::new(2.0, 2.0, 0.8, 0.1, 1.0, 0.1).is_err());
    }

    #[test]
    fn desk_extension() {
        let t = build_table(cfg(2.0, 1.2, 0.8), 2, Mode::Desk, Some(&[85, 170, 255])).unwrap();
        assert_eq!(t.lambda_at(-1).unwrap(), 85);
        assert_eq!(t.lambda_at(-2).unwrap(), 85);
        assert!(t.lambda_at(3).is_err());
        assert!(t.tau_c[2].is_none());
        let want = 1.0 / (85.0 * 170.0 * 85f64.powf(-0.8));
        assert!((t.tau_m[1] / want - 1.0).abs() < 1e-13);
        let want = 1.0 / (170.0 * 255.0 * 170f64.powf(0.8) * 255f64.powf(-1.6));
        assert!((t.tau_c[1].unwrap() / want - 1.0).abs() < 1e-13);
    }

    #[test]
    fn thresholds_closed_form() {
        let t = beta_thresholds(1.02).unwrap();
        assert!((t[3].1 - 0.990196).abs() < 1e-6);
        assert!((t[4].1 - 0.74629).abs() < 1e-5);
        let t = beta_thresholds(1.0 + 1e-12).unwrap();
        for (name, v, bound) in t {
            let want = match name {
                "T5" => 0.75,
                "T6" => 0.5,
                _ => 1.0,
            };
            assert!((v - want).abs() < 1e-10, "{name}");
            assert_eq!(bound == Bound::Upper, want == 1.0);
        }
        assert!(beta_thresholds(2.0).is_err());
    }

    #[test]
    fn threshold_above_t4_fails() {
        let c = cfg(10.0, 1.5, 0.9);
        let t = build_table(c, 4, Mode::Rigor, None).unwrap();
        let rep = check_inequalities(&t, &c, 1).unwrap();
        let t4 = rep.thresholds.iter().find(|t| t.name == "T4").unwrap();
        assert!(!t4.passes());
        assert!(!rep.all_pass());
    }

    #[test]
    fn cutoff_product_matches_exponent_on_power_table() {
        // With λ_{q+j} = λ_q^{b^j} exactly the ratio is λ_q raised to
        // (2−β)/b − 1 − βb + (2β−1)b², whose leading term is −4(b−1)c.
        let (b, beta) = (1.05, 0.8);
        let c = cfg(1e3, b, beta);
        let l0: f64 = 1.0e6;
        let lambdas: Vec<u64> = (0..5)
            .map(|j| ((l0.powf(b.powi(j - 1)) / 85.0).round() * 85.0) as u64)
            .collect();
        let t = build_table(c, 4, Mode::Desk, Some(&lambdas)).unwrap();
        let rep = check_inequalities(&t, &c, 1).unwrap();
        let r = rep.records.iter().find(|r| r.name == "cutoff_product").unwrap();
        let lq = t.lambda[1] as f64;
        let (lm, lp, lpp) = (t.lambda[0] as f64, t.lambda[2] as f64, t.lambda[3] as f64);
        let direct = lm.powf(2.0 - beta) / lq * lp.powf(-beta) * lpp.powf(2.0 * beta - 1.0);
        assert!((r.ratio / direct - 1.0).abs() < 1e-12);
        let cc = 1.0 - (b - 1.0) / 2.0 - beta;
        let lead = -4.0 * (b - 1.0) * cc;
        let exact = (2.0 - beta) / b - 1.0 - beta * b + (2.0 * beta - 1.0) * b * b;
        assert!((exact - lead).abs() < 2.0 * (b - 1.0) * (b - 1.0));
        assert!((r.ratio.ln() / lq.ln() / exact - 1.0).abs() < 0.05);
    }

    #[test]
    fn transport_total_never_below_one() {
        for &a in &[1e2, 1e4, 1e8] {
            let c = cfg(a, 1.01, 0.8);
            let t = build_table(c, 6, Mode::Rigor, None).unwrap();
            for q in 1..=4 {
                let rep = check_inequalities(&t, &c, q).unwrap();
                let r = rep.records.iter().find(|r| r.name == "transport_total").unwrap();
                assert!(r.ratio >= 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn desk_reports_are_diagnostic() {
        let c = cfg(2.0, 1.2, 0.8);
        let t = build_table(c, 4, Mode::Desk, Some(&[85, 170, 255, 340, 425])).unwrap();
        let rep = check_inequalities(&t, &c, 1).unwrap();
        assert!(rep.diagnostic_only);
        assert!(check_inequalities(&t, &c, 3).is_err());
        assert!(check_inequalities(&t, &c, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let c = cfg(1e4, 1.01, 0.8);
        let t = build_table(c, 4, Mode::Rigor, None).unwrap();
        let rep = check_inequalities(&t, &c, 1).unwrap();
        let csv = report_csv(&[rep]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines.len(), 1 + 9 + 6);
        assert!(lines.iter().all(|l| l.split(',').count() == 6));
    }
}
