//! Exact rational direction sets and the coefficient functions γ_k.
//!
//! Each family is three unit vectors with denominator 85 together with their
//! negatives. For a symmetric matrix R near the identity the coefficients
//! `c_j = γ_j²` solve the linear system `Σ_j c_j (k_j⊥ ⊗ k_j⊥) = R`; the base
//! matrix of that system is inverted once in rational arithmetic and applied
//! per point in floating point.

use crate::{Error, Result};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::fmt::Write as _;

pub type Q = BigRational;

fn q(n: i64, d: i64) -> Q {
    Q::new(BigInt::from(n), BigInt::from(d))
}

/// A unit vector with exact rational coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RationalVec {
    pub x: Q,
    pub y: Q,
}

impl RationalVec {
    pub fn new(x: Q, y: Q) -> Self {
        Self { x, y }
    }

    /// `k⊥ = (−k_2, k_1)`.
    pub fn perp(&self) -> Self {
        Self::new(-self.y.clone(), self.x.clone())
    }

    pub fn neg(&self) -> Self {
        Self::new(-self.x.clone(), -self.y.clone())
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::new(&self.x + &o.x, &self.y + &o.y)
    }

    pub fn norm2(&self) -> Q {
        &self.x * &self.x + &self.y * &self.y
    }

    pub fn to_f64(&self) -> [f64; 2] {
        [self.x.to_f64().unwrap(), self.y.to_f64().unwrap()]
    }

    /// `85·(x, y)` as integers, if integral.
    pub fn scaled85(&self) -> Option<[i64; 2]> {
        let s = Q::from_integer(BigInt::from(85));
        let (a, b) = (&self.x * &s, &self.y * &s);
        if a.is_integer() && b.is_integer() {
            Some([a.to_integer().to_i64()?, b.to_integer().to_i64()?])
        } else {
            None
        }
    }

    /// Integer lattice point `λ·k`; `λ` must be a multiple of 85.
    pub fn lattice(&self, lambda: u64) -> [i64; 2] {
        let s = self.scaled85().expect("direction with denominator 85");
        let m = (lambda / 85) as i64;
        [s[0] * m, s[1] * m]
    }

    /// Flattened `(xx, xy, yy)` entries of `v ⊗ v`.
    pub fn outer(&self) -> [Q; 3] {
        [
            &self.x * &self.x,
            &self.x * &self.y,
            &self.y * &self.y,
        ]
    }
}

fn fmt_q(v: &Q) -> String {
    if v.is_integer() {
        v.to_integer().to_string()
    } else {
        format!("{}/{}", v.numer(), v.denom())
    }
}

impl std::fmt::Display for RationalVec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", fmt_q(&self.x), fmt_q(&self.y))
    }
}

/// Family tag `(i, j)`: `i` is the parity of the iteration index, `j` the
/// parity of the interval index. `j = 1` families are the perpendiculars of
/// the `j = 0` ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SetTag {
    pub i: u8,
    pub j: u8,
}

impl SetTag {
    pub fn for_step(q: i64, interval: i64) -> Self {
        Self {
            i: q.rem_euclid(2) as u8,
            j: interval.rem_euclid(2) as u8,
        }
    }
}

impl std::fmt::Display for SetTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Omega^{}_{}", self.i, self.j)
    }
}

/// Three representatives `k_1, k_2, k_3`; the set is `{±k_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    pub tag: SetTag,
    pub base: [RationalVec; 3],
}

impl DirectionSet {
    /// The six members, representatives first, then their negatives.
    pub fn members(&self) -> Vec<RationalVec> {
        let mut v: Vec<_> = self.base.to_vec();
        v.extend(self.base.iter().map(RationalVec::neg));
        v
    }

    /// The rank-one tensor attached to a member: `k⊥ ⊗ k⊥`.
    pub fn tensor(k: &RationalVec) -> [Q; 3] {
        k.perp().outer()
    }
}

/// The four families `Ω_0^0, Ω_1^0, Ω_0^1, Ω_1^1` in that order.
pub fn build_direction_sets() -> [DirectionSet; 4] {
    let k = [
        RationalVec::new(q(1, 1), q(0, 1)),
        RationalVec::new(q(36, 85), q(77, 85)),
        RationalVec::new(q(36, 85), q(-77, 85)),
    ];
    let m = [
        RationalVec::new(q(13, 85), q(84, 85)),
        RationalVec::new(q(4, 5), q(3, 5)),
        RationalVec::new(q(4, 5), q(-3, 5)),
    ];
    let perp = |s: &[RationalVec; 3]| [s[0].perp(), s[1].perp(), s[2].perp()];
    [
        DirectionSet { tag: SetTag { i: 0, j: 0 }, base: k.clone() },
        DirectionSet { tag: SetTag { i: 0, j: 1 }, base: perp(&k) },
        DirectionSet { tag: SetTag { i: 1, j: 0 }, base: m.clone() },
        DirectionSet { tag: SetTag { i: 1, j: 1 }, base: perp(&m) },
    ]
}

/// The family with the given tag.
pub fn direction_set(tag: SetTag) -> DirectionSet {
    build_direction_sets()
        .into_iter()
        .find(|s| s.tag == tag)
        .expect("tag in {0,1}^2")
}

/// Minimum of `|k + k'|²` over members with `k ≠ −k'` (pairs `k = k'` included).
pub fn min_pair_norm(set: &DirectionSet) -> Q {
    let mem = set.members();
    let mut best: Option<Q> = None;
    for a in &mem {
        for b in &mem {
            if *a == b.neg() {
                continue;
            }
            let n = a.add(b).norm2();
            if best.as_ref().is_none_or(|m| n < *m) {
                best = Some(n);
            }
        }
    }
    best.expect("nonempty set")
}

type Mat3 = [[Q; 3]; 3];

fn inverse3(a: &Mat3) -> Option<Mat3> {
    let m = |i: usize, j: usize| &a[i][j];
    let cof = |i: usize, j: usize| {
        let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
        let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
        m(r0, c0) * m(r1, c1) - m(r0, c1) * m(r1, c0)
    };
    let det = m(0, 0) * cof(0, 0) + m(0, 1) * cof(0, 1) + m(0, 2) * cof(0, 2);
    if det.is_zero() {
        return None;
    }
    let mut inv: Mat3 = Default::default();
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            *e = cof(j, i) / &det;
        }
    }
    Some(inv)
}

fn matvec(a: &Mat3, v: &[Q; 3]) -> [Q; 3] {
    std::array::from_fn(|i| &a[i][0] * &v[0] + &a[i][1] * &v[1] + &a[i][2] * &v[2])
}

/// Solver for `c(R)` on one family.
#[derive(Debug, Clone)]
pub struct GammaSolver {
    pub tag: SetTag,
    pub set: DirectionSet,
    /// Column `j` holds the flattened `k_j⊥ ⊗ k_j⊥`.
    pub base: Mat3,
    pub inverse: Mat3,
    /// `c(Id)`, exact.
    pub c_identity: [Q; 3],
    /// Certified admissible radius (operator norm).
    pub eps_star: Q,
    inv_f64: [[f64; 3]; 3],
    /// Flattened `k_j⊥ ⊗ k_j⊥` in floating point.
    pub tensors_f64: [[f64; 3]; 3],
}

impl GammaSolver {
    pub fn new(set: &DirectionSet) -> Self {
        let cols: Vec<[Q; 3]> = set.base.iter().map(DirectionSet::tensor).collect();
        let base: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| cols[j][i].clone()));
        let inverse = inverse3(&base).expect("base tensors are independent");
        let id = [Q::one(), Q::zero(), Q::one()];
        let c_identity = matvec(&inverse, &id);
        let eps_star = (0..3)
            .map(|j| {
                let rowsum = inverse[j].iter().fold(Q::zero(), |s, e| s + e.abs());
                &c_identity[j] / rowsum
            })
            .min()
            .expect("three rows");
        let inv_f64 = std::array::from_fn(|i| std::array::from_fn(|j| inverse[i][j].to_f64().unwrap()));
        let tensors_f64 =
            std::array::from_fn(|j| std::array::from_fn(|e| cols[j][e].to_f64().unwrap()));
        Self {
            tag: set.tag,
            set: set.clone(),
            base,
            inverse,
            c_identity,
            eps_star,
            inv_f64,
            tensors_f64,
        }
    }

    /// `c = A^{-1}(R_xx, R_xy, R_yy)` without positivity checks.
    #[inline]
    pub fn coefficients(&self, r: [f64; 3]) -> [f64; 3] {
        let m = &self.inv_f64;
        std::array::from_fn(|i| m[i][0] * r[0] + m[i][1] * r[1] + m[i][2] * r[2])
    }

    /// `γ_j = sqrt(c_j(R))` for the three representatives; `γ_{−k} = γ_k`.
    pub fn gamma(&self, r: [f64; 3]) -> Result<[f64; 3]> {
        let c = self.coefficients(r);
        if c.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::OutOfBall { c });
        }
        Ok(c.map(f64::sqrt))
    }

    /// `½ Σ_{k ∈ set} γ_k² (k⊥ ⊗ k⊥) = Σ_j γ_j² (k_j⊥ ⊗ k_j⊥)`, flattened.
    pub fn reconstruct(&self, gamma: [f64; 3]) -> [f64; 3] {
        let t = &self.tensors_f64;
        std::array::from_fn(|e| (0..3).map(|j| gamma[j] * gamma[j] * t[j][e]).sum())
    }

    pub fn eps_star_f64(&self) -> f64 {
        self.eps_star.to_f64().unwrap()
    }
}

/// Certified radius of one family.
pub fn admissible_radius(set: &DirectionSet) -> Q {
    GammaSolver::new(set).eps_star
}

/// Solvers for the four families, in [`build_direction_sets`] order.
pub fn solvers() -> [GammaSolver; 4] {
    build_direction_sets().map(|s| GammaSolver::new(&s))
}

/// `min_j ε*_j` over the four families.
pub fn scheme_eps() -> Q {
    solvers()
        .into_iter()
        .map(|s| s.eps_star)
        .min()
        .expect("four families")
}

/// Operator norm of a symmetric matrix given as `(xx, xy, yy)`.
#[inline]
pub fn sym_norm(r: [f64; 3]) -> f64 {
    let h = 0.5 * (r[0] + r[2]);
    let d = 0.5 * (r[0] - r[2]);
    h.abs() + d.hypot(r[1])
}

/// Result of the exact checks on the direction sets.
#[derive(Debug, Clone)]
pub struct GeometryAudit {
    pub text: String,
    pub passed: bool,
    pub min_pair: Q,
}

fn decomposition_check(base: &[RationalVec; 3], a: &[Q; 3]) -> bool {
    let mut acc = [Q::zero(), Q::zero(), Q::zero()];
    for (k, c) in base.iter().zip(a) {
        for (s, t) in acc.iter_mut().zip(k.outer()) {
            *s += c * t;
        }
    }
    acc == [Q::one(), Q::zero(), Q::one()]
}

/// Runs every exact check on `sets` and renders the audit text.
pub fn audit(sets: &[DirectionSet]) -> GeometryAudit {
    let mut text = String::new();
    let mut ok = true;
    let mut check = |text: &mut String, name: &str, pass: bool| {
        ok &= pass;
        let _ = writeln!(text, "[{}] {name}", if pass { "pass" } else { "FAIL" });
    };
    let mut count = 0;
    for s in sets {
        let _ = writeln!(text, "{}", s.tag);
        for m in s.members() {
            count += 1;
            let _ = writeln!(text, "  {m}");
        }
    }
    let _ = writeln!(text, "direction vectors: {count}");
    let ka = [q(4633, 5929), q(7225, 11858), q(7225, 11858)];
    let ma = [q(2023, 4455), q(625, 891), q(38, 45)];
    let k_dec = sets.iter().find(|s| s.tag == SetTag { i: 0, j: 0 });
    let m_dec = sets.iter().find(|s| s.tag == SetTag { i: 1, j: 0 });
    check(
        &mut text,
        "Id = 4633/5929 k1(x)k1 + 7225/11858 k2(x)k2 + 7225/11858 k3(x)k3",
        k_dec.is_some_and(|s| decomposition_check(&s.base, &ka)),
    );
    check(
        &mut text,
        "Id = 2023/4455 m1(x)m1 + 625/891 m2(x)m2 + 38/45 m3(x)m3",
        m_dec.is_some_and(|s| decomposition_check(&s.base, &ma)),
    );
    let all: Vec<RationalVec> = sets.iter().flat_map(DirectionSet::members).collect();
    let mut distinct = true;
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            distinct &= a != b;
        }
    }
    check(&mut text, "sets pairwise disjoint, members distinct", distinct);
    let closed = sets.iter().all(|s| {
        let m = s.members();
        m.iter().all(|k| m.contains(&k.neg()))
    });
    check(&mut text, "each set closed under negation", closed);
    let unit = all.iter().all(|k| k.norm2().is_one());
    check(&mut text, "|k| = 1 exactly", unit);
    let integral = all.iter().all(|k| k.scaled85().is_some());
    check(&mut text, "85 k in Z^2", integral);
    let quarter = q(1, 4);
    let min_pair = sets
        .iter()
        .map(min_pair_norm)
        .min()
        .unwrap_or_else(Q::zero);
    for s in sets {
        let m = min_pair_norm(s);
        let _ = writeln!(text, "{}: min |k+k'|^2 = {}", s.tag, fmt_q(&m));
    }
    check(&mut text, "min |k+k'|^2 > 1/4", min_pair > quarter);
    for s in sets {
        let g = GammaSolver::new(s);
        let positive = g.c_identity.iter().all(Q::is_positive) && g.eps_star.is_positive();
        let _ = writeln!(
            text,
            "{}: c(Id) = ({}, {}, {}), eps* = {}",
            s.tag,
            fmt_q(&g.c_identity[0]),
            fmt_q(&g.c_identity[1]),
            fmt_q(&g.c_identity[2]),
            fmt_q(&g.eps_star)
        );
        ok &= positive;
    }
    let _ = writeln!(text, "min |k+k'|² = {}", fmt_q(&min_pair));
    GeometryAudit {
        text,
        passed: ok,
        min_pair,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_coefficients() {
        let s = solvers();
        let k = [q(4633, 5929), q(7225, 11858), q(7225, 11858)];
        let m = [q(2023, 4455), q(625, 891), q(38, 45)];
        assert_eq!(s[0].c_identity, k);
        assert_eq!(s[1].c_identity, k);
        assert_eq!(s[2].c_identity, m);
        assert_eq!(s[3].c_identity, m);
    }

    #[test]
    fn radii() {
        let s = solvers();
        assert_eq!(s[0].eps_star, q(36, 113));
        assert_eq!(s[0].eps_star, s[1].eps_star);
        assert_eq!(s[2].eps_star, q(7, 25));
        assert_eq!(s[2].eps_star, s[3].eps_star);
        assert_eq!(scheme_eps(), q(7, 25));
    }

    #[test]
    fn pair_norms() {
        let sets = build_direction_sets();
        assert_eq!(min_pair_norm(&sets[2]), q(242, 425));
        let k = &sets[0].base;
        assert_eq!(k[1].add(&k[2]), RationalVec::new(q(72, 85), q(0, 1)));
        assert_eq!(k[0].add(&k[0]).norm2(), q(4, 1));
        let global = sets.iter().map(min_pair_norm).min().unwrap();
        assert_eq!(global, q(242, 425));
    }

    #[test]
    fn audit_passes_and_detects_corruption() {
        let sets = build_direction_sets();
        let a = audit(&sets);
        assert!(a.passed, "{}", a.text);
        assert!(a.text.contains("min |k+k'|² = 242/425"));
        assert!(a.text.contains("direction vectors: 24"));
        let mut bad = sets.clone();
        bad[3].base[0] = bad[0].base[1].clone();
        assert!(!audit(&bad).passed);
    }

    #[test]
    fn gamma_at_identity_and_out_of_ball() {
        let s = &solvers()[2];
        let g = s.gamma([1.0, 0.0, 1.0]).unwrap();
        let want = [2023.0 / 4455.0, 625.0 / 891.0, 38.0 / 45.0];
        for j in 0..3 {
            assert!((g[j] * g[j] - want[j]).abs() < 1e-15);
        }
        assert!(matches!(s.gamma([-1.0, 0.0, -1.0]), Err(Error::OutOfBall { .. })));
    }

    #[test]
    fn lattice_points() {
        let sets = build_direction_sets();
        assert_eq!(sets[0].base[1].lattice(170), [72, 154]);
        assert_eq!(sets[3].base[1].lattice(85), [-51, 68]);
    }
}
