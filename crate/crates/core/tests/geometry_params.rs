use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use proptest::prelude::*;
use sqgforge::geometry::{audit, build_direction_sets, min_pair_norm, solvers, sym_norm, GammaSolver};
use sqgforge::params::{beta_thresholds, build_table, check_inequalities, Mode, ParameterConfig};

fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

// Integer representatives 85·k of the two base families.
const K85: [[i64; 2]; 3] = [[85, 0], [36, 77], [36, -77]];
const M85: [[i64; 2]; 3] = [[13, 84], [68, 51], [68, -51]];

fn family_points(base: &[[i64; 2]; 3], perp: bool) -> Vec<[i64; 2]> {
    let rot = |p: [i64; 2]| if perp { [-p[1], p[0]] } else { p };
    base.iter()
        .flat_map(|&p| [rot(p), rot([-p[0], -p[1]])])
        .collect()
}

fn all_families() -> Vec<Vec<[i64; 2]>> {
    vec![
        family_points(&K85, false),
        family_points(&K85, true),
        family_points(&M85, false),
        family_points(&M85, true),
    ]
}

#[test]
fn library_sets_match_integer_points() {
    let sets = build_direction_sets();
    for (set, want) in sets.iter().zip(all_families()) {
        let mut got: Vec<[i64; 2]> = set.members().iter().map(|m| m.scaled85().unwrap()).collect();
        let mut want = want;
        got.sort();
        want.sort();
        assert_eq!(got, want, "{}", set.tag);
    }
}

#[test]
fn decompositions_in_rational_arithmetic() {
    let cases = [
        (K85, [q(4633, 5929), q(7225, 11858), q(7225, 11858)]),
        (M85, [q(2023, 4455), q(625, 891), q(38, 45)]),
    ];
    for (base, coeffs) in cases {
        let mut acc = [BigRational::zero(), BigRational::zero(), BigRational::zero()];
        for (p, c) in base.iter().zip(&coeffs) {
            let (x, y) = (q(p[0], 85), q(p[1], 85));
            acc[0] += c * &x * &x;
            acc[1] += c * &x * &y;
            acc[2] += c * &y * &y;
        }
        assert_eq!(acc, [BigRational::one(), BigRational::zero(), BigRational::one()]);
    }
    let s = solvers();
    assert_eq!(s[0].c_identity, [q(4633, 5929), q(7225, 11858), q(7225, 11858)]);
    assert_eq!(s[2].c_identity, [q(2023, 4455), q(625, 891), q(38, 45)]);
}

#[test]
fn minimal_pair_norm_by_integer_search() {
    let mut best = i64::MAX;
    for fam in all_families() {
        for a in &fam {
            for b in &fam {
                if a[0] == -b[0] && a[1] == -b[1] {
                    continue;
                }
                let s = [a[0] + b[0], a[1] + b[1]];
                best = best.min(s[0] * s[0] + s[1] * s[1]);
            }
        }
    }
    // 85² · 242/425
    assert_eq!(best, 4114);
    let lib = build_direction_sets().iter().map(min_pair_norm).min().unwrap();
    assert_eq!(lib, q(242, 425));
}

#[test]
fn sets_disjoint_and_unit() {
    let fams = all_families();
    for (i, a) in fams.iter().enumerate() {
        for p in a {
            assert_eq!(p[0] * p[0] + p[1] * p[1], 85 * 85);
            assert!(a.contains(&[-p[0], -p[1]]));
            for b in &fams[i + 1..] {
                assert!(!b.contains(p));
            }
        }
    }
    assert!(audit(&build_direction_sets()).passed);
}

#[test]
fn radius_invariant_under_perp() {
    let s = solvers();
    assert_eq!(s[0].eps_star, s[1].eps_star);
    assert_eq!(s[2].eps_star, s[3].eps_star);
}

fn admissible(solver: &GammaSolver, p: [f64; 3], s: f64) -> [f64; 3] {
    let n = sym_norm(p).max(1e-300);
    let r = p.map(|x| x / n * solver.eps_star_f64() * s);
    [1.0 - r[0], -r[1], 1.0 - r[2]]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn gamma_reconstructs(fam in 0usize..4, p in prop::array::uniform3(-1.0f64..1.0), s in 0.0f64..0.999) {
        let solver = &solvers()[fam];
        let r = admissible(solver, p, s);
        let g = solver.gamma(r).unwrap();
        let back = solver.reconstruct(g);
        let err = sym_norm([back[0] - r[0], back[1] - r[1], back[2] - r[2]]);
        prop_assert!(err < 1e-13 * sym_norm(r), "{err}");
    }

    #[test]
    fn coefficients_are_linear(fam in 0usize..4, r in prop::array::uniform3(-2.0f64..2.0), alpha in 0.01f64..100.0) {
        let s = &solvers()[fam];
        let c = s.coefficients(r);
        let ca = s.coefficients(r.map(|x| alpha * x));
        let scale = c.iter().fold(0.0f64, |m, x| m.max(x.abs())) * alpha;
        for j in 0..3 {
            prop_assert!((ca[j] - alpha * c[j]).abs() <= 1e-13 * scale.max(1e-300));
        }
    }
}

fn config(a: f64, b: f64, beta: f64) -> ParameterConfig {
    ParameterConfig::new(a, b, beta, 0.28, 1.0, 0.1).unwrap()
}

proptest! {
    #[test]
    fn rigor_tables_grow(a in 1e3f64..1e5, b in 1.001f64..1.05, beta in 0.76f64..0.99) {
        let t = build_table(config(a, b, beta), 4, Mode::Rigor, None).unwrap();
        for q in 0..4 {
            let (l0, l1) = (t.lambda[q] as f64, t.lambda[q + 1] as f64);
            prop_assert!(l1 >= l0.powf(b) / 2.0);
            prop_assert!(l1 >= l0 + 85.0);
        }
        for q in 0..=4 {
            let x = t.delta[q] * (t.lambda[q] as f64).powf(2.0 * beta);
            prop_assert!((x - 1.0).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn cutoff_product_decreases_in_a(a in 1e3f64..1e5, factor in 2.0f64..10.0) {
        let ratio = |a: f64| {
            let c = config(a, 1.01, 0.8);
            let t = build_table(c, 4, Mode::Rigor, None).unwrap();
            let r = check_inequalities(&t, &c, 1).unwrap();
            r.records.iter().find(|r| r.name == "cutoff_product").unwrap().ratio
        };
        prop_assert!(ratio(a * factor) < ratio(a));
    }

    #[test]
    fn reports_are_pure(a in 1e2f64..1e4, q in 1i64..3) {
        let c = config(a, 1.01, 0.8);
        let t = build_table(c, 4, Mode::Rigor, None).unwrap();
        let x = check_inequalities(&t, &c, q).unwrap();
        let y = check_inequalities(&t, &c, q).unwrap();
        prop_assert_eq!(format!("{x:?}"), format!("{y:?}"));
    }
}

#[test]
fn small_base_can_stall() {
    // 85⌈2^{1.2}⌉ = 85⌈2^{1.44}⌉ = 255
    let t = build_table(config(2.0, 1.2, 0.8), 2, Mode::Rigor, None).unwrap();
    assert_eq!(t.lambda, vec![170, 255, 255]);
}

#[test]
fn thresholds_at_reference_rate() {
    // Closed forms evaluated by hand at b = 1.01.
    let b: f64 = 1.01;
    let want = [
        (b.powi(3) + b * b + b - 1.0) / (2.0 * b.powi(3) + b * b - 1.0),
        (b * b + 1.0) / (2.0 * b * b),
        (b * b + b + 2.0) / (2.0 * b * b + b + 1.0),
        (b + 1.0) / (2.0 * b),
        (b * b + b + 1.0) / (2.0 * b * b + b + 1.0),
        1.0 / (b + 1.0),
    ];
    for ((_, v, _), w) in beta_thresholds(b).unwrap().iter().zip(want) {
        assert!((v - w).abs() < 1e-15);
    }
    assert!((want[3] - 0.995049504950495).abs() < 1e-12);
}
