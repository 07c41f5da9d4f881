use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sqgforge::flowtime::*;
use sqgforge::spectral::{random_div_free, Grid, VectorField};

/// `v = (0, A cos x₁)`, for which `Λv = v` and the backward flow is
/// `Φ(t, x) = (x₁, x₂ − A cos x₁ · (t − t_i))`.
fn shear(grid: Grid, amp: f64) -> VectorField {
    let n = grid.n;
    let y: Vec<f64> = (0..n * n).map(|p| amp * grid.coord(p % n).cos()).collect();
    VectorField::from_physical(grid, n, &[vec![0.0; n * n], y], 1)
}

fn constant_series(v: &VectorField, time: TimeGrid) -> Series<2> {
    Series::new(time, vec![v.clone(); time.nt]).unwrap()
}

/// Time grid with `t_i = i·τ`, τ = 0.1, and a partition well inside it.
fn setup() -> (TimeGrid, TimePartition) {
    let time = TimeGrid::new(0.0, 0.01, 101).unwrap();
    let p = partition_with_tau(0.1, 0, (0.4, 0.6)).unwrap();
    (time, p)
}

#[test]
fn shear_flow_closed_form() {
    let grid = Grid::new(32).unwrap();
    let amp = 0.7;
    let (time, p) = setup();
    let v = constant_series(&shear(grid, amp), time);
    let i = p.indices[1];
    let flow = solve_flow(&v, i, &p, None).unwrap();
    let t_i = p.t_i(i);
    let n = grid.n;
    let mut worst = 0.0f64;
    let mut samples = 0;
    for j in 0..time.nt {
        let Some(d) = flow.sample(j) else { continue };
        samples += 1;
        let dt = time.t(j) - t_i;
        for pt in 0..n * n {
            let x1 = grid.coord(pt % n);
            worst = worst.max(d[0][pt].abs());
            worst = worst.max((d[1][pt] + amp * x1.cos() * dt).abs());
        }
    }
    assert!(samples >= 19, "{samples}");
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn anchor_is_identity() {
    let grid = Grid::new(16).unwrap();
    let (time, p) = setup();
    let v = random_div_free(grid, 3, &mut ChaCha8Rng::seed_from_u64(3));
    let flow = solve_flow(&constant_series(&v, time), p.indices[2], &p, None).unwrap();
    let j = flow.anchor_sample().unwrap();
    assert!(flow.sample(j).unwrap().iter().all(|c| c.iter().all(|&x| x == 0.0)));
}

#[test]
fn slab_coverage_required() {
    let grid = Grid::new(16).unwrap();
    let time = TimeGrid::new(0.0, 0.01, 30).unwrap();
    let p = partition_with_tau(0.1, 0, (0.4, 0.6)).unwrap();
    let v = constant_series(&shear(grid, 1.0), time);
    assert!(solve_flow(&v, p.indices[0], &p, None).is_err());
}

#[test]
fn trace_is_reversible() {
    let grid = Grid::new(32).unwrap();
    let time = TimeGrid::new(0.0, 0.01, 101).unwrap();
    let v = random_div_free(grid, 4, &mut ChaCha8Rng::seed_from_u64(5)).scale(0.5);
    let adv = Advector::new(&v, time);
    let steps = 20 * adv.required_substeps(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        use rand::Rng;
        let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let y = adv.trace(x, 0.3, 0.5, steps);
        let z = adv.trace(y, 0.5, 0.3, steps);
        let err = (z[0] - x[0]).hypot(z[1] - x[1]);
        assert!(err < 1e-8 * (0.2 / time.dt), "{err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn flows_preserve_volume_and_obey_transport_bound(seed in any::<u64>(), amp in 0.01f64..0.2) {
        // Deformation over one interval stays below about 0.3 here, the regime
        // of the scheme where τ_c‖Λv‖₁ is small.
        let grid = Grid::new(64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_div_free(grid, 4, &mut rng);
        let v = v.scale(amp / v.sup_norm());
        let (time, p) = setup();
        let series = constant_series(&v, time);
        let adv = Advector::from_series(&series);
        let i = p.indices[1];
        let flow = solve_flow(&series, i, &p, None).unwrap();
        let t_i = p.t_i(i);
        let mut c = 0.0f64;
        for j in 0..time.nt {
            if flow.sample(j).is_none() {
                continue;
            }
            let det = flow.det_deviation(j).unwrap();
            prop_assert!(det < 1e-6, "{det}");
            let dt = (time.t(j) - t_i).abs();
            if dt > 1e-12 {
                c = c.max(flow.deformation(j).unwrap() / (dt * adv.c1));
            }
        }
        prop_assert!(c <= 2.0, "{c}");
    }

    #[test]
    fn flow_time_derivative_bound(seed in any::<u64>()) {
        let grid = Grid::new(32).unwrap();
        let v = random_div_free(grid, 3, &mut ChaCha8Rng::seed_from_u64(seed));
        let (time, p) = setup();
        let series = constant_series(&v, time);
        let adv = Advector::from_series(&series);
        let i = p.indices[1];
        let flow = solve_flow(&series, i, &p, None).unwrap();
        for j in 1..time.nt - 1 {
            let (Some(a), Some(b)) = (flow.sample(j - 1), flow.sample(j + 1)) else { continue };
            if flow.sample(j).is_none() {
                continue;
            }
            let dphi = a
                .iter()
                .zip(b)
                .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (q - p).abs()))
                .fold(0.0, f64::max)
                / (2.0 * time.dt);
            let grad = 1.0 + flow.deformation(j).unwrap();
            prop_assert!(dphi <= adv.speed * grad * (1.0 + 1e-3), "{dphi} {}", adv.speed * grad);
        }
    }

    #[test]
    fn partition_squares_sum_to_one(tau in 1e-3f64..0.1, start in 0.3f64..1.0, len in 0.0f64..0.5, u in 0.0f64..1.0) {
        let p = partition_with_tau(tau, 0, (start, start + len)).unwrap();
        let t = start + u * len;
        prop_assert!((p.sum_sq(t) - 1.0).abs() < 1e-12);
        prop_assert_eq!(p.sum_sq(tau * 0.5), 0.0);
        for &i in &p.indices {
            let c = p.chi(i, t);
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn mollifier_weights_have_unit_mass(tau in 1e-3f64..1.0, ratio in 8.5f64..200.0) {
        let w = mollifier_weights(tau, tau / ratio).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        let n = w.len();
        for k in 0..n / 2 {
            prop_assert_eq!(w[k], w[n - 1 - k]);
        }
    }
}
