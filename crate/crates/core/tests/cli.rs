use proptest::prelude::*;
use sqgforge::cli_io::*;
use sqgforge::params::Mode;
use std::process::Command;

fn sqgforge() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sqgforge"))
}

fn code(args: &[&str]) -> (i32, String) {
    let out = sqgforge().args(args).env_remove("SQGFORGE_THREADS").output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn geometry_passes_and_corruption_fails() {
    let (c, text) = code(&["geometry"]);
    assert_eq!(c, 0);
    assert!(text.contains("242/425"));
    assert!(text.contains("4633/5929"));
    assert_eq!(code(&["geometry", "--corrupt"]).0, 1);
}

#[test]
fn params_exit_codes() {
    // β above T4(1.01) ≈ 0.99505 violates an upper threshold.
    let (c, text) = code(&["params", "--beta", "0.996", "--b", "1.01", "--a", "1e4"]);
    assert_eq!(c, 1);
    assert!(text.starts_with("name,q,lhs,rhs,ratio,holds"));
    assert_eq!(code(&["params", "--beta", "0.5", "--b", "1.01", "--a", "1e4"]).0, 2);
    assert_eq!(code(&["params", "--beta", "0.8", "--b", "2.5", "--a", "1e4"]).0, 2);
    assert_eq!(code(&["params", "--beta", "0.8"]).0, 2);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&["frobnicate"]).0, 2);
    assert_eq!(code(&["check-identities", "--n", "100"]).0, 2);
    assert_eq!(code(&[]).0, 2);
}

#[test]
fn check_identities_small() {
    let (c, text) = code(&["check-identities", "--n", "32", "--count", "5", "--threads", "1"]);
    assert_eq!(c, 0, "{text}");
    assert_eq!(text.lines().count(), 8);
    let env = sqgforge()
        .args(["check-identities", "--n", "32", "--count", "5"])
        .env("SQGFORGE_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(String::from_utf8_lossy(&env.stdout), text);
}

#[test]
fn run_rejects_bad_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cases = [
        ("bad85.cfg", "lambda = 85,170,250\n", 2),
        ("unknown.cfg", "colour = blue\n", 2),
        ("twice.cfg", "n = 64\nn = 64\n", 2),
        ("grid.cfg", "n = 100\n", 2),
    ];
    for (name, text, want) in cases {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        let (c, msg) = code(&["run", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(c, want, "{name}: {msg}");
    }
    let missing = dir.path().join("missing.cfg");
    assert_eq!(code(&["run", missing.to_str().unwrap()]).0, 3);
}

#[test]
fn report_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    std::fs::write(&csv, "q,lambda\n0,85\n1,170\n").unwrap();
    let (c, text) = code(&["report", csv.to_str().unwrap()]);
    assert_eq!(c, 0);
    assert!(text.starts_with("# q lambda"), "{text}");
    assert!(text.contains("1 170"));
    assert_eq!(code(&["report", dir.path().join("nope.csv").to_str().unwrap()]).0, 3);
}

#[test]
fn snapshot_file_layout() {
    let snap = Snapshot {
        n: 2,
        time: 1.5,
        comps: vec![vec![1.0, 2.0, 3.0, 4.0]],
    };
    let mut buf = Vec::new();
    snap.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"SQGF");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
    assert_eq!(f64::from_le_bytes(buf[16..24].try_into().unwrap()), 1.5);
    assert_eq!(f64::from_le_bytes(buf[48..56].try_into().unwrap()), 4.0);
    assert_eq!(buf.len(), 24 + 4 * 8);
    assert_eq!(Snapshot::read_from(&mut buf.as_slice()).unwrap(), snap);
    assert!(Snapshot::read_from(&mut &buf[..30]).is_err());
}

fn manifest_strategy() -> impl Strategy<Value = RunManifest> {
    (
        (4u32..11, any::<bool>(), 2.0f64..1e6, 1.0001f64..1.9, 0.751f64..0.999),
        (prop::option::of(prop::collection::vec(1u64..20, 3..6)), 2usize..6, 1e-3f64..1.0, any::<u64>()),
        (1e-9f64..1e-3, 0.5f64..2.0, 1usize..3, prop::option::of(1e-6f64..1e-2), 2usize..20),
        (prop::option::of(1usize..50), any::<bool>(), 0.01f64..0.5),
    )
        .prop_map(|((n, rigor, a, b, beta), (lam, qmax, zeta, seed), (amp, start, steps, dt, k), (sub, snaps, width))| {
            let mut m = RunManifest::default();
            m.n = 1 << n;
            m.mode = if rigor { Mode::Rigor } else { Mode::Desk };
            m.a = a;
            m.b = b;
            m.beta = beta;
            m.lambda = lam.map(|v| {
                let mut acc = 0;
                v.into_iter().map(|x| { acc += x; 85 * acc }).collect()
            });
            m.qmax = qmax;
            m.zeta = zeta;
            m.seed = seed;
            m.amplitude = amp;
            m.bump_start = start;
            m.bump_end = start + 0.003;
            m.steps = steps;
            m.dt = dt;
            m.samples_per_tau_c = k;
            m.substeps = sub;
            m.snapshots = snaps;
            m.width = width;
            m
        })
}

proptest! {
    #[test]
    fn manifest_round_trip(m in manifest_strategy()) {
        let text = m.to_text();
        let back = RunManifest::parse(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_text(), text);
        prop_assert_eq!(back.a.to_bits(), m.a.to_bits());
    }

    #[test]
    fn snapshot_round_trip(n in 1usize..6, time in any::<f64>(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let comps: Vec<Vec<f64>> = (0..3).map(|_| (0..n * n).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        let snap = Snapshot { n, time: if time.is_nan() { 0.0 } else { time }, comps };
        let mut buf = Vec::new();
        snap.write_to(&mut buf).unwrap();
        prop_assert_eq!(Snapshot::read_from(&mut buf.as_slice()).unwrap(), snap);
    }
}

#[test]
fn bundled_desk_config_is_the_default() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.cfg")).unwrap();
    assert_eq!(RunManifest::parse(&text).unwrap(), RunManifest::default());
}
