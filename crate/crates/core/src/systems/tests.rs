use super::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Central difference of `map` along the direction `dir` at `x`.
fn directional<const N: usize, const M: usize>(
    map: impl Fn(&[f64; N]) -> [f64; M],
    x: &[f64; N],
    dir: &[f64],
) -> Vec<f64> {
    let h = 1e-6;
    let shift = |s: f64| {
        let mut y = *x;
        for (yi, d) in y.iter_mut().zip(dir) {
            *yi += s * d;
        }
        map(&y)
    };
    let (p, m) = (shift(h), shift(-h));
    p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

#[test]
fn simple_right_hand_sides() {
    assert_eq!(SystemKind::MassSpring.rhs(&[1.0, 0.0]).unwrap(), vec![0.0, -1.0]);
    let [dv, dw] = fhn_core_rhs(1.0, 0.0, 0.0);
    assert_eq!(dv, 1.0);
    assert!((dw - 0.08 * 0.7).abs() < 1e-16);
    let flat = SystemKind::Kdv.rhs(&[0.7; KDV_SITES]).unwrap();
    assert!(flat.iter().all(|v| *v == 0.0));
    assert!(SystemKind::MassSpring.rhs(&[1.0]).is_err());
}

#[test]
fn coincident_bodies_are_rejected() {
    let u = [0.3, 0.2, 0.3, 0.2, 0.0, 0.0, 0.0, 0.0];
    assert!(matches!(SystemKind::TwoBody.rhs(&u), Err(Error::Collision { .. })));
}

#[test]
fn unperturbed_two_body_orbit_is_circular() {
    let r = 0.8;
    let u0 = two_body_initial(r, 0.3, 1.0, 0.0, 1.0, [0.0, 0.0]);
    let period = 2.0 * PI * r * 2.0 * r.sqrt();
    let grid = integrators::uniform_grid(0.0, period / 50.0, 50);
    let mut f = |u: &[f64]| SystemKind::TwoBody.rhs(u);
    let tr = integrators::integrate(&mut f, &u0, &grid, &IntegratorSpec::dopri5_generation()).unwrap();
    for i in 0..tr.len() {
        let s = tr.state(i);
        assert!((s[0].hypot(s[1]) - r).abs() < 1e-8, "step {i}");
    }
    assert!(close(tr.last(), &u0, 1e-7));
}

#[test]
fn fhn_circuit_identities() {
    let (current, v, w) = (0.9, -1.2, 0.4);
    let u = fhn_to_circuit(current, v, w);
    assert!((u[3] - (v + 0.7 - 0.8 * w)).abs() < 1e-15);
    let catalog = SystemKind::FitzHughNagumo.catalog();
    let meta = SeriesMeta::new();
    assert!((catalog.entries[0].eval(&u, &meta) - current).abs() < 1e-15);
    assert!((catalog.entries[1].eval(&u, &meta) - FHN_SOURCE).abs() < 1e-15);
}

#[test]
fn fhn_circuit_field_is_the_pushed_forward_core_field() {
    let (current, v, w) = (0.8, 0.5, 1.1);
    let core = fhn_core_rhs(current, v, w);
    let expect = directional(|s: &[f64; 2]| fhn_to_circuit(current, s[0], s[1]), &[v, w], &core);
    let got = SystemKind::FitzHughNagumo.rhs(&fhn_to_circuit(current, v, w)).unwrap();
    assert!(close(&got, &expect, 1e-8), "{got:?} vs {expect:?}");
}

#[test]
fn pendulum_transforms_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (l1, l2) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
        let s = [
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ];
        let u = polar_to_cartesian(l1, l2, &s);
        let (m1, m2, back) = cartesian_to_polar(&u);
        assert!((m1 - l1).abs() < 1e-12 && (m2 - l2).abs() < 1e-12);
        assert!(close(&back, &s, 1e-12), "{back:?} vs {s:?}");
        let mut meta = SeriesMeta::new();
        meta.insert("l1".into(), l1);
        meta.insert("l2".into(), l2);
        for inv in &SystemKind::DoublePendulum.catalog().entries[1..] {
            assert!(inv.eval(&u, &meta).abs() < 1e-12, "{}", inv.name);
        }
    }
}

#[test]
fn pendulum_cartesian_field_is_the_pushed_forward_polar_field() {
    let (l1, l2) = (0.95, 1.05);
    let s = [0.3, -0.2, 0.05, -0.07];
    let polar = pendulum_polar_rhs(l1, l2, &s);
    let expect = directional(|p: &[f64; 4]| polar_to_cartesian(l1, l2, p), &s, &polar);
    let got = SystemKind::DoublePendulum.rhs(&polar_to_cartesian(l1, l2, &s)).unwrap();
    assert!(close(&got, &expect, 1e-7), "{got:?} vs {expect:?}");
}

#[test]
fn pendulum_energy_is_conserved_by_the_polar_flow() {
    let (l1, l2) = (1.0, 0.9);
    let s = [0.4, -0.3, 0.1, 0.0];
    let polar = pendulum_polar_rhs(l1, l2, &s);
    let h = directional(
        |p: &[f64; 4]| [pendulum_energy(&polar_to_cartesian(l1, l2, p))],
        &s,
        &polar,
    );
    assert!(h[0].abs() < 1e-7, "{h:?}");
}

#[test]
fn kdv_field_conserves_mass_and_energy() {
    let u = kdv_two_solitons(1.2, 2.0, 0.7, 6.5);
    let f = kdv_rhs(&u);
    assert!(f.iter().sum::<f64>().abs() < 1e-10);
    let arr: [f64; KDV_SITES] = u.clone().try_into().unwrap();
    let d = directional(|x: &[f64; KDV_SITES]| [kdv_energy(x)], &arr, &f);
    let scale = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(d[0].abs() < 1e-6 * scale, "{d:?}");
}

#[test]
fn soliton_has_the_requested_height() {
    let u = kdv_two_solitons(1.0, 4.0, 0.5, 0.0);
    // x = 4.0 is a grid point; the far soliton adds 0.5 sech^2(2) plus images.
    let far: f64 = (-3..=3)
        .map(|j| 0.5 / (0.5 * (4.0 + 10.0 * j as f64)).cosh().powi(2))
        .sum();
    assert!((u[20] - (2.0 + far + tails(1.0, 4.0))).abs() < 1e-12);

    fn tails(k: f64, x: f64) -> f64 {
        [-3, -2, -1, 1, 2, 3]
            .iter()
            .map(|j| 2.0 * k * k / (k * (x - 4.0 + 10.0 * *j as f64)).cosh().powi(2))
            .sum()
    }
}

#[test]
fn sampling_respects_the_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (s, m) = SystemKind::DoublePendulum.sample_initial(&mut rng);
        assert!((0.9..1.1).contains(&m["l1"]) && (0.9..1.1).contains(&m["l2"]));
        assert!(s[..2].iter().all(|t| t.abs() <= 0.5) && s[2..].iter().all(|w| w.abs() <= 0.1));
        let (s, m) = SystemKind::Kdv.sample_initial(&mut rng);
        let gap = (m["d1"] - m["d2"]).abs();
        assert!(gap.min(KDV_LENGTH - gap) >= 2.0 - 1e-12);
        assert_eq!(s.len(), KDV_SITES);
        let (s, m) = SystemKind::FitzHughNagumo.sample_initial(&mut rng);
        assert!((0.7..1.1).contains(&m["current"]) && (-1.5..1.5).contains(&s[0]) && (0.0..2.0).contains(&s[1]));
    }
}

#[test]
fn generation_is_deterministic_and_round_trips() {
    let spec = SystemSpec {
        system: SystemKind::FitzHughNagumo,
        dt: 0.1,
        steps: 20,
        n_series: 3,
        seed: 9,
    };
    let a = generate(&spec, Split::Train).unwrap();
    let b = generate(&spec, Split::Train).unwrap();
    assert_eq!(a, b);
    let test = generate(&spec, Split::Test).unwrap();
    assert_ne!(a.data, test.data);
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let back = TrajectorySet::load(dir.path()).unwrap();
    assert_eq!(a, back);
    let norm = a.normalization.as_ref().unwrap();
    assert_eq!(norm.mean.len(), 4);
    let z: Vec<f64> = a.data.chunks(4).flat_map(|u| norm.apply(u)).collect();
    let mean0 = z.iter().step_by(4).sum::<f64>() / (z.len() / 4) as f64;
    assert!(mean0.abs() < 1e-12);
}

#[test]
fn truncated_data_file_is_rejected() {
    let spec = SystemSpec {
        system: SystemKind::MassSpring,
        dt: 0.1,
        steps: 5,
        n_series: 2,
        seed: 0,
    };
    let set = generate(&spec, Split::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    set.save(dir.path()).unwrap();
    let path = dir.path().join("data.f64");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(TrajectorySet::load(dir.path()), Err(Error::Dataset(_))));
}

#[test]
fn polynomial_invariants_match_the_catalog() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in SystemKind::ALL {
        let catalog = kind.catalog();
        for _ in 0..5 {
            let (native, meta) = kind.sample_initial(&mut rng);
            let u = kind.simulate(&meta, &native, 0.01, 1, &IntegratorSpec::Rk4).unwrap();
            let (u0, u1) = u.split_at(kind.n_state());
            for inv in &catalog.entries {
                let Ok(p) = kind.polynomial_invariant(inv.name) else {
                    continue;
                };
                // Equal up to a constant offset.
                let d0 = p.eval(u0) - inv.eval(u0, &meta);
                let d1 = p.eval(u1) - inv.eval(u1, &meta);
                assert!((d0 - d1).abs() < 1e-12 * (1.0 + d0.abs()), "{kind} {}", inv.name);
            }
        }
    }
    assert!(SystemKind::TwoBody.polynomial_invariant("H").is_err());
}
