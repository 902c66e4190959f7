//! Randomized invariants.

use proptest::prelude::*;

use svfm::data::Rng;
use svfm::dynamics::{euler_step, FnField};
use svfm::metrics::{endpoint_consistency, energy_distance_points, straightness_ratio};
use svfm::nn::{FlowModel, NetConfig};
use svfm::oracle::v_functional;
use svfm::tensor::{jvp, Graph, Tensor};

fn points(max: usize, dim: usize) -> impl Strategy<Value = Tensor> {
    (1..=max).prop_flat_map(move |n| {
        prop::collection::vec(-5.0f64..5.0, n * dim).prop_map(move |d| Tensor::matrix(n, dim, d).unwrap())
    })
}

/// Pairs on a quarter-unit lattice, so shifts by integers and doubling are
/// exact in floating point.
fn lattice_pairs() -> impl Strategy<Value = (Tensor, Tensor)> {
    (2usize..=12).prop_flat_map(|n| {
        (
            prop::collection::vec(-12i32..12, n * 2),
            prop::collection::vec(-12i32..12, n * 2),
        )
            .prop_map(move |(a, b)| {
                let q = |v: Vec<i32>| Tensor::matrix(n, 2, v.into_iter().map(|k| k as f64 / 4.0).collect()).unwrap();
                (q(a), q(b))
            })
    })
}

const DYADIC_GRID: [f64; 3] = [0.25, 0.5, 0.75];
// Bin edges at multiples of this width never coincide with lattice offsets
// in the range used.
const H: f64 = 0.3137;

fn jvp_of_net(seed: u64, x: &Tensor, t: &Tensor, u: &Tensor) -> Vec<f64> {
    let cfg = NetConfig {
        hidden: vec![12, 12],
        time_embed_dim: 4,
        time_max_scale: 10.0,
        zero_init_output: false,
        ..NetConfig::default()
    };
    let model = FlowModel::new(2, &cfg, false, &mut Rng::new(seed, 1)).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let tv = g.constant(t.clone()).unwrap();
    let uv = g.constant(u.clone()).unwrap();
    let zero = g.constant(Tensor::zeros(t.rows(), 1)).unwrap();
    let (_, dv) = jvp(&mut g, &[xv, tv], &[uv, zero], |tr, ins| model.field.forward(tr, ins[0], ins[1], None)).unwrap();
    g.value(dv).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn jvp_is_linear_in_the_tangent(
        seed in 0u64..1000,
        x in prop::collection::vec(-2.0f64..2.0, 6),
        t in prop::collection::vec(0.0f64..1.0, 3),
        u in prop::collection::vec(-1.0f64..1.0, 6),
        w in prop::collection::vec(-1.0f64..1.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let x = Tensor::matrix(3, 2, x).unwrap();
        let t = Tensor::matrix(3, 1, t).unwrap();
        let mix: Vec<f64> = u.iter().zip(&w).map(|(p, q)| a * p + b * q).collect();
        let ju = jvp_of_net(seed, &x, &t, &Tensor::matrix(3, 2, u).unwrap());
        let jw = jvp_of_net(seed, &x, &t, &Tensor::matrix(3, 2, w).unwrap());
        let jm = jvp_of_net(seed, &x, &t, &Tensor::matrix(3, 2, mix).unwrap());
        for i in 0..6 {
            let want = a * ju[i] + b * jw[i];
            prop_assert!((jm[i] - want).abs() <= 1e-10 * (1.0 + want.abs()), "{} vs {}", jm[i], want);
        }
    }

    #[test]
    fn v_functional_translation_invariant((x0, x1) in lattice_pairs(), sx in -4i32..4, sy in -4i32..4) {
        let shift = |m: &Tensor| {
            let mut m = m.clone();
            for r in 0..m.rows() {
                m.row_mut(r)[0] += sx as f64;
                m.row_mut(r)[1] += sy as f64;
            }
            m
        };
        let base = v_functional(&x0, &x1, &DYADIC_GRID, H).unwrap();
        let moved = v_functional(&shift(&x0), &shift(&x1), &DYADIC_GRID, H).unwrap();
        prop_assert!((base - moved).abs() <= 1e-12 * (1.0 + base), "{base} vs {moved}");
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn v_functional_scales_quadratically((x0, x1) in lattice_pairs()) {
        let base = v_functional(&x0, &x1, &DYADIC_GRID, H).unwrap();
        let twice = v_functional(&x0.map(|v| 2.0 * v), &x1.map(|v| 2.0 * v), &DYADIC_GRID, 2.0 * H).unwrap();
        prop_assert!((twice - 4.0 * base).abs() <= 1e-12 * (1.0 + twice), "{twice} vs 4·{base}");
    }

    #[test]
    fn energy_distance_symmetric_and_nonnegative(a in points(12, 2), b in points(12, 2)) {
        let ab = energy_distance_points(&a, &b).unwrap();
        let ba = energy_distance_points(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(energy_distance_points(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn energy_distance_1d_symmetric(a in points(40, 1), b in points(40, 1)) {
        let ab = energy_distance_points(&a, &b).unwrap();
        let ba = energy_distance_points(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        prop_assert!(ab >= 0.0);
        prop_assert!(energy_distance_points(&a, &a).unwrap() <= 1e-12);
    }

    #[test]
    fn straightness_rigid_motion_invariant(
        path in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 3..12),
        angle in 0.0f64..std::f64::consts::TAU,
        dx in -10.0f64..10.0,
        dy in -10.0f64..10.0,
    ) {
        let (s, c) = angle.sin_cos();
        let moved: Vec<Vec<f64>> = path.iter().map(|p| vec![c * p[0] - s * p[1] + dx, s * p[0] + c * p[1] + dy]).collect();
        let (r0, d0) = straightness_ratio(&path);
        let (r1, d1) = straightness_ratio(&moved);
        prop_assume!(!d0 && !d1);
        prop_assert!((r0 - r1).abs() <= 1e-10 * (1.0 + r0), "{r0} vs {r1}");
    }

    #[test]
    fn consistency_matrix_symmetric(
        x in prop::collection::vec(-2.0f64..2.0, 8),
        nfes in prop::collection::btree_set(1usize..20, 2..5),
        k in 0.1f64..2.0,
    ) {
        let field = FnField::new(2, move |p: &[f64], t: f64| vec![k * p[1] * t, -k * p[0] + t]);
        let x0 = Tensor::matrix(4, 2, x).unwrap();
        let list: Vec<usize> = nfes.into_iter().collect();
        let report = endpoint_consistency(&field, &x0, None, &list, 1.5).unwrap();
        let m = &report.discrepancy;
        for i in 0..list.len() {
            prop_assert_eq!(m[i][i], 0.0);
            for j in 0..list.len() {
                prop_assert_eq!(m[i][j], m[j][i]);
                prop_assert!(m[i][j] >= 0.0);
            }
        }
    }

    #[test]
    fn euler_half_steps_compose_for_constant_fields(
        x in prop::collection::vec(-4.0f64..4.0, 4),
        v in prop::collection::vec(-4.0f64..4.0, 4),
    ) {
        let x = Tensor::matrix(2, 2, x).unwrap();
        let v = Tensor::matrix(2, 2, v).unwrap();
        let one = euler_step(&x, &v, 0.0, 1.0).unwrap();
        let two = euler_step(&euler_step(&x, &v, 0.0, 0.5).unwrap(), &v, 0.5, 1.0).unwrap();
        for (a, b) in one.data().iter().zip(two.data()) {
            prop_assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }
    }
}
