use proptest::prelude::*;

use tcm_core::autodiff::{Array, Tape};
use tcm_core::config::TrainConfig;
use tcm_core::metrics::{w2_exact, w2_sliced};
use tcm_core::schedule::delta_t;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Array::matrix(rows, cols, v).unwrap())
}

/// `sum(silu(x W) * c)` on a fresh tape; returns the gradient w.r.t. `W`.
fn grad_w(x: &Array, w: &Array, c: &Array, scale: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let wv = tape.param(w.clone());
    let xv = tape.constant(x.clone());
    let cv = tape.constant(c.clone());
    let h = tape.matmul(xv, wv).unwrap();
    let h = tape.silu(h);
    let h = tape.mul(h, cv).unwrap();
    let s = tape.sum(h);
    let root = tape.scale(s, scale);
    tape.backward(root).unwrap().wrt(wv).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear_in_the_output_weights(
        x in matrix(4, 3), w in matrix(3, 2), c1 in matrix(4, 2), c2 in matrix(4, 2),
        a in -3.0f64..3.0, b in -3.0f64..3.0,
    ) {
        let mixed = Array::matrix(
            4, 2,
            c1.data().iter().zip(c2.data()).map(|(p, q)| a * p + b * q).collect(),
        ).unwrap();
        let g = grad_w(&x, &w, &mixed, 1.0);
        let g1 = grad_w(&x, &w, &c1, a);
        let g2 = grad_w(&x, &w, &c2, b);
        for k in 0..g.len() {
            prop_assert!((g[k] - g1[k] - g2[k]).abs() <= 1e-12 * (1.0 + g[k].abs()));
        }
    }

    #[test]
    fn exact_w2_is_a_metric_on_point_clouds(
        a in matrix(12, 2), b in matrix(12, 2), c in matrix(12, 2),
    ) {
        let ab = w2_exact(&a, &b).unwrap();
        prop_assert!(w2_exact(&a, &a).unwrap() < 1e-12);
        prop_assert!((ab - w2_exact(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= w2_exact(&a, &c).unwrap() + w2_exact(&c, &b).unwrap() + 1e-12);
    }

    #[test]
    fn w2_ignores_point_order_and_measures_shifts(
        a in matrix(16, 2), dx in -1.0f64..1.0, dy in -1.0f64..1.0, seed in 0u64..1000,
    ) {
        let mut idx: Vec<usize> = (0..16).collect();
        let k = (seed % 16) as usize;
        idx.rotate_left(k);
        idx.swap(0, 15);
        let shuffled = a.gather_rows(&idx);
        prop_assert!(w2_exact(&a, &shuffled).unwrap() < 1e-12);
        prop_assert!(w2_sliced(&a, &shuffled).unwrap() < 1e-12);
        let moved = Array::matrix(
            16, 2,
            a.data().chunks(2).flat_map(|p| [p[0] + dx, p[1] + dy]).collect(),
        ).unwrap();
        // A rigid translation is optimally matched to itself.
        let shift = (dx * dx + dy * dy).sqrt();
        prop_assert!((w2_exact(&a, &moved).unwrap() - shift).abs() < 1e-9);
    }

    #[test]
    fn delta_t_stays_inside_the_horizon(t in 0.004f64..80.0, r in 0.0f64..0.9999) {
        let dt = delta_t(t, r, 0.002);
        prop_assert!(dt > 0.0);
        prop_assert!(t - dt >= 0.002);
    }

    #[test]
    fn config_round_trips_through_text(
        w_b in 0.0f64..2.0, rho in 0.05f64..0.9, t_prime in 0.1f64..10.0,
        seed in 0u64..1_000_000, iters in 1u64..100_000,
    ) {
        let cfg = TrainConfig::default()
            .with_override("loss.w_b", &w_b.to_string()).unwrap()
            .with_override("loss.rho", &rho.to_string()).unwrap()
            .with_override("time.t_prime", &t_prime.to_string()).unwrap()
            .with_override("seed", &seed.to_string()).unwrap()
            .with_override("stage1.iters", &iters.to_string()).unwrap();
        let back = TrainConfig::parse(&cfg.serialize()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
