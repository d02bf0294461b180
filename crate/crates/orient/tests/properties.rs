//! Property tests for the crate's algebraic invariants.

use std::f64::consts::PI;

use proptest::prelude::*;

use orient::data::{map_point, Homography};
use orient::descriptor::{lookup, Descriptor, DescriptorTable, KeypointRef, DESCRIPTOR_DIM, TABLE_STEPS};
use orient::eval::{average_precision, pr_curve, Match, MatchSet};
use orient::ghh::{as_maxout, as_prelu, as_relu, ghh_forward, GhhConfig};
use orient::net::prediction_from_heads;
use orient::tensor::Tensor;
use orient::util::wrap_to_pi;

proptest! {
    #[test]
    fn wrap_lands_in_half_open_interval(theta in -1e4f64..1e4) {
        let w = wrap_to_pi(theta);
        prop_assert!(w > -PI && w <= PI);
        // wrapping is idempotent
        prop_assert_eq!(wrap_to_pi(w), w);
    }

    #[test]
    fn predicted_angle_is_scale_invariant(
        v1 in -5.0f64..5.0,
        v2 in -5.0f64..5.0,
        c in 1e-3f64..1e3,
    ) {
        prop_assume!(v1 != 0.0 || v2 != 0.0);
        let a = prediction_from_heads((v1, v2));
        let b = prediction_from_heads((c * v1, c * v2));
        prop_assert!(a.theta > -PI && a.theta <= PI);
        prop_assert!((a.theta - b.theta).abs() < 1e-9);
    }

    #[test]
    fn homography_round_trips_points(
        angle in -1.2f64..1.2,
        scale in 0.5f64..2.0,
        tx in -30.0f64..30.0,
        ty in -30.0f64..30.0,
        px in -100.0f64..100.0,
        py in -100.0f64..100.0,
    ) {
        let h = Homography::similarity((40.0, 60.0), angle, scale, tx, ty);
        let inv = h.inverse().unwrap();
        let (qx, qy) = map_point(&h, px, py).unwrap();
        let (bx, by) = map_point(&inv, qx, qy).unwrap();
        prop_assert!((bx - px).abs() < 1e-9 && (by - py).abs() < 1e-9);
        // a similarity's local scale is its scale everywhere
        prop_assert!((h.local_scale(px, py) - scale).abs() < 1e-9);
    }

    #[test]
    fn ghh_is_positively_homogeneous(
        y in prop::collection::vec(-10.0f64..10.0, 24),
        c in 1e-2f64..1e2,
    ) {
        let cfg = GhhConfig::new(2, 3).unwrap();
        let t = Tensor::from_vec(&[4, 2, 3], y.clone()).unwrap();
        let (o1, _) = ghh_forward(&t, cfg).unwrap();
        let mut scaled = t.clone();
        scaled.scale(c);
        let (o2, _) = ghh_forward(&scaled, cfg).unwrap();
        for (a, b) in o1.data().iter().zip(o2.data().iter()) {
            let expect = c * a;
            // the signed sum accumulates a few ulps of rounding
            let err = (b - expect).abs() / expect.abs().max(1e-9);
            prop_assert!(err < 1e-10, "o(c y) = {b}, c o(y) = {expect}");
        }
    }

    #[test]
    fn ghh_wirings_reproduce_their_activations(
        x in -20.0f64..20.0,
        alpha in 0.0f64..1.0,
        xs in prop::collection::vec(-20.0f64..20.0, 4),
    ) {
        prop_assert_eq!(as_relu().eval(&[x]), x.max(0.0));
        let expect = x.max(0.0) - alpha * (-x).max(0.0);
        prop_assert!((as_prelu(alpha).eval(&[x]) - expect).abs() < 1e-12);
        let m = as_maxout(4).unwrap();
        let top = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(m.eval(&xs), top);
    }

    #[test]
    fn pr_curve_recall_is_monotone_and_bounded(
        flags in prop::collection::vec(any::<bool>(), 1..60),
        dists in prop::collection::vec(0.0f64..10.0, 60),
        positives in 1usize..40,
    ) {
        let matches: Vec<Match> = flags
            .iter()
            .enumerate()
            .map(|(i, &ok)| Match {
                query: i,
                matched: i,
                distance: dists[i],
                is_correct: ok,
            })
            .collect();
        let correct = matches.iter().filter(|m| m.is_correct).count();
        prop_assume!(correct <= positives);
        let set = MatchSet::from_matches(matches);
        let curve = pr_curve(&set, positives).unwrap();
        let mut prev = 0.0;
        for &(r, p) in &curve.points {
            prop_assert!(r >= prev - 1e-15);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((0.0..=1.0).contains(&r));
            prev = r;
        }
        let ap = average_precision(&curve);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        if let Some(&(last_r, _)) = curve.points.last() {
            let expect = correct as f64 / positives as f64;
            prop_assert!((last_r - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn lookup_stays_between_bracketing_entries(
        seed_vals in prop::collection::vec(0.0f64..1.0, 8),
        theta in 0.0f64..6.25,
    ) {
        // random unit-norm tables with a few active components
        let entries: Vec<Descriptor> = (0..TABLE_STEPS)
            .map(|k| {
                let mut v = [0.0; DESCRIPTOR_DIM];
                for (i, s) in seed_vals.iter().enumerate() {
                    let phase = (k as f64) * 0.1 + i as f64;
                    v[i * 13] = (s + phase.sin().abs()).max(1e-3);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                Descriptor::from_slice(&v).unwrap()
            })
            .collect();
        let table = DescriptorTable::from_entries(
            KeypointRef { id: 0, x: 0.0, y: 0.0, sigma: 1.0 },
            entries,
        )
        .unwrap();
        let out = lookup(&table, theta);
        // the renormalized interpolation stays near both bracketing entries
        let k = ((theta / (2.0 * PI)) * TABLE_STEPS as f64).floor() as usize % TABLE_STEPS;
        let a = table.entry(k);
        let b = table.entry((k + 1) % TABLE_STEPS);
        let gap = a.distance(b);
        prop_assert!(out.distance(a) <= gap + 0.05);
        prop_assert!(out.distance(b) <= gap + 0.05);
        // unit norm or zero
        let n = out.norm();
        prop_assert!((n - 1.0).abs() < 1e-9 || n == 0.0);
    }

    #[test]
    fn adam_zero_gradient_fixpoint(w0 in -5.0f64..5.0, steps in 1usize..30) {
        use orient::tensor::{adam_step, AdamState, ParamSet};
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(&[1], vec![w0]).unwrap()).unwrap();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params, 1e-3).unwrap();
        for _ in 0..steps {
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        prop_assert_eq!(params.get("w").unwrap().data()[0], w0);
    }
}
