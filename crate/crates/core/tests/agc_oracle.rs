mod common;

use adaptvig_core::agc::{
    agc_aggregate, gate_map, scaffold_shifts, shift_count, AgcConfig, DistanceKind, GateKind, GatingParams,
};
use adaptvig_core::graph::{build_gated_graph, build_knn_graph, build_scaffold_graph};
use adaptvig_core::tensor::{Shape, Tensor4};
use common::{agc_loop, loop_offsets, Mix};

fn random_input(rng: &mut Mix, shape: Shape, scale: f64) -> Tensor4 {
    let data = (0..shape.numel()).map(|_| rng.range(-scale, scale)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matches_loop_oracle_on_both_distances() {
    let mut rng = Mix(0x5eed);
    for trial in 0..60 {
        let shape = Shape::new(1 + rng.below(2), 1 + rng.below(4), 3 + rng.below(8), 3 + rng.below(8));
        let x = random_input(&mut rng, shape, 2.0);
        let k = 1 + rng.below(shape.h.min(shape.w) - 1);
        let gate = if trial % 2 == 0 { GateKind::ExpDecay } else { GateKind::Sigmoid };
        let distance = if trial % 3 == 0 { DistanceKind::L2 } else { DistanceKind::L1 };
        let t = rng.range(-3.0, 3.0);
        let cfg = AgcConfig { k, gate, distance };
        let got = agc_aggregate(&x, &cfg, &GatingParams::new(t)).unwrap();
        let want = agc_loop(&x, k, gate, distance, t, 1e-6);
        let err = max_diff(got.data(), &want);
        assert!(err <= 1e-12, "trial {trial} {shape} k={k}: {err:e}");
    }
}

#[test]
fn aggregate_is_never_negative() {
    // The accumulator starts at zero, so the channelwise max is at least 0.
    let mut rng = Mix(9);
    let x = random_input(&mut rng, Shape::new(2, 3, 6, 5), 1.0);
    let y = agc_aggregate(&x, &AgcConfig::new(2), &GatingParams::default()).unwrap();
    assert!(y.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn tiny_temperature_closes_every_gate() {
    // With t_eff = 1e-6 any non-trivial distance gates the long-range message
    // to 0, leaving only the two local shifts.
    let mut rng = Mix(4);
    let x = random_input(&mut rng, Shape::new(1, 2, 8, 8), 1.0);
    let got = agc_aggregate(&x, &AgcConfig::new(1), &GatingParams::new(0.0)).unwrap();
    let s = x.shape();
    for i in 0..s.h {
        for j in 0..s.w {
            for c in 0..s.c {
                let v = x.get(0, c, i, j);
                let down = x.get(0, c, (i + 1) % s.h, j) - v;
                let right = x.get(0, c, i, (j + 1) % s.w) - v;
                assert_eq!(got.get(0, c, i, j), down.max(right).max(0.0));
            }
        }
    }
}

#[test]
fn gate_closed_forms() {
    let cases = [(0.0, 1.0, 1.0), (1.0, 1.0, 0.367_879_441_171_442_3), (2.0, 0.5, 0.018_315_638_888_734_18)];
    for (d, t, want) in cases {
        let g = gate_map(&Tensor4::scalar(d), &GatingParams::with_eps(t, 1e-300), GateKind::ExpDecay).unwrap();
        assert!((g.data()[0] - want).abs() <= 1e-12, "d={d} t={t}: {}", g.data()[0]);
        // The default eps only shifts the temperature by 1e-6.
        let g = gate_map(&Tensor4::scalar(d), &GatingParams::new(t), GateKind::ExpDecay).unwrap();
        assert!((g.data()[0] - want).abs() <= 1e-5);
    }
    let g = gate_map(&Tensor4::scalar(0.0), &GatingParams::new(0.3), GateKind::Sigmoid).unwrap();
    assert_eq!(g.data()[0], 1.0);
}

#[test]
fn gate_rejects_negative_distances() {
    assert!(gate_map(&Tensor4::scalar(-1e-9), &GatingParams::default(), GateKind::ExpDecay).is_err());
}

#[test]
fn shift_counts_follow_the_loop_bounds() {
    for (side, want) in [(7, 6), (8, 8), (14, 8), (16, 10), (28, 10), (56, 12), (32, 12), (64, 14)] {
        assert_eq!(loop_offsets(side, side, 1).len(), want);
        assert_eq!(shift_count(side, side), want);
        assert_eq!(scaffold_shifts(side, side, 1).unwrap().len(), want);
    }
    for (h, w) in [(3, 9), (12, 5), (2, 17)] {
        assert_eq!(shift_count(h, w), loop_offsets(h, w, 1).len());
    }
}

#[test]
fn local_distance_bounds_are_enforced() {
    assert!(scaffold_shifts(8, 8, 0).is_err());
    assert!(scaffold_shifts(8, 5, 5).is_err());
    assert!(scaffold_shifts(8, 5, 4).is_ok());
}

#[test]
fn knn_evaluations_grow_linearly_per_node() {
    for side in [7usize, 8, 14, 16] {
        let n = side * side;
        let x = Tensor4::from_fn(Shape::new(1, 2, side, side), |_, c, i, j| (c * 31 + i * 7 + j * 3) as f64 % 5.0).unwrap();
        let knn = build_knn_graph(&x, 4).unwrap();
        assert_eq!(knn.distance_evaluations, n * (n - 1));
        assert!(knn.adjacency.is_symmetric());
    }
}

#[test]
fn constant_inputs_leave_nothing_to_aggregate() {
    for value in [0.0, -1.5, 3.25] {
        let x = Tensor4::full(Shape::new(1, 3, 8, 6), value).unwrap();
        for gate in [GateKind::ExpDecay, GateKind::Sigmoid] {
            let cfg = AgcConfig { k: 2, gate, distance: DistanceKind::L1 };
            let y = agc_aggregate(&x, &cfg, &GatingParams::new(0.01)).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
            let scaffold = build_scaffold_graph(8, 6, 2).unwrap();
            for tau in [1e-12, 0.25, 0.5, 1.0] {
                assert_eq!(build_gated_graph(&x, &cfg, &GatingParams::new(0.01), tau).unwrap(), scaffold);
            }
        }
    }
}
