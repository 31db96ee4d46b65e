use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::Var;
use crate::flowops::FlowChain;
use crate::networks::{Arch, NetworkHandle};
use crate::videodata::{synth_sequence, FrameSequence, SceneSpec};

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn svd_nuclear(x: &[f64], rows: usize, cols: usize) -> f64 {
    nalgebra::DMatrix::from_row_slice(rows, cols, x)
        .singular_values()
        .iter()
        .sum()
}

#[test]
fn gram_examples() {
    assert!(gram_matrix(&Tensor::<f64>::zeros(&[2, 3, 3]))
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert_eq!(
        gram_matrix(&Tensor::<f64>::full(&[1, 4, 5], 1.0))
            .unwrap()
            .data(),
        &[1.0]
    );
    let f = rand_t(&[3, 4, 4], 1);
    let g = gram_matrix(&f).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for p in 0..16 {
                s += f.data()[i * 16 + p] * f.data()[j * 16 + p];
            }
            assert!((g.data()[i * 3 + j] - s / 48.0).abs() <= 1e-10);
        }
    }
}

#[test]
fn perceptual_examples() {
    let feats = NetworkHandle::<f64>::features(1);
    let style = StyleTarget::standard(&feats, rand_t(&[3, 16, 16], 2)).unwrap();
    let x = rand_t(&[3, 8, 8], 3);
    let w = LossWeights {
        style: 0.0,
        ..LossWeights::paper()
    };
    let b = perceptual_loss(&x, &x, &style, &w, &feats).unwrap();
    assert_eq!(b.content, 0.0);
    let flat = Tensor::full(&[3, 8, 8], 0.3);
    assert_eq!(
        perceptual_loss(&flat, &x, &style, &w, &feats).unwrap().tv,
        0.0
    );
    assert!(matches!(
        perceptual_loss(&rand_t(&[3, 4, 4], 1), &x, &style, &w, &feats),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn tv_matches_pairwise_oracle() {
    let feats = NetworkHandle::<f64>::features(1);
    let style = StyleTarget::standard(&feats, rand_t(&[3, 8, 8], 2)).unwrap();
    let img = rand_t(&[3, 4, 4], 7);
    let (mut sh, mut sv) = (0.0, 0.0);
    for c in 0..3 {
        for y in 0..4 {
            for xx in 0..4 {
                let at = |y: usize, x: usize| x_at(&img, c, y, x);
                if xx < 3 {
                    sh += (at(y, xx + 1) - at(y, xx)).powi(2);
                }
                if y < 3 {
                    sv += (at(y + 1, xx) - at(y, xx)).powi(2);
                }
            }
        }
    }
    let oracle = sh / 36.0 + sv / 36.0;
    let got = perceptual_loss(&img, &img, &style, &LossWeights::paper(), &feats)
        .unwrap()
        .tv;
    assert!((got - oracle).abs() <= 1e-10);
}

fn x_at(t: &Tensor<f64>, c: usize, y: usize, x: usize) -> f64 {
    let (_, h, w) = t.chw();
    t.data()[(c * h + y) * w + x]
}

#[test]
fn vanilla_kd_examples() {
    let a = rand_t(&[3, 5, 5], 1);
    assert_eq!(vanilla_kd_loss(&a, &a).unwrap(), 0.0);
    let b = a.map(|v| v + 0.25);
    assert!((vanilla_kd_loss(&a, &b).unwrap() - 0.0625).abs() < 1e-15);
    let c = rand_t(&[3, 5, 5], 2);
    let oracle: f64 = a
        .data()
        .iter()
        .zip(c.data())
        .map(|(p, q)| (p - q).powi(2))
        .sum::<f64>()
        / 75.0;
    assert!((vanilla_kd_loss(&a, &c).unwrap() - oracle).abs() <= 1e-12);
}

#[test]
fn residual_examples() {
    let base = rand_t(&[3, 4, 4], 1);
    let delta = rand_t(&[3, 4, 4], 2).map(|v| v - 0.5);
    let target = ResidualTarget {
        delta_t: delta.clone(),
        baseline: base.clone(),
    };
    assert_eq!(residual_loss(&base.add(&delta), &target).unwrap(), 0.0);
    let s = rand_t(&[3, 4, 4], 3);
    let zero = ResidualTarget {
        delta_t: Tensor::zeros(&[3, 4, 4]),
        baseline: base.clone(),
    };
    let plain = s.sub(&base).sum_sq() / 48.0;
    assert!((residual_loss(&s, &zero).unwrap() - plain).abs() < 1e-15);
    let a = residual_loss(&s, &target).unwrap();
    let b = residual_loss_direct(&s, &target).unwrap();
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn temporal_examples() {
    let a = rand_t(&[3, 6, 6], 1);
    let zero = FlowField::zeros(6, 6);
    assert_eq!(
        temporal_loss(&a, &a, &zero, &OcclusionMask::ones(6, 6)).unwrap(),
        0.0
    );
    let b = rand_t(&[3, 6, 6], 2);
    assert_eq!(
        temporal_loss(&a, &b, &zero, &OcclusionMask::zeros(6, 6)).unwrap(),
        0.0
    );
    // Shift by one column: the oracle indexes prev directly.
    let flow = FlowField::constant(6, 6, 1.0, 0.0);
    let mut mask = OcclusionMask::ones(6, 6);
    mask.set(2, 2, false);
    let mut s = 0.0;
    for c in 0..3 {
        for y in 0..6 {
            for x in 0..5 {
                if (y, x) != (2, 2) {
                    s += (x_at(&a, c, y, x) - x_at(&b, c, y, x + 1)).powi(2);
                }
            }
        }
    }
    assert!((temporal_loss(&a, &b, &flow, &mask).unwrap() - s / 108.0).abs() <= 1e-12);
}

#[test]
fn nuclear_examples() {
    let mut id = vec![0.0f64; 16];
    for i in 0..4 {
        id[i * 5] = 1.0;
    }
    assert!((nuclear_norm(&id, 4, 4).unwrap() - 4.0f64).abs() < 1e-12);
    assert_eq!(matrix_rank(&id, 4, 4, EPS_RANK), 4);
    let mut d = vec![0.0f64; 15];
    d[0] = 3.0;
    d[6] = 2.0;
    assert!((nuclear_norm(&d, 3, 5).unwrap() - 5.0f64).abs() < 1e-12);
    assert_eq!(matrix_rank(&[0.0; 12], 3, 4, EPS_RANK), 0);
    let u = rand_t(&[5], 1);
    let v = rand_t(&[7], 2);
    let outer: Vec<f64> = u
        .data()
        .iter()
        .flat_map(|a| v.data().iter().map(move |b| a * b))
        .collect();
    assert_eq!(matrix_rank(&outer, 5, 7, EPS_RANK), 1);
    assert!(matches!(
        nuclear_norm(&[f64::NAN, 1.0], 1, 2),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn nuclear_matches_svd_on_random_matrices() {
    let x = Tensor::<f64>::uniform(&[5 * 64], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let got = nuclear_norm(x.data(), 5, 64).unwrap();
    let oracle = svd_nuclear(x.data(), 5, 64);
    assert!((got - oracle).abs() <= 1e-8 * oracle);
}

#[test]
fn nuclear_gradient_matches_finite_differences() {
    let rows: Vec<Tensor<f64>> = (0..5)
        .map(|s| rand_t(&[1, 8, 8], 20 + s).map(|v| v - 0.5))
        .collect();
    let grad = {
        let mut g = Graph::new();
        let vars: Vec<Var> = rows.iter().map(|r| g.param(r.clone())).collect();
        let n = g.nuclear_norm(&vars);
        let gr = g.backward(n);
        vars.iter()
            .map(|v| gr.get(*v).unwrap().clone())
            .collect::<Vec<_>>()
    };
    let flat = |rs: &[Tensor<f64>]| {
        rs.iter()
            .flat_map(|r| r.data().to_vec())
            .collect::<Vec<_>>()
    };
    let h = 1e-6;
    for r in 0..5 {
        for i in (0..64).step_by(5) {
            let mut p = rows.clone();
            p[r].data_mut()[i] += h;
            let mut m = rows.clone();
            m[r].data_mut()[i] -= h;
            let numeric = (nuclear_norm(&flat(&p), 5, 64).unwrap()
                - nuclear_norm(&flat(&m), 5, 64).unwrap())
                / (2.0 * h);
            let a = grad[r].data()[i];
            assert!(
                (a - numeric).abs() <= 1e-4 * numeric.abs().max(1e-3),
                "{a} vs {numeric}"
            );
        }
    }
}

fn chain(seq: &FrameSequence<f64>) -> FlowChain<'_, f64> {
    FlowChain {
        backward: &seq.flows,
        forward: &seq.forward_flows,
    }
}

#[test]
fn static_rank_matrix_is_rank_one() {
    let seq: FrameSequence<f64> =
        synth_sequence(&SceneSpec::random(12, 12, 5, 1, 3).frozen()).unwrap();
    let geom = AnchorGeometry::build(&chain(&seq), &seq.masks, &seq.forward_masks, 2).unwrap();
    let y = rand_t(&[3, 12, 12], 4);
    let frames = vec![y.clone(); 5];
    let m = build_rank_matrix(&frames, &geom, RankLayout::Joint).unwrap();
    let row_norm = y.sum_sq().sqrt();
    assert!((m.spectrum[0] - 5f64.sqrt() * row_norm).abs() <= 1e-10 * row_norm);
    assert!(m.spectrum[1..].iter().all(|&g| g <= 1e-6 * m.spectrum[0]));
    assert_eq!(m.numeric_rank, 1);
}

#[test]
fn zero_mask_rank_matrix_is_zero() {
    let seq: FrameSequence<f64> = synth_sequence(&SceneSpec::random(12, 12, 3, 1, 3)).unwrap();
    let mut geom = AnchorGeometry::build(&chain(&seq), &seq.masks, &seq.forward_masks, 1).unwrap();
    geom.mask = OcclusionMask::zeros(12, 12);
    let frames: Vec<_> = (0..3).map(|s| rand_t(&[3, 12, 12], s)).collect();
    let m = build_rank_matrix(&frames, &geom, RankLayout::Joint).unwrap();
    assert_eq!(m.nuclear, 0.0);
    assert_eq!(m.numeric_rank, 0);
}

/// Stylizes every frame by warping one stylized anchor into it, which is
/// exactly consistent with the scene's motion.
pub(crate) fn flow_consistent_oracle(
    seq: &FrameSequence<f64>,
    anchor: usize,
    styl: &Tensor<f64>,
) -> Vec<Tensor<f64>> {
    let c = FlowChain {
        backward: &seq.flows,
        forward: &seq.forward_flows,
    };
    (0..seq.len())
        .map(|t| {
            // Frame t samples the anchor by the flow composed from t to anchor.
            let f = crate::flowops::compose_to_anchor(&c, anchor, t).unwrap();
            warp_backward(styl, &f).unwrap().image
        })
        .collect()
}

#[test]
fn flow_consistent_stylization_is_rank_one() {
    let seq: FrameSequence<f64> = synth_sequence(&SceneSpec::random(32, 32, 5, 2, 17)).unwrap();
    let styl = rand_t(&[3, 32, 32], 5);
    let frames = flow_consistent_oracle(&seq, 2, &styl);
    let geom = AnchorGeometry::build(&chain(&seq), &seq.masks, &seq.forward_masks, 2).unwrap();
    let m = build_rank_matrix(&frames, &geom, RankLayout::Joint).unwrap();
    assert_eq!(m.numeric_rank, 1);
    assert!(m.spectrum[1] / m.spectrum[0] <= 1e-6);
    let noise: Vec<_> = (0..5).map(|s| rand_t(&[3, 32, 32], 100 + s)).collect();
    assert_eq!(
        build_rank_matrix(&noise, &geom, RankLayout::Joint)
            .unwrap()
            .numeric_rank,
        5
    );
}

#[test]
fn per_channel_layout_sums_channel_norms() {
    let rows: Vec<Tensor<f64>> = (0..4).map(|s| rand_t(&[3, 5, 5], s)).collect();
    let m = RankMatrix::from_rows(&rows, RankLayout::PerChannel).unwrap();
    let mut oracle = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = rows.iter().flat_map(|r| r.channel(c).to_vec()).collect();
        oracle += svd_nuclear(&x, 4, 25);
    }
    assert!((m.nuclear - oracle).abs() <= 1e-9 * oracle);
}

#[test]
fn lowrank_examples() {
    let rows: Vec<Tensor<f64>> = (0..3).map(|s| rand_t(&[1, 4, 4], s)).collect();
    let a = RankMatrix::from_rows(&rows, RankLayout::Joint).unwrap();
    assert_eq!(lowrank_loss(&a, &a).unwrap(), 0.0);
    let mut five = a.clone();
    five.nuclear = 5.0;
    let mut three = a.clone();
    three.nuclear = 3.0;
    assert_eq!(lowrank_loss(&three, &five).unwrap(), 4.0);
    let b = RankMatrix::from_rows(&rows[..2], RankLayout::Joint).unwrap();
    assert!(matches!(
        lowrank_loss(&a, &b),
        Err(Error::GeometryMismatch(_))
    ));
}

#[test]
fn lowrank_gradient_ignores_anchor_perturbation() {
    let rows: Vec<Tensor<f64>> = (0..3).map(|s| rand_t(&[1, 4, 4], s)).collect();
    let grad_for = |anchor: f64| {
        let mut g = Graph::new();
        let vars: Vec<Var> = rows.iter().map(|r| g.param(r.clone())).collect();
        let n = g.nuclear_norm(&vars);
        let l = g.squared_gap(n, anchor);
        let gr = g.backward(l);
        (g.scalar(n), gr.get(vars[0]).unwrap().clone())
    };
    // The gradient is −2(a − n)·∂n: rescale to remove the anchor's factor.
    let (n, g1) = grad_for(1.0);
    let (_, g2) = grad_for(2.0);
    let s1 = -2.0 * (1.0 - n);
    let s2 = -2.0 * (2.0 - n);
    assert!(g1.scale(1.0 / s1).max_abs_diff(&g2.scale(1.0 / s2)) < 1e-12);
}

#[test]
fn weights_validate() {
    assert!(LossWeights::paper().validate().is_ok());
    let bad = LossWeights {
        k: 1,
        ..LossWeights::paper()
    };
    assert!(matches!(bad.validate(), Err(Error::ConfigInvalid { .. })));
    let neg = LossWeights {
        rank: -1.0,
        ..LossWeights::paper()
    };
    assert!(neg.validate().is_err());
}

struct Fixture {
    feats: NetworkHandle<f64>,
    style: StyleTarget<f64>,
    seq: FrameSequence<f64>,
}

fn fixture() -> Fixture {
    let feats = NetworkHandle::<f64>::features(1);
    let style = StyleTarget::standard(&feats, rand_t(&[3, 8, 8], 2)).unwrap();
    let seq = synth_sequence(&SceneSpec::random(8, 8, 3, 1, 3)).unwrap();
    Fixture { feats, style, seq }
}

fn objective_value(
    fx: &Fixture,
    w: &LossWeights,
    outs: &[Tensor<f64>],
    residual: Option<&[ResidualTarget<f64>]>,
    geom: Option<&AnchorGeometry<f64>>,
) -> (LossBreakdown, Vec<Tensor<f64>>) {
    let obj = Objective {
        features: &fx.feats,
        style: &fx.style,
        weights: w,
        rank_layout: RankLayout::Joint,
    };
    let mut g = Graph::new();
    let bound = fx.feats.bind_constants(&mut g);
    let vars: Vec<Var> = outs.iter().map(|o| g.param(o.clone())).collect();
    let targets = TupleTargets {
        frames: &fx.seq.frames,
        flows: &fx.seq.flows,
        masks: &fx.seq.masks,
        residual,
        rank: geom.map(|g| (g, 2.0)),
    };
    let t = tuple_objective(&mut g, &obj, &bound, &vars, &targets).unwrap();
    let grads = g.backward(t.total);
    (
        t.breakdown,
        vars.iter()
            .map(|v| grads.get(*v).unwrap().clone())
            .collect(),
    )
}

#[test]
fn objective_reduces_to_summed_perceptual() {
    let fx = fixture();
    let outs: Vec<_> = (0..3).map(|s| rand_t(&[3, 8, 8], 40 + s)).collect();
    let w = LossWeights::paper().perceptual_only();
    let (b, _) = objective_value(&fx, &w, &outs, None, None);
    let direct: f64 = outs
        .iter()
        .zip(&fx.seq.frames)
        .map(|(o, f)| {
            perceptual_loss(o, f, &fx.style, &w, &fx.feats)
                .unwrap()
                .total
        })
        .sum();
    assert!((b.total - direct).abs() <= 1e-9 * direct.abs());
    assert_eq!((b.residual, b.temporal, b.rank), (0.0, 0.0, 0.0));
}

#[test]
fn objective_breakdown_resums_and_echoes_paper_weights() {
    let fx = fixture();
    let outs: Vec<_> = (0..3).map(|s| rand_t(&[3, 8, 8], 50 + s)).collect();
    let res: Vec<_> = (0..3)
        .map(|s| ResidualTarget {
            delta_t: rand_t(&[3, 8, 8], 60 + s).map(|v| v - 0.5),
            baseline: rand_t(&[3, 8, 8], 70 + s),
        })
        .collect();
    let geom =
        AnchorGeometry::build(&chain(&fx.seq), &fx.seq.masks, &fx.seq.forward_masks, 1).unwrap();
    let w = LossWeights {
        k: 3,
        ..LossWeights::paper()
    };
    let (b, _) = objective_value(&fx, &w, &outs, Some(&res), Some(&geom));
    assert!(b.residual > 0.0 && b.temporal > 0.0 && b.rank > 0.0);
    assert!((b.resum() - b.total).abs() <= 1e-6 * b.total.abs());
    let p = LossWeights::paper();
    assert_eq!((p.k, p.residual, p.temporal, p.rank), (5, 4e8, 1e6, 1e2));
}

#[test]
fn objective_gradients_match_finite_differences() {
    let fx = fixture();
    let outs: Vec<_> = (0..3)
        .map(|s| rand_t(&[3, 8, 8], 80 + s).map(|v| 0.2 + 0.6 * v))
        .collect();
    let res: Vec<_> = (0..3)
        .map(|s| ResidualTarget {
            delta_t: rand_t(&[3, 8, 8], 90 + s).map(|v| 0.1 * v),
            baseline: rand_t(&[3, 8, 8], 95 + s),
        })
        .collect();
    let geom =
        AnchorGeometry::build(&chain(&fx.seq), &fx.seq.masks, &fx.seq.forward_masks, 1).unwrap();
    // Weights chosen so every term contributes comparably.
    let w = LossWeights {
        content: 1.0,
        style: 10.0,
        tv: 0.1,
        residual: 1.0,
        temporal: 1.0,
        rank: 0.01,
        k: 3,
    };
    let (_, grads) = objective_value(&fx, &w, &outs, Some(&res), Some(&geom));
    let h = 1e-6;
    for f in 0..3 {
        for i in (0..192).step_by(11) {
            let mut p = outs.clone();
            p[f].data_mut()[i] += h;
            let mut m = outs.clone();
            m[f].data_mut()[i] -= h;
            let lp = objective_value(&fx, &w, &p, Some(&res), Some(&geom))
                .0
                .total;
            let lm = objective_value(&fx, &w, &m, Some(&res), Some(&geom))
                .0
                .total;
            let numeric = (lp - lm) / (2.0 * h);
            let a = grads[f].data()[i];
            assert!(
                (a - numeric).abs() <= 1e-4 * numeric.abs().max(1e-4),
                "frame {f} elt {i}: {a} vs {numeric}"
            );
        }
    }
}

#[test]
fn temporal_graph_matches_eager() {
    let fx = fixture();
    let a = rand_t(&[3, 8, 8], 1);
    let b = rand_t(&[3, 8, 8], 2);
    let mut g = Graph::new();
    let av = g.param(a.clone());
    let bv = g.param(b.clone());
    let t = objective::temporal_graph(&mut g, av, bv, &fx.seq.flows[0], &fx.seq.masks[0]).unwrap();
    let eager = temporal_loss(&a, &b, &fx.seq.flows[0], &fx.seq.masks[0]).unwrap();
    assert!((g.scalar(t) - eager).abs() <= 1e-14);
}

#[test]
fn trunk_output_feeds_the_objective() {
    let fx = fixture();
    let net = NetworkHandle::<f64>::init(Arch::Student, 0.25, 3);
    let mut g = Graph::new();
    let fb = fx.feats.bind_constants(&mut g);
    let nb = net.bind(&mut g);
    let outs: Vec<Var> = fx
        .seq
        .frames
        .iter()
        .map(|f| {
            let x = g.constant(f.clone());
            crate::networks::trunk_graph(&net, &mut g, &nb, x).unwrap()
        })
        .collect();
    let w = LossWeights {
        k: 3,
        ..LossWeights::paper().perceptual_only()
    };
    let obj = Objective {
        features: &fx.feats,
        style: &fx.style,
        weights: &w,
        rank_layout: RankLayout::Joint,
    };
    let targets = TupleTargets {
        frames: &fx.seq.frames,
        flows: &fx.seq.flows,
        masks: &fx.seq.masks,
        residual: None,
        rank: None,
    };
    let t = tuple_objective(&mut g, &obj, &fb, &outs, &targets).unwrap();
    let grads = g.backward(t.total);
    assert!(nb.vars.iter().all(|v| grads.get(*v).is_some()));
    assert!(fb.vars.iter().all(|v| grads.get(*v).is_none()));
}

proptest! {
    #[test]
    fn nuclear_is_homogeneous_and_bounds_frobenius(seed in 0u64..500, c in prop::sample::select(vec![-2.0f64, 0.5])) {
        let x = Tensor::<f64>::uniform(&[4 * 9], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let n = nuclear_norm(x.data(), 4, 9).unwrap();
        let nc = nuclear_norm(x.scale(c).data(), 4, 9).unwrap();
        prop_assert!((nc - c.abs() * n).abs() <= 1e-10 * n);
        let fro = x.sum_sq().sqrt();
        prop_assert!(n >= fro * (1.0 - 1e-12));
        prop_assert!((n - svd_nuclear(x.data(), 4, 9)).abs() <= 1e-8 * n);
    }

    #[test]
    fn rank_one_attains_frobenius(seed in 0u64..500) {
        let u = rand_t(&[4], seed);
        let v = rand_t(&[6], seed + 1000);
        let x: Vec<f64> = u.data().iter().flat_map(|a| v.data().iter().map(move |b| a * b)).collect();
        let fro = x.iter().map(|e| e * e).sum::<f64>().sqrt();
        prop_assert!((nuclear_norm(&x, 4, 6).unwrap() - fro).abs() <= 1e-7 * fro);
    }

    #[test]
    fn losses_are_non_negative(seed in 0u64..200) {
        let a = rand_t(&[3, 4, 4], seed);
        let b = rand_t(&[3, 4, 4], seed + 1);
        prop_assert!(vanilla_kd_loss(&a, &b).unwrap() >= 0.0);
        let t = ResidualTarget { delta_t: b.clone(), baseline: a.clone() };
        prop_assert!(residual_loss(&b, &t).unwrap() >= 0.0);
        prop_assert!(temporal_loss(&a, &b, &FlowField::constant(4, 4, 0.5, -0.5), &OcclusionMask::ones(4, 4)).unwrap() >= 0.0);
    }
}
