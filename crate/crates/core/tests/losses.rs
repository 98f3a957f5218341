use dense_grounding::autograd::Graph;
use dense_grounding::config::LossWeights;
use dense_grounding::geometry::{iou3d, Box3D};
use dense_grounding::local::boxes_to_rows;
use dense_grounding::loss::{loss_init, loss_init_value, loss_refine, total_loss};
use dense_grounding::metrics::acc_at_iou;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(x: f64) -> Box3D {
    Box3D::new([x, 0.0, 0.0], [1.0; 3])
}

#[test]
fn separated_unit_cubes() {
    // 1 − GIoU = 1 + 9/11, plus an L1 distance of 10.
    let l = loss_init_value(&unit(0.0), &unit(10.0), &LossWeights::default());
    assert!((l - (10.0 + 20.0 / 11.0)).abs() < 1e-9, "{l}");
    assert!((l - 11.818).abs() < 1e-3);
}

#[test]
fn exact_prediction_costs_nothing() {
    let b = Box3D::new([0.3, -1.0, 0.7], [0.5, 1.5, 0.9]);
    assert!(loss_init_value(&b, &b, &LossWeights::default()).abs() < 1e-12);
}

#[test]
fn refinement_target_is_the_residual_to_ground_truth() {
    let gt = Box3D::new([2.0, 1.0, 0.5], [1.0, 0.8, 0.6]);
    let b0 = Box3D::new([1.0, 1.0, 0.5], gt.size);
    let mut g = Graph::new();
    let delta = g.input(Array2::zeros((1, 6)));
    let l = loss_refine(&mut g, &[delta], &[vec![b0]], &[gt], &LossWeights::default());
    assert!((g.scalar(l) - 1.0).abs() < 1e-12);
    // The exact residual, centre and log-size, costs nothing.
    let exact = g.input(Array2::from_shape_vec((1, 6), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let l = loss_refine(&mut g, &[exact], &[vec![b0]], &[gt], &LossWeights::default());
    assert_eq!(g.scalar(l), 0.0);
}

#[test]
fn initial_loss_weighs_a_twentieth_of_refinement() {
    let w = LossWeights::default();
    let mut g = Graph::new();
    let one = g.input(Array2::from_elem((1, 1), 1.0));
    let zero = g.input(Array2::zeros((1, 1)));
    let from_refine = total_loss(&mut g, one, zero, &w);
    let from_init = total_loss(&mut g, zero, one, &w);
    assert!((g.scalar(from_refine) / g.scalar(from_init) - 20.0).abs() < 1e-12);
}

#[test]
fn accuracy_matches_recount_and_flips_one_hit_at_the_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rand_box = |rng: &mut ChaCha8Rng| {
        Box3D::new([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0)], [rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)])
    };
    let mut gts: Vec<Box3D> = (0..200).map(|_| rand_box(&mut rng)).collect();
    let mut preds: Vec<Box3D> = (0..200).map(|_| rand_box(&mut rng)).collect();
    for m in [0.0, 0.25, 0.5] {
        let hits = preds.iter().zip(&gts).filter(|(p, g)| iou3d(p, g).unwrap() > m).count();
        assert_eq!(acc_at_iou(&preds, &gts, m).unwrap(), hits as f64 / 200.0);
    }
    // A prediction at IoU exactly 1/3 against its target: m = 1/3 misses,
    // nudging it to the target hits, nothing else moves.
    gts[7] = unit(0.0);
    preds[7] = Box3D::new([0.5, 0.0, 0.0], [1.0; 3]);
    let m = iou3d(&preds[7], &gts[7]).unwrap();
    let before = acc_at_iou(&preds, &gts, m).unwrap();
    preds[7] = Box3D::new([0.49, 0.0, 0.0], [1.0; 3]);
    let after = acc_at_iou(&preds, &gts, m).unwrap();
    assert!((after - before - 1.0 / 200.0).abs() < 1e-15);
}

fn arb_box() -> impl Strategy<Value = Box3D> {
    (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(0.05..3.0f64)).prop_map(|(c, s)| Box3D::new(c, s))
}

proptest! {
    #[test]
    fn losses_are_non_negative(p in prop::collection::vec(arb_box(), 1..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<Box3D> = p.iter().map(|b| Box3D::new(b.center.map(|c| c + rng.gen_range(-2.0..2.0)), b.size.map(|s| s * rng.gen_range(0.5..2.0)))).collect();
        let w = LossWeights::default();
        let mut g = Graph::new();
        let pred = g.input(boxes_to_rows(&p));
        let li = loss_init(&mut g, pred, &gt, &w);
        let delta = g.input(Array2::from_shape_fn((p.len(), 6), |_| rng.gen_range(-1.0..1.0)));
        let lr = loss_refine(&mut g, &[delta], &[p.clone()], &gt, &w);
        let t = total_loss(&mut g, lr, li, &w);
        prop_assert!(g.scalar(li) >= 0.0);
        prop_assert!(g.scalar(lr) >= 0.0);
        prop_assert!(g.scalar(t) >= 0.0);
    }
}
