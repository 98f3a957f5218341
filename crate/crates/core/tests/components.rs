mod common;

use common::*;
use dense_grounding::autograd::Graph;
use dense_grounding::cqg::CqgHooks;
use dense_grounding::encoders::group_points;
use dense_grounding::geometry::{dist, focused_region, focused_region_mask, Box3D, Vec3};
use dense_grounding::global::{add_proposal_noise, point_crops, proposal_crops, Crops, CropEncoder, GlobalDecoder, GlobalHooks, Qcspc};
use dense_grounding::model::RunMode;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Encoders

#[test]
fn token_positions_ignore_point_order() {
    let sc = scene(1);
    let mut pts = sc.xyz.clone();
    pts.shuffle(&mut rng(2));
    let positions = |xyz: &[Vec3]| {
        let g = group_points(xyz, 64).unwrap();
        let mut p: Vec<Vec3> = g.centers.iter().map(|&i| xyz[i]).collect();
        p.sort_by(|a, b| a.partial_cmp(b).unwrap());
        p
    };
    assert_eq!(positions(&sc.xyz), positions(&pts));
}

#[test]
fn scene_features_respond_to_colour_scale() {
    let fx = Fixture::new(&small_config(), 3, 3);
    let doubled: Vec<Vec3> = fx.scene.rgb.iter().map(|c| [2.0 * c[0], 2.0 * c[1], 2.0 * c[2]]).collect();
    let run = |rgb: &[Vec3]| {
        let mut g = Graph::new();
        let t = fx.model.scene.forward(&mut g, &fx.model.store, &fx.scene.xyz, rgb, &fx.grouping);
        g.value(t.features).clone()
    };
    assert!(max_diff(&run(&fx.scene.rgb), &run(&doubled)) > 1e-3);
}

#[test]
fn identical_sentences_encode_identically() {
    let fx = Fixture::new(&small_config(), 3, 4);
    let s: Vec<&[u32]> = fx.sample.valid_sentences().map(|s| s.tokens.as_slice()).collect();
    let mut g = Graph::new();
    let out = fx.model.text.forward(&mut g, &fx.model.store, &[s[0], s[1], s[0]]).unwrap();
    let rows = g.value(out.rows);
    let (a, len) = out.spans[0];
    let (c, _) = out.spans[2];
    for r in 0..len {
        assert_eq!(rows.row(a + r), rows.row(c + r));
    }
}

// Contextual query generation

#[test]
fn sentence_set_ignores_order_without_slot_embedding() {
    let fx = Fixture::new(&small_config(), 4, 5);
    let s: Vec<&[u32]> = fx.sample.valid_sentences().map(|s| s.tokens.as_slice()).collect();
    let set = |order: &[&[u32]], hooks: CqgHooks| {
        let mut g = Graph::new();
        let text = fx.model.text.forward(&mut g, &fx.model.store, order).unwrap();
        let (f, _) = fx.model.cqg.aggregate(&mut g, &fx.model.store, &text, hooks);
        g.value(f).clone()
    };
    let shuffled = [s[2], s[0], s[3], s[1]];
    let off = CqgHooks { zero_position: true, ..CqgHooks::default() };
    assert!(max_diff(&set(&s, off), &set(&shuffled, off)) < 1e-12);
    assert!(max_diff(&set(&s, CqgHooks::default()), &set(&shuffled, CqgHooks::default())) > 1e-6);
}

#[test]
fn zero_propagation_leaves_projected_sentences() {
    let fx = Fixture::new(&small_config(), 3, 6);
    let mut g = Graph::new();
    let mode = RunMode { cqg_hooks: CqgHooks { zero_propagation: true, ..CqgHooks::default() }, ..RunMode::eval(true, false) };
    let out = fx.model.forward(&mut g, &fx.input(), mode, &mut rng(0)).unwrap();
    let want = g.value(out.text.rows).dot(fx.model.store.get(fx.model.w_q.w));
    assert!(max_diff(g.value(out.queries), &want) < 1e-12);
}

#[test]
fn co_attention_maps_have_expected_shape_and_normalisation() {
    let cfg = small_config();
    let fx = Fixture::new(&cfg, 3, 7);
    let mut g = Graph::new();
    let out = fx.model.forward(&mut g, &fx.input(), RunMode::eval(true, false), &mut rng(0)).unwrap();
    let co = &out.cqg.unwrap().co_attn;
    assert_eq!(co.logits.len(), 3);
    for i in 0..3 {
        assert_eq!(g.shape(co.logits[i]), (cfg.n_set, cfg.tokens));
        assert_eq!(g.shape(co.enc_probs[i]), (cfg.tokens, cfg.n_set));
        for p in [co.set_probs[i], co.enc_probs[i]] {
            for row in g.value(p).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn only_the_context_generator_couples_sentences() {
    let fx = Fixture::new(&small_config(), 3, 8);
    let mut edited = fx.input();
    edited.sentences[0][1] = if edited.sentences[0][1] == 5 { 6 } else { 5 };
    for use_cqg in [false, true] {
        let queries = |input| {
            let mut g = Graph::new();
            let out = fx.model.forward(&mut g, &input, RunMode::eval(use_cqg, false), &mut rng(0)).unwrap();
            let (start, _) = out.text.spans[1];
            let v = g.value(out.queries);
            v.slice(ndarray::s![start.., ..]).to_owned()
        };
        let d = max_diff(&queries(fx.input()), &queries(edited.clone()));
        if use_cqg {
            assert!(d > 1e-9, "no cross-sentence effect with context generation");
        } else {
            assert_eq!(d, 0.0);
        }
    }
}

#[test]
fn single_sentence_paragraph_is_finite() {
    let fx = Fixture::new(&small_config(), 2, 9);
    let mut input = fx.input();
    input.sentences.truncate(1);
    let mut g = Graph::new();
    let out = fx.model.forward(&mut g, &input, RunMode::eval(true, true), &mut rng(0)).unwrap();
    let preds = out.predictions(&g);
    assert_eq!(preds.len(), 1);
    assert!(preds[0].center.iter().chain(&preds[0].size).all(|v| v.is_finite()));
    assert!(all_finite(g.value(out.queries)));
}

// Global decoder

#[test]
fn zero_gates_give_zero_biases() {
    let sc = scene(10);
    let (mut ps, q) = build(11, |i| Qcspc::new(i, "g", 16));
    ps.get_mut(q.w_e.w).fill(0.0);
    ps.get_mut(q.w_i.w).fill(0.0);
    let boxes: Vec<Box3D> = sc.objects.iter().take(3).map(|o| o.bbox).collect();
    let centers: Vec<Vec3> = boxes.iter().map(|b| b.center).collect();
    let keys: Vec<Vec3> = sc.xyz.iter().step_by(31).copied().collect();
    let crops = proposal_crops(&sc.xyz, &boxes, &centers[0], 8, &mut rng(12));
    let mut g = Graph::new();
    let x = g.constant(random(3, 16, 13));
    let ae = q.explicit(&mut g, &ps, x, &centers, &keys);
    let ai = q.implicit(&mut g, &ps, x, &crops, &point_crops(&keys, &centers[0]));
    assert!(g.value(ae).iter().all(|v| *v == 0.0));
    assert!(g.value(ai).iter().all(|v| *v == 0.0));
}

#[test]
fn distance_gate_gives_pairwise_distances() {
    let (mut ps, q) = build(14, |i| Qcspc::new(i, "g", 8));
    let mut w = Array2::zeros((8, 5));
    w[[0, 0]] = 1.0;
    *ps.get_mut(q.w_e.w) = w;
    let x0 = Array2::from_shape_fn((2, 8), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
    let qc = [[0.0, 0.0, 0.0], [1.0, 2.0, 0.5]];
    let kc = [[3.0, 4.0, 0.0], [1.0, 2.0, 0.5], [-1.0, 0.0, 2.0]];
    let mut g = Graph::new();
    let x = g.constant(x0);
    let a = q.explicit(&mut g, &ps, x, &qc, &kc);
    let a = g.value(a);
    for i in 0..2 {
        for j in 0..3 {
            assert!((a[[i, j]] - dist(&qc[i], &kc[j])).abs() < 1e-12);
        }
    }
    assert!((a[[0, 0]] - 5.0).abs() < 1e-12);
}

#[test]
fn crop_code_ignores_point_order_within_a_crop() {
    let sc = scene(15);
    let (ps, enc) = build(16, |i| CropEncoder::new(i, "c", 16));
    let boxes: Vec<Box3D> = sc.objects.iter().take(3).map(|o| o.bbox).collect();
    let crops = proposal_crops(&sc.xyz, &boxes, &[0.0; 3], 16, &mut rng(17));
    let mut permuted = Crops { input: crops.input.clone(), valid: crops.valid.clone(), ..crops.clone() };
    let mut r = rng(18);
    for c in 0..boxes.len() {
        let mut order: Vec<usize> = (0..crops.group).collect();
        order.shuffle(&mut r);
        for (dst, &src) in order.iter().enumerate() {
            let (d, s) = (c * crops.group + dst, c * crops.group + src);
            permuted.input.row_mut(d).assign(&crops.input.row(s));
            permuted.valid[d] = crops.valid[s];
        }
    }
    assert_ne!(permuted.input, crops.input);
    let code = |c: &Crops| {
        let mut g = Graph::new();
        let v = enc.forward(&mut g, &ps, c);
        g.value(v).clone()
    };
    assert_eq!(code(&crops), code(&permuted));
}

#[test]
fn zeroed_offsets_keep_boxes_and_trajectory_has_one_entry_per_layer() {
    let cfg = small_config();
    let fx = Fixture::new(&cfg, 3, 19);
    let mut g = Graph::new();
    let mode = RunMode { global_hooks: GlobalHooks { zero_offset: true }, ..RunMode::eval(true, true) };
    let out = fx.model.forward(&mut g, &fx.input(), mode, &mut rng(0)).unwrap();
    let gl = out.global.as_ref().unwrap();
    assert_eq!(gl.boxes.len(), cfg.global_layers + 1);
    for step in &gl.boxes {
        assert_eq!(step, &out.initial_proposals(&g));
    }
}

#[test]
fn zero_layers_return_the_initial_boxes() {
    let fx = Fixture::new(&small_config(), 3, 20);
    let (ps, dec) = build(21, |i| GlobalDecoder::new(i, 16, 2, 0));
    let mut g = Graph::new();
    let scene = fx.model.scene.forward(&mut g, &fx.model.store, &fx.scene.xyz, &fx.scene.rgb, &fx.grouping);
    let boxes = fx.targets();
    let f = g.constant(random(boxes.len(), 16, 22));
    let out = dec.forward(&mut g, &ps, &boxes, f, &scene, &fx.scene.xyz, &fx.model.cfg.global, true, GlobalHooks::default(), &mut rng(0));
    assert_eq!(out.boxes, vec![boxes.clone()]);
    assert_eq!(out.final_boxes(), boxes.as_slice());
}

#[test]
fn proposal_noise_is_centred_and_off_outside_training() {
    let b = Box3D::new([1.0, -2.0, 0.5], [0.8, 1.2, 0.6]);
    let boxes = vec![b; 10_000];
    let sigma = 0.05;
    let noisy = add_proposal_noise(&boxes, sigma, sigma, true, &mut rng(23));
    for d in 0..3 {
        let mc = noisy.iter().map(|n| n.center[d] - b.center[d]).sum::<f64>() / 1e4;
        let ms = noisy.iter().map(|n| (n.size[d] / b.size[d]).ln()).sum::<f64>() / 1e4;
        assert!(mc.abs() < 3.0 * sigma / 100.0, "centre mean {mc}");
        assert!(ms.abs() < 3.0 * sigma / 100.0, "log-size mean {ms}");
    }
    assert_eq!(add_proposal_noise(&boxes[..5], 0.0, 0.0, true, &mut rng(24)), boxes[..5].to_vec());
    assert_eq!(add_proposal_noise(&boxes[..5], sigma, sigma, false, &mut rng(24)), boxes[..5].to_vec());
}

#[test]
fn focus_mask_and_crops_are_translation_invariant() {
    let sc = scene(25);
    let t = [3.7, -1.2, 0.4];
    let shift = |p: &Vec3| [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
    // Scene points lie exactly on object faces; enlarged boxes keep them
    // clear of the crop boundary so rounding cannot flip membership.
    let boxes: Vec<Box3D> = sc.objects.iter().take(3).map(|o| Box3D::new(o.bbox.center, o.bbox.size.map(|s| s * 1.1))).collect();
    let moved: Vec<Box3D> = boxes.iter().map(|b| Box3D::new(shift(&b.center), b.size)).collect();
    let pts: Vec<Vec3> = sc.xyz.iter().map(shift).collect();
    let keys: Vec<Vec3> = sc.xyz.iter().step_by(17).copied().collect();
    let moved_keys: Vec<Vec3> = keys.iter().map(shift).collect();
    let centers = |bs: &[Box3D]| bs.iter().map(|b| b.center).collect::<Vec<_>>();
    let (r0, r1) = (focused_region(&centers(&boxes)).unwrap(), focused_region(&centers(&moved)).unwrap());
    for tau in [0.5, 1.0, 2.0] {
        assert_eq!(focused_region_mask(&r0, tau, &keys).bias, focused_region_mask(&r1, tau, &moved_keys).bias);
    }
    let c0 = proposal_crops(&sc.xyz, &boxes, &r0.center, 16, &mut rng(26));
    let c1 = proposal_crops(&pts, &moved, &r1.center, 16, &mut rng(26));
    assert_eq!(c0.valid, c1.valid);
    assert!(max_diff(&c0.input, &c1.input) < 1e-9);
    assert!(max_diff(&point_crops(&keys, &r0.center).input, &point_crops(&moved_keys, &r1.center).input) < 1e-9);
}

#[test]
fn eval_forward_is_deterministic() {
    let fx = Fixture::new(&small_config(), 4, 27);
    let run = |seed| {
        let mut g = Graph::new();
        let out = fx.model.forward(&mut g, &fx.input(), RunMode::eval(true, true), &mut rng(seed)).unwrap();
        out.predictions(&g)
    };
    assert_eq!(run(1), run(2));
}
