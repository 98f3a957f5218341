//! Box losses on the tape. Every loss is a mean over the valid sentences of
//! a paragraph; padded slots never reach the model, so they contribute
//! nothing.

use ndarray::Array2;

use crate::autograd::{Graph, Var};
use crate::config::LossWeights;
use crate::geometry::Box3D;
use crate::local::boxes_to_rows;

fn prod3(g: &mut Graph, x: Var) -> Var {
    let a = g.slice_cols(x, 0, 1);
    let b = g.slice_cols(x, 1, 2);
    let c = g.slice_cols(x, 2, 3);
    let ab = g.mul(a, b);
    g.mul(ab, c)
}

/// Row-wise GIoU between predicted `n×6` boxes and constant targets, as an
/// `n×1` column.
pub fn giou_rows(g: &mut Graph, pred: Var, gt: &Array2<f64>) -> Var {
    let n = gt.nrows();
    let glo = Array2::from_shape_fn((n, 3), |(i, d)| gt[[i, d]] - gt[[i, 3 + d]] / 2.0);
    let ghi = Array2::from_shape_fn((n, 3), |(i, d)| gt[[i, d]] + gt[[i, 3 + d]] / 2.0);
    let gvol = Array2::from_shape_fn((n, 1), |(i, _)| gt[[i, 3]] * gt[[i, 4]] * gt[[i, 5]]);
    let (glo, ghi, gvol) = (g.constant(glo), g.constant(ghi), g.constant(gvol));
    let c = g.slice_cols(pred, 0, 3);
    let s = g.slice_cols(pred, 3, 6);
    let half = g.scale(s, 0.5);
    let plo = g.sub(c, half);
    let phi = g.add(c, half);
    let ilo = g.maximum(plo, glo);
    let ihi = g.minimum(phi, ghi);
    let idim = g.sub(ihi, ilo);
    let idim = g.relu(idim);
    let inter = prod3(g, idim);
    let pvol = prod3(g, s);
    let union = g.add(pvol, gvol);
    let union = g.sub(union, inter);
    let iou = g.div(inter, union);
    let hlo = g.minimum(plo, glo);
    let hhi = g.maximum(phi, ghi);
    let hdim = g.sub(hhi, hlo);
    let hull = prod3(g, hdim);
    let gap = g.sub(hull, union);
    let pen = g.div(gap, hull);
    g.sub(iou, pen)
}

/// `λ_iou (1 − GIoU) + λ_L1 ‖B̂ − B‖₁`, averaged over rows.
pub fn loss_init(g: &mut Graph, pred: Var, gt: &[Box3D], w: &LossWeights) -> Var {
    let gt = boxes_to_rows(gt);
    let giou = giou_rows(g, pred, &gt);
    let one_minus = g.scale(giou, -1.0);
    let one_minus = g.offset(one_minus, 1.0);
    let t = g.constant(gt);
    let diff = g.sub(pred, t);
    let l1 = g.abs(diff);
    let l1 = g.sum_cols(l1);
    let a = g.scale(one_minus, w.iou);
    let b = g.scale(l1, w.l1);
    let per = g.add(a, b);
    g.mean_all(per)
}

/// Per-layer L1 between predicted offsets and the residual from each
/// layer's (detached) input box to the ground truth. Centres in meters,
/// sizes in log space; summed over layers, averaged over sentences.
pub fn loss_refine(g: &mut Graph, offsets: &[Var], inputs: &[Vec<Box3D>], gt: &[Box3D], w: &LossWeights) -> Var {
    let n = gt.len();
    let mut total: Option<Var> = None;
    for (delta, boxes) in offsets.iter().zip(inputs) {
        let target = Array2::from_shape_fn((n, 6), |(i, d)| {
            if d < 3 {
                gt[i].center[d] - boxes[i].center[d]
            } else {
                gt[i].size[d - 3].ln() - boxes[i].size[d - 3].ln()
            }
        });
        let t = g.constant(target);
        let diff = g.sub(*delta, t);
        let diff = g.abs(diff);
        let wts = g.constant(Array2::from_shape_fn((1, 6), |(_, d)| if d < 3 { w.cent } else { w.size }));
        let weighted = g.mul_row(diff, wts);
        let s = g.sum_all(weighted);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    match total {
        Some(t) => g.scale(t, 1.0 / n as f64),
        None => g.constant(Array2::zeros((1, 1))),
    }
}

/// `λ_refine L_refine + λ_init L_init`.
pub fn total_loss(g: &mut Graph, refine: Var, init: Var, w: &LossWeights) -> Var {
    let a = g.scale(refine, w.refine);
    let b = g.scale(init, w.init);
    g.add(a, b)
}

/// Plain evaluation of the initial-grounding loss for a single box pair.
pub fn loss_init_value(pred: &Box3D, gt: &Box3D, w: &LossWeights) -> f64 {
    let mut g = Graph::new();
    let p = g.input(boxes_to_rows(std::slice::from_ref(pred)));
    let l = loss_init(&mut g, p, std::slice::from_ref(gt), w);
    g.scalar(l)
}
