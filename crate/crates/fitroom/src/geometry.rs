//! Box geometry: IoU, anchor generation, the box-delta parameterization,
//! anchor labeling, NMS, and RoIAlign / RoIPool feature extraction.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// COCO-convention box: `[top-left x, top-left y, width, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYWH {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXYWH {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxXYWH { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_center(self) -> BoxCenter {
        BoxCenter {
            cx: self.x + self.w / 2.0,
            cy: self.y + self.h / 2.0,
            w: self.w,
            h: self.h,
        }
    }
}

/// Center-parameterized box (cx, cy, w, h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCenter {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCenter {
    pub fn to_xywh(self) -> BoxXYWH {
        BoxXYWH {
            x: self.cx - self.w / 2.0,
            y: self.cy - self.h / 2.0,
            w: self.w,
            h: self.h,
        }
    }
}

/// Normalized offset of a box relative to an anchor
/// (t_x, t_y in units of anchor size; t_w, t_h in log scale).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 };
}

/// Anchor grid parameters: one anchor per (scale, ratio) pair per cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub stride: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scales: vec![32.0, 64.0, 128.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            stride: 16.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Intersection-over-union of two boxes; 0 when the union is empty.
pub fn iou(a: &BoxXYWH, b: &BoxXYWH) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 { 0.0 } else { inter / union }
}

/// Tile anchors over a feature grid. Anchors are centered at
/// `((j+0.5)·stride, (i+0.5)·stride)`, with area `scale²` and aspect
/// `w/h = ratio`. Order: row-major cells, then scale-major, ratio-minor.
pub fn generate_anchors(cfg: &AnchorConfig, feat_h: usize, feat_w: usize) -> Vec<BoxCenter> {
    let mut out = Vec::with_capacity(feat_h * feat_w * cfg.scales.len() * cfg.aspect_ratios.len());
    for i in 0..feat_h {
        for j in 0..feat_w {
            let cx = (j as f64 + 0.5) * cfg.stride;
            let cy = (i as f64 + 0.5) * cfg.stride;
            for &scale in &cfg.scales {
                for &ratio in &cfg.aspect_ratios {
                    // w·h = scale², w/h = ratio
                    let w = scale * ratio.sqrt();
                    let h = scale / ratio.sqrt();
                    out.push(BoxCenter { cx, cy, w, h });
                }
            }
        }
    }
    out
}

/// Encode a ground-truth box relative to an anchor:
/// t_x=(x−x_a)/w_a, t_y=(y−y_a)/h_a, t_w=ln(w/w_a), t_h=ln(h/h_a).
pub fn encode_box(anchor: &BoxCenter, gt: &BoxCenter) -> Result<BoxDelta> {
    if anchor.w <= 0.0 || anchor.h <= 0.0 || gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::domain("encode_box requires positive box dimensions"));
    }
    Ok(BoxDelta {
        tx: (gt.cx - anchor.cx) / anchor.w,
        ty: (gt.cy - anchor.cy) / anchor.h,
        tw: (gt.w / anchor.w).ln(),
        th: (gt.h / anchor.h).ln(),
    })
}

/// Invert [`encode_box`].
pub fn decode_box(anchor: &BoxCenter, d: &BoxDelta) -> Result<BoxCenter> {
    let w = anchor.w * d.tw.exp();
    let h = anchor.h * d.th.exp();
    if !w.is_finite() || !h.is_finite() {
        return Err(Error::domain(format!(
            "decode_box overflow for delta (tw={}, th={})",
            d.tw, d.th
        )));
    }
    Ok(BoxCenter {
        cx: anchor.cx + d.tx * anchor.w,
        cy: anchor.cy + d.ty * anchor.h,
        w,
        h,
    })
}

/// Label anchors against ground-truth boxes.
///
/// Positive: the anchor achieving the max IoU with some gt box (ties share
/// the label), or any anchor with IoU > `pos_iou`. Negative: max IoU over
/// all gt below `neg_iou` and not positive. Everything else is ignored.
/// With no gt boxes every anchor is negative.
pub fn label_anchors(
    anchors: &[BoxCenter],
    gt_boxes: &[BoxXYWH],
    pos_iou: f64,
    neg_iou: f64,
) -> Vec<AnchorLabel> {
    if gt_boxes.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| {
            let ab = a.to_xywh();
            gt_boxes.iter().map(|g| iou(&ab, g)).collect()
        })
        .collect();

    let mut labels: Vec<AnchorLabel> = anchors
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let max_iou = ious[i].iter().cloned().fold(0.0_f64, f64::max);
            if max_iou > pos_iou {
                AnchorLabel::Positive
            } else if max_iou < neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();

    // The per-gt argmax clause, ties included.
    for g in 0..gt_boxes.len() {
        let best = ious.iter().map(|row| row[g]).fold(0.0_f64, f64::max);
        if best > 0.0 {
            for i in 0..anchors.len() {
                if ious[i][g] == best {
                    labels[i] = AnchorLabel::Positive;
                }
            }
        }
    }
    labels
}

/// Greedy non-maximum suppression. Returns indices of kept boxes in
/// keep order; score ties break toward the lower index.
pub fn nms(boxes: &[BoxXYWH], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// RoIAlign: divide the roi into `m×m` bins, sample each bin at `s×s`
/// regularly spaced interior points with bilinear interpolation
/// (half-pixel centers, border clamp), and average. No coordinate
/// quantization anywhere.
pub fn roi_align(
    feat: &Array3<f64>,
    roi: &BoxXYWH,
    out_size: usize,
    samples_per_bin: usize,
) -> Result<Array3<f64>> {
    if roi.w <= 0.0 || roi.h <= 0.0 {
        return Err(Error::domain("roi_align requires positive roi dims"));
    }
    if out_size == 0 || samples_per_bin == 0 {
        return Err(Error::domain("roi_align requires out_size >= 1 and samples >= 1"));
    }
    let (c, _, _) = feat.dim();
    let m = out_size;
    let s = samples_per_bin;
    let bin_w = roi.w / m as f64;
    let bin_h = roi.h / m as f64;
    let mut out = Array3::zeros((c, m, m));
    for ch in 0..c {
        let plane = feat.index_axis(ndarray::Axis(0), ch).to_owned();
        for bi in 0..m {
            for bj in 0..m {
                let mut acc = 0.0;
                for si in 0..s {
                    for sj in 0..s {
                        let x = roi.x + bin_w * (bj as f64 + (sj as f64 + 0.5) / s as f64);
                        let y = roi.y + bin_h * (bi as f64 + (si as f64 + 0.5) / s as f64);
                        acc += crate::raster::bilinear_sample(&plane, x, y);
                    }
                }
                out[(ch, bi, bj)] = acc / (s * s) as f64;
            }
        }
    }
    Ok(out)
}

/// RoIPool: roi coordinates floored to the cell grid, bin boundaries
/// quantized, max over each bin's cells.
pub fn roi_pool(feat: &Array3<f64>, roi: &BoxXYWH, out_size: usize) -> Result<Array3<f64>> {
    if roi.w <= 0.0 || roi.h <= 0.0 || out_size == 0 {
        return Err(Error::domain("roi_pool requires positive roi dims and out_size"));
    }
    let (c, fh, fw) = feat.dim();
    let m = out_size;
    let x0 = roi.x.floor() as isize;
    let y0 = roi.y.floor() as isize;
    let x1 = (roi.x + roi.w).floor() as isize;
    let y1 = (roi.y + roi.h).floor() as isize;
    let rw = (x1 - x0).max(1) as usize;
    let rh = (y1 - y0).max(1) as usize;
    let mut out = Array3::zeros((c, m, m));
    for bi in 0..m {
        let ys = y0 + (bi * rh / m) as isize;
        let ye = y0 + ((bi + 1) * rh).div_ceil(m) as isize;
        for bj in 0..m {
            let xs = x0 + (bj * rw / m) as isize;
            let xe = x0 + ((bj + 1) * rw).div_ceil(m) as isize;
            let ys_c = ys.clamp(0, fh as isize - 1) as usize;
            let ye_c = ye.clamp(1, fh as isize) as usize;
            let xs_c = xs.clamp(0, fw as isize - 1) as usize;
            let xe_c = xe.clamp(1, fw as isize) as usize;
            if ye_c <= ys_c || xe_c <= xs_c {
                return Err(Error::domain("roi_pool bin collapsed to zero cells"));
            }
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for y in ys_c..ye_c {
                    for x in xs_c..xe_c {
                        best = best.max(feat[(ch, y, x)]);
                    }
                }
                out[(ch, bi, bj)] = best;
            }
        }
    }
    Ok(out)
}
