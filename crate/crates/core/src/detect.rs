//! Single-scale YOLO-v1 style detection on frozen backbone features.
//!
//! The head adaptively average-pools tap activations to an `S x S` grid and
//! applies one 3x3 convolution producing, per cell, `B` boxes of
//! `(x, y, w, h, confidence)` followed by class logits. All five box values
//! are squashed with a logistic, so `x, y` are offsets inside the cell and
//! `w, h` are fractions of the image edge.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::metrics::GtBox;
use crate::network::{run_layers, Layer, ModelParams, NetworkSpec};
use crate::numerics::softmax;
use crate::rng::Rng;
use crate::tensor::{Shape4, Tensor4};
use crate::training::{fit, BatchStats, EpochLog, TrainConfig, EVAL_CHUNK};

/// Axis-aligned box in absolute pixels: top-left corner and size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxF {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxF {
    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    /// Intersection with `[0, width] x [0, height]`.
    pub fn clip(&self, height: f64, width: f64) -> Self {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }
}

/// Box intersection over union; 0 when the union is empty.
pub fn box_iou(a: &BoxF, b: &BoxF) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// A labelled ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectBox {
    pub bbox: BoxF,
    pub class: usize,
}

impl From<&GtBox> for ObjectBox {
    fn from(g: &GtBox) -> Self {
        Self {
            bbox: BoxF {
                x: g.x as f64,
                y: g.y as f64,
                w: g.w as f64,
                h: g.h as f64,
            },
            class: g.label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoxF,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageDetections {
    pub detections: Vec<Detection>,
    pub truth: Vec<ObjectBox>,
}

/// Detections and ground truth for a set of images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet {
    pub images: Vec<ImageDetections>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    /// Center offset inside the cell, in `[0, 1)`.
    pub x: f64,
    pub y: f64,
    /// Size as a fraction of the image edge.
    pub w: f64,
    pub h: f64,
    pub class: usize,
}

/// Per-cell regression targets; `cells[row * s + col]` is set for the cell
/// containing an object's center.
#[derive(Clone, Debug, PartialEq)]
pub struct YoloTarget {
    pub s: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub cells: Vec<Option<CellTarget>>,
    /// Objects dropped because an earlier object already owned their cell.
    pub dropped: usize,
}

impl YoloTarget {
    pub fn responsible_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

/// Index of the half-open cell `[k/s, (k+1)/s)` containing `frac`.
fn cell_of(frac: f64, s: usize) -> usize {
    (libm::floor(frac * s as f64).max(0.0) as usize).min(s - 1)
}

pub fn encode_targets(objects: &[ObjectBox], s: usize, image_shape: (usize, usize)) -> Result<YoloTarget> {
    let (ih, iw) = image_shape;
    if s == 0 || ih == 0 || iw == 0 {
        return Err(invalid("grid size and image shape must be positive"));
    }
    let mut cells = vec![None; s * s];
    let mut dropped = 0;
    const SLACK: f64 = 1e-9;
    for (i, o) in objects.iter().enumerate() {
        let b = o.bbox;
        let ok = b.w > 0.0
            && b.h > 0.0
            && b.x >= -SLACK
            && b.y >= -SLACK
            && b.x + b.w <= iw as f64 + SLACK
            && b.y + b.h <= ih as f64 + SLACK;
        if !ok {
            return Err(invalid(format!("object {i} box {b:?} is not inside a {ih}x{iw} image")));
        }
        let (cx, cy) = b.center();
        let (fx, fy) = (cx / iw as f64, cy / ih as f64);
        let (col, row) = (cell_of(fx, s), cell_of(fy, s));
        let cell = &mut cells[row * s + col];
        if cell.is_some() {
            dropped += 1;
            continue;
        }
        *cell = Some(CellTarget {
            x: fx * s as f64 - col as f64,
            y: fy * s as f64 - row as f64,
            w: b.w / iw as f64,
            h: b.h / ih as f64,
            class: o.class,
        });
    }
    Ok(YoloTarget {
        s,
        image_h: ih,
        image_w: iw,
        cells,
        dropped,
    })
}

/// One predicted box in target units.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BBoxPred {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

/// Decoded head output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPrediction {
    pub s: usize,
    pub b: usize,
    pub classes: usize,
    /// `boxes[cell * b + j]`.
    pub boxes: Vec<BBoxPred>,
    /// `class_probs[cell * classes + c]`.
    pub class_probs: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-v))
}

pub fn head_channels(b: usize, classes: usize) -> usize {
    b * 5 + classes
}

impl GridPrediction {
    /// Squashes one item of raw head output, laid out `(b*5 + classes, s, s)`.
    pub fn from_raw(raw: &[f64], s: usize, b: usize, classes: usize) -> Result<Self> {
        let cells = s * s;
        if raw.len() != head_channels(b, classes) * cells {
            return Err(Error::ShapeMismatch {
                context: "grid prediction",
                expected: format!("{} values", head_channels(b, classes) * cells),
                found: format!("{}", raw.len()),
            });
        }
        let at = |ch: usize, cell: usize| raw[ch * cells + cell];
        let mut boxes = Vec::with_capacity(cells * b);
        let mut class_probs = Vec::with_capacity(cells * classes);
        for cell in 0..cells {
            for j in 0..b {
                boxes.push(BBoxPred {
                    x: sigmoid(at(5 * j, cell)),
                    y: sigmoid(at(5 * j + 1, cell)),
                    w: sigmoid(at(5 * j + 2, cell)),
                    h: sigmoid(at(5 * j + 3, cell)),
                    confidence: sigmoid(at(5 * j + 4, cell)),
                });
            }
            let logits: Vec<f64> = (0..classes).map(|c| at(5 * b + c, cell)).collect();
            class_probs.extend(softmax(&logits));
        }
        Ok(Self {
            s,
            b,
            classes,
            boxes,
            class_probs,
        })
    }

    /// The prediction a perfect head would make: box 0 of each responsible
    /// cell equals the target with confidence 1, everything else is zero.
    pub fn from_target(target: &YoloTarget, b: usize, classes: usize) -> Self {
        let cells = target.s * target.s;
        let mut boxes = vec![BBoxPred::default(); cells * b];
        let mut class_probs = vec![0.0; cells * classes];
        for (cell, t) in target.cells.iter().enumerate() {
            if let Some(t) = t {
                boxes[cell * b] = BBoxPred {
                    x: t.x,
                    y: t.y,
                    w: t.w,
                    h: t.h,
                    confidence: 1.0,
                };
                class_probs[cell * classes + t.class] = 1.0;
            }
        }
        Self {
            s: target.s,
            b,
            classes,
            boxes,
            class_probs,
        }
    }
}

/// Box in normalised image coordinates for a prediction or target in `cell`.
fn unit_box(s: usize, cell: usize, x: f64, y: f64, w: f64, h: f64) -> BoxF {
    let (row, col) = (cell / s, cell % s);
    BoxF::from_center((col as f64 + x) / s as f64, (row as f64 + y) / s as f64, w, h)
}

/// The predictor in `cell` that owns the target: highest box IOU, first on ties.
pub fn responsible_predictor(pred: &GridPrediction, cell: usize, t: &CellTarget) -> usize {
    let tb = unit_box(pred.s, cell, t.x, t.y, t.w, t.h);
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for j in 0..pred.b {
        let p = pred.boxes[cell * pred.b + j];
        let v = box_iou(&unit_box(pred.s, cell, p.x, p.y, p.w, p.h), &tb);
        if v > best_iou {
            best_iou = v;
            best = j;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordLoss {
    pub loss: f64,
    /// `d loss / d (x, y, w, h)` for each predicted box, `grads[cell * b + j]`.
    pub grads: Vec<[f64; 4]>,
}

/// Squared error on `x, y` and on `sqrt(w), sqrt(h)`, summed over the
/// responsible predictor of every responsible cell.
pub fn yolo_coord_loss(pred: &GridPrediction, target: &YoloTarget) -> Result<CoordLoss> {
    if pred.s != target.s || pred.boxes.len() != pred.s * pred.s * pred.b {
        return Err(Error::ShapeMismatch {
            context: "coordinate loss",
            expected: format!("a {}x{} grid", target.s, target.s),
            found: format!("a {}x{} grid with {} boxes", pred.s, pred.s, pred.boxes.len()),
        });
    }
    let mut grads = vec![[0.0; 4]; pred.boxes.len()];
    let mut loss = 0.0;
    for (cell, t) in target.cells.iter().enumerate() {
        let Some(t) = t else { continue };
        let j = responsible_predictor(pred, cell, t);
        let p = pred.boxes[cell * pred.b + j];
        assert!(p.w >= 0.0 && p.h >= 0.0 && t.w >= 0.0 && t.h >= 0.0, "negative box size");
        let (sw, sh) = (libm::sqrt(p.w), libm::sqrt(p.h));
        let (dx, dy) = (p.x - t.x, p.y - t.y);
        let (dw, dh) = (sw - libm::sqrt(t.w), sh - libm::sqrt(t.h));
        loss += dx * dx + dy * dy + dw * dw + dh * dh;
        grads[cell * pred.b + j] = [2.0 * dx, 2.0 * dy, dw / sw, dh / sh];
    }
    Ok(CoordLoss { loss, grads })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub coord: f64,
    pub noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { coord: 5.0, noobj: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadLoss {
    pub coord: f64,
    pub objectness: f64,
    pub class: f64,
    pub total: f64,
}

/// Full head loss on one item of raw output, with its gradient w.r.t. the raw values:
/// `coord_w * coordinate loss + (1 - c)^2 on owners + noobj_w * c^2 elsewhere
/// + class cross-entropy on responsible cells`.
pub fn head_loss(
    raw: &[f64],
    target: &YoloTarget,
    b: usize,
    classes: usize,
    weights: LossWeights,
) -> Result<(HeadLoss, Vec<f64>)> {
    let s = target.s;
    let cells = s * s;
    let pred = GridPrediction::from_raw(raw, s, b, classes)?;
    let coord = yolo_coord_loss(&pred, target)?;
    let mut grad = vec![0.0; raw.len()];
    let mut out = HeadLoss {
        coord: coord.loss,
        ..HeadLoss::default()
    };
    for cell in 0..cells {
        let owner = target.cells[cell].map(|t| (responsible_predictor(&pred, cell, &t), t));
        for j in 0..b {
            let p = pred.boxes[cell * b + j];
            let (dc, responsible) = match owner {
                Some((o, _)) if o == j => {
                    out.objectness += (p.confidence - 1.0) * (p.confidence - 1.0);
                    (2.0 * (p.confidence - 1.0), true)
                }
                _ => {
                    out.objectness += weights.noobj * p.confidence * p.confidence;
                    (weights.noobj * 2.0 * p.confidence, false)
                }
            };
            grad[(5 * j + 4) * cells + cell] = dc * p.confidence * (1.0 - p.confidence);
            if responsible {
                let g = coord.grads[cell * b + j];
                let sq = [p.x, p.y, p.w, p.h];
                for k in 0..4 {
                    grad[(5 * j + k) * cells + cell] = weights.coord * g[k] * sq[k] * (1.0 - sq[k]);
                }
            }
        }
        if let Some((_, t)) = owner {
            let probs = &pred.class_probs[cell * classes..(cell + 1) * classes];
            out.class -= libm::log(probs[t.class].max(f64::MIN_POSITIVE));
            for c in 0..classes {
                let one = if c == t.class { 1.0 } else { 0.0 };
                grad[(5 * b + c) * cells + cell] = probs[c] - one;
            }
        }
    }
    out.total = weights.coord * out.coord + out.objectness + out.class;
    Ok((out, grad))
}

/// Converts a grid prediction to absolute-pixel detections scoring above
/// `conf_threshold`; score = confidence x best class probability.
pub fn decode_predictions(pred: &GridPrediction, image_shape: (usize, usize), conf_threshold: f64) -> Vec<Detection> {
    let (ih, iw) = (image_shape.0 as f64, image_shape.1 as f64);
    let mut out = Vec::new();
    for cell in 0..pred.s * pred.s {
        let probs = &pred.class_probs[cell * pred.classes..(cell + 1) * pred.classes];
        let class = crate::training::argmax(probs);
        for j in 0..pred.b {
            let p = pred.boxes[cell * pred.b + j];
            let score = p.confidence * probs.get(class).copied().unwrap_or(0.0);
            if !(score > conf_threshold) {
                continue;
            }
            let u = unit_box(pred.s, cell, p.x, p.y, p.w.max(0.0), p.h.max(0.0));
            let bbox = BoxF {
                x: u.x * iw,
                y: u.y * ih,
                w: u.w * iw,
                h: u.h * ih,
            }
            .clip(ih, iw);
            out.push(Detection { bbox, class, score });
        }
    }
    out
}

fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy per-class suppression: walking by descending score, a box is
/// dropped when its IOU with an already kept box of its class exceeds the threshold.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score(detections) {
        let d = detections[i];
        if kept.iter().all(|k| k.class != d.class || box_iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Matches detections of `class` to ground truth at `iou_threshold`.
/// Returns the TP flag per detection in rank order, the matched IOUs, and the
/// ground-truth count.
fn match_class(set: &DetectionSet, class: usize, iou_threshold: f64) -> (Vec<bool>, Vec<f64>, usize) {
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    let mut n_gt = 0;
    for (img, im) in set.images.iter().enumerate() {
        n_gt += im.truth.iter().filter(|g| g.class == class).count();
        for (k, d) in im.detections.iter().enumerate() {
            if d.class == class {
                ranked.push((img, k, d.score));
            }
        }
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used: Vec<Vec<bool>> = set.images.iter().map(|im| vec![false; im.truth.len()]).collect();
    let mut tp = Vec::with_capacity(ranked.len());
    let mut ious = Vec::new();
    for (img, k, _) in ranked {
        let d = set.images[img].detections[k];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in set.images[img].truth.iter().enumerate() {
            if gt.class != class || used[img][g] {
                continue;
            }
            let v = box_iou(&d.bbox, &gt.bbox);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= iou_threshold => {
                used[img][g] = true;
                tp.push(true);
                ious.push(v);
            }
            _ => tp.push(false),
        }
    }
    (tp, ious, n_gt)
}

/// All-point interpolated area under the precision-recall curve.
fn pr_area(tp: &[bool], n_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut area = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        area += (r - prev) * p;
        prev = *r;
    }
    area
}

/// AP of one class; `None` when the class has no ground truth.
pub fn average_precision(set: &DetectionSet, class: usize, iou_threshold: f64) -> Option<f64> {
    let (tp, _, n_gt) = match_class(set, class, iou_threshold);
    (n_gt > 0).then(|| pr_area(&tp, n_gt))
}

fn gt_classes(set: &DetectionSet) -> Vec<usize> {
    let mut classes: Vec<usize> = set.images.iter().flat_map(|im| im.truth.iter().map(|g| g.class)).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Mean AP over the classes that have ground truth; 0 when none do.
pub fn mean_average_precision(set: &DetectionSet, iou_threshold: f64) -> f64 {
    let classes = gt_classes(set);
    if classes.is_empty() {
        return 0.0;
    }
    classes
        .iter()
        .map(|&c| average_precision(set, c, iou_threshold).unwrap_or(0.0))
        .sum::<f64>()
        / classes.len() as f64
}

/// The ten thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_schedule() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    /// `(threshold, mAP)` for every threshold of the schedule.
    pub per_threshold: Vec<(f64, f64)>,
    pub map50: f64,
    pub map75: f64,
    /// Mean of the per-threshold mAPs.
    pub map_schedule: f64,
    /// Mean box IOU over pairs matched at 0.5.
    pub miou: f64,
    pub classes: usize,
}

impl MapReport {
    /// `(key, value)` rows in a fixed order.
    pub fn entries(&self) -> [(&'static str, f64); 4] {
        [
            ("map50", self.map50),
            ("map75", self.map75),
            ("map50_95", self.map_schedule),
            ("miou", self.miou),
        ]
    }
}

pub fn map_evaluate(set: &DetectionSet, schedule: &[f64]) -> MapReport {
    let per_threshold: Vec<(f64, f64)> = schedule.iter().map(|&t| (t, mean_average_precision(set, t))).collect();
    let map_schedule = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64
    };
    let classes = gt_classes(set);
    let ious: Vec<f64> = classes.iter().flat_map(|&c| match_class(set, c, 0.5).1).collect();
    MapReport {
        per_threshold,
        map50: mean_average_precision(set, 0.5),
        map75: mean_average_precision(set, 0.75),
        map_schedule,
        miou: if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        },
        classes: classes.len(),
    }
}

/// Adaptive average pooling of every channel to `s x s` bins; bin `i` spans
/// rows `floor(i h / s) .. ceil((i + 1) h / s)`.
pub fn adaptive_avg_pool(x: &Tensor4, s: usize) -> Result<Tensor4> {
    let sh = x.shape();
    if s == 0 || sh.h < s || sh.w < s {
        return Err(invalid(format!("cannot pool {}x{} features to a {s}x{s} grid", sh.h, sh.w)));
    }
    let bins = |len: usize| -> Vec<(usize, usize)> {
        (0..s).map(|i| (i * len / s, ((i + 1) * len).div_ceil(s))).collect()
    };
    let (rows, cols) = (bins(sh.h), bins(sh.w));
    let mut out = Vec::with_capacity(sh.n * sh.c * s * s);
    for n in 0..sh.n {
        for plane in x.item(n).chunks_exact(sh.plane()) {
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        acc += plane[r * sh.w + c0..r * sh.w + c1].iter().sum::<f64>();
                    }
                    out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
    }
    Tensor4::from_vec(Shape4::new(sh.n, sh.c, s, s), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    pub grid: usize,
    pub boxes: usize,
    pub weights: LossWeights,
    pub train: TrainConfig,
    /// Pool the frozen features once up front instead of per batch.
    pub cache_features: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            grid: 7,
            boxes: 2,
            weights: LossWeights::default(),
            train: TrainConfig::default(),
            cache_features: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetectionData {
    pub images: Tensor4,
    pub objects: Vec<Vec<ObjectBox>>,
}

impl DetectionData {
    pub fn new(images: Tensor4, objects: Vec<Vec<ObjectBox>>) -> Result<Self> {
        if images.shape().n != objects.len() {
            return Err(invalid(format!(
                "{} images but {} annotation lists",
                images.shape().n,
                objects.len()
            )));
        }
        Ok(Self { images, objects })
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

/// The one added convolution mapping pooled tap features to the grid output.
///
/// Pooled features are standardised per channel, `(x - shift) * scale`, with
/// statistics of the training features, so every tap trains at the same scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead {
    pub tap: usize,
    pub grid: usize,
    pub boxes: usize,
    pub classes: usize,
    pub channels: usize,
    /// Conv kernel `(out, channels, 3, 3)` followed by `out` biases.
    pub params: Vec<f64>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl DetectionHead {
    pub fn new(tap: usize, channels: usize, grid: usize, boxes: usize, classes: usize, rng: &mut Rng) -> Self {
        let layer = Layer::conv3x3(channels, head_channels(boxes, classes));
        let mut params = vec![0.0; layer.param_count()];
        let bias = head_channels(boxes, classes);
        let bound = libm::sqrt(6.0 / (channels * 9) as f64);
        let n = params.len() - bias;
        for v in &mut params[..n] {
            *v = rng.uniform_in(-bound, bound);
        }
        Self {
            tap,
            grid,
            boxes,
            classes,
            channels,
            params,
            shift: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    /// Sets the standardisation from pooled training features.
    pub fn fit_standardisation(&mut self, pooled: &Tensor4) {
        let s = pooled.shape();
        let count = (s.n * s.h * s.w) as f64;
        for c in 0..s.c {
            let values = || (0..s.n).flat_map(move |n| pooled.item(n)[c * s.plane()..(c + 1) * s.plane()].iter());
            let mean = values().sum::<f64>() / count;
            let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let sd = libm::sqrt(var);
            self.shift[c] = mean;
            self.scale[c] = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        }
    }

    pub fn standardise(&self, pooled: &Tensor4) -> Tensor4 {
        let mut out = pooled.clone();
        let s = pooled.shape();
        for n in 0..s.n {
            for (c, plane) in out.item_mut(n).chunks_exact_mut(s.plane()).enumerate() {
                for v in plane {
                    *v = (*v - self.shift[c]) * self.scale[c];
                }
            }
        }
        out
    }

    pub fn layer(&self) -> Layer {
        Layer::conv3x3(self.channels, head_channels(self.boxes, self.classes))
    }

    /// Raw grid output from pooled `(n, channels, grid, grid)` features.
    pub fn forward_pooled(&self, pooled: &Tensor4) -> Result<Tensor4> {
        self.layer().forward(&self.params, &self.standardise(pooled))
    }

    /// Raw grid output for images run through the frozen backbone.
    pub fn forward(&self, spec: &NetworkSpec, params: &ModelParams, images: &Tensor4) -> Result<Tensor4> {
        self.forward_pooled(&grid_features(spec, params, images, self.tap, self.grid)?)
    }

    pub fn predict(&self, spec: &NetworkSpec, params: &ModelParams, images: &Tensor4) -> Result<Vec<GridPrediction>> {
        let raw = self.forward(spec, params, images)?;
        (0..raw.shape().n)
            .map(|i| GridPrediction::from_raw(raw.item(i), self.grid, self.boxes, self.classes))
            .collect()
    }
}

/// Frozen tap activations pooled to the grid, computed in chunks.
pub fn grid_features(spec: &NetworkSpec, params: &ModelParams, images: &Tensor4, tap: usize, grid: usize) -> Result<Tensor4> {
    let range = spec.layers_between_taps(0, tap)?;
    let n = images.shape().n;
    if n == 0 {
        let c = spec.tap_shape(tap)?.c;
        return Ok(Tensor4::zeros(Shape4::new(0, c, grid, grid)));
    }
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let acts = run_layers(spec, params, &images.gather(&idx), range.clone())?;
        parts.push(adaptive_avg_pool(&acts, grid)?);
    }
    Tensor4::concat(&parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectReport {
    pub epochs: Vec<EpochLog>,
    /// Objects dropped by target encoding (shared center cells).
    pub dropped: usize,
    pub backbone_fingerprint: u64,
}

/// Trains a detection head at `tap` on the frozen backbone `params`.
pub fn train_detection_head(
    spec: &NetworkSpec,
    params: &ModelParams,
    tap: usize,
    data: &DetectionData,
    cfg: &DetectConfig,
) -> Result<(DetectionHead, DetectReport)> {
    cfg.train.validate()?;
    params.check_against(spec)?;
    if tap == 0 || tap > spec.tap_count() {
        return Err(invalid(format!("detection tap {tap} outside 1..={}", spec.tap_count())));
    }
    if cfg.boxes == 0 {
        return Err(invalid("a detection head needs at least one box per cell"));
    }
    let tap_shape = spec.tap_shape(tap)?;
    if tap_shape.h < cfg.grid || tap_shape.w < cfg.grid || cfg.grid == 0 {
        return Err(invalid(format!(
            "tap {tap} is {}x{}, too small for a {}x{} grid",
            tap_shape.h, tap_shape.w, cfg.grid, cfg.grid
        )));
    }
    let input = spec.input_shape();
    if data.images.shape().with_n(1) != input {
        return Err(Error::ShapeMismatch {
            context: "detection data",
            expected: format!("images shaped {input}"),
            found: format!("{}", data.images.shape()),
        });
    }
    let classes = spec.classes();
    let targets: Vec<YoloTarget> = data
        .objects
        .iter()
        .map(|objs| {
            if let Some(o) = objs.iter().find(|o| o.class >= classes) {
                return Err(invalid(format!("object class {} outside 0..{classes}", o.class)));
            }
            encode_targets(objs, cfg.grid, (input.h, input.w))
        })
        .collect::<Result<_>>()?;
    let dropped = targets.iter().map(|t| t.dropped).sum();
    let fingerprint = params.fingerprint();

    let mut init = Rng::new(cfg.train.seed).derive("detect-head");
    let mut template = DetectionHead::new(tap, tap_shape.c, cfg.grid, cfg.boxes, classes, &mut init);
    let pooled = grid_features(spec, params, &data.images, tap, cfg.grid)?;
    template.fit_standardisation(&pooled);
    let cached = if cfg.cache_features {
        Some(template.standardise(&pooled))
    } else {
        None
    };
    drop(pooled);
    let mut blocks = vec![template.params.clone()];
    let mut rng = Rng::new(cfg.train.seed).derive("detect-shuffle");
    let train_cfg = TrainConfig {
        patience: 0,
        ..cfg.train.clone()
    };
    let epochs = fit(
        &mut blocks,
        data.len(),
        &train_cfg,
        0,
        &mut rng,
        |blocks, idx| {
            let x = match &cached {
                Some(f) => f.gather(idx),
                None => template.standardise(&grid_features(spec, params, &data.images.gather(idx), tap, cfg.grid)?),
            };
            let layer = template.layer();
            let raw = layer.forward(&blocks[0], &x)?;
            let mut d_raw = Tensor4::zeros(raw.shape());
            let mut loss = 0.0;
            for (k, &i) in idx.iter().enumerate() {
                let (l, g) = head_loss(raw.item(k), &targets[i], cfg.boxes, classes, cfg.weights)?;
                loss += l.total;
                d_raw.item_mut(k).copy_from_slice(&g);
            }
            let lg = layer.backward(&blocks[0], &x, &d_raw, true)?;
            Ok(BatchStats {
                loss,
                correct: 0,
                grads: vec![lg.d_params],
            })
        },
        |_| Ok(None),
    )?;
    debug_assert_eq!(fingerprint, params.fingerprint());
    let mut head = template;
    head.params = blocks.pop().expect("one block");
    Ok((
        head,
        DetectReport {
            epochs,
            dropped,
            backbone_fingerprint: fingerprint,
        },
    ))
}

/// Runs the head on `images` and returns NMS-filtered detections per image.
pub fn detect(
    spec: &NetworkSpec,
    params: &ModelParams,
    head: &DetectionHead,
    images: &Tensor4,
    conf_threshold: f64,
    nms_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    let input = spec.input_shape();
    Ok(head
        .predict(spec, params, images)?
        .iter()
        .map(|p| nms(&decode_predictions(p, (input.h, input.w), conf_threshold), nms_threshold))
        .collect())
}
