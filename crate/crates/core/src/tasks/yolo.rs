//! Per-pixel ellipse detection: target encoding, loss and decoding.
//!
//! Each output pixel is a grid cell of `stride × stride` image pixels and
//! carries two predictors (confidence logit, centre offset vector, quadratic
//! form matrix) plus three shared class scores. Offsets are in stride units
//! from the cell centre and forms are scaled by `stride²`, so both are O(1).

use super::cells::{iou_ellipse, make_positive_definite, CellClass, Ellipse};
use crate::error::{Error, Result};
use crate::kernels::ChannelSpec;
use crate::network::{FieldStack, HeadKind, NUM_CLASSES};
use crate::scalar::Real;

pub const PREDICTORS: usize = 2;
/// Logit magnitude used when encoding certain targets.
pub const CERTAIN_LOGIT: f64 = 40.0;

#[derive(Clone, Debug, PartialEq)]
pub struct YoloConfig {
    pub stride: usize,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub iou_resolution: usize,
    /// eigenvalue floor for decoded forms, in pixel⁻²
    pub pd_floor: f64,
    pub nms_iou: f64,
}

impl Default for YoloConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            iou_resolution: 128,
            pd_floor: 1e-3,
            nms_iou: 0.5,
        }
    }
}

/// Row offsets of the detection head outputs (2D).
struct Rows;

impl Rows {
    fn conf(j: usize) -> usize {
        j
    }
    fn class(k: usize) -> usize {
        PREDICTORS + k
    }
    fn offset(j: usize, c: usize) -> usize {
        PREDICTORS + NUM_CLASSES + 2 * j + c
    }
    fn form(j: usize, e: usize) -> usize {
        PREDICTORS + NUM_CLASSES + 2 * PREDICTORS + 4 * j + e
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_pred<T: Real>(pred: &FieldStack<T>) -> Result<()> {
    if pred.dim() != 2 || pred.spec() != &HeadKind::Detect.out_spec(2) {
        return Err(Error::Shape(format!(
            "detection output must be {} in 2D, got {} in {}D",
            HeadKind::Detect.out_spec(2),
            pred.spec(),
            pred.dim()
        )));
    }
    Ok(())
}

fn cell_center(k: usize, stride: usize) -> f64 {
    (k * stride) as f64 + (stride as f64 - 1.0) / 2.0
}

/// Grid cell responsible for a centre, clamped to the grid.
fn cell_of(center: &[f64], grid: &[usize], stride: usize) -> [usize; 2] {
    let f = |i: usize| ((center[i] / stride as f64).floor().max(0.0) as usize).min(grid[i] - 1);
    [f(0), f(1)]
}

/// Raw values of one cell of one batch item.
struct CellView<'a, T> {
    data: &'a [T],
    base: usize,
    npix: usize,
}

impl<T: Real> CellView<'_, T> {
    fn get(&self, row: usize) -> f64 {
        self.data[self.base + row * self.npix].as_f64()
    }

    fn ellipse(&self, j: usize, kc: [usize; 2], cfg: &YoloConfig) -> Ellipse {
        let s = cfg.stride as f64;
        let center = vec![
            cell_center(kc[0], cfg.stride) + s * self.get(Rows::offset(j, 0)),
            cell_center(kc[1], cfg.stride) + s * self.get(Rows::offset(j, 1)),
        ];
        let m: Vec<f64> = (0..4).map(|e| self.get(Rows::form(j, e)) / (s * s)).collect();
        let class_scores: Vec<f64> = (0..NUM_CLASSES).map(|k| self.get(Rows::class(k))).collect();
        let best = (0..NUM_CLASSES)
            .max_by(|&a, &b| class_scores[a].total_cmp(&class_scores[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        Ellipse {
            center,
            q: make_positive_definite(&m, cfg.pd_floor),
            class: CellClass::ALL[best],
        }
    }
}

/// Loss value broken into its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct YoloLoss {
    pub coord: f64,
    pub conf_obj: f64,
    pub conf_noobj: f64,
    pub class: f64,
    pub total: f64,
}

/// Per image: `(cell, predictor, truth index)` for every responsible
/// predictor. Truths take the available predictor of their cell with the
/// higher IOU; a cell holds at most two truths.
fn assign<T: Real>(
    pred: &FieldStack<T>,
    b: usize,
    truths: &[Ellipse],
    cfg: &YoloConfig,
) -> Vec<([usize; 2], usize, usize)> {
    let grid = pred.shape().dims();
    let npix = pred.npix();
    let mut taken: std::collections::HashMap<[usize; 2], [bool; PREDICTORS]> = Default::default();
    let mut out = Vec::new();
    for (ti, t) in truths.iter().enumerate() {
        let kc = cell_of(&t.center, grid, cfg.stride);
        let used = taken.entry(kc).or_default();
        let view = CellView {
            data: pred.data(),
            base: b * pred.width() * npix + kc[0] * grid[1] + kc[1],
            npix,
        };
        let mut best: Option<(usize, f64)> = None;
        for (j, &u) in used.iter().enumerate() {
            if u {
                continue;
            }
            let iou = iou_ellipse(&view.ellipse(j, kc, cfg), t, cfg.iou_resolution).value;
            if best.is_none_or(|(_, v)| iou > v) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            out.push((kc, j, ti));
        }
    }
    out
}

/// YOLO-style loss summed over cells and averaged over the batch, with its
/// gradient with respect to the raw head outputs.
pub fn yolo_loss<T: Real>(
    pred: &FieldStack<T>,
    truths: &[Vec<Ellipse>],
    cfg: &YoloConfig,
) -> Result<(YoloLoss, Vec<T>)> {
    check_pred(pred)?;
    if truths.len() != pred.batch() {
        return Err(Error::Shape(format!(
            "{} truth lists for a batch of {}",
            truths.len(),
            pred.batch()
        )));
    }
    let grid = pred.shape().dims().to_vec();
    let npix = pred.npix();
    let width = pred.width();
    let s = cfg.stride as f64;
    let mut grad = vec![0.0f64; pred.data().len()];
    let mut loss = YoloLoss::default();
    let norm = 1.0 / pred.batch().max(1) as f64;
    for (b, ts) in truths.iter().enumerate() {
        let resp = assign(pred, b, ts, cfg);
        let mut responsible = vec![[false; PREDICTORS]; npix];
        for &(kc, j, ti) in &resp {
            let t = &ts[ti];
            let pix = kc[0] * grid[1] + kc[1];
            responsible[pix][j] = true;
            let base = b * width * npix + pix;
            let view = CellView {
                data: pred.data(),
                base,
                npix,
            };
            let at = |row: usize| base + row * npix;
            // box terms
            for c in 0..2 {
                let target = (t.center[c] - cell_center(kc[c], cfg.stride)) / s;
                let diff = view.get(Rows::offset(j, c)) - target;
                loss.coord += cfg.lambda_coord * diff * diff * norm;
                grad[at(Rows::offset(j, c))] += 2.0 * cfg.lambda_coord * diff * norm;
            }
            let m: Vec<f64> = (0..4).map(|e| view.get(Rows::form(j, e))).collect();
            let off = (m[1] + m[2]) / 2.0;
            let sym = [m[0], off, off, m[3]];
            for e in 0..4 {
                let diff = sym[e] - t.q[e] * s * s;
                loss.coord += cfg.lambda_coord * diff * diff * norm;
                grad[at(Rows::form(j, e))] += 2.0 * cfg.lambda_coord * diff * norm;
            }
            // confidence regressed to the achieved IOU
            let iou = iou_ellipse(&view.ellipse(j, kc, cfg), t, cfg.iou_resolution).value;
            let sg = sigmoid(view.get(Rows::conf(j)));
            loss.conf_obj += (sg - iou) * (sg - iou) * norm;
            grad[at(Rows::conf(j))] += 2.0 * (sg - iou) * sg * (1.0 - sg) * norm;
            // class
            let scores: Vec<f64> = (0..NUM_CLASSES).map(|k| view.get(Rows::class(k))).collect();
            let label = t.class.index();
            loss.class += crate::autodiff::cross_entropy(&scores, label)? * norm;
            let p = crate::autodiff::softmax(&scores);
            for k in 0..NUM_CLASSES {
                let g = p[k] - if k == label { 1.0 } else { 0.0 };
                grad[at(Rows::class(k))] += g * norm;
            }
        }
        for (pix, r) in responsible.iter().enumerate() {
            for (j, &is_resp) in r.iter().enumerate() {
                if is_resp {
                    continue;
                }
                let idx = b * width * npix + Rows::conf(j) * npix + pix;
                let sg = sigmoid(pred.data()[idx].as_f64());
                loss.conf_noobj += cfg.lambda_noobj * sg * sg * norm;
                grad[idx] += 2.0 * cfg.lambda_noobj * sg * sg * (1.0 - sg) * norm;
            }
        }
    }
    loss.total = loss.coord + loss.conf_obj + loss.conf_noobj + loss.class;
    Ok((loss, grad.into_iter().map(T::lit).collect()))
}

/// Raw head outputs that decode exactly to `truths`, with certain confidences
/// and class scores. `grid` is the output grid.
pub fn encode_truth(truths: &[Vec<Ellipse>], grid: [usize; 2], cfg: &YoloConfig) -> Result<FieldStack<f64>> {
    let spec: ChannelSpec = HeadKind::Detect.out_spec(2);
    let shape = crate::geometry::GridShape::new(grid.to_vec())?;
    let mut out = FieldStack::zeros(shape, spec, truths.len());
    let width = out.width();
    let npix = out.npix();
    let s = cfg.stride as f64;
    let data = out.data_mut();
    for (b, ts) in truths.iter().enumerate() {
        for pix in 0..npix {
            for j in 0..PREDICTORS {
                data[b * width * npix + Rows::conf(j) * npix + pix] = -CERTAIN_LOGIT;
                // a small default form that overlaps nothing
                data[b * width * npix + Rows::form(j, 0) * npix + pix] = 1e3;
                data[b * width * npix + Rows::form(j, 3) * npix + pix] = 1e3;
            }
        }
        let mut used = std::collections::HashMap::<[usize; 2], usize>::new();
        for t in ts {
            let kc = cell_of(&t.center, &grid, cfg.stride);
            let j = *used.get(&kc).unwrap_or(&0);
            if j >= PREDICTORS {
                continue;
            }
            used.insert(kc, j + 1);
            let pix = kc[0] * grid[1] + kc[1];
            let at = |row: usize| b * width * npix + row * npix + pix;
            data[at(Rows::conf(j))] = CERTAIN_LOGIT;
            for c in 0..2 {
                data[at(Rows::offset(j, c))] = (t.center[c] - cell_center(kc[c], cfg.stride)) / s;
            }
            for e in 0..4 {
                data[at(Rows::form(j, e))] = t.q[e] * s * s;
            }
            for k in 0..NUM_CLASSES {
                data[at(Rows::class(k))] = if k == t.class.index() {
                    CERTAIN_LOGIT
                } else {
                    -CERTAIN_LOGIT
                };
            }
        }
    }
    Ok(out)
}

/// A decoded ellipse with its confidence (the predicted IOU).
#[derive(Clone, Debug, PartialEq)]
pub struct Detected {
    pub ellipse: Ellipse,
    pub confidence: f64,
}

/// Predictors above `threshold`, forms made positive definite, then greedy
/// non-maximum suppression.
pub fn decode_detections<T: Real>(
    pred: &FieldStack<T>,
    b: usize,
    threshold: f64,
    cfg: &YoloConfig,
) -> Result<Vec<Detected>> {
    check_pred(pred)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let grid = pred.shape().dims();
    let npix = pred.npix();
    let mut cands = Vec::new();
    for k0 in 0..grid[0] {
        for k1 in 0..grid[1] {
            let view = CellView {
                data: pred.data(),
                base: b * pred.width() * npix + k0 * grid[1] + k1,
                npix,
            };
            for j in 0..PREDICTORS {
                let confidence = sigmoid(view.get(Rows::conf(j)));
                if confidence > threshold {
                    cands.push(Detected {
                        ellipse: view.ellipse(j, [k0, k1], cfg),
                        confidence,
                    });
                }
            }
        }
    }
    cands.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detected> = Vec::new();
    for c in cands {
        if kept
            .iter()
            .all(|k| iou_ellipse(&k.ellipse, &c.ellipse, cfg.iou_resolution).value <= cfg.nms_iou)
        {
            kept.push(c);
        }
    }
    Ok(kept)
}
