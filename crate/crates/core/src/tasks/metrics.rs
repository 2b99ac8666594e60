//! Task metrics, including the worst case over group views.

use super::cells::{iou_ellipse, CellImage, Ellipse};
use super::classify::LabeledImage;
use super::register::{AffineLabel, RegistrationSample};
use super::stack_images;
use super::yolo::{decode_detections, Detected, YoloConfig};
use crate::error::Result;
use crate::geometry::{GroupElement, TensorField};
use crate::network::{FieldStack, Model};
use crate::scalar::Real;

/// Index of the largest score; ties go to the lower index.
pub fn argmax<T: Real>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// One-vs-rest area under the ROC curve averaged over classes that have both
/// positive and negative samples.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let classes = scores.first().map_or(0, Vec::len);
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(s, _)| s[c])
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l != c)
            .map(|(s, _)| s[c])
            .collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total += wins / (pos.len() * neg.len()) as f64;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}

/// Model outputs for many inputs, evaluated in chunks.
fn predict_all<T: Real>(model: &Model<T>, images: &[TensorField<f64>], chunk: usize) -> Result<Vec<FieldStack<T>>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let y = model.predict(&stack_images::<T>(part)?)?;
        out.extend((0..y.batch()).map(|b| y.item(b)));
    }
    Ok(out)
}

fn views(images: &[TensorField<f64>], g: &GroupElement) -> Result<Vec<TensorField<f64>>> {
    images.iter().map(|x| crate::geometry::act_on_field(g, x)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyEval {
    pub accuracy: f64,
    /// a sample counts only if every view is classified correctly
    pub worst_case_accuracy: f64,
    pub auc: f64,
    /// largest score difference between a view and the untransformed input
    pub max_view_deviation: f64,
    pub mean_loss: f64,
}

pub fn evaluate_classification<T: Real>(
    model: &Model<T>,
    data: &[LabeledImage],
    group: &[GroupElement],
    chunk: usize,
) -> Result<ClassifyEval> {
    let images: Vec<_> = data.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let base = predict_all(model, &images, chunk)?;
    let scores: Vec<Vec<f64>> = base
        .iter()
        .map(|y| y.data().iter().map(|v| v.as_f64()).collect())
        .collect();
    let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let mut all_right: Vec<bool> = preds.iter().zip(&labels).map(|(p, l)| p == l).collect();
    let mut dev: f64 = 0.0;
    for g in group.iter().filter(|g| !g.is_identity()) {
        let ys = predict_all(model, &views(&images, g)?, chunk)?;
        for (i, y) in ys.iter().enumerate() {
            dev = dev.max(y.max_abs_diff(&base[i]));
            if argmax(y.data()) != labels[i] {
                all_right[i] = false;
            }
        }
    }
    let mean_loss = scores
        .iter()
        .zip(&labels)
        .map(|(s, &l)| crate::autodiff::cross_entropy(s, l))
        .sum::<Result<f64>>()?
        / labels.len().max(1) as f64;
    Ok(ClassifyEval {
        accuracy: accuracy(&preds, &labels),
        worst_case_accuracy: all_right.iter().filter(|&&r| r).count() as f64 / labels.len().max(1) as f64,
        auc: macro_auc(&scores, &labels),
        max_view_deviation: dev,
        mean_loss,
    })
}

pub fn worst_case_accuracy<T: Real>(model: &Model<T>, data: &[LabeledImage], group: &[GroupElement]) -> Result<f64> {
    Ok(evaluate_classification(model, data, group, 16)?.worst_case_accuracy)
}

/// Mean squared error over the linear part and translation.
pub fn mse_affine(pred: &AffineLabel, truth: &AffineLabel) -> f64 {
    let (a, b) = (pred.to_vec(), truth.to_vec());
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Mean over samples of the mean pairwise squared distance between the
/// per-view predictions, each mapped back to the canonical frame.
pub fn orientation_consistency(per_sample_views: &[Vec<AffineLabel>]) -> f64 {
    let mut total = 0.0;
    for views in per_sample_views {
        let vs: Vec<Vec<f64>> = views.iter().map(AffineLabel::to_vec).collect();
        let mut acc = 0.0;
        let mut pairs = 0;
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                acc += vs[i].iter().zip(&vs[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                pairs += 1;
            }
        }
        if pairs > 0 {
            total += acc / pairs as f64;
        }
    }
    total / per_sample_views.len().max(1) as f64
}

pub fn output_to_affine<T: Real>(y: &FieldStack<T>) -> AffineLabel {
    let t = y.tensors(0);
    let d = y.dim();
    AffineLabel {
        columns: t[..d].iter().map(|c| c.iter().map(|v| v.as_f64()).collect()).collect(),
        translation: t[d].iter().map(|v| v.as_f64()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegisterEval {
    pub mse: f64,
    /// mean over samples of the largest view MSE
    pub worst_case_mse: f64,
    pub orientation_consistency: f64,
    /// largest `|pred(R x) − R·pred(x)|` over samples, views and numbers
    pub label_equivariance: f64,
}

pub fn evaluate_registration<T: Real>(
    model: &Model<T>,
    data: &[RegistrationSample],
    group: &[GroupElement],
    chunk: usize,
) -> Result<RegisterEval> {
    let images: Vec<_> = data.iter().map(|s| s.volume.clone()).collect();
    let base: Vec<AffineLabel> = predict_all(model, &images, chunk)?
        .iter()
        .map(output_to_affine)
        .collect();
    let mut worst: Vec<f64> = base.iter().zip(data).map(|(p, s)| mse_affine(p, &s.label)).collect();
    let mse = worst.iter().sum::<f64>() / data.len().max(1) as f64;
    let mut canonical: Vec<Vec<AffineLabel>> = base.iter().map(|p| vec![p.clone()]).collect();
    let mut equiv: f64 = 0.0;
    for g in group.iter().filter(|g| !g.is_identity()) {
        let ys = predict_all(model, &views(&images, g)?, chunk)?;
        let inv = g.inverse();
        for (i, y) in ys.iter().enumerate() {
            let p = output_to_affine(y);
            worst[i] = worst[i].max(mse_affine(&p, &data[i].label.transform(g)));
            let expect = base[i].transform(g).to_vec();
            for (a, b) in p.to_vec().iter().zip(&expect) {
                equiv = equiv.max((a - b).abs());
            }
            canonical[i].push(p.transform(&inv));
        }
    }
    Ok(RegisterEval {
        mse,
        worst_case_mse: worst.iter().sum::<f64>() / data.len().max(1) as f64,
        orientation_consistency: orientation_consistency(&canonical),
        label_equivariance: equiv,
    })
}

/// Greedy one-to-one matching by IOU; returns the IOU of each truth's match
/// (0 when unmatched).
pub fn match_ious(dets: &[Detected], truths: &[Ellipse], resolution: usize) -> Vec<f64> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, t) in truths.iter().enumerate() {
        for (di, d) in dets.iter().enumerate() {
            let v = iou_ellipse(&d.ellipse, t, resolution).value;
            if v > 0.0 {
                pairs.push((v, ti, di));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut best = vec![0.0; truths.len()];
    let mut t_used = vec![false; truths.len()];
    let mut d_used = vec![false; dets.len()];
    for (v, ti, di) in pairs {
        if !t_used[ti] && !d_used[di] {
            t_used[ti] = true;
            d_used[di] = true;
            best[ti] = v;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectEval {
    /// mean over ground-truth cells of the IOU of their matched detection
    pub mean_iou: f64,
    /// smallest mean IOU over the group views
    pub worst_case_mean_iou: f64,
    pub truths: usize,
    pub detections: usize,
    /// detections not matched to any truth
    pub false_positives: usize,
    /// cross-view agreement after mapping detections back (0 when no group given)
    pub max_center_deviation: f64,
    pub max_form_deviation: f64,
    pub count_mismatches: usize,
}

/// Detections of every item, decoded from the untransformed inputs.
pub fn detect_all<T: Real>(
    model: &Model<T>,
    images: &[TensorField<f64>],
    threshold: f64,
    cfg: &YoloConfig,
    chunk: usize,
) -> Result<Vec<Vec<Detected>>> {
    predict_all(model, images, chunk)?
        .iter()
        .map(|y| decode_detections(y, 0, threshold, cfg))
        .collect()
}

pub fn evaluate_detection<T: Real>(
    model: &Model<T>,
    data: &[CellImage],
    threshold: f64,
    cfg: &YoloConfig,
    group: &[GroupElement],
    chunk: usize,
) -> Result<DetectEval> {
    let images: Vec<_> = data.iter().map(|s| s.image.clone()).collect();
    let base = detect_all(model, &images, threshold, cfg, chunk)?;
    let (mut iou_sum, mut truths, mut dets, mut fps) = (0.0, 0, 0, 0);
    for (d, s) in base.iter().zip(data) {
        let m = match_ious(d, &s.cells, cfg.iou_resolution);
        iou_sum += m.iter().sum::<f64>();
        truths += s.cells.len();
        dets += d.len();
        fps += d.len() - m.iter().filter(|&&v| v > 0.0).count();
    }
    let (mut cdev, mut qdev, mut mismatches): (f64, f64, usize) = (0.0, 0.0, 0);
    let mut worst = iou_sum;
    for g in group.iter().filter(|g| !g.is_identity()) {
        let inv = g.inverse();
        let vs = detect_all(model, &views(&images, g)?, threshold, cfg, chunk)?;
        let mut view_sum = 0.0;
        for (i, v) in vs.iter().enumerate() {
            let dims = images[i].shape().dims();
            let mapped: Vec<Ellipse> = v.iter().map(|d| d.ellipse.transform(&inv, dims)).collect();
            let back: Vec<Detected> = v
                .iter()
                .zip(&mapped)
                .map(|(d, e)| Detected {
                    ellipse: e.clone(),
                    confidence: d.confidence,
                })
                .collect();
            view_sum += match_ious(&back, &data[i].cells, cfg.iou_resolution)
                .iter()
                .sum::<f64>();
            if mapped.len() != base[i].len() {
                mismatches += 1;
                continue;
            }
            for b in &base[i] {
                let (c, q) = mapped
                    .iter()
                    .map(|m| {
                        let c = (0..2)
                            .map(|k| (m.center[k] - b.ellipse.center[k]).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        let q = (0..4).map(|k| (m.q[k] - b.ellipse.q[k]).powi(2)).sum::<f64>().sqrt();
                        (c, q)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .unwrap_or((f64::INFINITY, f64::INFINITY));
                cdev = cdev.max(c);
                qdev = qdev.max(q);
            }
        }
        worst = worst.min(view_sum);
    }
    Ok(DetectEval {
        mean_iou: if truths == 0 { 0.0 } else { iou_sum / truths as f64 },
        worst_case_mean_iou: if truths == 0 { 0.0 } else { worst / truths as f64 },
        truths,
        detections: dets,
        false_positives: fps,
        max_center_deviation: cdev,
        max_form_deviation: qdev,
        count_mismatches: mismatches,
    })
}
