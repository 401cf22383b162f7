//! Box decoding, NMS and COCO-style average precision.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{site_center, stack_images, GtBox, Sample, CLASS_NAMES};
use crate::detector::{infer, BoxPyramid, DetectorConfig, DetectorParams, ScorePyramid};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub category: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub topk: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            conf_thresh: 0.05,
            iou_thresh: 0.5,
            topk: 100,
        }
    }
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Descending confidence; ties broken by content so the order is total.
fn by_confidence(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.category.cmp(&b.category))
        .then_with(|| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Greedy per-class NMS over `dets`, keeping at most `topk` overall.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64, topk: usize) -> Vec<Detection> {
    dets.sort_by(by_confidence);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.len() == topk {
            break;
        }
        if kept
            .iter()
            .all(|k| k.category != d.category || iou(&k.bbox, &d.bbox) <= iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

/// Decodes batch item `n`: one candidate per site from its best class,
/// boxes clipped to the image, then per-class NMS.
pub fn decode_and_nms(
    scores: &ScorePyramid,
    boxes: &BoxPyramid,
    n: usize,
    cfg: &DetectorConfig,
    dc: &DecodeConfig,
) -> Vec<Detection> {
    let size = cfg.input_size as f64;
    let mut cands = Vec::new();
    for l in 0..cfg.levels() {
        let stride = cfg.level_strides[l];
        let p = &scores.probs[l];
        let [_, c, h, w] = p.dims4("decode").expect("score map");
        let hw = h * w;
        let probs = &p.data()[n * c * hw..(n + 1) * c * hw];
        let dist = &boxes.levels[l].data()[n * 4 * hw..(n + 1) * 4 * hw];
        for i in 0..h {
            for j in 0..w {
                let site = i * w + j;
                let (mut best, mut conf) = (0, probs[site]);
                for k in 1..c {
                    if probs[k * hw + site] > conf {
                        best = k;
                        conf = probs[k * hw + site];
                    }
                }
                if conf < dc.conf_thresh {
                    continue;
                }
                let (cx, cy) = (site_center(j, stride), site_center(i, stride));
                let s = stride as f64;
                let d = |k: usize| dist[k * hw + site] * s;
                let bbox = [
                    (cx - d(0)).clamp(0.0, size),
                    (cy - d(1)).clamp(0.0, size),
                    (cx + d(2)).clamp(0.0, size),
                    (cy + d(3)).clamp(0.0, size),
                ];
                if bbox[0] < bbox[2] && bbox[1] < bbox[3] {
                    cands.push(Detection {
                        bbox,
                        category: best,
                        confidence: conf,
                    });
                }
            }
        }
    }
    nms(cands, dc.iou_thresh, dc.topk)
}

/// Runs the detector over `samples` in batches and decodes every image.
pub fn detect(
    cfg: &DetectorConfig,
    params: &DetectorParams,
    samples: &[Sample],
    batch: usize,
    dc: &DecodeConfig,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let pyr = infer(cfg, params, &stack_images(&refs))?;
        for n in 0..chunk.len() {
            out.push(decode_and_nms(&pyr.scores, &pyr.boxes, n, cfg, dc));
        }
    }
    Ok(out)
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// All-points interpolated AP of one class at one IoU threshold.
/// Returns `None` when the class has no ground truth.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], class: usize, thresh: f64) -> Option<f64> {
    let total: usize = gts.iter().map(|g| g.iter().filter(|b| b.category == class).count()).sum();
    if total == 0 {
        return None;
    }
    let mut flat: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.category == class).map(move |d| (i, d)))
        .collect();
    flat.sort_by(|(ia, a), (ib, b)| by_confidence(a, b).then(ia.cmp(ib)));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(flat.len());
    for (img, d) in flat {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gts[img].iter().enumerate() {
            if g.category != class || matched[img][k] {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        match best {
            Some((k, _)) => {
                matched[img][k] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / total as f64, tp as f64 / (tp + fp) as f64));
    }

    Some(all_points_ap(&curve))
}

/// `Σ (r_k − r_{k−1}) · max_{j ≥ k} p_j` over the (recall, precision) curve.
fn all_points_ap(curve: &[(f64, f64)]) -> f64 {
    let mut env = vec![0.0; curve.len()];
    let mut m = 0.0f64;
    for (k, &(_, p)) in curve.iter().enumerate().rev() {
        m = m.max(p);
        env[k] = m;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        ap += (r - prev) * env[k];
        prev = r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
}

/// AP values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    pub per_class: BTreeMap<String, ClassAp>,
}

impl Metrics {
    /// Plain-text table with AP values in percent.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>7}", "class", "AP", "AP50", "AP75");
        for (name, c) in &self.per_class {
            let _ = writeln!(s, "{:<10} {:>7.2} {:>7.2} {:>7.2}", name, 100.0 * c.ap, 100.0 * c.ap50, 100.0 * c.ap75);
        }
        let _ = writeln!(
            s,
            "{:<10} {:>7.2} {:>7.2} {:>7.2}",
            "all",
            100.0 * self.map,
            100.0 * self.ap50,
            100.0 * self.ap75
        );
        s
    }
}

/// mAP over classes with ground truth and over `thresholds`; AP50 and AP75
/// average over the same classes at a single threshold.
pub fn mean_ap(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], num_classes: usize, thresholds: &[f64]) -> Metrics {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let mut per_class = BTreeMap::new();
    let (mut sum, mut sum50, mut sum75, mut counted) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..num_classes {
        let Some(ap50) = average_precision(dets, gts, c, 0.5) else {
            continue;
        };
        let ap75 = average_precision(dets, gts, c, 0.75).unwrap_or(0.0);
        let ap = thresholds
            .iter()
            .map(|&t| average_precision(dets, gts, c, t).unwrap_or(0.0))
            .sum::<f64>()
            / thresholds.len() as f64;
        sum += ap;
        sum50 += ap50;
        sum75 += ap75;
        counted += 1;
        let name = CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |n| n.to_string());
        per_class.insert(name, ClassAp { ap, ap50, ap75 });
    }
    let k = counted.max(1) as f64;
    Metrics {
        map: sum / k,
        ap50: sum50 / k,
        ap75: sum75 / k,
        per_class,
    }
}

/// Detects on `samples` and scores against their ground truth.
pub fn evaluate(cfg: &DetectorConfig, params: &DetectorParams, samples: &[Sample]) -> Result<Metrics> {
    let dets = detect(cfg, params, samples, 16, &DecodeConfig::default())?;
    let gts: Vec<Vec<GtBox>> = samples.iter().map(|s| s.gt.clone()).collect();
    Ok(mean_ap(&dets, &gts, cfg.num_classes, &coco_thresholds()))
}
