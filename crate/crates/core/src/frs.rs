//! Feature-richness masks and the masked distillation losses.
//!
//! The mask of level `l` is the per-site maximum of the frozen teacher's
//! class probabilities, `S_l = max_c y^t_lc`. Both distillation losses weight
//! each site by `S / N_l` with `N_l = Σ_ij S_lij`, so a level's contribution
//! is invariant to rescaling its mask.

use frs_autograd::{Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::detector::{BoundAdapter, FeaturePyramid, ScorePyramid};
use crate::error::{Error, Result};

/// Normalizers below this make a level contribute nothing.
pub const MIN_NORMALIZER: f64 = 1e-8;

/// Per-level masks `[N,1,H_l,W_l]` with cached normalizers `N_l[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RichnessMaskSet {
    masks: Vec<Tensor>,
    normalizers: Vec<Vec<f64>>,
}

impl RichnessMaskSet {
    /// Wraps precomputed masks; every value must lie in `[0, 1]`.
    pub fn from_masks(masks: Vec<Tensor>) -> Result<Self> {
        let mut normalizers = Vec::with_capacity(masks.len());
        for m in &masks {
            let [n, c, h, w] = m.dims4("richness mask")?;
            if c != 1 {
                return Err(TensorError::Dimension {
                    op: "richness mask",
                    axis: "C",
                    expected: 1,
                    found: c,
                }
                .into());
            }
            if let Some(v) = m.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Config(format!("mask value {v} outside [0, 1]")));
            }
            normalizers.push(
                (0..n)
                    .map(|i| m.data()[i * h * w..(i + 1) * h * w].iter().sum())
                    .collect(),
            );
        }
        Ok(Self { masks, normalizers })
    }

    pub fn levels(&self) -> usize {
        self.masks.len()
    }

    pub fn batch(&self) -> usize {
        self.masks.first().map_or(0, |m| m.shape()[0])
    }

    pub fn mask(&self, level: usize) -> &Tensor {
        &self.masks[level]
    }

    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    /// `N_l` for every batch item.
    pub fn normalizers(&self, level: usize) -> &[f64] {
        &self.normalizers[level]
    }

    /// Masks of batch item `n` only.
    pub fn item(&self, n: usize) -> RichnessMaskSet {
        RichnessMaskSet {
            masks: self.masks.iter().map(|m| m.batch_item(n)).collect(),
            normalizers: self.normalizers.iter().map(|v| vec![v[n]]).collect(),
        }
    }

    /// Elementwise product with per-level site indicators of the same shape.
    /// Normalizers are recomputed from the restricted masks.
    pub fn restricted(&self, keep: &[Vec<bool>]) -> Result<RichnessMaskSet> {
        if keep.len() != self.levels() {
            return Err(Error::Config(format!(
                "indicator has {} levels, masks have {}",
                keep.len(),
                self.levels()
            )));
        }
        let mut out = Vec::with_capacity(self.levels());
        for (m, k) in self.masks.iter().zip(keep) {
            if k.len() != m.numel() {
                return Err(Error::Config(format!(
                    "indicator has {} sites, mask has {}",
                    k.len(),
                    m.numel()
                )));
            }
            let data = m.data().iter().zip(k).map(|(&s, &on)| if on { s } else { 0.0 }).collect();
            out.push(Tensor::new(m.shape().to_vec(), data)?);
        }
        Self::from_masks(out)
    }

    /// Per-site weights `S / (N_l · batch)`, zero where `N_l` is negligible.
    fn site_weights(&self, level: usize) -> Tensor {
        let m = &self.masks[level];
        let n = m.shape()[0];
        let per = m.numel() / n;
        let mut w = m.clone();
        for (i, chunk) in w.data_mut().chunks_mut(per).enumerate() {
            let norm = self.normalizers[level][i];
            if norm < MIN_NORMALIZER {
                chunk.fill(0.0);
            } else {
                let scale = norm * n as f64;
                chunk.iter_mut().for_each(|v| *v /= scale);
            }
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub enable_fpn: bool,
    pub enable_head: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.5,
            enable_fpn: true,
            enable_head: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// FPN-only distillation with weight `alpha`.
    pub fn fpn_only(alpha: f64) -> Self {
        Self {
            alpha,
            beta: 0.0,
            enable_fpn: true,
            enable_head: false,
        }
    }
}

/// `S_l = max_c y_l` per site, computed outside any tape.
pub fn feature_richness_masks(teacher_scores: &ScorePyramid) -> Result<RichnessMaskSet> {
    let masks = teacher_scores
        .probs
        .iter()
        .map(|p| {
            let [n, c, h, w] = p.dims4("feature_richness_masks")?;
            let hw = h * w;
            let mut out = Tensor::zeros(&[n, 1, h, w]);
            let (src, dst) = (p.data(), out.data_mut());
            for b in 0..n {
                let item = &src[b * c * hw..(b + 1) * c * hw];
                let row = &mut dst[b * hw..(b + 1) * hw];
                row.copy_from_slice(&item[..hw]);
                for ch in 1..c {
                    for (d, &v) in row.iter_mut().zip(&item[ch * hw..(ch + 1) * hw]) {
                        if v > *d {
                            *d = v;
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    RichnessMaskSet::from_masks(masks)
}

/// A distillation loss and its per-level contributions.
#[derive(Debug, Clone)]
pub struct LevelLosses {
    pub total: Var,
    pub levels: Vec<Var>,
}

fn sum_levels(tape: &mut Tape, levels: Vec<Var>) -> Result<LevelLosses> {
    let mut total = levels[0];
    for &v in &levels[1..] {
        total = tape.add(total, v)?;
    }
    Ok(LevelLosses { total, levels })
}

fn check_levels(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Config(format!("{what}: {a} levels vs {b} levels")));
    }
    Ok(())
}

/// `Σ_l (1/N_l) Σ_ij S_lij Σ_c (F^t − φ(F^s))²`, averaged over the batch.
pub fn fpn_distill_loss(
    tape: &mut Tape,
    teacher: &FeaturePyramid,
    student: &[Var],
    adapter: &BoundAdapter,
    masks: &RichnessMaskSet,
) -> Result<LevelLosses> {
    check_levels("fpn_distill_loss", teacher.levels.len(), student.len())?;
    check_levels("fpn_distill_loss", teacher.levels.len(), masks.levels())?;
    let mut levels = Vec::with_capacity(student.len());
    for (l, &fs) in student.iter().enumerate() {
        let adapted = adapter.apply(tape, l, fs)?;
        let ft = tape.constant(teacher.levels[l].clone());
        let sq = tape.mse_elementwise(ft, adapted)?;
        levels.push(tape.site_weighted_sum(sq, masks.site_weights(l))?);
    }
    sum_levels(tape, levels)
}

/// `Σ_l (1/N_l) Σ_ij S_lij Σ_c BCE(y^s, y^t)`, averaged over the batch.
pub fn head_distill_loss(
    tape: &mut Tape,
    teacher: &ScorePyramid,
    student_probs: &[Var],
    masks: &RichnessMaskSet,
) -> Result<LevelLosses> {
    check_levels("head_distill_loss", teacher.probs.len(), student_probs.len())?;
    check_levels("head_distill_loss", teacher.probs.len(), masks.levels())?;
    let mut levels = Vec::with_capacity(student_probs.len());
    for (l, &ys) in student_probs.iter().enumerate() {
        let (ct, cs) = (teacher.probs[l].shape()[1], tape.shape(ys)[1]);
        if ct != cs {
            return Err(Error::Config(format!(
                "teacher predicts {ct} classes, student predicts {cs}"
            )));
        }
        let yt = tape.constant(teacher.probs[l].clone());
        let bce = tape.bce_prob(ys, yt)?;
        levels.push(tape.site_weighted_sum(bce, masks.site_weights(l))?);
    }
    sum_levels(tape, levels)
}

/// `L_GT + α·L_FPN + β·L_head`; disabled terms are passed as `None`.
pub fn total_loss(
    tape: &mut Tape,
    l_gt: Var,
    l_fpn: Option<Var>,
    l_head: Option<Var>,
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mut total = l_gt;
    if let (true, Some(v)) = (cfg.enable_fpn, l_fpn) {
        let w = tape.mul_scalar(v, cfg.alpha);
        total = tape.add(total, w)?;
    }
    if let (true, Some(v)) = (cfg.enable_head, l_head) {
        let w = tape.mul_scalar(v, cfg.beta);
        total = tape.add(total, w)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{AdapterParams, DetectorConfig};
    use frs_autograd::sigmoid;

    fn scores(probs: Vec<Tensor>) -> ScorePyramid {
        ScorePyramid {
            logits: probs.clone(),
            probs,
        }
    }

    #[test]
    fn zero_logits_give_half_masks() {
        let p = Tensor::full(&[2, 3, 4, 4], sigmoid(0.0));
        let m = feature_richness_masks(&scores(vec![p])).unwrap();
        assert!(m.mask(0).data().iter().all(|&v| v == 0.5));
        assert_eq!(m.normalizers(0), &[8.0, 8.0]);
    }

    #[test]
    fn mask_picks_max_class() {
        let logits = [0.2, -1.0, 1.5];
        let p = Tensor::new(vec![1, 3, 1, 1], logits.iter().map(|&x| sigmoid(x)).collect()).unwrap();
        let m = feature_richness_masks(&scores(vec![p])).unwrap();
        assert!((m.mask(0).item() - 0.817574).abs() < 1e-6);
    }

    #[test]
    fn fpn_loss_hand_example() {
        let mut tape = Tape::new();
        let masks = RichnessMaskSet::from_masks(vec![Tensor::full(&[1, 1, 1, 1], 0.8)]).unwrap();
        let teacher = FeaturePyramid {
            levels: vec![Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap()],
        };
        let fs = tape.leaf(Tensor::new(vec![1, 2, 1, 1], vec![0.5, 1.5]).unwrap());
        let adapter = AdapterParams { levels: vec![None] }.bind(&mut tape, true);
        let loss = fpn_distill_loss(&mut tape, &teacher, &[fs], &adapter, &masks).unwrap();
        assert!((tape.value(loss.total).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn head_loss_hand_examples() {
        let masks = RichnessMaskSet::from_masks(vec![Tensor::full(&[1, 1, 1, 1], 1.0)]).unwrap();
        for (y, expected) in [(1.0, 0.0), (0.9, -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln()))] {
            let mut tape = Tape::new();
            let t = scores(vec![Tensor::full(&[1, 1, 1, 1], y)]);
            let ys = tape.leaf(Tensor::full(&[1, 1, 1, 1], y));
            let loss = head_distill_loss(&mut tape, &t, &[ys], &masks).unwrap();
            let v = tape.value(loss.total).item();
            assert!((v - expected).abs() <= 2e-7, "{v} vs {expected}");
        }
    }

    #[test]
    fn head_loss_rejects_class_mismatch() {
        let masks = RichnessMaskSet::from_masks(vec![Tensor::full(&[1, 1, 2, 2], 1.0)]).unwrap();
        let mut tape = Tape::new();
        let t = scores(vec![Tensor::full(&[1, 3, 2, 2], 0.5)]);
        let ys = tape.leaf(Tensor::full(&[1, 2, 2, 2], 0.5));
        assert!(matches!(
            head_distill_loss(&mut tape, &t, &[ys], &masks),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_level_is_guarded() {
        let masks = RichnessMaskSet::from_masks(vec![Tensor::zeros(&[2, 1, 2, 2])]).unwrap();
        let mut tape = Tape::new();
        let teacher = FeaturePyramid {
            levels: vec![Tensor::full(&[2, 3, 2, 2], 1.0)],
        };
        let fs = tape.leaf(Tensor::zeros(&[2, 3, 2, 2]));
        let adapter = AdapterParams { levels: vec![None] }.bind(&mut tape, true);
        let loss = fpn_distill_loss(&mut tape, &teacher, &[fs], &adapter, &masks).unwrap();
        assert_eq!(tape.value(loss.total).item(), 0.0);
        tape.backward(loss.total).unwrap();
        assert!(tape.grad(fs).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let [g, f, h] = [1.0, 0.5, 0.3].map(|v| tape.leaf(Tensor::scalar(v)));
        let cfg = DistillConfig {
            alpha: 1.0,
            beta: 1.0,
            enable_fpn: true,
            enable_head: true,
        };
        let t = total_loss(&mut tape, g, Some(f), Some(h), &cfg).unwrap();
        assert!((tape.value(t).item() - 1.8).abs() < 1e-15);
        let fpn = DistillConfig { enable_head: false, ..cfg };
        let t = total_loss(&mut tape, g, Some(f), Some(h), &fpn).unwrap();
        assert_eq!(tape.value(t).item(), 1.5);
        let off = DistillConfig { alpha: 0.0, beta: 0.0, ..cfg };
        let t = total_loss(&mut tape, g, Some(f), Some(h), &off).unwrap();
        assert_eq!(tape.value(t).item(), 1.0);
        let bad = DistillConfig { alpha: -1.0, ..cfg };
        assert!(matches!(total_loss(&mut tape, g, None, None, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn restriction_recomputes_normalizers() {
        let m = RichnessMaskSet::from_masks(vec![Tensor::new(vec![1, 1, 1, 3], vec![0.2, 0.4, 0.6]).unwrap()])
            .unwrap();
        let r = m.restricted(&[vec![true, false, true]]).unwrap();
        assert_eq!(r.mask(0).data(), &[0.2, 0.0, 0.6]);
        assert!((r.normalizers(0)[0] - 0.8).abs() < 1e-15);
        assert!(m.restricted(&[vec![true]]).is_err());
    }

    #[test]
    fn adapter_is_optional_when_channels_match() {
        let t = DetectorConfig::teacher();
        let a = AdapterParams::build(&t, &t, &mut crate::rng::stream(0, crate::rng::Stream::AdapterInit)).unwrap();
        assert!(a.is_identity());
    }
}
