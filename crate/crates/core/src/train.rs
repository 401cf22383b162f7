//! Detection loss, SGD and the teacher, baseline and distillation loops.

use std::fmt;
use std::path::PathBuf;

use frs_autograd::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{partition_regions, Region};
use crate::data::{batch_targets, stack_images, BatchTargets, Dataset, GtBox, Sample};
use crate::detector::{
    forward, infer, init_student, init_teacher, AdapterParams, DetectorConfig, DetectorParams, Pyramids,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::frs::{feature_richness_masks, fpn_distill_loss, head_distill_loss, total_loss, DistillConfig};
use crate::rng::{stream, Stream};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations at which the learning rate is multiplied by `lr_decay`.
    /// `None` places them at 2/3 and 8/9 of the run.
    pub milestones: Option<Vec<usize>>,
    pub lr_decay: f64,
    /// Linear warmup length; 0 disables warmup.
    pub warmup_iters: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// First iteration at which distillation terms are applied.
    pub distill_start: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: None,
            lr_decay: 0.1,
            warmup_iters: 200,
            grad_clip: Some(5.0),
            distill_start: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn milestones(&self) -> Vec<usize> {
        self.milestones
            .clone()
            .unwrap_or_else(|| vec![self.iterations * 2 / 3, self.iterations * 8 / 9])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight decay >= 0".into());
        }
        let ms = self.milestones();
        if ms.windows(2).any(|w| w[0] > w[1]) || ms.iter().any(|&m| m > self.iterations) {
            return bad(format!("milestones {ms:?} must be ascending and within {} iterations", self.iterations));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad clip {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        let steps = self.milestones().iter().filter(|&&m| iter >= m).count();
        let mut lr = self.learning_rate * self.lr_decay.powi(steps as i32);
        if iter < self.warmup_iters {
            lr *= (iter + 1) as f64 / self.warmup_iters as f64;
        }
        lr
    }
}

/// Losses logged for one iteration; disabled terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub lgt: f64,
    pub lfpn: f64,
    pub lhead: f64,
    pub total: f64,
}

impl LossRow {
    pub fn progress_line(&self, iter: usize) -> String {
        format!(
            "iter={iter} lgt={:.6} lfpn={:.6} lhead={:.6} total={:.6}",
            self.lgt, self.lfpn, self.lhead, self.total
        )
    }
}

/// Site selection for region-restricted distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRestriction {
    pub regions: Vec<Region>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub distill: Option<DistillConfig>,
    pub regions: Option<RegionRestriction>,
    pub dataset: DatasetRef,
    pub losses: Vec<LossRow>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<Metrics>,
}

impl RunRecord {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().map_or(f64::NAN, |r| r.total)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().map_or(f64::NAN, |r| r.total)
    }

    /// Validation AP at IoU 0.5, in percent.
    pub fn ap50(&self) -> f64 {
        self.metrics.as_ref().map_or(f64::NAN, |m| 100.0 * m.ap50)
    }
}

/// The detection loss and its two terms, each normalized by `max(#pos, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// Sigmoid focal loss on class logits plus L1 on box distances at positive sites.
pub fn detection_loss(tape: &mut Tape, logits: &[Var], boxes: &[Var], targets: &BatchTargets) -> Result<DetectionLoss> {
    let norm = 1.0 / targets.num_positive.max(1) as f64;
    let mut cls = None;
    let mut reg = None;
    for l in 0..logits.len() {
        let f = tape.sigmoid_focal_sum(logits[l], targets.cls[l].clone(), FOCAL_GAMMA, FOCAL_ALPHA)?;
        let t = tape.constant(targets.boxes[l].clone());
        let d = tape.sub(boxes[l], t)?;
        let a = tape.abs(d);
        let r = tape.site_weighted_sum(a, targets.positive[l].clone())?;
        cls = Some(match cls {
            None => f,
            Some(c) => tape.add(c, f)?,
        });
        reg = Some(match reg {
            None => r,
            Some(c) => tape.add(c, r)?,
        });
    }
    let cls = tape.mul_scalar(cls.expect("at least one level"), norm);
    let reg = tape.mul_scalar(reg.expect("at least one level"), norm);
    let total = tape.add(cls, reg)?;
    Ok(DetectionLoss { total, cls, reg })
}

/// Epoch-wise shuffled batches over `0..n`.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            rng: stream(seed, Stream::Batches),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// SGD with momentum and L2 weight decay.
struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn new(tensors: &[&mut Tensor]) -> Self {
        Self {
            velocity: tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], cfg: &TrainConfig, lr: f64) {
        let scale = match cfg.grad_clip {
            Some(c) => {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let g = g * scale + cfg.weight_decay * *p;
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// Frozen teacher with its outputs memoized per training image.
pub struct Teacher {
    pub config: DetectorConfig,
    pub params: DetectorParams,
    cache: Vec<Pyramids>,
}

impl Teacher {
    /// Runs the teacher once over `samples`; item `i` of the cache belongs to `samples[i]`.
    pub fn new(config: DetectorConfig, params: DetectorParams, samples: &[Sample]) -> Result<Self> {
        let mut cache = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(16) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let out = infer(&config, &params, &stack_images(&refs))?;
            cache.extend((0..chunk.len()).map(|n| out.item(n)));
        }
        Ok(Self { config, params, cache })
    }

    pub fn outputs(&self, indices: &[usize]) -> Result<Pyramids> {
        let items: Vec<&Pyramids> = indices.iter().map(|&i| &self.cache[i]).collect();
        Pyramids::stack(&items)
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }
}

struct DistillSetup<'a> {
    teacher: &'a Teacher,
    config: DistillConfig,
    restriction: Option<&'a RegionRestriction>,
}

/// Trained weights plus the run's record.
pub struct TrainOutput {
    pub params: DetectorParams,
    pub adapter: Option<AdapterParams>,
    pub record: RunRecord,
}

pub type Progress<'a> = &'a mut dyn FnMut(usize, &LossRow);

#[allow(clippy::too_many_arguments)]
fn run(
    name: &str,
    cfg: &DetectorConfig,
    mut params: DetectorParams,
    data: &Dataset,
    tcfg: &TrainConfig,
    distill: Option<DistillSetup>,
    progress: Progress,
) -> Result<TrainOutput> {
    tcfg.validate()?;
    let train = data.train();
    let mut adapter = match &distill {
        Some(d) if d.config.enable_fpn => Some(AdapterParams::build(
            cfg,
            &d.teacher.config,
            &mut stream(tcfg.seed, Stream::AdapterInit),
        )?),
        _ => None,
    };
    let mut sampler = BatchSampler::new(tcfg.seed, train.len());
    let mut opt = {
        let mut all: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| t).collect();
        if let Some(a) = adapter.as_mut() {
            all.extend(a.tensors_mut().into_iter().map(|(_, t)| t));
        }
        Sgd::new(&all)
    };
    let mut losses = Vec::with_capacity(tcfg.iterations);

    for iter in 0..tcfg.iterations {
        let idx = sampler.next(tcfg.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let gts: Vec<&[GtBox]> = batch.iter().map(|s| s.gt.as_slice()).collect();
        let targets = batch_targets(&gts, cfg);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let bound_adapter = adapter.as_ref().map(|a| a.bind(&mut tape, true));
        let x = tape.constant(stack_images(&batch));
        let out = forward(cfg, &bound, &mut tape, x)?;
        let lgt = detection_loss(&mut tape, &out.logits, &out.boxes, &targets)?.total;

        let (mut lfpn, mut lhead) = (None, None);
        let mut dcfg = DistillConfig {
            alpha: 0.0,
            beta: 0.0,
            enable_fpn: false,
            enable_head: false,
        };
        if let Some(d) = distill.as_ref().filter(|_| iter >= tcfg.distill_start) {
            dcfg = d.config;
            let t = d.teacher.outputs(&idx)?;
            let mut masks = feature_richness_masks(&t.scores)?;
            if let Some(r) = d.restriction {
                let part = partition_regions(&masks, &gts, &d.teacher.config, r.tau)?;
                masks = masks.restricted(&part.indicator(&r.regions))?;
            }
            if d.config.enable_fpn {
                let ba = bound_adapter.as_ref().expect("adapter built when FPN distillation is on");
                lfpn = Some(fpn_distill_loss(&mut tape, &t.features, &out.features, ba, &masks)?.total);
            }
            if d.config.enable_head {
                lhead = Some(head_distill_loss(&mut tape, &t.scores, &out.probs, &masks)?.total);
            }
        }
        let total = total_loss(&mut tape, lgt, lfpn, lhead, &dcfg)?;

        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let row = LossRow {
            lgt: tape.value(lgt).item(),
            lfpn: value(lfpn),
            lhead: value(lhead),
            total: tape.value(total).item(),
        };
        if !row.total.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                what: "total loss",
            });
        }
        tape.backward(total)?;

        let mut grads: Vec<Vec<f64>> = Vec::new();
        let grad_of = |v: Var, n: usize| tape.grad_slice(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        for (name, t) in params.iter() {
            grads.push(grad_of(bound.var(name), t.numel()));
        }
        if let (Some(a), Some(ba)) = (adapter.as_ref(), bound_adapter.as_ref()) {
            for ((_, t), v) in a.named().into_iter().zip(ba.vars()) {
                grads.push(grad_of(v, t.numel()));
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: iter,
                what: "gradient",
            });
        }
        let mut all: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| t).collect();
        if let Some(a) = adapter.as_mut() {
            all.extend(a.tensors_mut().into_iter().map(|(_, t)| t));
        }
        opt.step(&mut all, &grads, tcfg, tcfg.lr_at(iter));

        progress(iter, &row);
        losses.push(row);
    }

    let metrics = evaluate(cfg, &params, data.val())?;
    let distill_cfg = distill.as_ref().map(|d| d.config);
    let regions = distill.as_ref().and_then(|d| d.restriction.cloned());
    let dataset = DatasetRef {
        seed: data.seed,
        count: data.samples.len(),
    };
    let config_hash = config_hash(name, cfg, tcfg, distill_cfg.as_ref(), regions.as_ref(), &dataset)?;
    Ok(TrainOutput {
        params,
        adapter,
        record: RunRecord {
            name: name.to_string(),
            seed: tcfg.seed,
            config_hash,
            detector: cfg.clone(),
            train: tcfg.clone(),
            distill: distill_cfg,
            regions,
            dataset,
            losses,
            checkpoint: None,
            metrics: Some(metrics),
        },
    })
}

fn config_hash(
    name: &str,
    cfg: &DetectorConfig,
    tcfg: &TrainConfig,
    dcfg: Option<&DistillConfig>,
    regions: Option<&RegionRestriction>,
    data: &DatasetRef,
) -> Result<String> {
    let text = serde_json::to_string(&(name, cfg, tcfg, dcfg, regions, data)).map_err(|e| Error::Config(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

pub fn train_teacher(cfg: &DetectorConfig, data: &Dataset, tcfg: &TrainConfig, progress: Progress) -> Result<TrainOutput> {
    let params = init_teacher(cfg, tcfg.seed)?;
    run("teacher", cfg, params, data, tcfg, None, progress)
}

pub fn train_student_baseline(
    cfg: &DetectorConfig,
    data: &Dataset,
    tcfg: &TrainConfig,
    progress: Progress,
) -> Result<TrainOutput> {
    let params = init_student(cfg, tcfg.seed)?;
    run("student", cfg, params, data, tcfg, None, progress)
}

/// Trains a student against a frozen teacher with `L_GT + α·L_FPN + β·L_head`.
/// `teacher` must have been built over `data.train()`.
pub fn distill(
    teacher: &Teacher,
    student_cfg: &DetectorConfig,
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
    data: &Dataset,
    restriction: Option<&RegionRestriction>,
    progress: Progress,
) -> Result<TrainOutput> {
    dcfg.validate()?;
    if teacher.config.num_classes != student_cfg.num_classes {
        return Err(Error::Config(format!(
            "teacher predicts {} classes, student predicts {}",
            teacher.config.num_classes, student_cfg.num_classes
        )));
    }
    if teacher.cached() != data.train().len() {
        return Err(Error::Config(format!(
            "teacher cache covers {} images, training split has {}",
            teacher.cached(),
            data.train().len()
        )));
    }
    if let Some(r) = restriction {
        if r.regions.is_empty() {
            return Err(Error::Config("region set must not be empty".into()));
        }
    }
    let params = init_student(student_cfg, tcfg.seed)?;
    let name = if restriction.is_some() { "region-distill" } else { "distill" };
    let setup = DistillSetup {
        teacher,
        config: *dcfg,
        restriction,
    };
    run(name, student_cfg, params, data, tcfg, Some(setup), progress)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub teacher: String,
    pub teacher_ap50: f64,
    pub student_ap50: f64,
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<24} {:>8.2} {:>8.2}", self.teacher, self.teacher_ap50, self.student_ap50)
    }
}

/// Distills the same student under each teacher; rows sorted by teacher AP50.
pub fn teacher_strength_sweep(
    teachers: &[(String, &Teacher)],
    student_cfg: &DetectorConfig,
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
    data: &Dataset,
    progress: Progress,
) -> Result<Vec<SweepRow>> {
    if teachers.len() < 2 {
        return Err(Error::Config("a sweep needs at least two teachers".into()));
    }
    let mut rows = Vec::with_capacity(teachers.len());
    for (label, t) in teachers {
        let teacher_ap50 = 100.0 * evaluate(&t.config, &t.params, data.val())?.ap50;
        let out = distill(t, student_cfg, dcfg, tcfg, data, None, progress)?;
        rows.push(SweepRow {
            teacher: label.clone(),
            teacher_ap50,
            student_ap50: out.record.ap50(),
        });
    }
    rows.sort_by(|a, b| a.teacher_ap50.total_cmp(&b.teacher_ap50));
    Ok(rows)
}
