use frs_autograd::{Tape, Tensor};
use frs_core::analysis::Region;
use frs_core::data::{batch_targets, generate, Dataset, GtBox, SynthConfig};
use frs_core::detector::{init_teacher, load_params, save_params, DetectorConfig};
use frs_core::frs::DistillConfig;
use frs_core::train::{
    detection_loss, distill, teacher_strength_sweep, train_student_baseline, train_teacher, LossRow,
    RegionRestriction, Teacher, TrainConfig,
};
use frs_core::Error;

fn small(widths: [usize; 4], fpn: usize) -> DetectorConfig {
    DetectorConfig {
        backbone_widths: widths,
        fpn_channels: fpn,
        head_depth: 1,
        ..DetectorConfig::student()
    }
}

fn teacher_cfg() -> DetectorConfig {
    small([4, 8, 8, 8], 8)
}

fn student_cfg() -> DetectorConfig {
    small([4, 4, 4, 4], 4)
}

fn data() -> Dataset {
    generate(&SynthConfig::default(), 3, 20).unwrap()
}

fn tcfg(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        warmup_iters: 2,
        grad_clip: Some(5.0),
        seed,
        ..TrainConfig::default()
    }
}

fn quiet() -> impl FnMut(usize, &LossRow) {
    |_, _| {}
}

fn trained_teacher(data: &Dataset) -> Teacher {
    let out = train_teacher(&teacher_cfg(), data, &tcfg(4, 1), &mut quiet()).unwrap();
    Teacher::new(teacher_cfg(), out.params, data.train()).unwrap()
}

#[test]
fn baseline_runs_are_deterministic() {
    let d = data();
    let a = train_student_baseline(&student_cfg(), &d, &tcfg(5, 2), &mut quiet()).unwrap();
    let b = train_student_baseline(&student_cfg(), &d, &tcfg(5, 2), &mut quiet()).unwrap();
    assert_eq!(a.record.losses, b.record.losses);
    assert_eq!(a.record.config_hash, b.record.config_hash);
    assert!(a.params.bit_eq(&b.params));
    assert_eq!(a.params.encode().unwrap(), b.params.encode().unwrap());
    let c = train_student_baseline(&student_cfg(), &d, &tcfg(5, 3), &mut quiet()).unwrap();
    assert_ne!(a.record.losses, c.record.losses);
}

#[test]
fn loss_trace_has_one_finite_row_per_iteration() {
    let d = data();
    let mut seen = Vec::new();
    let out = train_student_baseline(&student_cfg(), &d, &tcfg(6, 0), &mut |i, r: &LossRow| seen.push((i, *r))).unwrap();
    assert_eq!(out.record.losses.len(), 6);
    assert_eq!(seen.len(), 6);
    for (k, (i, r)) in seen.iter().enumerate() {
        assert_eq!(*i, k);
        assert_eq!(*r, out.record.losses[k]);
        assert!(r.lgt.is_finite() && r.total.is_finite());
        assert_eq!((r.lfpn, r.lhead), (0.0, 0.0));
        assert_eq!(r.total, r.lgt);
    }
    assert!(out.record.metrics.is_some());
}

#[test]
fn zero_weights_reduce_to_the_baseline_bit_for_bit() {
    let d = data();
    let teacher = trained_teacher(&d);
    let base = train_student_baseline(&student_cfg(), &d, &tcfg(5, 4), &mut quiet()).unwrap();
    let zero = DistillConfig {
        alpha: 0.0,
        beta: 0.0,
        enable_fpn: true,
        enable_head: true,
    };
    let dist = distill(&teacher, &student_cfg(), &zero, &tcfg(5, 4), &d, None, &mut quiet()).unwrap();
    for (a, b) in base.record.losses.iter().zip(&dist.record.losses) {
        assert_eq!(a.lgt.to_bits(), b.lgt.to_bits());
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
    assert!(base.params.bit_eq(&dist.params));
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let d = data();
    let teacher = trained_teacher(&d);
    let cfg = DistillConfig {
        alpha: 0.3,
        beta: 0.7,
        enable_fpn: true,
        enable_head: true,
    };
    let out = distill(&teacher, &student_cfg(), &cfg, &tcfg(4, 5), &d, None, &mut quiet()).unwrap();
    for r in &out.record.losses {
        assert!(r.lfpn > 0.0 && r.lhead > 0.0);
        assert_eq!(r.total, r.lgt + 0.3 * r.lfpn + 0.7 * r.lhead);
    }
    let fpn_only = DistillConfig {
        enable_head: false,
        ..cfg
    };
    let out = distill(&teacher, &student_cfg(), &fpn_only, &tcfg(2, 5), &d, None, &mut quiet()).unwrap();
    for r in &out.record.losses {
        assert_eq!(r.lhead, 0.0);
        assert_eq!(r.total, r.lgt + 0.3 * r.lfpn);
    }
}

#[test]
fn teacher_is_untouched_by_distillation() {
    let d = data();
    let teacher = trained_teacher(&d);
    let before = teacher.params.encode().unwrap();
    let cfg = DistillConfig::default();
    distill(&teacher, &student_cfg(), &cfg, &tcfg(3, 6), &d, None, &mut quiet()).unwrap();
    let restriction = RegionRestriction {
        regions: vec![Region::TP, Region::FP],
        tau: 0.5,
    };
    distill(&teacher, &student_cfg(), &DistillConfig::fpn_only(1.0), &tcfg(3, 6), &d, Some(&restriction), &mut quiet())
        .unwrap();
    assert_eq!(teacher.params.encode().unwrap(), before);
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let d = data();
    let teacher = trained_teacher(&d);
    let mut wrong = student_cfg();
    wrong.num_classes = 2;
    let err = distill(&teacher, &wrong, &DistillConfig::default(), &tcfg(1, 0), &d, None, &mut quiet());
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn empty_region_set_is_rejected() {
    let d = data();
    let teacher = trained_teacher(&d);
    let r = RegionRestriction {
        regions: vec![],
        tau: 0.5,
    };
    let err = distill(&teacher, &student_cfg(), &DistillConfig::fpn_only(1.0), &tcfg(1, 0), &d, Some(&r), &mut quiet());
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let d = data();
    let out = train_student_baseline(&student_cfg(), &d, &tcfg(2, 7), &mut quiet()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_params(dir.path(), "student", &student_cfg(), &out.params).unwrap();
    let back = load_params(&path, &student_cfg()).unwrap();
    assert!(back.bit_eq(&out.params));
    assert!(load_params(&path, &teacher_cfg()).is_err());
}

#[test]
fn sweep_rows_are_sorted_and_repeatable() {
    let d = data();
    let strong = trained_teacher(&d);
    let weak = Teacher::new(teacher_cfg(), init_teacher(&teacher_cfg(), 9).unwrap(), d.train()).unwrap();
    let teachers = [("weak".to_string(), &weak), ("strong".to_string(), &strong)];
    let rows = teacher_strength_sweep(&teachers, &student_cfg(), &DistillConfig::default(), &tcfg(2, 8), &d, &mut quiet())
        .unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].teacher_ap50 <= rows[1].teacher_ap50);
    let twice = [("a".to_string(), &strong), ("b".to_string(), &strong)];
    let rows = teacher_strength_sweep(&twice, &student_cfg(), &DistillConfig::default(), &tcfg(2, 8), &d, &mut quiet())
        .unwrap();
    assert_eq!(rows[0].student_ap50.to_bits(), rows[1].student_ap50.to_bits());
    assert!(teacher_strength_sweep(&twice[..1], &student_cfg(), &DistillConfig::default(), &tcfg(1, 8), &d, &mut quiet()).is_err());
}

fn loss_of(cfg: &DetectorConfig, gt: &[GtBox], logits: Vec<Tensor>, boxes: Vec<Tensor>) -> (f64, f64) {
    let targets = batch_targets(&[gt], cfg);
    let mut tape = Tape::new();
    let l: Vec<_> = logits.into_iter().map(|t| tape.leaf(t)).collect();
    let b: Vec<_> = boxes.into_iter().map(|t| tape.leaf(t)).collect();
    let loss = detection_loss(&mut tape, &l, &b, &targets).unwrap();
    (tape.value(loss.cls).item(), tape.value(loss.reg).item())
}

#[test]
fn perfect_predictions_have_near_zero_detection_loss() {
    let cfg = student_cfg();
    let gt = [GtBox {
        category: 1,
        bbox: [20.0, 20.0, 30.0, 30.0],
    }];
    let targets = batch_targets(&[&gt], &cfg);
    let logits = targets.cls.iter().map(|t| t.map(|v| if v > 0.0 { 30.0 } else { -30.0 })).collect();
    let (cls, reg) = loss_of(&cfg, &gt, logits, targets.boxes.clone());
    assert!(cls < 1e-12, "{cls}");
    assert_eq!(reg, 0.0);
}

#[test]
fn no_positives_means_pure_background_focal_loss() {
    let cfg = student_cfg();
    let logits: Vec<Tensor> = (0..3).map(|l| Tensor::full(&[1, 3, cfg.level_size(l), cfg.level_size(l)], -1.0)).collect();
    let boxes = (0..3).map(|l| Tensor::full(&[1, 4, cfg.level_size(l), cfg.level_size(l)], 2.0)).collect();
    let (cls, reg) = loss_of(&cfg, &[], logits.clone(), boxes);
    assert_eq!(reg, 0.0);
    // every entry is a negative: -(1 - alpha) p^gamma ln(1 - p)
    let p = 1.0 / (1.0 + 1f64.exp());
    let per = -(1.0 - 0.25) * p * p * (1.0 - p).ln();
    let sites: usize = logits.iter().map(|t| t.numel()).sum();
    assert!((cls - per * sites as f64).abs() < 1e-9 * cls);
}
