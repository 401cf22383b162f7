use frs_autograd::{sigmoid, Tensor};
use frs_core::analysis::{
    class_entropy, export_heatmaps, lookalike_recall_probe, partition_regions, region_entropy, Region,
};
use frs_core::data::{generate, site_center, stack_images, GtBox, Sample, SynthConfig};
use frs_core::detector::{infer, init_teacher, DetectorConfig, ScorePyramid};
use frs_core::frs::{feature_richness_masks, RichnessMaskSet};
use frs_core::pnm::read_pgm;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_scores(cfg: &DetectorConfig, n: usize, rng: &mut impl Rng) -> ScorePyramid {
    let logits: Vec<Tensor> = (0..cfg.levels())
        .map(|l| {
            let s = cfg.level_size(l);
            Tensor::from_fn(&[n, cfg.num_classes, s, s], |_| rng.random_range(-4.0..4.0))
        })
        .collect();
    ScorePyramid {
        probs: logits.iter().map(|t| t.map(sigmoid)).collect(),
        logits,
    }
}

fn scenes(seed: u64, n: usize) -> Vec<Sample> {
    generate(&SynthConfig::default(), seed, n).unwrap().samples
}

#[test]
fn three_heatmaps_with_level_sizes() {
    let cfg = DetectorConfig::teacher();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let masks = feature_richness_masks(&random_scores(&cfg, 2, &mut rng)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export_heatmaps(&masks, 1, dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    for (l, (f, side)) in files.iter().zip([16, 8, 4]).enumerate() {
        assert_eq!(f.file_name().unwrap().to_str().unwrap(), format!("level{l}.pgm"));
        let (w, h, px) = read_pgm(f).unwrap();
        assert_eq!((w, h), (side, side));
        let item = masks.item(1);
        for (p, s) in px.iter().zip(item.mask(l).data()) {
            assert!((s - f64::from(*p) / 255.0).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }
}

#[test]
fn probe_is_absent_without_lookalikes() {
    let cfg = DetectorConfig::teacher();
    let ds = generate(
        &SynthConfig {
            lookalike_fraction: 0.0,
            ..SynthConfig::default()
        },
        4,
        8,
    )
    .unwrap();
    let refs: Vec<&Sample> = ds.samples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let masks = feature_richness_masks(&random_scores(&cfg, 8, &mut rng)).unwrap();
    assert!(lookalike_recall_probe(&masks, &refs, &cfg).unwrap().is_none());
}

#[test]
fn untrained_teacher_has_no_lookalike_preference() {
    let cfg = DetectorConfig::teacher();
    let params = init_teacher(&cfg, 0).unwrap();
    let ds = generate(
        &SynthConfig {
            lookalike_fraction: 1.0,
            ..SynthConfig::default()
        },
        6,
        16,
    )
    .unwrap();
    let refs: Vec<&Sample> = ds.samples.iter().collect();
    let out = infer(&cfg, &params, &stack_images(&refs)).unwrap();
    let masks = feature_richness_masks(&out.scores).unwrap();
    let probe = lookalike_recall_probe(&masks, &refs, &cfg).unwrap().unwrap();
    assert!((probe.pooled.ratio - 1.0).abs() < 0.25, "ratio {}", probe.pooled.ratio);
}

#[test]
fn uniform_scores_have_maximal_entropy() {
    let cfg = DetectorConfig::student();
    let scores = ScorePyramid {
        probs: (0..3).map(|l| Tensor::full(&[1, 3, cfg.level_size(l), cfg.level_size(l)], 0.4)).collect(),
        logits: (0..3).map(|l| Tensor::zeros(&[1, 3, cfg.level_size(l), cfg.level_size(l)])).collect(),
    };
    let masks = feature_richness_masks(&scores).unwrap();
    let gts = scenes(0, 1);
    let part = partition_regions(&masks, &[gts[0].gt.as_slice()], &cfg, 0.5).unwrap();
    let stats = region_entropy(&scores, &masks, &part).unwrap();
    for r in [Region::FN, Region::TN] {
        assert!((stats.entropy(r).unwrap() - 3f64.ln()).abs() < 1e-12);
    }
    // nothing reaches tau = 0.5, so the high regions are empty and reported as absent
    assert_eq!(stats.entropy(Region::TP), None);
    assert_eq!(stats.entropy(Region::FP), None);
    assert!((class_entropy(&[1.0, 1e-12, 1e-12])).abs() < 1e-9);
}

#[test]
fn full_region_set_at_tau_zero_is_plain_frs() {
    let cfg = DetectorConfig::student();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = scenes(1, 4);
    let gts: Vec<&[GtBox]> = samples.iter().map(|s| s.gt.as_slice()).collect();
    let masks = feature_richness_masks(&random_scores(&cfg, 4, &mut rng)).unwrap();
    let part = partition_regions(&masks, &gts, &cfg, 0.0).unwrap();
    let restricted = masks.restricted(&part.indicator(&Region::ALL)).unwrap();
    assert_eq!(restricted, masks);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn regions_partition_every_level(seed in any::<u64>(), tau in 0.01f64..0.99) {
        let cfg = DetectorConfig::student();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = scenes(seed % 97, 3);
        let gts: Vec<&[GtBox]> = samples.iter().map(|s| s.gt.as_slice()).collect();
        let scores = random_scores(&cfg, 3, &mut rng);
        let masks = feature_richness_masks(&scores).unwrap();
        let part = partition_regions(&masks, &gts, &cfg, tau).unwrap();
        for l in 0..cfg.levels() {
            let s = cfg.level_size(l);
            let stride = cfg.level_strides[l];
            for (n, gt) in gts.iter().enumerate() {
                let counts = part.counts(l, n);
                prop_assert_eq!(counts.values().sum::<usize>(), s * s);
                for i in 0..s {
                    for j in 0..s {
                        let r = part.levels[l][(n * s + i) * s + j];
                        let fg = gt.iter().any(|g| g.contains(site_center(j, stride), site_center(i, stride)));
                        let high = masks.mask(l).data()[(n * s + i) * s + j] >= tau;
                        prop_assert_eq!(matches!(r, Region::TP | Region::FN), fg);
                        prop_assert_eq!(matches!(r, Region::TP | Region::FP), high);
                    }
                }
            }
        }
        let stats = region_entropy(&scores, &masks, &part).unwrap();
        for r in Region::ALL {
            if let Some(h) = stats.entropy(r) {
                prop_assert!(h >= 0.0);
            }
        }
    }

    #[test]
    fn raising_tau_only_shrinks_the_high_set(seed in any::<u64>(), lo in 0.0f64..1.0, delta in 0.0f64..0.5) {
        let cfg = DetectorConfig::student();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = scenes(seed % 89, 2);
        let gts: Vec<&[GtBox]> = samples.iter().map(|s| s.gt.as_slice()).collect();
        let masks = feature_richness_masks(&random_scores(&cfg, 2, &mut rng)).unwrap();
        let hi = (lo + delta).min(1.0);
        let a = partition_regions(&masks, &gts, &cfg, lo).unwrap();
        let b = partition_regions(&masks, &gts, &cfg, hi).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            for (&ra, &rb) in la.iter().zip(lb) {
                prop_assert!(!(ra == Region::TN && rb == Region::FP));
                prop_assert!(!(ra == Region::FN && rb == Region::TP));
            }
        }
    }

    #[test]
    fn heatmaps_round_trip_within_quantization(values in proptest::collection::vec(0.0f64..=1.0, 16)) {
        let masks = RichnessMaskSet::from_masks(vec![Tensor::new(vec![1, 1, 4, 4], values.clone()).unwrap()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_heatmaps(&masks, 0, dir.path()).unwrap();
        let (_, _, px) = read_pgm(&files[0]).unwrap();
        for (p, s) in px.iter().zip(&values) {
            prop_assert!((s - f64::from(*p) / 255.0).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }
}
