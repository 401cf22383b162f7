//! Region partition, per-region entropy, heatmaps and the lookalike probe.
//!
//! Sites are split by two questions. Is the site center inside a ground-truth
//! box (foreground)? Is the teacher's richness score at least `tau` (high)?
//!
//! | | high | low |
//! |---|---|---|
//! | foreground | TP | FN |
//! | background | FP | TN |

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{site_center, stack_images, GtBox, Sample};
use crate::detector::{infer, DetectorConfig, DetectorParams, ScorePyramid};
use crate::error::{io_err, Error, Result};
use crate::frs::{feature_richness_masks, RichnessMaskSet};
use crate::pnm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    TP,
    FP,
    FN,
    TN,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::TP, Region::FP, Region::FN, Region::TN];

    pub fn classify(foreground: bool, high: bool) -> Region {
        match (foreground, high) {
            (true, true) => Region::TP,
            (false, true) => Region::FP,
            (true, false) => Region::FN,
            (false, false) => Region::TN,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::TP => "TP",
            Region::FP => "FP",
            Region::FN => "FN",
            Region::TN => "TN",
        })
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TP" => Ok(Region::TP),
            "FP" => Ok(Region::FP),
            "FN" => Ok(Region::FN),
            "TN" => Ok(Region::TN),
            other => Err(Error::Config(format!("unknown region `{other}`, expected TP, FP, FN or TN"))),
        }
    }
}

/// Parses a comma-separated region list such as `TP,FP`.
pub fn parse_regions(s: &str) -> Result<Vec<Region>> {
    let mut out: Vec<Region> = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config("region set must not be empty".into()));
    }
    Ok(out)
}

/// One label per site, per level, in `[N, H_l, W_l]` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    pub tau: f64,
    pub levels: Vec<Vec<Region>>,
    /// Sites per batch item, per level.
    pub sites: Vec<usize>,
}

impl RegionPartition {
    /// Per-level site indicators for membership in `set`.
    pub fn indicator(&self, set: &[Region]) -> Vec<Vec<bool>> {
        self.levels
            .iter()
            .map(|lvl| lvl.iter().map(|r| set.contains(r)).collect())
            .collect()
    }

    /// Site counts per region at level `l` for batch item `n`.
    pub fn counts(&self, l: usize, n: usize) -> BTreeMap<Region, usize> {
        let mut out: BTreeMap<Region, usize> = Region::ALL.iter().map(|&r| (r, 0)).collect();
        let per = self.sites[l];
        for r in &self.levels[l][n * per..(n + 1) * per] {
            *out.get_mut(r).expect("all regions present") += 1;
        }
        out
    }
}

/// Labels every site of every level; `gts[n]` is the ground truth of batch item `n`.
pub fn partition_regions(
    masks: &RichnessMaskSet,
    gts: &[&[GtBox]],
    cfg: &DetectorConfig,
    tau: f64,
) -> Result<RegionPartition> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
    }
    if masks.levels() != cfg.levels() || masks.batch() != gts.len() {
        return Err(Error::Config(format!(
            "masks cover {} levels × {} images, expected {} × {}",
            masks.levels(),
            masks.batch(),
            cfg.levels(),
            gts.len()
        )));
    }
    let mut levels = Vec::with_capacity(cfg.levels());
    let mut sites = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        let [_, _, h, w] = masks.mask(l).dims4("partition_regions")?;
        let stride = cfg.level_strides[l];
        let s = masks.mask(l).data();
        let mut labels = Vec::with_capacity(s.len());
        for (n, gt) in gts.iter().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    let (cx, cy) = (site_center(j, stride), site_center(i, stride));
                    let fg = gt.iter().any(|g| g.contains(cx, cy));
                    labels.push(Region::classify(fg, s[(n * h + i) * w + j] >= tau));
                }
            }
        }
        levels.push(labels);
        sites.push(h * w);
    }
    Ok(RegionPartition { tau, levels, sites })
}

/// Shannon entropy (nats) of the class probabilities normalized to sum to one.
pub fn class_entropy(probs: &[f64]) -> f64 {
    let z: f64 = probs.iter().sum();
    if z <= 0.0 {
        return 0.0;
    }
    -probs
        .iter()
        .map(|&y| y / z)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStat {
    pub count: usize,
    /// `None` when the region is empty.
    pub mean_mask: Option<f64>,
    pub mean_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub tau: f64,
    pub regions: BTreeMap<Region, RegionStat>,
}

impl RegionStats {
    pub fn entropy(&self, r: Region) -> Option<f64> {
        self.regions.get(&r).and_then(|s| s.mean_entropy)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "{:<6} {:>9} {:>10} {:>10}", "region", "sites", "mean S", "entropy");
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        for (r, st) in &self.regions {
            let _ = writeln!(
                s,
                "{:<6} {:>9} {:>10} {:>10}",
                r.to_string(),
                st.count,
                opt(st.mean_mask),
                opt(st.mean_entropy)
            );
        }
        s
    }
}

/// Accumulates per-region sums over any number of batches.
#[derive(Debug, Clone, Default)]
pub struct RegionAccumulator {
    sums: BTreeMap<Region, (usize, f64, f64)>,
}

impl RegionAccumulator {
    pub fn add(&mut self, scores: &ScorePyramid, masks: &RichnessMaskSet, part: &RegionPartition) -> Result<()> {
        for (l, labels) in part.levels.iter().enumerate() {
            let p = &scores.probs[l];
            let [n, c, h, w] = p.dims4("region_entropy")?;
            if n * h * w != labels.len() {
                return Err(Error::Config(format!(
                    "partition level {l} has {} sites, scores have {}",
                    labels.len(),
                    n * h * w
                )));
            }
            let hw = h * w;
            let m = masks.mask(l).data();
            let mut site = vec![0.0; c];
            for b in 0..n {
                for k in 0..hw {
                    for (ch, v) in site.iter_mut().enumerate() {
                        *v = p.data()[(b * c + ch) * hw + k];
                    }
                    let e = self.sums.entry(labels[b * hw + k]).or_default();
                    e.0 += 1;
                    e.1 += m[b * hw + k];
                    e.2 += class_entropy(&site);
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &RegionAccumulator) {
        for (r, (c, sm, se)) in &other.sums {
            let e = self.sums.entry(*r).or_default();
            e.0 += c;
            e.1 += sm;
            e.2 += se;
        }
    }

    pub fn finish(&self, tau: f64) -> RegionStats {
        let regions = Region::ALL
            .iter()
            .map(|&r| {
                let (count, sm, se) = self.sums.get(&r).copied().unwrap_or_default();
                let mean = |s: f64| (count > 0).then(|| s / count as f64);
                (
                    r,
                    RegionStat {
                        count,
                        mean_mask: mean(sm),
                        mean_entropy: mean(se),
                    },
                )
            })
            .collect();
        RegionStats { tau, regions }
    }
}

/// Mean mask value and mean normalized-class entropy per region.
pub fn region_entropy(scores: &ScorePyramid, masks: &RichnessMaskSet, partition: &RegionPartition) -> Result<RegionStats> {
    let mut acc = RegionAccumulator::default();
    acc.add(scores, masks, partition)?;
    Ok(acc.finish(partition.tau))
}

/// Writes `level<l>.pgm` for batch item `n`, pixel value `round(255·S)`.
pub fn export_heatmaps(masks: &RichnessMaskSet, n: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let item = masks.item(n);
    (0..item.levels())
        .map(|l| {
            let m = item.mask(l);
            let (h, w) = (m.shape()[2], m.shape()[3]);
            let path = out_dir.join(format!("level{l}.pgm"));
            pnm::write_pgm(&path, w, h, m.data())?;
            Ok(path)
        })
        .collect()
}

/// Level holding the largest mask value of batch item `n`; lowest level on ties.
pub fn peak_level(masks: &RichnessMaskSet, n: usize) -> usize {
    let item = masks.item(n);
    let mut best = (0, f64::NEG_INFINITY);
    for l in 0..item.levels() {
        let m = item.mask(l).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m > best.1 {
            best = (l, m);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeStat {
    pub lookalike_mean: f64,
    pub background_mean: f64,
    pub ratio: f64,
}

impl ProbeStat {
    fn from_sums(look: (f64, usize), bg: (f64, usize)) -> Self {
        let lookalike_mean = look.0 / look.1 as f64;
        let background_mean = bg.0 / bg.1 as f64;
        Self {
            lookalike_mean,
            background_mean,
            ratio: lookalike_mean / background_mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookalikeProbe {
    pub levels: Vec<ProbeStat>,
    pub pooled: ProbeStat,
    pub lookalike_pixels: usize,
    pub background_pixels: usize,
}

/// Accumulates pixel-level mask sums, reading each pixel's value from the site that contains it.
#[derive(Debug, Clone, Default)]
pub struct ProbeAccumulator {
    look: Vec<(f64, usize)>,
    bg: Vec<(f64, usize)>,
}

impl ProbeAccumulator {
    /// `samples[n]` must be the image behind batch item `n` of `masks`.
    pub fn add(&mut self, masks: &RichnessMaskSet, samples: &[&Sample], cfg: &DetectorConfig) -> Result<()> {
        if masks.batch() != samples.len() {
            return Err(Error::Config(format!(
                "{} masks for {} samples",
                masks.batch(),
                samples.len()
            )));
        }
        let m = masks.levels();
        self.look.resize(m, (0.0, 0));
        self.bg.resize(m, (0.0, 0));
        let size = cfg.input_size;
        for (n, s) in samples.iter().enumerate() {
            for y in 0..size {
                for x in 0..size {
                    let look = s.lookalike[y * size + x];
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if !look && s.gt.iter().any(|g| g.contains(px, py)) {
                        continue;
                    }
                    for l in 0..m {
                        let stride = cfg.level_strides[l];
                        let side = cfg.level_size(l);
                        let v = masks.mask(l).data()[(n * side + y / stride) * side + x / stride];
                        let slot = if look { &mut self.look[l] } else { &mut self.bg[l] };
                        slot.0 += v;
                        slot.1 += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ProbeAccumulator) {
        let m = self.look.len().max(other.look.len());
        self.look.resize(m, (0.0, 0));
        self.bg.resize(m, (0.0, 0));
        for (a, b) in self.look.iter_mut().zip(&other.look).chain(self.bg.iter_mut().zip(&other.bg)) {
            a.0 += b.0;
            a.1 += b.1;
        }
    }

    /// `None` when no lookalike (or no background) pixel was seen.
    pub fn finish(&self) -> Option<LookalikeProbe> {
        let look_px = self.look.first().map_or(0, |v| v.1);
        let bg_px = self.bg.first().map_or(0, |v| v.1);
        if look_px == 0 || bg_px == 0 {
            return None;
        }
        let levels = self
            .look
            .iter()
            .zip(&self.bg)
            .map(|(&a, &b)| ProbeStat::from_sums(a, b))
            .collect();
        let sum = |v: &[(f64, usize)]| v.iter().fold((0.0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
        Some(LookalikeProbe {
            levels,
            pooled: ProbeStat::from_sums(sum(&self.look), sum(&self.bg)),
            lookalike_pixels: look_px,
            background_pixels: bg_px,
        })
    }
}

/// Mean mask over lookalike pixels against plain background (neither
/// lookalike nor inside a ground-truth box), per level and pooled.
pub fn lookalike_recall_probe(
    masks: &RichnessMaskSet,
    samples: &[&Sample],
    cfg: &DetectorConfig,
) -> Result<Option<LookalikeProbe>> {
    let mut acc = ProbeAccumulator::default();
    acc.add(masks, samples, cfg)?;
    Ok(acc.finish())
}

/// Region statistics and lookalike probe of a teacher over `samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherAnalysis {
    pub regions: RegionStats,
    pub probe: Option<LookalikeProbe>,
}

/// Runs the teacher over `samples` on up to `threads` threads. Each thread
/// takes a contiguous range and partial sums are merged in range order.
pub fn analyze_teacher(
    cfg: &DetectorConfig,
    params: &DetectorParams,
    samples: &[Sample],
    tau: f64,
    threads: usize,
) -> Result<TeacherAnalysis> {
    let work = |range: &[Sample]| -> Result<(RegionAccumulator, ProbeAccumulator)> {
        let mut regions = RegionAccumulator::default();
        let mut probe = ProbeAccumulator::default();
        for chunk in range.chunks(16) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let out = infer(cfg, params, &stack_images(&refs))?;
            let masks = feature_richness_masks(&out.scores)?;
            let gts: Vec<&[GtBox]> = chunk.iter().map(|s| s.gt.as_slice()).collect();
            let part = partition_regions(&masks, &gts, cfg, tau)?;
            regions.add(&out.scores, &masks, &part)?;
            probe.add(&masks, &refs, cfg)?;
        }
        Ok((regions, probe))
    };
    let per = samples.len().div_ceil(threads.max(1)).max(1);
    let parts: Vec<Result<_>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples.chunks(per).map(|r| s.spawn(move || work(r))).collect();
        handles.into_iter().map(|h| h.join().expect("analysis thread panicked")).collect()
    });
    let mut regions = RegionAccumulator::default();
    let mut probe = ProbeAccumulator::default();
    for p in parts {
        let (r, pr) = p?;
        regions.merge(&r);
        probe.merge(&pr);
    }
    Ok(TeacherAnalysis {
        regions: regions.finish(tau),
        probe: probe.finish(),
    })
}
