//! Synthetic shape scenes with unlabeled lookalikes, and target assignment.
//!
//! Each scene is a pure function of `(seed, index)`. Labeled shapes are a
//! disc, a square and an upward triangle, each filling a square box with
//! integer corners. With probability `lookalike_fraction` an ellipse is drawn
//! first. It looks like a squashed disc, and it is never labeled.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use frs_autograd::{codec, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::DetectorConfig;
use crate::error::{io_err, json_err, Error, Result};
use crate::pnm;
use crate::rng::{indexed, Stream};

pub const CLASS_NAMES: [&str; 3] = ["disc", "square", "triangle"];
const SUPERSAMPLE: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Inclusive range of labeled box sides in pixels.
    pub min_side: usize,
    pub max_side: usize,
    pub lookalike_fraction: f64,
    /// Minor/major axis ratio range of the lookalike ellipse.
    pub lookalike_ratio: (f64, f64),
    pub noise_sigma: f64,
    /// Minimum gap in pixels between any two objects.
    pub margin: usize,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            min_side: 8,
            max_side: 40,
            lookalike_fraction: 0.3,
            lookalike_ratio: (0.6, 0.8),
            noise_sigma: 0.05,
            margin: 2,
            train_fraction: 0.8,
        }
    }
}

impl SynthConfig {
    /// Scenes holding exactly one labeled object smaller than 16 px and no lookalike.
    pub fn single_small_object() -> Self {
        Self {
            min_objects: 1,
            max_objects: 1,
            min_side: 8,
            max_side: 15,
            lookalike_fraction: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range {}..={} is empty or allows zero objects",
                self.min_objects, self.max_objects
            ));
        }
        if self.min_side < 4 || self.min_side > self.max_side || self.max_side > self.image_size {
            return bad(format!(
                "side range {}..={} invalid for {} px images",
                self.min_side, self.max_side, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.lookalike_fraction) {
            return bad(format!("lookalike fraction {} outside [0, 1]", self.lookalike_fraction));
        }
        let (lo, hi) = self.lookalike_ratio;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!("lookalike ratio range ({lo}, {hi}) invalid"));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be >= 0".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train fraction {} outside (0, 1)", self.train_fraction));
        }
        Ok(())
    }
}

/// Labeled box in pixels, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl GtBox {
    pub fn width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn max_side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x > self.bbox[0] && x < self.bbox[2] && y > self.bbox[1] && y < self.bbox[3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    /// Semi-axes in pixels.
    Ellipse { ax: f64, ay: f64 },
}

impl Shape {
    /// Whether the point lies inside the shape placed in box `(x0, y0, w, h)`.
    fn contains(self, x0: f64, y0: f64, w: f64, h: f64, x: f64, y: f64) -> bool {
        let (cx, cy) = (x0 + w / 2.0, y0 + h / 2.0);
        match self {
            Shape::Disc => {
                let r = w / 2.0;
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
            Shape::Square => x >= x0 && x <= x0 + w && y >= y0 && y <= y0 + h,
            Shape::Triangle => {
                if y < y0 || y > y0 + h {
                    return false;
                }
                let half = (y - y0) / h * w / 2.0;
                (x - cx).abs() <= half
            }
            Shape::Ellipse { ax, ay } => ((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2) <= 1.0,
        }
    }
}

struct Placed {
    shape: Shape,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    color: [f64; 3],
}

/// One rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, S, S]` in `[0, 1]`.
    pub image: Tensor,
    pub gt: Vec<GtBox>,
    /// Row-major `S × S` map of lookalike pixels; analysis only.
    pub lookalike: Vec<bool>,
}

impl Sample {
    pub fn has_lookalike(&self) -> bool {
        self.lookalike.iter().any(|&b| b)
    }
}

fn overlaps(a: &Placed, x0: f64, y0: f64, w: f64, h: f64, margin: f64) -> bool {
    x0 < a.x0 + a.w + margin && a.x0 < x0 + w + margin && y0 < a.y0 + a.h + margin && a.y0 < y0 + h + margin
}

fn place(rng: &mut impl Rng, cfg: &SynthConfig, placed: &[Placed], w: usize, h: usize) -> Option<(f64, f64)> {
    let s = cfg.image_size;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let x0 = rng.random_range(0..=s - w) as f64;
        let y0 = rng.random_range(0..=s - h) as f64;
        if !placed
            .iter()
            .any(|p| overlaps(p, x0, y0, w as f64, h as f64, cfg.margin as f64))
        {
            return Some((x0, y0));
        }
    }
    None
}

fn object_color(rng: &mut impl Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(0.5..=1.0))
}

/// Renders scene `index` of the sequence defined by `seed`.
pub fn render_scene(cfg: &SynthConfig, seed: u64, index: u64) -> Sample {
    let mut rng = indexed(seed, Stream::Scenes, index);
    let s = cfg.image_size;
    let background: [f64; 3] = [0; 3].map(|_| rng.random_range(0.0..=0.4));
    let mut placed: Vec<Placed> = Vec::new();
    let mut lookalike_at = None;

    if rng.random_bool(cfg.lookalike_fraction) {
        let major = rng.random_range(cfg.min_side.max(12)..=cfg.max_side.max(12));
        let ratio = rng.random_range(cfg.lookalike_ratio.0..=cfg.lookalike_ratio.1);
        let minor = ((major as f64 * ratio).round() as usize).max(4);
        let (w, h) = if rng.random_bool(0.5) { (major, minor) } else { (minor, major) };
        if let Some((x0, y0)) = place(&mut rng, cfg, &placed, w, h) {
            lookalike_at = Some(placed.len());
            placed.push(Placed {
                shape: Shape::Ellipse {
                    ax: w as f64 / 2.0,
                    ay: h as f64 / 2.0,
                },
                x0,
                y0,
                w: w as f64,
                h: h as f64,
                color: object_color(&mut rng),
            });
        }
    }

    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut gt = Vec::with_capacity(count);
    let mut attempts = 0;
    while (gt.len() < count && attempts < count * 4 || gt.len() < cfg.min_objects) && attempts < PLACEMENT_ATTEMPTS {
        attempts += 1;
        let category = rng.random_range(0..CLASS_NAMES.len());
        let side = rng.random_range(cfg.min_side..=cfg.max_side);
        let Some((x0, y0)) = place(&mut rng, cfg, &placed, side, side) else {
            continue;
        };
        let shape = [Shape::Disc, Shape::Square, Shape::Triangle][category];
        let side = side as f64;
        placed.push(Placed {
            shape,
            x0,
            y0,
            w: side,
            h: side,
            color: object_color(&mut rng),
        });
        gt.push(GtBox {
            category,
            bbox: [x0, y0, x0 + side, y0 + side],
        });
    }

    let mut pixels = vec![0.0; 3 * s * s];
    for c in 0..3 {
        pixels[c * s * s..(c + 1) * s * s].fill(background[c]);
    }
    let mut lookalike = vec![false; s * s];
    let sub = SUPERSAMPLE as f64;
    for (k, p) in placed.iter().enumerate() {
        let (xa, ya) = (p.x0 as usize, p.y0 as usize);
        let xb = ((p.x0 + p.w).ceil() as usize).min(s);
        let yb = ((p.y0 + p.h).ceil() as usize).min(s);
        for py in ya..yb {
            for px in xa..xb {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f64 + (sx as f64 + 0.5) / sub;
                        let y = py as f64 + (sy as f64 + 0.5) / sub;
                        hits += p.shape.contains(p.x0, p.y0, p.w, p.h, x, y) as usize;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let i = py * s + px;
                for c in 0..3 {
                    let v = &mut pixels[c * s * s + i];
                    *v = *v * (1.0 - cov) + p.color[c] * cov;
                }
                if Some(k) == lookalike_at && cov >= 0.5 {
                    lookalike[i] = true;
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for v in &mut pixels {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    Sample {
        image: Tensor::new(vec![3, s, s], pixels).expect("image shape"),
        gt,
        lookalike,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub lookalike_fraction: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub content_hash: String,
    pub config: SynthConfig,
}

/// Generates `count` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate(cfg: &SynthConfig, seed: u64, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    let samples = (0..count as u64).map(|i| render_scene(cfg, seed, i)).collect();
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        samples,
    })
}

const IMAGES_FILE: &str = "images.frst";
const LOOKALIKE_FILE: &str = "lookalike.frst";
const GT_FILE: &str = "gt.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    /// Index of the first validation sample.
    pub fn split_index(&self) -> usize {
        let n = self.samples.len();
        ((n as f64 * self.config.train_fraction).round() as usize).clamp(1.min(n), n.saturating_sub(1).max(1))
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.split_index()]
    }

    pub fn val(&self) -> &[Sample] {
        &self.samples[self.split_index()..]
    }

    fn images_tensor(&self) -> Tensor {
        let parts: Vec<&Tensor> = self.samples.iter().map(|s| &s.image).collect();
        let s = self.config.image_size;
        let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(vec![parts.len(), 3, s, s], data).expect("stacked images")
    }

    fn lookalike_tensor(&self) -> Tensor {
        let s = self.config.image_size;
        let data = self
            .samples
            .iter()
            .flat_map(|x| x.lookalike.iter().map(|&b| b as u8 as f64))
            .collect();
        Tensor::new(vec![self.samples.len(), 1, s, s], data).expect("stacked maps")
    }

    fn gt_lines(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(&s.gt).map_err(|e| Error::Config(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    fn encoded(&self) -> Result<(Vec<u8>, Vec<u8>, String)> {
        let images = codec::encode([("images", &self.images_tensor())])?;
        let maps = codec::encode([("lookalike", &self.lookalike_tensor())])?;
        Ok((images, maps, self.gt_lines()?))
    }

    /// SHA-256 over the serialized images, ground truth and lookalike maps.
    pub fn content_hash(&self) -> Result<String> {
        let (images, maps, gt) = self.encoded()?;
        Ok(hash_parts(&images, gt.as_bytes(), &maps))
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Ok(Manifest {
            content_hash: self.content_hash()?,
            ..self.manifest_without_hash()
        })
    }

    /// Writes images, lookalike maps, ground truth and manifest to `dir`.
    /// With `ppm_previews`, also writes `ppm/<index>.ppm` per image.
    pub fn save(&self, dir: &Path, ppm_previews: bool) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let (images, maps, gt) = self.encoded()?;
        for (name, bytes) in [(IMAGES_FILE, &images[..]), (LOOKALIKE_FILE, &maps[..]), (GT_FILE, gt.as_bytes())] {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(io_err(&p))?;
        }
        let manifest = Manifest {
            content_hash: hash_parts(&images, gt.as_bytes(), &maps),
            ..self.manifest_without_hash()
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        if ppm_previews {
            let pdir = dir.join("ppm");
            fs::create_dir_all(&pdir).map_err(io_err(&pdir))?;
            for (i, s) in self.samples.iter().enumerate() {
                pnm::write_ppm(&pdir.join(format!("{i:05}.ppm")), &s.image)?;
            }
        }
        Ok(manifest)
    }

    fn manifest_without_hash(&self) -> Manifest {
        Manifest {
            seed: self.seed,
            count: self.samples.len(),
            lookalike_fraction: self.config.lookalike_fraction,
            train_count: self.train().len(),
            val_count: self.val().len(),
            content_hash: String::new(),
            config: self.config.clone(),
        }
    }

    /// Loads a dataset directory and verifies it against its manifest hash.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(json_err(&mpath))?;
        manifest.config.validate()?;
        let format_err = |p: PathBuf, reason: String| Error::Format { path: p, reason };

        let ipath = dir.join(IMAGES_FILE);
        let images = single_tensor(&ipath, "images")?;
        let lpath = dir.join(LOOKALIKE_FILE);
        let maps = single_tensor(&lpath, "lookalike")?;
        let gpath = dir.join(GT_FILE);
        let gt_text = fs::read_to_string(&gpath).map_err(io_err(&gpath))?;
        let gts = gt_text
            .lines()
            .map(|l| serde_json::from_str::<Vec<GtBox>>(l).map_err(json_err(&gpath)))
            .collect::<Result<Vec<_>>>()?;

        let s = manifest.config.image_size;
        let n = manifest.count;
        if images.shape() != [n, 3, s, s] {
            return Err(format_err(ipath, format!("expected [{n}, 3, {s}, {s}], found {:?}", images.shape())));
        }
        if maps.shape() != [n, 1, s, s] {
            return Err(format_err(lpath, format!("expected [{n}, 1, {s}, {s}], found {:?}", maps.shape())));
        }
        if gts.len() != n {
            return Err(format_err(gpath, format!("expected {n} lines, found {}", gts.len())));
        }
        let samples = gts
            .into_iter()
            .enumerate()
            .map(|(i, gt)| Sample {
                image: images.batch_item(i).reshape(&[3, s, s]).expect("image shape"),
                gt,
                lookalike: maps.data()[i * s * s..(i + 1) * s * s].iter().map(|&v| v != 0.0).collect(),
            })
            .collect();
        let ds = Dataset {
            config: manifest.config.clone(),
            seed: manifest.seed,
            samples,
        };
        let hash = ds.content_hash()?;
        if hash != manifest.content_hash {
            return Err(format_err(mpath, format!("content hash mismatch: manifest {}, data {hash}", manifest.content_hash)));
        }
        Ok(ds)
    }
}

fn single_tensor(path: &Path, name: &str) -> Result<Tensor> {
    let mut tensors = codec::load(path)?;
    match tensors.pop() {
        Some((n, t)) if n == name && tensors.is_empty() => Ok(t),
        _ => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a single tensor named `{name}`"),
        }),
    }
}

fn hash_parts(images: &[u8], gt: &[u8], maps: &[u8]) -> String {
    let mut h = Sha256::new();
    for part in [images, gt, maps] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// Stacks sample images into `[N, 3, S, S]`.
pub fn stack_images(samples: &[&Sample]) -> Tensor {
    let s = samples[0].image.shape()[1];
    let data = samples.iter().flat_map(|x| x.image.data().iter().copied()).collect();
    Tensor::new(vec![samples.len(), 3, s, s], data).expect("stacked images")
}

/// Training targets of one image at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    /// One-hot `[C, H, W]`.
    pub cls: Tensor,
    /// `(l, t, r, b) / stride` as `[4, H, W]`; zero at negative sites.
    pub boxes: Tensor,
    /// Row-major `H × W`.
    pub positive: Vec<bool>,
    /// Index into the ground truth of each positive site.
    pub source: Vec<Option<usize>>,
}

/// Center of site `j` along an axis at `stride`.
pub fn site_center(j: usize, stride: usize) -> f64 {
    (j * stride) as f64 + stride as f64 / 2.0
}

/// Central-region half width, in strides.
pub const CENTER_RADIUS: f64 = 1.5;

/// FCOS-style assignment: a site is positive for a box when its center lies
/// inside the box and within `1.5·stride` of the box center, and the box's
/// max side falls in the level's scale range. Ties go to the smaller box.
pub fn assign_targets(gt: &[GtBox], cfg: &DetectorConfig) -> Vec<LevelTargets> {
    let c = cfg.num_classes;
    (0..cfg.levels())
        .map(|l| {
            let stride = cfg.level_strides[l];
            let n = cfg.level_size(l);
            let mut cls = Tensor::zeros(&[c, n, n]);
            let mut boxes = Tensor::zeros(&[4, n, n]);
            let mut positive = vec![false; n * n];
            let mut source = vec![None; n * n];
            let radius = CENTER_RADIUS * stride as f64;
            for i in 0..n {
                let cy = site_center(i, stride);
                for j in 0..n {
                    let cx = site_center(j, stride);
                    let best = gt
                        .iter()
                        .enumerate()
                        .filter(|(_, g)| cfg.scale_ranges[l].contains(g.max_side()) && g.contains(cx, cy))
                        .filter(|(_, g)| {
                            let (bx, by) = ((g.bbox[0] + g.bbox[2]) / 2.0, (g.bbox[1] + g.bbox[3]) / 2.0);
                            (cx - bx).abs() < radius && (cy - by).abs() < radius
                        })
                        .min_by(|(_, a), (_, b)| a.area().total_cmp(&b.area()));
                    if let Some((k, g)) = best {
                        let site = i * n + j;
                        positive[site] = true;
                        source[site] = Some(k);
                        cls.data_mut()[g.category * n * n + site] = 1.0;
                        let s = stride as f64;
                        let ltrb = [cx - g.bbox[0], cy - g.bbox[1], g.bbox[2] - cx, g.bbox[3] - cy];
                        for (k, v) in ltrb.iter().enumerate() {
                            boxes.data_mut()[k * n * n + site] = v / s;
                        }
                    }
                }
            }
            LevelTargets {
                cls,
                boxes,
                positive,
                source,
            }
        })
        .collect()
}

/// Targets of a batch, stacked per level.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    /// `[N, C, H, W]` per level.
    pub cls: Vec<Tensor>,
    /// `[N, 4, H, W]` per level.
    pub boxes: Vec<Tensor>,
    /// `[N, 1, H, W]` 0/1 indicators per level.
    pub positive: Vec<Tensor>,
    pub num_positive: usize,
}

pub fn batch_targets(gts: &[&[GtBox]], cfg: &DetectorConfig) -> BatchTargets {
    let per: Vec<Vec<LevelTargets>> = gts.iter().map(|g| assign_targets(g, cfg)).collect();
    let n = gts.len();
    let mut out = BatchTargets {
        cls: Vec::new(),
        boxes: Vec::new(),
        positive: Vec::new(),
        num_positive: 0,
    };
    for l in 0..cfg.levels() {
        let stack = |f: &dyn Fn(&LevelTargets) -> &Tensor| {
            let parts: Vec<&Tensor> = per.iter().map(|t| f(&t[l])).collect();
            let shape = parts[0].shape();
            let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).expect("stacked targets")
        };
        out.cls.push(stack(&|t| &t.cls));
        out.boxes.push(stack(&|t| &t.boxes));
        let s = cfg.level_size(l);
        let pos: Vec<f64> = per.iter().flat_map(|t| t[l].positive.iter().map(|&p| p as u8 as f64)).collect();
        out.num_positive += pos.iter().filter(|&&p| p > 0.0).count();
        out.positive.push(Tensor::new(vec![n, 1, s, s], pos).expect("positive map"));
    }
    out
}

/// Per-class counts of ground-truth boxes.
pub fn class_histogram(samples: &[Sample]) -> BTreeMap<&'static str, usize> {
    let mut h: BTreeMap<&'static str, usize> = CLASS_NAMES.iter().map(|&n| (n, 0)).collect();
    for s in samples {
        for g in &s.gt {
            *h.get_mut(CLASS_NAMES[g.category]).expect("known class") += 1;
        }
    }
    h
}
