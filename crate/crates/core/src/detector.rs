//! Anchor-free single-stage detector with a three-level FPN.
//!
//! ```text
//! image ─ s2 ─ C1 ─ s2 ─ C2 ─ s2 ─ C3 ─ s2 ─ C4
//!                         │        │        │   1×1 lateral
//!                         P2 ◄─up─ P3 ◄─up─ P4  nearest 2× top-down + add
//!                         │        │        │   3×3 smooth
//!                       shared class tower / box tower at every level
//! ```
//! Box outputs are `exp(raw)` distances (l,t,r,b) in units of the level stride.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use frs_autograd::{codec, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};
use crate::rng::{stream, Stream};

/// Bias of the final classification conv; sigmoid(−2) ≈ 0.12.
pub const CLS_PRIOR_BIAS: f64 = -2.0;
const OUTPUT_INIT_STD: f64 = 0.01;

/// Box max-side interval `(min, max]` handled by one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub min: f64,
    /// `None` means unbounded.
    pub max: Option<f64>,
}

impl ScaleRange {
    pub fn contains(&self, side: f64) -> bool {
        side > self.min && self.max.is_none_or(|m| side <= m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub backbone_widths: [usize; 4],
    pub fpn_channels: usize,
    pub head_depth: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub level_strides: Vec<usize>,
    pub scale_ranges: Vec<ScaleRange>,
}

impl DetectorConfig {
    fn with_widths(backbone_widths: [usize; 4], fpn_channels: usize) -> Self {
        Self {
            backbone_widths,
            fpn_channels,
            head_depth: 2,
            num_classes: 3,
            input_size: 64,
            level_strides: vec![4, 8, 16],
            scale_ranges: vec![
                ScaleRange { min: 0.0, max: Some(16.0) },
                ScaleRange { min: 16.0, max: Some(32.0) },
                ScaleRange { min: 32.0, max: None },
            ],
        }
    }

    pub fn teacher() -> Self {
        Self::with_widths([16, 32, 64, 128], 64)
    }

    pub fn student() -> Self {
        Self::with_widths([8, 16, 32, 64], 32)
    }

    pub fn levels(&self) -> usize {
        self.level_strides.len()
    }

    /// Spatial side of level `l`.
    pub fn level_size(&self, l: usize) -> usize {
        self.input_size / self.level_strides[l]
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.levels();
        if m != 3 || self.scale_ranges.len() != m {
            return Err(Error::Config(format!(
                "expected 3 levels with matching scale ranges, got {} strides and {} ranges",
                m,
                self.scale_ranges.len()
            )));
        }
        if self.level_strides != [4, 8, 16] {
            return Err(Error::Config(format!(
                "level strides must be [4, 8, 16] for the C2..C4 pyramid, got {:?}",
                self.level_strides
            )));
        }
        if self.fpn_channels == 0 || self.backbone_widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.input_size % 16 != 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "input size {} is not a positive multiple of 16",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Canonical parameter names and shapes, in initialization order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = 3;
        for (i, &w) in self.backbone_widths.iter().enumerate() {
            conv(format!("backbone.{i}"), w, cin, 3);
            cin = w;
        }
        let f = self.fpn_channels;
        for l in 0..self.levels() {
            conv(format!("fpn.lateral.{l}"), f, self.backbone_widths[l + 1], 1);
        }
        for l in 0..self.levels() {
            conv(format!("fpn.smooth.{l}"), f, f, 3);
        }
        for d in 0..self.head_depth {
            conv(format!("head.cls.{d}"), f, f, 3);
        }
        conv("head.cls_out".into(), self.num_classes, f, 3);
        for d in 0..self.head_depth {
            conv(format!("head.box.{d}"), f, f, 3);
        }
        conv("head.box_out".into(), 4, f, 3);
        out
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    tensors: BTreeMap<String, Tensor>,
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl DetectorParams {
    /// He-normal (fan-in) weights, zero biases; output convs use a small
    /// normal init and the classification prior bias.
    pub fn init(cfg: &DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_layout() {
            let t = if name.ends_with(".weight") {
                let std = if name.starts_with("head.cls_out") || name.starts_with("head.box_out") {
                    OUTPUT_INIT_STD
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    (2.0 / fan_in as f64).sqrt()
                };
                he_normal(rng, &shape, std)
            } else if name == "head.cls_out.bias" {
                Tensor::full(&shape, CLS_PRIOR_BIAS)
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// Validates `tensors` against the layout of `cfg`, naming the first
    /// mismatch in layout order.
    pub fn from_tensors(cfg: &DetectorConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in tensors {
            map.insert(name, t);
        }
        let layout = cfg.param_layout();
        for (name, shape) in &layout {
            match map.get(name) {
                None => return Err(Error::MissingParam(name.clone())),
                Some(t) if t.shape() != &shape[..] => {
                    return Err(Error::ParamShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if map.len() != layout.len() {
            let extra = map
                .keys()
                .find(|k| !layout.iter().any(|(n, _)| n == *k))
                .expect("extra key exists");
            return Err(Error::UnexpectedParam(extra.clone()));
        }
        Ok(Self { tensors: map })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn bit_eq(&self, other: &DetectorParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n0, t0), (n1, t1))| n0 == n1 && t0.bit_eq(t1))
    }

    /// Puts every tensor on `tape`, as leaves when `trainable`, else constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        Ok(codec::encode(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))?)
    }
}

/// Parameters placed on a tape.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn conv(&self, tape: &mut Tape, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        let k = tape.shape(w)[2];
        Ok(tape.conv2d(x, w, b, stride, k / 2)?)
    }
}

/// Per-level outputs of one forward pass, as tape variables.
#[derive(Debug, Clone)]
pub struct PyramidVars {
    /// FPN features `[N, fpn_channels, H_l, W_l]`.
    pub features: Vec<Var>,
    /// Classification logits `[N, C, H_l, W_l]`.
    pub logits: Vec<Var>,
    /// Post-sigmoid class probabilities.
    pub probs: Vec<Var>,
    /// Box distances `[N, 4, H_l, W_l]` in stride units.
    pub boxes: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorePyramid {
    pub probs: Vec<Tensor>,
    pub logits: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxPyramid {
    /// `(l,t,r,b)` distances in stride units.
    pub levels: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pyramids {
    pub features: FeaturePyramid,
    pub scores: ScorePyramid,
    pub boxes: BoxPyramid,
}

impl Pyramids {
    /// Batch item `n` of every level.
    pub fn item(&self, n: usize) -> Pyramids {
        let pick = |v: &Vec<Tensor>| v.iter().map(|t| t.batch_item(n)).collect();
        Pyramids {
            features: FeaturePyramid { levels: pick(&self.features.levels) },
            scores: ScorePyramid {
                probs: pick(&self.scores.probs),
                logits: pick(&self.scores.logits),
            },
            boxes: BoxPyramid { levels: pick(&self.boxes.levels) },
        }
    }

    pub fn stack(items: &[&Pyramids]) -> Result<Pyramids> {
        let m = items[0].features.levels.len();
        let cat = |get: &dyn Fn(&Pyramids) -> &Vec<Tensor>| -> Result<Vec<Tensor>> {
            (0..m)
                .map(|l| {
                    let parts: Vec<&Tensor> = items.iter().map(|p| &get(p)[l]).collect();
                    Ok(Tensor::stack_batch(&parts)?)
                })
                .collect()
        };
        Ok(Pyramids {
            features: FeaturePyramid { levels: cat(&|p| &p.features.levels)? },
            scores: ScorePyramid {
                probs: cat(&|p| &p.scores.probs)?,
                logits: cat(&|p| &p.scores.logits)?,
            },
            boxes: BoxPyramid { levels: cat(&|p| &p.boxes.levels)? },
        })
    }
}

impl PyramidVars {
    pub fn values(&self, tape: &Tape) -> Pyramids {
        let get = |vs: &Vec<Var>| vs.iter().map(|&v| tape.value(v).clone()).collect();
        Pyramids {
            features: FeaturePyramid { levels: get(&self.features) },
            scores: ScorePyramid {
                probs: get(&self.probs),
                logits: get(&self.logits),
            },
            boxes: BoxPyramid { levels: get(&self.boxes) },
        }
    }
}

/// Records one forward pass of the detector on `tape`.
pub fn forward(cfg: &DetectorConfig, params: &BoundParams, tape: &mut Tape, images: Var) -> Result<PyramidVars> {
    let [_, c, h, w] = tape.value(images).dims4("detector input")?;
    for (axis, expected, found) in [("C", 3, c), ("H", cfg.input_size, h), ("W", cfg.input_size, w)] {
        if expected != found {
            return Err(frs_autograd::TensorError::Dimension {
                op: "detector input",
                axis,
                expected,
                found,
            }
            .into());
        }
    }

    let mut stages = Vec::with_capacity(4);
    let mut x = images;
    for i in 0..4 {
        let y = params.conv(tape, &format!("backbone.{i}"), x, 2)?;
        x = tape.relu(y);
        stages.push(x);
    }

    let m = cfg.levels();
    let mut laterals = Vec::with_capacity(m);
    for l in 0..m {
        laterals.push(params.conv(tape, &format!("fpn.lateral.{l}"), stages[l + 1], 1)?);
    }
    let mut merged = vec![laterals[m - 1]; m];
    for l in (0..m - 1).rev() {
        let up = tape.upsample_nearest2x(merged[l + 1])?;
        merged[l] = tape.add(laterals[l], up)?;
    }
    let mut features = Vec::with_capacity(m);
    for (l, &p) in merged.iter().enumerate() {
        features.push(params.conv(tape, &format!("fpn.smooth.{l}"), p, 1)?);
    }

    let mut logits = Vec::with_capacity(m);
    let mut probs = Vec::with_capacity(m);
    let mut boxes = Vec::with_capacity(m);
    for &f in &features {
        let mut t = f;
        for d in 0..cfg.head_depth {
            let y = params.conv(tape, &format!("head.cls.{d}"), t, 1)?;
            t = tape.relu(y);
        }
        let lg = params.conv(tape, "head.cls_out", t, 1)?;
        logits.push(lg);
        probs.push(tape.sigmoid(lg));

        let mut t = f;
        for d in 0..cfg.head_depth {
            let y = params.conv(tape, &format!("head.box.{d}"), t, 1)?;
            t = tape.relu(y);
        }
        let raw = params.conv(tape, "head.box_out", t, 1)?;
        boxes.push(tape.exp(raw));
    }

    for l in 0..m {
        let fs = tape.shape(features[l]);
        let ps = tape.shape(probs[l]);
        debug_assert_eq!(fs[2..], ps[2..], "feature/score misalignment at level {l}");
        debug_assert_eq!(fs[2], cfg.level_size(l));
    }

    Ok(PyramidVars {
        features,
        logits,
        probs,
        boxes,
    })
}

/// Gradient-free forward pass over a batch of images `[N,3,H,W]`.
pub fn infer(cfg: &DetectorConfig, params: &DetectorParams, images: &Tensor) -> Result<Pyramids> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let out = forward(cfg, &bound, &mut tape, x)?;
    Ok(out.values(&tape))
}

/// Per-level 1×1 convolutions mapping student FPN channels onto the teacher's.
/// A level is `None` (identity) when the channel counts already agree.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub levels: Vec<Option<(Tensor, Tensor)>>,
}

impl AdapterParams {
    pub fn build(student: &DetectorConfig, teacher: &DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        if student.level_strides != teacher.level_strides || student.input_size != teacher.input_size {
            return Err(Error::Config(
                "student and teacher pyramids are not spatially aligned".into(),
            ));
        }
        let (cs, ct) = (student.fpn_channels, teacher.fpn_channels);
        let levels = (0..teacher.levels())
            .map(|_| {
                (cs != ct).then(|| {
                    let w = he_normal(rng, &[ct, cs, 1, 1], (2.0 / cs as f64).sqrt());
                    (w, Tensor::zeros(&[ct]))
                })
            })
            .collect();
        Ok(Self { levels })
    }

    pub fn is_identity(&self) -> bool {
        self.levels.iter().all(Option::is_none)
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, lvl) in self.levels.iter().enumerate() {
            if let Some((w, b)) = lvl {
                out.push((format!("adapter.{l}.weight"), w));
                out.push((format!("adapter.{l}.bias"), b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, lvl) in self.levels.iter_mut().enumerate() {
            if let Some((w, b)) = lvl {
                out.push((format!("adapter.{l}.weight"), w));
                out.push((format!("adapter.{l}.bias"), b));
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAdapter {
        let levels = self
            .levels
            .iter()
            .map(|lvl| {
                lvl.as_ref().map(|(w, b)| {
                    if trainable {
                        (tape.leaf(w.clone()), tape.leaf(b.clone()))
                    } else {
                        (tape.constant(w.clone()), tape.constant(b.clone()))
                    }
                })
            })
            .collect();
        BoundAdapter { levels }
    }
}

pub struct BoundAdapter {
    pub levels: Vec<Option<(Var, Var)>>,
}

impl BoundAdapter {
    pub fn apply(&self, tape: &mut Tape, level: usize, x: Var) -> Result<Var> {
        match self.levels[level] {
            None => Ok(x),
            Some((w, b)) => Ok(tape.conv2d(x, w, b, 1, 0)?),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.levels
            .iter()
            .flatten()
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

/// `<dir>/<name>.frst` and `<dir>/<name>.json`.
pub fn checkpoint_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.frst")), dir.join(format!("{name}.json")))
}

pub fn save_params(dir: &Path, name: &str, cfg: &DetectorConfig, params: &DetectorParams) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (frst, json) = checkpoint_paths(dir, name);
    codec::save(&frst, params.iter().map(|(n, t)| (n.as_str(), t)))?;
    let text = serde_json::to_string_pretty(cfg).map_err(json_err(&json))?;
    fs::write(&json, text).map_err(io_err(&json))?;
    Ok(frst)
}

/// Loads `<name>.frst` and validates it against `cfg`.
pub fn load_params(path: &Path, cfg: &DetectorConfig) -> Result<DetectorParams> {
    let tensors = codec::load(path)?;
    DetectorParams::from_tensors(cfg, tensors)
}

/// Loads a checkpoint together with the config stored next to it.
pub fn load_checkpoint(frst: &Path) -> Result<(DetectorConfig, DetectorParams)> {
    let json = frst.with_extension("json");
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let cfg: DetectorConfig = serde_json::from_str(&text).map_err(json_err(&json))?;
    cfg.validate()?;
    let params = load_params(frst, &cfg)?;
    Ok((cfg, params))
}

/// Fresh teacher-width parameters from the teacher init stream.
pub fn init_teacher(cfg: &DetectorConfig, seed: u64) -> Result<DetectorParams> {
    DetectorParams::init(cfg, &mut stream(seed, Stream::TeacherInit))
}

pub fn init_student(cfg: &DetectorConfig, seed: u64) -> Result<DetectorParams> {
    DetectorParams::init(cfg, &mut stream(seed, Stream::StudentInit))
}
