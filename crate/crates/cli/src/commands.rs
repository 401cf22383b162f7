use std::fs;
use std::path::{Path, PathBuf};

use frs_autograd::codec;
use frs_core::analysis::{analyze_teacher, export_heatmaps, parse_regions};
use frs_core::data::{self, Dataset, Sample};
use frs_core::detector::{infer, load_checkpoint, save_params, DetectorConfig, DetectorParams};
use frs_core::eval::evaluate;
use frs_core::frs::feature_richness_masks;
use frs_core::gradcheck::full_suite;
use frs_core::train::{
    distill, teacher_strength_sweep, train_student_baseline, train_teacher, LossRow, RegionRestriction, RunRecord,
    Teacher, TrainOutput,
};
use frs_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ensure_dir, parse_modules, CliConfig};
use crate::{Command, Common, DistillFlags};

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    seed: u64,
    threads: usize,
    /// SHA-256 of every input file or dataset.
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
}

struct RunDir {
    dir: PathBuf,
    command: &'static str,
    seed: u64,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
}

impl RunDir {
    fn new(out: &Path, command: &'static str, seed: u64, cfg: &CliConfig) -> Result<Self> {
        let dir = ensure_dir(out)?;
        let mut run = Self {
            dir,
            command,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        run.write_json("config.json", cfg)?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn input_file(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.inputs.push((label.to_string(), hex::encode(Sha256::digest(&bytes))));
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.outputs.sort();
        self.outputs.dedup();
        let manifest = Manifest {
            command: self.command,
            argv: std::env::args().skip(1).collect(),
            seed: self.seed,
            threads: threads()?,
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
        };
        let path = self.path("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))? + "\n";
        fs::write(&path, text).map_err(|source| Error::Io { path, source })
    }
}

/// Analysis parallelism from `FRS_THREADS`, default 1.
fn threads() -> Result<usize> {
    match std::env::var("FRS_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("FRS_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn base_config(common: &Common) -> Result<(CliConfig, u64)> {
    let mut cfg = CliConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    cfg.train.seed = seed;
    Ok((cfg, seed))
}

fn load_data(run: &mut RunDir, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::load(dir)?;
    run.inputs.push(("dataset".into(), ds.content_hash()?));
    Ok(ds)
}

fn load_model(run: &mut RunDir, label: &str, path: &Path) -> Result<(DetectorConfig, DetectorParams)> {
    let out = load_checkpoint(path)?;
    run.input_file(label, path)?;
    Ok(out)
}

fn printer(every: usize, total: usize) -> impl FnMut(usize, &LossRow) {
    move |iter, row| {
        if iter % every == 0 || iter + 1 == total {
            println!("{}", row.progress_line(iter));
        }
    }
}

fn save_training(run: &mut RunDir, name: &str, cfg: &DetectorConfig, mut out: TrainOutput) -> Result<RunRecord> {
    let ckpt = save_params(&run.dir, name, cfg, &out.params)?;
    run.outputs.push(format!("{name}.frst"));
    run.outputs.push(format!("{name}.json"));
    if let Some(a) = &out.adapter {
        let path = run.path("adapter.frst");
        let named = a.named();
        codec::save(&path, named.iter().map(|(n, t)| (n.as_str(), *t)))?;
        run.outputs.push("adapter.frst".into());
    }
    out.record.checkpoint = Some(ckpt);
    run.write_json("run.json", &out.record)?;
    if let Some(m) = &out.record.metrics {
        run.write_json("metrics.json", m)?;
        run.write_text("metrics.txt", &m.table())?;
        print!("{}", m.table());
    }
    Ok(out.record)
}

fn apply_distill_flags(cfg: &mut CliConfig, flags: &DistillFlags) -> Result<()> {
    if let Some(a) = flags.alpha {
        cfg.distill.alpha = a;
    }
    if let Some(b) = flags.beta {
        cfg.distill.beta = b;
    }
    if let Some(m) = &flags.modules {
        (cfg.distill.enable_fpn, cfg.distill.enable_head) = parse_modules(m)?;
    }
    if let Some(i) = flags.iters {
        cfg.train.iterations = i;
    }
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            count,
            rho,
            ppm,
        } => {
            let (mut cfg, seed) = base_config(&common)?;
            if let Some(r) = rho {
                cfg.synth.lookalike_fraction = r;
            }
            cfg.validate()?;
            // the dataset manifest doubles as the run manifest
            let run = RunDir::new(&common.out, "gen-data", seed, &cfg)?;
            let ds = data::generate(&cfg.synth, seed, count)?;
            let manifest = ds.save(&run.dir, ppm)?;
            println!(
                "generated {} images ({} train / {} val), hash {}",
                manifest.count, manifest.train_count, manifest.val_count, manifest.content_hash
            );
            let mut classes = String::new();
            for (name, n) in data::class_histogram(&ds.samples) {
                classes.push_str(&format!("{name}={n} "));
            }
            println!("objects: {}", classes.trim_end());
            Ok(())
        }

        Command::TrainTeacher { common, data, iters } => train_single(&common, &data, iters, true),
        Command::TrainStudent { common, data, iters } => train_single(&common, &data, iters, false),

        Command::Distill {
            common,
            data,
            teacher,
            flags,
            regions,
            tau,
        } => {
            let (mut cfg, seed) = base_config(&common)?;
            apply_distill_flags(&mut cfg, &flags)?;
            if let Some(t) = tau {
                cfg.tau = t;
            }
            let restriction = match &regions {
                Some(r) => {
                    cfg.distill.enable_head = false;
                    cfg.distill.enable_fpn = true;
                    Some(RegionRestriction {
                        regions: parse_regions(r)?,
                        tau: cfg.tau,
                    })
                }
                None => None,
            };
            cfg.validate()?;
            let mut run = RunDir::new(&common.out, "distill", seed, &cfg)?;
            let ds = load_data(&mut run, &data)?;
            let (tcfg, tparams) = load_model(&mut run, "teacher", &teacher)?;
            let t = Teacher::new(tcfg, tparams, ds.train())?;
            let mut progress = printer(cfg.log_every, cfg.train.iterations);
            let out = distill(
                &t,
                &cfg.student,
                &cfg.distill,
                &cfg.train,
                &ds,
                restriction.as_ref(),
                &mut progress,
            )?;
            save_training(&mut run, "student", &cfg.student, out)?;
            run.finish()
        }

        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            let (cfg, seed) = base_config(&common)?;
            let mut run = RunDir::new(&common.out, "eval", seed, &cfg)?;
            let ds = load_data(&mut run, &data)?;
            let (det, params) = load_model(&mut run, "checkpoint", &checkpoint)?;
            let metrics = evaluate(&det, &params, ds.val())?;
            run.write_json("metrics.json", &metrics)?;
            run.write_text("metrics.txt", &metrics.table())?;
            print!("{}", metrics.table());
            run.finish()
        }

        Command::AnalyzeRegions {
            common,
            data,
            teacher,
            tau,
        } => {
            let (mut cfg, seed) = base_config(&common)?;
            if let Some(t) = tau {
                cfg.tau = t;
            }
            cfg.validate()?;
            let mut run = RunDir::new(&common.out, "analyze-regions", seed, &cfg)?;
            let ds = load_data(&mut run, &data)?;
            let (det, params) = load_model(&mut run, "teacher", &teacher)?;
            let analysis = analyze_teacher(&det, &params, ds.val(), cfg.tau, threads()?)?;
            run.write_json("region_stats.json", &analysis.regions)?;
            run.write_text("region_stats.txt", &analysis.regions.table())?;
            print!("{}", analysis.regions.table());
            run.finish()
        }

        Command::ExportMasks {
            common,
            data,
            teacher,
            index,
        } => {
            let (cfg, seed) = base_config(&common)?;
            let mut run = RunDir::new(&common.out, "export-masks", seed, &cfg)?;
            let ds = load_data(&mut run, &data)?;
            let (det, params) = load_model(&mut run, "teacher", &teacher)?;
            let sample: &Sample = ds.val().get(index).ok_or_else(|| {
                Error::Config(format!("index {index} outside the {} validation images", ds.val().len()))
            })?;
            let out = infer(&det, &params, &data::stack_images(&[sample]))?;
            let masks = feature_richness_masks(&out.scores)?;
            for path in export_heatmaps(&masks, 0, &run.dir)? {
                println!("wrote {}", path.display());
                run.outputs.push(path.file_name().expect("file name").to_string_lossy().into_owned());
            }
            let names: Vec<String> = (0..masks.levels()).map(|l| format!("level{l}")).collect();
            codec::save(
                run.path("masks.frst"),
                names.iter().map(String::as_str).zip(masks.masks()),
            )?;
            run.outputs.push("masks.frst".into());
            run.finish()
        }

        Command::ProbeLookalike { common, data, teacher } => {
            let (cfg, seed) = base_config(&common)?;
            let mut run = RunDir::new(&common.out, "probe-lookalike", seed, &cfg)?;
            let ds = load_data(&mut run, &data)?;
            let (det, params) = load_model(&mut run, "teacher", &teacher)?;
            let analysis = analyze_teacher(&det, &params, ds.val(), cfg.tau, threads()?)?;
            run.write_json("probe.json", &analysis.probe)?;
            match &analysis.probe {
                None => println!("no lookalike pixels in the validation split"),
                Some(p) => {
                    println!("{:<8} {:>10} {:>10} {:>8}", "level", "lookalike", "background", "ratio");
                    let rows = p.levels.iter().enumerate().map(|(l, s)| (format!("P{}", l + 2), s));
                    for (name, s) in rows.chain([("pooled".to_string(), &p.pooled)]) {
                        println!(
                            "{:<8} {:>10.6} {:>10.6} {:>8.3}",
                            name, s.lookalike_mean, s.background_mean, s.ratio
                        );
                    }
                }
            }
            run.finish()
        }

        Command::SweepTeachers {
            common,
            data,
            teachers,
            flags,
        } => {
            let (mut cfg, seed) = base_config(&common)?;
            apply_distill_flags(&mut cfg, &flags)?;
            cfg.validate()?;
            let mut run = RunDir::new(&common.out, "sweep-teachers", seed, &cfg)?;
            let ds = load_data(&mut run, &data)?;
            let mut built = Vec::with_capacity(teachers.len());
            for (i, path) in teachers.iter().enumerate() {
                let (det, params) = load_model(&mut run, &format!("teacher{i}"), path)?;
                built.push((path.display().to_string(), Teacher::new(det, params, ds.train())?));
            }
            let refs: Vec<(String, &Teacher)> = built.iter().map(|(n, t)| (n.clone(), t)).collect();
            let mut progress = printer(cfg.log_every, cfg.train.iterations);
            let rows = teacher_strength_sweep(&refs, &cfg.student, &cfg.distill, &cfg.train, &ds, &mut progress)?;
            let mut table = format!("{:<24} {:>8} {:>8}\n", "teacher", "AP50", "student");
            for r in &rows {
                table.push_str(&format!("{r}\n"));
            }
            print!("{table}");
            run.write_json("sweep.json", &rows)?;
            run.write_text("sweep.txt", &table)?;
            run.finish()
        }

        Command::Gradcheck { seed, out } => {
            let seeds = seed.map_or_else(|| vec![0, 1, 2], |s| vec![s]);
            let mut text = String::new();
            let mut failed = Vec::new();
            for s in seeds {
                let report = full_suite(s)?;
                text.push_str(&report.to_string());
                if !report.passed() {
                    failed.push(s);
                }
            }
            print!("{text}");
            if let Some(dir) = out {
                let dir = ensure_dir(&dir)?;
                let path = dir.join("gradcheck.txt");
                fs::write(&path, &text).map_err(|source| Error::Io { path, source })?;
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Format {
                    path: PathBuf::from("gradcheck"),
                    reason: format!("failed for seeds {failed:?}"),
                })
            }
        }
    }
}

fn train_single(common: &Common, data: &Path, iters: Option<usize>, teacher: bool) -> Result<()> {
    let (mut cfg, seed) = base_config(common)?;
    if let Some(i) = iters {
        cfg.train.iterations = i;
    }
    cfg.validate()?;
    let (name, command, det) = if teacher {
        ("teacher", "train-teacher", cfg.teacher.clone())
    } else {
        ("student", "train-student", cfg.student.clone())
    };
    let mut run = RunDir::new(&common.out, command, seed, &cfg)?;
    let ds = load_data(&mut run, data)?;
    let mut progress = printer(cfg.log_every, cfg.train.iterations);
    let out = if teacher {
        train_teacher(&det, &ds, &cfg.train, &mut progress)?
    } else {
        train_student_baseline(&det, &ds, &cfg.train, &mut progress)?
    };
    save_training(&mut run, name, &det, out)?;
    run.finish()
}
