//! The five commands behind the CLI: `gen`, `train`, `track`, `eval` and
//! `bench-prune`. Each takes a [`RunConfig`] and writes its artifacts under
//! the configured directories.
//!
//! | command       | reads                      | writes                                   |
//! |---------------|----------------------------|------------------------------------------|
//! | `gen`         |                            | `data_dir/{train,test}/NNNN_suite/`       |
//! | `train`       | `data_dir/train`           | checkpoint, `out_dir/loss.csv`            |
//! | `track`       | checkpoint, `data_dir/test`| `results_dir/<sequence>.txt`              |
//! | `eval`        | results, `data_dir/test`   | `out_dir/metrics.{csv,txt}`               |
//! | `bench-prune` | checkpoint if present      | `out_dir/bench.{csv,txt}`, `bench_layers.csv` |

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::backbone::ModalInputs;
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, RunConfig};
use crate::cost::{CostModelReport, Throughput};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{evaluate_sequence, MetricsReport};
use crate::model::Model;
use crate::rng::derived;
use crate::synth::{generate, list_sequences, read_boxes, sequence_seed, suite_attributes, write_boxes, SceneSpec, Sequence};
use crate::tmce::EliminationStrategy;
use crate::tracker::{track_sequence, Predictor};
use crate::train::{EpochStats, Sampler, Trainer};

pub const TRAIN_SPLIT: u64 = 0;
pub const TEST_SPLIT: u64 = 1;

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Scene specs of one split; suites are assigned round-robin.
pub fn split_specs(cfg: &RunConfig, split: u64) -> Result<Vec<(String, SceneSpec)>> {
    let g = &cfg.gen;
    let count = if split == TRAIN_SPLIT { g.train_sequences } else { g.test_sequences };
    (0..count)
        .map(|i| {
            let suite = &g.suites[i % g.suites.len()];
            let spec = SceneSpec::random(
                sequence_seed(cfg.model.seed, split, i),
                g.frames,
                g.frame_size,
                suite_attributes(suite)?,
            );
            Ok((format!("{i:04}_{suite}"), spec))
        })
        .collect()
}

/// Writes both splits. Existing sequence directories of the same name are
/// replaced.
pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for (split, dir) in [(TRAIN_SPLIT, cfg.paths.train_dir()), (TEST_SPLIT, cfg.paths.test_dir())] {
        create_dir(&dir)?;
        for (name, spec) in split_specs(cfg, split)? {
            jobs.push((dir.join(name), spec));
        }
    }
    jobs.par_iter()
        .map(|(dir, spec)| {
            if dir.exists() {
                std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            generate(spec, dir)
        })
        .collect::<Result<()>>()?;
    log::info!("generated {} sequences under {}", jobs.len(), cfg.paths.data_dir.display());
    Ok(jobs.into_iter().map(|(d, _)| d).collect())
}

fn open_all(root: &Path) -> Result<Vec<Sequence>> {
    list_sequences(root)?.iter().map(|d| Sequence::open(d)).collect()
}

fn loss_csv(rows: &[EpochStats]) -> String {
    let mut s = format!("{}\n", EpochStats::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn read_loss_csv(path: &Path, before: usize) -> Result<Vec<EpochStats>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |l: &str| Error::Data(format!("{}: bad row {l:?}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(bad(l));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(l));
            Ok(EpochStats {
                epoch: f[0].parse().map_err(|_| bad(l))?,
                loss: num(1)?,
                cls: num(2)?,
                iou: num(3)?,
                l1: num(4)?,
                lr_backbone: num(5)?,
                lr_other: num(6)?,
            })
        })
        .filter(|r| r.as_ref().map_or(true, |r| r.epoch < before))
        .collect()
}

/// Trains for `train.epochs` epochs, saving the checkpoint after every
/// epoch. With `resume`, continues from the checkpoint's epoch counter.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let seqs = open_all(&cfg.paths.train_dir())
        .map_err(|e| Error::Data(format!("training data missing ({e}); run `gen` first")))?;
    let sampler = Sampler::new(&seqs, cfg)?;
    let ck_path = cfg.paths.checkpoint();
    let loss_path = cfg.paths.out_dir.join("loss.csv");
    if let Some(p) = ck_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(p)?;
    }
    create_dir(&cfg.paths.out_dir)?;
    let (mut trainer, mut rows) = if resume {
        let t = Trainer::resume(cfg, &Checkpoint::load(&ck_path)?)?;
        let rows = if loss_path.exists() { read_loss_csv(&loss_path, t.epoch)? } else { Vec::new() };
        log::info!("resuming at epoch {}", t.epoch);
        (t, rows)
    } else {
        (Trainer::new(cfg)?, Vec::new())
    };
    while trainer.epoch < cfg.train.epochs {
        rows.push(trainer.run_epoch(&sampler)?);
        trainer.checkpoint().save(&ck_path)?;
        write(&loss_path, &loss_csv(&rows))?;
    }
    Ok(rows)
}

/// Loads model weights from the configured checkpoint.
pub fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.paths.checkpoint();
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("checkpoint not found: {}", path.display())));
    }
    let mut model = Model::new(&cfg.model)?;
    Checkpoint::load(&path)?.restore_params(&mut model.params)?;
    Ok(model)
}

/// Sequences `track` and `eval` work on: the configured single sequence,
/// or every test sequence.
pub fn eval_sequences(cfg: &RunConfig) -> Result<Vec<Sequence>> {
    if cfg.paths.sequence.as_os_str().is_empty() {
        open_all(&cfg.paths.test_dir())
    } else {
        Ok(vec![Sequence::open(&cfg.paths.sequence)?])
    }
}

/// Tracks every evaluation sequence with `model`.
pub fn track_with<P: Predictor + Sync + ?Sized>(cfg: &RunConfig, model: &P) -> Result<Vec<PathBuf>> {
    let seqs = eval_sequences(cfg)?;
    let out = cfg.paths.results_dir();
    create_dir(&out)?;
    seqs.par_iter()
        .map(|s| {
            let boxes = track_sequence(model, s)?;
            let p = out.join(format!("{}.txt", s.name));
            write_boxes(&p, &boxes)?;
            log::debug!("tracked {}", s.name);
            Ok(p)
        })
        .collect()
}

pub fn cmd_track(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    track_with(cfg, &load_model(cfg)?)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let results = cfg.paths.results_dir();
    let per_seq = eval_sequences(cfg)?
        .par_iter()
        .map(|s| {
            let p = results.join(format!("{}.txt", s.name));
            if !p.is_file() {
                return Err(Error::Data(format!("no result file for {} at {}", s.name, p.display())));
            }
            let pred = read_boxes(&p)?;
            evaluate_sequence(&s.name, &pred, &s.boxes, cfg.eval.pr_threshold, cfg.eval.npr_threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::new(per_seq)?;
    create_dir(&cfg.paths.out_dir)?;
    write(&cfg.paths.out_dir.join("metrics.csv"), &report.to_csv())?;
    write(&cfg.paths.out_dir.join("metrics.txt"), &report.to_table())?;
    Ok(report)
}

fn random_image(rng: &mut impl Rng, size: usize, channels: usize) -> Result<Image> {
    Image::new(size, size, channels, (0..size * size * channels).map(|_| rng.gen()).collect())
}

/// Times `frames` inference passes after one warm-up pass.
pub fn measure_throughput(cfg: &ModelConfig, params: Option<&Checkpoint>, frames: usize) -> Result<Throughput> {
    let mut model = Model::new(cfg)?;
    if let Some(ck) = params {
        ck.restore_params(&mut model.params)?;
    }
    let mut rng = derived(cfg.seed, 0xbe4c);
    let (t, s) = (cfg.template_size, cfg.search_size);
    let rgb = [random_image(&mut rng, t, 3)?, random_image(&mut rng, t, 3)?, random_image(&mut rng, s, 3)?];
    let tir = [random_image(&mut rng, t, 1)?, random_image(&mut rng, t, 1)?, random_image(&mut rng, s, 1)?];
    let (r, i) = (ModalInputs::from_triple(&rgb), ModalInputs::from_triple(&tir));
    model.predict(&r, &i)?;
    let frames = frames.max(1);
    let start = Instant::now();
    for _ in 0..frames {
        model.predict(&r, &i)?;
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    let fps = frames as f64 / secs;
    Ok(Throughput {
        frames_per_sec: fps,
        tokens_per_sec: fps * cfg.search_tokens() as f64,
    })
}

/// Analytic costs for every strategy plus measured throughput. Uses the
/// checkpoint weights when the file exists, random weights otherwise.
pub fn cmd_bench_prune(cfg: &RunConfig) -> Result<CostModelReport> {
    cfg.validate()?;
    let ck_path = cfg.paths.checkpoint();
    let ck = if ck_path.is_file() { Some(Checkpoint::load(&ck_path)?) } else { None };
    let mut report = CostModelReport::analytic(&cfg.model, &EliminationStrategy::ALL);
    for (slot, s) in report.measured.iter_mut().zip(EliminationStrategy::ALL) {
        let m = ModelConfig {
            elimination_strategy: s,
            ..cfg.model.clone()
        };
        let t = measure_throughput(&m, ck.as_ref(), cfg.bench_frames)?;
        log::info!("{s}: {:.2} frames/s", t.frames_per_sec);
        *slot = Some(t);
    }
    create_dir(&cfg.paths.out_dir)?;
    write(&cfg.paths.out_dir.join("bench.csv"), &report.to_csv())?;
    write(&cfg.paths.out_dir.join("bench_layers.csv"), &report.layers_csv())?;
    write(&cfg.paths.out_dir.join("bench.txt"), &report.to_table())?;
    Ok(report)
}
