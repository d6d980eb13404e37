use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use btmtrack::backbone::ModalInputs;
use btmtrack::checkpoint::Checkpoint;
use btmtrack::config::{ModelConfig, RunConfig};
use btmtrack::head::{BBox, HeadOutput};
use btmtrack::image::CropWindow;
use btmtrack::pipeline::{cmd_bench_prune, cmd_eval, cmd_gen, cmd_track, cmd_train, track_with};
use btmtrack::synth::{read_boxes, Sequence};
use btmtrack::tracker::Predictor;
use btmtrack::{Error, Result};

fn tiny(root: &Path) -> RunConfig {
    let text = format!(
        "patch_size = 4\ndim = 8\nheads = 2\ndepth = 2\nmlp_ratio = 2\nprune_layers = 1\ntdtb_layers = 1\n\
         template_size = 8\nsearch_size = 16\n\
         gen_train_sequences = 4\ngen_test_sequences = 2\ngen_frames = 6\ngen_frame_size = 64\n\
         epochs = 2\nsamples_per_epoch = 8\nbatch_size = 4\nbench_frames = 2\n\
         data_dir = {0}/data\nout_dir = {0}/out\n",
        root.display()
    );
    RunConfig::from_text(&text).unwrap()
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_deterministic_and_covers_every_suite() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let dirs = cmd_gen(&tiny(a.path())).unwrap();
    cmd_gen(&tiny(b.path())).unwrap();
    assert_eq!(dirs.len(), 6);
    let (ta, tb) = (tree_bytes(&a.path().join("data")), tree_bytes(&b.path().join("data")));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
    let names: Vec<String> = dirs.iter().map(|d| d.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for suite in ["clean", "low_light", "thermal_crossover"] {
        assert!(names.iter().any(|n| n.ends_with(suite)), "{suite} missing from {names:?}");
    }
    // regenerating over existing output gives the same bytes
    cmd_gen(&tiny(a.path())).unwrap();
    assert_eq!(tree_bytes(&a.path().join("data")), tb);
    // a different seed gives different scenes
    let c = tempfile::tempdir().unwrap();
    let mut cfg = tiny(c.path());
    cfg.model.seed = 43;
    cmd_gen(&cfg).unwrap();
    assert_ne!(tree_bytes(&c.path().join("data")), tb);
}

#[test]
fn bad_manifest_key_is_named() {
    let err = RunConfig::from_text("gen_frames = 4\ngen_franes = 5\n").unwrap_err();
    assert!(err.to_string().contains("gen_franes"), "{err}");
}

#[test]
fn train_without_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(cmd_train(&tiny(dir.path()), false), Err(Error::Data(_))));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_gen(&cfg).unwrap();

    let full = cmd_train(&cfg, false).unwrap();
    assert_eq!(full.len(), 2);
    assert!(full.iter().all(|r| r.loss.is_finite()));
    let full_ck = std::fs::read(cfg.paths.checkpoint()).unwrap();
    let full_csv = std::fs::read_to_string(cfg.paths.out_dir.join("loss.csv")).unwrap();

    let mut half = cfg.clone();
    half.paths.out_dir = dir.path().join("half");
    half.train.epochs = 1;
    cmd_train(&half, false).unwrap();
    half.train.epochs = 2;
    let resumed = cmd_train(&half, true).unwrap();

    // earlier rows come back from the CSV at its printed precision
    assert_eq!(resumed.len(), 2);
    assert_eq!(resumed[1], full[1]);
    assert_eq!(std::fs::read(half.paths.checkpoint()).unwrap(), full_ck);
    assert_eq!(std::fs::read_to_string(half.paths.out_dir.join("loss.csv")).unwrap(), full_csv);
    // the checkpoint is a valid model file
    let ck = Checkpoint::from_bytes(&full_ck).unwrap();
    assert_eq!(ck.get("train.epoch").unwrap().item(), 2.0);
}

/// Knows the ground truth and answers with it, given that the tracker
/// centres each search window on the previous ground-truth box.
struct Oracle {
    cfg: ModelConfig,
    boxes: Vec<btmtrack::image::PixelBox>,
    frame: AtomicUsize,
}

impl Predictor for Oracle {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn predict(&self, _: &ModalInputs<'_>, _: &ModalInputs<'_>) -> Result<HeadOutput> {
        let f = self.frame.fetch_add(1, Ordering::SeqCst) + 1;
        let window = CropWindow::around(&self.boxes[f - 1], self.cfg.search_factor);
        let b = BBox::from_array(window.to_crop(&self.boxes[f]));
        let n = self.cfg.feat_size();
        Ok(HeadOutput::encode(&b, n, n))
    }
}

#[test]
fn perfect_predictor_reproduces_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cmd_gen(&cfg).unwrap();
    let seq_dir = btmtrack::synth::list_sequences(&cfg.paths.test_dir()).unwrap()[0].clone();
    cfg.paths.sequence = seq_dir.clone();
    let seq = Sequence::open(&seq_dir).unwrap();
    let oracle = Oracle {
        cfg: cfg.model.clone(),
        boxes: seq.boxes.clone(),
        frame: AtomicUsize::new(0),
    };
    let files = track_with(&cfg, &oracle).unwrap();
    assert_eq!(files.len(), 1);
    let got = read_boxes(&files[0]).unwrap();
    assert_eq!(got.len(), seq.len());
    for (g, t) in got.iter().zip(&seq.boxes) {
        assert!(g.iou(t) > 0.999, "{g:?} vs {t:?}");
    }
    let report = cmd_eval(&cfg).unwrap();
    assert_eq!(report.overall.pr, 1.0);
    assert!(report.overall.sr > 0.95);
}

#[test]
fn track_needs_a_checkpoint_and_writes_one_line_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_gen(&cfg).unwrap();
    let err = cmd_track(&cfg).unwrap_err();
    assert!(err.to_string().contains("checkpoint not found"), "{err}");
    assert!(err.to_string().contains("model.btmt"), "{err}");

    cmd_train(&cfg, false).unwrap();
    let files = cmd_track(&cfg).unwrap();
    assert_eq!(files.len(), 2);
    for f in &files {
        let name = f.file_stem().unwrap().to_string_lossy().into_owned();
        let seq = Sequence::open(&cfg.paths.test_dir().join(&name)).unwrap();
        assert_eq!(read_boxes(f).unwrap().len(), seq.len());
    }
    let report = cmd_eval(&cfg).unwrap();
    assert_eq!(report.sequences.len(), 2);
    let csv = std::fs::read_to_string(cfg.paths.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(cfg.paths.out_dir.join("metrics.txt").is_file());
}

#[test]
fn eval_without_results_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_gen(&cfg).unwrap();
    assert!(matches!(cmd_eval(&cfg), Err(Error::Data(_))));
}

#[test]
fn bench_prune_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let report = cmd_bench_prune(&cfg).unwrap();
    assert!(report.measured.iter().all(|m| m.as_ref().is_some_and(|t| t.tokens_per_sec > 0.0)));
    for f in ["bench.csv", "bench_layers.csv", "bench.txt"] {
        assert!(cfg.paths.out_dir.join(f).is_file(), "{f}");
    }
    let none = &report.strategies[0];
    assert!(report.strategies.iter().all(|s| s.total_flops <= none.total_flops));
}
