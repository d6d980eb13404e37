//! Toy training loop.
//!
//! Samples are `(static template, dynamic template, search)` triples from
//! one sequence: the dynamic template comes from a frame no earlier than the
//! static one and the search region from a later frame, cropped around a
//! jittered copy of the target box. Parameters fall into two groups with
//! their own learning rates, both divided by ten at the decay epoch. The
//! keep ratio can start at 1 and reach its configured value after a few
//! epochs, so that pruning driven by untrained attention does not discard
//! the target early on.
//!
//! At the end of every epoch the parameters and optimiser state are rounded
//! to `f32`, the precision checkpoints store, so resuming from a checkpoint
//! continues exactly like an uninterrupted run.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::backbone::ModalInputs;
use crate::checkpoint::{quantize, Checkpoint};
use crate::config::{OptimizerKind, RunConfig};
use crate::error::{Error, Result};
use crate::head::{loss, BBox};
use crate::image::{CropWindow, Image, PixelBox};
use crate::model::Model;
use crate::nn::{Ctx, ParamGroup};
use crate::rng::derived;
use crate::synth::Sequence;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One training triple, already cropped.
#[derive(Clone, Debug)]
pub struct Sample {
    pub rgb: [Image; 3],
    pub tir: [Image; 3],
    pub target: BBox,
}

impl Sample {
    pub fn inputs(&self) -> (ModalInputs<'_>, ModalInputs<'_>) {
        (ModalInputs::from_triple(&self.rgb), ModalInputs::from_triple(&self.tir))
    }
}

/// Draws samples from a fixed list of sequences.
pub struct Sampler<'a> {
    seqs: &'a [Sequence],
    cfg: &'a RunConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(seqs: &'a [Sequence], cfg: &'a RunConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Data("no training sequences".into()));
        }
        if let Some(s) = seqs.iter().find(|s| s.len() < 2) {
            return Err(Error::Data(format!("sequence {} has fewer than 2 frames", s.name)));
        }
        Ok(Sampler { seqs, cfg })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Sample> {
        let m = &self.cfg.model;
        let t = &self.cfg.train;
        let seq = &self.seqs[rng.gen_range(0..self.seqs.len())];
        let (a, b, search) = pick_frames(rng, seq.len(), t.max_frame_gap);

        let mut rgb = Vec::with_capacity(3);
        let mut tir = Vec::with_capacity(3);
        for f in [a, b] {
            let (r, i) = seq.frame(f)?;
            let win = CropWindow::around(&seq.boxes[f], m.template_factor);
            rgb.push(r.crop_resize(&win, m.template_size));
            tir.push(i.crop_resize(&win, m.template_size));
        }
        let gt = seq.boxes[search];
        let (cx, cy) = gt.center();
        let side = (gt.w * gt.h).sqrt();
        let jitter = |rng: &mut dyn rand::RngCore| rng.gen_range(-1.0..1.0) * t.jitter_shift * side;
        let scale = (t.jitter_scale * rng.sample::<f64, _>(StandardNormal)).exp();
        let (jx, jy) = (jitter(rng), jitter(rng));
        let centre = PixelBox::from_center(cx + jx, cy + jy, gt.w * scale, gt.h * scale);
        let win = CropWindow::around(&centre, m.search_factor);
        let (r, i) = seq.frame(search)?;
        rgb.push(r.crop_resize(&win, m.search_size));
        tir.push(i.crop_resize(&win, m.search_size));
        let target = BBox::from_array(win.to_crop(&gt));
        let arr = |v: Vec<Image>| -> [Image; 3] { v.try_into().unwrap_or_else(|_| unreachable!()) };
        Ok(Sample {
            rgb: arr(rgb),
            tir: arr(tir),
            target,
        })
    }
}

/// Frame indices `(static, dynamic, search)` with
/// `search - gap <= static <= dynamic < search < n`. Needs `n >= 2`.
pub fn pick_frames(rng: &mut impl Rng, n: usize, max_gap: usize) -> (usize, usize, usize) {
    let gap = max_gap.clamp(1, n - 1);
    let search = rng.gen_range(1..n);
    let a = rng.gen_range(search.saturating_sub(gap)..search);
    let b = rng.gen_range(a..search);
    (a, b, search)
}

/// Per-parameter optimiser slots.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    /// Momentum buffer (SGD) or first moment (AdamW).
    pub m: Vec<Tensor>,
    /// Second moment (AdamW only; zeros for SGD).
    pub v: Vec<Tensor>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub lr_backbone: f64,
    pub lr_other: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,loss,cls,iou,l1,lr_backbone,lr_other";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:e},{:e}",
            self.epoch, self.loss, self.cls, self.iou, self.l1, self.lr_backbone, self.lr_other
        )
    }
}

pub struct Trainer {
    pub model: Model,
    pub opt: OptimState,
    /// Next epoch to run (0-based).
    pub epoch: usize,
    cfg: RunConfig,
}

const EPOCH_RECORD: &str = "train.epoch";
const STEP_RECORD: &str = "train.step";

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model)?;
        let zeros: Vec<Tensor> = model
            .params
            .ids()
            .map(|id| Tensor::zeros(model.params.get(id).shape().to_vec()))
            .collect();
        Ok(Trainer {
            opt: OptimState {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            },
            model,
            epoch: 0,
            cfg: cfg.clone(),
        })
    }

    /// Restores parameters, optimiser state and the epoch counter.
    pub fn resume(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        ck.restore_params(&mut t.model.params)?;
        let scalar = |name: &str| {
            ck.get(name)
                .map(|v| v.data()[0])
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}; not a training checkpoint")))
        };
        t.epoch = scalar(EPOCH_RECORD)? as usize;
        t.opt.step = scalar(STEP_RECORD)? as u64;
        for id in t.model.params.ids().collect::<Vec<_>>() {
            let name = t.model.params.name(id).to_string();
            for (slot, tag) in [(&mut t.opt.m, "m"), (&mut t.opt.v, "v")] {
                let rec = ck
                    .get(&format!("opt.{tag}.{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimiser state for {name}")))?;
                if rec.shape() != slot[id.index()].shape() {
                    return Err(Error::Checkpoint(format!("optimiser state for {name} has the wrong shape")));
                }
                slot[id.index()] = rec.clone();
            }
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.model.params);
        for id in self.model.params.ids() {
            let name = self.model.params.name(id);
            ck.push(format!("opt.m.{name}"), self.opt.m[id.index()].clone());
            ck.push(format!("opt.v.{name}"), self.opt.v[id.index()].clone());
        }
        ck.push(EPOCH_RECORD, Tensor::scalar(self.epoch as f64));
        ck.push(STEP_RECORD, Tensor::scalar(self.opt.step as f64));
        ck
    }

    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let t = &self.cfg.train;
        let f = if epoch >= t.decay_epoch() { 0.1 } else { 1.0 };
        (t.lr_backbone * f, t.lr_other * f)
    }

    /// Mean loss terms and gradients over one batch.
    pub fn batch_gradients(&self, batch: &[Sample]) -> Result<([f64; 4], Vec<Option<Tensor>>)> {
        let tape = Tape::new();
        let ctx = Ctx::train(&tape, &self.model.params);
        let wts = self.model.loss_weights();
        let mut total: Option<crate::tape::Var<'_>> = None;
        let mut parts = [0.0; 4];
        for s in batch {
            let (rgb, tir) = s.inputs();
            let out = self.model.forward(&ctx, &rgb, &tir)?;
            let l = loss(&out.head, &s.target, &wts)?;
            parts[1] += l.cls;
            parts[2] += l.iou;
            parts[3] += l.l1;
            total = Some(match total {
                Some(t) => t.add(l.total)?,
                None => l.total,
            });
        }
        let k = batch.len() as f64;
        let total = total.ok_or_else(|| Error::Data("empty batch".into()))?.scale(1.0 / k);
        parts[0] = total.value().item();
        for p in &mut parts[1..] {
            *p /= k;
        }
        let grads = ctx.param_grads(&tape.backward(total)?);
        Ok((parts, grads))
    }

    fn apply(&mut self, grads: Vec<Option<Tensor>>, lrs: (f64, f64)) {
        let t = &self.cfg.train;
        let mut grads: Vec<Option<Tensor>> = grads;
        if t.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > t.grad_clip {
                let s = t.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        self.opt.step += 1;
        let step = self.opt.step as i32;
        let ids: Vec<_> = self.model.params.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let lr = match self.model.params.group(id) {
                ParamGroup::Backbone => lrs.0,
                ParamGroup::Other => lrs.1,
            };
            let m = self.opt.m[id.index()].data_mut();
            let v = self.opt.v[id.index()].data_mut();
            let p = self.model.params.get_mut(id).data_mut();
            match t.optimizer {
                OptimizerKind::Sgd => {
                    for ((p, m), g) in p.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *m = t.momentum * *m + g + t.weight_decay * *p;
                        *p -= lr * *m;
                    }
                }
                OptimizerKind::AdamW => {
                    let (b1, b2, eps) = (t.momentum, 0.999, 1e-8);
                    let (c1, c2) = (1.0 - b1.powi(step), 1.0 - f64::powi(b2, step));
                    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + eps) + t.weight_decay * *p);
                    }
                }
            }
        }
    }

    /// One optimiser update on `batch` at the current epoch's learning
    /// rates and keep ratio. Returns the mean `[total, cls, iou, l1]`
    /// before the update.
    pub fn step(&mut self, batch: &[Sample]) -> Result<[f64; 4]> {
        let target = self.cfg.model.keep_ratio;
        self.model.set_keep_ratio(self.cfg.train.keep_ratio_at(self.epoch, target))?;
        let result = self.batch_gradients(batch);
        self.model.set_keep_ratio(target)?;
        let (parts, grads) = result?;
        if !parts[0].is_finite() {
            return Err(Error::Data(format!("non-finite loss in epoch {}", self.epoch)));
        }
        self.apply(grads, self.learning_rates(self.epoch));
        Ok(parts)
    }

    /// Runs the next epoch and advances the epoch counter.
    pub fn run_epoch(&mut self, sampler: &Sampler<'_>) -> Result<EpochStats> {
        let epoch = self.epoch;
        let t = self.cfg.train.clone();
        let lrs = self.learning_rates(epoch);
        let mut rng = derived(self.cfg.model.seed, 0x7261_696e_0000_0000 | epoch as u64);
        let batches = t.samples_per_epoch / t.batch_size;
        let mut acc = [0.0; 4];
        for _ in 0..batches {
            let batch = (0..t.batch_size).map(|_| sampler.sample(&mut rng)).collect::<Result<Vec<_>>>()?;
            let parts = self.step(&batch)?;
            for (a, p) in acc.iter_mut().zip(parts) {
                *a += p / batches as f64;
            }
        }
        for id in self.model.params.ids().collect::<Vec<_>>() {
            quantize(self.model.params.get_mut(id));
            quantize(&mut self.opt.m[id.index()]);
            quantize(&mut self.opt.v[id.index()]);
        }
        self.epoch += 1;
        let stats = EpochStats {
            epoch,
            loss: acc[0],
            cls: acc[1],
            iou: acc[2],
            l1: acc[3],
            lr_backbone: lrs.0,
            lr_other: lrs.1,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}, iou {:.4}, l1 {:.4})",
            stats.loss,
            stats.cls,
            stats.iou,
            stats.l1
        );
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::rng::seeded;

    fn micro() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            patch_size: 2,
            dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            prune_layers: vec![1],
            tdtb_layers: vec![1],
            keep_ratio: 0.5,
            template_size: 2,
            search_size: 4,
            ..Default::default()
        };
        cfg.train.epochs = 9;
        cfg
    }

    fn noise(rng: &mut impl Rng, size: usize, ch: usize) -> Image {
        Image::new(size, size, ch, (0..size * size * ch).map(|_| rng.gen()).collect()).unwrap()
    }

    fn sample(seed: u64) -> Sample {
        let mut rng = seeded(seed);
        let mut triple = |ch| [noise(&mut rng, 2, ch), noise(&mut rng, 2, ch), noise(&mut rng, 4, ch)];
        let (rgb, tir) = (triple(3), triple(1));
        Sample {
            rgb,
            tir,
            target: BBox::new(0.4, 0.6, 0.3, 0.2),
        }
    }

    #[test]
    fn frames_are_ordered_and_within_the_gap() {
        let mut rng = seeded(1);
        for n in [2, 3, 10, 50] {
            for gap in [1, 4, 100] {
                for _ in 0..500 {
                    let (a, b, s) = pick_frames(&mut rng, n, gap);
                    assert!(a <= b && b < s && s < n, "{a} {b} {s} n={n}");
                    assert!(s - a <= gap.min(n - 1));
                }
            }
        }
    }

    #[test]
    fn learning_rates_drop_tenfold_at_two_thirds() {
        let t = Trainer::new(&micro()).unwrap();
        let (b, o) = (t.cfg.train.lr_backbone, t.cfg.train.lr_other);
        assert_eq!(t.learning_rates(0), (b, o));
        assert_eq!(t.learning_rates(5), (b, o));
        assert_eq!(t.learning_rates(6), (b * 0.1, o * 0.1));
        assert_eq!(t.learning_rates(8), (b * 0.1, o * 0.1));
        assert!((o / b - 10.0).abs() < 1e-12);
    }

    #[test]
    fn keep_ratio_warms_up_linearly() {
        let mut t = micro().train;
        assert_eq!(t.keep_ratio_at(0, 0.7), 0.7);
        t.keep_warmup_epochs = 4;
        let got: Vec<f64> = (0..6).map(|e| t.keep_ratio_at(e, 0.6)).collect();
        let want = [1.0, 0.9, 0.8, 0.7, 0.6, 0.6];
        assert!(got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12), "{got:?}");
    }

    #[test]
    fn first_sgd_step_follows_the_update_rule() {
        let cfg = micro();
        let mut t = Trainer::new(&cfg).unwrap();
        let batch = [sample(2), sample(3)];
        let before = t.model.params.clone();
        let (_, grads) = t.batch_gradients(&batch).unwrap();
        t.step(&batch).unwrap();
        let (lb, lo) = t.learning_rates(0);
        let wd = cfg.train.weight_decay;
        let mut moved = 0;
        for id in before.ids() {
            let lr = match before.group(id) {
                ParamGroup::Backbone => lb,
                ParamGroup::Other => lo,
            };
            let (p0, p1) = (before.get(id).data(), t.model.params.get(id).data());
            match &grads[id.index()] {
                Some(g) => {
                    for ((a, b), g) in p0.iter().zip(p1).zip(g.data()) {
                        let want = a - lr * (g + wd * a);
                        assert!((b - want).abs() < 1e-14, "{} {b} vs {want}", before.name(id));
                    }
                    moved += 1;
                }
                None => assert_eq!(p0, p1),
            }
        }
        assert!(moved > 10);
        assert_eq!(t.opt.step, 1);
    }

    #[test]
    fn checkpoint_round_trips_trainer_state() {
        let cfg = micro();
        let mut t = Trainer::new(&cfg).unwrap();
        t.step(&[sample(4)]).unwrap();
        t.epoch = 3;
        let back = Trainer::resume(&cfg, &Checkpoint::from_bytes(&t.checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.opt.step, 1);
        let plain = Checkpoint::from_params(&t.model.params);
        assert!(matches!(Trainer::resume(&cfg, &plain), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn sampler_rejects_empty_input() {
        let cfg = micro();
        assert!(matches!(Sampler::new(&[], &cfg), Err(Error::Data(_))));
    }
}
