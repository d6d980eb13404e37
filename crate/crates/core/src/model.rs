//! The full tracker network: backbone plus head.

use crate::backbone::{Backbone, BackboneOutput, ModalInputs};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::head::{Head, HeadOutput, HeadVars, LossWeights};
use crate::nn::{Ctx, Init, ParamGroup, ParamStore};
use crate::rng::seeded;
use crate::tape::Tape;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub head: Head,
}

pub struct ModelOutput<'t> {
    pub head: HeadVars<'t>,
    pub backbone: BackboneOutput<'t>,
}

impl Model {
    /// Builds a freshly initialised model; the seed in `cfg` fixes every
    /// weight.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded(cfg.seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
            group: ParamGroup::Other,
        };
        let backbone = Backbone::new(&mut init, cfg)?;
        let head = Head::new(&mut init, cfg.dim)?;
        Ok(Model {
            cfg: cfg.clone(),
            params,
            backbone,
            head,
        })
    }

    /// Changes the pruning keep ratio without touching any weight.
    pub fn set_keep_ratio(&mut self, keep_ratio: f64) -> Result<()> {
        crate::tmce::validate_keep_ratio(keep_ratio)?;
        self.cfg.keep_ratio = keep_ratio;
        self.backbone.set_keep_ratio(keep_ratio);
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_iou: self.cfg.lambda_iou,
            lambda_l1: self.cfg.lambda_l1,
            gamma: self.cfg.focal_gamma,
        }
    }

    /// With the dynamic template disabled, the dynamic slot sees the static
    /// crop.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, rgb: &ModalInputs<'_>, tir: &ModalInputs<'_>) -> Result<ModelOutput<'t>> {
        let (mut rgb, mut tir) = (*rgb, *tir);
        if !self.cfg.dynamic_template {
            rgb.dynamic_template = rgb.static_template;
            tir.dynamic_template = tir.static_template;
        }
        let bb = self.backbone.forward(ctx, &rgb, &tir)?;
        let f = self.cfg.feat_size();
        let head = self.head.forward(ctx, bb.feat_rgb, bb.feat_tir, f, f)?;
        Ok(ModelOutput { head, backbone: bb })
    }

    /// Inference forward pass; nothing is retained for gradients.
    pub fn predict(&self, rgb: &ModalInputs<'_>, tir: &ModalInputs<'_>) -> Result<HeadOutput> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.params);
        Ok(self.forward(&ctx, rgb, tir)?.head.to_output())
    }
}
