//! Dual-stream ViT backbone with template/search joint attention.
//!
//! Each modality runs its own stack of blocks over `(static | dynamic |
//! search)` tokens. At prune layers both streams are scored together and
//! lose the same search tokens; at bridge layers the TDTB exchanges
//! information between them. After the last block the surviving search
//! tokens are scattered back onto the search grid with zeros elsewhere.

use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::image::Image;
use crate::nn::{Ctx, Init, MhaBlock, Norm, ParamGroup, PatchEmbed, PatchKind};
use crate::tape::Var;
use crate::tdtb::{Tdtb, TdtbInputs};
use crate::tmce::{self, ModalMaps, PruneDecision, SegmentLayout};

/// Template and search crops of one modality.
#[derive(Clone, Copy)]
pub struct ModalInputs<'a> {
    pub static_template: &'a Image,
    pub dynamic_template: &'a Image,
    pub search: &'a Image,
}

impl<'a> ModalInputs<'a> {
    /// `[static, dynamic, search]`.
    pub fn from_triple(x: &'a [Image; 3]) -> Self {
        ModalInputs {
            static_template: &x[0],
            dynamic_template: &x[1],
            search: &x[2],
        }
    }
}

/// Token sequence of one modality plus the grid cell of every surviving
/// search token.
#[derive(Clone, Debug)]
pub struct ModalTokenState<'t> {
    pub tokens: Var<'t>,
    pub layout: SegmentLayout,
    pub spatial_index: Vec<usize>,
}

impl<'t> ModalTokenState<'t> {
    /// Applies a pruning decision to the search segment.
    pub fn prune(&self, decision: &PruneDecision) -> Result<Self> {
        let keep = decision.keep_indices();
        if keep.last().is_some_and(|&k| k >= self.layout.n_search) {
            return Err(contract!("prune decision indexes past {} search tokens", self.layout.n_search));
        }
        let s0 = self.layout.search_start();
        let rows: Vec<usize> = (0..s0).chain(keep.iter().map(|k| s0 + k)).collect();
        Ok(ModalTokenState {
            tokens: self.tokens.gather_rows(&rows)?,
            layout: SegmentLayout {
                n_search: keep.len(),
                ..self.layout
            },
            spatial_index: keep.iter().map(|&k| self.spatial_index[k]).collect(),
        })
    }

    fn split(&self) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let l = &self.layout;
        Ok((
            self.tokens.slice_rows(0, l.n_static)?,
            self.tokens.slice_rows(l.n_static, l.n_dynamic)?,
            self.tokens.slice_rows(l.search_start(), l.n_search)?,
        ))
    }
}

/// What happened at one block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// 1-based block index.
    pub layer: usize,
    /// Search tokens entering the block.
    pub search_tokens: usize,
    pub pruned: bool,
    pub bridged: bool,
}

pub struct BackboneOutput<'t> {
    /// Search grids `[H_f·W_f, C]`, zero at eliminated cells.
    pub feat_rgb: Var<'t>,
    pub feat_tir: Var<'t>,
    /// Grid cells that survived every prune step.
    pub spatial_index: Vec<usize>,
    pub trace: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub embed: PatchEmbed,
    pub rgb_blocks: Vec<MhaBlock>,
    pub tir_blocks: Vec<MhaBlock>,
    pub rgb_norm: Norm,
    pub tir_norm: Norm,
    /// Bridges keyed by the block they follow.
    pub bridges: Vec<(usize, Tdtb)>,
    cfg: ModelConfig,
}

impl Backbone {
    pub(crate) fn set_keep_ratio(&mut self, keep_ratio: f64) {
        self.cfg.keep_ratio = keep_ratio;
    }

    /// Registers backbone parameters in the backbone group and bridge
    /// parameters in the other group.
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let group = init.group;
        init.group = ParamGroup::Backbone;
        let embed = PatchEmbed::new(init, cfg.patch_size, cfg.dim, cfg.template_size, cfg.search_size)?;
        let stream = |name: &str, init: &mut Init<'_>| -> Result<Vec<MhaBlock>> {
            (1..=cfg.depth)
                .map(|l| MhaBlock::new(init, &format!("{name}.block{l}"), cfg.dim, cfg.heads, cfg.mlp_ratio))
                .collect()
        };
        let rgb_blocks = stream("rgb", init)?;
        let tir_blocks = stream("tir", init)?;
        let rgb_norm = init.norm("rgb.norm", cfg.dim);
        let tir_norm = init.norm("tir.norm", cfg.dim);
        init.group = ParamGroup::Other;
        let mut bridges = Vec::new();
        if cfg.tdtb_enabled {
            for &l in &cfg.tdtb_layers {
                bridges.push((l, Tdtb::new(init, &format!("tdtb{l}"), cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.bridge_order)?));
            }
        }
        init.group = group;
        Ok(Backbone {
            embed,
            rgb_blocks,
            tir_blocks,
            rgb_norm,
            tir_norm,
            bridges,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Tokenizes one modality in `(static, dynamic, search)` order.
    pub fn tokenize<'t>(&self, ctx: &Ctx<'t>, inp: &ModalInputs<'_>) -> Result<ModalTokenState<'t>> {
        let zs = self.embed.embed(ctx, inp.static_template, PatchKind::Template)?;
        let zd = self.embed.embed(ctx, inp.dynamic_template, PatchKind::Template)?;
        let x = self.embed.embed(ctx, inp.search, PatchKind::Search)?;
        let layout = self.cfg.layout();
        Ok(ModalTokenState {
            tokens: ctx.tape().concat(&[zs, zd, x])?,
            layout,
            spatial_index: (0..layout.n_search).collect(),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, rgb: &ModalInputs<'_>, tir: &ModalInputs<'_>) -> Result<BackboneOutput<'t>> {
        let cfg = &self.cfg;
        let mut rgb_state = self.tokenize(ctx, rgb)?;
        let mut tir_state = self.tokenize(ctx, tir)?;
        let mut trace = Vec::with_capacity(cfg.depth);
        for layer in 1..=cfg.depth {
            let entering = rgb_state.layout.n_search;
            let (rgb_tokens, rgb_attn) = self.rgb_blocks[layer - 1].self_attention_joint(ctx, rgb_state.tokens)?;
            let (tir_tokens, tir_attn) = self.tir_blocks[layer - 1].self_attention_joint(ctx, tir_state.tokens)?;
            rgb_state.tokens = rgb_tokens;
            tir_state.tokens = tir_tokens;

            let pruned = cfg.prunes() && cfg.prune_layers.contains(&layer);
            if pruned {
                let (rgb_static, rgb_dynamic) = tmce::template_search_corr(&rgb_attn, &rgb_state.layout)?;
                let (tir_static, tir_dynamic) = tmce::template_search_corr(&tir_attn, &tir_state.layout)?;
                let maps = ModalMaps {
                    rgb_static,
                    rgb_dynamic,
                    tir_static,
                    tir_dynamic,
                };
                if let Some(scores) = tmce::variant_score(cfg.elimination_strategy, &maps, cfg.ce_source)? {
                    let decision = tmce::prune(&scores, cfg.keep_ratio)?;
                    rgb_state = rgb_state.prune(&decision)?;
                    tir_state = tir_state.prune(&decision)?;
                }
            }

            let bridge = self.bridges.iter().find(|(l, _)| *l == layer).map(|(_, b)| b);
            if let Some(tdtb) = bridge {
                let (zrs, zrd, xr) = rgb_state.split()?;
                let (zts, ztd, xt) = tir_state.split()?;
                let out = tdtb.forward(
                    ctx,
                    &TdtbInputs {
                        z_rgb_static: zrs,
                        z_rgb_dynamic: zrd,
                        z_tir_static: zts,
                        z_tir_dynamic: ztd,
                        x_rgb: xr,
                        x_tir: xt,
                    },
                )?;
                rgb_state.tokens = ctx.tape().concat(&[out.z_rgb, out.x_rgb])?;
                tir_state.tokens = ctx.tape().concat(&[out.z_tir, out.x_tir])?;
            }
            trace.push(LayerTrace {
                layer,
                search_tokens: entering,
                pruned,
                bridged: bridge.is_some(),
            });
        }

        let total = cfg.search_tokens();
        let grid = |state: &ModalTokenState<'t>, norm: &Norm| -> Result<Var<'t>> {
            let x = state.tokens.slice_rows(state.layout.search_start(), state.layout.n_search)?;
            norm.forward(ctx, x)?.scatter_rows(&state.spatial_index, total)
        };
        Ok(BackboneOutput {
            feat_rgb: grid(&rgb_state, &self.rgb_norm)?,
            feat_tir: grid(&tir_state, &self.tir_norm)?,
            spatial_index: rgb_state.spatial_index,
            trace,
        })
    }
}
