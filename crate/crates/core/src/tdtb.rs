//! Temporal dual template bridging.
//!
//! Static and dynamic templates of the two modalities are fused into a pair
//! of bridging templates, `Z_m = [Z_static; Z_dynamic]`. `Z_m` first gathers
//! context from one modality's search region and hands it to the other, then
//! the interaction runs the other way round, and finally the doubly-updated
//! bridge is written back into each modality's own dual template. Every step
//! is a post-norm cross-attention block with its own parameters.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::nn::{Ctx, Init, Linear, MhaBlock};
use crate::tape::Var;

/// Which search region the bridge visits first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BridgeOrder {
    /// TIR search → bridge → RGB search, then RGB → bridge → TIR.
    #[default]
    TirFirst,
    RgbFirst,
}

impl fmt::Display for BridgeOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BridgeOrder::TirFirst => "tir_first",
            BridgeOrder::RgbFirst => "rgb_first",
        })
    }
}

impl FromStr for BridgeOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tir_first" => Ok(BridgeOrder::TirFirst),
            "rgb_first" => Ok(BridgeOrder::RgbFirst),
            _ => Err(Error::Config(format!("unknown bridge order {s:?}"))),
        }
    }
}

/// Stage indices into [`Tdtb::stages`].
pub mod stage {
    /// Bridge reads the first search region.
    pub const BRIDGE_FROM_FIRST: usize = 0;
    /// Second search region reads the bridge.
    pub const SECOND_FROM_BRIDGE: usize = 1;
    /// Bridge reads the updated second search region.
    pub const BRIDGE_FROM_SECOND: usize = 2;
    /// First search region reads the bridge.
    pub const FIRST_FROM_BRIDGE: usize = 3;
    /// RGB dual template reads the bridge.
    pub const RGB_TEMPLATE: usize = 4;
    /// TIR dual template reads the bridge.
    pub const TIR_TEMPLATE: usize = 5;
}

#[derive(Clone, Copy, Debug)]
pub struct Tdtb {
    /// `2C → C` fusion of channel-concatenated RGB/TIR templates.
    pub fuse: Linear,
    pub stages: [MhaBlock; 6],
    pub order: BridgeOrder,
}

pub struct TdtbInputs<'t> {
    pub z_rgb_static: Var<'t>,
    pub z_rgb_dynamic: Var<'t>,
    pub z_tir_static: Var<'t>,
    pub z_tir_dynamic: Var<'t>,
    pub x_rgb: Var<'t>,
    pub x_tir: Var<'t>,
}

pub struct TdtbOutputs<'t> {
    /// `[static; dynamic]` rows, `2·N_z × C`.
    pub z_rgb: Var<'t>,
    pub z_tir: Var<'t>,
    pub x_rgb: Var<'t>,
    pub x_tir: Var<'t>,
    pub bridge: BridgeIntermediates<'t>,
}

pub struct BridgeIntermediates<'t> {
    pub z_static: Var<'t>,
    pub z_dynamic: Var<'t>,
    pub z_m: Var<'t>,
    pub z_m1: Var<'t>,
    pub z_m2: Var<'t>,
}

impl Tdtb {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, mlp_ratio: usize, order: BridgeOrder) -> Result<Self> {
        let fuse = init.linear(&format!("{name}.fuse"), 2 * dim, dim);
        let mut stages = Vec::with_capacity(6);
        for i in 0..6 {
            stages.push(MhaBlock::new(init, &format!("{name}.stage{i}"), dim, heads, mlp_ratio)?);
        }
        Ok(Tdtb {
            fuse,
            stages: stages.try_into().unwrap_or_else(|_| unreachable!()),
            order,
        })
    }

    pub fn fuse_templates<'t>(&self, ctx: &Ctx<'t>, z_rgb: Var<'t>, z_tir: Var<'t>) -> Result<Var<'t>> {
        fuse_templates(ctx, z_rgb, z_tir, &self.fuse)
    }

    pub fn bridge_stage<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, y: Var<'t>, stage: usize) -> Result<Var<'t>> {
        let block = self
            .stages
            .get(stage)
            .ok_or_else(|| contract!("bridge stage {stage} out of range"))?;
        block.cross_post_norm(ctx, x, y)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, inp: &TdtbInputs<'t>) -> Result<TdtbOutputs<'t>> {
        let (ns_rgb, ns_tir) = (inp.x_rgb.shape()[0], inp.x_tir.shape()[0]);
        if ns_rgb != ns_tir {
            return Err(contract!(
                "search regions differ in length: rgb {ns_rgb}, tir {ns_tir}"
            ));
        }
        let tape = ctx.tape();
        let z_static = self.fuse_templates(ctx, inp.z_rgb_static, inp.z_tir_static)?;
        let z_dynamic = self.fuse_templates(ctx, inp.z_rgb_dynamic, inp.z_tir_dynamic)?;
        let z_m = tape.concat(&[z_static, z_dynamic])?;

        let (first, second) = match self.order {
            BridgeOrder::TirFirst => (inp.x_tir, inp.x_rgb),
            BridgeOrder::RgbFirst => (inp.x_rgb, inp.x_tir),
        };
        let z_m1 = self.bridge_stage(ctx, z_m, first, stage::BRIDGE_FROM_FIRST)?;
        let second = self.bridge_stage(ctx, second, z_m1, stage::SECOND_FROM_BRIDGE)?;
        let z_m2 = self.bridge_stage(ctx, z_m1, second, stage::BRIDGE_FROM_SECOND)?;
        let first = self.bridge_stage(ctx, first, z_m2, stage::FIRST_FROM_BRIDGE)?;
        let (x_rgb, x_tir) = match self.order {
            BridgeOrder::TirFirst => (second, first),
            BridgeOrder::RgbFirst => (first, second),
        };

        let z_rgb = tape.concat(&[inp.z_rgb_static, inp.z_rgb_dynamic])?;
        let z_tir = tape.concat(&[inp.z_tir_static, inp.z_tir_dynamic])?;
        let z_rgb = self.bridge_stage(ctx, z_rgb, z_m2, stage::RGB_TEMPLATE)?;
        let z_tir = self.bridge_stage(ctx, z_tir, z_m2, stage::TIR_TEMPLATE)?;
        Ok(TdtbOutputs {
            z_rgb,
            z_tir,
            x_rgb,
            x_tir,
            bridge: BridgeIntermediates {
                z_static,
                z_dynamic,
                z_m,
                z_m1,
                z_m2,
            },
        })
    }
}

/// `[z_rgb, z_tir] · W_m` with channel-wise concatenation.
pub fn fuse_templates<'t>(ctx: &Ctx<'t>, z_rgb: Var<'t>, z_tir: Var<'t>, w_m: &Linear) -> Result<Var<'t>> {
    if z_rgb.shape() != z_tir.shape() {
        return Err(Error::Shape {
            op: "fuse_templates",
            lhs: z_rgb.shape(),
            rhs: z_tir.shape(),
        });
    }
    w_m.forward(ctx, ctx.tape().concat_cols(&[z_rgb, z_tir])?)
}
