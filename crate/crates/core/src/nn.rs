//! Transformer building blocks over the tape: parameter storage, linear
//! layers, multi-head self/cross attention, 3×3 convolution and patch
//! embedding.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{contract, Error, Result};
use crate::image::Image;
use crate::rng::{trunc_normal, SeededRng};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;
/// Pixels enter the patch projection as `(v - PIXEL_MEAN) / PIXEL_STD`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Patch embedding and transformer blocks.
    Backbone,
    /// Fusion module, head and anything else.
    Other,
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    groups: Vec<ParamGroup>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.groups.push(group);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        self.values[id.0].clone()
    }

    /// Mutable access; copies the storage if a tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.get(id).shape() {
            return Err(Error::Shape {
                op: "set parameter",
                lhs: self.get(id).shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Builds parameters with the default initialisation: truncated normal for
/// projections, zeros for biases, ones/zeros for norm affine terms.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut SeededRng,
    pub group: ParamGroup,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| trunc_normal(rng, std));
        self.store.add(name, t, self.group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape.to_vec(), value), self.group)
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Linear {
        Linear {
            weight: self.normal(&format!("{name}.weight"), &[input, output], INIT_STD),
            bias: self.constant(&format!("{name}.bias"), &[output], 0.0),
        }
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: self.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn conv3x3(&mut self, name: &str, input: usize, output: usize) -> Conv3x3 {
        Conv3x3 {
            lin: self.linear(name, 9 * input, output),
        }
    }
}

/// Per-forward binding of parameters onto a tape.
pub struct Ctx<'t> {
    tape: &'t Tape,
    params: &'t ParamStore,
    trainable: bool,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Ctx<'t> {
    /// Parameters enter the tape as gradient-receiving leaves.
    pub fn train(tape: &'t Tape, params: &'t ParamStore) -> Self {
        Self::build(tape, params, true)
    }

    /// Parameters enter as constants; nothing is kept for a backward pass.
    pub fn inference(tape: &'t Tape, params: &'t ParamStore) -> Self {
        Self::build(tape, params, false)
    }

    fn build(tape: &'t Tape, params: &'t ParamStore, trainable: bool) -> Self {
        Ctx {
            tape,
            params,
            trainable,
            bound: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'t ParamStore {
        self.params
    }

    /// The tape variable for a parameter; bound on first use.
    pub fn p(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            self.tape
                .leaf_shared(self.params.shared(id), self.trainable)
        })
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradients indexed by [`ParamId`]; `None` for parameters the loss did
    /// not touch.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(ctx.p(self.weight))?.add_row(ctx.p(self.bias))
    }

    pub fn dims(&self, params: &ParamStore) -> (usize, usize) {
        let s = params.get(self.weight).shape();
        (s[0], s[1])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), LN_EPS)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(ctx, self.fc1.forward(ctx, x)?.gelu())
    }
}

/// 3×3 same-padding convolution on a grid stored as `[h*w, C]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv3x3 {
    pub lin: Linear,
}

impl Conv3x3 {
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        self.lin.forward(ctx, x.im2col3x3(h, w)?)
    }
}

/// Multi-head attention projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            q: init.linear(&format!("{name}.q"), dim, dim),
            k: init.linear(&format!("{name}.k"), dim, dim),
            v: init.linear(&format!("{name}.v"), dim, dim),
            out: init.linear(&format!("{name}.out"), dim, dim),
            heads,
            dim,
        })
    }

    /// Queries from `x`, keys and values from `y`. Returns the projected
    /// output and the post-softmax map of every head.
    pub fn attend<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, y: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let (xs, ys) = (x.shape(), y.shape());
        if xs.len() != 2 || ys.len() != 2 || xs[1] != self.dim || ys[1] != self.dim {
            return Err(Error::Shape {
                op: "attention",
                lhs: xs,
                rhs: ys,
            });
        }
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, y)?;
        let v = self.v.forward(ctx, y)?;
        let d = self.dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut maps = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (q.slice_cols(h * d, d)?, k.slice_cols(h * d, d)?, v.slice_cols(h * d, d)?)
            };
            let a = qh.matmul_t(kh)?.scale(scale).softmax_rows();
            outs.push(a.matmul(vh)?);
            maps.push(a);
        }
        let o = if self.heads == 1 {
            outs[0]
        } else {
            ctx.tape().concat_cols(&outs)?
        };
        Ok((self.out.forward(ctx, o)?, maps))
    }
}

/// Multi-head cross attention; keys and values share the source `y`.
/// Returns the attention output only, without residual or normalisation.
pub fn mhca<'t>(ctx: &Ctx<'t>, x: Var<'t>, y: Var<'t>, attn: &Attention) -> Result<Var<'t>> {
    ctx.tape().mark("mhca");
    Ok(attn.attend(ctx, x, y)?.0)
}

/// Post-softmax attention of a self-attention block, `[heads, N, N]`.
pub type AttentionMap = Tensor;

/// Transformer block: attention plus MLP, each with its own norm.
#[derive(Clone, Copy, Debug)]
pub struct MhaBlock {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub mlp: Mlp,
}

impl MhaBlock {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(MhaBlock {
            ln1: init.norm(&format!("{name}.ln1"), dim),
            attn: Attention::new(init, &format!("{name}.attn"), dim, heads)?,
            ln2: init.norm(&format!("{name}.ln2"), dim),
            mlp: Mlp {
                fc1: init.linear(&format!("{name}.mlp.fc1"), dim, mlp_ratio * dim),
                fc2: init.linear(&format!("{name}.mlp.fc2"), mlp_ratio * dim, dim),
            },
        })
    }

    /// Pre-norm self-attention block over the joint token sequence. Also
    /// returns the exact attention maps used to compute the output.
    pub fn self_attention_joint<'t>(&self, ctx: &Ctx<'t>, tokens: Var<'t>) -> Result<(Var<'t>, AttentionMap)> {
        ctx.tape().mark("attn");
        let h = self.ln1.forward(ctx, tokens)?;
        let (a, maps) = self.attn.attend(ctx, h, h)?;
        let x = tokens.add(a)?;
        let x = x.add(self.mlp.forward(ctx, self.ln2.forward(ctx, x)?)?)?;
        let n = tokens.shape()[0];
        let mut data = Vec::with_capacity(self.attn.heads * n * n);
        for m in &maps {
            data.extend_from_slice(m.value().data());
        }
        Ok((x, Tensor::new([self.attn.heads, n, n], data)?))
    }

    /// Post-norm cross block: `x' = LN(x + MHCA(x, y))`, `LN(x' + MLP(x'))`.
    pub fn cross_post_norm<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let x1 = self.ln1.forward(ctx, x.add(mhca(ctx, x, y, &self.attn)?)?)?;
        self.ln2.forward(ctx, x1.add(self.mlp.forward(ctx, x1)?)?)
    }
}

/// Which positional table a patch grid uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchKind {
    Template,
    Search,
}

/// Shared patch projection with learned positional tables for template and
/// search grids.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub proj: Linear,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, patch: usize, dim: usize, template_size: usize, search_size: usize) -> Result<Self> {
        for s in [template_size, search_size] {
            if patch == 0 || s % patch != 0 {
                return Err(Error::Config(format!(
                    "image size {s} is not divisible by patch size {patch}"
                )));
            }
        }
        let nz = (template_size / patch).pow(2);
        let nx = (search_size / patch).pow(2);
        Ok(PatchEmbed {
            patch,
            template_size,
            search_size,
            proj: init.linear("embed.proj", 3 * patch * patch, dim),
            pos_template: init.normal("embed.pos_template", &[nz, dim], INIT_STD),
            pos_search: init.normal("embed.pos_search", &[nx, dim], INIT_STD),
        })
    }

    /// Flattens `P×P×3` patches in raster order; single-channel images are
    /// replicated to three channels.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        patchify(image, self.patch)
    }

    pub fn embed<'t>(&self, ctx: &Ctx<'t>, image: &Image, kind: PatchKind) -> Result<Var<'t>> {
        let (size, pos) = match kind {
            PatchKind::Template => (self.template_size, self.pos_template),
            PatchKind::Search => (self.search_size, self.pos_search),
        };
        if image.width() != size || image.height() != size {
            return Err(contract!(
                "{kind:?} image is {}x{}, expected {size}x{size}",
                image.width(),
                image.height()
            ));
        }
        let mut patches = self.patchify(image)?;
        patches.data_mut().iter_mut().for_each(|v| *v = (*v - PIXEL_MEAN) / PIXEL_STD);
        let patches = ctx.constant(patches);
        self.proj.forward(ctx, patches)?.add(ctx.p(pos))
    }
}

pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    let (w, h) = (image.width(), image.height());
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(contract!("image {w}x{h} is not divisible into {patch}px patches"));
    }
    let (gw, gh) = (w / patch, h / patch);
    let ch = image.channels();
    let mut out = Vec::with_capacity(w * h * 3);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    let (x, y) = (gx * patch + px, gy * patch + py);
                    for c in 0..3 {
                        out.push(image.get(x, y, if ch == 1 { 0 } else { c }));
                    }
                }
            }
        }
    }
    Tensor::new([gw * gh, 3 * patch * patch], out)
}
