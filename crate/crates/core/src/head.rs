//! Fusion convolution, centre-style prediction head, box decoding and the
//! training loss.

use crate::error::{contract, Error, Result};
use crate::nn::{Conv3x3, Ctx, Init, Linear};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Axis-aligned box, centre and size normalised to the search crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_array([cx, cy, w, h]: [f64; 4]) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    /// Positive size and a non-empty overlap with the unit square.
    pub fn validate(&self) -> Result<()> {
        let [x1, y1, x2, y2] = self.corners();
        let ok = self.w > 0.0 && self.h > 0.0 && x2 > 0.0 && y2 > 0.0 && x1 < 1.0 && y1 < 1.0;
        if ok && self.to_array().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Data(format!("degenerate box {self:?}")))
        }
    }
}

/// Generalised IoU of two boxes with positive extent.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (hull - union) / hull
}

/// Head maps in plain tensors. `cls` is `[H, W]`, `offset` and `size` are
/// `[H, W, 2]` with x before y.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub cls: Tensor,
    pub offset: Tensor,
    pub size: Tensor,
}

impl HeadOutput {
    pub fn grid(&self) -> (usize, usize) {
        (self.cls.shape()[0], self.cls.shape()[1])
    }

    /// Maps whose decode is exactly `b`: a unit peak at the cell holding the
    /// centre, the residual offset there, and the size.
    pub fn encode(b: &BBox, h: usize, w: usize) -> Self {
        let (i, j) = center_cell(b, h, w);
        let mut cls = Tensor::zeros([h, w]);
        let mut offset = Tensor::zeros([h, w, 2]);
        let mut size = Tensor::full([h, w, 2], 0.5);
        let c = i * w + j;
        cls.data_mut()[c] = 1.0;
        offset.data_mut()[2 * c] = b.cx * w as f64 - j as f64 - 0.5;
        offset.data_mut()[2 * c + 1] = b.cy * h as f64 - i as f64 - 0.5;
        size.data_mut()[2 * c] = b.w;
        size.data_mut()[2 * c + 1] = b.h;
        HeadOutput { cls, offset, size }
    }
}

/// Grid cell containing the box centre, clamped into the grid.
pub fn center_cell(b: &BBox, h: usize, w: usize) -> (usize, usize) {
    let cell = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
    (cell(b.cy, h), cell(b.cx, w))
}

/// Box at the highest score, ties to the first cell in row-major order.
/// With `window`, scores are multiplied by a Hanning window for the argmax;
/// the returned score is always the raw one.
pub fn decode(out: &HeadOutput, window: bool) -> (BBox, f64) {
    let (h, w) = out.grid();
    let han = |k: usize, n: usize| {
        if n == 1 {
            1.0
        } else {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * (k as f64 + 0.5) / n as f64).cos()
        }
    };
    let mut best = (0, f64::NEG_INFINITY);
    for (c, &s) in out.cls.data().iter().enumerate() {
        let s = if window { s * han(c / w, h) * han(c % w, w) } else { s };
        if s > best.1 {
            best = (c, s);
        }
    }
    let c = best.0;
    let (i, j) = (c / w, c % w);
    let o = out.offset.data();
    let s = out.size.data();
    let b = BBox {
        cx: (j as f64 + 0.5 + o[2 * c]) / w as f64,
        cy: (i as f64 + 0.5 + o[2 * c + 1]) / h as f64,
        w: s[2 * c],
        h: s[2 * c + 1],
    };
    (b, out.cls.data()[c])
}

/// Soft classification target: an unnormalised Gaussian around the box
/// centre with per-axis deviation a sixth of the box extent in cells.
pub fn gaussian_target(b: &BBox, h: usize, w: usize) -> Tensor {
    let sx = (b.w * w as f64 / 6.0).max(0.25);
    let sy = (b.h * h as f64 / 6.0).max(0.25);
    let (mx, my) = (b.cx * w as f64 - 0.5, b.cy * h as f64 - 0.5);
    Tensor::from_fn([h, w], |c| {
        let (dx, dy) = ((c % w) as f64 - mx, (c / w) as f64 - my);
        (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp()
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Branch {
    pub conv: Conv3x3,
    pub out: Linear,
}

impl Branch {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        self.out.forward(ctx, self.conv.forward(ctx, x, h, w)?.gelu())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub fuse: Conv3x3,
    pub cls: Branch,
    pub offset: Branch,
    pub size: Branch,
    pub dim: usize,
}

/// Head outputs still on the tape; every map is `[H·W, k]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars<'t> {
    pub cls_logits: Var<'t>,
    pub offset: Var<'t>,
    pub size: Var<'t>,
    pub h: usize,
    pub w: usize,
}

impl HeadVars<'_> {
    pub fn to_output(&self) -> HeadOutput {
        let (h, w) = (self.h, self.w);
        let cls = self.cls_logits.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        HeadOutput {
            cls: cls.reshape([h, w]).expect("cls map is h*w"),
            offset: (*self.offset.value()).clone().reshape([h, w, 2]).expect("offset map is h*w*2"),
            size: (*self.size.value()).clone().reshape([h, w, 2]).expect("size map is h*w*2"),
        }
    }
}

/// Initial foreground probability of every cell, so that the background
/// cells do not dominate the first updates.
pub const CLS_PRIOR: f64 = 0.01;

impl Head {
    pub fn new(init: &mut Init<'_>, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("head width {dim} is too small")));
        }
        let hidden = dim / 2;
        let fuse = init.conv3x3("head.fuse", 2 * dim, dim);
        let mut branch = |name: &str, k: usize| Branch {
            conv: init.conv3x3(&format!("head.{name}.conv"), dim, hidden),
            out: init.linear(&format!("head.{name}.out"), hidden, k),
        };
        let cls = branch("cls", 1);
        let offset = branch("offset", 2);
        let size = branch("size", 2);
        let prior = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        init.store.get_mut(cls.out.bias).data_mut().fill(prior);
        Ok(Head {
            fuse,
            cls,
            offset,
            size,
            dim,
        })
    }

    /// Channel-concatenates both grids, fuses them with a 3×3 convolution
    /// and predicts the three maps.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, feat_rgb: Var<'t>, feat_tir: Var<'t>, h: usize, w: usize) -> Result<HeadVars<'t>> {
        if feat_rgb.shape() != feat_tir.shape() || feat_rgb.shape() != [h * w, self.dim] {
            return Err(Error::Shape {
                op: "head",
                lhs: feat_rgb.shape(),
                rhs: feat_tir.shape(),
            });
        }
        let x = ctx.tape().concat_cols(&[feat_rgb, feat_tir])?;
        let x = self.fuse.forward(ctx, x, h, w)?.gelu();
        Ok(HeadVars {
            cls_logits: self.cls.forward(ctx, x, h, w)?,
            offset: self.offset.forward(ctx, x, h, w)?,
            size: self.size.forward(ctx, x, h, w)?.sigmoid(),
            h,
            w,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub gamma: f64,
}

/// Loss terms; `total` stays on the tape.
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
}

/// `1 − GIoU` between a predicted box given as four scalar variables and a
/// fixed target box.
pub fn giou_loss<'t>(pred: [Var<'t>; 4], gt: &BBox) -> Result<Var<'t>> {
    let tape = pred[0].tape();
    let c = |v: f64| tape.constant(Tensor::scalar(v));
    let [cx, cy, w, h] = pred;
    let (hw, hh) = (w.scale(0.5), h.scale(0.5));
    let (px1, py1, px2, py2) = (cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?);
    let [gx1, gy1, gx2, gy2] = gt.corners().map(c);
    let zero = c(0.0);
    let iw = px2.minimum(gx2)?.sub(px1.maximum(gx1)?)?.maximum(zero)?;
    let ih = py2.minimum(gy2)?.sub(py1.maximum(gy1)?)?.maximum(zero)?;
    let inter = iw.mul(ih)?;
    let union = w.mul(h)?.offset(gt.w * gt.h).sub(inter)?;
    let hull_w = px2.maximum(gx2)?.sub(px1.minimum(gx1)?)?;
    let hull_h = py2.maximum(gy2)?.sub(py1.minimum(gy1)?)?;
    let hull = hull_w.mul(hull_h)?;
    let g = inter.div(union)?.sub(hull.sub(union)?.div(hull)?)?;
    Ok(g.scale(-1.0).offset(1.0))
}

/// `L_cls + λ1·L_iou + λ2·L_1` for one sample.
pub fn loss<'t>(out: &HeadVars<'t>, gt: &BBox, wts: &LossWeights) -> Result<LossParts<'t>> {
    gt.validate()?;
    let (h, w) = (out.h, out.w);
    let tape = out.cls_logits.tape();
    let target = gaussian_target(gt, h, w);
    let logits = out.cls_logits.reshape([h, w])?;
    let cls = tape.focal_loss(logits, &target, wts.gamma)?;

    let (i, j) = center_cell(gt, h, w);
    let c = i * w + j;
    let off = out.offset.reshape([h * w * 2])?;
    let size = out.size.reshape([h * w * 2])?;
    let cx = off.index(2 * c)?.offset(j as f64 + 0.5).scale(1.0 / w as f64);
    let cy = off.index(2 * c + 1)?.offset(i as f64 + 0.5).scale(1.0 / h as f64);
    let pred = [cx, cy, size.index(2 * c)?, size.index(2 * c + 1)?];
    let iou = giou_loss(pred, gt)?;
    let l1 = tape
        .concat(&pred)?
        .sub(tape.constant(Tensor::new([4], gt.to_array().to_vec())?))?
        .abs()
        .mean();
    let total = cls.add(iou.scale(wts.lambda_iou))?.add(l1.scale(wts.lambda_l1))?;
    if !total.value().all_finite() {
        return Err(contract!("loss is not finite"));
    }
    Ok(LossParts {
        total,
        cls: cls.value().item(),
        iou: iou.value().item(),
        l1: l1.value().item(),
    })
}
