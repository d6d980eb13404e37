//! Frame-by-frame tracking with a gated dynamic template.
//!
//! Frame 1 fixes the static templates and seeds the dynamic ones with the
//! same crops. Every later frame is searched around the previous box; when
//! the classification score reaches the update threshold, the dynamic
//! templates are re-cropped at the new box.

use crate::backbone::ModalInputs;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::head::{decode, BBox, HeadOutput};
use crate::image::{CropWindow, Image, PixelBox};
use crate::model::Model;
use crate::synth::Sequence;

/// Anything that maps template and search crops to head maps.
pub trait Predictor {
    fn config(&self) -> &ModelConfig;
    fn predict(&self, rgb: &ModalInputs<'_>, tir: &ModalInputs<'_>) -> Result<HeadOutput>;
}

impl Predictor for Model {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn predict(&self, rgb: &ModalInputs<'_>, tir: &ModalInputs<'_>) -> Result<HeadOutput> {
        Model::predict(self, rgb, tir)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub static_rgb: Image,
    pub static_tir: Image,
    pub dynamic_rgb: Image,
    pub dynamic_tir: Image,
    pub last_box: PixelBox,
    pub update_threshold: f64,
    pub template_factor: f64,
    pub search_factor: f64,
    pub frame_idx: usize,
    /// Number of dynamic-template refreshes so far.
    pub updates: usize,
    frame_w: f64,
    frame_h: f64,
}

/// Result of one tracked frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub bbox: PixelBox,
    pub score: f64,
    pub updated: bool,
    /// Search window used for this frame.
    pub window: CropWindow,
}

fn check_frames(rgb: &Image, tir: &Image) -> Result<()> {
    if rgb.width() != tir.width() || rgb.height() != tir.height() {
        return Err(Error::Data(format!(
            "rgb frame is {}x{}, tir frame is {}x{}",
            rgb.width(),
            rgb.height(),
            tir.width(),
            tir.height()
        )));
    }
    Ok(())
}

/// Crops both templates at `b`.
fn templates(cfg: &ModelConfig, rgb: &Image, tir: &Image, b: &PixelBox) -> (Image, Image) {
    let win = CropWindow::around(b, cfg.template_factor);
    (rgb.crop_resize(&win, cfg.template_size), tir.crop_resize(&win, cfg.template_size))
}

impl TrackerState {
    pub fn init(cfg: &ModelConfig, rgb: &Image, tir: &Image, b: &PixelBox) -> Result<Self> {
        check_frames(rgb, tir)?;
        let (fw, fh) = (rgb.width() as f64, rgb.height() as f64);
        let tol = 1e-6;
        let inside = b.x >= -tol && b.y >= -tol && b.x + b.w <= fw + tol && b.y + b.h <= fh + tol;
        if !(b.w > 0.0 && b.h > 0.0 && inside) {
            return Err(Error::Data(format!("initial box {b:?} is not inside the {fw}x{fh} frame")));
        }
        let (zr, zt) = templates(cfg, rgb, tir, b);
        Ok(TrackerState {
            dynamic_rgb: zr.clone(),
            dynamic_tir: zt.clone(),
            static_rgb: zr,
            static_tir: zt,
            last_box: *b,
            update_threshold: cfg.update_threshold,
            template_factor: cfg.template_factor,
            search_factor: cfg.search_factor,
            frame_idx: 1,
            updates: 0,
            frame_w: fw,
            frame_h: fh,
        })
    }

    /// Keeps a predicted box at least one pixel in size with its centre in
    /// the frame.
    fn clamp(&self, b: PixelBox) -> PixelBox {
        let (cx, cy) = b.center();
        let fin = |v: f64, d: f64| if v.is_finite() { v } else { d };
        let (lx, ly) = self.last_box.center();
        let w = fin(b.w, self.last_box.w).clamp(1.0, self.frame_w);
        let h = fin(b.h, self.last_box.h).clamp(1.0, self.frame_h);
        PixelBox::from_center(fin(cx, lx).clamp(0.0, self.frame_w), fin(cy, ly).clamp(0.0, self.frame_h), w, h)
    }

    pub fn track<P: Predictor + ?Sized>(&mut self, model: &P, rgb: &Image, tir: &Image) -> Result<Step> {
        check_frames(rgb, tir)?;
        let cfg = model.config();
        let window = CropWindow::around(&self.last_box, self.search_factor);
        let (xr, xt) = (rgb.crop_resize(&window, cfg.search_size), tir.crop_resize(&window, cfg.search_size));
        let out = model.predict(
            &ModalInputs {
                static_template: &self.static_rgb,
                dynamic_template: &self.dynamic_rgb,
                search: &xr,
            },
            &ModalInputs {
                static_template: &self.static_tir,
                dynamic_template: &self.dynamic_tir,
                search: &xt,
            },
        )?;
        let (b, score) = decode(&out, cfg.score_window);
        let bbox = self.clamp(window.to_frame(b.to_array()));
        self.last_box = bbox;
        self.frame_idx += 1;
        let updated = score >= self.update_threshold;
        if updated {
            let (zr, zt) = templates(cfg, rgb, tir, &bbox);
            self.dynamic_rgb = zr;
            self.dynamic_tir = zt;
            self.updates += 1;
        }
        Ok(Step {
            bbox,
            score,
            updated,
            window,
        })
    }
}

/// Tracks a whole sequence from its first ground-truth box. The first
/// output line is that box.
pub fn track_sequence<P: Predictor + ?Sized>(model: &P, seq: &Sequence) -> Result<Vec<PixelBox>> {
    let (rgb, tir) = seq.frame(0)?;
    let mut state = TrackerState::init(model.config(), &rgb, &tir, &seq.boxes[0])?;
    let mut out = Vec::with_capacity(seq.len());
    out.push(seq.boxes[0]);
    for f in 1..seq.len() {
        let (rgb, tir) = seq.frame(f)?;
        out.push(state.track(model, &rgb, &tir)?.bbox);
    }
    Ok(out)
}

/// Normalised box of `b` inside the search crop `window`.
pub fn to_crop_box(window: &CropWindow, b: &PixelBox) -> BBox {
    BBox::from_array(window.to_crop(b))
}
