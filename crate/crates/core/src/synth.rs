//! Deterministic paired RGB/TIR sequences with controllable challenges.
//!
//! A sequence is a static cluttered scene with one moving target. The RGB
//! frame shows colours; the TIR frame shows temperature, where the target is
//! normally the warm object. Attributes disturb one modality or both.
//!
//! On disk a sequence is a directory:
//!
//! ```text
//! rgb/000001.ppm  tir/000001.pgm  ...
//! groundtruth.txt   one "x,y,w,h" line per frame, pixels, top-left origin
//! meta.txt          key=value lines
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::{Image, PixelBox};
use crate::rng::derived;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    Occlusion,
    LowIlluminationRgb,
    HighIlluminationRgb,
    ThermalCrossover,
    FastMotion,
    ScaleVariation,
    AspectRatioChange,
}

impl Attribute {
    pub const ALL: [Attribute; 7] = [
        Attribute::Occlusion,
        Attribute::LowIlluminationRgb,
        Attribute::HighIlluminationRgb,
        Attribute::ThermalCrossover,
        Attribute::FastMotion,
        Attribute::ScaleVariation,
        Attribute::AspectRatioChange,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Occlusion => "occlusion",
            Attribute::LowIlluminationRgb => "low_illumination_rgb",
            Attribute::HighIlluminationRgb => "high_illumination_rgb",
            Attribute::ThermalCrossover => "thermal_crossover",
            Attribute::FastMotion => "fast_motion",
            Attribute::ScaleVariation => "scale_variation",
            Attribute::AspectRatioChange => "aspect_ratio_change",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribute {s:?}")))
    }
}

/// Attribute set of a suite name: `clean`, `low_light`, or attribute names
/// joined with `+`.
pub fn suite_attributes(suite: &str) -> Result<BTreeSet<Attribute>> {
    match suite {
        "clean" => Ok(BTreeSet::new()),
        "low_light" => Ok([Attribute::LowIlluminationRgb].into()),
        _ => suite.split('+').map(str::parse).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Diamond,
}

impl ShapeKind {
    fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Rect => "rect",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Diamond => "diamond",
        }
    }

    /// Whether the offset `(u, v)`, normalised to the half extents, is
    /// inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub frame_size: usize,
    pub shape: ShapeKind,
    /// Smallest and largest target side, in pixels.
    pub size_range: (f64, f64),
    /// Target speed in pixels per frame before attribute scaling.
    pub speed: f64,
    pub attributes: BTreeSet<Attribute>,
    /// Number of background clutter blobs.
    pub clutter: usize,
}

impl SceneSpec {
    /// A scene whose shape, size and speed are drawn from `seed`.
    pub fn random(seed: u64, num_frames: usize, frame_size: usize, attributes: BTreeSet<Attribute>) -> Self {
        let mut rng = derived(seed, 1);
        let shape = [ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Diamond][rng.gen_range(0..3)];
        let s = frame_size as f64;
        SceneSpec {
            seed,
            num_frames,
            frame_size,
            shape,
            size_range: (0.08 * s, 0.2 * s),
            speed: rng.gen_range(0.5..2.5) * s / 256.0,
            attributes,
            clutter: rng.gen_range(6..14),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if self.num_frames < 2 {
            return Err(Error::Config("a scene needs at least 2 frames".into()));
        }
        if self.frame_size < 32 {
            return Err(Error::Config(format!("frame size {} is too small", self.frame_size)));
        }
        if !(lo > 2.0 && hi >= lo && 2.0 * hi < self.frame_size as f64) {
            return Err(Error::Config(format!("target size range {lo}..{hi} does not fit the frame")));
        }
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return Err(Error::Config(format!("invalid speed {}", self.speed)));
        }
        if self.attributes.contains(&Attribute::LowIlluminationRgb) && self.attributes.contains(&Attribute::HighIlluminationRgb) {
            return Err(Error::Config("low and high illumination are exclusive".into()));
        }
        Ok(())
    }

    pub fn has(&self, a: Attribute) -> bool {
        self.attributes.contains(&a)
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    shape: ShapeKind,
    cx: f64,
    cy: f64,
    hw: f64,
    hh: f64,
    rgb: [f64; 3],
    temp: f64,
}

/// Fully rendered sequence held in memory.
#[derive(Clone, Debug)]
pub struct RenderedSequence {
    pub rgb: Vec<Image>,
    pub tir: Vec<Image>,
    pub boxes: Vec<PixelBox>,
}

struct Scene {
    bg_rgb: Image,
    bg_tir: Image,
    boxes: Vec<PixelBox>,
    target_rgb: [[f64; 3]; 2],
    target_temp: f64,
    /// Occluder box per frame.
    occluder: Vec<Option<PixelBox>>,
    occluder_rgb: [f64; 3],
}

fn smooth_field(size: usize, rng: &mut impl Rng, lo: f64, hi: f64) -> Vec<f64> {
    let (a, b, c) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi));
    let (fx, fy) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
    let n = size as f64;
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / n, (i / size) as f64 / n);
            let wave = 0.5 + 0.5 * (fx * x * std::f64::consts::PI + fy * y * 2.0).sin();
            a + (b - a) * x * 0.5 + (c - a) * wave * 0.5
        })
        .collect()
}

fn trajectory(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<PixelBox> {
    let s = spec.frame_size as f64;
    let (lo, hi) = spec.size_range;
    let base = rng.gen_range(lo..hi);
    let aspect: f64 = rng.gen_range(0.6..1.6);
    let (bw, bh) = (base * aspect.sqrt(), base / aspect.sqrt());
    let speed = spec.speed * if spec.has(Attribute::FastMotion) { 4.0 } else { 1.0 };
    let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (mut vx, mut vy) = (speed * heading.cos(), speed * heading.sin());
    let (mut cx, mut cy) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let period = rng.gen_range(0.6..1.2) * spec.num_frames as f64;
    let mut out = Vec::with_capacity(spec.num_frames);
    for f in 0..spec.num_frames {
        let t = std::f64::consts::TAU * f as f64 / period + phase;
        let scale = if spec.has(Attribute::ScaleVariation) { 1.0 + 0.35 * t.sin() } else { 1.0 };
        let ratio = if spec.has(Attribute::AspectRatioChange) { 1.0 + 0.45 * t.cos() } else { 1.0 };
        let (w, h) = ((bw * scale * ratio.sqrt()).min(0.45 * s), (bh * scale / ratio.sqrt()).min(0.45 * s));
        if f > 0 {
            // gentle wander, reflected at the borders
            let turn: f64 = rng.gen_range(-0.15..0.15);
            let (c, sn) = (turn.cos(), turn.sin());
            (vx, vy) = (vx * c - vy * sn, vx * sn + vy * c);
            cx += vx;
            cy += vy;
        }
        let (mx, my) = (w / 2.0 + 1.0, h / 2.0 + 1.0);
        if cx < mx || cx > s - mx {
            vx = -vx;
            cx = cx.clamp(mx, s - mx);
        }
        if cy < my || cy > s - my {
            vy = -vy;
            cy = cy.clamp(my, s - my);
        }
        out.push(PixelBox::from_center(cx, cy, w, h));
    }
    out
}

fn vivid_colour(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let c = [0, 1, 2].map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.8..0.95) } else { rng.gen_range(0.03..0.15) });
        let spread = c.iter().cloned().fold(0.0, f64::max) - c.iter().cloned().fold(1.0, f64::min);
        if spread > 0.5 {
            return c;
        }
    }
}

fn build_scene(spec: &SceneSpec) -> Scene {
    let n = spec.frame_size;
    let s = n as f64;
    let mut rng = derived(spec.seed, 2);
    let fields: Vec<Vec<f64>> = (0..3).map(|_| smooth_field(n, &mut rng, 0.3, 0.6)).collect();
    let mut bg_rgb = Image::filled(n, n, 3, 0.0);
    let mut bg_tir = Image::new(n, n, 1, smooth_field(n, &mut rng, 0.25, 0.45)).expect("field matches frame");
    for (i, px) in bg_rgb.data_mut().chunks_exact_mut(3).enumerate() {
        for c in 0..3 {
            px[c] = fields[c][i];
        }
    }
    let blobs: Vec<Blob> = (0..spec.clutter)
        .map(|_| Blob {
            shape: [ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Diamond][rng.gen_range(0..3)],
            cx: rng.gen_range(0.0..s),
            cy: rng.gen_range(0.0..s),
            hw: rng.gen_range(0.03..0.12) * s,
            hh: rng.gen_range(0.03..0.12) * s,
            rgb: [0, 1, 2].map(|_| rng.gen_range(0.2..0.7)),
            temp: rng.gen_range(0.2..0.55),
        })
        .collect();
    for b in &blobs {
        paint(&mut bg_rgb, b.shape, b.cx, b.cy, b.hw, b.hh, |_, _| b.rgb.to_vec());
        paint(&mut bg_tir, b.shape, b.cx, b.cy, b.hw, b.hh, |_, _| vec![b.temp]);
    }

    let mut rng = derived(spec.seed, 3);
    let boxes = trajectory(spec, &mut rng);
    let primary = vivid_colour(&mut rng);
    let secondary = primary.map(|v| (v * 0.55 + 0.1).min(1.0));
    let target_temp = rng.gen_range(0.8..0.95);

    let mut occluder = vec![None; spec.num_frames];
    if spec.has(Attribute::Occlusion) {
        let start = spec.num_frames / 3;
        let len = (spec.num_frames / 4).max(1);
        for (f, slot) in occluder.iter_mut().enumerate().skip(start).take(len) {
            let b = boxes[f];
            let progress = (f - start) as f64 / len as f64;
            let (cx, cy) = b.center();
            *slot = Some(PixelBox::from_center(
                cx - 0.9 * b.w + 1.6 * b.w * progress,
                cy,
                b.w * 0.9,
                b.h * 1.3,
            ));
        }
    }
    Scene {
        bg_rgb,
        bg_tir,
        boxes,
        target_rgb: [primary, secondary],
        target_temp,
        occluder,
        occluder_rgb: [0, 1, 2].map(|_| rng.gen_range(0.25..0.6)),
    }
}

/// Fills the shape centred at `(cx, cy)` with half extents `(hw, hh)`;
/// `colour(u, v)` gets the normalised offset within the shape.
fn paint(img: &mut Image, shape: ShapeKind, cx: f64, cy: f64, hw: f64, hh: f64, colour: impl Fn(f64, f64) -> Vec<f64>) {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let x0 = ((cx - hw).floor() as isize).max(0);
    let x1 = ((cx + hw).ceil() as isize).min(w - 1);
    let y0 = ((cy - hh).floor() as isize).max(0);
    let y1 = ((cy + hh).ceil() as isize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (u, v) = ((x as f64 + 0.5 - cx) / hw, (y as f64 + 0.5 - cy) / hh);
            if shape.contains(u, v) {
                for (c, val) in colour(u, v).into_iter().enumerate() {
                    img.set(x as usize, y as usize, c, val);
                }
            }
        }
    }
}

fn render_frame(spec: &SceneSpec, scene: &Scene, f: usize) -> (Image, Image) {
    let mut rgb = scene.bg_rgb.clone();
    let mut tir = scene.bg_tir.clone();
    let b = scene.boxes[f];
    let (cx, cy) = b.center();
    let (hw, hh) = (b.w / 2.0, b.h / 2.0);
    let [primary, secondary] = scene.target_rgb;
    paint(&mut rgb, spec.shape, cx, cy, hw, hh, |u, _| {
        // two-tone stripes make the target's own pattern
        if (u * 2.0).rem_euclid(1.0) < 0.5 { primary } else { secondary }.to_vec()
    });
    let temp = if spec.has(Attribute::ThermalCrossover) {
        let surround = PixelBox::new(b.x - b.w / 2.0, b.y - b.h / 2.0, 2.0 * b.w, 2.0 * b.h);
        local_mean(&scene.bg_tir, &surround)
    } else {
        scene.target_temp
    };
    paint(&mut tir, spec.shape, cx, cy, hw, hh, |u, v| {
        vec![temp - if spec.has(Attribute::ThermalCrossover) { 0.0 } else { 0.05 * (u * u + v * v) }]
    });
    if let Some(o) = scene.occluder[f] {
        let (ox, oy) = o.center();
        let t_bg = local_mean(&scene.bg_tir, &o);
        paint(&mut rgb, ShapeKind::Rect, ox, oy, o.w / 2.0, o.h / 2.0, |_, _| scene.occluder_rgb.to_vec());
        paint(&mut tir, ShapeKind::Rect, ox, oy, o.w / 2.0, o.h / 2.0, |_, _| vec![t_bg]);
    }
    if spec.has(Attribute::LowIlluminationRgb) {
        rgb.data_mut().iter_mut().for_each(|v| *v = 0.03 * *v + 0.02);
    }
    if spec.has(Attribute::HighIlluminationRgb) {
        rgb.data_mut().iter_mut().for_each(|v| *v = (0.3 * *v + 0.72).min(1.0));
    }
    let mut rng = derived(spec.seed, 1000 + f as u64);
    for img in [&mut rgb, &mut tir] {
        for v in img.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v + 0.015 * z).clamp(0.0, 1.0);
        }
    }
    (rgb.quantized(), tir.quantized())
}

fn local_mean(img: &Image, b: &PixelBox) -> f64 {
    let (w, h) = (img.width(), img.height());
    let x0 = (b.x.floor().max(0.0) as usize).min(w - 1);
    let y0 = (b.y.floor().max(0.0) as usize).min(h - 1);
    let x1 = ((b.x + b.w).ceil().max(1.0) as usize).clamp(x0 + 1, w);
    let y1 = ((b.y + b.h).ceil().max(1.0) as usize).clamp(y0 + 1, h);
    let mut acc = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            acc += img.get(x, y, 0);
        }
    }
    acc / ((x1 - x0) * (y1 - y0)) as f64
}

/// Renders every frame in memory. Frames are quantised to 8 bits so they
/// equal what [`generate`] writes.
pub fn render(spec: &SceneSpec) -> Result<RenderedSequence> {
    spec.validate()?;
    let scene = build_scene(spec);
    let mut out = RenderedSequence {
        rgb: Vec::with_capacity(spec.num_frames),
        tir: Vec::with_capacity(spec.num_frames),
        boxes: scene.boxes.clone(),
    };
    for f in 0..spec.num_frames {
        let (r, t) = render_frame(spec, &scene, f);
        out.rgb.push(r);
        out.tir.push(t);
    }
    Ok(out)
}

/// Absolute difference between the mean inside `b` and the mean of a ring
/// of half the box size around it, averaged over channels.
pub fn contrast(img: &Image, b: &PixelBox) -> f64 {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let ring = PixelBox::new(b.x - b.w / 2.0, b.y - b.h / 2.0, b.w * 2.0, b.h * 2.0);
    let inside = |p: &PixelBox, x: f64, y: f64| x >= p.x && x < p.x + p.w && y >= p.y && y < p.y + p.h;
    let ch = img.channels();
    let (mut tin, mut tout) = (vec![0.0; ch], vec![0.0; ch]);
    let (mut nin, mut nout) = (0usize, 0usize);
    let x0 = ring.x.max(0.0) as usize;
    let y0 = ring.y.max(0.0) as usize;
    let x1 = (ring.x + ring.w).min(w).max(0.0) as usize;
    let y1 = (ring.y + ring.h).min(h).max(0.0) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (acc, n) = if inside(b, px, py) { (&mut tin, &mut nin) } else { (&mut tout, &mut nout) };
            *n += 1;
            for (c, a) in acc.iter_mut().enumerate() {
                *a += img.get(x, y, c);
            }
        }
    }
    if nin == 0 || nout == 0 {
        return 0.0;
    }
    (0..ch)
        .map(|c| (tin[c] / nin as f64 - tout[c] / nout as f64).abs())
        .sum::<f64>()
        / ch as f64
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Renders `spec` into `dir`, replacing any previous contents of the
/// frame folders.
pub fn generate(spec: &SceneSpec, dir: &Path) -> Result<()> {
    let seq = render(spec)?;
    for sub in ["rgb", "tir"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(write_err(&p))?;
    }
    let mut gt = String::new();
    for (f, ((r, t), b)) in seq.rgb.iter().zip(&seq.tir).zip(&seq.boxes).enumerate() {
        r.save_pnm(&dir.join("rgb").join(format!("{:06}.ppm", f + 1)))?;
        t.save_pnm(&dir.join("tir").join(format!("{:06}.pgm", f + 1)))?;
        gt.push_str(&b.to_line());
        gt.push('\n');
    }
    let p = dir.join("groundtruth.txt");
    std::fs::write(&p, gt).map_err(write_err(&p))?;
    let attrs: Vec<&str> = spec.attributes.iter().map(|a| a.as_str()).collect();
    let meta = format!(
        "seed={}\nframes={}\nframe_size={}\nshape={}\nattributes={}\n",
        spec.seed,
        spec.num_frames,
        spec.frame_size,
        spec.shape.as_str(),
        attrs.join(",")
    );
    let p = dir.join("meta.txt");
    std::fs::write(&p, meta).map_err(write_err(&p))
}

/// A sequence directory with its ground truth loaded; frames are read on
/// demand.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub dir: PathBuf,
    pub name: String,
    pub boxes: Vec<PixelBox>,
}

impl Sequence {
    pub fn open(dir: &Path) -> Result<Self> {
        let boxes = read_boxes(&dir.join("groundtruth.txt"))?;
        if boxes.is_empty() {
            return Err(Error::Data(format!("{} has no ground truth", dir.display())));
        }
        for (sub, ext) in [("rgb", "ppm"), ("tir", "pgm")] {
            let p = dir.join(sub);
            let n = std::fs::read_dir(&p)
                .map_err(write_err(&p))?
                .filter(|e| e.as_ref().is_ok_and(|e| e.path().extension().is_some_and(|x| x == ext)))
                .count();
            if n != boxes.len() {
                return Err(Error::Data(format!(
                    "{}: {n} {sub} frames but {} ground-truth lines",
                    dir.display(),
                    boxes.len()
                )));
            }
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Sequence {
            dir: dir.to_path_buf(),
            name,
            boxes,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Frame `index` (0-based) as `(rgb, tir)`.
    pub fn frame(&self, index: usize) -> Result<(Image, Image)> {
        let n = index + 1;
        let rgb = Image::load_pnm(&self.dir.join("rgb").join(format!("{n:06}.ppm")))?;
        let tir = Image::load_pnm(&self.dir.join("tir").join(format!("{n:06}.pgm")))?;
        if rgb.width() != tir.width() || rgb.height() != tir.height() {
            return Err(Error::Data(format!("{}: frame {n} sizes differ", self.dir.display())));
        }
        Ok((rgb, tir))
    }
}

pub fn read_boxes(path: &Path) -> Result<Vec<PixelBox>> {
    let text = std::fs::read_to_string(path).map_err(write_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| PixelBox::parse(l).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn write_boxes(path: &Path, boxes: &[PixelBox]) -> Result<()> {
    let text: String = boxes.iter().map(|b| b.to_line() + "\n").collect();
    std::fs::write(path, text).map_err(write_err(path))
}

/// Sequence directories directly under `root`, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(write_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth.txt").is_file())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Data(format!("no sequences under {}", root.display())));
    }
    Ok(out)
}

/// Seed of sequence `index` in split `split` under a run seed.
pub fn sequence_seed(run_seed: u64, split: u64, index: usize) -> u64 {
    derived(run_seed, (split << 32) | index as u64).gen()
}
