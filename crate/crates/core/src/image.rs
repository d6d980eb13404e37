//! Images, square crops with mean padding, and binary PPM/PGM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image with interleaved channels and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Axis-aligned box in frame pixels, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        PixelBox { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        PixelBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Parses one `x,y,w,h` line.
    pub fn parse(line: &str) -> Result<Self> {
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Data(format!("bad box line {line:?}: {e}")))?;
        match vals[..] {
            [x, y, w, h] => Ok(PixelBox { x, y, w, h }),
            _ => Err(Error::Data(format!("box line needs 4 values: {line:?}"))),
        }
    }

    pub fn to_line(&self) -> String {
        format!("{:.3},{:.3},{:.3},{:.3}", self.x, self.y, self.w, self.h)
    }

    /// Intersection over union, with areas computed from corner differences
    /// so that identical boxes give exactly 1.
    pub fn iou(&self, other: &PixelBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = (self.x, self.y, self.x + self.w, self.y + self.h);
        let (bx1, by1, bx2, by2) = (other.x, other.y, other.x + other.w, other.y + other.h);
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Square window in frame pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl CropWindow {
    /// Window of side `factor * sqrt(w * h)` centred on `b`.
    pub fn around(b: &PixelBox, factor: f64) -> Self {
        let (cx, cy) = b.center();
        CropWindow {
            cx,
            cy,
            side: factor * (b.w * b.h).sqrt(),
        }
    }

    fn left(&self) -> f64 {
        self.cx - self.side / 2.0
    }

    fn top(&self) -> f64 {
        self.cy - self.side / 2.0
    }

    /// Frame box → `(cx, cy, w, h)` normalised to the window.
    pub fn to_crop(&self, b: &PixelBox) -> [f64; 4] {
        let (cx, cy) = b.center();
        [
            (cx - self.left()) / self.side,
            (cy - self.top()) / self.side,
            b.w / self.side,
            b.h / self.side,
        ]
    }

    /// Inverse of [`CropWindow::to_crop`].
    pub fn to_frame(&self, [cx, cy, w, h]: [f64; 4]) -> PixelBox {
        PixelBox::from_center(
            self.left() + cx * self.side,
            self.top() + cy * self.side,
            w * self.side,
            h * self.side,
        )
    }
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Contract(format!(
                "bad image geometry {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Contract(format!(
                "image buffer holds {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image::new(width, height, channels, vec![value; width * height * channels]).expect("geometry")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let n = (self.width * self.height) as f64;
        (0..self.channels)
            .map(|c| self.data.iter().skip(c).step_by(self.channels).sum::<f64>() / n)
            .collect()
    }

    /// Bilinear resample of `window` to an `out`×`out` image. Samples outside
    /// the frame take the per-channel mean of the frame.
    pub fn crop_resize(&self, window: &CropWindow, out: usize) -> Image {
        let pad = self.channel_means();
        let ch = self.channels;
        let step = window.side / out as f64;
        let mut data = vec![0.0; out * out * ch];
        let fetch = |x: isize, y: isize, c: usize| -> f64 {
            if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
                pad[c]
            } else {
                self.get(x as usize, y as usize, c)
            }
        };
        for v in 0..out {
            let fy = window.top() + (v as f64 + 0.5) * step - 0.5;
            let y0 = fy.floor();
            let ty = fy - y0;
            for u in 0..out {
                let fx = window.left() + (u as f64 + 0.5) * step - 0.5;
                let x0 = fx.floor();
                let tx = fx - x0;
                let (xi, yi) = (x0 as isize, y0 as isize);
                for c in 0..ch {
                    let top = fetch(xi, yi, c) * (1.0 - tx) + fetch(xi + 1, yi, c) * tx;
                    let bot = fetch(xi, yi + 1, c) * (1.0 - tx) + fetch(xi + 1, yi + 1, c) * tx;
                    data[(v * out + u) * ch + c] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        Image {
            width: out,
            height: out,
            channels: ch,
            data,
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Writes binary PPM (3 channels) or PGM (1 channel).
    pub fn save_pnm(&self, path: &Path) -> Result<()> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut buf = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.to_bytes());
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_pnm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::parse_pnm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn parse_pnm(bytes: &[u8]) -> Result<Image, String> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1; // single whitespace byte before the raster
        let channels = match fields[0].as_str() {
            "P6" => 3,
            "P5" => 1,
            m => return Err(format!("unsupported magic {m}")),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s}: {e}"));
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(format!("only maxval 255 is supported, got {maxval}"));
        }
        let raster = bytes.get(pos..pos + w * h * channels).ok_or("truncated raster")?;
        let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(w, h, channels, data).map_err(|e| e.to_string())
    }

    /// Rounds every value to the 8-bit grid used on disk.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.to_bytes().into_iter().map(|b| b as f64 / 255.0).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip() {
        let img = Image::new(3, 2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap().quantized();
        let mut bytes = Vec::new();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        img.save_pnm(&p).unwrap();
        bytes.extend(std::fs::read(&p).unwrap());
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(Image::load_pnm(&p).unwrap(), img);
        let gray = Image::filled(4, 4, 1, 0.5).quantized();
        let p = dir.path().join("b.pgm");
        gray.save_pnm(&p).unwrap();
        assert_eq!(Image::load_pnm(&p).unwrap(), gray);
    }

    #[test]
    fn crop_of_interior_is_exact_copy() {
        let img = Image::new(8, 8, 1, (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
        let w = CropWindow { cx: 4.0, cy: 4.0, side: 4.0 };
        let c = img.crop_resize(&w, 4);
        for v in 0..4 {
            for u in 0..4 {
                assert!((c.get(u, v, 0) - img.get(u + 2, v + 2, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corner_crop_padded_with_channel_mean() {
        let mut img = Image::filled(10, 10, 3, 0.2);
        img.set(9, 9, 1, 1.0);
        let means = img.channel_means();
        let c = img.crop_resize(&CropWindow { cx: 0.0, cy: 0.0, side: 8.0 }, 8);
        for ch in 0..3 {
            assert!((c.get(0, 0, ch) - means[ch]).abs() < 1e-12);
        }
        assert!((c.get(7, 7, 0) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn crop_mapping_round_trip() {
        let w = CropWindow { cx: 103.7, cy: 41.2, side: 77.3 };
        let b = PixelBox::new(80.1, 20.9, 31.3, 17.75);
        let back = w.to_frame(w.to_crop(&b));
        for (a, b) in [(back.x, b.x), (back.y, b.y), (back.w, b.w), (back.h, b.h)] {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = PixelBox::new(10.3, 7.7, 33.1, 12.9);
        assert_eq!(b.iou(&b), 1.0);
        assert_eq!(b.iou(&PixelBox::new(100.0, 100.0, 5.0, 5.0)), 0.0);
    }
}
