//! RGB images in [0, 1], patch tokenization and PNG I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DTensor, Real};

/// Height × width × 3 image, row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w * 3 {
            return Err(Error::Shape(format!("image {h}x{w} with {} values", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let data = (0..h * w).flat_map(|_| rgb).collect();
        Self { h, w, data }
    }

    #[inline]
    pub fn px(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.w + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.w + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Area-average (box filter) downsampling by integer factors.
    pub fn downsample(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 || out_h > self.h || out_w > self.w {
            return Err(Error::invalid(format!(
                "cannot resize {}x{} to {out_h}x{out_w} (upsampling is not supported)",
                self.h, self.w
            )));
        }
        if !self.h.is_multiple_of(out_h) || !self.w.is_multiple_of(out_w) {
            return Err(Error::invalid(format!(
                "{}x{} is not an integer multiple of {out_h}x{out_w}",
                self.h, self.w
            )));
        }
        if out_h == self.h && out_w == self.w {
            return Ok(self.clone());
        }
        let (fy, fx) = (self.h / out_h, self.w / out_w);
        let inv = 1.0 / (fy * fx) as f64;
        let mut out = Image::filled(out_h, out_w, [0.0; 3]);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = [0.0f64; 3];
                for y in oy * fy..(oy + 1) * fy {
                    for x in ox * fx..(ox + 1) * fx {
                        let p = self.px(y, x);
                        for c in 0..3 {
                            acc[c] += p[c] as f64;
                        }
                    }
                }
                out.set(oy, ox, acc.map(|a| (a * inv) as f32));
            }
        }
        Ok(out)
    }

    /// Lossless 8-bit RGB PNG. Values are rounded from [0, 1].
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        writer
            .write_image_data(&self.to_u8())
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(file).read_info().map_err(|e| {
            Error::io(path, std::io::Error::other(e))
        })?;
        let mut buf = vec![0; dec.output_buffer_size()];
        let info = dec
            .next_frame(&mut buf)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format(format!("{}: expected 8-bit RGB", path.display())));
        }
        let data = buf[..info.buffer_size()]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        Image::new(info.height as usize, info.width as usize, data)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Splits an image into `p×p×3` patches (identity projection), one row per
/// patch in raster order; each row is ordered (dy, dx, channel).
pub fn patchify<F: Real>(img: &Image, p: usize) -> Result<(DTensor<F>, (usize, usize))> {
    if p == 0 || !img.h.is_multiple_of(p) || !img.w.is_multiple_of(p) {
        return Err(Error::invalid(format!(
            "patch size {p} does not divide {}x{}",
            img.h, img.w
        )));
    }
    let (gh, gw) = (img.h / p, img.w / p);
    let dim = p * p * 3;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let px = img.px(gy * p + dy, gx * p + dx);
                    out.extend(px.iter().map(|&v| F::c(v as f64)));
                }
            }
        }
    }
    Ok((DTensor::matrix(gh * gw, dim, out)?, (gh, gw)))
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Real>(tokens: &DTensor<F>, grid: (usize, usize), p: usize) -> Result<Image> {
    let (n, dim) = tokens.dims2();
    if n != grid.0 * grid.1 || dim != p * p * 3 {
        return Err(Error::Shape(format!(
            "{n}x{dim} tokens for grid {grid:?} and patch {p}"
        )));
    }
    let mut img = Image::filled(grid.0 * p, grid.1 * p, [0.0; 3]);
    let d = tokens.data();
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let base = (gy * grid.1 + gx) * dim;
            for dy in 0..p {
                for dx in 0..p {
                    let o = base + (dy * p + dx) * 3;
                    img.set(
                        gy * p + dy,
                        gx * p + dx,
                        [d[o].f64() as f32, d[o + 1].f64() as f32, d[o + 2].f64() as f32],
                    );
                }
            }
        }
    }
    Ok(img)
}

/// Image → latent patches: identity patch projection of `2x - 1`.
pub fn encode_latent<F: Real>(img: &Image, p: usize) -> Result<(DTensor<F>, (usize, usize))> {
    let (t, grid) = patchify::<F>(img, p)?;
    Ok((t.map(|v| v * F::c(2.0) - F::one()), grid))
}

/// Latent patches → image in [0, 1] (clamped).
pub fn decode_latent<F: Real>(z: &DTensor<F>, grid: (usize, usize), p: usize) -> Result<Image> {
    let half = F::c(0.5);
    let img = unpatchify(&z.map(|v| (v + F::one()) * half), grid, p)?;
    Ok(img.clamp01())
}
