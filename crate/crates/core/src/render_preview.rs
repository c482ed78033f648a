//! Sphere previews of tabulated BRDFs: orthographic camera looking down `-z`, one
//! directional light, no shadows. Produces linear radiance and a tone-mapped RGBA8
//! image with a transparent black background.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::latent_tools::{decode_augmented, AugmentedCode};
use crate::merl_io::{brdf_lookup, normalize, MerlBrdf, Vec3};
use crate::vae_model::LatentCode;

pub const MIN_SIZE: usize = 16;
const VIEW: Vec3 = [0.0, 0.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreviewScene {
    /// Image width and height in pixels.
    pub size: usize,
    /// Unit vector pointing towards the light, camera space (`+z` towards the viewer).
    pub light_dir: Vec3,
    pub light_intensity: [f64; 3],
    /// Linear multiplier applied before tone mapping.
    pub exposure: f64,
    pub gamma: f64,
}

impl Default for PreviewScene {
    fn default() -> Self {
        PreviewScene {
            size: 128,
            light_dir: normalize([-0.4, 0.5, 0.77]),
            light_intensity: [1.0; 3],
            exposure: 1.0,
            gamma: 2.2,
        }
    }
}

impl PreviewScene {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SIZE {
            return Err(Error::Config(format!("preview size must be at least {MIN_SIZE}")));
        }
        let l = self.light_dir;
        let len = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        if !((len - 1.0).abs() < 1e-6) {
            return Err(Error::Config(format!("light direction must be unit length, got |l| = {len}")));
        }
        if !self.light_intensity.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Config("light intensity must be finite and non-negative".into()));
        }
        if !(self.exposure.is_finite() && self.exposure >= 0.0) || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("exposure must be >= 0 and gamma > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Linear RGB before exposure and tone mapping, row-major.
    pub radiance: Vec<[f64; 3]>,
    /// Tone-mapped RGBA8, row-major.
    pub rgba: Vec<u8>,
}

impl Image {
    fn blank(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            radiance: vec![[0.0; 3]; width * height],
            rgba: vec![0; 4 * width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 4] {
        let i = 4 * (y * self.width + x);
        [self.rgba[i], self.rgba[i + 1], self.rgba[i + 2], self.rgba[i + 3]]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            w.write_image_data(&self.rgba)?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// `u32` width, `u32` height, then `width * height * 3` `f32` radiance values,
    /// all little-endian.
    pub fn write_raw(&self, mut w: impl Write) -> Result<()> {
        w.write_u32::<LittleEndian>(self.width as u32)?;
        w.write_u32::<LittleEndian>(self.height as u32)?;
        for p in &self.radiance {
            for v in p {
                w.write_f32::<LittleEndian>(*v as f32)?;
            }
        }
        Ok(())
    }

    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_raw(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn tone_map(v: f64, scene: &PreviewScene) -> u8 {
    let x = (v * scene.exposure).clamp(0.0, 1.0);
    (255.0 * x.powf(1.0 / scene.gamma)).round() as u8
}

/// Unit sphere filling the frame. Pixel radiance is `f(wi, wo) * cos(theta_i) * intensity`.
pub fn render_sphere(brdf: &MerlBrdf, scene: &PreviewScene) -> Result<Image> {
    scene.validate()?;
    let n = scene.size;
    let mut img = Image::blank(n, n);
    let light = scene.light_dir;
    for py in 0..n {
        for px in 0..n {
            let x = 2.0 * (px as f64 + 0.5) / n as f64 - 1.0;
            let y = 1.0 - 2.0 * (py as f64 + 0.5) / n as f64;
            let r2 = x * x + y * y;
            if r2 > 1.0 {
                continue;
            }
            let normal = [x, y, (1.0 - r2).sqrt()];
            let up = if normal[1].abs() < 0.999 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
            let t = normalize(cross(up, normal));
            let b = cross(normal, t);
            let to_local = |v: Vec3| [dot(v, t), dot(v, b), dot(v, normal)];
            let wi = to_local(light);
            let wo = to_local(VIEW);
            let idx = py * n + px;
            if wi[2] > 0.0 && wo[2] >= 0.0 {
                let f = brdf_lookup(brdf, wi, wo);
                if f.valid {
                    for c in 0..3 {
                        img.radiance[idx][c] = f.rgb[c] * wi[2] * scene.light_intensity[c];
                    }
                }
            }
            for c in 0..3 {
                img.rgba[4 * idx + c] = tone_map(img.radiance[idx][c], scene);
            }
            img.rgba[4 * idx + 3] = 255;
        }
    }
    Ok(img)
}

/// Tiles equally sized images row-major into a grid with `cols` columns.
pub fn contact_sheet(images: &[Image], cols: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::Precondition("contact sheet needs at least one image".into()))?;
    if cols == 0 {
        return Err(Error::Precondition("contact sheet needs at least one column".into()));
    }
    let (tw, th) = (first.width, first.height);
    if images.iter().any(|i| i.width != tw || i.height != th) {
        return Err(Error::Precondition("tiles differ in size".into()));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let mut sheet = Image::blank(cols * tw, rows * th);
    for (k, tile) in images.iter().enumerate() {
        let (ox, oy) = ((k % cols) * tw, (k / cols) * th);
        for y in 0..th {
            let dst = (oy + y) * sheet.width + ox;
            let src = y * tw;
            sheet.radiance[dst..dst + tw].copy_from_slice(&tile.radiance[src..src + tw]);
            sheet.rgba[4 * dst..4 * (dst + tw)].copy_from_slice(&tile.rgba[4 * src..4 * (src + tw)]);
        }
    }
    Ok(sheet)
}

/// A learned code or an augmented code with the two extra color controls.
#[derive(Debug, Clone, PartialEq)]
pub enum PreviewCode {
    Latent(LatentCode),
    Augmented(AugmentedCode),
}

impl PreviewCode {
    /// Interprets a raw vector by length: the model's latent size or that plus two.
    pub fn from_values(values: Vec<f64>, latent_dim: usize) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Precondition("code has non-finite values".into()));
        }
        match values.len() {
            n if n == latent_dim => Ok(PreviewCode::Latent(LatentCode(values))),
            n if n == latent_dim + 2 => Ok(PreviewCode::Augmented(AugmentedCode(values))),
            n => Err(Error::Precondition(format!(
                "code must have length {latent_dim} or {}, got {n}",
                latent_dim + 2
            ))),
        }
    }

    pub fn decode(&self, checkpoint: &Checkpoint, name: &str) -> Result<MerlBrdf> {
        match self {
            PreviewCode::Latent(c) => checkpoint.decode_brdf(c, name),
            PreviewCode::Augmented(v) => decode_augmented(checkpoint, v, name),
        }
    }
}

/// Decodes and renders each code, then tiles the previews.
pub fn render_codes(
    checkpoint: &Checkpoint,
    codes: &[PreviewCode],
    scene: &PreviewScene,
    cols: usize,
) -> Result<Image> {
    if codes.is_empty() {
        return Err(Error::Precondition("no codes to render".into()));
    }
    let tiles = codes
        .iter()
        .enumerate()
        .map(|(i, c)| render_sphere(&c.decode(checkpoint, &format!("tile-{i}"))?, scene))
        .collect::<Result<Vec<_>>>()?;
    contact_sheet(&tiles, cols)
}
