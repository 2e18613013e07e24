//! Image and mask file I/O, dataset manifests, free-form mask generation by
//! hole-ratio class, the edge-preserving structural-map operator, and
//! synthetic images for self-contained experiments.

use std::path::{Path, PathBuf};

use image::ImageReader;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::pconv::MaskPlane;
use crate::tensor::Tensor4;

// ---- images -------------------------------------------------------------------

/// Loads an 8-bit RGB image (PNG or PPM) as a (1, 3, h, w) tensor in [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor4> {
    let img = ImageReader::open(path.as_ref())?
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor4::from_raw((1, 3, h, w), data))
}

/// Saves the first batch entry as an 8-bit RGB image; values are clamped to
/// [0, 1] and rounded, so multiples of 1/255 survive a round trip exactly.
pub fn save_image(t: &Tensor4, path: impl AsRef<Path>) -> Result<()> {
    let (_, c, h, w) = t.dims();
    if c != 3 {
        return Err(Error::Invalid(format!("save_image expects 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ci| {
                let v = t.at(0, ci, y, x).clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path.as_ref())
        .map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display())))
}

/// Loads a grayscale mask image; pixels >= 128 are valid (1), darker pixels
/// are holes.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskPlane> {
    let img = ImageReader::open(path.as_ref())?
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let bits: Vec<u8> = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
    MaskPlane::new(h as usize, w as usize, bits)
}

/// Saves a mask as an 8-bit grayscale image (255 = valid, 0 = hole).
pub fn save_mask(m: &MaskPlane, path: impl AsRef<Path>) -> Result<()> {
    let img = image::GrayImage::from_fn(m.w() as u32, m.h() as u32, |x, y| {
        image::Luma([if m.get(y as usize, x as usize) { 255u8 } else { 0 }])
    });
    img.save(path.as_ref())
        .map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display())))
}

/// Bilinear resize (half-pixel centers) of an image tensor.
pub fn resize_bilinear(t: &Tensor4, oh: usize, ow: usize) -> Tensor4 {
    let (n, c, h, w) = t.dims();
    if (oh, ow) == (h, w) {
        return t.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Tensor4::from_fn((n, c, oh, ow), |ni, ci, y, x| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
        let v00 = t.at(ni, ci, y0, x0);
        let v01 = t.at(ni, ci, y0, x1);
        let v10 = t.at(ni, ci, y1, x0);
        let v11 = t.at(ni, ci, y1, x1);
        v00 * (1.0 - dy) * (1.0 - dx) + v01 * (1.0 - dy) * dx + v10 * dy * (1.0 - dx) + v11 * dy * dx
    })
}

// ---- manifests ------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<String>,
}

/// Dataset description: target resolution plus image/mask paths, relative to
/// the manifest file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub resolution: usize,
    #[serde(default = "default_split")]
    pub split: String,
    pub items: Vec<ManifestItem>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_split() -> String {
    "train".into()
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.base_dir = path.as_ref().parent().unwrap_or(Path::new(".")).to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution % 32 != 0 {
            return Err(Error::Invalid(format!(
                "manifest resolution {} not divisible by 32",
                self.resolution
            )));
        }
        if self.items.is_empty() {
            return Err(Error::Invalid("manifest lists no items".into()));
        }
        for item in &self.items {
            let p = self.base_dir.join(&item.image);
            if !p.exists() {
                return Err(Error::Invalid(format!("missing image {}", p.display())));
            }
            if let Some(mk) = &item.mask {
                let p = self.base_dir.join(mk);
                if !p.exists() {
                    return Err(Error::Invalid(format!("missing mask {}", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Loads item i's image, resized to the manifest resolution.
    pub fn image(&self, i: usize) -> Result<Tensor4> {
        let t = load_image(self.base_dir.join(&self.items[i].image))?;
        Ok(resize_bilinear(&t, self.resolution, self.resolution))
    }

    /// Loads item i's mask if it has one (holes resampled by nearest).
    pub fn mask(&self, i: usize) -> Result<Option<MaskPlane>> {
        match &self.items[i].mask {
            None => Ok(None),
            Some(p) => {
                let m = load_mask(self.base_dir.join(p))?;
                if (m.h(), m.w()) == (self.resolution, self.resolution) {
                    return Ok(Some(m));
                }
                // nearest resample to the target resolution
                let mut bits = Vec::with_capacity(self.resolution * self.resolution);
                for y in 0..self.resolution {
                    for x in 0..self.resolution {
                        let sy = y * m.h() / self.resolution;
                        let sx = x * m.w() / self.resolution;
                        bits.push(u8::from(m.get(sy, sx)));
                    }
                }
                Ok(Some(MaskPlane::new(self.resolution, self.resolution, bits)?))
            }
        }
    }
}

// ---- mask generation --------------------------------------------------------------

/// Hole-area classes, fractions in (lo, hi].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatioClass {
    R0_10,
    R10_20,
    R20_30,
    R30_40,
    R40_50,
    R50_60,
}

impl RatioClass {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            RatioClass::R0_10 => (0.0, 0.1),
            RatioClass::R10_20 => (0.1, 0.2),
            RatioClass::R20_30 => (0.2, 0.3),
            RatioClass::R30_40 => (0.3, 0.4),
            RatioClass::R40_50 => (0.4, 0.5),
            RatioClass::R50_60 => (0.5, 0.6),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "0-10" => Ok(RatioClass::R0_10),
            "10-20" => Ok(RatioClass::R10_20),
            "20-30" => Ok(RatioClass::R20_30),
            "30-40" => Ok(RatioClass::R30_40),
            "40-50" => Ok(RatioClass::R40_50),
            "50-60" => Ok(RatioClass::R50_60),
            _ => Err(Error::Invalid(format!("unknown ratio class {s:?} (want e.g. 10-20)"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RatioClass::R0_10 => "0-10",
            RatioClass::R10_20 => "10-20",
            RatioClass::R20_30 => "20-30",
            RatioClass::R30_40 => "30-40",
            RatioClass::R40_50 => "40-50",
            RatioClass::R50_60 => "50-60",
        }
    }

    pub fn all() -> [RatioClass; 6] {
        [
            RatioClass::R0_10,
            RatioClass::R10_20,
            RatioClass::R20_30,
            RatioClass::R30_40,
            RatioClass::R40_50,
            RatioClass::R50_60,
        ]
    }
}

/// A free-form mask request: ratio class, border exclusion, seed.
#[derive(Clone, Copy, Debug)]
pub struct MaskSpec {
    pub ratio: RatioClass,
    /// Forbid holes within 8 px of the border.
    pub with_border: bool,
    pub seed: u64,
}

pub const BORDER_MARGIN: usize = 8;
const MAX_ATTEMPTS: usize = 100;

/// Stamps a filled disk of holes, respecting the optional border margin.
fn stamp(m: &mut MaskPlane, cy: f64, cx: f64, radius: f64, border: bool) {
    let (h, w) = (m.h(), m.w());
    let (lo_y, hi_y, lo_x, hi_x) = if border {
        (BORDER_MARGIN, h - BORDER_MARGIN, BORDER_MARGIN, w - BORDER_MARGIN)
    } else {
        (0, h, 0, w)
    };
    let r = radius.ceil() as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let y = cy as isize + dy;
            let x = cx as isize + dx;
            if y < lo_y as isize || y >= hi_y as isize || x < lo_x as isize || x >= hi_x as isize {
                continue;
            }
            let fy = y as f64 - cy;
            let fx = x as f64 - cx;
            if fy * fy + fx * fx <= radius * radius {
                m.set(y as usize, x as usize, false);
            }
        }
    }
}

/// Draws one random brush stroke (a walk of connected segments) as holes.
fn stroke(m: &mut MaskPlane, rng: &mut ChaCha8Rng, thickness: f64, border: bool) {
    let (h, w) = (m.h() as f64, m.w() as f64);
    let mut y = rng.random_range(0.0..h);
    let mut x = rng.random_range(0.0..w);
    let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
    let segments = rng.random_range(2..=6usize);
    for _ in 0..segments {
        angle += rng.random_range(-1.0..1.0);
        let len = rng.random_range(h / 8.0..h / 3.0);
        let steps = (len / (thickness / 2.0)).ceil().max(2.0) as usize;
        for s in 0..steps {
            let t = s as f64 / steps as f64;
            let cy = y + t * len * angle.sin();
            let cx = x + t * len * angle.cos();
            stamp(m, cy, cx, thickness / 2.0, border);
        }
        y = (y + len * angle.sin()).clamp(0.0, h - 1.0);
        x = (x + len * angle.cos()).clamp(0.0, w - 1.0);
    }
}

/// Generates an irregular free-form mask whose hole fraction falls in the
/// requested class. Deterministic per seed; strokes are redrawn (up to 100
/// attempts) until the fraction lands inside the class.
pub fn generate_mask(spec: &MaskSpec, h: usize, w: usize) -> Result<MaskPlane> {
    if h < 64 || w < 64 {
        return Err(Error::Invalid(format!("mask dims {h}x{w} below the 64 px minimum")));
    }
    let (lo, hi) = spec.ratio.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // thinner strokes for the low-ratio classes
    let max_thick = (4.0 + 40.0 * hi).min(24.0).min(h as f64 / 4.0);
    for _ in 0..MAX_ATTEMPTS {
        let mut m = MaskPlane::ones(h, w);
        let max_strokes = rng.random_range(3..=12usize);
        for s in 0..usize::max(max_strokes, 24) {
            let thickness = rng.random_range(4.0..=max_thick);
            stroke(&mut m, &mut rng, thickness, spec.with_border);
            let frac = m.hole_fraction();
            if frac > hi {
                break; // overshoot: retry with fresh strokes
            }
            if frac > lo && (s + 1 >= 3 || frac > (lo + hi) / 2.0) {
                return Ok(m);
            }
        }
        let frac = m.hole_fraction();
        if frac > lo && frac <= hi {
            return Ok(m);
        }
    }
    Err(Error::MaskRatio(MAX_ATTEMPTS))
}

// ---- structural map ----------------------------------------------------------------

pub const STRUCT_ROUNDS: usize = 4;
pub const STRUCT_EDGE_THRESHOLD: f32 = 0.2;

/// Edge-preserving smoothing: four rounds of Gaussian blur in which pixels
/// whose local 3x3 value range (max over channels) exceeds 0.2 keep their
/// original value. A stand-in structural image with flattened texture and
/// preserved strong edges.
pub fn structural_map(i: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = i.dims();
    let mut cur = i.clone();
    for _ in 0..STRUCT_ROUNDS {
        // per-pixel local range over a 3x3 neighborhood, max across channels
        let mut range = vec![0.0f32; n * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let p = cur.plane(ni, ci);
                for y in 0..h {
                    for x in 0..w {
                        let mut lo = f32::INFINITY;
                        let mut hi = f32::NEG_INFINITY;
                        for dy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                            for dx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                                let v = p[dy * w + dx];
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                        }
                        let r = hi - lo;
                        let slot = &mut range[ni * h * w + y * w + x];
                        if r > *slot {
                            *slot = r;
                        }
                    }
                }
            }
        }
        let blurred = ops::blur3_reflect(&cur);
        let mut next = blurred;
        for ni in 0..n {
            for ci in 0..c {
                let orig = i.plane(ni, ci).to_vec();
                let p = next.plane_mut(ni, ci);
                for (idx, v) in p.iter_mut().enumerate() {
                    if range[ni * h * w + idx] > STRUCT_EDGE_THRESHOLD {
                        *v = orig[idx];
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

// ---- synthetic images ---------------------------------------------------------------

/// Deterministic smooth test image: a gradient field plus a few soft blobs,
/// values inside [0.05, 0.95].
pub fn synthetic_image(seed: u64, h: usize, w: usize) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nblobs = 4;
    let blobs: Vec<(f64, f64, f64, f64, usize)> = (0..nblobs)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range((h as f64) / 8.0..(h as f64) / 2.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(0..3usize),
            )
        })
        .collect();
    let (gy, gx) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
    let base: [f64; 3] = [
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
    ];
    Tensor4::from_fn((1, 3, h, w), |_, c, y, x| {
        let mut v = base[c] + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5);
        for &(by, bx, r, amp, bc) in &blobs {
            if bc == c || bc == (c + 1) % 3 {
                let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                v += amp * (-d2 / (2.0 * r * r)).exp();
            }
        }
        v.clamp(0.05, 0.95) as f32
    })
}
