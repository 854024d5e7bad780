use rand::Rng;

use super::{clamp_u8, resize, Image, PreprocessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

/// Crop window; the crop is resized back to the source extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// One "traditional" augmentation. Applied in field order; the output has
/// the same extents as the input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotation: Rotation,
    /// Zoom about the image center, within `[0.8, 1.2]`.
    pub scale: f64,
    /// (rows, columns) shift; vacated pixels replicate the edge.
    pub translate: (i32, i32),
    pub crop: Crop,
}

impl AugmentSpec {
    pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);

    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            rotation: Rotation::R0,
            scale: 1.0,
            translate: (0, 0),
            crop: Crop { top: 0, left: 0, height, width },
        }
    }

    /// Draws a spec for an image of the given extents. Quarter turns are only
    /// drawn for square images; shifts stay within a tenth of each extent and
    /// crops keep at least 80% of each side.
    pub fn random<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        let rotation = if height == width {
            [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270][rng.gen_range(0..4)]
        } else if rng.gen_bool(0.5) {
            Rotation::R180
        } else {
            Rotation::R0
        };
        let flip_h = rng.gen_bool(0.5);
        let flip_v = rng.gen_bool(0.5);
        let scale = rng.gen_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1);
        let max_dy = (height / 10) as i32;
        let max_dx = (width / 10) as i32;
        let translate = (rng.gen_range(-max_dy..=max_dy), rng.gen_range(-max_dx..=max_dx));
        let ch = rng.gen_range((height * 4).div_ceil(5).max(1)..=height);
        let cw = rng.gen_range((width * 4).div_ceil(5).max(1)..=width);
        let crop = Crop {
            top: rng.gen_range(0..=height - ch),
            left: rng.gen_range(0..=width - cw),
            height: ch,
            width: cw,
        };
        Self { flip_h, flip_v, rotation, scale, translate, crop }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (lo, hi) = Self::SCALE_RANGE;
        if !(lo..=hi).contains(&self.scale) {
            return Err(PreprocessError::Param(format!("scale {} outside [{lo}, {hi}]", self.scale)));
        }
        if matches!(self.rotation, Rotation::R90 | Rotation::R270) && height != width {
            return Err(PreprocessError::Param("quarter turns need a square image".into()));
        }
        if self.translate.0.unsigned_abs() as usize >= height || self.translate.1.unsigned_abs() as usize >= width {
            return Err(PreprocessError::Param(format!("translation {:?} exceeds image extents", self.translate)));
        }
        let c = self.crop;
        if c.height == 0 || c.width == 0 || c.top + c.height > height || c.left + c.width > width {
            return Err(PreprocessError::Param(format!("crop {c:?} outside {height}x{width} image")));
        }
        Ok(())
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        let (h, w) = (image.height(), image.width());
        self.validate(h, w)?;
        let mut img = image.clone();
        if self.flip_h {
            img = flip_h(&img);
        }
        if self.flip_v {
            img = flip_v(&img);
        }
        img = rotate(&img, self.rotation);
        if self.scale != 1.0 {
            img = zoom(&img, self.scale);
        }
        if self.translate != (0, 0) {
            img = shift(&img, self.translate);
        }
        let c = self.crop;
        if (c.height, c.width) != (h, w) {
            img = crop(&img, c);
            img = resize(&img, h, w)?;
        }
        Ok(img)
    }
}

fn remap(image: &Image, oh: usize, ow: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Image {
    let ch = image.channels();
    let mut px = Vec::with_capacity(oh * ow * ch);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = f(y, x);
            for c in 0..ch {
                px.push(image.get(sy, sx, c));
            }
        }
    }
    Image::new(oh, ow, ch, px).expect("remap keeps a valid layout")
}

pub(crate) fn flip_h(image: &Image) -> Image {
    let w = image.width();
    remap(image, image.height(), w, |y, x| (y, w - 1 - x))
}

fn flip_v(image: &Image) -> Image {
    let h = image.height();
    remap(image, h, image.width(), |y, x| (h - 1 - y, x))
}

/// Clockwise rotation by quarter turns.
fn rotate(image: &Image, r: Rotation) -> Image {
    let (h, w) = (image.height(), image.width());
    match r {
        Rotation::R0 => image.clone(),
        Rotation::R90 => remap(image, w, h, |y, x| (h - 1 - x, y)),
        Rotation::R180 => remap(image, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        Rotation::R270 => remap(image, w, h, |y, x| (x, w - 1 - y)),
    }
}

fn zoom(image: &Image, s: f64) -> Image {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut px = Vec::with_capacity(h * w * ch);
    for y in 0..h {
        let fy = ((y as f64 + 0.5 - cy) / s + cy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, wy) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..w {
            let fx = ((x as f64 + 0.5 - cx) / s + cx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, wx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..ch {
                let p = |yy, xx| f64::from(image.get(yy, xx, c));
                let top = (1.0 - wx) * p(y0, x0) + wx * p(y0, x1);
                let bottom = (1.0 - wx) * p(y1, x0) + wx * p(y1, x1);
                px.push(clamp_u8((1.0 - wy) * top + wy * bottom));
            }
        }
    }
    Image::new(h, w, ch, px).expect("zoom keeps extents")
}

fn shift(image: &Image, (dy, dx): (i32, i32)) -> Image {
    let (h, w) = (image.height() as i64, image.width() as i64);
    remap(image, h as usize, w as usize, |y, x| {
        let sy = (y as i64 - i64::from(dy)).clamp(0, h - 1);
        let sx = (x as i64 - i64::from(dx)).clamp(0, w - 1);
        (sy as usize, sx as usize)
    })
}

fn crop(image: &Image, c: Crop) -> Image {
    remap(image, c.height, c.width, |y, x| (c.top + y, c.left + x))
}

/// Balances a two-class dataset (labels 0 and 1) by appending augmented
/// copies of minority-class images until both classes have equal counts.
///
/// Originals are kept in input order; synthetic samples follow, cycling
/// through the minority images in order. All draws come from `rng`.
pub fn augment_balance<R: Rng + ?Sized>(dataset: Vec<(Image, u8)>, rng: &mut R) -> Result<Vec<(Image, u8)>> {
    if let Some((_, bad)) = dataset.iter().find(|(_, l)| *l > 1) {
        return Err(PreprocessError::Dataset(format!("labels must be 0 or 1, found {bad}")));
    }
    let count = |label| dataset.iter().filter(|(_, l)| *l == label).count();
    let (n0, n1) = (count(0), count(1));
    if n0 == 0 || n1 == 0 {
        return Err(PreprocessError::Dataset(format!("both classes need samples, got counts ({n0}, {n1})")));
    }
    if n0 == n1 {
        return Ok(dataset);
    }
    let minority = if n0 < n1 { 0 } else { 1 };
    let sources: Vec<usize> = dataset.iter().enumerate().filter(|(_, (_, l))| *l == minority).map(|(i, _)| i).collect();
    let deficit = n0.abs_diff(n1);
    let mut out = dataset;
    out.reserve(deficit);
    for k in 0..deficit {
        let src = &out[sources[k % sources.len()]].0;
        let spec = AugmentSpec::random(src.height(), src.width(), rng);
        let synth = spec.apply(src)?;
        out.push((synth, minority));
    }
    Ok(out)
}
