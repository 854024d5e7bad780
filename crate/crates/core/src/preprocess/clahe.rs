use super::{clamp_u8, Image, PreprocessError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheConfig {
    /// Multiple of the uniform bin height at which a tile histogram is clipped.
    pub clip_limit: f64,
    /// Tile grid as (rows, columns).
    pub tiles: (usize, usize),
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self { clip_limit: 2.0, tiles: (8, 8) }
    }
}

/// Contrast-limited adaptive histogram equalization.
///
/// Gray images are equalized directly; RGB images are converted to YCbCr
/// (ITU-R 601, full range), the luma plane is equalized and chroma is kept.
pub fn clahe(image: &Image, config: &ClaheConfig) -> Result<Image> {
    if config.clip_limit.is_nan() || config.clip_limit <= 0.0 {
        return Err(PreprocessError::Param(format!("clip limit must be positive, got {}", config.clip_limit)));
    }
    if config.tiles.0 == 0 || config.tiles.1 == 0 {
        return Err(PreprocessError::Param("tile grid must be at least 1x1".into()));
    }
    let (h, w) = (image.height(), image.width());
    if image.channels() == 1 {
        let out = equalize_plane(image.pixels(), h, w, config);
        return Image::new(h, w, 1, out);
    }
    let px = image.pixels();
    let mut luma = Vec::with_capacity(h * w);
    let mut chroma = Vec::with_capacity(h * w);
    for p in px.chunks_exact(3) {
        let (r, g, b) = (f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
        luma.push(clamp_u8(0.299 * r + 0.587 * g + 0.114 * b));
        chroma.push((-0.168_736 * r - 0.331_264 * g + 0.5 * b, 0.5 * r - 0.418_688 * g - 0.081_312 * b));
    }
    let eq = equalize_plane(&luma, h, w, config);
    let mut out = Vec::with_capacity(px.len());
    for (&y, &(cb, cr)) in eq.iter().zip(&chroma) {
        let y = f64::from(y);
        out.push(clamp_u8(y + 1.402 * cr));
        out.push(clamp_u8(y - 0.344_136 * cb - 0.714_136 * cr));
        out.push(clamp_u8(y + 1.772 * cb));
    }
    Image::new(h, w, 3, out)
}

/// Index into `0..n` with mirror reflection (no edge repeat) beyond the end.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn equalize_plane(plane: &[u8], h: usize, w: usize, config: &ClaheConfig) -> Vec<u8> {
    let ty = config.tiles.0.min(h);
    let tx = config.tiles.1.min(w);
    // pad bottom/right by reflection so the grid divides the image
    let th = h.div_ceil(ty);
    let tw = w.div_ceil(tx);
    let tile_px = (th * tw) as f64;
    let limit = config.clip_limit * tile_px / 256.0;

    let mut luts = vec![[0u8; 256]; ty * tx];
    for r in 0..ty {
        for c in 0..tx {
            let mut hist = [0.0f64; 256];
            for y in r * th..(r + 1) * th {
                let sy = reflect(y, h);
                for x in c * tw..(c + 1) * tw {
                    hist[plane[sy * w + reflect(x, w)] as usize] += 1.0;
                }
            }
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > limit {
                    excess += *b - limit;
                    *b = limit;
                }
            }
            let share = excess / 256.0;
            let mut cdf = 0.0;
            let lut = &mut luts[r * tx + c];
            for (v, b) in hist.iter().enumerate() {
                cdf += b + share;
                lut[v] = clamp_u8(cdf * 255.0 / tile_px);
            }
        }
    }

    // bilinear blend of the four nearest tile mappings, by tile centers
    let axis = |p: usize, size: usize, count: usize| -> (usize, usize, f64) {
        let f = (p as f64 + 0.5) / size as f64 - 0.5;
        if f <= 0.0 {
            return (0, 0, 0.0);
        }
        let i0 = (f.floor() as usize).min(count - 1);
        let i1 = (i0 + 1).min(count - 1);
        (i0, i1, if i1 == i0 { 0.0 } else { f - i0 as f64 })
    };
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let (r0, r1, wy) = axis(y, th, ty);
        for x in 0..w {
            let (c0, c1, wx) = axis(x, tw, tx);
            let v = plane[y * w + x] as usize;
            let at = |r: usize, c: usize| f64::from(luts[r * tx + c][v]);
            let top = (1.0 - wx) * at(r0, c0) + wx * at(r0, c1);
            let bottom = (1.0 - wx) * at(r1, c0) + wx * at(r1, c1);
            out[y * w + x] = clamp_u8((1.0 - wy) * top + wy * bottom);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        let img = Image::filled(4, 4, 1, 9).unwrap();
        for clip in [0.0, -1.0, f64::NAN] {
            let cfg = ClaheConfig { clip_limit: clip, ..Default::default() };
            assert!(matches!(clahe(&img, &cfg), Err(PreprocessError::Param(_))));
        }
    }

    #[test]
    fn constant_stays_constant() {
        for v in [0u8, 17, 128, 255] {
            let img = Image::filled(16, 20, 1, v).unwrap();
            let out = clahe(&img, &ClaheConfig::default()).unwrap();
            let first = out.pixels()[0];
            assert!(out.pixels().iter().all(|&p| p == first));
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!((0..7).map(|i| reflect(i, 4)).collect::<Vec<_>>(), vec![0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn color_keeps_extents() {
        let px: Vec<u8> = (0..10 * 12 * 3).map(|i| (i * 31 % 256) as u8).collect();
        let img = Image::new(10, 12, 3, px).unwrap();
        let out = clahe(&img, &ClaheConfig { clip_limit: 3.0, tiles: (3, 4) }).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (10, 12, 3));
    }
}
