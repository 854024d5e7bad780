use super::{clamp_u8, Image, PreprocessError, Result};

/// Mirror index without repeating the edge sample (`-1 → 1`, `n → n-2`).
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// 3×3 sharpening with kernel `[[0,-1,0],[-1,5,-1],[0,-1,0]]`, reflected
/// borders, results clamped to `[0, 255]`.
pub fn sharpen(image: &Image) -> Image {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let mut out = image.clone();
    for y in 0..h {
        let up = reflect101(y as isize - 1, h);
        let down = reflect101(y as isize + 1, h);
        for x in 0..w {
            let left = reflect101(x as isize - 1, w);
            let right = reflect101(x as isize + 1, w);
            for c in 0..ch {
                let v = 5 * i32::from(image.get(y, x, c))
                    - i32::from(image.get(up, x, c))
                    - i32::from(image.get(down, x, c))
                    - i32::from(image.get(y, left, c))
                    - i32::from(image.get(y, right, c));
                out.put(y, x, c, v.clamp(0, 255) as u8);
            }
        }
    }
    out
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize(image: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(PreprocessError::Param(format!("resize target must be positive, got {height}x{width}")));
    }
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let src = |dst: usize, from: usize, to: usize| -> (usize, usize, f64) {
        let f = ((dst as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, f - i0 as f64)
    };
    let mut out = Vec::with_capacity(height * width * ch);
    for y in 0..height {
        let (y0, y1, wy) = src(y, h, height);
        for x in 0..width {
            let (x0, x1, wx) = src(x, w, width);
            for c in 0..ch {
                let p = |yy, xx| f64::from(image.get(yy, xx, c));
                let top = (1.0 - wx) * p(y0, x0) + wx * p(y0, x1);
                let bottom = (1.0 - wx) * p(y1, x0) + wx * p(y1, x1);
                out.push(clamp_u8((1.0 - wy) * top + wy * bottom));
            }
        }
    }
    Image::new(height, width, ch, out)
}
