use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Error, Result};

/// Planar (`[C, H, W]`) image with unit-interval `f32` samples.
#[derive(Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{}x{})", self.channels, self.height, self.width)
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("degenerate image {height}x{width}"));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid!("images have 1 or 3 channels, got {channels}"));
        }
        if data.len() != height * width * channels {
            return Err(invalid!("{} samples for a {channels}x{height}x{width} image", data.len()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Build from a per-pixel function returning channel values.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Copy of the window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(invalid!("window {height}x{width} at ({top},{left}) exceeds {}x{}", self.height, self.width));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(Image { height, width, channels: self.channels, data })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?;
        let (channels, raw, w, h) = if img.color().has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            (3, rgb.into_raw(), w, h)
        } else {
            let l = img.to_luma8();
            let (w, h) = l.dimensions();
            (1, l.into_raw(), w, h)
        };
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![0.0; raw.len()];
        for (i, px) in raw.chunks(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * w * h + i] = v as f32 / 255.0;
            }
        }
        Image::new(h, w, channels, data)
    }

    /// Write as 8-bit PNG (values clamped to [0,1] and rounded).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let plane = self.width * self.height;
        let mut raw = vec![0u8; plane * self.channels];
        for i in 0..plane {
            for c in 0..self.channels {
                raw[i * self.channels + c] = (self.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let color = if self.channels == 3 { image::ExtendedColorType::Rgb8 } else { image::ExtendedColorType::L8 };
        image::save_buffer(path, &raw, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })
    }
}

/// `round(long * target / short)` with halves rounded up, in integers.
fn scaled_long_side(long: usize, short: usize, target: usize) -> usize {
    (2 * long * target + short) / (2 * short)
}

/// Aspect-preserving bilinear resize so that the shorter side equals
/// `target`.
pub fn resize_shorter_side(img: &Image, target: usize) -> Result<Image> {
    if target == 0 {
        return Err(invalid!("resize target must be positive"));
    }
    let (h, w) = (img.height, img.width);
    let (nh, nw) = if h <= w {
        (target, scaled_long_side(w, h, target).max(1))
    } else {
        (scaled_long_side(h, w, target).max(1), target)
    };
    Ok(resize_bilinear(img, nh, nw))
}

/// Bilinear resampling with pixel centers at half-integer coordinates;
/// an unchanged size reproduces the input exactly.
pub fn resize_bilinear(img: &Image, new_h: usize, new_w: usize) -> Image {
    if new_h == img.height && new_w == img.width {
        return img.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(new_h, img.height);
    let xs = axis(new_w, img.width);
    let mut data = Vec::with_capacity(new_h * new_w * img.channels);
    for c in 0..img.channels {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Image { height: new_h, width: new_w, channels: img.channels, data }
}

/// Centered `side × side` window; odd margins leave the extra pixel on the
/// bottom/right.
pub fn center_crop_to_square(img: &Image, side: usize) -> Result<Image> {
    if img.height < side || img.width < side || side == 0 {
        return Err(invalid!("cannot take a {side}x{side} crop from {}x{}", img.height, img.width));
    }
    img.crop((img.height - side) / 2, (img.width - side) / 2, side, side)
}

/// Uniformly placed `side × side` window. Offsets are drawn top first, then
/// left.
pub fn random_crop<R: Rng + ?Sized>(img: &Image, side: usize, rng: &mut R) -> Result<Image> {
    let (top, left) = random_crop_offsets(img, side, rng)?;
    img.crop(top, left, side, side)
}

pub fn random_crop_offsets<R: Rng + ?Sized>(img: &Image, side: usize, rng: &mut R) -> Result<(usize, usize)> {
    if img.height < side || img.width < side || side == 0 {
        return Err(invalid!("cannot take a {side}x{side} crop from {}x{}", img.height, img.width));
    }
    let top = rng.random_range(0..=img.height - side);
    let left = rng.random_range(0..=img.width - side);
    Ok((top, left))
}
