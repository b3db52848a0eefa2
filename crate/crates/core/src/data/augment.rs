use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// 8-bit image in row-major `H x W x C` order with one or three channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl DecodedImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) || data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image {width}x{height}x{channels} with {} bytes is malformed",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Value of channel `c` in `[0, 1]`; grayscale is replicated.
    #[inline]
    fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        let c = if self.channels == 1 { 0 } else { c };
        self.data[(y * self.width + x) * self.channels + c] as f32 / 255.0
    }
}

/// Decodes an 8-bit PNG or PGM/PPM file.
pub fn decode_image(path: &Path) -> Result<DecodedImage> {
    let err = |msg: String| Error::Image { path: path.to_path_buf(), msg };
    let img = image::ImageReader::open(path)
        .map_err(|e| err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| err(e.to_string()))?
        .decode()
        .map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    use image::DynamicImage as D;
    let (channels, data) = match img {
        D::ImageLuma8(b) => (1, b.into_raw()),
        D::ImageLumaA8(_) => (1, img.to_luma8().into_raw()),
        D::ImageRgb8(b) => (3, b.into_raw()),
        D::ImageRgba8(_) => (3, img.to_rgb8().into_raw()),
        other => return Err(err(format!("unsupported pixel format {:?}; only 8-bit images are accepted", other.color()))),
    };
    DecodedImage::new(w, h, channels, data).map_err(|e| err(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Side of the square output; the shorter input side is resized to it.
    pub size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { size: 256, mean: IMAGENET_MEAN, std: IMAGENET_STD, max_rotation_deg: 15.0, flip_prob: 0.5 }
    }
}

impl AugmentConfig {
    pub fn with_size(size: usize) -> Self {
        Self { size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("augmentation size must be positive".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config(format!("normalisation std {:?} must be positive", self.std)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(Error::Config("flip probability or rotation range out of bounds".into()));
        }
        Ok(())
    }

    /// Smallest and largest value a normalised pixel can take.
    pub fn output_bounds(&self) -> (f64, f64) {
        let max_mean = self.mean.iter().copied().fold(f64::MIN, f64::max);
        let min_mean = self.mean.iter().copied().fold(f64::MAX, f64::min);
        let min_std = self.std.iter().copied().fold(f64::MAX, f64::min);
        (-max_mean / min_std, (1.0 - min_mean) / min_std)
    }
}

/// Random choices of one training-mode augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let m = cfg.max_rotation_deg;
        let angle_deg = if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let flip = rng.random::<f64>() < cfg.flip_prob;
        Self { angle_deg, flip }
    }
}

/// Resize, centre crop and normalise; training mode adds a random rotation
/// and horizontal flip drawn from `rng`. Returns `[3, size, size]`.
pub fn augment<R: Rng + ?Sized>(img: &DecodedImage, mode: Mode, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<f32>> {
    let params = match mode {
        Mode::Train => AugmentParams::sample(cfg, rng),
        Mode::Eval => AugmentParams::default(),
    };
    augment_with(img, params, cfg)
}

/// [`augment`] with explicit random choices.
pub fn augment_with(img: &DecodedImage, params: AugmentParams, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let s = cfg.size;
    let plane = s * s;
    let mut out = vec![0f32; 3 * plane];

    // Bilinear resize of the shorter side to `s`, then centre crop, in one
    // pass with half-pixel centres.
    let (w, h) = (img.width as f64, img.height as f64);
    let scale = s as f64 / w.min(h);
    let (rw, rh) = ((w * scale).round().max(s as f64), (h * scale).round().max(s as f64));
    let (ox, oy) = (((rw - s as f64) / 2.0).floor(), ((rh - s as f64) / 2.0).floor());
    let (sx, sy) = (w / rw, h / rh);
    for y in 0..s {
        let fy = ((y as f64 + oy + 0.5) * sy - 0.5).clamp(0.0, h - 1.0);
        let (y0, ty) = (fy.floor() as usize, (fy - fy.floor()) as f32);
        let y1 = (y0 + 1).min(img.height - 1);
        for x in 0..s {
            let fx = ((x as f64 + ox + 0.5) * sx - 0.5).clamp(0.0, w - 1.0);
            let (x0, tx) = (fx.floor() as usize, (fx - fx.floor()) as f32);
            let x1 = (x0 + 1).min(img.width - 1);
            for c in 0..3 {
                let top = img.at(y0, x0, c) * (1.0 - tx) + img.at(y0, x1, c) * tx;
                let bottom = img.at(y1, x0, c) * (1.0 - tx) + img.at(y1, x1, c) * tx;
                out[c * plane + y * s + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }

    if params.angle_deg != 0.0 {
        out = rotate(&out, s, params.angle_deg);
    }
    if params.flip {
        for row in out.chunks_mut(s) {
            row.reverse();
        }
    }
    for c in 0..3 {
        let (m, sd) = (cfg.mean[c] as f32, cfg.std[c] as f32);
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v = (*v - m) / sd;
        }
    }
    Tensor::new(&[3, s, s], out)
}

/// Rotates each `s x s` plane about its centre with bilinear sampling.
/// Pixels that map outside the source are 0.
fn rotate(src: &[f32], s: usize, angle_deg: f64) -> Vec<f32> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let c = (s as f64 - 1.0) / 2.0;
    let plane = s * s;
    let mut out = vec![0f32; src.len()];
    let sample = |p: &[f32], y: f64, x: f64| -> f32 {
        let (x0, y0) = (x.floor(), y.floor());
        let (tx, ty) = ((x - x0) as f32, (y - y0) as f32);
        let px = |yy: f64, xx: f64| {
            if yy < 0.0 || xx < 0.0 || yy >= s as f64 || xx >= s as f64 {
                0.0
            } else {
                p[yy as usize * s + xx as usize]
            }
        };
        let top = px(y0, x0) * (1.0 - tx) + px(y0, x0 + 1.0) * tx;
        let bottom = px(y0 + 1.0, x0) * (1.0 - tx) + px(y0 + 1.0, x0 + 1.0) * tx;
        top * (1.0 - ty) + bottom * ty
    };
    for y in 0..s {
        for x in 0..s {
            // inverse map: output pixel back into the source frame
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            if sx <= -1.0 || sy <= -1.0 || sx >= s as f64 || sy >= s as f64 {
                continue;
            }
            for ch in 0..3 {
                out[ch * plane + y * s + x] = sample(&src[ch * plane..(ch + 1) * plane], sy, sx);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> DecodedImage {
        let data = (0..w * h).map(|i| ((i * 37) % 256) as u8).collect();
        DecodedImage::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn eval_is_deterministic_and_matches_degenerate_train() {
        let img = ramp(40, 30);
        let cfg = AugmentConfig::with_size(24);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&img, Mode::Eval, &cfg, &mut rng).unwrap();
        let b = augment(&img, Mode::Eval, &cfg, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 24, 24]);
        let t = augment_with(&img, AugmentParams { angle_deg: 0.0, flip: false }, &cfg).unwrap();
        assert_eq!(a, t);
    }

    #[test]
    fn mean_gray_normalises_to_zero() {
        // a pixel value equal to each channel mean is only possible per
        // channel, so use a colour image
        let px: Vec<u8> = IMAGENET_MEAN.iter().map(|m| (m * 255.0).round() as u8).collect();
        let data = px.iter().copied().cycle().take(16 * 16 * 3).collect();
        let img = DecodedImage::new(16, 16, 3, data).unwrap();
        let t = augment_with(&img, AugmentParams::default(), &AugmentConfig::with_size(8)).unwrap();
        assert!(t.data().iter().all(|v| v.abs() < 0.01), "{:?}", &t.data()[..4]);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = ramp(8, 8);
        let cfg = AugmentConfig { mean: [0.0; 3], std: [1.0; 3], ..AugmentConfig::with_size(8) };
        let t = augment_with(&img, AugmentParams::default(), &cfg).unwrap();
        for (i, &v) in img.data.iter().enumerate() {
            assert!((t.data()[i] - v as f32 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_and_rotation() {
        let img = ramp(8, 8);
        let cfg = AugmentConfig { mean: [0.0; 3], std: [1.0; 3], ..AugmentConfig::with_size(8) };
        let plain = augment_with(&img, AugmentParams::default(), &cfg).unwrap();
        let flipped = augment_with(&img, AugmentParams { angle_deg: 0.0, flip: true }, &cfg).unwrap();
        assert_eq!(flipped.data()[0], plain.data()[7]);
        // 90 degrees maps the grid onto itself exactly
        let rot = augment_with(&img, AugmentParams { angle_deg: 90.0, flip: false }, &cfg).unwrap();
        let back = rotate(rot.data(), 8, -90.0);
        for (a, b) in back.iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        // corners of a 45 degree rotation fall outside the source
        let r45 = augment_with(&img, AugmentParams { angle_deg: 45.0, flip: false }, &cfg).unwrap();
        assert_eq!(r45.data()[0], 0.0);
    }

    #[test]
    fn output_within_normalisation_bounds() {
        let cfg = AugmentConfig::with_size(16);
        let (lo, hi) = cfg.output_bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for w in [10, 16, 33] {
            let img = ramp(w, 20);
            let t = augment(&img, Mode::Train, &cfg, &mut rng).unwrap();
            assert!(t.data().iter().all(|&v| (v as f64) >= lo - 1e-5 && (v as f64) <= hi + 1e-5));
        }
    }

    #[test]
    fn decode_errors_carry_path() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        let err = decode_image(&p).unwrap_err();
        assert!(err.to_string().contains("bad.png"));
        assert!(decode_image(&d.path().join("missing.png")).is_err());
    }

    #[test]
    fn decodes_png_and_pgm() {
        let d = tempfile::tempdir().unwrap();
        let buf = image::GrayImage::from_fn(5, 4, |x, y| image::Luma([(x * 10 + y) as u8]));
        for name in ["a.png", "a.pgm"] {
            let p = d.path().join(name);
            buf.save(&p).unwrap();
            let img = decode_image(&p).unwrap();
            assert_eq!((img.width, img.height, img.channels), (5, 4, 1));
            assert_eq!(img.data[6], 11);
        }
    }
}
