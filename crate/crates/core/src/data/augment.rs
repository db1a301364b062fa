use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Frame, FRAME_CHANNELS, FRAME_SIZE};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const N: usize = FRAME_SIZE;

/// Frame augmentation suite. Every transform fires independently with its own
/// probability (default 0.5). The crop is an area ratio, the resize a side
/// ratio applied to the cropped window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop_prob: f64,
    pub crop_area: [f64; 2],
    pub resize_ratio: [f64; 2],
    pub hsv_prob: f64,
    /// Max hue shift in turns.
    pub hue_shift: f64,
    /// Max relative change of saturation and value.
    pub sat_scale: f64,
    pub val_scale: f64,
    pub noise_prob: f64,
    pub noise_std: [f64; 2],
    pub blur_prob: f64,
    pub blur_lengths: Vec<usize>,
    pub iso_prob: f64,
    /// Luminance-dependent noise strength range.
    pub iso_intensity: [f64; 2],
    /// Max per-channel gain jitter.
    pub iso_gain: f64,
    pub rotate_prob: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_prob: 0.5,
            crop_area: [0.33, 1.0],
            resize_ratio: [0.7, 1.35],
            hsv_prob: 0.5,
            hue_shift: 0.1,
            sat_scale: 0.2,
            val_scale: 0.2,
            noise_prob: 0.5,
            noise_std: [0.0, 0.05],
            blur_prob: 0.5,
            blur_lengths: vec![3, 5],
            iso_prob: 0.5,
            iso_intensity: [0.0, 0.05],
            iso_gain: 0.05,
            rotate_prob: 0.5,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every probability zero: `augment` is the identity.
    pub fn disabled() -> Self {
        Self {
            crop_prob: 0.0,
            hsv_prob: 0.0,
            noise_prob: 0.0,
            blur_prob: 0.0,
            iso_prob: 0.0,
            rotate_prob: 0.0,
            flip_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.crop_prob,
            self.hsv_prob,
            self.noise_prob,
            self.blur_prob,
            self.iso_prob,
            self.rotate_prob,
            self.flip_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must be in [0,1]".into()));
        }
        let range_ok = |r: [f64; 2], lo: f64, hi: f64| lo <= r[0] && r[0] <= r[1] && r[1] <= hi;
        if !range_ok(self.crop_area, f64::MIN_POSITIVE, 1.0) {
            return Err(Error::Config(format!("bad crop area range {:?}", self.crop_area)));
        }
        if !range_ok(self.resize_ratio, f64::MIN_POSITIVE, 16.0) {
            return Err(Error::Config(format!("bad resize range {:?}", self.resize_ratio)));
        }
        if !range_ok(self.noise_std, 0.0, 1.0) || !range_ok(self.iso_intensity, 0.0, 1.0) {
            return Err(Error::Config("bad noise range".into()));
        }
        if self.blur_lengths.is_empty() || self.blur_lengths.iter().any(|&l| l == 0 || l % 2 == 0) {
            return Err(Error::Config("blur lengths must be odd and non-empty".into()));
        }
        if !(0.0..=0.5).contains(&self.hue_shift)
            || !(0.0..1.0).contains(&self.sat_scale)
            || !(0.0..1.0).contains(&self.val_scale)
            || !(0.0..1.0).contains(&self.iso_gain)
        {
            return Err(Error::Config("bad colour jitter range".into()));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.random::<f64>()
}

/// Apply the augmentation suite to one frame. The stream fully determines the
/// result; the output is clamped to `[0, 1]`.
pub fn augment(frame: &Frame, cfg: &AugmentConfig, stream: RngStream) -> Frame {
    let mut rng = stream.rng();
    let mut img = frame.pixels().data().to_vec();

    // each gate is drawn whether or not it fires, so streams stay aligned
    // across configurations
    if rng.random::<f64>() < cfg.crop_prob {
        let area = draw(&mut rng, cfg.crop_area);
        let resize = draw(&mut rng, cfg.resize_ratio);
        let (ux, uy) = (rng.random::<f64>(), rng.random::<f64>());
        img = crop_resize(&img, area, resize, (ux, uy));
    }
    if rng.random::<f64>() < cfg.hsv_prob {
        let dh = cfg.hue_shift * (2.0 * rng.random::<f64>() - 1.0);
        let ds = 1.0 + cfg.sat_scale * (2.0 * rng.random::<f64>() - 1.0);
        let dv = 1.0 + cfg.val_scale * (2.0 * rng.random::<f64>() - 1.0);
        hsv_shift(&mut img, dh, ds, dv);
    }
    if rng.random::<f64>() < cfg.noise_prob {
        let std = draw(&mut rng, cfg.noise_std);
        for v in img.iter_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    if rng.random::<f64>() < cfg.blur_prob {
        let len = cfg.blur_lengths[rng.random_range(0..cfg.blur_lengths.len())];
        let direction = rng.random_range(0..4);
        img = motion_blur(&img, len, direction);
    }
    if rng.random::<f64>() < cfg.iso_prob {
        let intensity = draw(&mut rng, cfg.iso_intensity);
        let gains: Vec<f64> = (0..FRAME_CHANNELS)
            .map(|_| 1.0 + cfg.iso_gain * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        iso_noise(&mut img, intensity, &gains, &mut rng);
    }
    let mut out = Tensor::new(vec![FRAME_CHANNELS, N, N], img).expect("frame shape");
    if rng.random::<f64>() < cfg.rotate_prob {
        let k = rng.random_range(1..=3);
        out = rotate90(&out, k);
    }
    if rng.random::<f64>() < cfg.flip_prob {
        out = hflip(&out);
    }
    Frame::clamped(out)
}

/// Bilinear sample of channel `c` at continuous pixel coordinates, edges clamped.
fn sample(img: &[f64], c: usize, y: f64, x: f64) -> f64 {
    let max = (N - 1) as f64;
    let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(N - 1), (x0 + 1).min(N - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| img[(c * N + yy) * N + xx];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Square crop covering `area` of the frame at relative position `pos`,
/// rescaled to `resize × 16` pixels and center-cropped or edge-padded back to
/// 16×16.
fn crop_resize(img: &[f64], area: f64, resize: f64, pos: (f64, f64)) -> Vec<f64> {
    let side = N as f64 * area.sqrt();
    let origin_x = (N as f64 - side) * pos.0;
    let origin_y = (N as f64 - side) * pos.1;
    let canvas = N as f64 * resize;
    let offset = (canvas - N as f64) / 2.0;
    let scale = side / canvas;
    let mut out = vec![0.0; img.len()];
    for c in 0..FRAME_CHANNELS {
        for i in 0..N {
            for j in 0..N {
                // output pixel centre → canvas coordinate → source coordinate
                let u = (i as f64 + 0.5 + offset).clamp(0.0, canvas);
                let v = (j as f64 + 0.5 + offset).clamp(0.0, canvas);
                let sy = origin_y + u * scale - 0.5;
                let sx = origin_x + v * scale - 0.5;
                out[(c * N + i) * N + j] = sample(img, c, sy, sx);
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

fn hsv_shift(img: &mut [f64], dh: f64, sat: f64, val: f64) {
    let plane = N * N;
    for p in 0..plane {
        let (r, g, b) = (
            img[p].clamp(0.0, 1.0),
            img[plane + p].clamp(0.0, 1.0),
            img[2 * plane + p].clamp(0.0, 1.0),
        );
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb(h + dh, (s * sat).clamp(0.0, 1.0), (v * val).clamp(0.0, 1.0));
        img[p] = r;
        img[plane + p] = g;
        img[2 * plane + p] = b;
    }
}

/// Line-average blur of odd length along one of four directions
/// (horizontal, vertical, two diagonals).
fn motion_blur(img: &[f64], len: usize, direction: usize) -> Vec<f64> {
    let (dy, dx): (i64, i64) = [(0, 1), (1, 0), (1, 1), (1, -1)][direction % 4];
    let half = (len / 2) as i64;
    let mut out = vec![0.0; img.len()];
    let clampi = |v: i64| v.clamp(0, N as i64 - 1) as usize;
    for c in 0..FRAME_CHANNELS {
        for y in 0..N as i64 {
            for x in 0..N as i64 {
                let sum: f64 = (-half..=half)
                    .map(|t| img[(c * N + clampi(y + t * dy)) * N + clampi(x + t * dx)])
                    .sum();
                out[(c * N + y as usize) * N + x as usize] = sum / len as f64;
            }
        }
    }
    out
}

/// Per-channel gain jitter plus Gaussian noise whose std grows with the
/// square root of pixel luminance.
fn iso_noise(img: &mut [f64], intensity: f64, gains: &[f64], rng: &mut ChaCha8Rng) {
    let plane = N * N;
    for p in 0..plane {
        let lum = (0.299 * img[p] + 0.587 * img[plane + p] + 0.114 * img[2 * plane + p]).max(0.0);
        let std = intensity * lum.sqrt();
        for c in 0..FRAME_CHANNELS {
            let v = &mut img[c * plane + p];
            *v = *v * gains[c] + std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Mirror each row.
pub fn hflip(t: &Tensor) -> Tensor {
    let &[c, h, w] = t.shape() else {
        return t.clone();
    };
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Rotate square planes counter-clockwise by `k` quarter turns.
pub fn rotate90(t: &Tensor, k: usize) -> Tensor {
    let mut out = t.clone();
    for _ in 0..k % 4 {
        let &[c, n, _] = out.shape() else {
            return out;
        };
        let src = out.data().to_vec();
        let dst = out.data_mut();
        for ch in 0..c {
            for y in 0..n {
                for x in 0..n {
                    // (y, x) ← (x, n-1-y)
                    dst[(ch * n + y) * n + x] = src[(ch * n + x) * n + (n - 1 - y)];
                }
            }
        }
    }
    out
}
