//! Clip-level spatial and intensity augmentation.
//!
//! One transform is drawn per clip and applied to every frame, so motion
//! across frames is preserved.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::{Error, Result};

/// Largest magnitudes a policy may request.
pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const SCALE_BOUNDS: (f64, f64) = (0.85, 1.15);
pub const MAX_TRANSLATE: f64 = 0.10;
pub const MAX_SHEAR_DEG: f64 = 8.0;
pub const GAIN_BOUNDS: (f64, f64) = (0.9, 1.1);

/// Sampling ranges. Rotation and shear are symmetric around zero; translation
/// is a fraction of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub translate: f64,
    pub shear_deg: f64,
    pub gain: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotation_deg: MAX_ROTATION_DEG,
            scale: SCALE_BOUNDS,
            translate: MAX_TRANSLATE,
            shear_deg: MAX_SHEAR_DEG,
            gain: GAIN_BOUNDS,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            translate: 0.0,
            shear_deg: 0.0,
            gain: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, lo: f64, hi: f64| v.is_finite() && v >= lo && v <= hi;
        let ok = within(self.rotation_deg, 0.0, MAX_ROTATION_DEG)
            && within(self.translate, 0.0, MAX_TRANSLATE)
            && within(self.shear_deg, 0.0, MAX_SHEAR_DEG)
            && within(self.scale.0, SCALE_BOUNDS.0, self.scale.1)
            && within(self.scale.1, self.scale.0, SCALE_BOUNDS.1)
            && within(self.gain.0, GAIN_BOUNDS.0, self.gain.1)
            && within(self.gain.1, self.gain.0, GAIN_BOUNDS.1);
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "augmentation policy {self:?} exceeds bounds: rotation <= {MAX_ROTATION_DEG}, scale in {SCALE_BOUNDS:?}, \
                 translate <= {MAX_TRANSLATE}, shear <= {MAX_SHEAR_DEG}, gain in {GAIN_BOUNDS:?}"
            )))
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentPolicy::identity()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> SpatialTransform {
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let range = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        SpatialTransform {
            rotation_deg: sym(rng, self.rotation_deg),
            scale: range(rng, self.scale),
            tx: sym(rng, self.translate),
            ty: sym(rng, self.translate),
            shear_deg: sym(rng, self.shear_deg),
            gain: range(rng, self.gain),
        }
    }
}

/// A concrete transform about the image centre. Translations are fractions of
/// the image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub rotation_deg: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub shear_deg: f64,
    pub gain: f64,
}

impl SpatialTransform {
    pub fn identity() -> Self {
        SpatialTransform {
            rotation_deg: 0.0,
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
            shear_deg: 0.0,
            gain: 1.0,
        }
    }

    /// Forward 2x2 matrix `R * Sh * S` acting on centred pixel coordinates.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let sc = self.scale;
        // R * [[1, k], [0, 1]] * sc
        [[c * sc, (c * k - s) * sc], [s * sc, (s * k + c) * sc]]
    }
}

fn bilinear(frame: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = frame[y0 * w + x0] * (1.0 - fx) + frame[y0 * w + x1] * fx;
    let bot = frame[y1 * w + x0] * (1.0 - fx) + frame[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Apply `t` to every frame of a `[C,T,H,W]` clip with bilinear resampling
/// (edge-clamped), scale intensities by the gain and clip to `[0, 1]`.
pub fn apply_transform(video: &Tensor, t: &SpatialTransform) -> Result<Tensor> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!("expected [C,T,H,W], got {s:?}")));
    }
    if *t == SpatialTransform::identity() {
        return Ok(video.clone());
    }
    let (h, w) = (s[2], s[3]);
    let m = t.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-12 {
        return Err(Error::contract(format!("singular transform {t:?}")));
    }
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (dy, dx) = (t.ty * h as f64, t.tx * w as f64);
    // Source coordinate of every output pixel, shared by all frames.
    let mut src = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (u, v) = (j as f64 - cx - dx, i as f64 - cy - dy);
            let sx = inv[0][0] * u + inv[0][1] * v + cx;
            let sy = inv[1][0] * u + inv[1][1] * v + cy;
            src.push((sy, sx));
        }
    }
    let mut out = Vec::with_capacity(video.len());
    for frame in video.data().chunks(h * w) {
        out.extend(src.iter().map(|&(sy, sx)| (bilinear(frame, h, w, sy, sx) * t.gain).clamp(0.0, 1.0)));
    }
    Tensor::new(s.to_vec(), out)
}

/// Sample one transform from `policy` with `seed` and apply it to the clip.
pub fn augment_video(video: &Tensor, policy: &AugmentPolicy, seed: u64) -> Result<Tensor> {
    policy.validate()?;
    if policy.is_identity() {
        return Ok(video.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_transform(video, &policy.sample(&mut rng))
}
