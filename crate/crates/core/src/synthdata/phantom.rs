//! Pulsating-cavity phantom renderer and population sampler.
//!
//! Coordinates are normalized to `[-1, 1]` on both image axes. The cavity area
//! follows `A(t) = Amax * (1 - ef * (1 - cos(2 pi c t / T)) / 2)` with `c` the
//! number of heart cycles per clip, so the smallest rendered area is exactly
//! `Amax * (1 - ef)` whenever `T / (2c)` is a whole frame.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, report};
use crate::diffcore::Tensor;
use crate::{Error, Result};

pub const BACKGROUND: f64 = 0.08;
pub const MYOCARDIUM: f64 = 0.35;
pub const BLOOD: f64 = 0.90;

pub const LOW_EF_BELOW: f64 = 0.40;
pub const HYPERTROPHY_ABOVE: f64 = 0.17;
pub const DILATION_ABOVE: f64 = 1.08;

/// Maximal cavity radius at `chamber_scale = 1`.
pub const BASE_RADIUS: f64 = 0.42;

pub const EF_RANGE: (f64, f64) = (0.05, 0.85);
pub const WALL_RANGE: (f64, f64) = (0.05, 0.30);
pub const SCALE_RANGE: (f64, f64) = (0.6, 1.4);

/// Label names understood by the generator.
pub const FLAGS: [&str; 3] = ["low_ef", "hypertrophy", "dilation"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phenotype {
    /// Ejection-fraction analog, `1 - min_area / max_area`.
    pub ef: f64,
    pub wall_thickness: f64,
    pub chamber_scale: f64,
    pub heart_rate_cycles: f64,
    pub flags: BTreeMap<String, bool>,
}

impl Phenotype {
    /// Phenotype with flags derived from the thresholds
    /// `low_ef <=> ef < 0.40`, `hypertrophy <=> wall > 0.17`, `dilation <=> scale > 1.08`.
    pub fn new(ef: f64, wall_thickness: f64, chamber_scale: f64, heart_rate_cycles: f64) -> Result<Self> {
        let mut p = Phenotype {
            ef,
            wall_thickness,
            chamber_scale,
            heart_rate_cycles,
            flags: BTreeMap::new(),
        };
        p.validate_ranges()?;
        p.flags.insert("low_ef".into(), ef < LOW_EF_BELOW);
        p.flags.insert("hypertrophy".into(), wall_thickness > HYPERTROPHY_ABOVE);
        p.flags.insert("dilation".into(), chamber_scale > DILATION_ABOVE);
        Ok(p)
    }

    fn validate_ranges(&self) -> Result<()> {
        let check = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(Error::contract(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        check("ef", self.ef, EF_RANGE)?;
        check("wall_thickness", self.wall_thickness, WALL_RANGE)?;
        check("chamber_scale", self.chamber_scale, SCALE_RANGE)?;
        if !(self.heart_rate_cycles.is_finite() && self.heart_rate_cycles > 0.0) {
            return Err(Error::contract(format!(
                "heart_rate_cycles = {} must be positive",
                self.heart_rate_cycles
            )));
        }
        Ok(())
    }

    /// Range checks plus agreement between flags and continuous fields.
    pub fn validate(&self) -> Result<()> {
        self.validate_ranges()?;
        let expect = Phenotype::new(self.ef, self.wall_thickness, self.chamber_scale, self.heart_rate_cycles)?;
        if expect.flags != self.flags {
            return Err(Error::contract(format!(
                "flags {:?} disagree with continuous fields (expected {:?})",
                self.flags, expect.flags
            )));
        }
        Ok(())
    }

    pub fn flag(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewTag {
    TwoChamber,
    ThreeChamber,
    FourChamber,
    /// Short-axis slice; 0 is the most basal.
    ShortAxis(u8),
}

impl ViewTag {
    /// The five views rendered per study at desk scale.
    pub fn standard() -> Vec<ViewTag> {
        vec![
            ViewTag::TwoChamber,
            ViewTag::ThreeChamber,
            ViewTag::FourChamber,
            ViewTag::ShortAxis(0),
            ViewTag::ShortAxis(1),
        ]
    }

    pub fn is_short_axis(self) -> bool {
        matches!(self, ViewTag::ShortAxis(_))
    }

    /// `(axis ratio, rotation in radians, radius factor)` of the cavity outline.
    fn geometry(self) -> (f64, f64, f64) {
        match self {
            ViewTag::TwoChamber => (1.35, 0.0, 1.0),
            ViewTag::ThreeChamber => (1.3, PI / 6.0, 1.0),
            ViewTag::FourChamber => (1.4, -PI / 6.0, 1.0),
            ViewTag::ShortAxis(k) => (1.0, 0.0, 1.0 - 0.12 * f64::from(k.min(4))),
        }
    }
}

impl fmt::Display for ViewTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewTag::TwoChamber => f.write_str("2CH"),
            ViewTag::ThreeChamber => f.write_str("3CH"),
            ViewTag::FourChamber => f.write_str("4CH"),
            ViewTag::ShortAxis(k) => write!(f, "SAX{k}"),
        }
    }
}

impl FromStr for ViewTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2CH" => Ok(ViewTag::TwoChamber),
            "3CH" => Ok(ViewTag::ThreeChamber),
            "4CH" => Ok(ViewTag::FourChamber),
            _ => s
                .strip_prefix("SAX")
                .and_then(|k| k.parse::<u8>().ok())
                .map(ViewTag::ShortAxis)
                .ok_or_else(|| Error::contract(format!("unknown view tag `{s}`"))),
        }
    }
}

impl Serialize for ViewTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ViewTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    /// Sub-samples per pixel axis on shape boundaries.
    pub supersample: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            frames: 16,
            height: 32,
            width: 32,
            noise_sigma: 0.03,
            supersample: 8,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height < 4 || self.width < 4 || self.supersample == 0 {
            return Err(Error::Config(format!("degenerate render config {self:?}")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyVideo {
    pub view: ViewTag,
    /// `[1, T, H, W]` with values in `[0, 1]`.
    pub video: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub seed: u64,
    pub videos: Vec<StudyVideo>,
    pub report: Vec<String>,
    pub phenotype: Phenotype,
}

impl Study {
    pub fn label(&self, name: &str) -> Result<bool> {
        self.phenotype
            .flags
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown label `{name}` (have {:?})", FLAGS)))
    }
}

/// Cavity radius (circle-equivalent) at frame `t`.
fn cavity_radius(p: &Phenotype, t: usize, frames: usize) -> f64 {
    let r_max = BASE_RADIUS * p.chamber_scale;
    let phase = 2.0 * PI * p.heart_rate_cycles * t as f64 / frames as f64;
    let frac = 1.0 - p.ef * (1.0 - phase.cos()) / 2.0;
    r_max * frac.sqrt()
}

/// Fraction of the pixel covered by the ellipse `(x/a)^2 + (y/b)^2 < 1`,
/// after rotating by `-rot`. Only boundary pixels are supersampled.
fn ellipse_coverage(cx: f64, cy: f64, half: f64, a: f64, b: f64, rot: (f64, f64), ss: usize) -> f64 {
    let (s, c) = rot;
    let rho = |x: f64, y: f64| {
        let u = c * x + s * y;
        let v = -s * x + c * y;
        ((u / a).powi(2) + (v / b).powi(2)).sqrt()
    };
    let margin = half * std::f64::consts::SQRT_2 / a.min(b);
    let r0 = rho(cx, cy);
    if r0 + margin < 1.0 {
        return 1.0;
    }
    if r0 - margin > 1.0 {
        return 0.0;
    }
    let step = 2.0 * half / ss as f64;
    let mut inside = 0usize;
    for i in 0..ss {
        let y = cy - half + (i as f64 + 0.5) * step;
        for j in 0..ss {
            let x = cx - half + (j as f64 + 0.5) * step;
            if rho(x, y) < 1.0 {
                inside += 1;
            }
        }
    }
    inside as f64 / (ss * ss) as f64
}

/// Noise-free `[1, T, H, W]` rendering of one view.
pub fn render_view(p: &Phenotype, view: ViewTag, cfg: &RenderConfig) -> Result<Tensor> {
    p.validate_ranges()?;
    cfg.validate()?;
    let (ratio, angle, factor) = view.geometry();
    let rot = angle.sin_cos();
    let (h, w) = (cfg.height, cfg.width);
    let half = 1.0 / w.max(h) as f64;
    let (px, py) = (2.0 / w as f64, 2.0 / h as f64);
    let mut out = Vec::with_capacity(cfg.frames * h * w);
    for t in 0..cfg.frames {
        let r = cavity_radius(p, t, cfg.frames) * factor;
        let (a_in, b_in) = (r / ratio, r * ratio);
        let wall = p.wall_thickness * factor;
        let (a_out, b_out) = (a_in + wall, b_in + wall);
        for i in 0..h {
            let cy = -1.0 + (i as f64 + 0.5) * py;
            for j in 0..w {
                let cx = -1.0 + (j as f64 + 0.5) * px;
                let c_out = ellipse_coverage(cx, cy, half, a_out, b_out, rot, cfg.supersample);
                let c_in = if c_out > 0.0 {
                    ellipse_coverage(cx, cy, half, a_in, b_in, rot, cfg.supersample)
                } else {
                    0.0
                };
                out.push(BACKGROUND * (1.0 - c_out) + MYOCARDIUM * (c_out - c_in) + BLOOD * c_in);
            }
        }
    }
    Tensor::new(vec![1, cfg.frames, h, w], out)
}

/// Cavity area per frame in pixels, counted from intensities:
/// `sum max(0, I - myo) / (blood - myo)`.
pub fn cavity_areas(video: &Tensor) -> Vec<f64> {
    let s = video.shape();
    let (t, hw) = (s[1], s[2] * s[3]);
    (0..t)
        .map(|f| {
            video.data()[f * hw..(f + 1) * hw]
                .iter()
                .map(|&v| (v - MYOCARDIUM).max(0.0) / (BLOOD - MYOCARDIUM))
                .sum()
        })
        .collect()
}

/// Ejection-fraction estimate from a noise-free rendering.
pub fn area_oracle_ef(video: &Tensor) -> f64 {
    let areas = cavity_areas(video);
    let max = areas.iter().copied().fold(f64::MIN, f64::max);
    let min = areas.iter().copied().fold(f64::MAX, f64::min);
    1.0 - min / max
}

/// Noisy copy clipped to `[0, 1]` and rounded to f32, the storage precision.
fn add_noise(video: &Tensor, sigma: f64, rng: &mut impl Rng) -> Tensor {
    if sigma == 0.0 {
        return video.map(|v| f64::from(v.clamp(0.0, 1.0) as f32));
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let data = video
        .data()
        .iter()
        .map(|&v| f64::from((v + normal.sample(rng)).clamp(0.0, 1.0) as f32))
        .collect();
    Tensor::new(video.shape().to_vec(), data).expect("same shape")
}

/// Study id for a per-study seed.
pub fn study_id_for(seed: u64) -> String {
    format!("s{:012x}", seed >> 16)
}

/// Render every requested view with pixel noise and write a report.
pub fn generate_study(p: &Phenotype, views: &[ViewTag], seed: u64, cfg: &RenderConfig) -> Result<Study> {
    if views.is_empty() {
        return Err(Error::contract("a study needs at least one view"));
    }
    p.validate()?;
    let mut videos = Vec::with_capacity(views.len());
    for (k, &view) in views.iter().enumerate() {
        let clean = render_view(p, view, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, k as u64));
        videos.push(StudyVideo {
            view,
            video: add_noise(&clean, cfg.noise_sigma, &mut rng),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0));
    Ok(Study {
        study_id: study_id_for(seed),
        seed,
        videos,
        report: report::write_report(p, &mut rng),
        phenotype: p.clone(),
    })
}

/// Flag prevalences for population sampling; unset flags default to
/// `low_ef 0.4, hypertrophy 0.2, dilation 0.2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prevalence(pub BTreeMap<String, f64>);

impl Default for Prevalence {
    fn default() -> Self {
        Prevalence(
            [("low_ef", 0.4), ("hypertrophy", 0.2), ("dilation", 0.2)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        )
    }
}

impl Prevalence {
    /// Defaults overridden by `overrides`; rejects unknown labels and values outside `[0, 1]`.
    pub fn with_overrides(overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let mut p = Prevalence::default();
        for (k, &v) in overrides {
            if !FLAGS.contains(&k.as_str()) {
                return Err(Error::contract(format!("unknown label `{k}` (expected one of {FLAGS:?})")));
            }
            p.0.insert(k.clone(), v);
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &v) in &self.0 {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!("prevalence of `{k}` = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> f64 {
        self.0.get(name).copied().unwrap_or(0.0)
    }
}

/// Draw a phenotype: flags first, then continuous fields conditional on them.
///
/// `ef`: low `U[0.15, 0.40)`, otherwise `U[0.40, 0.75]`; wall: thick
/// `U[0.20, 0.28]`, otherwise `U[0.10, 0.14]`; scale: dilated `U[1.12, 1.25]`,
/// otherwise `U[0.80, 1.00]`; one or two heart cycles per clip.
pub fn sample_phenotype(prev: &Prevalence, rng: &mut impl Rng) -> Phenotype {
    let low_ef = rng.random_bool(prev.get("low_ef"));
    let thick = rng.random_bool(prev.get("hypertrophy"));
    let dilated = rng.random_bool(prev.get("dilation"));
    let ef = if low_ef {
        rng.random_range(0.15..0.40)
    } else {
        rng.random_range(0.40..=0.75)
    };
    let wall = if thick {
        rng.random_range(0.20..=0.28)
    } else {
        rng.random_range(0.10..=0.14)
    };
    let scale = if dilated {
        rng.random_range(1.12..=1.25)
    } else {
        rng.random_range(0.80..=1.0)
    };
    let cycles = if rng.random_bool(0.5) { 1.0 } else { 2.0 };
    Phenotype::new(ef, wall, scale, cycles).expect("sampled within range")
}

/// `n` studies, each seeded independently from `(seed, index)`.
pub fn sample_population(n: usize, seed: u64, prev: &Prevalence, cfg: &RenderConfig) -> Result<Vec<Study>> {
    prev.validate()?;
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let s = derive_seed(seed, 0, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let p = sample_phenotype(prev, &mut rng);
            generate_study(&p, &ViewTag::standard(), s, cfg)
        })
        .collect()
}
