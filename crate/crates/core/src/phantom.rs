//! Synthetic short-axis cine phantoms with analytically known wall thickness.
//!
//! Each frame is an annulus: a bright blood pool of radius `inner(f)` wrapped
//! by mid-grey myocardium whose thickness depends on the angular sector, on a
//! dark background. Thickness and cavity radius follow one cosine harmonic
//! over the cycle. Labels are computed from the model, not from the pixels.

pub mod io;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RwtMatrix;

pub const REGION_COUNT: usize = 6;
/// Angular width of the linear blend between neighbouring sectors, per side.
pub const BLEND_DEG: f64 = 5.0;
/// Polar angle (degrees, counter-clockwise from +x, y up) of the first
/// sector's midpoint; sectors follow counter-clockwise every 60°.
pub const FIRST_SECTOR_MID_DEG: f64 = 210.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intensities {
    pub blood: f64,
    pub myocardium: f64,
    pub background: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            blood: 0.85,
            myocardium: 0.4,
            background: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub frames: usize,
    /// `(x, y)` in pixel coordinates; pixel `(row, col)` covers
    /// `[col, col+1) × [row, row+1)`.
    pub center: (f64, f64),
    pub inner_radius: f64,
    pub base_thickness: [f64; REGION_COUNT],
    pub amplitude: [f64; REGION_COUNT],
    /// Fraction of a cycle added to the cosine argument.
    pub phase: f64,
    /// Peak reduction of the cavity radius at maximal thickening.
    pub contraction: f64,
    pub levels: Intensities,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 80,
            frames: 20,
            center: (40.0, 40.0),
            inner_radius: 15.0,
            base_thickness: [10.0; REGION_COUNT],
            amplitude: [4.0; REGION_COUNT],
            phase: 0.0,
            contraction: 2.0,
            levels: Intensities::default(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Position in the cycle: 0 at rest, 1 at peak thickening.
    pub fn activation(&self, frame: usize) -> f64 {
        let angle = 2.0 * PI * frame as f64 / self.frames as f64 + 2.0 * PI * self.phase;
        (1.0 - angle.cos()) / 2.0
    }

    /// Thickness in pixels of `region` at zero-based `frame`.
    pub fn thickness(&self, region: usize, frame: usize) -> f64 {
        self.base_thickness[region] + self.amplitude[region] * self.activation(frame)
    }

    pub fn inner_at(&self, frame: usize) -> f64 {
        self.inner_radius - self.contraction * self.activation(frame)
    }

    fn max_outer_radius(&self) -> f64 {
        (0..self.frames)
            .flat_map(|f| (0..REGION_COUNT).map(move |l| (f, l)))
            .map(|(f, l)| self.inner_at(f) + self.thickness(l, f))
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.image_size < 8 || self.frames == 0 {
            return bad("image_size must be ≥ 8 and frames ≥ 1".into());
        }
        let all_finite = [
            self.center.0,
            self.center.1,
            self.inner_radius,
            self.phase,
            self.contraction,
            self.noise_sigma,
        ]
        .iter()
        .chain(&self.base_thickness)
        .chain(&self.amplitude)
        .all(|v| v.is_finite());
        if !all_finite {
            return bad("non-finite field".into());
        }
        if self.inner_radius <= 0.0 {
            return bad(format!("inner radius {} must be positive", self.inner_radius));
        }
        if self.contraction < 0.0 || self.contraction >= self.inner_radius {
            return bad(format!(
                "contraction {} must lie in [0, inner radius)",
                self.contraction
            ));
        }
        if self.noise_sigma < 0.0 {
            return bad("noise sigma must be non-negative".into());
        }
        let half = self.image_size as f64 / 2.0;
        for l in 0..REGION_COUNT {
            let (w, a) = (self.base_thickness[l], self.amplitude[l]);
            if w <= 0.0 || w + a.min(0.0) <= 0.0 {
                return bad(format!("region {l}: thickness trajectory must stay positive"));
            }
            if w + a.max(0.0) + self.inner_radius + self.contraction >= half - 2.0 {
                return bad(format!(
                    "region {l}: annulus does not fit inside the image with a 2 px margin"
                ));
            }
        }
        let r = self.max_outer_radius();
        let (cx, cy) = self.center;
        let size = self.image_size as f64;
        if cx - r < 2.0 || cy - r < 2.0 || cx + r > size - 2.0 || cy + r > size - 2.0 {
            return bad(format!("annulus of radius {r:.2} at {:?} leaves the image", self.center));
        }
        let l = &self.levels;
        if [l.blood, l.myocardium, l.background]
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
            || !(l.blood > l.myocardium && l.myocardium > l.background)
        {
            return bad("intensities must satisfy 1 ≥ blood > myocardium > background ≥ 0".into());
        }
        Ok(())
    }

    /// Analytic labels: thickness / image size.
    pub fn labels(&self) -> RwtMatrix {
        let n = self.image_size as f64;
        let values = (0..self.frames)
            .flat_map(|f| (0..REGION_COUNT).map(move |l| (f, l)))
            .map(|(f, l)| self.thickness(l, f) / n)
            .collect();
        RwtMatrix::new(self.frames, REGION_COUNT, values).expect("frames ≥ 1")
    }

    /// Wall thickness at polar angle `deg` for `frame`, blending linearly
    /// across ±[`BLEND_DEG`] of every sector border.
    pub fn thickness_at_angle(&self, deg: f64, frame: usize) -> f64 {
        let w = |l: usize| self.thickness(l % REGION_COUNT, frame);
        let u = (deg - (FIRST_SECTOR_MID_DEG - 30.0)).rem_euclid(360.0);
        let l = ((u / 60.0) as usize).min(REGION_COUNT - 1);
        let local = u - 60.0 * l as f64;
        if local < BLEND_DEG {
            let t = (local + BLEND_DEG) / (2.0 * BLEND_DEG);
            w(l + REGION_COUNT - 1) * (1.0 - t) + w(l) * t
        } else if local > 60.0 - BLEND_DEG {
            let t = (local - (60.0 - BLEND_DEG)) / (2.0 * BLEND_DEG);
            w(l) * (1.0 - t) + w(l + 1) * t
        } else {
            w(l)
        }
    }

    fn intensity_at(&self, x: f64, y: f64, frame: usize, inner: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, self.center.1 - y);
        let r = dx.hypot(dy);
        if r < inner {
            return self.levels.blood;
        }
        let deg = dy.atan2(dx).to_degrees();
        if r < inner + self.thickness_at_angle(deg, frame) {
            self.levels.myocardium
        } else {
            self.levels.background
        }
    }

    /// Noise-free area-weighted rendering of one frame (row-major).
    pub fn render_clean(&self, frame: usize) -> Vec<f64> {
        const SUB: usize = 8;
        let n = self.image_size;
        let inner = self.inner_at(frame);
        let (w_min, w_max) = (0..REGION_COUNT)
            .map(|l| self.thickness(l, frame))
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), w| (lo.min(w), hi.max(w)));
        let mut img = vec![0.0; n * n];
        for row in 0..n {
            for col in 0..n {
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                let r = (x - self.center.0).hypot(y - self.center.1);
                // Every point of the pixel is within √2/2 of its centre.
                let v = if r < inner - 1.0 {
                    self.levels.blood
                } else if r > inner + 1.0 && r < inner + w_min - 1.0 {
                    self.levels.myocardium
                } else if r > inner + w_max + 1.0 {
                    self.levels.background
                } else {
                    let mut acc = 0.0;
                    for sy in 0..SUB {
                        for sx in 0..SUB {
                            let px = col as f64 + (sx as f64 + 0.5) / SUB as f64;
                            let py = row as f64 + (sy as f64 + 0.5) / SUB as f64;
                            acc += self.intensity_at(px, py, frame, inner);
                        }
                    }
                    acc / (SUB * SUB) as f64
                };
                img[row * n + col] = v;
            }
        }
        img
    }
}

/// One synthetic subject: frames, labels and the spec that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct CineSequence {
    pub subject_id: u32,
    /// `frames` images of `image_size²` intensities in `[0, 1]`.
    pub frames: Vec<Vec<f64>>,
    pub labels: RwtMatrix,
    pub spec: PhantomSpec,
}

impl CineSequence {
    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }
}

/// Renders every frame of `spec`, adds clamped Gaussian noise, and attaches
/// the analytic labels.
pub fn generate_subject(spec: &PhantomSpec, subject_id: u32) -> Result<CineSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidSpec(e.to_string()))?)
    } else {
        None
    };
    let frames = (0..spec.frames)
        .map(|f| {
            let mut img = spec.render_clean(f);
            if let Some(dist) = &noise {
                for v in &mut img {
                    *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            img
        })
        .collect();
    Ok(CineSequence {
        subject_id,
        frames,
        labels: spec.labels(),
        spec: spec.clone(),
    })
}

/// Closed interval `[lo, hi]` sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(Error::InvalidArgument(format!(
                "range `{name}` [{}, {}] is empty",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Sampling ranges for per-subject phantom parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomRanges {
    pub image_size: usize,
    pub frames: usize,
    pub inner_radius: Range,
    pub base_thickness: Range,
    pub amplitude: Range,
    pub noise_sigma: Range,
    pub contraction: Range,
    pub phase: Range,
    /// Centre offset from the image middle, per axis.
    pub center_jitter: Range,
    pub levels: Intensities,
}

impl Default for PhantomRanges {
    fn default() -> Self {
        PhantomRanges {
            image_size: 80,
            frames: 20,
            inner_radius: Range::new(12.0, 18.0),
            base_thickness: Range::new(6.0, 14.0),
            amplitude: Range::new(2.0, 6.0),
            noise_sigma: Range::new(0.02, 0.05),
            contraction: Range::new(1.0, 3.0),
            phase: Range::new(0.0, 0.2),
            center_jitter: Range::new(-1.5, 1.5),
            levels: Intensities::default(),
        }
    }
}

impl PhantomRanges {
    pub fn validate(&self) -> Result<()> {
        self.inner_radius.check("inner_radius")?;
        self.base_thickness.check("base_thickness")?;
        self.amplitude.check("amplitude")?;
        self.noise_sigma.check("noise_sigma")?;
        self.contraction.check("contraction")?;
        self.phase.check("phase")?;
        self.center_jitter.check("center_jitter")?;
        Ok(())
    }
}

/// Independent stream for subject `id` of dataset `seed`.
fn subject_seed(seed: u64, id: u32) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ (u64::from(id).wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MAX_DRAWS: usize = 10_000;

/// Draws a valid spec for subject `id`; invalid draws are discarded and
/// redrawn from the same stream.
pub fn draw_spec(ranges: &PhantomRanges, seed: u64, id: u32) -> Result<PhantomSpec> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(seed, id));
    let mid = ranges.image_size as f64 / 2.0;
    for _ in 0..MAX_DRAWS {
        let spec = PhantomSpec {
            image_size: ranges.image_size,
            frames: ranges.frames,
            center: (
                mid + ranges.center_jitter.sample(&mut rng),
                mid + ranges.center_jitter.sample(&mut rng),
            ),
            inner_radius: ranges.inner_radius.sample(&mut rng),
            base_thickness: std::array::from_fn(|_| ranges.base_thickness.sample(&mut rng)),
            amplitude: std::array::from_fn(|_| ranges.amplitude.sample(&mut rng)),
            phase: ranges.phase.sample(&mut rng),
            contraction: ranges.contraction.sample(&mut rng),
            levels: ranges.levels,
            noise_sigma: ranges.noise_sigma.sample(&mut rng),
            seed: rng.random(),
        };
        if spec.validate().is_ok() {
            return Ok(spec);
        }
    }
    Err(Error::InvalidArgument(
        "phantom ranges never produce a spec that fits the image".into(),
    ))
}

/// `n` subjects with sequential ids, each deterministic in `(seed, id)`.
pub fn generate_dataset(n: usize, seed: u64, ranges: &PhantomRanges) -> Result<Vec<CineSequence>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one subject".into()));
    }
    use rayon::prelude::*;
    (0..n as u32)
        .into_par_iter()
        .map(|id| generate_subject(&draw_spec(ranges, seed, id)?, id))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// Offset `⌊(in − out)/2⌋` on both axes.
    Center,
    /// Offsets drawn uniformly from `0..=in − out` on both axes.
    Random(u64),
    /// Explicit `(x, y)` offset.
    At(usize, usize),
}

/// Crops a square `out_size` window from a square `in_size` image.
pub fn augment_crop(image: &[f64], in_size: usize, out_size: usize, mode: CropMode) -> Result<Vec<f64>> {
    if image.len() != in_size * in_size {
        return Err(Error::shape(
            "augment_crop",
            format!("expected {in_size}×{in_size} image, got {} values", image.len()),
        ));
    }
    if out_size == 0 || out_size > in_size {
        return Err(Error::shape(
            "augment_crop",
            format!("cannot crop {out_size}×{out_size} from {in_size}×{in_size}"),
        ));
    }
    let slack = in_size - out_size;
    let (ox, oy) = match mode {
        CropMode::Center => (slack / 2, slack / 2),
        CropMode::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (rng.random_range(0..=slack), rng.random_range(0..=slack))
        }
        CropMode::At(x, y) => {
            if x > slack || y > slack {
                return Err(Error::shape("augment_crop", format!("offset ({x}, {y}) exceeds {slack}")));
            }
            (x, y)
        }
    };
    Ok(crop_at(image, in_size, out_size, ox, oy))
}

pub(crate) fn crop_at(image: &[f64], in_size: usize, out_size: usize, ox: usize, oy: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_size * out_size);
    for row in oy..oy + out_size {
        out.extend_from_slice(&image[row * in_size + ox..row * in_size + ox + out_size]);
    }
    out
}

fn bilinear(image: &[f64], size: usize, x: f64, y: f64) -> f64 {
    let fx = (x - 0.5).clamp(0.0, (size - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (size - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let at = |r: usize, c: usize| image[r * size + c];
    (at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx) * (1.0 - ty) + (at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx) * ty
}

/// Per-region wall thickness (pixels) measured by casting 360 rays from
/// `center` through a rendered frame.
///
/// Along each ray the cavity edge is where intensity first falls below the
/// blood/myocardium midpoint and the outer edge where it next falls below the
/// myocardium/background midpoint. Rays inside the sector-border blends are
/// skipped; the rest are averaged per sector.
pub fn measure_thickness(image: &[f64], size: usize, center: (f64, f64), levels: &Intensities) -> [f64; REGION_COUNT] {
    const STEP: f64 = 0.01;
    let inner_cut = (levels.blood + levels.myocardium) / 2.0;
    let outer_cut = (levels.myocardium + levels.background) / 2.0;
    let mut sums = [0.0; REGION_COUNT];
    let mut counts = [0usize; REGION_COUNT];
    let r_max = size as f64;
    for ray in 0..360 {
        let deg = ray as f64 + 0.5;
        let u = (deg - (FIRST_SECTOR_MID_DEG - 30.0)).rem_euclid(360.0);
        let l = ((u / 60.0) as usize).min(REGION_COUNT - 1);
        let local = u - 60.0 * l as f64;
        if local < BLEND_DEG + 1.0 || local > 60.0 - BLEND_DEG - 1.0 {
            continue;
        }
        let (c, s) = (deg.to_radians().cos(), deg.to_radians().sin());
        let sample = |r: f64| bilinear(image, size, center.0 + r * c, center.1 - r * s);
        let crossing = |from: f64, cut: f64| -> Option<f64> {
            let mut r = from;
            let mut prev = sample(r);
            while r < r_max {
                let next = sample(r + STEP);
                if prev >= cut && next < cut {
                    return Some(r + STEP * (prev - cut) / (prev - next));
                }
                prev = next;
                r += STEP;
            }
            None
        };
        if let Some(r_in) = crossing(0.0, inner_cut) {
            if let Some(r_out) = crossing(r_in, outer_cut) {
                sums[l] += r_out - r_in;
                counts[l] += 1;
            }
        }
    }
    std::array::from_fn(|l| if counts[l] > 0 { sums[l] / counts[l] as f64 } else { f64::NAN })
}
