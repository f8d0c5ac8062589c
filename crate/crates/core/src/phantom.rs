//! Deterministic synthetic "brain" phantoms with exact ground truth.
//!
//! Each frame holds an elliptical brain with layered internal texture inside
//! a bright fluid halo, sitting in a larger body region with distractor
//! blobs and arcs. Regimes add horizontal streak artifacts, extra
//! distractors, or an abnormal brain (lobed boundary, enlarged ventricle).
//! Corruptions only touch intensities; the mask is the rasterized brain.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::par;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Axial,
    Coronal,
    Sagittal,
}

impl ViewTag {
    pub const ALL: [ViewTag; 3] = [ViewTag::Axial, ViewTag::Coronal, ViewTag::Sagittal];

    /// Range of minor/major axis ratios for this view.
    fn aspect_range(self) -> (f64, f64) {
        match self {
            ViewTag::Axial => (0.80, 1.0),
            ViewTag::Coronal => (0.65, 0.85),
            ViewTag::Sagittal => (0.50, 0.70),
        }
    }

    /// Maximum deviation of the major axis from horizontal, radians.
    fn rotation_spread(self) -> f64 {
        match self {
            ViewTag::Axial => PI,
            ViewTag::Coronal => PI / 6.0,
            ViewTag::Sagittal => PI / 9.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Clean,
    Artifact,
    Distractor,
    Abnormal,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::Clean,
        Regime::Artifact,
        Regime::Distractor,
        Regime::Abnormal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Clean => "clean",
            Regime::Artifact => "artifact",
            Regime::Distractor => "distractor",
            Regime::Abnormal => "abnormal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Relative frequency of each regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeWeights {
    pub clean: f64,
    pub artifact: f64,
    pub distractor: f64,
    pub abnormal: f64,
}

impl Default for RegimeWeights {
    fn default() -> Self {
        Self {
            clean: 1.0,
            artifact: 1.0,
            distractor: 1.0,
            abnormal: 1.0,
        }
    }
}

impl RegimeWeights {
    fn get(&self, r: Regime) -> f64 {
        match r {
            Regime::Clean => self.clean,
            Regime::Artifact => self.artifact,
            Regime::Distractor => self.distractor,
            Regime::Abnormal => self.abnormal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub count: usize,
    pub frame_size: usize,
    pub regimes: RegimeWeights,
    /// Brain axis lengths (diameters) as fractions of the frame side.
    pub brain_axis_range: [f64; 2],
    /// Distractor count range in the `distractor` regime; other regimes
    /// use the low end.
    pub distractor_range: [usize; 2],
    pub artifact_amplitude_max: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 150,
            frame_size: 128,
            regimes: RegimeWeights::default(),
            brain_axis_range: [0.12, 0.30],
            distractor_range: [2, 6],
            artifact_amplitude_max: 0.5,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("phantom count must be positive"));
        }
        if self.frame_size < 16 {
            return Err(Error::config(format!(
                "frame_size must be at least 16, got {}",
                self.frame_size
            )));
        }
        let [lo, hi] = self.brain_axis_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.4) {
            return Err(Error::config(format!(
                "brain_axis_range {:?} must satisfy 0 < lo <= hi <= 0.4",
                self.brain_axis_range
            )));
        }
        let [dlo, dhi] = self.distractor_range;
        if dlo > dhi {
            return Err(Error::config("distractor_range must be ordered"));
        }
        let w = &self.regimes;
        let weights = [w.clean, w.artifact, w.distractor, w.abnormal];
        if weights.iter().any(|&x| !(x >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("regime weights must be non-negative, not all zero"));
        }
        if !(0.0..=1.0).contains(&self.artifact_amplitude_max) {
            return Err(Error::config("artifact_amplitude_max must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Ground-truth geometry of one phantom brain, in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrainParams {
    pub center_row: f64,
    pub center_col: f64,
    /// Semi-axis along the rotated horizontal direction.
    pub semi_major: f64,
    pub semi_minor: f64,
    pub rotation: f64,
    /// Boundary lobes `(harmonic, amplitude, phase)`; empty for normal brains.
    pub lobes: Vec<(u32, f64, f64)>,
}

impl BrainParams {
    /// Radial boundary scale at polar angle `theta` (1 for a plain ellipse).
    fn boundary(&self, theta: f64) -> f64 {
        1.0 + self
            .lobes
            .iter()
            .map(|&(k, a, ph)| a * (k as f64 * theta + ph).cos())
            .sum::<f64>()
    }

    /// Normalized elliptical radius and angle of a pixel center.
    fn polar(&self, row: f64, col: f64) -> (f64, f64) {
        let (dx, dy) = (col - self.center_col, row - self.center_row);
        let (s, c) = self.rotation.sin_cos();
        let u = (dx * c + dy * s) / self.semi_major;
        let v = (-dx * s + dy * c) / self.semi_minor;
        ((u * u + v * v).sqrt(), v.atan2(u))
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        if self.lobes.is_empty() {
            return rasterize_ellipse(
                (self.center_row, self.center_col),
                (self.semi_major, self.semi_minor),
                self.rotation,
                (height, width),
            );
        }
        Mask::from_fn(height, width, |r, c| {
            let (rho, theta) = self.polar(r as f64, c as f64);
            rho <= self.boundary(theta)
        })
    }
}

/// Pixels whose centers `(row, col)` satisfy the rotated-ellipse inequality.
///
/// `axes.0` is the semi-axis along the direction at angle `rotation` from
/// the column axis, `axes.1` the perpendicular one.
pub fn rasterize_ellipse(
    center: (f64, f64),
    axes: (f64, f64),
    rotation: f64,
    frame: (usize, usize),
) -> Mask {
    assert!(axes.0 > 0.0 && axes.1 > 0.0, "ellipse axes must be positive");
    let (s, c) = rotation.sin_cos();
    Mask::from_fn(frame.0, frame.1, |r, col| {
        let (dx, dy) = (col as f64 - center.1, r as f64 - center.0);
        let u = (dx * c + dy * s) / axes.0;
        let v = (-dx * s + dy * c) / axes.1;
        u * u + v * v <= 1.0
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub view: ViewTag,
    pub regime: Regime,
    pub split: Split,
    pub brain: BrainParams,
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub view_tag: ViewTag,
    pub regime: Regime,
    pub split: Split,
    pub brain: BrainParams,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Generates the full dataset for `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<Vec<SegSample>> {
    spec.validate()?;
    let regimes = assign_regimes(spec);
    let splits = assign_splits(spec, &regimes);
    let samples = par::map_range(spec.count, |i| {
        let id = format!("ph{i:04}");
        let view = ViewTag::ALL[i % 3];
        let mut r = rng::stream(spec.seed, &format!("phantom/{id}"));
        let (image, mask, brain) = render(spec, regimes[i], view, &mut r);
        SegSample {
            id,
            image,
            mask,
            view,
            regime: regimes[i],
            split: splits[i],
            brain,
        }
    });
    Ok(samples)
}

/// Largest-remainder apportionment of `total` over `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

fn assign_regimes(spec: &PhantomSpec) -> Vec<Regime> {
    let weights: Vec<f64> = Regime::ALL.iter().map(|&r| spec.regimes.get(r)).collect();
    let counts = apportion(spec.count, &weights);
    let mut regimes: Vec<Regime> = Regime::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&r, &n)| std::iter::repeat_n(r, n))
        .collect();
    regimes.shuffle(&mut rng::stream(spec.seed, "phantom/regimes"));
    regimes
}

/// 4:1 train/test split, stratified by regime, ordered within each regime by
/// a hash of the sample id.
fn assign_splits(spec: &PhantomSpec, regimes: &[Regime]) -> Vec<Split> {
    let n_test = spec.count / 5;
    let per_regime: Vec<f64> = Regime::ALL
        .iter()
        .map(|&r| regimes.iter().filter(|&&x| x == r).count() as f64)
        .collect();
    let test_counts = apportion(n_test, &per_regime);
    let mut splits = vec![Split::Train; spec.count];
    for (ri, &r) in Regime::ALL.iter().enumerate() {
        let mut members: Vec<(u64, usize)> = (0..spec.count)
            .filter(|&i| regimes[i] == r)
            .map(|i| (rng::derive_seed(spec.seed, &format!("split/ph{i:04}")), i))
            .collect();
        members.sort_unstable();
        for &(_, i) in members.iter().take(test_counts[ri]) {
            splits[i] = Split::Test;
        }
    }
    splits
}

fn uniform(r: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        r.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Smooth low-frequency field in roughly `[-1, 1]`.
struct Field {
    terms: Vec<(f64, f64, f64)>,
}

impl Field {
    fn new(r: &mut Rng, size: f64) -> Self {
        let terms = (0..3)
            .map(|_| {
                let freq = uniform(r, 0.5, 2.0) * TAU / size;
                let angle = uniform(r, 0.0, TAU);
                (freq * angle.cos(), freq * angle.sin(), uniform(r, 0.0, TAU))
            })
            .collect();
        Self { terms }
    }

    fn at(&self, row: f64, col: f64) -> f64 {
        self.terms
            .iter()
            .map(|(fr, fc, ph)| (fr * row + fc * col + ph).sin())
            .sum::<f64>()
            / self.terms.len() as f64
    }
}

/// Soft inside-ness of a rotated ellipse, with a one-pixel ramp.
fn soft_ellipse(row: f64, col: f64, cr: f64, cc: f64, a: f64, b: f64, rot: f64) -> f64 {
    let (s, c) = rot.sin_cos();
    let (dx, dy) = (col - cc, row - cr);
    let u = (dx * c + dy * s) / a;
    let v = (-dx * s + dy * c) / b;
    let rho = (u * u + v * v).sqrt();
    ((1.0 - rho) * a.min(b) + 0.5).clamp(0.0, 1.0)
}

enum Distractor {
    Blob {
        row: f64,
        col: f64,
        a: f64,
        b: f64,
        rot: f64,
        level: f64,
    },
    Arc {
        row: f64,
        col: f64,
        radius: f64,
        thickness: f64,
        start: f64,
        span: f64,
        level: f64,
    },
}

impl Distractor {
    fn coverage(&self, row: f64, col: f64) -> f64 {
        match *self {
            Distractor::Blob {
                row: cr,
                col: cc,
                a,
                b,
                rot,
                ..
            } => soft_ellipse(row, col, cr, cc, a, b, rot),
            Distractor::Arc {
                row: cr,
                col: cc,
                radius,
                thickness,
                start,
                span,
                ..
            } => {
                let (dy, dx) = (row - cr, col - cc);
                let dist = (dx * dx + dy * dy).sqrt();
                let ang = (dy.atan2(dx) - start).rem_euclid(TAU);
                if ang > span {
                    return 0.0;
                }
                (thickness / 2.0 - (dist - radius).abs() + 0.5).clamp(0.0, 1.0)
            }
        }
    }

    fn level(&self) -> f64 {
        match *self {
            Distractor::Blob { level, .. } | Distractor::Arc { level, .. } => level,
        }
    }
}

fn render(
    spec: &PhantomSpec,
    regime: Regime,
    view: ViewTag,
    r: &mut Rng,
) -> (Image, Mask, BrainParams) {
    let size = spec.frame_size as f64;
    let n = spec.frame_size;

    // brain geometry
    let [axis_lo, axis_hi] = spec.brain_axis_range;
    let (asp_lo, asp_hi) = view.aspect_range();
    let major = uniform(r, axis_lo + (axis_hi - axis_lo) / 4.0, axis_hi) * size;
    let minor = (major * uniform(r, asp_lo, asp_hi)).max(axis_lo * size);
    let spread = view.rotation_spread();
    let rotation = uniform(r, -spread, spread);
    let margin = 0.5 * major + 0.06 * size;
    let center_row = uniform(r, margin, size - 1.0 - margin);
    let center_col = uniform(r, margin, size - 1.0 - margin);
    let lobes = if regime == Regime::Abnormal {
        let count = r.gen_range(2..=3);
        (0..count)
            .map(|_| (r.gen_range(2..=5u32), uniform(r, 0.06, 0.12), uniform(r, 0.0, TAU)))
            .collect()
    } else {
        Vec::new()
    };
    let brain = BrainParams {
        center_row,
        center_col,
        semi_major: major / 2.0,
        semi_minor: minor / 2.0,
        rotation,
        lobes,
    };
    let mask = brain.rasterize(n, n);

    // intensities
    let bands = uniform(r, 2.5, 4.5);
    let band_phase = uniform(r, 0.0, TAU);
    let brain_level = uniform(r, 0.45, 0.55);
    let halo_scale = uniform(r, 1.35, 1.6);
    let fluid_level = uniform(r, 0.8, 0.9);
    let body = (
        size / 2.0 + uniform(r, -0.05, 0.05) * size,
        size / 2.0 + uniform(r, -0.05, 0.05) * size,
        uniform(r, 0.42, 0.5) * size,
        uniform(r, 0.38, 0.48) * size,
        uniform(r, -0.3, 0.3),
    );
    let body_level = uniform(r, 0.25, 0.35);
    let body_field = Field::new(r, size);
    let ventricle = (regime == Regime::Abnormal).then(|| {
        (
            uniform(r, 0.3, 0.45),
            uniform(r, 0.2, 0.3),
            uniform(r, -0.25, 0.25),
            uniform(r, -0.15, 0.15),
        )
    });

    let n_distractors = if regime == Regime::Distractor {
        r.gen_range(spec.distractor_range[0].max(4)..=spec.distractor_range[1].max(4))
    } else {
        spec.distractor_range[0]
    };
    let bright = regime == Regime::Distractor;
    let halo_extent = brain.semi_major.max(brain.semi_minor) * halo_scale * 1.15;
    let mut distractors = Vec::new();
    let mut attempts = 0;
    while distractors.len() < n_distractors && attempts < 200 {
        attempts += 1;
        let row = uniform(r, 0.08, 0.92) * size;
        let col = uniform(r, 0.08, 0.92) * size;
        let level = if bright {
            uniform(r, 0.45, 0.85)
        } else {
            uniform(r, 0.4, 0.65)
        };
        let d = if r.gen_bool(0.6) {
            let a = uniform(r, 0.03, 0.09) * size;
            let b = a * uniform(r, 0.4, 1.0);
            Distractor::Blob {
                row,
                col,
                a,
                b,
                rot: uniform(r, 0.0, PI),
                level,
            }
        } else {
            Distractor::Arc {
                row,
                col,
                radius: uniform(r, 0.05, 0.12) * size,
                thickness: uniform(r, 1.5, 3.5),
                start: uniform(r, 0.0, TAU),
                span: uniform(r, PI / 3.0, 1.2 * PI),
                level,
            }
        };
        let reach = match d {
            Distractor::Blob { a, .. } => a,
            Distractor::Arc {
                radius, thickness, ..
            } => radius + thickness,
        };
        let dist = ((row - center_row).powi(2) + (col - center_col).powi(2)).sqrt();
        if dist > halo_extent + reach + 2.0 {
            distractors.push(d);
        }
    }

    let mut img = Image::filled(n, n, 0.0);
    for row in 0..n {
        for col in 0..n {
            let (rf, cf) = (row as f64, col as f64);
            let mut v = 0.05;
            let body_cov = soft_ellipse(rf, cf, body.0, body.1, body.2, body.3, body.4);
            v += body_cov * (body_level + 0.08 * body_field.at(rf, cf));
            for d in &distractors {
                let cov = d.coverage(rf, cf);
                v += cov * (d.level() - v);
            }
            let halo = soft_ellipse(
                rf,
                cf,
                center_row,
                center_col,
                brain.semi_major * halo_scale,
                brain.semi_minor * halo_scale,
                rotation,
            );
            v += halo * (fluid_level - v);
            if mask.get(row, col) {
                let (rho, theta) = brain.polar(rf, cf);
                let depth = rho / brain.boundary(theta);
                let mut b = brain_level + 0.12 * (TAU * bands * depth + band_phase).sin();
                if let Some((va, vb, vr, vc)) = ventricle {
                    let vr_c = center_row + vr * brain.semi_minor;
                    let vc_c = center_col + vc * brain.semi_major;
                    let cov = soft_ellipse(
                        rf,
                        cf,
                        vr_c,
                        vc_c,
                        va * brain.semi_major,
                        vb * brain.semi_minor,
                        rotation,
                    );
                    b += cov * (fluid_level - b);
                }
                v = b;
            }
            img.set(row, col, v);
        }
    }

    if regime == Regime::Artifact {
        add_streaks(&mut img, spec.artifact_amplitude_max, r);
    }
    for v in img.data_mut() {
        // triangular noise, sd ≈ 0.02
        *v += 0.035 * (r.gen::<f64>() - r.gen::<f64>());
    }
    normalize_unit(&mut img);
    (img, mask, brain)
}

/// Additive sinusoidal horizontal bands over a few row ranges.
fn add_streaks(img: &mut Image, max_amp: f64, r: &mut Rng) {
    let n = img.height();
    let bands = r.gen_range(1..=3);
    for _ in 0..bands {
        let amp = uniform(r, 0.3 * max_amp, max_amp);
        let period = uniform(r, 4.0, 12.0);
        let phase = uniform(r, 0.0, TAU);
        let height = ((uniform(r, 0.1, 0.3) * n as f64) as usize).max(1);
        let top = r.gen_range(0..n.saturating_sub(height).max(1));
        for row in top..(top + height).min(n) {
            let shift = amp * (TAU * row as f64 / period + phase).sin();
            for col in 0..img.width() {
                let v = img.get(row, col);
                img.set(row, col, v + shift);
            }
        }
    }
}

fn normalize_unit(img: &mut Image) {
    let (lo, hi) = img.min_max();
    let span = hi - lo;
    for v in img.data_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Writes `<id>_img.pgm`, `<id>_mask.pgm` and `manifest.jsonl` into `dir`.
pub fn write_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    for s in samples {
        s.image.write_pgm(&dir.join(format!("{}_img.pgm", s.id)))?;
        s.mask.write_pgm(&dir.join(format!("{}_mask.pgm", s.id)))?;
        let rec = ManifestRecord {
            id: s.id.clone(),
            view_tag: s.view,
            regime: s.regime,
            split: s.split,
            brain: s.brain.clone(),
        };
        serde_json::to_writer(&mut manifest, &rec).map_err(|e| Error::format(e.to_string()))?;
        manifest.write_all(b"\n")?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let file = fs::File::open(dir.join(MANIFEST_FILE))?;
    let mut samples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{MANIFEST_FILE}: {e}")))?;
        let image = Image::read_pgm(&dir.join(format!("{}_img.pgm", rec.id)))?;
        let mask = Mask::read_pgm(&dir.join(format!("{}_mask.pgm", rec.id)))?;
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(Error::format(format!("{}: image and mask sizes differ", rec.id)));
        }
        samples.push(SegSample {
            id: rec.id,
            image,
            mask,
            view: rec.view_tag,
            regime: rec.regime,
            split: rec.split,
            brain: rec.brain,
        });
    }
    Ok(samples)
}

pub fn split_of(samples: &[SegSample], split: Split) -> Vec<SegSample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(count: usize, frame: usize) -> PhantomSpec {
        PhantomSpec {
            seed: 42,
            count,
            frame_size: frame,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate(&spec(12, 64)).unwrap();
        let b = generate(&spec(12, 64)).unwrap();
        assert_eq!(a, b);
        let c = generate(&PhantomSpec { seed: 43, ..spec(12, 64) }).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn default_split_is_120_30() {
        let s = spec(150, 32);
        let samples = generate(&s).unwrap();
        let test = samples.iter().filter(|x| x.split == Split::Test).count();
        assert_eq!((150 - test, test), (120, 30));
        for r in Regime::ALL {
            let n = samples.iter().filter(|x| x.regime == r).count();
            let t = samples
                .iter()
                .filter(|x| x.regime == r && x.split == Split::Test)
                .count();
            assert!((37..=38).contains(&n), "{r:?}: {n}");
            assert!((7..=8).contains(&t), "{r:?}: {t}");
        }
    }

    #[test]
    fn zero_count_is_an_error() {
        assert!(generate(&spec(0, 64)).is_err());
    }

    #[test]
    fn images_are_unit_range_and_masks_match_geometry() {
        for s in generate(&spec(16, 64)).unwrap() {
            let (lo, hi) = s.image.min_max();
            assert_eq!((lo, hi), (0.0, 1.0));
            assert_eq!(s.mask, s.brain.rasterize(64, 64));
            assert!(!s.mask.is_empty_mask());
        }
    }

    #[test]
    fn circle_area_close_to_analytic() {
        for r in [10.0, 13.7, 20.0, 31.0] {
            let m = rasterize_ellipse((50.3, 49.8), (r, r), 0.0, (101, 101));
            let area = PI * r * r;
            assert!(((m.count() as f64 - area) / area).abs() < 0.02, "r={r}");
        }
    }

    #[test]
    fn quarter_turn_swaps_axes() {
        let a = rasterize_ellipse((30.3, 28.6), (15.3, 7.7), PI / 2.0, (64, 64));
        let b = rasterize_ellipse((30.3, 28.6), (7.7, 15.3), 0.0, (64, 64));
        assert_eq!(a, b);
    }

    #[test]
    fn unrotated_ellipse_is_mirror_symmetric() {
        let m = rasterize_ellipse((20.4, 30.0), (12.5, 6.1), 0.0, (48, 61));
        for r in 0..48 {
            for d in 0..=30 {
                assert_eq!(m.get(r, 30 - d), m.get(r, 30 + d));
            }
        }
    }

    #[test]
    fn foreground_fraction_bounds_over_1000_samples() {
        let samples = generate(&spec(1000, 128)).unwrap();
        for s in &samples {
            let f = s.mask.fraction();
            assert!((0.01..=0.35).contains(&f), "{}: {f}", s.id);
        }
    }

    #[test]
    fn corruption_leaves_the_mask_alone() {
        let s = spec(1, 96);
        for seed in 0..20 {
            let label = format!("case{seed}");
            let masks: Vec<Mask> = [Regime::Clean, Regime::Artifact, Regime::Distractor]
                .iter()
                .map(|&regime| {
                    let mut r = rng::stream(seed, &label);
                    render(&s, regime, ViewTag::Coronal, &mut r).1
                })
                .collect();
            assert_eq!(masks[0], masks[1]);
            assert_eq!(masks[0], masks[2]);
        }
    }

    #[test]
    fn views_have_distinct_aspect_ratios() {
        let samples = generate(&spec(300, 64)).unwrap();
        let mean_ratio = |v: ViewTag| {
            let rs: Vec<f64> = samples
                .iter()
                .filter(|s| s.view == v)
                .map(|s| s.brain.semi_minor / s.brain.semi_major)
                .collect();
            rs.iter().sum::<f64>() / rs.len() as f64
        };
        let (ax, co, sa) = (
            mean_ratio(ViewTag::Axial),
            mean_ratio(ViewTag::Coronal),
            mean_ratio(ViewTag::Sagittal),
        );
        assert!(ax > co + 0.05 && co > sa + 0.05, "{ax} {co} {sa}");
    }

    #[test]
    fn dataset_files_round_trip() {
        let samples = generate(&spec(5, 32)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        assert!(dir.path().join("ph0003_img.pgm").exists());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.mask, b.mask);
            assert_eq!((a.regime, a.view, a.split), (b.regime, b.view, b.split));
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-15);
            }
        }
    }
}
