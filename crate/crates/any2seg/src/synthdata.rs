//! Procedural multi-modal scenes, sensor corruptions, and the dataset
//! directory format.
//!
//! A scene is a stack of random rectangles and ellipses over a flat
//! background, composited back to front. Four rasters are derived from the
//! same geometry so that modality-incomplete behaviour is meaningful:
//!
//! - R: shape colours shaded by an illumination ramp (background stays
//!   flat, so an empty scene has zero edges).
//! - D: normalized distance-to-camera, constant per shape, replicated over
//!   three channels. Distance follows composition order: later shapes sit
//!   in front.
//! - E: the normalized spatial gradient magnitude of R — an edge image.
//!   This is a recomputable function of R, nothing else.
//! - L: D with a seeded dropout mask; dropped pixels are exactly 0, kept
//!   pixels are exactly the D values.
//!
//! D alone carries most of the segmentation signal (distance tiers plus
//! the background plateau) while E alone is deliberately ambiguous, giving
//! the modality-subset evaluations an asymmetry to detect.
//!
//! Everything is a deterministic function of the seed; datasets written
//! twice from the same manifest are byte-identical.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::{write_sections, SectionMap};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::mff::Modality;
use crate::rng_util::gaussian;
use crate::segnet::ModelDims;
use crate::tensor::Tensor;

/// Fraction of pixels removed from the L raster.
pub const LIDAR_DROP_DENSITY: f64 = 0.7;

const MAX_PLACEMENT_ATTEMPTS: usize = 64;

/// One generated scene: label map plus the four modality rasters.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub y: LabelMap,
    /// Rasters in canonical order R, D, E, L; each [3, H, W], values in [0,1].
    pub rasters: [Tensor; 4],
    pub seed: u64,
}

impl SceneSample {
    pub fn raster(&self, m: Modality) -> &Tensor {
        &self.rasters[m.index()]
    }

    pub fn height(&self) -> usize {
        self.y.height()
    }

    pub fn width(&self) -> usize {
        self.y.width()
    }
}

/// A named sensor-failure condition with a severity in [0,1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub kind: ConditionKind,
    pub severity: f64,
}

impl Condition {
    pub fn clean() -> Condition {
        Condition { kind: ConditionKind::Clean, severity: 0.0 }
    }

    /// Parses `kind` or `kind:severity`; a bare kind gets severity 0.5
    /// (0.0 for clean).
    pub fn parse(s: &str) -> Result<Condition> {
        let (kind_str, sev) = match s.split_once(':') {
            Some((k, v)) => {
                let sev: f64 = v
                    .parse()
                    .map_err(|_| Error::domain(format!("bad severity {:?} in condition {:?}", v, s)))?;
                (k, Some(sev))
            }
            None => (s, None),
        };
        let kind = ConditionKind::parse(kind_str)?;
        let severity = sev.unwrap_or(if kind == ConditionKind::Clean { 0.0 } else { 0.5 });
        if !(0.0..=1.0).contains(&severity) {
            return Err(Error::domain(format!("severity must lie in [0,1], got {}", severity)));
        }
        Ok(Condition { kind, severity })
    }

    pub fn label(&self) -> String {
        if self.kind == ConditionKind::Clean {
            "clean".to_string()
        } else {
            format!("{}:{}", self.kind.name(), self.severity)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Clean,
    MotionBlur,
    OverExposure,
    UnderExposure,
    LidarJitter,
    EventLowres,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 6] = [
        ConditionKind::Clean,
        ConditionKind::MotionBlur,
        ConditionKind::OverExposure,
        ConditionKind::UnderExposure,
        ConditionKind::LidarJitter,
        ConditionKind::EventLowres,
    ];

    pub fn parse(s: &str) -> Result<ConditionKind> {
        match s {
            "clean" => Ok(ConditionKind::Clean),
            "motion_blur" => Ok(ConditionKind::MotionBlur),
            "over_exposure" => Ok(ConditionKind::OverExposure),
            "under_exposure" => Ok(ConditionKind::UnderExposure),
            "lidar_jitter" => Ok(ConditionKind::LidarJitter),
            "event_lowres" => Ok(ConditionKind::EventLowres),
            other => Err(Error::domain(format!("unknown condition kind {:?}", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::Clean => "clean",
            ConditionKind::MotionBlur => "motion_blur",
            ConditionKind::OverExposure => "over_exposure",
            ConditionKind::UnderExposure => "under_exposure",
            ConditionKind::LidarJitter => "lidar_jitter",
            ConditionKind::EventLowres => "event_lowres",
        }
    }

    /// The single modality this condition degrades, if any.
    pub fn target(self) -> Option<Modality> {
        match self {
            ConditionKind::Clean => None,
            ConditionKind::MotionBlur
            | ConditionKind::OverExposure
            | ConditionKind::UnderExposure => Some(Modality::R),
            ConditionKind::LidarJitter => Some(Modality::L),
            ConditionKind::EventLowres => Some(Modality::E),
        }
    }
}

fn validate_dims(num_classes: usize, height: usize, width: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::domain(format!("need at least 2 classes, got {}", num_classes)));
    }
    if num_classes > IGNORE_LABEL as usize {
        return Err(Error::domain(format!(
            "at most {} classes supported, got {}",
            IGNORE_LABEL, num_classes
        )));
    }
    let patch = ModelDims::default().patch;
    if height < 16 || width < 16 || height % patch != 0 || width % patch != 0 {
        return Err(Error::domain(format!(
            "raster must be at least 16x16 and divisible by the patch size {}, got {}x{}",
            patch, height, width
        )));
    }
    Ok(())
}

struct ShapeSpec {
    ellipse: bool,
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    class: u8,
    color: [f64; 3],
}

fn draw_shape(
    rng: &mut ChaCha8Rng,
    index: usize,
    num_classes: usize,
    cycle_classes: bool,
    height: usize,
    width: usize,
) -> ShapeSpec {
    let ellipse = rng.gen::<f64>() < 0.5;
    let cx = rng.gen_range(0..width) as f64;
    let cy = rng.gen_range(0..height) as f64;
    let min_half = (width.min(height) / 8).max(2) as f64;
    let max_half = (width.min(height) / 3).max(3) as f64;
    let half_w = min_half + rng.gen::<f64>() * (max_half - min_half);
    let half_h = min_half + rng.gen::<f64>() * (max_half - min_half);
    let class = if cycle_classes {
        (1 + index % (num_classes - 1)) as u8
    } else {
        rng.gen_range(1..num_classes) as u8
    };
    let color = [
        0.15 + 0.85 * rng.gen::<f64>(),
        0.15 + 0.85 * rng.gen::<f64>(),
        0.15 + 0.85 * rng.gen::<f64>(),
    ];
    ShapeSpec { ellipse, cx, cy, half_w, half_h, class, color }
}

/// The E raster: per-pixel gradient magnitude of the channel-mean of `r`
/// (central differences, edge-replicated), normalized by its maximum.
pub fn event_from_raster(r: &Tensor) -> Result<Tensor> {
    if r.rank() != 3 || r.shape()[0] != 3 {
        return Err(Error::shape(format!("expected [3,H,W], got {:?}", r.shape())));
    }
    let (h, w) = (r.shape()[1], r.shape()[2]);
    let data = r.data();
    let plane = h * w;
    let gray: Vec<f64> = (0..plane)
        .map(|i| (data[i] + data[plane + i] + data[2 * plane + i]) / 3.0)
        .collect();
    let mut mag = vec![0.0; plane];
    let mut max_mag = 0.0f64;
    for yy in 0..h {
        for xx in 0..w {
            let xm = xx.saturating_sub(1);
            let xp = (xx + 1).min(w - 1);
            let ym = yy.saturating_sub(1);
            let yp = (yy + 1).min(h - 1);
            let gx = (gray[yy * w + xp] - gray[yy * w + xm]) * 0.5;
            let gy = (gray[yp * w + xx] - gray[ym * w + xx]) * 0.5;
            let m = (gx * gx + gy * gy).sqrt();
            mag[yy * w + xx] = m;
            max_mag = max_mag.max(m);
        }
    }
    if max_mag > 0.0 {
        for m in &mut mag {
            *m /= max_mag;
        }
    }
    let mut out = Vec::with_capacity(3 * plane);
    for _ in 0..3 {
        out.extend_from_slice(&mag);
    }
    Tensor::from_vec(vec![3, h, w], out)
}

/// Generates one scene. `n_shapes` rectangles/ellipses with classes
/// 1..K−1 are composited back to front over background class 0; shape
/// distance decreases with composition order. With `require_all_classes`
/// the shape classes cycle through 1..K−1 and generation retries (on the
/// same seeded stream) until every class survives occlusion.
pub fn gen_scene(
    seed: u64,
    num_classes: usize,
    height: usize,
    width: usize,
    n_shapes: usize,
    require_all_classes: bool,
) -> Result<SceneSample> {
    validate_dims(num_classes, height, width)?;
    if require_all_classes && num_classes > n_shapes + 1 {
        return Err(Error::gen(format!(
            "{} classes cannot all appear with only {} shapes",
            num_classes, n_shapes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Illumination ramp over shape pixels: 0.7..1.0 along a random blend of
    // the two axes.
    let ax: f64 = rng.gen();
    let ay = 1.0 - ax;
    let plane = height * width;

    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let shapes: Vec<ShapeSpec> = (0..n_shapes)
            .map(|i| draw_shape(&mut rng, i, num_classes, require_all_classes, height, width))
            .collect();

        let mut labels = vec![0u8; plane];
        let mut dist = vec![1.0f64; plane];
        let mut base = vec![[0.5f64; 3]; plane];
        for (i, s) in shapes.iter().enumerate() {
            let d = (n_shapes - i) as f64 / (n_shapes + 1) as f64;
            for yy in 0..height {
                for xx in 0..width {
                    let dx = xx as f64 - s.cx;
                    let dy = yy as f64 - s.cy;
                    let inside = if s.ellipse {
                        let nx = dx / s.half_w;
                        let ny = dy / s.half_h;
                        nx * nx + ny * ny <= 1.0
                    } else {
                        dx.abs() <= s.half_w && dy.abs() <= s.half_h
                    };
                    if inside {
                        let p = yy * width + xx;
                        labels[p] = s.class;
                        dist[p] = d;
                        base[p] = s.color;
                    }
                }
            }
        }

        if require_all_classes {
            let mut seen = vec![false; num_classes];
            for &v in &labels {
                seen[v as usize] = true;
            }
            if !seen[1..].iter().all(|&s| s) {
                continue;
            }
        }

        let mut r_data = vec![0.0f64; 3 * plane];
        for yy in 0..height {
            for xx in 0..width {
                let p = yy * width + xx;
                let ill = if labels[p] != 0 {
                    let fx = if width > 1 { xx as f64 / (width - 1) as f64 } else { 0.0 };
                    let fy = if height > 1 { yy as f64 / (height - 1) as f64 } else { 0.0 };
                    0.7 + 0.3 * (ax * fx + ay * fy)
                } else {
                    1.0
                };
                for c in 0..3 {
                    r_data[c * plane + p] = (base[p][c] * ill).clamp(0.0, 1.0);
                }
            }
        }
        let r = Tensor::from_vec(vec![3, height, width], r_data)?;
        let e = event_from_raster(&r)?;
        let mut d_data = Vec::with_capacity(3 * plane);
        for _ in 0..3 {
            d_data.extend_from_slice(&dist);
        }
        let d = Tensor::from_vec(vec![3, height, width], d_data.clone())?;

        // Exact-count dropout: a seeded partial shuffle picks the dropped
        // pixels, so the density is met by construction.
        let n_drop = (LIDAR_DROP_DENSITY * plane as f64).round() as usize;
        let mut order: Vec<usize> = (0..plane).collect();
        for i in 0..n_drop.min(plane) {
            let j = rng.gen_range(i..plane);
            order.swap(i, j);
        }
        let mut l_data = d_data;
        for &p in &order[..n_drop.min(plane)] {
            for c in 0..3 {
                l_data[c * plane + p] = 0.0;
            }
        }
        let l = Tensor::from_vec(vec![3, height, width], l_data)?;

        return Ok(SceneSample {
            y: LabelMap::new(height, width, labels)?,
            rasters: [r, d, e, l],
            seed,
        });
    }
    Err(Error::gen(format!(
        "seed {}: not all {} classes could be placed in {} attempts",
        seed, num_classes, MAX_PLACEMENT_ATTEMPTS
    )))
}

fn corruption_rng(sample_seed: u64, kind: ConditionKind) -> ChaCha8Rng {
    let idx = ConditionKind::ALL.iter().position(|&k| k == kind).unwrap_or(0) as u64;
    ChaCha8Rng::seed_from_u64(sample_seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1 + idx))
}

fn horizontal_box_blur(data: &[f64], height: usize, width: usize, kernel: usize) -> Vec<f64> {
    let plane = height * width;
    let left = (kernel - 1) / 2;
    let right = kernel / 2;
    let mut out = vec![0.0; data.len()];
    for c in 0..3 {
        for yy in 0..height {
            for xx in 0..width {
                let lo = xx.saturating_sub(left);
                let hi = (xx + right).min(width - 1);
                let mut acc = 0.0;
                for x2 in lo..=hi {
                    acc += data[c * plane + yy * width + x2];
                }
                out[c * plane + yy * width + xx] = acc / (hi - lo + 1) as f64;
            }
        }
    }
    out
}

fn block_mean_upsample(data: &[f64], height: usize, width: usize, factor: usize) -> Vec<f64> {
    let plane = height * width;
    let mut out = vec![0.0; data.len()];
    for c in 0..3 {
        let mut by = 0;
        while by < height {
            let bh = factor.min(height - by);
            let mut bx = 0;
            while bx < width {
                let bw = factor.min(width - bx);
                let mut acc = 0.0;
                for yy in by..by + bh {
                    for xx in bx..bx + bw {
                        acc += data[c * plane + yy * width + xx];
                    }
                }
                let mean = acc / (bh * bw) as f64;
                for yy in by..by + bh {
                    for xx in bx..bx + bw {
                        out[c * plane + yy * width + xx] = mean;
                    }
                }
                bx += factor;
            }
            by += factor;
        }
    }
    out
}

/// Applies a sensor-failure condition. Each kind touches exactly one
/// raster; the label map and the other rasters are carried over
/// bit-identically, and severity 0 (or clean) returns the sample unchanged.
/// Noise draws are seeded from (sample seed, kind), so corruption is
/// reproducible.
pub fn corrupt(sample: &SceneSample, condition: &Condition) -> Result<SceneSample> {
    if !(0.0..=1.0).contains(&condition.severity) {
        return Err(Error::domain(format!(
            "severity must lie in [0,1], got {}",
            condition.severity
        )));
    }
    let s = condition.severity;
    if condition.kind == ConditionKind::Clean || s == 0.0 {
        return Ok(sample.clone());
    }
    let (h, w) = (sample.height(), sample.width());
    let mut out = sample.clone();
    match condition.kind {
        ConditionKind::Clean => unreachable!("handled above"),
        ConditionKind::MotionBlur => {
            let kernel = 1 + (s * 6.0).floor() as usize;
            if kernel > 1 {
                let r = sample.raster(Modality::R);
                let blurred = horizontal_box_blur(r.data(), h, w, kernel);
                out.rasters[Modality::R.index()] = Tensor::from_vec(vec![3, h, w], blurred)?;
            }
        }
        ConditionKind::OverExposure | ConditionKind::UnderExposure => {
            let factor = if condition.kind == ConditionKind::OverExposure {
                1.0 + 2.0 * s
            } else {
                1.0 - 2.0 * s
            };
            let r = sample.raster(Modality::R);
            let scaled: Vec<f64> = r.data().iter().map(|v| (v * factor).clamp(0.0, 1.0)).collect();
            out.rasters[Modality::R.index()] = Tensor::from_vec(vec![3, h, w], scaled)?;
        }
        ConditionKind::LidarJitter => {
            let mut rng = corruption_rng(sample.seed, condition.kind);
            let sigma = s * 0.2;
            let l = sample.raster(Modality::L);
            let noisy: Vec<f64> = l
                .data()
                .iter()
                .map(|v| (v + sigma * gaussian(&mut rng)).clamp(0.0, 1.0))
                .collect();
            out.rasters[Modality::L.index()] = Tensor::from_vec(vec![3, h, w], noisy)?;
        }
        ConditionKind::EventLowres => {
            let factor = 1usize << (s * 2.0).ceil() as usize;
            let e = sample.raster(Modality::E);
            let coarse = block_mean_upsample(e.data(), h, w, factor);
            out.rasters[Modality::E.index()] = Tensor::from_vec(vec![3, h, w], coarse)?;
        }
    }
    Ok(out)
}

const SAMPLE_SECTIONS: [&str; 4] = ["R", "D", "E", "L"];

/// Writes a sample as sections y, R, D, E, L, seed. The u64 seed is stored
/// as two f64 halves (each < 2^32) so it survives the f64 payload exactly.
pub fn write_sample(path: &Path, sample: &SceneSample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let y_data: Vec<f64> = sample.y.data().iter().map(|&v| v as f64).collect();
    let mut sections = vec![("y".to_string(), Tensor::from_vec(vec![h, w], y_data)?)];
    for (i, name) in SAMPLE_SECTIONS.iter().enumerate() {
        sections.push((name.to_string(), sample.rasters[i].clone()));
    }
    let seed_halves = vec![(sample.seed >> 32) as f64, (sample.seed & 0xFFFF_FFFF) as f64];
    sections.push(("seed".to_string(), Tensor::from_vec(vec![2], seed_halves)?));
    write_sections(path, &sections)
}

/// Reads a sample back, validating label values against `num_classes`
/// (255 stays the ignore marker).
pub fn read_sample(path: &Path, num_classes: usize) -> Result<SceneSample> {
    let map = SectionMap::read(path)?;
    let y_t = map.get("y")?;
    if y_t.rank() != 2 {
        return Err(Error::format(format!(
            "{}: label section must be rank 2, got {:?}",
            path.display(),
            y_t.shape()
        )));
    }
    let (h, w) = (y_t.shape()[0], y_t.shape()[1]);
    let mut labels = Vec::with_capacity(h * w);
    for (i, &v) in y_t.data().iter().enumerate() {
        let ok = v.is_finite() && v.fract() == 0.0 && v >= 0.0 && v <= 255.0;
        if !ok {
            return Err(Error::data(format!(
                "{}: label at pixel {} is not a class id: {}",
                path.display(),
                i,
                v
            )));
        }
        let b = v as u8;
        if b != IGNORE_LABEL && (b as usize) >= num_classes {
            return Err(Error::data(format!(
                "{}: label {} at pixel {} exceeds {} classes",
                path.display(),
                b,
                i,
                num_classes
            )));
        }
        labels.push(b);
    }
    let mut rasters = Vec::with_capacity(4);
    for name in SAMPLE_SECTIONS {
        let t = map.get_shaped(name, &[3, h, w])?;
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "{}: section {} holds non-finite values",
                path.display(),
                name
            )));
        }
        rasters.push(t.detach());
    }
    let seed_t = map.get_shaped("seed", &[2])?;
    let (hi, lo) = (seed_t.data()[0], seed_t.data()[1]);
    for half in [hi, lo] {
        if !(half.is_finite() && half.fract() == 0.0 && (0.0..4294967296.0).contains(&half)) {
            return Err(Error::data(format!("{}: malformed seed section", path.display())));
        }
    }
    Ok(SceneSample {
        y: LabelMap::new(h, w, labels)?,
        rasters: [
            rasters[0].clone(),
            rasters[1].clone(),
            rasters[2].clone(),
            rasters[3].clone(),
        ],
        seed: ((hi as u64) << 32) | lo as u64,
    })
}

/// Dataset manifest: everything needed to regenerate the samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub n_shapes: usize,
    pub require_all_classes: bool,
    pub conditions: Vec<Condition>,
}

impl Default for Manifest {
    fn default() -> Self {
        let mut conditions = vec![Condition::clean()];
        for kind in ConditionKind::ALL {
            if kind != ConditionKind::Clean {
                conditions.push(Condition { kind, severity: 0.5 });
            }
        }
        Manifest {
            seed: 0,
            num_classes: 4,
            height: 32,
            width: 32,
            train_count: 256,
            val_count: 64,
            n_shapes: 5,
            require_all_classes: true,
            conditions,
        }
    }
}

fn sample_file_name(i: usize) -> String {
    format!("{:05}.a2s", i)
}

fn generate_split(dir: &Path, seeds: &[u64], manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let failures: Mutex<Vec<Error>> = Mutex::new(Vec::new());
    let workers = crate::par::workers_for(seeds.len());
    std::thread::scope(|scope| {
        for w in 0..workers {
            let failures = &failures;
            scope.spawn(move || {
                for i in (w..seeds.len()).step_by(workers) {
                    let result = gen_scene(
                        seeds[i],
                        manifest.num_classes,
                        manifest.height,
                        manifest.width,
                        manifest.n_shapes,
                        manifest.require_all_classes,
                    )
                    .and_then(|s| write_sample(&dir.join(sample_file_name(i)), &s));
                    if let Err(e) = result {
                        failures.lock().unwrap().push(e);
                    }
                }
            });
        }
    });
    match failures.into_inner().unwrap().into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Writes `manifest.json` plus `train/NNNNN.a2s` and `val/NNNNN.a2s`.
/// Per-sample seeds are drawn from the manifest seed in a fixed order, so
/// the manifest fully determines every byte.
pub fn generate_dataset(dir: &Path, manifest: &Manifest) -> Result<()> {
    validate_dims(manifest.num_classes, manifest.height, manifest.width)?;
    if manifest.require_all_classes && manifest.num_classes > manifest.n_shapes + 1 {
        return Err(Error::gen(format!(
            "{} classes cannot all appear with only {} shapes",
            manifest.num_classes, manifest.n_shapes
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let train_seeds: Vec<u64> = (0..manifest.train_count).map(|_| rng.gen()).collect();
    let val_seeds: Vec<u64> = (0..manifest.val_count).map(|_| rng.gen()).collect();
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::format(format!("manifest serialization failed: {}", e)))?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    generate_split(&dir.join("train"), &train_seeds, manifest)?;
    generate_split(&dir.join("val"), &val_seeds, manifest)
}

/// An on-disk dataset: the manifest plus lazily loaded samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    root: PathBuf,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.is_file() {
            return Err(Error::usage(format!(
                "{} is not a dataset directory (no manifest.json)",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {}", manifest_path.display(), e)))?;
        Ok(Dataset { manifest, root: dir.to_path_buf() })
    }

    pub fn train_path(&self, i: usize) -> PathBuf {
        self.root.join("train").join(sample_file_name(i))
    }

    pub fn val_path(&self, i: usize) -> PathBuf {
        self.root.join("val").join(sample_file_name(i))
    }

    pub fn load_train(&self, i: usize) -> Result<SceneSample> {
        if i >= self.manifest.train_count {
            return Err(Error::domain(format!(
                "train index {} out of {}",
                i, self.manifest.train_count
            )));
        }
        read_sample(&self.train_path(i), self.manifest.num_classes)
    }

    pub fn load_val(&self, i: usize) -> Result<SceneSample> {
        if i >= self.manifest.val_count {
            return Err(Error::domain(format!(
                "val index {} out of {}",
                i, self.manifest.val_count
            )));
        }
        read_sample(&self.val_path(i), self.manifest.num_classes)
    }
}
