//! Procedural evaluation scenes with exact ground-truth masks, and the
//! quality metrics used by the CLI and the acceptance suite: PSNR,
//! per-class statistic error, and the Fréchet distance between Gaussian
//! statistics.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adain::ClassStatsTable;
use crate::tensor::{masked_class_stats, FeatureMap, SegmentationMask};
use crate::{Error, Result};

/// Class id of the sky band in generated scenes.
pub const SKY_CLASS: u32 = 0;
/// Class id of the ground band in generated scenes.
pub const GROUND_CLASS: u32 = 1;
/// First object class id; objects cycle through five ids starting here.
pub const FIRST_OBJECT_CLASS: u32 = 2;
/// Number of distinct object classes the generator cycles through.
pub const OBJECT_CLASS_COUNT: u32 = 5;

/// PSNR value reported for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Base color and texture amplitude of one semantic class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassAppearance {
    pub color: [f32; 3],
    pub texture_amp: f32,
}

/// Per-class appearance table for the scene generator.
///
/// Every entry keeps `color ± texture_amp` inside `[0, 1]`, so generated
/// pixel values never need clamping and per-class means stay within the
/// texture amplitude of the base color.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePalette {
    entries: BTreeMap<u32, ClassAppearance>,
}

impl ScenePalette {
    pub fn new(entries: BTreeMap<u32, ClassAppearance>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("palette has no classes".into()));
        }
        for (&class_id, app) in &entries {
            if !app.texture_amp.is_finite() || app.texture_amp < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "class {class_id} has invalid texture amplitude {}",
                    app.texture_amp
                )));
            }
            for (i, &c) in app.color.iter().enumerate() {
                if !c.is_finite() || c - app.texture_amp < 0.0 || c + app.texture_amp > 1.0 {
                    return Err(Error::InvalidInput(format!(
                        "class {class_id} channel {i}: {} ± {} leaves [0, 1]",
                        c, app.texture_amp
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    fn preset(table: &[(u32, [f32; 3], f32)]) -> Self {
        let entries = table
            .iter()
            .map(|&(id, color, texture_amp)| (id, ClassAppearance { color, texture_amp }))
            .collect();
        Self::new(entries).expect("preset palettes are valid by construction")
    }

    /// Sunny reference look: blue sky, muted green-brown ground.
    pub fn day() -> Self {
        Self::preset(&[
            (0, [0.62, 0.70, 0.85], 0.030),
            (1, [0.42, 0.44, 0.38], 0.030),
            (2, [0.55, 0.50, 0.46], 0.025),
            (3, [0.70, 0.30, 0.28], 0.025),
            (4, [0.30, 0.52, 0.30], 0.030),
            (5, [0.35, 0.35, 0.38], 0.020),
            (6, [0.80, 0.72, 0.30], 0.025),
        ])
    }

    /// Winter look: cooler sky, brightened desaturated surfaces. Each class
    /// sits a moderate, nonzero distance from its `day` counterpart, so
    /// day-to-snow transfers have a measurable target.
    pub fn snow() -> Self {
        Self::preset(&[
            (0, [0.68, 0.72, 0.80], 0.025),
            (1, [0.51, 0.53, 0.48], 0.022),
            (2, [0.60, 0.56, 0.52], 0.020),
            (3, [0.66, 0.34, 0.32], 0.020),
            (4, [0.38, 0.55, 0.38], 0.022),
            (5, [0.40, 0.40, 0.43], 0.016),
            (6, [0.76, 0.70, 0.36], 0.020),
        ])
    }

    /// Night look: dark, slightly blue, with one lit sign class.
    pub fn night() -> Self {
        Self::preset(&[
            (0, [0.10, 0.12, 0.20], 0.020),
            (1, [0.16, 0.16, 0.18], 0.020),
            (2, [0.22, 0.20, 0.22], 0.020),
            (3, [0.30, 0.22, 0.20], 0.020),
            (4, [0.12, 0.18, 0.14], 0.020),
            (5, [0.18, 0.18, 0.20], 0.015),
            (6, [0.45, 0.40, 0.22], 0.020),
        ])
    }

    /// Fog look: bright, desaturated, low contrast.
    pub fn fog() -> Self {
        Self::preset(&[
            (0, [0.78, 0.79, 0.80], 0.015),
            (1, [0.62, 0.63, 0.63], 0.018),
            (2, [0.68, 0.67, 0.68], 0.015),
            (3, [0.66, 0.58, 0.57], 0.015),
            (4, [0.58, 0.64, 0.58], 0.018),
            (5, [0.60, 0.60, 0.62], 0.012),
            (6, [0.75, 0.72, 0.58], 0.015),
        ])
    }

    pub fn preset_names() -> [&'static str; 4] {
        ["day", "snow", "night", "fog"]
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "day" => Ok(Self::day()),
            "snow" => Ok(Self::snow()),
            "night" => Ok(Self::night()),
            "fog" => Ok(Self::fog()),
            other => Err(Error::InvalidInput(format!(
                "unknown palette {other:?}; presets are {}",
                Self::preset_names().join(", ")
            ))),
        }
    }

    pub fn appearance(&self, class_id: u32) -> Option<&ClassAppearance> {
        self.entries.get(&class_id)
    }

    pub fn classes(&self) -> Vec<u32> {
        self.entries.keys().copied().collect()
    }
}

/// Generates a layered scene: a sky band over a ground band, plus
/// `n_objects` rectangles or discs on the ground, each labeled with an
/// object class cycling through [`FIRST_OBJECT_CLASS`]`..+`[`OBJECT_CLASS_COUNT`].
/// Pixels get the class base color plus seeded uniform texture in
/// `±texture_amp`. Deterministic per seed; the mask labels every pixel.
pub fn gen_scene(
    seed: u64,
    palette: &ScenePalette,
    h: usize,
    w: usize,
    n_objects: usize,
) -> Result<(FeatureMap, SegmentationMask)> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidInput(format!(
            "scene must be at least 8x8, got {h}x{w}"
        )));
    }
    let mut needed: Vec<u32> = vec![SKY_CLASS, GROUND_CLASS];
    for i in 0..n_objects {
        needed.push(FIRST_OBJECT_CLASS + (i as u32 % OBJECT_CLASS_COUNT));
    }
    for class_id in &needed {
        if palette.appearance(*class_id).is_none() {
            return Err(Error::InvalidInput(format!(
                "palette lacks an entry for class {class_id}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = (h * 2) / 5;
    let mut mask = SegmentationMask::filled(h, w, GROUND_CLASS);
    for y in 0..horizon {
        for x in 0..w {
            mask.set_label(y, x, SKY_CLASS);
        }
    }

    // Objects sit on the ground band; half-extents of h/8..=h/4 keep them
    // clear of the top sky rows, so sky is always present in the mask.
    let lo = (h / 8).max(1);
    let hi = (h / 4).max(lo);
    for i in 0..n_objects {
        let class_id = FIRST_OBJECT_CLASS + (i as u32 % OBJECT_CLASS_COUNT);
        let cx = rng.gen_range(0..w) as isize;
        let cy = rng.gen_range(horizon..h) as isize;
        let is_disc = rng.gen_bool(0.5);
        if is_disc {
            let r = rng.gen_range(lo..=hi) as isize;
            for y in (cy - r).max(0)..(cy + r + 1).min(h as isize) {
                for x in (cx - r).max(0)..(cx + r + 1).min(w as isize) {
                    let (dx, dy) = (x - cx, y - cy);
                    if dx * dx + dy * dy <= r * r {
                        mask.set_label(y as usize, x as usize, class_id);
                    }
                }
            }
        } else {
            let ax = rng.gen_range(lo..=hi) as isize;
            let ay = rng.gen_range(lo..=hi) as isize;
            for y in (cy - ay).max(0)..(cy + ay + 1).min(h as isize) {
                for x in (cx - ax).max(0)..(cx + ax + 1).min(w as isize) {
                    mask.set_label(y as usize, x as usize, class_id);
                }
            }
        }
    }

    let mut img = FeatureMap::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let app = palette
                .appearance(mask.label(y, x))
                .expect("every placed class was checked against the palette");
            for c in 0..3 {
                let jitter = if app.texture_amp > 0.0 {
                    rng.gen_range(-app.texture_amp..=app.texture_amp)
                } else {
                    0.0
                };
                img.set(c, y, x, app.color[c] + jitter);
            }
        }
    }
    Ok((img, mask))
}

/// Peak signal-to-noise ratio in decibels: `10·log10(peak²/MSE)`, capped at
/// [`PSNR_CAP_DB`] (the value reported for identical inputs).
pub fn psnr(a: &FeatureMap, b: &FeatureMap, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!(
            "psnr inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("psnr requires non-empty inputs".into()));
    }
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::InvalidInput(format!("peak must be positive, got {peak}")));
    }
    let mut sq = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = *x as f64 - *y as f64;
        sq += d * d;
    }
    let mse = sq / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean, over classes valid in `ref_stats` and present in `mask`, of the L2
/// distance between the image's per-class (mean, std) vector and the
/// reference table's style-side statistics.
pub fn per_class_stat_error(
    img: &FeatureMap,
    ref_stats: &ClassStatsTable,
    mask: &SegmentationMask,
) -> Result<f64> {
    if mask.height() != img.height() || mask.width() != img.width() {
        return Err(Error::InvalidInput(format!(
            "mask is {}x{} but image is {}x{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        )));
    }
    let mut total = 0.0f64;
    let mut counted = 0usize;
    for class_id in ref_stats.valid_classes() {
        let stats = masked_class_stats(img, mask, class_id)?;
        if !stats.is_valid() {
            continue;
        }
        let reference = &ref_stats
            .get(class_id)
            .expect("valid_classes only yields table entries")
            .style;
        if reference.mean.len() != stats.mean.len() {
            return Err(Error::InvalidInput(format!(
                "reference for class {class_id} has {} channels, image has {}",
                reference.mean.len(),
                stats.mean.len()
            )));
        }
        let mut sq = 0.0f64;
        for c in 0..stats.mean.len() {
            let dm = stats.mean[c] as f64 - reference.mean[c] as f64;
            let ds = stats.std[c] as f64 - reference.std[c] as f64;
            sq += dm * dm + ds * ds;
        }
        total += sq.sqrt();
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::InvalidInput(
            "no class is both valid in the reference table and present in the mask".into(),
        ));
    }
    Ok(total / counted as f64)
}

/// Mean vector and symmetric PSD covariance of a k-dimensional Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
}

/// Tolerances for accepting a covariance matrix: symmetry deviation and the
/// most negative admissible eigenvalue.
const COV_SYMMETRY_TOL: f64 = 1e-8;
const COV_EIGEN_TOL: f64 = -1e-8;

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if cov.nrows() != k || cov.ncols() != k {
            return Err(Error::InvalidInput(format!(
                "covariance is {}x{} but the mean has {k} dimensions",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("Gaussian statistics must be finite".into()));
        }
        for i in 0..k {
            for j in (i + 1)..k {
                if (cov[(i, j)] - cov[(j, i)]).abs() > COV_SYMMETRY_TOL {
                    return Err(Error::InvalidInput(format!(
                        "covariance asymmetric at ({i},{j}): {} vs {}",
                        cov[(i, j)],
                        cov[(j, i)]
                    )));
                }
            }
        }
        if k > 0 {
            let eigenvalues = cov.clone().symmetric_eigen().eigenvalues;
            if let Some(lambda) = eigenvalues.iter().copied().find(|&l| l < COV_EIGEN_TOL) {
                return Err(Error::InvalidInput(format!(
                    "covariance has negative eigenvalue {lambda}"
                )));
            }
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and population covariance of equally long sample vectors.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::InvalidInput("cannot fit Gaussian to zero samples".into()));
        }
        let k = samples[0].len();
        if samples.iter().any(|s| s.len() != k) {
            return Err(Error::InvalidInput("samples have inconsistent dimensions".into()));
        }
        let mut mean = vec![0.0f64; k];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s.iter()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = DMatrix::<f64>::zeros(k, k);
        for s in samples {
            for i in 0..k {
                let di = s[i] - mean[i];
                for j in i..k {
                    cov[(i, j)] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..k {
            for j in i..k {
                cov[(i, j)] /= n as f64;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues below zero
/// (numerical noise on PSD inputs) are clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| if l > 0.0 { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians:
/// `‖μ_a−μ_b‖² + tr(Σ_a + Σ_b − 2·(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn frechet_gaussian(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput(format!(
            "Gaussian dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mut mean_sq = 0.0f64;
    for (x, y) in a.mean.iter().zip(b.mean.iter()) {
        mean_sq += (x - y) * (x - y);
    }
    let sqrt_a = sqrt_psd(&a.cov);
    let mut inner = &sqrt_a * &b.cov * &sqrt_a;
    // The product is symmetric in exact arithmetic; symmetrize to keep the
    // eigendecomposition well behaved.
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrt_psd(&inner);
    let value = mean_sq + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Six-dimensional statistic vector of a 3-channel image: per-channel means
/// then per-channel stds. This is the feature the `metrics` command fits
/// Gaussians to.
pub fn channel_stat_vector(f: &FeatureMap) -> Result<Vec<f64>> {
    let stats = crate::tensor::channel_stats(f)?;
    let mut v = Vec::with_capacity(stats.mean.len() * 2);
    v.extend(stats.mean.iter().map(|&m| m as f64));
    v.extend(stats.std.iter().map(|&s| s as f64));
    Ok(v)
}
