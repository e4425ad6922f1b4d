//! Dense feature maps, segmentation masks, and the numeric kernels the rest
//! of the engine is built on.
//!
//! Conventions, fixed once here and relied on everywhere:
//! - storage is `f32`, reductions accumulate in `f64`;
//! - reduction order is sequential row-major (and class-ascending where
//!   classes are involved), so results are bit-identical run to run;
//! - standard deviations are population deviations (divisor `N`);
//! - nearest-neighbor resizing uses floor index mapping.

use std::collections::BTreeSet;

use crate::{Error, Result};

/// Reserved mask label that never participates in statistics.
pub const DEFAULT_IGNORE_ID: u32 = 255;

/// Epsilon added to each vector norm in [`cosine`].
pub const COSINE_EPS: f64 = 1e-8;

/// A dense `channels x height x width` map of finite `f32` values,
/// channel-major, row-major within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    /// Builds a feature map, validating the buffer length and that every
    /// value is finite. Zero-sized maps are representable; operations that
    /// need at least one pixel reject them individually.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::InvalidInput(format!(
                "feature map buffer holds {} values, expected {}x{}x{} = {}",
                data.len(),
                channels,
                height,
                width,
                expected
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "feature map contains non-finite value {} at flat index {}",
                data[pos], pos
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    /// Contiguous `height*width` slice for one channel.
    pub fn channel(&self, c: usize) -> &[f32] {
        let start = c * self.spatial_len();
        &self.data[start..start + self.spatial_len()]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let len = self.spatial_len();
        let start = c * len;
        &mut self.data[start..start + len]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Consumes the map, returning the raw buffer.
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Largest absolute difference between two same-shaped maps.
    pub fn max_abs_diff(&self, other: &FeatureMap) -> Result<f32> {
        if self.shape() != other.shape() {
            return Err(Error::InvalidInput(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut worst = 0.0f32;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = (a - b).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }
}

/// Integer class labels over a `height x width` grid. `ignore_id` marks
/// positions excluded from every statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    ignore_id: u32,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>, ignore_id: u32) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "mask buffer holds {} labels, expected {}x{} = {}",
                labels.len(),
                height,
                width,
                height * width
            )));
        }
        Ok(Self { height, width, labels, ignore_id })
    }

    /// Uniform single-class mask.
    pub fn filled(height: usize, width: usize, class_id: u32) -> Self {
        Self { height, width, labels: vec![class_id; height * width], ignore_id: DEFAULT_IGNORE_ID }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ignore_id(&self) -> u32 {
        self.ignore_id
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set_label(&mut self, y: usize, x: usize, class_id: u32) {
        self.labels[y * self.width + x] = class_id;
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Distinct class ids present, ascending, excluding `ignore_id`.
    pub fn class_ids(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().filter(|&c| c != self.ignore_id).collect()
    }

    /// Number of positions labeled `class_id` (0 for the ignore id).
    pub fn count_of(&self, class_id: u32) -> usize {
        if class_id == self.ignore_id {
            return 0;
        }
        self.labels.iter().filter(|&&c| c == class_id).count()
    }
}

/// Per-channel mean and population standard deviation, plus the pixel count
/// they were computed over. `count == 0` marks the designated absent result.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStatistics {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub count: usize,
}

impl ChannelStatistics {
    /// Absent-statistics marker for a map with `channels` channels.
    pub fn absent(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![0.0; channels], count: 0 }
    }

    pub fn is_valid(&self) -> bool {
        self.count > 0
    }
}

/// Per-channel mean and population std over the full spatial extent.
///
/// Accumulates in `f64`, sequentially row-major per channel.
pub fn channel_stats(f: &FeatureMap) -> Result<ChannelStatistics> {
    if f.is_empty() {
        return Err(Error::InvalidInput("channel_stats requires a non-empty feature map".into()));
    }
    let n = f.spatial_len();
    let mut mean = Vec::with_capacity(f.channels());
    let mut std = Vec::with_capacity(f.channels());
    for c in 0..f.channels() {
        let ch = f.channel(c);
        let mut sum = 0.0f64;
        for &v in ch {
            sum += v as f64;
        }
        let mu = sum / n as f64;
        let mut sq = 0.0f64;
        for &v in ch {
            let d = v as f64 - mu;
            sq += d * d;
        }
        mean.push(mu as f32);
        std.push((sq / n as f64).sqrt() as f32);
    }
    Ok(ChannelStatistics { mean, std, count: n })
}

/// Per-channel mean and population std over positions labeled `class_id`.
///
/// A class with no pixels (including the ignore id itself) yields the absent
/// result rather than dividing by zero.
pub fn masked_class_stats(
    f: &FeatureMap,
    m: &SegmentationMask,
    class_id: u32,
) -> Result<ChannelStatistics> {
    if m.height() != f.height() || m.width() != f.width() {
        return Err(Error::InvalidInput(format!(
            "mask is {}x{} but feature map is {}x{}",
            m.height(),
            m.width(),
            f.height(),
            f.width()
        )));
    }
    if class_id == m.ignore_id() {
        return Ok(ChannelStatistics::absent(f.channels()));
    }
    let count = m.labels().iter().filter(|&&c| c == class_id).count();
    if count == 0 {
        return Ok(ChannelStatistics::absent(f.channels()));
    }
    let mut mean = Vec::with_capacity(f.channels());
    let mut std = Vec::with_capacity(f.channels());
    for c in 0..f.channels() {
        let ch = f.channel(c);
        let mut sum = 0.0f64;
        for (i, &v) in ch.iter().enumerate() {
            if m.labels()[i] == class_id {
                sum += v as f64;
            }
        }
        let mu = sum / count as f64;
        let mut sq = 0.0f64;
        for (i, &v) in ch.iter().enumerate() {
            if m.labels()[i] == class_id {
                let d = v as f64 - mu;
                sq += d * d;
            }
        }
        mean.push(mu as f32);
        std.push((sq / count as f64).sqrt() as f32);
    }
    Ok(ChannelStatistics { mean, std, count })
}

/// Nearest-neighbor mask resize with floor index mapping: the output label at
/// `(i, j)` is the input label at `(floor(i*H/out_h), floor(j*W/out_w))`.
/// Never invents labels.
pub fn resize_mask_nearest(
    m: &SegmentationMask,
    out_h: usize,
    out_w: usize,
) -> Result<SegmentationMask> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput(format!(
            "mask resize target {}x{} has a zero dimension",
            out_h, out_w
        )));
    }
    if m.height() == 0 || m.width() == 0 {
        return Err(Error::InvalidInput("cannot resize an empty mask".into()));
    }
    let mut labels = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let src_y = i * m.height() / out_h;
        for j in 0..out_w {
            let src_x = j * m.width() / out_w;
            labels.push(m.label(src_y, src_x));
        }
    }
    SegmentationMask::new(out_h, out_w, labels, m.ignore_id())
}

/// Nearest-neighbor resize for feature maps, same floor mapping as
/// [`resize_mask_nearest`], applied per channel.
pub fn resize_feature_nearest(f: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput(format!(
            "feature resize target {}x{} has a zero dimension",
            out_h, out_w
        )));
    }
    if f.height() == 0 || f.width() == 0 {
        return Err(Error::InvalidInput("cannot resize an empty feature map".into()));
    }
    let mut out = FeatureMap::zeros(f.channels(), out_h, out_w);
    for c in 0..f.channels() {
        for i in 0..out_h {
            let src_y = i * f.height() / out_h;
            for j in 0..out_w {
                let src_x = j * f.width() / out_w;
                out.set(c, i, j, f.get(c, src_y, src_x));
            }
        }
    }
    Ok(out)
}

/// Dense row-major `rows x cols` matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix buffer holds {} values, expected {}x{} = {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "matrix contains non-finite value {} at flat index {}",
                data[pos], pos
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::InvalidInput("ragged rows in matrix literal".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(n, d, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f32) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `self * other`, accumulating each dot product in `f64`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::InvalidInput(format!(
                "matmul dimension mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for c in 0..other.cols {
                let mut acc = 0.0f64;
                for k in 0..self.cols {
                    acc += self.get(r, k) as f64 * other.get(k, c) as f64;
                }
                out.set(r, c, acc as f32);
            }
        }
        Ok(out)
    }

    /// `self * other^T`; `other` must share the column count.
    pub fn matmul_transpose(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::InvalidInput(format!(
                "matmul_transpose dimension mismatch: {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for c in 0..other.rows {
                let b = other.row(c);
                let mut acc = 0.0f64;
                for k in 0..self.cols {
                    acc += a[k] as f64 * b[k] as f64;
                }
                out.set(r, c, acc as f32);
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, factor: f32) -> Matrix {
        let data = self.data.iter().map(|v| v * factor).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f32> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::InvalidInput(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut worst = 0.0f32;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = (a - b).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }
}

/// Row-wise softmax with per-row max subtraction. Exponentials and the row
/// sum are evaluated in `f64`; each row of the result sums to 1 within f32
/// rounding and the result is invariant to adding a constant to a row.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        if row.is_empty() {
            continue;
        }
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut exps = Vec::with_capacity(row.len());
        let mut sum = 0.0f64;
        for &v in row {
            let e = ((v - max) as f64).exp();
            exps.push(e);
            sum += e;
        }
        for (c, e) in exps.into_iter().enumerate() {
            out.set(r, c, (e / sum) as f32);
        }
    }
    out
}

/// Cosine similarity with `1e-8` added to each norm, clamped to `[-1, 1]`.
/// Zero vectors therefore yield 0 rather than NaN.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::InvalidInput(format!(
            "cosine dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot += a as f64 * b as f64;
        nu += a as f64 * a as f64;
        nv += b as f64 * b as f64;
    }
    let denom = (nu.sqrt() + COSINE_EPS) * (nv.sqrt() + COSINE_EPS);
    Ok((dot / denom).clamp(-1.0, 1.0) as f32)
}
