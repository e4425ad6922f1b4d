//! Adaptive instance normalization, globally or per segmentation class.
//!
//! The core transform re-centers content activations to style statistics,
//! channel by channel:
//!
//! ```text
//! out = sigma_style * (x - mu_content) / (sigma_content + 1e-5) + mu_style
//! ```
//!
//! The class-wise variant computes those statistics per mask class on both
//! sides, so each semantic region is matched to the statistics of the same
//! class in the style, not to the global palette. Classes present in the
//! content but unusable on the style side are handled by a fallback policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{
    channel_stats, masked_class_stats, ChannelStatistics, FeatureMap, SegmentationMask,
};
use crate::{Error, Result};

/// Epsilon added to the content-side standard deviation before dividing.
/// The style side is used as a pure scale factor and may be zero.
pub const SIGMA_EPS: f32 = 1e-5;

/// What to do at positions whose class has no usable style statistics
/// (absent from the style mask, or zero count after resizing).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackPolicy {
    /// Normalize with the content class statistics but the style's global
    /// statistics, so unmatched classes still move toward the target palette.
    #[default]
    GlobalStyleStats,
    /// Leave unmatched positions untouched.
    Identity,
}

/// Content and style statistics for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatsEntry {
    pub content: ChannelStatistics,
    pub style: ChannelStatistics,
    /// True iff the class has at least one pixel on both sides.
    pub valid: bool,
}

/// Per-class statistics over a content/style pair, keyed by class id in
/// ascending order. Ignore-id positions contribute to no entry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassStatsTable {
    entries: BTreeMap<u32, ClassStatsEntry>,
}

impl ClassStatsTable {
    /// Computes statistics for every class present in either mask.
    pub fn build(
        content: &FeatureMap,
        content_mask: &SegmentationMask,
        style: &FeatureMap,
        style_mask: &SegmentationMask,
    ) -> Result<Self> {
        if content.channels() != style.channels() {
            return Err(Error::InvalidInput(format!(
                "content has {} channels but style has {}",
                content.channels(),
                style.channels()
            )));
        }
        let mut classes = content_mask.class_ids();
        classes.extend(style_mask.class_ids());
        let mut entries = BTreeMap::new();
        for class_id in classes {
            let c = masked_class_stats(content, content_mask, class_id)?;
            let s = masked_class_stats(style, style_mask, class_id)?;
            let valid = c.is_valid() && s.is_valid();
            entries.insert(class_id, ClassStatsEntry { content: c, style: s, valid });
        }
        Ok(Self { entries })
    }

    pub fn get(&self, class_id: u32) -> Option<&ClassStatsEntry> {
        self.entries.get(&class_id)
    }

    /// Class ids with valid statistics on both sides, ascending.
    pub fn valid_classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().filter(|(_, e)| e.valid).map(|(&c, _)| c)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }
}

#[inline]
fn normalize(x: f32, from: (f32, f32), to: (f32, f32)) -> f32 {
    to.1 * (x - from.0) / (from.1 + SIGMA_EPS) + to.0
}

/// Global adaptive instance normalization: every channel of `content` is
/// shifted and scaled to match `style`'s per-channel mean and std.
pub fn adain(content: &FeatureMap, style: &FeatureMap) -> Result<FeatureMap> {
    if content.channels() != style.channels() {
        return Err(Error::InvalidInput(format!(
            "content has {} channels but style has {}",
            content.channels(),
            style.channels()
        )));
    }
    let cs = channel_stats(content)?;
    let ss = channel_stats(style)?;
    let mut out = content.clone();
    for c in 0..content.channels() {
        let from = (cs.mean[c], cs.std[c]);
        let to = (ss.mean[c], ss.std[c]);
        for v in out.channel_mut(c) {
            *v = normalize(*v, from, to);
        }
    }
    FeatureMap::new(content.channels(), content.height(), content.width(), out.into_data())
}

/// Class-wise adaptive instance normalization.
///
/// Each position is normalized with the statistics of its own class on both
/// sides. Ignore-id positions are always copied verbatim. Positions whose
/// class lacks valid style statistics follow `fallback`.
pub fn class_adain(
    content: &FeatureMap,
    style: &FeatureMap,
    content_mask: &SegmentationMask,
    style_mask: &SegmentationMask,
    fallback: FallbackPolicy,
) -> Result<FeatureMap> {
    if content_mask.height() != content.height() || content_mask.width() != content.width() {
        return Err(Error::InvalidInput(format!(
            "content mask is {}x{} but content is {}x{}",
            content_mask.height(),
            content_mask.width(),
            content.height(),
            content.width()
        )));
    }
    if style_mask.height() != style.height() || style_mask.width() != style.width() {
        return Err(Error::InvalidInput(format!(
            "style mask is {}x{} but style is {}x{}",
            style_mask.height(),
            style_mask.width(),
            style.height(),
            style.width()
        )));
    }
    let table = ClassStatsTable::build(content, content_mask, style, style_mask)?;
    let style_global = match fallback {
        FallbackPolicy::GlobalStyleStats => Some(channel_stats(style)?),
        FallbackPolicy::Identity => None,
    };

    let mut out = content.clone();
    let (h, w) = (content.height(), content.width());
    for c in 0..content.channels() {
        for y in 0..h {
            for x in 0..w {
                let label = content_mask.label(y, x);
                if label == content_mask.ignore_id() {
                    continue;
                }
                // Every non-ignore content label has a table entry with a
                // nonzero content-side count by construction.
                let entry = table.get(label).ok_or_else(|| {
                    Error::InvalidState(format!("class {label} missing from stats table"))
                })?;
                let v = out.get(c, y, x);
                let mapped = if entry.valid {
                    normalize(
                        v,
                        (entry.content.mean[c], entry.content.std[c]),
                        (entry.style.mean[c], entry.style.std[c]),
                    )
                } else {
                    match (fallback, &style_global) {
                        (FallbackPolicy::GlobalStyleStats, Some(g)) => normalize(
                            v,
                            (entry.content.mean[c], entry.content.std[c]),
                            (g.mean[c], g.std[c]),
                        ),
                        _ => v,
                    }
                };
                out.set(c, y, x, mapped);
            }
        }
    }
    FeatureMap::new(content.channels(), h, w, out.into_data())
}

/// Per-step form of [`class_adain`] as used inside the diffusion loop: the
/// evolving output latent is matched against the style stream's latent at
/// the same step, after the attention-hooked denoise update.
pub fn class_adain_step(
    z_out: &FeatureMap,
    z_style: &FeatureMap,
    out_mask: &SegmentationMask,
    style_mask: &SegmentationMask,
    fallback: FallbackPolicy,
) -> Result<FeatureMap> {
    class_adain(z_out, z_style, out_mask, style_mask, fallback)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DEFAULT_IGNORE_ID;

    fn fm(c: usize, h: usize, w: usize, data: &[f32]) -> FeatureMap {
        FeatureMap::new(c, h, w, data.to_vec()).unwrap()
    }

    fn mask(h: usize, w: usize, labels: &[u32]) -> SegmentationMask {
        SegmentationMask::new(h, w, labels.to_vec(), DEFAULT_IGNORE_ID).unwrap()
    }

    #[test]
    fn adain_moves_stats_to_style() {
        let content = fm(1, 2, 2, &[1.0, 3.0, 5.0, 7.0]);
        let style = fm(1, 2, 2, &[10.0, 10.0, 20.0, 20.0]);
        let out = adain(&content, &style).unwrap();
        let s = channel_stats(&out).unwrap();
        // Style stats: mean 15, std 5.
        assert!((s.mean[0] - 15.0).abs() < 1e-4);
        assert!((s.std[0] - 5.0).abs() < 1e-3);
    }

    #[test]
    fn adain_identical_inputs_is_near_identity() {
        // Only the 1e-5 denominator epsilon perturbs the result.
        let x = fm(2, 2, 2, &[0.2, 0.4, 0.6, 0.8, -1.0, 0.0, 1.0, 2.0]);
        let out = adain(&x, &x).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 1e-4);
    }

    #[test]
    fn adain_constant_style_collapses_to_style_mean() {
        let content = fm(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let style = fm(1, 2, 2, &[7.0, 7.0, 7.0, 7.0]);
        let out = adain(&content, &style).unwrap();
        for &v in out.data() {
            assert_eq!(v, 7.0);
        }
    }

    #[test]
    fn adain_rejects_channel_mismatch() {
        let a = FeatureMap::zeros(1, 2, 2);
        let b = FeatureMap::zeros(2, 2, 2);
        assert!(adain(&a, &b).is_err());
    }

    #[test]
    fn class_adain_hand_computed() {
        // Two classes, each with two pixels; the output must reproduce the
        // style values because deviations map one-to-one.
        let content = fm(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let style = fm(1, 2, 2, &[10.0, 12.0, 20.0, 22.0]);
        let m = mask(2, 2, &[0, 0, 1, 1]);
        let out = class_adain(&content, &style, &m, &m, FallbackPolicy::GlobalStyleStats).unwrap();
        let expected = [10.0f32, 12.0, 20.0, 22.0];
        for (v, e) in out.data().iter().zip(expected.iter()) {
            assert!((v - e).abs() < 1e-3, "got {v}, expected {e}");
        }
    }

    #[test]
    fn class_adain_single_class_equals_global() {
        let content = fm(2, 2, 3, &[0.1, 0.9, 0.4, 0.3, 0.8, 0.2, 1.0, -1.0, 0.5, 0.0, 0.25, 0.75]);
        let style = fm(2, 2, 3, &[0.6, 0.2, 0.9, 0.1, 0.5, 0.3, -0.5, 1.5, 0.0, 1.0, 0.5, 0.25]);
        let m = mask(2, 3, &[0, 0, 0, 0, 0, 0]);
        let a = class_adain(&content, &style, &m, &m, FallbackPolicy::GlobalStyleStats).unwrap();
        let b = adain(&content, &style).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
    }

    #[test]
    fn class_adain_global_fallback_uses_style_global_stats() {
        // Class 1 exists only in the content; its positions are normalized
        // against the style's global statistics (mean 16, std sqrt(26)).
        let content = fm(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let style = fm(1, 2, 2, &[10.0, 12.0, 20.0, 22.0]);
        let cm = mask(2, 2, &[0, 0, 1, 1]);
        let sm = mask(2, 2, &[0, 0, 0, 0]);
        let out = class_adain(&content, &style, &cm, &sm, FallbackPolicy::GlobalStyleStats).unwrap();
        let sqrt26 = 26.0f32.sqrt();
        let expect3 = 16.0 - sqrt26 * (0.5 / (0.5 + SIGMA_EPS));
        let expect4 = 16.0 + sqrt26 * (0.5 / (0.5 + SIGMA_EPS));
        assert!((out.get(0, 1, 0) - expect3).abs() < 1e-4);
        assert!((out.get(0, 1, 1) - expect4).abs() < 1e-4);
    }

    #[test]
    fn class_adain_identity_fallback_preserves_unmatched() {
        let content = fm(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let style = fm(1, 2, 2, &[10.0, 12.0, 20.0, 22.0]);
        let cm = mask(2, 2, &[0, 0, 1, 1]);
        let sm = mask(2, 2, &[0, 0, 0, 0]);
        let out = class_adain(&content, &style, &cm, &sm, FallbackPolicy::Identity).unwrap();
        assert_eq!(out.get(0, 1, 0), 3.0);
        assert_eq!(out.get(0, 1, 1), 4.0);
    }

    #[test]
    fn class_adain_ignore_positions_are_verbatim() {
        let content = fm(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let style = fm(1, 2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let cm = mask(2, 2, &[0, DEFAULT_IGNORE_ID, 0, 0]);
        let sm = mask(2, 2, &[0, 0, 0, 0]);
        let out = class_adain(&content, &style, &cm, &sm, FallbackPolicy::GlobalStyleStats).unwrap();
        assert_eq!(out.get(0, 0, 1), 2.0);
    }

    #[test]
    fn class_adain_step_is_idempotent_within_epsilon() {
        let content = fm(1, 2, 4, &[0.5, 1.5, 2.0, 1.0, 4.0, 6.0, 5.0, 5.5]);
        let style = fm(1, 2, 4, &[3.0, 3.5, 2.5, 3.2, 9.0, 8.0, 8.5, 9.5]);
        let m = mask(2, 4, &[0, 0, 0, 0, 1, 1, 1, 1]);
        let once =
            class_adain_step(&content, &style, &m, &m, FallbackPolicy::GlobalStyleStats).unwrap();
        let twice =
            class_adain_step(&once, &style, &m, &m, FallbackPolicy::GlobalStyleStats).unwrap();
        assert!(twice.max_abs_diff(&once).unwrap() < 1e-4);
    }

    #[test]
    fn class_adain_isolates_classes_under_identity_fallback() {
        // Editing style pixels of class 0 must not move class-1 outputs.
        let content = fm(1, 2, 4, &[0.5, 1.5, 2.0, 1.0, 4.0, 6.0, 5.0, 5.5]);
        let m = mask(2, 4, &[0, 0, 0, 0, 1, 1, 1, 1]);
        let style_a = fm(1, 2, 4, &[3.0, 3.5, 2.5, 3.2, 9.0, 8.0, 8.5, 9.5]);
        let style_b = fm(1, 2, 4, &[-1.0, 0.0, 1.0, 2.0, 9.0, 8.0, 8.5, 9.5]);
        let out_a = class_adain(&content, &style_a, &m, &m, FallbackPolicy::Identity).unwrap();
        let out_b = class_adain(&content, &style_b, &m, &m, FallbackPolicy::Identity).unwrap();
        for x in 0..4 {
            let d = (out_a.get(0, 1, x) - out_b.get(0, 1, x)).abs();
            assert!(d <= 1e-6, "class-1 position {x} moved by {d}");
        }
    }

    #[test]
    fn class_adain_rejects_mask_mismatch() {
        let content = FeatureMap::zeros(1, 2, 2);
        let style = FeatureMap::zeros(1, 2, 2);
        let good = mask(2, 2, &[0, 0, 0, 0]);
        let bad = mask(3, 2, &[0, 0, 0, 0, 0, 0]);
        assert!(class_adain(&content, &style, &bad, &good, FallbackPolicy::Identity).is_err());
        assert!(class_adain(&content, &style, &good, &bad, FallbackPolicy::Identity).is_err());
    }

    #[test]
    fn stats_table_validity_requires_both_sides() {
        let content = fm(1, 1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let style = fm(1, 1, 4, &[5.0, 6.0, 7.0, 8.0]);
        let cm = mask(1, 4, &[0, 0, 1, 1]);
        let sm = mask(1, 4, &[0, 0, 2, 2]);
        let table = ClassStatsTable::build(&content, &cm, &style, &sm).unwrap();
        assert!(table.get(0).unwrap().valid);
        assert!(!table.get(1).unwrap().valid);
        assert!(!table.get(2).unwrap().valid);
        let valid: Vec<u32> = table.valid_classes().collect();
        assert_eq!(valid, vec![0]);
    }
}
