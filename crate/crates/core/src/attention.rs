//! Self-attention, cross-image attention, and the similarity filter that
//! decides per query row whether style features may be injected.
//!
//! Raw attention logits are the unscaled `Q * K^T`; the `1/sqrt(d)` factor is
//! applied at softmax time only. Correspondences are row argmaxes of the raw
//! logits (scaling cannot change an argmax), similarities are cosines between
//! the content value vector of a query and the style value vector of its
//! correspondent, and the filter removes exactly `floor(p*n)` of the
//! lowest-similarity rows, replacing them with the content-side attention
//! result instead of the style-injected one.

use serde::{Deserialize, Serialize};

use crate::tensor::{cosine, softmax_rows, Matrix};
use crate::{Error, Result};

/// Which stream a set of projections was harvested from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    Content,
    Style,
    Output,
}

/// Query/key/value projections harvested at one attention site. All three
/// matrices have one row per spatial position and share the head dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProjections {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub site_id: String,
    pub source: SourceTag,
}

impl AttentionProjections {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, site_id: String, source: SourceTag) -> Result<Self> {
        let n = q.rows();
        let d = q.cols();
        if k.rows() != n || v.rows() != n {
            return Err(Error::InvalidInput(format!(
                "projection row counts differ: q {}, k {}, v {}",
                n,
                k.rows(),
                v.rows()
            )));
        }
        if k.cols() != d || v.cols() != d {
            return Err(Error::InvalidInput(format!(
                "projection dims differ: q {}, k {}, v {}",
                d,
                k.cols(),
                v.cols()
            )));
        }
        Ok(Self { q, k, v, site_id, source })
    }

    /// Spatial positions (rows).
    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    /// Head dimension.
    pub fn dim(&self) -> usize {
        self.q.cols()
    }
}

/// Raw, unscaled attention logits `Q * K^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    logits: Matrix,
}

impl AttentionMap {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn queries(&self) -> usize {
        self.logits.rows()
    }

    pub fn keys(&self) -> usize {
        self.logits.cols()
    }
}

/// For each query row, the key index it attends to most.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    indices: Vec<usize>,
}

impl CorrespondenceMap {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-query cosine similarities, clamped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityScores {
    values: Vec<f32>,
}

impl SimilarityScores {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(&v) = values.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidInput(format!(
                "similarity score {v} outside [-1, 1]"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Outcome of percentile filtering: exactly `floor(p*n)` positions have
/// `keep == false`, ties broken toward smaller indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecision {
    /// Similarity of the highest filtered position; `-inf` when none are.
    pub tau: f32,
    pub keep: Vec<bool>,
    pub p: f64,
}

impl FilterDecision {
    pub fn filtered_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }
}

/// Raw logits between a query projection and a key projection. The head
/// dimensions must agree; query and key row counts may differ.
pub fn attention_logits(
    q_src: &AttentionProjections,
    k_src: &AttentionProjections,
) -> Result<AttentionMap> {
    if q_src.dim() != k_src.dim() {
        return Err(Error::InvalidInput(format!(
            "attention head dims differ: {} vs {}",
            q_src.dim(),
            k_src.dim()
        )));
    }
    Ok(AttentionMap { logits: q_src.q.matmul_transpose(&k_src.k)? })
}

fn attention_output(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols() == 0 {
        return Err(Error::InvalidInput("attention requires a nonzero head dimension".into()));
    }
    let scale = 1.0 / (q.cols() as f32).sqrt();
    let logits = q.matmul_transpose(k)?.scaled(scale);
    softmax_rows(&logits).matmul(v)
}

/// Vanilla self-attention over one projection set:
/// `softmax(Q*K^T / sqrt(d)) * V`.
pub fn self_attention(p: &AttentionProjections) -> Result<Matrix> {
    attention_output(&p.q, &p.k, &p.v)
}

/// Cross-image attention: queries from one stream, keys and values from
/// another. Each output row is a convex combination of the key stream's
/// value rows.
pub fn cross_image_attention(
    q_src: &AttentionProjections,
    kv_src: &AttentionProjections,
) -> Result<Matrix> {
    if q_src.dim() != kv_src.dim() {
        return Err(Error::InvalidInput(format!(
            "attention head dims differ: {} vs {}",
            q_src.dim(),
            kv_src.dim()
        )));
    }
    attention_output(&q_src.q, &kv_src.k, &kv_src.v)
}

/// Row argmax of the raw logits; ties resolve to the smallest key index, so
/// the result is deterministic and identical under any positive rescaling of
/// the logits.
pub fn max_correspondence(map: &AttentionMap) -> Result<CorrespondenceMap> {
    if map.keys() == 0 {
        return Err(Error::InvalidInput("correspondence requires at least one key".into()));
    }
    let mut indices = Vec::with_capacity(map.queries());
    for r in 0..map.queries() {
        let row = map.logits.row(r);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        indices.push(best);
    }
    Ok(CorrespondenceMap { indices })
}

/// Similarity of each query's content value vector to the style value vector
/// of its correspondent.
pub fn value_similarity(
    v_content: &Matrix,
    v_style: &Matrix,
    m: &CorrespondenceMap,
) -> Result<SimilarityScores> {
    if m.len() != v_content.rows() {
        return Err(Error::InvalidInput(format!(
            "correspondence has {} entries for {} content rows",
            m.len(),
            v_content.rows()
        )));
    }
    let mut values = Vec::with_capacity(m.len());
    for (i, &j) in m.indices().iter().enumerate() {
        if j >= v_style.rows() {
            return Err(Error::InvalidInput(format!(
                "correspondence index {} out of range for {} style rows",
                j,
                v_style.rows()
            )));
        }
        values.push(cosine(v_content.row(i), v_style.row(j))?);
    }
    SimilarityScores::new(values)
}

/// Marks exactly `floor(p*n)` lowest-similarity positions as filtered, ties
/// broken toward smaller indices. `tau` is the similarity of the k-th
/// smallest score (`-inf` when k is 0).
pub fn percentile_filter(s: &SimilarityScores, p: f64) -> Result<FilterDecision> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!("filter fraction p={p} outside [0, 1]")));
    }
    let n = s.len();
    let k = ((p * n as f64).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.values()[a].total_cmp(&s.values()[b]).then(a.cmp(&b)));
    let mut keep = vec![true; n];
    for &i in order.iter().take(k) {
        keep[i] = false;
    }
    let tau = if k == 0 { f32::NEG_INFINITY } else { s.values()[order[k - 1]] };
    Ok(FilterDecision { tau, keep, p })
}

/// Selectively filtered cross-image attention.
///
/// Both branches are fully formed: the style-injected branch
/// `softmax(Q_c*K_s^T/sqrt(d))*V_s` and the content branch
/// `softmax(Q_c*K_c^T/sqrt(d))*V_c`. The filter decision then selects, per
/// query row, the style branch for kept rows and the content branch for
/// filtered ones. Row selection is exact because softmax normalizes per row.
pub fn filtered_cross_attention(
    content: &AttentionProjections,
    style: &AttentionProjections,
    p: f64,
) -> Result<Matrix> {
    let cross = cross_image_attention(content, style)?;
    let own = self_attention(content)?;
    let logits = attention_logits(content, style)?;
    let corr = max_correspondence(&logits)?;
    let sims = value_similarity(&content.v, &style.v, &corr)?;
    let decision = percentile_filter(&sims, p)?;

    let mut out = Matrix::zeros(cross.rows(), cross.cols());
    for r in 0..cross.rows() {
        let src = if decision.keep[r] { cross.row(r) } else { own.row(r) };
        for (c, &v) in src.iter().enumerate() {
            out.set(r, c, v);
        }
    }
    Ok(out)
}
