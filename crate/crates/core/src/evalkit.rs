//! Retrieval evaluation with per-protocol junk masking, CMC and mAP.
//!
//! Junk gallery items are removed from the ranking entirely; they count as
//! neither hits nor misses. Ties in distance are broken by ascending gallery
//! index so results do not depend on sort stability or thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Any same-identity item from another camera is a match.
    General,
    /// Only same-outfit matches count; other outfits are junk.
    SameClothes,
    /// Only different-outfit matches count; the same outfit is junk.
    ClothChanging,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::General, Protocol::SameClothes, Protocol::ClothChanging];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::General => "general",
            Protocol::SameClothes => "same_clothes",
            Protocol::ClothChanging => "cloth_changing",
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "protocol",
                    format!("unknown protocol `{s}` (valid: general, same_clothes, cloth_changing)"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub pid: u32,
    pub clothes_id: u32,
    pub camera_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `cmc[k-1]` is Rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_valid_queries: usize,
    /// Queries left with no positive after junk removal.
    pub num_skipped: usize,
}

impl EvalResult {
    /// Rank-`k` accuracy (1-based); saturates at the curve's end.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k.clamp(1, self.cmc.len()) - 1]
    }
}

/// Cosine distance `1 - <q_i, g_j>` between L2-normalised rows.
pub fn distance_matrix(query: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    let (q, d) = (query.rows(), query.cols());
    let (g, d2) = (gallery.rows(), gallery.cols());
    if query.ndim() != 2 || gallery.ndim() != 2 || d != d2 {
        return Err(Error::Dimension {
            op: "distance_matrix",
            lhs: query.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    for (name, t) in [("query", query), ("gallery", gallery)] {
        for i in 0..t.rows() {
            let norm = t.row(i).iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::contract(format!(
                    "{name} row {i} has norm {norm:.6}, expected unit length"
                )));
            }
        }
    }
    let mut out = Vec::with_capacity(q * g);
    for i in 0..q {
        let qi = query.row(i);
        for j in 0..g {
            let dot: f64 = qi
                .iter()
                .zip(gallery.row(j))
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum();
            out.push((1.0 - dot) as f32);
        }
    }
    Tensor::new(vec![q, g], out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryMasks {
    pub junk: Vec<bool>,
    pub positive: Vec<bool>,
}

pub fn validity_masks(query: &SampleMeta, gallery: &[SampleMeta], protocol: Protocol) -> QueryMasks {
    let mut junk = Vec::with_capacity(gallery.len());
    let mut positive = Vec::with_capacity(gallery.len());
    for g in gallery {
        let same_pid = g.pid == query.pid;
        let same_cam = g.camera_id == query.camera_id;
        let same_clothes = g.clothes_id == query.clothes_id;
        let is_junk = same_pid
            && (same_cam
                || match protocol {
                    Protocol::General => false,
                    Protocol::SameClothes => !same_clothes,
                    Protocol::ClothChanging => same_clothes,
                });
        junk.push(is_junk);
        positive.push(same_pid && !is_junk);
    }
    QueryMasks { junk, positive }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryScore {
    /// `hits[k-1]`: a positive appears within the top k.
    pub hits: Vec<bool>,
    pub average_precision: f64,
}

/// Scores one query; `None` when no positive survives junk removal.
pub fn cmc_map(dist_row: &[f32], masks: &QueryMasks, kmax: usize) -> Option<QueryScore> {
    let mut order: Vec<usize> = (0..dist_row.len()).filter(|j| !masks.junk[*j]).collect();
    order.sort_by(|a, b| dist_row[*a].total_cmp(&dist_row[*b]).then(a.cmp(b)));
    let total_pos = order.iter().filter(|j| masks.positive[**j]).count();
    if total_pos == 0 {
        return None;
    }
    let mut first_hit = None;
    let mut found = 0usize;
    let mut precision_sum = 0.0;
    for (rank0, j) in order.iter().enumerate() {
        if masks.positive[*j] {
            found += 1;
            precision_sum += found as f64 / (rank0 + 1) as f64;
            first_hit.get_or_insert(rank0);
        }
    }
    let first = first_hit.expect("at least one positive");
    Some(QueryScore {
        hits: (0..kmax).map(|k| first <= k).collect(),
        average_precision: precision_sum / total_pos as f64,
    })
}

/// Mean CMC and mAP over queries with at least one valid positive.
/// `threads == 0` uses rayon's global pool size.
pub fn evaluate(
    query: &Tensor,
    gallery: &Tensor,
    query_meta: &[SampleMeta],
    gallery_meta: &[SampleMeta],
    protocol: Protocol,
    kmax: usize,
    threads: usize,
) -> Result<EvalResult> {
    if kmax == 0 {
        return Err(Error::contract("kmax must be at least 1"));
    }
    if query.rows() != query_meta.len() || gallery.rows() != gallery_meta.len() {
        return Err(Error::contract("embedding rows and metadata length differ"));
    }
    let dist = distance_matrix(query, gallery)?;
    let score = |i: usize| {
        let masks = validity_masks(&query_meta[i], gallery_meta, protocol);
        cmc_map(dist.row(i), &masks, kmax)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Eval(format!("thread pool: {e}")))?;
    let scores: Vec<Option<QueryScore>> =
        pool.install(|| (0..query_meta.len()).into_par_iter().map(score).collect());
    aggregate(&scores, kmax)
}

fn aggregate(scores: &[Option<QueryScore>], kmax: usize) -> Result<EvalResult> {
    let valid: Vec<&QueryScore> = scores.iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::Eval("no query has a valid positive in the gallery".into()));
    }
    let n = valid.len() as f64;
    let mut cmc = vec![0.0; kmax];
    for s in &valid {
        for (c, hit) in cmc.iter_mut().zip(&s.hits) {
            if *hit {
                *c += 1.0;
            }
        }
    }
    cmc.iter_mut().for_each(|c| *c /= n);
    let map = valid.iter().map(|s| s.average_precision).sum::<f64>() / n;
    Ok(EvalResult {
        cmc,
        map,
        num_valid_queries: valid.len(),
        num_skipped: scores.len() - valid.len(),
    })
}
