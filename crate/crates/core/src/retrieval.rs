//! Open-set retrieval: distances between sequence embeddings and the
//! Rank-k / mAP / mINP report.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity of one gait sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeqId {
    pub subject: String,
    pub sequence: String,
}

impl SeqId {
    pub fn new(subject: impl Into<String>, sequence: impl Into<String>) -> Self {
        SeqId {
            subject: subject.into(),
            sequence: sequence.into(),
        }
    }
}

impl std::fmt::Display for SeqId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.subject, self.sequence)
    }
}

/// Sequence embeddings `[count, strips, dim]`, one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub strips: usize,
    pub dim: usize,
    pub ids: Vec<SeqId>,
    pub data: Vec<f32>,
}

impl EmbeddingSet {
    pub fn new(strips: usize, dim: usize) -> Self {
        EmbeddingSet {
            strips,
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.strips * self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: SeqId, row: &[f32]) -> Result<()> {
        if row.len() != self.width() {
            return Err(Error::shape(
                "EmbeddingSet::push",
                format!("row of {} values for {}x{} embeddings", row.len(), self.strips, self.dim),
            ));
        }
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width()..][..self.width()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::Config(format!("unknown metric {s:?} (euclidean | cosine)"))),
        }
    }
}

/// Row-major `[rows, cols]` distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Number of cosine distances that involved a zero-norm vector and were set to 1.
    pub zero_norm: usize,
}

impl DistanceMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..][..self.cols]
    }
}

/// Distances between the concatenated strip embeddings of `q` and `g`.
pub fn pairwise_distance(q: &EmbeddingSet, g: &EmbeddingSet, metric: Metric) -> Result<DistanceMatrix> {
    if q.strips != g.strips || q.dim != g.dim {
        return Err(Error::shape(
            "pairwise_distance",
            format!("probe {}x{} vs gallery {}x{}", q.strips, q.dim, g.strips, g.dim),
        ));
    }
    let norm = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let gnorm: Vec<f64> = (0..g.len()).map(|j| norm(g.row(j))).collect();
    let rows: Vec<(Vec<f64>, usize)> = (0..q.len())
        .into_par_iter()
        .map(|i| {
            let a = q.row(i);
            let an = norm(a);
            let mut zero = 0;
            let row = (0..g.len())
                .map(|j| {
                    let b = g.row(j);
                    match metric {
                        Metric::Euclidean => a
                            .iter()
                            .zip(b)
                            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                            .sum::<f64>()
                            .sqrt(),
                        Metric::Cosine => {
                            if an == 0.0 || gnorm[j] == 0.0 {
                                zero += 1;
                                return 1.0;
                            }
                            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
                            1.0 - dot / (an * gnorm[j])
                        }
                    }
                })
                .collect();
            (row, zero)
        })
        .collect();
    let zero_norm = rows.iter().map(|r| r.1).sum();
    if zero_norm > 0 {
        log::warn!("{zero_norm} cosine distances involved a zero-norm embedding; set to 1");
    }
    Ok(DistanceMatrix {
        rows: q.len(),
        cols: g.len(),
        values: rows.into_iter().flat_map(|r| r.0).collect(),
        zero_norm,
    })
}

/// Scores for one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryScore {
    /// 1-based rank of the first correct match.
    pub first_hit: usize,
    /// Average precision in `[0, 1]`.
    pub ap: f64,
    /// Inverse negative penalty in `[0, 1]`.
    pub inp: f64,
}

/// Ranks the candidates with `valid[j]` by ascending distance (ties by index)
/// and scores them. `None` when no valid candidate is a positive.
pub fn score_query(dist: &[f64], positive: &[bool], valid: &[bool]) -> Option<QueryScore> {
    let mut order: Vec<usize> = (0..dist.len()).filter(|&j| valid[j]).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let npos = order.iter().filter(|&&j| positive[j]).count();
    if npos == 0 {
        return None;
    }
    let (mut hits, mut prec_sum, mut first, mut last) = (0usize, 0.0, 0usize, 0usize);
    for (r, &j) in order.iter().enumerate() {
        if positive[j] {
            hits += 1;
            prec_sum += hits as f64 / (r + 1) as f64;
            if first == 0 {
                first = r + 1;
            }
            last = r + 1;
        }
    }
    Some(QueryScore {
        first_hit: first,
        ap: prec_sum / npos as f64,
        inp: npos as f64 / last as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query: SeqId,
    pub first_hit: usize,
    pub ap: f64,
    pub inp: f64,
}

/// All values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub rank_k: Vec<(usize, f64)>,
    pub map: f64,
    pub minp: f64,
    pub queries: Vec<QueryRow>,
    /// Probes without any gallery positive; not part of the averages.
    pub excluded: Vec<SeqId>,
    pub zero_norm: usize,
}

impl RetrievalReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.rank_k.iter().find(|r| r.0 == k).map(|r| r.1)
    }

    pub fn csv_header(&self) -> String {
        let mut h: Vec<String> = self.rank_k.iter().map(|(k, _)| format!("rank{k}")).collect();
        h.push("map".into());
        h.push("minp".into());
        h.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut v: Vec<String> = self.rank_k.iter().map(|(_, a)| format!("{a:.4}")).collect();
        v.push(format!("{:.4}", self.map));
        v.push(format!("{:.4}", self.minp));
        format!("{}\n{}\n", self.csv_header(), v.join(","))
    }

    pub fn to_table(&self) -> String {
        let mut cols: Vec<(String, f64)> = self.rank_k.iter().map(|&(k, a)| (format!("Rank-{k}"), a)).collect();
        cols.push(("mAP".into(), self.map));
        cols.push(("mINP".into(), self.minp));
        let (mut head, mut vals) = (String::new(), String::new());
        for (name, v) in &cols {
            let _ = write!(head, "{name:>9}");
            let _ = write!(vals, "{v:>9.2}");
        }
        let mut out = format!("{head}\n{vals}\n");
        let _ = writeln!(out, "queries: {}  excluded: {}", self.queries.len(), self.excluded.len());
        out
    }
}

/// Scores every probe against the gallery. A probe's own sequence (same
/// subject and sequence id) is never a candidate; probes with no positive
/// left are excluded and listed.
pub fn evaluate(probe: &EmbeddingSet, gallery: &EmbeddingSet, metric: Metric, ks: &[usize]) -> Result<RetrievalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("rank cutoffs must be positive, got {ks:?}")));
    }
    if gallery.is_empty() {
        return Err(Error::Protocol("gallery is empty".into()));
    }
    let dist = pairwise_distance(probe, gallery, metric)?;
    let scored: Vec<Option<QueryScore>> = (0..probe.len())
        .into_par_iter()
        .map(|i| {
            let q = &probe.ids[i];
            let positive: Vec<bool> = gallery.ids.iter().map(|g| g.subject == q.subject).collect();
            let valid: Vec<bool> = gallery.ids.iter().map(|g| g != q).collect();
            score_query(dist.row(i), &positive, &valid)
        })
        .collect();
    let mut queries = Vec::new();
    let mut excluded = Vec::new();
    for (id, s) in probe.ids.iter().zip(scored) {
        match s {
            Some(s) => queries.push(QueryRow {
                query: id.clone(),
                first_hit: s.first_hit,
                ap: s.ap,
                inp: s.inp,
            }),
            None => excluded.push(id.clone()),
        }
    }
    if !excluded.is_empty() {
        log::warn!("{} probes have no gallery positive and were excluded", excluded.len());
    }
    let n = queries.len().max(1) as f64;
    let mut sorted_ks = ks.to_vec();
    sorted_ks.sort_unstable();
    sorted_ks.dedup();
    let rank_k = sorted_ks
        .iter()
        .map(|&k| (k, 100.0 * queries.iter().filter(|q| q.first_hit <= k).count() as f64 / n))
        .collect();
    Ok(RetrievalReport {
        rank_k,
        map: 100.0 * queries.iter().map(|q| q.ap).sum::<f64>() / n,
        minp: 100.0 * queries.iter().map(|q| q.inp).sum::<f64>() / n,
        queries,
        excluded,
        zero_norm: dist.zero_norm,
    })
}
