//! Cosine ranking of query descriptors against a gallery and open-set
//! retrieval evaluation (mAP, NDCG, ANMRR).

mod dataset;
pub mod metrics;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::fusion::Descriptor;
use crate::numcore::cosine;

pub use dataset::{validate_open_set_split, ObjectRecord, OpenSetDataset, Split, SplitReport};
pub use metrics::{anmrr, average_precision, ndcg, nmrr, relevant_ranks};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub score: f64,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub items: Vec<RankedItem>,
}

impl RankedList {
    pub fn relevance(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.relevant).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }
}

/// Ranks the whole gallery by cosine similarity to `query.h`, descending,
/// ties broken by ascending gallery id. A gallery entry sharing the query's
/// id is left out.
pub fn rank(query: &Descriptor, gallery: &[Descriptor]) -> Result<RankedList> {
    if gallery.is_empty() {
        return Err(DacError::data("cannot rank against an empty gallery"));
    }
    let mut items = gallery
        .iter()
        .filter(|d| d.id != query.id)
        .map(|d| {
            if d.h.len() != query.h.len() {
                return Err(DacError::shape(format!(
                    "descriptor '{}' has {} dims, query '{}' has {}",
                    d.id,
                    d.h.len(),
                    query.id,
                    query.h.len()
                )));
            }
            Ok(RankedItem {
                id: d.id.clone(),
                score: cosine(&query.h, &d.h)?,
                relevant: d.label == query.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    items.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.id.cmp(&b.id),
        o => o,
    });
    Ok(RankedList {
        query_id: query.id.clone(),
        items,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Truncate NDCG at this rank; `None` uses the full list.
    pub ndcg_cutoff: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub label: String,
    pub relevant: usize,
    pub ap: f64,
    pub ndcg: f64,
    pub nmrr: f64,
}

/// Aggregate retrieval metrics, as percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub ndcg: f64,
    pub anmrr: f64,
    pub queries: usize,
    pub excluded_queries: usize,
    pub gallery_size: usize,
    pub per_query: Vec<QueryMetrics>,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl MetricsReport {
    /// Copy with the headline metrics rounded to two decimals.
    pub fn rounded(&self) -> MetricsReport {
        MetricsReport {
            map: round2(self.map),
            ndcg: round2(self.ndcg),
            anmrr: round2(self.anmrr),
            ..self.clone()
        }
    }

    /// `mAP / NDCG / ANMRR` with two decimals.
    pub fn triple(&self) -> String {
        format!("{:.2} / {:.2} / {:.2}", self.map, self.ndcg, self.anmrr)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,label,relevant,ap,ndcg,nmrr\n");
        for q in &self.per_query {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                q.query_id, q.label, q.relevant, q.ap, q.ndcg, q.nmrr
            ));
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8}   queries  gallery", "mAP", "NDCG", "ANMRR")?;
        write!(
            f,
            "{:>8.2} {:>8.2} {:>8.2}   {:>7}  {:>7}",
            self.map, self.ndcg, self.anmrr, self.queries, self.gallery_size
        )?;
        if self.excluded_queries > 0 {
            write!(f, "  ({} excluded)", self.excluded_queries)?;
        }
        Ok(())
    }
}

/// Ranks every query against `target` and averages AP, NDCG and NMRR over
/// queries whose label occurs in the gallery. Queries without a relevant
/// gallery item are excluded and logged.
pub fn evaluate(query: &[Descriptor], target: &[Descriptor], opts: &EvalOptions) -> Result<MetricsReport> {
    let mut per_label: BTreeMap<&str, usize> = BTreeMap::new();
    for t in target {
        *per_label.entry(t.label.as_str()).or_default() += 1;
    }
    let mut lists = Vec::with_capacity(query.len());
    let mut excluded = 0;
    for q in query {
        let list = rank(q, target)?;
        if list.items.iter().any(|i| i.relevant) {
            lists.push((q, list));
        } else {
            warn!("query '{}' (label '{}') has no relevant gallery item; excluded", q.id, q.label);
            excluded += 1;
        }
    }
    if lists.is_empty() {
        return Err(DacError::data("no query has a relevant item in the gallery"));
    }
    let gtm = lists
        .iter()
        .map(|(_, l)| l.items.iter().filter(|i| i.relevant).count())
        .max()
        .unwrap_or(0);
    let per_query: Vec<QueryMetrics> = lists
        .iter()
        .map(|(q, list)| {
            let rel = list.relevance();
            let ranks = relevant_ranks(&rel);
            QueryMetrics {
                query_id: q.id.clone(),
                label: q.label.clone(),
                relevant: ranks.len(),
                ap: average_precision(&rel).unwrap_or(0.0),
                ndcg: ndcg(&rel, opts.ndcg_cutoff).unwrap_or(0.0),
                nmrr: nmrr(&ranks, ranks.len(), gtm).unwrap_or(1.0),
            }
        })
        .collect();
    let n = per_query.len() as f64;
    let mean = |f: fn(&QueryMetrics) -> f64| 100.0 * per_query.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        map: mean(|q| q.ap),
        ndcg: mean(|q| q.ndcg),
        anmrr: mean(|q| q.nmrr),
        queries: per_query.len(),
        excluded_queries: excluded,
        gallery_size: target.len(),
        per_query,
    })
}
