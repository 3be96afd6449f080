//! Open-set splits: training objects from seen classes, query/target objects
//! from a disjoint set of unseen classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::ViewSet;
use crate::error::{DacError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Target,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Target => "target",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub id: String,
    pub label: String,
    pub split: Split,
    pub views: ViewSet,
    /// Raw feature of the object's own generated description, if any.
    pub description: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpenSetDataset {
    pub name: String,
    pub train: Vec<ObjectRecord>,
    pub query: Vec<ObjectRecord>,
    pub target: Vec<ObjectRecord>,
    /// Raw description feature per seen class label.
    pub class_descriptions: BTreeMap<String, Vec<f64>>,
}

impl OpenSetDataset {
    /// Labels of the training split, sorted.
    pub fn seen_labels(&self) -> BTreeSet<String> {
        self.train.iter().map(|o| o.label.clone()).collect()
    }

    /// Labels of the retrieval (query + target) splits, sorted.
    pub fn unseen_labels(&self) -> BTreeSet<String> {
        self.query
            .iter()
            .chain(&self.target)
            .map(|o| o.label.clone())
            .collect()
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectRecord> {
        self.train.iter().chain(&self.query).chain(&self.target)
    }
}

/// Outcome of [`validate_open_set_split`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SplitReport {
    /// Labels present in both the training and retrieval splits.
    pub overlapping_labels: Vec<String>,
    pub empty_splits: Vec<String>,
    pub duplicate_ids: Vec<String>,
    /// Query labels with no target object; those queries are not evaluated.
    pub uncovered_query_labels: Vec<String>,
}

impl SplitReport {
    pub fn is_ok(&self) -> bool {
        self.overlapping_labels.is_empty() && self.empty_splits.is_empty() && self.duplicate_ids.is_empty()
    }

    pub fn into_result(self) -> Result<SplitReport> {
        if self.is_ok() {
            Ok(self)
        } else {
            Err(DacError::Split(self.to_string()))
        }
    }
}

impl fmt::Display for SplitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if !self.overlapping_labels.is_empty() {
            parts.push(format!(
                "labels shared by train and retrieval splits: {}",
                self.overlapping_labels.join(", ")
            ));
        }
        if !self.empty_splits.is_empty() {
            parts.push(format!("empty splits: {}", self.empty_splits.join(", ")));
        }
        if !self.duplicate_ids.is_empty() {
            parts.push(format!("duplicate object ids: {}", self.duplicate_ids.join(", ")));
        }
        if !self.uncovered_query_labels.is_empty() {
            parts.push(format!(
                "query labels absent from target: {}",
                self.uncovered_query_labels.join(", ")
            ));
        }
        if parts.is_empty() {
            f.write_str("ok")
        } else {
            f.write_str(&parts.join("; "))
        }
    }
}

/// Checks label disjointness, non-empty splits, unique ids and query coverage.
pub fn validate_open_set_split(ds: &OpenSetDataset) -> SplitReport {
    let seen = ds.seen_labels();
    let unseen = ds.unseen_labels();
    let target_labels: BTreeSet<&str> = ds.target.iter().map(|o| o.label.as_str()).collect();
    let query_labels: BTreeSet<&str> = ds.query.iter().map(|o| o.label.as_str()).collect();
    let mut ids = BTreeSet::new();
    let duplicate_ids: BTreeSet<String> = ds
        .objects()
        .filter(|o| !ids.insert(o.id.as_str()))
        .map(|o| o.id.clone())
        .collect();
    SplitReport {
        overlapping_labels: seen.intersection(&unseen).cloned().collect(),
        empty_splits: [("train", ds.train.len()), ("query", ds.query.len()), ("target", ds.target.len())]
            .into_iter()
            .filter(|(_, n)| *n == 0)
            .map(|(s, _)| s.to_string())
            .collect(),
        duplicate_ids: duplicate_ids.into_iter().collect(),
        uncovered_query_labels: query_labels
            .difference(&target_labels)
            .map(|s| s.to_string())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(id: &str, label: &str, split: Split) -> ObjectRecord {
        ObjectRecord {
            id: id.into(),
            label: label.into(),
            split,
            views: ViewSet::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            description: None,
        }
    }

    fn toy() -> OpenSetDataset {
        OpenSetDataset {
            name: "toy".into(),
            train: vec![obj("t1", "a", Split::Train), obj("t2", "b", Split::Train)],
            query: vec![obj("q1", "c", Split::Query)],
            target: vec![obj("g1", "c", Split::Target), obj("g2", "d", Split::Target)],
            class_descriptions: BTreeMap::new(),
        }
    }

    #[test]
    fn valid_split() {
        let r = validate_open_set_split(&toy());
        assert!(r.is_ok(), "{r}");
        assert_eq!(r.to_string(), "ok");
    }

    #[test]
    fn injected_overlap_is_named() {
        let mut ds = toy();
        ds.query.push(obj("q2", "a", Split::Query));
        let r = validate_open_set_split(&ds);
        assert_eq!(r.overlapping_labels, vec!["a".to_string()]);
        let err = r.into_result().unwrap_err();
        assert!(err.to_string().contains("a"));
    }

    #[test]
    fn empty_target_is_violation() {
        let mut ds = toy();
        ds.target.clear();
        let r = validate_open_set_split(&ds);
        assert!(!r.is_ok());
        assert_eq!(r.empty_splits, vec!["target".to_string()]);
        assert_eq!(r.uncovered_query_labels, vec!["c".to_string()]);
    }

    #[test]
    fn uncovered_query_is_only_reported() {
        let mut ds = toy();
        ds.query.push(obj("q2", "e", Split::Query));
        let r = validate_open_set_split(&ds);
        assert!(r.is_ok());
        assert_eq!(r.uncovered_query_labels, vec!["e".to_string()]);
    }

    #[test]
    fn duplicate_ids() {
        let mut ds = toy();
        ds.target.push(obj("q1", "c", Split::Target));
        assert_eq!(validate_open_set_split(&ds).duplicate_ids, vec!["q1".to_string()]);
    }
}
