//! JSON dataset manifests. Feature payloads live in containers referenced by
//! `(file, section[, row])`, with file paths relative to the manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{read_features, FeatureFile};
use crate::encoder::ViewSet;
use crate::error::{DacError, Result};
use crate::retrieval::{validate_open_set_split, ObjectRecord, OpenSetDataset, Split};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub file: String,
    pub section: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
}

impl FeatureRef {
    pub fn new(file: impl Into<String>, section: impl Into<String>) -> Self {
        Self {
            file: file.into(),
            section: section.into(),
            row: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestObject {
    pub id: String,
    pub label: String,
    pub split: Split,
    pub views: FeatureRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<FeatureRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub input_dim: usize,
    pub views_per_object: usize,
    /// Frozen dual-encoder weights, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
    pub objects: Vec<ManifestObject>,
    /// Description feature per seen (train) class.
    pub class_descriptions: BTreeMap<String, FeatureRef>,
}

impl Manifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| DacError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DacError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DacError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn backbone_path(&self, manifest_path: &Path) -> Option<PathBuf> {
        self.backbone.as_ref().map(|b| base_dir(manifest_path).join(b))
    }
}

fn base_dir(manifest_path: &Path) -> &Path {
    manifest_path.parent().unwrap_or_else(|| Path::new("."))
}

struct FileCache<'a> {
    dir: &'a Path,
    files: HashMap<String, FeatureFile>,
}

impl FileCache<'_> {
    fn resolve(&mut self, r: &FeatureRef, what: &str) -> Result<(usize, Vec<f64>)> {
        if !self.files.contains_key(&r.file) {
            let f = read_features(self.dir.join(&r.file))?;
            self.files.insert(r.file.clone(), f);
        }
        let file = &self.files[&r.file];
        let s = file.get(&r.section).ok_or_else(|| {
            DacError::data(format!("{what}: section '{}' not found in '{}'", r.section, r.file))
        })?;
        match r.row {
            None => Ok((s.rows, s.to_f64())),
            Some(row) => s.row(row).map(|v| (1, v)).ok_or_else(|| {
                DacError::data(format!(
                    "{what}: row {row} out of range for section '{}' ({} rows)",
                    r.section, s.rows
                ))
            }),
        }
    }

    fn vector(&mut self, r: &FeatureRef, dim: usize, what: &str) -> Result<Vec<f64>> {
        let (rows, v) = self.resolve(r, what)?;
        if rows != 1 || v.len() != dim {
            return Err(DacError::data(format!(
                "{what}: expected one row of {dim} values in section '{}', found {rows} rows of {}",
                r.section,
                v.len() / rows.max(1)
            )));
        }
        Ok(v)
    }
}

/// Reads a manifest, resolves every feature reference and validates the
/// open-set split.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Manifest, OpenSetDataset)> {
    let path = path.as_ref();
    let manifest = Manifest::read(path)?;
    let ds = resolve_manifest(&manifest, base_dir(path))?;
    Ok((manifest, ds))
}

pub fn resolve_manifest(manifest: &Manifest, dir: &Path) -> Result<OpenSetDataset> {
    let (d, m) = (manifest.input_dim, manifest.views_per_object);
    if d == 0 || m == 0 {
        return Err(DacError::data("manifest input_dim and views_per_object must be positive"));
    }
    let mut cache = FileCache {
        dir,
        files: HashMap::new(),
    };
    let mut ds = OpenSetDataset {
        name: manifest.name.clone(),
        ..Default::default()
    };
    for o in &manifest.objects {
        let what = format!("object '{}'", o.id);
        let (rows, data) = cache.resolve(&o.views, &what)?;
        if rows != m || data.len() != m * d {
            return Err(DacError::data(format!(
                "{what}: section '{}' holds {rows} views of {} values, manifest declares {m} views of {d}",
                o.views.section,
                data.len() / rows.max(1)
            )));
        }
        let views = ViewSet::new(crate::numcore::Mat::from_vec(m, d, data)?)?;
        let description = o
            .description
            .as_ref()
            .map(|r| cache.vector(r, d, &what))
            .transpose()?;
        let record = ObjectRecord {
            id: o.id.clone(),
            label: o.label.clone(),
            split: o.split,
            views,
            description,
        };
        match o.split {
            Split::Train => ds.train.push(record),
            Split::Query => ds.query.push(record),
            Split::Target => ds.target.push(record),
        }
    }
    let seen = ds.seen_labels();
    for (label, r) in &manifest.class_descriptions {
        if !seen.contains(label) {
            return Err(DacError::Split(format!(
                "class description given for '{label}', which is not a train label"
            )));
        }
        let v = cache.vector(r, d, &format!("class '{label}'"))?;
        ds.class_descriptions.insert(label.clone(), v);
    }
    if let Some(missing) = seen.iter().find(|l| !ds.class_descriptions.contains_key(*l)) {
        return Err(DacError::data(format!("no class description for train label '{missing}'")));
    }
    validate_open_set_split(&ds).into_result()?;
    Ok(ds)
}
