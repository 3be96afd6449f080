//! Seeded synthetic open-set datasets.
//!
//! Each class owns a latent prototype `p = m + N(0, I)` around a dataset
//! mean `m`. A view of an object is `S·(p + σε − m) + t + ν`: a fixed random
//! affine domain shift that also drops the mean, plus `ν` from a fixed
//! low-dimensional nuisance subspace, redrawn per view. Descriptions are `p`
//! plus text noise (per object) or `p` itself (per train class). All
//! features are multiplied by `feature_scale`.
//!
//! The backbone is one random frozen tower shared by both modalities whose
//! first layer is centred on `m`, so it fits descriptions but sees views
//! through a constant pre-activation offset and the shift.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::container::{write_features, FeatureFile, Section};
use super::manifest::{FeatureRef, Manifest, ManifestObject};
use super::model_io::save_backbone;
use crate::ablora::MergedLinear;
use crate::encoder::{DualEncoder, EncoderTower, TowerLayer, ViewSet};
use crate::error::{DacError, Result};
use crate::numcore::{sample_normal, Activation, Mat, Rng};
use crate::retrieval::{validate_open_set_split, ObjectRecord, OpenSetDataset, Split};

pub const FEATURES_FILE: &str = "features.dacf";
pub const BACKBONE_FILE: &str = "backbone.dacf";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seen: usize,
    pub unseen: usize,
    pub items_per_class: usize,
    pub views: usize,
    pub dim: usize,
    /// Intra-class noise on the prototype, per view.
    pub sigma: f64,
    /// Domain-shift strength; 0 makes the shift the identity.
    pub shift: f64,
    /// Norm scale of the dataset mean that the visual domain loses.
    pub offset: f64,
    /// Rank of the per-view nuisance subspace.
    pub nuisance_rank: usize,
    /// Nuisance amplitude, relative to `shift`.
    pub nuisance: f64,
    pub text_noise: f64,
    /// Scale of every emitted feature.
    pub feature_scale: f64,
    /// Also attach adapters to the output layer.
    pub adapt_output: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seen: 8,
            unseen: 8,
            items_per_class: 20,
            views: 6,
            dim: 32,
            sigma: 1.5,
            shift: 1.0,
            offset: 2.0,
            nuisance_rank: 4,
            nuisance: 1.5,
            text_noise: 0.8,
            feature_scale: 0.03,
            adapt_output: true,
            hidden_dim: 64,
            embed_dim: 32,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DacError::config(m));
        if self.seen < 2 || self.unseen < 2 {
            return bad(format!(
                "need at least 2 seen and 2 unseen classes, got {} and {}",
                self.seen, self.unseen
            ));
        }
        if self.items_per_class < 2 {
            return bad("items_per_class must be at least 2 (one query, one target)".into());
        }
        if self.views == 0 || self.dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("views and dimensions must be positive".into());
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("shift", self.shift),
            ("offset", self.offset),
            ("nuisance", self.nuisance),
            ("text_noise", self.text_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return bad(format!("feature_scale must be positive, got {}", self.feature_scale));
        }
        if self.nuisance_rank > self.dim {
            return bad(format!("nuisance_rank {} exceeds dim {}", self.nuisance_rank, self.dim));
        }
        Ok(())
    }

    /// Number of query objects per unseen class; the rest go to the target.
    pub fn queries_per_class(&self) -> usize {
        (self.items_per_class / 4).max(1)
    }
}

/// In-memory result of [`generate`].
#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: OpenSetDataset,
    pub backbone: DualEncoder,
    /// Latent prototype per class label.
    pub prototypes: Vec<(String, Vec<f64>)>,
}

impl SynthData {
    pub fn prototype(&self, label: &str) -> Option<&[f64]> {
        self.prototypes
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, p)| p.as_slice())
    }
}

fn f32_round(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

fn emit(v: &mut [f64], scale: f64) {
    v.iter_mut().for_each(|x| *x = (*x * scale) as f32 as f64);
}

const PROTOTYPE_STREAM: u64 = 1;
const SHIFT_STREAM: u64 = 2;
const VIEW_STREAM: u64 = 3;
const TEXT_STREAM: u64 = 4;
const BACKBONE_STREAM: u64 = 5;

pub fn class_label(c: usize) -> String {
    format!("c{c:02}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let d = cfg.dim;
    let classes = cfg.seen + cfg.unseen;

    let mut proto_rng = root.fork(PROTOTYPE_STREAM);
    let mut mean: Vec<f64> = proto_rng.normal_vec(d).iter().map(|v| v * cfg.offset).collect();
    emit(&mut mean, cfg.feature_scale);
    let prototypes: Vec<(String, Vec<f64>)> = (0..classes)
        .map(|c| {
            let mut p: Vec<f64> = proto_rng.normal_vec(d).iter().zip(&mean).map(|(v, m)| v + m).collect();
            emit(&mut p, cfg.feature_scale);
            (class_label(c), p)
        })
        .collect();

    let mut shift_rng = root.fork(SHIFT_STREAM);
    let mut s = sample_normal(&mut shift_rng, d, d).scaled(cfg.shift / (d as f64).sqrt());
    for i in 0..d {
        s.set(i, i, s.get(i, i) + 1.0);
    }
    let translation: Vec<f64> = shift_rng.normal_vec(d).iter().map(|v| v * cfg.shift).collect();
    let nuisance_basis = sample_normal(&mut shift_rng, d, cfg.nuisance_rank).scaled(cfg.shift * cfg.nuisance);

    let mut view_rng = root.fork(VIEW_STREAM);
    let mut text_rng = root.fork(TEXT_STREAM);
    let mut ds = OpenSetDataset {
        name: format!("synthetic-seed{}", cfg.seed),
        ..Default::default()
    };
    for (c, (label, p)) in prototypes.iter().enumerate() {
        for i in 0..cfg.items_per_class {
            let split = if c < cfg.seen {
                Split::Train
            } else if i < cfg.queries_per_class() {
                Split::Query
            } else {
                Split::Target
            };
            let mut views = Mat::zeros(cfg.views, d);
            for v in 0..cfg.views {
                let noisy: Vec<f64> = p
                    .iter()
                    .zip(view_rng.normal_vec(d))
                    .zip(&mean)
                    .map(|((a, e), m)| a + cfg.feature_scale * cfg.sigma * e - m)
                    .collect();
                let mut x = s.matvec(&noisy)?;
                let xi = view_rng.normal_vec(cfg.nuisance_rank);
                let nu = nuisance_basis.matvec(&xi)?;
                for k in 0..d {
                    x[k] += cfg.feature_scale * (translation[k] + nu[k]);
                }
                f32_round(&mut x);
                views.row_mut(v).copy_from_slice(&x);
            }
            let mut desc: Vec<f64> = p
                .iter()
                .zip(text_rng.normal_vec(d))
                .map(|(a, e)| a + cfg.feature_scale * cfg.text_noise * e)
                .collect();
            f32_round(&mut desc);
            let record = ObjectRecord {
                id: format!("{label}_{i:03}"),
                label: label.clone(),
                split,
                views: ViewSet::new(views)?,
                description: Some(desc),
            };
            match split {
                Split::Train => ds.train.push(record),
                Split::Query => ds.query.push(record),
                Split::Target => ds.target.push(record),
            }
        }
        if c < cfg.seen {
            ds.class_descriptions.insert(label.clone(), p.clone());
        }
    }
    validate_open_set_split(&ds).into_result()?;

    let mut bb_rng = root.fork(BACKBONE_STREAM);
    let tower = EncoderTower::random(
        &[d, cfg.hidden_dim, cfg.embed_dim],
        &[Activation::Tanh, Activation::Identity],
        &[true, cfg.adapt_output],
        &mut bb_rng,
    )?;
    // Centre the first layer on the description domain's mean.
    let mut layers = tower.layers().to_vec();
    let w = layers[0].base().w;
    let mut bias: Vec<f64> = w.matvec(&mean)?.iter().map(|v| -v).collect();
    f32_round(&mut bias);
    layers[0] = TowerLayer::frozen(MergedLinear::new(w, bias)?, layers[0].act, layers[0].adaptable);
    let tower = EncoderTower::new(layers)?;
    let backbone = DualEncoder::new(tower.clone(), tower)?;
    Ok(SynthData {
        dataset: ds,
        backbone,
        prototypes,
    })
}

/// Writes a generated dataset as manifest, feature container and backbone.
pub fn write_dataset(data: &SynthData, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| DacError::io(out, e))?;
    let ds = &data.dataset;
    let mut f = FeatureFile::new();
    let mut objects = Vec::new();
    let (mut m, mut d) = (0, 0);
    for o in ds.objects() {
        m = o.views.len();
        d = o.views.dim();
        let vname = format!("view/{}", o.id);
        f.push(Section::from_mat(&vname, o.views.as_mat())?)?;
        let description = match &o.description {
            Some(desc) => {
                let name = format!("desc/{}", o.id);
                f.push(Section::from_row(&name, desc)?)?;
                Some(FeatureRef::new(FEATURES_FILE, name))
            }
            None => None,
        };
        objects.push(ManifestObject {
            id: o.id.clone(),
            label: o.label.clone(),
            split: o.split,
            views: FeatureRef::new(FEATURES_FILE, vname),
            description,
        });
    }
    let mut class_descriptions = std::collections::BTreeMap::new();
    for (label, desc) in &ds.class_descriptions {
        let name = format!("class/{label}");
        f.push(Section::from_row(&name, desc)?)?;
        class_descriptions.insert(label.clone(), FeatureRef::new(FEATURES_FILE, name));
    }
    write_features(out.join(FEATURES_FILE), &f)?;
    save_backbone(out.join(BACKBONE_FILE), &data.backbone)?;
    Manifest {
        name: ds.name.clone(),
        input_dim: d,
        views_per_object: m,
        backbone: Some(BACKBONE_FILE.into()),
        objects,
        class_descriptions,
    }
    .save(out.join(MANIFEST_FILE))
}

/// SHA-256 of a file, lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| DacError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Generates and writes a dataset; returns `(file name, sha256)` per file.
pub fn gen_synthetic(cfg: &SynthConfig, out: &Path) -> Result<Vec<(String, String)>> {
    let data = generate(cfg)?;
    write_dataset(&data, out)?;
    [MANIFEST_FILE, FEATURES_FILE, BACKBONE_FILE]
        .iter()
        .map(|name| Ok((name.to_string(), sha256_file(&out.join(name))?)))
        .collect()
}
