//! Backbone, adapter and descriptor files on top of the feature container.
//!
//! Backbone sections per tower `t` and layer `i`: `t.i.W`, `t.i.BIAS`, plus
//! `t.LAYERS` (one row `[activation code, adaptable]` per layer) and
//! `t.OPTS` (`[normalize]`). Adapter files hold `t.i.A`, `t.i.B`, `t.i.PHI`,
//! `t.i.HDR` (`[d1, d2, rank, gamma, dropout, fp0, fp1]`, where `fp*` are
//! fingerprints of the frozen weight) and a one-value `MODE`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{read_features, write_features, FeatureFile, Section};
use crate::ablora::{AdaptedLinear, MergedLinear};
use crate::encoder::{DualEncoder, EncoderTower, TowerLayer};
use crate::error::{DacError, Result};
use crate::fusion::{Descriptor, FusionConfig};
use crate::numcore::Activation;
use crate::training::LoraMode;

const TOWERS: [&str; 2] = ["visual", "text"];

fn tower<'a>(model: &'a DualEncoder, name: &str) -> &'a EncoderTower {
    if name == "visual" {
        &model.visual
    } else {
        &model.text
    }
}

fn put_tower(f: &mut FeatureFile, name: &str, t: &EncoderTower) -> Result<()> {
    let mut meta = Vec::new();
    for (i, layer) in t.layers().iter().enumerate() {
        let base = layer.base();
        f.push(Section::from_mat(format!("{name}.{i}.W"), &base.w)?)?;
        f.push(Section::from_row(format!("{name}.{i}.BIAS"), &base.bias)?)?;
        meta.push(f64::from(layer.act.code()));
        meta.push(if layer.adaptable { 1.0 } else { 0.0 });
    }
    f.push(Section::from_f64(format!("{name}.LAYERS"), t.layers().len(), 2, &meta)?)?;
    f.push(Section::from_row(format!("{name}.OPTS"), &[if t.normalize { 1.0 } else { 0.0 }])?)
}

fn take_tower(f: &FeatureFile, name: &str) -> Result<EncoderTower> {
    let meta = f.require(&format!("{name}.LAYERS"))?;
    if meta.dim != 2 {
        return Err(DacError::data(format!("section '{name}.LAYERS' must have 2 columns")));
    }
    let mut layers = Vec::with_capacity(meta.rows);
    for i in 0..meta.rows {
        let row = meta.row(i).unwrap_or_default();
        let act = Activation::from_code(row[0] as u32)
            .ok_or_else(|| DacError::data(format!("layer {i} of '{name}' has unknown activation code {}", row[0])))?;
        let w = f.require(&format!("{name}.{i}.W"))?.to_mat()?;
        let bias = f.require(&format!("{name}.{i}.BIAS"))?.to_f64();
        layers.push(TowerLayer::frozen(MergedLinear::new(w, bias)?, act, row[1] != 0.0));
    }
    let mut t = EncoderTower::new(layers)?;
    t.normalize = f.require(&format!("{name}.OPTS"))?.to_f64().first() != Some(&0.0);
    Ok(t)
}

/// Writes the frozen weights of both towers; adapters are ignored.
pub fn save_backbone(path: impl AsRef<Path>, model: &DualEncoder) -> Result<()> {
    let mut f = FeatureFile::new();
    for name in TOWERS {
        put_tower(&mut f, name, tower(model, name))?;
    }
    write_features(path, &f)
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<DualEncoder> {
    let f = read_features(path)?;
    DualEncoder::new(take_tower(&f, "visual")?, take_tower(&f, "text")?)
}

/// Two weighted sums of a frozen weight, used to detect adapters paired
/// with the wrong backbone.
fn fingerprint(w: &crate::numcore::Mat) -> [f64; 2] {
    let plain = w.data().iter().sum();
    let weighted = w.data().iter().enumerate().map(|(k, v)| v * ((k % 7) + 1) as f64).sum();
    [plain, weighted]
}

fn mode_code(mode: LoraMode) -> f64 {
    match mode {
        LoraMode::Ablora => 0.0,
        LoraMode::PlainLora => 1.0,
        LoraMode::Frozen => 2.0,
    }
}

/// Writes every adapter of both towers together with the training mode.
pub fn save_adapters(path: impl AsRef<Path>, model: &DualEncoder, mode: LoraMode) -> Result<()> {
    let mut f = FeatureFile::new();
    f.push(Section::from_row("MODE", &[mode_code(mode)])?)?;
    for name in TOWERS {
        for (i, a) in tower(model, name).adapters() {
            let [fp0, fp1] = fingerprint(a.w0());
            let hdr = [a.d1() as f64, a.d2() as f64, a.rank() as f64, a.gamma(), a.dropout_p(), fp0, fp1];
            f.push(Section::from_row(format!("{name}.{i}.HDR"), &hdr)?)?;
            f.push(Section::from_mat(format!("{name}.{i}.A"), a.a())?)?;
            f.push(Section::from_mat(format!("{name}.{i}.B"), a.b())?)?;
            f.push(Section::from_row(format!("{name}.{i}.PHI"), a.phi())?)?;
        }
    }
    write_features(path, &f)
}

/// Installs stored adapters on a copy of `backbone`.
///
/// Adapter values are stored as f32, so a reloaded model reproduces the
/// saved one only up to that rounding.
pub fn load_adapters(path: impl AsRef<Path>, backbone: &DualEncoder) -> Result<(DualEncoder, LoraMode)> {
    let path = path.as_ref();
    let f = read_features(path)?;
    let mode = match f.require("MODE")?.to_f64().first().copied() {
        Some(0.0) => LoraMode::Ablora,
        Some(1.0) => LoraMode::PlainLora,
        Some(2.0) => LoraMode::Frozen,
        other => return Err(DacError::data(format!("unknown adapter mode {other:?}"))),
    };
    let mut model = backbone.stripped();
    for name in TOWERS {
        let t = if name == "visual" { &mut model.visual } else { &mut model.text };
        for i in 0..t.layers().len() {
            let Some(hdr) = f.get(&format!("{name}.{i}.HDR")) else {
                continue;
            };
            let hdr = hdr.to_f64();
            if hdr.len() != 7 {
                return Err(DacError::data(format!("section '{name}.{i}.HDR' must hold 7 values")));
            }
            let a = f.require(&format!("{name}.{i}.A"))?.to_mat()?;
            let b = f.require(&format!("{name}.{i}.B"))?.to_mat()?;
            let phi = f.require(&format!("{name}.{i}.PHI"))?.to_f64();
            let base = t.layers()[i].base();
            if (base.out_dim(), base.in_dim()) != (hdr[0] as usize, hdr[1] as usize) {
                return Err(DacError::data(format!(
                    "adapter {name}.{i} is {}x{} but the backbone layer is {}x{}",
                    hdr[0],
                    hdr[1],
                    base.out_dim(),
                    base.in_dim()
                )));
            }
            let fp = fingerprint(&base.w);
            let stored = [hdr[5], hdr[6]];
            if fp.iter().zip(stored).any(|(a, b)| (a - b).abs() > 1e-5 * (1.0 + b.abs())) {
                return Err(DacError::data(format!(
                    "adapter {name}.{i} was trained on different frozen weights"
                )));
            }
            let mut adapter = AdaptedLinear::from_parts(base, a, b, phi, hdr[3], hdr[4])?;
            if mode == LoraMode::PlainLora {
                adapter = adapter.as_plain_lora();
            }
            t.set_adapter(i, adapter)?;
        }
    }
    Ok((model, mode))
}

/// Writes a frozen (merged) model in backbone format.
pub fn save_merged(path: impl AsRef<Path>, model: &DualEncoder) -> Result<()> {
    save_backbone(path, &model.merged())
}

/// Sidecar index of a descriptor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorIndex {
    pub dataset: String,
    pub fusion: FusionConfig,
    pub splits: BTreeMap<String, Vec<DescriptorEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorEntry {
    pub id: String,
    pub label: String,
    pub has_text: bool,
}

/// Descriptors of the retrieval splits, keyed by split name.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub dataset: String,
    pub fusion: FusionConfig,
    pub splits: BTreeMap<String, Vec<Descriptor>>,
}

fn index_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn stack(name: String, rows: &[&[f64]]) -> Result<Section> {
    let dim = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Section::from_f64(name, rows.len(), dim, &flat)
}

/// Writes `<path>` (container with `split.H`, `split.G`, `split.FT` and
/// `split.HASFT`) and `<path>.json` (ids, labels, fusion settings).
///
/// The container stores f32, so `h` is narrowed on disk; retrieval on a
/// reloaded set ranks on the narrowed values.
pub fn save_descriptors(path: impl AsRef<Path>, set: &DescriptorSet) -> Result<()> {
    let path = path.as_ref();
    let mut f = FeatureFile::new();
    let mut index = DescriptorIndex {
        dataset: set.dataset.clone(),
        fusion: set.fusion,
        splits: BTreeMap::new(),
    };
    for (split, descs) in &set.splits {
        let h: Vec<&[f64]> = descs.iter().map(|d| d.h.as_slice()).collect();
        let g: Vec<&[f64]> = descs.iter().map(|d| d.g.as_slice()).collect();
        let dim = descs.first().map_or(0, |d| d.g.len());
        let zeros = vec![0.0; dim];
        let ft: Vec<&[f64]> = descs
            .iter()
            .map(|d| d.f_t.as_deref().unwrap_or(&zeros))
            .collect();
        let has: Vec<f64> = descs.iter().map(|d| if d.f_t.is_some() { 1.0 } else { 0.0 }).collect();
        f.push(stack(format!("{split}.H"), &h)?)?;
        f.push(stack(format!("{split}.G"), &g)?)?;
        f.push(stack(format!("{split}.FT"), &ft)?)?;
        f.push(Section::from_f64(format!("{split}.HASFT"), descs.len(), 1, &has)?)?;
        index.splits.insert(
            split.clone(),
            descs
                .iter()
                .map(|d| DescriptorEntry {
                    id: d.id.clone(),
                    label: d.label.clone(),
                    has_text: d.f_t.is_some(),
                })
                .collect(),
        );
    }
    write_features(path, &f)?;
    let ip = index_path(path);
    fs::write(&ip, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| DacError::io(&ip, e))
}

pub fn load_descriptors(path: impl AsRef<Path>) -> Result<DescriptorSet> {
    let path = path.as_ref();
    let f = read_features(path)?;
    let ip = index_path(path);
    let text = fs::read_to_string(&ip).map_err(|e| DacError::io(&ip, e))?;
    let index: DescriptorIndex = serde_json::from_str(&text).map_err(|e| DacError::Format {
        path: ip.clone(),
        msg: e.to_string(),
    })?;
    let mut splits = BTreeMap::new();
    for (split, entries) in index.splits {
        let h = f.require(&format!("{split}.H"))?;
        let g = f.require(&format!("{split}.G"))?;
        let ft = f.require(&format!("{split}.FT"))?;
        if [h.rows, g.rows, ft.rows].iter().any(|&r| r != entries.len()) {
            return Err(DacError::data(format!(
                "split '{split}' lists {} objects but its sections disagree",
                entries.len()
            )));
        }
        let descs = entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| Descriptor {
                h: h.row(i).unwrap_or_default(),
                g: g.row(i).unwrap_or_default(),
                f_t: e.has_text.then(|| ft.row(i).unwrap_or_default()),
                id: e.id,
                label: e.label,
            })
            .collect();
        splits.insert(split, descs);
    }
    Ok(DescriptorSet {
        dataset: index.dataset,
        fusion: index.fusion,
        splits,
    })
}
