//! Weighted textual-visual fusion `h = act(g + α·f_t)` and its ablation
//! variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::numcore::{activation, l2_normalize, Activation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionScheme {
    #[default]
    Add,
    Concat,
}

impl fmt::Display for FusionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionScheme::Add => "add",
            FusionScheme::Concat => "concat",
        })
    }
}

impl FromStr for FusionScheme {
    type Err = DacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "add" => Ok(FusionScheme::Add),
            "concat" => Ok(FusionScheme::Concat),
            _ => Err(DacError::config(format!("unknown fusion scheme '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub scheme: FusionScheme,
    pub act: Activation,
    /// L2-normalize `h` after the activation.
    pub post_norm: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: FALLBACK_ALPHA,
            scheme: FusionScheme::Add,
            act: Activation::Tanh,
            post_norm: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DacError::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Final per-object retrieval descriptor with its constituents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub id: String,
    pub label: String,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub f_t: Option<Vec<f64>>,
}

/// Fuses pooled visual `g` with text embedding `f_t`.
///
/// `add`: `act(g + α·f_t)`; `concat`: `act(g) ⧺ act(α·f_t)`. Without `f_t`
/// the result is `act(g)` for either scheme.
pub fn fuse(g: &[f64], f_t: Option<&[f64]>, cfg: &FusionConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let h = match f_t {
        Some(t) if t.len() != g.len() => {
            return Err(DacError::shape(format!(
                "visual descriptor has {} dims, text embedding {}",
                g.len(),
                t.len()
            )))
        }
        None => activation(g, cfg.act),
        Some(t) => match cfg.scheme {
            FusionScheme::Add => {
                let sum: Vec<f64> = if cfg.alpha == 0.0 {
                    g.to_vec()
                } else {
                    g.iter().zip(t).map(|(a, b)| a + cfg.alpha * b).collect()
                };
                activation(&sum, cfg.act)
            }
            FusionScheme::Concat => {
                let mut h = activation(g, cfg.act);
                let scaled: Vec<f64> = t.iter().map(|v| cfg.alpha * v).collect();
                h.extend(activation(&scaled, cfg.act));
                h
            }
        },
    };
    if cfg.post_norm {
        l2_normalize(&h)
    } else {
        Ok(h)
    }
}

pub fn fuse_descriptor(
    id: impl Into<String>,
    label: impl Into<String>,
    g: Vec<f64>,
    f_t: Option<Vec<f64>>,
    cfg: &FusionConfig,
) -> Result<Descriptor> {
    let h = fuse(&g, f_t.as_deref(), cfg)?;
    Ok(Descriptor {
        id: id.into(),
        label: label.into(),
        h,
        g,
        f_t,
    })
}

pub const FALLBACK_ALPHA: f64 = 0.4;

/// Tuned fusion weights per (dataset, backbone) pair.
const TUNED_ALPHA: [(&str, &str, f64); 8] = [
    ("OS-ESB-core", "B/32", 0.1),
    ("OS-ESB-core", "L/14", 0.1),
    ("OS-NTU-core", "B/32", 0.6),
    ("OS-NTU-core", "L/14", 0.3),
    ("OS-MN40-core", "B/32", 0.4),
    ("OS-MN40-core", "L/14", 0.25),
    ("OS-ABO-core", "B/32", 0.85),
    ("OS-ABO-core", "L/14", 0.7),
];

fn normalize_backbone(tag: &str) -> String {
    tag.trim()
        .trim_start_matches("ViT-")
        .trim_start_matches("vit-")
        .to_ascii_uppercase()
}

/// Tuned `α` for a known dataset/backbone pair, else [`FALLBACK_ALPHA`].
/// Backbone tags accept `L/14` or `ViT-L/14`.
pub fn default_alpha(dataset_tag: &str, backbone_tag: &str) -> f64 {
    let backbone = normalize_backbone(backbone_tag);
    TUNED_ALPHA
        .iter()
        .find(|(d, b, _)| d.eq_ignore_ascii_case(dataset_tag.trim()) && *b == backbone)
        .map_or(FALLBACK_ALPHA, |&(_, _, a)| a)
}
