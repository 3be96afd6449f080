//! Glue between the stages: embedding retrieval splits into descriptors and
//! running adapt/embed/evaluate in memory.

use std::collections::BTreeMap;

use crate::dataio::DescriptorSet;
use crate::encoder::{embed_object, DualEncoder};
use crate::error::Result;
use crate::fusion::{fuse_descriptor, Descriptor, FusionConfig};
use crate::numcore::l2_normalize;
use crate::retrieval::{evaluate, EvalOptions, MetricsReport, ObjectRecord, OpenSetDataset};
use crate::training::{train, TrainConfig, TrainReport, TrainSet};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EmbedOptions {
    pub fusion: FusionConfig,
    /// Re-normalize pooled `g`; should match the training setting.
    pub normalize_pooled: bool,
    /// Ignore object descriptions and fuse image-only.
    pub image_only: bool,
}

/// Pooled visual descriptor and text embedding of one object, before fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEmbedding {
    pub id: String,
    pub label: String,
    pub g: Vec<f64>,
    pub f_t: Option<Vec<f64>>,
}

pub fn embed_objects(model: &DualEncoder, objects: &[ObjectRecord], normalize_pooled: bool) -> Result<Vec<ObjectEmbedding>> {
    objects
        .iter()
        .map(|o| {
            let mut g = embed_object(&model.visual, &o.views)?;
            if normalize_pooled {
                g = l2_normalize(&g)?;
            }
            let f_t = o.description.as_deref().map(|d| model.text.embed(d)).transpose()?;
            Ok(ObjectEmbedding {
                id: o.id.clone(),
                label: o.label.clone(),
                g,
                f_t,
            })
        })
        .collect()
}

pub fn fuse_all(embs: &[ObjectEmbedding], fusion: &FusionConfig, image_only: bool) -> Result<Vec<Descriptor>> {
    embs.iter()
        .map(|e| {
            let f_t = if image_only { None } else { e.f_t.clone() };
            fuse_descriptor(&e.id, &e.label, e.g.clone(), f_t, fusion)
        })
        .collect()
}

/// Embeds the query and target splits of a dataset.
pub fn embed_dataset(model: &DualEncoder, ds: &OpenSetDataset, opts: &EmbedOptions) -> Result<DescriptorSet> {
    opts.fusion.validate()?;
    let mut splits = BTreeMap::new();
    for (name, objs) in [("query", &ds.query), ("target", &ds.target)] {
        let embs = embed_objects(model, objs, opts.normalize_pooled)?;
        splits.insert(name.to_string(), fuse_all(&embs, &opts.fusion, opts.image_only)?);
    }
    Ok(DescriptorSet {
        dataset: ds.name.clone(),
        fusion: opts.fusion,
        splits,
    })
}

/// Evaluates a descriptor set's query split against its target split.
pub fn evaluate_set(set: &DescriptorSet, opts: &EvalOptions) -> Result<MetricsReport> {
    let empty = Vec::new();
    let q = set.splits.get("query").unwrap_or(&empty);
    let t = set.splits.get("target").unwrap_or(&empty);
    evaluate(q, t, opts)
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub model: DualEncoder,
    pub report: TrainReport,
    pub metrics: MetricsReport,
}

/// Adapts on `train_ds`, then embeds and evaluates `eval_ds`.
pub fn run_experiment(
    backbone: &DualEncoder,
    train_ds: &OpenSetDataset,
    eval_ds: &OpenSetDataset,
    cfg: &TrainConfig,
    embed: &EmbedOptions,
    eval: &EvalOptions,
) -> Result<ExperimentResult> {
    let data = TrainSet::from_dataset(train_ds)?;
    let (model, report) = train(backbone, &data, cfg)?;
    let set = embed_dataset(&model, eval_ds, embed)?;
    let metrics = evaluate_set(&set, eval)?;
    Ok(ExperimentResult { model, report, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{generate, SynthConfig};
    use crate::fusion::FusionScheme;
    use crate::numcore::{activation, Activation};

    fn small() -> SynthConfig {
        SynthConfig {
            seen: 3,
            unseen: 3,
            items_per_class: 6,
            views: 3,
            dim: 8,
            hidden_dim: 12,
            embed_dim: 8,
            nuisance_rank: 2,
            ..Default::default()
        }
    }

    #[test]
    fn alpha_zero_is_tanh_of_g() {
        let data = generate(&small()).unwrap();
        let opts = EmbedOptions {
            fusion: FusionConfig { alpha: 0.0, ..Default::default() },
            ..Default::default()
        };
        let set = embed_dataset(&data.backbone, &data.dataset, &opts).unwrap();
        for d in set.splits.values().flatten() {
            assert!(d.f_t.is_some());
            assert_eq!(d.h, activation(&d.g, Activation::Tanh));
        }
    }

    #[test]
    fn concat_and_image_only() {
        let data = generate(&small()).unwrap();
        let concat = EmbedOptions {
            fusion: FusionConfig { scheme: FusionScheme::Concat, ..Default::default() },
            ..Default::default()
        };
        let set = embed_dataset(&data.backbone, &data.dataset, &concat).unwrap();
        assert_eq!(set.splits["query"][0].h.len(), 16);
        let only = EmbedOptions { image_only: true, ..concat };
        let set = embed_dataset(&data.backbone, &data.dataset, &only).unwrap();
        assert_eq!(set.splits["query"][0].h.len(), 8);
    }

    #[test]
    fn experiment_runs_end_to_end() {
        let data = generate(&small()).unwrap();
        let cfg = TrainConfig { epochs: 2, rank: 2, ..Default::default() };
        let res = run_experiment(
            &data.backbone,
            &data.dataset,
            &data.dataset,
            &cfg,
            &EmbedOptions::default(),
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(res.report.epoch_loss.len(), 2);
        assert_eq!(res.metrics.queries, 3);
        assert!((0.0..=100.0).contains(&res.metrics.map));
    }
}
