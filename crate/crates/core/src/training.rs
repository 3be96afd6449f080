//! Contrastive adaptation of the dual encoder against class-description
//! embeddings: cross-entropy over `g·cᵢ/τ` logits, exact gradients through
//! both towers, SGD with a per-step cosine schedule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablora::AdapterConfig;
use crate::encoder::{
    accumulate_grads, backprop_object, encode_class_weights, encode_object, DualEncoder,
    EncoderTower, ObjectCache, TowerGrads, ViewSet,
};
use crate::error::{DacError, Result};
use crate::numcore::{axpy, dot, l2_normalize_backward, log_sum_exp, norm2, softmax, Mat, Rng};
use crate::retrieval::OpenSetDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoraMode {
    #[default]
    Ablora,
    PlainLora,
    Frozen,
}

impl LoraMode {
    pub fn name(self) -> &'static str {
        match self {
            LoraMode::Ablora => "ablora",
            LoraMode::PlainLora => "plain_lora",
            LoraMode::Frozen => "frozen",
        }
    }
}

impl fmt::Display for LoraMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoraMode {
    type Err = DacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ablora" | "ab_lora" => Ok(LoraMode::Ablora),
            "plain_lora" | "lora" => Ok(LoraMode::PlainLora),
            "frozen" | "none" => Ok(LoraMode::Frozen),
            _ => Err(DacError::config(format!("unknown lora mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub rank: usize,
    pub gamma: f64,
    pub dropout_p: f64,
    pub seed: u64,
    pub lora_mode: LoraMode,
    /// Re-normalize pooled `g` before the loss.
    pub normalize_pooled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 2e-4,
            temperature: 0.07,
            rank: 8,
            gamma: 1.0,
            dropout_p: 0.25,
            seed: 7,
            lora_mode: LoraMode::Ablora,
            normalize_pooled: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(DacError::config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.lr > 0.0) {
            return Err(DacError::config(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.epochs < 1 {
            return Err(DacError::config("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(DacError::config("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(DacError::config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        if self.rank < 1 {
            return Err(DacError::config("rank must be >= 1"));
        }
        if !self.gamma.is_finite() {
            return Err(DacError::config("gamma must be finite"));
        }
        Ok(())
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            rank: self.rank,
            gamma: self.gamma,
            dropout_p: self.dropout_p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub lora_mode: LoraMode,
    pub epoch_loss: Vec<f64>,
    /// Learning rate used at each optimizer step.
    pub lr_trace: Vec<f64>,
    pub steps: usize,
    /// SHA-256 over each adapter's `A`, `B`, `Φ` (f64 little-endian), keyed
    /// `<tower>.<layer>`.
    pub adapter_checksums: BTreeMap<String, String>,
}

/// Loss value with its gradients w.r.t. the descriptors and class rows.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub d_g: Mat,
    pub d_c: Mat,
}

/// `−(1/N) Σₖ log softmax(gₖ·Cᵀ/τ)[yₖ]` and its exact gradients.
pub fn contrastive_ce_loss(g: &Mat, class_w: &Mat, labels: &[usize], tau: f64) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(DacError::config(format!("temperature {tau} must be > 0")));
    }
    let (n, d) = g.shape();
    let l = class_w.rows();
    if n == 0 || labels.len() != n {
        return Err(DacError::shape(format!("{n} descriptors with {} labels", labels.len())));
    }
    if l < 2 {
        return Err(DacError::config("contrastive loss needs at least 2 classes"));
    }
    if class_w.cols() != d {
        return Err(DacError::shape(format!(
            "descriptor dim {d} vs class weight dim {}",
            class_w.cols()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
        return Err(DacError::data(format!("label {bad} out of range for {l} classes")));
    }

    let scale = 1.0 / (n as f64 * tau);
    let mut per_sample = Vec::with_capacity(n);
    let mut d_g = Mat::zeros(n, d);
    let mut d_c = Mat::zeros(l, d);
    for (k, (gk, &y)) in g.iter_rows().zip(labels).enumerate() {
        let logits: Vec<f64> = class_w.iter_rows().map(|c| dot(gk, c) / tau).collect();
        per_sample.push(log_sum_exp(&logits) - logits[y]);
        let mut resid = softmax(&logits)?;
        resid[y] -= 1.0;
        // d_g[k] = scale · Σᵢ residᵢ cᵢ ; d_c[i] += scale · residᵢ gₖ
        let row = d_g.row_mut(k);
        for (i, c) in class_w.iter_rows().enumerate() {
            axpy(scale * resid[i], c, row);
        }
        for (i, &r) in resid.iter().enumerate() {
            axpy(scale * r, gk, d_c.row_mut(i));
        }
    }
    let loss = per_sample.iter().sum::<f64>() / n as f64;
    Ok(LossOutput {
        loss,
        per_sample,
        d_g,
        d_c,
    })
}

/// `η₀ · ½(1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total < 1 {
        return Err(DacError::usage("schedule needs at least one step"));
    }
    if t > total {
        return Err(DacError::usage(format!("step {t} beyond schedule length {total}")));
    }
    if t == total {
        return Ok(0.0);
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// Gradients for both towers of a [`DualEncoder`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub visual: TowerGrads,
    pub text: TowerGrads,
}

impl ModelGrads {
    pub fn empty(model: &DualEncoder) -> Self {
        Self {
            visual: vec![None; model.visual.layers().len()],
            text: vec![None; model.text.layers().len()],
        }
    }
}

/// `p ← p − η·grad` for every adapter tensor in both towers; frozen weights
/// and plain-LoRA biases are left alone.
pub fn sgd_step(model: &mut DualEncoder, grads: &ModelGrads, lr: f64) -> Result<()> {
    model.visual.apply_update(&grads.visual, lr)?;
    model.text.apply_update(&grads.text, lr)
}

/// A train-split object resolved to tower inputs.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub views: ViewSet,
    pub class: usize,
}

/// One forward/backward pass over a batch.
///
/// Class weights are re-encoded through the text tower so its adapters
/// receive gradients. `rng` drives dropout; `None` disables it.
pub fn batch_loss_and_grads(
    model: &DualEncoder,
    batch: &[&TrainItem],
    class_descriptions: &[Vec<f64>],
    cfg: &TrainConfig,
    mut rng: Option<&mut Rng>,
) -> Result<(LossOutput, ModelGrads)> {
    let (class_w, text_caches) = encode_class_weights(&model.text, class_descriptions, rng.as_deref_mut())?;
    let mut g_rows = Vec::with_capacity(batch.len());
    let mut caches: Vec<(ObjectCache, Vec<f64>, f64)> = Vec::with_capacity(batch.len());
    for item in batch {
        let (g, cache) = encode_object(&model.visual, &item.views, rng.as_deref_mut())?;
        let n = norm2(&g);
        let used = if cfg.normalize_pooled {
            crate::numcore::l2_normalize(&g)?
        } else {
            g
        };
        caches.push((cache, used.clone(), n));
        g_rows.push(used);
    }
    let labels: Vec<usize> = batch.iter().map(|i| i.class).collect();
    let out = contrastive_ce_loss(&Mat::from_rows(&g_rows)?, &class_w, &labels, cfg.temperature)?;

    let mut grads = ModelGrads::empty(model);
    for (k, (cache, used, n)) in caches.iter().enumerate() {
        let d_g = if cfg.normalize_pooled {
            l2_normalize_backward(used, *n, out.d_g.row(k))
        } else {
            out.d_g.row(k).to_vec()
        };
        let g = backprop_object(&model.visual, cache, &d_g)?;
        accumulate_grads(&mut grads.visual, &g)?;
    }
    for (i, cache) in text_caches.iter().enumerate() {
        let (g, _) = model.text.backward(cache, out.d_c.row(i))?;
        accumulate_grads(&mut grads.text, &g)?;
    }
    Ok((out, grads))
}

/// Training inputs extracted from an open-set dataset: the train objects and
/// the ordered seen-class descriptions they index into.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub items: Vec<TrainItem>,
    pub class_names: Vec<String>,
    pub class_descriptions: Vec<Vec<f64>>,
}

impl TrainSet {
    pub fn from_dataset(ds: &OpenSetDataset) -> Result<Self> {
        if ds.train.is_empty() {
            return Err(DacError::data("train split is empty"));
        }
        let class_names: Vec<String> = ds.seen_labels().into_iter().collect();
        let mut class_descriptions = Vec::with_capacity(class_names.len());
        for name in &class_names {
            let d = ds.class_descriptions.get(name).ok_or_else(|| {
                DacError::data(format!("no class description for seen label '{name}'"))
            })?;
            class_descriptions.push(d.clone());
        }
        let items = ds
            .train
            .iter()
            .map(|o| {
                let class = class_names
                    .binary_search(&o.label)
                    .map_err(|_| DacError::data(format!("train label '{}' is not seen", o.label)))?;
                Ok(TrainItem {
                    views: o.views.clone(),
                    class,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if class_names.len() < 2 {
            return Err(DacError::data(format!(
                "train split has {} class(es); at least 2 required",
                class_names.len()
            )));
        }
        Ok(Self {
            items,
            class_names,
            class_descriptions,
        })
    }
}

/// Prepares a frozen backbone for `cfg.lora_mode`: fresh adapters for
/// `ablora`, their plain view for `plain_lora`, none for `frozen`.
pub fn prepare_model(backbone: &DualEncoder, cfg: &TrainConfig) -> Result<DualEncoder> {
    cfg.validate()?;
    let mut model = backbone.stripped();
    if cfg.lora_mode == LoraMode::Frozen {
        return Ok(model);
    }
    let mut rng = Rng::new(cfg.seed).fork(INIT_STREAM);
    let adapter = cfg.adapter();
    model.visual.attach_adapters(&adapter, &mut rng)?;
    model.text.attach_adapters(&adapter, &mut rng)?;
    if cfg.lora_mode == LoraMode::PlainLora {
        model.visual.to_plain_lora();
        model.text.to_plain_lora();
    }
    Ok(model)
}

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Full training run. Deterministic for a fixed config and seed.
pub fn train(backbone: &DualEncoder, data: &TrainSet, cfg: &TrainConfig) -> Result<(DualEncoder, TrainReport)> {
    let mut model = prepare_model(backbone, cfg)?;
    if data.items.is_empty() {
        return Err(DacError::data("train split is empty"));
    }
    let trainable = model.visual.has_adapters() || model.text.has_adapters();
    let base = Rng::new(cfg.seed);
    let mut shuffle_rng = base.fork(SHUFFLE_STREAM);
    let mut dropout_rng = base.fork(DROPOUT_STREAM);

    let n = data.items.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut lr_trace = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut per_object = vec![0.0; n];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &data.items[i]).collect();
            let rng = trainable.then_some(&mut dropout_rng);
            let (out, grads) = batch_loss_and_grads(&model, &batch, &data.class_descriptions, cfg, rng)?;
            for (&i, &l) in chunk.iter().zip(&out.per_sample) {
                per_object[i] = l;
            }
            let lr = cosine_lr(step, total, cfg.lr)?;
            if trainable {
                sgd_step(&mut model, &grads, lr)?;
            }
            lr_trace.push(lr);
            step += 1;
        }
        // Summed in object order so the value does not depend on the shuffle.
        let mean = per_object.iter().sum::<f64>() / n as f64;
        debug!("epoch {} mean loss {mean:.6}", epoch + 1);
        epoch_loss.push(mean);
    }
    info!(
        "{} training: loss {:.4} -> {:.4} over {} steps",
        cfg.lora_mode,
        epoch_loss[0],
        epoch_loss[epoch_loss.len() - 1],
        total
    );
    let report = TrainReport {
        lora_mode: cfg.lora_mode,
        epoch_loss,
        lr_trace,
        steps: total,
        adapter_checksums: adapter_checksums(&model),
    };
    Ok((model, report))
}

pub fn adapter_checksums(model: &DualEncoder) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for (tower_name, tower) in [("visual", &model.visual), ("text", &model.text)] {
        for (i, a) in tower.adapters() {
            let mut h = Sha256::new();
            for v in a.a().data().iter().chain(a.b().data()).chain(a.phi()) {
                h.update(v.to_le_bytes());
            }
            out.insert(format!("{tower_name}.{i}"), hex::encode(h.finalize()));
        }
    }
    out
}

/// Normwise relative error `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-300, f64::max);
    diff / scale
}

/// Central differences `(f(p+ε) − f(p−ε)) / 2ε` for every coordinate.
pub fn central_differences(params: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let plus = f(&p);
            p[i] = orig - eps;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

pub const DEFAULT_GRAD_EPS: f64 = 1e-5;

/// Flattens every trainable adapter tensor of `tower` (A, B, Φ per layer).
pub fn flatten_tower(tower: &EncoderTower) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, a) in tower.adapters() {
        out.extend_from_slice(a.a().data());
        out.extend_from_slice(a.b().data());
        out.extend_from_slice(a.phi());
    }
    out
}

/// Inverse of [`flatten_tower`].
pub fn unflatten_tower(tower: &mut EncoderTower, flat: &[f64]) -> Result<()> {
    let mut off = 0;
    for (_, a) in tower.adapters_mut() {
        let (am, bm, phi) = a.params_mut();
        for dst in [am.data_mut(), bm.data_mut(), phi] {
            let src = flat
                .get(off..off + dst.len())
                .ok_or_else(|| DacError::usage("flat parameter vector too short"))?;
            dst.copy_from_slice(src);
            off += dst.len();
        }
    }
    if off != flat.len() {
        return Err(DacError::usage("flat parameter vector too long"));
    }
    Ok(())
}

/// Flattens tower gradients in the same order as [`flatten_tower`]; layers
/// with no gradient contribute zeros.
pub fn flatten_grads(tower: &EncoderTower, grads: &TowerGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, a) in tower.adapters() {
        match &grads[i] {
            Some(g) => {
                out.extend_from_slice(g.d_a.data());
                out.extend_from_slice(g.d_b.data());
                if a.phi_trainable() {
                    out.extend_from_slice(&g.d_phi);
                } else {
                    out.extend(std::iter::repeat_n(0.0, a.phi().len()));
                }
            }
            None => out.extend(std::iter::repeat_n(0.0, a.a().data().len() + a.b().data().len() + a.phi().len())),
        }
    }
    out
}

/// Result of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

/// Checks the analytic gradient of the full contrastive loss w.r.t. every
/// adapter parameter of both towers against central differences. Dropout is
/// disabled throughout.
pub fn grad_check_model(
    model: &DualEncoder,
    batch: &[&TrainItem],
    class_descriptions: &[Vec<f64>],
    cfg: &TrainConfig,
    eps: f64,
) -> Result<GradCheck> {
    let (_, grads) = batch_loss_and_grads(model, batch, class_descriptions, cfg, None)?;
    let mut analytic = flatten_grads(&model.visual, &grads.visual);
    analytic.extend(flatten_grads(&model.text, &grads.text));

    let nv = flatten_tower(&model.visual).len();
    let mut params = flatten_tower(&model.visual);
    params.extend(flatten_tower(&model.text));
    let mut probe = model.clone();
    let mut failure = None;
    let numeric = central_differences(&params, eps, |p| {
        unflatten_tower(&mut probe.visual, &p[..nv]).expect("visual layout");
        unflatten_tower(&mut probe.text, &p[nv..]).expect("text layout");
        match batch_loss_and_grads(&probe, batch, class_descriptions, cfg, None) {
            Ok((out, _)) => out.loss,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    // Plain-LoRA biases are frozen: their numeric derivative is not a
    // trainable direction, so compare zeros with zeros.
    let mut numeric = numeric;
    mask_frozen_phi(&model.visual, &mut numeric[..nv]);
    mask_frozen_phi(&model.text, &mut numeric[nv..]);
    let max_rel_error = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}

fn mask_frozen_phi(tower: &EncoderTower, flat: &mut [f64]) {
    let mut off = 0;
    for (_, a) in tower.adapters() {
        off += a.a().data().len() + a.b().data().len();
        if !a.phi_trainable() {
            flat[off..off + a.phi().len()].iter_mut().for_each(|v| *v = 0.0);
        }
        off += a.phi().len();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{sample_normal, Activation};

    fn loss_only(g: &Mat, c: &Mat, labels: &[usize], tau: f64) -> f64 {
        // Independent direct evaluation of the objective.
        let n = g.rows() as f64;
        g.iter_rows()
            .zip(labels)
            .map(|(gk, &y)| {
                let num = (dot(gk, c.row(y)) / tau).exp();
                let den: f64 = c.iter_rows().map(|ci| (dot(gk, ci) / tau).exp()).sum();
                -(num / den).ln()
            })
            .sum::<f64>()
            / n
    }

    #[test]
    fn uniform_logits_give_ln_l() {
        let g = Mat::from_rows(&[vec![1.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        let c = Mat::from_rows(&[
            vec![0.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        for tau in [0.07, 1.0, 3.0] {
            let out = contrastive_ce_loss(&g, &c, &[2], tau).unwrap();
            assert!((out.loss - 4f64.ln()).abs() < 1e-15);
        }
        assert!((4f64.ln() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn matched_class_loss_vanishes() {
        let g = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l1 = contrastive_ce_loss(&g, &c, &[0], 0.1).unwrap().loss;
        let l2 = contrastive_ce_loss(&g, &c, &[0], 0.01).unwrap().loss;
        assert!(l2 < l1 && (0.0..1e-40).contains(&l2));
    }

    #[test]
    fn loss_errors() {
        let g = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(contrastive_ce_loss(&g, &c, &[2], 0.1), Err(DacError::Data(_))));
        assert!(matches!(contrastive_ce_loss(&g, &c, &[0], 0.0), Err(DacError::Config(_))));
        assert!(matches!(contrastive_ce_loss(&g, &c, &[0], -1.0), Err(DacError::Config(_))));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = Rng::new(77);
        let g = sample_normal(&mut rng, 3, 6);
        let c = sample_normal(&mut rng, 5, 6);
        let labels = [4, 0, 2];
        let tau = 0.7;
        let out = contrastive_ce_loss(&g, &c, &labels, tau).unwrap();
        assert!((out.loss - loss_only(&g, &c, &labels, tau)).abs() < 1e-12);

        let num_g = central_differences(g.data(), 1e-5, |p| {
            loss_only(&Mat::from_vec(3, 6, p.to_vec()).unwrap(), &c, &labels, tau)
        });
        assert!(relative_error(out.d_g.data(), &num_g) < 1e-6);
        let num_c = central_differences(c.data(), 1e-5, |p| {
            loss_only(&g, &Mat::from_vec(5, 6, p.to_vec()).unwrap(), &labels, tau)
        });
        assert!(relative_error(out.d_c.data(), &num_c) < 1e-6);
    }

    #[test]
    fn class_gradient_rows_sum_per_sample_to_zero() {
        // Each sample's residual (p − onehot) sums to zero, so with g fixed
        // the class gradient rows sum to the zero vector.
        let mut rng = Rng::new(78);
        let g = sample_normal(&mut rng, 1, 4);
        let c = sample_normal(&mut rng, 5, 4);
        let out = contrastive_ce_loss(&g, &c, &[3], 0.2).unwrap();
        for j in 0..4 {
            let s: f64 = (0..5).map(|i| out.d_c.get(i, j)).sum();
            assert!(s.abs() < 1e-12);
        }
        assert!(out.loss >= 0.0);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 10, 2e-4).unwrap(), 2e-4);
        assert_eq!(cosine_lr(10, 10, 2e-4).unwrap(), 0.0);
        assert!((cosine_lr(5, 10, 2e-4).unwrap() - 1e-4).abs() < 1e-18);
        assert!(matches!(cosine_lr(11, 10, 1.0), Err(DacError::Usage(_))));
        assert!(cosine_lr(0, 0, 1.0).is_err());
    }

    #[test]
    fn defaults_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.lr), (30, 4, 2e-4));
        assert_eq!((cfg.rank, cfg.dropout_p), (8, 0.25));
        cfg.validate().unwrap();
        for bad in [
            TrainConfig { temperature: 0.0, ..cfg.clone() },
            TrainConfig { lr: 0.0, ..cfg.clone() },
            TrainConfig { epochs: 0, ..cfg.clone() },
            TrainConfig { batch_size: 0, ..cfg.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(DacError::Config(_))));
        }
        assert_eq!("plain-lora".parse::<LoraMode>().unwrap(), LoraMode::PlainLora);
        assert!("lorax".parse::<LoraMode>().is_err());
    }

    fn toy_model(seed: u64, p: f64) -> DualEncoder {
        let mut rng = Rng::new(seed);
        let acts = [Activation::Tanh, Activation::Identity];
        let visual = EncoderTower::random(&[5, 6, 6], &acts, &[true, true], &mut rng).unwrap();
        let text = EncoderTower::random(&[5, 6, 6], &acts, &[true, true], &mut rng).unwrap();
        let mut m = DualEncoder::new(visual, text).unwrap();
        let cfg = AdapterConfig { rank: 2, gamma: 0.8, dropout_p: p };
        m.visual.attach_adapters(&cfg, &mut rng).unwrap();
        m.text.attach_adapters(&cfg, &mut rng).unwrap();
        for tower in [&mut m.visual, &mut m.text] {
            for (_, a) in tower.adapters_mut() {
                let (_, b, phi) = a.params_mut();
                b.data_mut().iter_mut().for_each(|v| *v = 0.3 * rng.normal());
                phi.iter_mut().for_each(|v| *v = 0.3 * rng.normal());
            }
        }
        m
    }

    fn toy_batch(seed: u64, views: usize, classes: usize, n: usize) -> (Vec<TrainItem>, Vec<Vec<f64>>) {
        let mut rng = Rng::new(seed);
        let items = (0..n)
            .map(|k| TrainItem {
                views: ViewSet::new(sample_normal(&mut rng, views, 5)).unwrap(),
                class: k % classes,
            })
            .collect();
        let descs = (0..classes).map(|_| rng.normal_vec(5)).collect();
        (items, descs)
    }

    #[test]
    fn pipeline_gradients_match_finite_differences() {
        let model = toy_model(90, 0.0);
        let (items, descs) = toy_batch(91, 2, 3, 3);
        let batch: Vec<&TrainItem> = items.iter().collect();
        let cfg = TrainConfig { temperature: 0.5, ..Default::default() };
        let check = grad_check_model(&model, &batch, &descs, &cfg, DEFAULT_GRAD_EPS).unwrap();
        assert!(check.max_rel_error < 1e-5, "{}", check.max_rel_error);

        let normed = TrainConfig { normalize_pooled: true, ..cfg };
        let check = grad_check_model(&model, &batch, &descs, &normed, DEFAULT_GRAD_EPS).unwrap();
        assert!(check.max_rel_error < 1e-5, "{}", check.max_rel_error);
    }

    #[test]
    fn grad_check_detects_corruption() {
        let model = toy_model(92, 0.0);
        let (items, descs) = toy_batch(93, 2, 3, 2);
        let batch: Vec<&TrainItem> = items.iter().collect();
        let cfg = TrainConfig { temperature: 0.5, ..Default::default() };
        let check = grad_check_model(&model, &batch, &descs, &cfg, DEFAULT_GRAD_EPS).unwrap();
        let corrupted: Vec<f64> = check.analytic.iter().map(|v| v * 1.01).collect();
        assert!(relative_error(&corrupted, &check.numeric) > 1e-3);
    }

    #[test]
    fn plain_lora_pipeline_check() {
        let mut model = toy_model(94, 0.0);
        model.visual.to_plain_lora();
        model.text.to_plain_lora();
        let (items, descs) = toy_batch(95, 3, 4, 4);
        let batch: Vec<&TrainItem> = items.iter().collect();
        let cfg = TrainConfig { temperature: 0.3, ..Default::default() };
        let check = grad_check_model(&model, &batch, &descs, &cfg, DEFAULT_GRAD_EPS).unwrap();
        assert!(check.max_rel_error < 1e-5);
    }

    #[test]
    fn sgd_step_hand_arithmetic() {
        let mut model = toy_model(96, 0.0);
        let (items, descs) = toy_batch(97, 1, 2, 2);
        let batch: Vec<&TrainItem> = items.iter().collect();
        let cfg = TrainConfig::default();
        let (_, grads) = batch_loss_and_grads(&model, &batch, &descs, &cfg, None).unwrap();
        let before = model.clone();
        sgd_step(&mut model, &grads, 0.5).unwrap();
        let (i, a0) = before.visual.adapters().next().unwrap();
        let a1 = model.visual.layers()[i].adapter().unwrap();
        let g = grads.visual[i].as_ref().unwrap();
        assert_eq!(a1.a().get(0, 0), a0.a().get(0, 0) - 0.5 * g.d_a.get(0, 0));
        assert_eq!(a1.phi()[1], a0.phi()[1] - 0.5 * g.d_phi[1]);
        assert_eq!(a1.w0(), a0.w0());

        let mut same = before.clone();
        sgd_step(&mut same, &grads, 0.0).unwrap();
        assert_eq!(flatten_tower(&same.visual), flatten_tower(&before.visual));
        let zero = ModelGrads::empty(&before);
        sgd_step(&mut same, &zero, 1.0).unwrap();
        assert_eq!(flatten_tower(&same.text), flatten_tower(&before.text));
    }

    #[test]
    fn flatten_round_trip() {
        let model = toy_model(98, 0.0);
        let mut t = model.visual.clone();
        let flat = flatten_tower(&t);
        unflatten_tower(&mut t, &flat).unwrap();
        assert_eq!(flatten_tower(&t), flat);
        assert!(unflatten_tower(&mut t, &flat[1..]).is_err());
    }
}
