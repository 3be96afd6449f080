//! Frozen layer stacks carrying optional low-rank adapters, mapping raw
//! feature vectors to unit-norm embeddings, plus multi-view mean pooling.

use std::collections::HashSet;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::ablora::{AdaptedLinear, AdapterCache, AdapterConfig, AdapterGrads, MergedLinear};
use crate::error::{DacError, Result};
use crate::numcore::{l2_normalize, l2_normalize_backward, norm2, sample_normal, Activation, Mat, Rng, MIN_NORM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerWeights {
    Frozen(MergedLinear),
    Adapted(AdaptedLinear),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerLayer {
    pub weights: LayerWeights,
    pub act: Activation,
    pub adaptable: bool,
}

impl TowerLayer {
    pub fn frozen(linear: MergedLinear, act: Activation, adaptable: bool) -> Self {
        Self {
            weights: LayerWeights::Frozen(linear),
            act,
            adaptable,
        }
    }

    pub fn in_dim(&self) -> usize {
        match &self.weights {
            LayerWeights::Frozen(l) => l.in_dim(),
            LayerWeights::Adapted(l) => l.d2(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.weights {
            LayerWeights::Frozen(l) => l.out_dim(),
            LayerWeights::Adapted(l) => l.d1(),
        }
    }

    pub fn adapter(&self) -> Option<&AdaptedLinear> {
        match &self.weights {
            LayerWeights::Adapted(l) => Some(l),
            LayerWeights::Frozen(_) => None,
        }
    }

    /// The frozen backbone weights underneath any adapter.
    pub fn base(&self) -> MergedLinear {
        match &self.weights {
            LayerWeights::Frozen(l) => l.clone(),
            LayerWeights::Adapted(l) => l.frozen(),
        }
    }
}

/// Gradients for one tower, aligned with its layers (`None` for frozen ones).
pub type TowerGrads = Vec<Option<AdapterGrads>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTower {
    layers: Vec<TowerLayer>,
    /// L2-normalize the final layer output. On by default.
    pub normalize: bool,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    out: Vec<f64>,
    adapter: Option<AdapterCache>,
}

/// Everything a train-mode [`EncoderTower::encode`] keeps for backward.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    layers: Vec<LayerCache>,
    output: Vec<f64>,
    pre_norm: f64,
}

impl EncoderTower {
    pub fn new(layers: Vec<TowerLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DacError::config("encoder tower needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(DacError::shape(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if let Some(i) = layers
            .iter()
            .position(|l| l.adapter().is_some() && !l.adaptable)
        {
            return Err(DacError::config(format!(
                "layer {i} carries an adapter but is not flagged adaptable"
            )));
        }
        Ok(Self {
            layers,
            normalize: true,
        })
    }

    /// Seeded random frozen tower. `dims` lists the input dimension then each
    /// layer's output dimension; weights are N(0, 1/fan_in), rounded to f32
    /// so the tower survives a round trip through a feature file unchanged.
    pub fn random(dims: &[usize], acts: &[Activation], adaptable: &[bool], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || acts.len() != dims.len() - 1 || adaptable.len() != acts.len() {
            return Err(DacError::config("tower layout needs n+1 dims, n activations and n flags"));
        }
        let layers = dims
            .windows(2)
            .zip(acts.iter().zip(adaptable))
            .map(|(d, (&act, &adapt))| {
                let scale = 1.0 / (d[0] as f64).sqrt();
                let mut w = sample_normal(rng, d[1], d[0]).scaled(scale);
                w.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
                TowerLayer::frozen(MergedLinear::without_bias(w), act, adapt)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[TowerLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn adapters(&self) -> impl Iterator<Item = (usize, &AdaptedLinear)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.adapter().map(|a| (i, a)))
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = (usize, &mut AdaptedLinear)> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter_map(|(i, l)| match &mut l.weights {
                LayerWeights::Adapted(a) => Some((i, a)),
                LayerWeights::Frozen(_) => None,
            })
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters().next().is_some()
    }

    /// Fresh adapters on every adaptable layer, in layer order.
    pub fn attach_adapters(&mut self, cfg: &AdapterConfig, rng: &mut Rng) -> Result<()> {
        for layer in self.layers.iter_mut().filter(|l| l.adaptable) {
            let adapted = AdaptedLinear::init(layer.base(), cfg, rng)?;
            layer.weights = LayerWeights::Adapted(adapted);
        }
        Ok(())
    }

    /// Installs a stored adapter on layer `index`.
    pub fn set_adapter(&mut self, index: usize, adapter: AdaptedLinear) -> Result<()> {
        let layer = self
            .layers
            .get_mut(index)
            .ok_or_else(|| DacError::usage(format!("no layer {index} in tower")))?;
        if !layer.adaptable {
            return Err(DacError::config(format!("layer {index} is not adaptable")));
        }
        if adapter.w0() != &layer.base().w {
            return Err(DacError::data(format!(
                "adapter for layer {index} was trained on different frozen weights"
            )));
        }
        layer.weights = LayerWeights::Adapted(adapter);
        Ok(())
    }

    /// Switches every adapter to its plain-LoRA view.
    pub fn to_plain_lora(&mut self) {
        for (_, a) in self.adapters_mut() {
            *a = a.as_plain_lora();
        }
    }

    /// Tower with every adapter folded into its frozen weights.
    pub fn merged(&self) -> EncoderTower {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let linear = match &l.weights {
                    LayerWeights::Frozen(f) => f.clone(),
                    LayerWeights::Adapted(a) => a.merge(),
                };
                TowerLayer::frozen(linear, l.act, l.adaptable)
            })
            .collect();
        EncoderTower {
            layers,
            normalize: self.normalize,
        }
    }

    /// Same frozen weights with all adapters removed.
    pub fn stripped(&self) -> EncoderTower {
        let layers = self
            .layers
            .iter()
            .map(|l| TowerLayer::frozen(l.base(), l.act, l.adaptable))
            .collect();
        EncoderTower {
            layers,
            normalize: self.normalize,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(DacError::shape(format!(
                "tower expects input of length {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    fn finish(&self, out: Vec<f64>) -> Result<(Vec<f64>, f64)> {
        let n = norm2(&out);
        if !self.normalize {
            return Ok((out, 1.0));
        }
        if !(n >= MIN_NORM) {
            return Err(DacError::Degenerate { norm: n, min: MIN_NORM });
        }
        Ok((l2_normalize(&out)?, n))
    }

    /// Inference-mode embedding.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for layer in &self.layers {
            let pre = match &layer.weights {
                LayerWeights::Frozen(l) => l.forward(&h)?,
                LayerWeights::Adapted(l) => l.forward_eval(&h)?,
            };
            h = Activation::apply_vec(layer.act, pre);
        }
        Ok(self.finish(h)?.0)
    }

    /// Embedding plus the cache for [`backward`](Self::backward). `train`
    /// supplies the dropout stream; `None` runs without dropout.
    pub fn encode(&self, x: &[f64], mut train: Option<&mut Rng>) -> Result<(Vec<f64>, EncodeCache)> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (pre, adapter) = match &layer.weights {
                LayerWeights::Frozen(l) => (l.forward(&h)?, None),
                LayerWeights::Adapted(l) => {
                    let (o, c) = l.forward(&h, train.as_deref_mut())?;
                    (o, Some(c))
                }
            };
            let out = Activation::apply_vec(layer.act, pre.clone());
            caches.push(LayerCache {
                input: std::mem::replace(&mut h, out.clone()),
                pre,
                out,
                adapter,
            });
        }
        let (output, pre_norm) = self.finish(h)?;
        Ok((
            output.clone(),
            EncodeCache {
                layers: caches,
                output,
                pre_norm,
            },
        ))
    }

    /// Backpropagates `grad_out` (w.r.t. the tower output) to every adapter.
    /// Returns per-layer adapter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &EncodeCache, grad_out: &[f64]) -> Result<(TowerGrads, Vec<f64>)> {
        if cache.layers.len() != self.layers.len() || grad_out.len() != cache.output.len() {
            return Err(DacError::usage("encode cache does not belong to this tower"));
        }
        let mut grad = if self.normalize {
            l2_normalize_backward(&cache.output, cache.pre_norm, grad_out)
        } else {
            grad_out.to_vec()
        };
        let mut grads: TowerGrads = vec![None; self.layers.len()];
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let d_pre: Vec<f64> = grad
                .iter()
                .zip(lc.pre.iter().zip(&lc.out))
                .map(|(g, (&x, &y))| g * layer.act.derivative(x, y))
                .collect();
            grad = match (&layer.weights, &lc.adapter) {
                (LayerWeights::Frozen(l), None) => l.w.matvec_t(&d_pre)?,
                (LayerWeights::Adapted(l), Some(ac)) => {
                    let mut g = l.backward(ac, &d_pre)?;
                    let d_z = std::mem::take(&mut g.d_z);
                    grads[i] = Some(g);
                    d_z
                }
                _ => return Err(DacError::usage(format!("layer {i} cache kind mismatch"))),
            };
            debug_assert_eq!(grad.len(), lc.input.len());
        }
        Ok((grads, grad))
    }

    /// `p ← p − lr·grad` on every adapter with a gradient.
    pub fn apply_update(&mut self, grads: &TowerGrads, lr: f64) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(DacError::usage("tower gradient list length mismatch"));
        }
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            match (&mut layer.weights, g) {
                (LayerWeights::Adapted(a), Some(g)) => a.apply_update(g, lr)?,
                (LayerWeights::Frozen(_), None) | (LayerWeights::Adapted(_), None) => {}
                (LayerWeights::Frozen(_), Some(_)) => {
                    return Err(DacError::usage("gradient supplied for a frozen layer"))
                }
            }
        }
        Ok(())
    }
}

/// Adds `other` into `acc` layer by layer.
pub fn accumulate_grads(acc: &mut TowerGrads, other: &TowerGrads) -> Result<()> {
    if acc.len() != other.len() {
        return Err(DacError::usage("tower gradient list length mismatch"));
    }
    for (a, o) in acc.iter_mut().zip(other) {
        match (a.as_mut(), o) {
            (Some(a), Some(o)) => a.accumulate(o)?,
            (None, Some(o)) => {
                let mut g = o.clone();
                g.d_z.clear();
                *a = Some(g);
            }
            (_, None) => {}
        }
    }
    Ok(())
}

impl Activation {
    fn apply_vec(self, mut v: Vec<f64>) -> Vec<f64> {
        if self != Activation::Identity {
            v.iter_mut().for_each(|x| *x = self.apply_scalar(*x));
        }
        v
    }
}

/// The M per-view input features of one object, one row per view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet(Mat);

impl ViewSet {
    pub fn new(views: Mat) -> Result<Self> {
        if views.rows() == 0 {
            return Err(DacError::usage("an object needs at least one view"));
        }
        Ok(Self(views))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Mat::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn views(&self) -> impl Iterator<Item = &[f64]> {
        self.0.iter_rows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }
}

/// Arithmetic mean of the view embeddings (not re-normalized).
///
/// Each coordinate is summed with correct rounding, so the result is exactly
/// invariant to view order and to duplicating the whole view list.
pub fn pool_views(view_embs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = view_embs
        .first()
        .ok_or_else(|| DacError::usage("cannot pool an empty view list"))?;
    let d = first.len();
    if view_embs.iter().any(|v| v.len() != d) {
        return Err(DacError::shape("view embeddings differ in dimension"));
    }
    let m = view_embs.len() as f64;
    let mut column = Vec::with_capacity(view_embs.len());
    Ok((0..d)
        .map(|j| {
            column.clear();
            column.extend(view_embs.iter().map(|v| v[j]));
            exact_sum(&column) / m
        })
        .collect())
}

/// Correctly rounded floating-point sum (Shewchuk's exact partials).
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &x in values {
        let mut x = x;
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    // Sum from the top, then fix up round-half-even ties between partials.
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Caches from encoding every view of one object.
#[derive(Debug, Clone)]
pub struct ObjectCache {
    views: Vec<EncodeCache>,
}

impl ObjectCache {
    pub fn view_count(&self) -> usize {
        self.views.len()
    }
}

/// Encodes every view and mean-pools them into the object descriptor `g`.
pub fn encode_object(tower: &EncoderTower, obj: &ViewSet, mut train: Option<&mut Rng>) -> Result<(Vec<f64>, ObjectCache)> {
    let mut embs = Vec::with_capacity(obj.len());
    let mut caches = Vec::with_capacity(obj.len());
    for view in obj.views() {
        let (e, c) = tower.encode(view, train.as_deref_mut())?;
        embs.push(e);
        caches.push(c);
    }
    Ok((pool_views(&embs)?, ObjectCache { views: caches }))
}

/// Inference-mode object descriptor.
pub fn embed_object(tower: &EncoderTower, obj: &ViewSet) -> Result<Vec<f64>> {
    let embs = obj.views().map(|v| tower.embed(v)).collect::<Result<Vec<_>>>()?;
    pool_views(&embs)
}

/// Backpropagates the gradient of `g` through the mean pool (each view gets
/// `d_g / M`) and the tower, summing adapter gradients over views.
pub fn backprop_object(tower: &EncoderTower, cache: &ObjectCache, d_g: &[f64]) -> Result<TowerGrads> {
    let m = cache.views.len() as f64;
    let per_view: Vec<f64> = d_g.iter().map(|v| v / m).collect();
    let mut acc: TowerGrads = vec![None; tower.layers().len()];
    for vc in &cache.views {
        let (g, _) = tower.backward(vc, &per_view)?;
        accumulate_grads(&mut acc, &g)?;
    }
    Ok(acc)
}

/// Classifier rows `cᵢ = T(tᵢ)`, one per class description.
pub fn build_class_weights(tower: &EncoderTower, descriptions: &[Vec<f64>]) -> Result<Mat> {
    Ok(encode_class_weights(tower, descriptions, None)?.0)
}

/// [`build_class_weights`] that also returns the per-row caches, for training.
pub fn encode_class_weights(
    tower: &EncoderTower,
    descriptions: &[Vec<f64>],
    mut train: Option<&mut Rng>,
) -> Result<(Mat, Vec<EncodeCache>)> {
    if descriptions.len() < 2 {
        return Err(DacError::config(format!(
            "contrastive training needs at least 2 class descriptions, got {}",
            descriptions.len()
        )));
    }
    let mut seen = HashSet::new();
    for (i, d) in descriptions.iter().enumerate() {
        let key: Vec<u64> = d.iter().map(|v| v.to_bits()).collect();
        if !seen.insert(key) {
            warn!("class description {i} duplicates an earlier one");
        }
    }
    let mut rows = Vec::with_capacity(descriptions.len());
    let mut caches = Vec::with_capacity(descriptions.len());
    for d in descriptions {
        let (e, c) = tower.encode(d, train.as_deref_mut())?;
        rows.push(e);
        caches.push(c);
    }
    Ok((Mat::from_rows(&rows)?, caches))
}

/// The visual and textual towers of a dual encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder {
    pub visual: EncoderTower,
    pub text: EncoderTower,
}

impl DualEncoder {
    pub fn new(visual: EncoderTower, text: EncoderTower) -> Result<Self> {
        if visual.out_dim() != text.out_dim() {
            return Err(DacError::shape(format!(
                "visual tower embeds to {} dims, text tower to {}",
                visual.out_dim(),
                text.out_dim()
            )));
        }
        Ok(Self { visual, text })
    }

    pub fn embed_dim(&self) -> usize {
        self.visual.out_dim()
    }

    pub fn merged(&self) -> DualEncoder {
        DualEncoder {
            visual: self.visual.merged(),
            text: self.text.merged(),
        }
    }

    pub fn stripped(&self) -> DualEncoder {
        DualEncoder {
            visual: self.visual.stripped(),
            text: self.text.stripped(),
        }
    }
}
