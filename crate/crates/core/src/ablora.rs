//! Additive-bias low-rank adapted linear layer.
//!
//! `o = W₀·z + b₀ + γ·B·A·z̃ + Φ`, with `W₀`/`b₀` frozen and `A`, `B`, `Φ`
//! trainable. `z̃` is the (inverted) dropout of `z` on the adapter branch
//! only; the frozen path always sees the undropped input.

use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::numcore::{axpy, sample_normal, Mat, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub gamma: f64,
    pub dropout_p: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            gamma: 1.0,
            dropout_p: 0.25,
        }
    }
}

impl AdapterConfig {
    /// LoRA-convention scaling `γ = lora_alpha / rank`.
    pub fn with_lora_alpha(mut self, lora_alpha: f64) -> Self {
        self.gamma = lora_alpha / self.rank as f64;
        self
    }

    pub fn validate(&self, d1: usize, d2: usize) -> Result<()> {
        if self.rank < 1 || self.rank >= d1.min(d2) {
            return Err(DacError::config(format!(
                "adapter rank {} must satisfy 1 <= r < min({d1}, {d2})",
                self.rank
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(DacError::config(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if !self.gamma.is_finite() {
            return Err(DacError::config("adapter scale must be finite"));
        }
        Ok(())
    }
}

/// Plain affine layer `w·z + bias`: a frozen backbone layer, or the result
/// of folding an adapter into one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedLinear {
    pub w: Mat,
    pub bias: Vec<f64>,
}

impl MergedLinear {
    pub fn new(w: Mat, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != w.rows() {
            return Err(DacError::shape(format!(
                "bias length {} for {}x{} weight",
                bias.len(),
                w.rows(),
                w.cols()
            )));
        }
        Ok(Self { w, bias })
    }

    pub fn without_bias(w: Mat) -> Self {
        let bias = vec![0.0; w.rows()];
        Self { w, bias }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut o = self.w.matvec(z)?;
        add_nonzero(&mut o, &self.bias);
        Ok(o)
    }
}

/// `o += v`, skipping entries of `v` that are exactly zero so a zero bias
/// leaves `o` bit-identical (including signed zeros).
fn add_nonzero(o: &mut [f64], v: &[f64]) {
    for (oi, &vi) in o.iter_mut().zip(v) {
        if vi != 0.0 {
            *oi += vi;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedLinear {
    w0: Mat,
    bias0: Vec<f64>,
    a: Mat,
    b: Mat,
    phi: Vec<f64>,
    gamma: f64,
    dropout_p: f64,
    phi_trainable: bool,
    #[serde(skip)]
    version: u64,
}

/// Values retained by a forward call for the matching backward call.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    z_tilde: Vec<f64>,
    az: Vec<f64>,
    /// Per-entry factor `dz̃/dz`; `None` when no dropout was applied.
    drop_scale: Option<Vec<f64>>,
    version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub d_a: Mat,
    pub d_b: Mat,
    pub d_phi: Vec<f64>,
    pub d_z: Vec<f64>,
}

impl AdapterGrads {
    pub fn zeros_like(layer: &AdaptedLinear) -> Self {
        Self {
            d_a: Mat::zeros(layer.a.rows(), layer.a.cols()),
            d_b: Mat::zeros(layer.b.rows(), layer.b.cols()),
            d_phi: vec![0.0; layer.d1()],
            d_z: vec![0.0; layer.d2()],
        }
    }

    /// Adds the parameter gradients of `other` (not `d_z`, which is per-input).
    pub fn accumulate(&mut self, other: &AdapterGrads) -> Result<()> {
        self.d_a.add_scaled(1.0, &other.d_a)?;
        self.d_b.add_scaled(1.0, &other.d_b)?;
        if self.d_phi.len() != other.d_phi.len() {
            return Err(DacError::shape("bias gradient length mismatch"));
        }
        axpy(1.0, &other.d_phi, &mut self.d_phi);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.d_a = self.d_a.scaled(s);
        self.d_b = self.d_b.scaled(s);
        self.d_phi.iter_mut().for_each(|v| *v *= s);
    }
}

impl AdaptedLinear {
    /// Fresh adapter on top of a frozen layer: `A ~ N(0, 1)`, `B = 0`, `Φ = 0`.
    pub fn init(frozen: MergedLinear, cfg: &AdapterConfig, rng: &mut Rng) -> Result<Self> {
        let (d1, d2) = frozen.w.shape();
        cfg.validate(d1, d2)?;
        let a = sample_normal(rng, cfg.rank, d2);
        Ok(Self {
            w0: frozen.w,
            bias0: frozen.bias,
            a,
            b: Mat::zeros(d1, cfg.rank),
            phi: vec![0.0; d1],
            gamma: cfg.gamma,
            dropout_p: cfg.dropout_p,
            phi_trainable: true,
            version: 0,
        })
    }

    /// Reassembles a layer from stored parameters.
    pub fn from_parts(
        frozen: MergedLinear,
        a: Mat,
        b: Mat,
        phi: Vec<f64>,
        gamma: f64,
        dropout_p: f64,
    ) -> Result<Self> {
        let (d1, d2) = frozen.w.shape();
        let rank = a.rows();
        AdapterConfig {
            rank,
            gamma,
            dropout_p,
        }
        .validate(d1, d2)?;
        if a.cols() != d2 || b.shape() != (d1, rank) || phi.len() != d1 {
            return Err(DacError::shape(format!(
                "adapter parts A{:?} B{:?} Φ[{}] do not fit a {d1}x{d2} layer",
                a.shape(),
                b.shape(),
                phi.len()
            )));
        }
        Ok(Self {
            w0: frozen.w,
            bias0: frozen.bias,
            a,
            b,
            phi,
            gamma,
            dropout_p,
            phi_trainable: true,
            version: 0,
        })
    }

    pub fn d1(&self) -> usize {
        self.w0.rows()
    }

    pub fn d2(&self) -> usize {
        self.w0.cols()
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn w0(&self) -> &Mat {
        &self.w0
    }

    pub fn bias0(&self) -> &[f64] {
        &self.bias0
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn phi_trainable(&self) -> bool {
        self.phi_trainable
    }

    pub fn frozen(&self) -> MergedLinear {
        MergedLinear {
            w: self.w0.clone(),
            bias: self.bias0.clone(),
        }
    }

    /// Mutable access to the trainable tensors, for perturbation-based checks.
    pub fn params_mut(&mut self) -> (&mut Mat, &mut Mat, &mut [f64]) {
        self.version += 1;
        (&mut self.a, &mut self.b, &mut self.phi)
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(DacError::config(format!("dropout probability {p} outside [0, 1)")));
        }
        self.dropout_p = p;
        Ok(())
    }

    fn delta_is_zero(&self) -> bool {
        self.b.is_zero() && self.phi.iter().all(|&v| v == 0.0)
    }

    /// Eval-mode forward (no dropout, no cache).
    pub fn forward_eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut o = self.frozen_forward(z)?;
        if !self.delta_is_zero() {
            let az = self.a.matvec(z)?;
            let b_az = self.b.matvec(&az)?;
            axpy(self.gamma, &b_az, &mut o);
            add_nonzero(&mut o, &self.phi);
        }
        Ok(o)
    }

    fn frozen_forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d2() {
            return Err(DacError::shape(format!(
                "adapted layer expects input of length {}, got {}",
                self.d2(),
                z.len()
            )));
        }
        let mut o = self.w0.matvec(z)?;
        add_nonzero(&mut o, &self.bias0);
        Ok(o)
    }

    /// Forward pass returning the cache needed by [`backward`](Self::backward).
    /// `train` carries the dropout stream; `None` means eval mode.
    pub fn forward(&self, z: &[f64], train: Option<&mut Rng>) -> Result<(Vec<f64>, AdapterCache)> {
        let mut o = self.frozen_forward(z)?;
        let (z_tilde, drop_scale) = match train {
            Some(rng) if self.dropout_p > 0.0 => {
                let keep = 1.0 / (1.0 - self.dropout_p);
                let scale: Vec<f64> = (0..z.len())
                    .map(|_| if rng.uniform() < self.dropout_p { 0.0 } else { keep })
                    .collect();
                let zt = z.iter().zip(&scale).map(|(v, s)| v * s).collect();
                (zt, Some(scale))
            }
            _ => (z.to_vec(), None),
        };
        let az = self.a.matvec(&z_tilde)?;
        if !self.delta_is_zero() {
            let b_az = self.b.matvec(&az)?;
            axpy(self.gamma, &b_az, &mut o);
            add_nonzero(&mut o, &self.phi);
        }
        let cache = AdapterCache {
            z_tilde,
            az,
            drop_scale,
            version: self.version,
        };
        Ok((o, cache))
    }

    /// Reverse-mode gradients of the adapter parameters and of the input.
    /// `W₀` receives no gradient.
    pub fn backward(&self, cache: &AdapterCache, grad_o: &[f64]) -> Result<AdapterGrads> {
        if cache.version != self.version {
            return Err(DacError::usage(
                "stale adapter cache: parameters changed since the forward pass",
            ));
        }
        if cache.z_tilde.len() != self.d2() || cache.az.len() != self.rank() {
            return Err(DacError::usage("adapter cache does not belong to this layer"));
        }
        if grad_o.len() != self.d1() {
            return Err(DacError::shape(format!(
                "output gradient length {} for layer with {} outputs",
                grad_o.len(),
                self.d1()
            )));
        }
        let bt_g = self.b.matvec_t(grad_o)?;

        let mut d_b = Mat::zeros(self.d1(), self.rank());
        d_b.add_outer(self.gamma, grad_o, &cache.az)?;
        let mut d_a = Mat::zeros(self.rank(), self.d2());
        d_a.add_outer(self.gamma, &bt_g, &cache.z_tilde)?;

        let mut d_z = self.w0.matvec_t(grad_o)?;
        let mut branch = self.a.matvec_t(&bt_g)?;
        if let Some(scale) = &cache.drop_scale {
            branch.iter_mut().zip(scale).for_each(|(v, s)| *v *= s);
        }
        axpy(self.gamma, &branch, &mut d_z);

        Ok(AdapterGrads {
            d_a,
            d_b,
            d_phi: grad_o.to_vec(),
            d_z,
        })
    }

    /// `p ← p − lr·grad` for `A`, `B` and (unless frozen) `Φ`.
    pub fn apply_update(&mut self, grads: &AdapterGrads, lr: f64) -> Result<()> {
        if grads.d_a.shape() != self.a.shape()
            || grads.d_b.shape() != self.b.shape()
            || grads.d_phi.len() != self.phi.len()
        {
            return Err(DacError::usage("gradient shapes do not match the adapter"));
        }
        self.a.add_scaled(-lr, &grads.d_a)?;
        self.b.add_scaled(-lr, &grads.d_b)?;
        if self.phi_trainable {
            axpy(-lr, &grads.d_phi, &mut self.phi);
        }
        self.version += 1;
        Ok(())
    }

    /// Folds the adapter into a plain affine layer: `w = W₀ + γ·B·A`,
    /// `bias = b₀ + Φ`.
    pub fn merge(&self) -> MergedLinear {
        if self.delta_is_zero() {
            return self.frozen();
        }
        let mut w = self.w0.clone();
        // w[i][j] += γ Σ_k B[i][k] A[k][j]
        for i in 0..self.d1() {
            for k in 0..self.rank() {
                let s = self.gamma * self.b.get(i, k);
                axpy(s, self.a.row(k), w.row_mut(i));
            }
        }
        let mut bias = self.bias0.clone();
        add_nonzero(&mut bias, &self.phi);
        MergedLinear { w, bias }
    }

    /// Classic LoRA view of this layer: `Φ` zeroed and excluded from updates.
    pub fn as_plain_lora(&self) -> AdaptedLinear {
        let mut plain = self.clone();
        plain.phi.iter_mut().for_each(|v| *v = 0.0);
        plain.phi_trainable = false;
        plain
    }
}
