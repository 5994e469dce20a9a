//! Sensitivity-gated weight decay and its ℓ2 ablation.
//!
//! The sensitivity of a parameter is the magnitude of its loss gradient,
//! `S = |∂L/∂w|`. Parameters with `S < 1` are shrunk by `λ·w·(1 − S)`;
//! parameters with `S ≥ 1` take a plain gradient step. The ℓ2 variant
//! applies the ungated decay `λ·w` to every parameter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::Model;
use crate::tape::{GradientSet, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lobster,
    L2,
    None,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lobster" => Ok(Self::Lobster),
            "l2" => Ok(Self::L2),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown regularizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lobster => "lobster",
            Self::L2 => "l2",
            Self::None => "none",
        })
    }
}

/// Where the decay displacement enters when momentum is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// Momentum accumulates only the loss gradient; decay hits `w` directly.
    Decoupled,
    /// Decay (scaled by `1/η`) is folded into the momentum buffer.
    Coupled,
}

impl std::str::FromStr for DecayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "decoupled" => Ok(Self::Decoupled),
            "coupled" => Ok(Self::Coupled),
            other => Err(Error::Config(format!("unknown decay mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for DecayMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Decoupled => "decoupled",
            Self::Coupled => "coupled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub variant: Variant,
    /// λ
    pub lambda: f64,
    /// η
    pub lr: f64,
    /// β
    pub momentum: f64,
    pub decay_mode: DecayMode,
}

impl RegularizerConfig {
    pub fn new(variant: Variant, lr: f64, lambda: f64) -> Self {
        Self {
            variant,
            lambda,
            lr,
            momentum: 0.0,
            decay_mode: DecayMode::Decoupled,
        }
    }

    /// `0 ≤ λ < 1`, `η > 0`, `0 ≤ β < 1`. The upper bound on λ keeps the
    /// decay from flipping the sign of a weight by itself.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda must lie in [0, 1), got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// `S = |g|` elementwise.
pub fn sensitivity(grad: &[f64]) -> Vec<f64> {
    grad.iter().map(|g| g.abs()).collect()
}

/// [`sensitivity`] that rejects non-finite gradients, naming `layer`.
pub fn checked_sensitivity(layer: &str, grad: &[f64]) -> Result<Vec<f64>> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {layer}")));
    }
    Ok(sensitivity(grad))
}

/// Indicator `P(S) = Θ(1 − S)`: 1 below unit sensitivity, 0 from 1 upwards.
#[inline]
pub fn gate(s: f64) -> f64 {
    if s < 1.0 {
        1.0
    } else {
        0.0
    }
}

/// `Γ = w · P(|g|)`.
#[inline]
pub fn gamma(w: f64, g: f64) -> f64 {
    w * gate(g.abs())
}

/// Regularisation displacement `λ·w·(1 − S)·P(S)`; `None` when gated off.
#[inline]
pub fn lobster_decay(w: f64, g: f64, lambda: f64) -> Option<f64> {
    let s = g.abs();
    (lambda != 0.0 && gate(s) != 0.0).then_some(lambda * w * (1.0 - s))
}

#[inline]
fn l2_decay(w: f64, lambda: f64) -> Option<f64> {
    (lambda != 0.0).then_some(lambda * w)
}

#[inline]
fn decay_for(variant: Variant, w: f64, g: f64, lambda: f64) -> Option<f64> {
    match variant {
        Variant::Lobster => lobster_decay(w, g, lambda),
        Variant::L2 => l2_decay(w, lambda),
        Variant::None => None,
    }
}

fn check_shapes(w: &[f64], g: &[f64], mask: &Mask) -> Result<()> {
    if w.len() != g.len() || w.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "update",
            lhs: vec![w.len()],
            rhs: vec![g.len(), mask.len()],
        });
    }
    Ok(())
}

fn plain_update(variant: Variant, w: &mut [f64], g: &[f64], cfg: &RegularizerConfig, mask: &Mask) -> Result<()> {
    check_shapes(w, g, mask)?;
    for (i, (wi, &gi)) in w.iter_mut().zip(g).enumerate() {
        if !mask.is_alive(i) {
            *wi = 0.0;
            continue;
        }
        let mut next = *wi - cfg.lr * gi;
        if let Some(d) = decay_for(variant, *wi, gi, cfg.lambda) {
            next -= d;
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("{variant} update at coordinate {i}")));
        }
        *wi = next;
    }
    Ok(())
}

/// One momentum-free step `w ← w − η·g − λ·w·(1 − S)·P(S)`, `S = |g|`.
/// Pruned coordinates are left at exactly zero.
pub fn lobster_step(w: &mut [f64], g: &[f64], cfg: &RegularizerConfig, mask: &Mask) -> Result<()> {
    plain_update(Variant::Lobster, w, g, cfg, mask)
}

/// One momentum-free step `w ← w − η·g − λ·w`.
pub fn l2_step(w: &mut [f64], g: &[f64], cfg: &RegularizerConfig, mask: &Mask) -> Result<()> {
    plain_update(Variant::L2, w, g, cfg, mask)
}

/// One plain gradient step `w ← w − η·g`.
pub fn sgd_step(w: &mut [f64], g: &[f64], cfg: &RegularizerConfig, mask: &Mask) -> Result<()> {
    plain_update(Variant::None, w, g, cfg, mask)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Equivalent learning rate `η̃ = η − sign(g)·λ·Γ(w, g)`, with `sign(0) = 0`.
pub fn equivalent_lr(w: &[f64], g: &[f64], cfg: &RegularizerConfig) -> Vec<f64> {
    w.iter()
        .zip(g)
        .map(|(&wi, &gi)| cfg.lr - sign(gi) * cfg.lambda * gamma(wi, gi))
        .collect()
}

/// Per-coordinate diagnostics of the update rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivitySnapshot {
    pub sensitivity: Vec<f64>,
    pub gate: Vec<f64>,
    pub equivalent_lr: Vec<f64>,
}

impl SensitivitySnapshot {
    pub fn compute(w: &[f64], g: &[f64], cfg: &RegularizerConfig) -> Self {
        let sensitivity = sensitivity(g);
        let gate = sensitivity.iter().map(|&s| gate(s)).collect();
        Self {
            sensitivity,
            gate,
            equivalent_lr: equivalent_lr(w, g, cfg),
        }
    }
}

/// SGD with optional momentum applying the configured regulariser to every
/// parameter tensor of a model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: RegularizerConfig,
    velocity: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: RegularizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &RegularizerConfig {
        &self.cfg
    }

    /// Applies one update. Gradients at pruned coordinates are zeroed first
    /// and parameters re-zeroed after, so pinned weights stay exactly zero.
    pub fn step(&mut self, model: &mut Model, grads: &GradientSet) -> Result<()> {
        let cfg = self.cfg;
        if self.velocity.len() != model.params().len() {
            self.velocity = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (idx, param) in model.params_mut().iter_mut().enumerate() {
            let grad = grads.get(ParamId(idx)).ok_or_else(|| {
                Error::Config(format!("missing gradient for {}", param.name))
            })?;
            if grad.shape() != param.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    lhs: param.value.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let mut g = grad.data().to_vec();
            param.mask.apply(&mut g);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", param.name)));
            }
            let w = param.value.data_mut();
            if cfg.momentum == 0.0 {
                plain_update(cfg.variant, w, &g, &cfg, &param.mask)?;
            } else {
                let v = &mut self.velocity[idx];
                param.mask.apply(v);
                for (i, wi) in w.iter_mut().enumerate() {
                    if !param.mask.is_alive(i) {
                        continue;
                    }
                    let gi = g[i];
                    let decay = decay_for(cfg.variant, *wi, gi, cfg.lambda);
                    let next = match cfg.decay_mode {
                        DecayMode::Decoupled => {
                            v[i] = cfg.momentum * v[i] + gi;
                            let mut next = *wi - cfg.lr * v[i];
                            if let Some(d) = decay {
                                next -= d;
                            }
                            next
                        }
                        DecayMode::Coupled => {
                            v[i] = cfg.momentum * v[i] + gi + decay.map_or(0.0, |d| d / cfg.lr);
                            *wi - cfg.lr * v[i]
                        }
                    };
                    if !next.is_finite() {
                        return Err(Error::NonFinite(format!("update of {}", param.name)));
                    }
                    *wi = next;
                }
            }
            param.mask.apply(w);
        }
        Ok(())
    }
}
