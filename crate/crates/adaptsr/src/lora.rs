//! Low-rank adapter math.
//!
//! A frozen base weight `W0` is augmented with a trainable low-rank delta:
//! `W = W0 + s·B·A`, `s = alpha/rank`. For a linear layer `A` is `r×d_in`
//! and `B` is `d_out×r`. For a convolution the factorization runs over the
//! flattened kernel: `A` is `r×(C_in·k·k)` and `B` is `C_out×r`, so `B·A`
//! reshapes to a drop-in `C_out×C_in×k×k` kernel and merging is exact.
//!
//! `B` starts at zero, so a freshly wrapped layer computes exactly the base
//! forward; training moves only `A` and `B`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamId, UNSET};
use crate::rng::{fill_normal, label_stream, stream_rng};

/// Hyperparameters of one adapter set.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    /// Inner dimension of the factorization.
    pub rank: usize,
    /// Scale numerator; the effective delta scale is `alpha / rank`.
    pub alpha: f64,
    /// Std of A's gaussian init (B is always zero-initialized).
    pub init_std: f64,
    /// Seed for A's init; combined with a per-layer stream label.
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 1.0, init_std: 0.02, seed: 0 }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid_config("lora rank must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid_config("lora alpha must be finite and > 0"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::invalid_config("lora init_std must be finite and > 0"));
        }
        Ok(())
    }

    pub fn scale(&self) -> Result<f32> {
        effective_scale(self.alpha, self.rank as i64)
    }
}

/// `alpha / rank`, validated.
pub fn effective_scale(alpha: f64, rank: i64) -> Result<f32> {
    if rank < 1 {
        return Err(Error::invalid_config(format!("rank must be >= 1, got {rank}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid_config(format!("alpha must be finite and > 0, got {alpha}")));
    }
    let s = alpha / rank as f64;
    Ok(s as f32)
}

/// Whether an adapter is still a separate delta path or already folded into
/// the base weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeState {
    Wrapped,
    Merged,
}

/// Trainable factors attached to a layer, plus merge bookkeeping.
#[derive(Debug, Clone)]
pub struct LoraFactors {
    /// `rank × fan_in` (fan_in = d_in for linear, C_in·k·k for conv).
    pub a: Array2<f32>,
    /// `fan_out × rank`.
    pub b: Array2<f32>,
    /// Effective scale `alpha / rank`.
    pub scale: f32,
    pub rank: usize,
    pub alpha: f64,
    pub state: MergeState,
    /// The exact `s·B·A` folded in at merge time, kept for exact unmerge.
    pub cached_delta: Option<Array2<f32>>,
    /// True when rank >= min(fan_in, fan_out); allowed but logged.
    pub over_rank: bool,
    pub pid_a: ParamId,
    pub pid_b: ParamId,
}

impl LoraFactors {
    /// Build factors for a `fan_out × fan_in` weight. A is seeded gaussian,
    /// B is zero. `label` names the layer so per-layer init streams do not
    /// depend on injection order.
    pub fn new(fan_in: usize, fan_out: usize, cfg: &LoraConfig, label: &str) -> Result<Self> {
        cfg.validate()?;
        let scale = cfg.scale()?;
        let over_rank = cfg.rank >= fan_in.min(fan_out);
        if over_rank {
            log::warn!(
                "lora rank {} >= min(fan_in={fan_in}, fan_out={fan_out}) on '{label}': \
                 adapter is no longer low-rank",
                cfg.rank
            );
        }
        let mut a = Array2::<f32>::zeros((cfg.rank, fan_in));
        let mut rng = stream_rng(cfg.seed, label_stream(label));
        fill_normal(&mut a.view_mut(), cfg.init_std as f32, &mut rng);
        Ok(LoraFactors {
            a,
            b: Array2::zeros((fan_out, cfg.rank)),
            scale,
            rank: cfg.rank,
            alpha: cfg.alpha,
            state: MergeState::Wrapped,
            cached_delta: None,
            over_rank,
            pid_a: UNSET,
            pid_b: UNSET,
        })
    }

    /// `s·B·A` as a `fan_out × fan_in` matrix.
    pub fn delta(&self) -> Array2<f32> {
        let mut d = self.b.dot(&self.a);
        d *= self.scale;
        d
    }
}

/// Wrap a 2-D base weight in an adapter. The base is frozen from here on;
/// only A and B train.
pub fn make_linear_adapter(
    base_weight: Array2<f32>,
    base_bias: Option<ndarray::Array1<f32>>,
    cfg: &LoraConfig,
) -> Result<Linear> {
    let mut layer = Linear::new(base_weight, base_bias);
    layer.wrap_lora(cfg, "linear")?;
    Ok(layer)
}

/// Wrap a conv kernel (C_out,C_in,k,k) in an adapter.
pub fn make_conv_adapter(
    base_kernel: ndarray::Array4<f32>,
    base_bias: Option<ndarray::Array1<f32>>,
    stride: usize,
    padding: usize,
    cfg: &LoraConfig,
) -> Result<Conv2d> {
    let mut layer = Conv2d::new(base_kernel, base_bias, stride, padding);
    layer.wrap_lora(cfg, "conv")?;
    Ok(layer)
}

/// Adapter parameter count for a layer with the given fans.
pub fn lora_param_count(fan_in: usize, fan_out: usize, rank: usize) -> usize {
    rank * (fan_in + fan_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_scale_values() {
        assert_eq!(effective_scale(1.0, 8).unwrap(), 0.125);
        assert_eq!(effective_scale(1.0, 1).unwrap(), 1.0);
        assert_eq!(effective_scale(2.0, 4).unwrap(), 0.5);
    }

    #[test]
    fn effective_scale_rejects_bad_config() {
        assert!(effective_scale(1.0, 0).is_err());
        assert!(effective_scale(1.0, -3).is_err());
        assert!(effective_scale(0.0, 8).is_err());
        assert!(effective_scale(-1.0, 8).is_err());
        assert!(effective_scale(f64::NAN, 8).is_err());
    }

    #[test]
    fn factors_start_with_zero_b_and_seeded_a() {
        let cfg = LoraConfig { rank: 2, seed: 11, ..Default::default() };
        let f1 = LoraFactors::new(4, 3, &cfg, "x").unwrap();
        let f2 = LoraFactors::new(4, 3, &cfg, "x").unwrap();
        assert!(f1.b.iter().all(|&v| v == 0.0));
        assert_eq!(f1.a, f2.a);
        assert!(f1.a.iter().any(|&v| v != 0.0));
        let f3 = LoraFactors::new(4, 3, &cfg, "y").unwrap();
        assert_ne!(f1.a, f3.a);
    }

    #[test]
    fn over_rank_is_flagged_but_allowed() {
        let cfg = LoraConfig { rank: 3, ..Default::default() };
        let f = LoraFactors::new(2, 2, &cfg, "t").unwrap();
        assert!(f.over_rank);
        let f2 = LoraFactors::new(64, 64, &LoraConfig::default(), "t").unwrap();
        assert!(!f2.over_rank);
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(lora_param_count(64, 64, 8), 1024);
        assert_eq!(lora_param_count(16 * 9, 16, 4), 640);
    }
}
