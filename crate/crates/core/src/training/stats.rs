use crate::error::{contract_err, Result};
use crate::model::{ModelConfig, ParamGroup, TrunkParameters};

/// Gradient diagnostics of one training step, taken before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStats {
    pub step: usize,
    /// L2 norm of all gradients within each transformer block.
    pub per_block_magnitude: Vec<f64>,
    /// Population standard deviation of `per_block_magnitude`.
    pub cross_block_std: f64,
    /// L2 norm of all gradients, embeddings and head included.
    pub total_norm: f64,
}

impl GradStats {
    pub fn new(step: usize, per_block_magnitude: Vec<f64>, total_norm: f64) -> Self {
        let cross_block_std = population_std(&per_block_magnitude);
        Self { step, per_block_magnitude, cross_block_std, total_norm }
    }
}

/// Sum of squares with four interleaved partial sums, which vectorizes.
pub fn sum_sq(xs: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = xs.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().map(|x| x * x).sum();
    for c in chunks {
        for (a, x) in acc.iter_mut().zip(c) {
            *a += x * x;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Standard deviation with denominator `n`; 0 for an empty slice.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-block L2 norm of the gradients stored on `params`. Embeddings and
/// the head are excluded.
pub fn grad_block_magnitudes(params: &TrunkParameters, config: &ModelConfig) -> Result<Vec<f64>> {
    let mut sq = vec![0.0; config.layers];
    for p in params.iter() {
        let Some(g) = p.tensor.grad() else {
            return contract_err(format!("parameter {} has no gradient", p.name));
        };
        if let ParamGroup::Block(i) = p.group {
            if i >= config.layers {
                return contract_err(format!("parameter {} belongs to block {i} of {}", p.name, config.layers));
            }
            sq[i] += sum_sq(g);
        }
    }
    Ok(sq.into_iter().map(f64::sqrt).collect())
}

/// L2 norm over every stored gradient.
pub fn total_grad_norm(params: &TrunkParameters) -> Result<f64> {
    let mut sq = 0.0;
    for p in params.iter() {
        let Some(g) = p.tensor.grad() else {
            return contract_err(format!("parameter {} has no gradient", p.name));
        };
        sq += sum_sq(g);
    }
    Ok(sq.sqrt())
}

/// Means over consecutive non-overlapping windows; a trailing partial
/// window is dropped.
pub fn windowed_means(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || series.len() < window {
        return contract_err(format!("window {window} over a series of {}", series.len()));
    }
    Ok(series.chunks_exact(window).map(|w| w.iter().sum::<f64>() / window as f64).collect())
}

/// `ema ← decay·ema + (1 − decay)·params`, elementwise.
pub fn ema_update(ema: &mut TrunkParameters, params: &TrunkParameters, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return contract_err(format!("EMA decay {decay} outside [0, 1)"));
    }
    if ema.len() != params.len() {
        return contract_err(format!("EMA of {} tensors against {}", ema.len(), params.len()));
    }
    for (e, p) in ema.iter().zip(params.iter()) {
        if e.tensor.shape() != p.tensor.shape() || e.name != p.name {
            return contract_err(format!(
                "EMA tensor {} {:?} against {} {:?}",
                e.name,
                e.tensor.shape(),
                p.name,
                p.tensor.shape()
            ));
        }
    }
    for (e, p) in ema.iter_mut().zip(params.iter()) {
        for (x, y) in e.tensor.data_mut().iter_mut().zip(p.tensor.data()) {
            *x = decay * *x + (1.0 - decay) * y;
        }
    }
    Ok(())
}
