//! Pieces shared by both training loops: batched gradients, the optimizer
//! step, metric logs and per-step random streams.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Gradients;
use crate::data_synth::derive_seed;
use crate::error::{Error, Result};
use crate::optimization::{clip_grad_norm, lr_at_step, AdamW, ScheduleConfig};
use crate::params::ParamStore;
use crate::tensor::Float;

/// Run-level options that are not part of the model configuration.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: u64,
    /// Where checkpoints and `metrics.csv` go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Resolved configuration echoed into checkpoint manifests.
    pub config_echo: serde_json::Value,
    /// Print a progress line every this many steps (0 = never).
    pub log_every: usize,
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        RunOptions {
            seed,
            out_dir: None,
            config_echo: serde_json::Value::Null,
            log_every: 0,
        }
    }
}

/// Random stream for one training step; a pure function of `(seed, stream, step)`
/// so a resumed run draws the same data as an uninterrupted one.
pub fn step_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed ^ stream.wrapping_mul(0xA076_1D64_78BD_642F), step))
}

/// Mean loss and mean gradient over `n` independent items.
///
/// Items may be evaluated in parallel; the reduction runs in item order, so
/// the result does not depend on the thread count.
pub fn batch_gradients<T, F>(n: usize, item: F) -> Result<(f64, Gradients<T>)>
where
    T: Float,
    F: Fn(usize) -> Result<(f64, Gradients<T>)> + Sync + Send,
{
    let results: Vec<Result<(f64, Gradients<T>)>> = (0..n).into_par_iter().map(item).collect();
    let mut total = 0.0;
    let mut grads = Gradients::empty();
    for r in results {
        let (loss, g) = r?;
        total += loss;
        grads.accumulate(g);
    }
    grads.scale(T::c(1.0 / n as f64));
    Ok((total / n as f64, grads))
}

/// Clip (if configured) and apply one AdamW update at `step`. Returns the global lr.
pub fn apply_update<T: Float>(
    store: &mut ParamStore<T>,
    optimizer: &mut AdamW<T>,
    grads: &mut Gradients<T>,
    scales: &[f64],
    cfg: &ScheduleConfig,
    step: usize,
) -> Result<f64> {
    if let Some(max) = cfg.max_grad_norm {
        clip_grad_norm(grads, max);
    }
    if !grads.global_norm().is_finite() {
        return Err(Error::numerical(format!("non-finite gradient at step {step}")));
    }
    let lr = lr_at_step(step, cfg);
    let per_param: Vec<f64> = scales.iter().map(|s| s * lr).collect();
    optimizer.update(store, grads, &per_param, cfg);
    Ok(lr)
}

/// Append-only CSV log with a fixed header.
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn open(path: &Path, header: &str) -> Result<Self> {
        if !path.exists() {
            std::fs::write(path, format!("{header}\n")).map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsLog { path: path.to_path_buf() })
    }

    pub fn append(&self, fields: &[String]) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", fields.join(",")).map_err(|e| Error::io(&self.path, e))
    }
}
