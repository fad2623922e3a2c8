//! Joint modality-level and patch-level masking with learnable mask tokens.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Var};
use crate::data_synth::{MODALITIES, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::{spatial_dims, Float};

/// Modality availability, `true` = visible. Ordered FLAIR, T1, T1ce, T2.
pub type Delta = [bool; NUM_MODALITIES];

/// A realized mask for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub delta: Delta,
    /// `eta[m][i]`: patch `i` of modality `m` visible.
    pub eta: Vec<Vec<bool>>,
    pub p: [f64; NUM_MODALITIES],
    pub q: [f64; NUM_MODALITIES],
    pub num_patches: usize,
}

impl MaskSpec {
    pub fn sample<R: Rng + ?Sized>(
        p: [f64; NUM_MODALITIES],
        q: [f64; NUM_MODALITIES],
        num_patches: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let delta = sample_modality_mask(&p, rng)?;
        let eta = sample_patch_mask(&q, num_patches, rng)?;
        Ok(MaskSpec {
            delta,
            eta,
            p,
            q,
            num_patches,
        })
    }

    /// Deterministic spec with the given availability and every patch visible.
    pub fn from_delta(delta: Delta, num_patches: usize) -> Result<Self> {
        if !delta.iter().any(|&d| d) {
            return Err(Error::protocol("at least one modality must be available"));
        }
        Ok(MaskSpec {
            delta,
            eta: vec![vec![true; num_patches]; NUM_MODALITIES],
            p: [0.0; NUM_MODALITIES],
            q: [0.0; NUM_MODALITIES],
            num_patches,
        })
    }

    /// γ = δ·η for every (modality, patch).
    pub fn joint_mask_indicator(&self) -> Vec<Vec<bool>> {
        self.eta
            .iter()
            .zip(self.delta)
            .map(|(row, d)| row.iter().map(|&e| d && e).collect())
            .collect()
    }
}

fn check_probs(name: &str, v: &[f64]) -> Result<()> {
    if v.len() != NUM_MODALITIES {
        return Err(Error::config(format!("{name} needs {NUM_MODALITIES} entries")));
    }
    if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::config(format!("{name} entry {x} outside [0,1]")));
    }
    Ok(())
}

/// δ_m ~ Bernoulli(1 − p_m), redrawn until at least one modality is visible.
pub fn sample_modality_mask<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Result<Delta> {
    check_probs("mask.p", p)?;
    if p.iter().all(|&x| x >= 1.0) {
        return Err(Error::config(
            "mask.p = 1 for every modality: no sample can keep a modality visible",
        ));
    }
    loop {
        let mut delta = [false; NUM_MODALITIES];
        for (d, &pm) in delta.iter_mut().zip(p) {
            *d = rng.random::<f64>() >= pm;
        }
        if delta.iter().any(|&d| d) {
            return Ok(delta);
        }
    }
}

/// η_{m,i} ~ Bernoulli(1 − q_m), independent.
pub fn sample_patch_mask<R: Rng + ?Sized>(q: &[f64], num_patches: usize, rng: &mut R) -> Result<Vec<Vec<bool>>> {
    check_probs("mask.q", q)?;
    if num_patches == 0 {
        return Err(Error::config("patch count must be positive"));
    }
    Ok(q
        .iter()
        .map(|&qm| (0..num_patches).map(|_| rng.random::<f64>() >= qm).collect())
        .collect())
}

/// One learnable `P³` vector per modality, shared by all patch positions.
#[derive(Clone, Debug)]
pub struct MaskTokens {
    pub id: ParamId,
    pub patch: usize,
}

impl MaskTokens {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, patch: usize, rng: &mut R) -> Self {
        let p3 = patch * patch * patch;
        let id = store.register(name, trunc_normal(&[NUM_MODALITIES, p3], 0.02, rng), false);
        MaskTokens { id, patch }
    }
}

/// Replace every patch with γ = 0 by its modality's mask token.
pub fn apply_mask<'t, T: Float>(
    cx: Ctx<'t, T>,
    volumes: Var<'t, T>,
    spec: &MaskSpec,
    tokens: &MaskTokens,
) -> Result<Var<'t, T>> {
    let shape = volumes.shape();
    let dims = spatial_dims(&shape)?;
    let patch = tokens.patch;
    if shape[0] != NUM_MODALITIES || dims.iter().any(|&d| d % patch != 0) {
        return Err(Error::contract(format!(
            "masking expects {NUM_MODALITIES}×D×H×W with dims divisible by {patch}, got {shape:?}"
        )));
    }
    let n = dims.iter().map(|d| d / patch).product::<usize>();
    if spec.num_patches != n || spec.eta.len() != NUM_MODALITIES || spec.eta.iter().any(|r| r.len() != n) {
        return Err(Error::contract(format!(
            "mask spec built for {} patches, volume has {n}",
            spec.num_patches
        )));
    }
    let gamma = spec.joint_mask_indicator();
    if gamma.iter().all(|row| row.iter().all(|&g| g)) {
        return Ok(volumes);
    }
    Ok(volumes.apply_patch_mask(cx.param(tokens.id), Arc::new(gamma), patch))
}

/// δ for a set of available modality names (case-insensitive).
pub fn subset_to_delta<S: AsRef<str>>(subset: &[S]) -> Result<Delta> {
    if subset.is_empty() {
        return Err(Error::protocol("modality subset must be non-empty"));
    }
    let mut delta = [false; NUM_MODALITIES];
    for name in subset {
        let name = name.as_ref().to_ascii_lowercase();
        let m = MODALITIES
            .iter()
            .position(|&x| x == name)
            .ok_or_else(|| Error::protocol(format!("unknown modality '{name}'")))?;
        delta[m] = true;
    }
    Ok(delta)
}

/// Available modality names for δ.
pub fn delta_names(delta: &Delta) -> Vec<&'static str> {
    MODALITIES
        .iter()
        .zip(delta)
        .filter(|(_, &d)| d)
        .map(|(&n, _)| n)
        .collect()
}

/// The 15 non-empty subsets, in the column order of the benchmark tables:
/// singles, pairs, triples, then all four.
pub fn protocol_subsets() -> [Delta; 15] {
    const F: bool = false;
    const T: bool = true;
    [
        [F, F, F, T],
        [F, F, T, F],
        [F, T, F, F],
        [T, F, F, F],
        [F, F, T, T],
        [F, T, T, F],
        [T, T, F, F],
        [F, T, F, T],
        [T, F, F, T],
        [T, F, T, F],
        [T, T, T, F],
        [T, T, F, T],
        [T, F, T, T],
        [F, T, T, T],
        [T, T, T, T],
    ]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetDistribution {
    /// Uniform over the 15 non-empty subsets.
    #[default]
    Uniform,
    /// Independent drops with probability `p_m`, resampled until non-empty.
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Modality drop probabilities `p_m`.
    pub p: [f64; NUM_MODALITIES],
    /// Patch drop probabilities `q_m` (pretraining only).
    pub q: [f64; NUM_MODALITIES],
    pub stage2_subset_distribution: SubsetDistribution,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            p: [0.5; NUM_MODALITIES],
            q: [0.75; NUM_MODALITIES],
            stage2_subset_distribution: SubsetDistribution::Uniform,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        check_probs("mask.p", &self.p)?;
        check_probs("mask.q", &self.q)?;
        if self.p.iter().all(|&x| x >= 1.0) {
            return Err(Error::config("mask.p = 1 for every modality is unsatisfiable"));
        }
        Ok(())
    }
}

/// Stage-2 availability for one training step.
pub fn sample_stage2_delta<R: Rng + ?Sized>(
    dist: SubsetDistribution,
    p: &[f64],
    rng: &mut R,
) -> Result<Delta> {
    match dist {
        SubsetDistribution::Uniform => Ok(protocol_subsets()[rng.random_range(0..15)]),
        SubsetDistribution::Bernoulli => sample_modality_mask(p, rng),
    }
}
