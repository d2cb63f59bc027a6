//! Ordered-subsets accelerated proximal gradient reconstruction.
//!
//! Minimizes
//!
//! ```text
//! J(F) = ½ Σ_k ‖H_k f_k − g_k‖² + γ · ½ Σ_k ‖F d_k‖² + λ ‖F‖_*
//! ```
//!
//! over matrices of rank at most `R_max`, where `d_k = e_{k+1} − e_k` and
//! `d_{K−1} = 0` (0-based). Each outer iteration reshuffles the frames into
//! `M` blocks; every block performs a scaled gradient step, the rank-limited
//! nuclear-norm prox and a FISTA extrapolation. The iterate, its
//! extrapolation and every update stay in factored form.

use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_for_frame, VoxelGrid};
use crate::lowrank::{prox_nuclear, FactoredImage, LowRankUpdate, SpatioTemporal, SvdOptions};
use crate::metrics::data_fidelity;
use crate::operator::{estimate_operator_norm, Projector};
use crate::phantoms::{DynamicImage, MeasurementSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FistaVariant {
    /// Extrapolation coefficient `(t_j − 1) / t_{j+1}`.
    Standard,
    /// Coefficient `(t_j − 1) / t_j`.
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSize {
    Fixed(f64),
    /// `0.9 / (M · (L̂ + 4γ))` with `L̂` a power-iteration estimate of `max_k ‖H_k‖²`.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub r_max: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub step: StepSize,
    pub subsets: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub fista_variant: FistaVariant,
    pub track_full_fidelity: bool,
    /// Compute the numerical rank of every pre-prox update (costly on large grids).
    pub check_ranks: bool,
    pub svd: SvdOptions,
    pub norm_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            r_max: 40,
            epsilon: 0.25,
            gamma: 0.0,
            lambda: 0.0,
            step: StepSize::Auto,
            subsets: 18,
            max_iterations: 100,
            seed: 0,
            fista_variant: FistaVariant::Standard,
            track_full_fidelity: false,
            check_ranks: false,
            svd: SvdOptions::default(),
            norm_iterations: 30,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.r_max == 0 {
            return Err(Error::invalid("maximum rank must be at least 1"));
        }
        if self.subsets == 0 || self.subsets > frames {
            return Err(Error::invalid(format!(
                "subset count {} must lie in 1..={frames}",
                self.subsets
            )));
        }
        if !(self.gamma >= 0.0) || !(self.lambda >= 0.0) || !self.gamma.is_finite() || !self.lambda.is_finite() {
            return Err(Error::invalid("regularization weights must be finite and nonnegative"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("stopping threshold must be nonnegative"));
        }
        if let StepSize::Fixed(eta) = self.step {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(Error::invalid("step size must be positive"));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("at least one iteration is required"));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffled frame order split into `M` contiguous blocks of `⌈K/M⌉`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetSchedule {
    pub order: Vec<usize>,
    pub block_size: usize,
    pub subsets: usize,
}

impl SubsetSchedule {
    pub fn new(frames: usize, subsets: usize, seed: u64, iteration: usize) -> Result<Self> {
        if subsets == 0 || subsets > frames {
            return Err(Error::invalid("subset count must lie in 1..=K"));
        }
        let mut order: Vec<usize> = (0..frames).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, iteration as u64, 0));
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            block_size: frames.div_ceil(subsets),
            subsets,
        })
    }

    /// Block `j`; trailing blocks may be short or empty.
    pub fn block(&self, j: usize) -> &[usize] {
        let start = (j * self.block_size).min(self.order.len());
        let end = ((j + 1) * self.block_size).min(self.order.len());
        &self.order[start..end]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[usize]> {
        (0..self.subsets).map(|j| self.block(j))
    }
}

/// Rank-1 terms `(F d_k) ⊗ d_k` for `k` in `block`; the last frame
/// contributes nothing.
pub fn temporal_gradient_term(f: &FactoredImage, block: &[usize]) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let frames = f.frame_count();
    let mut out = Vec::new();
    for &k in block {
        if k >= frames {
            return Err(Error::invalid(format!("frame {k} out of range")));
        }
        if k + 1 == frames {
            continue;
        }
        let a = f.frame(k)?;
        let b = f.frame(k + 1)?;
        let x = DVector::from_iterator(a.len(), a.iter().zip(&b).map(|(p, q)| q - p));
        let mut d = DVector::zeros(frames);
        d[k] = -1.0;
        d[k + 1] = 1.0;
        out.push((x, d));
    }
    Ok(out)
}

/// `F̄ − η M Σ_{k∈block} [ H_kᵀ(H_k f̄_k − g_k) ⊗ e_k + γ (F̄ d_k) ⊗ d_k ]`.
pub fn gradient_step(
    fbar: &FactoredImage,
    block: &[usize],
    data: &MeasurementSet,
    grid: &VoxelGrid,
    eta: f64,
    gamma: f64,
    subsets: usize,
) -> Result<LowRankUpdate> {
    let geometry = &data.geometry;
    let frames = geometry.frame_count();
    if fbar.frame_count() != frames || fbar.voxel_count() != grid.len() {
        return Err(Error::invalid("iterate shape does not match the grid and scan"));
    }
    let scale = eta * subsets as f64;
    let projector = Projector::new(grid, geometry);
    let grads = block
        .par_iter()
        .map(|&k| {
            let pose = pose_for_frame(geometry, k)?;
            let mut r = projector.forward_values(&fbar.frame(k)?, &pose)?.data.values;
            for (a, b) in r.iter_mut().zip(&data.frames[k].values) {
                *a -= b;
            }
            projector.adjoint_values(&r, &pose)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut update = LowRankUpdate::new(fbar.clone());
    for (&k, g) in block.iter().zip(grads) {
        let x = DVector::from_iterator(g.len(), g.into_iter().map(|v| -scale * v));
        let mut e = DVector::zeros(frames);
        e[k] = 1.0;
        update.push(x, e)?;
    }
    if gamma > 0.0 {
        for (x, d) in temporal_gradient_term(fbar, block)? {
            update.push(x * (-scale * gamma), d)?;
        }
    }
    Ok(update)
}

/// Next momentum scalar and the extrapolated iterate.
pub fn fista_momentum(
    t: f64,
    f_new: &FactoredImage,
    f_old: &FactoredImage,
    variant: FistaVariant,
) -> Result<(f64, FactoredImage)> {
    if !(t >= 1.0) {
        return Err(Error::invalid(format!("momentum scalar {t} must be >= 1")));
    }
    let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
    let coeff = match variant {
        FistaVariant::Standard => (t - 1.0) / t_next,
        FistaVariant::PaperLiteral => (t - 1.0) / t,
    };
    let fbar = if coeff == 0.0 {
        f_new.clone()
    } else {
        f_new.combine(1.0 + coeff, f_old, -coeff)?
    };
    Ok((t_next, fbar))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxIterations,
}

/// Rank bookkeeping for one inner step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRanks {
    pub iteration: usize,
    pub block: usize,
    pub block_len: usize,
    /// Factor columns of the pre-prox update (an upper bound on its rank).
    pub pre_prox_terms: usize,
    /// Numerical rank of the pre-prox update, when rank checking is on.
    pub pre_prox_rank: Option<usize>,
    pub post_prox_rank: usize,
    pub extrapolated_rank: usize,
}

/// Per-outer-iteration record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub step_size: f64,
    pub ratio: Vec<f64>,
    /// `‖F⁽ⁱ⁾ − F⁽ⁱ⁻¹⁾‖²_F`.
    pub update_norm: Vec<f64>,
    pub nuclear_norm: Vec<f64>,
    pub temporal_penalty: Vec<f64>,
    pub rank: Vec<usize>,
    pub seconds: Vec<f64>,
    pub fidelity: Vec<Option<f64>>,
    pub max_pre_prox_rank: usize,
    pub max_extrapolated_rank: usize,
    pub max_post_prox_rank: usize,
    pub rank_violations: usize,
    pub stop: Option<StopReason>,
}

impl ConvergenceTrace {
    pub fn iterations(&self) -> usize {
        self.ratio.len()
    }

    /// Trace without wall-clock times, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            seconds: Vec::new(),
            ..self.clone()
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,ratio,fidelity,nuclear_norm,temporal_penalty,rank,seconds\n");
        for i in 0..self.iterations() {
            let fid = self.fidelity[i].map_or(String::new(), |v| format!("{v:e}"));
            s.push_str(&format!(
                "{},{:e},{},{:e},{:e},{},{:.6}\n",
                i + 1,
                self.ratio[i],
                fid,
                self.nuclear_norm[i],
                self.temporal_penalty[i],
                self.rank[i],
                self.seconds[i]
            ));
        }
        s
    }
}

/// Growth of `‖F⁽ⁱ⁾ − F⁽ⁱ⁻¹⁾‖²` over the first nonzero update that aborts a run.
pub const DIVERGENCE_GROWTH: f64 = 1e3;

/// Largest per-frame `‖H_k‖²` estimate over up to 16 evenly spaced frames.
pub fn estimate_lipschitz(data: &MeasurementSet, grid: &VoxelGrid, iterations: usize, seed: u64) -> Result<f64> {
    let frames = data.geometry.frame_count();
    let picks = frames.min(16);
    let mut best = 0.0f64;
    for i in 0..picks {
        let k = i * frames / picks;
        best = best.max(estimate_operator_norm(&data.geometry, grid, &[k], iterations, seed)?);
    }
    Ok(best)
}

pub fn resolve_step(config: &SolverConfig, data: &MeasurementSet, grid: &VoxelGrid) -> Result<f64> {
    match config.step {
        StepSize::Fixed(eta) => Ok(eta),
        StepSize::Auto => {
            let l = estimate_lipschitz(data, grid, config.norm_iterations, config.seed)?;
            if !(l > 0.0) {
                return Err(Error::Undefined("operator norm estimate is zero".into()));
            }
            Ok(0.9 / (config.subsets as f64 * (l + 4.0 * config.gamma)))
        }
    }
}

pub fn reconstruct(
    config: &SolverConfig,
    data: &MeasurementSet,
    grid: &VoxelGrid,
    init: Option<&FactoredImage>,
) -> Result<(FactoredImage, ConvergenceTrace)> {
    reconstruct_with_observer(config, data, grid, init, |_| {})
}

/// [`reconstruct`], reporting the ranks of every inner step to `observer`.
pub fn reconstruct_with_observer(
    config: &SolverConfig,
    data: &MeasurementSet,
    grid: &VoxelGrid,
    init: Option<&FactoredImage>,
    mut observer: impl FnMut(&StepRanks),
) -> Result<(FactoredImage, ConvergenceTrace)> {
    let frames = data.geometry.frame_count();
    config.validate(frames)?;
    let n = grid.len();
    let mut f = match init {
        Some(f0) => {
            if f0.voxel_count() != n || f0.frame_count() != frames {
                return Err(Error::invalid("initial image shape does not match the problem"));
            }
            f0.clone()
        }
        None => FactoredImage::zeros(n, frames),
    };
    let eta = resolve_step(config, data, grid)?;
    let threshold = eta * config.lambda;
    let mut fbar = f.clone();
    let mut t = 1.0;
    let mut trace = ConvergenceTrace {
        step_size: eta,
        ..Default::default()
    };
    let mut max_update: f64 = 0.0;
    let mut first_update: f64 = 0.0;
    let start = Instant::now();
    let b = frames.div_ceil(config.subsets);

    for i in 1..=config.max_iterations {
        let f_prev = f.clone();
        let schedule = SubsetSchedule::new(frames, config.subsets, config.seed, i)?;
        for (j, block) in schedule.blocks().enumerate() {
            let update = gradient_step(&fbar, block, data, grid, eta, config.gamma, config.subsets)?;
            if !update.is_finite() {
                return Err(Error::Divergence {
                    iteration: i,
                    growth: f64::INFINITY,
                    step: eta,
                });
            }
            let pre_terms = update.base().rank() + update.term_count();
            let pre_rank = if config.check_ranks {
                Some(update.numerical_rank(1e-12)?)
            } else {
                None
            };
            let svd_seed = mix_seed(config.seed, i as u64, 1 + j as u64);
            let f_new = prox_nuclear(&update, threshold, config.r_max, config.svd, svd_seed)?;
            let (t_next, extrapolated) = fista_momentum(t, &f_new, &f, config.fista_variant)?;
            let ranks = StepRanks {
                iteration: i,
                block: j,
                block_len: block.len(),
                pre_prox_terms: pre_terms,
                pre_prox_rank: pre_rank,
                post_prox_rank: f_new.rank(),
                extrapolated_rank: extrapolated.rank(),
            };
            trace.max_pre_prox_rank = trace.max_pre_prox_rank.max(pre_rank.unwrap_or(pre_terms));
            trace.max_post_prox_rank = trace.max_post_prox_rank.max(ranks.post_prox_rank);
            trace.max_extrapolated_rank = trace.max_extrapolated_rank.max(ranks.extrapolated_rank);
            if pre_rank.unwrap_or(0) > 2 * config.r_max + 2 * b
                || ranks.post_prox_rank > config.r_max
                || ranks.extrapolated_rank > 2 * config.r_max
            {
                trace.rank_violations += 1;
            }
            observer(&ranks);
            f = f_new;
            fbar = extrapolated;
            t = t_next;
        }

        let diff = f.distance_sq(&f_prev)?;
        let growth = if first_update > 0.0 { diff / first_update } else { 0.0 };
        if !diff.is_finite() || growth > DIVERGENCE_GROWTH {
            return Err(Error::Divergence {
                iteration: i,
                growth: if diff.is_finite() { growth } else { f64::INFINITY },
                step: eta,
            });
        }
        if first_update == 0.0 {
            first_update = diff;
        }
        max_update = max_update.max(diff);
        let ratio = if max_update > 0.0 { diff / max_update } else { 0.0 };
        trace.ratio.push(ratio);
        trace.update_norm.push(diff);
        trace.nuclear_norm.push(f.nuclear_norm());
        trace.temporal_penalty.push(f.temporal_penalty());
        trace.rank.push(f.rank());
        trace.fidelity.push(if config.track_full_fidelity {
            Some(data_fidelity(&f, data, grid)?)
        } else {
            None
        });
        trace.seconds.push(start.elapsed().as_secs_f64());
        log::debug!("iteration {i}: ratio {ratio:.3e}, rank {}", f.rank());
        if i >= 2 && ratio <= config.epsilon {
            trace.stop = Some(StopReason::Converged);
            return Ok((f, trace));
        }
    }
    trace.stop = Some(StopReason::MaxIterations);
    Ok((f, trace))
}

/// `(γ, λ)` that turn the balanced objective
/// `½ Σ‖H_k f_k − g_k‖² + κ (Σ‖Δf_k‖² / Σ‖Δf_k^true‖² + ‖F‖_* / ‖F^true‖_*)`
/// into the weighted form used by the solver.
pub fn balanced_regularization(kappa: f64, truth: &DynamicImage) -> Result<(f64, f64)> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::invalid("kappa must be finite and nonnegative"));
    }
    let temporal = truth.temporal_penalty();
    if temporal == 0.0 {
        return Err(Error::invalid("balancing needs a true object that changes over time"));
    }
    let nuclear = truth.nuclear_norm();
    Ok((kappa / temporal, kappa / nuclear))
}

/// Relative κ levels, to be multiplied by `‖G‖²_F`.
pub const KAPPA_FACTORS: [f64; 4] = [1e-4, 5e-4, 2.5e-3, 1.25e-2];

pub fn kappa_grid(data: &MeasurementSet) -> [f64; 4] {
    let g2 = data.frobenius_norm_sq();
    KAPPA_FACTORS.map(|c| c * g2)
}
