//! Spectrum-control strategies for the factored discriminator.
//!
//! A controller owns three decisions, all made per layer:
//!
//! 1. what the per-iteration singular-value update does to the stored `e`
//!    (clip into `[0,1]`, reset to ones, or nothing),
//! 2. which effective diagonal `e'` the realized weight `U diag(e') Vᵀ` uses
//!    (the stored values, or a normalized copy `e/max(e)` or `e/σ̂`), and
//! 3. which regularizer, if any, contributes to the training objective.
//!
//! Gradients with respect to the stored `e` are obtained by chaining the raw
//! per-singular-value gradient through decision 2, so normalizing controllers
//! use the quotient rule rather than treating the divisor as a constant.

use crate::linalg::{self, LinalgError, Mat};
use crate::svdnet::{DiscNet, SvdLayer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest gap between consecutive sorted singular values the divergence
/// regularizer will take a logarithm of; ties are floored here and their gap
/// term contributes no gradient.
pub const GAP_FLOOR: f64 = 1e-6;
/// Floor inside the D-optimal logarithm; entries at or below it contribute a
/// constant and no gradient.
pub const LOG_FLOOR: f64 = 1e-6;

/// Failure modes of spectrum control.
#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error("zero spectrum in layer {layer}: largest singular-value parameter {max:.3e} not above 1e-12")]
    ZeroSpectrum { layer: usize, max: f64 },
    #[error("domain error: {what}")]
    Domain { what: String },
    #[error("divergence regularizer needs rank >= 2, layer {layer} has rank {rank}")]
    RankTooSmall { layer: usize, rank: usize },
    #[error(
        "power-iteration state missing for layer {layer}; run the singular-value update first"
    )]
    PowerStateMissing { layer: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Persistent left vector and latest estimate for one layer under the
/// power-iteration baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerState {
    pub u: Vec<f64>,
    pub sigma_hat: f64,
}

/// A spectrum-control strategy. See the module docs for the three decisions a
/// controller makes; the variants are:
///
/// * `Orthogonal`: pins `e ≡ 1`, so the penalty-enforced orthonormal factors
///   make every weight (near-)orthogonal. No regularizer.
/// * `SpectralNormSvd`: divides by the exact largest entry, `e' = e/max(e)`.
///   Stored values are untouched; gradients flow through the quotient.
/// * `SpectralConstraint`: clips stored `e` into `[0,1]` entrywise.
/// * `LipschitzReg`: leaves `e` free and penalizes `max(Σ_i log max_k e^i_k, 0)`,
///   the log of the layerwise Lipschitz product when it exceeds one.
/// * `DOptimalPlusSn`: normalization as `SpectralNormSvd` plus the D-optimal
///   design penalty `−Σ log e` that pushes every value toward the top.
/// * `DivergencePlusSc`: clipping as `SpectralConstraint` plus a divergence
///   penalty matching the sorted spectrum to a half-normal reference.
/// * `PowerIterSn`: the one-step power-method baseline; divides by an estimate
///   `σ̂ ≤ σ₁` of the realized weight's spectral norm, treated as a constant
///   in the backward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SpectrumController {
    Orthogonal,
    SpectralNormSvd,
    SpectralConstraint,
    LipschitzReg { gamma: f64 },
    DOptimalPlusSn { gamma: f64 },
    DivergencePlusSc { gamma: f64, ref_scale: f64 },
    PowerIterSn { states: Vec<PowerState> },
}

impl SpectrumController {
    /// Stable lowercase tag, also used by the CLI and checkpoints.
    pub fn tag(&self) -> &'static str {
        match self {
            SpectrumController::Orthogonal => "orthogonal",
            SpectrumController::SpectralNormSvd => "spectral-norm",
            SpectrumController::SpectralConstraint => "spectral-constraint",
            SpectrumController::LipschitzReg { .. } => "lipschitz-reg",
            SpectrumController::DOptimalPlusSn { .. } => "d-optimal",
            SpectrumController::DivergencePlusSc { .. } => "divergence",
            SpectrumController::PowerIterSn { .. } => "power-iter",
        }
    }

    /// Builds a controller from its tag. `gamma` falls back to 1.0 (0.05 for
    /// the divergence penalty, which is tuned jointly with its clipping) and
    /// `ref_scale` to 0.5 when not given.
    pub fn from_tag(
        tag: &str,
        gamma: Option<f64>,
        ref_scale: Option<f64>,
    ) -> Result<SpectrumController, SpectrumError> {
        let ctrl = match tag {
            "orthogonal" => SpectrumController::Orthogonal,
            "spectral-norm" => SpectrumController::SpectralNormSvd,
            "spectral-constraint" => SpectrumController::SpectralConstraint,
            "lipschitz-reg" => SpectrumController::LipschitzReg {
                gamma: gamma.unwrap_or(1.0),
            },
            "d-optimal" => SpectrumController::DOptimalPlusSn {
                gamma: gamma.unwrap_or(1.0),
            },
            "divergence" => SpectrumController::DivergencePlusSc {
                gamma: gamma.unwrap_or(0.05),
                ref_scale: ref_scale.unwrap_or(0.5),
            },
            "power-iter" => SpectrumController::PowerIterSn { states: Vec::new() },
            other => {
                return Err(SpectrumError::Domain {
                    what: format!("unknown controller tag '{other}'"),
                })
            }
        };
        if let Some(g) = gamma {
            if g < 0.0 {
                return Err(SpectrumError::Domain {
                    what: format!("gamma must be >= 0, got {g}"),
                });
            }
        }
        if let Some(a) = ref_scale {
            if a <= 0.0 {
                return Err(SpectrumError::Domain {
                    what: format!("ref_scale must be > 0, got {a}"),
                });
            }
        }
        Ok(ctrl)
    }

    /// Per-iteration singular-value update, run at the start of each forward
    /// pass on every layer. Constraint-type controllers mutate the stored `e`;
    /// normalizing controllers only validate (their division happens when the
    /// weight is realized); the power-iteration baseline refreshes its `σ̂`
    /// estimate from the realized weight.
    pub fn sv_update(&mut self, layer: &mut SvdLayer, idx: usize) -> Result<(), SpectrumError> {
        match self {
            SpectrumController::Orthogonal => {
                layer.e.iter_mut().for_each(|x| *x = 1.0);
            }
            SpectrumController::SpectralConstraint
            | SpectrumController::DivergencePlusSc { .. } => {
                layer.e = project_clip(&layer.e);
            }
            SpectrumController::SpectralNormSvd | SpectrumController::DOptimalPlusSn { .. } => {
                let max = signed_max(&layer.e).1;
                if max <= 1e-12 {
                    return Err(SpectrumError::ZeroSpectrum { layer: idx, max });
                }
            }
            SpectrumController::LipschitzReg { .. } => {}
            SpectrumController::PowerIterSn { states } => {
                while states.len() <= idx {
                    states.push(PowerState {
                        u: Vec::new(),
                        sigma_hat: 0.0,
                    });
                }
                let w = realize_weight(layer, &layer.e)?;
                let d_in = layer.d_in();
                let state = &mut states[idx];
                if state.u.len() != d_in {
                    // Deterministic start; self-corrects over iterations.
                    state.u = vec![1.0 / (d_in as f64).sqrt(); d_in];
                }
                let stepped = match linalg::power_iter_sn(&w, &state.u, 1) {
                    Ok(ok) => ok,
                    Err(LinalgError::PowerRestart) => {
                        // The start vector was (numerically) in the kernel; one
                        // deterministic reseed with alternating signs.
                        let alt: Vec<f64> = (0..d_in)
                            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } / (d_in as f64).sqrt())
                            .collect();
                        linalg::power_iter_sn(&w, &alt, 1).map_err(|err| match err {
                            LinalgError::PowerRestart => SpectrumError::ZeroSpectrum {
                                layer: idx,
                                max: 0.0,
                            },
                            other => SpectrumError::Linalg(other),
                        })?
                    }
                    Err(other) => return Err(SpectrumError::Linalg(other)),
                };
                state.sigma_hat = stepped.0;
                state.u = stepped.1;
                if state.sigma_hat <= 1e-12 {
                    return Err(SpectrumError::ZeroSpectrum {
                        layer: idx,
                        max: state.sigma_hat,
                    });
                }
            }
        }
        Ok(())
    }

    /// Effective diagonal `e'` the realized weight uses for this layer.
    pub fn effective_diag(&self, idx: usize, e: &[f64]) -> Result<Vec<f64>, SpectrumError> {
        match self {
            SpectrumController::Orthogonal
            | SpectrumController::SpectralConstraint
            | SpectrumController::LipschitzReg { .. }
            | SpectrumController::DivergencePlusSc { .. } => Ok(e.to_vec()),
            SpectrumController::SpectralNormSvd | SpectrumController::DOptimalPlusSn { .. } => {
                let (_, max) = signed_max(e);
                if max <= 1e-12 {
                    return Err(SpectrumError::ZeroSpectrum { layer: idx, max });
                }
                Ok(e.iter().map(|x| x / max).collect())
            }
            SpectrumController::PowerIterSn { states } => {
                let state = states
                    .get(idx)
                    .filter(|s| !s.u.is_empty())
                    .ok_or(SpectrumError::PowerStateMissing { layer: idx })?;
                if state.sigma_hat <= 1e-12 {
                    return Err(SpectrumError::ZeroSpectrum {
                        layer: idx,
                        max: state.sigma_hat,
                    });
                }
                Ok(e.iter().map(|x| x / state.sigma_hat).collect())
            }
        }
    }

    /// Chains the raw gradient `ĝ_k = u_kᵀ (∇_W f) v_k` with respect to the
    /// effective diagonal back to the stored `e`.
    ///
    /// For `e' = e / e_max` the quotient rule gives `∂e'_k/∂e_k = 1/e_max` off
    /// the argmax and `∂e'_k/∂e_max = −e_k/e_max²`, so the argmax entry collects
    /// the weighted sum of everyone else (its own effective value is constant 1).
    /// The power-iteration `σ̂` is treated as a constant, and the `Orthogonal`
    /// controller pins `e`, so nothing flows there at all.
    pub fn chain_to_stored(
        &self,
        idx: usize,
        e: &[f64],
        ghat: &[f64],
    ) -> Result<Vec<f64>, SpectrumError> {
        debug_assert_eq!(e.len(), ghat.len());
        match self {
            SpectrumController::Orthogonal => Ok(vec![0.0; ghat.len()]),
            SpectrumController::SpectralConstraint
            | SpectrumController::LipschitzReg { .. }
            | SpectrumController::DivergencePlusSc { .. } => Ok(ghat.to_vec()),
            SpectrumController::SpectralNormSvd | SpectrumController::DOptimalPlusSn { .. } => {
                let (m, max) = signed_max(e);
                if max <= 1e-12 {
                    return Err(SpectrumError::ZeroSpectrum { layer: idx, max });
                }
                let mut g = vec![0.0; e.len()];
                let mut into_max = 0.0;
                for k in 0..e.len() {
                    if k == m {
                        continue;
                    }
                    g[k] = ghat[k] / max;
                    into_max -= ghat[k] * e[k] / (max * max);
                }
                g[m] = into_max;
                Ok(g)
            }
            SpectrumController::PowerIterSn { states } => {
                let state = states
                    .get(idx)
                    .filter(|s| !s.u.is_empty())
                    .ok_or(SpectrumError::PowerStateMissing { layer: idx })?;
                Ok(ghat.iter().map(|g| g / state.sigma_hat).collect())
            }
        }
    }

    /// True for controllers whose stored `e` must sit inside `[0,1]` (or at 1)
    /// after every optimizer step, not just at forward time.
    pub fn constrains_stored(&self) -> bool {
        matches!(
            self,
            SpectrumController::Orthogonal
                | SpectrumController::SpectralConstraint
                | SpectrumController::DivergencePlusSc { .. }
        )
    }
}

/// Index and value of the (signed) maximum, lowest index on ties.
fn signed_max(e: &[f64]) -> (usize, f64) {
    let mut idx = 0;
    let mut max = f64::NEG_INFINITY;
    for (k, &x) in e.iter().enumerate() {
        if x > max {
            max = x;
            idx = k;
        }
    }
    (idx, max)
}

/// `U diag(d) Vᵀ` for a given diagonal.
fn realize_weight(layer: &SvdLayer, diag: &[f64]) -> Result<Mat, LinalgError> {
    let mut scaled = layer.u.clone();
    for i in 0..scaled.rows {
        for (j, &d) in diag.iter().enumerate() {
            *scaled.at_mut(i, j) *= d;
        }
    }
    linalg::matmul(&scaled, &layer.v.transpose())
}

/// Runs the singular-value update over every layer of the network.
pub fn apply_sv_update(
    ctrl: &mut SpectrumController,
    net: &mut DiscNet,
) -> Result<(), SpectrumError> {
    for idx in 0..net.layers.len() {
        ctrl.sv_update(&mut net.layers[idx], idx)?;
    }
    Ok(())
}

/// Re-applies the controller's constraint set to the stored values after an
/// optimizer step, so constraint-type controllers leave every iteration with
/// `e` inside their feasible box (clipping is a projection, resetting to ones
/// is the orthogonal case). No-op for regularizing/normalizing controllers.
pub fn constrain_stored(ctrl: &SpectrumController, net: &mut DiscNet) {
    match ctrl {
        SpectrumController::Orthogonal => {
            for layer in &mut net.layers {
                layer.e.iter_mut().for_each(|x| *x = 1.0);
            }
        }
        SpectrumController::SpectralConstraint | SpectrumController::DivergencePlusSc { .. } => {
            for layer in &mut net.layers {
                layer.e = project_clip(&layer.e);
            }
        }
        _ => {}
    }
}

/// Entrywise clip onto `[0, 1]`. Idempotent and 1-Lipschitz per entry.
pub fn project_clip(e: &[f64]) -> Vec<f64> {
    e.iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

/// Lipschitz-product regularizer over per-layer maxima:
/// `value = γ·max(Σ_i log e_max_i, 0)`.
///
/// Returns the gradient with respect to each layer maximum; the caller routes
/// it to the argmax entry. On the inactive side (`Σ log ≤ 0`) the subgradient
/// choice is zero.
pub fn lipschitz_reg(e_max: &[f64], gamma: f64) -> Result<(f64, Vec<f64>), SpectrumError> {
    for (i, &m) in e_max.iter().enumerate() {
        if m <= 0.0 {
            return Err(SpectrumError::Domain {
                what: format!(
                    "lipschitz regularizer needs positive layer maxima, layer {i} has {m}"
                ),
            });
        }
    }
    let log_sum: f64 = e_max.iter().map(|m| m.ln()).sum();
    if log_sum > 0.0 {
        let grads = e_max.iter().map(|m| gamma / m).collect();
        Ok((gamma * log_sum, grads))
    } else {
        Ok((0.0, vec![0.0; e_max.len()]))
    }
}

/// D-optimal design regularizer `value = −γ·Σ_i Σ_k log max(e, ε)` over the
/// given layers. Entries at or below the floor contribute a constant and no
/// gradient; everything else gets `−γ/e`, a pull toward larger values whose
/// unique minimizer on `[ε, 1]` is the all-ones spectrum.
pub fn dopt_reg(e_lists: &[&[f64]], gamma: f64) -> (f64, Vec<Vec<f64>>) {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(e_lists.len());
    for e in e_lists {
        let mut g = vec![0.0; e.len()];
        for (k, &x) in e.iter().enumerate() {
            if x > LOG_FLOOR {
                value -= gamma * x.ln();
                g[k] = -gamma / x;
            } else {
                value -= gamma * LOG_FLOOR.ln();
            }
        }
        grads.push(g);
    }
    (value, grads)
}

/// Density of the reference distribution `y = 1 − min(|z|, 1)`, `z ∼ N(0, a²)`,
/// on the continuous part `(0, 1]`: the half-normal density of `|z|` evaluated
/// at `1 − y`. The point mass at `y = 0` is ignored.
pub fn reference_density(y: f64, a: f64) -> Result<f64, SpectrumError> {
    if !(0.0..=1.0).contains(&y) {
        return Err(SpectrumError::Domain {
            what: format!("reference density argument must lie in [0,1], got {y}"),
        });
    }
    if a <= 0.0 {
        return Err(SpectrumError::Domain {
            what: format!("reference scale must be > 0, got {a}"),
        });
    }
    let z = 1.0 - y;
    Ok((2.0 / (std::f64::consts::PI * a * a)).sqrt() * (-z * z / (2.0 * a * a)).exp())
}

/// Divergence regularizer matching each layer's sorted spectrum to the
/// half-normal reference:
/// `value = γ·Σ_i (r−1)^{-1} Σ_k −log[(r−1)·(e_(k+1) − e_(k))·p(e_(k))]`.
///
/// Entries are sorted ascending (the gaps must be positive for the log) and the
/// gradient is routed back through the sort permutation. Gaps at or below
/// [`GAP_FLOOR`] are floored and contribute no gap gradient; the density term
/// always contributes `(e−1)/a²` through `−log p`.
pub fn divergence_reg(
    e_lists: &[&[f64]],
    gamma: f64,
    a: f64,
) -> Result<(f64, Vec<Vec<f64>>), SpectrumError> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(e_lists.len());
    for (i, e) in e_lists.iter().enumerate() {
        let r = e.len();
        if r < 2 {
            return Err(SpectrumError::RankTooSmall { layer: i, rank: r });
        }
        for &x in e.iter() {
            if !(0.0..=1.0).contains(&x) {
                return Err(SpectrumError::Domain {
                    what: format!(
                        "divergence regularizer needs entries in [0,1], layer {i} has {x}"
                    ),
                });
            }
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.sort_by(|&p, &q| e[p].partial_cmp(&e[q]).unwrap());
        let sorted: Vec<f64> = perm.iter().map(|&p| e[p]).collect();

        let denom = (r - 1) as f64;
        let mut layer_sum = 0.0;
        let mut g_sorted = vec![0.0; r];
        for k in 0..r - 1 {
            let raw_gap = sorted[k + 1] - sorted[k];
            let gap = raw_gap.max(GAP_FLOOR);
            // Density floored only to keep the value finite for extreme
            // ref_scale choices; at sane scales the floor is unreachable.
            let p = reference_density(sorted[k], a)?.max(1e-300);
            layer_sum += -denom.ln() - gap.ln() - p.ln();
            if raw_gap > GAP_FLOOR {
                g_sorted[k] += 1.0 / gap;
                g_sorted[k + 1] -= 1.0 / gap;
            }
            // d(−log p)/de = −(1−e)/a².
            g_sorted[k] -= (1.0 - sorted[k]) / (a * a);
        }
        value += gamma * layer_sum / denom;
        let mut g = vec![0.0; r];
        for (j, &p) in perm.iter().enumerate() {
            g[p] = gamma * g_sorted[j] / denom;
        }
        grads.push(g);
    }
    Ok((value, grads))
}

/// Evaluates the controller's regularizer over the network and scatters the
/// gradients into per-layer vectors aligned with each layer's `e`.
///
/// The Lipschitz penalty runs over all layers (its product does); the
/// D-optimal and divergence penalties run over layers `1..L−1` as defined.
/// Controllers without a regularizer contribute zero.
pub fn regularizer_dispatch(
    ctrl: &SpectrumController,
    net: &DiscNet,
) -> Result<(f64, Vec<Vec<f64>>), SpectrumError> {
    let zeros = || {
        net.layers
            .iter()
            .map(|l| vec![0.0; l.rank()])
            .collect::<Vec<_>>()
    };
    match ctrl {
        SpectrumController::Orthogonal
        | SpectrumController::SpectralNormSvd
        | SpectrumController::SpectralConstraint
        | SpectrumController::PowerIterSn { .. } => Ok((0.0, zeros())),
        SpectrumController::LipschitzReg { gamma } => {
            let picks: Vec<(usize, f64)> = net.layers.iter().map(|l| signed_max(&l.e)).collect();
            let maxima: Vec<f64> = picks.iter().map(|&(_, m)| m).collect();
            let (value, g_max) = lipschitz_reg(&maxima, *gamma)?;
            let mut grads = zeros();
            for (i, (&(argmax, _), g)) in picks.iter().zip(&g_max).enumerate() {
                grads[i][argmax] = *g;
            }
            Ok((value, grads))
        }
        SpectrumController::DOptimalPlusSn { gamma } => {
            let inner: Vec<&[f64]> = net.layers[..net.layers.len() - 1]
                .iter()
                .map(|l| l.e.as_slice())
                .collect();
            let (value, inner_grads) = dopt_reg(&inner, *gamma);
            let mut grads = zeros();
            for (g, ig) in grads.iter_mut().zip(inner_grads) {
                *g = ig;
            }
            Ok((value, grads))
        }
        SpectrumController::DivergencePlusSc { gamma, ref_scale } => {
            let inner: Vec<&[f64]> = net.layers[..net.layers.len() - 1]
                .iter()
                .map(|l| l.e.as_slice())
                .collect();
            let (value, inner_grads) = divergence_reg(&inner, *gamma, *ref_scale)?;
            let mut grads = zeros();
            for (g, ig) in grads.iter_mut().zip(inner_grads) {
                *g = ig;
            }
            Ok((value, grads))
        }
    }
}
