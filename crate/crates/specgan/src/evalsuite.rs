//! Toy data, diagnostics, and the generalization-bound calculator.
//!
//! The training task is a ring of Gaussians: small enough to run thousands of
//! iterations on one core, rich enough to exhibit mode collapse. The
//! diagnostics quantify the phenomena of interest: how fast a layer's spectrum
//! decays, how many mixture modes the generator covers, how tight the
//! layerwise Lipschitz product is, and what the explicit-constant excess
//! generalization bound evaluates to.

use crate::linalg::Mat;
use crate::rng::DetRng;
use crate::spectrum::{SpectrumController, SpectrumError};
use crate::svdnet::{DiscNet, NetError};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Failure modes of the evaluation helpers.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("domain error: {what}")]
    Domain { what: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// The ring-of-Gaussians dataset: `modes` equal-weight components centered on
/// a circle of `radius`, each with isotropic standard deviation `sigma`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RingSpec {
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl Default for RingSpec {
    fn default() -> Self {
        RingSpec {
            modes: 8,
            radius: 2.0,
            sigma: 0.1,
        }
    }
}

impl RingSpec {
    /// The mixture centers, one per row.
    pub fn centers(&self) -> Mat {
        let mut c = Mat::zeros(self.modes, 2);
        for k in 0..self.modes {
            let ang = 2.0 * std::f64::consts::PI * k as f64 / self.modes as f64;
            *c.at_mut(k, 0) = self.radius * ang.cos();
            *c.at_mut(k, 1) = self.radius * ang.sin();
        }
        c
    }
}

/// Draws `count` ring samples using the supplied stream (the training loop's
/// way in, so data consumption advances one deterministic stream).
pub fn sample_ring_with(rng: &mut DetRng, count: usize, spec: &RingSpec) -> Mat {
    let centers = spec.centers();
    let mut out = Mat::zeros(count, 2);
    for i in 0..count {
        let k = ((rng.uniform() * spec.modes as f64) as usize).min(spec.modes - 1);
        *out.at_mut(i, 0) = centers.at(k, 0) + spec.sigma * rng.normal();
        *out.at_mut(i, 1) = centers.at(k, 1) + spec.sigma * rng.normal();
    }
    out
}

/// Draws `count` samples from a fresh generator seeded with `seed`.
pub fn sample_ring(count: usize, modes: usize, radius: f64, sigma: f64, seed: u64) -> Mat {
    let mut rng = DetRng::from_seed(seed);
    sample_ring_with(
        &mut rng,
        count,
        &RingSpec {
            modes,
            radius,
            sigma,
        },
    )
}

/// Counts covered modes and the high-quality fraction.
///
/// A sample is high-quality when it lies within `3σ` of its nearest center; a
/// mode counts as covered when it is the nearest center of at least
/// `max(1, 0.01·count)` high-quality samples.
pub fn mode_coverage(samples: &Mat, centers: &Mat, sigma: f64) -> (usize, f64) {
    assert!(samples.rows > 0, "mode coverage needs samples");
    let mut per_mode = vec![0usize; centers.rows];
    let mut hq = 0usize;
    for i in 0..samples.rows {
        let mut best = usize::MAX;
        let mut best_d2 = f64::INFINITY;
        for m in 0..centers.rows {
            let mut d2 = 0.0;
            for j in 0..samples.cols {
                let diff = samples.at(i, j) - centers.at(m, j);
                d2 += diff * diff;
            }
            if d2 < best_d2 {
                best_d2 = d2;
                best = m;
            }
        }
        if best_d2.sqrt() <= 3.0 * sigma {
            hq += 1;
            per_mode[best] += 1;
        }
    }
    let need = (0.01 * samples.rows as f64).max(1.0);
    let covered = per_mode.iter().filter(|&&n| n as f64 >= need).count();
    (covered, hq as f64 / samples.rows as f64)
}

/// One layer's spectrum view: singular values of the realized weight (the
/// magnitudes of the effective diagonal), sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub values: Vec<f64>,
    /// k/r for k = 1..r, so the last entry is exactly 1.
    pub normalized_ranks: Vec<f64>,
    /// Mean of the values divided by the largest: 1 means no decay.
    pub decay_area: f64,
}

/// Per-layer spectra at one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub iteration: u64,
    pub layers: Vec<LayerSpectrum>,
}

/// Builds the spectrum report from the controller's effective diagonals.
///
/// Values are `|e'|` sorted descending; with orthonormal factors these are
/// exactly the singular values of the realized weight, which is what makes the
/// report cross-checkable against an SVD of `W`.
pub fn spectrum_report(
    net: &DiscNet,
    ctrl: &SpectrumController,
    iteration: u64,
) -> Result<SpectrumReport, SpectrumError> {
    let mut layers = Vec::with_capacity(net.layers.len());
    for (idx, layer) in net.layers.iter().enumerate() {
        let mut values: Vec<f64> = ctrl
            .effective_diag(idx, &layer.e)?
            .iter()
            .map(|x| x.abs())
            .collect();
        values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let r = values.len();
        let normalized_ranks = (1..=r).map(|k| k as f64 / r as f64).collect();
        let max = values[0];
        let decay_area = if max > 0.0 {
            values.iter().sum::<f64>() / r as f64 / max
        } else {
            1.0
        };
        layers.push(LayerSpectrum {
            values,
            normalized_ranks,
            decay_area,
        });
    }
    Ok(SpectrumReport { iteration, layers })
}

/// Mean decay-area across layers, the scalar used for cross-controller
/// comparisons.
pub fn mean_decay_area(report: &SpectrumReport) -> f64 {
    report.layers.iter().map(|l| l.decay_area).sum::<f64>() / report.layers.len() as f64
}

/// Empirically probes the layerwise Lipschitz product bound.
///
/// Returns `(empirical_max_ratio, product_bound)` where the ratio maximizes
/// `|D(x) − D(y)|/‖x−y‖` over `n_pairs` sampled pairs and the bound is
/// `∏_i max_k |e'_k|` (activation slopes are ≤ 1, so they drop out). For 2-d
/// inputs each endpoint comes from the ring or from uniform noise over the
/// data bounding box; other input widths fall back to the box alone.
/// Coincident pairs are resampled.
pub fn lipschitz_probe(
    net: &mut DiscNet,
    ctrl: &SpectrumController,
    spec: &RingSpec,
    n_pairs: usize,
    seed: u64,
) -> Result<(f64, f64), EvalError> {
    assert!(n_pairs >= 1, "need at least one pair");
    let d = net.input_dim();
    let half_box = spec.radius + 3.0 * spec.sigma;
    let mut rng = DetRng::from_seed(seed);
    let mut points = Mat::zeros(2 * n_pairs, d);
    let draw = |rng: &mut DetRng, row: &mut [f64]| {
        if row.len() == 2 && rng.uniform() < 0.5 {
            let ring = sample_ring_with(rng, 1, spec);
            row.copy_from_slice(ring.row(0));
        } else {
            for x in row.iter_mut() {
                *x = half_box * (2.0 * rng.uniform() - 1.0);
            }
        }
    };
    for p in 0..n_pairs {
        // Fill x, then resample y until the pair is separated.
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; d];
        draw(&mut rng, &mut x);
        loop {
            draw(&mut rng, &mut y);
            let dist2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist2.sqrt() >= 1e-12 {
                break;
            }
        }
        points.row_mut(2 * p).copy_from_slice(&x);
        points.row_mut(2 * p + 1).copy_from_slice(&y);
    }
    let logits = net.forward(&points, ctrl)?;
    let mut max_ratio: f64 = 0.0;
    for p in 0..n_pairs {
        let (xi, yi) = (2 * p, 2 * p + 1);
        let mut dist2 = 0.0;
        for j in 0..d {
            let diff = points.at(xi, j) - points.at(yi, j);
            dist2 += diff * diff;
        }
        max_ratio = max_ratio.max((logits[xi] - logits[yi]).abs() / dist2.sqrt());
    }
    let mut bound = 1.0;
    for (idx, layer) in net.layers.iter().enumerate() {
        let eff = ctrl.effective_diag(idx, &layer.e)?;
        bound *= eff.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    }
    Ok((max_ratio, bound))
}

/// Inputs of the explicit-constant excess generalization bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenBoundInput {
    /// Sample count n.
    pub n: u64,
    /// Max layer width d.
    pub d: u64,
    /// Depth L.
    pub depth: u64,
    /// Input norm bound B_x.
    pub b_x: f64,
    /// Per-layer spectral norm bounds B_{W_i}, length = depth.
    pub b_w: Vec<f64>,
    /// Lipschitz constant of the outer loss transform.
    pub rho_phi: f64,
    /// Failure probability δ in (0,1).
    pub delta: f64,
    /// Optimization accuracy ε ≥ 0.
    pub epsilon: f64,
}

impl GenBoundInput {
    /// β = B_x · ∏ B_{W_i}.
    pub fn beta(&self) -> f64 {
        self.b_x * self.b_w.iter().product::<f64>()
    }

    fn validate(&self) -> Result<(), EvalError> {
        let bad = |what: String| Err(EvalError::Domain { what });
        if self.n == 0 || self.d == 0 || self.depth == 0 {
            return bad("n, d, L must be positive".into());
        }
        if self.b_w.len() != self.depth as usize {
            return bad(format!(
                "expected {} spectral-norm bounds, got {}",
                self.depth,
                self.b_w.len()
            ));
        }
        if self.b_x <= 0.0 || self.b_w.iter().any(|&b| b <= 0.0) || self.rho_phi <= 0.0 {
            return bad("norm bounds and rho_phi must be positive".into());
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return bad(format!("delta must lie in (0,1), got {}", self.delta));
        }
        if self.epsilon < 0.0 {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !self.beta().is_finite() {
            return bad("beta overflowed".into());
        }
        Ok(())
    }
}

/// Evaluates the explicit excess-bound expression
/// `16ρ/n + 48ρβ√(d²L·ln(2√(dn)·L·β))/√n + 12ρβ√(ln(1/δ)/n) + ε`
/// with natural logarithms and `β = B_x·∏B_{W_i}`.
pub fn excess_gen_bound(inp: &GenBoundInput) -> Result<f64, EvalError> {
    inp.validate()?;
    let n = inp.n as f64;
    let d = inp.d as f64;
    let depth = inp.depth as f64;
    let beta = inp.beta();
    let rho = inp.rho_phi;
    let log_arg = 2.0 * (d * n).sqrt() * depth * beta;
    if log_arg <= 1.0 {
        return Err(EvalError::Domain {
            what: format!("log argument 2√(dn)Lβ = {log_arg} must exceed 1"),
        });
    }
    Ok(16.0 * rho / n
        + 48.0 * rho * beta * (d * d * depth * log_arg.ln()).sqrt() / n.sqrt()
        + 12.0 * rho * beta * ((1.0 / inp.delta).ln() / n).sqrt()
        + inp.epsilon)
}

/// Logarithm of the covering number: `d²L·ln(1 + √d·L·β/eps)`.
pub fn log_covering_number(d: u64, depth: u64, beta: f64, eps: f64) -> Result<f64, EvalError> {
    if eps <= 0.0 {
        return Err(EvalError::Domain {
            what: format!("eps must be > 0, got {eps}"),
        });
    }
    if d == 0 || depth == 0 || beta < 0.0 {
        return Err(EvalError::Domain {
            what: "d, L must be positive and beta nonnegative".into(),
        });
    }
    let d = d as f64;
    let depth = depth as f64;
    Ok(d * d * depth * (1.0 + d.sqrt() * depth * beta / eps).ln())
}

/// One metrics.csv row. Column meanings:
/// coverage and quality from a fixed-size generator sample, Lipschitz numbers
/// from a small probe, the worst per-layer orthogonality penalty, the
/// regularizer value, and the latest losses.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iter: u64,
    pub modes_covered: usize,
    pub hq_fraction: f64,
    pub lip_empirical: f64,
    pub lip_bound: f64,
    pub orth_penalty_max: f64,
    pub reg_value: f64,
    pub disc_loss: f64,
    pub gen_loss: f64,
}

impl MetricRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}\n",
            self.iter,
            self.modes_covered,
            self.hq_fraction,
            self.lip_empirical,
            self.lip_bound,
            self.orth_penalty_max,
            self.reg_value,
            self.disc_loss,
            self.gen_loss
        )
    }
}

/// Writes metrics.csv (header plus one line per row, LF endings).
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<(), EvalError> {
    let mut out = String::from(
        "iter,modes_covered,hq_fraction,lip_empirical,lip_bound,orth_penalty_max,reg_value,disc_loss,gen_loss\n",
    );
    for row in rows {
        out.push_str(&row.csv_line());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes one spectra_{iter}.csv: `layer,k,normalized_rank,value` with layer
/// 0-based and k 1-based so `normalized_rank = k/r`.
pub fn write_spectra_csv(path: &Path, report: &SpectrumReport) -> Result<(), EvalError> {
    let mut out = String::from("layer,k,normalized_rank,value\n");
    for (layer, spec) in report.layers.iter().enumerate() {
        for (i, (v, nr)) in spec.values.iter().zip(&spec.normalized_ranks).enumerate() {
            out.push_str(&format!("{layer},{},{nr},{v}\n", i + 1));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a spectra CSV back into a report (the iteration is not stored in the
/// file, so the caller supplies it). Values survive the round trip exactly
/// because the writer uses shortest round-trip float formatting.
pub fn read_spectra_csv(path: &Path, iteration: u64) -> Result<SpectrumReport, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let malformed = |what: &str, line: usize| EvalError::Domain {
        what: format!("{what} at line {}", line + 1),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "layer,k,normalized_rank,value")) => {}
        _ => {
            return Err(EvalError::Domain {
                what: "missing spectra header".into(),
            })
        }
    }
    let mut layers: Vec<LayerSpectrum> = Vec::new();
    for (ln, line) in lines {
        let mut parts = line.split(',');
        let mut field = |what: &str| {
            parts
                .next()
                .ok_or_else(|| malformed(what, ln))
                .and_then(|s| s.parse::<f64>().map_err(|_| malformed(what, ln)))
        };
        let layer = field("layer")? as usize;
        let k = field("k")? as usize;
        let nr = field("normalized_rank")?;
        let value = field("value")?;
        if layer == layers.len() {
            layers.push(LayerSpectrum {
                values: Vec::new(),
                normalized_ranks: Vec::new(),
                decay_area: 1.0,
            });
        }
        let cur = layers
            .get_mut(layer)
            .ok_or_else(|| malformed("out-of-order layer", ln))?;
        if k != cur.values.len() + 1 {
            return Err(malformed("out-of-order k", ln));
        }
        cur.values.push(value);
        cur.normalized_ranks.push(nr);
    }
    for layer in &mut layers {
        let r = layer.values.len();
        if r == 0 {
            return Err(EvalError::Domain {
                what: "empty layer in spectra file".into(),
            });
        }
        let max = layer.values[0];
        layer.decay_area = if max > 0.0 {
            layer.values.iter().sum::<f64>() / r as f64 / max
        } else {
            1.0
        };
    }
    if layers.is_empty() {
        return Err(EvalError::Domain {
            what: "spectra file has no rows".into(),
        });
    }
    Ok(SpectrumReport { iteration, layers })
}

/// Appends one row to genbound.csv, creating it with a header first.
pub fn append_genbound_csv(path: &Path, inp: &GenBoundInput, bound: f64) -> Result<(), EvalError> {
    let fresh = !path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        file.write_all(b"n,d,L,beta,rho_phi,delta,epsilon,bound\n")?;
    }
    file.write_all(
        format!(
            "{},{},{},{},{},{},{},{}\n",
            inp.n,
            inp.d,
            inp.depth,
            inp.beta(),
            inp.rho_phi,
            inp.delta,
            inp.epsilon,
            bound
        )
        .as_bytes(),
    )?;
    Ok(())
}
