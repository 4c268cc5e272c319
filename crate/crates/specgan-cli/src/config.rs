//! Run config parsing and resolution.
//!
//! The on-disk document is JSON with every key optional; unknown keys are
//! rejected so typos cannot silently fall back to defaults. Whatever defaults
//! do apply are resolved here and written into the run manifest, so a manifest
//! `config` block is itself a complete config that reproduces the run.
//!
//! Defaults: controller "spectral-norm"; loss "gan_log" with n_dis 1 and Adam
//! (2e-4, 0.5, 0.999), or for "hinge" n_dis 5 and Adam (2e-4, 0, 0.9);
//! lambda 10; gamma 1 except 0.05 for "divergence"; ref_scale 0.5; batch 64;
//! iters 5000; disc_dims [2,32,32,32,1]; gen_dims [8,64,64,2]; z_dim 8; ring
//! 8 modes, radius 2, sigma 0.1; seed 0; eval_every 500; eval_samples 1000;
//! lip_pairs 256; out_dir "run_out" (overridden by SPECGAN_OUT_DIR); plot off.

use serde::{Deserialize, Serialize};
use specgan::optim::{LossFamily, TrainConfig};
use specgan::spectrum::SpectrumController;
use std::path::{Path, PathBuf};

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub controller: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ref_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen_loss_sigmoid: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_dis: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen_beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen_beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_dims: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen_dims: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_modes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lip_pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plot: Option<bool>,
}

/// A fully resolved run: training config plus CLI-side knobs.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub plot: bool,
}

fn build_controller(
    tag: &str,
    gamma: Option<f64>,
    ref_scale: Option<f64>,
) -> Result<SpectrumController, String> {
    let no_gamma = |ctrl: SpectrumController| {
        if gamma.is_some() {
            Err(format!("gamma is not applicable to controller {tag:?}"))
        } else {
            Ok(ctrl)
        }
    };
    let ctrl = match tag {
        "orthogonal" => no_gamma(SpectrumController::Orthogonal)?,
        "spectral-norm" => no_gamma(SpectrumController::SpectralNormSvd)?,
        "spectral-constraint" => no_gamma(SpectrumController::SpectralConstraint)?,
        "power-iter" => no_gamma(SpectrumController::PowerIterSn { states: Vec::new() })?,
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
        other => {
            return Err(format!(
                "unknown controller {other:?}; expected one of orthogonal, spectral-norm, \
                 spectral-constraint, lipschitz-reg, d-optimal, divergence, power-iter"
            ))
        }
    };
    if ref_scale.is_some() && tag != "divergence" {
        return Err(format!("ref_scale is not applicable to controller {tag:?}"));
    }
    Ok(ctrl)
}

/// Parses, applies defaults, and cross-fills `z_dim`/`gen_dims` when only one
/// of the pair is given. Every resolved value ends up in the manifest.
pub fn resolve(text: &str) -> Result<Resolved, String> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let loss = match cfg.loss.as_deref() {
        None | Some("gan_log") => LossFamily::GanLog,
        Some("hinge") => LossFamily::Hinge,
        Some(other) => {
            return Err(format!(
                "unknown loss {other:?}; expected \"gan_log\" or \"hinge\""
            ))
        }
    };
    let tag = cfg.controller.as_deref().unwrap_or("spectral-norm");
    let controller = build_controller(tag, cfg.gamma, cfg.ref_scale)?;
    let seed = cfg.seed.unwrap_or(0);
    let mut train = match loss {
        LossFamily::GanLog => TrainConfig::dcgan_ring(controller, seed),
        LossFamily::Hinge => TrainConfig::hinge_ring(controller, seed),
    };
    train.gen_loss_sigmoid = cfg.gen_loss_sigmoid.unwrap_or(false);
    if let Some(v) = cfg.lambda {
        train.lambda = v;
    }
    if let Some(v) = cfg.n_dis {
        train.n_dis = v;
    }
    if let Some(v) = cfg.batch {
        train.batch = v;
    }
    if let Some(v) = cfg.iters {
        train.iters = v;
    }
    if let Some(v) = cfg.disc_alpha {
        train.disc_adam.alpha = v;
    }
    if let Some(v) = cfg.disc_beta1 {
        train.disc_adam.beta1 = v;
    }
    if let Some(v) = cfg.disc_beta2 {
        train.disc_adam.beta2 = v;
    }
    if let Some(v) = cfg.gen_alpha {
        train.gen_adam.alpha = v;
    }
    if let Some(v) = cfg.gen_beta1 {
        train.gen_adam.beta1 = v;
    }
    if let Some(v) = cfg.gen_beta2 {
        train.gen_adam.beta2 = v;
    }
    if let Some(v) = cfg.disc_dims {
        train.disc_dims = v;
    }
    match (cfg.gen_dims, cfg.z_dim) {
        (Some(dims), Some(z)) => {
            train.gen_dims = dims;
            train.z_dim = z;
        }
        (Some(dims), None) => {
            train.z_dim = *dims.first().ok_or("gen_dims must not be empty")?;
            train.gen_dims = dims;
        }
        (None, Some(z)) => {
            train.z_dim = z;
            train.gen_dims[0] = z;
        }
        (None, None) => {}
    }
    if let Some(v) = cfg.ring_modes {
        train.ring.modes = v;
    }
    if let Some(v) = cfg.ring_radius {
        train.ring.radius = v;
    }
    if let Some(v) = cfg.ring_sigma {
        train.ring.sigma = v;
    }
    if let Some(v) = cfg.eval_every {
        train.eval_every = v;
    }
    if let Some(v) = cfg.eval_samples {
        train.eval_samples = v;
    }
    if let Some(v) = cfg.lip_pairs {
        train.lip_pairs = v;
    }
    let out_dir = std::env::var("SPECGAN_OUT_DIR")
        .ok()
        .unwrap_or_else(|| cfg.out_dir.unwrap_or_else(|| "run_out".to_string()));
    Ok(Resolved {
        train,
        out_dir: PathBuf::from(out_dir),
        plot: cfg.plot.unwrap_or(false),
    })
}

impl Resolved {
    /// The fully populated config this run actually used; feeding it back to
    /// `resolve` reproduces the run.
    fn to_run_config(&self) -> RunConfig {
        let t = &self.train;
        let (gamma, ref_scale) = match &t.controller {
            SpectrumController::LipschitzReg { gamma }
            | SpectrumController::DOptimalPlusSn { gamma } => (Some(*gamma), None),
            SpectrumController::DivergencePlusSc { gamma, ref_scale } => {
                (Some(*gamma), Some(*ref_scale))
            }
            _ => (None, None),
        };
        RunConfig {
            controller: Some(t.controller.tag().to_string()),
            gamma,
            ref_scale,
            loss: Some(
                match t.loss {
                    LossFamily::GanLog => "gan_log",
                    LossFamily::Hinge => "hinge",
                }
                .to_string(),
            ),
            gen_loss_sigmoid: Some(t.gen_loss_sigmoid),
            lambda: Some(t.lambda),
            n_dis: Some(t.n_dis),
            batch: Some(t.batch),
            iters: Some(t.iters),
            disc_alpha: Some(t.disc_adam.alpha),
            disc_beta1: Some(t.disc_adam.beta1),
            disc_beta2: Some(t.disc_adam.beta2),
            gen_alpha: Some(t.gen_adam.alpha),
            gen_beta1: Some(t.gen_adam.beta1),
            gen_beta2: Some(t.gen_adam.beta2),
            disc_dims: Some(t.disc_dims.clone()),
            gen_dims: Some(t.gen_dims.clone()),
            z_dim: Some(t.z_dim),
            ring_modes: Some(t.ring.modes),
            ring_radius: Some(t.ring.radius),
            ring_sigma: Some(t.ring.sigma),
            seed: Some(t.seed),
            eval_every: Some(t.eval_every),
            eval_samples: Some(t.eval_samples),
            lip_pairs: Some(t.lip_pairs),
            out_dir: Some(self.out_dir.display().to_string()),
            plot: Some(self.plot),
        }
    }

    pub fn write_manifest(&self, path: &Path) -> Result<(), std::io::Error> {
        #[derive(Serialize)]
        struct Manifest {
            version: String,
            config: RunConfig,
        }
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.to_run_config(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(path, text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_documented_defaults() {
        let r = resolve("{}").unwrap();
        assert_eq!(r.train.controller.tag(), "spectral-norm");
        assert_eq!(r.train.loss, LossFamily::GanLog);
        assert_eq!(r.train.n_dis, 1);
        assert_eq!(r.train.lambda, 10.0);
        assert_eq!(r.train.batch, 64);
        assert_eq!(r.train.disc_adam.beta1, 0.5);
        assert!(!r.plot);
    }

    #[test]
    fn hinge_family_switches_dependent_defaults() {
        let r = resolve(r#"{"loss": "hinge"}"#).unwrap();
        assert_eq!(r.train.n_dis, 5);
        assert_eq!(r.train.disc_adam.beta1, 0.0);
        assert_eq!(r.train.disc_adam.beta2, 0.9);
        // Explicit override still wins.
        let r = resolve(r#"{"loss": "hinge", "n_dis": 2}"#).unwrap();
        assert_eq!(r.train.n_dis, 2);
    }

    #[test]
    fn unknown_keys_are_rejected_with_field_name() {
        let err = resolve(r#"{"lamda": 10}"#).unwrap_err();
        assert!(err.contains("lamda"), "{err}");
    }

    #[test]
    fn divergence_gamma_default_lands_in_manifest() {
        let r = resolve(r#"{"controller": "divergence"}"#).unwrap();
        let rc = r.to_run_config();
        assert_eq!(rc.gamma, Some(0.05));
        assert_eq!(rc.ref_scale, Some(0.5));
    }

    #[test]
    fn inapplicable_params_are_rejected() {
        assert!(resolve(r#"{"controller": "orthogonal", "gamma": 1.0}"#).is_err());
        assert!(resolve(r#"{"controller": "d-optimal", "ref_scale": 0.5}"#).is_err());
        assert!(resolve(r#"{"controller": "unknown"}"#).is_err());
        assert!(resolve(r#"{"loss": "wasserstein"}"#).is_err());
    }

    #[test]
    fn z_dim_and_gen_dims_cross_fill() {
        let r = resolve(r#"{"gen_dims": [4, 16, 2]}"#).unwrap();
        assert_eq!(r.train.z_dim, 4);
        let r = resolve(r#"{"z_dim": 6}"#).unwrap();
        assert_eq!(r.train.gen_dims[0], 6);
        r.train.validate().unwrap();
    }

    #[test]
    fn manifest_config_round_trips() {
        let r = resolve(r#"{"controller": "divergence", "iters": 7, "seed": 3}"#).unwrap();
        let text = serde_json::to_string(&r.to_run_config()).unwrap();
        let again = resolve(&text).unwrap();
        assert_eq!(
            serde_json::to_string(&again.to_run_config()).unwrap(),
            serde_json::to_string(&r.to_run_config()).unwrap()
        );
    }
}
