//! Adam, adversarial losses, and the alternating training loop.
//!
//! The discriminator maximizes `f − λ·L_orth − R(e)` where f is the
//! adversarial objective, L_orth the factor orthogonality penalty, and R the
//! controller's spectrum regularizer; the generator then minimizes its own
//! loss for one step. Ascent is realized by handing Adam the negated gradient.

use crate::evalsuite::{
    lipschitz_probe, mode_coverage, sample_ring_with, spectrum_report, write_metrics_csv,
    write_spectra_csv, EvalError, MetricRow, RingSpec, SpectrumReport,
};
use crate::linalg::Mat;
use crate::rng::{subseed, DetRng};
use crate::spectrum::{
    apply_sv_update, constrain_stored, regularizer_dispatch, SpectrumController, SpectrumError,
};
use crate::svdnet::{init_disc, init_gen, orth_penalty, Checkpoint, DiscNet, GenNet, NetError};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Numeric guard added outside the square root in the Adam update.
pub const ADAM_EPS: f64 = 1e-8;

/// Failure modes of optimization and training.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad config: {what}")]
    Config { what: String },
    #[error("non-finite gradient in {slot} at optimizer step {step}")]
    NonFiniteGrad { slot: String, step: u64 },
    #[error("non-finite {what}")]
    NonFiniteValue { what: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("training aborted at iteration {iteration}: {source}")]
    Aborted {
        iteration: u64,
        #[source]
        source: Box<TrainError>,
    },
}

/// Adam hyperparameters. The numeric guard is fixed at [`ADAM_EPS`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl AdamHyper {
    fn validate(&self, who: &str) -> Result<(), TrainError> {
        let ok = self.alpha > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config {
                what: format!("{who} Adam needs alpha > 0 and betas in [0,1)"),
            })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamSlot {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Bias-corrected Adam over a fixed set of named parameter slots (one slot per
/// factor, diagonal, or bias vector). One `step` call updates every slot and
/// advances the shared step counter once.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub t: u64,
    slots: Vec<AdamSlot>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, slots: &[(String, usize)]) -> Self {
        AdamState {
            hyper,
            t: 0,
            slots: slots
                .iter()
                .map(|(name, len)| AdamSlot {
                    name: name.clone(),
                    m: vec![0.0; *len],
                    v: vec![0.0; *len],
                })
                .collect(),
        }
    }

    /// One descent step across all slots (negate gradients for ascent).
    /// Validates every gradient before touching any parameter, so a rejected
    /// step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), TrainError> {
        assert_eq!(params.len(), self.slots.len(), "slot count mismatch");
        assert_eq!(grads.len(), self.slots.len(), "gradient count mismatch");
        for (slot, g) in self.slots.iter().zip(grads) {
            assert_eq!(g.len(), slot.m.len(), "slot {} length mismatch", slot.name);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGrad {
                    slot: slot.name.clone(),
                    step: self.t + 1,
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let AdamHyper {
            alpha,
            beta1,
            beta2,
        } = self.hyper;
        let m_corr = 1.0 - beta1.powi(t);
        let v_corr = 1.0 - beta2.powi(t);
        for ((slot, p), g) in self.slots.iter_mut().zip(params.iter_mut()).zip(grads) {
            for i in 0..g.len() {
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / m_corr;
                let v_hat = slot.v[i] / v_corr;
                p[i] -= alpha * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Slot layout for the discriminator: per layer `[u, e, v, bias]`.
pub fn disc_slots(net: &DiscNet) -> Vec<(String, usize)> {
    let mut slots = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        slots.push((format!("disc.layer{i}.u"), layer.u.data.len()));
        slots.push((format!("disc.layer{i}.e"), layer.e.len()));
        slots.push((format!("disc.layer{i}.v"), layer.v.data.len()));
        slots.push((format!("disc.layer{i}.bias"), layer.bias.len()));
    }
    slots
}

/// Slot layout for the generator: per layer `[w, bias]`.
pub fn gen_slots(net: &GenNet) -> Vec<(String, usize)> {
    let mut slots = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        slots.push((format!("gen.layer{i}.w"), layer.w.data.len()));
        slots.push((format!("gen.layer{i}.bias"), layer.bias.len()));
    }
    slots
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let ex = x.exp();
        ex / (1.0 + ex)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Original-GAN discriminator objective (to be maximized):
/// `mean log σ(logits_real) + mean log(1 − σ(logits_fake))`,
/// via softplus so extreme logits stay finite. Returns the value and the
/// gradients with respect to each logit vector.
pub fn disc_loss_ganlog(logits_real: &[f64], logits_fake: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = logits_real.len() as f64;
    let m = logits_fake.len() as f64;
    let mut value = 0.0;
    let g_real = logits_real
        .iter()
        .map(|&x| {
            value -= softplus(-x) / n;
            sigmoid(-x) / n
        })
        .collect();
    let g_fake = logits_fake
        .iter()
        .map(|&x| {
            value -= softplus(x) / m;
            -sigmoid(x) / m
        })
        .collect();
    (value, g_real, g_fake)
}

/// Non-saturating generator loss `−mean log σ(logits_fake)` (to be minimized).
pub fn gen_loss_logd(logits_fake: &[f64]) -> (f64, Vec<f64>) {
    let m = logits_fake.len() as f64;
    let mut value = 0.0;
    let grad = logits_fake
        .iter()
        .map(|&x| {
            value += softplus(-x) / m;
            -sigmoid(-x) / m
        })
        .collect();
    (value, grad)
}

/// Literal sigmoid generator loss `−mean σ(logits_fake)`; saturates for
/// confident discriminators, kept behind a config switch.
pub fn gen_loss_sigmoid(logits_fake: &[f64]) -> (f64, Vec<f64>) {
    let m = logits_fake.len() as f64;
    let mut value = 0.0;
    let grad = logits_fake
        .iter()
        .map(|&x| {
            let s = sigmoid(x);
            value -= s / m;
            -s * (1.0 - s) / m
        })
        .collect();
    (value, grad)
}

/// Hinge discriminator objective (to be maximized):
/// `mean min(0, −1 + logits_real) + mean min(0, −1 − logits_fake)`,
/// with subgradient 0 exactly at the kinks.
pub fn disc_loss_hinge(logits_real: &[f64], logits_fake: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = logits_real.len() as f64;
    let m = logits_fake.len() as f64;
    let mut value = 0.0;
    let g_real = logits_real
        .iter()
        .map(|&x| {
            value += (-1.0 + x).min(0.0) / n;
            if x < 1.0 {
                1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    let g_fake = logits_fake
        .iter()
        .map(|&x| {
            value += (-1.0 - x).min(0.0) / m;
            if x > -1.0 {
                -1.0 / m
            } else {
                0.0
            }
        })
        .collect();
    (value, g_real, g_fake)
}

/// Hinge-partner generator loss `−mean logits_fake`.
pub fn gen_loss_hinge(logits_fake: &[f64]) -> (f64, Vec<f64>) {
    let m = logits_fake.len() as f64;
    let value = -logits_fake.iter().sum::<f64>() / m;
    (value, vec![-1.0 / m; logits_fake.len()])
}

/// Adversarial objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    GanLog,
    Hinge,
}

/// Everything a training run needs. Build via [`TrainConfig::dcgan_ring`] or
/// [`TrainConfig::hinge_ring`] and override fields as needed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub controller: SpectrumController,
    pub loss: LossFamily,
    /// Use the saturating sigmoid generator loss instead of the log form
    /// (gan_log family only).
    pub gen_loss_sigmoid: bool,
    /// Orthogonality penalty weight λ.
    pub lambda: f64,
    /// Discriminator steps per generator step.
    pub n_dis: usize,
    pub batch: usize,
    pub iters: u64,
    pub disc_adam: AdamHyper,
    pub gen_adam: AdamHyper,
    /// Discriminator widths, input to single logit.
    pub disc_dims: Vec<usize>,
    /// Generator widths, latent to data dimension.
    pub gen_dims: Vec<usize>,
    pub z_dim: usize,
    pub ring: RingSpec,
    pub seed: u64,
    pub eval_every: u64,
    /// Generator samples drawn per evaluation.
    pub eval_samples: usize,
    /// Sample pairs per Lipschitz probe.
    pub lip_pairs: usize,
}

impl TrainConfig {
    /// DC-GAN regime: log loss, one discriminator step per generator step,
    /// Adam (2e-4, 0.5, 0.999).
    pub fn dcgan_ring(controller: SpectrumController, seed: u64) -> Self {
        let adam = AdamHyper {
            alpha: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
        };
        TrainConfig {
            controller,
            loss: LossFamily::GanLog,
            gen_loss_sigmoid: false,
            lambda: 10.0,
            n_dis: 1,
            batch: 64,
            iters: 5000,
            disc_adam: adam,
            gen_adam: adam,
            disc_dims: vec![2, 32, 32, 32, 1],
            gen_dims: vec![8, 64, 64, 2],
            z_dim: 8,
            ring: RingSpec::default(),
            seed,
            eval_every: 500,
            eval_samples: 1000,
            lip_pairs: 256,
        }
    }

    /// Hinge regime: five discriminator steps per generator step,
    /// Adam (2e-4, 0, 0.9).
    pub fn hinge_ring(controller: SpectrumController, seed: u64) -> Self {
        let adam = AdamHyper {
            alpha: 2e-4,
            beta1: 0.0,
            beta2: 0.9,
        };
        TrainConfig {
            loss: LossFamily::Hinge,
            n_dis: 5,
            disc_adam: adam,
            gen_adam: adam,
            ..TrainConfig::dcgan_ring(controller, seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| {
            Err(TrainError::Config {
                what: what.to_string(),
            })
        };
        if self.lambda < 0.0 {
            return bad("lambda must be >= 0");
        }
        if self.n_dis < 1 || self.batch < 1 {
            return bad("n_dis and batch must be >= 1");
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1");
        }
        if self.eval_samples < 1 || self.lip_pairs < 1 {
            return bad("eval_samples and lip_pairs must be >= 1");
        }
        if self.disc_dims.first() != Some(&2) || self.disc_dims.last() != Some(&1) {
            return bad("disc_dims must run from the 2-d data to one logit");
        }
        if self.gen_dims.first() != Some(&self.z_dim) || self.gen_dims.last() != Some(&2) {
            return bad("gen_dims must run from z_dim to the 2-d data");
        }
        if self.disc_dims.len() < 2 || self.gen_dims.len() < 2 {
            return bad("need at least one layer per network");
        }
        if self.disc_dims.iter().chain(&self.gen_dims).any(|&d| d == 0) {
            return bad("zero layer width");
        }
        if self.ring.modes < 1 || self.ring.sigma <= 0.0 || self.ring.radius <= 0.0 {
            return bad("ring needs modes >= 1 and positive radius and sigma");
        }
        self.disc_adam.validate("discriminator")?;
        self.gen_adam.validate("generator")?;
        Ok(())
    }
}

/// Final state and recorded diagnostics of a run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub disc: DiscNet,
    pub gen: GenNet,
    /// Controller with any accumulated state (power-iteration vectors).
    pub controller: SpectrumController,
    pub metrics: Vec<MetricRow>,
    pub reports: Vec<SpectrumReport>,
}

fn vstack(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let mut out = Mat::zeros(a.rows + b.rows, a.cols);
    out.data[..a.data.len()].copy_from_slice(&a.data);
    out.data[a.data.len()..].copy_from_slice(&b.data);
    out
}

fn draw_latents(rng: &mut DetRng, rows: usize, z_dim: usize) -> Mat {
    let mut z = Mat::zeros(rows, z_dim);
    rng.fill_normal(&mut z.data);
    z
}

/// Runs the full loop; see [`train_with`] for the hook-taking variant.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, out_dir, |_, _, _| {})
}

/// Trains with a per-iteration observer called after each completed outer
/// iteration (all discriminator steps plus the generator step).
///
/// Per discriminator step: controller singular-value update, fresh real
/// minibatch plus generated fakes through one stacked forward, adversarial
/// loss combined with the λ-weighted orthogonality penalty and the
/// controller's regularizer, one Adam ascent step, then the controller's
/// stored-value projection. The generator then takes one descent step through
/// the frozen discriminator. Artifacts land in `out_dir` when given:
/// an initial checkpoint, per-evaluation spectrum CSVs, metrics.csv, and a
/// final checkpoint (or the last good one if a non-finite value aborts the
/// run).
pub fn train_with(
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_iter: impl FnMut(u64, &DiscNet, &GenNet),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut controller = cfg.controller.clone();
    let mut disc = init_disc(&cfg.disc_dims, subseed(cfg.seed, 0))?;
    let mut gen = init_gen(&cfg.gen_dims, subseed(cfg.seed, 1))?;
    let mut rng = DetRng::from_seed(subseed(cfg.seed, 2));
    let eval_base = subseed(cfg.seed, 3);
    let mut disc_adam = AdamState::new(cfg.disc_adam, &disc_slots(&disc));
    let mut gen_adam = AdamState::new(cfg.gen_adam, &gen_slots(&gen));
    let centers = cfg.ring.centers();
    let mut metrics: Vec<MetricRow> = Vec::new();
    let mut reports: Vec<SpectrumReport> = Vec::new();
    let mut last_good = Checkpoint::capture(&disc, &controller, 0, cfg.seed, &rng, Some(&gen));
    if let Some(dir) = out_dir {
        last_good.save(&dir.join("checkpoint_init.json"))?;
    }

    let mut cur_iter: u64 = 0;
    let mut disc_loss_val = 0.0;
    let mut gen_loss_val = 0.0;
    let run = (|| -> Result<(), TrainError> {
        for it in 0..cfg.iters {
            cur_iter = it + 1;
            for _ in 0..cfg.n_dis {
                apply_sv_update(&mut controller, &mut disc)?;
                let real = sample_ring_with(&mut rng, cfg.batch, &cfg.ring);
                let z = draw_latents(&mut rng, cfg.batch, cfg.z_dim);
                let fake = gen.forward(&z)?;
                let stacked = vstack(&real, &fake);
                let logits = disc.forward(&stacked, &controller)?;
                if logits.iter().any(|x| !x.is_finite()) {
                    return Err(TrainError::NonFiniteValue {
                        what: "discriminator logits".into(),
                    });
                }
                let (lr, lf) = logits.split_at(cfg.batch);
                let (value, g_real, mut g_fake) = match cfg.loss {
                    LossFamily::GanLog => disc_loss_ganlog(lr, lf),
                    LossFamily::Hinge => disc_loss_hinge(lr, lf),
                };
                disc_loss_val = value;
                let mut g_logits = g_real;
                g_logits.append(&mut g_fake);
                let grads = disc.backward(&g_logits, &controller)?;
                let (_, reg_g) = regularizer_dispatch(&controller, &disc)?;
                // Negated ascent gradient of f − λ·L_orth − R, slot order
                // [u, e, v, bias] per layer.
                let mut neg: Vec<Vec<f64>> = Vec::with_capacity(4 * disc.layers.len());
                for (idx, lg) in grads.layers.iter().enumerate() {
                    let (_, gu_orth, gv_orth) = orth_penalty(&disc.layers[idx]);
                    neg.push(
                        lg.g_u
                            .data
                            .iter()
                            .zip(&gu_orth.data)
                            .map(|(g, o)| cfg.lambda * o - g)
                            .collect(),
                    );
                    neg.push(lg.g_e.iter().zip(&reg_g[idx]).map(|(g, r)| r - g).collect());
                    neg.push(
                        lg.g_v
                            .data
                            .iter()
                            .zip(&gv_orth.data)
                            .map(|(g, o)| cfg.lambda * o - g)
                            .collect(),
                    );
                    neg.push(lg.g_bias.iter().map(|g| -g).collect());
                }
                let mut params: Vec<&mut [f64]> = Vec::with_capacity(neg.len());
                for layer in disc.layers.iter_mut() {
                    params.push(&mut layer.u.data);
                    params.push(&mut layer.e);
                    params.push(&mut layer.v.data);
                    params.push(&mut layer.bias);
                }
                let grad_refs: Vec<&[f64]> = neg.iter().map(|g| g.as_slice()).collect();
                disc_adam.step(&mut params, &grad_refs)?;
                constrain_stored(&controller, &mut disc);
            }

            // Generator step against the frozen, freshly updated discriminator.
            let z = draw_latents(&mut rng, cfg.batch, cfg.z_dim);
            let fake = gen.forward(&z)?;
            let logits = disc.forward(&fake, &controller)?;
            if logits.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteValue {
                    what: "generator-path logits".into(),
                });
            }
            let (gval, g_lf) = match cfg.loss {
                LossFamily::GanLog if cfg.gen_loss_sigmoid => gen_loss_sigmoid(&logits),
                LossFamily::GanLog => gen_loss_logd(&logits),
                LossFamily::Hinge => gen_loss_hinge(&logits),
            };
            let _ = gval;
            gen_loss_val = gval;
            let through = disc.backward(&g_lf, &controller)?;
            let ggrads = gen.backward(&through.g_input)?;
            let mut gslices: Vec<Vec<f64>> = Vec::with_capacity(2 * gen.layers.len());
            for lg in &ggrads {
                gslices.push(lg.g_w.data.clone());
                gslices.push(lg.g_bias.clone());
            }
            let mut gparams: Vec<&mut [f64]> = Vec::with_capacity(gslices.len());
            for layer in gen.layers.iter_mut() {
                gparams.push(&mut layer.w.data);
                gparams.push(&mut layer.bias);
            }
            let grefs: Vec<&[f64]> = gslices.iter().map(|g| g.as_slice()).collect();
            gen_adam.step(&mut gparams, &grefs)?;

            let done = it + 1;
            if done % cfg.eval_every == 0 || done == cfg.iters {
                let esd = subseed(eval_base, done);
                let mut eval_rng = DetRng::from_seed(subseed(esd, 0));
                let ze = draw_latents(&mut eval_rng, cfg.eval_samples, cfg.z_dim);
                let fake_eval = gen.forward(&ze)?;
                let (modes_covered, hq_fraction) =
                    mode_coverage(&fake_eval, &centers, cfg.ring.sigma);
                let (lip_empirical, lip_bound) = lipschitz_probe(
                    &mut disc,
                    &controller,
                    &cfg.ring,
                    cfg.lip_pairs,
                    subseed(esd, 1),
                )?;
                let orth_penalty_max = disc
                    .layers
                    .iter()
                    .map(|l| orth_penalty(l).0)
                    .fold(0.0, f64::max);
                let (reg_value, _) = regularizer_dispatch(&controller, &disc)?;
                metrics.push(MetricRow {
                    iter: done,
                    modes_covered,
                    hq_fraction,
                    lip_empirical,
                    lip_bound,
                    orth_penalty_max,
                    reg_value,
                    disc_loss: disc_loss_val,
                    gen_loss: gen_loss_val,
                });
                let report = spectrum_report(&disc, &controller, done)?;
                if let Some(dir) = out_dir {
                    write_spectra_csv(&dir.join(format!("spectra_{done}.csv")), &report)?;
                }
                reports.push(report);
                last_good =
                    Checkpoint::capture(&disc, &controller, done, cfg.seed, &rng, Some(&gen));
            }
            on_iter(done, &disc, &gen);
        }
        Ok(())
    })();

    match run {
        Ok(()) => {
            // A zero-iteration run leaves just the init checkpoint.
            if let (Some(dir), true) = (out_dir, cfg.iters > 0) {
                write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
                let final_ckpt =
                    Checkpoint::capture(&disc, &controller, cfg.iters, cfg.seed, &rng, Some(&gen));
                final_ckpt.save(&dir.join("checkpoint_final.json"))?;
            }
            Ok(TrainOutcome {
                disc,
                gen,
                controller,
                metrics,
                reports,
            })
        }
        Err(source) => {
            if let Some(dir) = out_dir {
                write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
                last_good.save(&dir.join("checkpoint_lastgood.json"))?;
            }
            Err(TrainError::Aborted {
                iteration: cur_iter,
                source: Box::new(source),
            })
        }
    }
}
