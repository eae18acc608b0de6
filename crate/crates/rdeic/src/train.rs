//! Two-stage training.
//!
//! Order of operations: (1) pretrain the image autoencoder and freeze
//! it; (2) pretrain the unconditional base denoiser on frozen latents
//! with the standard diffusion objective and freeze it; (3) stage I
//! trains the codec path and the control branch with each time-step
//! drawn independently; (4) stage II fine-tunes through the exact
//! unrolled L-step reconstruction used at inference.
//!
//! Loss conventions: squared-norm terms are sums over elements per
//! image, averaged over the batch, matching the expectation-of-norm
//! objectives; the rate term is total bits per image. Every term is
//! reported separately and the total must equal the documented weighted
//! sum, which is asserted in tests.


use std::io::Write;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::Serialize;

use crate::codec;
use crate::config::TrainConfig;
use crate::corpus;
use crate::element::Element;
use crate::entropy::{self, EntropyTrainOut};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::checkpoint::{Model, StartMode, TrainStage};
use crate::nn::ctx::SampleCtx;
use crate::nn::models::Networks;
use crate::nn::params::{Adam, ParamSource};
use crate::nn::tape::{NodeId, Tape};
use crate::rng::{self, Rng};
use crate::schedule::{NoiseSchedule, RelayWeights};

/// Per-iteration loss breakdown, one JSON line per record in the
/// metrics log.
#[derive(Debug, Clone, Serialize, Default)]
pub struct LossReport {
    pub iter: usize,
    pub stage: String,
    pub rate_bits: f64,
    pub latent_distortion: f64,
    pub noise_estimation: f64,
    pub codebook_embed: f64,
    pub codebook_commit: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub latent_recon: f64,
    pub total: f64,
}

impl LossReport {
    /// The documented combination of the reported terms.
    pub fn weighted_sum(&self, lambda_r: f64, lambda_perc: f64, beta: f64) -> f64 {
        self.codebook_embed
            + beta * self.codebook_commit
            + lambda_r * self.latent_distortion
            + self.rate_bits
            + lambda_r * self.noise_estimation
            + lambda_r * (self.pixel + lambda_perc * self.perceptual)
            + lambda_r * self.latent_recon
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Node handles for one training graph.
pub struct StageNodes {
    pub total: NodeId,
    pub rate_bits: NodeId,
    pub latent_distortion: NodeId,
    pub noise_estimation: Option<NodeId>,
    pub cb_embed: NodeId,
    pub cb_commit: NodeId,
    pub pixel: Option<NodeId>,
    pub perceptual: Option<NodeId>,
    pub latent_recon: Option<NodeId>,
    pub vq_indices: Vec<usize>,
    pub lp_vecs: NodeId,
}

struct FrontNodes {
    z0: NodeId,
    c: NodeId,
    z_c: NodeId,
    d_latent: NodeId,
    rate_per_image: NodeId,
    cb_embed: NodeId,
    cb_commit: NodeId,
    ent: EntropyTrainOut,
    lp_vecs: NodeId,
    batch: usize,
}

/// Shared front end of both stages: frozen encoder to `z0`, analysis,
/// entropy path, synthesis to `(c, z_c)`, and the rate/codebook/latent
/// distortion terms.
fn codec_front<E: Element>(
    nets: &Networks,
    tape: &mut Tape<E>,
    src: &dyn ParamSource<E>,
    ctx: &mut SampleCtx<E>,
    x_batch: &ArrayD<E>,
    latent_scale: f32,
) -> FrontNodes {
    let batch = x_batch.shape()[0];
    let x = tape.constant(x_batch.clone());
    let z0_raw = nets.encode_image(tape, src, x);
    let z0 = tape.scale(z0_raw, 1.0 / latent_scale as f64);
    let y = nets.analysis(tape, src, z0);

    // hyper + context path (records lp vectors before quantization)
    let lp_probe = nets.hyper_encode(tape, src, y);
    let lp_vecs = tape.nchw_to_vecs(lp_probe);
    let ent = entropy::entropy_train_path(nets, tape, src, ctx, y);

    let (c, z_c) = nets.synthesis(tape, src, ent.y_hat_dec);
    let d_sum = tape.sse(z0, z_c);
    let d_latent = tape.scale(d_sum, 1.0 / batch as f64);
    let rate_per_image = tape.scale(ent.rate_bits, 1.0 / batch as f64);
    let cb_embed = tape.scale(ent.cb_term1, 1.0 / batch as f64);
    let cb_commit = tape.scale(ent.cb_term2, 1.0 / batch as f64);
    FrontNodes {
        z0,
        c,
        z_c,
        d_latent,
        rate_per_image,
        cb_embed,
        cb_commit,
        ent,
        lp_vecs,
        batch,
    }
}

/// Noise-estimation objective at a uniformly drawn step: the
/// `omega_n`-weighted squared error between the effective noise and the
/// conditional estimate, which equals the squared latent error of the
/// implied `z0` prediction.
#[allow(clippy::too_many_arguments)]
pub fn noise_estimation_loss<E: Element>(
    nets: &Networks,
    tape: &mut Tape<E>,
    src: &dyn ParamSource<E>,
    schedule: &NoiseSchedule,
    weights: &RelayWeights,
    start_mode: StartMode,
    z0: NodeId,
    c: NodeId,
    z_c: NodeId,
    n: usize,
    noise: &ArrayD<E>,
    batch: usize,
) -> NodeId {
    let sa = schedule.sqrt_alpha_bar(n);
    let sb = schedule.sqrt_one_minus_alpha_bar(n);
    let omega = (1.0 - schedule.alpha_bar(n)) / schedule.alpha_bar(n);
    let noise_node = tape.constant(noise.clone());

    let (z_n, eps_tilde) = match start_mode {
        StartMode::Relay => {
            let e = tape.sub(z_c, z0);
            let eta = weights.eta(n);
            let shifted = tape.scale(e, eta);
            let mixed = tape.add(z0, shifted);
            let signal = tape.scale(mixed, sa);
            let noised = tape.scale(noise_node, sb);
            let z_n = tape.add(signal, noised);
            let le = tape.scale(e, weights.lambda());
            let eps_tilde = tape.add(le, noise_node);
            (z_n, eps_tilde)
        }
        StartMode::PureNoise => {
            let signal = tape.scale(z0, sa);
            let noised = tape.scale(noise_node, sb);
            let z_n = tape.add(signal, noised);
            (z_n, noise_node)
        }
    };
    let eps_hat = nets.denoise(tape, src, z_n, Some(c), n);
    let err = tape.sse(eps_tilde, eps_hat);
    tape.scale(err, omega / batch as f64)
}

/// Stage I graph: independent per-step training.
#[allow(clippy::too_many_arguments)]
pub fn stage1_graph<E: Element>(
    nets: &Networks,
    tape: &mut Tape<E>,
    src: &dyn ParamSource<E>,
    ctx: &mut SampleCtx<E>,
    x_batch: &ArrayD<E>,
    schedule: &NoiseSchedule,
    weights: &RelayWeights,
    start_mode: StartMode,
    latent_scale: f32,
    lambda_r: f64,
    beta: f64,
) -> StageNodes {
    let front = codec_front(nets, tape, src, ctx, x_batch, latent_scale);
    let horizon = match start_mode {
        StartMode::Relay => weights.horizon(),
        StartMode::PureNoise => schedule.t(),
    };
    let n = ctx.step_uniform(1, horizon);
    let zdims = tape.shape(front.z0).to_vec();
    let noise = ctx.normal(&zdims);
    let ne = noise_estimation_loss(
        nets, tape, src, schedule, weights, start_mode, front.z0, front.c, front.z_c, n, &noise,
        front.batch,
    );

    let commit = tape.scale(front.cb_commit, beta);
    let cb = tape.add(front.cb_embed, commit);
    let dist = tape.scale(front.d_latent, lambda_r);
    let rd = tape.add(dist, front.rate_per_image);
    let ne_w = tape.scale(ne, lambda_r);
    let partial = tape.add(cb, rd);
    let total = tape.add(partial, ne_w);

    StageNodes {
        total,
        rate_bits: front.rate_per_image,
        latent_distortion: front.d_latent,
        noise_estimation: Some(ne),
        cb_embed: front.cb_embed,
        cb_commit: front.cb_commit,
        pixel: None,
        perceptual: None,
        latent_recon: None,
        vq_indices: front.ent.vq_indices,
        lp_vecs: front.lp_vecs,
    }
}

/// Stage II graph: gradients flow through the entire unrolled L-step
/// reconstruction, the frozen decoder, and the perceptual proxy.
#[allow(clippy::too_many_arguments)]
pub fn stage2_graph<E: Element>(
    nets: &Networks,
    tape: &mut Tape<E>,
    src: &dyn ParamSource<E>,
    ctx: &mut SampleCtx<E>,
    x_batch: &ArrayD<E>,
    schedule: &NoiseSchedule,
    weights: &RelayWeights,
    start_mode: StartMode,
    latent_scale: f32,
    lambda_r: f64,
    lambda_perc: f64,
    beta: f64,
    l_steps: usize,
) -> Result<StageNodes> {
    let front = codec_front(nets, tape, src, ctx, x_batch, latent_scale);
    let plan = crate::sampler::spaced_steps(weights.horizon(), l_steps)?;
    let zdims = tape.shape(front.z0).to_vec();
    let noise = ctx.normal(&zdims);
    let noise_node = tape.constant(noise);

    let n_start = weights.horizon();
    let mut z = match start_mode {
        StartMode::Relay => {
            let signal = tape.scale(front.z_c, schedule.sqrt_alpha_bar(n_start));
            let noised = tape.scale(noise_node, schedule.sqrt_one_minus_alpha_bar(n_start));
            tape.add(signal, noised)
        }
        StartMode::PureNoise => noise_node,
    };

    let mut z0_hat = None;
    for (i, &n) in plan.steps().iter().enumerate() {
        let eps = nets.denoise(tape, src, z, Some(front.c), n);
        let sb = schedule.sqrt_one_minus_alpha_bar(n);
        let inv_sa = 1.0 / schedule.sqrt_alpha_bar(n);
        let scaled_eps = tape.scale(eps, sb);
        let num = tape.sub(z, scaled_eps);
        let pred = tape.scale(num, inv_sa);
        if i + 1 < plan.len() {
            let coeffs =
                crate::sampler::reverse_coefficients(n, plan.steps()[i + 1], schedule, weights)?;
            let kp = tape.scale(pred, coeffs.k);
            let mz = tape.scale(z, coeffs.m);
            z = tape.add(kp, mz);
        }
        z0_hat = Some(pred);
    }
    let z0_hat = z0_hat.expect("non-empty plan");

    let rescaled = tape.scale(z0_hat, latent_scale as f64);
    let x_hat = nets.decode_latent(tape, src, rescaled);
    let x = tape.constant(x_batch.clone());
    let pix_sum = tape.sse(x, x_hat);
    let pixel = tape.scale(pix_sum, 1.0 / front.batch as f64);

    let fx = nets.perceptual_features(tape, src, x);
    let fx_hat = nets.perceptual_features(tape, src, x_hat);
    let perc_sum = tape.sse(fx, fx_hat);
    let perceptual = tape.scale(perc_sum, 1.0 / front.batch as f64);

    let lat_sum = tape.sse(front.z0, z0_hat);
    let latent_recon = tape.scale(lat_sum, 1.0 / front.batch as f64);

    // total = lambda_r*(pixel + lambda_perc*perc) + L_rd + L_cb + lambda_r*latent_recon
    let perc_w = tape.scale(perceptual, lambda_perc);
    let pp = tape.add(pixel, perc_w);
    let pp_w = tape.scale(pp, lambda_r);
    let commit = tape.scale(front.cb_commit, beta);
    let cb = tape.add(front.cb_embed, commit);
    let dist = tape.scale(front.d_latent, lambda_r);
    let rd = tape.add(dist, front.rate_per_image);
    let lat_w = tape.scale(latent_recon, lambda_r);
    let a = tape.add(pp_w, rd);
    let b = tape.add(cb, lat_w);
    let total = tape.add(a, b);

    Ok(StageNodes {
        total,
        rate_bits: front.rate_per_image,
        latent_distortion: front.d_latent,
        noise_estimation: None,
        cb_embed: front.cb_embed,
        cb_commit: front.cb_commit,
        pixel: Some(pixel),
        perceptual: Some(perceptual),
        latent_recon: Some(latent_recon),
        vq_indices: front.ent.vq_indices,
        lp_vecs: front.lp_vecs,
    })
}

fn report_from(tape: &Tape<f32>, nodes: &StageNodes, iter: usize, stage: &str) -> LossReport {
    LossReport {
        iter,
        stage: stage.to_string(),
        rate_bits: tape.scalar(nodes.rate_bits),
        latent_distortion: tape.scalar(nodes.latent_distortion),
        noise_estimation: nodes.noise_estimation.map_or(0.0, |n| tape.scalar(n)),
        codebook_embed: tape.scalar(nodes.cb_embed),
        codebook_commit: tape.scalar(nodes.cb_commit),
        pixel: nodes.pixel.map_or(0.0, |n| tape.scalar(n)),
        perceptual: nodes.perceptual.map_or(0.0, |n| tape.scalar(n)),
        latent_recon: nodes.latent_recon.map_or(0.0, |n| tape.scalar(n)),
        total: tape.scalar(nodes.total),
    }
}

/// Drives the full pipeline over a fixed corpus.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub corpus_train: Vec<Array3<f32>>,
    pub corpus_heldout: Vec<Array3<f32>>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (corpus_train, corpus_heldout) = match &cfg.corpus_dir {
            Some(dir) => {
                let all = corpus::load_dir(dir)?;
                if all.len() <= cfg.corpus_heldout {
                    return Err(Error::Training("corpus smaller than held-out size".into()));
                }
                let split = all.len() - cfg.corpus_heldout;
                let mut imgs: Vec<Array3<f32>> = all.into_iter().map(|(_, i)| i).collect();
                let heldout = imgs.split_off(split);
                (imgs, heldout)
            }
            None => (
                corpus::generate_corpus(cfg.corpus_seed, cfg.corpus_train, cfg.image_size),
                corpus::generate_corpus(
                    cfg.corpus_seed ^ 0x5eed_5eed,
                    cfg.corpus_heldout,
                    cfg.image_size,
                ),
            ),
        };
        Ok(Trainer {
            model,
            cfg,
            corpus_train,
            corpus_heldout,
        })
    }

    fn batch_tensor(&self, rng: &mut Rng) -> ArrayD<f32> {
        let b = self.cfg.batch_size;
        let (c, h, w) = self.corpus_train[0].dim();
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[b, c, h, w]));
        for bi in 0..b {
            let pick = rng::uniform_step(rng, 0, self.corpus_train.len() - 1);
            let img = &self.corpus_train[pick];
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[[bi, ci, y, x]] = img[(ci, y, x)];
                    }
                }
            }
        }
        out
    }

    fn log_report(log: &mut dyn Write, report: &LossReport) -> Result<()> {
        let line = serde_json::to_string(report)
            .map_err(|e| Error::Training(format!("log serialization: {e}")))?;
        writeln!(log, "{line}")?;
        Ok(())
    }

    fn check_finite(report: &LossReport) -> Result<()> {
        if !report.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at iter {}: {report:?}",
                report.iter
            )));
        }
        Ok(())
    }

    /// Pretrain the image autoencoder, then freeze it and calibrate the
    /// latent normalization scale. Returns held-out reconstruction MSE.
    pub fn pretrain_autoencoder(&mut self, log: &mut dyn Write) -> Result<f64> {
        let nets = self.model.networks();
        self.model.store.set_trainable(|_| true, false);
        self.model.store.set_trainable(Model::is_autoencoder, true);
        self.model.store.reset_optimizer_state();
        let mut opt = Adam::new(self.cfg.ae_lr);
        opt.clip_norm = Some(self.cfg.grad_clip);
        let mut batch_rng = rng::derived(self.cfg.seed, 1);

        for iter in 0..self.cfg.ae_iters {
            let batch = self.batch_tensor(&mut batch_rng);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(batch.clone());
            let z = nets.encode_image(&mut tape, &self.model.store, x);
            let x_hat = nets.decode_latent(&mut tape, &self.model.store, z);
            let sum = tape.sse(x, x_hat);
            let loss = tape.scale(sum, 1.0 / (batch.len() as f64));
            let report = LossReport {
                iter,
                stage: "ae".into(),
                pixel: tape.scalar(loss),
                total: tape.scalar(loss),
                ..Default::default()
            };
            Self::check_finite(&report)?;
            let grads = tape.backward(loss);
            opt.update(&mut self.model.store, &grads.by_param)?;
            if iter % self.cfg.log_every == 0 {
                Self::log_report(log, &report)?;
            }
        }

        // calibrate the latent scale on a probe batch
        let probe = self.batch_tensor(&mut batch_rng);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(probe);
        let z = nets.encode_image(&mut tape, &self.model.store, x);
        let zv = tape.value(z);
        let n = zv.len() as f64;
        let mean: f64 = zv.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = zv.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        self.model.meta.latent_scale = (var.sqrt().max(1e-3)) as f32;

        self.model.store.set_trainable(|_| true, false);
        self.model.meta.stage = TrainStage::Autoencoder;

        // held-out reconstruction quality
        let mut total = 0.0;
        for img in &self.corpus_heldout {
            let x = img
                .clone()
                .into_shape_with_order((1, img.dim().0, img.dim().1, img.dim().2))
                .unwrap();
            let mut tape = Tape::<f32>::new();
            let xn = tape.constant(x.into_dyn());
            let z = nets.encode_image(&mut tape, &self.model.store, xn);
            let x_hat = nets.decode_latent(&mut tape, &self.model.store, z);
            let xh = tape.value(x_hat);
            let xv = tape.value(xn);
            total += xv
                .iter()
                .zip(xh.iter())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / xv.len() as f64;
        }
        Ok(total / self.corpus_heldout.len() as f64)
    }

    /// Pretrain the unconditional denoiser on frozen latents with the
    /// standard noise-prediction objective, then freeze it.
    pub fn pretrain_base_denoiser(&mut self, log: &mut dyn Write) -> Result<()> {
        if self.model.meta.stage < TrainStage::Autoencoder {
            return Err(Error::Training(
                "base-denoiser pretraining requires a pretrained autoencoder".into(),
            ));
        }
        let nets = self.model.networks();
        let schedule = self.model.schedule()?;
        self.model.store.set_trainable(|_| true, false);
        self.model.store.set_trainable(Model::is_base_denoiser, true);
        self.model.store.reset_optimizer_state();
        let mut opt = Adam::new(self.cfg.base_lr);
        opt.clip_norm = Some(self.cfg.grad_clip);
        let mut batch_rng = rng::derived(self.cfg.seed, 2);

        for iter in 0..self.cfg.base_iters {
            let batch = self.batch_tensor(&mut batch_rng);
            let mut ctx = SampleCtx::<f32>::record(self.cfg.seed ^ (0xBA5E + iter as u64));
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(batch.clone());
            let z_raw = nets.encode_image(&mut tape, &self.model.store, x);
            let z0 = tape.scale(z_raw, 1.0 / self.model.meta.latent_scale as f64);
            let t = ctx.step_uniform(1, schedule.t());
            let zdims = tape.shape(z0).to_vec();
            let noise = ctx.normal(&zdims);
            let noise_node = tape.constant(noise);
            let signal = tape.scale(z0, schedule.sqrt_alpha_bar(t));
            let noised = tape.scale(noise_node, schedule.sqrt_one_minus_alpha_bar(t));
            let z_t = tape.add(signal, noised);
            let eps_hat = nets.denoise(&mut tape, &self.model.store, z_t, None, t);
            let sum = tape.sse(noise_node, eps_hat);
            let loss = tape.scale(sum, 1.0 / self.cfg.batch_size as f64);
            let report = LossReport {
                iter,
                stage: "base".into(),
                noise_estimation: tape.scalar(loss),
                total: tape.scalar(loss),
                ..Default::default()
            };
            Self::check_finite(&report)?;
            let grads = tape.backward(loss);
            opt.update(&mut self.model.store, &grads.by_param)?;
            if iter % self.cfg.log_every == 0 {
                Self::log_report(log, &report)?;
            }
        }
        self.model.store.set_trainable(|_| true, false);
        self.model.meta.stage = TrainStage::BaseDenoiser;
        Ok(())
    }

    fn codec_trainables(&mut self) {
        self.model.store.set_trainable(|_| true, false);
        self.model.store.set_trainable(Model::is_codec, true);
    }

    fn reseed_dead_codebook_entries(
        &mut self,
        usage: &mut Vec<u64>,
        lp_values: &ArrayD<f32>,
        rng: &mut Rng,
    ) {
        let dead: Vec<usize> = usage
            .iter()
            .enumerate()
            .filter(|(_, &u)| u == 0)
            .map(|(i, _)| i)
            .collect();
        if dead.is_empty() {
            usage.iter_mut().for_each(|u| *u = 0);
            return;
        }
        let vecs = lp_values
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("lp vectors are 2-d");
        let n_vec = vecs.nrows();
        {
            let table = self.model.store.get_mut("codebook.table");
            let mut t2 = table
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("codebook 2-d");
            for &j in &dead {
                let pick = rng::uniform_step(rng, 0, n_vec - 1);
                for (d, v) in t2.row_mut(j).iter_mut().enumerate() {
                    *v = vecs[(pick, d)] + (rng::normal_f64(rng) * 0.01) as f32;
                }
            }
        }
        // stale optimizer moments for reseeded rows are cleared
        let idx = self.model.store.idx("codebook.table");
        let p = &mut self.model.store.params_mut()[idx];
        let cols = p.value.shape()[1];
        for &j in &dead {
            for d in 0..cols {
                p.m[[j, d]] = 0.0;
                p.v[[j, d]] = 0.0;
            }
        }
        usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Stage I: independent per-step training, two sequential phases
    /// (warm-up at lambda_r = 2, then the target lambda_r).
    pub fn train_stage1(&mut self, log: &mut dyn Write) -> Result<()> {
        if self.model.meta.stage < TrainStage::BaseDenoiser {
            return Err(Error::Training(
                "stage I requires pretrained autoencoder and base denoiser".into(),
            ));
        }
        let nets = self.model.networks();
        let (schedule, weights) = relay_for(&self.model, &self.cfg)?;
        self.codec_trainables();
        self.model.store.reset_optimizer_state();
        let frozen_before = self
            .model
            .store
            .snapshot(|n| Model::is_autoencoder(n) || Model::is_base_denoiser(n));

        let mut batch_rng = rng::derived(self.cfg.seed, 3);
        let mut reseed_rng = rng::derived(self.cfg.seed, 4);
        let mut usage = vec![0u64; self.model.meta.topology.codebook_size];

        let phases = [
            (self.cfg.stage1_phase1_iters, self.cfg.stage1_lr_phase1, 2.0),
            (
                self.cfg.stage1_phase2_iters,
                self.cfg.stage1_lr_phase2,
                self.cfg.lambda_r,
            ),
        ];
        let mut global_iter = 0usize;
        for (iters, lr, lambda_r) in phases {
            let mut opt = Adam::new(lr);
            opt.clip_norm = Some(self.cfg.grad_clip);
            for _ in 0..iters {
                let batch = self.batch_tensor(&mut batch_rng);
                let mut ctx =
                    SampleCtx::<f32>::record(self.cfg.seed ^ (0x57A6E1 + global_iter as u64));
                let mut tape = Tape::<f32>::new();
                let nodes = stage1_graph(
                    &nets,
                    &mut tape,
                    &self.model.store,
                    &mut ctx,
                    &batch,
                    &schedule,
                    &weights,
                    self.cfg.start_mode,
                    self.model.meta.latent_scale,
                    lambda_r,
                    self.cfg.beta,
                );
                let report = report_from(&tape, &nodes, global_iter, "stage1");
                Self::check_finite(&report)?;
                for &i in &nodes.vq_indices {
                    usage[i] += 1;
                }
                let lp_values = tape.value(nodes.lp_vecs).clone();
                let grads = tape.backward(nodes.total);
                drop(tape);
                opt.update(&mut self.model.store, &grads.by_param)?;
                if global_iter % self.cfg.log_every == 0 {
                    Self::log_report(log, &report)?;
                }
                if (global_iter + 1) % self.cfg.codebook_reseed_interval == 0 {
                    self.reseed_dead_codebook_entries(&mut usage, &lp_values, &mut reseed_rng);
                }
                global_iter += 1;
            }
        }

        if !crate::nn::checkpoint::params_bit_identical(&frozen_before, &self.model.store) {
            return Err(Error::Training("frozen parameters moved in stage I".into()));
        }
        self.model.store.set_trainable(|_| true, false);
        self.model.meta.stage = TrainStage::Stage1;
        self.model.meta.lambda_r = self.cfg.lambda_r;
        self.model.meta.start_mode = self.cfg.start_mode;
        self.model.meta.config_hash = self.cfg.hash()?;
        Ok(())
    }

    /// Stage II: fixed-step fine-tuning through the unrolled loop.
    pub fn train_stage2(&mut self, log: &mut dyn Write) -> Result<()> {
        if self.model.meta.stage < TrainStage::Stage1 {
            return Err(Error::Training(
                "stage II requires a stage I checkpoint".into(),
            ));
        }
        let nets = self.model.networks();
        let (schedule, weights) = relay_for(&self.model, &self.cfg)?;
        self.codec_trainables();
        self.model.store.reset_optimizer_state();
        let frozen_before = self
            .model
            .store
            .snapshot(|n| Model::is_autoencoder(n) || Model::is_base_denoiser(n));
        let mut opt = Adam::new(self.cfg.stage2_lr);
        opt.clip_norm = Some(self.cfg.grad_clip);
        let mut batch_rng = rng::derived(self.cfg.seed, 5);

        for iter in 0..self.cfg.stage2_iters {
            let batch = self.batch_tensor(&mut batch_rng);
            let mut ctx = SampleCtx::<f32>::record(self.cfg.seed ^ (0xF5F7 + iter as u64));
            let mut tape = Tape::<f32>::new();
            let nodes = stage2_graph(
                &nets,
                &mut tape,
                &self.model.store,
                &mut ctx,
                &batch,
                &schedule,
                &weights,
                self.cfg.start_mode,
                self.model.meta.latent_scale,
                self.cfg.lambda_r,
                self.cfg.lambda_perc,
                self.cfg.beta,
                self.cfg.l_steps,
            )?;
            let report = report_from(&tape, &nodes, iter, "stage2");
            Self::check_finite(&report)?;
            let grads = tape.backward(nodes.total);
            drop(tape);
            opt.update(&mut self.model.store, &grads.by_param)?;
            if iter % self.cfg.log_every == 0 {
                Self::log_report(log, &report)?;
            }
        }

        if !crate::nn::checkpoint::params_bit_identical(&frozen_before, &self.model.store) {
            return Err(Error::Training("frozen parameters moved in stage II".into()));
        }
        self.model.store.set_trainable(|_| true, false);
        self.model.meta.stage = TrainStage::Stage2;
        Ok(())
    }

    /// Mean held-out pixel MSE of full reconstructions at step count `l`.
    pub fn heldout_mse(&self, l: usize, lambda_s: f64) -> Result<f64> {
        heldout_mse(&self.model, &self.corpus_heldout, l, lambda_s)
    }
}

fn relay_for(model: &Model, cfg: &TrainConfig) -> Result<(NoiseSchedule, RelayWeights)> {
    let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
    let horizon = match cfg.start_mode {
        StartMode::Relay => cfg.schedule.relay_n,
        StartMode::PureNoise => cfg.schedule.steps,
    };
    let weights = schedule.relay_weights(horizon)?;
    let _ = model;
    Ok((schedule, weights))
}

/// Mean pixel MSE over a held-out set via the in-memory codec path.
pub fn heldout_mse(
    model: &Model,
    images: &[Array3<f32>],
    l: usize,
    lambda_s: f64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Training("empty held-out set".into()));
    }
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let seed = 0xE7A1_0000 + i as u64;
        let rec = codec::reconstruct_image(model, img, l, lambda_s, seed)?;
        total += metrics::mse(img, &rec);
    }
    Ok(total / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::nn::models::Topology;
    use crate::schedule::ScheduleConfig;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            topology: Topology::tiny(),
            image_size: 16,
            schedule: ScheduleConfig {
                steps: 100,
                relay_n: 30,
                ..ScheduleConfig::default()
            },
            batch_size: 2,
            corpus_train: 8,
            corpus_heldout: 2,
            ae_iters: 10,
            base_iters: 8,
            stage1_phase1_iters: 4,
            stage1_phase2_iters: 4,
            stage2_iters: 3,
            l_steps: 2,
            log_every: 1000,
            codebook_reseed_interval: 5,
            ..TrainConfig::default()
        }
    }

    fn fresh_trainer(cfg: &TrainConfig) -> Trainer {
        let model = Model::new(cfg.topology.clone(), cfg.schedule, cfg.seed);
        Trainer::new(model, cfg.clone()).unwrap()
    }

    #[test]
    fn stage_preconditions_enforced() {
        let cfg = tiny_cfg();
        let mut t = fresh_trainer(&cfg);
        let mut sink = std::io::sink();
        assert!(t.pretrain_base_denoiser(&mut sink).is_err());
        assert!(t.train_stage1(&mut sink).is_err());
        assert!(t.train_stage2(&mut sink).is_err());
    }

    #[test]
    fn full_tiny_pipeline_runs_and_freezes() {
        let cfg = tiny_cfg();
        let mut t = fresh_trainer(&cfg);
        let mut sink = std::io::sink();
        t.pretrain_autoencoder(&mut sink).unwrap();
        assert!(t.model.meta.latent_scale > 0.0);
        t.pretrain_base_denoiser(&mut sink).unwrap();
        let ae_before = t.model.store.snapshot(Model::is_autoencoder);
        let den_before = t.model.store.snapshot(Model::is_base_denoiser);
        t.train_stage1(&mut sink).unwrap();
        t.train_stage2(&mut sink).unwrap();
        assert!(crate::nn::checkpoint::params_bit_identical(
            &ae_before,
            &t.model.store
        ));
        assert!(crate::nn::checkpoint::params_bit_identical(
            &den_before,
            &t.model.store
        ));
        assert_eq!(t.model.meta.stage, TrainStage::Stage2);
        assert!(t.model.store.all_finite());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let run = || {
            let mut t = fresh_trainer(&cfg);
            let mut sink = std::io::sink();
            t.pretrain_autoencoder(&mut sink).unwrap();
            t.pretrain_base_denoiser(&mut sink).unwrap();
            t.train_stage1(&mut sink).unwrap();
            t.model.to_bytes().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_report_total_matches_weighted_sum() {
        let cfg = tiny_cfg();
        let mut t = fresh_trainer(&cfg);
        let mut sink = std::io::sink();
        t.pretrain_autoencoder(&mut sink).unwrap();
        t.pretrain_base_denoiser(&mut sink).unwrap();

        let nets = t.model.networks();
        let (schedule, weights) = relay_for(&t.model, &t.cfg).unwrap();
        t.codec_trainables();
        let mut batch_rng = rng::derived(t.cfg.seed, 3);
        let batch = t.batch_tensor(&mut batch_rng);

        // stage I report
        let mut ctx = SampleCtx::<f32>::record(11);
        let mut tape = Tape::<f32>::new();
        let nodes = stage1_graph(
            &nets,
            &mut tape,
            &t.model.store,
            &mut ctx,
            &batch,
            &schedule,
            &weights,
            StartMode::Relay,
            t.model.meta.latent_scale,
            t.cfg.lambda_r,
            t.cfg.beta,
        );
        let report = report_from(&tape, &nodes, 0, "stage1");
        let expect = report.weighted_sum(t.cfg.lambda_r, t.cfg.lambda_perc, t.cfg.beta);
        assert!(
            (report.total - expect).abs() / expect.abs().max(1.0) < 1e-6,
            "{} vs {}",
            report.total,
            expect
        );
        assert!(report.rate_bits > 0.0);

        // stage II report
        let mut ctx = SampleCtx::<f32>::record(12);
        let mut tape = Tape::<f32>::new();
        let nodes = stage2_graph(
            &nets,
            &mut tape,
            &t.model.store,
            &mut ctx,
            &batch,
            &schedule,
            &weights,
            StartMode::Relay,
            t.model.meta.latent_scale,
            t.cfg.lambda_r,
            t.cfg.lambda_perc,
            t.cfg.beta,
            2,
        )
        .unwrap();
        let report = report_from(&tape, &nodes, 0, "stage2");
        let expect = report.weighted_sum(t.cfg.lambda_r, t.cfg.lambda_perc, t.cfg.beta);
        assert!(
            (report.total - expect).abs() / expect.abs().max(1.0) < 1e-6,
            "{} vs {}",
            report.total,
            expect
        );
        assert!(report.pixel > 0.0 && report.perceptual > 0.0);
    }

    #[test]
    fn omega_weight_increases_with_step() {
        let schedule = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let omega = |n: usize| (1.0 - schedule.alpha_bar(n)) / schedule.alpha_bar(n);
        assert!(omega(300) > omega(1));
    }
}
