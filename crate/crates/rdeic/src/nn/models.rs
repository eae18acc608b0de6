//! Network topology and forward passes.
//!
//! Every map in the pipeline is a small convolutional stack:
//!
//! - `enc`/`dec`: image autoencoder between pixel space and the latent
//!   space (downsampling factor is a power of two).
//! - `ga`/`gs`: analysis transform to the entropy-coded representation
//!   `y` and synthesis transform back to the condition features `c` and
//!   compressed latent `z_c` (two heads off a shared trunk).
//! - `ha`/`hs`: hyper transforms producing the side-information vectors
//!   that are vector-quantized and feed the context model.
//! - `cm`: checkerboard context model predicting entropy parameters.
//! - `den`: unconditional denoiser trunk with a sinusoidal timestep
//!   embedding; `ctl`: reduced-width control branch that injects
//!   condition features additively into the trunk (zero-initialized
//!   injections, so the conditional path starts exactly at the base).
//! - `perc`: a frozen random-filter feature stack used as the perceptual
//!   distance proxy.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::nn::params::{ParamSource, ParamStore};
use crate::nn::tape::{NodeId, Tape};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub image_size: usize,
    pub image_channels: usize,
    /// Spatial factor between image and latent; power of two.
    pub factor: usize,
    pub latent_channels: usize,
    pub y_channels: usize,
    pub cond_channels: usize,
    pub enc_width: usize,
    pub ga_width: usize,
    pub gs_width: usize,
    pub hyper_width: usize,
    pub cm_width: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub trunk_width: usize,
    /// Control branch width as a fraction of the trunk width.
    pub control_ratio: f64,
    pub temb_dim: usize,
    pub perc_width: usize,
    pub sigma_min: f64,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            image_size: 64,
            image_channels: 3,
            factor: 8,
            latent_channels: 4,
            y_channels: 6,
            cond_channels: 32,
            enc_width: 32,
            ga_width: 48,
            gs_width: 64,
            hyper_width: 16,
            cm_width: 32,
            codebook_size: 512,
            codebook_dim: 8,
            trunk_width: 48,
            control_ratio: 0.2,
            temb_dim: 32,
            perc_width: 16,
            sigma_min: 0.11,
        }
    }
}

impl Topology {
    /// Shrunken topology for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        Topology {
            image_size: 16,
            image_channels: 3,
            factor: 4,
            latent_channels: 3,
            y_channels: 3,
            cond_channels: 6,
            enc_width: 6,
            ga_width: 8,
            gs_width: 8,
            hyper_width: 4,
            cm_width: 8,
            codebook_size: 16,
            codebook_dim: 4,
            trunk_width: 10,
            control_ratio: 0.2,
            temb_dim: 8,
            perc_width: 4,
            sigma_min: 0.11,
        }
    }

    pub fn downs(&self) -> usize {
        assert!(self.factor.is_power_of_two() && self.factor > 1);
        self.factor.trailing_zeros() as usize
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.factor
    }

    pub fn control_width(&self) -> usize {
        ((self.trunk_width as f64 * self.control_ratio).round() as usize).max(2)
    }

    fn enc_widths(&self) -> Vec<usize> {
        (0..self.downs())
            .map(|i| self.enc_width << i.min(1))
            .collect()
    }
}

fn conv_init(rng: &mut Rng, cout: usize, cin: usize, k: usize) -> ArrayD<f32> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(&[cout, cin, k, k]), || {
        (rng::normal_f64(rng) * std) as f32
    })
}

fn linear_init(rng: &mut Rng, din: usize, dout: usize) -> ArrayD<f32> {
    let std = (2.0 / din as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(&[din, dout]), || (rng::normal_f64(rng) * std) as f32)
}

fn zeros(dims: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(dims))
}

/// Sinusoidal embedding of a timestep, identical rows across the batch.
pub fn timestep_embedding<E: Element>(n: usize, batch: usize, dim: usize) -> ArrayD<E> {
    let half = dim / 2;
    let mut row = vec![0.0f64; dim];
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (-(10000.0f64.ln()) * i as f64 / denom).exp();
        row[i] = (n as f64 * freq).sin();
        row[half + i] = (n as f64 * freq).cos();
    }
    let mut out = ArrayD::<E>::zeros(IxDyn(&[batch, dim]));
    for b in 0..batch {
        for (i, &v) in row.iter().enumerate() {
            out[[b, i]] = E::from_f64(v);
        }
    }
    out
}

/// Registers parameters and runs forward passes for every network in the
/// codec. Parameter values live in a [`ParamStore`]; this struct only
/// knows names and shapes.
#[derive(Debug, Clone)]
pub struct Networks {
    pub topo: Topology,
}

impl Networks {
    pub fn new(topo: Topology) -> Self {
        Networks { topo }
    }

    /// Create and initialize every parameter. Registration order is fixed,
    /// which keeps checkpoints and training byte-reproducible.
    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) {
        let t = &self.topo;
        // encoder: strided conv per down, then projection to the latent
        let mut cin = t.image_channels;
        for (i, w) in t.enc_widths().iter().enumerate() {
            store.insert(&format!("enc.{i}.w"), conv_init(rng, *w, cin, 3), true);
            store.insert(&format!("enc.{i}.b"), zeros(&[*w]), true);
            cin = *w;
        }
        store.insert("enc.out.w", conv_init(rng, t.latent_channels, cin, 3), true);
        store.insert("enc.out.b", zeros(&[t.latent_channels]), true);

        // decoder: mirror with nearest upsampling
        let widths = t.enc_widths();
        let top = *widths.last().unwrap();
        store.insert("dec.in.w", conv_init(rng, top, t.latent_channels, 3), true);
        store.insert("dec.in.b", zeros(&[top]), true);
        let mut cur = top;
        for i in 0..t.downs() {
            let next = if i + 1 < t.downs() {
                widths[t.downs() - 2 - i]
            } else {
                t.enc_width
            };
            store.insert(&format!("dec.{i}.w"), conv_init(rng, next, cur, 3), true);
            store.insert(&format!("dec.{i}.b"), zeros(&[next]), true);
            cur = next;
        }
        store.insert("dec.out.w", conv_init(rng, t.image_channels, cur, 3), true);
        store.insert("dec.out.b", zeros(&[t.image_channels]), true);

        // analysis / synthesis transforms
        store.insert("ga.0.w", conv_init(rng, t.ga_width, t.latent_channels, 3), true);
        store.insert("ga.0.b", zeros(&[t.ga_width]), true);
        store.insert("ga.1.w", conv_init(rng, t.ga_width, t.ga_width, 3), true);
        store.insert("ga.1.b", zeros(&[t.ga_width]), true);
        store.insert("ga.out.w", conv_init(rng, t.y_channels, t.ga_width, 3), true);
        store.insert("ga.out.b", zeros(&[t.y_channels]), true);

        store.insert("gs.0.w", conv_init(rng, t.gs_width, t.y_channels, 3), true);
        store.insert("gs.0.b", zeros(&[t.gs_width]), true);
        store.insert("gs.1.w", conv_init(rng, t.gs_width, t.gs_width, 3), true);
        store.insert("gs.1.b", zeros(&[t.gs_width]), true);
        store.insert("gs.c.w", conv_init(rng, t.cond_channels, t.gs_width, 3), true);
        store.insert("gs.c.b", zeros(&[t.cond_channels]), true);
        store.insert("gs.zc.w", conv_init(rng, t.latent_channels, t.gs_width, 3), true);
        store.insert("gs.zc.b", zeros(&[t.latent_channels]), true);

        // hyper transforms
        store.insert("ha.0.w", conv_init(rng, t.hyper_width, t.y_channels, 3), true);
        store.insert("ha.0.b", zeros(&[t.hyper_width]), true);
        store.insert("ha.out.w", conv_init(rng, t.codebook_dim, t.hyper_width, 3), true);
        store.insert("ha.out.b", zeros(&[t.codebook_dim]), true);

        store.insert("hs.0.w", conv_init(rng, t.hyper_width, t.codebook_dim, 3), true);
        store.insert("hs.0.b", zeros(&[t.hyper_width]), true);
        store.insert("hs.1.w", conv_init(rng, t.hyper_width, t.hyper_width, 3), true);
        store.insert("hs.1.b", zeros(&[t.hyper_width]), true);

        // context model: shared trunk + mu / sigma heads
        let cm_in = t.hyper_width + t.y_channels;
        store.insert("cm.0.w", conv_init(rng, t.cm_width, cm_in, 5), true);
        store.insert("cm.0.b", zeros(&[t.cm_width]), true);
        store.insert("cm.1.w", conv_init(rng, t.cm_width, t.cm_width, 3), true);
        store.insert("cm.1.b", zeros(&[t.cm_width]), true);
        store.insert("cm.mu.w", conv_init(rng, t.y_channels, t.cm_width, 1), true);
        store.insert("cm.mu.b", zeros(&[t.y_channels]), true);
        store.insert("cm.sigma.w", conv_init(rng, t.y_channels, t.cm_width, 1), true);
        store.insert("cm.sigma.b", zeros(&[t.y_channels]), true);

        // codebook
        let cb = ArrayD::from_shape_simple_fn(
            IxDyn(&[t.codebook_size, t.codebook_dim]),
            || (rng::normal_f64(rng) * 0.5) as f32,
        );
        store.insert("codebook.table", cb, true);

        // denoiser trunk + time embedding MLP
        let tw = t.trunk_width;
        store.insert("den.temb1.w", linear_init(rng, t.temb_dim, tw), true);
        store.insert("den.temb1.b", zeros(&[tw]), true);
        store.insert("den.temb2.w", linear_init(rng, tw, tw), true);
        store.insert("den.temb2.b", zeros(&[tw]), true);
        store.insert("den.in.w", conv_init(rng, tw, t.latent_channels, 3), true);
        store.insert("den.in.b", zeros(&[tw]), true);
        for i in 0..3 {
            store.insert(&format!("den.b{i}.w"), conv_init(rng, tw, tw, 3), true);
            store.insert(&format!("den.b{i}.b"), zeros(&[tw]), true);
        }
        store.insert("den.out.w", conv_init(rng, t.latent_channels, tw, 3), true);
        store.insert("den.out.b", zeros(&[t.latent_channels]), true);

        // control branch (reduced width) + zero-initialized injections
        let cw = t.control_width();
        store.insert("ctl.temb1.w", linear_init(rng, t.temb_dim, cw), true);
        store.insert("ctl.temb1.b", zeros(&[cw]), true);
        let ctl_in = t.latent_channels + t.cond_channels;
        store.insert("ctl.in.w", conv_init(rng, cw, ctl_in, 3), true);
        store.insert("ctl.in.b", zeros(&[cw]), true);
        for i in 0..2 {
            store.insert(&format!("ctl.b{i}.w"), conv_init(rng, cw, cw, 3), true);
            store.insert(&format!("ctl.b{i}.b"), zeros(&[cw]), true);
        }
        for i in 0..3 {
            store.insert(&format!("ctl.inj{i}.w"), zeros(&[tw, cw, 1, 1]), true);
            store.insert(&format!("ctl.inj{i}.b"), zeros(&[tw]), true);
        }

        // frozen random perceptual features
        store.insert(
            "perc.0.w",
            conv_init(rng, t.perc_width, t.image_channels, 3),
            false,
        );
        store.insert("perc.0.b", zeros(&[t.perc_width]), false);
        store.insert(
            "perc.1.w",
            conv_init(rng, 2 * t.perc_width, t.perc_width, 3),
            false,
        );
        store.insert("perc.1.b", zeros(&[2 * t.perc_width]), false);
    }

    fn conv<E: Element>(
        &self,
        tape: &mut Tape<E>,
        src: &dyn ParamSource<E>,
        name: &str,
        x: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let w = src.node(tape, &format!("{name}.w"));
        let b = src.node(tape, &format!("{name}.b"));
        tape.conv2d(x, w, b, stride, pad)
    }

    /// Image -> latent (4-d in, 4-d out).
    pub fn encode_image<E: Element>(
        &self,
        tape: &mut Tape<E>,
        src: &dyn ParamSource<E>,
        x: NodeId,
    ) -> NodeId {
        let mut h = x;
        for i in 0..self.topo.downs() {
            h = self.conv(tape, src, &format!("enc.{i}"), h, 2, 1);
            h = tape.silu(h);
        }
        self.conv(tape, src, "enc.out", h, 1, 1)
    }

    /// Latent -> image in [0, 1] (sigmoid output head).
    pub fn decode_latent<E: Element>(
        &self,
        tape: &mut Tape<E>,
        src: &dyn ParamSource<E>,
        z: NodeId,
    ) -> NodeId {
        let mut h = self.conv(tape, src, "dec.in", z, 1, 1);
        h = tape.silu(h);
        for i in 0..self.topo.downs() {
            h = tape.upsample2(h);
            h = self.conv(tape, src, &format!("dec.{i}"), h, 1, 1);
            h = tape.silu(h);
        }
        let out = self.conv(tape, src, "dec.out", h, 1, 1);
        tape.sigmoid_act(out)
    }

    pub fn analysis<E: Element>(
        &self,
        tape: &mut Tape<E>,
        src: &dyn ParamSource<E>,
        z0: NodeId,
    ) -> NodeId {
        let mut h = self.conv(tape, src, "ga.0", z0, 1, 1);
        h = tape.silu(h);
        h = self.conv(tape, src, "ga.1", h, 1, 1);
        h = tape.silu(h);
        self.conv(tape, src, "ga.out", h, 1, 1)
    }

    /// Returns `(c, z_c)`: the condition features and compressed latent.
    pub fn synthesis<E: Element>(
        &self,
        tape: &mut Tape<E>,
        src: &dyn ParamSource<E>,
        y_hat: NodeId,
    ) -> (NodeId, NodeId) {
        let mut h = self.conv(tape, src, "gs.0", y_hat, 1, 1);
        h = tape.silu(h);
        h = self.conv(tape, src, "gs.1", h, 1, 1);
        h = tape.silu(h);
        let c = self.conv(tape, src, "gs.c", h, 1, 1);
        let z_c = self.conv(tape, src, "gs.zc", h, 1, 1);
        (c, z_c)
    }

    pub fn hyper_encode<E: Element>(
        &self,
        tape: &mut Tape<E>,
        src: &dyn ParamSource<E>,
        y: NodeId,
    ) -> NodeId {
        let mut h = self.conv(tape, src, "ha.0", y, 2, 1);
        h = tape.silu(h);
        self.conv(tape, src, "ha.out", h, 1, 1)
    }

    /// `out_hw` crops the upsampled features back to the coded grid,
    /// which matters when the grid has odd spatial dims.
    pub fn hyper_decode<E: Element>(
        &self,
        tape: &mut Tape<E>,
        src: &dyn ParamSource<E>,
        lp_hat: NodeId,
        out_hw: (usize, usize),
    ) -> NodeId {
        let mut h = self.conv(tape, src, "hs.0", lp_hat, 1, 1);
        h = tape.silu(h);
        h = tape.upsample2(h);
        h = tape.crop2d(h, out_hw.0, out_hw.1);
        h = self.conv(tape, src, "hs.1", h, 1, 1);
        tape.silu(h)
    }

    /// Entropy parameters from hyper features and (masked) decoded
    /// context. Returns `(mu, sigma)` with `sigma >= sigma_min`.
    pub fn context_params<E: Element>(
        &self,
        tape: &mut Tape<E>,
        src: &dyn ParamSource<E>,
        hyper_feats: NodeId,
        masked_y: NodeId,
    ) -> (NodeId, NodeId) {
        let cat = tape.concat_c(hyper_feats, masked_y);
        let mut h = self.conv(tape, src, "cm.0", cat, 1, 2);
        h = tape.silu(h);
        h = self.conv(tape, src, "cm.1", h, 1, 1);
        h = tape.silu(h);
        let mu = self.conv(tape, src, "cm.mu", h, 1, 0);
        let sraw = self.conv(tape, src, "cm.sigma", h, 1, 0);
        let sp = tape.softplus(sraw);
        let sigma = tape.add_scalar(sp, self.topo.sigma_min);
        (mu, sigma)
    }

    /// Noise estimate. `c = None` runs the frozen base trunk alone;
    /// `c = Some(..)` adds the control branch's injections.
    pub fn denoise<E: Element>(
        &self,
        tape: &mut Tape<E>,
        src: &dyn ParamSource<E>,
        z: NodeId,
        c: Option<NodeId>,
        n: usize,
    ) -> NodeId {
        let batch = tape.shape(z)[0];
        let temb_in = tape.constant(timestep_embedding::<E>(n, batch, self.topo.temb_dim));
        let w1 = src.node(tape, "den.temb1.w");
        let b1 = src.node(tape, "den.temb1.b");
        let t1 = tape.linear(temb_in, w1, b1);
        let t1 = tape.silu(t1);
        let w2 = src.node(tape, "den.temb2.w");
        let b2 = src.node(tape, "den.temb2.b");
        let temb = tape.linear(t1, w2, b2);

        let control = c.map(|c_node| {
            let cw1 = src.node(tape, "ctl.temb1.w");
            let cb1 = src.node(tape, "ctl.temb1.b");
            let ct = tape.linear(temb_in, cw1, cb1);
            let ct = tape.silu(ct);
            let zin = tape.concat_c(z, c_node);
            let mut u = self.conv(tape, src, "ctl.in", zin, 1, 1);
            u = tape.add_chan(u, ct);
            u = tape.silu(u);
            for i in 0..2 {
                u = self.conv(tape, src, &format!("ctl.b{i}"), u, 1, 1);
                u = tape.silu(u);
            }
            u
        });

        let mut h = self.conv(tape, src, "den.in", z, 1, 1);
        h = tape.add_chan(h, temb);
        h = tape.silu(h);
        for i in 0..3 {
            h = self.conv(tape, src, &format!("den.b{i}"), h, 1, 1);
            h = tape.add_chan(h, temb);
            h = tape.silu(h);
            if let Some(u) = control {
                let inj = self.conv(tape, src, &format!("ctl.inj{i}"), u, 1, 0);
                h = tape.add(h, inj);
            }
        }
        self.conv(tape, src, "den.out", h, 1, 1)
    }

    /// Frozen random-filter feature map for the perceptual proxy loss.
    pub fn perceptual_features<E: Element>(
        &self,
        tape: &mut Tape<E>,
        src: &dyn ParamSource<E>,
        img: NodeId,
    ) -> NodeId {
        let mut h = self.conv(tape, src, "perc.0", img, 2, 1);
        h = tape.silu(h);
        self.conv(tape, src, "perc.1", h, 2, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn setup(topo: Topology) -> (Networks, ParamStore) {
        let nets = Networks::new(topo);
        let mut store = ParamStore::new();
        let mut rng = seeded(42);
        nets.register(&mut store, &mut rng);
        (nets, store)
    }

    #[test]
    fn shape_contracts_hold() {
        let (nets, store) = setup(Topology::default());
        let t = &nets.topo;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2, 3, 64, 64])));
        let z0 = nets.encode_image(&mut tape, &store, x);
        assert_eq!(tape.shape(z0), &[2, t.latent_channels, 8, 8]);
        let img = nets.decode_latent(&mut tape, &store, z0);
        assert_eq!(tape.shape(img), &[2, 3, 64, 64]);
        assert!(tape.value(img).iter().all(|v| (0.0..=1.0).contains(v)));

        let y = nets.analysis(&mut tape, &store, z0);
        assert_eq!(tape.shape(y), &[2, t.y_channels, 8, 8]);
        let (c, z_c) = nets.synthesis(&mut tape, &store, y);
        assert_eq!(tape.shape(c), &[2, t.cond_channels, 8, 8]);
        assert_eq!(tape.shape(z_c), &[2, t.latent_channels, 8, 8]);

        let lp = nets.hyper_encode(&mut tape, &store, y);
        assert_eq!(tape.shape(lp), &[2, t.codebook_dim, 4, 4]);
        let hf = nets.hyper_decode(&mut tape, &store, lp, (8, 8));
        assert_eq!(tape.shape(hf), &[2, t.hyper_width, 8, 8]);

        let (mu, sigma) = nets.context_params(&mut tape, &store, hf, y);
        assert_eq!(tape.shape(mu), &[2, t.y_channels, 8, 8]);
        assert_eq!(tape.shape(sigma), &[2, t.y_channels, 8, 8]);
        assert!(tape
            .value(sigma)
            .iter()
            .all(|&s| s >= t.sigma_min as f32));

        let eps = nets.denoise(&mut tape, &store, z0, Some(c), 123);
        assert_eq!(tape.shape(eps), tape.shape(z0));
        let eps_base = nets.denoise(&mut tape, &store, z0, None, 123);
        assert_eq!(tape.shape(eps_base), tape.shape(z0));
    }

    #[test]
    fn conditional_equals_base_at_zero_init() {
        // Injection convs start at zero, so the control branch is inert.
        let (nets, store) = setup(Topology::tiny());
        let mut tape = Tape::<f32>::new();
        let mut rng = seeded(3);
        let z = tape.constant(rng::normal_tensor(&mut rng, &[1, 3, 4, 4]));
        let c = tape.constant(rng::normal_tensor(&mut rng, &[1, 6, 4, 4]));
        let cond = nets.denoise(&mut tape, &store, z, Some(c), 5);
        let base = nets.denoise(&mut tape, &store, z, None, 5);
        assert_eq!(tape.value(cond), tape.value(base));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let (nets, store) = setup(Topology::tiny());
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 16, 16])));
            let z = nets.encode_image(&mut tape, &store, x);
            tape.value(z).clone()
        };
        assert_eq!(run(), run());
        assert!(run().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn timestep_embedding_varies_with_n() {
        let a = timestep_embedding::<f64>(1, 1, 16);
        let b = timestep_embedding::<f64>(250, 1, 16);
        assert_ne!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }
}
