//! Entropy modeling of the coded representation.
//!
//! The analysis output `y` is quantized around a predicted mean and
//! coded under a discretized Gaussian whose parameters come from a
//! two-pass checkerboard context model: anchor positions (checkerboard
//! parity 0) are predicted from hyper features alone, non-anchor
//! positions additionally see the already-decoded anchors through a
//! masked convolution input. Side information is a small vector field
//! quantized against a learned codebook and coded with a uniform model.
//!
//! Everything here exists twice by construction: a tape path used in
//! training (additive-noise rate branch, straight-through rounding,
//! stop-gradient codebook terms) and a pure evaluation path used by the
//! codec (hard rounding, real coder symbols). Both share the identical
//! network forwards, which is what makes encode- and decode-side entropy
//! parameters bit-exact.

use ndarray::{Array2, Array4, ArrayD, IxDyn};

use crate::coder::{CdfTable, SectionDecoder, SectionEncoder, SUPPORT_HI, SUPPORT_LO};
use crate::element::{phi, Element};
use crate::error::{Error, Result};
use crate::nn::ctx::{nearest_indices, SampleCtx};
use crate::nn::models::Networks;
use crate::nn::params::{ParamSource, ParamStore};
use crate::nn::tape::{NodeId, Tape};

/// Probability floor for the rate estimate, matching the coder tables.
pub const P_MIN: f64 = crate::coder::P_MIN;

/// Per-element entropy parameters with the scale floored away from zero.
#[derive(Debug, Clone)]
pub struct EntropyParams {
    pub mu: Array4<f32>,
    pub sigma: Array4<f32>,
}

/// Vector-quantization table plus usage diagnostics.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub table: Array2<f32>,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn from_store(store: &ParamStore) -> Self {
        let table = store
            .get("codebook.table")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("codebook is 2-d")
            .to_owned();
        let n = table.nrows();
        Codebook {
            table,
            usage: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.table.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
    }

    pub fn dead_entries(&self) -> Vec<usize> {
        self.usage
            .iter()
            .enumerate()
            .filter(|(_, &u)| u == 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }
}

/// Eval-mode quantization: `y_hat = mu + round(y - mu)`, ties away from
/// zero.
pub fn quantize_eval(y: &Array4<f32>, mu: &Array4<f32>) -> Result<Array4<f32>> {
    if y.dim() != mu.dim() {
        return Err(Error::ShapeMismatch(format!(
            "quantize: {:?} vs {:?}",
            y.dim(),
            mu.dim()
        )));
    }
    let mut out = Array4::zeros(y.dim());
    ndarray::Zip::from(&mut out)
        .and(y)
        .and(mu)
        .for_each(|o, &yv, &mv| *o = mv + (yv - mv).round());
    Ok(out)
}

/// Exhaustive nearest-entry assignment; ties break to the lowest index.
/// Returns indices and the gathered entries.
pub fn vq_nearest(vectors: &Array2<f32>, codebook: &Codebook) -> Result<(Vec<usize>, Array2<f32>)> {
    if codebook.len() < 2 {
        return Err(Error::EntropyModel("codebook must have >= 2 entries".into()));
    }
    if vectors.ncols() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "vq: vector dim {} vs codebook dim {}",
            vectors.ncols(),
            codebook.dim()
        )));
    }
    let idx = nearest_indices(
        &codebook.table.clone().into_dyn(),
        &vectors.clone().into_dyn(),
    );
    let mut gathered = Array2::zeros((vectors.nrows(), codebook.dim()));
    for (r, &i) in idx.iter().enumerate() {
        gathered.row_mut(r).assign(&codebook.table.row(i));
    }
    Ok((idx, gathered))
}

/// Total rate in bits of `y_hat` under the discretized Gaussian with the
/// per-element mass floored at `P_MIN`.
pub fn rate_estimate(y_hat: &Array4<f32>, params: &EntropyParams) -> Result<f64> {
    Ok(rate_map(y_hat, params)?.iter().sum())
}

/// Per-element estimated bits (bit-allocation maps, diagnostics).
pub fn rate_map(y_hat: &Array4<f32>, params: &EntropyParams) -> Result<Array4<f64>> {
    if y_hat.dim() != params.mu.dim() || y_hat.dim() != params.sigma.dim() {
        return Err(Error::ShapeMismatch("rate_estimate shapes".into()));
    }
    if params.sigma.iter().any(|s| !s.is_finite() || *s <= 0.0)
        || params.mu.iter().any(|m| !m.is_finite())
    {
        return Err(Error::EntropyModel("non-finite entropy parameters".into()));
    }
    let mut out = Array4::zeros(y_hat.dim());
    ndarray::Zip::from(&mut out)
        .and(y_hat)
        .and(&params.mu)
        .and(&params.sigma)
        .for_each(|o, &v, &m, &s| {
            let d = (v - m) as f64;
            let s = s as f64;
            let mass = (phi((d + 0.5) / s) - phi((d - 0.5) / s)).clamp(P_MIN, 1.0);
            *o = -mass.log2();
        });
    Ok(out)
}

/// Checkerboard anchor mask over (h, w): 1.0 where (y + x) is even.
pub fn anchor_mask<E: Element>(dims: [usize; 4]) -> ArrayD<E> {
    let [b, c, h, w] = dims;
    let mut m = ArrayD::<E>::zeros(IxDyn(&dims));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if (y + x) % 2 == 0 {
                        m[[bi, ci, y, x]] = E::one();
                    }
                }
            }
        }
    }
    let _ = (b, c);
    m
}

// ---------------------------------------------------------------------------
// Training path (tape)
// ---------------------------------------------------------------------------

/// Tape node computing total bits of `values` under (mu, sigma).
pub fn rate_bits_node<E: Element>(
    tape: &mut Tape<E>,
    values: NodeId,
    mu: NodeId,
    sigma: NodeId,
) -> NodeId {
    let d = tape.sub(values, mu);
    let hi = tape.add_scalar(d, 0.5);
    let lo = tape.add_scalar(d, -0.5);
    let a = tape.div(hi, sigma);
    let b = tape.div(lo, sigma);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let ea = tape.scale(a, inv_sqrt2);
    let ea = tape.erf(ea);
    let eb = tape.scale(b, inv_sqrt2);
    let eb = tape.erf(eb);
    let diff = tape.sub(ea, eb);
    let mass = tape.scale(diff, 0.5);
    let mass = tape.max_scalar(mass, P_MIN);
    let ln_mass = tape.ln(mass);
    let total = tape.sum_all(ln_mass);
    tape.scale(total, -std::f64::consts::LOG2_E)
}

/// Codebook commitment terms: `||sg(l_p) - l_hat||^2` (moves entries) and
/// `||sg(l_hat) - l_p||^2` (commits the encoder). Both are sums.
pub fn codebook_loss_terms<E: Element>(
    tape: &mut Tape<E>,
    ctx: &mut SampleCtx<E>,
    lp_vecs: NodeId,
    gathered: NodeId,
) -> (NodeId, NodeId) {
    let sg_lp = ctx.sg(tape, lp_vecs);
    let term1 = tape.sse(sg_lp, gathered);
    let sg_gathered = ctx.sg(tape, gathered);
    let term2 = tape.sse(sg_gathered, lp_vecs);
    (term1, term2)
}

/// Everything the training losses need from the entropy path.
pub struct EntropyTrainOut {
    /// Total bits for the whole batch (rate branch sees `y + u`).
    pub rate_bits: NodeId,
    /// Decoder-branch quantized latent (straight-through gradients).
    pub y_hat_dec: NodeId,
    /// Codebook loss terms (sums over all side-information vectors).
    pub cb_term1: NodeId,
    pub cb_term2: NodeId,
    pub vq_indices: Vec<usize>,
    pub mu: NodeId,
    pub sigma: NodeId,
}

/// Differentiable hyper + context path used by both training stages.
pub fn entropy_train_path<E: Element>(
    nets: &Networks,
    tape: &mut Tape<E>,
    src: &dyn ParamSource<E>,
    ctx: &mut SampleCtx<E>,
    y: NodeId,
) -> EntropyTrainOut {
    let y_dims: [usize; 4] = tape.shape(y).try_into().expect("y is 4-d");

    // hyper encode -> VQ -> hyper decode
    let lp = nets.hyper_encode(tape, src, y);
    let lp_dims: [usize; 4] = tape.shape(lp).try_into().unwrap();
    let lp_vecs = tape.nchw_to_vecs(lp);
    let table = src.node(tape, "codebook.table");
    let vq = ctx.vq_nearest_ste(tape, table, lp_vecs);
    let (cb_term1, cb_term2) = codebook_loss_terms(tape, ctx, lp_vecs, vq.gathered);
    let lp_hat = tape.vecs_to_nchw(vq.passthrough, lp_dims);
    let hyper_feats = nets.hyper_decode(tape, src, lp_hat, (y_dims[2], y_dims[3]));

    // pass 1: anchors see hyper features only
    let zeros_y = tape.constant(ArrayD::zeros(IxDyn(&y_dims)));
    let (mu1, sigma1) = nets.context_params(tape, src, hyper_feats, zeros_y);
    let d1 = tape.sub(y, mu1);
    let q1 = ctx.round_ste(tape, d1);
    let y_hat1 = tape.add(mu1, q1);

    let mask_a = tape.constant(anchor_mask::<E>(y_dims));
    let ones = tape.constant(ArrayD::from_elem(IxDyn(&y_dims), E::one()));
    let mask_na = tape.sub(ones, mask_a);

    // pass 2: non-anchors additionally see the quantized anchors
    let anchors_only = tape.mul(y_hat1, mask_a);
    let (mu2, sigma2) = nets.context_params(tape, src, hyper_feats, anchors_only);
    let d2 = tape.sub(y, mu2);
    let q2 = ctx.round_ste(tape, d2);
    let y_hat2 = tape.add(mu2, q2);

    // stitch per-position parameters and decoder-branch output
    let mu_a = tape.mul(mu1, mask_a);
    let mu_n = tape.mul(mu2, mask_na);
    let mu = tape.add(mu_a, mu_n);
    let s_a = tape.mul(sigma1, mask_a);
    let s_n = tape.mul(sigma2, mask_na);
    let sigma = tape.add(s_a, s_n);
    let yh_a = tape.mul(y_hat1, mask_a);
    let yh_n = tape.mul(y_hat2, mask_na);
    let y_hat_dec = tape.add(yh_a, yh_n);

    // rate branch: additive uniform noise against the stitched params
    let u = ctx.uniform_half(&y_dims);
    let u = tape.constant(u);
    let y_tilde = tape.add(y, u);
    let rate_bits = rate_bits_node(tape, y_tilde, mu, sigma);

    EntropyTrainOut {
        rate_bits,
        y_hat_dec,
        cb_term1,
        cb_term2,
        vq_indices: vq.indices,
        mu,
        sigma,
    }
}

// ---------------------------------------------------------------------------
// Coding path (pure values)
// ---------------------------------------------------------------------------

fn forward_values<F>(build: F) -> Array4<f32>
where
    F: FnOnce(&mut Tape<f32>) -> NodeId,
{
    let mut tape = Tape::<f32>::new();
    let id = build(&mut tape);
    tape.value(id)
        .clone()
        .into_dimensionality()
        .expect("4-d output")
}

/// Coding-order iterator: anchors first, then non-anchors, each in
/// (channel, row, col) raster order. Encode and decode must agree on
/// this order exactly.
pub fn coding_order(dims: [usize; 4]) -> Vec<(usize, usize, usize, usize)> {
    let [b, c, h, w] = dims;
    let mut order = Vec::with_capacity(b * c * h * w);
    for parity in [0usize, 1] {
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        if (y + x) % 2 == parity {
                            order.push((bi, ci, y, x));
                        }
                    }
                }
            }
        }
    }
    order
}

/// Encode-side entropy pass: quantizes `y`, produces the VQ indices, the
/// per-element parameters in coding order, and the symbol list.
pub struct EntropyEncodeOut {
    pub y_hat: Array4<f32>,
    pub vq_indices: Vec<usize>,
    pub params: EntropyParams,
    /// Per-element estimated bits of the quantized latent.
    pub bits_map: Array4<f64>,
}

fn context_pass(
    nets: &Networks,
    store: &ParamStore,
    hyper_feats: &Array4<f32>,
    ctx_input: &Array4<f32>,
) -> (Array4<f32>, Array4<f32>) {
    let mut tape = Tape::<f32>::new();
    let hf = tape.constant(hyper_feats.clone().into_dyn());
    let cx = tape.constant(ctx_input.clone().into_dyn());
    let (mu, sigma) = nets.context_params(&mut tape, store, hf, cx);
    (
        tape.value(mu).clone().into_dimensionality().unwrap(),
        tape.value(sigma).clone().into_dimensionality().unwrap(),
    )
}

/// Spatial dims of the side-information grid for a coded grid (h, w).
pub fn hyper_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2), w.div_ceil(2))
}

fn hyper_features_from_indices(
    nets: &Networks,
    store: &ParamStore,
    codebook: &Codebook,
    indices: &[usize],
    lp_dims: [usize; 4],
    out_hw: (usize, usize),
) -> Result<Array4<f32>> {
    let [b, d, hh, hw] = lp_dims;
    if indices.len() != b * hh * hw {
        return Err(Error::EntropyModel("side-information count mismatch".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= codebook.len()) {
        return Err(Error::CorruptBitstream(format!(
            "codebook index {bad} out of range"
        )));
    }
    let mut lp_hat = Array4::<f32>::zeros((b, d, hh, hw));
    for bi in 0..b {
        for y in 0..hh {
            for x in 0..hw {
                let row = codebook.table.row(indices[(bi * hh + y) * hw + x]);
                for di in 0..d {
                    lp_hat[(bi, di, y, x)] = row[di];
                }
            }
        }
    }
    Ok(forward_values(|tape| {
        let lp = tape.constant(lp_hat.into_dyn());
        nets.hyper_decode(tape, store, lp, out_hw)
    }))
}

/// Run the full encode-side entropy pass (hard rounding).
pub fn entropy_encode(
    nets: &Networks,
    store: &ParamStore,
    y: &Array4<f32>,
) -> Result<EntropyEncodeOut> {
    let dims = [y.dim().0, y.dim().1, y.dim().2, y.dim().3];

    // hyper path
    let lp = forward_values(|tape| {
        let y_node = tape.constant(y.clone().into_dyn());
        nets.hyper_encode(tape, store, y_node)
    });
    let lp_dims = [lp.dim().0, lp.dim().1, lp.dim().2, lp.dim().3];
    let [b, d, hh, hw] = lp_dims;
    let mut vecs = Array2::<f32>::zeros((b * hh * hw, d));
    for bi in 0..b {
        for yy in 0..hh {
            for xx in 0..hw {
                for di in 0..d {
                    vecs[((bi * hh + yy) * hw + xx, di)] = lp[(bi, di, yy, xx)];
                }
            }
        }
    }
    let codebook = Codebook::from_store(store);
    let (indices, _) = vq_nearest(&vecs, &codebook)?;
    let hyper_feats = hyper_features_from_indices(
        nets,
        store,
        &codebook,
        &indices,
        lp_dims,
        (dims[2], dims[3]),
    )?;

    // pass 1 (anchors)
    let zeros = Array4::<f32>::zeros(y.dim());
    let (mu1, sigma1) = context_pass(nets, store, &hyper_feats, &zeros);
    let y_hat1 = quantize_eval(y, &mu1)?;
    let mask: Array4<f32> = anchor_mask::<f32>(dims).into_dimensionality().unwrap();
    let anchors_only = &y_hat1 * &mask;

    // pass 2 (non-anchors see decoded anchors)
    let (mu2, sigma2) = context_pass(nets, store, &hyper_feats, &anchors_only);
    let y_hat2 = quantize_eval(y, &mu2)?;

    let mut y_hat = Array4::<f32>::zeros(y.dim());
    let mut mu = Array4::<f32>::zeros(y.dim());
    let mut sigma = Array4::<f32>::zeros(y.dim());
    ndarray::Zip::indexed(&mut y_hat).for_each(|(bi, ci, yy, xx), o| {
        let a = (yy + xx) % 2 == 0;
        *o = if a {
            y_hat1[(bi, ci, yy, xx)]
        } else {
            y_hat2[(bi, ci, yy, xx)]
        };
        mu[(bi, ci, yy, xx)] = if a {
            mu1[(bi, ci, yy, xx)]
        } else {
            mu2[(bi, ci, yy, xx)]
        };
        sigma[(bi, ci, yy, xx)] = if a {
            sigma1[(bi, ci, yy, xx)]
        } else {
            sigma2[(bi, ci, yy, xx)]
        };
    });
    let params = EntropyParams { mu, sigma };
    let bits_map = rate_map(&y_hat, &params)?;
    Ok(EntropyEncodeOut {
        y_hat,
        vq_indices: indices,
        params,
        bits_map,
    })
}

/// Table used when the modeled support is bypassed: a far-away
/// single-slot support forces every symbol through the escape path
/// (16 raw bits plus the escape cost).
fn raw_table() -> Result<CdfTable> {
    CdfTable::gaussian(0.0, 1.0, i32::MIN / 4, i32::MIN / 4)
}

fn element_table(sigma: f32, raw: bool) -> Result<CdfTable> {
    if raw {
        raw_table()
    } else {
        CdfTable::gaussian(0.0, sigma as f64, SUPPORT_LO, SUPPORT_HI)
    }
}

/// Write the quantized latent into a coded section in coding order.
pub fn encode_latent_section(out: &EntropyEncodeOut, raw: bool) -> Result<Vec<u8>> {
    let dims = out.y_hat.dim();
    let mut enc = SectionEncoder::new();
    for (bi, ci, yy, xx) in coding_order([dims.0, dims.1, dims.2, dims.3]) {
        let m = out.params.mu[(bi, ci, yy, xx)];
        let s = out.params.sigma[(bi, ci, yy, xx)];
        let v = (out.y_hat[(bi, ci, yy, xx)] - m).round() as i32;
        enc.encode(&element_table(s, raw)?, v)?;
    }
    Ok(enc.finish())
}

/// Decode-side entropy pass: reproduces the encode-side parameters
/// bit-exactly from the VQ indices and the coded section.
pub fn entropy_decode(
    nets: &Networks,
    store: &ParamStore,
    vq_indices: &[usize],
    section: &[u8],
    y_dims: [usize; 4],
    raw: bool,
) -> Result<(Array4<f32>, EntropyParams)> {
    let [b, c, h, w] = y_dims;
    let codebook = Codebook::from_store(store);
    let (hh, hw) = hyper_dims(h, w);
    let lp_dims = [b, nets.topo.codebook_dim, hh, hw];
    let hyper_feats =
        hyper_features_from_indices(nets, store, &codebook, vq_indices, lp_dims, (h, w))?;

    let mut dec = SectionDecoder::new(section)?;
    let zeros = Array4::<f32>::zeros((b, c, h, w));
    let (mu1, sigma1) = context_pass(nets, store, &hyper_feats, &zeros);

    let order = coding_order(y_dims);
    let n_anchor = order.iter().filter(|(_, _, y, x)| (y + x) % 2 == 0).count();

    let mut y_hat = Array4::<f32>::zeros((b, c, h, w));
    for &(bi, ci, yy, xx) in order.iter().take(n_anchor) {
        let s = sigma1[(bi, ci, yy, xx)];
        let v = dec.decode(&element_table(s, raw)?)?;
        y_hat[(bi, ci, yy, xx)] = mu1[(bi, ci, yy, xx)] + v as f32;
    }

    let mask: Array4<f32> = anchor_mask::<f32>(y_dims).into_dimensionality().unwrap();
    let anchors_only = &y_hat * &mask;
    let (mu2, sigma2) = context_pass(nets, store, &hyper_feats, &anchors_only);
    for &(bi, ci, yy, xx) in order.iter().skip(n_anchor) {
        let s = sigma2[(bi, ci, yy, xx)];
        let v = dec.decode(&element_table(s, raw)?)?;
        y_hat[(bi, ci, yy, xx)] = mu2[(bi, ci, yy, xx)] + v as f32;
    }
    dec.finish()?;

    let mut mu = Array4::<f32>::zeros((b, c, h, w));
    let mut sigma = Array4::<f32>::zeros((b, c, h, w));
    ndarray::Zip::indexed(&mut mu).for_each(|(bi, ci, yy, xx), o| {
        let a = (yy + xx) % 2 == 0;
        *o = if a {
            mu1[(bi, ci, yy, xx)]
        } else {
            mu2[(bi, ci, yy, xx)]
        };
        sigma[(bi, ci, yy, xx)] = if a {
            sigma1[(bi, ci, yy, xx)]
        } else {
            sigma2[(bi, ci, yy, xx)]
        };
    });
    Ok((y_hat, EntropyParams { mu, sigma }))
}
