//! The user-facing codec: bitstream format, compression and
//! decompression.
//!
//! Bitstream layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RDEI"
//! 4       2     format version (1)
//! 6       1     flags (bit 0: raw/escape-only coding,
//!                      bit 1: pure-noise start mode)
//! 7       4     image width before padding
//! 11      4     image height before padding
//! 15      8     model identifier hash
//! 23      4     lambda_r of the producing model (f32, informative)
//! 27      2     default denoising step count L
//! 29      4     lambda_s as 16.16 fixed point (informative, default 1.0)
//! 33      1     VQ index bit-width (ceil(log2(codebook size)))
//! 34      8     decode noise seed
//! 42      4     VQ-index payload length
//! 46      4     quantized-latent payload length
//! 50      4     CRC32 of bytes 0..50
//! 54      ...   VQ-index payload, then latent payload
//! ```
//!
//! Each payload section carries its own trailing CRCs (see [`crate::coder`]),
//! so any single corrupted byte anywhere in the stream is detected.

use ndarray::{Array3, Array4};
use sha2::{Digest, Sha256};

use crate::coder::{self, CdfTable, SectionDecoder, SectionEncoder};
use crate::corpus;
use crate::entropy::{self, EntropyEncodeOut};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Model, StartMode};
use crate::nn::tape::Tape;
use crate::sampler::{self, DenoisePair, ReconstructTiming, StepPlan};

pub const MAGIC: &[u8; 4] = b"RDEI";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 54;

const FLAG_RAW_MODE: u8 = 1;
const FLAG_PURE_NOISE: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct BitstreamHeader {
    pub version: u16,
    pub raw_mode: bool,
    pub pure_noise: bool,
    pub width: u32,
    pub height: u32,
    pub model_hash: u64,
    pub lambda_r: f32,
    pub steps: u16,
    pub lambda_s_fp: u32,
    pub vq_index_bits: u8,
    pub seed: u64,
    pub len_vq: u32,
    pub len_y: u32,
}

impl BitstreamHeader {
    pub fn lambda_s(&self) -> f64 {
        self.lambda_s_fp as f64 / 65536.0
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let mut flags = 0u8;
        if self.raw_mode {
            flags |= FLAG_RAW_MODE;
        }
        if self.pure_noise {
            flags |= FLAG_PURE_NOISE;
        }
        out.push(flags);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        out.extend_from_slice(&self.lambda_r.to_le_bytes());
        out.extend_from_slice(&self.steps.to_le_bytes());
        out.extend_from_slice(&self.lambda_s_fp.to_le_bytes());
        out.push(self.vq_index_bits);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.len_vq.to_le_bytes());
        out.extend_from_slice(&self.len_y.to_le_bytes());
        let crc = coder::crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptBitstream("header truncated".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::CorruptBitstream("bad magic".into()));
        }
        let stored_crc = u32::from_le_bytes(bytes[50..54].try_into().unwrap());
        if coder::crc32(&bytes[..50]) != stored_crc {
            return Err(Error::CorruptBitstream("header checksum failed".into()));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let flags = bytes[6];
        Ok(BitstreamHeader {
            version,
            raw_mode: flags & FLAG_RAW_MODE != 0,
            pure_noise: flags & FLAG_PURE_NOISE != 0,
            width: u32::from_le_bytes(bytes[7..11].try_into().unwrap()),
            height: u32::from_le_bytes(bytes[11..15].try_into().unwrap()),
            model_hash: u64::from_le_bytes(bytes[15..23].try_into().unwrap()),
            lambda_r: f32::from_le_bytes(bytes[23..27].try_into().unwrap()),
            steps: u16::from_le_bytes(bytes[27..29].try_into().unwrap()),
            lambda_s_fp: u32::from_le_bytes(bytes[29..33].try_into().unwrap()),
            vq_index_bits: bytes[33],
            seed: u64::from_le_bytes(bytes[34..42].try_into().unwrap()),
            len_vq: u32::from_le_bytes(bytes[42..46].try_into().unwrap()),
            len_y: u32::from_le_bytes(bytes[46..50].try_into().unwrap()),
        })
    }
}

/// Reflect-pad an image on the right/bottom to multiples of `factor`.
pub fn pad_reflect(img: &Array3<f32>, factor: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let ph = h.div_ceil(factor) * factor;
    let pw = w.div_ceil(factor) * factor;
    if ph == h && pw == w {
        return img.clone();
    }
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else {
            n - 2 - (i - n).min(n - 2)
        }
    };
    Array3::from_shape_fn((c, ph, pw), |(ci, y, x)| img[(ci, reflect(y, h), reflect(x, w))])
}

pub fn crop(img: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    img.slice(ndarray::s![.., ..h, ..w]).to_owned()
}

fn image_tensor(img: &Array3<f32>) -> Array4<f32> {
    let (c, h, w) = img.dim();
    img.clone()
        .into_shape_with_order((1, c, h, w))
        .expect("batch axis")
}

fn tensor_image(t: &Array4<f32>) -> Array3<f32> {
    let (b, c, h, w) = t.dim();
    debug_assert_eq!(b, 1);
    t.clone()
        .into_shape_with_order((c, h, w))
        .expect("drop batch axis")
}

/// Forward the frozen encoder and analysis transform (values only).
pub fn image_to_latents(model: &Model, x: &Array4<f32>) -> (Array4<f32>, Array4<f32>) {
    let nets = model.networks();
    let mut tape = Tape::<f32>::new();
    let xn = tape.constant(x.clone().into_dyn());
    let z0_raw = nets.encode_image(&mut tape, &model.store, xn);
    let z0 = tape.scale(z0_raw, 1.0 / model.meta.latent_scale as f64);
    let y = nets.analysis(&mut tape, &model.store, z0);
    (
        tape.value(z0).clone().into_dimensionality().unwrap(),
        tape.value(y).clone().into_dimensionality().unwrap(),
    )
}

/// Decode `y_hat` to condition features and compressed latent.
pub fn synthesize(model: &Model, y_hat: &Array4<f32>) -> (Array4<f32>, Array4<f32>) {
    let nets = model.networks();
    let mut tape = Tape::<f32>::new();
    let yn = tape.constant(y_hat.clone().into_dyn());
    let (c, z_c) = nets.synthesis(&mut tape, &model.store, yn);
    (
        tape.value(c).clone().into_dimensionality().unwrap(),
        tape.value(z_c).clone().into_dimensionality().unwrap(),
    )
}

/// Denoiser pair backed by a trained model.
pub struct ModelDenoisers<'a> {
    pub model: &'a Model,
}

impl<'a> DenoisePair<f32> for ModelDenoisers<'a> {
    fn cond(&self, z_n: &Array4<f32>, c: &Array4<f32>, n: usize) -> Result<Array4<f32>> {
        let nets = self.model.networks();
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(z_n.clone().into_dyn());
        let cn = tape.constant(c.clone().into_dyn());
        let out = nets.denoise(&mut tape, &self.model.store, z, Some(cn), n);
        Ok(tape.value(out).clone().into_dimensionality().unwrap())
    }

    fn base(&self, z_n: &Array4<f32>, n: usize) -> Result<Array4<f32>> {
        let nets = self.model.networks();
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(z_n.clone().into_dyn());
        let out = nets.denoise(&mut tape, &self.model.store, z, None, n);
        Ok(tape.value(out).clone().into_dimensionality().unwrap())
    }
}

/// Run the denoising loop and the frozen decoder: `y_hat` to image
/// tensor. Returns the reconstruction and the denoising timing.
pub fn latents_to_image(
    model: &Model,
    y_hat: &Array4<f32>,
    steps: usize,
    lambda_s: f64,
    seed: u64,
) -> Result<(Array4<f32>, ReconstructTiming)> {
    let (schedule, weights) = model.relay_weights()?;
    let plan = sampler::spaced_steps(weights.horizon(), steps)?;
    let (c, z_c) = synthesize(model, y_hat);
    let denoisers = ModelDenoisers { model };
    let mut timing = ReconstructTiming::default();
    let z0_hat = match model.meta.start_mode {
        StartMode::Relay => sampler::reconstruct(
            &z_c,
            &c,
            &plan,
            lambda_s,
            seed,
            &schedule,
            &weights,
            &denoisers,
            Some(&mut timing),
        )?,
        StartMode::PureNoise => reconstruct_from_pure_noise(
            &c,
            model.meta.topology.latent_channels,
            &plan,
            lambda_s,
            seed,
            &schedule,
            &weights,
            &denoisers,
            Some(&mut timing),
        )?,
    };
    let nets = model.networks();
    let mut tape = Tape::<f32>::new();
    let zn = tape.constant(z0_hat.into_dyn());
    let zs = tape.scale(zn, model.meta.latent_scale as f64);
    let img = nets.decode_latent(&mut tape, &model.store, zs);
    Ok((
        tape.value(img).clone().into_dimensionality().unwrap(),
        timing,
    ))
}

/// Baseline loop for the ablation: identical reverse mathematics, but the
/// trajectory starts from pure noise over the full schedule.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_from_pure_noise(
    c: &Array4<f32>,
    latent_channels: usize,
    plan: &StepPlan,
    lambda_s: f64,
    seed: u64,
    schedule: &crate::schedule::NoiseSchedule,
    weights: &crate::schedule::RelayWeights,
    denoisers: &dyn DenoisePair<f32>,
    mut timing: Option<&mut ReconstructTiming>,
) -> Result<Array4<f32>> {
    let n_start = plan.steps()[0];
    if n_start != weights.horizon() {
        return Err(Error::InvalidArgument(
            "plan must start at the schedule horizon".into(),
        ));
    }
    let mut rng = crate::rng::seeded(seed);
    let dims = c.shape();
    let zdims = [dims[0], latent_channels, dims[2], dims[3]];
    let mut z: Array4<f32> = crate::rng::normal_tensor::<f32>(&mut rng, &zdims)
        .into_dimensionality()
        .unwrap();
    let mut per_step = Vec::with_capacity(plan.len());
    let mut pred = None;
    for (i, &n) in plan.steps().iter().enumerate() {
        let t0 = std::time::Instant::now();
        let eps = if lambda_s == 1.0 {
            denoisers.cond(&z, c, n)?
        } else {
            let b = denoisers.base(&z, n)?;
            let cn = denoisers.cond(&z, c, n)?;
            sampler::cfg_blend(&b, &cn, lambda_s)?
        };
        let p = sampler::predict_z0(&z, &eps, n, schedule)?;
        if i + 1 < plan.len() {
            let coeffs =
                sampler::reverse_coefficients(n, plan.steps()[i + 1], schedule, weights)?;
            z = sampler::reverse_step(&z, &p, &coeffs, None)?;
        }
        per_step.push(t0.elapsed().as_secs_f64());
        pred = Some(p);
    }
    if let Some(t) = timing.as_deref_mut() {
        t.per_step_seconds = per_step;
    }
    Ok(pred.expect("non-empty plan"))
}

/// Coded width of one codebook index under the uniform model.
pub fn vq_index_bits(codebook_size: usize) -> u8 {
    (usize::BITS - (codebook_size - 1).leading_zeros()) as u8
}

/// Deterministic decode seed derived from the input and the model.
fn derive_seed(image_bytes: &[u8], model_hash: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(image_bytes);
    hasher.update(model_hash.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone)]
pub struct CompressOptions {
    /// Code the latent through the escape path only (16 raw bits per
    /// symbol); exists to demonstrate the value of the learned model.
    pub raw_mode: bool,
    /// Default step count written into the header.
    pub steps: usize,
    /// Informative default guidance scale written into the header.
    pub lambda_s: f64,
    /// Decode noise seed override; derived from content when `None`.
    pub seed: Option<u64>,
}

impl Default for CompressOptions {
    fn default() -> Self {
        CompressOptions {
            raw_mode: false,
            steps: 2,
            lambda_s: 1.0,
            seed: None,
        }
    }
}

/// Everything compress produces besides the bytes, for diagnostics.
pub struct CompressInfo {
    pub header: BitstreamHeader,
    pub entropy: EntropyEncodeOut,
    pub estimated_bits: f64,
}

pub fn compress(model: &Model, img: &Array3<f32>, opts: &CompressOptions) -> Result<(Vec<u8>, CompressInfo)> {
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::Image("non-finite input image".into()));
    }
    let topo = &model.meta.topology;
    let (_, h, w) = img.dim();
    if h < 2 || w < 2 {
        return Err(Error::Image("image too small".into()));
    }
    let padded = pad_reflect(img, topo.factor);
    let x = image_tensor(&padded);
    let (_z0, y) = image_to_latents(model, &x);
    let nets = model.networks();
    let ent = entropy::entropy_encode(&nets, &model.store, &y)?;

    // section 1: codebook indices under a uniform model
    let table = CdfTable::uniform(topo.codebook_size)?;
    let mut enc = SectionEncoder::new();
    for &i in &ent.vq_indices {
        enc.encode(&table, i as i32)?;
    }
    let vq_section = enc.finish();

    // section 2: quantized latent
    let y_section = entropy::encode_latent_section(&ent, opts.raw_mode)?;

    let model_hash = model.identity_hash()?;
    let seed = opts
        .seed
        .unwrap_or_else(|| derive_seed(&corpus::to_u8(img), model_hash));
    let header = BitstreamHeader {
        version: VERSION,
        raw_mode: opts.raw_mode,
        pure_noise: model.meta.start_mode == StartMode::PureNoise,
        width: w as u32,
        height: h as u32,
        model_hash,
        lambda_r: model.meta.lambda_r as f32,
        steps: opts.steps as u16,
        lambda_s_fp: (opts.lambda_s * 65536.0).round() as u32,
        vq_index_bits: vq_index_bits(topo.codebook_size),
        seed,
        len_vq: vq_section.len() as u32,
        len_y: y_section.len() as u32,
    };
    let mut bytes = header.to_bytes();
    bytes.extend_from_slice(&vq_section);
    bytes.extend_from_slice(&y_section);
    let estimated_bits = ent.bits_map.iter().sum::<f64>()
        + ent.vq_indices.len() as f64 * (topo.codebook_size as f64).log2();
    Ok((
        bytes,
        CompressInfo {
            header,
            entropy: ent,
            estimated_bits,
        },
    ))
}

#[derive(Debug, Clone, Default)]
pub struct DecompressOptions {
    pub steps: Option<usize>,
    pub lambda_s: Option<f64>,
}

/// Decode side: returns the image plus the header and denoise timing.
pub struct DecompressInfo {
    pub header: BitstreamHeader,
    pub timing: ReconstructTiming,
    pub y_hat: Array4<f32>,
}

pub fn decompress(
    model: &Model,
    bytes: &[u8],
    opts: &DecompressOptions,
) -> Result<(Array3<f32>, DecompressInfo)> {
    let header = BitstreamHeader::from_bytes(bytes)?;
    if header.model_hash != model.identity_hash()? {
        return Err(Error::ModelHashMismatch);
    }
    let expect_pure = model.meta.start_mode == StartMode::PureNoise;
    if header.pure_noise != expect_pure {
        return Err(Error::CorruptBitstream(
            "start-mode flag does not match the model".into(),
        ));
    }
    let topo = &model.meta.topology;
    let (w, h) = (header.width as usize, header.height as usize);
    let ph = h.div_ceil(topo.factor) * topo.factor;
    let pw = w.div_ceil(topo.factor) * topo.factor;
    if !(h <= ph && ph < h + topo.factor && w <= pw && pw < w + topo.factor) {
        return Err(Error::CorruptBitstream("inconsistent dimensions".into()));
    }
    let body = &bytes[HEADER_LEN..];
    let len_vq = header.len_vq as usize;
    let len_y = header.len_y as usize;
    if body.len() != len_vq + len_y {
        return Err(Error::CorruptBitstream("section lengths disagree".into()));
    }
    let (vq_section, y_section) = body.split_at(len_vq);

    if header.vq_index_bits != vq_index_bits(topo.codebook_size) {
        return Err(Error::CorruptBitstream(
            "side-information index width does not match the model".into(),
        ));
    }

    // section 1: indices
    let table = CdfTable::uniform(topo.codebook_size)?;
    let mut dec = SectionDecoder::new(vq_section)?;
    let ydims = [1, topo.y_channels, ph / topo.factor, pw / topo.factor];
    let (hh, hw) = entropy::hyper_dims(ydims[2], ydims[3]);
    let n_vq = hh * hw;
    let mut indices = Vec::with_capacity(n_vq);
    for _ in 0..n_vq {
        let v = dec.decode(&table)?;
        if v < 0 || v as usize >= topo.codebook_size {
            return Err(Error::CorruptBitstream("codebook index out of range".into()));
        }
        indices.push(v as usize);
    }
    dec.finish()?;

    // section 2: quantized latent
    let nets = model.networks();
    let (y_hat, _) = entropy::entropy_decode(
        &nets,
        &model.store,
        &indices,
        y_section,
        ydims,
        header.raw_mode,
    )?;

    let steps = opts.steps.unwrap_or(header.steps as usize);
    let (_, weights) = model.relay_weights()?;
    if steps == 0 || steps > weights.horizon() {
        return Err(Error::InvalidArgument(format!(
            "override L = {steps} outside [1, {}]",
            weights.horizon()
        )));
    }
    let lambda_s = opts.lambda_s.unwrap_or(header.lambda_s());
    let (img_t, timing) = latents_to_image(model, &y_hat, steps, lambda_s, header.seed)?;
    let img = crop(&tensor_image(&img_t), h, w);
    Ok((
        img,
        DecompressInfo {
            header,
            timing,
            y_hat,
        },
    ))
}

/// In-memory reconstruction without entropy coding (identical output to
/// compress+decompress, since coding is lossless): used by training-side
/// held-out evaluation where only the reconstruction matters.
pub fn reconstruct_image(
    model: &Model,
    img: &Array3<f32>,
    steps: usize,
    lambda_s: f64,
    seed: u64,
) -> Result<Array3<f32>> {
    let topo = &model.meta.topology;
    let (_, h, w) = img.dim();
    let padded = pad_reflect(img, topo.factor);
    let x = image_tensor(&padded);
    let (_z0, y) = image_to_latents(model, &x);
    let nets = model.networks();
    let ent = entropy::entropy_encode(&nets, &model.store, &y)?;
    let (out, _) = latents_to_image(model, &ent.y_hat, steps, lambda_s, seed)?;
    Ok(crop(&tensor_image(&out), h, w))
}
