//! Neural material: latent pyramid, learned shading frames, BRDF decoder
//! with optional albedo head, and the sampler decoder feeding the analytic
//! proxy. Also the single-file archive format.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{build_frame, Frame, Spectrum, Vec3};
use crate::latent::{LatentError, LatentPyramid, LatentQuery, LATENT_CHANNELS};
use crate::mlp::{Activation, Mlp, MlpError, QuantizedMlp};
use crate::proxy::{Proxy, ProxyParams, RAW_PARAMS, RAW_PARAMS_ISOTROPIC};

pub const MAX_FRAMES: usize = 4;

const ARCHIVE_MAGIC: &[u8; 4] = b"NMAT";
const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("bad architecture string {0:?} (expected e.g. \"2x32\")")]
    Arch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed archive: {0}")]
    Archive(String),
    #[error("material has no latent texture")]
    NoLatent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    /// Directions are transformed into the learned frames.
    Learned,
    /// Ablation: the frame layer's outputs are appended to the raw directions.
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Full,
    /// Ablation: centered isotropic GGX plus a diffuse weight.
    Isotropic,
}

impl SamplerKind {
    pub fn raw_outputs(self) -> usize {
        match self {
            SamplerKind::Full => RAW_PARAMS,
            SamplerKind::Isotropic => RAW_PARAMS_ISOTROPIC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralConfig {
    pub brdf_arch: String,
    pub sampler_arch: String,
    pub encoder_arch: String,
    pub frames: usize,
    pub albedo_head: bool,
    pub frame_mode: FrameMode,
    pub sampler_kind: SamplerKind,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            brdf_arch: "2x32".into(),
            sampler_arch: "3x32".into(),
            encoder_arch: "3x32".into(),
            frames: 2,
            albedo_head: false,
            frame_mode: FrameMode::Learned,
            sampler_kind: SamplerKind::Full,
        }
    }
}

/// Parses `"LxW"` into `L` hidden layers of width `W`.
pub fn parse_arch(s: &str) -> Result<Vec<usize>, NeuralError> {
    let err = || NeuralError::Arch(s.to_string());
    let (l, w) = s.split_once('x').ok_or_else(err)?;
    let l: usize = l.trim().parse().map_err(|_| err())?;
    let w: usize = w.trim().parse().map_err(|_| err())?;
    if l == 0 || l > 8 || w == 0 || w > crate::mlp::FUSED_MAX_WIDTH {
        return Err(err());
    }
    Ok(vec![w; l])
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        parse_arch(&self.brdf_arch)?;
        parse_arch(&self.sampler_arch)?;
        parse_arch(&self.encoder_arch)?;
        if self.frames == 0 || self.frames > MAX_FRAMES {
            return Err(NeuralError::Config(format!("frames must be in 1..={MAX_FRAMES}")));
        }
        Ok(())
    }

    pub fn frame_outputs(&self) -> usize {
        6 * self.frames
    }

    pub fn brdf_input_dim(&self) -> usize {
        match self.frame_mode {
            FrameMode::Learned => LATENT_CHANNELS + 6 * self.frames,
            FrameMode::Vanilla => LATENT_CHANNELS + 6 + 6 * self.frames,
        }
    }

    pub fn brdf_output_dim(&self) -> usize {
        if self.albedo_head {
            6
        } else {
            3
        }
    }
}

/// Shading frames extracted from a latent code. Rows of the combined
/// matrix are `t_k, b_k, n_k` for each frame `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSet {
    pub frames: [Frame; MAX_FRAMES],
    pub count: usize,
}

/// Normalized vector, or `fallback` when the input has (near) zero length.
fn normalize_or(v: Vec3, fallback: Vec3) -> Vec3 {
    let l = v.length();
    if l > 1e-12 {
        v / l
    } else {
        fallback
    }
}

fn fallback_tangent(n: Vec3) -> Vec3 {
    let a = n.abs();
    let e = if a.x <= a.y && a.x <= a.z {
        Vec3::X
    } else if a.y <= a.z {
        Vec3::Y
    } else {
        Vec3::Z
    };
    n.cross(e).normalize()
}

#[inline]
fn v3(s: &[f32]) -> Vec3 {
    Vec3::new(s[0] as f64, s[1] as f64, s[2] as f64)
}

impl FrameSet {
    /// Frames from the frame layer's output, laid out per frame as the raw
    /// normal followed by the raw tangent.
    pub fn from_raw(raw: &[f32]) -> Self {
        let count = (raw.len() / 6).min(MAX_FRAMES);
        let mut frames = [Frame::CANONICAL; MAX_FRAMES];
        for (k, f) in frames.iter_mut().enumerate().take(count) {
            let n = normalize_or(v3(&raw[6 * k..]), Vec3::Z);
            let t = v3(&raw[6 * k + 3..]);
            *f = build_frame(n, t).unwrap_or_else(|_| {
                build_frame(n, fallback_tangent(n)).expect("fallback tangent is orthogonal to n")
            });
        }
        Self { frames, count }
    }

    /// `T w`: `3 * count` values.
    #[inline]
    pub fn transform(&self, w: Vec3, out: &mut [f32]) {
        for (k, f) in self.frames[..self.count].iter().enumerate() {
            out[3 * k] = f.t.dot(w) as f32;
            out[3 * k + 1] = f.b.dot(w) as f32;
            out[3 * k + 2] = f.n.dot(w) as f32;
        }
    }

    /// Rows of the combined `3N x 3` matrix.
    pub fn matrix(&self) -> Vec<Vec3> {
        self.frames[..self.count]
            .iter()
            .flat_map(|f| [f.t, f.b, f.n])
            .collect()
    }
}

/// Gradient of `T w_i` and `T w_o` with respect to the raw frame-layer
/// outputs. `g_i`, `g_o` are the loss gradients for the two transformed
/// direction blocks; the result is *written* into `g_raw`.
pub fn frames_backward(raw: &[f32], wi: Vec3, wo: Vec3, g_i: &[f32], g_o: &[f32], g_raw: &mut [f32]) {
    let count = raw.len() / 6;
    for k in 0..count {
        let nr = v3(&raw[6 * k..]);
        let tr = v3(&raw[6 * k + 3..]);
        let gi = v3(&g_i[3 * k..]);
        let go = v3(&g_o[3 * k..]);
        let g_t = wi * gi.x + wo * go.x;
        let g_b = wi * gi.y + wo * go.y;
        let g_n = wi * gi.z + wo * go.z;
        let nl = nr.length();
        let out = &mut g_raw[6 * k..6 * k + 6];
        if nl <= 1e-12 {
            out.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let n = nr / nl;
        let tl = tr.length();
        let c = if tl > 0.0 { n.cross(tr / tl) } else { Vec3::ZERO };
        let cl = c.length();
        let (mut g_nhat, g_that);
        if tl > 0.0 && cl * tl > 1e-8 {
            let t = tr / tl;
            let b = c / cl;
            let g_c = (g_b - b * b.dot(g_b)) / cl;
            g_nhat = g_n + t.cross(g_c);
            let gt = g_t + g_c.cross(n);
            g_that = (gt - t * t.dot(gt)) / tl;
        } else {
            // fallback tangent: no dependence on the raw tangent is tracked
            g_nhat = g_n;
            g_that = Vec3::ZERO;
        }
        g_nhat = (g_nhat - n * n.dot(g_nhat)) / nl;
        for i in 0..3 {
            out[i] = g_nhat[i] as f32;
            out[3 + i] = g_that[i] as f32;
        }
    }
}

/// BRDF output map `max(exp(y) - 1, 0)`.
#[inline]
pub fn brdf_activation(y: f32) -> f32 {
    (y.exp() - 1.0).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Per-layer FP32 reference path on the master parameters.
    Fp32,
    /// FP16 weights and latents through the packed fused kernel.
    Fp16Fused,
}

#[derive(Debug, Clone, PartialEq)]
struct QuantizedSet {
    frame: QuantizedMlp,
    brdf: QuantizedMlp,
    sampler: QuantizedMlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralMaterial {
    pub config: NeuralConfig,
    /// Present only during the first training phase.
    pub encoder: Option<Mlp>,
    pub frame_layer: Mlp,
    pub brdf: Mlp,
    pub sampler: Mlp,
    pub latent: Option<LatentPyramid>,
    quantized: Option<QuantizedSet>,
}

/// Per-shading-point state: latent code, its frames, and the cached part of
/// the decoder input.
#[derive(Debug, Clone, Copy)]
pub struct NeuralHit {
    pub z: [f32; LATENT_CHANNELS],
    pub level: usize,
    raw: [f32; 6 * MAX_FRAMES],
    pub frames: FrameSet,
}

fn dims_with(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

impl NeuralMaterial {
    /// Freshly initialized networks. `param_dim` is the encoder input width;
    /// frames start close to the canonical frame.
    pub fn new<R: Rng + ?Sized>(config: NeuralConfig, param_dim: usize, rng: &mut R) -> Result<Self, NeuralError> {
        config.validate()?;
        let enc_dims = dims_with(param_dim, &parse_arch(&config.encoder_arch)?, LATENT_CHANNELS);
        let encoder = Mlp::new(&enc_dims, Activation::LeakyRelu, Activation::Linear, rng)?;
        let mut frame_layer = Mlp::new(
            &[LATENT_CHANNELS, config.frame_outputs()],
            Activation::Linear,
            Activation::Linear,
            rng,
        )?;
        {
            let (w, b) = frame_layer.layer_params_mut(0);
            w.iter_mut().for_each(|v| *v *= 0.1);
            for k in 0..config.frames {
                b[6 * k + 2] = 1.0;
                b[6 * k + 3] = 1.0;
            }
        }
        let brdf_dims = dims_with(
            config.brdf_input_dim(),
            &parse_arch(&config.brdf_arch)?,
            config.brdf_output_dim(),
        );
        let mut brdf = Mlp::new(&brdf_dims, Activation::LeakyRelu, Activation::Linear, rng)?;
        let last = brdf.num_layers() - 1;
        brdf.layer_params_mut(last).0.iter_mut().for_each(|v| *v *= 0.1);
        let sampler_dims = dims_with(
            LATENT_CHANNELS + 3,
            &parse_arch(&config.sampler_arch)?,
            config.sampler_kind.raw_outputs(),
        );
        let mut sampler = Mlp::new(&sampler_dims, Activation::LeakyRelu, Activation::Linear, rng)?;
        let last = sampler.num_layers() - 1;
        sampler.layer_params_mut(last).0.iter_mut().for_each(|v| *v *= 0.1);
        Ok(Self {
            config,
            encoder: Some(encoder),
            frame_layer,
            brdf,
            sampler,
            latent: None,
            quantized: None,
        })
    }

    /// Replaces the sampler decoder by a fresh one of the given kind.
    pub fn reset_sampler<R: Rng + ?Sized>(&mut self, kind: SamplerKind, rng: &mut R) -> Result<(), NeuralError> {
        self.config.sampler_kind = kind;
        let dims = dims_with(LATENT_CHANNELS + 3, &parse_arch(&self.config.sampler_arch)?, kind.raw_outputs());
        let mut sampler = Mlp::new(&dims, Activation::LeakyRelu, Activation::Linear, rng)?;
        let last = sampler.num_layers() - 1;
        sampler.layer_params_mut(last).0.iter_mut().for_each(|v| *v *= 0.1);
        self.sampler = sampler;
        self.quantized = None;
        Ok(())
    }

    pub fn extract_frames(&self, z: &[f32]) -> FrameSet {
        let raw = self.frame_layer.forward(z).expect("latent code has 8 channels");
        FrameSet::from_raw(&raw)
    }

    /// Builds the BRDF decoder input for one sample.
    pub fn decoder_input(&self, z: &[f32], raw: &[f32], frames: &FrameSet, wi: Vec3, wo: Vec3, out: &mut [f32]) {
        out[..LATENT_CHANNELS].copy_from_slice(&z[..LATENT_CHANNELS]);
        match self.config.frame_mode {
            FrameMode::Learned => {
                let k = 3 * frames.count;
                frames.transform(wi, &mut out[LATENT_CHANNELS..LATENT_CHANNELS + k]);
                frames.transform(wo, &mut out[LATENT_CHANNELS + k..LATENT_CHANNELS + 2 * k]);
            }
            FrameMode::Vanilla => {
                let o = &mut out[LATENT_CHANNELS..];
                for i in 0..3 {
                    o[i] = wi[i] as f32;
                    o[3 + i] = wo[i] as f32;
                }
                o[6..6 + raw.len()].copy_from_slice(raw);
            }
        }
    }

    /// Maps decoder outputs to (BRDF, albedo).
    pub fn map_outputs(&self, y: &[f32]) -> (Spectrum, Option<Spectrum>) {
        let f = Spectrum::new(
            brdf_activation(y[0]) as f64,
            brdf_activation(y[1]) as f64,
            brdf_activation(y[2]) as f64,
        );
        let a = self
            .config
            .albedo_head
            .then(|| Spectrum::new(y[3].max(0.0) as f64, y[4].max(0.0) as f64, y[5].max(0.0) as f64));
        (f, a)
    }

    /// Prepares a shading point: fetches the latent code (FP16 copy for the
    /// fused precision) and extracts the frames.
    pub fn prepare(&self, q: LatentQuery, u_rr: f64, precision: Precision) -> Result<NeuralHit, NeuralError> {
        let lat = self.latent.as_ref().ok_or(NeuralError::NoLatent)?;
        let (z, level) = match precision {
            Precision::Fp32 => lat.fetch(q, u_rr),
            Precision::Fp16Fused => lat.fetch_render(q, u_rr),
        };
        Ok(self.prepare_z(z, level, precision))
    }

    pub fn prepare_z(&self, z: [f32; LATENT_CHANNELS], level: usize, precision: Precision) -> NeuralHit {
        let mut raw = [0f32; 6 * MAX_FRAMES];
        let n = self.config.frame_outputs();
        match (precision, &self.quantized) {
            (Precision::Fp16Fused, Some(q)) => q.frame.fused_forward(&z, &mut raw[..n]).expect("frame layer shape"),
            _ => raw[..n].copy_from_slice(&self.frame_layer.forward(&z).expect("frame layer shape")),
        }
        NeuralHit {
            z,
            level,
            raw,
            frames: FrameSet::from_raw(&raw[..n]),
        }
    }

    /// BRDF (and albedo) at a prepared shading point. Below-horizon pairs
    /// return zero.
    pub fn eval_hit(&self, hit: &NeuralHit, wi: Vec3, wo: Vec3, precision: Precision) -> (Spectrum, Option<Spectrum>) {
        if wi.z <= 0.0 || wo.z <= 0.0 {
            return (Spectrum::ZERO, self.config.albedo_head.then_some(Spectrum::ZERO));
        }
        let mut input = [0f32; LATENT_CHANNELS + 6 + 6 * MAX_FRAMES];
        let din = self.config.brdf_input_dim();
        let n = self.config.frame_outputs();
        self.decoder_input(&hit.z, &hit.raw[..n], &hit.frames, wi, wo, &mut input[..din]);
        let mut y = [0f32; 6];
        let dout = self.config.brdf_output_dim();
        match (precision, &self.quantized) {
            (Precision::Fp16Fused, Some(q)) => q.brdf.fused_forward(&input[..din], &mut y[..dout]).expect("decoder shape"),
            _ => y[..dout].copy_from_slice(&self.brdf.forward(&input[..din]).expect("decoder shape")),
        }
        self.map_outputs(&y[..dout])
    }

    /// Evaluates the material through the latent texture.
    pub fn eval(&self, q: LatentQuery, wi: Vec3, wo: Vec3, u_rr: f64) -> Result<(Spectrum, Option<Spectrum>), NeuralError> {
        let hit = self.prepare(q, u_rr, Precision::Fp32)?;
        Ok(self.eval_hit(&hit, wi, wo, Precision::Fp32))
    }

    /// Evaluates with an explicit latent code.
    pub fn eval_z(&self, z: &[f32; LATENT_CHANNELS], wi: Vec3, wo: Vec3) -> (Spectrum, Option<Spectrum>) {
        let hit = self.prepare_z(*z, 0, Precision::Fp32);
        self.eval_hit(&hit, wi, wo, Precision::Fp32)
    }

    /// Raw sampler outputs mapped through the proxy activations.
    pub fn proxy_from_raw(&self, raw: &[f32]) -> ProxyParams {
        match self.config.sampler_kind {
            SamplerKind::Full => Proxy::from_raw(std::array::from_fn(|i| raw[i] as f64)),
            SamplerKind::Isotropic => Proxy::isotropic_from_raw([raw[0] as f64, raw[1] as f64]),
        }
    }

    pub fn infer_proxy(&self, z: &[f32], wi: Vec3, precision: Precision) -> ProxyParams {
        let mut input = [0f32; LATENT_CHANNELS + 3];
        input[..LATENT_CHANNELS].copy_from_slice(&z[..LATENT_CHANNELS]);
        for i in 0..3 {
            input[LATENT_CHANNELS + i] = wi[i] as f32;
        }
        let mut raw = [0f32; RAW_PARAMS];
        let n = self.config.sampler_kind.raw_outputs();
        match (precision, &self.quantized) {
            (Precision::Fp16Fused, Some(q)) => q.sampler.fused_forward(&input, &mut raw[..n]).expect("sampler shape"),
            _ => raw[..n].copy_from_slice(&self.sampler.forward(&input).expect("sampler shape")),
        }
        self.proxy_from_raw(&raw[..n])
    }

    /// Builds FP16 copies of all decoders and the latent render copy.
    /// Returns the total number of clamped values.
    pub fn quantize(&mut self) -> usize {
        let q = QuantizedSet {
            frame: self.frame_layer.quantize(),
            brdf: self.brdf.quantize(),
            sampler: self.sampler.quantize(),
        };
        let mut clamped = q.frame.clamp_count() + q.brdf.clamp_count() + q.sampler.clamp_count();
        self.quantized = Some(q);
        if let Some(l) = self.latent.as_mut() {
            clamped += l.quantize();
        }
        clamped
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized.is_some()
    }

    pub fn quantized_brdf(&self) -> Option<&QuantizedMlp> {
        self.quantized.as_ref().map(|q| &q.brdf)
    }

    /// Drops cached FP16 copies after the master parameters changed.
    pub fn invalidate(&mut self) {
        self.quantized = None;
    }

    // --- archive ---------------------------------------------------------

    /// Archive layout: magic `NMAT`, version, JSON metadata length and
    /// bytes, then length-prefixed sections (frame layer, BRDF decoder,
    /// sampler decoder, optional encoder, optional latent file).
    pub fn to_archive(&self) -> Vec<u8> {
        let meta = ArchiveMeta {
            channels: LATENT_CHANNELS,
            frames: self.config.frames,
            config: self.config.clone(),
            frame_arch: self.frame_layer.arch_string(),
            brdf_arch: self.brdf.arch_string(),
            sampler_arch: self.sampler.arch_string(),
            has_encoder: self.encoder.is_some(),
            latent: self.latent.as_ref().map(|l| LatentMeta {
                width: l.width(),
                height: l.height(),
                levels: l.levels(),
            }),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        let section = |out: &mut Vec<u8>, bytes: &[u8]| {
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        };
        section(&mut out, &json);
        section(&mut out, &self.frame_layer.to_blob());
        section(&mut out, &self.brdf.to_blob());
        section(&mut out, &self.sampler.to_blob());
        if let Some(e) = &self.encoder {
            section(&mut out, &e.to_blob());
        }
        if let Some(l) = &self.latent {
            section(&mut out, &l.to_bytes(true));
        }
        out
    }

    pub fn from_archive(bytes: &[u8]) -> Result<Self, NeuralError> {
        let bad = |m: &str| NeuralError::Archive(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(bad("bad magic"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != ARCHIVE_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut rest = &bytes[8..];
        let mut next = || -> Result<&[u8], NeuralError> {
            if rest.len() < 8 {
                return Err(bad("truncated section header"));
            }
            let n = u64::from_le_bytes(rest[..8].try_into().unwrap());
            if n > (rest.len() - 8) as u64 {
                return Err(bad("truncated section"));
            }
            let n = n as usize;
            let s = &rest[8..8 + n];
            rest = &rest[8 + n..];
            Ok(s)
        };
        let meta: ArchiveMeta =
            serde_json::from_slice(next()?).map_err(|e| NeuralError::Archive(format!("metadata: {e}")))?;
        meta.config.validate()?;
        if meta.channels != LATENT_CHANNELS || meta.frames != meta.config.frames {
            return Err(bad("inconsistent metadata"));
        }
        let blob = |b: &[u8]| Mlp::read_blob(&mut &b[..]).map(|(m, _)| m);
        let frame_layer = blob(next()?)?;
        let brdf = blob(next()?)?;
        let sampler = blob(next()?)?;
        let encoder = if meta.has_encoder { Some(blob(next()?)?) } else { None };
        let latent = if meta.latent.is_some() {
            Some(LatentPyramid::read(&mut next()?)?)
        } else {
            None
        };
        let c = &meta.config;
        if frame_layer.dims() != [LATENT_CHANNELS, c.frame_outputs()]
            || brdf.input_dim() != c.brdf_input_dim()
            || brdf.output_dim() != c.brdf_output_dim()
            || sampler.input_dim() != LATENT_CHANNELS + 3
            || sampler.output_dim() != c.sampler_kind.raw_outputs()
        {
            return Err(bad("network shapes do not match the metadata"));
        }
        if let (Some(l), Some(m)) = (&latent, &meta.latent) {
            if (l.width(), l.height(), l.levels()) != (m.width, m.height, m.levels) {
                return Err(bad("latent header does not match the metadata"));
            }
        }
        Ok(Self {
            config: meta.config,
            encoder,
            frame_layer,
            brdf,
            sampler,
            latent,
            quantized: None,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NeuralError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_archive(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NeuralError> {
        std::fs::write(path, self.to_archive())?;
        Ok(())
    }

    /// Iterator over every trainable FP32 parameter (for histograms).
    pub fn all_params(&self) -> impl Iterator<Item = f32> + '_ {
        self.frame_layer
            .params()
            .iter()
            .chain(self.brdf.params())
            .chain(self.sampler.params())
            .chain(self.latent.iter().flat_map(|l| l.data()))
            .copied()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LatentMeta {
    width: usize,
    height: usize,
    levels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchiveMeta {
    channels: usize,
    frames: usize,
    config: NeuralConfig,
    frame_arch: String,
    brdf_arch: String,
    sampler_arch: String,
    has_encoder: bool,
    latent: Option<LatentMeta>,
}

/// Summary used by `inspect`: architecture strings and log2-magnitude
/// histograms of parameters and latents.
#[derive(Debug, Clone, Serialize)]
pub struct Inspection {
    pub config: NeuralConfig,
    pub frame_layer: String,
    pub brdf_decoder: String,
    pub sampler_decoder: String,
    pub parameters: usize,
    pub latent: Option<[usize; 3]>,
    /// Counts per bucket `floor(log2 |v|)` from -24 to 16, plus zeros.
    pub param_histogram: Vec<(i32, usize)>,
    pub latent_histogram: Vec<(i32, usize)>,
}

fn log2_histogram(values: impl Iterator<Item = f32>) -> Vec<(i32, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for v in values {
        let k = if v == 0.0 {
            i32::MIN
        } else {
            (v.abs().log2().floor() as i32).clamp(-25, 17)
        };
        *counts.entry(k).or_insert(0usize) += 1;
    }
    counts.into_iter().collect()
}

impl NeuralMaterial {
    pub fn inspect(&self) -> Inspection {
        Inspection {
            config: self.config.clone(),
            frame_layer: self.frame_layer.arch_string(),
            brdf_decoder: self.brdf.arch_string(),
            sampler_decoder: self.sampler.arch_string(),
            parameters: self.frame_layer.num_params() + self.brdf.num_params() + self.sampler.num_params(),
            latent: self.latent.as_ref().map(|l| [l.width(), l.height(), l.levels()]),
            param_histogram: log2_histogram(
                self.frame_layer
                    .params()
                    .iter()
                    .chain(self.brdf.params())
                    .chain(self.sampler.params())
                    .copied(),
            ),
            latent_histogram: log2_histogram(self.latent.iter().flat_map(|l| l.data()).copied()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::seeded_rng;

    fn canonical_material() -> NeuralMaterial {
        let mut rng = seeded_rng(1);
        let mut m = NeuralMaterial::new(NeuralConfig::default(), 4, &mut rng).unwrap();
        let (w, b) = m.frame_layer.layer_params_mut(0);
        w.iter_mut().for_each(|v| *v = 0.0);
        b.copy_from_slice(&[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        m
    }

    #[test]
    fn canonical_frames_pass_directions_through() {
        let m = canonical_material();
        let z = [0.3f32; 8];
        let fs = m.extract_frames(&z);
        let wi = Vec3::new(0.1, 0.2, 0.9).normalize();
        let wo = Vec3::new(-0.5, 0.3, 0.7).normalize();
        let mut input = [0f32; 20];
        m.decoder_input(&z, &[0.0; 12], &fs, wi, wo, &mut input);
        let wi32 = [wi.x as f32, wi.y as f32, wi.z as f32];
        let wo32 = [wo.x as f32, wo.y as f32, wo.z as f32];
        assert_eq!(&input[8..11], &wi32);
        assert_eq!(&input[11..14], &wi32);
        assert_eq!(&input[14..17], &wo32);
        assert_eq!(&input[17..20], &wo32);
    }

    #[test]
    fn raw_normal_is_normalized() {
        let fs = FrameSet::from_raw(&[0.0, 0.0, 2.0, 1.0, 0.0, 0.0]);
        assert_eq!(fs.frames[0].n, Vec3::Z);
        assert_eq!(fs.frames[0].b, Vec3::Y);
    }

    #[test]
    fn degenerate_pair_uses_fallback_tangent() {
        let fs = FrameSet::from_raw(&[0.0, 0.0, 1.0, 0.0, 0.0, 3.0]);
        let f = fs.frames[0];
        assert!(f.t.is_unit() && f.b.is_unit());
        assert!(f.t.dot(f.n).abs() < 1e-12 && f.b.dot(f.n).abs() < 1e-12);
    }

    #[test]
    fn frame_rows_are_unit_and_bitangent_orthogonal() {
        let m = NeuralMaterial::new(NeuralConfig::default(), 4, &mut seeded_rng(2)).unwrap();
        let mut rng = seeded_rng(3);
        for _ in 0..1000 {
            let z: [f32; 8] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            let fs = m.extract_frames(&z);
            for f in &fs.frames[..fs.count] {
                assert!(f.t.is_unit() && f.b.is_unit() && f.n.is_unit());
                assert!(f.b.dot(f.n).abs() < 1e-6 && f.b.dot(f.t).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blocks_are_unit_for_orthogonal_frames() {
        let mut rng = seeded_rng(4);
        for _ in 0..1000 {
            let n = crate::geom::sample_uniform_sphere([rng.gen(), rng.gen()]);
            let t = Frame::from_normal(n).t;
            let raw: Vec<f32> = [n, t].iter().flat_map(|v| v.to_array()).map(|x| x as f32).collect();
            let fs = FrameSet::from_raw(&raw);
            let w = crate::geom::sample_uniform_sphere([rng.gen(), rng.gen()]);
            let mut out = [0f32; 3];
            fs.transform(w, &mut out);
            let len = out.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
            assert!((len - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn frame_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let raw: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wi = crate::geom::sample_uniform_hemisphere([rng.gen(), rng.gen()]);
            let wo = crate::geom::sample_uniform_hemisphere([rng.gen(), rng.gen()]);
            let gi: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let go: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // loss(raw) = <gi, T wi> + <go, T wo>, evaluated in f64
            let loss = |r: &[f64]| {
                let mut s = 0.0;
                for k in 0..2 {
                    let n = Vec3::new(r[6 * k], r[6 * k + 1], r[6 * k + 2]).normalize();
                    let t0 = Vec3::new(r[6 * k + 3], r[6 * k + 4], r[6 * k + 5]);
                    let f = build_frame(n, t0).unwrap();
                    for (w, g) in [(wi, &gi), (wo, &go)] {
                        s += g[3 * k] as f64 * f.t.dot(w) + g[3 * k + 1] as f64 * f.b.dot(w) + g[3 * k + 2] as f64 * f.n.dot(w);
                    }
                }
                s
            };
            let mut g = [0f32; 12];
            frames_backward(&raw, wi, wo, &gi, &go, &mut g);
            let r64: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            for i in 0..12 {
                let h = 1e-6;
                let (mut a, mut b) = (r64.clone(), r64.clone());
                a[i] += h;
                b[i] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - g[i] as f64).abs() < 1e-4 * (1.0 + fd.abs()), "{i}: {fd} {}", g[i]);
            }
        }
    }

    #[test]
    fn zero_preactivation_gives_black() {
        assert_eq!(brdf_activation(0.0), 0.0);
        assert!(brdf_activation(-3.0) == 0.0);
        assert!((brdf_activation(1.0) - (std::f32::consts::E - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn proxy_ranges_hold_for_random_weights() {
        let mut rng = seeded_rng(6);
        for s in 0..10 {
            let mut m = NeuralMaterial::new(NeuralConfig::default(), 4, &mut seeded_rng(s)).unwrap();
            m.sampler.params_mut().iter_mut().for_each(|v| *v *= 5.0);
            for _ in 0..1000 {
                let z: [f32; 8] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
                let wi = crate::geom::sample_uniform_hemisphere([rng.gen(), rng.gen()]);
                let p = m.infer_proxy(&z, wi, Precision::Fp32);
                assert!(p.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
                assert!((-1.0..=1.0).contains(&p.rho));
                assert!((p.w_d + p.w_s - 1.0).abs() < 1e-6 && p.w_d >= 0.0 && p.w_s >= 0.0);
            }
        }
    }

    #[test]
    fn eval_is_deterministic_and_non_negative() {
        let mut rng = seeded_rng(7);
        let mut m = NeuralMaterial::new(NeuralConfig::default(), 4, &mut rng).unwrap();
        let mut lat = LatentPyramid::zeros(8, 8);
        lat.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m.latent = Some(lat);
        let q = LatentQuery { uv: [0.3, 0.6], level: 0.5 };
        let wi = Vec3::new(0.1, 0.1, 0.98).normalize();
        let wo = Vec3::new(-0.4, 0.2, 0.8).normalize();
        let a = m.eval(q, wi, wo, 0.25).unwrap();
        let b = m.eval(q, wi, wo, 0.25).unwrap();
        assert_eq!(a, b);
        assert!(a.0.r >= 0.0 && a.0.g >= 0.0 && a.0.b >= 0.0);
        assert_eq!(m.eval(q, wi, Vec3::new(0.0, 0.6, -0.8), 0.25).unwrap().0, Spectrum::ZERO);
    }

    #[test]
    fn archive_round_trip() {
        let mut rng = seeded_rng(8);
        let cfg = NeuralConfig {
            albedo_head: true,
            ..Default::default()
        };
        let mut m = NeuralMaterial::new(cfg, 6, &mut rng).unwrap();
        let bytes = m.to_archive();
        assert_eq!(NeuralMaterial::from_archive(&bytes).unwrap().to_archive(), bytes);
        m.encoder = None;
        let mut lat = LatentPyramid::zeros(8, 4);
        lat.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m.latent = Some(lat);
        let bytes = m.to_archive();
        let back = NeuralMaterial::from_archive(&bytes).unwrap();
        assert_eq!(back.to_archive(), bytes);
        assert_eq!(back.latent.as_ref().unwrap().data(), m.latent.as_ref().unwrap().data());
        assert!(NeuralMaterial::from_archive(&bytes[..bytes.len() - 10]).is_err());
        assert!(NeuralMaterial::from_archive(b"NOPE").is_err());
    }

    #[test]
    fn fused_eval_tracks_fp32() {
        let mut rng = seeded_rng(9);
        let mut m = NeuralMaterial::new(NeuralConfig::default(), 4, &mut rng).unwrap();
        m.brdf.params_mut().iter_mut().for_each(|v| *v *= 2.0);
        let mut lat = LatentPyramid::zeros(8, 8);
        lat.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m.latent = Some(lat);
        m.quantize();
        for _ in 0..200 {
            let q = LatentQuery { uv: [rng.gen(), rng.gen()], level: 0.0 };
            let wi = crate::geom::sample_uniform_hemisphere([rng.gen(), rng.gen()]);
            let wo = crate::geom::sample_uniform_hemisphere([rng.gen(), rng.gen()]);
            let h32 = m.prepare(q, 0.5, Precision::Fp32).unwrap();
            let h16 = m.prepare(q, 0.5, Precision::Fp16Fused).unwrap();
            let a = m.eval_hit(&h32, wi, wo, Precision::Fp32).0;
            let b = m.eval_hit(&h16, wi, wo, Precision::Fp16Fused).0;
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() <= 2e-2 * x.abs() + 2e-3, "{x} {y}");
            }
        }
    }
}
