//! Training data generation, losses, and the two-phase optimization loop
//! (encoder bootstrap, then direct latent finetuning) with simultaneous
//! sampler training.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::{Dual, Real, V3};
use crate::geom::{sample_half_diff, Spectrum, Vec3};
use crate::latent::{LatentGrads, LatentPyramid, LATENT_CHANNELS};
use crate::mlp::{AdamState, BatchActivations, Mlp};
use crate::neural::{brdf_activation, frames_backward, FrameMode, FrameSet, NeuralError, NeuralMaterial, SamplerKind};
use crate::proxy::{Proxy, RAW_PARAMS, RAW_PARAMS_ISOTROPIC};
use crate::reference::{FilterFootprint, ReferenceMaterial};
use crate::texture::level_sigma;

/// Floor added to the KL target density.
pub const EPS_KL: f64 = 1e-4;
/// Rec.709 luminance weights.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}: brdf {brdf}, kl {kl}, albedo {albedo}")]
    NonFinite {
        iteration: usize,
        brdf: f64,
        kl: f64,
        albedo: f64,
    },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Samples per batch; each iteration draws one BRDF and one sampler batch.
    pub batch_size: usize,
    /// Rate of the truncated exponential level distribution.
    pub level_rate: f64,
    pub mollify_start_deg: f64,
    /// Fraction of the iterations over which the cone decays to zero.
    pub mollify_fraction: f64,
    pub lr: f64,
    pub latent_lr: f64,
    /// Fractions of training at which learning rates are multiplied by `lr_decay_factor`.
    pub lr_decay_at: Vec<f64>,
    pub lr_decay_factor: f64,
    pub phase1_fraction: f64,
    pub seed: u64,
    /// Loss-history window as a fraction of the iterations.
    pub window_fraction: f64,
    pub max_taps: usize,
    pub train_brdf: bool,
    pub train_sampler: bool,
    /// Samples per parallel work item; the reduction order is fixed, so
    /// results do not depend on the thread count.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 4096,
            level_rate: 1.0,
            mollify_start_deg: 5.0,
            mollify_fraction: 0.25,
            lr: 1e-3,
            latent_lr: 1e-3,
            lr_decay_at: vec![0.6, 0.9],
            lr_decay_factor: 0.1,
            phase1_fraction: 0.5,
            seed: 1,
            window_fraction: 0.05,
            max_taps: 64,
            train_brdf: true,
            train_sampler: true,
            chunk_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.chunk_size == 0 || self.max_taps == 0 {
            return bad("batch_size, chunk_size and max_taps must be positive");
        }
        if !(self.phase1_fraction > 0.0 && self.phase1_fraction < 1.0) {
            return bad("phase1_fraction must lie in (0, 1)");
        }
        if !(self.level_rate > 0.0) {
            return bad("level_rate must be positive");
        }
        if !(self.lr >= 0.0 && self.latent_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(self.mollify_start_deg >= 0.0 && self.mollify_start_deg <= 45.0) {
            return bad("mollify_start_deg must lie in [0, 45]");
        }
        if !(self.mollify_fraction > 0.0 && self.mollify_fraction <= 1.0) {
            return bad("mollify_fraction must lie in (0, 1]");
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return bad("window_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    /// Mollification cone half-angle (radians) at `iteration`.
    pub fn cone_angle(&self, iteration: usize) -> f64 {
        let horizon = self.mollify_fraction * self.iterations as f64;
        if horizon <= 0.0 {
            return 0.0;
        }
        let t = 1.0 - iteration as f64 / horizon;
        self.mollify_start_deg.to_radians() * t.max(0.0)
    }

    /// Learning-rate multiplier at `iteration`.
    pub fn lr_scale(&self, iteration: usize) -> f64 {
        let t = iteration as f64 / self.iterations.max(1) as f64;
        self.lr_decay_at
            .iter()
            .filter(|&&d| t >= d)
            .fold(1.0, |s, _| s * self.lr_decay_factor)
    }

    pub fn phase1_iterations(&self) -> usize {
        (self.phase1_fraction * self.iterations as f64).round() as usize
    }

    pub fn window(&self) -> usize {
        ((self.window_fraction * self.iterations as f64).round() as usize).max(1)
    }
}

/// Truncated exponential distribution over integer levels,
/// `P(l) ~ exp(-rate l)` for `l < levels`.
#[derive(Debug, Clone)]
pub struct LevelDistribution {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl LevelDistribution {
    pub fn new(rate: f64, levels: usize) -> Self {
        let w: Vec<f64> = (0..levels).map(|l| (-rate * l as f64).exp()).collect();
        let s: f64 = w.iter().sum();
        let pmf: Vec<f64> = w.iter().map(|x| x / s).collect();
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self { pmf, cdf }
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn sample(&self, u: f64) -> usize {
        self.cdf.iter().position(|&c| u < c).unwrap_or(self.cdf.len() - 1)
    }
}

/// Footprint standard deviation (level-0 texels) of the targets at `level`;
/// level 0 targets are point evaluations.
pub fn target_sigma(level: usize) -> f64 {
    if level == 0 {
        0.0
    } else {
        level_sigma(level)
    }
}

/// Spatial taps for a footprint: one per texel of `sigma^2`, capped.
pub fn tap_count(sigma: f64, max_taps: usize) -> usize {
    ((sigma * sigma).round() as usize).clamp(1, max_taps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub uv: [f64; 2],
    pub level: usize,
    pub sigma: f64,
    pub wi: Vec3,
    pub wo: Vec3,
    /// Filtered parameter vector (only when requested).
    pub params: Vec<f64>,
    pub target: Spectrum,
    pub albedo: Option<Spectrum>,
}

/// Draws `n` training samples for `iteration`.
pub fn generate_batch<R: Rng + ?Sized>(
    reference: &ReferenceMaterial,
    cfg: &TrainConfig,
    levels: &LevelDistribution,
    rng: &mut R,
    iteration: usize,
    n: usize,
    with_params: bool,
    with_albedo: bool,
) -> Vec<TrainingSample> {
    let cone = cfg.cone_angle(iteration);
    let (w, h) = (reference.width() as f64, reference.height() as f64);
    (0..n)
        .map(|_| {
            let uv = [rng.gen::<f64>(), rng.gen::<f64>()];
            let level = levels.sample(rng.gen());
            let sigma = target_sigma(level);
            let (wi, wo) = sample_half_diff(rng);
            let taps = if sigma > 0.0 { tap_count(sigma, cfg.max_taps) } else { 1 };
            let mut target = Spectrum::ZERO;
            let mut albedo = Spectrum::ZERO;
            for _ in 0..taps {
                let tuv = if sigma > 0.0 {
                    let dx: f64 = rng.sample(StandardNormal);
                    let dy: f64 = rng.sample(StandardNormal);
                    [
                        (uv[0] + sigma * dx / w).rem_euclid(1.0),
                        (uv[1] + sigma * dy / h).rem_euclid(1.0),
                    ]
                } else {
                    uv
                };
                target += reference.eval_mollified(tuv, wi, wo, cone, 1, rng);
                if with_albedo {
                    albedo += reference.estimate_albedo(tuv, wo, 1, rng);
                }
            }
            let mut params = Vec::new();
            if with_params {
                reference.fetch_params(FilterFootprint { uv, sigma: level_sigma(level) }, &mut params);
            }
            TrainingSample {
                uv,
                level,
                sigma,
                wi,
                wo,
                params,
                target: target / taps as f64,
                albedo: with_albedo.then(|| albedo / taps as f64),
            }
        })
        .collect()
}

/// `mean_c |log(1 + pred_c) - log(1 + target_c)|`.
pub fn loss_brdf(pred: Spectrum, target: Spectrum) -> f64 {
    let p = pred.to_array();
    let t = target.to_array();
    (0..3).map(|c| (p[c].ln_1p() - t[c].ln_1p()).abs()).sum::<f64>() / 3.0
}

/// Gradient of [`loss_brdf`] with respect to `pred`.
pub fn loss_brdf_grad(pred: Spectrum, target: Spectrum) -> Spectrum {
    let p = pred.to_array();
    let t = target.to_array();
    Spectrum::from_array(std::array::from_fn(|c| {
        let d = p[c].ln_1p() - t[c].ln_1p();
        if d == 0.0 {
            0.0
        } else {
            d.signum() / (3.0 * (1.0 + p[c]))
        }
    }))
}

/// Mean squared error over channels.
pub fn loss_albedo(pred: Spectrum, target: Spectrum) -> f64 {
    let d = pred - target;
    (d.r * d.r + d.g * d.g + d.b * d.b) / 3.0
}

pub fn loss_albedo_grad(pred: Spectrum, target: Spectrum) -> Spectrum {
    (pred - target) * (2.0 / 3.0)
}

/// KL target density `lum(f) cos` at a direction, plus its gradient with
/// respect to the direction.
pub type KlTarget = (f64, Vec3);

fn dual_raw<const N: usize>(raw: &[f64]) -> [Dual<N>; N] {
    std::array::from_fn(|i| Dual::var(raw[i], i))
}

/// Sampled directions `(diffuse, specular)` of the proxy given by raw
/// decoder outputs.
pub fn kl_directions(kind: SamplerKind, raw: &[f64], wi: Vec3, u_d: [f64; 2], u_s: [f64; 2]) -> [Vec3; 2] {
    let p = match kind {
        SamplerKind::Full => Proxy::<f64>::from_raw(std::array::from_fn(|i| raw[i])),
        SamplerKind::Isotropic => Proxy::<f64>::isotropic_from_raw([raw[0], raw[1]]),
    };
    let wi = V3::from_f64(wi);
    [p.sample_diffuse(u_d).value(), p.sample_specular(wi, u_s).value()]
}

fn kl_dual<const N: usize>(
    p: Proxy<Dual<N>>,
    wi: Vec3,
    u: [[f64; 2]; 2],
    targets: [KlTarget; 2],
) -> (f64, Vec<f64>) {
    let wi = V3::from_f64(wi);
    let dirs = [p.sample_diffuse(u[0]), p.sample_specular(wi, u[1])];
    let weights = [p.w_d, p.w_s];
    let mut total = Dual::<N>::cst(0.0);
    for k in 0..2 {
        if weights[k].val() <= 0.0 {
            continue;
        }
        let w = dirs[k];
        let pd = p.pdf(wi, w);
        if !(pd.val() > 1e-300) {
            continue;
        }
        let (fbar, grad) = targets[k];
        let denom = fbar + EPS_KL;
        let g = grad / denom;
        let mut logf = Dual::<N>::cst(denom.ln());
        for j in 0..N {
            logf.d[j] = g.x * w.x.d[j] + g.y * w.y.d[j] + g.z * w.z.d[j];
        }
        total += weights[k] * (pd.ln() - logf);
    }
    (total.v, total.d.to_vec())
}

/// Reparameterized KL(p || f) estimate for one sample, stratified over the
/// two proxy lobes: `sum_k w_k [log p(W_k(u_k)) - log(f(W_k(u_k)) + eps)]`.
/// `targets` holds the target density and its direction gradient at the
/// directions returned by [`kl_directions`]. Returns the loss and its
/// gradient with respect to the raw decoder outputs.
pub fn loss_sampler(kind: SamplerKind, raw: &[f64], wi: Vec3, u_d: [f64; 2], u_s: [f64; 2], targets: [KlTarget; 2]) -> (f64, Vec<f64>) {
    match kind {
        SamplerKind::Full => kl_dual(Proxy::from_raw(dual_raw::<RAW_PARAMS>(raw)), wi, [u_d, u_s], targets),
        SamplerKind::Isotropic => kl_dual(
            Proxy::isotropic_from_raw(dual_raw::<RAW_PARAMS_ISOTROPIC>(raw)),
            wi,
            [u_d, u_s],
            targets,
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub brdf_l1log: f64,
    pub kl: f64,
    pub albedo_l2: f64,
}

pub fn write_loss_csv<W: Write>(mut w: W, history: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "iteration,brdf_l1log,kl,albedo_l2")?;
    for r in history {
        writeln!(w, "{},{},{},{}", r.iteration, r.brdf_l1log, r.kl, r.albedo_l2)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub iteration: usize,
    pub encoder: Option<AdamState>,
    pub frame: AdamState,
    pub brdf: AdamState,
    pub sampler: AdamState,
    pub latent: Option<AdamState>,
}

#[derive(Default)]
struct BrdfChunk {
    g_encoder: Vec<f32>,
    g_frame: Vec<f32>,
    g_brdf: Vec<f32>,
    latent: Vec<(usize, [f64; 2], [f32; LATENT_CHANNELS])>,
    loss: f64,
    albedo: f64,
}

#[derive(Default)]
struct SamplerChunk {
    g_sampler: Vec<f32>,
    loss: f64,
}

fn chunk_rng(seed: u64, iteration: usize, chunk: usize, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(((chunk as u64) << 2) | stream);
    r
}

fn add_into(acc: &mut [f32], g: &[f32]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Losses of one iteration.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub brdf: f64,
    pub kl: f64,
    pub albedo: f64,
}

pub struct Trainer<'a> {
    pub reference: &'a ReferenceMaterial,
    pub material: NeuralMaterial,
    pub cfg: TrainConfig,
    pub history: Vec<LossRecord>,
    iteration: usize,
    levels: LevelDistribution,
    opt: OptimizerState,
    window: (StepLosses, usize),
    latent_grads: Option<LatentGrads>,
}

impl<'a> Trainer<'a> {
    pub fn new(reference: &'a ReferenceMaterial, material: NeuralMaterial, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let lr = cfg.lr as f32;
        if material.encoder.is_none() && material.latent.is_none() {
            return Err(TrainError::Config("material has neither encoder nor latent texture".into()));
        }
        if let Some(e) = &material.encoder {
            if e.input_dim() != reference.param_dim() {
                return Err(TrainError::Config(format!(
                    "encoder expects {} parameters, material provides {}",
                    e.input_dim(),
                    reference.param_dim()
                )));
            }
        }
        if let Some(l) = &material.latent {
            if l.width() != reference.width() || l.height() != reference.height() {
                return Err(TrainError::Config("latent resolution differs from the material".into()));
            }
        }
        let opt = OptimizerState {
            iteration: 0,
            encoder: material.encoder.as_ref().map(|e| AdamState::new(e.num_params(), lr)),
            frame: AdamState::new(material.frame_layer.num_params(), lr),
            brdf: AdamState::new(material.brdf.num_params(), lr),
            sampler: AdamState::new(material.sampler.num_params(), lr),
            latent: material
                .latent
                .as_ref()
                .map(|l| AdamState::new(l.data().len(), cfg.latent_lr as f32)),
        };
        let latent_grads = material.latent.as_ref().map(LatentGrads::new);
        Ok(Self {
            levels: LevelDistribution::new(cfg.level_rate, reference.levels()),
            reference,
            material,
            cfg,
            history: Vec::new(),
            iteration: 0,
            opt,
            window: (StepLosses::default(), 0),
            latent_grads,
        })
    }

    /// Continues from a saved optimizer state.
    pub fn resume(
        reference: &'a ReferenceMaterial,
        material: NeuralMaterial,
        cfg: TrainConfig,
        state: OptimizerState,
    ) -> Result<Self, TrainError> {
        let mut t = Self::new(reference, material, cfg)?;
        t.iteration = state.iteration;
        t.opt = state;
        Ok(t)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        OptimizerState {
            iteration: self.iteration,
            ..self.opt.clone()
        }
    }

    pub fn in_phase1(&self) -> bool {
        self.material.latent.is_none()
    }

    /// Texel gradients accumulated by the most recent BRDF batch.
    pub fn latent_grads(&self) -> Option<&LatentGrads> {
        self.latent_grads.as_ref()
    }

    /// Bakes the latent texture from the encoder and drops the encoder.
    pub fn transition(&mut self) -> Result<(), TrainError> {
        let enc = self
            .material
            .encoder
            .take()
            .ok_or_else(|| TrainError::Config("no encoder to bake".into()))?;
        let lat = LatentPyramid::bake_from_encoder(&enc, self.reference).map_err(NeuralError::from)?;
        self.opt.encoder = None;
        self.opt.latent = Some(AdamState::new(lat.data().len(), self.cfg.latent_lr as f32));
        self.latent_grads = Some(LatentGrads::new(&lat));
        self.material.latent = Some(lat);
        self.material.invalidate();
        log::info!("iteration {}: baked latent texture, encoder dropped", self.iteration);
        Ok(())
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let b = self.cfg.batch_size;
        let c = self.cfg.chunk_size;
        (0..b.div_ceil(c)).map(|i| (i, c.min(b - i * c))).collect()
    }

    /// Latent codes for a set of samples: encoder output in phase 1,
    /// bilinear texel fetch in phase 2.
    fn latents(&self, samples: &[TrainingSample], enc_acts: &mut BatchActivations) -> Vec<f32> {
        let n = samples.len();
        match (&self.material.latent, &self.material.encoder) {
            (Some(lat), _) => {
                let mut z = Vec::with_capacity(n * LATENT_CHANNELS);
                for s in samples {
                    z.extend_from_slice(&lat.bilinear(s.level, s.uv));
                }
                z
            }
            (None, Some(enc)) => {
                let input: Vec<f32> = samples.iter().flat_map(|s| s.params.iter().map(|&v| v as f32)).collect();
                enc.forward_batch(&input, n, enc_acts).expect("encoder shape");
                enc_acts.output().to_vec()
            }
            (None, None) => unreachable!("checked at construction"),
        }
    }

    fn brdf_chunk(&self, chunk: usize, n: usize) -> BrdfChunk {
        let mat = &self.material;
        let phase1 = mat.latent.is_none();
        let albedo_head = mat.config.albedo_head;
        let mut rng = chunk_rng(self.cfg.seed, self.iteration, chunk, 0);
        let samples = generate_batch(
            self.reference,
            &self.cfg,
            &self.levels,
            &mut rng,
            self.iteration,
            n,
            phase1,
            albedo_head,
        );
        let inv_b = 1.0 / self.cfg.batch_size as f64;
        let mut enc_acts = BatchActivations::default();
        let z = self.latents(&samples, &mut enc_acts);

        let mut fr_acts = BatchActivations::default();
        mat.frame_layer.forward_batch(&z, n, &mut fr_acts).expect("frame layer shape");
        let nf = mat.config.frame_outputs();
        let raw = fr_acts.output().to_vec();
        let din = mat.config.brdf_input_dim();
        let dout = mat.config.brdf_output_dim();
        let mut input = vec![0f32; n * din];
        for (s, smp) in samples.iter().enumerate() {
            let r = &raw[s * nf..(s + 1) * nf];
            let fs = FrameSet::from_raw(r);
            mat.decoder_input(
                &z[s * LATENT_CHANNELS..(s + 1) * LATENT_CHANNELS],
                r,
                &fs,
                smp.wi,
                smp.wo,
                &mut input[s * din..(s + 1) * din],
            );
        }
        let mut dec_acts = BatchActivations::default();
        mat.brdf.forward_batch(&input, n, &mut dec_acts).expect("decoder shape");
        let y = dec_acts.output();
        let mut out_grad = vec![0f32; n * dout];
        let mut out = BrdfChunk::default();
        for (s, smp) in samples.iter().enumerate() {
            let ys = &y[s * dout..(s + 1) * dout];
            let t = smp.target.to_array();
            for c in 0..3 {
                let lt = t[c].ln_1p();
                let yc = ys[c] as f64;
                out.loss += (yc.max(0.0) - lt).abs() / 3.0;
                // gradient taken through log(1 + f) = y, extended below zero
                let d = yc - lt;
                if d != 0.0 {
                    out_grad[s * dout + c] = (d.signum() * inv_b / 3.0) as f32;
                }
            }
            if let Some(a) = smp.albedo {
                let a = a.to_array();
                for c in 0..3 {
                    let p = ys[3 + c] as f64;
                    out.albedo += (p.max(0.0) - a[c]).powi(2) / 3.0;
                    out_grad[s * dout + 3 + c] = (2.0 * (p - a[c]) / 3.0 * inv_b) as f32;
                }
            }
        }
        if !self.cfg.train_brdf {
            return out;
        }
        out.g_brdf = vec![0.0; mat.brdf.num_params()];
        let mut g_in = Vec::new();
        mat.brdf
            .backward_batch(&mut dec_acts, &out_grad, &mut out.g_brdf, Some(&mut g_in))
            .expect("decoder shape");
        let mut g_raw = vec![0f32; n * nf];
        let mut g_z = vec![0f32; n * LATENT_CHANNELS];
        for (s, smp) in samples.iter().enumerate() {
            let gi = &g_in[s * din..(s + 1) * din];
            g_z[s * LATENT_CHANNELS..(s + 1) * LATENT_CHANNELS].copy_from_slice(&gi[..LATENT_CHANNELS]);
            let gr = &mut g_raw[s * nf..(s + 1) * nf];
            match mat.config.frame_mode {
                FrameMode::Learned => {
                    let k = nf / 2;
                    frames_backward(
                        &raw[s * nf..(s + 1) * nf],
                        smp.wi,
                        smp.wo,
                        &gi[LATENT_CHANNELS..LATENT_CHANNELS + k],
                        &gi[LATENT_CHANNELS + k..LATENT_CHANNELS + 2 * k],
                        gr,
                    );
                }
                FrameMode::Vanilla => gr.copy_from_slice(&gi[LATENT_CHANNELS + 6..LATENT_CHANNELS + 6 + nf]),
            }
        }
        out.g_frame = vec![0.0; mat.frame_layer.num_params()];
        let mut g_zf = Vec::new();
        mat.frame_layer
            .backward_batch(&mut fr_acts, &g_raw, &mut out.g_frame, Some(&mut g_zf))
            .expect("frame layer shape");
        add_into(&mut g_z, &g_zf);
        if let Some(enc) = mat.encoder.as_ref().filter(|_| phase1) {
            out.g_encoder = vec![0.0; enc.num_params()];
            enc.backward_batch(&mut enc_acts, &g_z, &mut out.g_encoder, None)
                .expect("encoder shape");
        } else {
            for (s, smp) in samples.iter().enumerate() {
                let mut g = [0f32; LATENT_CHANNELS];
                g.copy_from_slice(&g_z[s * LATENT_CHANNELS..(s + 1) * LATENT_CHANNELS]);
                out.latent.push((smp.level, smp.uv, g));
            }
        }
        out
    }

    fn sampler_chunk(&self, chunk: usize, n: usize) -> SamplerChunk {
        let mat = &self.material;
        let kind = mat.config.sampler_kind;
        let nr = kind.raw_outputs();
        let mut rng = chunk_rng(self.cfg.seed, self.iteration, chunk, 1);
        let phase1 = mat.latent.is_none();
        // directions and footprints only; targets come from the decoder
        let samples: Vec<TrainingSample> = (0..n)
            .map(|_| {
                let uv = [rng.gen::<f64>(), rng.gen::<f64>()];
                let level = self.levels.sample(rng.gen());
                let (wi, _) = sample_half_diff(&mut rng);
                let mut params = Vec::new();
                if phase1 {
                    self.reference
                        .fetch_params(FilterFootprint { uv, sigma: level_sigma(level) }, &mut params);
                }
                TrainingSample {
                    uv,
                    level,
                    sigma: level_sigma(level),
                    wi,
                    wo: Vec3::Z,
                    params,
                    target: Spectrum::ZERO,
                    albedo: None,
                }
            })
            .collect();
        let mut enc_acts = BatchActivations::default();
        let z = self.latents(&samples, &mut enc_acts);
        let mut s_input = vec![0f32; n * (LATENT_CHANNELS + 3)];
        for (s, smp) in samples.iter().enumerate() {
            let row = &mut s_input[s * (LATENT_CHANNELS + 3)..(s + 1) * (LATENT_CHANNELS + 3)];
            row[..LATENT_CHANNELS].copy_from_slice(&z[s * LATENT_CHANNELS..(s + 1) * LATENT_CHANNELS]);
            for i in 0..3 {
                row[LATENT_CHANNELS + i] = smp.wi[i] as f32;
            }
        }
        let mut s_acts = BatchActivations::default();
        mat.sampler.forward_batch(&s_input, n, &mut s_acts).expect("sampler shape");
        let raw_s: Vec<f64> = s_acts.output().iter().map(|&v| v as f64).collect();

        // proxy directions and the decoder's BRDF there
        let nf = mat.config.frame_outputs();
        let mut fr_acts = BatchActivations::default();
        mat.frame_layer.forward_batch(&z, n, &mut fr_acts).expect("frame layer shape");
        let raw_f = fr_acts.output();
        let din = mat.config.brdf_input_dim();
        let dout = mat.config.brdf_output_dim();
        let mut us = Vec::with_capacity(n);
        let mut dirs = Vec::with_capacity(n);
        let mut frames = Vec::with_capacity(n);
        let mut input = vec![0f32; 2 * n * din];
        for (s, smp) in samples.iter().enumerate() {
            let u = [[rng.gen(), rng.gen()], [rng.gen(), rng.gen()]];
            let d = kl_directions(kind, &raw_s[s * nr..(s + 1) * nr], smp.wi, u[0], u[1]);
            let r = &raw_f[s * nf..(s + 1) * nf];
            let fs = FrameSet::from_raw(r);
            for k in 0..2 {
                let row = 2 * s + k;
                mat.decoder_input(
                    &z[s * LATENT_CHANNELS..(s + 1) * LATENT_CHANNELS],
                    r,
                    &fs,
                    smp.wi,
                    d[k],
                    &mut input[row * din..(row + 1) * din],
                );
            }
            us.push(u);
            dirs.push(d);
            frames.push(fs);
        }
        let mut dec_acts = BatchActivations::default();
        mat.brdf.forward_batch(&input, 2 * n, &mut dec_acts).expect("decoder shape");
        let y = dec_acts.output().to_vec();
        let mut g_y = vec![0f32; 2 * n * dout];
        let mut lum = vec![0f64; 2 * n];
        for row in 0..2 * n {
            for c in 0..3 {
                let yc = y[row * dout + c];
                lum[row] += LUMA[c] * brdf_activation(yc) as f64;
                if brdf_activation(yc) > 0.0 {
                    g_y[row * dout + c] = (LUMA[c] * (yc as f64).exp()) as f32;
                }
            }
        }
        let mut g_in = Vec::new();
        mat.brdf.input_grad_batch(&mut dec_acts, &g_y, &mut g_in).expect("decoder shape");

        let inv_b = 1.0 / self.cfg.batch_size as f64;
        let mut out = SamplerChunk::default();
        let mut g_raw = vec![0f32; n * nr];
        for (s, smp) in samples.iter().enumerate() {
            let mut targets = [(0.0, Vec3::ZERO); 2];
            for k in 0..2 {
                let row = 2 * s + k;
                let w = dirs[s][k];
                if w.z <= 0.0 || smp.wi.z <= 0.0 {
                    continue;
                }
                let gi = &g_in[row * din..(row + 1) * din];
                let g_lum = match mat.config.frame_mode {
                    FrameMode::Learned => {
                        let k3 = nf / 2;
                        let go = &gi[LATENT_CHANNELS + k3..LATENT_CHANNELS + 2 * k3];
                        let mut g = Vec3::ZERO;
                        for (j, f) in frames[s].frames[..frames[s].count].iter().enumerate() {
                            g += f.t * go[3 * j] as f64 + f.b * go[3 * j + 1] as f64 + f.n * go[3 * j + 2] as f64;
                        }
                        g
                    }
                    FrameMode::Vanilla => Vec3::new(
                        gi[LATENT_CHANNELS + 3] as f64,
                        gi[LATENT_CHANNELS + 4] as f64,
                        gi[LATENT_CHANNELS + 5] as f64,
                    ),
                };
                targets[k] = (lum[row] * w.z, g_lum * w.z + Vec3::Z * lum[row]);
            }
            let (l, g) = loss_sampler(kind, &raw_s[s * nr..(s + 1) * nr], smp.wi, us[s][0], us[s][1], targets);
            out.loss += l;
            for j in 0..nr {
                g_raw[s * nr + j] = (g[j] * inv_b) as f32;
            }
        }
        out.g_sampler = vec![0.0; mat.sampler.num_params()];
        mat.sampler
            .backward_batch(&mut s_acts, &g_raw, &mut out.g_sampler, None)
            .expect("sampler shape");
        out
    }

    fn set_lrs(&mut self) {
        let s = self.cfg.lr_scale(self.iteration);
        let lr = (self.cfg.lr * s) as f32;
        for st in [&mut self.opt.frame, &mut self.opt.brdf, &mut self.opt.sampler]
            .into_iter()
            .chain(self.opt.encoder.as_mut())
        {
            st.lr = lr;
        }
        if let Some(l) = self.opt.latent.as_mut() {
            l.lr = (self.cfg.latent_lr * s) as f32;
        }
    }

    /// Runs the BRDF batch of the current iteration and applies its update.
    pub fn brdf_step(&mut self) -> (f64, f64) {
        let chunks = self.chunks();
        let results: Vec<BrdfChunk> = chunks.par_iter().map(|&(c, n)| self.brdf_chunk(c, n)).collect();
        let b = self.cfg.batch_size as f64;
        let loss = results.iter().map(|r| r.loss).sum::<f64>() / b;
        let albedo = results.iter().map(|r| r.albedo).sum::<f64>() / b;
        if !self.cfg.train_brdf {
            return (loss, albedo);
        }
        let mat = &mut self.material;
        let mut g_frame = vec![0f32; mat.frame_layer.num_params()];
        let mut g_brdf = vec![0f32; mat.brdf.num_params()];
        for r in &results {
            add_into(&mut g_frame, &r.g_frame);
            add_into(&mut g_brdf, &r.g_brdf);
        }
        self.opt.frame.step(&mut mat.frame_layer, &g_frame);
        self.opt.brdf.step(&mut mat.brdf, &g_brdf);
        if let (Some(enc), Some(st)) = (mat.encoder.as_mut(), self.opt.encoder.as_mut()) {
            if mat.latent.is_none() {
                let mut g = vec![0f32; enc.num_params()];
                for r in &results {
                    add_into(&mut g, &r.g_encoder);
                }
                st.step(enc, &g);
            }
        }
        if let (Some(lat), Some(st), Some(grads)) =
            (mat.latent.as_mut(), self.opt.latent.as_mut(), self.latent_grads.as_mut())
        {
            grads.clear();
            for r in &results {
                for (level, uv, g) in &r.latent {
                    grads.accumulate(lat, *uv, *level, g);
                }
            }
            st.update(lat.data_mut(), &grads.data);
        }
        mat.invalidate();
        (loss, albedo)
    }

    /// Runs the sampler batch of the current iteration and applies its update.
    pub fn sampler_step(&mut self) -> f64 {
        let chunks = self.chunks();
        let results: Vec<SamplerChunk> = chunks.par_iter().map(|&(c, n)| self.sampler_chunk(c, n)).collect();
        let loss = results.iter().map(|r| r.loss).sum::<f64>() / self.cfg.batch_size as f64;
        let mut g = vec![0f32; self.material.sampler.num_params()];
        for r in &results {
            add_into(&mut g, &r.g_sampler);
        }
        self.opt.sampler.step(&mut self.material.sampler, &g);
        self.material.invalidate();
        loss
    }

    /// One full iteration.
    pub fn step(&mut self) -> Result<StepLosses, TrainError> {
        if self.material.latent.is_none() && self.iteration >= self.cfg.phase1_iterations() {
            self.transition()?;
        }
        self.set_lrs();
        let (brdf, albedo) = self.brdf_step();
        let kl = if self.cfg.train_sampler { self.sampler_step() } else { 0.0 };
        let losses = StepLosses { brdf, kl, albedo };
        if !(brdf.is_finite() && kl.is_finite() && albedo.is_finite()) {
            return Err(TrainError::NonFinite {
                iteration: self.iteration,
                brdf,
                kl,
                albedo,
            });
        }
        self.iteration += 1;
        let (acc, count) = &mut self.window;
        acc.brdf += brdf;
        acc.kl += kl;
        acc.albedo += albedo;
        *count += 1;
        if self.iteration % self.cfg.window() == 0 || self.iteration == self.cfg.iterations {
            let c = *count as f64;
            self.history.push(LossRecord {
                iteration: self.iteration,
                brdf_l1log: acc.brdf / c,
                kl: acc.kl / c,
                albedo_l2: acc.albedo / c,
            });
            self.window = (StepLosses::default(), 0);
        }
        Ok(losses)
    }

    /// Runs the remaining iterations, calling `checkpoint` every
    /// `checkpoint_every` iterations (0 disables it). The latent texture is
    /// baked before returning if training ended inside phase 1.
    pub fn run(&mut self, checkpoint_every: usize, mut checkpoint: impl FnMut(&Self)) -> Result<(), TrainError> {
        while self.iteration < self.cfg.iterations {
            self.step()?;
            if checkpoint_every > 0 && self.iteration % checkpoint_every == 0 {
                checkpoint(self);
            }
        }
        if self.cfg.iterations > 0 && self.material.latent.is_none() {
            self.transition()?;
        }
        Ok(())
    }

    pub fn into_material(self) -> NeuralMaterial {
        self.material
    }
}

/// Trains `material` against `reference` and returns it with the loss history.
pub fn train(
    reference: &ReferenceMaterial,
    material: NeuralMaterial,
    cfg: TrainConfig,
) -> Result<(NeuralMaterial, Vec<LossRecord>), TrainError> {
    let mut t = Trainer::new(reference, material, cfg)?;
    t.run(0, |_| {})?;
    let history = std::mem::take(&mut t.history);
    Ok((t.into_material(), history))
}

/// Trains a fresh sampler decoder of the given kind against the frozen BRDF
/// decoder and latent texture of an already trained material.
pub fn train_sampler_only<R: Rng + ?Sized>(
    reference: &ReferenceMaterial,
    material: &NeuralMaterial,
    kind: SamplerKind,
    mut cfg: TrainConfig,
    rng: &mut R,
) -> Result<(NeuralMaterial, Vec<LossRecord>), TrainError> {
    let mut m = material.clone();
    if m.latent.is_none() {
        return Err(TrainError::Config("sampler-only training needs a baked latent texture".into()));
    }
    m.encoder = None;
    m.reset_sampler(kind, rng)?;
    cfg.train_brdf = false;
    cfg.train_sampler = true;
    cfg.mollify_start_deg = 0.0;
    train(reference, m, cfg)
}

/// Evaluates a material's encoder on a parameter vector (phase-1 path).
pub fn encode(encoder: &Mlp, params: &[f64]) -> [f32; LATENT_CHANNELS] {
    let input: Vec<f32> = params.iter().map(|&v| v as f32).collect();
    let out = encoder.forward(&input).expect("encoder shape");
    std::array::from_fn(|i| out[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::Dual;
    use crate::neural::NeuralConfig;
    use crate::reference::{builtin_layered, lambertian, seeded_rng};

    fn small_cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 256,
            chunk_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn brdf_loss_values_and_gradient() {
        let t = Spectrum::new(0.2, 0.7, 1.5);
        assert_eq!(loss_brdf(t, t), 0.0);
        let e1 = std::f64::consts::E - 1.0;
        assert!((loss_brdf(Spectrum::splat(e1), Spectrum::ZERO) - 1.0).abs() < 1e-15);
        let p = Spectrum::new(0.5, 0.3, 2.0);
        let g = loss_brdf_grad(p, t).to_array();
        for c in 0..3 {
            let h = 1e-6;
            let mut a = p.to_array();
            let mut b = p.to_array();
            a[c] += h;
            b[c] -= h;
            let fd = (loss_brdf(Spectrum::from_array(a), t) - loss_brdf(Spectrum::from_array(b), t)) / (2.0 * h);
            assert!((fd - g[c]).abs() < 1e-3 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn albedo_loss_values() {
        let t = Spectrum::new(0.2, 0.7, 1.5);
        assert_eq!(loss_albedo(t, t), 0.0);
        assert_eq!(loss_albedo(Spectrum::splat(1.0), Spectrum::ZERO), 1.0);
    }

    #[test]
    fn level_distribution_limits() {
        let d = LevelDistribution::new(1e6, 8);
        let mut rng = seeded_rng(1);
        assert!((0..1000).all(|_| d.sample(rng.gen()) == 0));
        let d = LevelDistribution::new(1.0, 8);
        assert!((d.pmf().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d.pmf()[1] / d.pmf()[0] - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn level_histogram_matches_pmf() {
        let mat = lambertian(64, [0.5; 3]);
        let cfg = TrainConfig::default();
        let d = LevelDistribution::new(cfg.level_rate, mat.levels());
        let batch = generate_batch(&mat, &cfg, &d, &mut seeded_rng(2), 0, 4096, false, false);
        let mut obs = vec![0.0; mat.levels()];
        for s in &batch {
            obs[s.level] += 1.0;
        }
        let exp: Vec<f64> = d.pmf().iter().map(|p| p * 4096.0).collect();
        assert!(crate::stats::chi_square_test(&obs, &exp, 5.0) > 0.01);
    }

    #[test]
    fn schedules() {
        let cfg = TrainConfig {
            iterations: 1000,
            ..Default::default()
        };
        assert!((cfg.cone_angle(0) - 5f64.to_radians()).abs() < 1e-15);
        assert_eq!(cfg.cone_angle(250), 0.0);
        assert_eq!(cfg.cone_angle(900), 0.0);
        let mut prev = f64::INFINITY;
        for i in 0..1000 {
            assert!(cfg.cone_angle(i) <= prev);
            prev = cfg.cone_angle(i);
        }
        assert_eq!(cfg.lr_scale(0), 1.0);
        assert!((cfg.lr_scale(600) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_scale(950) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn unmollified_targets_after_decay() {
        let mat = builtin_layered(32);
        let cfg = TrainConfig {
            iterations: 100,
            level_rate: 1e6,
            ..Default::default()
        };
        let d = LevelDistribution::new(cfg.level_rate, mat.levels());
        for s in generate_batch(&mat, &cfg, &d, &mut seeded_rng(3), 50, 64, false, false) {
            assert_eq!(s.level, 0);
            assert_eq!(s.sigma, 0.0);
            assert_eq!(s.target, mat.eval(s.uv, s.wi, s.wo));
        }
    }

    /// Target density proportional to the proxy itself, with its exact
    /// direction gradient (forward-mode duals on the direction).
    fn self_target(p: &Proxy<f64>, wi: Vec3, w: Vec3, scale: f64) -> KlTarget {
        let d = V3::new(Dual::<3>::var(w.x, 0), Dual::var(w.y, 1), Dual::var(w.z, 2));
        let pp = Proxy::<Dual<3>> {
            w_d: Dual::cst(p.w_d),
            mu_d: p.mu_d.map(Dual::cst),
            w_s: Dual::cst(p.w_s),
            alpha: p.alpha.map(Dual::cst),
            rho: Dual::cst(p.rho),
            mu_s: p.mu_s.map(Dual::cst),
        };
        let v = pp.pdf(V3::from_f64(wi), d);
        (scale * v.v, Vec3::new(v.d[0], v.d[1], v.d[2]) * scale)
    }

    fn mean_sampler_grad(raw: &[f64], wi: Vec3, scale: f64, grid: usize) -> (f64, Vec<f64>) {
        let p = Proxy::<f64>::from_raw(std::array::from_fn(|i| raw[i]));
        let mut g = vec![0.0; raw.len()];
        let mut loss = 0.0;
        for i in 0..grid {
            for j in 0..grid {
                let u = [(i as f64 + 0.5) / grid as f64, (j as f64 + 0.5) / grid as f64];
                let d = kl_directions(SamplerKind::Full, raw, wi, u, u);
                let t = [self_target(&p, wi, d[0], scale), self_target(&p, wi, d[1], scale)];
                let (l, gs) = loss_sampler(SamplerKind::Full, raw, wi, u, u, t);
                loss += l;
                for (a, b) in g.iter_mut().zip(&gs) {
                    *a += b;
                }
            }
        }
        let n = (grid * grid) as f64;
        (loss / n, g.iter().map(|x| x / n).collect())
    }

    #[test]
    fn sampler_gradient_vanishes_at_the_optimum() {
        let raw = [0.2, 0.1, -0.2, -0.1, 0.4, 0.1, 0.2, 0.1, -0.1];
        let wi = Vec3::new(0.2, -0.1, 0.95).normalize();
        let (_, g) = mean_sampler_grad(&raw, wi, 1e4, 300);
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "{g:?}");
    }

    #[test]
    fn sampler_gradient_is_scale_invariant() {
        let raw = [0.3, -0.4, 0.2, -0.2, 0.1, 0.6, -0.3, 0.2, 0.3];
        let wi = Vec3::new(-0.3, 0.2, 0.9).normalize();
        let u_d = [0.3, 0.8];
        let u_s = [0.6, 0.1];
        let target = |w: Vec3| -> KlTarget { (w.z.max(0.0) * (1.0 + w.x), Vec3::new(w.z, 0.0, 1.0 + w.x)) };
        let d = kl_directions(SamplerKind::Full, &raw, wi, u_d, u_s);
        let t1 = [target(d[0]), target(d[1])];
        let big = 1e6;
        let t2 = t1.map(|(v, g)| (v * big, g * big));
        let (l1, g1) = loss_sampler(SamplerKind::Full, &raw, wi, u_d, u_s, t1);
        let (l2, g2) = loss_sampler(SamplerKind::Full, &raw, wi, u_d, u_s, t2);
        assert!(l2 < l1);
        // eps_kl becomes negligible at large scale, so compare two large scales
        let t3 = t1.map(|(v, g)| (v * 2.0 * big, g * 2.0 * big));
        let (l3, g3) = loss_sampler(SamplerKind::Full, &raw, wi, u_d, u_s, t3);
        assert!((l2 - l3 - 2f64.ln()).abs() < 1e-6);
        for (a, b) in g2.iter().zip(&g3) {
            assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
        }
        assert!(g1.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn sampler_loss_finite_for_black_target() {
        let raw = [0.0; 9];
        let (l, g) = loss_sampler(SamplerKind::Full, &raw, Vec3::Z, [0.2, 0.3], [0.4, 0.5], [(0.0, Vec3::ZERO); 2]);
        assert!(l.is_finite() && g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_iterations_leave_material_unchanged() {
        let mat = lambertian(16, [0.5; 3]);
        let nm = NeuralMaterial::new(NeuralConfig::default(), mat.param_dim(), &mut seeded_rng(4)).unwrap();
        let (out, hist) = train(&mat, nm.clone(), small_cfg(0)).unwrap();
        assert_eq!(out, nm);
        assert!(hist.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let mat = builtin_layered(16);
        let nm = NeuralMaterial::new(NeuralConfig::default(), mat.param_dim(), &mut seeded_rng(5)).unwrap();
        let cfg = small_cfg(20);
        let (_, a) = train(&mat, nm.clone(), cfg.clone()).unwrap();
        let (_, b) = train(&mat, nm, cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
    }

    #[test]
    fn bake_preserves_outputs_at_texel_centers() {
        let mat = builtin_layered(16);
        let nm = NeuralMaterial::new(NeuralConfig::default(), mat.param_dim(), &mut seeded_rng(6)).unwrap();
        let mut t = Trainer::new(&mat, nm, small_cfg(10)).unwrap();
        for _ in 0..3 {
            t.step().unwrap();
        }
        let enc = t.material.encoder.clone().unwrap();
        t.transition().unwrap();
        let m = &t.material;
        let wi = Vec3::new(0.3, 0.1, 0.9).normalize();
        let wo = Vec3::new(-0.2, 0.4, 0.8).normalize();
        let mut k = Vec::new();
        for (x, y) in [(0, 0), (3, 7), (15, 2)] {
            mat.texel_params(0, x, y, &mut k);
            let z_enc = encode(&enc, &k);
            let uv = [(x as f64 + 0.5) / 16.0, (y as f64 + 0.5) / 16.0];
            let via_latent = m
                .eval(crate::latent::LatentQuery { uv, level: 0.0 }, wi, wo, 0.5)
                .unwrap()
                .0;
            assert_eq!(via_latent, m.eval_z(&z_enc, wi, wo).0);
        }
    }

    #[test]
    fn sampler_batch_never_touches_latents() {
        let mat = builtin_layered(16);
        let nm = NeuralMaterial::new(NeuralConfig::default(), mat.param_dim(), &mut seeded_rng(7)).unwrap();
        let mut t = Trainer::new(&mat, nm, small_cfg(4)).unwrap();
        t.step().unwrap();
        t.transition().unwrap();
        let before = t.material.latent.clone().unwrap();
        t.sampler_step();
        assert!(t.latent_grads().unwrap().is_zero());
        assert_eq!(t.material.latent.as_ref().unwrap(), &before);
        t.brdf_step();
        assert!(!t.latent_grads().unwrap().is_zero());
    }
}
