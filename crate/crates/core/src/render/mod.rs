//! CPU path tracer with next-event estimation and MIS over reference and
//! neural materials.

pub mod metrics;
pub mod scene;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{sample_cosine_hemisphere, Spectrum, Vec3};
use crate::latent::LatentQuery;
use crate::neural::{NeuralHit, NeuralMaterial, Precision};
use crate::pfm::PfmImage;
use crate::proxy::ProxyParams;
use crate::reference::ReferenceMaterial;

pub use metrics::{compute_metrics, MetricReport};
pub use scene::{Hit, Light, MaterialBinding, Ray, Scene, SceneDesc};

pub const TILE_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("scene: {0}")]
    Scene(String),
    #[error("material {0:?}: {1}")]
    Material(String, String),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("image size mismatch: {0} vs {1} values")]
    Dimension(usize, usize),
    #[error("invalid render config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisHeuristic {
    #[default]
    Balance,
    Power,
}

impl MisHeuristic {
    /// Weight of strategy `a` against `b`.
    pub fn weight(self, a: f64, b: f64) -> f64 {
        let (a, b) = match self {
            Self::Balance => (a, b),
            Self::Power => (a * a, b * b),
        };
        if a + b > 0.0 {
            a / (a + b)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub spp: usize,
    /// Camera vertex included; 3 gives direct lighting only.
    pub max_vertices: usize,
    pub seed: u64,
    pub lod: bool,
    /// Replaces the footprint level of neural lookups when set.
    pub forced_level: Option<f64>,
    pub mis: MisHeuristic,
    /// FP16 fused inference for neural materials.
    pub fp16: bool,
    /// Cone spread (radians) added at every bounce.
    pub bounce_spread: f64,
    /// Re-evaluates the proxy density at every neural sample.
    pub check_pdf: bool,
    /// Draw light-sample random numbers before BSDF-sample ones.
    pub light_first: bool,
    /// Next-event estimation; when off, emission is only found by BSDF sampling.
    pub nee: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            spp: 16,
            max_vertices: 6,
            seed: 0,
            lod: true,
            forced_level: None,
            mis: MisHeuristic::Balance,
            fp16: true,
            bounce_spread: 0.05,
            check_pdf: false,
            light_first: true,
            nee: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.spp == 0 {
            return Err(RenderError::Config("spp must be positive".into()));
        }
        if self.max_vertices < 2 {
            return Err(RenderError::Config("max_vertices must be at least 2".into()));
        }
        if !(self.bounce_spread >= 0.0 && self.bounce_spread.is_finite()) {
            return Err(RenderError::Config("bounce_spread must be finite and non-negative".into()));
        }
        if let Some(l) = self.forced_level {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(RenderError::Config("forced_level must be non-negative".into()));
            }
        }
        Ok(())
    }

    fn precision(&self) -> Precision {
        if self.fp16 {
            Precision::Fp16Fused
        } else {
            Precision::Fp32
        }
    }
}

/// Mip level for a footprint of `area` level-0 texels.
pub fn footprint_to_level(area: f64, levels: usize) -> f64 {
    (0.5 * area.max(1.0).log2()).clamp(0.0, levels.saturating_sub(1) as f64)
}

/// Isotropic ray cone: width at the origin and spread angle.
#[derive(Debug, Clone, Copy)]
pub struct Cone {
    pub width: f64,
    pub spread: f64,
}

impl Cone {
    /// Footprint of the cone at `hit` in level-0 texels of a `w x h` texture.
    pub fn texel_area(&self, hit: &Hit, dir: Vec3, tex: (usize, usize)) -> f64 {
        let width = self.width + self.spread * hit.t;
        let cos = dir.dot(hit.n).abs().max(1e-4);
        let world = width * width / cos;
        world / hit.area_per_uv * (tex.0 * tex.1) as f64
    }
}

pub struct BsdfSample {
    pub wo: Vec3,
    pub pdf: f64,
    pub value: Spectrum,
}

/// Material state at one shading point; all directions are local.
pub enum ShadingMaterial<'a> {
    Reference {
        mat: &'a ReferenceMaterial,
        uv: [f64; 2],
    },
    Neural {
        mat: &'a NeuralMaterial,
        hit: NeuralHit,
        proxy: ProxyParams,
        precision: Precision,
    },
}

impl<'a> ShadingMaterial<'a> {
    /// Fetches the latent code and caches the sampler proxy for `wi`.
    pub fn prepare(binding: &'a MaterialBinding, uv: [f64; 2], level: f64, wi: Vec3, u_rr: f64, precision: Precision) -> Self {
        match binding {
            MaterialBinding::Reference(m) => Self::Reference { mat: m, uv },
            MaterialBinding::Neural(m) => {
                let precision = if m.is_quantized() { precision } else { Precision::Fp32 };
                let hit = m
                    .prepare(LatentQuery { uv, level }, u_rr, precision)
                    .expect("neural bindings carry a latent texture");
                let proxy = m.infer_proxy(&hit.z, wi, precision);
                Self::Neural {
                    mat: m,
                    hit,
                    proxy,
                    precision,
                }
            }
        }
    }

    pub fn eval(&self, wi: Vec3, wo: Vec3) -> Spectrum {
        match self {
            Self::Reference { mat, uv } => mat.eval(*uv, wi, wo),
            Self::Neural { mat, hit, precision, .. } => mat.eval_hit(hit, wi, wo, *precision).0,
        }
    }

    /// Density of [`Self::sample`]; zero below the horizon.
    pub fn pdf(&self, wi: Vec3, wo: Vec3) -> f64 {
        if wo.z <= 0.0 || wi.z <= 0.0 {
            return 0.0;
        }
        match self {
            Self::Reference { mat, uv } => mat.pdf(*uv, wi, wo),
            Self::Neural { proxy, .. } => proxy.eval_pdf(wi, wo),
        }
    }

    pub fn sample(&self, wi: Vec3, u: [f64; 3]) -> Option<BsdfSample> {
        let (wo, pdf) = match self {
            Self::Reference { mat, uv } => mat.sample(*uv, wi, u)?,
            Self::Neural { proxy, .. } => {
                let wo = proxy.sample(wi, u);
                if wo.z <= 0.0 || !wo.is_finite() {
                    return None;
                }
                (wo, proxy.eval_pdf(wi, wo))
            }
        };
        if !(pdf > 0.0 && pdf.is_finite()) {
            return None;
        }
        Some(BsdfSample {
            wo,
            pdf,
            value: self.eval(wi, wo),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderStats {
    pub samples: u64,
    /// Path samples dropped for a non-finite contribution.
    pub nonfinite: u64,
    /// Neural samples whose re-evaluated pdf differed (only with `check_pdf`).
    pub pdf_mismatches: u64,
}

impl RenderStats {
    fn merge(&mut self, o: &RenderStats) {
        self.samples += o.samples;
        self.nonfinite += o.nonfinite;
        self.pdf_mismatches += o.pdf_mismatches;
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Per-pixel mean, top row first.
    pub pixels: Vec<[f64; 3]>,
    /// Standard error of each pixel mean.
    pub std_error: Vec<[f64; 3]>,
    pub stats: RenderStats,
}

impl RenderOutput {
    pub fn to_pfm(&self) -> PfmImage {
        PfmImage::from_rgb(self.width, self.height, &self.pixels)
    }

    pub fn values(&self) -> Vec<f32> {
        self.pixels.iter().flat_map(|p| p.map(|c| c as f32)).collect()
    }
}

struct Integrator<'a> {
    scene: &'a Scene,
    cfg: &'a RenderConfig,
    precision: Precision,
}

fn offset(p: Vec3, n: Vec3) -> Vec3 {
    p + n * (1e-7 * (1.0 + p.abs().max_component()))
}

fn u3<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

impl Integrator<'_> {
    /// Density of light selection plus light sampling for a direction that
    /// reached light `k` from `p` with normal `n`.
    fn light_pdf(&self, k: usize, n: Vec3, dir: Vec3, dist: f64) -> f64 {
        let sel = 1.0 / self.scene.lights.len() as f64;
        match &self.scene.lights[k] {
            Light::Environment(_) => sel * dir.dot(n).max(0.0) / std::f64::consts::PI,
            Light::Area(a) => {
                let cos = -dir.dot(a.normal);
                if cos <= 0.0 {
                    0.0
                } else {
                    sel * dist * dist / (a.area * cos)
                }
            }
        }
    }

    fn env_index(&self) -> Option<usize> {
        self.scene.lights.iter().position(|l| matches!(l, Light::Environment(_)))
    }

    /// Next-event estimate at a surface point.
    fn direct(&self, hit: &Hit, mat: &ShadingMaterial, wi: Vec3, u: [f64; 3]) -> Spectrum {
        let n_lights = self.scene.lights.len();
        if n_lights == 0 {
            return Spectrum::ZERO;
        }
        let k = ((u[0] * n_lights as f64) as usize).min(n_lights - 1);
        let origin = offset(hit.p, hit.n);
        let (dir, dist, le) = match &self.scene.lights[k] {
            Light::Environment(le) => {
                let d = hit.frame.to_world(sample_cosine_hemisphere([u[1], u[2]]));
                (d, f64::INFINITY, *le)
            }
            Light::Area(a) => {
                let q = a.origin + a.edge_u * u[1] + a.edge_v * u[2];
                let v = q - origin;
                let dist = v.length();
                (v / dist, dist, a.radiance)
            }
        };
        let p_light = self.light_pdf(k, hit.n, dir, dist);
        if !(p_light > 0.0) || !p_light.is_finite() {
            return Spectrum::ZERO;
        }
        let wo = hit.frame.to_local(dir);
        if wo.z <= 0.0 {
            return Spectrum::ZERO;
        }
        let f = mat.eval(wi, wo);
        if f.is_black() {
            return Spectrum::ZERO;
        }
        let t_max = if dist.is_finite() { dist * (1.0 - 1e-6) } else { f64::INFINITY };
        if !self.scene.unoccluded(&Ray { o: origin, d: dir }, t_max) {
            return Spectrum::ZERO;
        }
        let w = self.cfg.mis.weight(p_light, mat.pdf(wi, wo));
        f * le * (wo.z * w / p_light)
    }

    fn radiance<R: Rng>(&self, mut ray: Ray, rng: &mut R, stats: &mut RenderStats) -> Spectrum {
        let mut l = Spectrum::ZERO;
        let mut beta = Spectrum::ONE;
        let mut cone = Cone {
            width: 0.0,
            spread: self.scene.camera.pixel_spread(),
        };
        // previous surface vertex: normal and bsdf pdf of the continuation
        let mut prev: Option<(Vec3, f64)> = None;
        for vertex in 1..=self.cfg.max_vertices {
            let Some(hit) = self.scene.intersect(&ray) else {
                if let (Some(k), Some(le)) = (self.env_index(), self.scene.environment()) {
                    let w = match prev {
                        Some((n, pdf)) if self.cfg.nee => {
                            self.cfg.mis.weight(pdf, self.light_pdf(k, n, ray.d, f64::INFINITY))
                        }
                        _ => 1.0,
                    };
                    l += beta * le * w;
                }
                break;
            };
            if hit.emitter {
                if let Light::Area(a) = &self.scene.lights[hit.id] {
                    if hit.front {
                        let w = match prev {
                            Some((n, pdf)) if self.cfg.nee => {
                                self.cfg.mis.weight(pdf, self.light_pdf(hit.id, n, ray.d, hit.t))
                            }
                            _ => 1.0,
                        };
                        l += beta * a.radiance * w;
                    }
                }
                break;
            }
            if vertex == self.cfg.max_vertices {
                break;
            }
            let binding = &self.scene.materials[hit.id];
            let level = match (self.cfg.forced_level, self.cfg.lod) {
                (Some(f), _) => f,
                (None, true) => footprint_to_level(cone.texel_area(&hit, ray.d, binding.texture_size()), binding.levels()),
                (None, false) => 0.0,
            };
            let wi = hit.frame.to_local(-ray.d);
            if wi.z <= 0.0 {
                break;
            }
            let u_rr = rng.gen::<f64>();
            let (u_light, u_bsdf) = if self.cfg.light_first {
                let a = u3(rng);
                (a, u3(rng))
            } else {
                let b = u3(rng);
                (u3(rng), b)
            };
            let mat = ShadingMaterial::prepare(binding, hit.uv, level, wi, u_rr, self.precision);
            if self.cfg.nee {
                l += beta * self.direct(&hit, &mat, wi, u_light);
            }
            let Some(s) = mat.sample(wi, u_bsdf) else {
                break;
            };
            if self.cfg.check_pdf {
                if let ShadingMaterial::Neural { proxy, .. } = &mat {
                    let again = proxy.eval_pdf(wi, s.wo);
                    if (again - s.pdf).abs() > 1e-6 * s.pdf.max(1.0) {
                        stats.pdf_mismatches += 1;
                    }
                }
            }
            beta = beta * s.value * (s.wo.z / s.pdf);
            if beta.is_black() {
                break;
            }
            prev = Some((hit.n, s.pdf));
            cone = Cone {
                width: cone.width + cone.spread * hit.t,
                spread: cone.spread + self.cfg.bounce_spread,
            };
            ray = Ray {
                o: offset(hit.p, hit.n),
                d: hit.frame.to_world(s.wo).normalize(),
            };
        }
        l
    }
}

fn tile_rng(seed: u64, tile: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tile as u64);
    r
}

struct TileResult {
    x0: usize,
    y0: usize,
    w: usize,
    mean: Vec<[f64; 3]>,
    se: Vec<[f64; 3]>,
    stats: RenderStats,
}

/// Renders `scene`; deterministic for a given seed regardless of the thread
/// count.
pub fn render(scene: &Scene, cfg: &RenderConfig) -> Result<RenderOutput, RenderError> {
    cfg.validate()?;
    let cam = &scene.camera;
    let (width, height) = (cam.width, cam.height);
    let tx = width.div_ceil(TILE_SIZE);
    let ty = height.div_ceil(TILE_SIZE);
    let integ = Integrator {
        scene,
        cfg,
        precision: cfg.precision(),
    };
    let tiles: Vec<TileResult> = (0..tx * ty)
        .into_par_iter()
        .map(|t| {
            let x0 = (t % tx) * TILE_SIZE;
            let y0 = (t / tx) * TILE_SIZE;
            let w = TILE_SIZE.min(width - x0);
            let h = TILE_SIZE.min(height - y0);
            let mut rng = tile_rng(cfg.seed, t);
            let mut stats = RenderStats::default();
            let mut mean = Vec::with_capacity(w * h);
            let mut se = Vec::with_capacity(w * h);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let mut sum = [0.0; 3];
                    let mut sq = [0.0; 3];
                    let mut n = 0u64;
                    for _ in 0..cfg.spp {
                        let ray = cam.ray(x as f64 + rng.gen::<f64>(), y as f64 + rng.gen::<f64>());
                        let v = integ.radiance(ray, &mut rng, &mut stats);
                        stats.samples += 1;
                        n += 1;
                        if !v.is_finite() {
                            stats.nonfinite += 1;
                            continue;
                        }
                        for (c, x) in v.to_array().into_iter().enumerate() {
                            sum[c] += x;
                            sq[c] += x * x;
                        }
                    }
                    let nf = n as f64;
                    let m = sum.map(|s| s / nf);
                    mean.push(m);
                    se.push(std::array::from_fn(|c| {
                        if n > 1 {
                            ((sq[c] / nf - m[c] * m[c]).max(0.0) / (nf - 1.0)).sqrt()
                        } else {
                            0.0
                        }
                    }));
                }
            }
            TileResult { x0, y0, w, mean, se, stats }
        })
        .collect();
    let mut out = RenderOutput {
        width,
        height,
        pixels: vec![[0.0; 3]; width * height],
        std_error: vec![[0.0; 3]; width * height],
        stats: RenderStats::default(),
    };
    for t in &tiles {
        for (i, (m, s)) in t.mean.iter().zip(&t.se).enumerate() {
            let idx = (t.y0 + i / t.w) * width + t.x0 + i % t.w;
            out.pixels[idx] = *m;
            out.std_error[idx] = *s;
        }
        out.stats.merge(&t.stats);
    }
    Ok(out)
}
