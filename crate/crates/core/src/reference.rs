//! Analytic layered SVBRDF used as the training target and as ground truth
//! in renders.
//!
//! A material is an ordered list of lobes (Lambertian, GGX conductor, GGX
//! dielectric coat). Lobe `k > 0` is combined with everything below it by
//! either a linear mix or by coating, which attenuates the layers underneath
//! with `(1 - F(cos_i)) (1 - F(cos_o))`. Every parameter is either a
//! constant or bound to a channel range of a texture in [`ParamTextures`].
//!
//! Slope (normal-map) and roughness channels are prefiltered with LEAN
//! moments for the encoder inputs: the filtered roughness matrix is
//! `A + 2 Cov(slope)` where `A = R diag(ax^2, ay^2) R^T`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{
    sample_cosine_hemisphere, sample_uniform_cone, Direction, Frame, Spectrum, Vec3,
};
use crate::ggx;
use crate::pfm::{PfmError, PfmImage};
use crate::texture::{gaussian_pyramid, level_count, Image};

pub const MAX_LOBES: usize = 5;
const MIN_ALPHA: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MaterialError {
    #[error("material needs between 1 and {MAX_LOBES} lobes, got {0}")]
    LobeCount(usize),
    #[error("expected {expected} combine rules for {lobes} lobes, got {got}")]
    CombineCount {
        lobes: usize,
        expected: usize,
        got: usize,
    },
    #[error("unknown texture {0:?}")]
    UnknownTexture(String),
    #[error("texture {name:?} has {has} channels, binding needs {needs}")]
    Channels {
        name: String,
        has: usize,
        needs: usize,
    },
    #[error("constant binding has {has} values, needs 1 or {needs}")]
    ConstWidth { has: usize, needs: usize },
    #[error("texture {name:?} is {w}x{h}, material is {mw}x{mh}")]
    Resolution {
        name: String,
        w: usize,
        h: usize,
        mw: usize,
        mh: usize,
    },
    #[error("texture {0:?} contains non-finite values")]
    NonFinite(String),
    #[error("pfm: {0}")]
    Pfm(#[from] PfmError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Description (JSON) types

/// A parameter binding as written in material files: a scalar, a vector, or
/// `{"texture": name, "scale": s}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BindingDesc {
    Scalar(f64),
    Vector(Vec<f64>),
    Texture {
        texture: String,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LobeDesc {
    Lambertian {
        albedo: BindingDesc,
    },
    Conductor {
        f0: BindingDesc,
        roughness: BindingDesc,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        anisotropy: Option<BindingDesc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rotation: Option<BindingDesc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normal: Option<BindingDesc>,
    },
    Coat {
        specularity: BindingDesc,
        roughness: BindingDesc,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        anisotropy: Option<BindingDesc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rotation: Option<BindingDesc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normal: Option<BindingDesc>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CombineDesc {
    Mix { weight: BindingDesc },
    Coat,
}

/// Procedural or file-backed texture sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextureDesc {
    /// PFM file, path relative to the material file.
    File { path: PathBuf },
    Constant { value: Vec<f64> },
    Checker { cells: usize, a: Vec<f64>, b: Vec<f64> },
    /// Linear ramp from `from` to `to` along `axis` (0 = u, 1 = v), sampled at texel centers.
    Ramp {
        from: Vec<f64>,
        to: Vec<f64>,
        #[serde(default)]
        axis: usize,
    },
    /// Smooth value noise remapped per channel into `[min, max]`.
    ValueNoise {
        cells: usize,
        min: Vec<f64>,
        max: Vec<f64>,
        seed: u64,
    },
    /// Two-channel slope map: the gradient of tileable value noise.
    NoiseSlopes { cells: usize, amplitude: f64, seed: u64 },
    /// Two-channel slope map alternating between `slope` and `-slope`.
    CheckerSlopes { cells: usize, slope: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialDesc {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub textures: BTreeMap<String, TextureDesc>,
    pub lobes: Vec<LobeDesc>,
    #[serde(default)]
    pub combine: Vec<CombineDesc>,
}

// ---------------------------------------------------------------------------
// Resolved graph

#[derive(Debug, Clone, PartialEq)]
pub enum Binding {
    Const(Vec<f64>),
    Texture { index: usize, scale: f64 },
}

impl Binding {
    fn resolve(
        desc: &BindingDesc,
        width: usize,
        tex: &ParamTextures,
    ) -> Result<Binding, MaterialError> {
        match desc {
            BindingDesc::Scalar(v) => Ok(Binding::Const(vec![*v; width])),
            BindingDesc::Vector(v) if v.len() == width => Ok(Binding::Const(v.clone())),
            BindingDesc::Vector(v) if v.len() == 1 => Ok(Binding::Const(vec![v[0]; width])),
            BindingDesc::Vector(v) => Err(MaterialError::ConstWidth {
                has: v.len(),
                needs: width,
            }),
            BindingDesc::Texture { texture, scale } => {
                let index = tex
                    .index_of(texture)
                    .ok_or_else(|| MaterialError::UnknownTexture(texture.clone()))?;
                let ch = tex.images[index].channels;
                if ch < width && ch != 1 {
                    return Err(MaterialError::Channels {
                        name: texture.clone(),
                        has: ch,
                        needs: width,
                    });
                }
                Ok(Binding::Texture {
                    index,
                    scale: *scale,
                })
            }
        }
    }

    fn fetch(&self, tex: &ParamTextures, x: usize, y: usize, out: &mut [f64]) {
        match self {
            Binding::Const(v) => out.copy_from_slice(&v[..out.len()]),
            Binding::Texture { index, scale } => {
                let t = tex.images[*index].texel(x, y);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = t[if t.len() == 1 { 0 } else { k }] as f64 * scale;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LobeKind {
    Lambertian,
    Conductor,
    Coat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lobe {
    pub kind: LobeKind,
    /// Albedo / F0 (3 values) or coat specularity (1 value).
    pub color: Binding,
    pub roughness: Binding,
    pub anisotropy: Binding,
    pub rotation: Binding,
    pub normal: Binding,
}

impl Lobe {
    fn raw_width(&self) -> usize {
        match self.kind {
            LobeKind::Lambertian => 3,
            LobeKind::Conductor => 8,
            LobeKind::Coat => 6,
        }
    }

    fn moment_width(&self) -> usize {
        match self.kind {
            LobeKind::Lambertian => 3,
            LobeKind::Conductor => 11,
            LobeKind::Coat => 9,
        }
    }

    fn param_width(&self) -> usize {
        match self.kind {
            LobeKind::Lambertian => 3,
            LobeKind::Conductor => 8,
            LobeKind::Coat => 6,
        }
    }

    fn color_width(&self) -> usize {
        match self.kind {
            LobeKind::Coat => 1,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Combine {
    Mix(Binding),
    Coat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialGraph {
    pub lobes: Vec<Lobe>,
    /// `combine[k]` joins lobe `k + 1` onto the stack of lobes `0..=k`.
    pub combine: Vec<Combine>,
}

/// Named parameter textures, all at the material's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTextures {
    pub width: usize,
    pub height: usize,
    pub names: Vec<String>,
    pub images: Vec<Image>,
}

impl ParamTextures {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            names: Vec::new(),
            images: Vec::new(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn insert(&mut self, name: &str, image: Image) -> Result<(), MaterialError> {
        if image.width != self.width || image.height != self.height {
            return Err(MaterialError::Resolution {
                name: name.into(),
                w: image.width,
                h: image.height,
                mw: self.width,
                mh: self.height,
            });
        }
        if image.data.iter().any(|v| !v.is_finite()) {
            return Err(MaterialError::NonFinite(name.into()));
        }
        match self.index_of(name) {
            Some(i) => self.images[i] = image,
            None => {
                self.names.push(name.into());
                self.images.push(image);
            }
        }
        Ok(())
    }
}

/// Gaussian footprint of a lookup: `sigma` is in level-0 texels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterFootprint {
    pub uv: [f64; 2],
    pub sigma: f64,
}

/// Fractional pyramid level that matches a Gaussian footprint of `sigma`
/// level-0 texels (inverse of [`level_sigma`]).
pub fn sigma_to_level(sigma: f64) -> f64 {
    if sigma <= 0.5 {
        0.0
    } else {
        (2.0 * sigma).log2()
    }
}

/// Compiled reference material: graph, textures, the level-0 raw parameter
/// image used for evaluation and the LEAN moment pyramid used for encoder
/// inputs.
#[derive(Debug, Clone)]
pub struct ReferenceMaterial {
    pub graph: MaterialGraph,
    pub textures: ParamTextures,
    raw: Image,
    moments: Vec<Image>,
    param_dim: usize,
}

/// Resolved parameters of one microfacet lobe at a point.
#[derive(Debug, Clone, Copy)]
struct Microfacet {
    ax: f64,
    ay: f64,
    frame: Frame,
}

impl Microfacet {
    fn from_raw(ax: f64, ay: f64, rotation: f64, sx: f64, sy: f64) -> Self {
        let n = Vec3::new(-sx, -sy, 1.0).normalize();
        let t0 = Vec3::new(rotation.cos(), rotation.sin(), 0.0);
        // orthonormalize the rotated tangent against the shading normal
        let b = n.cross(t0).normalize();
        let t = b.cross(n);
        Microfacet {
            ax: ax.clamp(MIN_ALPHA, 1.0),
            ay: ay.clamp(MIN_ALPHA, 1.0),
            frame: Frame { t, b, n },
        }
    }

    fn eval(&self, wi: Vec3, wo: Vec3, f0: f64) -> f64 {
        let li = self.frame.to_local(wi);
        let lo = self.frame.to_local(wo);
        let base = ggx::reflectance(li, lo, self.ax, self.ay);
        if base == 0.0 {
            return 0.0;
        }
        let h = (li + lo).normalize();
        base * ggx::schlick(f0, li.dot(h))
    }

    fn eval_color(&self, wi: Vec3, wo: Vec3, f0: [f64; 3]) -> Spectrum {
        let li = self.frame.to_local(wi);
        let lo = self.frame.to_local(wo);
        let base = ggx::reflectance(li, lo, self.ax, self.ay);
        if base == 0.0 {
            return Spectrum::ZERO;
        }
        let c = li.dot((li + lo).normalize());
        Spectrum::new(
            base * ggx::schlick(f0[0], c),
            base * ggx::schlick(f0[1], c),
            base * ggx::schlick(f0[2], c),
        )
    }

    fn sample(&self, wi: Vec3, u: [f64; 2]) -> Vec3 {
        let li = self.frame.to_local(wi);
        let h = ggx::sample_ndf(u, self.ax, self.ay);
        self.frame.to_world(li.reflect(h))
    }

    fn pdf(&self, wi: Vec3, wo: Vec3) -> f64 {
        ggx::reflected_pdf(self.frame.to_local(wi), self.frame.to_local(wo), self.ax, self.ay)
    }
}

fn roughness_matrix(ax: f64, ay: f64, rot: f64) -> [f64; 3] {
    let (s, c) = rot.sin_cos();
    let (x2, y2) = (ax * ax, ay * ay);
    [c * c * x2 + s * s * y2, s * s * x2 + c * c * y2, c * s * (x2 - y2)]
}

/// How a resolved layer joins the stack beneath it.
#[derive(Clone, Copy)]
enum Join {
    Mix(f64),
    Coat,
}

/// One resolved evaluation layer at a surface point.
enum Layer {
    Lambert([f64; 3]),
    Conductor([f64; 3], Microfacet),
    Coat(f64, Microfacet),
}

impl ReferenceMaterial {
    pub fn new(graph: MaterialGraph, textures: ParamTextures) -> Result<Self, MaterialError> {
        let n = graph.lobes.len();
        if n == 0 || n > MAX_LOBES {
            return Err(MaterialError::LobeCount(n));
        }
        if graph.combine.len() != n - 1 {
            return Err(MaterialError::CombineCount {
                lobes: n,
                expected: n - 1,
                got: graph.combine.len(),
            });
        }
        let raw_width: usize = graph.lobes.iter().map(Lobe::raw_width).sum::<usize>()
            + graph
                .combine
                .iter()
                .filter(|c| matches!(c, Combine::Mix(_)))
                .count();
        let (w, h) = (textures.width, textures.height);
        let raw = Image::from_fn(w, h, raw_width, |x, y, out| {
            let mut k = 0;
            let mut put = |vals: &[f64]| {
                for v in vals {
                    out[k] = *v as f32;
                    k += 1;
                }
            };
            for (i, lobe) in graph.lobes.iter().enumerate() {
                if i > 0 {
                    if let Combine::Mix(b) = &graph.combine[i - 1] {
                        let mut wv = [0.0];
                        b.fetch(&textures, x, y, &mut wv);
                        put(&[wv[0].clamp(0.0, 1.0)]);
                    }
                }
                let mut color = [0.0; 3];
                let cw = lobe.color_width();
                lobe.color.fetch(&textures, x, y, &mut color[..cw]);
                color.iter_mut().for_each(|c| *c = c.max(0.0));
                put(&color[..cw]);
                if lobe.kind == LobeKind::Lambertian {
                    continue;
                }
                let mut r = [0.0];
                let mut a = [0.0];
                let mut rot = [0.0];
                let mut s = [0.0; 2];
                lobe.roughness.fetch(&textures, x, y, &mut r);
                lobe.anisotropy.fetch(&textures, x, y, &mut a);
                lobe.rotation.fetch(&textures, x, y, &mut rot);
                lobe.normal.fetch(&textures, x, y, &mut s);
                let alpha = r[0].clamp(MIN_ALPHA, 1.0);
                let ay = (alpha * (1.0 - a[0].clamp(0.0, 0.95))).max(MIN_ALPHA);
                put(&[alpha, ay, rot[0], s[0], s[1]]);
            }
        });

        let moment_width: usize = graph.lobes.iter().map(Lobe::moment_width).sum::<usize>()
            + raw_width
            - graph.lobes.iter().map(Lobe::raw_width).sum::<usize>();
        let moment_base = Image::from_fn(w, h, moment_width, |x, y, out| {
            let t = raw.texel(x, y);
            let mut ri = 0;
            let mut mi = 0;
            for (i, lobe) in graph.lobes.iter().enumerate() {
                if i > 0 && matches!(graph.combine[i - 1], Combine::Mix(_)) {
                    out[mi] = t[ri];
                    ri += 1;
                    mi += 1;
                }
                let cw = lobe.color_width();
                out[mi..mi + cw].copy_from_slice(&t[ri..ri + cw]);
                ri += cw;
                mi += cw;
                if lobe.kind == LobeKind::Lambertian {
                    continue;
                }
                let (ax, ay, rot, sx, sy) = (
                    t[ri] as f64,
                    t[ri + 1] as f64,
                    t[ri + 2] as f64,
                    t[ri + 3] as f64,
                    t[ri + 4] as f64,
                );
                ri += 5;
                let a = roughness_matrix(ax, ay, rot);
                let m = [sx, sy, sx * sx, sy * sy, sx * sy, a[0], a[1], a[2]];
                for (o, v) in out[mi..mi + 8].iter_mut().zip(m) {
                    *o = v as f32;
                }
                mi += 8;
            }
        });
        let moments = gaussian_pyramid(&moment_base, level_count(w, h));
        let param_dim = graph.lobes.iter().map(Lobe::param_width).sum::<usize>()
            + raw_width
            - graph.lobes.iter().map(Lobe::raw_width).sum::<usize>();
        Ok(Self {
            graph,
            textures,
            raw,
            moments,
            param_dim,
        })
    }

    pub fn width(&self) -> usize {
        self.textures.width
    }

    pub fn height(&self) -> usize {
        self.textures.height
    }

    pub fn levels(&self) -> usize {
        self.moments.len()
    }

    /// Length of the filtered parameter vector `k` returned by [`Self::fetch_params`].
    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn raw_param_dim(&self) -> usize {
        self.raw.channels
    }

    /// Unfiltered per-point parameters (bilinear on level 0).
    pub fn raw_params(&self, uv: [f64; 2], out: &mut Vec<f64>) {
        out.resize(self.raw.channels, 0.0);
        self.raw.bilinear(uv[0], uv[1], out);
    }

    fn layers(&self, p: &[f64]) -> Vec<(Option<Join>, Layer)> {
        let mut out = Vec::with_capacity(self.graph.lobes.len());
        let mut i = 0;
        for (k, lobe) in self.graph.lobes.iter().enumerate() {
            let combine = if k == 0 {
                None
            } else {
                Some(match &self.graph.combine[k - 1] {
                    Combine::Mix(_) => {
                        let w = p[i];
                        i += 1;
                        Join::Mix(w)
                    }
                    Combine::Coat => Join::Coat,
                })
            };
            let layer = match lobe.kind {
                LobeKind::Lambertian => {
                    let l = Layer::Lambert([p[i], p[i + 1], p[i + 2]]);
                    i += 3;
                    l
                }
                LobeKind::Conductor => {
                    let c = [p[i], p[i + 1], p[i + 2]];
                    let m = Microfacet::from_raw(p[i + 3], p[i + 4], p[i + 5], p[i + 6], p[i + 7]);
                    i += 8;
                    Layer::Conductor(c, m)
                }
                LobeKind::Coat => {
                    let m = Microfacet::from_raw(p[i + 1], p[i + 2], p[i + 3], p[i + 4], p[i + 5]);
                    let s = p[i];
                    i += 6;
                    Layer::Coat(s, m)
                }
            };
            out.push((combine, layer));
        }
        out
    }

    /// Evaluates the BRDF (sr^-1) from an unfiltered parameter vector.
    pub fn eval_params(&self, p: &[f64], wi: Direction, wo: Direction) -> Spectrum {
        if wi.z <= 0.0 || wo.z <= 0.0 {
            return Spectrum::ZERO;
        }
        let mut acc = Spectrum::ZERO;
        for (combine, layer) in self.layers(p) {
            let value = match &layer {
                Layer::Lambert(a) => Spectrum::from_array(*a) / PI,
                Layer::Conductor(c, m) => m.eval_color(wi, wo, *c),
                Layer::Coat(s, m) => Spectrum::splat(m.eval(wi, wo, *s)),
            };
            acc = match combine {
                None => value,
                Some(Join::Mix(w)) => acc * (1.0 - w) + value * w,
                Some(Join::Coat) => {
                    let s = match layer {
                        Layer::Coat(s, _) => s,
                        _ => 0.04,
                    };
                    let att = (1.0 - ggx::schlick(s, wi.z)) * (1.0 - ggx::schlick(s, wo.z));
                    acc * att + value
                }
            };
        }
        acc
    }

    /// `f(x, w_i, w_o)` at `uv`; zero when either direction is below the horizon.
    pub fn eval(&self, uv: [f64; 2], wi: Direction, wo: Direction) -> Spectrum {
        if wi.z <= 0.0 || wo.z <= 0.0 {
            return Spectrum::ZERO;
        }
        let mut p = [0.0f64; 64];
        let n = self.raw.channels;
        self.raw.bilinear(uv[0], uv[1], &mut p[..n]);
        self.eval_params(&p[..n], wi, wo)
    }

    /// Average of [`Self::eval`] over `n_samples` directions drawn uniformly
    /// in the cone of half-angle `cone_angle` around `wo`.
    pub fn eval_mollified<R: Rng + ?Sized>(
        &self,
        uv: [f64; 2],
        wi: Direction,
        wo: Direction,
        cone_angle: f64,
        n_samples: usize,
        rng: &mut R,
    ) -> Spectrum {
        if cone_angle <= 0.0 || n_samples == 0 {
            return self.eval(uv, wi, wo);
        }
        let frame = Frame::from_normal(wo);
        let mut acc = Spectrum::ZERO;
        for _ in 0..n_samples {
            let d = frame.to_world(sample_uniform_cone([rng.gen(), rng.gen()], cone_angle));
            acc += self.eval(uv, wi, d);
        }
        acc / n_samples as f64
    }

    /// Monte Carlo estimate of the directional albedo for fixed `wo`,
    /// integrating over `w_i` with cosine-weighted sampling.
    pub fn estimate_albedo<R: Rng + ?Sized>(
        &self,
        uv: [f64; 2],
        wo: Direction,
        n_samples: usize,
        rng: &mut R,
    ) -> Spectrum {
        if wo.z <= 0.0 {
            return Spectrum::ZERO;
        }
        let mut acc = Spectrum::ZERO;
        for _ in 0..n_samples {
            let wi = sample_cosine_hemisphere([rng.gen(), rng.gen()]);
            if wi.z <= 0.0 {
                continue;
            }
            // f cos / (cos / pi)
            acc += self.eval(uv, wi, wo) * PI;
        }
        acc / n_samples.max(1) as f64
    }

    /// LEAN-prefiltered parameter vector for a Gaussian footprint.
    pub fn fetch_params(&self, fp: FilterFootprint, out: &mut Vec<f64>) {
        let level = sigma_to_level(fp.sigma).min((self.moments.len() - 1) as f64);
        let l0 = level.floor() as usize;
        let frac = level - l0 as f64;
        let c = self.moments[0].channels;
        let mut m = vec![0.0; c];
        self.moments[l0].bilinear(fp.uv[0], fp.uv[1], &mut m);
        if frac > 0.0 {
            let mut m1 = vec![0.0; c];
            self.moments[l0 + 1].bilinear(fp.uv[0], fp.uv[1], &mut m1);
            for (a, b) in m.iter_mut().zip(&m1) {
                *a = (1.0 - frac) * *a + frac * b;
            }
        }
        self.moments_to_params(&m, out);
    }

    /// Parameter vector of level-`level` texel `(x, y)` of the moment pyramid.
    pub fn texel_params(&self, level: usize, x: usize, y: usize, out: &mut Vec<f64>) {
        let m: Vec<f64> = self.moments[level]
            .texel(x, y)
            .iter()
            .map(|&v| v as f64)
            .collect();
        self.moments_to_params(&m, out);
    }

    fn moments_to_params(&self, m: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let mut i = 0;
        for (k, lobe) in self.graph.lobes.iter().enumerate() {
            if k > 0 && matches!(self.graph.combine[k - 1], Combine::Mix(_)) {
                out.push(m[i]);
                i += 1;
            }
            let cw = lobe.color_width();
            out.extend_from_slice(&m[i..i + cw]);
            i += cw;
            if lobe.kind == LobeKind::Lambertian {
                continue;
            }
            let (sx, sy) = (m[i], m[i + 1]);
            let (sxx, syy, sxy) = (m[i + 2], m[i + 3], m[i + 4]);
            let (axx, ayy, axy) = (m[i + 5], m[i + 6], m[i + 7]);
            i += 8;
            let vx = (sxx - sx * sx).max(0.0);
            let vy = (syy - sy * sy).max(0.0);
            let cxy = sxy - sx * sy;
            out.extend_from_slice(&[sx, sy, axx + 2.0 * vx, ayy + 2.0 * vy, axy + 2.0 * cxy]);
        }
    }

    /// Lobe-selection weights for importance sampling at a point; they only
    /// depend on `uv` and `wi`.
    fn lobe_weights(&self, layers: &[(Option<Join>, Layer)], wi: Vec3) -> Vec<f64> {
        let n = layers.len();
        let mut w = vec![0.0; n];
        // walk from the top layer down, tracking how much of the stack below remains visible
        let mut visible = 1.0;
        for k in (0..n).rev() {
            let (combine, layer) = &layers[k];
            let strength = match layer {
                Layer::Lambert(a) => Spectrum::from_array(*a).luminance(),
                Layer::Conductor(c, _) => Spectrum::from_array(*c).luminance().max(0.05),
                Layer::Coat(s, _) => ggx::schlick(*s, wi.z).max(0.05),
            };
            let (own, below) = match combine {
                None => (1.0, 0.0),
                Some(Join::Mix(m)) => (*m, 1.0 - m),
                Some(Join::Coat) => {
                    let s = match layer {
                        Layer::Coat(s, _) => *s,
                        _ => 0.04,
                    };
                    (1.0, 1.0 - ggx::schlick(s, wi.z))
                }
            };
            w[k] = visible * own * strength;
            visible *= below;
        }
        let s: f64 = w.iter().sum();
        if s <= 0.0 {
            let v = 1.0 / n as f64;
            w.iter_mut().for_each(|x| *x = v);
        } else {
            w.iter_mut().for_each(|x| *x /= s);
        }
        w
    }

    fn lobe_pdf(layer: &Layer, wi: Vec3, wo: Vec3) -> f64 {
        match layer {
            Layer::Lambert(_) => {
                if wo.z > 0.0 {
                    wo.z / PI
                } else {
                    0.0
                }
            }
            Layer::Conductor(_, m) | Layer::Coat(_, m) => m.pdf(wi, wo),
        }
    }

    /// Density (solid angle) of [`Self::sample`] at `wo`.
    pub fn pdf(&self, uv: [f64; 2], wi: Direction, wo: Direction) -> f64 {
        if wi.z <= 0.0 || wo.z <= 0.0 {
            return 0.0;
        }
        let mut p = Vec::new();
        self.raw_params(uv, &mut p);
        let layers = self.layers(&p);
        let w = self.lobe_weights(&layers, wi);
        layers
            .iter()
            .zip(&w)
            .map(|((_, l), wk)| wk * Self::lobe_pdf(l, wi, wo))
            .sum()
    }

    /// One-sample lobe mixture: picks a lobe with `u[0]`, samples it with
    /// `u[1..]`. Returns `None` for directions below the horizon.
    pub fn sample(&self, uv: [f64; 2], wi: Direction, u: [f64; 3]) -> Option<(Direction, f64)> {
        if wi.z <= 0.0 {
            return None;
        }
        let mut p = Vec::new();
        self.raw_params(uv, &mut p);
        let layers = self.layers(&p);
        let w = self.lobe_weights(&layers, wi);
        let mut pick = layers.len() - 1;
        let mut acc = 0.0;
        for (k, wk) in w.iter().enumerate() {
            acc += wk;
            if u[0] < acc {
                pick = k;
                break;
            }
        }
        let wo = match &layers[pick].1 {
            Layer::Lambert(_) => sample_cosine_hemisphere([u[1], u[2]]),
            Layer::Conductor(_, m) | Layer::Coat(_, m) => m.sample(wi, [u[1], u[2]]),
        };
        if wo.z <= 0.0 {
            return None;
        }
        let pdf: f64 = layers
            .iter()
            .zip(&w)
            .map(|((_, l), wk)| wk * Self::lobe_pdf(l, wi, wo))
            .sum();
        if pdf > 0.0 {
            Some((wo, pdf))
        } else {
            None
        }
    }

    // -----------------------------------------------------------------------
    // construction helpers

    pub fn from_desc(desc: &MaterialDesc, base_dir: Option<&Path>) -> Result<Self, MaterialError> {
        let mut textures = ParamTextures::new(desc.width, desc.height);
        for (name, t) in &desc.textures {
            let img = build_texture(t, desc.width, desc.height, base_dir)?;
            textures.insert(name, img)?;
        }
        let bind = |b: &Option<BindingDesc>, width: usize, default: f64| match b {
            Some(b) => Binding::resolve(b, width, &textures),
            None => Ok(Binding::Const(vec![default; width])),
        };
        let mut lobes = Vec::new();
        for l in &desc.lobes {
            let lobe = match l {
                LobeDesc::Lambertian { albedo } => Lobe {
                    kind: LobeKind::Lambertian,
                    color: Binding::resolve(albedo, 3, &textures)?,
                    roughness: Binding::Const(vec![1.0]),
                    anisotropy: Binding::Const(vec![0.0]),
                    rotation: Binding::Const(vec![0.0]),
                    normal: Binding::Const(vec![0.0, 0.0]),
                },
                LobeDesc::Conductor {
                    f0,
                    roughness,
                    anisotropy,
                    rotation,
                    normal,
                } => Lobe {
                    kind: LobeKind::Conductor,
                    color: Binding::resolve(f0, 3, &textures)?,
                    roughness: Binding::resolve(roughness, 1, &textures)?,
                    anisotropy: bind(anisotropy, 1, 0.0)?,
                    rotation: bind(rotation, 1, 0.0)?,
                    normal: bind(normal, 2, 0.0)?,
                },
                LobeDesc::Coat {
                    specularity,
                    roughness,
                    anisotropy,
                    rotation,
                    normal,
                } => Lobe {
                    kind: LobeKind::Coat,
                    color: Binding::resolve(specularity, 1, &textures)?,
                    roughness: Binding::resolve(roughness, 1, &textures)?,
                    anisotropy: bind(anisotropy, 1, 0.0)?,
                    rotation: bind(rotation, 1, 0.0)?,
                    normal: bind(normal, 2, 0.0)?,
                },
            };
            lobes.push(lobe);
        }
        let combine = desc
            .combine
            .iter()
            .map(|c| match c {
                CombineDesc::Mix { weight } => Ok(Combine::Mix(Binding::resolve(weight, 1, &textures)?)),
                CombineDesc::Coat => Ok(Combine::Coat),
            })
            .collect::<Result<Vec<_>, MaterialError>>()?;
        Self::new(MaterialGraph { lobes, combine }, textures)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MaterialError> {
        let path = path.as_ref();
        let desc: MaterialDesc = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_desc(&desc, path.parent())
    }
}

// ---------------------------------------------------------------------------
// Procedural textures

fn hash2(seed: u64, x: i64, y: i64, c: u64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Tileable smooth value noise in [0, 1] and its gradient (per unit uv).
fn value_noise(seed: u64, cells: usize, c: u64, u: f64, v: f64) -> (f64, f64, f64) {
    let fx = u * cells as f64;
    let fy = v * cells as f64;
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - x0, fy - y0);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let dsmooth = |t: f64| 6.0 * t * (1.0 - t);
    let n = cells as i64;
    let g = |i: f64, j: f64| hash2(seed, (i as i64).rem_euclid(n), (j as i64).rem_euclid(n), c);
    let (a, b, cc, d) = (g(x0, y0), g(x0 + 1.0, y0), g(x0, y0 + 1.0), g(x0 + 1.0, y0 + 1.0));
    let (sx, sy) = (smooth(tx), smooth(ty));
    let val = a + (b - a) * sx + (cc - a) * sy + (a - b - cc + d) * sx * sy;
    let dx = ((b - a) + (a - b - cc + d) * sy) * dsmooth(tx) * cells as f64;
    let dy = ((cc - a) + (a - b - cc + d) * sx) * dsmooth(ty) * cells as f64;
    (val, dx, dy)
}

fn build_texture(
    desc: &TextureDesc,
    w: usize,
    h: usize,
    base_dir: Option<&Path>,
) -> Result<Image, MaterialError> {
    let center = |x: usize, y: usize| ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
    let img = match desc {
        TextureDesc::File { path } => {
            let full = match base_dir {
                Some(d) if path.is_relative() => d.join(path),
                _ => path.clone(),
            };
            let pfm = PfmImage::read(&full)?;
            Image {
                width: pfm.width,
                height: pfm.height,
                channels: pfm.channels,
                data: pfm.data,
            }
        }
        TextureDesc::Constant { value } => Image::from_fn(w, h, value.len(), |_, _, t| {
            for (o, v) in t.iter_mut().zip(value) {
                *o = *v as f32;
            }
        }),
        TextureDesc::Checker { cells, a, b } => Image::from_fn(w, h, a.len(), |x, y, t| {
            let (u, v) = center(x, y);
            let cx = (u * *cells as f64) as usize;
            let cy = (v * *cells as f64) as usize;
            let src = if (cx + cy) % 2 == 0 { a } else { b };
            for (o, v) in t.iter_mut().zip(src) {
                *o = *v as f32;
            }
        }),
        TextureDesc::Ramp { from, to, axis } => Image::from_fn(w, h, from.len(), |x, y, t| {
            let (u, v) = center(x, y);
            let s = if *axis == 0 { u } else { v };
            for ((o, a), b) in t.iter_mut().zip(from).zip(to) {
                *o = (a + (b - a) * s) as f32;
            }
        }),
        TextureDesc::ValueNoise {
            cells,
            min,
            max,
            seed,
        } => Image::from_fn(w, h, min.len(), |x, y, t| {
            let (u, v) = center(x, y);
            for (c, o) in t.iter_mut().enumerate() {
                let (n, _, _) = value_noise(*seed, *cells, c as u64, u, v);
                *o = (min[c] + (max[c] - min[c]) * n) as f32;
            }
        }),
        TextureDesc::NoiseSlopes {
            cells,
            amplitude,
            seed,
        } => Image::from_fn(w, h, 2, |x, y, t| {
            let (u, v) = center(x, y);
            let (_, dx, dy) = value_noise(*seed, *cells, 0, u, v);
            // normalize so the slope magnitude scale is independent of `cells`
            let k = amplitude / (1.5 * *cells as f64);
            t[0] = (dx * k) as f32;
            t[1] = (dy * k) as f32;
        }),
        TextureDesc::CheckerSlopes { cells, slope } => Image::from_fn(w, h, 2, |x, y, t| {
            let (u, v) = center(x, y);
            let cx = (u * *cells as f64) as usize;
            let cy = (v * *cells as f64) as usize;
            let s = if (cx + cy) % 2 == 0 { 1.0 } else { -1.0 };
            t[0] = (slope[0] * s) as f32;
            t[1] = (slope[1] * s) as f32;
        }),
    };
    Ok(img)
}

/// The built-in two-layer normal-mapped material: a mix of a textured
/// Lambertian base and an anisotropic gold-like conductor, under a GGX coat
/// with a value-noise normal map.
pub fn builtin_layered_desc(resolution: usize) -> MaterialDesc {
    let mut textures = BTreeMap::new();
    textures.insert(
        "base_albedo".into(),
        TextureDesc::ValueNoise {
            cells: 4,
            min: vec![0.05, 0.15, 0.35],
            max: vec![0.6, 0.45, 0.2],
            seed: 7,
        },
    );
    textures.insert(
        "metal_mask".into(),
        TextureDesc::Checker {
            cells: 4,
            a: vec![0.0],
            b: vec![1.0],
        },
    );
    textures.insert(
        "metal_roughness".into(),
        TextureDesc::ValueNoise {
            cells: 8,
            min: vec![0.15],
            max: vec![0.45],
            seed: 11,
        },
    );
    textures.insert(
        "coat_normals".into(),
        TextureDesc::NoiseSlopes {
            cells: 16,
            amplitude: 0.6,
            seed: 3,
        },
    );
    MaterialDesc {
        width: resolution,
        height: resolution,
        textures,
        lobes: vec![
            LobeDesc::Lambertian {
                albedo: BindingDesc::Texture {
                    texture: "base_albedo".into(),
                    scale: 1.0,
                },
            },
            LobeDesc::Conductor {
                f0: BindingDesc::Vector(vec![0.95, 0.64, 0.37]),
                roughness: BindingDesc::Texture {
                    texture: "metal_roughness".into(),
                    scale: 1.0,
                },
                anisotropy: Some(BindingDesc::Scalar(0.5)),
                rotation: Some(BindingDesc::Scalar(0.6)),
                normal: None,
            },
            LobeDesc::Coat {
                specularity: BindingDesc::Scalar(0.04),
                roughness: BindingDesc::Scalar(0.15),
                anisotropy: None,
                rotation: None,
                normal: Some(BindingDesc::Texture {
                    texture: "coat_normals".into(),
                    scale: 1.0,
                }),
            },
        ],
        combine: vec![
            CombineDesc::Mix {
                weight: BindingDesc::Texture {
                    texture: "metal_mask".into(),
                    scale: 1.0,
                },
            },
            CombineDesc::Coat,
        ],
    }
}

pub fn builtin_layered(resolution: usize) -> ReferenceMaterial {
    ReferenceMaterial::from_desc(&builtin_layered_desc(resolution), None)
        .expect("built-in material is valid")
}

/// Single constant Lambertian lobe.
pub fn lambertian_desc(resolution: usize, albedo: [f64; 3]) -> MaterialDesc {
    MaterialDesc {
        width: resolution,
        height: resolution,
        textures: BTreeMap::new(),
        lobes: vec![LobeDesc::Lambertian {
            albedo: BindingDesc::Vector(albedo.to_vec()),
        }],
        combine: vec![],
    }
}

pub fn lambertian(resolution: usize, albedo: [f64; 3]) -> ReferenceMaterial {
    ReferenceMaterial::from_desc(&lambertian_desc(resolution, albedo), None)
        .expect("lambertian material is valid")
}

/// Where a reference material comes from: a material JSON file or one of
/// the built-ins (`"layered"`, `"lambertian"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSource {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub builtin: Option<String>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_albedo")]
    pub albedo: [f64; 3],
}

fn default_resolution() -> usize {
    128
}

fn default_albedo() -> [f64; 3] {
    [0.5; 3]
}

impl ReferenceSource {
    pub fn builtin(name: &str, resolution: usize) -> Self {
        Self {
            path: None,
            builtin: Some(name.into()),
            resolution,
            albedo: default_albedo(),
        }
    }

    /// Loads the material; relative paths resolve against `base_dir`.
    pub fn resolve(&self, base_dir: Option<&Path>) -> Result<ReferenceMaterial, MaterialError> {
        match (&self.path, self.builtin.as_deref()) {
            (Some(p), None) => ReferenceMaterial::load(match base_dir {
                Some(b) if p.is_relative() => b.join(p),
                _ => p.clone(),
            }),
            (None, Some(name)) => {
                if !(2..=8192).contains(&self.resolution) {
                    return Err(MaterialError::Invalid(format!("resolution {} out of range", self.resolution)));
                }
                match name {
                    "layered" => Ok(builtin_layered(self.resolution)),
                    "lambertian" => ReferenceMaterial::from_desc(&lambertian_desc(self.resolution, self.albedo), None),
                    other => Err(MaterialError::Invalid(format!("unknown built-in material {other:?}"))),
                }
            }
            _ => Err(MaterialError::Invalid("give exactly one of `path` or `builtin`".into())),
        }
    }
}

/// Deterministic rng for callers that only need reproducible noise.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
