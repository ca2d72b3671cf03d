//! Scene description, geometry, acceleration structure and camera.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geom::{Frame, Spectrum, Vec3};
use crate::neural::NeuralMaterial;
use crate::reference::{ReferenceMaterial, ReferenceSource};

use super::RenderError;

// ---------------------------------------------------------------------------
// JSON description

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDesc {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaterialBindingDesc {
    Reference(ReferenceSource),
    Neural { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformDesc {
    #[serde(default)]
    pub translate: [f64; 3],
    #[serde(default = "unit_scale")]
    pub scale: f64,
    /// Rotation about `axis` by `angle_deg`, applied before the translation.
    #[serde(default)]
    pub axis: Option<[f64; 3]>,
    #[serde(default)]
    pub angle_deg: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for TransformDesc {
    fn default() -> Self {
        Self {
            translate: [0.0; 3],
            scale: 1.0,
            axis: None,
            angle_deg: 0.0,
        }
    }
}

impl TransformDesc {
    fn point(&self, p: Vec3) -> Vec3 {
        self.vector(p) + Vec3::from(self.translate)
    }

    fn vector(&self, v: Vec3) -> Vec3 {
        let v = v * self.scale;
        match self.axis {
            Some(a) if self.angle_deg != 0.0 => {
                // Rodrigues
                let k = Vec3::from(a).normalize();
                let (s, c) = self.angle_deg.to_radians().sin_cos();
                v * c + k.cross(v) * s + k * (k.dot(v) * (1.0 - c))
            }
            _ => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectDesc {
    Sphere {
        center: [f64; 3],
        radius: f64,
        material: String,
        #[serde(default)]
        transform: Option<TransformDesc>,
    },
    /// Parallelogram `origin + s edge_u + t edge_v`, `uv = (s, t) * uv_scale`.
    Quad {
        origin: [f64; 3],
        edge_u: [f64; 3],
        edge_v: [f64; 3],
        material: String,
        #[serde(default = "unit_uv")]
        uv_scale: [f64; 2],
        #[serde(default)]
        transform: Option<TransformDesc>,
    },
    Mesh {
        positions: Vec<[f64; 3]>,
        uvs: Vec<[f64; 2]>,
        indices: Vec<[usize; 3]>,
        material: String,
        #[serde(default)]
        transform: Option<TransformDesc>,
    },
}

fn unit_uv() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmitterDesc {
    Environment {
        radiance: [f64; 3],
    },
    /// One-sided emitter facing `edge_u x edge_v`.
    AreaQuad {
        origin: [f64; 3],
        edge_u: [f64; 3],
        edge_v: [f64; 3],
        radiance: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDesc {
    pub camera: CameraDesc,
    pub materials: BTreeMap<String, MaterialBindingDesc>,
    #[serde(default)]
    pub objects: Vec<ObjectDesc>,
    #[serde(default)]
    pub emitters: Vec<EmitterDesc>,
    #[serde(default)]
    pub render: Option<super::RenderConfig>,
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

// ---------------------------------------------------------------------------
// Resolved scene

#[derive(Debug, Clone)]
pub enum MaterialBinding {
    Reference(Arc<ReferenceMaterial>),
    Neural(Arc<NeuralMaterial>),
}

impl MaterialBinding {
    /// Texture resolution used for footprint-to-level conversion.
    pub fn texture_size(&self) -> (usize, usize) {
        match self {
            Self::Reference(m) => (m.width(), m.height()),
            Self::Neural(m) => m.latent.as_ref().map_or((1, 1), |l| (l.width(), l.height())),
        }
    }

    pub fn levels(&self) -> usize {
        match self {
            Self::Reference(m) => m.levels(),
            Self::Neural(m) => m.latent.as_ref().map_or(1, |l| l.levels()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub o: Vec3,
    pub d: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.o + self.d * t
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Sphere { c: Vec3, r: f64 },
    Parallelogram { o: Vec3, u: Vec3, v: Vec3, uv_scale: [f64; 2] },
    Triangle { p: [Vec3; 3], uv: [[f64; 2]; 3] },
}

#[derive(Debug, Clone, Copy)]
struct Primitive {
    shape: Shape,
    /// Material index, or emitter index when `emitter` is set.
    id: usize,
    emitter: bool,
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    const EMPTY: Aabb = Aabb {
        lo: Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        hi: Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };

    fn grow(self, o: Aabb) -> Aabb {
        Aabb {
            lo: self.lo.min(o.lo),
            hi: self.hi.max(o.hi),
        }
    }

    fn center(&self) -> Vec3 {
        (self.lo + self.hi) * 0.5
    }

    fn hit(&self, o: Vec3, inv_d: Vec3, t_max: f64) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let ta = (self.lo[a] - o[a]) * inv_d[a];
            let tb = (self.hi[a] - o[a]) * inv_d[a];
            let (ta, tb) = if ta < tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

impl Shape {
    fn bounds(&self) -> Aabb {
        match *self {
            Shape::Sphere { c, r } => Aabb {
                lo: c - Vec3::splat(r),
                hi: c + Vec3::splat(r),
            },
            Shape::Parallelogram { o, u, v, .. } => [o + u, o + v, o + u + v].iter().fold(
                Aabb { lo: o, hi: o },
                |b, &p| b.grow(Aabb { lo: p, hi: p }),
            ),
            Shape::Triangle { p, .. } => Aabb {
                lo: p[0].min(p[1]).min(p[2]),
                hi: p[0].max(p[1]).max(p[2]),
            },
        }
    }

    fn intersect(&self, ray: &Ray, t_max: f64) -> Option<f64> {
        const T_MIN: f64 = 1e-7;
        match *self {
            Shape::Sphere { c, r } => {
                let oc = ray.o - c;
                let b = oc.dot(ray.d);
                let cc = oc.dot(oc) - r * r;
                let disc = b * b - cc;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let eps = T_MIN * (1.0 + r);
                [-b - s, -b + s].into_iter().find(|&t| t > eps && t < t_max)
            }
            Shape::Parallelogram { o, u, v, .. } => {
                let n = u.cross(v);
                let denom = n.dot(ray.d);
                if denom.abs() < 1e-14 {
                    return None;
                }
                let t = n.dot(o - ray.o) / denom;
                if !(t > T_MIN && t < t_max) {
                    return None;
                }
                let (s, w) = para_coords(o, u, v, ray.at(t));
                ((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&w)).then_some(t)
            }
            Shape::Triangle { p, .. } => {
                // Moller-Trumbore
                let e1 = p[1] - p[0];
                let e2 = p[2] - p[0];
                let pv = ray.d.cross(e2);
                let det = e1.dot(pv);
                if det.abs() < 1e-14 {
                    return None;
                }
                let inv = 1.0 / det;
                let tv = ray.o - p[0];
                let b1 = tv.dot(pv) * inv;
                if !(0.0..=1.0).contains(&b1) {
                    return None;
                }
                let qv = tv.cross(e1);
                let b2 = ray.d.dot(qv) * inv;
                if b2 < 0.0 || b1 + b2 > 1.0 {
                    return None;
                }
                let t = e2.dot(qv) * inv;
                (t > T_MIN && t < t_max).then_some(t)
            }
        }
    }
}

/// Parallelogram coordinates `(s, t)` of a point in its plane.
fn para_coords(o: Vec3, u: Vec3, v: Vec3, p: Vec3) -> (f64, f64) {
    let d = p - o;
    let uu = u.dot(u);
    let vv = v.dot(v);
    let uv = u.dot(v);
    let det = uu * vv - uv * uv;
    let du = d.dot(u);
    let dv = d.dot(v);
    ((du * vv - dv * uv) / det, (dv * uu - du * uv) / det)
}

/// Surface interaction.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub p: Vec3,
    /// Geometric normal facing the incoming ray.
    pub n: Vec3,
    /// Orthonormal shading frame around `n`, tangent along `dP/du`.
    pub frame: Frame,
    pub uv: [f64; 2],
    /// Surface area per unit UV area.
    pub area_per_uv: f64,
    /// Index of the material binding, or of the emitter.
    pub id: usize,
    pub emitter: bool,
    /// The hit is on the side the geometric normal faces.
    pub front: bool,
}

fn shading_frame(n: Vec3, dpdu: Vec3) -> Frame {
    let t = dpdu - n * n.dot(dpdu);
    let t = if t.length_squared() > 1e-20 {
        t.normalize()
    } else {
        Frame::from_normal(n).t
    };
    Frame { t, b: n.cross(t), n }
}

impl Primitive {
    fn surface(&self, ray: &Ray, t: f64) -> Hit {
        let p = ray.at(t);
        let (n_geo, dpdu, uv, area) = match self.shape {
            Shape::Sphere { c, r } => {
                let n = (p - c) / r;
                let theta = n.y.clamp(-1.0, 1.0).acos();
                let phi = n.z.atan2(n.x).rem_euclid(2.0 * std::f64::consts::PI);
                let uv = [phi / (2.0 * std::f64::consts::PI), theta / std::f64::consts::PI];
                let dpdu = Vec3::new(-n.z, 0.0, n.x) * (2.0 * std::f64::consts::PI * r);
                let area = (2.0 * std::f64::consts::PI * r) * (std::f64::consts::PI * r) * theta.sin().max(1e-6);
                (n, dpdu, uv, area)
            }
            Shape::Parallelogram { o, u, v, uv_scale } => {
                let (s, w) = para_coords(o, u, v, p);
                let n = u.cross(v);
                let area = n.length() / (uv_scale[0] * uv_scale[1]);
                (n.normalize(), u, [s * uv_scale[0], w * uv_scale[1]], area)
            }
            Shape::Triangle { p: q, uv: tuv } => {
                let e1 = q[1] - q[0];
                let e2 = q[2] - q[0];
                let n = e1.cross(e2);
                let d = p - q[0];
                let nn = n.dot(n);
                let b1 = d.cross(e2).dot(n) / nn;
                let b2 = e1.cross(d).dot(n) / nn;
                let b0 = 1.0 - b1 - b2;
                let uv = [
                    b0 * tuv[0][0] + b1 * tuv[1][0] + b2 * tuv[2][0],
                    b0 * tuv[0][1] + b1 * tuv[1][1] + b2 * tuv[2][1],
                ];
                let du1 = tuv[1][0] - tuv[0][0];
                let dv1 = tuv[1][1] - tuv[0][1];
                let du2 = tuv[2][0] - tuv[0][0];
                let dv2 = tuv[2][1] - tuv[0][1];
                let det = du1 * dv2 - du2 * dv1;
                let (dpdu, area) = if det.abs() > 1e-20 {
                    ((e1 * dv2 - e2 * dv1) / det, nn.sqrt() / det.abs())
                } else {
                    (e1, f64::INFINITY)
                };
                (n.normalize(), dpdu, uv, area)
            }
        };
        let front = n_geo.dot(ray.d) < 0.0;
        let n = if front { n_geo } else { -n_geo };
        Hit {
            t,
            p,
            n,
            frame: shading_frame(n, dpdu),
            uv,
            area_per_uv: area,
            id: self.id,
            emitter: self.emitter,
            front,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BvhNode {
    bounds: Aabb,
    /// Leaf: first primitive; interior: index of the right child.
    start: usize,
    count: usize,
}

#[derive(Debug, Clone)]
pub struct AreaLight {
    pub origin: Vec3,
    pub edge_u: Vec3,
    pub edge_v: Vec3,
    pub normal: Vec3,
    pub area: f64,
    pub radiance: Spectrum,
}

#[derive(Debug, Clone)]
pub enum Light {
    Environment(Spectrum),
    Area(AreaLight),
}

#[derive(Debug, Clone)]
pub struct Camera {
    pub position: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub tan_half_fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn from_desc(d: &CameraDesc) -> Result<Self, RenderError> {
        if d.width == 0 || d.height == 0 {
            return Err(RenderError::Scene("camera resolution must be positive".into()));
        }
        if !(d.fov_deg > 0.0 && d.fov_deg < 180.0) {
            return Err(RenderError::Scene("fov_deg must lie in (0, 180)".into()));
        }
        let position = Vec3::from(d.position);
        let forward = (Vec3::from(d.look_at) - position).normalize();
        let right = forward.cross(Vec3::from(d.up));
        if !(right.length() > 1e-9) || !forward.is_finite() {
            return Err(RenderError::Scene("degenerate camera orientation".into()));
        }
        let right = right.normalize();
        Ok(Self {
            position,
            forward,
            right,
            up: right.cross(forward),
            tan_half_fov: (d.fov_deg.to_radians() * 0.5).tan(),
            width: d.width,
            height: d.height,
        })
    }

    /// Ray through film position `(x, y)` in pixels, `y` down.
    pub fn ray(&self, x: f64, y: f64) -> Ray {
        let aspect = self.width as f64 / self.height as f64;
        let sx = (2.0 * x / self.width as f64 - 1.0) * self.tan_half_fov * aspect;
        let sy = (1.0 - 2.0 * y / self.height as f64) * self.tan_half_fov;
        Ray {
            o: self.position,
            d: (self.forward + self.right * sx + self.up * sy).normalize(),
        }
    }

    /// Angular size of one pixel at the image center.
    pub fn pixel_spread(&self) -> f64 {
        2.0 * self.tan_half_fov / self.height as f64
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub camera: Camera,
    pub materials: Vec<MaterialBinding>,
    pub material_names: Vec<String>,
    pub lights: Vec<Light>,
    prims: Vec<Primitive>,
    nodes: Vec<BvhNode>,
}

fn check_finite(v: &[f64], what: &str) -> Result<(), RenderError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(RenderError::Scene(format!("non-finite value in {what}")))
    }
}

impl Scene {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, SceneDesc), RenderError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| RenderError::Io(path.display().to_string(), e))?;
        let desc: SceneDesc = serde_json::from_slice(&bytes).map_err(|e| RenderError::Scene(e.to_string()))?;
        let scene = Self::from_desc(&desc, path.parent())?;
        Ok((scene, desc))
    }

    /// Resolves a description; material paths are relative to `base_dir`.
    pub fn from_desc(desc: &SceneDesc, base_dir: Option<&Path>) -> Result<Self, RenderError> {
        let resolve = |p: &Path| match base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        };
        let mut materials = Vec::new();
        let mut names = Vec::new();
        for (name, m) in &desc.materials {
            let b = match m {
                MaterialBindingDesc::Reference(src) => MaterialBinding::Reference(Arc::new(
                    src.resolve(base_dir)
                        .map_err(|e| RenderError::Material(name.clone(), e.to_string()))?,
                )),
                MaterialBindingDesc::Neural { path } => {
                    let mut m = NeuralMaterial::load(resolve(path)).map_err(|e| RenderError::Material(name.clone(), e.to_string()))?;
                    if m.latent.is_none() {
                        return Err(RenderError::Material(name.clone(), "archive has no latent texture".into()));
                    }
                    let clamped = m.quantize();
                    if clamped > 0 {
                        log::warn!("material {name:?}: {clamped} values clamped to the FP16 range");
                    }
                    MaterialBinding::Neural(Arc::new(m))
                }
            };
            materials.push(b);
            names.push(name.clone());
        }
        let lookup = |n: &str| {
            names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| RenderError::Scene(format!("unknown material {n:?}")))
        };
        let mut prims = Vec::new();
        for o in &desc.objects {
            match o {
                ObjectDesc::Sphere {
                    center,
                    radius,
                    material,
                    transform,
                } => {
                    check_finite(center, "sphere")?;
                    let tr = transform.clone().unwrap_or_default();
                    let r = radius * tr.scale.abs();
                    if !(r > 0.0 && r.is_finite()) {
                        return Err(RenderError::Scene("sphere radius must be positive".into()));
                    }
                    prims.push(Primitive {
                        shape: Shape::Sphere {
                            c: tr.point(Vec3::from(*center)),
                            r,
                        },
                        id: lookup(material)?,
                        emitter: false,
                    });
                }
                ObjectDesc::Quad {
                    origin,
                    edge_u,
                    edge_v,
                    material,
                    uv_scale,
                    transform,
                } => {
                    let tr = transform.clone().unwrap_or_default();
                    let (o, u, v) = (tr.point(Vec3::from(*origin)), tr.vector(Vec3::from(*edge_u)), tr.vector(Vec3::from(*edge_v)));
                    if !(u.cross(v).length() > 1e-12) || !(o.is_finite() && uv_scale.iter().all(|s| *s > 0.0)) {
                        return Err(RenderError::Scene("degenerate quad".into()));
                    }
                    prims.push(Primitive {
                        shape: Shape::Parallelogram {
                            o,
                            u,
                            v,
                            uv_scale: *uv_scale,
                        },
                        id: lookup(material)?,
                        emitter: false,
                    });
                }
                ObjectDesc::Mesh {
                    positions,
                    uvs,
                    indices,
                    material,
                    transform,
                } => {
                    if uvs.len() != positions.len() {
                        return Err(RenderError::Scene("mesh needs one uv per position".into()));
                    }
                    let tr = transform.clone().unwrap_or_default();
                    let id = lookup(material)?;
                    for tri in indices {
                        if tri.iter().any(|&i| i >= positions.len()) {
                            return Err(RenderError::Scene("mesh index out of range".into()));
                        }
                        let p = tri.map(|i| tr.point(Vec3::from(positions[i])));
                        if !p.iter().all(|q| q.is_finite()) {
                            return Err(RenderError::Scene("non-finite mesh position".into()));
                        }
                        prims.push(Primitive {
                            shape: Shape::Triangle {
                                p,
                                uv: tri.map(|i| uvs[i]),
                            },
                            id,
                            emitter: false,
                        });
                    }
                }
            }
        }
        let mut lights = Vec::new();
        let mut env_seen = false;
        for e in &desc.emitters {
            match e {
                EmitterDesc::Environment { radiance } => {
                    check_finite(radiance, "environment")?;
                    if env_seen {
                        return Err(RenderError::Scene("at most one environment emitter".into()));
                    }
                    env_seen = true;
                    lights.push(Light::Environment(Spectrum::from_array(*radiance)));
                }
                EmitterDesc::AreaQuad {
                    origin,
                    edge_u,
                    edge_v,
                    radiance,
                } => {
                    check_finite(radiance, "area light")?;
                    let (o, u, v) = (Vec3::from(*origin), Vec3::from(*edge_u), Vec3::from(*edge_v));
                    let n = u.cross(v);
                    if !(n.length() > 1e-12) {
                        return Err(RenderError::Scene("degenerate area light".into()));
                    }
                    prims.push(Primitive {
                        shape: Shape::Parallelogram {
                            o,
                            u,
                            v,
                            uv_scale: [1.0, 1.0],
                        },
                        id: lights.len(),
                        emitter: true,
                    });
                    lights.push(Light::Area(AreaLight {
                        origin: o,
                        edge_u: u,
                        edge_v: v,
                        normal: n.normalize(),
                        area: n.length(),
                        radiance: Spectrum::from_array(*radiance),
                    }));
                }
            }
        }
        let mut scene = Self {
            camera: Camera::from_desc(&desc.camera)?,
            materials,
            material_names: names,
            lights,
            prims,
            nodes: Vec::new(),
        };
        scene.build_bvh();
        Ok(scene)
    }

    /// Rebinds the material called `name`.
    pub fn set_material(&mut self, name: &str, binding: MaterialBinding) -> Result<(), RenderError> {
        if let MaterialBinding::Neural(m) = &binding {
            if m.latent.is_none() {
                return Err(RenderError::Material(name.into(), "archive has no latent texture".into()));
            }
        }
        let i = self
            .material_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| RenderError::Scene(format!("unknown material {name:?}")))?;
        self.materials[i] = binding;
        Ok(())
    }

    pub fn environment(&self) -> Option<Spectrum> {
        self.lights.iter().find_map(|l| match l {
            Light::Environment(s) => Some(*s),
            _ => None,
        })
    }

    fn build_bvh(&mut self) {
        self.nodes.clear();
        if self.prims.is_empty() {
            return;
        }
        let n = self.prims.len();
        self.nodes.push(BvhNode {
            bounds: Aabb::EMPTY,
            start: 0,
            count: n,
        });
        self.split(0, 0, n);
    }

    fn split(&mut self, node: usize, start: usize, end: usize) {
        let bounds = self.prims[start..end]
            .iter()
            .fold(Aabb::EMPTY, |b, p| b.grow(p.shape.bounds()));
        self.nodes[node].bounds = bounds;
        if end - start <= 4 {
            self.nodes[node].start = start;
            self.nodes[node].count = end - start;
            return;
        }
        let cb = self.prims[start..end].iter().fold(Aabb::EMPTY, |b, p| {
            let c = p.shape.bounds().center();
            b.grow(Aabb { lo: c, hi: c })
        });
        let ext = cb.hi - cb.lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        self.prims[start..end].select_nth_unstable_by(mid - start, |a, b| {
            a.shape.bounds().center()[axis].total_cmp(&b.shape.bounds().center()[axis])
        });
        let left = self.nodes.len();
        self.nodes.push(BvhNode {
            bounds: Aabb::EMPTY,
            start: 0,
            count: 0,
        });
        self.split(left, start, mid);
        let right = self.nodes.len();
        self.nodes.push(BvhNode {
            bounds: Aabb::EMPTY,
            start: 0,
            count: 0,
        });
        self.split(right, mid, end);
        self.nodes[node].start = right;
        self.nodes[node].count = 0;
    }

    fn traverse(&self, ray: &Ray, mut t_max: f64, any: bool) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / ray.d.x, 1.0 / ray.d.y, 1.0 / ray.d.z);
        let mut best = None;
        let mut stack = [0usize; 64];
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let idx = stack[sp];
            let node = &self.nodes[idx];
            if !node.bounds.hit(ray.o, inv, t_max) {
                continue;
            }
            if node.count > 0 {
                for i in node.start..node.start + node.count {
                    if let Some(t) = self.prims[i].shape.intersect(ray, t_max) {
                        t_max = t;
                        best = Some((i, t));
                        if any {
                            return best;
                        }
                    }
                }
            } else {
                stack[sp] = idx + 1;
                stack[sp + 1] = node.start;
                sp += 2;
            }
        }
        best
    }

    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        self.traverse(ray, f64::INFINITY, false)
            .map(|(i, t)| self.prims[i].surface(ray, t))
    }

    /// True when nothing blocks the segment `o + t d`, `t < t_max`.
    pub fn unoccluded(&self, ray: &Ray, t_max: f64) -> bool {
        self.traverse(ray, t_max, true).is_none()
    }
}
