//! Vector math, shading frames and hemisphere sampling shared by the rest of the crate.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Div, Index, Mul, MulAssign, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate frame: normal and tangent are parallel (|n x t| = {0:e})")]
    DegenerateFrame(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// A unit vector. Local shading space puts the geometric normal on +z.
pub type Direction = Vec3;

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn length_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn length(self) -> f64 {
        self.length_squared().sqrt()
    }

    #[inline]
    pub fn normalize(self) -> Vec3 {
        self / self.length()
    }

    #[inline]
    pub fn is_unit(self) -> bool {
        (self.length() - 1.0).abs() <= 1e-6
    }

    #[inline]
    pub fn max_component(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    #[inline]
    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    #[inline]
    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    #[inline]
    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Mirror `self` about `n`; both point away from the surface.
    #[inline]
    pub fn reflect(self, n: Vec3) -> Vec3 {
        n * (2.0 * self.dot(n)) - self
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    #[inline]
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        let inv = 1.0 / s;
        self * inv
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// A (tangent, bitangent, normal) basis. The stored columns are unit length;
/// `t` and `n` are not required to be orthogonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub t: Vec3,
    pub b: Vec3,
    pub n: Vec3,
}

impl Frame {
    pub const CANONICAL: Frame = Frame {
        t: Vec3::X,
        b: Vec3::Y,
        n: Vec3::Z,
    };

    /// Orthonormal basis around a unit normal (branchless construction of
    /// Duff et al.).
    pub fn from_normal(n: Vec3) -> Frame {
        let sign = 1f64.copysign(n.z);
        let a = -1.0 / (sign + n.z);
        let b = n.x * n.y * a;
        let t = Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
        let bt = Vec3::new(b, sign + n.y * n.y * a, -n.y);
        Frame { t, b: bt, n }
    }

    #[inline]
    pub fn to_local(&self, v: Vec3) -> Vec3 {
        Vec3::new(v.dot(self.t), v.dot(self.b), v.dot(self.n))
    }

    #[inline]
    pub fn to_world(&self, v: Vec3) -> Vec3 {
        self.t * v.x + self.b * v.y + self.n * v.z
    }
}

/// Builds the frame `(normalize(t), n x t / |n x t|, n)`.
pub fn build_frame(n: Direction, t: Vec3) -> Result<Frame, GeomError> {
    let c = n.cross(t);
    let len = c.length();
    if !(len > 1e-8) {
        return Err(GeomError::DegenerateFrame(len));
    }
    Ok(Frame {
        t: t.normalize(),
        b: c / len,
        n,
    })
}

/// Cosine-weighted direction around +z using the polar mapping
/// `theta = acos(sqrt(1 - u0))`, `phi = 2 pi u1`.
pub fn sample_cosine_hemisphere(u: [f64; 2]) -> Direction {
    let cos_theta = (1.0 - u[0]).max(0.0).sqrt();
    let sin_theta = u[0].max(0.0).sqrt();
    let phi = 2.0 * PI * u[1];
    Vec3::new(sin_theta * phi.cos(), sin_theta * phi.sin(), cos_theta)
}

#[inline]
pub fn cosine_hemisphere_pdf(w: Direction) -> f64 {
    if w.z > 0.0 {
        w.z / PI
    } else {
        0.0
    }
}

/// Uniform direction on the hemisphere around +z (`cos theta = u0`).
pub fn sample_uniform_hemisphere(u: [f64; 2]) -> Direction {
    let z = u[0];
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * PI * u[1];
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

pub fn sample_uniform_sphere(u: [f64; 2]) -> Direction {
    let z = 1.0 - 2.0 * u[0];
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * PI * u[1];
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Direction uniformly distributed (in solid angle) inside the cone of
/// half-angle `half_angle` around +z.
pub fn sample_uniform_cone(u: [f64; 2], half_angle: f64) -> Direction {
    let cos_max = half_angle.cos();
    let z = 1.0 - u[0] * (1.0 - cos_max);
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * PI * u[1];
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Half/difference construction: a uniform half vector on the upper
/// hemisphere and a uniform difference vector on the hemisphere around it.
/// Returns `(w_i, w_o, half)` without any horizon test.
pub fn half_diff_pair(u: [f64; 4]) -> (Direction, Direction, Direction) {
    let half = sample_uniform_hemisphere([u[0], u[1]]);
    let diff = sample_uniform_hemisphere([u[2], u[3]]);
    let frame = Frame::from_normal(half);
    let wi = frame.to_world(diff).normalize();
    let wo = wi.reflect(half).normalize();
    (wi, wo, half)
}

/// Draws a direction pair via the half/difference construction, redrawing
/// until both directions are strictly above the horizon.
pub fn sample_half_diff<R: Rng + ?Sized>(rng: &mut R) -> (Direction, Direction) {
    loop {
        let u = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        let (wi, wo, _) = half_diff_pair(u);
        if wi.z > 0.0 && wo.z > 0.0 {
            return (wi, wo);
        }
    }
}

/// RGB triple used for BRDF values and radiance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Spectrum {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl Spectrum {
    pub const ZERO: Spectrum = Spectrum::new(0.0, 0.0, 0.0);
    pub const ONE: Spectrum = Spectrum::new(1.0, 1.0, 1.0);

    #[inline]
    pub const fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    #[inline]
    pub fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    /// Rec. 709 luminance.
    #[inline]
    pub fn luminance(self) -> f64 {
        0.2126 * self.r + 0.7152 * self.g + 0.0722 * self.b
    }

    #[inline]
    pub fn is_black(self) -> bool {
        self.r == 0.0 && self.g == 0.0 && self.b == 0.0
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.r.is_finite() && self.g.is_finite() && self.b.is_finite()
    }

    pub fn max_channel(self) -> f64 {
        self.r.max(self.g).max(self.b)
    }

    pub fn average(self) -> f64 {
        (self.r + self.g + self.b) / 3.0
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Spectrum {
        Spectrum::new(f(self.r), f(self.g), f(self.b))
    }
}

impl Add for Spectrum {
    type Output = Spectrum;
    #[inline]
    fn add(self, o: Spectrum) -> Spectrum {
        Spectrum::new(self.r + o.r, self.g + o.g, self.b + o.b)
    }
}

impl AddAssign for Spectrum {
    #[inline]
    fn add_assign(&mut self, o: Spectrum) {
        *self = *self + o;
    }
}

impl Sub for Spectrum {
    type Output = Spectrum;
    #[inline]
    fn sub(self, o: Spectrum) -> Spectrum {
        Spectrum::new(self.r - o.r, self.g - o.g, self.b - o.b)
    }
}

impl Mul for Spectrum {
    type Output = Spectrum;
    #[inline]
    fn mul(self, o: Spectrum) -> Spectrum {
        Spectrum::new(self.r * o.r, self.g * o.g, self.b * o.b)
    }
}

impl MulAssign for Spectrum {
    #[inline]
    fn mul_assign(&mut self, o: Spectrum) {
        *self = *self * o;
    }
}

impl Mul<f64> for Spectrum {
    type Output = Spectrum;
    #[inline]
    fn mul(self, s: f64) -> Spectrum {
        Spectrum::new(self.r * s, self.g * s, self.b * s)
    }
}

impl Div<f64> for Spectrum {
    type Output = Spectrum;
    #[inline]
    fn div(self, s: f64) -> Spectrum {
        self * (1.0 / s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::chi_square_test;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).length() <= tol
    }

    #[test]
    fn canonical_frame() {
        let f = build_frame(Vec3::Z, Vec3::X).unwrap();
        assert_eq!(f.b, Vec3::Y);
    }

    #[test]
    fn non_orthogonal_tangent_keeps_bitangent() {
        let f = build_frame(Vec3::Z, Vec3::new(0.6, 0.0, 0.8)).unwrap();
        assert!(close(f.b, Vec3::Y, 1e-12));
        assert!(close(f.t, Vec3::new(0.6, 0.0, 0.8), 1e-12));
    }

    #[test]
    fn parallel_inputs_are_degenerate() {
        assert!(matches!(
            build_frame(Vec3::Z, Vec3::Z),
            Err(GeomError::DegenerateFrame(_))
        ));
    }

    #[test]
    fn bitangent_is_orthogonal_to_n_and_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = sample_uniform_sphere([rng.gen(), rng.gen()]);
            let t = sample_uniform_sphere([rng.gen(), rng.gen()]) * rng.gen_range(0.1..3.0);
            let f = build_frame(n, t).unwrap();
            assert!(f.b.dot(n).abs() < 1e-6);
            assert!(f.b.dot(f.t).abs() < 1e-6);
            assert!(f.t.is_unit() && f.b.is_unit() && f.n.is_unit());
        }
    }

    #[test]
    fn orthonormal_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = sample_uniform_sphere([rng.gen(), rng.gen()]);
            let f = Frame::from_normal(n);
            let v = sample_uniform_sphere([rng.gen(), rng.gen()]);
            assert!(close(f.to_world(f.to_local(v)), v, 1e-6));
            assert!(f.t.dot(f.b).abs() < 1e-9 && f.t.dot(n).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_zenith() {
        assert_eq!(sample_cosine_hemisphere([0.0, 0.0]), Vec3::Z);
        assert!((cosine_hemisphere_pdf(Vec3::Z) - 0.318_309_886).abs() < 1e-8);
    }

    /// Expected count per cell is the exact integral of cos(theta)/pi over
    /// the (theta, phi) cell.
    #[test]
    fn cosine_hemisphere_chi_square() {
        let (nt, np) = (8usize, 16usize);
        let n = 1_000_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut observed = vec![0.0; nt * np];
        for _ in 0..n {
            let w = sample_cosine_hemisphere([rng.gen(), rng.gen()]);
            let theta = w.z.clamp(-1.0, 1.0).acos();
            let phi = w.y.atan2(w.x).rem_euclid(2.0 * PI);
            let i = ((theta / (PI / 2.0)) * nt as f64).min(nt as f64 - 1.0) as usize;
            let j = ((phi / (2.0 * PI)) * np as f64).min(np as f64 - 1.0) as usize;
            observed[i * np + j] += 1.0;
        }
        let mut expected = vec![0.0; nt * np];
        for i in 0..nt {
            let t0 = i as f64 / nt as f64 * PI / 2.0;
            let t1 = (i + 1) as f64 / nt as f64 * PI / 2.0;
            // integral of cos sin dtheta = (sin^2 t1 - sin^2 t0)/2, times dphi/pi
            let mass = (t1.sin().powi(2) - t0.sin().powi(2)) / 2.0 * (2.0 * PI / np as f64) / PI;
            for j in 0..np {
                expected[i * np + j] = mass * n as f64;
            }
        }
        let p = chi_square_test(&observed, &expected, 5.0);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn half_diff_zero_difference() {
        // u[0]=1 gives half = +z; u[2] close to 1 gives diff = +z
        let (wi, wo, h) = half_diff_pair([1.0, 0.0, 1.0, 0.0]);
        assert!(close(h, Vec3::Z, 1e-12));
        assert!(close(wi, Vec3::Z, 1e-12));
        assert!(close(wo, Vec3::Z, 1e-12));
    }

    #[test]
    fn half_diff_recovers_half_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let u = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
            let (wi, wo, h) = half_diff_pair(u);
            if (wi + wo).length() < 1e-3 {
                continue;
            }
            assert!(close((wi + wo).normalize(), h, 1e-5));
        }
    }

    #[test]
    fn half_diff_sampling_stays_above_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100_000 {
            let (wi, wo) = sample_half_diff(&mut rng);
            assert!(wi.z > 0.0 && wo.z > 0.0);
        }
    }
}
