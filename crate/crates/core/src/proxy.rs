//! Analytic two-lobe importance-sampling proxy: a cosine lobe tilted by a
//! predicted slope plus a non-centered, correlated anisotropic GGX lobe
//! obtained by linearly transforming the unit-roughness distribution.
//!
//! Everything is generic over [`Real`] so the trainer can differentiate the
//! density and the sampling map with forward-mode duals.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dual::{Real, V3};
use crate::geom::{sample_cosine_hemisphere, sample_uniform_sphere, Vec3};
use crate::ggx;

/// Floor applied to both roughnesses and to `1 - rho^2`.
pub const EPS_FLOOR: f64 = 1e-4;

/// Number of raw sampler-decoder outputs for the full proxy.
pub const RAW_PARAMS: usize = 9;
/// Raw outputs of the ablated isotropic proxy (weight logit, roughness).
pub const RAW_PARAMS_ISOTROPIC: usize = 2;

/// Quadratic tanh surrogate, odd and monotone with range (-1, 1).
#[inline]
pub fn qtanh<T: Real>(x: T) -> T {
    let a = x.abs();
    let one = T::cst(1.0);
    let half = T::cst(0.5);
    let q = x * (one + a * half) / (one + a + x * x * half);
    if q.val() > 1.0 {
        one
    } else if q.val() < -1.0 {
        -one
    } else {
        q
    }
}

/// Quadratic sinh surrogate.
#[inline]
pub fn qsinh<T: Real>(x: T) -> T {
    x * (T::cst(1.0) + x * x * T::cst(1.0 / 6.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proxy<T> {
    pub w_d: T,
    pub mu_d: [T; 2],
    pub w_s: T,
    pub alpha: [T; 2],
    pub rho: T,
    pub mu_s: [T; 2],
}

pub type ProxyParams = Proxy<f64>;

impl ProxyParams {
    pub fn diffuse() -> Self {
        Self {
            w_d: 1.0,
            mu_d: [0.0; 2],
            w_s: 0.0,
            alpha: [1.0; 2],
            rho: 0.0,
            mu_s: [0.0; 2],
        }
    }

    pub fn specular(alpha_x: f64, alpha_y: f64, rho: f64, mu_s: [f64; 2]) -> Self {
        Self {
            w_d: 0.0,
            mu_d: [0.0; 2],
            w_s: 1.0,
            alpha: [alpha_x, alpha_y],
            rho,
            mu_s,
        }
    }

    /// The slope matrix `M` (row-major) after the epsilon floors.
    pub fn slope_matrix(&self) -> [[f64; 3]; 3] {
        let (ax, ay, s) = self.floored();
        [
            [ax, 0.0, -self.mu_s[0]],
            [ay * self.rho, ay * s, -self.mu_s[1]],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Closed-form `det(M)`.
    pub fn det_m(&self) -> f64 {
        let (ax, ay, s) = self.floored();
        ax * ay * s
    }

    /// Draws a direction; `u[0]` picks the lobe. The result may lie below
    /// the horizon.
    pub fn sample(&self, wi: Vec3, u: [f64; 3]) -> Vec3 {
        let wi = V3::<f64>::from_f64(wi);
        let w = if u[0] < self.w_d {
            self.sample_diffuse([u[1], u[2]])
        } else {
            self.sample_specular(wi, [u[1], u[2]])
        };
        w.value()
    }

    pub fn eval_pdf(&self, wi: Vec3, wo: Vec3) -> f64 {
        self.pdf(V3::from_f64(wi), V3::from_f64(wo))
    }
}

impl<T: Real> Proxy<T> {
    /// Maps the 9 raw decoder outputs, ordered
    /// `[w_d, mu_dx, mu_dy, w_s, alpha_x, alpha_y, rho, mu_sx, mu_sy]`.
    pub fn from_raw(r: [T; RAW_PARAMS]) -> Self {
        let one = T::cst(1.0);
        let half = T::cst(0.5);
        let w_d = one / (one + (r[3] - r[0]).exp());
        Self {
            w_d,
            mu_d: [qsinh(r[1]), qsinh(r[2])],
            w_s: one - w_d,
            alpha: [(qtanh(r[4]) + one) * half, (qtanh(r[5]) + one) * half],
            rho: qtanh(r[6]),
            mu_s: [qsinh(r[7]), qsinh(r[8])],
        }
    }

    /// Ablated proxy: centered isotropic GGX with a diffuse weight.
    pub fn isotropic_from_raw(r: [T; RAW_PARAMS_ISOTROPIC]) -> Self {
        let one = T::cst(1.0);
        let zero = T::cst(0.0);
        let w_d = one / (one + (-r[0]).exp());
        let a = (qtanh(r[1]) + one) * T::cst(0.5);
        Self {
            w_d,
            mu_d: [zero; 2],
            w_s: one - w_d,
            alpha: [a, a],
            rho: zero,
            mu_s: [zero; 2],
        }
    }

    #[inline]
    fn floored(&self) -> (T, T, T) {
        let ax = self.alpha[0].max_c(EPS_FLOOR);
        let ay = self.alpha[1].max_c(EPS_FLOOR);
        let s = (T::cst(1.0) - self.rho * self.rho).max_c(EPS_FLOOR).sqrt();
        (ax, ay, s)
    }

    #[inline]
    fn diffuse_normal(&self) -> V3<T> {
        V3::new(-self.mu_d[0], -self.mu_d[1], T::cst(1.0)).normalize()
    }

    /// Tilted cosine density, normalized over the sphere.
    pub fn pdf_diffuse(&self, wo: V3<T>) -> T {
        let c = wo.dot(self.diffuse_normal());
        if c.val() <= 0.0 {
            T::cst(0.0)
        } else {
            c * T::cst(1.0 / PI)
        }
    }

    /// Density of the reflected direction for the transformed GGX lobe.
    pub fn pdf_specular(&self, wi: V3<T>, wo: V3<T>) -> T {
        let zero = T::cst(0.0);
        let sum = wi.add(wo);
        let len = sum.length();
        if len.val() < 1e-12 {
            return zero;
        }
        let mut h = sum.scale(T::cst(1.0) / len);
        if h.z.val() < 0.0 {
            h = h.scale(T::cst(-1.0));
        }
        let (ax, ay, s) = self.floored();
        // M^-1 h by back substitution
        let mz = h.z;
        let mx = (h.x + self.mu_s[0] * mz) / ax;
        let my = (h.y + self.mu_s[1] * mz - ay * self.rho * mx) / (ay * s);
        let m = V3::new(mx, my, mz);
        let lm = m.length();
        let cos_m = mz / lm;
        if cos_m.val() <= 0.0 {
            return zero;
        }
        let d = wo.dot(h).abs();
        if d.val() <= 0.0 {
            return zero;
        }
        let jac = T::cst(1.0) / (ax * ay * s * lm * lm * lm);
        cos_m * T::cst(1.0 / PI) * jac / (T::cst(4.0) * d)
    }

    pub fn pdf(&self, wi: V3<T>, wo: V3<T>) -> T {
        let mut p = T::cst(0.0);
        if self.w_d.val() > 0.0 {
            p += self.w_d * self.pdf_diffuse(wo);
        }
        if self.w_s.val() > 0.0 {
            p += self.w_s * self.pdf_specular(wi, wo);
        }
        p
    }

    /// Cosine sample rotated onto the tilted normal by the minimal rotation.
    pub fn sample_diffuse(&self, u: [f64; 2]) -> V3<T> {
        let l = sample_cosine_hemisphere(u);
        let n = self.diffuse_normal();
        let one = T::cst(1.0);
        let k = one / (one + n.z);
        let c1 = V3::new(one - n.x * n.x * k, -n.x * n.y * k, -n.x);
        let c2 = V3::new(-n.x * n.y * k, one - n.y * n.y * k, -n.y);
        c1.scale(T::cst(l.x))
            .add(c2.scale(T::cst(l.y)))
            .add(n.scale(T::cst(l.z)))
    }

    /// Half vector `normalize(M W_std(u))` and the mirror of `wi` about it.
    pub fn sample_specular(&self, wi: V3<T>, u: [f64; 2]) -> V3<T> {
        let m = ggx::sample_ndf(u, 1.0, 1.0);
        let (ax, ay, s) = self.floored();
        let (mx, my, mz) = (T::cst(m.x), T::cst(m.y), T::cst(m.z));
        let h = V3::new(
            ax * mx - self.mu_s[0] * mz,
            ay * self.rho * mx + ay * s * my - self.mu_s[1] * mz,
            mz,
        )
        .normalize();
        wi.reflect(h)
    }
}

/// Uniform-sphere MC estimate of the integral of the proxy density with its
/// (unstratified, hence conservative) standard error. Samples are jittered
/// on a `k x k` grid, `k = floor(sqrt(n))`.
pub fn normalize_check(p: &ProxyParams, wi: Vec3, n: usize, rng: &mut impl Rng) -> (f64, f64) {
    let k = ((n as f64).sqrt() as usize).max(1);
    let mut stats = crate::stats::RunningStats::default();
    for i in 0..k {
        for j in 0..k {
            let u = [(i as f64 + rng.gen::<f64>()) / k as f64, (j as f64 + rng.gen::<f64>()) / k as f64];
            stats.push(p.eval_pdf(wi, sample_uniform_sphere(u)) * 4.0 * PI);
        }
    }
    (stats.mean(), stats.std_error())
}

/// Chi-square goodness of fit of `n` samples against the density, on an
/// equal-area `(cos theta, phi)` grid. Expected counts integrate the pdf on
/// a sub-grid per cell. The reflected lobe has an integrable singularity at
/// `-wi` that the quadrature cannot resolve, so cells near it are pooled into
/// one bin whose expectation is the complement of the others. Returns the
/// p-value.
pub fn chi_square_check(p: &ProxyParams, wi: Vec3, n: usize, rng: &mut impl Rng) -> f64 {
    let (nt, np, sub) = (10, 20, 32);
    let cells = nt * np;
    let cell = |w: Vec3| {
        let t = (((1.0 - w.z) * 0.5) * nt as f64).clamp(0.0, nt as f64 - 1.0) as usize;
        let ph = (w.y.atan2(w.x) + PI) / (2.0 * PI);
        t * np + ((ph * np as f64) as usize).min(np - 1)
    };
    let mut obs = vec![0.0; cells];
    for _ in 0..n {
        let w = p.sample(wi, [rng.gen(), rng.gen(), rng.gen()]);
        if w.is_finite() {
            obs[cell(w)] += 1.0;
        }
    }
    let anti = -wi;
    let near = (0.25f64).cos();
    let mut exp = vec![0.0; cells];
    let mut singular = vec![false; cells];
    for t in 0..nt {
        for f in 0..np {
            let mut s = 0.0;
            for i in 0..sub {
                for j in 0..sub {
                    let c = 1.0 - 2.0 * (t as f64 + (i as f64 + 0.5) / sub as f64) / nt as f64;
                    let ph = -PI + 2.0 * PI * (f as f64 + (j as f64 + 0.5) / sub as f64) / np as f64;
                    let r = (1.0 - c * c).max(0.0).sqrt();
                    let w = Vec3::new(r * ph.cos(), r * ph.sin(), c);
                    singular[t * np + f] |= p.w_s > 0.0 && w.dot(anti) > near;
                    s += p.eval_pdf(wi, w);
                }
            }
            exp[t * np + f] = s * (2.0 / nt as f64) * (2.0 * PI / np as f64) / (sub * sub) as f64 * n as f64;
        }
    }
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let (mut po, mut pe) = (0.0, n as f64);
    for k in 0..cells {
        if singular[k] {
            po += obs[k];
        } else {
            o.push(obs[k]);
            e.push(exp[k]);
            pe -= exp[k];
        }
    }
    if singular.iter().any(|&s| s) {
        o.push(po);
        e.push(pe.max(0.0));
    }
    crate::stats::chi_square_test(&o, &e, 5.0)
}
