//! Anisotropic Trowbridge-Reitz (GGX) microfacet terms in a local frame
//! with the macro normal on +z.

use std::f64::consts::PI;

use crate::geom::Vec3;

/// Anisotropic GGX NDF.
#[inline]
pub fn ndf(h: Vec3, ax: f64, ay: f64) -> f64 {
    if h.z <= 0.0 {
        return 0.0;
    }
    let e = (h.x / ax).powi(2) + (h.y / ay).powi(2) + h.z * h.z;
    1.0 / (PI * ax * ay * e * e)
}

/// Smith Lambda for the anisotropic GGX distribution.
#[inline]
pub fn lambda(w: Vec3, ax: f64, ay: f64) -> f64 {
    let z2 = w.z * w.z;
    if z2 == 0.0 {
        return f64::INFINITY;
    }
    let a2t2 = ((ax * w.x).powi(2) + (ay * w.y).powi(2)) / z2;
    0.5 * (-1.0 + (1.0 + a2t2).sqrt())
}

/// Height-correlated Smith masking-shadowing.
#[inline]
pub fn smith_g2(wi: Vec3, wo: Vec3, ax: f64, ay: f64) -> f64 {
    1.0 / (1.0 + lambda(wi, ax, ay) + lambda(wo, ax, ay))
}

#[inline]
pub fn schlick(f0: f64, cos_theta: f64) -> f64 {
    let m = (1.0 - cos_theta.clamp(0.0, 1.0)).powi(5);
    f0 + (1.0 - f0) * m
}

/// Microfacet reflection without Fresnel: `D G2 / (4 cos_i cos_o)`.
#[inline]
pub fn reflectance(wi: Vec3, wo: Vec3, ax: f64, ay: f64) -> f64 {
    if wi.z <= 0.0 || wo.z <= 0.0 {
        return 0.0;
    }
    let h = (wi + wo).normalize();
    ndf(h, ax, ay) * smith_g2(wi, wo, ax, ay) / (4.0 * wi.z * wo.z)
}

/// Samples a microfacet normal proportionally to `D(h) h.z` by stretching
/// the unit-roughness distribution in slope space.
pub fn sample_ndf(u: [f64; 2], ax: f64, ay: f64) -> Vec3 {
    let tan2 = u[0] / (1.0 - u[0]).max(1e-300);
    let tan = tan2.sqrt();
    let phi = 2.0 * PI * u[1];
    Vec3::new(ax * tan * phi.cos(), ay * tan * phi.sin(), 1.0).normalize()
}

/// Solid-angle density of `wo` when sampling `h` with [`sample_ndf`] and
/// reflecting `wi` about it.
#[inline]
pub fn reflected_pdf(wi: Vec3, wo: Vec3, ax: f64, ay: f64) -> f64 {
    if wo.z <= 0.0 {
        return 0.0;
    }
    let h = (wi + wo).normalize();
    let d = wo.dot(h);
    if d <= 0.0 {
        return 0.0;
    }
    ndf(h, ax, ay) * h.z / (4.0 * d)
}
