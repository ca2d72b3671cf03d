//! Hierarchical 8-channel latent texture with Russian-roulette level
//! selection, bilinear fetch, encoder baking and texel gradients.

use std::io::{Read, Write};
use std::path::Path;

use half::f16;
use thiserror::Error;

use crate::mlp::{round_f16, BatchActivations, Mlp, MlpError, FP16_MAX};
use crate::reference::ReferenceMaterial;
use crate::texture::{bilinear_taps, level_count, level_size};

pub const LATENT_CHANNELS: usize = 8;

const MAGIC: &[u8; 4] = b"NLAT";
const VERSION: u32 = 1;
const FLAG_MASTER: u32 = 1;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed latent file: {0}")]
    Format(String),
    #[error(transparent)]
    Mlp(#[from] MlpError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentQuery {
    pub uv: [f64; 2],
    /// Fractional mip level.
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPyramid {
    width: usize,
    height: usize,
    offsets: Vec<usize>,
    data: Vec<f32>,
    render: Option<Vec<f16>>,
}

/// Integer level chosen by Russian roulette from a fractional one.
#[inline]
pub fn select_level(level: f64, levels: usize, u_rr: f64) -> usize {
    let l = level.clamp(0.0, (levels - 1) as f64);
    let lo = l.floor();
    let f = l - lo;
    let lo = lo as usize;
    if u_rr < f {
        (lo + 1).min(levels - 1)
    } else {
        lo
    }
}

impl LatentPyramid {
    /// Zero-initialized pyramid with a full mip chain.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::with_levels(width, height, level_count(width, height))
    }

    pub fn with_levels(width: usize, height: usize, levels: usize) -> Self {
        let mut offsets = Vec::with_capacity(levels + 1);
        let mut off = 0;
        for l in 0..levels {
            offsets.push(off);
            let (w, h) = level_size(width, height, l);
            off += w * h * LATENT_CHANNELS;
        }
        offsets.push(off);
        Self {
            width,
            height,
            offsets,
            data: vec![0.0; off],
            render: None,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn levels(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn level_size(&self, level: usize) -> (usize, usize) {
        level_size(self.width, self.height, level)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.render = None;
        &mut self.data
    }

    pub fn level_data(&self, level: usize) -> &[f32] {
        &self.data[self.offsets[level]..self.offsets[level + 1]]
    }

    #[inline]
    fn texel_index(&self, level: usize, x: usize, y: usize) -> usize {
        let (w, _) = self.level_size(level);
        self.offsets[level] + (y * w + x) * LATENT_CHANNELS
    }

    pub fn texel(&self, level: usize, x: usize, y: usize) -> &[f32] {
        let i = self.texel_index(level, x, y);
        &self.data[i..i + LATENT_CHANNELS]
    }

    pub fn texel_mut(&mut self, level: usize, x: usize, y: usize) -> &mut [f32] {
        let i = self.texel_index(level, x, y);
        self.render = None;
        &mut self.data[i..i + LATENT_CHANNELS]
    }

    /// Bilinear lookup at an integer level of the FP32 master copy.
    pub fn bilinear(&self, level: usize, uv: [f64; 2]) -> [f32; LATENT_CHANNELS] {
        let (w, h) = self.level_size(level);
        let mut acc = [0f64; LATENT_CHANNELS];
        for t in bilinear_taps(uv[0], uv[1], w, h) {
            if t.weight == 0.0 {
                continue;
            }
            let i = self.offsets[level] + (t.y * w + t.x) * LATENT_CHANNELS;
            for (a, &v) in acc.iter_mut().zip(&self.data[i..i + LATENT_CHANNELS]) {
                *a += t.weight * v as f64;
            }
        }
        acc.map(|a| a as f32)
    }

    /// Russian-roulette fetch: returns the bilinear code at the selected
    /// integer level and that level.
    pub fn fetch(&self, q: LatentQuery, u_rr: f64) -> ([f32; LATENT_CHANNELS], usize) {
        let level = select_level(q.level, self.levels(), u_rr);
        (self.bilinear(level, q.uv), level)
    }

    /// Builds the FP16 render copy (round to nearest even, clamped).
    /// Returns the number of clamped values.
    pub fn quantize(&mut self) -> usize {
        let mut clamped = 0;
        let q = self
            .data
            .iter()
            .map(|&v| {
                if v.abs() > FP16_MAX {
                    clamped += 1;
                }
                f16::from_f32(v.clamp(-FP16_MAX, FP16_MAX))
            })
            .collect();
        self.render = Some(q);
        clamped
    }

    pub fn has_render_copy(&self) -> bool {
        self.render.is_some()
    }

    /// Same as [`Self::fetch`] but reads the FP16 render copy when present.
    pub fn fetch_render(&self, q: LatentQuery, u_rr: f64) -> ([f32; LATENT_CHANNELS], usize) {
        let Some(r) = &self.render else {
            return self.fetch(q, u_rr);
        };
        let level = select_level(q.level, self.levels(), u_rr);
        let (w, h) = self.level_size(level);
        let mut acc = [0f32; LATENT_CHANNELS];
        for t in bilinear_taps(q.uv[0], q.uv[1], w, h) {
            if t.weight == 0.0 {
                continue;
            }
            let i = self.offsets[level] + (t.y * w + t.x) * LATENT_CHANNELS;
            let wt = t.weight as f32;
            for (a, v) in acc.iter_mut().zip(&r[i..i + LATENT_CHANNELS]) {
                *a += wt * v.to_f32();
            }
        }
        (acc, level)
    }

    /// Sets every texel of every level to `encoder(k)` where `k` are the
    /// material parameters filtered for that level's footprint.
    pub fn bake_from_encoder(encoder: &Mlp, material: &ReferenceMaterial) -> Result<Self, LatentError> {
        if encoder.input_dim() != material.param_dim() {
            return Err(MlpError::Dimension {
                expected: material.param_dim(),
                got: encoder.input_dim(),
            }
            .into());
        }
        if encoder.output_dim() != LATENT_CHANNELS {
            return Err(MlpError::Dimension {
                expected: LATENT_CHANNELS,
                got: encoder.output_dim(),
            }
            .into());
        }
        let mut pyr = Self::with_levels(material.width(), material.height(), material.levels());
        let mut acts = BatchActivations::default();
        let mut k = Vec::new();
        let mut input = Vec::new();
        let mut stats = [0usize; 4];
        for level in 0..pyr.levels() {
            let (w, h) = pyr.level_size(level);
            for y in 0..h {
                input.clear();
                for x in 0..w {
                    material.texel_params(level, x, y, &mut k);
                    input.extend(k.iter().map(|&v| v as f32));
                }
                encoder.forward_batch(&input, w, &mut acts)?;
                let row = pyr.texel_index(level, 0, y);
                let out = acts.output();
                pyr.data[row..row + w * LATENT_CHANNELS].copy_from_slice(out);
                for v in out {
                    let a = v.abs();
                    stats[if a < 1.0 {
                        0
                    } else if a < 16.0 {
                        1
                    } else if a < 1024.0 {
                        2
                    } else {
                        3
                    }] += 1;
                }
            }
        }
        log::info!(
            "baked latents |z| histogram: <1: {}, <16: {}, <1024: {}, >=1024: {}",
            stats[0],
            stats[1],
            stats[2],
            stats[3]
        );
        Ok(pyr)
    }

    // --- file format -----------------------------------------------------

    /// Header `NLAT`, version, W, H, L, C, flags; per level two FP16 planes
    /// of four channels each; then the FP32 master copy if flagged.
    pub fn write<W: Write>(&self, w: &mut W, with_master: bool) -> Result<(), LatentError> {
        w.write_all(MAGIC)?;
        let flags = if with_master { FLAG_MASTER } else { 0 };
        for v in [
            VERSION,
            self.width as u32,
            self.height as u32,
            self.levels() as u32,
            LATENT_CHANNELS as u32,
            flags,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut copy = self.clone();
        if copy.render.is_none() {
            copy.quantize();
        }
        let r = copy.render.as_ref().expect("quantized above");
        let mut buf = Vec::with_capacity(r.len() * 2);
        for level in 0..self.levels() {
            let lv = &r[self.offsets[level]..self.offsets[level + 1]];
            for plane in 0..2 {
                for t in lv.chunks_exact(LATENT_CHANNELS) {
                    for v in &t[plane * 4..plane * 4 + 4] {
                        buf.extend_from_slice(&v.to_bits().to_le_bytes());
                    }
                }
            }
        }
        if with_master {
            for v in &self.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self, with_master: bool) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v, with_master).expect("writing to a Vec cannot fail");
        v
    }

    /// Reads a latent file. Without a master section the FP32 copy is the
    /// widened FP16 data. The render copy is always present afterwards.
    pub fn read<R: Read>(r: &mut R) -> Result<Self, LatentError> {
        let mut head = [0u8; 28];
        r.read_exact(&mut head)
            .map_err(|_| LatentError::Format("truncated header".into()))?;
        if &head[..4] != MAGIC {
            return Err(LatentError::Format("bad magic".into()));
        }
        let u = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (version, width, height, levels, channels, flags) = (u(0), u(1), u(2), u(3), u(4), u(5));
        if version != VERSION as usize {
            return Err(LatentError::Format(format!("unsupported version {version}")));
        }
        if channels != LATENT_CHANNELS {
            return Err(LatentError::Format(format!("expected 8 channels, got {channels}")));
        }
        if width == 0 || height == 0 || width > 1 << 16 || height > 1 << 16 {
            return Err(LatentError::Format(format!("bad resolution {width}x{height}")));
        }
        if levels == 0 || levels > level_count(width, height) {
            return Err(LatentError::Format(format!("bad level count {levels}")));
        }
        let mut pyr = Self::with_levels(width, height, levels);
        let n = pyr.data.len();
        let mut half_bytes = vec![0u8; n * 2];
        r.read_exact(&mut half_bytes)
            .map_err(|_| LatentError::Format("truncated texel planes".into()))?;
        let mut render = vec![f16::ZERO; n];
        let mut pos = 0;
        for level in 0..levels {
            let (off, end) = (pyr.offsets[level], pyr.offsets[level + 1]);
            let texels = (end - off) / LATENT_CHANNELS;
            for plane in 0..2 {
                for t in 0..texels {
                    for c in 0..4 {
                        let b = [half_bytes[pos], half_bytes[pos + 1]];
                        pos += 2;
                        render[off + t * LATENT_CHANNELS + plane * 4 + c] = f16::from_bits(u16::from_le_bytes(b));
                    }
                }
            }
        }
        if flags & FLAG_MASTER as usize != 0 {
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| LatentError::Format("truncated master section".into()))?;
            for (d, c) in pyr.data.iter_mut().zip(bytes.chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().unwrap());
            }
        } else {
            for (d, h) in pyr.data.iter_mut().zip(&render) {
                *d = h.to_f32();
            }
        }
        if pyr.data.iter().any(|v| !v.is_finite()) {
            return Err(LatentError::Format("non-finite texel".into()));
        }
        pyr.render = Some(render);
        Ok(pyr)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LatentError> {
        let bytes = std::fs::read(path)?;
        Self::read(&mut bytes.as_slice())
    }

    pub fn save(&self, path: impl AsRef<Path>, with_master: bool) -> Result<(), LatentError> {
        std::fs::write(path, self.to_bytes(with_master))?;
        Ok(())
    }

    /// Largest absolute difference between the master copy and its FP16
    /// rounding.
    pub fn quantization_error(&self) -> f32 {
        self.data
            .iter()
            .map(|&v| (v - round_f16(v.clamp(-FP16_MAX, FP16_MAX))).abs())
            .fold(0.0, f32::max)
    }
}

/// Dense gradient buffer with the same layout as a [`LatentPyramid`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrads {
    pub data: Vec<f32>,
}

impl LatentGrads {
    pub fn new(pyr: &LatentPyramid) -> Self {
        Self {
            data: vec![0.0; pyr.data.len()],
        }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adjoint of the bilinear fetch at `level`: spreads `grad` over the
    /// four taps with their bilinear weights.
    pub fn accumulate(&mut self, pyr: &LatentPyramid, uv: [f64; 2], level: usize, grad: &[f32]) {
        let (w, h) = pyr.level_size(level);
        for t in bilinear_taps(uv[0], uv[1], w, h) {
            if t.weight == 0.0 {
                continue;
            }
            let i = pyr.offsets[level] + (t.y * w + t.x) * LATENT_CHANNELS;
            let wt = t.weight as f32;
            for (d, g) in self.data[i..i + LATENT_CHANNELS].iter_mut().zip(grad) {
                *d += wt * g;
            }
        }
    }

    pub fn merge(&mut self, other: &LatentGrads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use crate::reference::{lambertian, seeded_rng};
    use crate::stats::RunningStats;
    use rand::Rng;

    fn random_pyramid(seed: u64) -> LatentPyramid {
        let mut rng = seeded_rng(seed);
        let mut p = LatentPyramid::zeros(16, 8);
        p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        p
    }

    #[test]
    fn integer_level_is_deterministic() {
        let p = random_pyramid(1);
        let q = LatentQuery { uv: [0.3, 0.7], level: 2.0 };
        for u in [0.0, 0.5, 0.999] {
            assert_eq!(p.fetch(q, u).1, 2);
        }
    }

    #[test]
    fn texel_center_returns_texel() {
        let p = random_pyramid(2);
        let (w, h) = p.level_size(1);
        let uv = [(3.5) / w as f64, (1.5) / h as f64];
        let (z, l) = p.fetch(LatentQuery { uv, level: 1.0 }, 0.2);
        assert_eq!(l, 1);
        assert_eq!(&z[..], p.texel(1, 3, 1));
    }

    #[test]
    fn roulette_fetch_is_unbiased() {
        let p = random_pyramid(3);
        let q = LatentQuery { uv: [0.41, 0.27], level: 1.3 };
        let a = p.bilinear(1, q.uv);
        let b = p.bilinear(2, q.uv);
        let mut rng = seeded_rng(4);
        let mut stats = vec![RunningStats::default(); LATENT_CHANNELS];
        for _ in 0..100_000 {
            let (z, _) = p.fetch(q, rng.gen());
            for c in 0..LATENT_CHANNELS {
                stats[c].push(z[c] as f64);
            }
        }
        for c in 0..LATENT_CHANNELS {
            let expect = 0.7 * a[c] as f64 + 0.3 * b[c] as f64;
            let s = &stats[c];
            assert!((s.mean() - expect).abs() <= 3.0 * s.std_error() + 1e-7, "{c}");
        }
    }

    #[test]
    fn grads_at_center_and_midpoint() {
        let p = LatentPyramid::zeros(8, 8);
        let mut g = LatentGrads::new(&p);
        let grad = [1.0f32; LATENT_CHANNELS];
        g.accumulate(&p, [2.5 / 8.0, 2.5 / 8.0], 0, &grad);
        assert_eq!(g.data.iter().filter(|&&v| v != 0.0).count(), LATENT_CHANNELS);
        g.clear();
        g.accumulate(&p, [3.0 / 8.0, 3.0 / 8.0], 0, &grad);
        let nz: Vec<f32> = g.data.iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(nz.len(), 4 * LATENT_CHANNELS);
        assert!(nz.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn accumulate_is_adjoint_of_fetch() {
        let p = random_pyramid(5);
        let mut rng = seeded_rng(6);
        for _ in 0..20 {
            let uv = [rng.gen(), rng.gen()];
            let level = rng.gen_range(0..p.levels());
            let g: Vec<f32> = (0..LATENT_CHANNELS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let delta: Vec<f32> = (0..p.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps = 1e-2f32;
            let mut q = p.clone();
            q.data_mut().iter_mut().zip(&delta).for_each(|(v, d)| *v += eps * d);
            let a = p.bilinear(level, uv);
            let b = q.bilinear(level, uv);
            let lhs: f64 = (0..LATENT_CHANNELS).map(|c| ((b[c] - a[c]) / eps * g[c]) as f64).sum();
            let mut acc = LatentGrads::new(&p);
            acc.accumulate(&p, uv, level, &g);
            let rhs: f64 = acc.data.iter().zip(&delta).map(|(x, y)| (*x * *y) as f64).sum();
            assert!((lhs - rhs).abs() < 1e-4, "{lhs} {rhs}");
        }
    }

    #[test]
    fn bake_constant_material_gives_constant_latents() {
        let mat = lambertian(8, [0.4, 0.5, 0.6]);
        let mut rng = seeded_rng(7);
        let enc = Mlp::new(&[mat.param_dim(), 32, 32, 32, 8], Activation::LeakyRelu, Activation::Linear, &mut rng).unwrap();
        let p = LatentPyramid::bake_from_encoder(&enc, &mat).unwrap();
        let first = p.texel(0, 0, 0).to_vec();
        for l in 0..p.levels() {
            let (w, h) = p.level_size(l);
            for y in 0..h {
                for x in 0..w {
                    for (a, b) in p.texel(l, x, y).iter().zip(&first) {
                        assert!((a - b).abs() < 1e-5);
                    }
                }
            }
        }
        let mut k = Vec::new();
        mat.texel_params(0, 3, 5, &mut k);
        let kf: Vec<f32> = k.iter().map(|&v| v as f32).collect();
        assert_eq!(enc.forward(&kf).unwrap(), p.texel(0, 3, 5));
    }

    #[test]
    fn file_round_trip() {
        let p = random_pyramid(8);
        for master in [false, true] {
            let bytes = p.to_bytes(master);
            let q = LatentPyramid::read(&mut bytes.as_slice()).unwrap();
            assert_eq!(q.to_bytes(master), bytes);
            if master {
                assert_eq!(q.data(), p.data());
            } else {
                for (a, b) in q.data().iter().zip(p.data()) {
                    assert_eq!(*a, round_f16(*b));
                }
            }
        }
        let bytes = p.to_bytes(false);
        assert!(LatentPyramid::read(&mut &bytes[..bytes.len() - 3]).is_err());
        assert!(LatentPyramid::read(&mut &b"NLAX"[..]).is_err());
    }

    #[test]
    fn fp16_render_fetch_tracks_master() {
        let mut p = random_pyramid(9);
        p.quantize();
        let q = LatentQuery { uv: [0.13, 0.77], level: 0.0 };
        let (a, _) = p.fetch(q, 0.5);
        let (b, _) = p.fetch_render(q, 0.5);
        for c in 0..LATENT_CHANNELS {
            assert!((a[c] - b[c]).abs() < 1e-3);
        }
    }
}
