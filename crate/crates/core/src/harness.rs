//! Validation suite and inference throughput benchmark for trained
//! neural-material archives.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{sample_half_diff, Vec3};
use crate::latent::{LatentQuery, LATENT_CHANNELS};
use crate::mlp::Mlp;
use crate::neural::{NeuralError, NeuralMaterial, Precision};
use crate::proxy::{chi_square_check, normalize_check};
use crate::reference::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    /// Values clamped to the FP16 range while quantizing.
    pub clamped_values: usize,
    pub warnings: Vec<String>,
    pub passed: bool,
}

/// Proxy lobes sharper than this are skipped by the chi-square sweep; the
/// per-cell quadrature cannot resolve them.
pub const CHI_SQUARE_MIN_ALPHA: f64 = 0.05;

struct Query {
    uv: [f64; 2],
    level: f64,
    wi: Vec3,
}

fn random_queries<R: Rng>(m: &NeuralMaterial, n: usize, rng: &mut R) -> Vec<Query> {
    let levels = m.latent.as_ref().map_or(1, |l| l.levels());
    (0..n)
        .map(|_| {
            let (wi, _) = sample_half_diff(rng);
            Query {
                uv: [rng.gen(), rng.gen()],
                level: rng.gen::<f64>() * (levels - 1) as f64,
                wi,
            }
        })
        .collect()
}

/// Runs the sampler normalization and chi-square sweeps, the FP16 versus
/// FP32 inference comparison and the latent-fetch unbiasedness test.
pub fn validate(material: &NeuralMaterial, seed: u64) -> Result<ValidationReport, NeuralError> {
    let mut m = material.clone();
    let lat = m.latent.clone().ok_or(NeuralError::NoLatent)?;
    let clamped = m.quantize();
    let mut rng = seeded_rng(seed);
    let mut checks = Vec::new();
    let mut warnings = Vec::new();
    if clamped > 0 {
        warnings.push(format!("quantization clamped {clamped} values to the FP16 range"));
    }

    let queries = random_queries(&m, 16, &mut rng);
    let proxies: Vec<_> = queries
        .iter()
        .map(|q| {
            let hit = m.prepare(LatentQuery { uv: q.uv, level: q.level }, rng.gen(), Precision::Fp32)?;
            Ok(m.infer_proxy(&hit.z, q.wi, Precision::Fp32))
        })
        .collect::<Result<_, NeuralError>>()?;

    let mut worst = 0.0f64;
    for (q, p) in queries.iter().zip(&proxies) {
        let (mean, _) = normalize_check(p, q.wi, 250_000, &mut rng);
        worst = worst.max((mean - 1.0).abs());
    }
    checks.push(CheckResult {
        name: "sampler_normalization".into(),
        passed: worst < 0.03,
        detail: format!("max |integral - 1| = {worst:.4} over {} proxies", proxies.len()),
    });

    let (mut tested, mut failed, mut skipped) = (0, 0, 0);
    for (q, p) in queries.iter().zip(&proxies) {
        if p.w_s > 1e-3 && p.alpha[0].min(p.alpha[1]) < CHI_SQUARE_MIN_ALPHA {
            skipped += 1;
            continue;
        }
        tested += 1;
        if chi_square_check(p, q.wi, 100_000, &mut rng) < 0.01 {
            failed += 1;
        }
    }
    if skipped > 0 {
        warnings.push(format!("chi-square sweep skipped {skipped} proxies with alpha < {CHI_SQUARE_MIN_ALPHA}"));
    }
    checks.push(CheckResult {
        name: "sampler_chi_square".into(),
        passed: failed <= 1,
        detail: format!("{failed} of {tested} proxies rejected at significance 0.01"),
    });

    let mut diff = 0.0;
    let mut count = 0usize;
    for q in random_queries(&m, 2000, &mut rng) {
        let u_rr = rng.gen();
        let lq = LatentQuery { uv: q.uv, level: q.level };
        let a = m.prepare(lq, u_rr, Precision::Fp32)?;
        let b = m.prepare(lq, u_rr, Precision::Fp16Fused)?;
        let (_, wo) = sample_half_diff(&mut rng);
        let fa = m.eval_hit(&a, q.wi, wo, Precision::Fp32).0.to_array();
        let fb = m.eval_hit(&b, q.wi, wo, Precision::Fp16Fused).0.to_array();
        for c in 0..3 {
            diff += (fa[c] - fb[c]).abs() / (fa[c].abs() + fb[c].abs() + 1e-3);
            count += 1;
        }
    }
    let smape = diff / count.max(1) as f64;
    checks.push(CheckResult {
        name: "fp16_vs_fp32".into(),
        passed: smape < 0.01,
        detail: format!("SMAPE of BRDF values {smape:.5}"),
    });

    // fractional level between the first two levels above 0 when possible
    let top = (lat.levels() - 1) as f64;
    let level = 1.3f64.min(top * 0.65);
    let (l0, frac) = (level.floor() as usize, level - level.floor());
    let uv = [rng.gen(), rng.gen()];
    let n = 100_000;
    let mut sum = [0f64; LATENT_CHANNELS];
    let mut sq = [0f64; LATENT_CHANNELS];
    for _ in 0..n {
        let (z, _) = lat.fetch(LatentQuery { uv, level }, rng.gen());
        for c in 0..LATENT_CHANNELS {
            sum[c] += z[c] as f64;
            sq[c] += (z[c] as f64).powi(2);
        }
    }
    let a = lat.bilinear(l0, uv);
    let b = lat.bilinear((l0 + 1).min(lat.levels() - 1), uv);
    let mut ok = true;
    let mut worst_sigma = 0.0f64;
    for c in 0..LATENT_CHANNELS {
        let mean = sum[c] / n as f64;
        let var = (sq[c] / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        let expect = (1.0 - frac) * a[c] as f64 + frac * b[c] as f64;
        let d = (mean - expect).abs();
        if se > 0.0 {
            worst_sigma = worst_sigma.max(d / se);
        }
        ok &= d <= 3.0 * se + 1e-6 * expect.abs().max(1e-6);
    }
    checks.push(CheckResult {
        name: "latent_fetch_unbiased".into(),
        passed: ok,
        detail: format!("level {level:.2}: worst channel deviation {worst_sigma:.2} sigma"),
    });

    Ok(ValidationReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
        clamped_values: clamped,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub evaluations: usize,
    pub threads: usize,
    pub naive_fp32_evals_per_sec: f64,
    pub fused_fp16_evals_per_sec: f64,
    pub batched_fused_fp16_evals_per_sec: f64,
    /// Largest relative difference between the naive and fused BRDF values.
    pub max_rel_diff: f64,
    pub mean_rel_diff: f64,
    pub outputs_agree: bool,
    /// Sum of the batched fused outputs; identical for any thread count.
    pub checksum: f64,
}

/// Decoder inputs for `n` random shading queries.
pub fn decoder_inputs(m: &NeuralMaterial, n: usize, seed: u64) -> Result<Vec<f32>, NeuralError> {
    let mut rng = seeded_rng(seed);
    let din = m.config.brdf_input_dim();
    let mut out = vec![0f32; n * din];
    let raw_n = m.config.frame_outputs();
    for (q, row) in random_queries(m, n, &mut rng).into_iter().zip(out.chunks_exact_mut(din)) {
        let (z, _) = m
            .latent
            .as_ref()
            .ok_or(NeuralError::NoLatent)?
            .fetch(LatentQuery { uv: q.uv, level: q.level }, rng.gen());
        let raw = m.frame_layer.forward(&z).expect("frame layer shape");
        let frames = m.extract_frames(&z);
        let (_, wo) = sample_half_diff(&mut rng);
        m.decoder_input(&z, &raw[..raw_n], &frames, q.wi, wo, row);
    }
    Ok(out)
}

/// Times the BRDF decoder on `n` evaluations through the per-layer FP32
/// path, the fused FP16 path, and the batched fused FP16 path (parallel
/// over the current rayon pool).
pub fn bench_decoder(net: &Mlp, inputs: &[f32], agree_tol: f64) -> BenchReport {
    let q = net.quantize();
    let din = net.input_dim();
    let dout = net.output_dim();
    let n = inputs.len() / din;

    let t = Instant::now();
    let mut naive = vec![0f32; n * dout];
    for (x, y) in inputs.chunks_exact(din).zip(naive.chunks_exact_mut(dout)) {
        y.copy_from_slice(&net.forward(x).expect("decoder shape"));
    }
    let t_naive = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut fused = vec![0f32; n * dout];
    for (x, y) in inputs.chunks_exact(din).zip(fused.chunks_exact_mut(dout)) {
        q.fused_forward(x, y).expect("decoder shape");
    }
    let t_fused = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut batched = vec![0f32; n * dout];
    const CHUNK: usize = 4096;
    inputs
        .par_chunks(CHUNK * din)
        .zip(batched.par_chunks_mut(CHUNK * dout))
        .for_each(|(x, y)| q.fused_forward_batch(x, y).expect("decoder shape"));
    let t_batched = t.elapsed().as_secs_f64();

    let (mut max_rel, mut sum_rel) = (0.0f64, 0.0f64);
    for (a, b) in naive.iter().zip(&fused) {
        // relative on the BRDF value exp(y) - 1
        let fa = (*a as f64).exp_m1().max(0.0);
        let fb = (*b as f64).exp_m1().max(0.0);
        let r = (fa - fb).abs() / (fa.abs().max(fb.abs()) + 1e-3);
        max_rel = max_rel.max(r);
        sum_rel += r;
    }
    let agree = fused.iter().zip(&batched).all(|(a, b)| (a - b).abs() <= 1e-5 * a.abs().max(1.0));
    let mean_rel = sum_rel / naive.len().max(1) as f64;
    BenchReport {
        evaluations: n,
        threads: rayon::current_num_threads(),
        naive_fp32_evals_per_sec: n as f64 / t_naive.max(1e-12),
        fused_fp16_evals_per_sec: n as f64 / t_fused.max(1e-12),
        batched_fused_fp16_evals_per_sec: n as f64 / t_batched.max(1e-12),
        max_rel_diff: max_rel,
        mean_rel_diff: mean_rel,
        outputs_agree: agree && mean_rel <= agree_tol,
        checksum: batched.iter().map(|&v| v as f64).sum(),
    }
}

/// Benchmarks a material's BRDF decoder on `n` random queries.
pub fn bench_material(m: &NeuralMaterial, n: usize, seed: u64) -> Result<BenchReport, NeuralError> {
    let inputs = decoder_inputs(m, n, seed)?;
    Ok(bench_decoder(&m.brdf, &inputs, 1e-2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentPyramid;
    use crate::neural::NeuralConfig;
    use crate::reference::builtin_layered;

    fn material() -> NeuralMaterial {
        let r = builtin_layered(16);
        let mut m = NeuralMaterial::new(NeuralConfig::default(), r.param_dim(), &mut seeded_rng(1)).unwrap();
        m.latent = Some(LatentPyramid::bake_from_encoder(m.encoder.as_ref().unwrap(), &r).unwrap());
        m.encoder = None;
        m
    }

    #[test]
    fn fresh_material_validates() {
        let rep = validate(&material(), 3).unwrap();
        for c in &rep.checks {
            assert!(c.passed, "{c:?}");
        }
        assert_eq!(rep.clamped_values, 0);
    }

    #[test]
    fn huge_weights_are_reported() {
        let mut m = material();
        m.brdf.params_mut().iter_mut().for_each(|w| *w = 1e6);
        let rep = validate(&m, 3).unwrap();
        assert!(rep.clamped_values > 0);
        assert!(!rep.warnings.is_empty());
    }

    #[test]
    fn bench_reports_positive_throughputs() {
        let r = bench_material(&material(), 2000, 5).unwrap();
        assert!(r.naive_fp32_evals_per_sec > 0.0);
        assert!(r.fused_fp16_evals_per_sec > 0.0);
        assert!(r.batched_fused_fp16_evals_per_sec > 0.0);
        assert!(r.outputs_agree, "{r:?}");
        assert!(r.mean_rel_diff < 1e-2);
    }

    #[test]
    fn bench_outputs_independent_of_threads() {
        let m = material();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let eight = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = one.install(|| bench_material(&m, 9000, 7).unwrap());
        let b = eight.install(|| bench_material(&m, 9000, 7).unwrap());
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.max_rel_diff, b.max_rel_diff);
    }
}
