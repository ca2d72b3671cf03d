//! Small statistics helpers used by validation checks and tests.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson chi-square goodness-of-fit test. Cells whose expected count is
/// below `min_expected` are pooled into a single cell (as in pbrt's BSDF
/// tests). Returns the p-value; `1.0` when there are too few cells to test.
pub fn chi_square_test(observed: &[f64], expected: &[f64], min_expected: f64) -> f64 {
    assert_eq!(observed.len(), expected.len());
    let mut order: Vec<usize> = (0..expected.len()).collect();
    order.sort_by(|&a, &b| expected[a].total_cmp(&expected[b]));

    let mut pooled_obs = 0.0;
    let mut pooled_exp = 0.0;
    let mut chsq = 0.0;
    let mut dof = 0usize;
    for &i in &order {
        if expected[i] == 0.0 {
            if observed[i] > 1e-5 * observed.iter().sum::<f64>() {
                // mass where the density claims none
                return 0.0;
            }
            continue;
        }
        if expected[i] < min_expected {
            pooled_obs += observed[i];
            pooled_exp += expected[i];
        } else if pooled_exp > 0.0 && pooled_exp < min_expected {
            // fold the leftover pool into the next cell
            let o = observed[i] + pooled_obs;
            let e = expected[i] + pooled_exp;
            chsq += (o - e) * (o - e) / e;
            pooled_obs = 0.0;
            pooled_exp = 0.0;
            dof += 1;
        } else {
            chsq += (observed[i] - expected[i]).powi(2) / expected[i];
            dof += 1;
        }
    }
    if pooled_exp > 0.0 {
        chsq += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        dof += 1;
    }
    if dof < 2 {
        return 1.0;
    }
    let dist = ChiSquared::new((dof - 1) as f64).expect("positive dof");
    1.0 - dist.cdf(chsq)
}

/// Running mean / variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n.max(1) as f64).sqrt()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
