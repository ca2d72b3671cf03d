//! Multi-channel float images with wrap addressing, bilinear taps and
//! Gaussian mip filtering.

/// One bilinear tap: texel coordinates (already wrapped) and weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub x: usize,
    pub y: usize,
    pub weight: f64,
}

/// The four texels and weights of a wrapped bilinear lookup. Texel `(i, j)`
/// has its center at `((i + 0.5) / w, (j + 0.5) / h)`.
#[inline]
pub fn bilinear_taps(u: f64, v: f64, w: usize, h: usize) -> [Tap; 4] {
    let fx = u * w as f64 - 0.5;
    let fy = v * h as f64 - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let wrap = |i: f64, n: usize| (i as i64).rem_euclid(n as i64) as usize;
    let (xa, xb) = (wrap(x0, w), wrap(x0 + 1.0, w));
    let (ya, yb) = (wrap(y0, h), wrap(y0 + 1.0, h));
    [
        Tap { x: xa, y: ya, weight: (1.0 - tx) * (1.0 - ty) },
        Tap { x: xb, y: ya, weight: tx * (1.0 - ty) },
        Tap { x: xa, y: yb, weight: (1.0 - tx) * ty },
        Tap { x: xb, y: yb, weight: tx * ty },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, &mut [f32]),
    ) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                f(x, y, img.texel_mut(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn texel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn texel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn texel_wrapped(&self, x: i64, y: i64) -> &[f32] {
        self.texel(
            x.rem_euclid(self.width as i64) as usize,
            y.rem_euclid(self.height as i64) as usize,
        )
    }

    /// Bilinear lookup with wrap addressing; writes `channels` values.
    pub fn bilinear(&self, u: f64, v: f64, out: &mut [f64]) {
        out[..self.channels].iter_mut().for_each(|o| *o = 0.0);
        for tap in bilinear_taps(u, v, self.width, self.height) {
            if tap.weight == 0.0 {
                continue;
            }
            for (o, &t) in out.iter_mut().zip(self.texel(tap.x, tap.y)) {
                *o += tap.weight * t as f64;
            }
        }
    }

    /// Texel-center uv of texel `(x, y)`.
    pub fn texel_center(&self, x: usize, y: usize) -> (f64, f64) {
        (
            (x as f64 + 0.5) / self.width as f64,
            (y as f64 + 0.5) / self.height as f64,
        )
    }
}

/// Number of pyramid levels for a `w x h` base, halving down to 1x1.
pub fn level_count(w: usize, h: usize) -> usize {
    let mut n = 1;
    let (mut w, mut h) = (w, h);
    while w > 1 || h > 1 {
        w = (w / 2).max(1);
        h = (h / 2).max(1);
        n += 1;
    }
    n
}

pub fn level_size(w: usize, h: usize, level: usize) -> (usize, usize) {
    ((w >> level).max(1), (h >> level).max(1))
}

/// Gaussian standard deviation (in level-0 texels) associated with level `l`:
/// the Gaussian matching a box of `2^l` texels.
#[inline]
pub fn level_sigma(level: usize) -> f64 {
    (1u64 << level) as f64 / 2.0
}

fn gaussian_weights(center: f64, sigma: f64) -> (i64, Vec<f64>) {
    let radius = (3.0 * sigma).ceil() as i64 + 1;
    let first = (center - 0.5).floor() as i64 - radius;
    let mut w = Vec::with_capacity((2 * radius + 2) as usize);
    for k in first..=first + 2 * radius + 1 {
        let d = k as f64 + 0.5 - center;
        w.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    (first, w)
}

/// Builds a pyramid whose level `l >= 1` texels are Gaussian-weighted
/// averages (sigma = `level_sigma(l)`) of the base image around the texel's
/// footprint center. Level 0 is the base image itself.
pub fn gaussian_pyramid(base: &Image, levels: usize) -> Vec<Image> {
    let mut out = vec![base.clone()];
    let c = base.channels;
    for level in 1..levels {
        let (lw, lh) = level_size(base.width, base.height, level);
        let sx = base.width as f64 / lw as f64;
        let sy = base.height as f64 / lh as f64;
        let sigma = level_sigma(level);
        // horizontal pass: base.height rows x lw columns
        let mut tmp = vec![0f64; base.height * lw * c];
        for i in 0..lw {
            let (first, w) = gaussian_weights((i as f64 + 0.5) * sx, sigma);
            for y in 0..base.height {
                let dst = &mut tmp[(y * lw + i) * c..(y * lw + i + 1) * c];
                for (k, &wk) in w.iter().enumerate() {
                    let t = base.texel_wrapped(first + k as i64, y as i64);
                    for ch in 0..c {
                        dst[ch] += wk * t[ch] as f64;
                    }
                }
            }
        }
        let mut img = Image::new(lw, lh, c);
        for j in 0..lh {
            let (first, w) = gaussian_weights((j as f64 + 0.5) * sy, sigma);
            for i in 0..lw {
                let mut acc = vec![0f64; c];
                for (k, &wk) in w.iter().enumerate() {
                    let y = (first + k as i64).rem_euclid(base.height as i64) as usize;
                    let src = &tmp[(y * lw + i) * c..(y * lw + i + 1) * c];
                    for ch in 0..c {
                        acc[ch] += wk * src[ch];
                    }
                }
                for (d, a) in img.texel_mut(i, j).iter_mut().zip(&acc) {
                    *d = *a as f32;
                }
            }
        }
        out.push(img);
    }
    out
}
