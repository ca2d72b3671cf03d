//! Minimal fully-connected networks: batched forward/backward, Adam,
//! FP16 post-training quantization, and a fused forward path over weights
//! packed in access order.
//!
//! Parameters are stored flat: for each layer the `out x in` weight matrix
//! (row-major) followed by the bias vector.

use std::io::{Read, Write};

use half::f16;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LEAKY_SLOPE: f32 = 0.01;
pub const FP16_MAX: f32 = 65504.0;

const BLOB_MAGIC: &[u8; 4] = b"NMLP";
const BLOB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("network needs at least one layer")]
    Empty,
    #[error("malformed weight blob: {0}")]
    Blob(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    LeakyRelu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output (the sign of the
    /// output matches the sign of the input for every supported activation).
    #[inline]
    pub fn derivative_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Linear => 1.0,
            Activation::LeakyRelu => {
                if y > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::LeakyRelu => 1,
            Activation::Relu => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Activation::Linear),
            1 => Some(Activation::LeakyRelu),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f32>,
}

/// Eight independent partial sums so the loop vectorizes.
#[inline]
fn dot8(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let n = a.len() / 8 * 8;
    for (ca, cb) in a[..n].chunks_exact(8).zip(b[..n].chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in n..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Per-layer buffers of a batched forward pass, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct BatchActivations {
    pub batch: usize,
    /// `values[0]` is the input, `values[l + 1]` the output of layer `l`.
    pub values: Vec<Vec<f32>>,
    delta: Vec<f32>,
    delta_next: Vec<f32>,
}

impl BatchActivations {
    pub fn output(&self) -> &[f32] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// Network with the given layer widths; hidden layers use `hidden`, the
    /// last layer uses `output`. Parameters are zero.
    pub fn zeros(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self, MlpError> {
        if dims.len() < 2 {
            return Err(MlpError::Empty);
        }
        let n = dims.len() - 1;
        let activations = (0..n).map(|l| if l + 1 == n { output } else { hidden }).collect();
        let count = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            dims: dims.to_vec(),
            activations,
            params: vec![0.0; count],
        })
    }

    /// Uniform He-style initialization: weights in `+-sqrt(6 / fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, MlpError> {
        let mut net = Self::zeros(dims, hidden, output)?;
        for l in 0..net.num_layers() {
            let bound = (6.0 / dims[l] as f32).sqrt();
            let (w, _) = net.layer_params_mut(l);
            w.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn from_parts(dims: Vec<usize>, activations: Vec<Activation>, params: Vec<f32>) -> Result<Self, MlpError> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(MlpError::Empty);
        }
        let count: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != count {
            return Err(MlpError::Dimension {
                expected: count,
                got: params.len(),
            });
        }
        Ok(Self {
            dims,
            activations,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Architecture string such as `"20-32-32-3"`.
    pub fn arch_string(&self) -> String {
        self.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.dims[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weight matrix (out x in, row-major) and bias of layer `l`.
    pub fn layer_params(&self, l: usize) -> (&[f32], &[f32]) {
        let off = self.layer_offset(l);
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let (w, rest) = self.params[off..].split_at(i * o);
        (w, &rest[..o])
    }

    pub fn layer_params_mut(&mut self, l: usize) -> (&mut [f32], &mut [f32]) {
        let off = self.layer_offset(l);
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let (w, rest) = self.params[off..].split_at_mut(i * o);
        (w, &mut rest[..o])
    }

    /// Straightforward per-layer forward pass with freshly allocated buffers.
    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>, MlpError> {
        if input.len() != self.input_dim() {
            return Err(MlpError::Dimension {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut x = input.to_vec();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer_params(l);
            let fan_in = self.dims[l];
            let act = self.activations[l];
            x = (0..self.dims[l + 1])
                .map(|o| act.apply(b[o] + dot8(&w[o * fan_in..(o + 1) * fan_in], &x)))
                .collect();
        }
        Ok(x)
    }

    /// Batched forward pass (`input` is `batch x input_dim`, row-major);
    /// keeps every layer's output in `acts` for [`Self::backward_batch`].
    pub fn forward_batch(&self, input: &[f32], batch: usize, acts: &mut BatchActivations) -> Result<(), MlpError> {
        if input.len() != batch * self.input_dim() {
            return Err(MlpError::Dimension {
                expected: batch * self.input_dim(),
                got: input.len(),
            });
        }
        let n = self.num_layers();
        acts.batch = batch;
        acts.values.resize_with(n + 1, Vec::new);
        acts.values[0].clear();
        acts.values[0].extend_from_slice(input);
        for l in 0..n {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let (w, bias) = self.layer_params(l);
            let act = self.activations[l];
            let (prev, next) = acts.values.split_at_mut(l + 1);
            let x = &prev[l];
            let y = &mut next[0];
            y.resize(batch * fan_out, 0.0);
            for s in 0..batch {
                let xs = &x[s * fan_in..(s + 1) * fan_in];
                let ys = &mut y[s * fan_out..(s + 1) * fan_out];
                for o in 0..fan_out {
                    ys[o] = act.apply(bias[o] + dot8(&w[o * fan_in..(o + 1) * fan_in], xs));
                }
            }
        }
        Ok(())
    }

    /// Reverse-mode gradients for the batch held in `acts`. `out_grad` is the
    /// loss gradient w.r.t. the network outputs (`batch x output_dim`).
    /// Parameter gradients are *added* to `grads`; the input gradient is
    /// written to `in_grad` when given.
    pub fn backward_batch(
        &self,
        acts: &mut BatchActivations,
        out_grad: &[f32],
        grads: &mut [f32],
        in_grad: Option<&mut Vec<f32>>,
    ) -> Result<(), MlpError> {
        self.backward_impl(acts, out_grad, Some(grads), in_grad)
    }

    /// Input gradient only; parameter gradients are not formed.
    pub fn input_grad_batch(
        &self,
        acts: &mut BatchActivations,
        out_grad: &[f32],
        in_grad: &mut Vec<f32>,
    ) -> Result<(), MlpError> {
        self.backward_impl(acts, out_grad, None, Some(in_grad))
    }

    fn backward_impl(
        &self,
        acts: &mut BatchActivations,
        out_grad: &[f32],
        mut grads: Option<&mut [f32]>,
        mut in_grad: Option<&mut Vec<f32>>,
    ) -> Result<(), MlpError> {
        let batch = acts.batch;
        if out_grad.len() != batch * self.output_dim() {
            return Err(MlpError::Dimension {
                expected: batch * self.output_dim(),
                got: out_grad.len(),
            });
        }
        if let Some(g) = grads.as_deref() {
            if g.len() != self.params.len() {
                return Err(MlpError::Dimension {
                    expected: self.params.len(),
                    got: g.len(),
                });
            }
        }
        let n = self.num_layers();
        let mut delta = std::mem::take(&mut acts.delta);
        let mut delta_next = std::mem::take(&mut acts.delta_next);
        delta.clear();
        delta.extend_from_slice(out_grad);
        for l in (0..n).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let act = self.activations[l];
            let y = &acts.values[l + 1];
            for (d, &yv) in delta.iter_mut().zip(y.iter()) {
                *d *= act.derivative_from_output(yv);
            }
            let x = &acts.values[l];
            let off = self.layer_offset(l);
            if let Some(grads) = grads.as_deref_mut() {
                let (gw, gb) = grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for s in 0..batch {
                    let ds = &delta[s * fan_out..(s + 1) * fan_out];
                    let xs = &x[s * fan_in..(s + 1) * fan_in];
                    for o in 0..fan_out {
                        let d = ds[o];
                        if d != 0.0 {
                            axpy(&mut gw[o * fan_in..(o + 1) * fan_in], d, xs);
                            gb[o] += d;
                        }
                    }
                }
            }
            if l > 0 || in_grad.is_some() {
                let (w, _) = self.layer_params(l);
                delta_next.clear();
                delta_next.resize(batch * fan_in, 0.0);
                for s in 0..batch {
                    let ds = &delta[s * fan_out..(s + 1) * fan_out];
                    let gi = &mut delta_next[s * fan_in..(s + 1) * fan_in];
                    for o in 0..fan_out {
                        if ds[o] != 0.0 {
                            axpy(gi, ds[o], &w[o * fan_in..(o + 1) * fan_in]);
                        }
                    }
                }
                std::mem::swap(&mut delta, &mut delta_next);
            }
        }
        if let Some(g) = in_grad.as_deref_mut() {
            g.clear();
            g.extend_from_slice(&delta);
        }
        acts.delta = delta;
        acts.delta_next = delta_next;
        Ok(())
    }

    /// Single-sample backward pass returning `(parameter grads, input grad)`.
    pub fn backward(&self, input: &[f32], output_grad: &[f32]) -> Result<(Vec<f32>, Vec<f32>), MlpError> {
        let mut acts = BatchActivations::default();
        self.forward_batch(input, 1, &mut acts)?;
        let mut grads = vec![0.0; self.params.len()];
        let mut gin = Vec::new();
        self.backward_batch(&mut acts, output_grad, &mut grads, Some(&mut gin))?;
        Ok((grads, gin))
    }

    /// FP16 post-training quantization (round to nearest even). Values
    /// outside the FP16 range are clamped to `+-65504` and counted.
    pub fn quantize(&self) -> QuantizedMlp {
        let mut clamped = 0usize;
        let mut packed = Vec::with_capacity(self.params.len());
        for l in 0..self.num_layers() {
            let (w, b) = self.layer_params(l);
            let fan_in = self.dims[l];
            for o in 0..self.dims[l + 1] {
                for &v in w[o * fan_in..(o + 1) * fan_in].iter().chain(std::iter::once(&b[o])) {
                    let c = if v.abs() > FP16_MAX {
                        clamped += 1;
                        v.clamp(-FP16_MAX, FP16_MAX)
                    } else {
                        v
                    };
                    packed.push(f16::from_f32(c));
                }
            }
        }
        if clamped > 0 {
            log::warn!("fp16 quantization clamped {clamped} parameters to +-{FP16_MAX}");
        }
        QuantizedMlp::from_packed(self.dims.clone(), self.activations.clone(), packed, clamped)
    }

    // --- binary blob -------------------------------------------------------

    /// Writes the weight blob: magic, version, architecture header, FP32
    /// master section, FP16 packed section. Little-endian throughout.
    pub fn write_blob<W: Write>(&self, w: &mut W) -> Result<(), MlpError> {
        let q = self.quantize();
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&BLOB_VERSION.to_le_bytes())?;
        w.write_all(&(self.num_layers() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for a in &self.activations {
            w.write_all(&[a.tag()])?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.write_all(&(q.packed.len() as u64).to_le_bytes())?;
        for h in &q.packed {
            w.write_all(&h.to_bits().to_le_bytes())?;
        }
        w.write_all(&(q.clamped as u64).to_le_bytes())?;
        Ok(())
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_blob(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    /// Reads a blob, returning the master network and its packed FP16 copy.
    pub fn read_blob<R: Read>(r: &mut R) -> Result<(Mlp, QuantizedMlp), MlpError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != BLOB_MAGIC {
            return Err(MlpError::Blob("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != BLOB_VERSION {
            return Err(MlpError::Blob(format!("unsupported version {version}")));
        }
        let n = read_u32(r)? as usize;
        if n == 0 || n > 64 {
            return Err(MlpError::Blob(format!("bad layer count {n}")));
        }
        let mut dims = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            let d = read_u32(r)? as usize;
            if d == 0 || d > 1 << 16 {
                return Err(MlpError::Blob(format!("bad layer width {d}")));
            }
            dims.push(d);
        }
        let mut activations = Vec::with_capacity(n);
        for _ in 0..n {
            let mut t = [0u8];
            read_exact(r, &mut t)?;
            activations.push(Activation::from_tag(t[0]).ok_or_else(|| MlpError::Blob(format!("bad activation tag {}", t[0])))?);
        }
        let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let count = read_u64(r)? as usize;
        if count != expected {
            return Err(MlpError::Blob(format!("master section has {count} values, expected {expected}")));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 4];
            read_exact(r, &mut b)?;
            params.push(f32::from_le_bytes(b));
        }
        let hcount = read_u64(r)? as usize;
        if hcount != expected {
            return Err(MlpError::Blob(format!("packed section has {hcount} values, expected {expected}")));
        }
        let mut packed = Vec::with_capacity(hcount);
        for _ in 0..hcount {
            let mut b = [0u8; 2];
            read_exact(r, &mut b)?;
            packed.push(f16::from_bits(u16::from_le_bytes(b)));
        }
        let clamped = read_u64(r)? as usize;
        let net = Mlp::from_parts(dims.clone(), activations.clone(), params)?;
        Ok((net, QuantizedMlp::from_packed(dims, activations, packed, clamped)))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), MlpError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => MlpError::Blob("truncated".into()),
        _ => MlpError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, MlpError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, MlpError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// FP16 copy of a network. `packed` holds, layer by layer and neuron by
/// neuron, the neuron's weight row followed by its bias: exactly the order
/// in which the fused forward pass reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    packed: Vec<f16>,
    /// Widened copy of `packed` (same order, exact FP16 values) consumed by
    /// the CPU kernel, which has no native half-precision arithmetic.
    widened: Vec<f32>,
    clamped: usize,
    max_width: usize,
}

/// Largest layer width supported by the fused stack buffers.
pub const FUSED_MAX_WIDTH: usize = 128;
/// Samples processed per pass over the packed weights in [`QuantizedMlp::fused_forward_batch`].
pub const FUSED_LANES: usize = 8;
const LANES: usize = FUSED_LANES;

#[inline(always)]
fn axpy_lanes(acc: &mut [f32; LANES], w: f32, x: &[f32; LANES]) {
    for k in 0..LANES {
        acc[k] += w * x[k];
    }
}

#[inline]
pub fn round_f16(x: f32) -> f32 {
    f16::from_f32(x).to_f32()
}

impl QuantizedMlp {
    fn from_packed(dims: Vec<usize>, activations: Vec<Activation>, packed: Vec<f16>, clamped: usize) -> Self {
        let widened = packed.iter().map(|h| h.to_f32()).collect();
        let max_width = *dims.iter().max().unwrap();
        Self {
            dims,
            activations,
            packed,
            widened,
            clamped,
            max_width,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn packed(&self) -> &[f16] {
        &self.packed
    }

    /// Number of parameters clamped into the FP16 range during quantization.
    pub fn clamp_count(&self) -> usize {
        self.clamped
    }

    /// Network with the FP16 values as FP32 master parameters.
    pub fn dequantize(&self) -> Mlp {
        let mut net = Mlp::zeros(&self.dims, Activation::Linear, Activation::Linear).unwrap();
        net.activations = self.activations.clone();
        let mut k = 0;
        for l in 0..net.num_layers() {
            let fan_in = self.dims[l];
            let (w, b) = net.layer_params_mut(l);
            for o in 0..b.len() {
                for i in 0..fan_in {
                    w[o * fan_in + i] = self.widened[k];
                    k += 1;
                }
                b[o] = self.widened[k];
                k += 1;
            }
        }
        net
    }

    /// Single pass over the packed weights. The input is rounded to FP16;
    /// products and sums are accumulated in FP32.
    pub fn fused_forward(&self, input: &[f32], out: &mut [f32]) -> Result<(), MlpError> {
        if input.len() != self.input_dim() || out.len() != self.output_dim() {
            return Err(MlpError::Dimension {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        assert!(self.max_width <= FUSED_MAX_WIDTH);
        let mut a = [0f32; FUSED_MAX_WIDTH];
        let mut b = [0f32; FUSED_MAX_WIDTH];
        for (d, s) in a.iter_mut().zip(input) {
            *d = round_f16(*s);
        }
        let mut w = self.widened.as_slice();
        for (l, act) in self.activations.iter().enumerate() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let x = &a[..fan_in];
            for o in b[..fan_out].iter_mut() {
                let (row, rest) = w.split_at(fan_in + 1);
                *o = act.apply(dot8(&row[..fan_in], x) + row[fan_in]);
                w = rest;
            }
            std::mem::swap(&mut a, &mut b);
        }
        out.copy_from_slice(&a[..self.output_dim()]);
        Ok(())
    }

    /// Fused forward over many samples (`inputs` is `n x input_dim`), taking
    /// [`FUSED_LANES`] samples per pass over the weights so that each weight
    /// is loaded once per group.
    pub fn fused_forward_batch(&self, inputs: &[f32], outputs: &mut [f32]) -> Result<(), MlpError> {
        let (din, dout) = (self.input_dim(), self.output_dim());
        let n = inputs.len() / din;
        if inputs.len() != n * din || outputs.len() != n * dout {
            return Err(MlpError::Dimension {
                expected: n * dout,
                got: outputs.len(),
            });
        }
        assert!(self.max_width <= FUSED_MAX_WIDTH);
        // activations stored neuron-major, one lane per sample
        let mut a = vec![[0f32; LANES]; FUSED_MAX_WIDTH];
        let mut b = vec![[0f32; LANES]; FUSED_MAX_WIDTH];
        let mut start = 0;
        while start < n {
            let lanes = (n - start).min(LANES);
            a.iter_mut().for_each(|v| *v = [0.0; LANES]);
            for s in 0..lanes {
                let row = &inputs[(start + s) * din..(start + s + 1) * din];
                for (ai, v) in a.iter_mut().zip(row) {
                    ai[s] = round_f16(*v);
                }
            }
            let mut off = 0;
            for (l, &act) in self.activations.iter().enumerate() {
                let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
                let stride = fan_in + 1;
                let layer = &self.widened[off..off + fan_out * stride];
                off += fan_out * stride;
                let x = &a[..fan_in];
                let mut quads = layer.chunks_exact(4 * stride);
                let mut dst = b.iter_mut();
                // four neurons at a time: each activation vector feeds four rows
                for rows in &mut quads {
                    let (r0, rest) = rows.split_at(stride);
                    let (r1, rest) = rest.split_at(stride);
                    let (r2, r3) = rest.split_at(stride);
                    let mut acc = [[r0[fan_in]; LANES], [r1[fan_in]; LANES], [r2[fan_in]; LANES], [r3[fan_in]; LANES]];
                    let w = r0.iter().zip(r1).zip(r2).zip(r3);
                    for (xv, (((&w0, &w1), &w2), &w3)) in x.iter().zip(w) {
                        axpy_lanes(&mut acc[0], w0, xv);
                        axpy_lanes(&mut acc[1], w1, xv);
                        axpy_lanes(&mut acc[2], w2, xv);
                        axpy_lanes(&mut acc[3], w3, xv);
                    }
                    // `acc` first: zip must not pull a fifth neuron from `dst`
                    for (acc, d) in acc.iter().zip(&mut dst) {
                        *d = acc.map(|v| act.apply(v));
                    }
                }
                for (row, d) in quads.remainder().chunks_exact(stride).zip(dst) {
                    let mut acc = [row[fan_in]; LANES];
                    for (xv, &wi) in x.iter().zip(row) {
                        axpy_lanes(&mut acc, wi, xv);
                    }
                    *d = acc.map(|v| act.apply(v));
                }
                std::mem::swap(&mut a, &mut b);
            }
            for s in 0..lanes {
                for j in 0..dout {
                    outputs[(start + s) * dout + j] = a[j][s];
                }
            }
            start += lanes;
        }
        Ok(())
    }
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One bias-corrected Adam update of `params` with `grads`.
    pub fn update(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        let step_size = (self.lr as f64 / c1) as f32;
        let c2 = c2 as f32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step_size * *m / ((*v / c2).sqrt() + eps);
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[f32]) {
        self.update(net.params_mut(), grads);
    }
}
