//! Neural material baking: analytic layered reference BRDFs, a latent mip
//! pyramid with two small MLP decoders, an analytic GGX importance-sampling
//! proxy, and a CPU path tracer with quantized fused inference.

pub mod geom;
pub mod ggx;
pub mod pfm;
pub mod reference;
pub mod stats;
pub mod texture;
pub mod mlp;
pub mod dual;
pub mod proxy;
pub mod latent;
pub mod neural;
pub mod trainer;
pub mod render;
pub mod harness;
