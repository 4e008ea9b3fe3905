//! Text-to-image fusion applied once to the backbone tokens:
//!
//! ```text
//! T      = FeatMap(F_t)                      (P × d)
//! F_t2i  = MultiHead(Q = F_i, K = T, V = T)  (image tokens query the text)
//! F_out  = F_i + F_t2i
//! ```
//!
//! The output projection starts at zero, so a freshly added fusion block is
//! an exact identity on the image tokens.

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Every fusion parameter name starts with this prefix.
pub const PREFIX: &str = "fusion.";

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect(),
    )
}

pub fn is_fusion_param(name: &str) -> bool {
    name.starts_with(PREFIX)
}

pub fn is_registered(params: &ParamStore) -> bool {
    params.id("fusion.feat_map.w").is_some()
}

/// Adds the fusion parameters with a zeroed output projection.
pub fn register(params: &mut ParamStore, d_text: usize, d: usize, rng: &mut impl Rng) {
    params.register("fusion.feat_map.w", xavier(rng, d_text, d));
    params.register("fusion.feat_map.b", Tensor::zeros(1, d));
    for p in ["q", "k", "v"] {
        params.register(format!("fusion.{p}.w"), xavier(rng, d, d));
        params.register(format!("fusion.{p}.b"), Tensor::zeros(1, d));
    }
    params.register("fusion.o.w", Tensor::zeros(d, d));
    params.register("fusion.o.b", Tensor::zeros(1, d));
}

fn id(params: &ParamStore, name: &str) -> crate::autodiff::ParamId {
    params
        .id(name)
        .unwrap_or_else(|| panic!("fusion parameter {name} not registered"))
}

/// Fused image tokens. `image: T × d`, `text: P × d_text`.
pub fn fuse(tape: &mut Tape, image: Var, text: Var, heads: usize) -> Var {
    let p = tape.params();
    let t = tape.linear(text, id(p, "fusion.feat_map.w"), id(p, "fusion.feat_map.b"));
    let q = tape.linear(image, id(p, "fusion.q.w"), id(p, "fusion.q.b"));
    let k = tape.linear(t, id(p, "fusion.k.w"), id(p, "fusion.k.b"));
    let v = tape.linear(t, id(p, "fusion.v.w"), id(p, "fusion.v.b"));
    let a = tape.attention(q, k, v, heads, None);
    let out = tape.linear(a, id(p, "fusion.o.w"), id(p, "fusion.o.b"));
    tape.add(image, out)
}
