//! The detector: patch backbone, optional fusion, transformer encoder,
//! text-guided query selection and a decoder that can carry auxiliary
//! queries next to the object queries.
//!
//! Object-query rows of the decoder self-attention never read auxiliary
//! keys. Combined with row-independent matrix products and a fixed key
//! order inside attention, object-query outputs are bit-identical whether or
//! not auxiliary queries are present.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{inverse_sigmoid, sigmoid, AttnMask, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{self, xavier};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Log-odds of a 0.01 prior, the initial classification bias.
const PRIOR_BIAS: f64 = -4.595_119_850_134_59;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_object_queries: usize,
    pub max_aux_queries: usize,
    pub d_text: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            num_object_queries: 20,
            max_aux_queries: 200,
            d_text: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config("model.patch_size", "must divide image_size"));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config("model.hidden_dim", "must be divisible by num_heads"));
        }
        if self.hidden_dim % 8 != 0 || self.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "must be a positive multiple of 8"));
        }
        if self.num_object_queries == 0 {
            return Err(Error::config("model.num_object_queries", "must be >= 1"));
        }
        if self.d_text == 0 || self.ffn_dim == 0 {
            return Err(Error::config("model", "d_text and ffn_dim must be >= 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Boxes and per-prompt logits from one supervision point.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `rows × prompts`.
    pub logits: Var,
    /// `rows × 4`, center form, each entry in `(0, 1)`.
    pub boxes: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Encoder proposals, one row per encoder token.
    pub proposals: HeadOutput,
    /// Token indices chosen by query selection, best first.
    pub selected: Vec<usize>,
    /// Reference boxes entering the first decoder layer, center form.
    pub initial_refs: Tensor,
    /// One entry per decoder layer; rows are object queries then auxiliary.
    pub layers: Vec<HeadOutput>,
    pub num_object: usize,
    pub num_aux: usize,
    /// The detached quantities this pass used.
    pub frozen: Frozen,
}

/// Values the forward pass computes and then cuts from the gradient path:
/// the selected tokens and each decoder layer's input reference boxes.
/// Replaying a pass with these held fixed gives the function whose
/// derivative the backward pass computes.
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen {
    pub selected: Vec<usize>,
    pub layer_refs: Vec<Tensor>,
}

/// One scored box. `scores[p]` is the probability for prompt `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub scores: Vec<f64>,
}

impl Detection {
    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor::filled(rows, cols, 1.0)
}

/// Sinusoidal features of each value in `coords` (one row per item), `width`
/// features per value: `sin(2π c / 10000^(2i/width)), cos(...)` interleaved.
fn sine_features(coords: &[Vec<f64>], width: usize) -> Tensor {
    let per = coords.first().map_or(0, Vec::len);
    let mut out = Tensor::zeros(coords.len(), per * width);
    for (r, row) in coords.iter().enumerate() {
        let dst = out.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            for i in 0..width / 2 {
                let freq = 10000f64.powf(2.0 * i as f64 / width as f64);
                let a = v * std::f64::consts::TAU / freq;
                dst[c * width + 2 * i] = a.sin();
                dst[c * width + 2 * i + 1] = a.cos();
            }
        }
    }
    out
}

/// Sinusoidal embedding of center-form boxes, `rows × d`.
pub fn box_embedding(boxes: &Tensor, d: usize) -> Tensor {
    let coords: Vec<Vec<f64>> = (0..boxes.rows()).map(|r| boxes.row(r).to_vec()).collect();
    sine_features(&coords, d / 4)
}

/// 2-D sinusoidal encoding of a `grid × grid` token layout, `tokens × d`.
pub fn grid_embedding(grid: usize, d: usize) -> Tensor {
    let coords: Vec<Vec<f64>> = (0..grid * grid)
        .map(|t| {
            let (y, x) = (t / grid, t % grid);
            vec![(y as f64 + 0.5) / grid as f64, (x as f64 + 0.5) / grid as f64]
        })
        .collect();
    sine_features(&coords, d / 2)
}

impl Model {
    /// Fresh stage-one model: no fusion parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let linear = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            p.register(format!("{name}.w"), xavier(rng, i, o));
            p.register(format!("{name}.b"), Tensor::zeros(1, o));
        };
        let zero_linear = |p: &mut ParamStore, name: &str, i: usize, o: usize| {
            p.register(format!("{name}.w"), Tensor::zeros(i, o));
            p.register(format!("{name}.b"), Tensor::zeros(1, o));
        };
        let norm = |p: &mut ParamStore, name: &str| {
            p.register(format!("{name}.g"), ones(1, d));
            p.register(format!("{name}.b"), Tensor::zeros(1, d));
        };
        linear(&mut p, &mut rng, "backbone.patch", config.patch_dim(), d);
        linear(&mut p, &mut rng, "text.feat_map", config.d_text, d);
        for l in 0..config.encoder_layers {
            let pre = format!("encoder.{l}");
            norm(&mut p, &format!("{pre}.ln1"));
            for m in ["q", "k", "v", "o"] {
                linear(&mut p, &mut rng, &format!("{pre}.attn.{m}"), d, d);
            }
            norm(&mut p, &format!("{pre}.ln2"));
            linear(&mut p, &mut rng, &format!("{pre}.ffn.1"), d, f);
            linear(&mut p, &mut rng, &format!("{pre}.ffn.2"), f, d);
        }
        norm(&mut p, "encoder.ln");
        linear(&mut p, &mut rng, "select.box.0", d, d);
        zero_linear(&mut p, "select.box.1", d, 4);
        p.register(
            "decoder.query.content",
            xavier(&mut rng, config.num_object_queries, d),
        );
        p.register("decoder.aux.content", xavier(&mut rng, 1, d));
        linear(&mut p, &mut rng, "decoder.pos.0", d, d);
        linear(&mut p, &mut rng, "decoder.pos.1", d, d);
        for l in 0..config.decoder_layers {
            let pre = format!("decoder.{l}");
            norm(&mut p, &format!("{pre}.ln_self"));
            for m in ["q", "k", "v", "o"] {
                linear(&mut p, &mut rng, &format!("{pre}.self.{m}"), d, d);
            }
            norm(&mut p, &format!("{pre}.ln_cross"));
            for m in ["q", "k", "v", "o"] {
                linear(&mut p, &mut rng, &format!("{pre}.cross.{m}"), d, d);
            }
            norm(&mut p, &format!("{pre}.ln_ffn"));
            linear(&mut p, &mut rng, &format!("{pre}.ffn.1"), d, f);
            linear(&mut p, &mut rng, &format!("{pre}.ffn.2"), f, d);
            linear(&mut p, &mut rng, &format!("{pre}.box.0"), d, d);
            zero_linear(&mut p, &format!("{pre}.box.1"), d, 4);
        }
        norm(&mut p, "decoder.ln");
        p.register("cls.bias", Tensor::scalar(PRIOR_BIAS));
        Ok(Self { config, params: p })
    }

    pub fn has_fusion(&self) -> bool {
        fusion::is_registered(&self.params)
    }

    /// Adds zero-output fusion parameters; a no-op if already present.
    pub fn enable_fusion(&mut self, seed: u64) {
        if self.has_fusion() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6675_7369_6f6e);
        fusion::register(
            &mut self.params,
            self.config.d_text,
            self.config.hidden_dim,
            &mut rng,
        );
    }

    fn id(&self, name: &str) -> ParamId {
        self.params
            .id(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
    }

    fn lin(&self, t: &mut Tape, x: Var, name: &str) -> Var {
        t.linear(x, self.id(&format!("{name}.w")), self.id(&format!("{name}.b")))
    }

    fn norm(&self, t: &mut Tape, x: Var, name: &str) -> Var {
        let g = t.param(self.id(&format!("{name}.g")));
        let b = t.param(self.id(&format!("{name}.b")));
        t.layer_norm(x, g, b)
    }

    fn mha(&self, t: &mut Tape, name: &str, xq: Var, xk: Var, xv: Var, mask: Option<&AttnMask>) -> Var {
        let q = self.lin(t, xq, &format!("{name}.q"));
        let k = self.lin(t, xk, &format!("{name}.k"));
        let v = self.lin(t, xv, &format!("{name}.v"));
        let a = t.attention(q, k, v, self.config.num_heads, mask);
        self.lin(t, a, &format!("{name}.o"))
    }

    fn mlp(&self, t: &mut Tape, x: Var, name: &str) -> Var {
        let h = self.lin(t, x, &format!("{name}.0"));
        let h = t.gelu(h);
        self.lin(t, h, &format!("{name}.1"))
    }

    fn ffn(&self, t: &mut Tape, x: Var, name: &str) -> Var {
        let h = self.lin(t, x, &format!("{name}.1"));
        let h = t.gelu(h);
        self.lin(t, h, &format!("{name}.2"))
    }

    /// Patch embedding plus positional encoding. `patches: tokens × patch_dim`.
    pub fn backbone(&self, t: &mut Tape, patches: &Tensor) -> Result<Var> {
        let c = &self.config;
        if patches.shape() != [c.num_tokens(), c.patch_dim()] {
            return Err(Error::Shape(format!(
                "expected {}x{} patches, got {:?}",
                c.num_tokens(),
                c.patch_dim(),
                patches.shape()
            )));
        }
        let x = t.constant(patches.clone());
        let e = self.lin(t, x, "backbone.patch");
        let pos = t.constant(grid_embedding(c.grid(), c.hidden_dim));
        Ok(t.add(e, pos))
    }

    pub fn encoder(&self, t: &mut Tape, tokens: Var) -> Var {
        let mut x = tokens;
        for l in 0..self.config.encoder_layers {
            let pre = format!("encoder.{l}");
            let h = self.norm(t, x, &format!("{pre}.ln1"));
            let a = self.mha(t, &format!("{pre}.attn"), h, h, h, None);
            x = t.add(x, a);
            let h = self.norm(t, x, &format!("{pre}.ln2"));
            let f = self.ffn(t, h, &format!("{pre}.ffn"));
            x = t.add(x, f);
        }
        self.norm(t, x, "encoder.ln")
    }

    /// Text embeddings mapped to the hidden width.
    pub fn project_text(&self, t: &mut Tape, text: &Tensor) -> Result<Var> {
        if text.cols() != self.config.d_text || text.rows() == 0 {
            return Err(Error::Shape(format!(
                "expected prompts x {} text embeddings, got {:?}",
                self.config.d_text,
                text.shape()
            )));
        }
        let x = t.constant(text.clone());
        Ok(self.lin(t, x, "text.feat_map"))
    }

    /// `h · textᵀ / √d + bias`.
    pub fn classify(&self, t: &mut Tape, h: Var, text: Var) -> Var {
        let p = t.value(text).rows();
        let s = t.matmul_bt(h, text);
        let s = t.scale(s, 1.0 / (self.config.hidden_dim as f64).sqrt());
        let bias = t.param(self.id("cls.bias"));
        let one = t.constant(ones(1, p));
        let row = t.matmul(bias, one);
        t.add_row(s, row)
    }

    /// `sigmoid(mlp(h) + logit(reference))` with the reference held constant.
    fn refine(&self, t: &mut Tape, h: Var, name: &str, refs: &Tensor) -> Var {
        let delta = self.mlp(t, h, name);
        let anchor = t.constant(refs.map(inverse_sigmoid));
        let z = t.add(delta, anchor);
        t.sigmoid(z)
    }

    pub fn decoder_mask(num_object: usize, num_aux: usize) -> AttnMask {
        let n = num_object + num_aux;
        let mut allowed = vec![true; n * n];
        for i in 0..num_object {
            for j in num_object..n {
                allowed[i * n + j] = false;
            }
        }
        AttnMask::new(n, n, allowed)
    }

    /// Top tokens by best prompt similarity, ties to the lower index.
    pub fn select_tokens(tokens: &Tensor, text: &Tensor, k: usize) -> Vec<usize> {
        let score: Vec<f64> = (0..tokens.rows())
            .map(|i| {
                (0..text.rows())
                    .map(|p| crate::tensor::dot(tokens.row(i), text.row(p)))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut idx: Vec<usize> = (0..tokens.rows()).collect();
        idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    fn token_anchor(&self, token: usize) -> [f64; 4] {
        let g = self.config.grid();
        let s = 1.0 / g as f64;
        [
            ((token % g) as f64 + 0.5) * s,
            ((token / g) as f64 + 0.5) * s,
            s,
            s,
        ]
    }

    /// Full forward pass. `aux_boxes` are the auxiliary queries' reference
    /// boxes; pass an empty slice for inference.
    pub fn forward(
        &self,
        t: &mut Tape,
        patches: &Tensor,
        text: &Tensor,
        aux_boxes: &[BBox],
    ) -> Result<ForwardOutput> {
        self.forward_frozen(t, patches, text, aux_boxes, None)
    }

    /// Forward pass that takes the detached quantities from `frozen` when
    /// given instead of computing them.
    pub fn forward_frozen(
        &self,
        t: &mut Tape,
        patches: &Tensor,
        text: &Tensor,
        aux_boxes: &[BBox],
        frozen: Option<&Frozen>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if aux_boxes.len() > c.max_aux_queries {
            return Err(Error::Shape(format!(
                "{} auxiliary queries exceed the limit of {}",
                aux_boxes.len(),
                c.max_aux_queries
            )));
        }
        let d = c.hidden_dim;
        let mut tokens = self.backbone(t, patches)?;
        if self.has_fusion() {
            let txt = t.constant(text.clone());
            tokens = fusion::fuse(t, tokens, txt, c.num_heads);
        }
        let memory = self.encoder(t, tokens);
        let ptext = self.project_text(t, text)?;

        let selected = match frozen {
            Some(f) => f.selected.clone(),
            None => Self::select_tokens(t.value(memory), t.value(ptext), c.num_object_queries),
        };
        let n_obj = selected.len();
        let anchors = Tensor::from_rows(
            &(0..c.num_tokens())
                .map(|i| self.token_anchor(i).to_vec())
                .collect::<Vec<_>>(),
        );
        let prop_boxes = self.refine(t, memory, "select.box", &anchors);
        let prop_logits = self.classify(t, memory, ptext);
        let proposals = HeadOutput {
            logits: prop_logits,
            boxes: prop_boxes,
        };

        let n_aux = aux_boxes.len();
        let mut refs = t.value(prop_boxes).gather_rows(&selected);
        if n_aux > 0 {
            let mut data = refs.into_vec();
            for b in aux_boxes {
                data.extend(b.to_center_form().map(|v| v.clamp(1e-4, 1.0 - 1e-4)));
            }
            refs = Tensor::from_vec(n_obj + n_aux, 4, data);
        }
        if let Some(f) = frozen {
            if let Some(r) = f.layer_refs.first() {
                refs = r.clone();
            }
        }
        let initial_refs = refs.clone();
        let mut layer_refs = Vec::with_capacity(c.decoder_layers);

        let content = t.param(self.id("decoder.query.content"));
        let mut x = if n_obj < c.num_object_queries {
            t.slice_rows(content, 0, n_obj)
        } else {
            content
        };
        let mask = if n_aux > 0 {
            let aux = t.param(self.id("decoder.aux.content"));
            let aux = t.gather_rows(aux, &vec![0; n_aux]);
            x = t.concat_rows(&[x, aux]);
            Some(Self::decoder_mask(n_obj, n_aux))
        } else {
            None
        };

        let mut layers = Vec::with_capacity(c.decoder_layers);
        for l in 0..c.decoder_layers {
            let pre = format!("decoder.{l}");
            if let Some(r) = frozen.and_then(|f| f.layer_refs.get(l)) {
                refs = r.clone();
            }
            layer_refs.push(refs.clone());
            let sine = t.constant(box_embedding(&refs, d));
            let pos = self.mlp(t, sine, "decoder.pos");

            let h = self.norm(t, x, &format!("{pre}.ln_self"));
            let qk = t.add(h, pos);
            let a = self.mha(t, &format!("{pre}.self"), qk, qk, h, mask.as_ref());
            x = t.add(x, a);

            let h = self.norm(t, x, &format!("{pre}.ln_cross"));
            let q = t.add(h, pos);
            let a = self.mha(t, &format!("{pre}.cross"), q, memory, memory, None);
            x = t.add(x, a);

            let h = self.norm(t, x, &format!("{pre}.ln_ffn"));
            let f = self.ffn(t, h, &format!("{pre}.ffn"));
            x = t.add(x, f);

            let out = self.norm(t, x, "decoder.ln");
            let logits = self.classify(t, out, ptext);
            let boxes = self.refine(t, out, &format!("{pre}.box"), &refs);
            refs = t.value(boxes).clone();
            layers.push(HeadOutput { logits, boxes });
        }

        if let Some(op) = t.nonfinite_op() {
            return Err(Error::NonFiniteActivation { op });
        }
        Ok(ForwardOutput {
            proposals,
            selected: selected.clone(),
            initial_refs,
            layers,
            num_object: n_obj,
            num_aux: n_aux,
            frozen: Frozen {
                selected,
                layer_refs,
            },
        })
    }

    /// Detections from the last decoder layer, one per object query, with
    /// no auxiliary queries.
    pub fn infer(&self, patches: &Tensor, text: &Tensor) -> Result<Vec<Detection>> {
        let mut t = Tape::new(&self.params);
        let out = self.forward(&mut t, patches, text, &[])?;
        Ok(match out.layers.last() {
            Some(head) => detections_from(t.value(head.logits), t.value(head.boxes), out.num_object),
            None => {
                let logits = t.value(out.proposals.logits).gather_rows(&out.selected);
                let boxes = t.value(out.proposals.boxes).gather_rows(&out.selected);
                detections_from(&logits, &boxes, out.num_object)
            }
        })
    }
}

/// First `rows` rows of a head output as detections.
pub fn detections_from(logits: &Tensor, boxes: &Tensor, rows: usize) -> Vec<Detection> {
    (0..rows)
        .map(|r| {
            let b = boxes.row(r);
            Detection {
                bbox: BBox::from_center_form([b[0], b[1], b[2], b[3]]).clamped(),
                scores: logits.row(r).iter().map(|&z| sigmoid(z)).collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 24,
            num_object_queries: 5,
            d_text: 6,
            ..ModelConfig::default()
        }
    }

    fn inputs(c: &ModelConfig, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = xavier(&mut rng, c.num_tokens(), c.patch_dim()).map(f64::abs);
        let t = xavier(&mut rng, 3, c.d_text);
        (p, t)
    }

    #[test]
    fn zero_patches_give_bias_plus_position() {
        let m = Model::new(small()).unwrap();
        let c = &m.config;
        let mut t = Tape::new(&m.params);
        let out = m.backbone(&mut t, &Tensor::zeros(c.num_tokens(), c.patch_dim())).unwrap();
        let pos = grid_embedding(c.grid(), c.hidden_dim);
        let b = m.params.value(m.params.id("backbone.patch.b").unwrap());
        for i in 0..c.num_tokens() {
            for j in 0..c.hidden_dim {
                assert_eq!(t.value(out).get(i, j), b.get(0, j) + pos.get(i, j));
            }
        }
        assert!(m.backbone(&mut t, &Tensor::zeros(3, 3)).is_err());
    }

    #[test]
    fn selection_prefers_aligned_token_and_ignores_scale() {
        let mut tokens = Tensor::zeros(6, 3);
        tokens.set(4, 0, 1.0);
        tokens.set(1, 1, 1.0);
        let text = Tensor::from_rows(&[vec![2.0, 0.0, 0.0]]);
        assert_eq!(Model::select_tokens(&tokens, &text, 1), vec![4]);
        assert_eq!(Model::select_tokens(&tokens, &text, 3), vec![4, 0, 1]);
        let scaled = text.map(|v| v * 7.5);
        assert_eq!(
            Model::select_tokens(&tokens, &text, 6),
            Model::select_tokens(&tokens, &scaled, 6)
        );
        assert_eq!(Model::select_tokens(&tokens, &text, 10).len(), 6);
    }

    #[test]
    fn zero_layer_decoder_returns_references() {
        let c = ModelConfig {
            decoder_layers: 0,
            ..small()
        };
        let m = Model::new(c.clone()).unwrap();
        let (p, txt) = inputs(&c, 1);
        let mut t = Tape::new(&m.params);
        let out = m.forward(&mut t, &p, &txt, &[]).unwrap();
        assert!(out.layers.is_empty());
        assert_eq!(t.value(out.proposals.boxes).rows(), c.num_tokens());
        assert_eq!(t.value(out.proposals.boxes).gather_rows(&out.selected), out.initial_refs);
    }

    #[test]
    fn negated_prompt_flips_logit_sign_without_bias() {
        let mut m = Model::new(small()).unwrap();
        let bias = m.params.id("cls.bias").unwrap();
        *m.params.value_mut(bias) = Tensor::scalar(0.0);
        let fb = m.params.id("text.feat_map.b").unwrap();
        assert!(m.params.value(fb).data().iter().all(|&v| v == 0.0));
        let (p, txt) = inputs(&m.config, 2);
        let neg = txt.map(|v| -v);
        let mut t = Tape::new(&m.params);
        let h = t.constant(xavier(&mut ChaCha8Rng::seed_from_u64(3), 4, 16));
        let a = m.project_text(&mut t, &txt).unwrap();
        let b = m.project_text(&mut t, &neg).unwrap();
        let la = m.classify(&mut t, h, a);
        let lb = m.classify(&mut t, h, b);
        for (x, y) in t.value(la).data().iter().zip(t.value(lb).data()) {
            assert_eq!(*x, -*y);
        }
        let _ = p;
    }

    #[test]
    fn aux_queries_leave_object_outputs_untouched() {
        let c = small();
        let m = Model::new(c.clone()).unwrap();
        let (p, txt) = inputs(&c, 5);
        let aux = [BBox::new(0.1, 0.1, 0.4, 0.5), BBox::new(0.5, 0.2, 0.9, 0.6)];
        let mut t1 = Tape::new(&m.params);
        let a = m.forward(&mut t1, &p, &txt, &[]).unwrap();
        let mut t2 = Tape::new(&m.params);
        let b = m.forward(&mut t2, &p, &txt, &aux).unwrap();
        assert_eq!(b.num_aux, 2);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let n = a.num_object * txt.rows();
            assert_eq!(t1.value(la.logits).data(), &t2.value(lb.logits).data()[..n]);
            assert_eq!(t1.value(la.boxes).data(), &t2.value(lb.boxes).data()[..a.num_object * 4]);
        }
    }

    #[test]
    fn inference_is_deterministic_and_in_range() {
        let c = small();
        let m = Model::new(c.clone()).unwrap();
        let (p, txt) = inputs(&c, 6);
        let d1 = m.infer(&p, &txt).unwrap();
        assert_eq!(d1, m.infer(&p, &txt).unwrap());
        assert_eq!(d1.len(), 5);
        for d in &d1 {
            assert!(d.bbox.is_valid());
            assert!(d.scores.iter().all(|&s| s > 0.0 && s < 1.0));
        }
    }

    #[test]
    fn fresh_fusion_keeps_detections() {
        let c = small();
        let mut m = Model::new(c.clone()).unwrap();
        let (p, txt) = inputs(&c, 7);
        let before = m.infer(&p, &txt).unwrap();
        m.enable_fusion(1);
        assert!(m.has_fusion());
        assert_eq!(before, m.infer(&p, &txt).unwrap());
    }
}
