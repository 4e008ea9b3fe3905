//! Central finite-difference checks of every analytic gradient.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
//! The floor keeps gradients that are zero up to rounding from dividing by
//! nothing.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamStore, Tape};
use crate::detector::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, xavier};
use crate::geometry::{generate_noisy_samples, BBox, NoiseConfig};
use crate::losses::{box_losses_cxcywh, dwcl_loss, focal_loss, DwclBatch, DwclParams, FocalParams};
use crate::scenes::{render_scene, Split, SplitSpec};
use crate::textspace::{sample_prompts, CategorySpace};
use crate::trainer::{image_loss_frozen, AuxClsLoss, LossSettings, Normalizers, PreparedImage};

pub const FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Losses,
    Fusion,
    Model,
}

impl Scope {
    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Losses | Scope::Fusion => 1e-4,
            Scope::Model => 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub worst_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub scope: Scope,
    pub seed: u64,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.worst_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst_rel_err).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.worst_rel_err >= self.tolerance)
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# gradcheck scope={:?} seed={} tolerance={:e}", self.scope, self.seed, self.tolerance);
        for g in &self.groups {
            let status = if g.worst_rel_err < self.tolerance { "ok  " } else { "FAIL" };
            let _ = writeln!(s, "{status} {:<32} n={:<5} worst_rel_err={:.3e}", g.name, g.checked, g.worst_rel_err);
        }
        let _ = writeln!(
            s,
            "{} worst={:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.worst()
        );
        s
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

struct Groups {
    groups: Vec<GroupReport>,
    corrupt: Option<String>,
}

impl Groups {
    fn record(&mut self, name: &str, analytic: f64, numeric: f64) {
        let analytic = if self.corrupt.as_deref() == Some(name) {
            analytic + 1e-2 * (analytic.abs() + 1.0)
        } else {
            analytic
        };
        let e = rel_err(analytic, numeric);
        match self.groups.iter_mut().find(|g| g.name == name) {
            Some(g) => {
                g.checked += 1;
                g.worst_rel_err = g.worst_rel_err.max(e);
            }
            None => self.groups.push(GroupReport {
                name: name.to_string(),
                checked: 1,
                worst_rel_err: e,
            }),
        }
    }
}

/// Runs the suite for `scope`. `corrupt` names a group whose analytic
/// gradient is deliberately perturbed, as a negative control.
pub fn gradcheck(scope: Scope, seed: u64, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let mut g = Groups {
        groups: Vec::new(),
        corrupt: corrupt.map(str::to_string),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match scope {
        Scope::Losses => losses_suite(&mut rng, &mut g)?,
        Scope::Fusion => fusion_suite(&mut rng, &mut g),
        Scope::Model => model_suite(&mut rng, &mut g)?,
    }
    if let Some(name) = corrupt {
        if !g.groups.iter().any(|x| x.name == name) {
            return Err(Error::config("corrupt", format!("no gradient group named {name}")));
        }
    }
    Ok(GradcheckReport {
        scope,
        seed,
        tolerance: scope.tolerance(),
        groups: g.groups,
    })
}

fn losses_suite(rng: &mut ChaCha8Rng, g: &mut Groups) -> Result<()> {
    let h = 1e-6;
    for _ in 0..1000 {
        let p = rng.random_range(0.01..0.99);
        let y = rng.random_bool(0.5);
        let fp = FocalParams {
            alpha: rng.random_range(0.05..0.95),
            gamma: rng.random_range(0.0..4.0),
        };
        let (_, a) = focal_loss(p, y, fp)?;
        let n = central(|x| focal_loss(x, y, fp).map_or(f64::NAN, |v| v.0), p, h);
        g.record("focal", a, n);
    }
    let params = DwclParams::default();
    for _ in 0..200 {
        let len = rng.random_range(1..8);
        let mut batch = DwclBatch {
            probs: (0..len).map(|_| rng.random_range(0.01..0.99)).collect(),
            labels: (0..len).map(|_| rng.random_bool(0.6)).collect(),
            initial_ious: (0..len).map(|_| rng.random_range(0.5..0.99)).collect(),
        };
        batch.labels[0] = true;
        let out = dwcl_loss(&batch, params)?;
        for i in 0..len {
            let n = central(
                |x| {
                    let mut b = batch.clone();
                    b.probs[i] = x;
                    dwcl_loss(&b, params).map_or(f64::NAN, |o| o.total)
                },
                batch.probs[i],
                h,
            );
            g.record("dwcl", out.dloss_dp[i], n);
        }
    }
    for _ in 0..100 {
        let pred: [f64; 4] = [
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.05..0.4),
            rng.random_range(0.05..0.4),
        ];
        let target: [f64; 4] = [
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.05..0.4),
            rng.random_range(0.05..0.4),
        ];
        let l = box_losses_cxcywh(pred, target);
        for k in 0..4 {
            let at = |x: f64| {
                let mut q = pred;
                q[k] = x;
                box_losses_cxcywh(q, target)
            };
            g.record("box_l1", l.d_l1[k], central(|x| at(x).l1, pred[k], h));
            g.record("box_giou", l.d_giou[k], central(|x| at(x).giou_loss, pred[k], h));
        }
    }
    Ok(())
}

fn fusion_suite(rng: &mut ChaCha8Rng, g: &mut Groups) {
    let (d_text, d, heads, tokens, prompts) = (6, 8, 2, 10, 3);
    let mut params = ParamStore::new();
    fusion::register(&mut params, d_text, d, rng);
    let o = params.id("fusion.o.w").expect("registered");
    *params.value_mut(o) = xavier(rng, d, d);
    let ob = params.id("fusion.o.b").expect("registered");
    *params.value_mut(ob) = xavier(rng, 1, d);
    let image = xavier(rng, tokens, d);
    let text = xavier(rng, prompts, d_text);
    let weights = xavier(rng, tokens, d);
    let eval = |p: &ParamStore| -> (f64, Grads) {
        let mut t = Tape::new(p);
        let i = t.constant(image.clone());
        let x = t.constant(text.clone());
        let out = fuse_gelu(&mut t, i, x, heads);
        let w = t.constant(weights.clone());
        let prod = t.mul(out, w);
        let root = t.sum(prod);
        let grads = t.backward(root);
        let mut into = Grads::zeros_like(p);
        t.accumulate_param_grads(&grads, &mut into);
        (t.value(root).item(), into)
    };
    let (_, analytic) = eval(&params);
    let h = 1e-6;
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.name(id).to_string();
        for k in 0..params.value(id).len() {
            let mut p = params.clone();
            let x0 = p.value(id).data()[k];
            p.value_mut(id).data_mut()[k] = x0 + h;
            let up = eval(&p).0;
            p.value_mut(id).data_mut()[k] = x0 - h;
            let down = eval(&p).0;
            g.record(&name, analytic.get(id).data()[k], (up - down) / (2.0 * h));
        }
    }
}

/// Fusion followed by a nonlinearity so second-order structure is exercised.
fn fuse_gelu(t: &mut Tape, image: crate::autodiff::Var, text: crate::autodiff::Var, heads: usize) -> crate::autodiff::Var {
    let f = fusion::fuse(t, image, text, heads);
    t.gelu(f)
}

/// Small model with fusion and every zero-initialized layer randomized.
pub fn random_small_model(rng: &mut ChaCha8Rng) -> Result<Model> {
    let config = ModelConfig {
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 24,
        num_object_queries: 8,
        encoder_layers: 1,
        decoder_layers: 2,
        d_text: 8,
        seed: rng.random(),
        ..ModelConfig::default()
    };
    let mut model = Model::new(config)?;
    model.enable_fusion(rng.random());
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        if name.ends_with("box.1.w") || name == "fusion.o.w" {
            let (r, c) = (model.params.value(id).rows(), model.params.value(id).cols());
            *model.params.value_mut(id) = xavier(rng, r, c).map(|v| 0.3 * v);
        }
    }
    Ok(model)
}

fn model_suite(rng: &mut ChaCha8Rng, g: &mut Groups) -> Result<()> {
    let model = random_small_model(rng)?;
    let split = SplitSpec::default();
    let scene = loop {
        let s = render_scene(&split, Split::Train, 0, rng.random())?;
        if s.annotations.len() >= 2 {
            break s;
        }
    };
    let space = CategorySpace::new(&split.shapes, &split.colors, model.config.d_text, rng.random());
    let cats: Vec<_> = scene.annotations.iter().map(|a| a.category.clone()).collect();
    let prompts = sample_prompts(&space, &cats, &split.train_combos, 3, rng)?;
    let targets: Vec<(BBox, usize)> = scene
        .annotations
        .iter()
        .map(|a| (a.bbox, prompts.index_of(&a.category).expect("positive")))
        .collect();
    let noise = NoiseConfig {
        m_perturbed: 3,
        m_expanded: 1,
        ..NoiseConfig::default()
    };
    let aux = generate_noisy_samples(&targets, &noise, rng)?;
    let img = PreparedImage {
        patches: scene.image.patches(model.config.patch_size)?,
        prompts,
        targets,
        aux,
    };
    let norm = Normalizers::for_batch(std::slice::from_ref(&img));
    let settings = LossSettings {
        aux_cls_loss: AuxClsLoss::Dwcl,
        dwcl: DwclParams::default(),
        focal: FocalParams::default(),
        weights: Default::default(),
    };
    let (_, analytic, frozen) = image_loss_frozen(&model, &img, &settings, &norm, None)?;
    let loss = |m: &Model| image_loss_frozen(m, &img, &settings, &norm, Some(&frozen)).map(|r| r.0.total);
    let ids: Vec<_> = model.params.ids().collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| model.params.value(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    for _ in 0..200 {
        let mut k = rng.random_range(0..total);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let id = ids[which];
        let mut m = model.clone();
        let x0 = m.params.value(id).data()[k];
        m.params.value_mut(id).data_mut()[k] = x0 + h;
        let up = loss(&m)?;
        m.params.value_mut(id).data_mut()[k] = x0 - h;
        let down = loss(&m)?;
        let name = model.params.name(id).to_string();
        g.record(&name, analytic.get(id).data()[k], (up - down) / (2.0 * h));
    }
    Ok(())
}
