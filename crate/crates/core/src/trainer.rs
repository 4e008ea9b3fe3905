//! Training: per-image loss assembly, AdamW with a step learning-rate
//! schedule, two-stage orchestration, resume, and the ablation grid.
//!
//! Every supervision point (the encoder proposals and each decoder layer)
//! contributes
//!
//! ```text
//! w_cls * cls + w_l1 * L1 + w_giou * (1 - GIoU)
//! ```
//!
//! for the Hungarian-matched object queries. Decoder layers add the same
//! terms for the auxiliary queries, each bound to the noisy box it was
//! seeded from. Object terms are normalized by the number of ground truths
//! in the batch, auxiliary terms by the number of auxiliary queries.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Grads, Tape};
use crate::checkpoint::Checkpoint;
use crate::detector::{Frozen, HeadOutput, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_zero_shot, EvalResult};
use crate::geometry::{generate_noisy_samples, BBox, NoiseConfig, NoisySample};
use crate::losses::{
    box_losses_cxcywh, clamp_prob, negative_term, positive_term, DwclParams, FocalParams, LossWeights,
};
use crate::matching::{build_cost_matrix, hungarian};
use crate::scenes::{splitmix, Scene, SplitSpec};
use crate::tensor::Tensor;
use crate::textspace::{sample_prompts, Category, CategorySpace, PromptSet};

/// Classification loss applied to auxiliary-query positives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxClsLoss {
    Dwcl,
    Focal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_drop_fraction: f64,
    pub grad_clip: f64,
    /// Train auxiliary queries from noisy positives.
    pub o2m: bool,
    pub aux_cls_loss: AuxClsLoss,
    pub noise: NoiseConfig,
    pub dwcl: DwclParams,
    pub focal: FocalParams,
    pub weights: LossWeights,
    pub num_negative_prompts: usize,
    pub seed: u64,
    pub text_seed: u64,
    pub model: ModelConfig,
    pub init_from: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Write `checkpoint_path` every this many iterations; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            iterations: 6000,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-4,
            lr_drop_fraction: 0.75,
            grad_clip: 0.1,
            o2m: true,
            aux_cls_loss: AuxClsLoss::Dwcl,
            noise: NoiseConfig::default(),
            dwcl: DwclParams::default(),
            focal: FocalParams::default(),
            weights: LossWeights::default(),
            num_negative_prompts: 8,
            seed: 0,
            text_seed: 1234,
            model: ModelConfig::default(),
            init_from: None,
            checkpoint_path: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::config("stage", "must be 1 or 2"));
        }
        if self.stage == 2 && self.init_from.is_none() {
            return Err(Error::config("init_from", "stage 2 requires a stage-1 checkpoint (--init-from)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if !(self.lr_drop_fraction > 0.0 && self.lr_drop_fraction < 1.0) {
            return Err(Error::config("lr_drop_fraction", "must lie in (0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        self.noise.validate()?;
        self.model.validate()
    }

    /// Base rate until `lr_drop_fraction` of the schedule, a tenth after.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if (iteration as f64) < self.lr_drop_fraction * self.iterations as f64 {
            self.lr
        } else {
            self.lr * 0.1
        }
    }
}

/// Weighted loss components; they sum to `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub obj_cls: f64,
    pub obj_l1: f64,
    pub obj_giou: f64,
    pub aux_cls: f64,
    pub aux_l1: f64,
    pub aux_giou: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.obj_cls += o.obj_cls;
        self.obj_l1 += o.obj_l1;
        self.obj_giou += o.obj_giou;
        self.aux_cls += o.aux_cls;
        self.aux_l1 += o.aux_l1;
        self.aux_giou += o.aux_giou;
        self.total += o.total;
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("obj_cls", self.obj_cls),
            ("obj_l1", self.obj_l1),
            ("obj_giou", self.obj_giou),
            ("aux_cls", self.aux_cls),
            ("aux_l1", self.aux_l1),
            ("aux_giou", self.aux_giou),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term: name.into() });
            }
        }
        Ok(())
    }

    pub const CSV_HEADER: &'static str = "obj_cls,obj_l1,obj_giou,aux_cls,aux_l1,aux_giou,total";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.obj_cls, self.obj_l1, self.obj_giou, self.aux_cls, self.aux_l1, self.aux_giou, self.total
        )
    }
}

/// One image ready for the loss: pixels, prompts, targets and noisy boxes.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub patches: Tensor,
    pub prompts: PromptSet,
    /// Ground-truth boxes with the index of their category's prompt.
    pub targets: Vec<(BBox, usize)>,
    pub aux: Vec<NoisySample>,
}

/// Batch-wide constants shared by every image's loss.
#[derive(Clone, Copy, Debug)]
pub struct Normalizers {
    pub num_gt: f64,
    pub num_aux: f64,
    /// `mean(1 - IoU)` over the batch's noisy samples; `None` when every
    /// prior is zero and difficulty weighting is skipped.
    pub difficulty_mean: Option<f64>,
}

impl Normalizers {
    pub fn for_batch(images: &[PreparedImage]) -> Self {
        let num_gt: usize = images.iter().map(|i| i.targets.len()).sum();
        let ious: Vec<f64> = images.iter().flat_map(|i| i.aux.iter().map(|s| s.initial_iou)).collect();
        let mean = if ious.is_empty() {
            0.0
        } else {
            ious.iter().map(|v| 1.0 - v).sum::<f64>() / ious.len() as f64
        };
        Self {
            num_gt: num_gt.max(1) as f64,
            num_aux: ious.len().max(1) as f64,
            difficulty_mean: (mean > 0.0).then_some(mean),
        }
    }
}

/// The loss settings `image_loss` reads.
#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub aux_cls_loss: AuxClsLoss,
    pub dwcl: DwclParams,
    pub focal: FocalParams,
    pub weights: LossWeights,
}

impl From<&TrainConfig> for LossSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            aux_cls_loss: c.aux_cls_loss,
            dwcl: c.dwcl,
            focal: c.focal,
            weights: c.weights,
        }
    }
}

struct HeadGrads {
    logits: Tensor,
    boxes: Tensor,
    parts: LossBreakdown,
}

fn sigmoid_probs(logits: &Tensor) -> Tensor {
    logits.map(sigmoid)
}

/// Focal classification over every (object query, prompt) pair plus box
/// losses on the Hungarian-matched pairs.
fn object_terms(
    logits: &Tensor,
    boxes: &Tensor,
    rows: usize,
    targets: &[(BBox, usize)],
    s: &LossSettings,
    norm: &Normalizers,
    g: &mut HeadGrads,
) -> Result<()> {
    let w = &s.weights;
    let prompts = logits.cols();
    let probs = sigmoid_probs(logits);
    let obj_probs = Tensor::from_vec(rows, prompts, probs.data()[..rows * prompts].to_vec());
    let qboxes: Vec<[f64; 4]> = (0..rows)
        .map(|r| {
            let b = boxes.row(r);
            [b[0], b[1], b[2], b[3]]
        })
        .collect();
    let assignment = hungarian(&build_cost_matrix(&obj_probs, &qboxes, targets, w)?)?;
    let target_of = assignment.target_of(rows);
    for q in 0..rows {
        for p in 0..prompts {
            let pr = probs.get(q, p);
            let positive = target_of[q].is_some_and(|t| targets[t].1 == p);
            let (l, dl) = if positive {
                positive_term(clamp_prob(pr), s.focal.alpha, s.focal.gamma)
            } else {
                negative_term(clamp_prob(pr), s.focal.alpha, s.focal.gamma)
            };
            let k = w.w_cls / norm.num_gt;
            g.parts.obj_cls += k * l;
            g.logits.set(q, p, k * dl * pr * (1.0 - pr));
        }
    }
    for &(q, t) in &assignment.pairs {
        let bl = box_losses_cxcywh(qboxes[q], targets[t].0.to_center_form());
        g.parts.obj_l1 += w.w_l1 * bl.l1 / norm.num_gt;
        g.parts.obj_giou += w.w_giou * bl.giou_loss / norm.num_gt;
        for k in 0..4 {
            g.boxes
                .set(q, k, (w.w_l1 * bl.d_l1[k] + w.w_giou * bl.d_giou[k]) / norm.num_gt);
        }
    }
    Ok(())
}

/// Auxiliary rows `offset..offset + aux.len()`: each is a positive for its
/// ground truth's prompt and a negative for every other prompt.
fn aux_terms(
    logits: &Tensor,
    boxes: &Tensor,
    offset: usize,
    img: &PreparedImage,
    s: &LossSettings,
    norm: &Normalizers,
    g: &mut HeadGrads,
) {
    let w = &s.weights;
    let k = w.w_cls / norm.num_aux;
    for (i, sample) in img.aux.iter().enumerate() {
        let r = offset + i;
        let (gt_box, gt_prompt) = img.targets[sample.gt_index];
        for p in 0..logits.cols() {
            let pr = sigmoid(logits.get(r, p));
            let cp = clamp_prob(pr);
            let (l, dl) = if p != gt_prompt {
                let neg = match s.aux_cls_loss {
                    AuxClsLoss::Dwcl => s.dwcl.focal_neg,
                    AuxClsLoss::Focal => s.focal,
                };
                negative_term(cp, neg.alpha, neg.gamma)
            } else {
                match (s.aux_cls_loss, norm.difficulty_mean) {
                    (AuxClsLoss::Dwcl, Some(mean)) => {
                        let d = 1.0 - sample.initial_iou;
                        positive_term(cp, d / mean, s.dwcl.beta1 * d + s.dwcl.beta2)
                    }
                    _ => positive_term(cp, s.focal.alpha, s.focal.gamma),
                }
            };
            g.parts.aux_cls += k * l;
            g.logits.set(r, p, k * dl * pr * (1.0 - pr));
        }
        let b = boxes.row(r);
        let bl = box_losses_cxcywh([b[0], b[1], b[2], b[3]], gt_box.to_center_form());
        g.parts.aux_l1 += w.w_l1 * bl.l1 / norm.num_aux;
        g.parts.aux_giou += w.w_giou * bl.giou_loss / norm.num_aux;
        for c in 0..4 {
            g.boxes
                .set(r, c, (w.w_l1 * bl.d_l1[c] + w.w_giou * bl.d_giou[c]) / norm.num_aux);
        }
    }
}

fn head_loss(
    tape: &mut Tape,
    head: HeadOutput,
    num_object: usize,
    with_aux: bool,
    img: &PreparedImage,
    s: &LossSettings,
    norm: &Normalizers,
) -> Result<(crate::autodiff::Var, LossBreakdown)> {
    let logits = tape.value(head.logits).clone();
    let boxes = tape.value(head.boxes).clone();
    let mut g = HeadGrads {
        logits: Tensor::zeros(logits.rows(), logits.cols()),
        boxes: Tensor::zeros(boxes.rows(), 4),
        parts: LossBreakdown::default(),
    };
    object_terms(&logits, &boxes, num_object, &img.targets, s, norm, &mut g)?;
    if with_aux {
        aux_terms(&logits, &boxes, num_object, img, s, norm, &mut g);
    }
    let p = &mut g.parts;
    p.total = p.obj_cls + p.obj_l1 + p.obj_giou + p.aux_cls + p.aux_l1 + p.aux_giou;
    let cls_value = p.obj_cls + p.aux_cls;
    let box_value = p.total - cls_value;
    let a = tape.inject(head.logits, cls_value, g.logits);
    let b = tape.inject(head.boxes, box_value, g.boxes);
    Ok((tape.add(a, b), g.parts))
}

/// Loss for one image and its parameter gradients.
pub fn image_loss(
    model: &Model,
    img: &PreparedImage,
    s: &LossSettings,
    norm: &Normalizers,
) -> Result<(LossBreakdown, Grads)> {
    image_loss_frozen(model, img, s, norm, None).map(|r| (r.0, r.1))
}

/// [`image_loss`] with the detached quantities optionally held fixed; also
/// returns the ones used.
pub fn image_loss_frozen(
    model: &Model,
    img: &PreparedImage,
    s: &LossSettings,
    norm: &Normalizers,
    frozen: Option<&Frozen>,
) -> Result<(LossBreakdown, Grads, Frozen)> {
    let mut tape = Tape::new(&model.params);
    let aux_boxes: Vec<BBox> = img.aux.iter().map(|a| a.bbox).collect();
    let out = model.forward_frozen(&mut tape, &img.patches, &img.prompts.embeddings, &aux_boxes, frozen)?;
    let mut parts = LossBreakdown::default();
    // Every encoder token is a proposal candidate, so selection learns to
    // land on objects.
    let tokens = model.config.num_tokens();
    let (mut root, p) = head_loss(&mut tape, out.proposals, tokens, false, img, s, norm)?;
    parts.add(&p);
    for head in &out.layers {
        let (v, p) = head_loss(&mut tape, *head, out.num_object, out.num_aux > 0, img, s, norm)?;
        parts.add(&p);
        root = tape.add(root, v);
    }
    parts.check_finite()?;
    let grads = tape.backward(root);
    let mut into = Grads::zeros_like(&model.params);
    tape.accumulate_param_grads(&grads, &mut into);
    Ok((parts, into, out.frozen))
}

/// Prompts from the training label space and noisy positives for `scene`.
pub fn prepare_image(
    scene: &Scene,
    model: &ModelConfig,
    space: &CategorySpace,
    label_space: &[Category],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<PreparedImage> {
    let gt_cats: Vec<Category> = scene.annotations.iter().map(|a| a.category.clone()).collect();
    let mut distinct = gt_cats.clone();
    distinct.sort();
    distinct.dedup();
    let available = label_space.iter().filter(|c| !distinct.contains(c)).count();
    let prompts = sample_prompts(space, &gt_cats, label_space, cfg.num_negative_prompts.min(available), rng)?;
    let targets: Vec<(BBox, usize)> = scene
        .annotations
        .iter()
        .map(|a| (a.bbox, prompts.index_of(&a.category).expect("positive prompt present")))
        .collect();
    let aux = if cfg.o2m {
        let gts: Vec<(BBox, usize)> = targets.iter().map(|&(b, p)| (b, p)).collect();
        let mut samples = generate_noisy_samples(&gts, &cfg.noise, rng)?;
        samples.truncate(model.max_aux_queries);
        samples
    } else {
        Vec::new()
    };
    Ok(PreparedImage {
        patches: scene.image.patches(model.patch_size)?,
        prompts,
        targets,
        aux,
    })
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Grads,
    pub v: Grads,
    pub steps: u64,
}

impl AdamW {
    pub fn new(model: &Model) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Grads::zeros_like(&model.params),
            v: Grads::zeros_like(&model.params),
            steps: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Grads, lr: f64, weight_decay: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            }
            let v = self.v.get_mut(id);
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            let (m, v) = (self.m.get(id), self.v.get(id));
            let p = model.params.value_mut(id);
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let update = (mv / c1) / ((vv / c2).sqrt() + self.eps);
                *pv -= lr * (update + weight_decay * *pv);
            }
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub space: CategorySpace,
    pub split: SplitSpec,
    pub iteration: usize,
    pub last_loss: Option<LossBreakdown>,
}

/// Random stream for one iteration, independent of earlier iterations.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(iteration as u64 ^ 0x6974_6572)))
}

impl TrainState {
    /// Fresh stage-one state.
    pub fn new(config: TrainConfig, split: SplitSpec) -> Result<Self> {
        config.validate()?;
        split.validate()?;
        let model = Model::new(config.model.clone())?;
        let space = CategorySpace::new(&split.shapes, &split.colors, config.model.d_text, config.text_seed);
        Ok(Self {
            optimizer: AdamW::new(&model),
            config,
            model,
            space,
            split,
            iteration: 0,
            last_loss: None,
        })
    }

    /// Stage-two state from a stage-one checkpoint: non-fusion weights copied,
    /// fusion added with a zero output projection, optimizer and schedule
    /// restarted.
    pub fn stage_two(config: TrainConfig, stage1: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if stage1.manifest.stage != 1 {
            return Err(Error::CheckpointMismatch(format!(
                "expected a stage-1 checkpoint, found stage {}",
                stage1.manifest.stage
            )));
        }
        let mut model = stage1.model()?;
        model.enable_fusion(config.seed);
        let mut config = config;
        config.model = model.config.clone();
        config.text_seed = stage1.manifest.space.seed();
        Ok(Self {
            optimizer: AdamW::new(&model),
            config,
            model,
            space: stage1.manifest.space.clone(),
            split: stage1.manifest.split.clone(),
            iteration: 0,
            last_loss: None,
        })
    }

    /// Mini-batch of prepared images for `iteration`.
    pub fn batch(&self, scenes: &[Scene], iteration: usize) -> Result<Vec<PreparedImage>> {
        if scenes.is_empty() {
            return Err(Error::config("train_data", "no training scenes"));
        }
        let mut rng = iteration_rng(self.config.seed, iteration);
        let picks: Vec<usize> = (0..self.config.batch_size)
            .map(|_| rng.random_range(0..scenes.len()))
            .collect();
        for &i in &picks {
            for a in &scenes[i].annotations {
                if !self.split.train_combos.contains(&a.category) {
                    return Err(Error::SplitContamination(vec![a.category.to_string()]));
                }
            }
        }
        picks
            .iter()
            .map(|&i| {
                prepare_image(
                    &scenes[i],
                    &self.model.config,
                    &self.space,
                    &self.split.train_combos,
                    &self.config,
                    &mut rng,
                )
            })
            .collect()
    }

    /// One optimizer step on the iteration's batch.
    pub fn train_step(&mut self, scenes: &[Scene]) -> Result<LossBreakdown> {
        let batch = self.batch(scenes, self.iteration)?;
        let norm = Normalizers::for_batch(&batch);
        let settings = LossSettings::from(&self.config);
        let mut total = Grads::zeros_like(&self.model.params);
        let mut parts = LossBreakdown::default();
        for img in &batch {
            let (p, g) = image_loss(&self.model, img, &settings, &norm)?;
            parts.add(&p);
            for id in self.model.params.ids() {
                total.get_mut(id).add_assign(g.get(id));
            }
        }
        let gn = total.global_norm();
        if !gn.is_finite() {
            return Err(Error::NonFiniteLoss { term: "gradient".into() });
        }
        if gn > self.config.grad_clip {
            total.scale(self.config.grad_clip / gn);
        }
        let lr = self.config.lr_at(self.iteration);
        self.optimizer.step(&mut self.model, &total, lr, self.config.weight_decay);
        self.iteration += 1;
        self.last_loss = Some(parts);
        Ok(parts)
    }

    /// Trains until `config.iterations`, calling `on_step(iteration, lr,
    /// losses)` after every step and checkpointing as configured.
    pub fn run(
        &mut self,
        scenes: &[Scene],
        mut on_step: impl FnMut(usize, f64, &LossBreakdown),
    ) -> Result<()> {
        while self.iteration < self.config.iterations {
            let lr = self.config.lr_at(self.iteration);
            let it = self.iteration;
            let parts = self.train_step(scenes)?;
            on_step(it, lr, &parts);
            if let Some(path) = &self.config.checkpoint_path {
                let every = self.config.checkpoint_every;
                if every > 0 && self.iteration % every == 0 && self.iteration < self.config.iterations {
                    Checkpoint::from_state(self).write(path)?;
                }
            }
        }
        if let Some(path) = &self.config.checkpoint_path {
            Checkpoint::from_state(self).write(path)?;
        }
        Ok(())
    }
}

/// Runs one stage end to end. Stage 2 loads `init_from`.
pub fn run_stage(
    config: TrainConfig,
    split: SplitSpec,
    scenes: &[Scene],
    on_step: impl FnMut(usize, f64, &LossBreakdown),
) -> Result<TrainState> {
    config.validate()?;
    let mut state = match config.stage {
        1 => TrainState::new(config, split)?,
        _ => {
            let path = config.init_from.clone().expect("validated");
            let ck = Checkpoint::read(&path)?;
            TrainState::stage_two(config, &ck)?
        }
    };
    state.run(scenes, on_step)?;
    Ok(state)
}

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub o2m: bool,
    pub dwcl: bool,
    pub fusion: bool,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [
        AblationRow { o2m: false, dwcl: false, fusion: false },
        AblationRow { o2m: true, dwcl: false, fusion: false },
        AblationRow { o2m: true, dwcl: true, fusion: false },
        AblationRow { o2m: true, dwcl: true, fusion: true },
    ];

    pub fn name(&self) -> &'static str {
        match (self.o2m, self.dwcl, self.fusion) {
            (false, false, false) => "baseline",
            (true, false, false) => "o2m",
            (true, true, false) => "o2m+dwcl",
            (true, true, true) => "full",
            _ => "custom",
        }
    }

    fn stage1_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut c = base.clone();
        c.stage = 1;
        c.seed = seed;
        c.model.seed = seed;
        c.o2m = self.o2m;
        c.aux_cls_loss = if self.dwcl { AuxClsLoss::Dwcl } else { AuxClsLoss::Focal };
        c.init_from = None;
        c.checkpoint_path = None;
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    /// `(seed, mAP 0.50:0.95)` for every cell that finished.
    pub maps: Vec<(u64, f64)>,
    /// `(seed, message)` for every cell that failed.
    pub failures: Vec<(u64, String)>,
}

impl AblationResult {
    pub fn mean(&self) -> f64 {
        if self.maps.is_empty() {
            return f64::NAN;
        }
        self.maps.iter().map(|m| m.1).sum::<f64>() / self.maps.len() as f64
    }

    /// Sample standard deviation across seeds.
    pub fn std(&self) -> f64 {
        let n = self.maps.len();
        if n < 2 {
            return 0.0;
        }
        let mu = self.mean();
        (self.maps.iter().map(|m| (m.1 - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub base: TrainConfig,
    /// Iterations of the fusion stage for rows with fusion on.
    pub stage2_iterations: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates every (row, seed) cell. A failed cell is recorded
/// and the rest continue. A row with fusion reuses the matching no-fusion
/// row's stage-one weights when that row is also in the plan.
pub fn ablate(
    plan: &AblationPlan,
    split: &SplitSpec,
    train: &[Scene],
    eval: &[Scene],
    mut log: impl FnMut(&str),
) -> Vec<AblationResult> {
    let mut results: Vec<AblationResult> = Vec::new();
    let mut stage1_cache: Vec<(AblationRow, u64, TrainState)> = Vec::new();
    for row in &plan.rows {
        let mut res = AblationResult {
            row: *row,
            maps: Vec::new(),
            failures: Vec::new(),
        };
        for &seed in &plan.seeds {
            let cell = (|| -> Result<EvalResult> {
                let s1_row = AblationRow { fusion: false, ..*row };
                let cached = stage1_cache
                    .iter()
                    .find(|(r, s, _)| *r == s1_row && *s == seed)
                    .map(|c| c.2.clone());
                let s1 = match cached {
                    Some(s) => s,
                    None => {
                        let mut st = TrainState::new(s1_row.stage1_config(&plan.base, seed), split.clone())?;
                        st.run(train, |_, _, _| {})?;
                        stage1_cache.push((s1_row, seed, st.clone()));
                        st
                    }
                };
                let model = if row.fusion {
                    let ck = Checkpoint::from_state(&s1);
                    let mut c = s1.config.clone();
                    c.stage = 2;
                    c.iterations = plan.stage2_iterations;
                    c.init_from = Some(PathBuf::from("<memory>"));
                    let mut st = TrainState::stage_two(c, &ck)?;
                    st.run(train, |_, _, _| {})?;
                    st.model
                } else {
                    s1.model
                };
                evaluate_zero_shot(&model, &s1.space, split, &split.heldout_combos, eval)
            })();
            match cell {
                Ok(r) => {
                    log(&format!("{} seed {seed}: mAP {:.4}", row.name(), r.map_50_95));
                    res.maps.push((seed, r.map_50_95));
                }
                Err(e) => {
                    log(&format!("{} seed {seed}: failed: {e}", row.name()));
                    res.failures.push((seed, e.to_string()));
                }
            }
        }
        results.push(res);
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{render_dataset, Split};

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 4,
            batch_size: 2,
            lr: 1e-3,
            model: ModelConfig {
                hidden_dim: 16,
                num_heads: 2,
                ffn_dim: 24,
                num_object_queries: 6,
                encoder_layers: 1,
                decoder_layers: 2,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_steps_down() {
        let c = TrainConfig {
            iterations: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(740), c.lr);
        assert_eq!(c.lr_at(760), c.lr * 0.1);
    }

    #[test]
    fn stage_two_requires_init() {
        let c = TrainConfig {
            stage: 2,
            ..TrainConfig::default()
        };
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "init_from"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let m0 = Model::new(tiny_config().model).unwrap();
        let mut m = m0.clone();
        let mut opt = AdamW::new(&m);
        let zero = Grads::zeros_like(&m.params);
        opt.step(&mut m, &zero, 1e-3, 0.0);
        assert_eq!(m, m0);
    }

    #[test]
    fn breakdown_sums_to_total_and_runs_are_repeatable() {
        let split = SplitSpec::default();
        let scenes = render_dataset(&split, Split::Train, 8, 3).unwrap();
        let mut a = TrainState::new(tiny_config(), split.clone()).unwrap();
        let mut b = TrainState::new(tiny_config(), split).unwrap();
        for _ in 0..2 {
            let p = a.train_step(&scenes).unwrap();
            let sum = p.obj_cls + p.obj_l1 + p.obj_giou + p.aux_cls + p.aux_l1 + p.aux_giou;
            assert!((sum - p.total).abs() < 1e-9);
            assert!(p.aux_cls > 0.0);
            b.train_step(&scenes).unwrap();
        }
        assert_eq!(a.model.params.hash_hex(), b.model.params.hash_hex());
    }

    #[test]
    fn heldout_scene_in_training_is_refused() {
        let split = SplitSpec::default();
        let scenes = render_dataset(&split, Split::Heldout, 4, 3).unwrap();
        let mut a = TrainState::new(tiny_config(), split).unwrap();
        assert!(matches!(a.train_step(&scenes), Err(Error::SplitContamination(_))));
    }
}
