use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use ovdet::checkpoint::Checkpoint;
use ovdet::evaluator::{evaluate, evaluate_zero_shot, EvalResult};
use ovdet::gradcheck::{gradcheck, Scope};
use ovdet::losscurve::{curve, curve_csv, surface, surface_csv, CurveParams};
use ovdet::losses::{DwclParams, FocalParams};
use ovdet::scenes::{read_dataset, render_dataset, write_dataset, Split, SplitSpec};
use ovdet::trainer::{ablate, AblationPlan, AblationResult, AblationRow, AuxClsLoss, TrainConfig, TrainState};
use ovdet::Error;

use crate::{
    AblateArgs, AuxLossArg, Cli, Command, EvalArgs, GenDataArgs, GradcheckArgs, InspectArgs, LosscurveArgs,
    ScopeArg, SplitArg, TrainArgs,
};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_CHECK_FAILED: u8 = 3;

/// Bad user input caught by the CLI itself.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// A check ran to completion and did not pass.
#[derive(Debug)]
struct CheckFailed(String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK_FAILED;
    }
    if e.downcast_ref::<Invalid>().is_some() || e.downcast_ref::<toml::de::Error>().is_some() {
        return EXIT_VALIDATION;
    }
    match e.downcast_ref::<Error>() {
        Some(
            Error::Config { .. }
            | Error::UnknownCategory(_)
            | Error::SplitContamination(_)
            | Error::InsufficientLabelSpace { .. }
            | Error::Domain(_),
        ) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

/// Config file layout shared by `train` and `ablate`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    train: TrainConfig,
    ablate: AblateFile,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AblateFile {
    seeds: Vec<u64>,
    stage2_iterations: usize,
}

impl Default for AblateFile {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            stage2_iterations: 2000,
        }
    }
}

struct Ctx {
    out_dir: Option<PathBuf>,
    invocation: String,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.out_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Comment lines that open every file the CLI writes.
    fn header(&self, seed: Option<u64>) -> String {
        let mut s = format!("# ovdet {}\n", self.invocation);
        if let Some(seed) = seed {
            s.push_str(&format!("# seed {seed}\n"));
        }
        s
    }

    fn write(&self, p: &Path, contents: &str) -> Result<PathBuf> {
        let path = self.path(p);
        ensure_parent(&path)?;
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        out_dir: cli.out_dir,
        invocation: std::env::args().skip(1).collect::<Vec<_>>().join(" "),
    };
    match cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Ablate(a) => ablate_cmd(&ctx, a),
        Command::Losscurve(a) => losscurve(&ctx, a),
        Command::Gradcheck(a) => gradcheck_cmd(&ctx, a),
        Command::Inspect(a) => inspect(&ctx, a),
    }
}

fn gen_data(ctx: &Ctx, a: GenDataArgs) -> Result<()> {
    let spec: SplitSpec = match &a.split_config {
        Some(p) => read_toml(&ctx.path(p))?,
        None => SplitSpec::default(),
    };
    spec.validate()?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Heldout => Split::Heldout,
    };
    let scenes = render_dataset(&spec, split, a.count, a.seed)?;
    let path = ctx.path(&a.out);
    ensure_parent(&path)?;
    let provenance = format!("ovdet {}; seed {}", ctx.invocation, a.seed);
    write_dataset(&path, &scenes, &spec, split, &provenance)?;
    let objects: usize = scenes.iter().map(|s| s.annotations.len()).sum();
    println!("wrote {} scenes ({objects} objects) to {}", scenes.len(), path.display());
    Ok(())
}

fn apply_train_flags(cfg: &mut TrainConfig, a: &TrainArgs) {
    if let Some(s) = a.stage {
        cfg.stage = s;
    }
    if let Some(p) = &a.init_from {
        cfg.init_from = Some(p.clone());
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(n) = a.batch_size {
        cfg.batch_size = n;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
    }
    if let Some(o) = a.o2m {
        cfg.o2m = o;
    }
    if let Some(l) = a.aux_cls_loss {
        cfg.aux_cls_loss = match l {
            AuxLossArg::Dwcl => AuxClsLoss::Dwcl,
            AuxLossArg::Focal => AuxClsLoss::Focal,
        };
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    // Configuration problems are reported before any file is read.
    let fresh = match &a.resume {
        Some(_) => None,
        None => {
            let mut cfg = match &a.config {
                Some(p) => read_toml::<FileConfig>(&ctx.path(p))?.train,
                None => TrainConfig::default(),
            };
            apply_train_flags(&mut cfg, &a);
            cfg.validate()?;
            Some(cfg)
        }
    };
    let data = ctx.path(&a.data);
    let (header, scenes) = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
    let mut state = match (fresh, &a.resume) {
        (Some(cfg), _) if cfg.stage == 2 => {
            let from = cfg.init_from.clone().expect("validated");
            let ck = Checkpoint::read(&ctx.path(&from)).with_context(|| format!("reading {}", from.display()))?;
            TrainState::stage_two(cfg, &ck)?
        }
        (Some(cfg), _) => TrainState::new(cfg, header.split.clone())?,
        (None, Some(resume)) => {
            let ck = Checkpoint::read(&ctx.path(resume)).with_context(|| format!("reading {}", resume.display()))?;
            let mut st = ck.state()?;
            if let Some(n) = a.iterations {
                st.config.iterations = n;
            }
            if let Some(n) = a.checkpoint_every {
                st.config.checkpoint_every = n;
            }
            st
        }
        (None, None) => unreachable!("either a fresh config or a resume checkpoint"),
    };
    if header.split != state.split {
        return Err(Invalid(format!(
            "dataset {} was generated with a different split than the model",
            data.display()
        ))
        .into());
    }
    state.config.checkpoint_path = Some(ctx.path(&a.checkpoint));
    ensure_parent(&ctx.path(&a.checkpoint))?;

    let metrics = ctx.path(&a.metrics);
    ensure_parent(&metrics)?;
    let mut w = BufWriter::new(fs::File::create(&metrics).with_context(|| format!("writing {}", metrics.display()))?);
    w.write_all(ctx.header(Some(state.config.seed)).as_bytes())?;
    writeln!(w, "iteration,lr,{}", ovdet::trainer::LossBreakdown::CSV_HEADER)?;
    let total = state.config.iterations;
    let mut io_err = None;
    state.run(&scenes, |it, lr, parts| {
        if let Err(e) = writeln!(w, "{it},{lr},{}", parts.csv()) {
            io_err.get_or_insert(e);
        }
        if (it + 1) % 100 == 0 || it + 1 == total {
            eprintln!("iter {:>6}/{total}  lr {lr:.1e}  loss {:.4}", it + 1, parts.total);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing metrics");
    }
    w.flush()?;
    let ck = Checkpoint::from_state(&state);
    println!(
        "stage {} finished at iteration {}; checkpoint {} (sha256 {})",
        state.config.stage,
        state.iteration,
        ctx.path(&a.checkpoint).display(),
        ck.hash_hex()
    );
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let ck_path = ctx.path(&a.checkpoint);
    let ck = Checkpoint::read(&ck_path).with_context(|| format!("reading {}", ck_path.display()))?;
    let model = ck.model()?;
    let data = ctx.path(&a.data);
    let (header, scenes) = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
    let m = &ck.manifest;
    let result = match header.split_kind {
        Split::Heldout => evaluate_zero_shot(&model, &m.space, &m.split, &header.split.heldout_combos, &scenes)?,
        Split::Train => evaluate(&model, &m.space, &m.split.train_combos, &scenes)?,
    };
    let kind = match header.split_kind {
        Split::Heldout => "zero-shot (held-out combos)",
        Split::Train => "seen (training combos)",
    };
    let report = format!(
        "{}# checkpoint stage {} iteration {} fusion {}\n{kind}\n{}",
        ctx.header(Some(m.train.seed)),
        m.stage,
        m.iteration,
        model.has_fusion(),
        result.report()
    );
    print!("{report}");
    if let Some(p) = &a.report {
        ctx.write(p, &report)?;
    }
    if let Some(p) = &a.csv {
        ctx.write(
            p,
            &format!("{}{}\n{}\n", ctx.header(Some(m.train.seed)), EvalResult::CSV_HEADER, result.csv()),
        )?;
    }
    Ok(())
}

/// (focal, beta1, beta2) variants of the loss-parameter sweep.
const BETA_GRID: [(f64, f64); 6] = [(1.0, 1.5), (1.0, 2.0), (1.0, 2.5), (2.0, 1.0), (2.0, 1.5), (2.0, 2.0)];

fn ablate_cmd(ctx: &Ctx, a: AblateArgs) -> Result<()> {
    let file: FileConfig = match &a.config {
        Some(p) => read_toml(&ctx.path(p))?,
        None => FileConfig::default(),
    };
    let mut base = file.train;
    if let Some(n) = a.iterations {
        base.iterations = n;
    }
    if let Some(n) = a.batch_size {
        base.batch_size = n;
    }
    if let Some(lr) = a.lr {
        base.lr = lr;
    }
    base.stage = 1;
    base.init_from = None;
    base.validate()?;
    let seeds = a.seeds.clone().unwrap_or(file.ablate.seeds);
    if seeds.is_empty() {
        return Err(Invalid("--seeds: at least one seed is required".into()).into());
    }
    let stage2_iterations = a.stage2_iterations.unwrap_or(file.ablate.stage2_iterations);

    let train_path = ctx.path(&a.train_data);
    let eval_path = ctx.path(&a.eval_data);
    let (th, train) = read_dataset(&train_path).with_context(|| format!("reading {}", train_path.display()))?;
    let (eh, eval) = read_dataset(&eval_path).with_context(|| format!("reading {}", eval_path.display()))?;
    if th.split != eh.split {
        return Err(Invalid("training and evaluation datasets use different splits".into()).into());
    }
    let split = th.split;
    let log = |s: &str| eprintln!("{s}");

    let mut csv = ctx.header(None);
    if a.beta_sweep {
        csv.push_str("loss,beta1,beta2,seed,map_50_95,status\n");
        let mut variants: Vec<(String, f64, f64, bool)> = vec![("focal".into(), f64::NAN, f64::NAN, false)];
        variants.extend(BETA_GRID.iter().map(|&(b1, b2)| ("dwcl".into(), b1, b2, true)));
        let mut summary = String::from("loss      beta1 beta2   mean     std\n");
        for (name, b1, b2, dwcl) in variants {
            let mut cfg = base.clone();
            if dwcl {
                cfg.dwcl = DwclParams { beta1: b1, beta2: b2, ..cfg.dwcl };
            }
            let plan = AblationPlan {
                base: cfg,
                stage2_iterations,
                seeds: seeds.clone(),
                rows: vec![AblationRow { o2m: true, dwcl, fusion: false }],
            };
            let r = &ablate(&plan, &split, &train, &eval, log)[0];
            let (c1, c2) = if dwcl { (b1.to_string(), b2.to_string()) } else { (String::new(), String::new()) };
            push_cells(&mut csv, &format!("{name},{c1},{c2}"), r);
            summary.push_str(&format!("{name:<9} {c1:>5} {c2:>5}  {:.4}  {:.4}\n", r.mean(), r.std()));
        }
        print!("{summary}");
    } else {
        csv.push_str("row,o2m,dwcl,fusion,seed,map_50_95,status\n");
        let plan = AblationPlan {
            base,
            stage2_iterations,
            seeds,
            rows: AblationRow::ALL.to_vec(),
        };
        let results = ablate(&plan, &split, &train, &eval, log);
        for r in &results {
            let key = format!("{},{},{},{}", r.row.name(), r.row.o2m, r.row.dwcl, r.row.fusion);
            push_cells(&mut csv, &key, r);
        }
        print!("{}", ablation_summary(&results));
    }
    let path = ctx.write(&a.out, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn push_cells(csv: &mut String, key: &str, r: &AblationResult) {
    for (seed, map) in &r.maps {
        csv.push_str(&format!("{key},{seed},{map},ok\n"));
    }
    for (seed, msg) in &r.failures {
        csv.push_str(&format!("{key},{seed},,failed: {}\n", msg.replace(',', ";")));
    }
}

/// Table of seed means and standard deviations, with the ordering check.
pub fn ablation_summary(results: &[AblationResult]) -> String {
    let mut s = String::from("row        mean     std      seeds\n");
    for r in results {
        s.push_str(&format!("{:<10} {:.4}   {:.4}   {}\n", r.row.name(), r.mean(), r.std(), r.maps.len()));
    }
    let means: Vec<f64> = results.iter().map(AblationResult::mean).collect();
    let ordered = means.windows(2).all(|w| w[1] >= w[0]);
    s.push_str(&format!("ordering baseline <= o2m <= o2m+dwcl <= full: {ordered}\n"));
    s
}

fn losscurve(ctx: &Ctx, a: LosscurveArgs) -> Result<()> {
    let params = CurveParams {
        focal: FocalParams { alpha: a.alpha, gamma: a.gamma },
        dwcl: DwclParams {
            beta1: a.beta1,
            beta2: a.beta2,
            ..DwclParams::default()
        },
        iou: a.iou,
        normalizer: a.normalizer,
        steps: a.steps,
        iou_steps: a.iou_steps,
    };
    let header = ctx.header(None);
    let c = ctx.write(&a.curve, &curve_csv(&curve(&params)?, &header))?;
    let s = ctx.write(&a.surface, &surface_csv(&surface(&params)?, &header))?;
    println!("wrote {} and {}", c.display(), s.display());
    Ok(())
}

fn gradcheck_cmd(ctx: &Ctx, a: GradcheckArgs) -> Result<()> {
    let scope = match a.scope {
        ScopeArg::Losses => Scope::Losses,
        ScopeArg::Fusion => Scope::Fusion,
        ScopeArg::Model => Scope::Model,
    };
    let report = gradcheck(scope, a.seed, a.corrupt.as_deref())?;
    let text = report.render();
    print!("{text}");
    if let Some(p) = &a.out {
        ctx.write(p, &format!("{}{text}", ctx.header(Some(a.seed))))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed for {}", report.failing().join(", "))).into())
    }
}

fn inspect(ctx: &Ctx, a: InspectArgs) -> Result<()> {
    let path = ctx.path(&a.checkpoint);
    let ck = Checkpoint::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let m = &ck.manifest;
    let model = ck.model()?;
    println!("checkpoint      {}", path.display());
    println!("sha256          {}", ck.hash_hex());
    println!("format version  {}", m.format_version);
    println!("provenance      {}", m.provenance);
    println!("stage           {}", m.stage);
    println!("iteration       {}", m.iteration);
    println!("optimizer steps {}", m.optimizer_steps);
    println!("fusion          {}", model.has_fusion());
    println!("parameters      {} tensors, {} scalars", model.params.len(), model.params.num_scalars());
    println!("text space      {}", m.space.fingerprint());
    println!("rng             {}", m.rng);
    println!("\n[train]\n{}", toml::to_string(&m.train).context("serializing config")?);
    println!("[split]\n{}", toml::to_string(&m.split).context("serializing split")?);
    Ok(())
}
