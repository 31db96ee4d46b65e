//! Training recipes: frame-local baselines, the two teachers, and residual
//! distillation of the flow teacher into a frame-local student.

mod cache;
mod data;
pub mod optim;
mod runlog;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{
    build_rank_matrix, tuple_objective, LossBreakdown, LossWeights, LowRankAnchor, Objective,
    RankLayout, StyleTarget, TupleTargets,
};
use crate::networks::{
    load_checkpoint_as, save_checkpoint, short_id, teacher_input, trunk_graph, Arch, Bound,
    NetworkHandle,
};
use crate::stability::{evaluate_scenes, EStabOptions};
use crate::tensor::Tensor;
use crate::videodata::{sample_corpus_tuples, FrameSequence, TrainingTuple};

pub use cache::{compute_sequence, CacheIds, CacheStats, CachedFrame, TeacherCache};
pub use data::{build_corpus, procedural_style, DatasetSpec, StyleSpec};
pub use optim::{Adam, AdamParams, StepDecay};
pub use runlog::{read_log, LogRecord, RunLog};

/// Which objective and forward pass a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    Baseline,
    BaselineTemporal,
    TeacherFlow,
    TeacherNoflow,
    Distill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Tuples drawn per epoch; one iteration consumes `batch_size` of them.
    pub tuples_per_epoch: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_iters: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Temporal weight used when training the flow teacher.
    pub teacher_temporal: f64,
    pub rank_layout: RankLayout,
    pub lowrank_anchor: LowRankAnchor,
    /// Include the temporal term while distilling.
    pub use_temporal: bool,
    /// Start the student from the frozen baseline instead of fresh weights.
    pub warm_start: bool,
    pub student_width: f64,
    /// Width of the flow teacher.
    pub teacher_width: f64,
    /// Width of the flow-free teacher.
    pub teacher_noflow_width: f64,
    pub features_seed: u64,
    /// Trained feature extractor weights; the seeded random stack otherwise.
    #[serde(default)]
    pub features_checkpoint: Option<PathBuf>,
    pub adam: AdamParams,
    pub teacher_checkpoint: PathBuf,
    pub teacher_noflow_checkpoint: PathBuf,
    pub student_baseline_checkpoint: PathBuf,
    /// Train missing frozen networks instead of failing.
    pub auto_build: bool,
    pub dataset: DatasetSpec,
    pub validation: DatasetSpec,
    pub cache_dir: PathBuf,
    pub style: StyleSpec,
    pub deterministic: bool,
}

impl TrainConfig {
    /// Small synthetic setup that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            epochs: 5,
            tuples_per_epoch: 200,
            batch_size: 1,
            base_lr: 1e-3,
            lr_decay_factor: 1.2,
            lr_decay_every_iters: 500,
            seed: 0,
            weights: LossWeights {
                content: 1.0,
                style: 1e4,
                tv: 1e-5,
                residual: 10.0,
                temporal: 3.0,
                rank: 1e-5,
                k: 5,
            },
            teacher_temporal: 20.0,
            rank_layout: RankLayout::Joint,
            lowrank_anchor: LowRankAnchor::Input,
            use_temporal: true,
            warm_start: false,
            student_width: 0.25,
            teacher_width: 0.5,
            teacher_noflow_width: 0.25,
            features_seed: 17,
            features_checkpoint: None,
            adam: AdamParams::default(),
            teacher_checkpoint: "checkpoints/teacher-flow.ckpt".into(),
            teacher_noflow_checkpoint: "checkpoints/teacher-noflow.ckpt".into(),
            student_baseline_checkpoint: "checkpoints/student-baseline.ckpt".into(),
            auto_build: false,
            dataset: DatasetSpec::Synthetic {
                sequences: 8,
                frames: 12,
                width: 64,
                height: 64,
                sprites: 3,
                seed: 100,
            },
            validation: DatasetSpec::Synthetic {
                sequences: 4,
                frames: 8,
                width: 64,
                height: 64,
                sprites: 3,
                seed: 900,
            },
            cache_dir: "cache".into(),
            style: StyleSpec {
                image: None,
                seed: 7,
                size: 128,
            },
            deterministic: false,
        }
    }

    /// Published schedule and loss weights at full network width.
    pub fn paper() -> Self {
        Self {
            epochs: 10,
            tuples_per_epoch: 10_000,
            weights: LossWeights::paper(),
            teacher_temporal: LossWeights::paper().temporal,
            student_width: 1.0,
            teacher_width: 1.0,
            teacher_noflow_width: 1.0,
            dataset: DatasetSpec::Directory {
                root: "data/train".into(),
            },
            validation: DatasetSpec::Directory {
                root: "data/val".into(),
            },
            style: StyleSpec {
                image: Some("style.png".into()),
                seed: 7,
                size: 256,
            },
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::ConfigInvalid {
                key: key.into(),
                reason,
            })
        };
        if self.epochs < 1 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.tuples_per_epoch < 1 {
            return bad("tuples_per_epoch", "must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr_decay_factor > 1.0) {
            return bad(
                "lr_decay_factor",
                format!("must exceed 1, got {}", self.lr_decay_factor),
            );
        }
        if self.lr_decay_every_iters < 1 {
            return bad("lr_decay_every_iters", "must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        for (key, w) in [
            ("student_width", self.student_width),
            ("teacher_width", self.teacher_width),
            ("teacher_noflow_width", self.teacher_noflow_width),
        ] {
            if !(w > 0.0 && w.is_finite()) {
                return bad(key, format!("must be positive, got {w}"));
            }
        }
        if !(self.teacher_temporal >= 0.0 && self.teacher_temporal.is_finite()) {
            return bad(
                "teacher_temporal",
                "must be a finite non-negative number".into(),
            );
        }
        self.weights.validate()
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base_lr: self.base_lr,
            factor: self.lr_decay_factor,
            every: self.lr_decay_every_iters,
        }
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.tuples_per_epoch.div_ceil(self.batch_size)
    }

    /// Rewrites relative checkpoint and cache paths against `root`.
    pub fn resolve_paths(&mut self, root: &Path) {
        for p in [
            &mut self.teacher_checkpoint,
            &mut self.teacher_noflow_checkpoint,
            &mut self.student_baseline_checkpoint,
            &mut self.cache_dir,
        ] {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
    }
}

/// SHA-256 of the canonical JSON form of any config.
pub fn fingerprint<S: Serialize>(value: &S) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Everything a recipe needs besides the networks.
pub struct Session {
    pub config: TrainConfig,
    pub corpus: Vec<FrameSequence<f32>>,
    pub validation: Vec<FrameSequence<f32>>,
    pub features: NetworkHandle<f32>,
    pub style: StyleTarget<f32>,
}

impl Session {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let corpus = build_corpus(&config.dataset)?;
        let validation = build_corpus(&config.validation)?;
        if corpus.iter().all(|s| s.len() < config.weights.k) {
            return Err(Error::ConfigInvalid {
                key: "weights.k".into(),
                reason: format!("no training sequence has {} frames", config.weights.k),
            });
        }
        let features = match &config.features_checkpoint {
            Some(p) => load_checkpoint_as(p, Arch::Features)?.freeze(),
            None => NetworkHandle::features(config.features_seed),
        };
        let style = StyleTarget::standard(&features, config.style.load()?)?;
        Ok(Self {
            config,
            corpus,
            validation,
            features,
            style,
        })
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.config)
    }

    /// Mean validation e_stab of a network, with ground-truth flows and masks.
    pub fn validate_net(&self, net: &NetworkHandle<f32>) -> Result<f64> {
        Ok(evaluate_scenes(net, &self.validation, EStabOptions::default())?.mean())
    }
}

/// The three networks distillation reads but never updates.
#[derive(Debug, Clone)]
pub struct FrozenNets {
    pub teacher: NetworkHandle<f32>,
    pub teacher_noflow: NetworkHandle<f32>,
    pub student_baseline: NetworkHandle<f32>,
}

impl FrozenNets {
    pub fn ids(&self) -> CacheIds {
        CacheIds {
            teacher: self.teacher.checkpoint_id.clone(),
            teacher_noflow: self.teacher_noflow.checkpoint_id.clone(),
            student_baseline: self.student_baseline.checkpoint_id.clone(),
        }
    }
}

const TUPLE_SALT: u64 = 0x7475_706c_6573;

/// The flow-free teacher shares the student's seed: when its width matches
/// the student's it starts, and trains, exactly like the baseline student.
fn init_seed(cfg: &TrainConfig, arch: Arch) -> u64 {
    match arch {
        Arch::Student | Arch::Features | Arch::TeacherNoflow => cfg.seed,
        Arch::TeacherFlow => cfg.seed.wrapping_add(1),
    }
}

struct Plan<'a> {
    recipe: Recipe,
    weights: LossWeights,
    cache: Option<&'a TeacherCache>,
    frozen_ids: Vec<String>,
}

/// Stylized tuple frames on the tape. The flow teacher is run recurrently and
/// sees its own previous output detached from the graph.
fn forward_tuple(
    g: &mut Graph<f32>,
    net: &NetworkHandle<f32>,
    bound: &Bound,
    tuple: &TrainingTuple<f32>,
    recipe: Recipe,
) -> Result<Vec<Var>> {
    let mut outs: Vec<Var> = Vec::with_capacity(tuple.k());
    for (t, frame) in tuple.frames.iter().enumerate() {
        let input = if recipe == Recipe::TeacherFlow {
            let prev = (t > 0).then(|| g.value(outs[t - 1]).clone());
            teacher_input(
                frame,
                prev.as_ref(),
                t.checked_sub(1).map(|i| &tuple.flows[i]),
                t.checked_sub(1).map(|i| &tuple.masks[i]),
            )?
        } else {
            frame.clone()
        };
        let x = g.constant(input);
        outs.push(trunk_graph(net, g, bound, x)?);
    }
    Ok(outs)
}

type Step = (LossBreakdown, Vec<Option<Tensor<f32>>>);

fn tuple_step(
    session: &Session,
    net: &NetworkHandle<f32>,
    plan: &Plan<'_>,
    tuple: &TrainingTuple<f32>,
) -> Result<Step> {
    let cfg = &session.config;
    let mut g = Graph::new();
    let fb = session.features.bind_constants(&mut g);
    let bound = net.bind(&mut g);
    let outs = forward_tuple(&mut g, net, &bound, tuple, plan.recipe)?;
    let w = &plan.weights;

    let residual = if w.residual > 0.0 {
        let cache = plan
            .cache
            .ok_or_else(|| Error::CacheMiss("no teacher cache for the residual term".into()))?;
        Some(
            (0..tuple.k())
                .map(|t| {
                    Ok(cache
                        .get(&tuple.source_id, tuple.start + t)?
                        .residual_target())
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let geometry = if w.rank > 0.0 {
        Some(tuple.geometry()?)
    } else {
        None
    };
    let anchor_nuclear = match &geometry {
        Some(geom) => {
            let rows: Vec<Tensor<f32>> = match cfg.lowrank_anchor {
                LowRankAnchor::Input => tuple.frames.clone(),
                LowRankAnchor::Teacher => {
                    let cache = plan.cache.ok_or_else(|| {
                        Error::CacheMiss("no teacher cache for the rank anchor".into())
                    })?;
                    (0..tuple.k())
                        .map(|t| {
                            Ok(cache
                                .get(&tuple.source_id, tuple.start + t)?
                                .teacher
                                .clone())
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            };
            build_rank_matrix(&rows, geom, cfg.rank_layout)?.nuclear
        }
        None => 0.0,
    };

    let obj = Objective {
        features: &session.features,
        style: &session.style,
        weights: w,
        rank_layout: cfg.rank_layout,
    };
    let targets = TupleTargets {
        frames: &tuple.frames,
        flows: &tuple.flows,
        masks: &tuple.masks,
        residual: residual.as_deref(),
        rank: geometry.as_ref().map(|geom| (geom, anchor_nuclear)),
    };
    let terms = tuple_objective(&mut g, &obj, &fb, &outs, &targets)?;
    let mut grads = g.backward(terms.total);
    let grads = bound.vars.iter().map(|&v| grads.take(v)).collect();
    Ok((terms.breakdown, grads))
}

fn run(
    session: &Session,
    net: &mut NetworkHandle<f32>,
    plan: &Plan<'_>,
    log: &mut RunLog,
) -> Result<()> {
    let cfg = &session.config;
    let k = plan.weights.k;
    let per_epoch = cfg.iters_per_epoch();
    let total = per_epoch * cfg.epochs;
    let picks = sample_corpus_tuples(
        &session.corpus,
        k,
        total * cfg.batch_size,
        cfg.seed ^ TUPLE_SALT,
    )?;
    let schedule = cfg.schedule();
    log.push(LogRecord::Header {
        recipe: plan.recipe,
        fingerprint: session.fingerprint(),
        seed: cfg.seed,
        deterministic: cfg.deterministic,
        iterations: total,
        weights: plan.weights.clone(),
        adam: cfg.adam,
        schedule,
        rank_layout: cfg.rank_layout,
        lowrank_anchor: cfg.lowrank_anchor,
        warm_start: cfg.warm_start && plan.recipe == Recipe::Distill,
        frozen_ids: plan.frozen_ids.clone(),
    })?;
    let mut opt = Adam::new(net, cfg.adam);
    let inv_batch = 1.0 / cfg.batch_size as f32;
    for it in 0..total {
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; net.params.len()];
        let mut sum = LossBreakdown::default();
        for &(si, start) in &picks[it * cfg.batch_size..(it + 1) * cfg.batch_size] {
            let tuple = TrainingTuple::from_sequence(&session.corpus[si], start, k)?;
            let (b, g) = tuple_step(session, net, plan, &tuple)?;
            for (acc, gi) in grads.iter_mut().zip(g) {
                let Some(gi) = gi else { continue };
                let gi = gi.scale(inv_batch);
                match acc {
                    Some(a) => a.add_assign(&gi),
                    None => *acc = Some(gi),
                }
            }
            for (s, v) in [
                (&mut sum.content, b.content),
                (&mut sum.style, b.style),
                (&mut sum.tv, b.tv),
                (&mut sum.residual, b.residual),
                (&mut sum.temporal, b.temporal),
                (&mut sum.rank, b.rank),
                (&mut sum.total, b.total),
            ] {
                *s += v / cfg.batch_size as f64;
            }
        }
        let finite_grads = grads.iter().flatten().all(Tensor::all_finite);
        if !sum.total.is_finite() || !finite_grads {
            log.flush()?;
            return Err(Error::DivergedLoss {
                iter: it,
                detail: serde_json::to_string(&sum)?,
            });
        }
        let lr = schedule.lr(it);
        opt.step(net, &grads, lr)?;
        log.push(LogRecord::Iter {
            iter: it,
            lr,
            losses: sum,
        })?;
        if (it + 1) % per_epoch == 0 {
            let epoch = (it + 1) / per_epoch;
            let val = session.validate_net(net)?;
            log::info!(
                "{:?} epoch {epoch}: loss {:.4e}, val e_stab {val:.5}",
                plan.recipe,
                sum.total
            );
            log.push(LogRecord::Epoch {
                epoch,
                val_e_stab: val,
            })?;
        }
    }
    net.refresh_id();
    log.flush()
}

fn baseline_weights(cfg: &TrainConfig, use_temporal: bool) -> LossWeights {
    let mut w = cfg.weights.perceptual_only();
    if use_temporal {
        w.temporal = cfg.weights.temporal;
    }
    w
}

/// Frame-local student trained from scratch on the perceptual loss, plus the
/// temporal loss when `use_temporal`.
pub fn train_baseline(
    session: &Session,
    use_temporal: bool,
    log: &mut RunLog,
) -> Result<NetworkHandle<f32>> {
    let cfg = &session.config;
    let mut net = NetworkHandle::init(
        Arch::Student,
        cfg.student_width,
        init_seed(cfg, Arch::Student),
    );
    let plan = Plan {
        recipe: if use_temporal {
            Recipe::BaselineTemporal
        } else {
            Recipe::Baseline
        },
        weights: baseline_weights(cfg, use_temporal),
        cache: None,
        frozen_ids: Vec::new(),
    };
    run(session, &mut net, &plan, log)?;
    Ok(net)
}

/// The recurrent flow teacher: perceptual plus temporal loss, conditioned on
/// its own warped previous output.
pub fn train_teacher_flow(session: &Session, log: &mut RunLog) -> Result<NetworkHandle<f32>> {
    let cfg = &session.config;
    let mut net = NetworkHandle::init(
        Arch::TeacherFlow,
        cfg.teacher_width,
        init_seed(cfg, Arch::TeacherFlow),
    );
    let mut weights = cfg.weights.perceptual_only();
    weights.temporal = cfg.teacher_temporal;
    let plan = Plan {
        recipe: Recipe::TeacherFlow,
        weights,
        cache: None,
        frozen_ids: Vec::new(),
    };
    run(session, &mut net, &plan, log)?;
    Ok(net)
}

/// The flow-free teacher: the plain baseline recipe at `teacher_noflow_width`.
pub fn train_teacher_noflow(session: &Session, log: &mut RunLog) -> Result<NetworkHandle<f32>> {
    let cfg = &session.config;
    let mut net = NetworkHandle::init(
        Arch::TeacherNoflow,
        cfg.teacher_noflow_width,
        init_seed(cfg, Arch::TeacherNoflow),
    );
    let plan = Plan {
        recipe: Recipe::TeacherNoflow,
        weights: baseline_weights(cfg, false),
        cache: None,
        frozen_ids: Vec::new(),
    };
    run(session, &mut net, &plan, log)?;
    Ok(net)
}

/// Both teachers, frozen.
pub fn train_teacher(
    session: &Session,
    flow_log: &mut RunLog,
    noflow_log: &mut RunLog,
) -> Result<(NetworkHandle<f32>, NetworkHandle<f32>)> {
    Ok((
        train_teacher_flow(session, flow_log)?.freeze(),
        train_teacher_noflow(session, noflow_log)?.freeze(),
    ))
}

/// Log path written next to an auto-built checkpoint.
pub fn log_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.jsonl")
}

fn load_or_build(
    path: &Path,
    arch: Arch,
    auto_build: bool,
    built: &mut Vec<Recipe>,
    recipe: Recipe,
    train: impl FnOnce(&mut RunLog) -> Result<NetworkHandle<f32>>,
) -> Result<NetworkHandle<f32>> {
    if path.exists() {
        return Ok(load_checkpoint_as(path, arch)?.freeze());
    }
    if !auto_build {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let mut log = RunLog::to_file(&log_path_for(path))?;
    let net = train(&mut log)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(&net, path)?;
    built.push(recipe);
    Ok(net.freeze())
}

/// Loads the three frozen networks, training and saving any that are
/// missing when `auto_build` is set. Returns which recipes were run.
pub fn prepare_frozen(session: &Session) -> Result<(FrozenNets, Vec<Recipe>)> {
    let cfg = &session.config;
    let mut built = Vec::new();
    let teacher = load_or_build(
        &cfg.teacher_checkpoint,
        Arch::TeacherFlow,
        cfg.auto_build,
        &mut built,
        Recipe::TeacherFlow,
        |log| train_teacher_flow(session, log),
    )?;
    let teacher_noflow = load_or_build(
        &cfg.teacher_noflow_checkpoint,
        Arch::TeacherNoflow,
        cfg.auto_build,
        &mut built,
        Recipe::TeacherNoflow,
        |log| train_teacher_noflow(session, log),
    )?;
    let student_baseline = load_or_build(
        &cfg.student_baseline_checkpoint,
        Arch::Student,
        cfg.auto_build,
        &mut built,
        Recipe::Baseline,
        |log| train_baseline(session, false, log),
    )?;
    Ok((
        FrozenNets {
            teacher,
            teacher_noflow,
            student_baseline,
        },
        built,
    ))
}

/// Teacher difference and baseline outputs for every training frame.
pub fn cache_teacher_outputs(
    session: &Session,
    nets: &FrozenNets,
) -> Result<(TeacherCache, CacheStats)> {
    TeacherCache::build(nets, &session.corpus, Some(&session.config.cache_dir))
}

/// Trains the student on the full objective against cached teacher targets.
pub fn distill(
    session: &Session,
    nets: &FrozenNets,
    cache: &TeacherCache,
    log: &mut RunLog,
) -> Result<NetworkHandle<f32>> {
    let cfg = &session.config;
    cache.check_ids(nets)?;
    let mut net = if cfg.warm_start {
        let mut n = nets.student_baseline.clone();
        n.frozen = false;
        n
    } else {
        NetworkHandle::init(
            Arch::Student,
            cfg.student_width,
            init_seed(cfg, Arch::Student),
        )
    };
    let mut weights = cfg.weights.clone();
    if !cfg.use_temporal {
        weights.temporal = 0.0;
    }
    let ids = nets.ids();
    let plan = Plan {
        recipe: Recipe::Distill,
        weights,
        cache: Some(cache),
        frozen_ids: vec![ids.teacher, ids.teacher_noflow, ids.student_baseline],
    };
    log::info!(
        "distilling from teacher {} / {}",
        short_id(&nets.teacher.checkpoint_id),
        short_id(&nets.teacher_noflow.checkpoint_id)
    );
    run(session, &mut net, &plan, log)?;
    Ok(net)
}
