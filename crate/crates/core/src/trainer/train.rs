use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::Corpus;
use crate::encoder::{prune, Encoder, EncoderConfig, EncoderVars, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::{
    alpha_at, cosine_similarity_on, infonce_on, mac_loss_on, pretraining_loss_on, self_distill_on,
    tau_hard_at, AlphaSchedule, DistillInputs, DistillVariant, ModalityTags, TemperatureSchedule,
};
use crate::modality::{Modality, TaskType};
use crate::numeric::{Graph, Tensor, Var};

use super::optim::{adam_update, AdamConfig, OptimizerState};
use super::shard::{all_reduce_grads, gather_shards, split_batch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TeacherBootstrap,
    Pretrain,
    InstructionTune,
}

impl Stage {
    pub fn index(self) -> u8 {
        match self {
            Stage::TeacherBootstrap => 0,
            Stage::Pretrain => 1,
            Stage::InstructionTune => 2,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(Stage::TeacherBootstrap),
            1 => Ok(Stage::Pretrain),
            2 => Ok(Stage::InstructionTune),
            other => Err(Error::config(format!("stage {other} is not 0, 1 or 2"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub shards: usize,
    pub per_shard_batch: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub temperature: TemperatureSchedule,
    pub alpha: AlphaSchedule,
    pub distill: DistillVariant,
    /// Temperature of the KL distillation variant.
    pub distill_tau: f64,
    /// Student depth for stage 1.
    pub k: usize,
    /// Run shards on the rayon pool. Never changes results.
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::InstructionTune,
            shards: 1,
            per_shard_batch: 16,
            epochs: 1,
            adam: AdamConfig::default(),
            seed: 0,
            temperature: TemperatureSchedule::default(),
            alpha: AlphaSchedule::default(),
            distill: DistillVariant::Mse,
            distill_tau: 1.0,
            k: 1,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shards == 0 || self.per_shard_batch == 0 {
            return Err(Error::config("shards and per-shard batch must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("prune depth k must be at least 1"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        if !(self.distill_tau > 0.0) {
            return Err(Error::config("distillation temperature must be positive"));
        }
        self.temperature.validate()?;
        self.alpha.validate()
    }

    pub fn global_batch(&self) -> usize {
        self.shards * self.per_shard_batch
    }

    /// First 16 hex digits of SHA-256 over the training and model settings.
    pub fn config_hash(&self, model: &EncoderConfig) -> String {
        let json = serde_json::to_vec(&(self, model)).expect("plain data serializes");
        short_hash(&json)
    }
}

/// First 16 hex digits of SHA-256.
pub fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A prompted (query, gold candidate) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub sample_id: u32,
    pub query: TokenSequence,
    pub candidate: TokenSequence,
    pub target: Modality,
}

/// Stages 0 and 1 consume text→text pairs; stage 2 every training sample.
pub fn training_pairs(corpus: &Corpus, stage: Stage, max_seq: usize) -> Result<Vec<TrainPair>> {
    let pairs = corpus
        .train
        .iter()
        .filter(|s| stage == Stage::InstructionTune || s.task == TaskType::TextToText)
        .map(|s| {
            let cand = corpus.candidate(s.gold)?;
            Ok(TrainPair {
                sample_id: s.id,
                query: s.prompt(max_seq)?,
                candidate: cand.prompt(max_seq)?,
                target: cand.modality,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(Error::config(format!(
            "stage {} has no usable training pairs in this corpus",
            stage.index()
        )));
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairSide {
    Query,
    Candidate,
}

/// Frozen teacher's last-layer [RET] states keyed by (sample id, side).
#[derive(Clone, Debug, Default)]
pub struct TeacherCache {
    entries: HashMap<(u32, PairSide), Vec<f64>>,
}

impl TeacherCache {
    pub fn build(teacher: &Encoder, pairs: &[TrainPair]) -> Result<Self> {
        let depth = teacher.config().n_layers;
        let ret = |tokens: &TokenSequence| -> Result<Vec<f64>> {
            Ok(teacher.forward(tokens, depth)?.row(tokens.ret_position()).to_vec())
        };
        let rows = pairs
            .par_iter()
            .map(|p| Ok([((p.sample_id, PairSide::Query), ret(&p.query)?), ((p.sample_id, PairSide::Candidate), ret(&p.candidate)?)]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries: rows.into_iter().flatten().collect(),
        })
    }

    pub fn get(&self, sample_id: u32, side: PairSide) -> Result<&[f64]> {
        self.entries
            .get(&(sample_id, side))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("no teacher target for sample {sample_id} {side:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn matrix(&self, batch: &[&TrainPair], side: PairSide) -> Result<Tensor> {
        let rows = batch
            .iter()
            .map(|p| self.get(p.sample_id, side).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        Tensor::from_rows(&refs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub contrastive: f64,
    pub distill: f64,
    pub total: f64,
    pub tau_hard: f64,
    pub alphas: (f64, f64),
    pub distill_evaluated: bool,
}

#[derive(Clone, Debug)]
pub struct StepGradients {
    /// Summed over shards, in encoder parameter order.
    pub grads: Vec<Tensor>,
    pub losses: StepLosses,
}

struct ShardForward {
    graph: Graph,
    params: EncoderVars,
    queries: Var,
    candidates: Var,
}

fn map_shards<I, T, F>(parallel: bool, items: Vec<I>, f: F) -> Result<Vec<T>>
where
    I: Send,
    T: Send,
    F: Fn(I) -> Result<T> + Sync + Send,
{
    if parallel {
        items.into_par_iter().map(f).collect()
    } else {
        items.into_iter().map(f).collect()
    }
}

fn shard_forward(student: &Encoder, items: &[&TrainPair]) -> Result<ShardForward> {
    let mut g = Graph::new();
    let params = student.register(&mut g, true);
    let depth = student.config().k;
    let mut q_rows = Vec::with_capacity(items.len());
    let mut c_rows = Vec::with_capacity(items.len());
    for p in items {
        let h = student.forward_on(&mut g, &params, &p.query, depth)?;
        q_rows.push(g.slice_rows(h, p.query.ret_position(), 1)?);
        let h = student.forward_on(&mut g, &params, &p.candidate, depth)?;
        c_rows.push(g.slice_rows(h, p.candidate.ret_position(), 1)?);
    }
    let queries = g.concat_rows(&q_rows)?;
    let candidates = g.concat_rows(&c_rows)?;
    Ok(ShardForward {
        graph: g,
        params,
        queries,
        candidates,
    })
}

/// Pulls the global embedding gradients back through one shard's graph via
/// the scalar `Σ Q⊙dQ + Σ C⊙dC`, whose parameter gradient is exactly the
/// shard's share of the loss gradient.
fn shard_backward(fwd: ShardForward, dq: Tensor, dc: Tensor) -> Result<Vec<Tensor>> {
    let ShardForward {
        graph: mut g,
        params,
        queries,
        candidates,
    } = fwd;
    let dq = g.constant(dq);
    let dc = g.constant(dc);
    let pq = g.mul(queries, dq)?;
    let pc = g.mul(candidates, dc)?;
    let sq = g.sum(pq);
    let sc = g.sum(pc);
    let root = g.add(sq, sc)?;
    let grads = g.backward(root)?;
    params
        .as_slice()
        .iter()
        .map(|v| {
            grads
                .get(*v)
                .cloned()
                .ok_or_else(|| Error::contract("parameter missing from gradient map"))
        })
        .collect()
}

fn rows_slice(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (_, d) = t.dims2()?;
    Tensor::matrix(len, d, t.data()[start * d..(start + len) * d].to_vec())
}

/// Loss on the gathered embeddings; returns dL/dQ, dL/dC and the losses.
fn global_loss(
    queries: Tensor,
    candidates: Tensor,
    batch: &[&TrainPair],
    teacher: Option<&TeacherCache>,
    cfg: &TrainConfig,
    progress: f64,
) -> Result<(Tensor, Tensor, StepLosses)> {
    let mut g = Graph::new();
    let q = g.param(queries);
    let c = g.param(candidates);
    let sim = cosine_similarity_on(&mut g, q, c)?;
    let tau_norm = cfg.temperature.tau_norm();
    let (root, losses) = match cfg.stage {
        Stage::TeacherBootstrap => {
            let l = infonce_on(&mut g, sim, tau_norm)?;
            let v = g.value(l).item()?;
            (
                l,
                StepLosses {
                    contrastive: v,
                    distill: 0.0,
                    total: v,
                    tau_hard: tau_norm,
                    alphas: (1.0, 0.0),
                    distill_evaluated: false,
                },
            )
        }
        Stage::Pretrain => {
            let cache = teacher.ok_or_else(|| Error::config("stage 1 requires a teacher"))?;
            let tq = g.constant(cache.matrix(batch, PairSide::Query)?);
            let tc = g.constant(cache.matrix(batch, PairSide::Candidate)?);
            let lc = infonce_on(&mut g, sim, tau_norm)?;
            let ld = self_distill_on(
                &mut g,
                DistillInputs {
                    teacher_query: tq,
                    student_query: q,
                    teacher_candidate: tc,
                    student_candidate: c,
                },
                cfg.distill,
                cfg.distill_tau,
            )?;
            let alphas = alpha_at(&cfg.alpha, progress)?;
            let total = pretraining_loss_on(&mut g, lc, ld, alphas)?;
            (
                total,
                StepLosses {
                    contrastive: g.value(lc).item()?,
                    distill: g.value(ld).item()?,
                    total: g.value(total).item()?,
                    tau_hard: tau_norm,
                    alphas,
                    distill_evaluated: true,
                },
            )
        }
        Stage::InstructionTune => {
            let tau_hard = tau_hard_at(&cfg.temperature, progress)?;
            let tags = ModalityTags(batch.iter().map(|p| p.target).collect());
            let l = mac_loss_on(&mut g, sim, &tags, tau_hard, tau_norm, cfg.temperature.mode)?;
            let v = g.value(l).item()?;
            (
                l,
                StepLosses {
                    contrastive: v,
                    distill: 0.0,
                    total: v,
                    tau_hard,
                    alphas: (1.0, 0.0),
                    distill_evaluated: false,
                },
            )
        }
    };
    let grads = g.backward(root)?;
    let take = |v: Var| grads.get(v).cloned().ok_or_else(|| Error::contract("embedding gradient missing"));
    Ok((take(q)?, take(c)?, losses))
}

fn check_teacher(stage: Stage, teacher: bool) -> Result<()> {
    match (stage, teacher) {
        (Stage::Pretrain, false) => Err(Error::config("stage 1 requires a teacher")),
        (Stage::InstructionTune, true) => Err(Error::config("stage 2 does not take a distillation teacher")),
        (Stage::TeacherBootstrap, true) => Err(Error::config("stage 0 does not take a teacher")),
        _ => Ok(()),
    }
}

/// Sharded forward, gather, loss, per-shard backward and all-reduce.
pub fn compute_gradients(
    student: &Encoder,
    teacher: Option<&TeacherCache>,
    batch: &[&TrainPair],
    cfg: &TrainConfig,
    progress: f64,
) -> Result<StepGradients> {
    check_teacher(cfg.stage, teacher.is_some())?;
    let shards = split_batch(batch.len(), cfg.shards)?;
    let per = batch.len() / cfg.shards;

    let forwards = map_shards(cfg.parallel, shards, |ctx| {
        Ok((ctx.shard_id, shard_forward(student, &batch[ctx.range])?))
    })?;
    let q_locals = forwards
        .iter()
        .map(|(id, f)| (*id, f.graph.value(f.queries).clone()))
        .collect();
    let c_locals = forwards
        .iter()
        .map(|(id, f)| (*id, f.graph.value(f.candidates).clone()))
        .collect();
    let queries = gather_shards(q_locals, cfg.shards)?;
    let candidates = gather_shards(c_locals, cfg.shards)?;

    let (dq, dc, losses) = global_loss(queries, candidates, batch, teacher, cfg, progress)?;

    let shard_grads = map_shards(cfg.parallel, forwards, |(id, f)| {
        let dq = rows_slice(&dq, id * per, per)?;
        let dc = rows_slice(&dc, id * per, per)?;
        Ok((id, shard_backward(f, dq, dc)?))
    })?;
    Ok(StepGradients {
        grads: all_reduce_grads(shard_grads, cfg.shards)?,
        losses,
    })
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub encoder: Encoder,
    pub optimizer: OptimizerState,
    pub losses: StepLosses,
}

pub fn train_step(
    student: &Encoder,
    teacher: Option<&TeacherCache>,
    batch: &[&TrainPair],
    cfg: &TrainConfig,
    optimizer: &OptimizerState,
    progress: f64,
) -> Result<StepOutcome> {
    let StepGradients { grads, losses } = compute_gradients(student, teacher, batch, cfg, progress)?;
    let (params, optimizer) = adam_update(&student.params(), &grads, optimizer)?;
    Ok(StepOutcome {
        encoder: Encoder::from_params(*student.config(), params)?,
        optimizer,
        losses,
    })
}

/// Where a stage's student comes from.
#[derive(Clone, Copy, Debug)]
pub enum StageInit<'a> {
    /// Stage 0: seeded initialization at full depth.
    Fresh(EncoderConfig),
    /// Stage 1: the student is `prune(teacher, k)`.
    Teacher(&'a Encoder),
    /// Stage 2: continue from a stage-1 student.
    Resume(&'a Encoder),
}

/// Mean step losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub stage: u8,
    pub epoch: usize,
    pub contrastive: f64,
    pub distill: f64,
    pub total: f64,
    pub tau_hard: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub encoder: Encoder,
    pub optimizer: OptimizerState,
    pub curve: Vec<EpochLoss>,
    pub steps: usize,
    /// Number of steps that evaluated the distillation loss.
    pub distill_evaluations: usize,
}

pub fn run_stage(corpus: &Corpus, cfg: &TrainConfig, init: StageInit) -> Result<StageReport> {
    cfg.validate()?;
    let (student, teacher) = match (cfg.stage, init) {
        (Stage::TeacherBootstrap, StageInit::Fresh(model)) => {
            let model = EncoderConfig {
                k: model.n_layers,
                ..model
            };
            (Encoder::init(model, cfg.seed)?, None)
        }
        (Stage::Pretrain, StageInit::Teacher(t)) => (prune(t, cfg.k)?, Some(t)),
        (Stage::InstructionTune, StageInit::Resume(e)) => (e.clone(), None),
        (stage, init) => {
            return Err(Error::config(format!(
                "stage {} cannot start from {init:?}",
                stage.index()
            )))
        }
    };
    let model = *student.config();
    if corpus.spec.vocab_size() > model.vocab_size {
        return Err(Error::config(format!(
            "corpus needs {} token ids, model has {}",
            corpus.spec.vocab_size(),
            model.vocab_size
        )));
    }
    let pairs = training_pairs(corpus, cfg.stage, model.max_seq)?;
    let global = cfg.global_batch();
    if pairs.len() < global {
        return Err(Error::config(format!(
            "{} training pairs cannot fill a global batch of {global}",
            pairs.len()
        )));
    }
    let cache = teacher.map(|t| TeacherCache::build(t, &pairs)).transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = OptimizerState::new(cfg.adam, &Encoder::param_shapes(&model))?;
    let mut encoder = student;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let (mut steps, mut distill_evaluations) = (0, 0);

    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / cfg.epochs as f64;
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut last = None;
        let mut n = 0;
        for chunk in order.chunks_exact(global) {
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let out = train_step(&encoder, cache.as_ref(), &batch, cfg, &optimizer, progress)?;
            let l = out.losses;
            sums[0] += l.contrastive;
            sums[1] += l.distill;
            sums[2] += l.total;
            distill_evaluations += usize::from(l.distill_evaluated);
            last = Some(l);
            n += 1;
            encoder = out.encoder;
            optimizer = out.optimizer;
        }
        steps += n;
        let l = last.expect("at least one batch per epoch");
        curve.push(EpochLoss {
            stage: cfg.stage.index(),
            epoch,
            contrastive: sums[0] / n as f64,
            distill: sums[1] / n as f64,
            total: sums[2] / n as f64,
            tau_hard: l.tau_hard,
            alpha1: l.alphas.0,
            alpha2: l.alphas.1,
        });
    }
    Ok(StageReport {
        encoder,
        optimizer,
        curve,
        steps,
        distill_evaluations,
    })
}

pub fn write_loss_curve(path: &Path, curve: &[EpochLoss]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "stage,epoch,contrastive,distill,total,tau_hard,alpha1,alpha2")?;
    for e in curve {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.stage, e.epoch, e.contrastive, e.distill, e.total, e.tau_hard, e.alpha1, e.alpha2
        )?;
    }
    out.flush()?;
    Ok(())
}
