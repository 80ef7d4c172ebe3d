//! Contrastive training of the fusion encoder.
//!
//! Three stages share one loop: in-batch negatives only (`Rand`), in-batch
//! plus one mined negative per query (`Hard`), and uniform mixing of two
//! triplet sources on top of a hard-negative model (`Continual`).

mod gradcheck;
mod loss;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP, MIN_COORDS};
pub use loss::{composed_loss, infonce_grad, infonce_loss, BatchPool, ParamGrads, PoolEntry};

use crate::encoder::{EncodeOptions, Features, FusionParams};
use crate::error::{Error, Result};
use crate::featurizer::FeaturizerConfig;
use crate::types::{Item, Modality};

const MAX_RESAMPLE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NegativeClass {
    /// Wrong modality, ranked above the labeled positive.
    C1,
    /// Desired modality, ranked below the cutoff.
    C2,
}

impl fmt::Display for NegativeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeClass::C1 => "C1",
            NegativeClass::C2 => "C2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub task_id: String,
    pub instruction: String,
    pub query: Item,
    pub positive: Item,
    pub negative: Option<Item>,
    pub negative_class: Option<NegativeClass>,
}

impl TrainExample {
    pub fn validate(&self) -> Result<()> {
        if self.negative.is_some() != self.negative_class.is_some() {
            return Err(Error::parse(
                format!("example {}", self.query.id),
                "negative and negative_class must be set together",
            ));
        }
        if let Some(n) = &self.negative {
            if n.id == self.positive.id {
                return Err(Error::parse(
                    format!("example {}", self.query.id),
                    "negative equals positive",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Rand,
    Hard,
    Continual,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Rand => "rand",
            Stage::Hard => "hard",
            Stage::Continual => "continual",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rand" => Ok(Stage::Rand),
            "hard" => Ok(Stage::Hard),
            "continual" => Ok(Stage::Continual),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Passes over the data for `Rand` and `Hard`.
    pub epochs: usize,
    /// Optimizer steps for `Continual`.
    pub steps: usize,
    pub seed: u64,
    pub include_instruction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.05,
            batch_size: 32,
            lr: 1e-3,
            epochs: 10,
            steps: 200,
            seed: 0,
            include_instruction: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }

    fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            include_instruction: self.include_instruction,
        }
    }
}

/// Schedule used at full scale (8 devices), kept next to the desk-scale
/// defaults so reports can show both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FullScaleSchedule {
    pub batch_rand: usize,
    pub batch_hard: usize,
    pub lr_mllm: f64,
    pub lr_clip: f64,
    pub lr_continual: f64,
    pub continual_steps: usize,
    pub epochs_mllm: usize,
    pub epochs_clip: usize,
}

pub const FULL_SCALE: FullScaleSchedule = FullScaleSchedule {
    batch_rand: 128 * 8,
    batch_hard: 64 * 8,
    lr_mllm: 1e-4,
    lr_clip: 1e-5,
    lr_continual: 2e-5,
    continual_steps: 4500,
    epochs_mllm: 2,
    epochs_clip: 20,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Positive,
    Negative,
}

/// One mini-batch: member examples and the deduplicated candidate pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub members: Vec<usize>,
    /// `(example index, role)` per pool slot, first occurrence of each id.
    pub pool: Vec<(usize, Role)>,
    /// Pool slot of each member's positive.
    pub pos_index: Vec<usize>,
}

impl Batch {
    fn assemble(examples: &[TrainExample], members: Vec<usize>, with_negatives: bool) -> Self {
        let mut slot_of: HashMap<&str, usize> = HashMap::new();
        let mut pool = Vec::new();
        for &m in &members {
            let ex = &examples[m];
            if !slot_of.contains_key(ex.positive.id.as_str()) {
                slot_of.insert(&ex.positive.id, pool.len());
                pool.push((m, Role::Positive));
            }
            if with_negatives {
                if let Some(n) = &ex.negative {
                    if !slot_of.contains_key(n.id.as_str()) {
                        slot_of.insert(&n.id, pool.len());
                        pool.push((m, Role::Negative));
                    }
                }
            }
        }
        let pos_index = members
            .iter()
            .map(|&m| slot_of[examples[m].positive.id.as_str()])
            .collect();
        Batch {
            members,
            pool,
            pos_index,
        }
    }

    pub fn pool_ids<'a>(&self, examples: &'a [TrainExample]) -> Vec<&'a str> {
        self.pool
            .iter()
            .map(|&(ex, role)| match role {
                Role::Positive => examples[ex].positive.id.as_str(),
                Role::Negative => examples[ex]
                    .negative
                    .as_ref()
                    .map(|n| n.id.as_str())
                    .expect("negative slot has a negative"),
            })
            .collect()
    }
}

/// Shuffle and cut into full batches with distinct positive ids. On a
/// collision the slot is redrawn from any example outside the current batch:
/// a not-yet-placed one is swapped in, an already-placed one is reused.
fn select_batches(
    examples: &[TrainExample],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let n = examples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(n / batch_size);
    for b in 0..n / batch_size {
        let mut seen = HashSet::new();
        for slot in b * batch_size..(b + 1) * batch_size {
            let mut attempts = 0;
            while seen.contains(examples[order[slot]].positive.id.as_str()) {
                if attempts == MAX_RESAMPLE {
                    return Err(Error::BatchInfeasible(format!(
                        "no example with a fresh positive after {MAX_RESAMPLE} attempts (batch {b})"
                    )));
                }
                let start = b * batch_size;
                let mut j = rng.gen_range(0..n - (slot - start));
                if j >= start {
                    j += slot - start;
                }
                if j >= slot {
                    order.swap(slot, j);
                } else {
                    order[slot] = order[j];
                }
                attempts += 1;
            }
            seen.insert(examples[order[slot]].positive.id.as_str());
        }
        batches.push(order[b * batch_size..(b + 1) * batch_size].to_vec());
    }
    Ok(batches)
}

/// Batches whose pool holds only the members' positives.
pub fn make_batches_rand(
    examples: &[TrainExample],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Batch>> {
    Ok(select_batches(examples, cfg.batch_size, rng)?
        .into_iter()
        .map(|m| Batch::assemble(examples, m, false))
        .collect())
}

/// Batches whose pool holds positives and mined negatives.
pub fn make_batches_hard(
    examples: &[TrainExample],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Batch>> {
    Ok(select_batches(examples, cfg.batch_size, rng)?
        .into_iter()
        .map(|m| Batch::assemble(examples, m, true))
        .collect())
}

/// Pick a source with probability 1/2, then an example uniformly in it.
/// Returns `(true, i)` for source A.
pub fn sample_mixed_index(
    source_a: &[TrainExample],
    source_b: &[TrainExample],
    rng: &mut impl Rng,
) -> Result<(bool, usize)> {
    if source_a.is_empty() {
        return Err(Error::EmptySource("A"));
    }
    if source_b.is_empty() {
        return Err(Error::EmptySource("B"));
    }
    if rng.gen_bool(0.5) {
        Ok((true, rng.gen_range(0..source_a.len())))
    } else {
        Ok((false, rng.gen_range(0..source_b.len())))
    }
}

pub fn sample_mixed<'a>(
    source_a: &'a [TrainExample],
    source_b: &'a [TrainExample],
    rng: &mut impl Rng,
) -> Result<&'a TrainExample> {
    let (from_a, i) = sample_mixed_index(source_a, source_b, rng)?;
    Ok(if from_a { &source_a[i] } else { &source_b[i] })
}

/// Adam with constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut FusionParams, grads: &ParamGrads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let params_iter = params.w_text.iter_mut().chain(params.w_image.iter_mut());
        for (((p, g), m), v) in params_iter
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *p -= update;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub stage: Stage,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FusionParams,
    pub trace: Vec<LossPoint>,
}

/// Loss trace as `step,loss,stage` CSV.
pub fn write_loss_trace<W: Write>(mut w: W, trace: &[LossPoint]) -> Result<()> {
    writeln!(w, "step,loss,stage")?;
    for p in trace {
        writeln!(w, "{},{:.17e},{}", p.step, p.loss, p.stage)?;
    }
    Ok(())
}

struct Prepared {
    query: Features,
    positive: Features,
    negative: Option<Features>,
}

fn prepare(
    examples: &[TrainExample],
    fcfg: &FeaturizerConfig,
    opts: EncodeOptions,
) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .map(|ex| {
            ex.validate()?;
            Ok(Prepared {
                query: Features::query(&ex.instruction, &ex.query, fcfg, opts)?,
                positive: Features::candidate(&ex.positive, fcfg)?,
                negative: ex
                    .negative
                    .as_ref()
                    .map(|n| Features::candidate(n, fcfg))
                    .transpose()?,
            })
        })
        .collect()
}

fn batch_features(prepared: &[Prepared], batch: &Batch) -> (Vec<Features>, Vec<Features>) {
    let queries = batch
        .members
        .iter()
        .map(|&m| prepared[m].query.clone())
        .collect();
    let pool = batch
        .pool
        .iter()
        .map(|&(ex, role)| match role {
            Role::Positive => prepared[ex].positive.clone(),
            Role::Negative => prepared[ex]
                .negative
                .clone()
                .expect("negative slot has features"),
        })
        .collect();
    (queries, pool)
}

fn check_params(init: &FusionParams, fcfg: &FeaturizerConfig) -> Result<()> {
    init.check_compatible(fcfg)?;
    if !init.is_finite() {
        return Err(Error::NonFinite("initial params"));
    }
    Ok(())
}

/// Train from `init` with fresh optimizer state. `Rand` ignores negatives;
/// `Hard` adds each example's negative to the pool (examples without one
/// fall back to in-batch negatives). Use [`train_continual`] for mixing.
pub fn train(
    examples: &[TrainExample],
    init: &FusionParams,
    fcfg: &FeaturizerConfig,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_params(init, fcfg)?;
    if stage == Stage::Continual {
        return Err(Error::Config(
            "continual stage samples two sources; use train_continual".into(),
        ));
    }
    if stage == Stage::Hard && !examples.iter().any(|e| e.negative.is_some()) {
        return Err(Error::BatchInfeasible(
            "hard stage needs mined negatives".into(),
        ));
    }
    let prepared = prepare(examples, fcfg, cfg.encode_options())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init.clone();
    let mut adam = Adam::new(params.num_params(), cfg.lr);
    let mut trace = Vec::new();
    for _ in 0..cfg.epochs {
        let batches = match stage {
            Stage::Rand => make_batches_rand(examples, cfg, &mut rng)?,
            _ => make_batches_hard(examples, cfg, &mut rng)?,
        };
        if batches.is_empty() {
            return Err(Error::BatchInfeasible(format!(
                "{} examples cannot fill one batch of {}",
                examples.len(),
                cfg.batch_size
            )));
        }
        for batch in &batches {
            let (queries, pool) = batch_features(&prepared, batch);
            let (loss, grads) = infonce_grad(&queries, &pool, &batch.pos_index, &params, cfg.tau)?;
            adam.step(&mut params, &grads);
            trace.push(LossPoint {
                step: trace.len(),
                loss,
                stage,
            });
        }
    }
    Ok(TrainOutcome { params, trace })
}

/// Continue training from `init` for `cfg.steps` steps on batches drawn
/// with [`sample_mixed`], pools holding positives and negatives.
pub fn train_continual(
    source_a: &[TrainExample],
    source_b: &[TrainExample],
    init: &FusionParams,
    fcfg: &FeaturizerConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_params(init, fcfg)?;
    if source_a.is_empty() {
        return Err(Error::EmptySource("A"));
    }
    if source_b.is_empty() {
        return Err(Error::EmptySource("B"));
    }
    let opts = cfg.encode_options();
    // one index space: A then B
    let combined: Vec<TrainExample> = source_a.iter().chain(source_b).cloned().collect();
    let prepared = prepare(&combined, fcfg, opts)?;
    let offset_b = source_a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init.clone();
    let mut adam = Adam::new(params.num_params(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut members = Vec::with_capacity(cfg.batch_size);
        let mut seen = HashSet::new();
        while members.len() < cfg.batch_size {
            let mut attempts = 0;
            let idx = loop {
                let (from_a, i) = sample_mixed_index(source_a, source_b, &mut rng)?;
                let idx = if from_a { i } else { offset_b + i };
                if !seen.contains(combined[idx].positive.id.as_str()) {
                    break idx;
                }
                attempts += 1;
                if attempts == MAX_RESAMPLE {
                    return Err(Error::BatchInfeasible(format!(
                        "no fresh positive after {MAX_RESAMPLE} draws (step {step})"
                    )));
                }
            };
            seen.insert(combined[idx].positive.id.as_str());
            members.push(idx);
        }
        let batch = Batch::assemble(&combined, members, true);
        let (queries, pool) = batch_features(&prepared, &batch);
        let (loss, grads) = infonce_grad(&queries, &pool, &batch.pos_index, &params, cfg.tau)?;
        adam.step(&mut params, &grads);
        trace.push(LossPoint {
            step,
            loss,
            stage: Stage::Continual,
        });
    }
    Ok(TrainOutcome { params, trace })
}

/// Modality of the candidates a pool slot refers to.
pub fn slot_modality(examples: &[TrainExample], slot: (usize, Role)) -> Modality {
    match slot.1 {
        Role::Positive => examples[slot.0].positive.modality,
        Role::Negative => examples[slot.0]
            .negative
            .as_ref()
            .map(|n| n.modality)
            .expect("negative slot"),
    }
}
