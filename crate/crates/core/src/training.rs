//! End-to-end and softmax training loops, the utterance pool that feeds them,
//! and the speaker-model-size sweep.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::sync::Arc;

use log::{debug, info};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::features::{read_fbnk_file, FeatureMatrix};
use crate::losses::{sample_candidates, E2eHead, VerificationTarget, E2E_INIT_BIAS, E2E_INIT_WEIGHT};
use crate::manifest::ManifestEntry;
use crate::networks::{Head, HeadConfig, Model, Network, NetworkConfig};
use crate::rng::{derived, Rng};
use crate::tensor::{Matrix, ParamGrads, ParamSet, ParamVars, Tape, Var};

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub features: Arc<FeatureMatrix>,
    /// 1 for real enrollment entries, 0 for padding.
    pub use_weight: f64,
}

impl Utterance {
    pub fn new(id: impl Into<String>, speaker: impl Into<String>, features: FeatureMatrix) -> Self {
        Utterance { id: id.into(), speaker: speaker.into(), features: Arc::new(features), use_weight: 1.0 }
    }

    pub fn masked(&self) -> Utterance {
        Utterance { use_weight: 0.0, ..self.clone() }
    }
}

/// Utterances with a dense speaker index (order of first appearance).
#[derive(Clone, Debug)]
pub struct Dataset {
    utterances: Vec<Utterance>,
    speakers: Vec<String>,
    speaker_index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let mut speakers = Vec::new();
        let mut speaker_index = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        for u in &utterances {
            if !seen.insert(u.id.clone()) {
                return Err(Error::Contract(format!("duplicate utterance id {}", u.id)));
            }
            speaker_index.entry(u.speaker.clone()).or_insert_with(|| {
                speakers.push(u.speaker.clone());
                speakers.len() - 1
            });
        }
        Ok(Dataset { utterances, speakers, speaker_index })
    }

    pub fn load(entries: &[ManifestEntry]) -> Result<Self> {
        let utts = entries
            .iter()
            .map(|e| Ok(Utterance::new(&e.utterance, &e.speaker, read_fbnk_file(&e.path)?)))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(utts)
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn speaker_index(&self, speaker: &str) -> Option<usize> {
        self.speaker_index.get(speaker).copied()
    }

    pub fn feature_dims(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.dims())
    }

    /// Utterances of each speaker, in dataset order.
    pub fn by_speaker(&self) -> Vec<Vec<&Utterance>> {
        let mut out = vec![Vec::new(); self.speakers.len()];
        for u in &self.utterances {
            out[self.speaker_index[&u.speaker]].push(u);
        }
        out
    }
}

/// Endless stream of same-speaker groups, reshuffled every epoch.
pub struct SpeakerGroupStream {
    groups: Vec<Vec<Utterance>>,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl SpeakerGroupStream {
    pub fn new(dataset: &Dataset, group_size: usize, rng: &mut Rng) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::Config("group size must be positive".into()));
        }
        let groups: Vec<Vec<Utterance>> = dataset
            .by_speaker()
            .into_iter()
            .flat_map(|utts| utts.chunks(group_size).map(|c| c.iter().map(|&u| u.clone()).collect()).collect::<Vec<_>>())
            .collect();
        if groups.is_empty() {
            return Err(Error::EmptyInput("dataset has no utterances".into()));
        }
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(rng);
        Ok(SpeakerGroupStream { groups, order, cursor: 0, epoch: 0 })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_group(&mut self, rng: &mut Rng) -> Vec<Utterance> {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
            self.epoch += 1;
            info!("speaker stream wrapped, starting epoch {}", self.epoch);
        }
        let g = self.groups[self.order[self.cursor]].clone();
        self.cursor += 1;
        g
    }
}

/// FIFO buffer of speaker groups bounded by a total utterance count.
#[derive(Clone, Debug)]
pub struct UtterancePool {
    groups: VecDeque<Vec<Utterance>>,
    capacity: usize,
    size: usize,
}

impl UtterancePool {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("pool capacity must be positive".into()));
        }
        Ok(UtterancePool { groups: VecDeque::new(), capacity, size: 0 })
    }

    /// Fills the pool until the next group would overflow it, or until every
    /// group of the stream's first epoch is in.
    pub fn fill(&mut self, stream: &mut SpeakerGroupStream, rng: &mut Rng) {
        let mut taken = 0;
        while taken < stream.groups.len() {
            let next = stream.groups[stream.order[stream.cursor % stream.order.len()]].len();
            if self.size + next > self.capacity && !self.groups.is_empty() {
                break;
            }
            self.insert(stream.next_group(rng));
            taken += 1;
        }
    }

    /// Inserts a group, evicting the oldest groups as needed.
    pub fn insert(&mut self, mut group: Vec<Utterance>) {
        if group.is_empty() {
            return;
        }
        group.truncate(self.capacity);
        while self.size + group.len() > self.capacity {
            let old = self.groups.pop_front().expect("size > 0 implies a group");
            self.size -= old.len();
        }
        self.size += group.len();
        self.groups.push_back(group);
    }

    pub fn refresh(&mut self, stream: &mut SpeakerGroupStream, rng: &mut Rng) {
        self.insert(stream.next_group(rng));
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn groups(&self) -> impl Iterator<Item = &[Utterance]> {
        self.groups.iter().map(Vec::as_slice)
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.groups.iter().flatten()
    }
}

#[derive(Clone, Debug)]
pub struct TrainingTrial {
    pub test: Utterance,
    pub enrollment: Vec<Utterance>,
    pub target: VerificationTarget,
}

impl TrainingTrial {
    pub fn weights(&self) -> Vec<f64> {
        self.enrollment.iter().map(|u| u.use_weight).collect()
    }
}

/// Draws one trial from the pool.
///
/// Accept trials use up to `n` other utterances of the test speaker, reject
/// trials up to `n` utterances of one other speaker; missing entries are
/// padded with weight-0 copies.
pub fn sample_trial(pool: &UtterancePool, n: usize, target_ratio: f64, rng: &mut Rng) -> Result<TrainingTrial> {
    if n == 0 {
        return Err(Error::Config("speaker model size must be at least 1".into()));
    }
    let utts: Vec<&Utterance> = pool.utterances().collect();
    let mut by_speaker: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, u) in utts.iter().enumerate() {
        let k = *index.entry(&u.speaker).or_insert_with(|| {
            by_speaker.push((&u.speaker, Vec::new()));
            by_speaker.len() - 1
        });
        by_speaker[k].1.push(i);
    }
    if by_speaker.len() < 2 && target_ratio < 1.0 {
        return Err(Error::Sampling(format!("pool holds {} speaker(s); reject trials need two", by_speaker.len())));
    }

    let accept = rng.random::<f64>() < target_ratio;
    let (test, members, target) = if accept {
        let eligible: Vec<usize> = (0..utts.len()).filter(|&i| by_speaker[index[utts[i].speaker.as_str()]].1.len() >= 2).collect();
        if eligible.is_empty() {
            return Err(Error::Sampling("no speaker in the pool has two utterances".into()));
        }
        let t = eligible[rng.random_range(0..eligible.len())];
        let others: Vec<usize> = by_speaker[index[utts[t].speaker.as_str()]].1.iter().copied().filter(|&i| i != t).collect();
        (t, others, VerificationTarget::Accept)
    } else {
        let t = rng.random_range(0..utts.len());
        let own = index[utts[t].speaker.as_str()];
        let mut k = rng.random_range(0..by_speaker.len() - 1);
        if k >= own {
            k += 1;
        }
        (t, by_speaker[k].1.clone(), VerificationTarget::Reject)
    };

    let take = n.min(members.len());
    let mut enrollment: Vec<Utterance> = sample(rng, members.len(), take).into_iter().map(|i| utts[members[i]].clone()).collect();
    let pad = enrollment[0].masked();
    enrollment.resize(n, pad);
    Ok(TrainingTrial { test: utts[test].clone(), enrollment, target })
}

/// `sum_i w_i r_i / sum_i w_i` over plain vectors.
pub fn training_speaker_model(reps: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if reps.len() != weights.len() || reps.is_empty() {
        return Err(Error::dim("training_speaker_model", format!("{} reps, {} weights", reps.len(), weights.len())));
    }
    let total: f64 = weights.iter().filter(|&&w| w != 0.0).sum();
    if total == 0.0 {
        return Err(Error::Degenerate("all enrollment weights are zero".into()));
    }
    let mut acc = vec![0.0; reps[0].len()];
    for (r, &w) in reps.iter().zip(weights) {
        if r.len() != acc.len() {
            return Err(Error::dim("training_speaker_model", format!("rep of length {} vs {}", r.len(), acc.len())));
        }
        if w != 0.0 {
            acc.iter_mut().zip(r).for_each(|(a, x)| *a += w * x);
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(acc)
}

/// Builds the end-to-end loss of one trial on `tape`. Returns `(score, loss)`.
pub fn trial_loss(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    network: &Network,
    head: &E2eHead,
    trial: &TrainingTrial,
) -> Result<(Var, Var)> {
    let f = network.represent(tape, vars, &trial.test.features)?;
    let reps = trial
        .enrollment
        .iter()
        .map(|u| network.represent(tape, vars, &u.features))
        .collect::<Result<Vec<_>>>()?;
    let model = tape.weighted_mean(&reps, &trial.weights())?;
    head.loss(tape, vars, f, model, trial.target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    EndToEnd,
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub network: NetworkConfig,
    /// Enrollment utterances per training trial (N).
    pub speaker_model_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub seed: u64,
    /// Fraction of accept trials.
    pub target_ratio: f64,
    pub pool_capacity: usize,
    pub refresh_period: usize,
    pub group_size: usize,
    /// Inverted-dropout rate on the representation, softmax training only.
    pub dropout: Option<f64>,
    /// Candidate count for sampled softmax; `None` uses the full softmax.
    pub sampled_candidates: Option<usize>,
    pub e2e_init_weight: f64,
    pub e2e_init_bias: f64,
}

impl TrainConfig {
    pub fn new(loss: LossKind, network: NetworkConfig) -> Self {
        TrainConfig {
            loss,
            network,
            speaker_model_size: 5,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 2000,
            seed: 0,
            target_ratio: 0.5,
            pool_capacity: 1024,
            refresh_period: 64,
            group_size: 10,
            dropout: None,
            sampled_candidates: None,
            e2e_init_weight: E2E_INIT_WEIGHT,
            e2e_init_bias: E2E_INIT_BIAS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.speaker_model_size == 0 {
            return bad("speaker_model_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.target_ratio) {
            return bad("target_ratio must be in [0, 1]");
        }
        if self.refresh_period == 0 || self.pool_capacity == 0 || self.group_size == 0 {
            return bad("pool capacity, refresh period and group size must be positive");
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout must be in [0, 1)");
            }
        }
        if self.sampled_candidates == Some(0) {
            return bad("sampled_candidates must be at least 1");
        }
        Ok(())
    }
}

/// Per-step mean training loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step\tloss")?;
        for (step, loss) in &self.losses {
            writeln!(w, "{step}\t{loss:.10}")?;
        }
        Ok(())
    }

    /// Mean loss over the first / last `k` steps.
    pub fn head_mean(&self, k: usize) -> f64 {
        mean(self.losses.iter().take(k).map(|l| l.1))
    }

    pub fn tail_mean(&self, k: usize) -> f64 {
        mean(self.losses.iter().rev().take(k).map(|l| l.1))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// SGD with classical momentum: `v = mu v + g; p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: ParamGrads,
}

impl Sgd {
    pub fn new(params: &ParamSet, learning_rate: f64, momentum: f64) -> Self {
        Sgd { learning_rate, momentum, velocity: ParamGrads::zeros_like(params) }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) {
        self.velocity.scale(self.momentum);
        self.velocity.add_assign(grads);
        for (p, (_, v)) in params.values_mut().zip(self.velocity.iter()) {
            p.scaled_add_assign(-self.learning_rate, v);
        }
    }
}

const POOL_STREAM: u64 = 1;
const TRIAL_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

fn diverged(step: usize) -> Error {
    Error::Diverged { step, last_good: step.checked_sub(1) }
}

/// Trains `init` (or a fresh network) with the end-to-end loss. A non-e2e
/// head on `init` is replaced by a fresh logistic head.
pub fn train_end_to_end(cfg: &TrainConfig, dataset: &Dataset, init: Option<&Model>) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if dataset.speakers().len() < 2 {
        return Err(Error::Contract("end-to-end training needs at least two speakers".into()));
    }
    let head_cfg = HeadConfig::E2e { w: cfg.e2e_init_weight, b: cfg.e2e_init_bias };
    let mut init_rng = derived(cfg.seed, INIT_STREAM, 0);
    let mut model = match init {
        Some(m) if matches!(m.head, Head::E2e(_)) => m.clone(),
        Some(m) => m.with_head(&head_cfg, &mut init_rng)?,
        None => Model::new(&cfg.network, &head_cfg, &mut init_rng)?,
    };
    let head = model.e2e_head().expect("e2e head").clone();

    let mut pool_rng = derived(cfg.seed, POOL_STREAM, 0);
    let mut trial_rng = derived(cfg.seed, TRIAL_STREAM, 0);
    let mut stream = SpeakerGroupStream::new(dataset, cfg.group_size, &mut pool_rng)?;
    let mut pool = UtterancePool::new(cfg.pool_capacity)?;
    pool.fill(&mut stream, &mut pool_rng);

    let mut sgd = Sgd::new(&model.params, cfg.learning_rate, cfg.momentum);
    let mut log = TrainLog::default();
    let inv_batch = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        if step > 0 && step % cfg.refresh_period == 0 {
            pool.refresh(&mut stream, &mut pool_rng);
        }
        let trials = (0..cfg.batch_size)
            .map(|_| sample_trial(&pool, cfg.speaker_model_size, cfg.target_ratio, &mut trial_rng))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = ParamGrads::zeros_like(&model.params);
        let mut loss_sum = 0.0;
        for trial in &trials {
            let mut tape = Tape::new();
            let vars = tape.load_params(&model.params);
            let (_, loss) = trial_loss(&mut tape, &vars, &model.network, &head, trial)?;
            loss_sum += tape.value(loss).data()[0];
            tape.backward(loss)?.accumulate_params(&vars, inv_batch, &mut grads);
        }
        let loss = loss_sum * inv_batch;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(diverged(step));
        }
        sgd.step(&mut model.params, &grads);
        if !model.params.is_finite() {
            return Err(diverged(step));
        }
        log.losses.push((step, loss));
        if step % 100 == 0 {
            debug!("step {step} loss {loss:.6}");
        }
    }
    Ok((model, log))
}

/// Per-utterance softmax over training speakers, or sampled softmax when
/// configured; frame-level networks get one softmax term per frame.
pub fn train_softmax(cfg: &TrainConfig, dataset: &Dataset, init: Option<&Model>) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let speakers = dataset.speakers().len();
    if speakers < 2 {
        return Err(Error::Contract("softmax training needs at least two speakers".into()));
    }
    let head_cfg = HeadConfig::Softmax { speakers };
    let mut init_rng = derived(cfg.seed, INIT_STREAM, 0);
    let mut model = match init {
        Some(m) if matches!(&m.head, Head::Softmax(h) if h.speakers() == speakers) => m.clone(),
        Some(m) => m.with_head(&head_cfg, &mut init_rng)?,
        None => Model::new(&cfg.network, &head_cfg, &mut init_rng)?,
    };
    let Head::Softmax(head) = model.head.clone() else { unreachable!() };

    let mut rng = derived(cfg.seed, TRIAL_STREAM, 0);
    let utts = dataset.utterances();
    let mut sgd = Sgd::new(&model.params, cfg.learning_rate, cfg.momentum);
    let mut log = TrainLog::default();
    let inv_batch = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut grads = ParamGrads::zeros_like(&model.params);
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let u = &utts[rng.random_range(0..utts.len())];
            let spk = dataset.speaker_index(&u.speaker).expect("indexed");
            let mut tape = Tape::new();
            let vars = tape.load_params(&model.params);
            let outputs = match &model.network {
                Network::FrameDnn(f) => f.frame_outputs(&mut tape, &vars, &u.features)?,
                net => vec![net.represent(&mut tape, &vars, &u.features)?],
            };
            let mut terms = Vec::with_capacity(outputs.len());
            for y in outputs {
                let y = match cfg.dropout {
                    Some(p) if p > 0.0 => apply_dropout(&mut tape, y, p, &mut rng)?,
                    _ => y,
                };
                terms.push(match cfg.sampled_candidates {
                    Some(k) => {
                        let cands = sample_candidates(speakers, spk, k, &mut rng)?;
                        head.sampled_loss(&mut tape, &vars, y, spk, &cands)?
                    }
                    None => head.loss(&mut tape, &vars, y, spk)?,
                });
            }
            let loss = tape.mean(&terms)?;
            loss_sum += tape.value(loss).data()[0];
            tape.backward(loss)?.accumulate_params(&vars, inv_batch, &mut grads);
        }
        let loss = loss_sum * inv_batch;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(diverged(step));
        }
        sgd.step(&mut model.params, &grads);
        log.losses.push((step, loss));
        if step % 100 == 0 {
            debug!("step {step} loss {loss:.6}");
        }
    }
    Ok((model, log))
}

/// Inverted dropout: zero each unit with probability `rate`, scale the rest
/// by `1 / (1 - rate)`.
fn apply_dropout(tape: &mut Tape<'_>, y: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
    let keep = 1.0 / (1.0 - rate);
    let n = tape.value(y).rows();
    let mask = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    let m = tape.constant(Matrix::column(mask));
    tape.mul(y, m)
}

/// Dispatches on `cfg.loss`.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, init: Option<&Model>) -> Result<(Model, TrainLog)> {
    match cfg.loss {
        LossKind::EndToEnd => train_end_to_end(cfg, dataset, init),
        LossKind::Softmax => train_softmax(cfg, dataset, init),
    }
}

/// One end-to-end model per speaker model size, all from the same seed;
/// `evaluate` maps a trained model to its held-out EER. Rows ascend by size.
pub fn sweep_model_size(
    cfg: &TrainConfig,
    dataset: &Dataset,
    sizes: &[usize],
    init: Option<&Model>,
    mut evaluate: impl FnMut(&Model) -> Result<f64>,
) -> Result<Vec<(usize, f64)>> {
    if sizes.is_empty() {
        return Err(Error::Contract("no speaker model sizes given".into()));
    }
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|n| {
            let run = TrainConfig { speaker_model_size: n, loss: LossKind::EndToEnd, ..cfg.clone() };
            let (model, _) = train_end_to_end(&run, dataset, init)?;
            let eer = evaluate(&model)?;
            info!("speaker model size {n}: eer {eer:.4}");
            Ok((n, eer))
        })
        .collect()
}

pub fn write_sweep_tsv<W: Write>(mut w: W, rows: &[(usize, f64)]) -> Result<()> {
    writeln!(w, "size\teer_raw")?;
    for (n, eer) in rows {
        writeln!(w, "{n}\t{eer:.6}")?;
    }
    Ok(())
}
