//! Seeded synthetic speakers and utterances with a known latent identity.
//!
//! Frame `t` of an utterance by a speaker with unit latent `v` is
//! `(A v) * pattern(t) + noise * (z_t + session_ratio * S u)`, where `A` and
//! `S` are fixed random mixing maps, `pattern` is a smooth envelope shared by
//! every speaker, `z_t` is iid standard normal and `u` is a standard normal
//! latent drawn once per utterance.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::evaluation::{eer_from_scores, evaluate, Cohort, EvalReport, Trial, TrialLabel};
use crate::features::{write_fbnk_file, FeatureMatrix};
use crate::losses::cosine_similarity;
use crate::manifest::{write_manifest, ManifestEntry};
use crate::networks::Model;
use crate::rng::{derived, Rng};
use crate::scoring::{enroll, SpeakerModel};
use crate::training::{Dataset, Utterance};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_speakers: usize,
    pub heldout_speakers: usize,
    pub utterances_per_speaker: usize,
    pub frames: usize,
    pub dims: usize,
    pub latent_dim: usize,
    pub noise: f64,
    /// Per-utterance session variability, relative to `noise`.
    pub session_ratio: f64,
    pub session_dim: usize,
    /// Leading utterances of each held-out speaker used for enrollment.
    pub enroll_per_speaker: usize,
    /// Training speakers whose enrollment models form the t-norm cohort.
    pub cohort_speakers: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_speakers: 64,
            heldout_speakers: 16,
            utterances_per_speaker: 20,
            frames: 80,
            dims: 8,
            latent_dim: 4,
            noise: 0.3,
            session_ratio: 6.0,
            session_dim: 4,
            enroll_per_speaker: 5,
            cohort_speakers: 20,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.train_speakers, self.heldout_speakers, self.utterances_per_speaker, self.frames, self.dims, self.latent_dim, self.session_dim];
        if counts.contains(&0) {
            return Err(Error::Config(format!("synthetic corpus sizes must be positive: {self:?}")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.session_ratio >= 0.0 && self.session_ratio.is_finite()) {
            return Err(Error::Config("noise and session_ratio must be finite and non-negative".into()));
        }
        if self.enroll_per_speaker == 0 || self.enroll_per_speaker >= self.utterances_per_speaker {
            return Err(Error::Config(format!(
                "enroll_per_speaker must be in 1..{}, got {}",
                self.utterances_per_speaker, self.enroll_per_speaker
            )));
        }
        if self.cohort_speakers > self.train_speakers {
            return Err(Error::Config("cohort_speakers exceeds train_speakers".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSpeaker {
    pub id: String,
    pub latent: Vec<f64>,
    pub heldout: bool,
}

#[derive(Clone, Debug)]
pub struct SyntheticUtterance {
    pub id: String,
    pub speaker: usize,
    /// Position within the speaker's utterances.
    pub index: usize,
    pub features: FeatureMatrix,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    pub speakers: Vec<SyntheticSpeaker>,
    pub utterances: Vec<SyntheticUtterance>,
}

const MIXING_STREAM: u64 = 10;
const SPEAKER_STREAM: u64 = 11;
const UTTERANCE_STREAM: u64 = 12;

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Row-major `rows x cols` matrix with entries `N(0, 1/cols)`.
fn mixing(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
    let s = 1.0 / (cols as f64).sqrt();
    (0..rows * cols).map(|_| s * normal(rng)).collect()
}

fn apply(m: &[f64], x: &[f64]) -> Vec<f64> {
    m.chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let (d, l, t_len) = (cfg.dims, cfg.latent_dim, cfg.frames);
    let mut rng = derived(cfg.seed, MIXING_STREAM, 0);
    let a = mixing(d, l, &mut rng);
    let s = mixing(d, cfg.session_dim, &mut rng);
    let freq: Vec<f64> = (0..d).map(|_| rng.random_range(1..=2) as f64).collect();
    let phase: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let pattern = |t: usize, k: usize| 1.0 + 0.5 * (2.0 * PI * freq[k] * t as f64 / t_len as f64 + phase[k]).sin();

    let total = cfg.train_speakers + cfg.heldout_speakers;
    let width = total.saturating_sub(1).to_string().len().max(3);
    let mut speakers = Vec::with_capacity(total);
    let mut utterances = Vec::with_capacity(total * cfg.utterances_per_speaker);
    for sp in 0..total {
        let mut srng = derived(cfg.seed, SPEAKER_STREAM, sp as u64);
        let latent = loop {
            let v: Vec<f64> = (0..l).map(|_| normal(&mut srng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect::<Vec<_>>();
            }
        };
        let id = format!("spk{sp:0width$}");
        let mean = apply(&a, &latent);
        for ui in 0..cfg.utterances_per_speaker {
            let mut urng = derived(cfg.seed, UTTERANCE_STREAM, (sp * cfg.utterances_per_speaker + ui) as u64);
            let u: Vec<f64> = (0..cfg.session_dim).map(|_| normal(&mut urng)).collect();
            let session = apply(&s, &u);
            let mut values = Vec::with_capacity(t_len * d);
            for t in 0..t_len {
                for k in 0..d {
                    let eps = cfg.noise * (normal(&mut urng) + cfg.session_ratio * session[k]);
                    // stored as f32 on disk; keep memory and disk identical
                    values.push((mean[k] * pattern(t, k) + eps) as f32 as f64);
                }
            }
            utterances.push(SyntheticUtterance {
                id: format!("{id}_u{ui:02}"),
                speaker: sp,
                index: ui,
                features: FeatureMatrix::new(t_len, d, values)?,
            });
        }
        speakers.push(SyntheticSpeaker { id, latent, heldout: sp >= cfg.train_speakers });
    }
    Ok(SyntheticCorpus { config: cfg.clone(), speakers, utterances })
}

impl SyntheticCorpus {
    fn utterance(&self, u: &SyntheticUtterance) -> Utterance {
        Utterance::new(&u.id, &self.speakers[u.speaker].id, u.features.clone())
    }

    pub fn train_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.utterances.iter().filter(|u| !self.speakers[u.speaker].heldout).map(|u| self.utterance(u)).collect())
    }

    fn is_enroll(&self, u: &SyntheticUtterance) -> bool {
        u.index < self.config.enroll_per_speaker
    }

    /// Enrollment utterances of every held-out speaker, in speaker order.
    pub fn enrollments(&self) -> Vec<(String, Vec<&FeatureMatrix>)> {
        self.grouped(|u| self.speakers[u.speaker].heldout && self.is_enroll(u))
    }

    /// Enrollment utterances of the first `cohort_speakers` training speakers.
    pub fn cohort_enrollments(&self) -> Vec<(String, Vec<&FeatureMatrix>)> {
        self.grouped(|u| u.speaker < self.config.cohort_speakers && self.is_enroll(u))
    }

    fn grouped(&self, keep: impl Fn(&SyntheticUtterance) -> bool) -> Vec<(String, Vec<&FeatureMatrix>)> {
        let mut out: Vec<(String, Vec<&FeatureMatrix>)> = Vec::new();
        for u in self.utterances.iter().filter(|u| keep(u)) {
            let id = &self.speakers[u.speaker].id;
            match out.last_mut() {
                Some((s, v)) if s == id => v.push(&u.features),
                _ => out.push((id.clone(), vec![&u.features])),
            }
        }
        out
    }

    /// Held-out test utterances (everything not used for enrollment).
    pub fn tests(&self) -> HashMap<String, FeatureMatrix> {
        self.test_utterances().map(|u| (u.id.clone(), u.features.clone())).collect()
    }

    fn test_utterances(&self) -> impl Iterator<Item = &SyntheticUtterance> {
        self.utterances.iter().filter(|u| self.speakers[u.speaker].heldout && !self.is_enroll(u))
    }

    /// Every held-out test utterance against every held-out speaker.
    pub fn trials(&self) -> Vec<Trial> {
        let heldout: Vec<usize> = (0..self.speakers.len()).filter(|&s| self.speakers[s].heldout).collect();
        let mut out = Vec::new();
        for u in self.test_utterances() {
            for &s in &heldout {
                out.push(Trial {
                    id: format!("t{:06}", out.len()),
                    test: u.id.clone(),
                    claimed: self.speakers[s].id.clone(),
                    label: if s == u.speaker { TrialLabel::Target } else { TrialLabel::Nontarget },
                });
            }
        }
        out
    }

    /// Writes `features/*.fbnk` and the manifests `train.tsv`, `heldout.tsv`,
    /// `enroll.tsv`, `test.tsv`, `cohort.tsv` and the trial list `trials.tsv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let feats = dir.join("features");
        fs::create_dir_all(&feats)?;
        let mut lists: HashMap<&str, Vec<ManifestEntry>> = HashMap::new();
        for u in &self.utterances {
            let path = feats.join(format!("{}.fbnk", u.id));
            write_fbnk_file(&path, &u.features)?;
            let spk = &self.speakers[u.speaker];
            let entry = ManifestEntry { utterance: u.id.clone(), speaker: spk.id.clone(), path };
            let mut push = |name| lists.entry(name).or_default().push(entry.clone());
            if spk.heldout {
                push("heldout");
                push(if self.is_enroll(u) { "enroll" } else { "test" });
            } else {
                push("train");
                if u.speaker < self.config.cohort_speakers && self.is_enroll(u) {
                    push("cohort");
                }
            }
        }
        for name in ["train", "heldout", "enroll", "test", "cohort"] {
            write_manifest(&dir.join(format!("{name}.tsv")), lists.get(name).map_or(&[][..], Vec::as_slice), dir)?;
        }
        let mut trials = Vec::new();
        crate::evaluation::write_trials(&mut trials, &self.trials())?;
        fs::write(dir.join("trials.tsv"), trials)?;
        Ok(())
    }

    /// Enrolls every held-out speaker with `model`, scores the full trial
    /// list and, when `tnorm` is set, normalizes against the cohort.
    pub fn evaluate(&self, model: &Model, tnorm: bool) -> Result<EvalReport> {
        let enroll_all = |groups: Vec<(String, Vec<&FeatureMatrix>)>| {
            groups
                .into_iter()
                .map(|(id, utts)| enroll(model, &id, &utts, usize::MAX))
                .collect::<Result<Vec<SpeakerModel>>>()
        };
        let speakers = enroll_all(self.enrollments())?.into_iter().map(|m| (m.speaker.clone(), m)).collect();
        let cohort = if tnorm { Some(Cohort::new(enroll_all(self.cohort_enrollments())?)?) } else { None };
        evaluate(model, &speakers, &self.tests(), &self.trials(), cohort.as_ref())
    }

    /// EER of trials scored by the cosine between the test utterance's true
    /// latent and the claimed speaker's (averaged) latent.
    pub fn oracle_eer(&self, trials: &[Trial]) -> Result<f64> {
        let speaker_of: HashMap<&str, usize> = self.utterances.iter().map(|u| (u.id.as_str(), u.speaker)).collect();
        let by_id: HashMap<&str, usize> = self.speakers.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        let (mut tar, mut non) = (Vec::new(), Vec::new());
        for t in trials {
            let test = *speaker_of.get(t.test.as_str()).ok_or_else(|| Error::UnknownId(t.test.clone()))?;
            let claimed = *by_id.get(t.claimed.as_str()).ok_or_else(|| Error::UnknownId(t.claimed.clone()))?;
            let s = cosine_similarity(&self.speakers[test].latent, &self.speakers[claimed].latent)?;
            if t.label.is_target() {
                tar.push(s);
            } else {
                non.push(s);
            }
        }
        Ok(eer_from_scores(&tar, &non)?.eer)
    }
}
