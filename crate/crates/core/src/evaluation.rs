//! Equal error rate, DET operating points, t-norm and trial-list scoring.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::networks::Model;
use crate::scoring::SpeakerModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::Nontarget),
            other => Err(Error::format("trial list", format!("unknown label {other:?}"))),
        }
    }

    pub fn is_target(self) -> bool {
        self == TrialLabel::Target
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.is_target() { "target" } else { "nontarget" })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub trial_id: String,
    pub raw: f64,
    pub tnorm: Option<f64>,
    pub label: TrialLabel,
}

/// EER and the (interpolated) score threshold where it occurs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// One operating point: at `threshold`, scores `>= threshold` are accepted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn split_scores(scores: impl Iterator<Item = (f64, TrialLabel)>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tar = Vec::new();
    let mut non = Vec::new();
    for (s, l) in scores {
        if !s.is_finite() {
            return Err(Error::Contract(format!("non-finite score {s}")));
        }
        if l.is_target() {
            tar.push(s);
        } else {
            non.push(s);
        }
    }
    if tar.is_empty() || non.is_empty() {
        return Err(Error::Contract(format!("need both classes, got {} target and {} nontarget scores", tar.len(), non.len())));
    }
    Ok((tar, non))
}

/// Operating points at every distinct score, ascending, followed by one
/// point above the maximum (`threshold = +inf`, everything rejected).
pub fn det_points_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<Vec<DetPoint>> {
    let (tar, non) = split_scores(
        targets.iter().map(|&s| (s, TrialLabel::Target)).chain(nontargets.iter().map(|&s| (s, TrialLabel::Nontarget))),
    )?;
    let mut all: Vec<(f64, bool)> = tar.iter().map(|&s| (s, true)).chain(non.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let mut points = Vec::new();
    // counts of scores strictly below the current threshold
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        points.push(DetPoint { threshold: t, far: (nn - non_below as f64) / nn, frr: tar_below as f64 / nt });
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 });
    Ok(points)
}

/// EER by linear interpolation between the adjacent operating points where
/// `FRR - FAR` changes sign.
pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<Eer> {
    let pts = det_points_from_scores(targets, nontargets)?;
    let k = pts.iter().position(|p| p.frr >= p.far).expect("last point has frr 1 >= far 0");
    if k == 0 {
        return Ok(Eer { eer: pts[0].frr, threshold: pts[0].threshold });
    }
    let (a, b) = (pts[k - 1], pts[k]);
    let (da, db) = (a.frr - a.far, b.frr - b.far);
    let alpha = -da / (db - da);
    let eer = a.frr + alpha * (b.frr - a.frr);
    let hi = if b.threshold.is_finite() { b.threshold } else { a.threshold };
    Ok(Eer { eer, threshold: a.threshold + alpha * (hi - a.threshold) })
}

pub fn compute_eer(records: &[ScoreRecord]) -> Result<Eer> {
    let (tar, non) = split_scores(records.iter().map(|r| (r.raw, r.label)))?;
    eer_from_scores(&tar, &non)
}

/// EER of the normalized scores; every record must carry one.
pub fn compute_tnorm_eer(records: &[ScoreRecord]) -> Result<Eer> {
    let scores = records
        .iter()
        .map(|r| r.tnorm.map(|s| (s, r.label)).ok_or_else(|| Error::Contract(format!("trial {} has no normalized score", r.trial_id))))
        .collect::<Result<Vec<_>>>()?;
    let (tar, non) = split_scores(scores.into_iter())?;
    eer_from_scores(&tar, &non)
}

pub fn det_points(records: &[ScoreRecord]) -> Result<Vec<DetPoint>> {
    let (tar, non) = split_scores(records.iter().map(|r| (r.raw, r.label)))?;
    det_points_from_scores(&tar, &non)
}

pub fn write_det_tsv<W: Write>(mut w: W, points: &[DetPoint]) -> Result<()> {
    writeln!(w, "far\tfrr")?;
    for p in points {
        writeln!(w, "{:.8}\t{:.8}", p.far, p.frr)?;
    }
    Ok(())
}

/// Impostor models for test normalization.
#[derive(Clone, Debug)]
pub struct Cohort {
    models: Vec<SpeakerModel>,
}

impl Cohort {
    pub fn new(models: Vec<SpeakerModel>) -> Result<Self> {
        if models.len() < 2 {
            return Err(Error::Contract(format!("cohort needs at least 2 models, got {}", models.len())));
        }
        Ok(Cohort { models })
    }

    pub fn models(&self) -> &[SpeakerModel] {
        &self.models
    }

    pub fn scores(&self, test_rep: &[f64]) -> Result<Vec<f64>> {
        self.models.iter().map(|m| m.score(test_rep)).collect()
    }
}

/// `(raw - mean) / std` over `cohort_scores`, population standard deviation.
pub fn t_norm_with_scores(raw: f64, cohort_scores: &[f64]) -> Result<f64> {
    if cohort_scores.len() < 2 {
        return Err(Error::Contract("t-norm needs at least 2 cohort scores".into()));
    }
    let n = cohort_scores.len() as f64;
    let mu = cohort_scores.iter().sum::<f64>() / n;
    let var = cohort_scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Degenerate("cohort scores have zero spread".into()));
    }
    Ok((raw - mu) / sigma)
}

pub fn t_norm(raw: f64, test_rep: &[f64], cohort: &Cohort) -> Result<f64> {
    t_norm_with_scores(raw, &cohort.scores(test_rep)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub id: String,
    pub test: String,
    pub claimed: String,
    pub label: TrialLabel,
}

/// `trial_id<TAB>test_utterance_id<TAB>claimed_speaker_id<TAB>label`.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let [id, test, claimed, label] = f[..] else {
            return Err(Error::format("trial list", format!("line {}: expected 4 tab-separated fields", n + 1)));
        };
        out.push(Trial { id: id.into(), test: test.into(), claimed: claimed.into(), label: TrialLabel::parse(label)? });
    }
    Ok(out)
}

pub fn write_trials<W: Write>(mut w: W, trials: &[Trial]) -> Result<()> {
    for t in trials {
        writeln!(w, "{}\t{}\t{}\t{}", t.id, t.test, t.claimed, t.label)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub records: Vec<ScoreRecord>,
    /// Trials skipped because the claimed speaker or test utterance is unknown.
    pub skipped: Vec<String>,
    pub eer_raw: Eer,
    pub eer_tnorm: Option<Eer>,
}

impl EvalReport {
    /// Header, then `trial_id<TAB>raw<TAB>tnorm-or-dash<TAB>label` per trial.
    pub fn write_scores<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "trial\traw\ttnorm\tlabel")?;
        for r in &self.records {
            let tn = r.tnorm.map_or_else(|| "-".to_string(), |s| format!("{s:.8}"));
            writeln!(w, "{}\t{:.8}\t{}\t{}", r.trial_id, r.raw, tn, r.label)?;
        }
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "eer_raw={:.6}", self.eer_raw.eer)?;
        match &self.eer_tnorm {
            Some(e) => writeln!(w, "eer_tnorm={:.6}", e.eer)?,
            None => writeln!(w, "eer_tnorm=-")?,
        }
        writeln!(w, "threshold={:.6}", self.eer_raw.threshold)?;
        writeln!(w, "n_trials={}", self.records.len())?;
        if !self.skipped.is_empty() {
            writeln!(w, "skipped={}", self.skipped.join(","))?;
        }
        Ok(())
    }
}

/// Scores every trial (test representations computed once each), in trial
/// order. Trials naming unknown speakers or utterances are skipped and
/// listed.
pub fn evaluate(
    model: &Model,
    speakers: &HashMap<String, SpeakerModel>,
    tests: &HashMap<String, FeatureMatrix>,
    trials: &[Trial],
    cohort: Option<&Cohort>,
) -> Result<EvalReport> {
    if trials.is_empty() {
        return Err(Error::Contract("empty trial list".into()));
    }
    let mut reps: HashMap<&str, (Vec<f64>, Option<Vec<f64>>)> = HashMap::new();
    let mut records = Vec::with_capacity(trials.len());
    let mut skipped = Vec::new();
    for t in trials {
        let (Some(spk), Some(x)) = (speakers.get(&t.claimed), tests.get(&t.test)) else {
            skipped.push(t.id.clone());
            continue;
        };
        if !reps.contains_key(t.test.as_str()) {
            let rep = model.representation(x)?;
            let cs = cohort.map(|c| c.scores(&rep)).transpose()?;
            reps.insert(&t.test, (rep, cs));
        }
        let (rep, cs) = &reps[t.test.as_str()];
        let raw = spk.score(rep)?;
        let tnorm = cs.as_ref().map(|cs| t_norm_with_scores(raw, cs)).transpose()?;
        records.push(ScoreRecord { trial_id: t.id.clone(), raw, tnorm, label: t.label });
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} trial(s) with unknown speaker or utterance", skipped.len());
    }
    let eer_raw = compute_eer(&records)?;
    let eer_tnorm = cohort.map(|_| compute_tnorm_eer(&records)).transpose()?;
    Ok(EvalReport { records, skipped, eer_raw, eer_tnorm })
}
