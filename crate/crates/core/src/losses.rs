//! Training objectives and the cosine scoring function.
//!
//! The softmax head classifies the last hidden activation `y` over the
//! training speakers. The end-to-end head maps a cosine score `s` to
//! `p(accept) = sigmoid(w s + b)`; its decision threshold on `s` is `-b/w`.

use std::fmt;

use log::warn;
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::networks::glorot;
use crate::rng::Rng;
use crate::tensor::{sigmoid, Matrix, ParamId, ParamSet, ParamVars, Tape, Var, PROB_CLAMP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VerificationTarget {
    Accept,
    Reject,
}

impl VerificationTarget {
    pub fn is_accept(self) -> bool {
        self == VerificationTarget::Accept
    }
}

impl fmt::Display for VerificationTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerificationTarget::Accept => "accept",
            VerificationTarget::Reject => "reject",
        })
    }
}

/// `f.m / (|f| |m|)`.
pub fn cosine_similarity(f: &[f64], m: &[f64]) -> Result<f64> {
    if f.len() != m.len() {
        return Err(Error::dim("cosine_similarity", format!("{} vs {}", f.len(), m.len())));
    }
    let dot: f64 = f.iter().zip(m).map(|(a, b)| a * b).sum();
    let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nf == 0.0 || nm == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok(dot / (nf * nm))
}

/// `p(accept) = sigmoid(w s + b)`.
pub fn e2e_score(score: f64, w: f64, b: f64) -> f64 {
    sigmoid(w * score + b)
}

/// `-log p(target)` with `p` clamped to `[1e-12, 1 - 1e-12]`.
pub fn e2e_loss(p_accept: f64, target: VerificationTarget) -> f64 {
    let p = match target {
        VerificationTarget::Accept => p_accept,
        VerificationTarget::Reject => 1.0 - p_accept,
    };
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if clamped != p {
        warn!("probability {p:e} clamped to {clamped:e}");
    }
    -clamped.ln()
}

/// Per-speaker weight rows and biases over `speakers` training speakers.
#[derive(Clone, Debug)]
pub struct SoftmaxHead {
    weight: ParamId,
    bias: ParamId,
    speakers: usize,
}

impl SoftmaxHead {
    pub fn new(speakers: usize, dim: usize, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        if speakers == 0 || dim == 0 {
            return Err(Error::Config(format!("softmax head needs speakers and dim > 0, got {speakers}, {dim}")));
        }
        let weight = params.add("softmax.w", glorot(speakers, dim, rng));
        let bias = params.add("softmax.b", Matrix::zeros(speakers, 1));
        Ok(SoftmaxHead { weight, bias, speakers })
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// Cross-entropy of the true speaker over all speakers.
    pub fn loss(&self, tape: &mut Tape<'_>, vars: &ParamVars, y: Var, speaker: usize) -> Result<Var> {
        if speaker >= self.speakers {
            return Err(Error::Contract(format!("speaker index {speaker} out of range for {} speakers", self.speakers)));
        }
        let logits = tape.affine(y, vars.get(self.weight), vars.get(self.bias))?;
        tape.softmax_cross_entropy(logits, speaker)
    }

    /// Cross-entropy restricted to `candidates`, which must contain the true
    /// speaker.
    pub fn sampled_loss(
        &self,
        tape: &mut Tape<'_>,
        vars: &ParamVars,
        y: Var,
        speaker: usize,
        candidates: &[usize],
    ) -> Result<Var> {
        let pos = candidates
            .iter()
            .position(|&c| c == speaker)
            .ok_or_else(|| Error::Contract(format!("true speaker {speaker} missing from candidate set")))?;
        let w = tape.select_rows(vars.get(self.weight), candidates.to_vec())?;
        let b = tape.select_rows(vars.get(self.bias), candidates.to_vec())?;
        let logits = tape.affine(y, w, b)?;
        tape.softmax_cross_entropy(logits, pos)
    }
}

/// True speaker first, then up to `count - 1` impostors drawn uniformly
/// without replacement.
pub fn sample_candidates(speakers: usize, speaker: usize, count: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if speaker >= speakers || count == 0 {
        return Err(Error::Contract(format!("cannot sample {count} candidates for speaker {speaker} of {speakers}")));
    }
    let impostors = (count - 1).min(speakers - 1);
    let mut out = Vec::with_capacity(impostors + 1);
    out.push(speaker);
    out.extend(sample(rng, speakers - 1, impostors).into_iter().map(|i| if i >= speaker { i + 1 } else { i }));
    Ok(out)
}

/// Default logistic head initialization.
pub const E2E_INIT_WEIGHT: f64 = 10.0;
pub const E2E_INIT_BIAS: f64 = -5.0;

/// Scalar logistic regression on the cosine score.
#[derive(Clone, Debug)]
pub struct E2eHead {
    w: ParamId,
    b: ParamId,
}

impl E2eHead {
    pub fn new(params: &mut ParamSet, w: f64, b: f64) -> Result<Self> {
        if !w.is_finite() || !b.is_finite() {
            return Err(Error::Config(format!("logistic head parameters must be finite, got w={w}, b={b}")));
        }
        Ok(E2eHead { w: params.add("e2e.w", Matrix::scalar(w)), b: params.add("e2e.b", Matrix::scalar(b)) })
    }

    pub fn w_id(&self) -> ParamId {
        self.w
    }

    pub fn b_id(&self) -> ParamId {
        self.b
    }

    pub fn weight(&self, params: &ParamSet) -> f64 {
        params.get(self.w).data()[0]
    }

    pub fn bias(&self, params: &ParamSet) -> f64 {
        params.get(self.b).data()[0]
    }

    /// Score threshold `-b/w` where `p(accept) = 0.5`; `None` when `w = 0`.
    pub fn threshold(&self, params: &ParamSet) -> Option<f64> {
        let w = self.weight(params);
        (w != 0.0).then(|| -self.bias(params) / w)
    }

    pub fn p_accept(&self, params: &ParamSet, score: f64) -> f64 {
        e2e_score(score, self.weight(params), self.bias(params))
    }

    /// Cosine score of `f` against `model` and the end-to-end loss for
    /// `target`. Returns `(score, loss)`.
    pub fn loss(
        &self,
        tape: &mut Tape<'_>,
        vars: &ParamVars,
        f: Var,
        model: Var,
        target: VerificationTarget,
    ) -> Result<(Var, Var)> {
        let s = tape.cosine(f, model)?;
        let ws = tape.mul(vars.get(self.w), s)?;
        let z = tape.add(ws, vars.get(self.b))?;
        let loss = tape.logistic_loss(z, target.is_accept())?;
        Ok((s, loss))
    }
}
