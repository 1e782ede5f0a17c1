//! Enrollment and verification against a frozen model.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::losses::cosine_similarity;
use crate::networks::Model;

/// Default cap on enrollment utterances per speaker.
pub const DEFAULT_MAX_ENROLLMENT: usize = 9;

pub const SPEAKER_MAGIC: &[u8; 6] = b"SVSPK1";

/// Raw (unnormalized) average of a speaker's enrollment representations.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerModel {
    pub speaker: String,
    pub vector: Vec<f64>,
    pub count: usize,
}

impl SpeakerModel {
    pub fn from_representations(speaker: impl Into<String>, reps: &[Vec<f64>]) -> Result<Self> {
        let speaker = speaker.into();
        let Some(first) = reps.first() else {
            return Err(Error::Contract(format!("speaker {speaker} has no enrollment utterances")));
        };
        let mut vector = vec![0.0; first.len()];
        for r in reps {
            if r.len() != vector.len() {
                return Err(Error::dim("enroll", format!("representation of length {} vs {}", r.len(), vector.len())));
            }
            vector.iter_mut().zip(r).for_each(|(a, x)| *a += x);
        }
        let n = reps.len() as f64;
        vector.iter_mut().for_each(|a| *a /= n);
        let model = SpeakerModel { speaker, vector, count: reps.len() };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Contract(format!("speaker {} has count 0", self.speaker)));
        }
        if !self.vector.iter().all(|v| v.is_finite()) || self.vector.iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate(format!("speaker model for {} has zero norm", self.speaker)));
        }
        Ok(())
    }

    pub fn score(&self, rep: &[f64]) -> Result<f64> {
        cosine_similarity(rep, &self.vector)
    }
}

/// Averages the representations of `utterances` (at most `max_utterances`).
pub fn enroll(model: &Model, speaker: &str, utterances: &[&FeatureMatrix], max_utterances: usize) -> Result<SpeakerModel> {
    if utterances.is_empty() {
        return Err(Error::Contract(format!("speaker {speaker} has no enrollment utterances")));
    }
    if utterances.len() > max_utterances {
        return Err(Error::Contract(format!(
            "speaker {speaker} has {} enrollment utterances, at most {max_utterances} allowed",
            utterances.len()
        )));
    }
    let reps = utterances.iter().map(|x| model.representation(x)).collect::<Result<Vec<_>>>()?;
    SpeakerModel::from_representations(speaker, &reps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Accept,
    Reject,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Accept => "accept",
            Outcome::Reject => "reject",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub score: f64,
    pub threshold: f64,
    pub outcome: Outcome,
}

impl Decision {
    pub fn new(score: f64, threshold: f64) -> Self {
        let outcome = if score >= threshold { Outcome::Accept } else { Outcome::Reject };
        Decision { score, threshold, outcome }
    }
}

/// Scores `test` against `speaker`; the threshold defaults to the model's
/// logistic boundary `-b/w`.
pub fn verify(model: &Model, speaker: &SpeakerModel, test: &FeatureMatrix, threshold: Option<f64>) -> Result<Decision> {
    speaker.validate()?;
    let threshold = match threshold {
        Some(t) => t,
        None => model
            .threshold()
            .ok_or_else(|| Error::Contract("no threshold given and the model has no usable logistic head".into()))?,
    };
    let rep = model.representation(test)?;
    Ok(Decision::new(speaker.score(&rep)?, threshold))
}

const WHAT: &str = "speaker model";

/// `SVSPK1`, u32 id length, id bytes, u32 count, u32 dim, f32 vector
/// (little-endian).
pub fn write_speaker_model<W: Write>(mut w: W, m: &SpeakerModel) -> Result<()> {
    let u32_of = |v: usize| u32::try_from(v).map_err(|_| Error::format(WHAT, format!("{v} does not fit in u32")));
    w.write_all(SPEAKER_MAGIC)?;
    w.write_all(&u32_of(m.speaker.len())?.to_le_bytes())?;
    w.write_all(m.speaker.as_bytes())?;
    w.write_all(&u32_of(m.count)?.to_le_bytes())?;
    w.write_all(&u32_of(m.vector.len())?.to_le_bytes())?;
    for &v in &m.vector {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_speaker_model<R: Read>(mut r: R) -> Result<SpeakerModel> {
    let mut take = |n: usize, field: &str| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(WHAT, format!("truncated at {field}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    };
    if take(6, "magic")? != SPEAKER_MAGIC {
        return Err(Error::format(WHAT, "bad magic"));
    }
    let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let len = u32_at(take(4, "id length")?);
    let speaker = String::from_utf8(take(len, "speaker id")?).map_err(|_| Error::format(WHAT, "speaker id is not UTF-8"))?;
    let count = u32_at(take(4, "count")?);
    let dim = u32_at(take(4, "dim")?);
    let raw = take(dim * 4, "vector")?;
    let vector = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    let m = SpeakerModel { speaker, vector, count };
    m.validate().map_err(|e| Error::format(WHAT, e.to_string()))?;
    Ok(m)
}

pub fn save_speaker_model(path: &Path, m: &SpeakerModel) -> Result<()> {
    write_speaker_model(BufWriter::new(File::create(path)?), m)
}

pub fn load_speaker_model(path: &Path) -> Result<SpeakerModel> {
    read_speaker_model(BufReader::new(File::open(path)?))
}
