use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use spkver::evaluation::{det_points, evaluate, parse_trials, write_det_tsv, Cohort};
use spkver::features::{read_fbnk_file, read_wav_mono16, write_fbnk_file, FeatureMatrix};
use spkver::manifest::{read_manifest, write_manifest, ManifestEntry};
use spkver::networks::{load_model, save_model};
use spkver::scoring::{enroll, load_speaker_model, save_speaker_model, SpeakerModel};
use spkver::synth::generate_corpus;
use spkver::training::{sweep_model_size, train, write_sweep_tsv, Dataset};
use spkver::Error;

use crate::config::ExperimentConfig;

pub const MODEL_FILE: &str = "model.svm";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const SCORES_FILE: &str = "scores.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SPEAKER_MODEL_EXT: &str = "svspk";

fn config_with_seed(config: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

/// Speaker is the parent directory relative to `root` (the file stem for
/// files directly under it); the utterance id is the relative path without
/// extension, `/` replaced by `_`.
fn wav_ids(root: &Path, wav: &Path) -> (String, String) {
    let rel = wav.strip_prefix(root).unwrap_or(wav).with_extension("");
    let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    let speaker = if parts.len() > 1 { parts[parts.len() - 2].clone() } else { parts[0].clone() };
    (parts.join("_"), speaker)
}

pub fn extract(input: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let mut wavs = Vec::new();
    collect_wavs(input, &mut wavs)?;
    if wavs.is_empty() {
        bail!("no input files in {}", input.display());
    }
    wavs.sort();
    let feats = out.join("features");
    fs::create_dir_all(&feats)?;
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for wav in &wavs {
        let (utt, speaker) = wav_ids(input, wav);
        let result = (|| -> spkver::Result<PathBuf> {
            let (pcm, rate) = read_wav_mono16(wav)?;
            if rate != cfg.features.sample_rate {
                return Err(Error::format("wav", format!("sample rate {rate}, expected {}", cfg.features.sample_rate)));
            }
            let fbank = cfg.features.extract(&pcm)?;
            let path = feats.join(format!("{utt}.fbnk"));
            write_fbnk_file(&path, &fbank)?;
            Ok(path)
        })();
        match result {
            Ok(path) => entries.push(ManifestEntry { utterance: utt, speaker, path }),
            Err(e) => failures.push(format!("{}: {e}", wav.display())),
        }
    }
    if !failures.is_empty() {
        bail!("{} of {} file(s) failed:\n  {}", failures.len(), wavs.len(), failures.join("\n  "));
    }
    write_manifest(&out.join("manifest.tsv"), &entries, out)?;
    info!("extracted {} utterances", entries.len());
    Ok(())
}

pub fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = config_with_seed(config, seed)?;
    let corpus = generate_corpus(&cfg.synth_config())?;
    corpus.write(out)?;
    info!("wrote {} utterances of {} speakers to {}", corpus.utterances.len(), corpus.speakers.len(), out.display());
    Ok(())
}

fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let entries = read_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    if entries.is_empty() {
        bail!("manifest {} is empty", manifest.display());
    }
    Ok(Dataset::load(&entries)?)
}

pub fn train_cmd(config: Option<&Path>, seed: Option<u64>, manifest: &Path, out: &Path, init: Option<&Path>) -> Result<()> {
    let cfg = config_with_seed(config, seed)?;
    let dataset = load_dataset(manifest)?;
    let dims = dataset.feature_dims().expect("non-empty");
    let init = init.map(|p| load_model(p).with_context(|| format!("loading {}", p.display()))).transpose()?;
    let (model, log) = match train(&cfg.train_config(dims), &dataset, init.as_ref()) {
        Ok(r) => r,
        Err(Error::Diverged { step, last_good }) => {
            let good = last_good.map_or("none".to_string(), |s| s.to_string());
            bail!("training diverged (non-finite loss) at step {step}; last good step: {good}")
        }
        Err(e) => return Err(e.into()),
    };
    fs::create_dir_all(out)?;
    save_model(&out.join(MODEL_FILE), &model)?;
    log.write_tsv(BufWriter::new(File::create(out.join(TRAIN_LOG_FILE))?))?;
    info!("final loss {:.6}", log.losses.last().map_or(f64::NAN, |l| l.1));
    Ok(())
}

/// Features of a manifest, keyed by speaker in first-appearance order.
fn by_speaker(entries: &[ManifestEntry]) -> Result<Vec<(String, Vec<FeatureMatrix>)>> {
    let mut order: Vec<(String, Vec<FeatureMatrix>)> = Vec::new();
    let mut index = HashMap::new();
    for e in entries {
        let x = read_fbnk_file(&e.path).with_context(|| format!("reading {}", e.path.display()))?;
        let k = *index.entry(e.speaker.clone()).or_insert_with(|| {
            order.push((e.speaker.clone(), Vec::new()));
            order.len() - 1
        });
        order[k].1.push(x);
    }
    Ok(order)
}

pub fn enroll_cmd(config: Option<&Path>, model: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let net = load_model(model).with_context(|| format!("loading {}", model.display()))?;
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        bail!("no enrollment utterances in {}", manifest.display());
    }
    fs::create_dir_all(out)?;
    for (speaker, utts) in by_speaker(&entries)? {
        let refs: Vec<&FeatureMatrix> = utts.iter().collect();
        let m = enroll(&net, &speaker, &refs, cfg.max_enrollment).with_context(|| format!("enrolling speaker {speaker}"))?;
        save_speaker_model(&out.join(format!("{speaker}.{SPEAKER_MODEL_EXT}")), &m)?;
    }
    Ok(())
}

fn load_cohort(dir: &Path) -> Result<Cohort> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading cohort {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == SPEAKER_MODEL_EXT));
    files.sort();
    let models = files.iter().map(|p| load_speaker_model(p).with_context(|| format!("loading {}", p.display()))).collect::<Result<Vec<_>>>()?;
    Ok(Cohort::new(models)?)
}

pub struct EvalArgs<'a> {
    pub model: &'a Path,
    pub models: &'a Path,
    pub trials: &'a Path,
    pub manifest: &'a Path,
    pub out: &'a Path,
    pub tnorm: bool,
    pub cohort: Option<&'a Path>,
    pub det_out: Option<&'a Path>,
}

pub fn eval_cmd(a: &EvalArgs<'_>) -> Result<String> {
    let net = load_model(a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let trials = parse_trials(&fs::read_to_string(a.trials).with_context(|| format!("reading {}", a.trials.display()))?)?;
    if trials.is_empty() {
        bail!("trial list {} is empty", a.trials.display());
    }
    let mut speakers: HashMap<String, SpeakerModel> = HashMap::new();
    for t in &trials {
        if !speakers.contains_key(&t.claimed) {
            let path = a.models.join(format!("{}.{SPEAKER_MODEL_EXT}", t.claimed));
            if !path.exists() {
                bail!("missing speaker model for speaker {} ({})", t.claimed, path.display());
            }
            speakers.insert(t.claimed.clone(), load_speaker_model(&path).with_context(|| format!("loading model of speaker {}", t.claimed))?);
        }
    }
    let needed: std::collections::HashSet<&str> = trials.iter().map(|t| t.test.as_str()).collect();
    let mut tests = HashMap::new();
    for e in read_manifest(a.manifest)? {
        if needed.contains(e.utterance.as_str()) {
            tests.insert(e.utterance.clone(), read_fbnk_file(&e.path).with_context(|| format!("reading {}", e.path.display()))?);
        }
    }
    let cohort = match (a.tnorm, a.cohort) {
        (true, Some(dir)) => Some(load_cohort(dir)?),
        (true, None) => bail!("--tnorm needs --cohort DIR with impostor speaker models"),
        (false, _) => None,
    };
    let report = evaluate(&net, &speakers, &tests, &trials, cohort.as_ref())?;
    fs::create_dir_all(a.out)?;
    report.write_scores(BufWriter::new(File::create(a.out.join(SCORES_FILE))?))?;
    let mut summary = Vec::new();
    report.write_summary(&mut summary)?;
    fs::write(a.out.join(SUMMARY_FILE), &summary)?;
    if let Some(p) = a.det_out {
        write_det_tsv(BufWriter::new(File::create(p)?), &det_points(&report.records)?)?;
    }
    Ok(String::from_utf8(summary).expect("ascii summary"))
}

pub struct SweepArgs<'a> {
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
    pub manifest: &'a Path,
    pub enroll: &'a Path,
    pub test: &'a Path,
    pub trials: &'a Path,
    pub sizes: &'a [usize],
    pub out: &'a Path,
    pub init: Option<&'a Path>,
}

pub fn sweep_cmd(a: &SweepArgs<'_>) -> Result<()> {
    let cfg = config_with_seed(a.config, a.seed)?;
    let dataset = load_dataset(a.manifest)?;
    let dims = dataset.feature_dims().expect("non-empty");
    let init = a.init.map(load_model).transpose()?;
    let enrollments = by_speaker(&read_manifest(a.enroll)?)?;
    let tests: HashMap<String, FeatureMatrix> =
        read_manifest(a.test)?.into_iter().map(|e| Ok((e.utterance, read_fbnk_file(&e.path)?))).collect::<Result<_>>()?;
    let trials = parse_trials(&fs::read_to_string(a.trials)?)?;
    let rows = sweep_model_size(&cfg.train_config(dims), &dataset, a.sizes, init.as_ref(), |model| {
        let mut speakers = HashMap::new();
        for (spk, utts) in &enrollments {
            let refs: Vec<&FeatureMatrix> = utts.iter().collect();
            speakers.insert(spk.clone(), enroll(model, spk, &refs, cfg.max_enrollment)?);
        }
        Ok(evaluate(model, &speakers, &tests, &trials, None)?.eer_raw.eer)
    })?;
    let mut out = Vec::new();
    write_sweep_tsv(&mut out, &rows)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(a.out, out)?;
    Ok(())
}

/// Speaker models in `dir`, keyed by speaker id.
pub fn read_speaker_models(dir: &Path) -> Result<BTreeMap<String, SpeakerModel>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == SPEAKER_MODEL_EXT) {
            let m = load_speaker_model(&p)?;
            out.insert(m.speaker.clone(), m);
        }
    }
    Ok(out)
}
