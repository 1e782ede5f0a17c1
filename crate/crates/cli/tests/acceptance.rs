//! Acceptance run: every criterion prints one PASS/FAIL line.
//!
//! `ACCEPTANCE_ONLY=3,10` restricts the run to the listed criteria.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::HashMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng as _;
use spkver::evaluation::{compute_eer, compute_tnorm_eer, t_norm_with_scores, Cohort, ScoreRecord, TrialLabel};
use spkver::features::extract_last_window;
use spkver::losses::{cosine_similarity, E2eHead};
use spkver::networks::{DnnConfig, FrameDnnConfig, HeadConfig, LstmConfig, Model, Network, NetworkConfig};
use spkver::rng::seeded;
use spkver::scoring::{Decision, Outcome, SpeakerModel};
use spkver::synth::{generate_corpus, SynthConfig, SyntheticCorpus};
use spkver::tensor::{Matrix, ParamSet, Tape};
use spkver::training::{sweep_model_size, train, Dataset, LossKind, TrainConfig};

use support::eer_oracle::{exhaustive_eer, random_records};
use support::gradient_suite::{self, TOLERANCE};
use support::masking::{mismatches, small_networks};

/// The small DNN: a locally-connected layer of 8 patches x 4 units (32
/// units) and one 32-unit linear layer.
fn small_dnn() -> DnnConfig {
    DnnConfig { input_frames: 80, input_dims: 8, patch_frames: 10, patch_dims: 8, units_per_patch: 4, hidden: vec![32] }
}

/// Frame-level DNN on 5-frame context windows, sized to match
/// [`small_dnn`] in parameter count.
fn frame_dnn() -> FrameDnnConfig {
    FrameDnnConfig {
        context: 2,
        dnn: DnnConfig { input_frames: 5, input_dims: 8, patch_frames: 5, patch_dims: 4, units_per_patch: 8, hidden: vec![64, 32] },
    }
}

const LSTM_HIDDEN: usize = 16;
/// The LSTM reads the last 40 of the 80 synthetic frames.
const LSTM_WINDOW: usize = 40;
const LSTM_STEPS: usize = 3000;
const LSTM_LEARNING_RATE: f64 = 0.03;

const SOFTMAX_STEPS: usize = 1000;
const SOFTMAX_LEARNING_RATE: f64 = 0.01;

type Criterion = fn(&mut Bench) -> Verdict;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Corpus and trained-model results shared between criteria.
#[derive(Default)]
struct Bench {
    corpus: Option<SyntheticCorpus>,
    dnn_eer: Option<f64>,
}

impl Bench {
    fn corpus(&mut self) -> &SyntheticCorpus {
        self.corpus.get_or_insert_with(|| generate_corpus(&SynthConfig::default()).unwrap())
    }

    fn dataset(&mut self) -> Dataset {
        self.corpus().train_dataset().unwrap()
    }

    fn eer(&mut self, model: &Model) -> f64 {
        self.corpus().evaluate(model, false).unwrap().eer_raw.eer
    }

    fn train(&mut self, cfg: &TrainConfig) -> Model {
        let ds = self.dataset();
        train(cfg, &ds, None).unwrap().0
    }

    fn dnn_config(steps: usize) -> TrainConfig {
        TrainConfig { speaker_model_size: 3, steps, ..TrainConfig::new(LossKind::EndToEnd, NetworkConfig::Dnn(small_dnn())) }
    }

    /// Held-out EER of the small DNN after 2000 end-to-end steps.
    fn dnn_eer(&mut self) -> f64 {
        if let Some(e) = self.dnn_eer {
            return e;
        }
        let model = self.train(&Bench::dnn_config(2000));
        let e = self.eer(&model);
        self.dnn_eer = Some(e);
        e
    }
}

fn gradient_suite(_: &mut Bench) -> Verdict {
    let start = Instant::now();
    let checks = gradient_suite::all();
    let elapsed = start.elapsed();
    let failing: Vec<&str> = checks.iter().filter(|(_, e)| e.is_nan() || *e >= TOLERANCE).map(|(l, _)| *l).collect();
    let worst = checks.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    verdict(
        failing.is_empty() && elapsed < Duration::from_secs(60),
        format!("{} checks, worst relative error {worst:.2e}, failing {failing:?}, {:.1}s", checks.len(), elapsed.as_secs_f64()),
    )
}

fn eer_oracle(_: &mut Bench) -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(7);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let records = random_records(&mut rng);
        worst = worst.max((compute_eer(&records).unwrap().eer - exhaustive_eer(&records)).abs());
    }
    let elapsed = start.elapsed();
    verdict(worst <= 1e-9 && elapsed < Duration::from_secs(10), format!("200 sets, max deviation {worst:.1e}, {:.2}s", elapsed.as_secs_f64()))
}

fn end_to_end_learning(bench: &mut Bench) -> Verdict {
    let start = Instant::now();
    let untrained = bench.train(&Bench::dnn_config(0));
    let before = bench.eer(&untrained);
    let after = bench.dnn_eer();
    let elapsed = start.elapsed();
    verdict(
        after <= 0.10 && before >= 0.35 && elapsed < Duration::from_secs(300),
        format!("untrained EER {:.2}%, trained EER {:.2}%, {:.0}s", 100.0 * before, 100.0 * after, elapsed.as_secs_f64()),
    )
}

fn utterance_vs_frame_level(bench: &mut Bench) -> Verdict {
    let mut run = |net: NetworkConfig| {
        let cfg = TrainConfig { steps: SOFTMAX_STEPS, learning_rate: SOFTMAX_LEARNING_RATE, ..TrainConfig::new(LossKind::Softmax, net.clone()) };
        let model = bench.train(&cfg);
        let params = Model::new(&net, &HeadConfig::None, &mut seeded(0)).unwrap().params.scalar_count();
        (bench.eer(&model), params)
    };
    let (utt, utt_params) = run(NetworkConfig::Dnn(small_dnn()));
    let (frame, frame_params) = run(NetworkConfig::FrameDnn(frame_dnn()));
    let ratio = utt_params as f64 / frame_params as f64;
    verdict(
        utt <= frame + 0.02 && (0.9..=1.1).contains(&ratio),
        format!(
            "utterance-level EER {:.2}% ({utt_params} params), frame-level EER {:.2}% ({frame_params} params)",
            100.0 * utt,
            100.0 * frame
        ),
    )
}

fn model_size_sweep(bench: &mut Bench) -> Verdict {
    let ds = bench.dataset();
    let corpus = bench.corpus();
    assert_eq!(corpus.config.enroll_per_speaker, 5);
    let rows = sweep_model_size(&Bench::dnn_config(2000), &ds, &[1, 3, 5], None, |m| Ok(corpus.evaluate(m, false)?.eer_raw.eer)).unwrap();
    let eer: HashMap<usize, f64> = rows.iter().copied().collect();
    let text: Vec<String> = rows.iter().map(|(n, e)| format!("N={n}: {:.2}%", 100.0 * e)).collect();
    verdict(eer[&5] <= eer[&1], text.join(", "))
}

fn masking_exactness(_: &mut Bench) -> Verdict {
    let mut text = Vec::new();
    let mut total = 0;
    for (i, cfg) in small_networks().iter().enumerate() {
        let bad = mismatches(cfg, 500 + i as u64, 50);
        total += bad;
        text.push(format!("{} {bad}/50", cfg.kind()));
    }
    verdict(total == 0, format!("trials changed by weight-0 padding: {}", text.join(", ")))
}

fn scale_and_threshold(_: &mut Bench) -> Verdict {
    let mut rng = seeded(8);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dim = rng.random_range(2..40);
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let ca: Vec<f64> = a.iter().map(|x| c * x).collect();
        let cb: Vec<f64> = b.iter().map(|x| c * x).collect();
        let base = cosine_similarity(&a, &b).unwrap();
        worst = worst.max((cosine_similarity(&ca, &b).unwrap() - base).abs());
        worst = worst.max((cosine_similarity(&a, &cb).unwrap() - base).abs());
    }
    let mut disagreements = 0;
    for _ in 0..10_000 {
        let mut params = ParamSet::new();
        let head = E2eHead::new(&mut params, rng.random_range(0.01..20.0), rng.random_range(-10.0..10.0)).unwrap();
        let score = rng.random_range(-1.0..1.0);
        let decision = Decision::new(score, head.threshold(&params).unwrap());
        let accept_by_probability = head.p_accept(&params, score) >= 0.5;
        if (decision.outcome == Outcome::Accept) != accept_by_probability {
            disagreements += 1;
        }
    }
    verdict(
        worst <= 1e-12 && disagreements == 0,
        format!("max cosine deviation under scaling {worst:.1e}, threshold disagreements {disagreements}/10000"),
    )
}

fn tnorm_properties(_: &mut Bench) -> Verdict {
    let mut rng = seeded(9);
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for _ in 0..100 {
        let dim = 6;
        let models: Vec<SpeakerModel> = (0..rng.random_range(2..30))
            .map(|i| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                SpeakerModel::from_representations(format!("c{i}"), &[v]).unwrap()
            })
            .collect();
        let cohort = Cohort::new(models).unwrap();
        let test: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scores = cohort.scores(&test).unwrap();
        let normalized: Vec<f64> = scores.iter().map(|&s| t_norm_with_scores(s, &scores).unwrap()).collect();
        let n = normalized.len() as f64;
        let mean = normalized.iter().sum::<f64>() / n;
        let std = (normalized.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }

    // Each test utterance gets its own affine map, applied to its raw score
    // and to all of its cohort scores alike.
    let mut records = Vec::new();
    let mut shifted = Vec::new();
    for i in 0..400 {
        let target = i % 3 == 0;
        let cohort: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..0.5)).collect();
        let raw = rng.random_range(-1.0..1.0) + if target { 0.4 } else { 0.0 };
        let (scale, offset) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
        let moved: Vec<f64> = cohort.iter().map(|s| scale * s + offset).collect();
        let label = if target { TrialLabel::Target } else { TrialLabel::Nontarget };
        let record = |raw: f64, cohort: &[f64]| ScoreRecord {
            trial_id: format!("t{i}"),
            raw,
            tnorm: Some(t_norm_with_scores(raw, cohort).unwrap()),
            label,
        };
        records.push(record(raw, &cohort));
        shifted.push(record(scale * raw + offset, &moved));
    }
    let before = compute_tnorm_eer(&records).unwrap().eer;
    let after = compute_tnorm_eer(&shifted).unwrap().eer;
    verdict(
        worst_mean <= 1e-12 && worst_std <= 1e-12 && (before - after).abs() <= 1e-12,
        format!(
            "self-normalized |mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}; t-norm EER {:.4} before and {:.4} after shifts",
            before, after
        ),
    )
}

const DETERMINISM_CONFIG: &str = "\
train_speakers = 8
heldout_speakers = 4
utterances_per_speaker = 6
frames = 20
dims = 4
latent_dim = 2
enroll_per_speaker = 2
cohort_speakers = 4
window_frames = 20
patch_frames = 10
patch_dims = 4
units_per_patch = 3
hidden = 8
speaker_model_size = 2
batch_size = 4
steps = 25
pool_capacity = 24
refresh_period = 5
group_size = 3
";

fn spkver(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_spkver")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "spkver {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

/// synth, train, enroll and eval in `dir`; returns the score table and
/// summary bytes.
fn pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    fs::write(dir.join("exp.cfg"), DETERMINISM_CONFIG).unwrap();
    spkver(&["synth", "--config", &p("exp.cfg"), "--seed", "11", "--out", &p("data")]);
    spkver(&["train", "--config", &p("exp.cfg"), "--seed", "11", "--manifest", &p("data/train.tsv"), "--out", &p("run")]);
    for (manifest, out) in [("data/enroll.tsv", "models"), ("data/cohort.tsv", "cohort")] {
        spkver(&["enroll", "--config", &p("exp.cfg"), "--model", &p("run/model.svm"), "--manifest", &p(manifest), "--out", &p(out)]);
    }
    spkver(&[
        "eval",
        "--model",
        &p("run/model.svm"),
        "--models",
        &p("models"),
        "--trials",
        &p("data/trials.tsv"),
        "--manifest",
        &p("data/test.tsv"),
        "--out",
        &p("eval"),
        "--tnorm",
        "--cohort",
        &p("cohort"),
    ]);
    (fs::read(dir.join("eval/scores.tsv")).unwrap(), fs::read(dir.join("eval/summary.txt")).unwrap())
}

fn determinism(_: &mut Bench) -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (scores_a, summary_a) = pipeline(a.path());
    let (scores_b, summary_b) = pipeline(b.path());
    let rows = scores_a.iter().filter(|&&c| c == b'\n').count().saturating_sub(1);
    verdict(
        scores_a == scores_b && summary_a == summary_b && rows > 0,
        format!("{rows} scored trials; scores identical: {}, summaries identical: {}", scores_a == scores_b, summary_a == summary_b),
    )
}

fn lstm_path(bench: &mut Bench) -> Verdict {
    let start = Instant::now();
    let cfg = LstmConfig { input_dim: 8, hidden: LSTM_HIDDEN, window_frames: LSTM_WINDOW };
    let train_cfg = TrainConfig {
        speaker_model_size: 3,
        steps: LSTM_STEPS,
        learning_rate: LSTM_LEARNING_RATE,
        ..TrainConfig::new(LossKind::EndToEnd, NetworkConfig::Lstm(cfg))
    };
    let model = bench.train(&train_cfg);
    let lstm_eer = bench.eer(&model);
    let dnn_eer = bench.dnn_eer();

    let Network::Lstm(lstm) = &model.network else { unreachable!() };
    let test = &bench.corpus().utterances[0].features;
    let window = extract_last_window(test, LSTM_WINDOW).unwrap();
    let mut tape = Tape::new();
    let vars = tape.load_params(&model.params);
    let frames: Vec<_> = (0..LSTM_WINDOW).map(|t| tape.constant(Matrix::column(window.as_matrix().frame(t).to_vec()))).collect();
    let h = lstm.last_output(&mut tape, &vars, &frames).unwrap();
    let loss = tape.sum(h);
    let first = tape.backward(loss).unwrap().wrt(frames[0]);
    let first_norm = first.norm();

    verdict(
        lstm_eer <= dnn_eer + 0.05 && first_norm > 0.0,
        format!(
            "LSTM EER {:.2}% vs DNN EER {:.2}%, |dL/dx_1| = {first_norm:.2e}, {:.0}s",
            100.0 * lstm_eer,
            100.0 * dnn_eer,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 10] = [
        ("gradient suite", gradient_suite),
        ("EER oracle equivalence", eer_oracle),
        ("end-to-end learning", end_to_end_learning),
        ("utterance-level vs frame-level", utterance_vs_frame_level),
        ("speaker model size", model_size_sweep),
        ("masking exactness", masking_exactness),
        ("scale and threshold invariance", scale_and_threshold),
        ("t-norm properties", tnorm_properties),
        ("determinism", determinism),
        ("LSTM path", lstm_path),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|n| n.trim().parse().ok()).collect());

    let mut bench = Bench::default();
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let number = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&number)) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| run(&mut bench)))
            .unwrap_or_else(|e| {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
            });
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {number} ({name}): {}", outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
