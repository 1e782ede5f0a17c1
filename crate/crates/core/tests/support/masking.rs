//! Weight-0 enrollment entries must leave a trial bit-for-bit unchanged.

use rand::Rng as _;
use spkver::features::FeatureMatrix;
use spkver::losses::VerificationTarget;
use spkver::networks::{DnnConfig, FrameDnnConfig, HeadConfig, LstmConfig, Model, NetworkConfig};
use spkver::rng::{seeded, Rng};
use spkver::tensor::{ParamGrads, Tape};
use spkver::training::{trial_loss, TrainingTrial, Utterance};

pub fn small_networks() -> Vec<NetworkConfig> {
    vec![
        NetworkConfig::Dnn(DnnConfig { input_frames: 6, input_dims: 4, patch_frames: 3, patch_dims: 2, units_per_patch: 3, hidden: vec![8, 5] }),
        NetworkConfig::FrameDnn(FrameDnnConfig {
            context: 1,
            dnn: DnnConfig { input_frames: 3, input_dims: 4, patch_frames: 3, patch_dims: 2, units_per_patch: 3, hidden: vec![6, 4] },
        }),
        NetworkConfig::Lstm(LstmConfig { input_dim: 4, hidden: 5, window_frames: 6 }),
    ]
}

fn utterance(id: usize, rng: &mut Rng) -> Utterance {
    let frames = rng.random_range(6..10);
    let values = (0..frames * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
    Utterance::new(format!("u{id}"), format!("s{}", id % 3), FeatureMatrix::new(frames, 4, values).unwrap())
}

/// `(score, loss, grads)` of one trial.
fn evaluate(model: &Model, trial: &TrainingTrial) -> (f64, f64, ParamGrads) {
    let head = model.e2e_head().expect("e2e head");
    let mut tape = Tape::new();
    let vars = tape.load_params(&model.params);
    let (score, loss) = trial_loss(&mut tape, &vars, &model.network, head, trial).unwrap();
    let grads = tape.backward(loss).unwrap().params(&vars, &model.params);
    (tape.value(score).item().unwrap(), tape.value(loss).item().unwrap(), grads)
}

/// Builds random trials for `cfg`, appends 1 to 4 weight-0 utterances to
/// each and compares everything bitwise. Returns the number of trials that
/// differed.
pub fn mismatches(cfg: &NetworkConfig, seed: u64, trials: usize) -> usize {
    let mut rng = seeded(seed);
    let model = Model::new(cfg, &HeadConfig::e2e_default(), &mut rng).unwrap();
    let mut bad = 0;
    for t in 0..trials {
        let n = rng.random_range(1..5);
        let enrollment: Vec<Utterance> = (0..n).map(|i| utterance(10 * t + i, &mut rng)).collect();
        let target = if rng.random_bool(0.5) { VerificationTarget::Accept } else { VerificationTarget::Reject };
        let base = TrainingTrial { test: utterance(10 * t + 9, &mut rng), enrollment, target };
        let mut padded = base.clone();
        for k in 0..rng.random_range(1..5) {
            padded.enrollment.push(utterance(1000 + 10 * t + k, &mut rng).masked());
        }
        let (s0, l0, g0) = evaluate(&model, &base);
        let (s1, l1, g1) = evaluate(&model, &padded);
        let same_grads = g0.iter().zip(g1.iter()).all(|((_, a), (_, b))| {
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if s0.to_bits() != s1.to_bits() || l0.to_bits() != l1.to_bits() || !same_grads {
            bad += 1;
        }
    }
    bad
}
