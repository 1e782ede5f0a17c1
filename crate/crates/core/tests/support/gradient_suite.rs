//! Finite-difference checks of every differentiable building block, shared
//! by the gradient tests and the acceptance run.

use rand::Rng as _;
use spkver::features::FeatureMatrix;
use spkver::losses::{sample_candidates, E2eHead, SoftmaxHead, VerificationTarget};
use spkver::networks::{Dnn, DnnConfig, FrameDnnConfig, Lstm, LstmConfig, Model, Network, NetworkConfig, HeadConfig};
use spkver::rng::{seeded, Rng};
use spkver::tensor::{finite_difference_check, Matrix, ParamSet, ParamVars, Tape, Var, DEFAULT_EPS};
use spkver::training::{trial_loss, TrainingTrial, Utterance};
use spkver::Result;

pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error of one named check.
pub type Check = (&'static str, f64);

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_fbank(frames: usize, dims: usize, rng: &mut Rng) -> FeatureMatrix {
    FeatureMatrix::new(frames, dims, (0..frames * dims).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Projects a vector output onto fixed random weights so every output entry
/// contributes to a scalar objective.
fn project(tape: &mut Tape<'_>, y: Var, rng_seed: u64) -> Result<Var> {
    let n = tape.value(y).len();
    let mut rng = seeded(rng_seed);
    let r = tape.constant(random_matrix(n, 1, &mut rng));
    tape.dot(r, y)
}

/// Backprop gradients of `objective` against central differences; records
/// the worst relative error.
fn check<F>(out: &mut Vec<Check>, label: &'static str, params: &ParamSet, objective: F)
where
    F: Fn(&mut Tape<'_>, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.load_params(params);
    let loss = objective(&mut tape, &vars).unwrap();
    let analytic = tape.backward(loss).unwrap().params(&vars, params);
    let report = finite_difference_check(params, &analytic, DEFAULT_EPS, |p| {
        let mut tape = Tape::new();
        let vars = tape.load_params(p);
        let loss = objective(&mut tape, &vars)?;
        Ok(tape.value(loss).item().expect("scalar objective"))
    })
    .unwrap();
    assert!(report.entries_checked > 0, "{label}: nothing checked");
    out.push((label, report.max_relative_error));
}

pub fn affine_layer() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = seeded(1);
    let mut params = ParamSet::new();
    let w = params.add("w", random_matrix(5, 7, &mut rng));
    let b = params.add("b", random_matrix(5, 1, &mut rng));
    let x = params.add("x", random_matrix(7, 1, &mut rng));
    check(&mut checks, "affine", &params, |tape, vars| {
        let y = tape.affine(vars.get(x), vars.get(w), vars.get(b))?;
        project(tape, y, 10)
    });
    checks
}

pub fn relu_layer() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = seeded(2);
    let mut params = ParamSet::new();
    let w = params.add("w", random_matrix(6, 4, &mut rng));
    let b = params.add("b", random_matrix(6, 1, &mut rng));
    let x = params.add("x", random_matrix(4, 1, &mut rng));
    let pre = {
        let mut tape = Tape::new();
        let vars = tape.load_params(&params);
        let z = tape.affine(vars.get(x), vars.get(w), vars.get(b)).unwrap();
        tape.value(z).clone()
    };
    // Keep every unit away from the kink so central differences are valid.
    assert!(pre.data().iter().all(|z| z.abs() > 1e-3));
    assert!(pre.data().iter().any(|&z| z < 0.0) && pre.data().iter().any(|&z| z > 0.0));
    check(&mut checks, "relu", &params, |tape, vars| {
        let z = tape.affine(vars.get(x), vars.get(w), vars.get(b))?;
        let y = tape.relu(z);
        project(tape, y, 11)
    });
    checks
}

pub fn locally_connected_layer() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = seeded(3);
    let mut params = ParamSet::new();
    let cfg = DnnConfig { input_frames: 4, input_dims: 6, patch_frames: 2, patch_dims: 3, units_per_patch: 3, hidden: vec![2] };
    let dnn = Dnn::new(cfg.clone(), &mut params, "net", &mut rng).unwrap();
    // Non-zero biases exercise their gradients too.
    for p in 0..dnn.local().num_patches() {
        *params.get_mut(dnn.local().bias(p)) = random_matrix(3, 1, &mut rng);
    }
    let x = params.add("x", random_matrix(cfg.input_len(), 1, &mut rng));
    check(&mut checks, "locally connected", &params, |tape, vars| {
        let y = dnn.local().forward(tape, vars, vars.get(x))?;
        project(tape, y, 12)
    });
    check(&mut checks, "dnn", &params, |tape, vars| {
        let y = dnn.forward(tape, vars, vars.get(x))?;
        project(tape, y, 13)
    });
    checks
}

pub fn lstm_step_and_sequence() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = seeded(4);
    let mut params = ParamSet::new();
    let lstm = Lstm::new(LstmConfig { input_dim: 3, hidden: 4, window_frames: 5 }, &mut params, "lstm", &mut rng).unwrap();
    let x = params.add("x", random_matrix(3, 1, &mut rng));
    let h0 = params.add("h0", random_matrix(4, 1, &mut rng));
    let c0 = params.add("c0", random_matrix(4, 1, &mut rng));
    check(&mut checks, "lstm step", &params, |tape, vars| {
        let (h, c) = lstm.step(tape, vars, vars.get(x), vars.get(h0), vars.get(c0))?;
        let hc = tape.concat(&[h, c])?;
        project(tape, hc, 14)
    });

    let mut params = ParamSet::new();
    let lstm = Lstm::new(LstmConfig { input_dim: 3, hidden: 4, window_frames: 5 }, &mut params, "lstm", &mut rng).unwrap();
    let frames: Vec<_> = (0..5).map(|t| params.add(format!("x{t}"), random_matrix(3, 1, &mut rng))).collect();
    check(&mut checks, "lstm sequence", &params, |tape, vars| {
        let xs: Vec<Var> = frames.iter().map(|&f| vars.get(f)).collect();
        let h = lstm.last_output(tape, vars, &xs)?;
        project(tape, h, 15)
    });
    checks
}

pub fn dvector_averaging() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = seeded(5);
    let mut params = ParamSet::new();
    let frames: Vec<_> = (0..4).map(|t| params.add(format!("y{t}"), random_matrix(6, 1, &mut rng))).collect();
    check(&mut checks, "mean", &params, |tape, vars| {
        let ys: Vec<Var> = frames.iter().map(|&f| vars.get(f)).collect();
        let m = tape.mean(&ys)?;
        project(tape, m, 16)
    });

    let cfg = NetworkConfig::FrameDnn(FrameDnnConfig {
        context: 1,
        dnn: DnnConfig { input_frames: 3, input_dims: 4, patch_frames: 3, patch_dims: 2, units_per_patch: 3, hidden: vec![5, 3] },
    });
    let mut params = ParamSet::new();
    let net = Network::build(&cfg, &mut params, &mut rng).unwrap();
    let fbank = random_fbank(6, 4, &mut rng);
    check(&mut checks, "frame d-vector", &params, |tape, vars| {
        let d = net.represent(tape, vars, &fbank)?;
        project(tape, d, 17)
    });
    checks
}

pub fn softmax_losses() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = seeded(6);
    let mut params = ParamSet::new();
    let head = SoftmaxHead::new(9, 5, &mut params, &mut rng).unwrap();
    *params.get_mut(head.bias()) = random_matrix(9, 1, &mut rng);
    let y = params.add("y", random_matrix(5, 1, &mut rng));
    check(&mut checks, "softmax", &params, |tape, vars| head.loss(tape, vars, vars.get(y), 4));

    let candidates = sample_candidates(9, 4, 5, &mut rng).unwrap();
    assert_eq!(candidates.len(), 5);
    check(&mut checks, "sampled softmax", &params, |tape, vars| head.sampled_loss(tape, vars, vars.get(y), 4, &candidates));
    checks
}

fn e2e_check_for(out: &mut Vec<Check>, target: VerificationTarget, seed: u64) {
    let mut rng = seeded(seed);
    let mut params = ParamSet::new();
    let test = params.add("test", random_matrix(6, 1, &mut rng));
    let reps: Vec<_> = (0..4).map(|i| params.add(format!("enroll{i}"), random_matrix(6, 1, &mut rng))).collect();
    let head = E2eHead::new(&mut params, 2.5, -0.7).unwrap();
    let weights = [1.0, 1.0, 1.0, 0.0];

    check(out, "e2e head", &params, |tape, vars| {
        let rs: Vec<Var> = reps.iter().map(|&r| vars.get(r)).collect();
        let model = tape.weighted_mean(&rs, &weights)?;
        Ok(head.loss(tape, vars, vars.get(test), model, target)?.1)
    });

    let mut tape = Tape::new();
    let vars = tape.load_params(&params);
    let rs: Vec<Var> = reps.iter().map(|&r| vars.get(r)).collect();
    let model = tape.weighted_mean(&rs, &weights).unwrap();
    let (_, loss) = head.loss(&mut tape, &vars, vars.get(test), model, target).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (r, &w) in rs.iter().zip(&weights) {
        let g = grads.wrt(*r);
        if w == 1.0 {
            assert!(g.data().iter().any(|v| *v != 0.0), "weight-1 enrollment received no gradient");
        } else {
            assert!(g.data().iter().all(|v| *v == 0.0), "weight-0 enrollment received gradient");
        }
    }
}

pub fn end_to_end_head_through_speaker_model() -> Vec<Check> {
    let mut checks = Vec::new();
    e2e_check_for(&mut checks, VerificationTarget::Accept, 7);
    e2e_check_for(&mut checks, VerificationTarget::Reject, 8);
    checks
}

pub fn full_end_to_end_loss() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = seeded(9);
    let cfg = NetworkConfig::Dnn(DnnConfig { input_frames: 4, input_dims: 3, patch_frames: 2, patch_dims: 3, units_per_patch: 3, hidden: vec![5, 4] });
    let mut model = Model::new(&cfg, &HeadConfig::E2e { w: 3.0, b: -1.0 }, &mut rng).unwrap();
    for v in model.params.values_mut() {
        if v.data().iter().all(|x| *x == 0.0) {
            *v = random_matrix(v.rows(), v.cols(), &mut rng).map(|x| 0.1 * x);
        }
    }
    let utt = |i: usize, rng: &mut Rng| Utterance::new(format!("u{i}"), "spk", random_fbank(6, 3, rng));
    let enrollment: Vec<Utterance> = (0..3).map(|i| utt(i, &mut rng)).collect();
    let masked = utt(9, &mut rng).masked();
    let network = model.network.clone();
    let head = model.e2e_head().unwrap().clone();

    for target in [VerificationTarget::Accept, VerificationTarget::Reject] {
        let trial = TrainingTrial {
            test: utt(5, &mut rng),
            enrollment: enrollment.iter().cloned().chain([masked.clone()]).collect(),
            target,
        };
        check(&mut checks, "full e2e", &model.params, |tape, vars| Ok(trial_loss(tape, vars, &network, &head, &trial)?.1));

        // Gradient reaches each weight-1 enrollment representation.
        let mut tape = Tape::new();
        let vars = tape.load_params(&model.params);
        let f = network.represent(&mut tape, &vars, &trial.test.features).unwrap();
        let reps: Vec<Var> = trial.enrollment.iter().map(|u| network.represent(&mut tape, &vars, &u.features).unwrap()).collect();
        let m = tape.weighted_mean(&reps, &trial.weights()).unwrap();
        let (_, loss) = head.loss(&mut tape, &vars, f, m, trial.target).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (r, u) in reps.iter().zip(&trial.enrollment) {
            let nonzero = grads.wrt(*r).data().iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, u.use_weight == 1.0);
        }
    }
    checks
}

/// Every check in the suite.
pub fn all() -> Vec<Check> {
    [
        affine_layer,
        relu_layer,
        locally_connected_layer,
        lstm_step_and_sequence,
        dvector_averaging,
        softmax_losses,
        end_to_end_head_through_speaker_model,
        full_end_to_end_loss,
    ]
    .into_iter()
    .flat_map(|suite| suite())
    .collect()
}
