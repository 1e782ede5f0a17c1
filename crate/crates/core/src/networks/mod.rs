//! Representation networks: the utterance-level DNN with a locally-connected
//! first layer, its frame-level d-vector counterpart, and the single-output
//! LSTM.

mod checkpoint;
mod dnn;
mod lstm;

pub use checkpoint::{load_model, read_model, save_model, write_model, MODEL_MAGIC};
pub use dnn::{Dnn, DnnConfig, LocallyConnected};
pub(crate) use dnn::glorot;
pub use lstm::{Lstm, LstmConfig, FORGET_BIAS_INIT};

use crate::error::{Error, Result};
use crate::features::{extract_last_window, stack_frames, FeatureMatrix};
use crate::losses::{E2eHead, SoftmaxHead, E2E_INIT_BIAS, E2E_INIT_WEIGHT};
use crate::rng::Rng;
use crate::tensor::{Matrix, ParamSet, ParamVars, Tape, Var};

/// Per-frame DNN over a `2 * context + 1` frame neighbourhood.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameDnnConfig {
    pub context: usize,
    /// `dnn.input_frames` must equal `2 * context + 1`.
    pub dnn: DnnConfig,
}

impl FrameDnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dnn.input_frames != 2 * self.context + 1 {
            return Err(Error::Config(format!(
                "frame DNN input spans {} frames but context {} needs {}",
                self.dnn.input_frames,
                self.context,
                2 * self.context + 1
            )));
        }
        self.dnn.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NetworkConfig {
    Dnn(DnnConfig),
    FrameDnn(FrameDnnConfig),
    Lstm(LstmConfig),
}

impl NetworkConfig {
    pub fn output_dim(&self) -> usize {
        match self {
            NetworkConfig::Dnn(c) => c.output_dim(),
            NetworkConfig::FrameDnn(c) => c.dnn.output_dim(),
            NetworkConfig::Lstm(c) => c.hidden,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NetworkConfig::Dnn(_) => "dnn",
            NetworkConfig::FrameDnn(_) => "frame-dnn",
            NetworkConfig::Lstm(_) => "lstm",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrameDnn {
    context: usize,
    dnn: Dnn,
}

impl FrameDnn {
    pub fn dnn(&self) -> &Dnn {
        &self.dnn
    }

    pub fn context(&self) -> usize {
        self.context
    }

    /// Frame `t` stacked with `context` neighbours on each side; edge frames
    /// are replicated.
    pub fn context_input(&self, fbank: &FeatureMatrix, t: usize) -> Vec<f64> {
        let last = fbank.frames() as isize - 1;
        let c = self.context as isize;
        (-c..=c).flat_map(|o| fbank.frame((t as isize + o).clamp(0, last) as usize).to_vec()).collect()
    }

    /// Last-layer output for every frame.
    pub fn frame_outputs(&self, tape: &mut Tape<'_>, vars: &ParamVars, fbank: &FeatureMatrix) -> Result<Vec<Var>> {
        if fbank.dims() != self.dnn.config().input_dims {
            return Err(Error::dim("frame_dnn", format!("{} dims, expected {}", fbank.dims(), self.dnn.config().input_dims)));
        }
        (0..fbank.frames())
            .map(|t| {
                let x = tape.constant(Matrix::column(self.context_input(fbank, t)));
                self.dnn.forward(tape, vars, x)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    Dnn(Dnn),
    FrameDnn(FrameDnn),
    Lstm(Lstm),
}

impl Network {
    pub fn build(cfg: &NetworkConfig, params: &mut ParamSet, rng: &mut Rng) -> Result<Network> {
        Ok(match cfg {
            NetworkConfig::Dnn(c) => Network::Dnn(Dnn::new(c.clone(), params, "dnn", rng)?),
            NetworkConfig::FrameDnn(c) => {
                c.validate()?;
                Network::FrameDnn(FrameDnn { context: c.context, dnn: Dnn::new(c.dnn.clone(), params, "frame_dnn", rng)? })
            }
            NetworkConfig::Lstm(c) => Network::Lstm(Lstm::new(c.clone(), params, "lstm", rng)?),
        })
    }

    pub fn config(&self) -> NetworkConfig {
        match self {
            Network::Dnn(d) => NetworkConfig::Dnn(d.config().clone()),
            Network::FrameDnn(f) => NetworkConfig::FrameDnn(FrameDnnConfig { context: f.context, dnn: f.dnn.config().clone() }),
            Network::Lstm(l) => NetworkConfig::Lstm(l.config().clone()),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config().output_dim()
    }

    /// Utterance representation `f(X)`:
    /// the DNN sees the stacked last window, the LSTM its frames one by one
    /// (returning only the final output), and the frame-level DNN averages
    /// its per-frame last-layer activations over all frames.
    pub fn represent(&self, tape: &mut Tape<'_>, vars: &ParamVars, fbank: &FeatureMatrix) -> Result<Var> {
        match self {
            Network::Dnn(dnn) => {
                let cfg = dnn.config();
                if fbank.dims() != cfg.input_dims {
                    return Err(Error::dim("dnn", format!("{} dims, expected {}", fbank.dims(), cfg.input_dims)));
                }
                let window = extract_last_window(fbank, cfg.input_frames)?;
                let x = tape.constant(Matrix::column(stack_frames(&window)));
                dnn.forward(tape, vars, x)
            }
            Network::FrameDnn(f) => {
                let outs = f.frame_outputs(tape, vars, fbank)?;
                tape.mean(&outs)
            }
            Network::Lstm(lstm) => {
                let cfg = lstm.config();
                if fbank.dims() != cfg.input_dim {
                    return Err(Error::dim("lstm", format!("{} dims, expected {}", fbank.dims(), cfg.input_dim)));
                }
                let window = extract_last_window(fbank, cfg.window_frames)?;
                let frames: Vec<Var> = (0..window.frames())
                    .map(|t| tape.constant(Matrix::column(window.as_matrix().frame(t).to_vec())))
                    .collect();
                lstm.last_output(tape, vars, &frames)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadConfig {
    None,
    Softmax { speakers: usize },
    E2e { w: f64, b: f64 },
}

impl HeadConfig {
    pub fn e2e_default() -> Self {
        HeadConfig::E2e { w: E2E_INIT_WEIGHT, b: E2E_INIT_BIAS }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    None,
    Softmax(SoftmaxHead),
    E2e(E2eHead),
}

/// A representation network, its loss head and all their parameters.
/// Network parameters come first in declaration order.
#[derive(Clone, Debug)]
pub struct Model {
    pub network: Network,
    pub head: Head,
    pub params: ParamSet,
}

impl Model {
    pub fn new(cfg: &NetworkConfig, head: &HeadConfig, rng: &mut Rng) -> Result<Model> {
        let mut params = ParamSet::new();
        let network = Network::build(cfg, &mut params, rng)?;
        let head = build_head(head, network.output_dim(), &mut params, rng)?;
        Ok(Model { network, head, params })
    }

    /// Keeps the network (and its trained weights) and attaches a fresh head.
    pub fn with_head(&self, head: &HeadConfig, rng: &mut Rng) -> Result<Model> {
        let mut params = ParamSet::new();
        let network = Network::build(&self.network.config(), &mut params, rng)?;
        for (id, value) in params.ids().collect::<Vec<_>>().into_iter().zip(self.params.values()) {
            *params.get_mut(id) = value.clone();
        }
        let head = build_head(head, network.output_dim(), &mut params, rng)?;
        Ok(Model { network, head, params })
    }

    pub fn head_config(&self) -> HeadConfig {
        match &self.head {
            Head::None => HeadConfig::None,
            Head::Softmax(h) => HeadConfig::Softmax { speakers: h.speakers() },
            Head::E2e(h) => HeadConfig::E2e { w: h.weight(&self.params), b: h.bias(&self.params) },
        }
    }

    pub fn e2e_head(&self) -> Option<&E2eHead> {
        match &self.head {
            Head::E2e(h) => Some(h),
            _ => None,
        }
    }

    /// Decision threshold `-b/w` when the model has a logistic head.
    pub fn threshold(&self) -> Option<f64> {
        self.e2e_head().and_then(|h| h.threshold(&self.params))
    }

    /// Frozen forward pass.
    pub fn representation(&self, fbank: &FeatureMatrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = tape.load_params(&self.params);
        let f = self.network.represent(&mut tape, &vars, fbank)?;
        Ok(tape.value(f).data().to_vec())
    }
}

fn build_head(cfg: &HeadConfig, dim: usize, params: &mut ParamSet, rng: &mut Rng) -> Result<Head> {
    Ok(match *cfg {
        HeadConfig::None => Head::None,
        HeadConfig::Softmax { speakers } => Head::Softmax(SoftmaxHead::new(speakers, dim, params, rng)?),
        HeadConfig::E2e { w, b } => Head::E2e(E2eHead::new(params, w, b)?),
    })
}
