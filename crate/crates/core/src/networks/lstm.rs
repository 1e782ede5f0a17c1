use super::dnn::glorot;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Matrix, ParamId, ParamSet, ParamVars, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub hidden: usize,
    /// Frames fed to the recurrence (last-window extraction applies).
    pub window_frames: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig { input_dim: 40, hidden: 504, window_frames: 80 }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.window_frames == 0 {
            return Err(Error::Config(format!("LSTM dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Single-layer LSTM with forget gate, no peepholes, no projection.
///
/// Gate pre-activations are stacked in the order input, forget, output,
/// candidate: rows `[0, H)`, `[H, 2H)`, `[2H, 3H)`, `[3H, 4H)` of the
/// `4H x D` input matrix, the `4H x H` recurrent matrix and the bias.
#[derive(Clone, Debug)]
pub struct Lstm {
    cfg: LstmConfig,
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
}

/// Initial forget-gate bias.
pub const FORGET_BIAS_INIT: f64 = 1.0;

impl Lstm {
    pub fn new(cfg: LstmConfig, params: &mut ParamSet, prefix: &str, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let w_input = params.add(format!("{prefix}.w_input"), glorot(4 * h, cfg.input_dim, rng));
        let w_hidden = params.add(format!("{prefix}.w_hidden"), glorot(4 * h, h, rng));
        let mut b = Matrix::zeros(4 * h, 1);
        for r in h..2 * h {
            b.set(r, 0, FORGET_BIAS_INIT);
        }
        let bias = params.add(format!("{prefix}.bias"), b);
        Ok(Lstm { cfg, w_input, w_hidden, bias })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.cfg
    }

    pub fn w_input(&self) -> ParamId {
        self.w_input
    }

    pub fn w_hidden(&self) -> ParamId {
        self.w_hidden
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// One recurrence step; returns `(h_t, c_t)`.
    pub fn step(&self, tape: &mut Tape<'_>, vars: &ParamVars, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let h = self.cfg.hidden;
        if tape.value(x).shape() != (self.cfg.input_dim, 1)
            || tape.value(h_prev).shape() != (h, 1)
            || tape.value(c_prev).shape() != (h, 1)
        {
            return Err(Error::dim(
                "lstm_step",
                format!(
                    "x {:?}, h {:?}, c {:?} for input {} hidden {h}",
                    tape.value(x).shape(),
                    tape.value(h_prev).shape(),
                    tape.value(c_prev).shape(),
                    self.cfg.input_dim
                ),
            ));
        }
        let from_input = tape.affine(x, vars.get(self.w_input), vars.get(self.bias))?;
        let from_hidden = tape.matvec(vars.get(self.w_hidden), h_prev)?;
        let z = tape.add(from_input, from_hidden)?;
        let hc = tape.lstm_cell(z, c_prev)?;
        let h_t = tape.slice(hc, 0, h)?;
        let c = tape.slice(hc, h, h)?;
        Ok((h_t, c))
    }

    /// Runs frames `1..T` from zero state and returns `h_T`.
    pub fn last_output(&self, tape: &mut Tape<'_>, vars: &ParamVars, frames: &[Var]) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("LSTM needs at least one frame".into()));
        }
        let mut h = tape.constant(Matrix::zeros(self.cfg.hidden, 1));
        let mut c = tape.constant(Matrix::zeros(self.cfg.hidden, 1));
        for &x in frames {
            (h, c) = self.step(tape, vars, x, h, c)?;
        }
        Ok(h)
    }
}
