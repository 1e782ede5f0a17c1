use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Matrix, ParamId, ParamSet, ParamVars, Tape, Var};

/// Topology of the feed-forward network: one locally-connected ReLU layer
/// over a `frames x dims` grid, then fully-connected layers. Every layer is
/// ReLU except the last fully-connected one, which is linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DnnConfig {
    pub input_frames: usize,
    pub input_dims: usize,
    pub patch_frames: usize,
    pub patch_dims: usize,
    pub units_per_patch: usize,
    /// Widths of the fully-connected layers; the last one is the output.
    pub hidden: Vec<usize>,
}

impl Default for DnnConfig {
    /// 80x40 window, 10x10 patches with 16 units each, then three 504-wide
    /// layers (four hidden layers in total).
    fn default() -> Self {
        DnnConfig {
            input_frames: 80,
            input_dims: 40,
            patch_frames: 10,
            patch_dims: 10,
            units_per_patch: 16,
            hidden: vec![504, 504, 504],
        }
    }
}

impl DnnConfig {
    /// The larger variant with one more 504-wide hidden layer.
    pub fn best() -> Self {
        DnnConfig { hidden: vec![504; 4], ..DnnConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_frames, self.input_dims, self.patch_frames, self.patch_dims, self.units_per_patch];
        if dims.contains(&0) {
            return Err(Error::Config(format!("DNN dimensions must be positive: {self:?}")));
        }
        if !self.input_frames.is_multiple_of(self.patch_frames) || !self.input_dims.is_multiple_of(self.patch_dims) {
            return Err(Error::Config(format!(
                "{}x{} patches do not tile a {}x{} input",
                self.patch_frames, self.patch_dims, self.input_frames, self.input_dims
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("need at least one non-empty fully-connected layer".into()));
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.input_frames / self.patch_frames, self.input_dims / self.patch_dims)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.patch_grid();
        r * c
    }

    pub fn local_width(&self) -> usize {
        self.num_patches() * self.units_per_patch
    }

    pub fn input_len(&self) -> usize {
        self.input_frames * self.input_dims
    }

    pub fn output_dim(&self) -> usize {
        *self.hidden.last().expect("validated")
    }

    /// Number of hidden layers including the locally-connected one.
    pub fn hidden_layers(&self) -> usize {
        1 + self.hidden.len()
    }
}

/// Glorot-uniform matrix, `rows x cols`.
pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-s..=s)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Locally-connected layer: each patch has its own (untied) weights.
#[derive(Clone, Debug)]
pub struct LocallyConnected {
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    /// Flat input indices of each patch, patch-row-major.
    patches: Vec<Vec<usize>>,
}

impl LocallyConnected {
    fn new(cfg: &DnnConfig, params: &mut ParamSet, prefix: &str, rng: &mut Rng) -> Self {
        let (grid_rows, grid_cols) = cfg.patch_grid();
        let patch_len = cfg.patch_frames * cfg.patch_dims;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut patches = Vec::new();
        for pr in 0..grid_rows {
            for pc in 0..grid_cols {
                let p = pr * grid_cols + pc;
                weights.push(params.add(format!("{prefix}.lc.{p}.w"), glorot(cfg.units_per_patch, patch_len, rng)));
                biases.push(params.add(format!("{prefix}.lc.{p}.b"), Matrix::zeros(cfg.units_per_patch, 1)));
                let mut idx = Vec::with_capacity(patch_len);
                for r in 0..cfg.patch_frames {
                    let row = pr * cfg.patch_frames + r;
                    for c in 0..cfg.patch_dims {
                        idx.push(row * cfg.input_dims + pc * cfg.patch_dims + c);
                    }
                }
                patches.push(idx);
            }
        }
        LocallyConnected { weights, biases, patches }
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len()
    }

    pub fn weight(&self, patch: usize) -> ParamId {
        self.weights[patch]
    }

    pub fn bias(&self, patch: usize) -> ParamId {
        self.biases[patch]
    }

    /// Flat input indices covered by `patch`.
    pub fn patch_indices(&self, patch: usize) -> &[usize] {
        &self.patches[patch]
    }

    /// Per-patch affine maps, concatenated, then ReLU.
    pub fn forward(&self, tape: &mut Tape<'_>, vars: &ParamVars, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.patches.len());
        for (p, idx) in self.patches.iter().enumerate() {
            let patch = tape.gather(x, idx.clone())?;
            outs.push(tape.affine(patch, vars.get(self.weights[p]), vars.get(self.biases[p]))?);
        }
        let cat = tape.concat(&outs)?;
        Ok(tape.relu(cat))
    }
}

#[derive(Clone, Debug)]
pub struct Dnn {
    cfg: DnnConfig,
    local: LocallyConnected,
    dense: Vec<(ParamId, ParamId)>,
}

impl Dnn {
    pub fn new(cfg: DnnConfig, params: &mut ParamSet, prefix: &str, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let local = LocallyConnected::new(&cfg, params, prefix, rng);
        let mut dense = Vec::new();
        let mut fan_in = cfg.local_width();
        for (l, &width) in cfg.hidden.iter().enumerate() {
            let w = params.add(format!("{prefix}.fc.{l}.w"), glorot(width, fan_in, rng));
            let b = params.add(format!("{prefix}.fc.{l}.b"), Matrix::zeros(width, 1));
            dense.push((w, b));
            fan_in = width;
        }
        Ok(Dnn { cfg, local, dense })
    }

    pub fn config(&self) -> &DnnConfig {
        &self.cfg
    }

    pub fn local(&self) -> &LocallyConnected {
        &self.local
    }

    pub fn dense(&self) -> &[(ParamId, ParamId)] {
        &self.dense
    }

    /// Forward pass on a stacked input column; returns the linear last layer.
    pub fn forward(&self, tape: &mut Tape<'_>, vars: &ParamVars, x: Var) -> Result<Var> {
        let n = tape.value(x).len();
        if n != self.cfg.input_len() || !tape.value(x).is_vector() {
            return Err(Error::dim("dnn", format!("input of {n} values, expected {}", self.cfg.input_len())));
        }
        let mut h = self.local.forward(tape, vars, x)?;
        let last = self.dense.len() - 1;
        for (l, &(w, b)) in self.dense.iter().enumerate() {
            h = tape.affine(h, vars.get(w), vars.get(b))?;
            if l != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}
