//! Seeded multilayer perceptrons used for the feature extractor, the
//! classifier head and the domain discriminator.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    None,
    Sigmoid,
}

/// Layer widths `[d_in, h_1, ..., d_out]`; ReLU between layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, final_activation: FinalActivation) -> Result<Self> {
        let spec = Self {
            layer_widths,
            final_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::param("an MLP needs at least one layer (two widths)"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::param(format!(
                "layer widths must be positive: {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// Parameters are stored as `[W_0, b_0, W_1, b_1, ...]` with `W_l` of shape
/// `fan_in × fan_out` and `b_l` of shape `1 × fan_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: MlpSpec,
    pub seed: u64,
    pub params: Vec<Tensor>,
}

impl Model {
    /// Glorot-uniform weights, `U(-a, a)` with `a = √(6 / (fan_in + fan_out))`,
    /// drawn layer by layer in row-major order from one stream; zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut stream = Stream::new(seed);
        let mut params = Vec::with_capacity(2 * spec.layers());
        for w in spec.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| stream.uniform_in(-a, a))
                .collect();
            params.push(Tensor::new(vec![fan_in, fan_out], data)?);
            params.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Self { spec, seed, params })
    }

    /// Checks that parameter shapes follow the spec.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.params.len() != 2 * self.spec.layers() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                2 * self.spec.layers(),
                self.params.len()
            )));
        }
        for (l, w) in self.spec.layer_widths.windows(2).enumerate() {
            let (wt, bt) = (&self.params[2 * l], &self.params[2 * l + 1]);
            if wt.shape() != [w[0], w[1]] || bt.shape() != [1, w[1]] {
                return Err(Error::Checkpoint(format!(
                    "layer {l}: shapes {:?}/{:?} do not match widths {}→{}",
                    wt.shape(),
                    bt.shape(),
                    w[0],
                    w[1]
                )));
            }
        }
        Ok(())
    }

    /// Records the parameters on `tape` as gradient-requiring leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel<'_>> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel { model: self, vars })
    }

    /// Forward pass on a fresh tape, returning plain values.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let out = bound.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }
}

/// A model whose parameters live on a tape for one step.
pub struct BoundModel<'a> {
    model: &'a Model,
    vars: Vec<Var>,
}

impl<'a> BoundModel<'a> {
    /// Pairs a model with parameter handles recorded elsewhere (for
    /// instance by a gradient checker). `vars` must follow the parameter
    /// order of `model`.
    pub fn from_vars(model: &'a Model, vars: Vec<Var>) -> Self {
        assert_eq!(
            vars.len(),
            model.params.len(),
            "one var per parameter tensor"
        );
        Self { model, vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Affine → ReLU chain with the configured final activation.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let spec = &self.model.spec;
        let (_, d) = tape.value(x).dims2("mlp forward")?;
        if d != spec.input_dim() {
            return Err(Error::shape(
                "mlp forward",
                format!("input width {d}, model expects {}", spec.input_dim()),
            ));
        }
        let mut h = x;
        for l in 0..spec.layers() {
            let z = tape.matmul(h, self.vars[2 * l])?;
            h = tape.add_row(z, self.vars[2 * l + 1])?;
            if l + 1 < spec.layers() {
                h = tape.relu(h)?;
            }
        }
        match spec.final_activation {
            FinalActivation::None => Ok(h),
            FinalActivation::Sigmoid => tape.sigmoid(h),
        }
    }
}
