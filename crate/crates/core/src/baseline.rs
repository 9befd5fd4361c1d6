//! Pointwise MLP baseline: every node is mapped independently from
//! `[inputs | positions]` to its prediction, with no graph structure.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NeuralOperator;
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: usize,
    /// Number of linear layers (GELU between consecutive ones).
    pub layers: usize,
    pub d_pos: usize,
    pub d_a: usize,
    pub d_u: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { hidden: 64, layers: 4, d_pos: 2, d_a: 1, d_u: 1, seed: 0 }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers < 2 || self.d_pos == 0 || self.d_a == 0 || self.d_u == 0 {
            return Err(Error::arg(format!("invalid MLP config {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_a + self.d_pos];
        w.extend(std::iter::repeat_n(self.hidden, self.layers - 1));
        w.push(self.d_u);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpBaseline<T> {
    pub config: MlpConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> MlpBaseline<T> {
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for (i, w) in config.widths().windows(2).enumerate() {
            params.register(format!("mlp.w{i}"), &[w[0], w[1]], Init::Uniform, None, &mut rng)?;
            params.register(format!("mlp.b{i}"), &[w[1]], Init::Zeros, None, &mut rng)?;
        }
        Ok(Self { config, params })
    }
}

impl<T: Scalar> NeuralOperator<T> for MlpBaseline<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn record(&self, tape: &mut Tape<T>, bound: &Bound, positions: &Tensor<T>, inputs: &Tensor<T>) -> Result<Var> {
        let c = &self.config;
        if positions.shape().len() != 2
            || inputs.shape().len() != 2
            || positions.cols() != c.d_pos
            || inputs.cols() != c.d_a
            || positions.rows() != inputs.rows()
        {
            return Err(Error::arg(format!(
                "positions {:?} / inputs {:?} do not match d_pos = {}, d_a = {}",
                positions.shape(),
                inputs.shape(),
                c.d_pos,
                c.d_a
            )));
        }
        let a = tape.constant(inputs.clone());
        let p = tape.constant(positions.clone());
        let mut h = tape.concat_cols(&[a, p])?;
        for i in 0..c.layers {
            if i > 0 {
                h = tape.gelu(h)?;
            }
            h = tape.linear(h, bound.var(&format!("mlp.w{i}"))?, Some(bound.var(&format!("mlp.b{i}"))?))?;
        }
        Ok(h)
    }
}
