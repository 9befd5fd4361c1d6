//! Encoder, multi-graph processing layers and decoder.
//!
//! Each processing layer rebuilds its local and global graphs from the
//! current features, runs one GraphFormer block on each, exchanges
//! information through `M` virtual physics nodes and finishes with a
//! pre-norm feed-forward residual.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FpsStart, PointSet};
use crate::graph::{build_global_graph, build_local_graph, build_physics_graph, global_sample_count, GraphTopology, MultiGraph};
use crate::graphformer::{block_param_count, graphformer_block, register_block, BlockVars, LN_EPS};
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Guard added to the per-channel feature sums used by the physics nodes.
pub const PHYSICS_EPS: f64 = 1e-6;

/// How the FPS start point of each graph build is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpsMode {
    /// Drawn from a generator keyed by (seed, layer, purpose).
    #[default]
    Seeded,
    /// Lexicographically smallest position; independent of node order.
    Canonical,
}

/// Architecture and graph hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub local_n: usize,
    pub local_k: usize,
    pub global_r: f64,
    pub global_k: usize,
    pub physics_m: usize,
    pub hf_ratio: f64,
    pub d_pos: usize,
    pub d_a: usize,
    pub d_u: usize,
    pub seed: u64,
    pub fps_mode: FpsMode,
    /// Start residual branches at zero so the processor is the identity.
    pub zero_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            layers: 3,
            heads: 8,
            local_n: 1024,
            local_k: 6,
            global_r: 0.25,
            global_k: 4,
            physics_m: 32,
            hf_ratio: 2.0,
            d_pos: 2,
            d_a: 1,
            d_u: 1,
            seed: 0,
            fps_mode: FpsMode::Seeded,
            zero_residual: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.d_h == 0 || self.heads == 0 || !self.d_h.is_multiple_of(self.heads) {
            return bad(format!("d_h = {} must be a positive multiple of heads = {}", self.d_h, self.heads));
        }
        if self.layers == 0 || self.physics_m == 0 || self.local_n == 0 {
            return bad("layers, physics_m and local_n must be positive".into());
        }
        if !(self.global_r > 0.0 && self.global_r <= 1.0) {
            return bad(format!("global_r = {} outside (0, 1]", self.global_r));
        }
        if !(self.hf_ratio > 1.0) {
            return bad(format!("hf_ratio = {} must exceed 1", self.hf_ratio));
        }
        if !(2..=3).contains(&self.d_pos) || self.d_a == 0 || self.d_u == 0 {
            return bad(format!("unsupported dims d_pos={} d_a={} d_u={}", self.d_pos, self.d_a, self.d_u));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    /// encoder `(d_a + d_pos) d + d + d^2 + d`,
    /// per layer `(25 + M) d^2 + 32 d`,
    /// decoder `d^2 + d + d d_u + d_u`.
    pub fn param_count(&self) -> usize {
        let d = self.d_h;
        let enc = (self.d_a + self.d_pos) * d + d + d * d + d;
        let layer = 3 * block_param_count(d) + self.physics_m * d * d + 4 * d * d + 5 * d;
        let dec = d * d + d + d * self.d_u + self.d_u;
        enc + self.layers * layer + dec
    }

    fn fps_start(&self, layer: usize, purpose: u64) -> FpsStart {
        match self.fps_mode {
            FpsMode::Canonical => FpsStart::Canonical,
            FpsMode::Seeded => {
                let key = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((layer as u64) << 8 | purpose);
                FpsStart::Seeded(key)
            }
        }
    }
}

/// Anything the training loop can optimise.
pub trait NeuralOperator<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Records the prediction `[N, d_u]` for one sample on `tape`.
    fn record(&self, tape: &mut Tape<T>, bound: &Bound, positions: &Tensor<T>, inputs: &Tensor<T>) -> Result<Var>;

    /// Prediction without gradients.
    fn predict(&self, positions: &Tensor<T>, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params().bind(&mut tape, false);
        let y = self.record(&mut tape, &bound, positions, inputs)?;
        Ok(tape.value(y).clone())
    }
}

/// Multi-graph neural operator.
#[derive(Clone, Debug, PartialEq)]
pub struct AmgModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn register_mlp2<T: Scalar>(
    s: &mut ParamStore<T>,
    prefix: &str,
    d_in: usize,
    d_mid: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    s.register(format!("{prefix}.w1"), &[d_in, d_mid], Init::Uniform, None, rng)?;
    s.register(format!("{prefix}.b1"), &[d_mid], Init::Zeros, None, rng)?;
    s.register(format!("{prefix}.w2"), &[d_mid, d_out], Init::Uniform, None, rng)?;
    s.register(format!("{prefix}.b2"), &[d_out], Init::Zeros, None, rng)?;
    Ok(())
}

fn mlp2<T: Scalar>(tape: &mut Tape<T>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.linear(x, b.var(&format!("{prefix}.w1"))?, Some(b.var(&format!("{prefix}.b1"))?))?;
    let h = tape.gelu(h)?;
    tape.linear(h, b.var(&format!("{prefix}.w2"))?, Some(b.var(&format!("{prefix}.b2"))?))
}

/// Handles of one processing layer's own (non-block) parameters.
struct LayerVars {
    wv: Var,
    post_ln: (Var, Var),
    post_w1: Var,
    post_b1: Var,
    post_w2: Var,
    post_b2: Var,
}

/// Graphs and intermediate features recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub graphs: Vec<MultiGraph>,
    /// Encoder output.
    pub encoded: Option<Var>,
    /// Processor output (input to the decoder).
    pub processed: Option<Var>,
}

impl<T: Scalar> AmgModel<T> {
    /// Fresh model with weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let d = config.d_h;
        let m = config.physics_m;
        let residual = if config.zero_residual { Init::Zeros } else { Init::Uniform };
        register_mlp2(&mut s, "enc", config.d_a + config.d_pos, d, d, &mut rng)?;
        for l in 0..config.layers {
            for part in ["local", "global", "phys"] {
                register_block(&mut s, &format!("layer{l}.{part}"), d, config.heads, config.zero_residual, &mut rng)?;
            }
            s.register(format!("layer{l}.wv"), &[d, m * d], residual, Some(d), &mut rng)?;
            s.register(format!("layer{l}.post_ln_g"), &[d], Init::Ones, None, &mut rng)?;
            s.register(format!("layer{l}.post_ln_b"), &[d], Init::Zeros, None, &mut rng)?;
            s.register(format!("layer{l}.post_w1"), &[d, 2 * d], Init::Uniform, None, &mut rng)?;
            s.register(format!("layer{l}.post_b1"), &[2 * d], Init::Zeros, None, &mut rng)?;
            s.register(format!("layer{l}.post_w2"), &[2 * d, d], residual, None, &mut rng)?;
            s.register(format!("layer{l}.post_b2"), &[d], Init::Zeros, None, &mut rng)?;
        }
        register_mlp2(&mut s, "dec", d, d, config.d_u, &mut rng)?;
        debug_assert_eq!(s.count(), config.param_count());
        Ok(Self { config, params: s })
    }

    fn layer_vars(&self, b: &Bound, l: usize) -> Result<LayerVars> {
        let v = |n: &str| b.var(&format!("layer{l}.{n}"));
        Ok(LayerVars {
            wv: v("wv")?,
            post_ln: (v("post_ln_g")?, v("post_ln_b")?),
            post_w1: v("post_w1")?,
            post_b1: v("post_b1")?,
            post_w2: v("post_w2")?,
            post_b2: v("post_b2")?,
        })
    }

    fn check_sample(&self, positions: &Tensor<T>, inputs: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        if positions.shape().len() != 2 || positions.cols() != c.d_pos {
            return Err(Error::arg(format!("positions {:?}, expected [N, {}]", positions.shape(), c.d_pos)));
        }
        if inputs.shape().len() != 2 || inputs.cols() != c.d_a || inputs.rows() != positions.rows() {
            return Err(Error::arg(format!("inputs {:?} for {} positions, expected [N, {}]", inputs.shape(), positions.rows(), c.d_a)));
        }
        if positions.rows() == 0 {
            return Err(Error::arg("empty sample"));
        }
        Ok(())
    }

    /// Node features `[N, d_h]` from `[inputs | positions]`.
    pub fn encode(&self, tape: &mut Tape<T>, b: &Bound, positions: &Tensor<T>, inputs: &Tensor<T>) -> Result<Var> {
        self.check_sample(positions, inputs)?;
        let a = tape.constant(inputs.clone());
        let p = tape.constant(positions.clone());
        let x = tape.concat_cols(&[a, p])?;
        mlp2(tape, b, "enc", x)
    }

    /// Virtual physics node features `[M, d]` and the channel sums used
    /// as the normaliser of the aggregation weights.
    ///
    /// With `W_v^(j)` the `j`-th column block of `wv`, the weight of node `i`
    /// for physics node `j` is `e_ij = (h_i W_v^(j)) / S` channelwise, where
    /// `S` is the column sum of `h`, and `v_j = sum_i e_ij * h_i`. Summing
    /// over `i` first gives `v_j[c] = sum_k G[k, c] W_v^(j)[k, c] / S[c]`
    /// with `G = h^T h`.
    pub fn aggregate_to_physics(&self, tape: &mut Tape<T>, h: Var, wv: Var) -> Result<(Var, Var)> {
        let d = self.config.d_h;
        let m = self.config.physics_m;
        let s = tape.sum_rows(h)?;
        let ht = tape.transpose(h)?;
        let g = tape.matmul(ht, h)?;
        let g_rep = tape.repeat_cols(g, m)?;
        let prod = tape.mul(wv, g_rep)?;
        let col = tape.sum_rows(prod)?;
        let v = tape.reshape(col, &[m, d])?;
        let v = tape.div_eps(v, s, PHYSICS_EPS)?;
        Ok((v, s))
    }

    /// `h + sum_j e_ij * v'_j` where `v'` is the physics block output; the
    /// aggregation weights `e_ij` are reused for the scatter back, which
    /// reduces to `h + h B` with `B[k, c] = sum_j W_v^(j)[k, c] v'_j[c] / S[c]`.
    pub fn physics_propagate(&self, tape: &mut Tape<T>, h: Var, wv: Var, block: &BlockVars, physics: &GraphTopology) -> Result<Var> {
        let d = self.config.d_h;
        let m = self.config.physics_m;
        let (v, s) = self.aggregate_to_physics(tape, h, wv)?;
        let v_out = graphformer_block(tape, v, physics, block)?;
        let flat = tape.reshape(v_out, &[m * d])?;
        let weighted = tape.mul(wv, flat)?;
        let folded = tape.fold_cols(weighted, m)?;
        let bmat = tape.div_eps(folded, s, PHYSICS_EPS)?;
        let delta = tape.matmul(h, bmat)?;
        tape.add(h, delta)
    }

    /// Local sizes after clamping to the node count.
    pub fn effective_local(&self, n: usize) -> (usize, usize) {
        let ln = self.config.local_n.min(n);
        (ln, self.config.local_k.min(ln.saturating_sub(1)))
    }

    pub fn effective_global_k(&self, n: usize) -> usize {
        let m = global_sample_count(self.config.global_r, n);
        self.config.global_k.min(m.saturating_sub(1))
    }

    fn local_graph(&self, points: &PointSet<T>, h: &Tensor<T>, layer: usize) -> Result<(Vec<usize>, GraphTopology, Vec<f64>)> {
        let n = points.len();
        let (ln, lk) = self.effective_local(n);
        let start = self.config.fps_start(layer, 1);
        if n < 4 {
            // too few points for the indicator; every node is selected
            let sel: Vec<usize> = (0..n).collect();
            let edges = (0..n).flat_map(|i| (0..n).map(move |j| (i, j)));
            return Ok((sel, GraphTopology::new(n, edges)?, vec![0.0; n]));
        }
        let (sel, g, hf) = build_local_graph(points, h, ln, lk, self.config.hf_ratio, start)?;
        Ok((sel, g, hf.iter().map(|v| v.to_f64_lossless()).collect()))
    }

    /// One processing layer; returns the output and the graphs it built.
    pub fn process_layer(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        h: Var,
        points: &PointSet<T>,
        physics: &GraphTopology,
        layer: usize,
    ) -> Result<(Var, MultiGraph)> {
        let c = &self.config;
        let n = points.len();
        let local_p = BlockVars::from_bound(b, &format!("layer{layer}.local"), c.heads)?;
        let global_p = BlockVars::from_bound(b, &format!("layer{layer}.global"), c.heads)?;
        let phys_p = BlockVars::from_bound(b, &format!("layer{layer}.phys"), c.heads)?;
        let lv = self.layer_vars(b, layer)?;

        let (local_sel, local_g, hf) = self.local_graph(points, tape.value(h), layer)?;
        let h_local = graphformer_block(tape, h, &local_g, &local_p)?;

        let gk = self.effective_global_k(n);
        let (global_sel, global_g) = build_global_graph(points, tape.value(h_local), c.global_r, gk, c.fps_start(layer, 2))?;
        let h_global = graphformer_block(tape, h_local, &global_g, &global_p)?;

        let h_phys = self.physics_propagate(tape, h_global, lv.wv, &phys_p, physics)?;

        let z = tape.layer_norm(h_phys, lv.post_ln.0, lv.post_ln.1, LN_EPS)?;
        let z = tape.linear(z, lv.post_w1, Some(lv.post_b1))?;
        let z = tape.gelu(z)?;
        let z = tape.linear(z, lv.post_w2, Some(lv.post_b2))?;
        let out = tape.add(h_phys, z)?;
        let graphs = MultiGraph {
            local: local_g,
            global: global_g,
            physics: physics.clone(),
            local_selected: local_sel,
            global_selected: global_sel,
            hf_indicator: hf,
        };
        Ok((out, graphs))
    }

    /// Full forward pass with the per-layer graphs.
    pub fn forward_traced(&self, tape: &mut Tape<T>, b: &Bound, positions: &Tensor<T>, inputs: &Tensor<T>) -> Result<(Var, ForwardTrace)> {
        let points = PointSet::from_tensor(positions)?;
        let physics = build_physics_graph(self.config.physics_m)?;
        let mut h = self.encode(tape, b, positions, inputs)?;
        let mut trace = ForwardTrace { encoded: Some(h), ..Default::default() };
        for l in 0..self.config.layers {
            let (out, graphs) = self.process_layer(tape, b, h, &points, &physics, l)?;
            h = out;
            trace.graphs.push(graphs);
        }
        trace.processed = Some(h);
        let y = mlp2(tape, b, "dec", h)?;
        Ok((y, trace))
    }

    /// Graphs of layer 0 for the given sample.
    pub fn inspect_graphs(&self, positions: &Tensor<T>, inputs: &Tensor<T>) -> Result<MultiGraph> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let points = PointSet::from_tensor(positions)?;
        let physics = build_physics_graph(self.config.physics_m)?;
        let h = self.encode(&mut tape, &b, positions, inputs)?;
        Ok(self.process_layer(&mut tape, &b, h, &points, &physics, 0)?.1)
    }
}

impl<T: Scalar> NeuralOperator<T> for AmgModel<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn record(&self, tape: &mut Tape<T>, bound: &Bound, positions: &Tensor<T>, inputs: &Tensor<T>) -> Result<Var> {
        Ok(self.forward_traced(tape, bound, positions, inputs)?.0)
    }
}
