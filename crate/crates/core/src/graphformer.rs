//! Multi-head graph attention (GATv2 scoring) inside a pre-norm residual
//! block, and a Monte-Carlo probe comparing attention against quadrature of
//! the equivalent kernel integral.
//!
//! For an edge `j -> i` and head `h` the score is
//! `a_h . LeakyReLU(x_l[j] + x_r[i])` with `x_l = h W_src`, `x_r = h W_dst`
//! restricted to the head's channel block. Scores are normalised per target
//! node, the weighted sum of `x_l[j]` is taken, heads are concatenated and
//! projected by `W_o`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const NEGATIVE_SLOPE: f64 = 0.2;
pub const LN_EPS: f64 = 1e-5;

/// Parameter names of one block, in registration order.
pub const BLOCK_PARAM_NAMES: [&str; 13] =
    ["w_src", "w_dst", "a", "w_o", "b_o", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"];

/// Scalar count of one block of width `d`.
pub fn block_param_count(d: usize) -> usize {
    7 * d * d + 9 * d
}

/// Registers one block under `prefix.` in `store`.
///
/// With `zero_residual`, the attention output projection and the second FFN
/// layer start at zero so the block is the identity map.
pub fn register_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    heads: usize,
    zero_residual: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::arg(format!("width {d} not divisible by {heads} heads")));
    }
    let residual = if zero_residual { Init::Zeros } else { Init::Uniform };
    let name = |s: &str| format!("{prefix}.{s}");
    store.register(name("w_src"), &[d, d], Init::Uniform, None, rng)?;
    store.register(name("w_dst"), &[d, d], Init::Uniform, None, rng)?;
    store.register(name("a"), &[d], Init::Uniform, Some(d / heads), rng)?;
    store.register(name("w_o"), &[d, d], residual, None, rng)?;
    store.register(name("b_o"), &[d], Init::Zeros, None, rng)?;
    store.register(name("ln1_g"), &[d], Init::Ones, None, rng)?;
    store.register(name("ln1_b"), &[d], Init::Zeros, None, rng)?;
    store.register(name("ln2_g"), &[d], Init::Ones, None, rng)?;
    store.register(name("ln2_b"), &[d], Init::Zeros, None, rng)?;
    store.register(name("ffn_w1"), &[d, 2 * d], Init::Uniform, None, rng)?;
    store.register(name("ffn_b1"), &[2 * d], Init::Zeros, None, rng)?;
    store.register(name("ffn_w2"), &[2 * d, d], residual, None, rng)?;
    store.register(name("ffn_b2"), &[d], Init::Zeros, None, rng)?;
    Ok(())
}

/// Tape handles of the attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_src: Var,
    pub w_dst: Var,
    pub a: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub heads: usize,
}

/// Tape handles of a whole block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub attn: AttentionVars,
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

impl BlockVars {
    /// Looks up a block registered under `prefix`.
    pub fn from_bound(b: &Bound, prefix: &str, heads: usize) -> Result<Self> {
        let v: Vec<Var> = BLOCK_PARAM_NAMES.iter().map(|n| b.var(&format!("{prefix}.{n}"))).collect::<Result<_>>()?;
        Self::from_slice(&v, heads)
    }

    /// Builds from variables in [`BLOCK_PARAM_NAMES`] order.
    pub fn from_slice(v: &[Var], heads: usize) -> Result<Self> {
        if v.len() != BLOCK_PARAM_NAMES.len() {
            return Err(Error::arg(format!("block needs {} variables, got {}", BLOCK_PARAM_NAMES.len(), v.len())));
        }
        Ok(Self {
            attn: AttentionVars { w_src: v[0], w_dst: v[1], a: v[2], w_o: v[3], b_o: v[4], heads },
            ln1: (v[5], v[6]),
            ln2: (v[7], v[8]),
            ffn_w1: v[9],
            ffn_b1: v[10],
            ffn_w2: v[11],
            ffn_b2: v[12],
        })
    }
}

/// Intermediate results of one attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    /// `[E, H]` raw scores.
    pub scores: Var,
    /// `[E, H]` normalised weights.
    pub alpha: Var,
    /// `[N, d]` concatenated head outputs before the output projection.
    pub mixed: Var,
    /// `[N, d]` projected output.
    pub out: Var,
}

fn check_graph<T: Scalar>(tape: &Tape<T>, h: Var, g: &GraphTopology) -> Result<usize> {
    let s = tape.shape(h);
    if s.len() != 2 || s[0] != g.n_nodes() {
        return Err(Error::dim(format!("features {s:?} for a graph of {} nodes", g.n_nodes())));
    }
    if let Some(i) = g.in_degrees().iter().position(|&d| d == 0) {
        return Err(Error::Contract(format!("node {i} has no incoming edge")));
    }
    Ok(s[1])
}

fn locate_bad_score<T: Scalar>(tape: &Tape<T>, x_l: Var, x_r: Var, p: &AttentionVars, g: &GraphTopology) -> Error {
    let (xl, xr, a) = (tape.value(x_l), tape.value(x_r), tape.value(p.a).data());
    let d = xl.cols();
    let dk = d / p.heads;
    for &(src, dst) in g.edges() {
        for hd in 0..p.heads {
            let s: f64 = (hd * dk..(hd + 1) * dk)
                .map(|c| {
                    let z = xl.at(src, c).to_f64_lossless() + xr.at(dst, c).to_f64_lossless();
                    a[c].to_f64_lossless() * if z > 0.0 { z } else { NEGATIVE_SLOPE * z }
                })
                .sum();
            if !T::from_f64_lossy(s).is_finite() {
                return Error::Numeric(format!("non-finite attention score on edge {src} -> {dst}, head {hd}"));
            }
        }
    }
    Error::Numeric("non-finite attention score".into())
}

/// Per-edge, per-head scores `[E, H]`.
pub fn attention_scores<T: Scalar>(tape: &mut Tape<T>, h: Var, g: &GraphTopology, p: &AttentionVars) -> Result<Var> {
    let (_, s) = scores_inner(tape, h, g, p)?;
    Ok(s)
}

fn scores_inner<T: Scalar>(tape: &mut Tape<T>, h: Var, g: &GraphTopology, p: &AttentionVars) -> Result<(Var, Var)> {
    let d = check_graph(tape, h, g)?;
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::arg(format!("width {d} not divisible by {} heads", p.heads)));
    }
    let x_l = tape.matmul(h, p.w_src)?;
    let x_r = tape.matmul(h, p.w_dst)?;
    match tape.edge_scores(x_l, x_r, p.a, g.sources(), g.targets(), p.heads, NEGATIVE_SLOPE) {
        Ok(s) => Ok((x_l, s)),
        Err(e) if e.is_numeric() => Err(locate_bad_score(tape, x_l, x_r, p, g)),
        Err(e) => Err(e),
    }
}

/// Full attention with intermediate handles.
pub fn graph_attention_traced<T: Scalar>(tape: &mut Tape<T>, h: Var, g: &GraphTopology, p: &AttentionVars) -> Result<AttentionTrace> {
    let (x_l, scores) = scores_inner(tape, h, g, p)?;
    let alpha = tape.segment_softmax(scores, g.targets(), g.n_nodes())?;
    let mixed = tape.edge_aggregate(alpha, x_l, g.sources(), g.targets())?;
    let out = tape.linear(mixed, p.w_o, Some(p.b_o))?;
    Ok(AttentionTrace { scores, alpha, mixed, out })
}

pub fn graph_attention<T: Scalar>(tape: &mut Tape<T>, h: Var, g: &GraphTopology, p: &AttentionVars) -> Result<Var> {
    Ok(graph_attention_traced(tape, h, g, p)?.out)
}

/// `y = h + attn(LN(h))`, `out = y + W2 GELU(W1 LN(y))`.
pub fn graphformer_block<T: Scalar>(tape: &mut Tape<T>, h: Var, g: &GraphTopology, p: &BlockVars) -> Result<Var> {
    let n1 = tape.layer_norm(h, p.ln1.0, p.ln1.1, LN_EPS)?;
    let att = graph_attention(tape, n1, g, &p.attn)?;
    let y = tape.add(h, att)?;
    let n2 = tape.layer_norm(y, p.ln2.0, p.ln2.1, LN_EPS)?;
    let f1 = tape.linear(n2, p.ffn_w1, Some(p.ffn_b1))?;
    let f1 = tape.gelu(f1)?;
    let f2 = tape.linear(f1, p.ffn_w2, Some(p.ffn_b2))?;
    tape.add(y, f2)
}

// ---------------------------------------------------------------- kernel probe

/// Scalar attention parameters for the one-channel, one-head probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeParams {
    pub w_src: f64,
    pub w_dst: f64,
    pub a: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self { w_src: 1.3, w_dst: -0.7, a: 0.9 }
    }
}

/// One point of the probe's error curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub m: usize,
    pub attention: f64,
    pub quadrature: f64,
    pub error: f64,
}

/// Trapezoid points used for the reference integral.
pub const PROBE_QUADRATURE_POINTS: usize = 10_000;

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        NEGATIVE_SLOPE * x
    }
}

/// Normalised-kernel integral `int k(x, xi) W a(xi) dxi / int k(x, xi) dxi`
/// on `[0, 1]` with `k = exp(score)` and the attention score of the probe.
pub fn probe_quadrature(f: &dyn Fn(f64) -> f64, x: f64, p: ProbeParams) -> f64 {
    let n = PROBE_QUADRATURE_POINTS;
    let fx = f(x);
    let score = |xi: f64| p.a * leaky(p.w_src * f(xi) + p.w_dst * fx);
    let smax = (0..n).map(|i| score(i as f64 / (n - 1) as f64)).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let xi = i as f64 / (n - 1) as f64;
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let k = (score(xi) - smax).exp();
        num += w * k * p.w_src * f(xi);
        den += w * k;
    }
    num / den
}

/// Graph attention at query `x` over `m` uniform samples of `[0, 1]`, each
/// sample feeding the query and itself, compared against
/// [`probe_quadrature`], for each sample count in `ms`.
pub fn mc_integral_probe(ms: &[usize], f: &dyn Fn(f64) -> f64, x: f64, p: ProbeParams, seed: u64) -> Result<Vec<ProbeResult>> {
    use rand::Rng;
    let reference = probe_quadrature(f, x, p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(ms.len());
    for &m in ms {
        if m == 0 {
            return Err(Error::arg("probe sample count must be positive"));
        }
        let xi: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let mut feats: Vec<f64> = xi.iter().map(|&t| f(t)).collect();
        feats.push(f(x));
        let q = m;
        let g = GraphTopology::new(m + 1, (0..m).flat_map(|j| [(j, j), (j, q)]))?;
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::new(vec![m + 1, 1], feats)?);
        let vars = AttentionVars {
            w_src: tape.constant(Tensor::new(vec![1, 1], vec![p.w_src])?),
            w_dst: tape.constant(Tensor::new(vec![1, 1], vec![p.w_dst])?),
            a: tape.constant(Tensor::vector(vec![p.a])?),
            w_o: tape.constant(Tensor::new(vec![1, 1], vec![1.0])?),
            b_o: tape.constant(Tensor::vector(vec![0.0])?),
            heads: 1,
        };
        let y = graph_attention(&mut tape, h, &g, &vars)?;
        let attention = tape.value(y).at(q, 0);
        out.push(ProbeResult { m, attention, quadrature: reference, error: (attention - reference).abs() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> GraphTopology {
        let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        for s in 0..n {
            for t in 0..n {
                if rng.gen::<f64>() < p {
                    edges.push((s, t));
                }
            }
        }
        GraphTopology::new(n, edges).unwrap()
    }

    struct Raw {
        w_src: Tensor<f64>,
        w_dst: Tensor<f64>,
        a: Tensor<f64>,
        w_o: Tensor<f64>,
        b_o: Tensor<f64>,
    }

    fn raw_attention(rng: &mut ChaCha8Rng, d: usize) -> Raw {
        Raw {
            w_src: rand_tensor(rng, &[d, d], 1.0),
            w_dst: rand_tensor(rng, &[d, d], 1.0),
            a: rand_tensor(rng, &[d], 1.0),
            w_o: rand_tensor(rng, &[d, d], 1.0),
            b_o: rand_tensor(rng, &[d], 0.5),
        }
    }

    fn bind_attention(tape: &mut Tape<f64>, r: &Raw, heads: usize) -> AttentionVars {
        AttentionVars {
            w_src: tape.constant(r.w_src.clone()),
            w_dst: tape.constant(r.w_dst.clone()),
            a: tape.constant(r.a.clone()),
            w_o: tape.constant(r.w_o.clone()),
            b_o: tape.constant(r.b_o.clone()),
            heads,
        }
    }

    fn mat(t: &Tensor<f64>, v: &[f64]) -> Vec<f64> {
        // row vector v times matrix t
        let (r, c) = (t.rows(), t.cols());
        (0..c).map(|j| (0..r).map(|k| v[k] * t.at(k, j)).sum()).collect()
    }

    /// Dense reference: full N x N masked score matrix per head, row softmax
    /// over the in-neighbour mask, matrix product, output projection.
    fn dense_attention(h: &Tensor<f64>, g: &GraphTopology, r: &Raw, heads: usize) -> Vec<f64> {
        let n = h.rows();
        let d = h.cols();
        let dk = d / heads;
        let xl: Vec<Vec<f64>> = (0..n).map(|i| mat(&r.w_src, h.row(i))).collect();
        let xr: Vec<Vec<f64>> = (0..n).map(|i| mat(&r.w_dst, h.row(i))).collect();
        let mut mixed = vec![vec![0.0; d]; n];
        for hd in 0..heads {
            let mut s = vec![vec![f64::NEG_INFINITY; n]; n];
            for i in 0..n {
                for j in 0..n {
                    if g.contains(j, i) {
                        s[i][j] = (hd * dk..(hd + 1) * dk).map(|c| r.a.data()[c] * leaky(xl[j][c] + xr[i][c])).sum();
                    }
                }
            }
            for i in 0..n {
                let mx = s[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s[i].iter().map(|&v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    for c in hd * dk..(hd + 1) * dk {
                        mixed[i][c] += e[j] / z * xl[j][c];
                    }
                }
            }
        }
        mixed.iter().flat_map(|m| mat(&r.w_o, m).into_iter().zip(r.b_o.data()).map(|(x, b)| x + b).collect::<Vec<_>>()).collect()
    }

    #[test]
    fn sparse_attention_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(2..=16);
            let heads = [1, 2, 4][rng.gen_range(0..3)];
            let d = heads * rng.gen_range(1..=3);
            let g = random_graph(&mut rng, n, 0.3);
            let h = rand_tensor(&mut rng, &[n, d], 1.0);
            let r = raw_attention(&mut rng, d);
            let mut tape = Tape::new();
            let p = bind_attention(&mut tape, &r, heads);
            let hv = tape.constant(h.clone());
            let y = graph_attention(&mut tape, hv, &g, &p).unwrap();
            let want = dense_attention(&h, &g, &r, heads);
            for (a, b) in tape.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn hand_computed_scores_on_a_path() {
        // path 0 - 1 - 2 with self loops, d = 2, one head
        let g = GraphTopology::new(3, [(0, 0), (1, 1), (2, 2), (0, 1), (1, 0), (1, 2), (2, 1)]).unwrap();
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, -1.0]]).unwrap());
        let p = AttentionVars {
            w_src: tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap()),
            w_dst: tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap()),
            a: tape.constant(Tensor::vector(vec![1.0, -0.5]).unwrap()),
            w_o: tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()),
            b_o: tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap()),
            heads: 1,
        };
        let s = attention_scores(&mut tape, h, &g, &p).unwrap();
        // x_l = [[1,0],[0,2],[1,-2]], x_r = [[0,1],[-1,0],[1,1]]
        // edge order by (target, source): (0,0) (1,0) (0,1) (1,1) (2,1) (1,2) (2,2)
        let want = [
            1.0 * 1.0 - 0.5 * 1.0,       // x_l0 + x_r0 = [1, 1]
            0.2 * 0.0 * 1.0 - 0.5 * 3.0, // x_l1 + x_r0 = [0, 3]
            0.0 - 0.5 * 0.0,             // x_l0 + x_r1 = [0, 0]
            1.0 * -0.2 - 0.5 * 2.0,      // x_l1 + x_r1 = [-1, 2]
            0.0 - 0.5 * (0.2 * -2.0),    // x_l2 + x_r1 = [0, -2]
            1.0 * 1.0 - 0.5 * 3.0,       // x_l1 + x_r2 = [1, 3]
            2.0 - 0.5 * -0.2,            // x_l2 + x_r2 = [2, -1]
        ];
        assert_eq!(g.edges(), &[(0, 0), (1, 0), (0, 1), (1, 1), (2, 1), (1, 2), (2, 2)]);
        for (a, b) in tape.value(s).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_attention_vector_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_graph(&mut rng, 9, 0.4);
        let mut r = raw_attention(&mut rng, 4);
        r.a = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let p = bind_attention(&mut tape, &r, 2);
        let h = tape.constant(rand_tensor(&mut rng, &[9, 4], 1.0));
        let t = graph_attention_traced(&mut tape, h, &g, &p).unwrap();
        let deg = g.in_degrees();
        let alpha = tape.value(t.alpha);
        for (e, &(_, tgt)) in g.edges().iter().enumerate() {
            for hd in 0..2 {
                assert!((alpha.at(e, hd) - 1.0 / deg[tgt] as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_neighbours_get_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = GraphTopology::new(4, [(0, 0), (1, 1), (2, 2), (3, 3), (1, 0), (2, 0), (3, 0)]).unwrap();
        let row = vec![0.3, -0.2];
        let h = Tensor::from_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap();
        let r = raw_attention(&mut rng, 2);
        let mut tape = Tape::new();
        let p = bind_attention(&mut tape, &r, 1);
        let hv = tape.constant(h);
        let t = graph_attention_traced(&mut tape, hv, &g, &p).unwrap();
        for e in 0..4 {
            assert!((tape.value(t.alpha).at(e, 0) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn self_loops_with_identity_weights_are_a_fixed_point() {
        let g = GraphTopology::new(5, (0..5).map(|i| (i, i))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = rand_tensor(&mut rng, &[5, 3], 1.0);
        let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let r = Raw { w_src: eye.clone(), w_dst: eye.clone(), a: rand_tensor(&mut rng, &[3], 1.0), w_o: eye, b_o: Tensor::zeros(&[3]) };
        let mut tape = Tape::new();
        let p = bind_attention(&mut tape, &r, 1);
        let hv = tape.constant(h.clone());
        let y = graph_attention(&mut tape, hv, &g, &p).unwrap();
        assert_eq!(tape.value(y).data(), h.data());
    }

    #[test]
    fn star_centre_with_uniform_scores_is_the_mean() {
        let n = 6;
        let g = GraphTopology::new(n, (0..n).map(|i| (i, i)).chain((1..n).map(|j| (j, 0)))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = rand_tensor(&mut rng, &[n, 2], 1.0);
        let mut r = raw_attention(&mut rng, 2);
        r.a = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let p = bind_attention(&mut tape, &r, 1);
        let hv = tape.constant(h.clone());
        let t = graph_attention_traced(&mut tape, hv, &g, &p).unwrap();
        let proj: Vec<Vec<f64>> = (0..n).map(|i| mat(&r.w_src, h.row(i))).collect();
        for c in 0..2 {
            let mean = proj.iter().map(|v| v[c]).sum::<f64>() / n as f64;
            assert!((tape.value(t.mixed).at(0, c) - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn weights_sum_to_one_and_output_stays_in_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let n = rng.gen_range(3..=12);
            let g = random_graph(&mut rng, n, 0.4);
            let r = raw_attention(&mut rng, 4);
            let h = rand_tensor(&mut rng, &[n, 4], 2.0);
            let mut tape = Tape::new();
            let p = bind_attention(&mut tape, &r, 2);
            let hv = tape.constant(h.clone());
            let t = graph_attention_traced(&mut tape, hv, &g, &p).unwrap();
            let mut sums = vec![[0.0f64; 2]; n];
            for (e, &(_, tgt)) in g.edges().iter().enumerate() {
                for hd in 0..2 {
                    sums[tgt][hd] += tape.value(t.alpha).at(e, hd);
                }
            }
            assert!(sums.iter().flatten().all(|s| (s - 1.0).abs() < 1e-12));
            // 2-D hull membership per head by support functions
            let xl: Vec<Vec<f64>> = (0..n).map(|i| mat(&r.w_src, h.row(i))).collect();
            for i in 0..n {
                let nbrs: Vec<usize> = (0..n).filter(|&j| g.contains(j, i)).collect();
                for hd in 0..2 {
                    let px = tape.value(t.mixed).at(i, 2 * hd);
                    let py = tape.value(t.mixed).at(i, 2 * hd + 1);
                    for k in 0..360 {
                        let th = k as f64 * std::f64::consts::PI / 180.0;
                        let (ux, uy) = (th.cos(), th.sin());
                        let support = nbrs.iter().map(|&j| ux * xl[j][2 * hd] + uy * xl[j][2 * hd + 1]).fold(f64::NEG_INFINITY, f64::max);
                        assert!(ux * px + uy * py <= support + 1e-12);
                    }
                }
            }
        }
    }

    fn block_tensors(rng: &mut ChaCha8Rng, d: usize, zero_residual: bool) -> Vec<Tensor<f64>> {
        let mut store = ParamStore::new();
        register_block(&mut store, "b", d, 2, zero_residual, rng).unwrap();
        let mut ts = store.tensors().to_vec();
        if !zero_residual {
            // perturb norms and biases so every path is exercised
            for t in ts.iter_mut() {
                if t.shape().len() == 1 {
                    for v in t.data_mut() {
                        *v += rng.gen_range(-0.3..0.3);
                    }
                }
            }
        }
        ts
    }

    fn run_block(ts: &[Tensor<f64>], h: &Tensor<f64>, g: &GraphTopology) -> Tensor<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let p = BlockVars::from_slice(&vars, 2).unwrap();
        let hv = tape.constant(h.clone());
        let y = graphformer_block(&mut tape, hv, g, &p).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_graph(&mut rng, 10, 0.3);
        let h = rand_tensor(&mut rng, &[10, 6], 1.0);
        let ts = block_tensors(&mut rng, 6, true);
        let y = run_block(&ts, &h, &g);
        assert_eq!(y.shape(), h.shape());
        assert_eq!(y.data(), h.data());
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let n = rng.gen_range(2..=14);
            let g = random_graph(&mut rng, n, 0.3);
            let h = rand_tensor(&mut rng, &[n, 4], 1.0);
            let ts = block_tensors(&mut rng, 4, false);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let mut hp = vec![0.0; n * 4];
            for i in 0..n {
                hp[perm[i] * 4..perm[i] * 4 + 4].copy_from_slice(h.row(i));
            }
            let y = run_block(&ts, &h, &g);
            let yp = run_block(&ts, &Tensor::new(vec![n, 4], hp).unwrap(), &g.relabel(&perm).unwrap());
            for i in 0..n {
                for c in 0..4 {
                    assert!((y.at(i, c) - yp.at(perm[i], c)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = random_graph(&mut rng, 12, 0.25);
        let h = rand_tensor(&mut rng, &[12, 4], 1.0);
        let mut params = block_tensors(&mut rng, 4, false);
        params.push(h);
        let report = grad_check(
            |tape, v| {
                let p = BlockVars::from_slice(&v[..13], 2)?;
                let y = graphformer_block(tape, v[13], &g, &p)?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error());
    }

    #[test]
    fn isolated_node_is_a_contract_violation() {
        let g = GraphTopology::new(3, [(0, 0), (1, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let r = raw_attention(&mut rng, 2);
        let mut tape = Tape::new();
        let p = bind_attention(&mut tape, &r, 1);
        let h = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(graph_attention(&mut tape, h, &g, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn overflowing_score_names_the_edge() {
        let g = GraphTopology::new(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        let mut tape = Tape::new();
        let one = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let p = AttentionVars {
            w_src: tape.constant(one(1e100)),
            w_dst: tape.constant(one(1.0)),
            a: tape.constant(Tensor::vector(vec![1e10]).unwrap()),
            w_o: tape.constant(one(1.0)),
            b_o: tape.constant(Tensor::vector(vec![0.0]).unwrap()),
            heads: 1,
        };
        let h = tape.constant(Tensor::new(vec![3, 1], vec![0.5, -0.25, 1e200]).unwrap());
        match graph_attention(&mut tape, h, &g, &p) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("edge 2 -> 0"), "{msg}"),
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }

    #[test]
    fn macs_are_affine_in_edges_and_quadratic_in_width() {
        let count = |n: usize, extra: usize, d: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
            edges.extend((0..n * n).map(|k| (k % n, k / n)).filter(|(s, t)| s != t).take(extra));
            let g = GraphTopology::new(n, edges).unwrap();
            assert_eq!(g.n_edges(), n + extra);
            let ts = block_tensors(&mut rng, d, false);
            let mut tape = Tape::new();
            let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
            let p = BlockVars::from_slice(&vars, 2).unwrap();
            let hv = tape.constant(rand_tensor(&mut rng, &[n, d], 1.0));
            graphformer_block(&mut tape, hv, &g, &p).unwrap();
            tape.macs() as i64
        };
        let (m1, m2, m4) = (count(64, 200, 8), count(64, 400, 8), count(64, 800, 8));
        assert_eq!(m4 - m2, 2 * (m2 - m1));
        assert!(m2 - m1 > 0);
        let w = |d: usize| count(64, 400, d);
        let (a, b, c) = (w(8), w(16), w(32));
        // second differences of a quadratic in d grow 4x per doubling
        let r = (c - b) as f64 / (b - a) as f64;
        assert!(r > 3.0 && r <= 4.0, "ratio {r}");
    }

    #[test]
    fn probe_zero_function_and_uniform_kernel() {
        let zero = |_: f64| 0.0;
        let r = mc_integral_probe(&[16, 64], &zero, 0.3, ProbeParams::default(), 1).unwrap();
        assert!(r.iter().all(|p| p.attention == 0.0 && p.quadrature == 0.0));
        let f = |t: f64| (2.0 * std::f64::consts::PI * t).sin();
        let p = ProbeParams { a: 0.0, ..ProbeParams::default() };
        let q = probe_quadrature(&f, 0.3, p);
        assert!(q.abs() < 1e-12);
        let r = mc_integral_probe(&[4096], &f, 0.3, p, 2).unwrap();
        assert!(r[0].error < 0.05);
    }

    #[test]
    fn probe_error_decays() {
        let f = |t: f64| (2.0 * std::f64::consts::PI * t).sin();
        let ms = [16, 64, 256, 1024];
        let mut errs = vec![Vec::new(); ms.len()];
        for seed in 0..20 {
            for (k, r) in mc_integral_probe(&ms, &f, 0.3, ProbeParams::default(), seed).unwrap().iter().enumerate() {
                errs[k].push(r.error);
            }
        }
        let med = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (v[9] + v[10]) / 2.0
        };
        let m16 = med(&mut errs[0]);
        let m1024 = med(&mut errs[3]);
        assert!(m1024 * 4.0 <= m16, "{m16} vs {m1024}");
    }
}
