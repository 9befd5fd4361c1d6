//! Objective, metrics, Adam, learning-rate schedule and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, SampleRecord};
use crate::error::{Error, Result};
use crate::model::NeuralOperator;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub decay_interval: usize,
    /// Samples whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (the last epoch always is).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 500, lr: 1e-3, gamma: 0.5, decay_interval: 100, batch_size: 4, seed: 0, checkpoint_every: 10 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.gamma > 0.0) || self.decay_interval == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::arg(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// `lr0 * gamma^floor(epoch / interval)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = epoch / cfg.decay_interval;
    cfg.lr * cfg.gamma.powi(k.min(i32::MAX as usize) as i32)
}

/// `(1/N) Σ_i ‖pred_i − target_i‖²` on the tape.
pub fn mse_objective<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) || tape.shape(pred).len() != 2 {
        return Err(Error::dim(format!("prediction {:?} vs target {:?}", tape.shape(pred), tape.shape(target))));
    }
    let n = tape.shape(pred)[0];
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / n as f64)
}

/// `‖pred − target‖₂ / ‖target‖₂` per output channel; `None` where the
/// target channel is identically zero.
pub fn relative_l2<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<Option<f64>>> {
    if pred.shape() != target.shape() || pred.shape().len() != 2 {
        return Err(Error::dim(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let c = pred.cols();
    let mut num = vec![0.0; c];
    let mut den = vec![0.0; c];
    for (pr, tr) in pred.data().chunks_exact(c).zip(target.data().chunks_exact(c)) {
        for j in 0..c {
            let (p, t) = (pr[j].to_f64_lossless(), tr[j].to_f64_lossless());
            num[j] += (p - t) * (p - t);
            den[j] += t * t;
        }
    }
    Ok(num.iter().zip(&den).map(|(n, d)| (*d > 0.0).then(|| (n / d).sqrt())).collect())
}

/// Per-channel mean over samples, skipping flagged (undefined) entries.
/// Also returns how many entries were flagged.
pub fn mean_relative_l2(per_sample: &[Vec<Option<f64>>]) -> (Vec<Option<f64>>, usize) {
    let c = per_sample.first().map_or(0, Vec::len);
    let mut flagged = 0;
    let means = (0..c)
        .map(|j| {
            let vals: Vec<f64> = per_sample.iter().filter_map(|s| s[j]).collect();
            flagged += per_sample.len() - vals.len();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    (means, flagged)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    fn check(&self, params: &ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        let tensors = params.tensors();
        if grads.len() != tensors.len() || self.m.len() != tensors.len() || self.v.len() != tensors.len() {
            return Err(Error::dim("optimizer state, gradients and parameters disagree in count"));
        }
        for (((name, t), g), (m, v)) in params.names().iter().zip(tensors).zip(grads).zip(self.m.iter().zip(&self.v)) {
            if g.len() != t.numel() || m.len() != t.numel() || v.len() != t.numel() {
                return Err(Error::dim(format!("optimizer state or gradient of {name} has the wrong length")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name}; step rejected")));
            }
        }
        Ok(())
    }

    /// One update with learning rate `lr`; rejected as a whole (nothing
    /// modified) when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        self.check(params, grads)?;
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps, one) = (T::lit(lr), T::lit(self.eps), T::one());
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Per-channel affine maps applied to inputs and targets before they reach
/// a model. Targets are only rescaled, so a zero prediction keeps a
/// relative error of exactly 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_rms: Vec<f64>,
}

impl Normalizer {
    pub fn identity(d_a: usize, d_u: usize) -> Self {
        Self { input_mean: vec![0.0; d_a], input_std: vec![1.0; d_a], target_rms: vec![1.0; d_u] }
    }

    /// Statistics of the given (training) records; degenerate channels get
    /// unit scale.
    pub fn fit(records: &[SampleRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::arg("cannot fit a normaliser on zero records"))?;
        let (d_a, d_u) = (first.d_a, first.d_u);
        let mut count = 0usize;
        let mut sum = vec![0.0; d_a];
        let mut sq = vec![0.0; d_a];
        let mut tsq = vec![0.0; d_u];
        for r in records {
            if r.d_a != d_a || r.d_u != d_u {
                return Err(Error::dim(format!("record {} widths differ from the first record", r.id)));
            }
            count += r.n;
            for row in r.inputs.chunks_exact(d_a) {
                for j in 0..d_a {
                    sum[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
            }
            for row in r.targets.chunks_exact(d_u) {
                for j in 0..d_u {
                    tsq[j] += row[j] * row[j];
                }
            }
        }
        let n = count as f64;
        let input_mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let input_std = sq
            .iter()
            .zip(&input_mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let target_rms = tsq.iter().map(|s| if *s > 0.0 { (s / n).sqrt() } else { 1.0 }).collect();
        Ok(Self { input_mean, input_std, target_rms })
    }

    pub fn prepare<T: Scalar>(&self, r: &SampleRecord) -> Result<Prepared<T>> {
        if r.d_a != self.input_mean.len() || r.d_u != self.target_rms.len() {
            return Err(Error::dim(format!(
                "record {} has widths d_a = {}, d_u = {}; normaliser expects {}, {}",
                r.id,
                r.d_a,
                r.d_u,
                self.input_mean.len(),
                self.target_rms.len()
            )));
        }
        let inputs: Vec<T> = r
            .inputs
            .chunks_exact(r.d_a)
            .flat_map(|row| row.iter().enumerate().map(|(j, &x)| T::from_f64_lossy((x - self.input_mean[j]) / self.input_std[j])))
            .collect();
        let targets: Vec<T> = r
            .targets
            .chunks_exact(r.d_u)
            .flat_map(|row| row.iter().enumerate().map(|(j, &x)| T::from_f64_lossy(x / self.target_rms[j])))
            .collect();
        Ok(Prepared {
            id: r.id,
            positions: r.positions_tensor(),
            inputs: Tensor::new(vec![r.n, r.d_a], inputs)?,
            targets: Tensor::new(vec![r.n, r.d_u], targets)?,
        })
    }

    /// Maps normalised predictions back to physical units.
    pub fn denormalize<T: Scalar>(&self, pred: &Tensor<T>) -> Vec<f64> {
        let c = self.target_rms.len();
        pred.data().iter().enumerate().map(|(k, v)| v.to_f64_lossless() * self.target_rms[k % c]).collect()
    }
}

/// A record converted to model-ready tensors (normalised).
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared<T> {
    pub id: u64,
    pub positions: Tensor<T>,
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
}

/// Loss of one sample with gradients left on `tape`.
pub fn sample_loss<T: Scalar, M: NeuralOperator<T> + ?Sized>(
    model: &M,
    tape: &mut Tape<T>,
    bound: &crate::params::Bound,
    s: &Prepared<T>,
) -> Result<Var> {
    let pred = model.record(tape, bound, &s.positions, &s.inputs)?;
    let target = tape.constant(s.targets.clone());
    mse_objective(tape, pred, target)
}

/// Mean relative L2 of `model` over `samples` (normalised space, which
/// leaves the metric unchanged) and the number of flagged entries.
pub fn evaluate<T: Scalar, M: NeuralOperator<T> + ?Sized>(model: &M, samples: &[Prepared<T>]) -> Result<(Vec<Option<f64>>, usize)> {
    let per = samples.iter().map(|s| relative_l2(&model.predict(&s.positions, &s.inputs)?, &s.targets)).collect::<Result<Vec<_>>>()?;
    Ok(mean_relative_l2(&per))
}

/// One row of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Per output channel; `None` if undefined for every sample.
    pub val_rel_l2: Vec<Option<f64>>,
    pub lr: f64,
    pub wall_time_s: f64,
}

impl EpochMetrics {
    pub fn csv_header(d_u: usize) -> String {
        let mut cols = vec!["epoch".to_string(), "train_loss".into()];
        cols.extend(channel_names(d_u).into_iter().map(|c| format!("val_rel_l2_{c}")));
        cols.push("lr".into());
        cols.push("wall_time_s".into());
        cols.join(",")
    }

    /// CSV row; floats use the shortest representation that parses back to
    /// the same bits.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.epoch.to_string(), format!("{:?}", self.train_loss)];
        cols.extend(self.val_rel_l2.iter().map(|v| v.map_or_else(|| "nan".to_string(), |x| format!("{x:?}"))));
        cols.push(format!("{:?}", self.lr));
        cols.push(format!("{:.3}", self.wall_time_s));
        cols.join(",")
    }
}

/// Output channel names: `u` for a single channel, `u0, u1, ...` otherwise.
pub fn channel_names(d_u: usize) -> Vec<String> {
    if d_u == 1 {
        vec!["u".into()]
    } else {
        (0..d_u).map(|j| format!("u{j}")).collect()
    }
}

/// Optimizer state plus progress; everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub adam: Adam<T>,
    pub epochs_completed: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self { adam: Adam::new(params), epochs_completed: 0 }
    }
}

/// Sample order of `epoch`: Fisher–Yates driven by a generator keyed on
/// `(seed, epoch)`, so a resumed run needs no stored generator state.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE90C_0000 + epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Trains from `state.epochs_completed` up to `cfg.epochs`, calling
/// `on_epoch` after every epoch (metrics, model and state are final for
/// that epoch). A non-finite loss or gradient aborts with a numeric error.
pub fn train<T, M, F>(
    model: &mut M,
    state: &mut TrainState<T>,
    train_set: &[Prepared<T>],
    val_set: &[Prepared<T>],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<()>
where
    T: Scalar,
    M: NeuralOperator<T>,
    F: FnMut(&EpochMetrics, &M, &TrainState<T>) -> Result<()>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let numels: Vec<usize> = model.params().tensors().iter().map(Tensor::numel).collect();
    while state.epochs_completed < cfg.epochs {
        let epoch = state.epochs_completed;
        let started = Instant::now();
        let lr = lr_schedule(epoch, cfg);
        let mut accum: Vec<Vec<T>> = numels.iter().map(|&n| vec![T::zero(); n]).collect();
        let mut in_batch = 0usize;
        let mut loss_sum = 0.0;
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        for (pos, &idx) in order.iter().enumerate() {
            let sample = &train_set[idx];
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let loss = sample_loss(&*model, &mut tape, &bound, sample).map_err(|e| tag_sample(e, epoch, sample.id))?;
            let value = tape.value(loss).item().to_f64_lossless();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, sample {}", sample.id)));
            }
            loss_sum += value;
            tape.backward(loss).map_err(|e| tag_sample(e, epoch, sample.id))?;
            for (acc, g) in accum.iter_mut().zip(bound.grads(&tape)) {
                for (a, g) in acc.iter_mut().zip(g) {
                    *a += g;
                }
            }
            in_batch += 1;
            if in_batch == cfg.batch_size || pos + 1 == order.len() {
                let inv = T::one() / <T as Scalar>::from_usize(in_batch);
                accum.iter_mut().flatten().for_each(|a| *a *= inv);
                state.adam.step(model.params_mut(), &accum, lr).map_err(|e| tag_sample(e, epoch, sample.id))?;
                accum.iter_mut().flatten().for_each(|a| *a = T::zero());
                in_batch = 0;
            }
        }
        let (val_rel_l2, _) = if val_set.is_empty() { (Vec::new(), 0) } else { evaluate(&*model, val_set)? };
        state.epochs_completed += 1;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_rel_l2,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics, model, state)?;
    }
    Ok(())
}

fn tag_sample(e: Error, epoch: usize, id: u64) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, sample {id}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{MlpBaseline, MlpConfig};
    use rand::Rng;

    #[test]
    fn schedule_closed_form() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-3);
        assert_eq!(lr_schedule(99, &cfg), 1e-3);
        assert_eq!(lr_schedule(100, &cfg), 5e-4);
        assert!((lr_schedule(499, &cfg) - 6.25e-5).abs() < 1e-18);
        for e in 0..=10_000 {
            let want = 1e-3 * 0.5f64.powi((e / 100) as i32);
            assert_eq!(lr_schedule(e, &cfg), want);
        }
    }

    fn mse_value(p: &Tensor<f64>, t: &Tensor<f64>) -> f64 {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(p.clone()), tape.constant(t.clone()));
        let l = mse_objective(&mut tape, a, b).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn mse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::new(vec![5, 2], (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(mse_value(&t, &t), 0.0);
        let shifted = Tensor::new(vec![5, 2], t.data().iter().map(|v| v + 0.5).collect()).unwrap();
        assert!((mse_value(&shifted, &t) - 0.25 * 2.0).abs() < 1e-15);
        let p = Tensor::new(vec![5, 2], (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut want = 0.0;
        for i in 0..5 {
            for j in 0..2 {
                want += (p.at(i, j) - t.at(i, j)).powi(2);
            }
        }
        assert!((mse_value(&p, &t) - want / 5.0).abs() < 1e-15);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(p.clone()), tape.constant(Tensor::zeros(&[2, 5])));
        assert!(mse_objective(&mut tape, a, b).is_err());
    }

    #[test]
    fn relative_l2_cases() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 0.0, -2.0, 0.0, 0.5, 0.0]).unwrap();
        let two = Tensor::new(vec![3, 2], t.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        assert_eq!(relative_l2(&t, &t).unwrap(), vec![Some(0.0), None]);
        assert_eq!(relative_l2(&two, &t).unwrap()[0], Some(1.0));
        assert_eq!(relative_l2(&Tensor::zeros(&[3, 2]), &t).unwrap()[0], Some(1.0));
        let (mean, flagged) = mean_relative_l2(&[vec![Some(0.5), None], vec![Some(1.5), None]]);
        assert_eq!(mean, vec![Some(1.0), None]);
        assert_eq!(flagged, 2);
    }

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![w]).unwrap()).unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(&s);
        adam.m[0][0] = 0.2;
        adam.v[0][0] = 0.3;
        adam.step(&mut s, &[vec![0.0]], 1e-3).unwrap();
        assert!((adam.m[0][0] - 0.18).abs() < 1e-15);
        assert!((adam.v[0][0] - 0.2997).abs() < 1e-15);

        for g in [3.0, -0.01] {
            let mut s = scalar_store(1.0);
            let mut adam = Adam::new(&s);
            adam.step(&mut s, &[vec![g]], 1e-3).unwrap();
            let moved = s.tensors()[0].data()[0] - 1.0;
            assert!((moved + 1e-3 * g.signum()).abs() < 1e-8, "{moved}");
        }
    }

    #[test]
    fn adam_matches_reference_on_quadratic() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        let mut s = scalar_store(2.0);
        let mut adam = Adam::new(&s);
        for t in 1..=3 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            let gs = 2.0 * s.tensors()[0].data()[0];
            adam.step(&mut s, &[vec![gs]], lr).unwrap();
            assert!((s.tensors()[0].data()[0] - w).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(&s);
        let before = (s.clone(), adam.clone());
        let err = adam.step(&mut s, &[vec![f64::NAN]], 1e-3).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains('w')));
        assert_eq!((s, adam), before);
    }

    #[test]
    fn normalizer_statistics() {
        let r1 = SampleRecord::new(0, (2, 1, 1), vec![0.1; 4], vec![1.0, 3.0], vec![3.0, -4.0]).unwrap();
        let n = Normalizer::fit(std::slice::from_ref(&r1)).unwrap();
        assert_eq!(n.input_mean, vec![2.0]);
        assert_eq!(n.input_std, vec![1.0]);
        assert!((n.target_rms[0] - 12.5f64.sqrt()).abs() < 1e-15);
        let p: Prepared<f64> = n.prepare(&r1).unwrap();
        assert_eq!(p.inputs.data(), &[-1.0, 1.0]);
        assert_eq!(n.denormalize(&p.targets), r1.targets);
    }

    fn toy_set(n_samples: usize, seed: u64) -> Vec<Prepared<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_samples)
            .map(|i| {
                let pos: Vec<f64> = (0..32).map(|_| rng.gen()).collect();
                let inp: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let tgt: Vec<f64> = pos.chunks(2).zip(&inp).map(|(p, a)| (p[0] - p[1]) + 0.5 * a).collect();
                let r = SampleRecord::new(i as u64, (2, 1, 1), pos, inp, tgt).unwrap();
                Normalizer::identity(1, 1).prepare(&r).unwrap()
            })
            .collect()
    }

    #[test]
    fn smoke_epoch_writes_one_row_and_is_deterministic() {
        let set = toy_set(2, 1);
        let run = || {
            let mut m = MlpBaseline::<f64>::new(MlpConfig { hidden: 8, ..MlpConfig::default() }).unwrap();
            let mut st = TrainState::new(&m.params);
            let mut rows = Vec::new();
            let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
            train(&mut m, &mut st, &set, &set, &cfg, |r, _, _| {
                rows.push(r.clone());
                Ok(())
            })
            .unwrap();
            (rows, m.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].train_loss.to_bits(), b[0].train_loss.to_bits());
        assert_eq!(a[0].val_rel_l2, b[0].val_rel_l2);
        assert_eq!(pa, pb);
    }

    #[test]
    fn training_reduces_loss_on_a_learnable_map() {
        let set = toy_set(16, 2);
        let mut m = MlpBaseline::<f64>::new(MlpConfig { hidden: 16, ..MlpConfig::default() }).unwrap();
        let mut st = TrainState::new(&m.params);
        let cfg = TrainConfig { epochs: 60, lr: 1e-2, ..TrainConfig::default() };
        let mut losses = Vec::new();
        train(&mut m, &mut st, &set, &[], &cfg, |r, _, _| {
            losses.push(r.train_loss);
            Ok(())
        })
        .unwrap();
        assert!(losses[59] < 0.1 * losses[0], "{} -> {}", losses[0], losses[59]);
    }

    #[test]
    fn resume_continues_bitwise() {
        let set = toy_set(6, 3);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let fresh = || MlpBaseline::<f64>::new(MlpConfig { hidden: 8, seed: 4, ..MlpConfig::default() }).unwrap();
        let mut full_rows = Vec::new();
        let mut m = fresh();
        let mut st = TrainState::new(&m.params);
        let mut snapshot = None;
        train(&mut m, &mut st, &set, &set, &cfg, |r, m, s| {
            full_rows.push(r.clone());
            if s.epochs_completed == 2 {
                snapshot = Some((m.clone(), s.clone()));
            }
            Ok(())
        })
        .unwrap();
        let (mut m2, mut st2) = snapshot.unwrap();
        let mut resumed = Vec::new();
        train(&mut m2, &mut st2, &set, &set, &cfg, |r, _, _| {
            resumed.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(resumed.len(), 1);
        assert_eq!(resumed[0].train_loss.to_bits(), full_rows[2].train_loss.to_bits());
        assert_eq!(resumed[0].val_rel_l2, full_rows[2].val_rel_l2);
        assert_eq!(m2.params, m.params);
    }

    #[test]
    fn non_finite_loss_aborts_as_numeric() {
        let set = toy_set(2, 5);
        let mut m = MlpBaseline::<f64>::new(MlpConfig { hidden: 4, ..MlpConfig::default() }).unwrap();
        m.params.get_mut("mlp.w0").unwrap().data_mut()[0] = 1e300;
        m.params.get_mut("mlp.w1").unwrap().data_mut().iter_mut().for_each(|w| *w = 1e300);
        let mut st = TrainState::new(&m.params);
        let err = train(&mut m, &mut st, &set, &[], &TrainConfig { epochs: 1, ..TrainConfig::default() }, |_, _, _| Ok(())).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }

    #[test]
    fn epoch_order_is_a_keyed_permutation() {
        let a = epoch_order(1, 0, 50);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 50));
        assert_ne!(a, epoch_order(1, 1, 50));
        assert_ne!(a, epoch_order(2, 0, 50));
    }

    #[test]
    fn metrics_csv_round_trips_floats() {
        let m = EpochMetrics { epoch: 3, train_loss: 0.1 + 0.2, val_rel_l2: vec![Some(1.0 / 3.0), None], lr: 5e-4, wall_time_s: 1.23456 };
        assert_eq!(EpochMetrics::csv_header(2), "epoch,train_loss,val_rel_l2_u0,val_rel_l2_u1,lr,wall_time_s");
        let row = m.csv_row();
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[1].parse::<f64>().unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(cols[2].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(cols[3], "nan");
        assert_eq!(cols[5], "1.235");
    }
}
