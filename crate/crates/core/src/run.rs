//! Training runs on disk.
//!
//! ```text
//! <run>/metrics.csv                 one row per epoch, header first
//! <run>/checkpoints/epoch-000010/   periodic checkpoints (epochs completed)
//! <run>/final/                      checkpoint after the last epoch
//! ```
//!
//! The resolved run configuration is written next to these by the caller.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Net};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::train::{train, EpochMetrics, Normalizer, Prepared, TrainConfig, TrainState};

pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_dir(run: &Path, epochs_completed: usize) -> PathBuf {
    run.join("checkpoints").join(format!("epoch-{epochs_completed:06}"))
}

pub fn final_dir(run: &Path) -> PathBuf {
    run.join("final")
}

/// Prepares `metrics.csv` for rows from `first_epoch` on: a fresh file with
/// a header, or an existing one cut back to the rows before `first_epoch`.
fn open_metrics(run: &Path, d_u: usize, first_epoch: usize) -> Result<PathBuf> {
    let path = run.join(METRICS_FILE);
    let header = EpochMetrics::csv_header(d_u);
    let mut keep = vec![header.clone()];
    if first_epoch > 0 {
        if let Ok(text) = fs::read_to_string(&path) {
            let mut lines = text.lines();
            if lines.next() != Some(header.as_str()) {
                return Err(Error::format(path.display(), "header does not match this model's outputs"));
            }
            for line in lines {
                let epoch: usize = line
                    .split(',')
                    .next()
                    .and_then(|e| e.parse().ok())
                    .ok_or_else(|| Error::format(path.display(), format!("malformed row {line:?}")))?;
                if epoch < first_epoch {
                    keep.push(line.to_string());
                }
            }
        }
    }
    let mut text = keep.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Trains `net` inside `run`, appending metrics after every epoch and
/// writing checkpoints every `cfg.checkpoint_every` epochs and at the end.
/// On error the files of the last completed checkpoint stay untouched.
#[allow(clippy::too_many_arguments)]
pub fn run_training<T: Scalar>(
    run: &Path,
    net: &mut Net<T>,
    state: &mut TrainState<T>,
    normalizer: &Normalizer,
    train_set: &[Prepared<T>],
    val_set: &[Prepared<T>],
    cfg: &TrainConfig,
    mut log: impl FnMut(&EpochMetrics),
) -> Result<()> {
    fs::create_dir_all(run).map_err(|e| Error::io(run, e))?;
    let d_u = net.spec().dims().2;
    let metrics = open_metrics(run, d_u, state.epochs_completed)?;
    train(net, state, train_set, val_set, cfg, |m, net, st| {
        let mut f = OpenOptions::new().append(true).open(&metrics).map_err(|e| Error::io(&metrics, e))?;
        writeln!(f, "{}", m.csv_row()).map_err(|e| Error::io(&metrics, e))?;
        let done = st.epochs_completed;
        if done % cfg.checkpoint_every == 0 || done == cfg.epochs {
            checkpoint::save(&checkpoint_dir(run, done), net, normalizer, cfg, Some(st), done)?;
        }
        if done == cfg.epochs {
            checkpoint::save(&final_dir(run), net, normalizer, cfg, Some(st), done)?;
        }
        log(m);
        Ok(())
    })
}

/// Metrics rows without the wall-time column, for determinism checks.
pub fn metrics_without_wall_time(run: &Path) -> Result<Vec<String>> {
    let path = run.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(|l| match l.rsplit_once(',') {
            Some((head, _)) => head.to_string(),
            None => l.to_string(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::MlpConfig;
    use crate::checkpoint::{load, ModelSpec};
    use crate::data::SampleRecord;
    use crate::model::NeuralOperator;

    fn set() -> Vec<Prepared<f64>> {
        (0..5)
            .map(|i| {
                let pos: Vec<f64> = (0..32).map(|k| ((k * 7 + i * 3) % 17) as f64 / 17.0).collect();
                let inp: Vec<f64> = (0..16).map(|k| ((k + i) % 5) as f64 - 2.0).collect();
                let tgt: Vec<f64> = inp.iter().map(|a| 0.3 * a + 0.1).collect();
                Normalizer::identity(1, 1).prepare(&SampleRecord::new(i as u64, (2, 1, 1), pos, inp, tgt).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let data = set();
        let spec = ModelSpec::Mlp(MlpConfig { hidden: 8, ..MlpConfig::default() });
        let cfg = TrainConfig { epochs: 3, checkpoint_every: 2, ..TrainConfig::default() };
        let norm = Normalizer::identity(1, 1);
        let full = tempfile::tempdir().unwrap();
        let mut net = Net::<f64>::new(&spec).unwrap();
        let mut st = TrainState::new(net.params());
        run_training(full.path(), &mut net, &mut st, &norm, &data, &data, &cfg, |_| {}).unwrap();
        assert!(checkpoint_dir(full.path(), 2).join("params.bin").exists());
        assert!(!checkpoint_dir(full.path(), 1).exists());

        // Resume in place from epoch 2: the third row is rewritten.
        let ck = load::<f64>(&checkpoint_dir(full.path(), 2)).unwrap();
        let (mut net2, mut st2) = (ck.net, ck.state);
        let before = metrics_without_wall_time(full.path()).unwrap();
        run_training(full.path(), &mut net2, &mut st2, &norm, &data, &data, &cfg, |_| {}).unwrap();
        assert_eq!(metrics_without_wall_time(full.path()).unwrap(), before);
        assert_eq!(before.len(), 4);
        assert_eq!(net2, net);
        assert_eq!(load::<f64>(&final_dir(full.path())).unwrap().net, net);
    }
}
