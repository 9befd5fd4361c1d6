use std::path::Path;

use amg_core::checkpoint::{self, ModelSpec, Net};
use amg_core::data::{read_dataset, Dataset};
use amg_core::model::NeuralOperator;
use amg_core::run::{final_dir, run_training, METRICS_FILE};
use amg_core::train::{channel_names, Normalizer, Prepared, TrainConfig, TrainState};
use amg_core::Scalar;

use crate::config::{Precision, RunConfig};
use crate::error::{CliError, CliResult};
use crate::TrainArgs;

struct Job<'a> {
    out: &'a Path,
    data: &'a Dataset,
    spec: ModelSpec,
    normalizer: Normalizer,
    train: TrainConfig,
    resume: Option<&'a Path>,
}

fn prepare<T: Scalar>(norm: &Normalizer, records: &[amg_core::data::SampleRecord]) -> CliResult<Vec<Prepared<T>>> {
    Ok(records.iter().map(|r| norm.prepare(r)).collect::<amg_core::Result<_>>()?)
}

fn execute<T: Scalar>(job: Job<'_>) -> CliResult {
    let (mut net, mut state) = match job.resume {
        Some(dir) => {
            let ck = checkpoint::load::<T>(dir)?;
            (ck.net, ck.state)
        }
        None => {
            let net = Net::<T>::new(&job.spec)?;
            let state = TrainState::new(net.params());
            (net, state)
        }
    };
    let train_set = prepare::<T>(&job.normalizer, &job.data.train)?;
    let val_set = prepare::<T>(&job.normalizer, &job.data.val)?;
    let names = channel_names(job.spec.dims().2);
    eprintln!(
        "training {} ({} parameters, {}) from epoch {} to {} on {} samples",
        job.spec.kind(),
        net.params().count(),
        T::NAME,
        state.epochs_completed,
        job.train.epochs,
        train_set.len()
    );
    run_training(job.out, &mut net, &mut state, &job.normalizer, &train_set, &val_set, &job.train, |m| {
        let val: Vec<String> =
            names.iter().zip(&m.val_rel_l2).map(|(c, v)| v.map_or_else(|| format!("{c}=nan"), |x| format!("{c}={x:.4}"))).collect();
        eprintln!(
            "epoch {:>4}  loss {:.4e}  val rel L2 [{}]  lr {:.2e}  {:.1} s",
            m.epoch,
            m.train_loss,
            val.join(" "),
            m.lr,
            m.wall_time_s
        );
    })?;
    println!(
        "trained {} for {} epochs; metrics in {}, final checkpoint in {}",
        job.spec.kind(),
        state.epochs_completed,
        job.out.join(METRICS_FILE).display(),
        final_dir(job.out).display()
    );
    Ok(())
}

pub fn run(a: TrainArgs) -> CliResult {
    let data = read_dataset(&a.data).map_err(|e| CliError::Usage(format!("cannot read dataset {}: {e}", a.data.display())))?;
    let m = &data.manifest;
    let dims = (m.d_pos, m.d_a, m.d_u);

    let (mut cfg, normalizer) = match &a.resume {
        Some(dir) => {
            let ck = checkpoint::read_manifest(dir)?;
            let mut cfg = RunConfig { precision: Precision::parse(&ck.precision)?, train: ck.train.clone(), ..RunConfig::default() };
            cfg.set_spec(&ck.model);
            (cfg, ck.normalizer)
        }
        None => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            if let Some(s) = a.common.seed {
                cfg.set_seed(s);
            }
            if let Some(k) = a.model {
                cfg.model_kind = k;
            }
            if let Some(p) = a.precision {
                cfg.precision = p;
            }
            if let Some(lr) = a.lr {
                cfg.train.lr = lr;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            cfg.set_dims(dims);
            (cfg, Normalizer::fit(&data.train)?)
        }
    };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.train.checkpoint_every = c;
    }
    cfg.data = m.gen_config();
    let spec = cfg.spec();
    if spec.dims() != dims {
        return Err(CliError::Usage(format!("model widths {:?} do not match the dataset's {dims:?}", spec.dims())));
    }
    cfg.train.validate()?;
    cfg.write(&a.out)?;

    let job = Job { out: &a.out, data: &data, spec, normalizer, train: cfg.train.clone(), resume: a.resume.as_deref() };
    match cfg.precision {
        Precision::F32 => execute::<f32>(job),
        Precision::F64 => execute::<f64>(job),
    }
}
