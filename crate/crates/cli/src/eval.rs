//! `amg eval`: per-channel relative L2 on one split.
//!
//! Writes `report.txt` (table), `report.csv` (one row per sample plus a
//! `mean` row, one column per output channel) and `predictions.csv` (node
//! values in physical units). No timings are recorded, so repeated runs
//! produce identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use amg_core::checkpoint::{self, CheckpointManifest};
use amg_core::data::{read_manifest, read_split, SampleRecord, Split};
use amg_core::model::NeuralOperator;
use amg_core::train::{channel_names, mean_relative_l2, relative_l2};
use amg_core::Scalar;

use crate::config::{Precision, RunConfig};
use crate::error::{io_err, CliError, CliResult};
use crate::EvalArgs;

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";

struct Outcome {
    per_sample: Vec<(u64, Vec<Option<f64>>)>,
    predictions: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:?}"))
}

fn predict_all<T: Scalar>(ck_dir: &Path, records: &[SampleRecord]) -> CliResult<Outcome> {
    let ck = checkpoint::load::<T>(ck_dir)?;
    let d_u = ck.manifest.model.dims().2;
    let d_pos = ck.manifest.model.dims().0;
    let d_a = ck.manifest.model.dims().1;
    let mut head = vec!["sample".to_string(), "node".into()];
    head.extend((0..d_pos).map(|j| ["x", "y", "z"].get(j).map_or_else(|| format!("x{j}"), |s| s.to_string())));
    let inputs = if d_a == 1 { vec!["a".to_string()] } else { (0..d_a).map(|j| format!("a{j}")).collect() };
    head.extend(inputs);
    for c in channel_names(d_u) {
        head.push(format!("pred_{c}"));
    }
    for c in channel_names(d_u) {
        head.push(format!("target_{c}"));
    }
    let mut predictions = head.join(",");
    predictions.push('\n');
    let mut per_sample = Vec::with_capacity(records.len());
    for r in records {
        let s = ck.normalizer.prepare::<T>(r)?;
        let pred = ck.net.predict(&s.positions, &s.inputs)?;
        per_sample.push((r.id, relative_l2(&pred, &s.targets)?));
        let phys = ck.normalizer.denormalize(&pred);
        for i in 0..r.n {
            let _ = write!(predictions, "{},{i}", r.id);
            let cols = r.positions[i * r.d_pos..(i + 1) * r.d_pos]
                .iter()
                .chain(&r.inputs[i * r.d_a..(i + 1) * r.d_a])
                .chain(&phys[i * d_u..(i + 1) * d_u])
                .chain(&r.targets[i * r.d_u..(i + 1) * r.d_u]);
            for v in cols {
                let _ = write!(predictions, ",{v:?}");
            }
            predictions.push('\n');
        }
    }
    Ok(Outcome { per_sample, predictions })
}

fn check_dims(ck: &CheckpointManifest, data_dims: (usize, usize, usize), ck_dir: &Path, data_dir: &Path) -> CliResult {
    let dims = ck.model.dims();
    if dims != data_dims {
        return Err(CliError::Usage(format!(
            "checkpoint {} expects widths (d_pos, d_a, d_u) = {dims:?} but dataset {} has {data_dims:?}",
            ck_dir.display(),
            data_dir.display()
        )));
    }
    Ok(())
}

pub fn run(a: EvalArgs) -> CliResult {
    let split: Split = a.split.parse()?;
    let ck = checkpoint::read_manifest(&a.checkpoint)?;
    let manifest = read_manifest(&a.data).map_err(|e| CliError::Usage(format!("cannot read dataset {}: {e}", a.data.display())))?;
    check_dims(&ck, (manifest.d_pos, manifest.d_a, manifest.d_u), &a.checkpoint, &a.data)?;
    let records = read_split(&a.data, &manifest, split)?;
    if records.is_empty() {
        return Err(CliError::Usage(format!("split {} of {} is empty", split.name(), a.data.display())));
    }
    let precision = Precision::parse(&ck.precision)?;
    let out = match precision {
        Precision::F32 => predict_all::<f32>(&a.checkpoint, &records)?,
        Precision::F64 => predict_all::<f64>(&a.checkpoint, &records)?,
    };
    let per: Vec<Vec<Option<f64>>> = out.per_sample.iter().map(|(_, v)| v.clone()).collect();
    let (mean, flagged) = mean_relative_l2(&per);
    let names = channel_names(ck.model.dims().2);

    let mut csv = format!("sample,{}\n", names.join(","));
    for (id, v) in &out.per_sample {
        let cols: Vec<String> = v.iter().copied().map(fmt_opt).collect();
        let _ = writeln!(csv, "{id},{}", cols.join(","));
    }
    let cols: Vec<String> = mean.iter().copied().map(fmt_opt).collect();
    let _ = writeln!(csv, "mean,{}", cols.join(","));

    let mut txt = String::new();
    let _ = writeln!(txt, "checkpoint  {} ({}, {}, epoch {})", a.checkpoint.display(), ck.model.kind(), ck.precision, ck.epochs_completed);
    let _ = writeln!(txt, "dataset     {} [{}], {} samples", a.data.display(), split.name(), records.len());
    let _ = writeln!(txt, "undefined   {flagged} (zero-target channels skipped)");
    let _ = writeln!(txt);
    let _ = writeln!(txt, "{:<10} {:>14}", "channel", "rel L2");
    for (c, v) in names.iter().zip(&mean) {
        let shown = v.map_or_else(|| "nan".into(), |x| format!("{x:.6}"));
        let _ = writeln!(txt, "{c:<10} {shown:>14}");
    }

    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    for (name, body) in [(REPORT_TXT, &txt), (REPORT_CSV, &csv), (PREDICTIONS_CSV, &out.predictions)] {
        let p = a.out.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))?;
    }
    let mut cfg = RunConfig { precision, train: ck.train.clone(), data: manifest.gen_config(), ..RunConfig::default() };
    cfg.set_spec(&ck.model);
    cfg.write(&a.out)?;
    print!("{txt}");
    Ok(())
}
