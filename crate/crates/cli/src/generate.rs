use std::fs;
use std::path::Path;

use amg_core::data::{generate_dataset, write_dataset, Split, MANIFEST_FILE};

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::error::{io_err, CliError, CliResult};
use crate::GenerateArgs;

fn is_empty_dir(dir: &Path) -> CliResult<bool> {
    match fs::read_dir(dir) {
        Ok(mut rd) => Ok(rd.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(io_err(dir, e)),
    }
}

/// Removes what a previous `generate` wrote, leaving other files alone.
fn clear_dataset(dir: &Path) -> CliResult {
    for split in Split::ALL {
        let sub = dir.join(split.name());
        if sub.exists() {
            fs::remove_dir_all(&sub).map_err(|e| io_err(&sub, e))?;
        }
    }
    for name in [MANIFEST_FILE, RESOLVED_CONFIG] {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| io_err(&p, e))?;
        }
    }
    Ok(())
}

pub fn run(a: GenerateArgs) -> CliResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.set_seed(s);
    }
    let d = &mut cfg.data;
    for (flag, field) in [(a.train, &mut d.train), (a.val, &mut d.val), (a.test, &mut d.test)] {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(v) = a.n_points {
        d.n_points = v;
    }
    if let Some(v) = a.grid_n {
        d.grid_n = v;
    }
    if let Some(v) = a.gaussians {
        d.gaussians = v;
    }
    d.validate()?;
    let d = d.clone();

    if !is_empty_dir(&a.out)? {
        if !a.force {
            return Err(CliError::Usage(format!(
                "refusing to write into non-empty directory {} (use --force to replace the dataset)",
                a.out.display()
            )));
        }
        clear_dataset(&a.out)?;
    }

    let total = d.train + d.val + d.test;
    let step = (total / 10).max(1);
    let mut done = 0usize;
    let ds = generate_dataset(&d, |_, _| {
        done += 1;
        if done.is_multiple_of(step) || done == total {
            eprintln!("generated {done}/{total} samples");
        }
    })?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_dataset(&a.out, &ds)?;
    cfg.write(&a.out)?;
    println!(
        "wrote {} train / {} val / {} test samples (N = {}, grid {}, {} gaussians, seed {}) to {}",
        d.train,
        d.val,
        d.test,
        d.n_points,
        d.grid_n,
        d.gaussians,
        d.seed,
        a.out.display()
    );
    Ok(())
}
