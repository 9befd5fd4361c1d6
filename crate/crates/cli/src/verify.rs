use std::fmt::Write as _;
use std::fs;

use amg_core::verify::{run_suites, Injection, VerifyOptions};

use crate::error::{io_err, CliError, CliResult};
use crate::VerifyArgs;

pub const REPORT: &str = "verify.txt";

pub fn run(a: VerifyArgs) -> CliResult {
    let inject = a.inject.as_deref().map(str::parse::<Injection>).transpose().map_err(|e| CliError::Usage(e.to_string()))?;
    let opts = VerifyOptions { seed: a.common.seed.unwrap_or_default(), inject };
    let reports = run_suites(&a.only, &opts)?;

    let mut text = String::new();
    for r in &reports {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(text, "{tag} {:<14} {} ({:.1} s)", r.name, r.summary, r.seconds);
        for f in &r.failures {
            let _ = writeln!(text, "     {f}");
        }
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let _ = writeln!(text, "{} of {} suites passed (seed {})", reports.len() - failed.len(), reports.len(), opts.seed);
    print!("{text}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let p = out.join(REPORT);
        fs::write(&p, &text).map_err(|e| io_err(&p, e))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed suites: {}", failed.join(", "))))
    }
}
