use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use fem_core::check::{self, Fault, Suite};
use fem_core::oracle::OracleReport;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub filter: String,
    pub instances: Option<usize>,
    pub fault: Fault,
    /// Single worker when set; otherwise suites are spread over the cores.
    pub deterministic: bool,
}

/// Runs every suite matching the filter, in registry order.
pub fn run_check(opts: &CheckOptions, seed: u64) -> Result<Vec<OracleReport>, CliError> {
    let suites = check::select(&opts.filter);
    if suites.is_empty() {
        return Err(CliError::Usage(format!("no suite matches '{}'", opts.filter)));
    }
    let workers = if opts.deterministic {
        1
    } else {
        thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(suites.len())
    };
    if workers == 1 {
        return Ok(suites.iter().map(|s| s.run(seed, opts.instances, opts.fault)).collect());
    }
    Ok(run_parallel(&suites, workers, seed, opts))
}

fn run_parallel(suites: &[Suite], workers: usize, seed: u64, opts: &CheckOptions) -> Vec<OracleReport> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<OracleReport>>> = Mutex::new(vec![None; suites.len()]);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(suite) = suites.get(i) else { break };
                let report = suite.run(seed, opts.instances, opts.fault);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(report);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Fixed-width summary table; no timings, so reruns print identical bytes.
pub fn format_table(reports: &[OracleReport]) -> String {
    let width = reports.iter().map(|r| r.op.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<width$}  {:>9}  {:>12}  {:>12}  {:>9}  {}\n",
        "suite", "instances", "max_abs_err", "max_rel_err", "tolerance", "status"
    );
    for r in reports {
        out += &format!(
            "{:<width$}  {:>9}  {:>12.3e}  {:>12.3e}  {:>9.1e}  {}\n",
            r.op,
            r.shape.first().copied().unwrap_or(0),
            r.max_abs_err,
            r.max_rel_err,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    out += &format!("{} suites, {} passed, {} failed\n", reports.len(), reports.len() - failed, failed);
    out
}

pub fn all_pass(reports: &[OracleReport]) -> bool {
    reports.iter().all(|r| r.pass)
}
