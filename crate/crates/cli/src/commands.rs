//! Command implementations shared by the binary and the tests.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use aqpl_annotate::{serve, TaskStore};
use aqpl_core::select::Strategy;

use crate::config::{ConfigError, ExperimentConfig, Overrides};
use crate::experiment::{run_all, summarize, write_curves, write_summary, HumanMode, JobResult, RunError};
use crate::theory::{run_suite, TheoryOptions};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

/// Human-oracle settings from the command line.
#[derive(Debug, Clone, Default)]
pub struct HumanFlags {
    pub enabled: bool,
    pub serve_addr: Option<String>,
    pub timeout_secs: Option<u64>,
}

fn report(err: &RunError) -> u8 {
    eprintln!("error: {err}");
    err.exit_code()
}

fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, RunError> {
    Ok(ExperimentConfig::load(path, overrides)?)
}

struct Service {
    mode: HumanMode,
    _handle: aqpl_annotate::ServerHandle,
}

fn start_service(cfg: &ExperimentConfig, flags: &HumanFlags) -> Result<Option<Service>, RunError> {
    if !flags.enabled {
        return Ok(None);
    }
    let addr_text = flags.serve_addr.clone().unwrap_or_else(|| cfg.human.serve_addr.clone());
    let addr: SocketAddr = addr_text
        .parse()
        .map_err(|e| ConfigError::Invalid(format!("serve address {addr_text:?}: {e}")))?;
    let store = Arc::new(TaskStore::new());
    let handle = serve(addr, Arc::clone(&store)).map_err(|source| RunError::Io {
        path: addr_text.into(),
        source,
    })?;
    eprintln!("annotation service on http://{}", handle.local_addr());
    let timeout = Duration::from_secs(flags.timeout_secs.unwrap_or(cfg.human.timeout_secs));
    Ok(Some(Service {
        mode: HumanMode {
            store,
            timeout,
            fallback: cfg.human.fallback_to_simulated,
        },
        _handle: handle,
    }))
}

fn execute(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    flags: &HumanFlags,
) -> Result<Vec<JobResult>, RunError> {
    let service = start_service(cfg, flags)?;
    let results = run_all(cfg, strategies, service.as_ref().map(|s| &s.mode))?;
    let summary = summarize(&cfg.experiment.severities, strategies, &results);
    let path = write_summary(&cfg.experiment.output_dir, &summary)?;
    for s in &summary.strategies {
        println!(
            "{:<18} corrupted {:.4} ± {:.4}  clean {:.4} ± {:.4}  ({} seeds)",
            s.strategy,
            s.corrupted_accuracy_mean.mean,
            s.corrupted_accuracy_mean.std,
            s.clean_accuracy.mean,
            s.clean_accuracy.std,
            s.seeds.len()
        );
    }
    println!("summary written to {}", path.display());
    Ok(results)
}

pub fn cmd_run(config: &Path, overrides: &Overrides, flags: &HumanFlags) -> u8 {
    let result = load(config, overrides).and_then(|cfg| {
        let strategies = cfg.strategies()?;
        execute(&cfg, &strategies, flags).map(|_| ())
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e),
    }
}

/// Runs all four strategies on paired seeds and writes `curves.csv`.
pub fn cmd_compare(config: &Path, overrides: &Overrides, flags: &HumanFlags) -> u8 {
    let result = load(config, overrides).and_then(|mut cfg| {
        cfg.experiment.strategies = Strategy::ALL.iter().map(|s| s.name().to_string()).collect();
        let results = execute(&cfg, &Strategy::ALL, flags)?;
        let path = write_curves(&cfg.experiment.output_dir, &Strategy::ALL, &results)?;
        println!("curves written to {}", path.display());
        Ok(())
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e),
    }
}

/// Starts the annotation service and runs the first configured strategy
/// and seed with a human oracle.
pub fn cmd_serve(config: &Path, overrides: &Overrides, flags: &HumanFlags) -> u8 {
    let result = load(config, overrides).and_then(|mut cfg| {
        let strategies = cfg.strategies()?;
        cfg.experiment.seeds.truncate(1);
        let flags = HumanFlags {
            enabled: true,
            ..flags.clone()
        };
        execute(&cfg, &strategies[..1], &flags).map(|_| ())
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e),
    }
}

pub fn cmd_theory(opts: &TheoryOptions) -> u8 {
    let results = run_suite(opts);
    for r in &results {
        println!("{r}");
    }
    if results.iter().all(|r| r.passed || r.report_only) {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}
