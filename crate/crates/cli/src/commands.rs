//! Subcommand implementations. Each writes its CSV files into the output
//! directory with `version`, `config_hash` and `seed` header lines.
//!
//! Seeds: the batch of `sample`, `crb` and `scrb` uses
//! `derive_seed(seed, <command>, 0)`; `bench` draws its bounds batch from
//! `derive_seed(seed, "bench_bounds", 0)` and trial `i` from
//! `derive_seed(seed, "bench", i)`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use scrb_core::estimators::{benchmark, write_reports_csv, write_trials_csv, BenchBounds};
use scrb_core::fisher::compute_bounds;
use scrb_core::sampling::sample_res;
use scrb_core::seed::derive_seed;
use scrb_core::semiparam::{scrb_on_batch, SieveOptions};
use scrb_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::Failure;

/// Largest tolerated relative gap between the two CRB routes.
const ROUTE_TOLERANCE: f64 = 1e-8;

fn header(cfg: &ExperimentConfig, command: &str, seed: u64) -> Vec<(&'static str, String)> {
    vec![
        ("version", env!("CARGO_PKG_VERSION").to_string()),
        ("config_hash", format!("{:016x}", cfg.hash())),
        ("seed", cfg.seed.to_string()),
        ("command", command.to_string()),
        ("derived_seed", seed.to_string()),
        ("generator", cfg.model.generator().kind().to_string()),
        ("constraint", cfg.model.constraint().as_str().to_string()),
        ("interest", cfg.interest.as_str().to_string()),
    ]
}

fn write_file<F>(dir: &Path, name: &str, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_sample(cfg: &ExperimentConfig, out: &Path) -> std::result::Result<(), Failure> {
    let seed = derive_seed(cfg.seed, "sample", 0);
    let batch = sample_res(&cfg.model, cfg.m, seed)?;
    let meta = header(cfg, "sample", seed);
    write_file(out, "batch.csv", |w| batch.write_csv(w, &meta))?;
    println!("batch_fingerprint={:016x}", batch.fingerprint());
    println!("model_fingerprint={:016x}", batch.model_fingerprint());
    Ok(())
}

pub fn cmd_crb(cfg: &ExperimentConfig, out: &Path) -> std::result::Result<(), Failure> {
    let seed = derive_seed(cfg.seed, "crb", 0);
    let batch = sample_res(&cfg.model, cfg.m, seed)?;
    let bounds = compute_bounds(&cfg.model, &batch, &cfg.partition())?;
    let meta = header(cfg, "crb", seed);
    write_file(out, "crb.csv", |w| bounds.write_csv(w, &meta))?;
    println!("route_agreement={:e}", bounds.agreement);
    println!("crb_trace={:e}", bounds.crb().trace());
    if !(bounds.agreement <= ROUTE_TOLERANCE) {
        return Err(Error::Integrity(format!(
            "Schur and projection routes disagree (relative gap {:e})",
            bounds.agreement
        ))
        .into());
    }
    Ok(())
}

pub fn cmd_scrb(cfg: &ExperimentConfig, out: &Path) -> std::result::Result<(), Failure> {
    let seed = derive_seed(cfg.seed, "scrb", 0);
    let batch = sample_res(&cfg.model, cfg.m, seed)?;
    let opts = SieveOptions {
        rtol: cfg.rtol,
        ..SieveOptions::default()
    };
    let trace = scrb_on_batch(
        &cfg.model,
        &batch,
        &cfg.partition(),
        &cfg.schedule,
        cfg.family,
        opts,
    )?;
    let meta = header(cfg, "scrb", seed);
    write_file(out, "scrb.csv", |w| trace.write_csv(w, &meta))?;
    println!("converged={}", trace.converged);
    println!("scrb_trace={:e}", trace.final_scrb.trace());
    println!("parametric_crb_trace={:e}", trace.parametric_crb.trace());
    Ok(())
}

pub fn cmd_bench(cfg: &ExperimentConfig, out: &Path) -> std::result::Result<(), Failure> {
    let bound_seed = derive_seed(cfg.seed, "bench_bounds", 0);
    let batch = sample_res(&cfg.model, cfg.bound_m, bound_seed)?;
    let partition = cfg.partition();
    let crb = compute_bounds(&cfg.model, &batch, &partition)?;
    let opts = SieveOptions {
        rtol: cfg.rtol,
        ..SieveOptions::default()
    };
    let trace = scrb_on_batch(
        &cfg.model,
        &batch,
        &partition,
        &cfg.schedule,
        cfg.family,
        opts,
    )?;
    let bounds = BenchBounds {
        crb: crb.crb().clone(),
        scrb: Some(trace.final_scrb.clone()),
    };
    let reports = benchmark(
        &cfg.model,
        &cfg.estimators,
        cfg.r,
        cfg.m,
        cfg.seed,
        &partition,
        &bounds,
        cfg.fixed_point,
    )?;
    let meta = header(cfg, "bench", cfg.seed);
    write_file(out, "bench.csv", |w| write_reports_csv(&reports, w, &meta))?;
    write_file(out, "bench_trials.csv", |w| {
        write_trials_csv(&reports, w, &meta)
    })?;

    for r in &reports {
        println!(
            "{}: valid={} failures={} vs_crb={:e} (se {:e}) vs_scrb={:e}",
            r.id,
            r.valid,
            r.failures,
            r.vs_crb,
            r.se_vs_crb,
            r.vs_scrb.unwrap_or(f64::NAN)
        );
    }
    if let Some(r) = reports.iter().find(|r| !r.bound_ordering_holds()) {
        return Err(Error::Integrity(format!(
            "{}: slack against the SCRB exceeds slack against the CRB",
            r.id
        ))
        .into());
    }
    let invalid: Vec<String> = reports
        .iter()
        .filter(|r| !r.valid)
        .map(|r| r.id.to_string())
        .collect();
    if !invalid.is_empty() {
        return Err(Failure::InvalidReport(format!(
            "more than 5% of trials failed for: {}",
            invalid.join(", ")
        )));
    }
    Ok(())
}
