//! `mabf`: run scenarios, solve single instances, re-verify result files
//! and dump branch-and-bound traces.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mabf_core::harness::{
    bnb_trace, read_json, run_experiment, verify_results, write_csv, write_json, ExperimentRecord, ResultFile,
    ScenarioConfig, Scheme, Seeds,
};

#[derive(Parser)]
#[command(name = "mabf", version, about = "Movable-antenna beamforming experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Scenario flags. A `--config` file, when given, overrides all of them.
#[derive(Args, Clone)]
struct ScenarioArgs {
    /// TOML scenario file (see `mabf template`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "cli")]
    id: String,
    /// Movable elements.
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Users.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// SINR target (dB).
    #[arg(long, default_value_t = 10.0)]
    gamma_db: f64,
    /// Normalized CSI error.
    #[arg(long, default_value_t = 0.0)]
    kappa: f64,
    /// Side of the transmit area in wavelengths.
    #[arg(long, default_value_t = 0.5)]
    grid_l: f64,
    /// Grid step (mm).
    #[arg(long, default_value_t = 10.0)]
    grid_d: f64,
    /// Design for the worst-case CSI error.
    #[arg(long)]
    robust: bool,
    /// Comma separated scheme list.
    #[arg(long, value_delimiter = ',', default_value = "bnb")]
    schemes: Vec<Scheme>,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 1)]
    seed_base: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl ScenarioArgs {
    fn scenario(&self) -> CliResult<ScenarioConfig> {
        if let Some(p) = &self.config {
            return Ok(ScenarioConfig::load(p)?);
        }
        let mut c = ScenarioConfig { id: self.id.clone(), ..Default::default() };
        c.system.m = self.m;
        c.system.k = self.k;
        c.system.gamma_db = self.gamma_db;
        c.system.kappa = self.kappa;
        c.grid.l = self.grid_l;
        c.grid.d = self.grid_d;
        c.run.robust = self.robust;
        c.run.schemes = self.schemes.clone();
        c.run.seeds = Seeds { count: self.seeds, base: self.seed_base };
        c.run.workers = self.workers;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a scenario file with every default filled in.
    Template,
    /// Run every sweep point, seed and scheme of a scenario.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Per-record CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Full result file (config, records, designs) for `verify`.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Zero all wall times so reruns give byte-identical files.
        #[arg(long)]
        no_timing: bool,
    },
    /// Solve one seed of a scenario with one scheme and print the design.
    Solve {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Scheme to run (defaults to the first scheme of the scenario).
        #[arg(long)]
        scheme: Option<Scheme>,
        /// Sweep value to solve at (defaults to the scenario's base values).
        #[arg(long)]
        value: Option<f64>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Re-check every design in a result file against the SINR and spacing oracles.
    Verify { results: PathBuf },
    /// Write the LB/UB trace of the global search on one instance as CSV.
    Trace {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        value: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_timing: bool,
    },
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn strip_timing(f: &mut ResultFile) {
    f.records = f.records.iter().map(ExperimentRecord::without_timing).collect();
    for d in f.designs.iter_mut().flatten() {
        d.wall_s = 0.0;
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

fn summary(f: &ResultFile) {
    for r in &f.records {
        let value = r.sweep_value.map_or_else(String::new, |v| format!(" {}={v}", r.sweep));
        println!(
            "seed {}{value} {}: {} power {} W ({} dB) margin {} dB nodes {} iters {} verified {}{}",
            r.seed,
            r.scheme,
            r.status,
            fmt_opt(r.avg_power_w),
            fmt_opt(r.avg_power_db),
            fmt_opt(r.min_sinr_margin_db),
            r.nodes,
            r.iterations,
            r.verified,
            r.error.as_deref().map_or_else(String::new, |e| format!(" error: {e}")),
        );
    }
}

fn write_outputs(f: &ResultFile, csv: Option<&Path>, json: Option<&Path>) -> CliResult<()> {
    if let Some(p) = csv {
        write_csv(&f.records, p)?;
    }
    if let Some(p) = json {
        write_json(f, p)?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<bool> {
    match cli.cmd {
        Cmd::Template => {
            print!("{}", ScenarioConfig::default().to_toml()?);
        }
        Cmd::Sweep { scenario, csv, json, no_timing } => {
            let cfg = scenario.scenario()?;
            let mut f = run_experiment(&cfg)?;
            if no_timing {
                strip_timing(&mut f);
            }
            summary(&f);
            write_outputs(&f, csv.as_deref(), json.as_deref())?;
            return Ok(f.records.iter().all(|r| r.error.is_none()));
        }
        Cmd::Solve { scenario, seed, scheme, value, json } => {
            let mut cfg = scenario.scenario()?.at_point(value);
            let scheme = scheme.or(cfg.run.schemes.first().copied()).unwrap_or(Scheme::Bnb);
            cfg.run.sweep = None;
            cfg.run.schemes = vec![scheme];
            cfg.run.seeds = Seeds { count: 1, base: seed };
            cfg.run.workers = 1;
            let f = run_experiment(&cfg)?;
            summary(&f);
            if let Some(Some(d)) = f.designs.first() {
                println!("placement {:?}", d.placement);
                for (k, col) in d.w.column_iter().enumerate() {
                    let entries: Vec<String> = col.iter().map(|c| format!("{:.4e}{:+.4e}i", c.re, c.im)).collect();
                    println!("w{k} [{}]", entries.join(", "));
                }
            }
            write_outputs(&f, None, json.as_deref())?;
            return Ok(f.records.iter().all(|r| r.error.is_none()));
        }
        Cmd::Verify { results } => {
            let f = read_json(&results)?;
            let rep = verify_results(&f)?;
            for (row, why) in &rep.failures {
                println!("row {row}: {why}");
            }
            println!("checked {}, skipped {}, failures {}", rep.checked, rep.skipped, rep.failures.len());
            return Ok(rep.ok());
        }
        Cmd::Trace { scenario, seed, value, out, no_timing } => {
            let cfg = scenario.scenario()?;
            let mut res = bnb_trace(&cfg, seed, value)?;
            if no_timing {
                res.trace.rows.iter_mut().for_each(|r| r.wall_s = 0.0);
            }
            res.trace.write_csv(File::create(&out)?)?;
            println!(
                "{}: power {:.6} W, LB {:.6}, UB {:.6}, {} nodes, {} iterations",
                res.design.status,
                res.design.avg_power,
                res.lower_bound,
                res.upper_bound,
                res.design.nodes,
                res.trace.rows.len()
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
