//! `qkdnet`: run scenarios, calibrate the link model, evaluate presets and
//! validate topology files.
//!
//! Exit status is 0 on success, 1 on a validation or calibration failure
//! and 2 on an I/O failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use qkdnet_core::fixtures;
use qkdnet_core::qkd::{calibrate, read_table3, AnchorSet, CalibratedParams};
use qkdnet_core::sim::presets::{self, Preset};
use qkdnet_core::sim::{self, report, Scenario, SimError};
use qkdnet_core::topology::{validate, Severity, TopologyConfig};

#[derive(Parser)]
#[command(name = "qkdnet", version, about = "Switched QKD network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario through the event engine.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Calibrated parameters; the bundled data are calibrated if omitted.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Fit the link model to a measured link table and coexistence anchors.
    Calibrate {
        #[arg(long)]
        table3: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lab_topology: Option<PathBuf>,
        #[arg(long)]
        field_topology: Option<PathBuf>,
    },
    /// Evaluate a reference experiment.
    Preset {
        #[arg(value_parser = ["table3", "fig4a", "fig4b", "fig4cd", "fig5"])]
        name: String,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Topology file utilities.
    Topology {
        #[command(subcommand)]
        action: TopologyAction,
    },
}

#[derive(Subcommand)]
enum TopologyAction {
    /// Report every violation; fails on errors, not on warnings.
    Validate { file: PathBuf },
}

/// A failure with its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn invalid(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, error: error.into() }
    }

    fn io(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: error.into() }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io(_) | SimError::Csv(_) => Failure::io(e),
            other => Failure::invalid(other),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::io)
}

fn load_topology(path: Option<&PathBuf>, fallback: fn() -> qkdnet_core::topology::Topology) -> Result<qkdnet_core::topology::Topology, Failure> {
    match path {
        None => Ok(fallback()),
        Some(p) => qkdnet_core::topology::load_topology(&read(p)?)
            .with_context(|| format!("loading {}", p.display()))
            .map_err(Failure::invalid),
    }
}

fn load_params(path: &Path) -> Result<CalibratedParams, Failure> {
    CalibratedParams::from_json(&read(path)?)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::invalid)
}

fn bundled_params() -> Result<CalibratedParams, Failure> {
    calibrate(
        &fixtures::table3_rows(),
        &fixtures::anchors(),
        &fixtures::lab_topology(),
        &fixtures::field_topology(),
    )
    .context("calibrating bundled data")
    .map_err(Failure::invalid)
}

fn run_cmd(scenario: &Path, seed: u64, out: &Path, params: Option<&PathBuf>) -> Result<(), Failure> {
    let scenario = Scenario::parse(&read(scenario)?)?;
    let params = match params {
        Some(p) => load_params(p)?,
        None => bundled_params()?,
    };
    let output = sim::run(&scenario, &params, seed)?;
    let paths = report::emit_run(&output, out)?;
    for s in &output.summary {
        println!(
            "conn {} {}->{} {:?} route={} tunnel={}",
            s.conn_id, s.src, s.dst, s.final_state, s.route, s.tunnel_state
        );
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn calibrate_cmd(
    table3: &Path,
    anchors: &Path,
    out: &Path,
    lab: Option<&PathBuf>,
    field: Option<&PathBuf>,
) -> Result<(), Failure> {
    let rows = read_table3(read(table3)?.as_bytes())
        .with_context(|| format!("parsing {}", table3.display()))
        .map_err(Failure::invalid)?;
    let anchors = AnchorSet::parse(&read(anchors)?)
        .with_context(|| format!("parsing {}", anchors.display()))
        .map_err(Failure::invalid)?;
    let lab = load_topology(lab, fixtures::lab_topology)?;
    let field = load_topology(field, fixtures::field_topology)?;
    let params = calibrate(&rows, &anchors, &lab, &field).map_err(Failure::invalid)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Failure::io)?;
    }
    fs::write(out, params.to_json())
        .with_context(|| format!("writing {}", out.display()))
        .map_err(Failure::io)?;
    let r = &params.report;
    println!(
        "qber max residual {:.3} pp, skr rms {:.3}, skr max {:.3}",
        r.qber_max_abs_residual_pp, r.skr_rms_rel, r.skr_max_rel
    );
    for a in &r.anchors {
        println!(
            "{} {}: qber {:.3} %, skr {:.1} bps",
            if a.satisfied { "ok  " } else { "FAIL" },
            a.name,
            a.qber_pct,
            a.skr_bps
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn preset_cmd(name: &str, params: &Path, out: &Path) -> Result<(), Failure> {
    let preset = Preset::from_name(name).expect("validated by clap");
    let params = load_params(params)?;
    let paths = match preset {
        Preset::Table3 => {
            let rows = presets::table3(&params).map_err(Failure::invalid)?;
            report::emit_table3(&rows, out)?
        }
        other => {
            let sweeps = presets::sweeps(other, &params).map_err(Failure::invalid)?;
            report::emit_sweeps(other.name(), &sweeps, out)?
        }
    };
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn validate_cmd(file: &Path) -> Result<(), Failure> {
    let config = TopologyConfig::parse(&read(file)?).map_err(Failure::invalid)?;
    let violations = validate(&config);
    for v in &violations {
        println!("{v}");
    }
    let errors = violations.iter().filter(|v| v.severity == Severity::Error).count();
    if errors > 0 {
        return Err(Failure::invalid(anyhow::anyhow!("{errors} error(s) in {}", file.display())));
    }
    println!(
        "{}: valid ({} warning(s))",
        file.display(),
        violations.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenario, seed, out, params } => run_cmd(scenario, *seed, out, params.as_ref()),
        Command::Calibrate { table3, anchors, out, lab_topology, field_topology } => {
            calibrate_cmd(table3, anchors, out, lab_topology.as_ref(), field_topology.as_ref())
        }
        Command::Preset { name, params, out } => preset_cmd(name, params, out),
        Command::Topology { action: TopologyAction::Validate { file } } => validate_cmd(file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
