//! Command-line front end: config resolution with dotted-key overrides,
//! subcommand dispatch into the harness, and SVG/CSV re-emission from
//! persisted run directories.
//!
//! Exit codes: 0 success, 1 config or validation error, 2 runtime error
//! (divergence, instability, IO). Error messages name the failing key, path,
//! or step.

use crate::error::{Error, Result};
use crate::harness::{
    self, canonical_figure_config, config_schema, ExperimentConfig, ExperimentKind, FigureId,
};
use crate::plot::{self, Figure, Panel, Series};
use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const ENV_OUT: &str = "NTK_ALIGN_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "ntk-align",
    version,
    about = "Kernel alignment experiments: network training, kernel descent baselines, \
             feature evolution flows, sweeps, and figure bundles",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    /// Experiment config JSON; omitted fields take schema defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output root; overrides the config's output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,

    /// Append a seed to the config's seed list (repeatable).
    #[arg(long = "seed", global = true, value_name = "N", action = ArgAction::Append)]
    seeds: Vec<u64>,

    /// Set one config key, e.g. --set train.eta0=0.05 (repeatable, JSON-typed).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", action = ArgAction::Append)]
    sets: Vec<String>,

    /// Print errors only.
    #[arg(long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    /// Print per-record detail and the resolved config.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Execute the configured experiment (dispatches on experiment_kind).
    Run,
    /// Run the configured sweep axis over its values.
    Sweep,
    /// Integrate the optimal feature evolution flow.
    Ofe,
    /// Reproduce a figure bundle (fig1, fig2cd, fig4, fig5, fig6, fig7).
    Repro {
        /// Figure id; without --config a built-in desk-scale config is used.
        figure: String,
    },
    /// Compare closed-form rate predictions against a training trajectory.
    Report,
    /// Resolve, validate, and print the config.
    ValidateConfig {
        /// Config path (alternative to --config).
        path: Option<PathBuf>,
    },
    /// Re-render figure.svg (and optionally copy CSVs) from a run directory.
    Export {
        /// A run directory holding trace.csv.
        run: PathBuf,
    },
}

struct Verbosity {
    quiet: bool,
    verbose: bool,
}

impl Verbosity {
    fn say(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }
    fn detail(&self, msg: &str) {
        if self.verbose {
            println!("{msg}");
        }
    }
}

/// Config-key listing appended to --help, generated from the schema.
fn schema_help() -> String {
    let mut s = String::from("Config keys (for --set KEY=VALUE; values parse as JSON):\n");
    let schema = config_schema();
    let width = schema.iter().map(|e| e.key.len()).max().unwrap_or(0);
    let dwidth = schema.iter().map(|e| e.default.len().min(24)).max().unwrap_or(0);
    for e in &schema {
        let default = if e.default.len() > 24 { format!("{}…", &e.default[..23]) } else { e.default.clone() };
        s.push_str(&format!(
            "  {:width$}  {:6}  {:dwidth$}  {}\n",
            e.key, e.type_name, default, e.help
        ));
    }
    s.push_str("\nEnvironment:\n  ");
    s.push_str(ENV_OUT);
    s.push_str("  output root used when neither --out nor the config file names one\n");
    s
}

/// Entry point: parse argv, dispatch, and map errors to exit codes.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = Cli::command().after_help(schema_help());
    let matches = match cmd.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            // --help/--version print to stdout and succeed; real parse
            // errors are invocation errors.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_config_value(path: &Path) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::InvalidConfig(format!("config {}: {e}", path.display()))
    })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))
}

/// Resolve the effective config: base (file or default), then --set overrides
/// in order, then --seed appends, then the output-root precedence
/// --out > config file > NTK_ALIGN_OUT > schema default.
fn resolve_config(cli: &Cli, base: serde_json::Value) -> Result<ExperimentConfig> {
    let mut value = base;
    let file_sets_out = value.get("output_dir").is_some();
    let sets_out = cli.sets.iter().any(|s| s.starts_with("output_dir="));
    for set in &cli.sets {
        let (key, raw) = set.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("--set expects KEY=VALUE, got '{set}'"))
        })?;
        harness::apply_override(&mut value, key, raw)?;
        // Deserialize immediately so a type error names the key that broke.
        if let Err(e) = harness::config_from_value(value.clone()) {
            return Err(Error::InvalidConfig(format!("--set {key}: {e}")));
        }
    }
    let mut config =
        harness::config_from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for &s in &cli.seeds {
        config.seeds.push(s);
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    } else if !file_sets_out && !sets_out {
        if let Ok(env_out) = std::env::var(ENV_OUT) {
            if !env_out.is_empty() {
                config.output_dir = env_out;
            }
        }
    }
    Ok(config)
}

fn base_value(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.config {
        Some(path) => read_config_value(path),
        None => Ok(serde_json::json!({})),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let v = Verbosity { quiet: cli.quiet, verbose: cli.verbose };
    match &cli.cmd {
        Cmd::Run => {
            let config = resolve_config(&cli, base_value(&cli)?)?;
            config.validate()?;
            print_resolved(&v, &config);
            run_dispatch(&v, &config)
        }
        Cmd::Sweep => {
            let config = resolve_config(&cli, base_value(&cli)?)?;
            config.validate()?;
            print_resolved(&v, &config);
            let axis = config.sweep.axis;
            let values = config.sweep.values.clone();
            let traces = harness::sweep(&config, axis, &values)?;
            for t in &traces {
                print_trace(&v, &config, t);
            }
            let hash8: String = config.hash().chars().take(8).collect();
            v.say(&format!(
                "wrote {}/sweep_{axis}_{hash8}_summary.csv",
                config.output_dir
            ));
            Ok(())
        }
        Cmd::Ofe => {
            let mut config = resolve_config(&cli, base_value(&cli)?)?;
            config.experiment_kind = ExperimentKind::Ofe;
            config.validate()?;
            print_resolved(&v, &config);
            let traces = harness::run_ofe(&config)?;
            for t in &traces {
                let last = t.records.last().expect("flow records its endpoints");
                v.say(&format!(
                    "ofe {}: t={} loss={:.3e} align={:.4} predicted_final_align={:.4} drift={:.2e}",
                    t.run_id, last.t, last.loss, last.align, t.predicted_final_align,
                    last.conservation_drift
                ));
                v.say(&format!("wrote {}/{}/trace.csv", config.output_dir, t.run_id));
            }
            Ok(())
        }
        Cmd::Repro { figure } => {
            let fig: FigureId = figure.parse()?;
            let base = match &cli.config {
                Some(path) => read_config_value(path)?,
                None => serde_json::to_value(canonical_figure_config(fig))?,
            };
            let mut config = resolve_config(&cli, base)?;
            config.experiment_kind = ExperimentKind::FigureRepro;
            config.figure = fig;
            config.validate()?;
            print_resolved(&v, &config);
            let bundle = harness::run_figure_repro(fig, &config)?;
            v.say(&format!("bundle {}", bundle.dir.display()));
            for p in &bundle.csv_paths {
                v.say(&format!("wrote {}", p.display()));
            }
            v.say(&format!("wrote {}", bundle.svg_path.display()));
            for n in &bundle.notes {
                v.detail(&format!("note: {n}"));
            }
            Ok(())
        }
        Cmd::Report => {
            let config = resolve_config(&cli, base_value(&cli)?)?;
            config.validate()?;
            print_resolved(&v, &config);
            let rows = harness::theory_report(&config)?;
            if !cli.quiet {
                println!("{:<18} {:>14} {:>14} {:>8} {:>6}", "quantity", "predicted", "measured", "ratio", "step");
                for r in &rows {
                    println!(
                        "{:<18} {:>14.6e} {:>14.6e} {:>8.3} {:>6}",
                        r.quantity, r.predicted, r.measured, r.ratio, r.step
                    );
                }
            }
            let hash8: String = config.hash().chars().take(8).collect();
            v.say(&format!("wrote {}/report_{hash8}.csv", config.output_dir));
            Ok(())
        }
        Cmd::ValidateConfig { path } => {
            let base = match (path, &cli.config) {
                (Some(p), _) => read_config_value(p)?,
                (None, Some(p)) => read_config_value(p)?,
                (None, None) => serde_json::json!({}),
            };
            let config = resolve_config(&cli, base)?;
            config.validate()?;
            print!("{}", String::from_utf8_lossy(&config.canonical_bytes()));
            Ok(())
        }
        Cmd::Export { run } => export_run(&v, &cli, run),
    }
}

fn print_resolved(v: &Verbosity, config: &ExperimentConfig) {
    if v.verbose {
        print!("{}", String::from_utf8_lossy(&config.canonical_bytes()));
    }
}

fn run_dispatch(v: &Verbosity, config: &ExperimentConfig) -> Result<()> {
    match config.experiment_kind {
        ExperimentKind::NnTrain
        | ExperimentKind::MixtureSpecialization
        | ExperimentKind::LinearTeacher => {
            let traces = harness::run_nn(config)?;
            for t in &traces {
                print_trace(v, config, t);
            }
            Ok(())
        }
        ExperimentKind::Kgd | ExperimentKind::Akgd => {
            let traces = harness::run_kernel(config)?;
            for t in &traces {
                print_trace(v, config, t);
            }
            Ok(())
        }
        ExperimentKind::Ofe => {
            let traces = harness::run_ofe(config)?;
            for t in &traces {
                let last = t.records.last().expect("flow records its endpoints");
                v.say(&format!(
                    "ofe {}: t={} loss={:.3e} align={:.4}",
                    t.run_id, last.t, last.loss, last.align
                ));
            }
            Ok(())
        }
        ExperimentKind::DepthSweep | ExperimentKind::GammaSweep => {
            let traces = harness::sweep(config, config.sweep.axis, &config.sweep.values)?;
            for t in &traces {
                print_trace(v, config, t);
            }
            Ok(())
        }
        ExperimentKind::FigureRepro => {
            let bundle = harness::run_figure_repro(config.figure, config)?;
            v.say(&format!("bundle {}", bundle.dir.display()));
            v.say(&format!("wrote {}", bundle.svg_path.display()));
            Ok(())
        }
    }
}

fn print_trace(v: &Verbosity, config: &ExperimentConfig, t: &harness::TrainingTrace) {
    let last = t.final_record();
    v.say(&format!(
        "run {}: {} records, final step {}, loss {:.6e}, alignment {:.4}",
        t.run_id,
        t.records.len(),
        last.step,
        last.loss,
        last.align_traced
    ));
    if v.verbose {
        for r in &t.records {
            println!("  step {:>6}: loss {:.6e} align {:.4}", r.step, r.loss, r.align_traced);
        }
    }
    v.say(&format!("wrote {}/{}/trace.csv", config.output_dir, t.run_id));
}

// ---------------------------------------------------------------------------
// Export: rebuild an SVG (and optionally relocate CSVs) from a run directory.
// ---------------------------------------------------------------------------

fn parse_trace_csv(body: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = body.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format("trace.csv is empty".into()))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| cell.parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        if row.len() != header.len() {
            return Err(Error::Format(format!(
                "trace.csv row {}: {} cells, header has {}",
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn column_series(
    name: &str,
    header: &[String],
    rows: &[Vec<f64>],
    col_name: &str,
) -> Option<Series> {
    let xi = 0;
    let yi = header.iter().position(|h| h == col_name)?;
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r[xi].is_finite() && r[yi].is_finite())
        .map(|r| (r[xi], r[yi]))
        .collect();
    Some(Series::new(name, points))
}

/// Render loss/alignment/norm panels from a persisted trace.csv. Works for
/// training, kernel descent, and flow traces (step- or t-indexed).
fn export_run(v: &Verbosity, cli: &Cli, run: &Path) -> Result<()> {
    let trace_path = run.join("trace.csv");
    if !trace_path.is_file() {
        return Err(Error::InvalidConfig(format!(
            "{}: no trace.csv here; pass a run directory",
            run.display()
        )));
    }
    let body = std::fs::read_to_string(&trace_path)?;
    let (header, rows) = parse_trace_csv(&body)?;
    let x_label = header.first().map(String::as_str).unwrap_or("step").to_string();
    let run_name = run
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| run.display().to_string());

    let mut panels = Vec::new();
    let mut loss_panel = Panel::new("training loss", &x_label, "loss").log_y();
    if let Some(s) = column_series("loss", &header, &rows, "loss") {
        loss_panel = loss_panel.with_series(vec![s]);
    }
    panels.push(loss_panel);
    let mut align_series = Vec::new();
    for col in ["align_traced", "align"] {
        if let Some(s) = column_series(col, &header, &rows, col) {
            align_series.push(s);
        }
    }
    for (i, h) in header.iter().enumerate() {
        if h.starts_with("align_head_") && i > 0 {
            if let Some(s) = column_series(h, &header, &rows, h) {
                align_series.push(s);
            }
        }
    }
    panels.push(Panel::new("kernel alignment", &x_label, "alignment").with_series(align_series));
    if let Some(s) = column_series("frob", &header, &rows, "frob") {
        panels.push(Panel::new("kernel norm", &x_label, "||K||_F").with_series(vec![s]));
    }

    let figure = Figure { title: format!("run {run_name}"), panels };
    let svg = plot::render_figure(&figure);
    let out_dir = match &cli.out {
        Some(out) => {
            let d = PathBuf::from(out);
            std::fs::create_dir_all(&d)?;
            std::fs::copy(&trace_path, d.join("trace.csv"))?;
            v.say(&format!("wrote {}/trace.csv", d.display()));
            d
        }
        None => run.to_path_buf(),
    };
    let svg_path = out_dir.join("figure.svg");
    std::fs::write(&svg_path, svg)?;
    v.say(&format!("wrote {}", svg_path.display()));
    Ok(())
}
