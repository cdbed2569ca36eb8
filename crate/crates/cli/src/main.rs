//! `safehood`: simulate hybrid automata, certify neighborhoods of initial
//! states, and export plot data.

mod output;
mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use safehood_core::cover::{cover_initial_set, Mode, Verdict};
use safehood_core::model::{load_document, validate_assumptions, InitialSet, ModelDocument};
use safehood_core::robust::{classify_trajectory, robust_neighborhood, Context};
use safehood_core::safe::{build_event_tree, EdgeKind, SafeSolver};
use safehood_core::simulate::{simulate, HybridTrajectory, TerminalStatus};
use safehood_core::{Metrics, Neighborhood, Vector};

use output::{write_json, write_neighborhoods, write_trajectory, Manifest, NeighborhoodRow};

const EXIT_VERIFIED: u8 = 0;
const EXIT_INVALID: u8 = 2;
const EXIT_BLOCKED: u8 = 3;
const EXIT_FALSIFIED: u8 = 4;
const EXIT_INCONCLUSIVE: u8 = 5;

#[derive(Parser)]
#[command(
    name = "safehood",
    version,
    about = "Simulation-based safety verification of affine hybrid automata"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory and write it as CSV.
    Simulate(SimulateArgs),
    /// Certify a neighborhood of an initial state, or cover an initial box.
    Verify(VerifyArgs),
    /// Export plot layers for a finished run directory.
    Plotdata(PlotArgs),
}

#[derive(Args)]
struct Common {
    /// Model document (TOML).
    model: PathBuf,
    /// Initial state, comma separated. Overrides the model's initial set.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    initial_state: Option<Vec<f64>>,
    /// Simulation horizon in seconds.
    #[arg(long)]
    sim_time: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "safehood-run")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Robust,
    Safe,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "robust")]
    mode: ModeArg,
    /// Initial box as two comma-separated corners: LO HI.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_hyphen_values = true, conflicts_with = "initial_state")]
    initial_box: Option<Vec<String>>,
    /// Largest allowed event-time lead.
    #[arg(long)]
    max_lead: Option<f64>,
    /// Largest allowed event-time lag.
    #[arg(long)]
    max_lag: Option<f64>,
    /// Proximity threshold for guards the nominal trajectory does not take.
    #[arg(long)]
    d_thr: Option<f64>,
    /// Margin factor for the branch windows, in (0, 1).
    #[arg(long)]
    alpha: Option<f64>,
    /// Largest subdivision depth in box mode.
    #[arg(long)]
    max_depth: Option<usize>,
    /// Recorded in the manifest; the pipeline itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directory containing a manifest.
    run: PathBuf,
}

/// Error carrying the process exit code.
#[derive(Debug)]
struct Fail {
    code: u8,
    message: String,
}

impl Fail {
    fn invalid(message: impl Into<String>) -> Self {
        Fail {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl From<anyhow::Error> for Fail {
    fn from(e: anyhow::Error) -> Self {
        Fail {
            code: 1,
            message: format!("{e:#}"),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("SAFEHOOD_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Plotdata(a) => plot::cmd_plotdata(&a.run),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

struct Loaded {
    doc: ModelDocument,
    metrics: Metrics,
    overrides: BTreeMap<String, String>,
}

fn load(
    path: &Path,
    overrides: BTreeMap<String, String>,
    apply: impl FnOnce(&mut ModelDocument),
) -> Result<Loaded, Fail> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Fail::invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut doc = load_document(&text).map_err(|e| Fail::invalid(format!("{}: {e}", path.display())))?;
    apply(&mut doc);
    doc.config.validate().map_err(|e| Fail::invalid(e.to_string()))?;
    for d in validate_assumptions(&doc.automaton) {
        eprintln!("warning: {}", d.message);
    }
    let metrics = Metrics::from_automaton(&doc.automaton, &doc.config).map_err(|e| Fail::invalid(e.to_string()))?;
    Ok(Loaded {
        doc,
        metrics,
        overrides,
    })
}

fn state_arg(doc: &ModelDocument, state: &[f64]) -> Result<Vector, Fail> {
    if state.len() != doc.automaton.dimension {
        return Err(Fail::invalid(format!(
            "initial state has {} entries, model dimension is {}",
            state.len(),
            doc.automaton.dimension
        )));
    }
    Ok(Vector::from_vec(state.to_vec()))
}

fn summarize(doc: &ModelDocument, traj: &HybridTrajectory) -> serde_json::Value {
    let h = &doc.automaton;
    serde_json::json!({
        "locations": traj.locations().iter().map(|l| h.location(*l).id.clone()).collect::<Vec<_>>(),
        "events": traj.events.iter().map(|e| serde_json::json!({
            "event": h.event(e.event).name,
            "time": e.time,
            "trigger_state": e.trigger_state.as_slice(),
        })).collect::<Vec<_>>(),
        "status": traj.status,
        "unsafe_entry": traj.unsafe_hit.as_ref().map(|u| serde_json::json!({
            "segment": u.segment,
            "time": u.time,
            "state": u.state.as_slice(),
        })),
        "diagnostics": traj.diagnostics,
    })
}

fn print_trajectory(doc: &ModelDocument, traj: &HybridTrajectory) {
    let h = &doc.automaton;
    let names: Vec<String> = traj
        .events
        .iter()
        .map(|e| format!("{}@{:.6}", h.event(e.event).name, e.time))
        .collect();
    println!("segments = {}", traj.segments.len());
    println!("events = [{}]", names.join(", "));
    println!("status = {}", status_name(traj.status));
    if let Some(u) = &traj.unsafe_hit {
        println!("unsafe entry at t = {:.6}", u.time);
    }
    for d in &traj.diagnostics {
        eprintln!(
            "diagnostic: {:?} in {} at t = {:.6}",
            d.kind,
            h.location(d.location).id,
            d.time
        );
    }
}

fn status_name(s: TerminalStatus) -> &'static str {
    match s {
        TerminalStatus::HorizonReached => "horizon-reached",
        TerminalStatus::Blocked => "blocked",
        TerminalStatus::UnsafeHit => "unsafe-hit",
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<u8, Fail> {
    let start = Instant::now();
    let c = &a.common;
    let mut overrides = BTreeMap::new();
    if let Some(t) = c.sim_time {
        overrides.insert("t_end".into(), t.to_string());
    }
    let loaded = load(&c.model, overrides, |d| {
        if let Some(t) = c.sim_time {
            d.config.t_end = t;
        }
    })?;
    let doc = &loaded.doc;
    let h = &doc.automaton;
    let x0 = match &c.initial_state {
        Some(s) => state_arg(doc, s)?,
        None => h.initial.center(),
    };
    let traj = simulate(h, h.initial_location, &x0, 0.0, doc.config.t_end, &doc.config)
        .map_err(|e| Fail::invalid(e.to_string()))?;
    std::fs::create_dir_all(&c.out)?;
    write_trajectory(&c.out.join("trajectory.csv"), h, &traj)?;
    write_json(&c.out.join("summary.json"), &summarize(doc, &traj))?;
    print_trajectory(doc, &traj);
    let manifest = Manifest::new(
        &c.model,
        "simulate",
        &loaded.overrides,
        None,
        &c.out,
        vec!["trajectory.csv", "summary.json"],
        start,
    );
    manifest.write(&c.out)?;
    Ok(match traj.status {
        TerminalStatus::Blocked => EXIT_BLOCKED,
        _ => EXIT_VERIFIED,
    })
}

fn parse_corner(s: &str) -> Result<Vec<f64>, Fail> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Fail::invalid(format!("bad number `{v}`: {e}")))
        })
        .collect()
}

fn cmd_verify(a: VerifyArgs) -> Result<u8, Fail> {
    let start = Instant::now();
    let c = &a.common;
    let mut overrides = BTreeMap::new();
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.insert(k.to_string(), v);
        }
    };
    set("t_end", c.sim_time.map(|v| v.to_string()));
    set("tau_maxlead", a.max_lead.map(|v| v.to_string()));
    set("tau_maxlag", a.max_lag.map(|v| v.to_string()));
    set("d_thr", a.d_thr.map(|v| v.to_string()));
    set("alpha", a.alpha.map(|v| v.to_string()));
    set("coverage_max_depth", a.max_depth.map(|v| v.to_string()));
    let loaded = load(&c.model, overrides, |d| {
        let cfg = &mut d.config;
        if let Some(v) = c.sim_time {
            cfg.t_end = v;
        }
        if let Some(v) = a.max_lead {
            cfg.tau_maxlead = v;
        }
        if let Some(v) = a.max_lag {
            cfg.tau_maxlag = v;
        }
        if let Some(v) = a.d_thr {
            cfg.d_thr = v;
        }
        if let Some(v) = a.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = a.max_depth {
            cfg.coverage_max_depth = v;
        }
    })?;
    let mode = match a.mode {
        ModeArg::Robust => Mode::Robust,
        ModeArg::Safe => Mode::Safe,
    };
    std::fs::create_dir_all(&c.out)?;
    let doc = &loaded.doc;
    let h = &doc.automaton;
    let region = if let Some(s) = &c.initial_state {
        let x = state_arg(doc, s)?;
        (x.clone(), x)
    } else if let Some(b) = &a.initial_box {
        let lo = state_arg(doc, &parse_corner(&b[0])?)?;
        let hi = state_arg(doc, &parse_corner(&b[1])?)?;
        (lo, hi)
    } else {
        h.initial.bounds()
    };
    let point_mode =
        a.initial_box.is_none() && (c.initial_state.is_some() || matches!(h.initial, InitialSet::Point(_)));
    let (code, artifacts) = if point_mode {
        verify_state(&loaded, mode, &region.0, &c.out)?
    } else {
        verify_box(&loaded, mode, &region.0, &region.1, &c.out)?
    };
    let manifest = Manifest::new(
        &c.model,
        "verify",
        &loaded.overrides,
        Some(a.seed),
        &c.out,
        artifacts,
        start,
    );
    manifest.write(&c.out)?;
    Ok(code)
}

fn radii_line(radii: &[f64]) -> String {
    let parts: Vec<String> = radii.iter().map(|r| format!("{r:.6}")).collect();
    format!("d_min = [{}]", parts.join(", "))
}

fn verify_state(loaded: &Loaded, mode: Mode, x0: &Vector, out: &Path) -> Result<(u8, Vec<&'static str>), Fail> {
    let doc = &loaded.doc;
    let h = &doc.automaton;
    let cfg = &doc.config;
    let ctx = Context::new(h, &loaded.metrics, cfg);
    let loc = h.initial_location;
    if !h
        .location(loc)
        .invariant
        .contains(x0, safehood_core::model::GEOMETRY_TOL)
    {
        return Err(Fail::invalid(
            "initial state is outside the invariant of the initial location",
        ));
    }
    let (traj, neighborhoods, simulations, tree) = match mode {
        Mode::Robust => {
            let traj = simulate(h, loc, x0, 0.0, cfg.t_end, cfg).map_err(|e| Fail::invalid(e.to_string()))?;
            let r = robust_neighborhood(&ctx, &traj);
            (traj, r.neighborhoods, 1, None)
        }
        Mode::Safe => {
            let solver = SafeSolver::new(h, &loaded.metrics, cfg);
            let node = solver.solve(loc, x0, 0.0, cfg.t_end);
            let traj = match &node.trajectory {
                Some(t) => t.clone(),
                None => simulate(h, loc, x0, 0.0, cfg.t_end, cfg).map_err(|e| Fail::invalid(e.to_string()))?,
            };
            let tree = build_event_tree(&node);
            let tree_doc = serde_json::json!({
                "nodes": tree.count_nodes(),
                "triggered_edges": tree.count_edges(EdgeKind::Triggered),
                "virtual_edges": tree.count_edges(EdgeKind::Virtual),
                "diagnostics": node.all_diagnostics(),
            });
            (traj, node.neighborhoods.clone(), solver.simulations(), Some(tree_doc))
        }
    };
    let class = classify_trajectory(&robust_neighborhood(&ctx, &traj).segments, cfg.dist_tol);
    let radii: Vec<f64> = neighborhoods.iter().map(|n| n.radius).collect();
    let verdict = if traj.status == TerminalStatus::UnsafeHit {
        Verdict::Falsified
    } else if radii[0] > 0.0 {
        Verdict::VerifiedSafe
    } else {
        Verdict::Inconclusive
    };
    write_trajectory(&out.join("trajectory.csv"), h, &traj)?;
    let rows: Vec<NeighborhoodRow> = neighborhoods.iter().map(|n| NeighborhoodRow::new(n, class)).collect();
    write_neighborhoods(&out.join("neighborhoods.csv"), h.dimension, &rows)?;
    let report = serde_json::json!({
        "mode": mode,
        "verdict": verdict,
        "covered_fraction": if verdict == Verdict::VerifiedSafe { 1.0 } else { 0.0 },
        "radii": radii,
        "samples": [sample_doc(doc, x0, x0, 0, &neighborhoods[0], class, verdict == Verdict::VerifiedSafe)],
        "trajectory": summarize(doc, &traj),
        "event_tree": tree,
        "simulations": simulations,
    });
    write_json(&out.join("report.json"), &report)?;
    print_trajectory(doc, &traj);
    println!("{}", radii_line(&radii));
    println!("verdict = {}", verdict_name(verdict));
    let code = match (traj.status, verdict) {
        (TerminalStatus::Blocked, _) => EXIT_BLOCKED,
        (_, Verdict::VerifiedSafe) => EXIT_VERIFIED,
        (_, Verdict::Falsified) => EXIT_FALSIFIED,
        (_, Verdict::Inconclusive) => EXIT_INCONCLUSIVE,
    };
    Ok((code, vec!["trajectory.csv", "neighborhoods.csv", "report.json"]))
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::VerifiedSafe => "verified-safe",
        Verdict::Falsified => "falsified",
        Verdict::Inconclusive => "inconclusive",
    }
}

fn sample_doc(
    doc: &ModelDocument,
    lo: &Vector,
    hi: &Vector,
    depth: usize,
    n: &Neighborhood,
    class: safehood_core::CriticalityClass,
    covered: bool,
) -> serde_json::Value {
    serde_json::json!({
        "location": doc.automaton.location(n.location).id,
        "state": n.center.as_slice(),
        "lo": lo.as_slice(),
        "hi": hi.as_slice(),
        "depth": depth,
        "radius": n.radius,
        "kind": n.kind,
        "class": class,
        "covered": covered,
    })
}

fn verify_box(
    loaded: &Loaded,
    mode: Mode,
    lo: &Vector,
    hi: &Vector,
    out: &Path,
) -> Result<(u8, Vec<&'static str>), Fail> {
    let doc = &loaded.doc;
    let h = &doc.automaton;
    let cfg = &doc.config;
    let report = cover_initial_set(h, lo, hi, mode, &loaded.metrics, cfg).map_err(|e| Fail::invalid(e.to_string()))?;
    let center = (lo + hi) * 0.5;
    let mut artifacts = vec!["trajectory.csv", "neighborhoods.csv", "report.json"];
    let nominal =
        simulate(h, h.initial_location, &center, 0.0, cfg.t_end, cfg).map_err(|e| Fail::invalid(e.to_string()))?;
    write_trajectory(&out.join("trajectory.csv"), h, &nominal)?;
    let rows: Vec<NeighborhoodRow> = report
        .samples
        .iter()
        .map(|s| NeighborhoodRow::new(&s.neighborhood, s.class))
        .collect();
    write_neighborhoods(&out.join("neighborhoods.csv"), h.dimension, &rows)?;
    if let Some(cex) = &report.counterexample {
        write_trajectory(&out.join("counterexample.csv"), h, cex)?;
        artifacts.push("counterexample.csv");
    }
    let doc_report = serde_json::json!({
        "mode": report.mode,
        "verdict": report.verdict,
        "covered_fraction": report.covered_fraction,
        "fraction_by_depth": report.fraction_by_depth,
        "samples": report.samples.iter().map(|s| sample_doc(doc, &s.lo, &s.hi, s.depth, &s.neighborhood, s.class, s.covered)).collect::<Vec<_>>(),
        "counterexample": report.counterexample.as_ref().map(|t| summarize(doc, t)),
        "simulations": report.simulations,
    });
    write_json(&out.join("report.json"), &doc_report)?;
    println!("samples = {}", report.samples.len());
    println!("covered fraction = {:.6}", report.covered_fraction);
    println!("verdict = {}", verdict_name(report.verdict));
    let code = match report.verdict {
        Verdict::VerifiedSafe => EXIT_VERIFIED,
        Verdict::Falsified => EXIT_FALSIFIED,
        Verdict::Inconclusive => EXIT_INCONCLUSIVE,
    };
    Ok((code, artifacts))
}
