//! Command-line front end: analyze a point, trace a Scholtes path, enumerate
//! an atlas, or run the built-in regression examples.
//!
//! Exit codes: 0 success/verified, 1 usage or IO error, 2 numerical failure,
//! 3 verification mismatch.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ccop::activesets::ActivePattern;
use ccop::atlas;
use ccop::homotopy::{self, Schedule};
use ccop::model::{self, PointXY, ReformR};
use ccop::nlpsolver::SolverConfig;
use ccop::stationarity::{classify_r, classify_s, index_bound_check, StationarityReport};
use ccop::Tolerances;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_MISMATCH: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ccop",
    about = "Cardinality-constrained optimization: build R(c,eps) and S(t), solve, track, classify",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SideArg {
    #[value(name = "R", alias = "r")]
    R,
    #[value(name = "S", alias = "s")]
    S,
}

#[derive(Args)]
struct CommonOpts {
    /// Problem file (key-value format: n, s, objective, equalities,
    /// inequalities, optional c and epsilon)
    problem: PathBuf,
    /// Override the regularization vector c, comma separated
    #[arg(long, value_name = "CSV")]
    c: Option<String>,
    /// Override the bound-relaxation epsilon
    #[arg(long)]
    epsilon: Option<f64>,
    /// Activity tolerance for index-set detection
    #[arg(long, default_value_t = 1e-8)]
    activity_tol: f64,
    /// KKT residual tolerance of the local solver
    #[arg(long, default_value_t = 1e-10)]
    kkt_tol: f64,
    /// Output file (stdout when absent)
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Verify and classify a given point of R or S(t)
    Analyze {
        #[command(flatten)]
        common: CommonOpts,
        /// The point (x then y), comma separated, length 2n
        #[arg(long, value_name = "CSV")]
        point: String,
        /// Which problem the point belongs to
        #[arg(long, value_enum)]
        side: SideArg,
        /// Regularization parameter (required for side S)
        #[arg(long)]
        t: Option<f64>,
    },
    /// Track KKT points of S(t) along a decreasing t-schedule
    Trace {
        #[command(flatten)]
        common: CommonOpts,
        /// Start point (x then y), comma separated, length 2n
        #[arg(long, value_name = "CSV")]
        start: String,
        #[arg(long, default_value_t = 1e-1)]
        t0: f64,
        #[arg(long, default_value_t = 0.1)]
        theta: f64,
        #[arg(long, default_value_t = 1e-8)]
        tmin: f64,
    },
    /// Enumerate all T-stationary points of R (small instances)
    Atlas {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the built-in worked examples and compare against stored values
    Examples,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }

    fn mismatch(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_MISMATCH,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze {
            common,
            point,
            side,
            t,
        } => cmd_analyze(common, &point, side, t),
        Command::Trace {
            common,
            start,
            t0,
            theta,
            tmin,
        } => cmd_trace(common, &start, t0, theta, tmin),
        Command::Atlas { common } => cmd_atlas(common),
        Command::Examples => cmd_examples(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse_csv(text: &str) -> Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Failure::usage(format!("invalid number '{}'", s.trim())))
        })
        .collect()
}

fn load(common: &CommonOpts) -> Result<(ReformR, Tolerances, SolverConfig), Failure> {
    let mut file = model::ProblemFile::read(&common.problem)
        .map_err(|e| Failure::usage(format!("{}: {e}", common.problem.display())))?;
    if let Some(c) = &common.c {
        file.c = Some(parse_csv(c)?);
    }
    if let Some(eps) = common.epsilon {
        file.epsilon = Some(eps);
    }
    let reform = file
        .build()
        .map_err(|e| Failure::usage(format!("{}: {e}", common.problem.display())))?;
    let tols = Tolerances {
        activity: common.activity_tol,
        ..Tolerances::default()
    };
    let config = SolverConfig {
        kkt_tol: common.kkt_tol,
        ..SolverConfig::default()
    };
    Ok((reform, tols, config))
}

fn emit(common: &CommonOpts, payload: &str) -> Result<(), Failure> {
    match &common.output {
        Some(path) => std::fs::write(path, payload)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display()))),
        None => {
            println!("{payload}");
            Ok(())
        }
    }
}

fn parse_point(text: &str, n: usize) -> Result<PointXY, Failure> {
    let values = parse_csv(text)?;
    if values.len() != 2 * n {
        return Err(Failure::usage(format!(
            "point has {} entries, expected 2n = {}",
            values.len(),
            2 * n
        )));
    }
    Ok(PointXY::from_flat(&values))
}

fn cmd_analyze(
    common: CommonOpts,
    point: &str,
    side: SideArg,
    t: Option<f64>,
) -> Result<(), Failure> {
    let (reform, tols, _) = load(&common)?;
    let point = parse_point(point, reform.n())?;
    let report = match side {
        SideArg::R => classify_r(&reform, &point, &tols),
        SideArg::S => {
            let t = t.ok_or_else(|| Failure::usage("side S requires --t"))?;
            let scholtes = reform
                .scholtes(t)
                .map_err(|e| Failure::usage(e.to_string()))?;
            classify_s(&scholtes, &point, &tols)
        }
    }
    .map_err(|e| Failure::numerical(e.to_string()))?;

    let payload = match common.format {
        Format::Json => serde_json::to_string_pretty(&report).expect("report serializes"),
        Format::Text => render_report(&report),
    };
    emit(&common, &payload)?;
    if report.stationary {
        Ok(())
    } else {
        Err(Failure::mismatch(format!(
            "point is not a verified stationary point (residual {:.3e}{})",
            report.stationarity_residual,
            if report.sign_failures.is_empty() {
                String::new()
            } else {
                format!("; sign failures: {}", report.sign_failures.join(", "))
            }
        )))
    }
}

fn cmd_trace(
    common: CommonOpts,
    start: &str,
    t0: f64,
    theta: f64,
    tmin: f64,
) -> Result<(), Failure> {
    let (reform, tols, config) = load(&common)?;
    let start = parse_point(start, reform.n())?;
    let schedule = Schedule {
        t0,
        theta,
        t_min: tmin,
    };
    schedule
        .validate()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let trace = homotopy::scholtes_path(&reform, &start, &schedule, &config, &tols)
        .map_err(|e| Failure::numerical(e.to_string()))?;

    let audit = trace
        .terminal
        .as_ref()
        .map(|_| homotopy::index_persistence_audit(&trace, &tols))
        .transpose()
        .map_err(|e| Failure::numerical(e.to_string()))?;
    let limits = if trace.records.len() >= 3 && trace.terminal.is_some() {
        Some(
            homotopy::multiplier_limits(&trace, 1e-4)
                .map_err(|e| Failure::numerical(e.to_string()))?,
        )
    } else {
        None
    };

    let payload = match common.format {
        Format::Json => {
            // JSON lines: one record per t, then terminal and audit verdicts
            let mut out = String::new();
            for rec in &trace.records {
                writeln!(out, "{}", serde_json::json!({ "record": rec })).unwrap();
            }
            if let Some(term) = &trace.terminal {
                writeln!(out, "{}", serde_json::json!({ "terminal": term })).unwrap();
            }
            if let Some(audit) = &audit {
                writeln!(out, "{}", serde_json::json!({ "audit": audit })).unwrap();
            }
            if let Some(limits) = &limits {
                writeln!(
                    out,
                    "{}",
                    serde_json::json!({ "multiplier_limits": limits })
                )
                .unwrap();
            }
            if let Some(reason) = &trace.aborted {
                writeln!(out, "{}", serde_json::json!({ "aborted": reason })).unwrap();
            }
            out.trim_end().to_string()
        }
        Format::Text => render_trace(&trace, audit.as_ref(), limits.as_ref()),
    };
    emit(&common, &payload)?;
    if let Some(reason) = &trace.aborted {
        return Err(Failure::numerical(format!("trace aborted: {reason}")));
    }
    Ok(())
}

fn cmd_atlas(common: CommonOpts) -> Result<(), Failure> {
    let (reform, tols, config) = load(&common)?;
    let result =
        atlas::atlas(&reform, &config, &tols).map_err(|e| Failure::usage(e.to_string()))?;
    let payload = match common.format {
        Format::Json => serde_json::to_string_pretty(&result).expect("atlas serializes"),
        Format::Text => render_atlas(&result),
    };
    emit(&common, &payload)
}

// ---------------------------------------------------------------------------
// Text renderers
// ---------------------------------------------------------------------------

fn fmt_indices(v: &[usize]) -> String {
    if v.is_empty() {
        "-".to_string()
    } else {
        v.iter()
            .map(|i| (i + 1).to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn render_pattern(p: &ActivePattern) -> String {
    match p.side {
        ccop::activesets::Side::R => format!(
            "a01={{{}}} a10={{{}}} a00={{{}}} Q0={{{}}} E={{{}}} sum_active={}",
            fmt_indices(&p.a01),
            fmt_indices(&p.a10),
            fmt_indices(&p.a00),
            fmt_indices(&p.q0),
            fmt_indices(&p.e_upper),
            p.sum_active
        ),
        ccop::activesets::Side::S => format!(
            "N={{{}}} Hge={{{}}} Hle={{{}}} O={{{}}} Q0={{{}}} E={{{}}} sum_active={}",
            fmt_indices(&p.n_zero),
            fmt_indices(&p.h_ge),
            fmt_indices(&p.h_le),
            fmt_indices(&p.o_free),
            fmt_indices(&p.q0),
            fmt_indices(&p.e_upper),
            p.sum_active
        ),
    }
}

fn render_report(r: &StationarityReport) -> String {
    let mut out = String::new();
    writeln!(out, "kind:               {:?}", r.kind).unwrap();
    writeln!(out, "point:              {}", r.point).unwrap();
    writeln!(out, "pattern:            {}", render_pattern(&r.pattern)).unwrap();
    writeln!(
        out,
        "stationary:         {} (residual {:.3e})",
        r.stationary, r.stationarity_residual
    )
    .unwrap();
    for f in &r.sign_failures {
        writeln!(out, "  sign failure:     {f}").unwrap();
    }
    writeln!(
        out,
        "licq:               {} (min sv {:.3e})",
        r.licq.ok, r.licq.min_singular_value
    )
    .unwrap();
    writeln!(out, "active gradients:   {}", r.num_active_gradients).unwrap();
    for c in &r.conditions {
        writeln!(
            out,
            "{:<6} {}    {}",
            format!("{}:", c.name),
            if c.pass { "pass" } else { "FAIL" },
            c.witness
        )
        .unwrap();
    }
    writeln!(out, "nondegenerate:      {}", r.nondegenerate).unwrap();
    if let Some(inertia) = r.inertia {
        writeln!(
            out,
            "inertia (-,0,+):    ({}, {}, {})",
            inertia.negatives, inertia.zeros, inertia.positives
        )
        .unwrap();
    }
    if let Some(qi) = r.quadratic_index {
        writeln!(out, "quadratic index:    {qi}").unwrap();
    }
    if let Some(bi) = r.biactive_index {
        writeln!(out, "biactive index:     {bi}").unwrap();
    }
    if let Some(ti) = r.t_index {
        writeln!(out, "T-index:            {ti}").unwrap();
    }
    if let Some(m) = &r.multipliers_r {
        writeln!(
            out,
            "multipliers:        {}",
            serde_json::to_string(m).unwrap()
        )
        .unwrap();
    }
    if let Some(m) = &r.multipliers_s {
        writeln!(
            out,
            "multipliers:        {}",
            serde_json::to_string(m).unwrap()
        )
        .unwrap();
    }
    out.trim_end().to_string()
}

fn render_trace(
    trace: &homotopy::HomotopyTrace,
    audit: Option<&homotopy::AuditReport>,
    limits: Option<&homotopy::MultiplierLimitReport>,
) -> String {
    let mut out = String::new();
    writeln!(out, "{:>12}  {:>4}  {:>12}  pattern", "t", "QI", "residual").unwrap();
    for rec in &trace.records {
        writeln!(
            out,
            "{:>12.4e}  {:>4}  {:>12.3e}  {}",
            rec.t,
            rec.report
                .quadratic_index
                .map(|v| v.to_string())
                .unwrap_or_else(|| "?".into()),
            rec.report.stationarity_residual,
            render_pattern(&rec.report.pattern)
        )
        .unwrap();
    }
    if let Some(term) = &trace.terminal {
        writeln!(out, "limit: {}", term.point).unwrap();
        writeln!(
            out,
            "limit verdict: stationary={} nondegenerate={} TI={:?}",
            term.report.stationary, term.report.nondegenerate, term.report.t_index
        )
        .unwrap();
        for c in &term.report.conditions {
            if !c.pass {
                writeln!(out, "  {} FAIL: {}", c.name, c.witness).unwrap();
            }
        }
    }
    if let Some(audit) = audit {
        match &audit.skipped {
            Some(reason) => writeln!(out, "audit skipped: {reason}").unwrap(),
            None => {
                let b = audit.bounds.as_ref().unwrap();
                writeln!(
                    out,
                    "audit: bounds {} <= TI={} <= {} hold={} ndt6={} equality={:?} relations={}",
                    b.lower,
                    b.t_index,
                    b.upper,
                    b.bounds_hold,
                    b.ndt6_holds,
                    b.equality_holds,
                    audit.relations_hold
                )
                .unwrap();
            }
        }
    }
    if let Some(limits) = limits {
        writeln!(
            out,
            "multiplier limits: max error {:.3e} (tol {:.1e}) pass={}",
            limits.max_error, limits.tol, limits.pass
        )
        .unwrap();
    }
    if let Some(reason) = &trace.aborted {
        writeln!(out, "ABORTED: {reason}").unwrap();
    }
    out.trim_end().to_string()
}

fn render_atlas(result: &atlas::AtlasResult) -> String {
    let mut out = String::new();
    writeln!(out, "T-stationary points: {}", result.entries.len()).unwrap();
    for e in &result.entries {
        writeln!(
            out,
            "  {}  TI={:?} nondegenerate={}  {}",
            e.point,
            e.report.t_index,
            e.report.nondegenerate,
            render_pattern(&e.report.pattern)
        )
        .unwrap();
    }
    writeln!(out, "histogram by T-index:").unwrap();
    for (ti, count) in &result.histogram {
        writeln!(out, "  TI={ti}: {count}").unwrap();
    }
    if result.undefined_index > 0 {
        writeln!(out, "  undefined: {}", result.undefined_index).unwrap();
    }
    writeln!(
        out,
        "distinct x-projections: {}",
        result.x_projection_counts.len()
    )
    .unwrap();
    for (x, count) in &result.x_projection_counts {
        writeln!(out, "  x={x:?}: {count} point(s)").unwrap();
    }
    out.trim_end().to_string()
}

// ---------------------------------------------------------------------------
// Built-in regression examples
// ---------------------------------------------------------------------------

struct Checker {
    failures: Vec<String>,
    checks: usize,
}

impl Checker {
    fn new() -> Self {
        Checker {
            failures: Vec::new(),
            checks: 0,
        }
    }

    fn close(&mut self, name: &str, actual: f64, expected: f64, tol: f64) {
        self.checks += 1;
        if (actual - expected).abs() <= tol {
            println!("  ok {name} = {actual}");
        } else {
            println!("  MISMATCH {name}: expected {expected}, actual {actual}");
            self.failures
                .push(format!("{name}: expected {expected}, actual {actual}"));
        }
    }

    fn flag(&mut self, name: &str, actual: bool, expected: bool) {
        self.checks += 1;
        if actual == expected {
            println!("  ok {name} = {actual}");
        } else {
            println!("  MISMATCH {name}: expected {expected}, actual {actual}");
            self.failures
                .push(format!("{name}: expected {expected}, actual {actual}"));
        }
    }
}

/// Run both built-in worked instances end to end and compare every computed
/// quantity against its stored expected value.
fn cmd_examples() -> Result<(), Failure> {
    let tols = Tolerances::default();
    let mut check = Checker::new();
    let p = PointXY::from_flat(&[0.0, 1.0, 1.0, 0.0]);

    println!("example 1: degenerate limit (strict complementarity fails)");
    let reform = model::builtin::strict_complementarity_failure();
    for &t in &[0.05, 0.01, 0.001] {
        let scholtes = reform
            .scholtes(t)
            .map_err(|e| Failure::numerical(e.to_string()))?;
        let path_point = PointXY::from_flat(&[t, 1.0, 1.0, 0.0]);
        let rep = classify_s(&scholtes, &path_point, &tols)
            .map_err(|e| Failure::numerical(e.to_string()))?;
        check.flag(&format!("t={t}: KKT verified"), rep.stationary, true);
        check.flag(&format!("t={t}: nondegenerate"), rep.nondegenerate, true);
        let m = rep.multipliers_s.as_ref().unwrap();
        check.close(
            &format!("t={t}: mu3"),
            m.mu3,
            1.0 + 2.0 * t - 2.0 * t * t,
            1e-8,
        );
        check.close(
            &format!("t={t}: eta_le[1]"),
            m.eta_le_for(0).unwrap_or(f64::NAN),
            2.0 - 2.0 * t,
            1e-8,
        );
        check.close(
            &format!("t={t}: nu[2]"),
            m.nu_for(1).unwrap_or(f64::NAN),
            5.0 / 36.0 - 2.0 * t + 2.0 * t * t,
            1e-8,
        );
    }
    let rep = classify_r(&reform, &p, &tols).map_err(|e| Failure::numerical(e.to_string()))?;
    check.flag("limit: T-stationary", rep.stationary, true);
    let m = rep.multipliers_r.as_ref().unwrap();
    check.close("limit: mu1", m.mu1_for(0).unwrap_or(f64::NAN), 0.0, 1e-8);
    check.close("limit: mu3", m.mu3, 1.0, 1e-8);
    check.close(
        "limit: sigma1[1]",
        m.sigma1_for(0).unwrap_or(f64::NAN),
        -2.0,
        1e-8,
    );
    check.close(
        "limit: sigma2[2]",
        m.sigma2_for(1).unwrap_or(f64::NAN),
        5.0 / 36.0,
        1e-8,
    );
    check.flag(
        "limit: strict complementarity violated",
        !rep.condition_passes("NDT2"),
        true,
    );

    println!("example 2: index drop at a vanishing-sigma1 limit");
    let reform = model::builtin::vanishing_sigma1();
    let mut m_qi = 0usize;
    for &t in &[0.1, 0.01] {
        let scholtes = reform
            .scholtes(t)
            .map_err(|e| Failure::numerical(e.to_string()))?;
        let rep =
            classify_s(&scholtes, &p, &tols).map_err(|e| Failure::numerical(e.to_string()))?;
        check.flag(
            &format!("t={t}: nondegenerate KKT"),
            rep.stationary && rep.nondegenerate,
            true,
        );
        check.close(
            &format!("t={t}: QI"),
            rep.quadratic_index.map(|v| v as f64).unwrap_or(f64::NAN),
            1.0,
            0.0,
        );
        let m = rep.multipliers_s.as_ref().unwrap();
        check.close(
            &format!("t={t}: mu1"),
            m.mu1_for(0).unwrap_or(f64::NAN),
            2.0,
            1e-8,
        );
        check.close(&format!("t={t}: mu3"), m.mu3, 1.0, 1e-8);
        check.close(
            &format!("t={t}: nu[2]"),
            m.nu_for(1).unwrap_or(f64::NAN),
            1.0,
            1e-8,
        );
        m_qi = rep.quadratic_index.unwrap_or(0);
    }
    let rep = classify_r(&reform, &p, &tols).map_err(|e| Failure::numerical(e.to_string()))?;
    check.flag(
        "limit: nondegenerate T-stationary",
        rep.stationary && rep.nondegenerate,
        true,
    );
    check.close(
        "limit: TI",
        rep.t_index.map(|v| v as f64).unwrap_or(f64::NAN),
        0.0,
        0.0,
    );
    let sigma1 = rep
        .multipliers_r
        .as_ref()
        .unwrap()
        .sigma1_for(0)
        .unwrap_or(f64::NAN);
    check.close("limit: sigma1[1]", sigma1, 0.0, 1e-10);
    check.flag(
        "limit: sigma1 condition fails",
        !rep.condition_passes("NDT6"),
        true,
    );
    let verdict =
        index_bound_check(m_qi, &rep, &tols).map_err(|e| Failure::numerical(e.to_string()))?;
    check.flag("bounds hold", verdict.bounds_hold, true);
    check.flag("lower bound attained", verdict.lower_attained, true);
    check.close("lower bound", verdict.lower as f64, 0.0, 0.0);
    check.close("upper bound (m)", verdict.upper as f64, 1.0, 0.0);

    println!(
        "{} checks, {} mismatches",
        check.checks,
        check.failures.len()
    );
    if check.failures.is_empty() {
        println!("examples: PASS");
        Ok(())
    } else {
        Err(Failure::mismatch(format!(
            "{} mismatches: {}",
            check.failures.len(),
            check.failures.join("; ")
        )))
    }
}
