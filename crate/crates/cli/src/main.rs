//! Command-line front end: scenario/config ingestion, solver dispatch,
//! trajectory CSV and report JSON emission.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure
//! (blow-up, kernel collapse, singular frames), 4 precondition violation.
//! Identical configurations produce byte-identical CSV files; the report
//! excludes only the wall-clock field from that guarantee.

mod config;
mod output;
mod run;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "subriem",
    about = "Sub-Riemannian geometry engine: shortest, straightest and abnormal geodesics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Built-in scenario name (heisenberg, martinet, skew_heisenberg,
    /// hopf_su2, ym_plane_so3).
    #[arg(long)]
    scenario: Option<String>,
    /// JSON configuration file; command-line flags override its keys.
    #[arg(long)]
    config: Option<String>,
    /// Integration horizon.
    #[arg(long = "T")]
    t_end: Option<f64>,
    /// Integration step.
    #[arg(long)]
    step: Option<f64>,
    /// Trajectory CSV output path.
    #[arg(long)]
    csv: Option<String>,
    /// Report JSON output path (stdout when omitted).
    #[arg(long)]
    report: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a geodesic of the selected kind on a chart scenario.
    Geodesic {
        #[command(flatten)]
        common: CommonArgs,
        /// normal | straightest | control
        #[arg(long)]
        mode: Option<String>,
        /// Initial point, comma separated.
        #[arg(long)]
        q0: Option<String>,
        /// Initial horizontal velocity (frame coefficients).
        #[arg(long)]
        v0: Option<String>,
        /// Rigging pairings of the initial covector (normal mode).
        #[arg(long)]
        lambda: Option<String>,
        /// Control expressions in the time variable q1 (control mode).
        #[arg(long)]
        control: Option<String>,
        /// Sweep specification `lambda=start:end:step`; fans out across
        /// worker threads.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Integrate an abnormal (characteristic) curve.
    Abnormal {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        q0: Option<String>,
        /// Initial fiber covector coordinates.
        #[arg(long)]
        k0: Option<String>,
    },
    /// Growth vector (and optionally the symbol algebra) at a point.
    Flag {
        #[command(flatten)]
        common: CommonArgs,
        /// Base point, comma separated.
        #[arg(long)]
        point: Option<String>,
        #[arg(long, default_value_t = 6)]
        max_depth: usize,
        /// Relative rank tolerance.
        #[arg(long)]
        tol: Option<f64>,
        /// Also compute the graded symbol algebra.
        #[arg(long, default_value_t = false)]
        symbol: bool,
    },
    /// Bundle operations on a scenario with a principal-bundle block.
    Chaplygin {
        #[command(subcommand)]
        op: ChaplyginOp,
    },
    /// Run straightest vs shortest from the same data and report the gap.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        q0: Option<String>,
        #[arg(long)]
        v0: Option<String>,
    },
    /// Validate a scenario or config without integrating anything.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Subcommand)]
enum ChaplyginOp {
    /// Horizontally lift the base geodesic with the given initial data.
    Lift {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        x0: Option<String>,
        #[arg(long)]
        v0: Option<String>,
    },
    /// Charged-particle dynamics on the base.
    Wong {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        x0: Option<String>,
        #[arg(long)]
        v0: Option<String>,
        /// Constant charge in the dual algebra basis.
        #[arg(long)]
        charge: Option<String>,
    },
    /// Check the product-of-geodesics factorization against the normal
    /// geodesic (vector-group charts).
    Factorize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        q0: Option<String>,
        /// Full-space initial velocity.
        #[arg(long)]
        w: Option<String>,
        /// Fiber velocity; defaults to −ϖ(w), which satisfies the
        /// precondition exactly.
        #[arg(long)]
        a: Option<String>,
    },
    /// Straightest geodesic through the bundle (base geodesic + lift).
    #[command(name = "s-geodesic")]
    SGeodesic {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        x0: Option<String>,
        #[arg(long)]
        v0: Option<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let category = output::error_category(&e);
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": { "category": category, "message": e.to_string() }
                })
            );
            output::exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> subriem::Result<()> {
    match cli.command {
        Command::Geodesic {
            common,
            mode,
            q0,
            v0,
            lambda,
            control,
            sweep,
        } => {
            let mut cfg = RunConfig::load(&common)?;
            cfg.merge_opt_str("mode", mode);
            cfg.merge_vec("q0", q0)?;
            cfg.merge_vec("v0", v0)?;
            cfg.merge_vec("lambda", lambda)?;
            cfg.merge_control(control);
            cfg.merge_opt_str("sweep", sweep);
            run::geodesic(cfg)
        }
        Command::Abnormal { common, q0, k0 } => {
            let mut cfg = RunConfig::load(&common)?;
            cfg.merge_vec("q0", q0)?;
            cfg.merge_vec("k0", k0)?;
            run::abnormal(cfg)
        }
        Command::Flag {
            common,
            point,
            max_depth,
            tol,
            symbol,
        } => {
            let mut cfg = RunConfig::load(&common)?;
            cfg.merge_vec("point", point)?;
            run::flag(cfg, max_depth, tol, symbol)
        }
        Command::Chaplygin { op } => match op {
            ChaplyginOp::Lift { common, x0, v0 } => {
                let mut cfg = RunConfig::load(&common)?;
                cfg.merge_vec("x0", x0)?;
                cfg.merge_vec("v0", v0)?;
                run::lift(cfg)
            }
            ChaplyginOp::Wong {
                common,
                x0,
                v0,
                charge,
            } => {
                let mut cfg = RunConfig::load(&common)?;
                cfg.merge_vec("x0", x0)?;
                cfg.merge_vec("v0", v0)?;
                cfg.merge_vec("charge", charge)?;
                run::wong(cfg)
            }
            ChaplyginOp::Factorize { common, q0, w, a } => {
                let mut cfg = RunConfig::load(&common)?;
                cfg.merge_vec("q0", q0)?;
                cfg.merge_vec("w", w)?;
                cfg.merge_vec("a", a)?;
                run::factorize(cfg)
            }
            ChaplyginOp::SGeodesic { common, x0, v0 } => {
                let mut cfg = RunConfig::load(&common)?;
                cfg.merge_vec("x0", x0)?;
                cfg.merge_vec("v0", v0)?;
                run::bundle_straightest(cfg)
            }
        },
        Command::Compare { common, q0, v0 } => {
            let mut cfg = RunConfig::load(&common)?;
            cfg.merge_vec("q0", q0)?;
            cfg.merge_vec("v0", v0)?;
            run::compare(cfg)
        }
        Command::Validate { common } => {
            let cfg = RunConfig::load(&common)?;
            run::validate(cfg)
        }
    }
}
