//! Solver dispatch: resolve the configuration, run, and emit artifacts.

use std::time::Instant;

use nalgebra::DVector;
use serde_json::{json, Map, Value};

use subriem::abnormal::{abnormal_curve, AbnormalStatus, CodistState, Steering};
use subriem::fieldspec::Expr;
use subriem::geometry::flags::{growth_vector, symbol_algebra};
use subriem::hamiltonian::{horizontal_curve_from_control, normal_geodesic};
use subriem::schouten::{compare_straightest_shortest, s_geodesic};
use subriem::trajectory::Trajectory;
use subriem::{Error, Result};

use crate::config::{to_dvector, Loaded, RunConfig};
use crate::output::{
    diagnostics_json, emit_report, fmt_f64, report, trajectory_csv, write_file, ExtraChannel,
};

fn config_echo(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).unwrap_or(Value::Null)
}

fn need<T: Clone>(opt: &Option<T>, what: &str) -> Result<T> {
    opt.clone()
        .ok_or_else(|| Error::Config(format!("missing `{what}`")))
}

fn chart_structure(loaded: &Loaded) -> Result<&subriem::SRStructure> {
    loaded.structure.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "scenario `{}` has no chart structure for this solver",
            loaded.label
        ))
    })
}

fn bundle(loaded: &Loaded) -> Result<&subriem::chaplygin::ChaplyginBundle> {
    loaded.bundle.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "scenario `{}` has no bundle block for this solver",
            loaded.label
        ))
    })
}

fn emit_trajectory(
    cfg: &RunConfig,
    solver: &str,
    label: &str,
    tr: &Trajectory,
    extra: ExtraChannel,
    extras: Map<String, Value>,
    started: Instant,
) -> Result<()> {
    let out = cfg.output.clone().unwrap_or_default();
    if let Some(path) = &out.csv {
        write_file(path, &trajectory_csv(tr, extra)?)?;
    }
    let rep = report(
        solver,
        label,
        diagnostics_json(tr),
        Some(tr.len()),
        extras,
        started.elapsed().as_secs_f64(),
        config_echo(cfg),
    );
    emit_report(&rep, out.report.as_deref())
}

pub fn geodesic(cfg: RunConfig) -> Result<()> {
    if let Some(spec) = cfg.sweep.clone() {
        return sweep_geodesic(cfg, &spec);
    }
    let started = Instant::now();
    let loaded = cfg.resolve()?;
    let mode = cfg.mode.clone().unwrap_or_else(|| "normal".into());
    let s = chart_structure(&loaded)?;
    let q0 = to_dvector(&cfg.q0.clone().unwrap_or_else(|| vec![0.0; s.dim()]));
    match mode.as_str() {
        "normal" => {
            let v0 = to_dvector(&need(&cfg.v0, "v0")?);
            let lambda = to_dvector(
                &cfg.lambda
                    .clone()
                    .unwrap_or_else(|| vec![0.0; s.corank()]),
            );
            let tr = normal_geodesic(s, &q0, &v0, &lambda, cfg.t_end(), cfg.step(), &loaded.params)?;
            emit_trajectory(
                &cfg,
                "geodesic-normal",
                &loaded.label,
                &tr,
                ExtraChannel::Momenta,
                Map::new(),
                started,
            )
        }
        "straightest" => {
            let v0 = to_dvector(&need(&cfg.v0, "v0")?);
            let tr = s_geodesic(s, &q0, &v0, cfg.t_end(), cfg.step(), &loaded.params)?;
            emit_trajectory(
                &cfg,
                "geodesic-straightest",
                &loaded.label,
                &tr,
                ExtraChannel::Controls,
                Map::new(),
                started,
            )
        }
        "control" => {
            let exprs = need(&cfg.control, "control")?;
            if exprs.len() != s.rank() {
                return Err(Error::Config(format!(
                    "control needs {} expressions",
                    s.rank()
                )));
            }
            // Control components are expressions in the time variable q1.
            let parsed: Vec<Expr> = exprs
                .iter()
                .map(|e| Expr::parse(e, 1))
                .collect::<Result<_>>()?;
            let control = move |t: f64| {
                DVector::from_fn(parsed.len(), |i, _| {
                    parsed[i].eval(&[t]).unwrap_or(f64::NAN)
                })
            };
            let tr = horizontal_curve_from_control(
                s,
                &q0,
                &control,
                cfg.t_end(),
                cfg.step(),
                &loaded.params,
            )?;
            emit_trajectory(
                &cfg,
                "geodesic-control",
                &loaded.label,
                &tr,
                ExtraChannel::Controls,
                Map::new(),
                started,
            )
        }
        other => Err(Error::Config(format!(
            "unknown mode `{other}` (normal, straightest, control)"
        ))),
    }
}

/// `lambda=start:end:step` fans out one normal-geodesic run per value across
/// worker threads; results are gathered in sweep order.
fn sweep_geodesic(cfg: RunConfig, spec: &str) -> Result<()> {
    let started = Instant::now();
    let (key, range) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config("sweep must look like lambda=0:1:0.1".into()))?;
    if key != "lambda" {
        return Err(Error::Config(format!("unsupported sweep key `{key}`")));
    }
    let parts: Vec<f64> = range
        .split(':')
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad sweep bound `{p}`")))
        })
        .collect::<Result<_>>()?;
    let [start, end, step]: [f64; 3] = parts
        .try_into()
        .map_err(|_| Error::Config("sweep needs start:end:step".into()))?;
    if step <= 0.0 || end < start {
        return Err(Error::Config("sweep needs start ≤ end and step > 0".into()));
    }
    let mut values = Vec::new();
    let mut v = start;
    while v <= end + 1e-12 * step {
        values.push(v);
        v += step;
    }

    let loaded = cfg.resolve()?;
    let s = chart_structure(&loaded)?;
    if s.corank() != 1 {
        return Err(Error::Config(
            "lambda sweeps need a corank-one structure".into(),
        ));
    }
    let q0 = to_dvector(&cfg.q0.clone().unwrap_or_else(|| vec![0.0; s.dim()]));
    let v0 = to_dvector(&need(&cfg.v0, "v0")?);
    let out = cfg.output.clone().unwrap_or_default();

    // Independent workers, one per sweep value; no shared mutable state.
    let results: Vec<Result<(f64, Trajectory)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = values
            .iter()
            .map(|&lambda| {
                let q0 = q0.clone();
                let v0 = v0.clone();
                let s = &*s;
                let params = &loaded.params;
                let cfg = &cfg;
                scope.spawn(move || {
                    let tr = normal_geodesic(
                        s,
                        &q0,
                        &v0,
                        &DVector::from_vec(vec![lambda]),
                        cfg.t_end(),
                        cfg.step(),
                        params,
                    )?;
                    Ok((lambda, tr))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });

    let mut entries = Vec::new();
    for result in results {
        let (lambda, tr) = result?;
        let csv_path = out.csv.as_ref().map(|p| sweep_path(p, lambda));
        if let Some(path) = &csv_path {
            write_file(path, &trajectory_csv(&tr, ExtraChannel::Momenta)?)?;
        }
        entries.push(json!({
            "lambda": lambda,
            "rows": tr.len(),
            "residuals": diagnostics_json(&tr),
            "csv": csv_path,
        }));
    }
    let mut extras = Map::new();
    extras.insert("sweep".into(), Value::Array(entries));
    let rep = report(
        "geodesic-normal-sweep",
        &loaded.label,
        Value::Object(Map::new()),
        None,
        extras,
        started.elapsed().as_secs_f64(),
        config_echo(&cfg),
    );
    emit_report(&rep, out.report.as_deref())
}

fn sweep_path(base: &str, lambda: f64) -> String {
    match base.rsplit_once('.') {
        Some((stem, ext)) => format!("{stem}_lambda{lambda}.{ext}"),
        None => format!("{base}_lambda{lambda}"),
    }
}

pub fn abnormal(cfg: RunConfig) -> Result<()> {
    let started = Instant::now();
    let loaded = cfg.resolve()?;
    let s = chart_structure(&loaded)?;
    let q0 = to_dvector(&cfg.q0.clone().unwrap_or_else(|| vec![0.0; s.dim()]));
    let k0 = to_dvector(&need(&cfg.k0, "k0")?);
    let run = abnormal_curve(
        s,
        &CodistState::new(q0, k0),
        &Steering::Continuity,
        cfg.t_end(),
        cfg.step(),
        &loaded.params,
    )?;
    let mut extras = Map::new();
    extras.insert(
        "status".into(),
        match run.status {
            AbnormalStatus::Completed => json!("completed"),
            AbnormalStatus::KernelDimensionChanged { from, to } => {
                json!({ "kernel_dimension_changed": { "from": from, "to": to } })
            }
        },
    );
    emit_trajectory(
        &cfg,
        "abnormal",
        &loaded.label,
        &run.trajectory,
        ExtraChannel::Fiber,
        extras,
        started,
    )
}

pub fn flag(cfg: RunConfig, max_depth: usize, tol: Option<f64>, symbol: bool) -> Result<()> {
    let started = Instant::now();
    let loaded = cfg.resolve()?;
    let s = chart_structure(&loaded)?;
    let point = to_dvector(&cfg.point.clone().unwrap_or_else(|| vec![0.0; s.dim()]));
    let tol = tol.unwrap_or(loaded.params.rank_tol);
    let profile = growth_vector(s, &point, max_depth, tol, &loaded.params)?;
    let mut extras = Map::new();
    extras.insert("growth".into(), json!(profile.growth));
    extras.insert("depth".into(), json!(profile.depth));
    extras.insert(
        "bracket_generating".into(),
        json!(profile.bracket_generating),
    );
    let mut residuals = Map::new();
    if symbol {
        let sym = symbol_algebra(s, &point, tol, &loaded.params)?;
        residuals.insert("grade_residual".into(), json!(sym.grade_residual));
        residuals.insert(
            "generation_residual".into(),
            json!(sym.generation_residual),
        );
        extras.insert(
            "graded_dims".into(),
            json!((1..=sym.depth)
                .map(|g| sym.graded_basis.iter().filter(|v| v.grade == g).count())
                .collect::<Vec<_>>()),
        );
    }
    let rep = report(
        "flag",
        &loaded.label,
        Value::Object(residuals),
        None,
        extras,
        started.elapsed().as_secs_f64(),
        config_echo(&cfg),
    );
    emit_report(&rep, cfg.output.as_ref().and_then(|o| o.report.as_deref()))
}

pub fn lift(cfg: RunConfig) -> Result<()> {
    let started = Instant::now();
    let loaded = cfg.resolve()?;
    let b = bundle(&loaded)?;
    let x0 = to_dvector(&cfg.x0.clone().unwrap_or_else(|| vec![0.0; b.base_dim()]));
    let v0 = to_dvector(&need(&cfg.v0, "v0")?);
    let (base, lift) = b.straightest_geodesic_via_lift(
        &x0,
        &v0,
        &b.group.identity(),
        cfg.t_end(),
        cfg.step(),
        &loaded.params,
    )?;
    emit_lifted(&cfg, "chaplygin-lift", &loaded, base, lift, started)
}

pub fn bundle_straightest(cfg: RunConfig) -> Result<()> {
    let started = Instant::now();
    let loaded = cfg.resolve()?;
    let b = bundle(&loaded)?;
    let x0 = to_dvector(&cfg.x0.clone().unwrap_or_else(|| vec![0.0; b.base_dim()]));
    let v0 = to_dvector(&need(&cfg.v0, "v0")?);
    let (base, lift) = b.straightest_geodesic_via_lift(
        &x0,
        &v0,
        &b.group.identity(),
        cfg.t_end(),
        cfg.step(),
        &loaded.params,
    )?;
    // On chart scenarios, cross-check against the chart straightest solver.
    let mut extras = Map::new();
    if let (Ok(s), Ok(z0)) = (
        b.chart_structure(),
        b.group.vector_chart_coords(&b.group.identity()),
    ) {
        let mut q0 = DVector::zeros(s.dim());
        q0.rows_mut(0, b.base_dim()).copy_from(&x0);
        q0.rows_mut(b.base_dim(), z0.len()).copy_from(&z0);
        let chart = s_geodesic(&s, &q0, &v0, cfg.t_end(), cfg.step(), &loaded.params)?;
        let mut gap: f64 = 0.0;
        for ((x, g), q) in base
            .positions
            .iter()
            .zip(&lift.elements)
            .zip(&chart.positions)
        {
            let z = b.group.vector_chart_coords(g)?;
            for i in 0..b.base_dim() {
                gap = gap.max((x[i] - q[i]).abs());
            }
            for (alpha, zv) in z.iter().enumerate() {
                gap = gap.max((zv - q[b.base_dim() + alpha]).abs());
            }
        }
        extras.insert("chart_agreement".into(), json!(gap));
    }
    emit_lifted_with(&cfg, "chaplygin-s-geodesic", &loaded, base, lift, extras, started)
}

fn emit_lifted(
    cfg: &RunConfig,
    solver: &str,
    loaded: &Loaded,
    base: Trajectory,
    lift: subriem::chaplygin::GroupCurve,
    started: Instant,
) -> Result<()> {
    emit_lifted_with(cfg, solver, loaded, base, lift, Map::new(), started)
}

fn emit_lifted_with(
    cfg: &RunConfig,
    solver: &str,
    loaded: &Loaded,
    base: Trajectory,
    lift: subriem::chaplygin::GroupCurve,
    mut extras: Map<String, Value>,
    started: Instant,
) -> Result<()> {
    let b = bundle(loaded)?;
    let out = cfg.output.clone().unwrap_or_default();
    if let Some(path) = &out.csv {
        // Columns: t, base coordinates, then fiber chart coordinates when the
        // group has one, otherwise the flattened group entries.
        let mut csv = String::new();
        let fiber_chart = b.group.vector_chart_coords(&b.group.identity()).is_ok();
        let mut header: Vec<String> = vec!["t".into()];
        header.extend((1..=b.base_dim()).map(|i| format!("q{i}")));
        if fiber_chart {
            header.extend(
                (1..=b.group.dim).map(|i| format!("q{}", b.base_dim() + i)),
            );
        } else {
            for r in 0..b.group.d {
                for c in 0..b.group.d {
                    header.push(format!("g{}{}", r + 1, c + 1));
                }
            }
        }
        csv.push_str(&header.join(","));
        csv.push('\n');
        for ((t, x), g) in base
            .times
            .iter()
            .zip(&base.positions)
            .zip(&lift.elements)
        {
            csv.push_str(&fmt_f64(*t));
            for v in x.iter() {
                csv.push(',');
                csv.push_str(&fmt_f64(*v));
            }
            if fiber_chart {
                for v in b.group.vector_chart_coords(g)?.iter() {
                    csv.push(',');
                    csv.push_str(&fmt_f64(*v));
                }
            } else {
                for v in g.iter() {
                    csv.push(',');
                    csv.push_str(&fmt_f64(*v));
                }
            }
            csv.push('\n');
        }
        write_file(path, &csv)?;
    }
    let mut residuals = Map::new();
    for (k, v) in &lift.diagnostics.0 {
        residuals.insert(k.clone(), json!(v));
    }
    for (k, v) in &base.diagnostics.0 {
        residuals.insert(format!("base_{k}"), json!(v));
    }
    extras.insert("rows".into(), json!(base.len()));
    let rep = report(
        solver,
        &loaded.label,
        Value::Object(residuals),
        None,
        extras,
        started.elapsed().as_secs_f64(),
        config_echo(cfg),
    );
    emit_report(&rep, out.report.as_deref())
}

pub fn wong(cfg: RunConfig) -> Result<()> {
    let started = Instant::now();
    let loaded = cfg.resolve()?;
    let b = bundle(&loaded)?;
    let x0 = to_dvector(&cfg.x0.clone().unwrap_or_else(|| vec![0.0; b.base_dim()]));
    let v0 = to_dvector(&need(&cfg.v0, "v0")?);
    let charge = to_dvector(&cfg.charge.clone().unwrap_or_else(|| vec![0.0; b.group.dim]));
    let mut tr = b.wong_dynamics(&x0, &v0, &charge, cfg.t_end(), cfg.step(), &loaded.params)?;
    // Velocities double as the control channel of the base curve.
    tr.controls = tr.velocities.clone();
    emit_trajectory(
        &cfg,
        "chaplygin-wong",
        &loaded.label,
        &tr,
        ExtraChannel::Controls,
        Map::new(),
        started,
    )
}

pub fn factorize(cfg: RunConfig) -> Result<()> {
    let started = Instant::now();
    let loaded = cfg.resolve()?;
    let b = bundle(&loaded)?;
    let s = b.chart_structure()?;
    let q0 = to_dvector(&cfg.q0.clone().unwrap_or_else(|| vec![0.0; s.dim()]));
    let w = to_dvector(&need(&cfg.w, "w")?);
    let a = match &cfg.a {
        Some(a) => to_dvector(a),
        None => -b.connection_on_chart(&q0, &w)?,
    };
    let deviation =
        b.factorization_deviation(&q0, &w, &a, cfg.t_end(), cfg.step(), &loaded.params)?;
    let mut residuals = Map::new();
    residuals.insert("factorization_deviation".into(), json!(deviation));
    let mut extras = Map::new();
    extras.insert(
        "a".into(),
        json!(a.iter().copied().collect::<Vec<f64>>()),
    );
    let rep = report(
        "chaplygin-factorize",
        &loaded.label,
        Value::Object(residuals),
        None,
        extras,
        started.elapsed().as_secs_f64(),
        config_echo(&cfg),
    );
    emit_report(&rep, cfg.output.as_ref().and_then(|o| o.report.as_deref()))
}

pub fn compare(cfg: RunConfig) -> Result<()> {
    let started = Instant::now();
    let loaded = cfg.resolve()?;
    let out = cfg.output.clone().unwrap_or_default();
    let mut residuals = Map::new();
    let mut gap_curve: Vec<(f64, f64)> = Vec::new();

    if let Some(s) = &loaded.structure {
        let q0 = to_dvector(&cfg.q0.clone().unwrap_or_else(|| vec![0.0; s.dim()]));
        let v0 = to_dvector(&need(&cfg.v0, "v0")?);
        let (max_gap, gaps) =
            compare_straightest_shortest(s, &q0, &v0, cfg.t_end(), cfg.step(), &loaded.params)?;
        residuals.insert("max_deviation".into(), json!(max_gap));
        let times = subriem::ode::step_times(0.0, cfg.t_end(), cfg.step());
        gap_curve = times.into_iter().zip(gaps).collect();
    } else if let Some(gc) = &loaded.group {
        let v0 = to_dvector(&need(&cfg.v0, "v0")?);
        let s_run = gc.straightest_geodesic(&gc.group.identity(), &v0, cfg.t_end(), cfg.step())?;
        let h_run = gc.normal_geodesic(
            &gc.group.identity(),
            &v0,
            &DVector::zeros(gc.h_idx.len()),
            cfg.t_end(),
            cfg.step(),
        )?;
        let mut max_gap: f64 = 0.0;
        for ((t, a), b) in s_run
            .times
            .iter()
            .zip(&s_run.elements)
            .zip(&h_run.elements)
        {
            let gap = (a - b).amax();
            max_gap = max_gap.max(gap);
            gap_curve.push((*t, gap));
        }
        residuals.insert("max_deviation".into(), json!(max_gap));
    } else {
        return Err(Error::Config(format!(
            "scenario `{}` supports no comparison path",
            loaded.label
        )));
    }

    if let Some(path) = &out.csv {
        let mut csv = String::from("t,gap\n");
        for (t, g) in &gap_curve {
            csv.push_str(&fmt_f64(*t));
            csv.push(',');
            csv.push_str(&fmt_f64(*g));
            csv.push('\n');
        }
        write_file(path, &csv)?;
    }
    let rep = report(
        "compare",
        &loaded.label,
        Value::Object(residuals),
        Some(gap_curve.len()),
        Map::new(),
        started.elapsed().as_secs_f64(),
        config_echo(&cfg),
    );
    emit_report(&rep, out.report.as_deref())
}

pub fn validate(cfg: RunConfig) -> Result<()> {
    let started = Instant::now();
    let loaded = cfg.resolve()?;
    let mut extras = Map::new();
    if let Some(s) = &loaded.structure {
        let grid: Vec<DVector<f64>> = (0..9)
            .map(|k| DVector::from_fn(s.dim(), |r, _| ((k * (r + 2)) as f64 * 0.61).sin() * 0.9))
            .collect();
        let worst = s.validate_on_grid(&grid)?;
        extras.insert("worst_frame_condition".into(), json!(worst));
    }
    if let Some(b) = &loaded.bundle {
        extras.insert("group_dim".into(), json!(b.group.dim));
        extras.insert("ad_invariant".into(), json!(b.group.is_ad_invariant));
        let g = b.base_metric();
        g.eval_inverse(&DVector::zeros(b.base_dim()))?;
    }
    if let Some(gc) = &loaded.group {
        extras.insert("group_horizontal_rank".into(), json!(gc.m_idx.len()));
    }
    extras.insert("valid".into(), json!(true));
    let rep = report(
        "validate",
        &loaded.label,
        Value::Object(Map::new()),
        None,
        extras,
        started.elapsed().as_secs_f64(),
        config_echo(&cfg),
    );
    emit_report(&rep, cfg.output.as_ref().and_then(|o| o.report.as_deref()))
}
