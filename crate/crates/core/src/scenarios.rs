//! Built-in problem instances. Each scenario bundles a chart structure
//! and/or a bundle (or group) presentation of the same geometry, validated at
//! load time, together with the default tolerances its oracles assume.

use nalgebra::{DMatrix, DVector};

use crate::chaplygin::{ChaplyginBundle, GroupChaplygin, MatrixLieGroup};
use crate::geometry::SRStructure;
use crate::{Error, NumericParams, Result};

/// A named, validated problem instance.
pub struct Scenario {
    pub name: &'static str,
    /// Chart structure, when the scenario lives in a single chart.
    pub structure: Option<SRStructure>,
    /// Principal-bundle presentation, when one exists.
    pub bundle: Option<ChaplyginBundle>,
    /// Left-invariant group presentation, when one exists.
    pub group: Option<GroupChaplygin>,
    pub params: NumericParams,
}

pub const SCENARIO_NAMES: [&str; 5] = [
    "heisenberg",
    "martinet",
    "skew_heisenberg",
    "hopf_su2",
    "ym_plane_so3",
];

/// Load a named scenario. Every embedded object is validated: frame
/// invertibility on a sample grid, metric positivity, group axioms.
pub fn load(name: &str) -> Result<Scenario> {
    let params = NumericParams::default();
    let scenario = match name {
        // Contact structure on R³. The chart frame is the lift of the
        // planar bundle with potential A = ½(q2 dq1 − q1 dq2), whose
        // curvature is F^1_{12} = −1 (counterclockwise loops gain +area in
        // the fiber).
        "heisenberg" => {
            let structure = SRStructure::parse(
                3,
                &[&["1", "0", "-q2/2"], &["0", "1", "q1/2"]],
                &[&["0", "0", "1"]],
            )?;
            let group = MatrixLieGroup::vector_group(1, DMatrix::identity(1, 1))?;
            let bundle = ChaplyginBundle::parse(
                2,
                &[&["1", "0"], &["0", "1"]],
                &[&["q2/2", "-q1/2"]],
                group,
            )?;
            Scenario {
                name: "heisenberg",
                structure: Some(structure),
                bundle: Some(bundle),
                group: None,
                params,
            }
        }
        // Flat distribution with a singular surface {q2 = 0}: the abnormal
        // testbed.
        "martinet" => {
            let structure = SRStructure::parse(
                3,
                &[&["1", "0", "q2^2/2"], &["0", "1", "0"]],
                &[&["0", "0", "1"]],
            )?;
            Scenario {
                name: "martinet",
                structure: Some(structure),
                bundle: None,
                group: None,
            params,
            }
        }
        // Quadratic frame perturbation plus a rigging with a
        // position-dependent horizontal component: no bundle presentation,
        // and the straightest and shortest families separate (the control
        // case). The horizontal part of [X_j, Y] is what feeds the gap, so
        // the tilt must vary with position.
        "skew_heisenberg" => {
            let structure = SRStructure::parse(
                3,
                &[&["1", "0", "-q2/2"], &["0", "1", "q1/2 + 0.1*q1^2"]],
                &[&["0.1*q1", "0", "1"]],
            )?;
            Scenario {
                name: "skew_heisenberg",
                structure: Some(structure),
                bundle: None,
                group: None,
                params,
            }
        }
        // Left-invariant structure on the unit-quaternion group with
        // vertical span(e3): the group-level coincidence testbed. The bundle
        // block carries the circle bundle over the round sphere in a
        // stereographic chart for the lift checks.
        "hopf_su2" => {
            let su2 = MatrixLieGroup::su2(DMatrix::identity(3, 3))?;
            let group = GroupChaplygin::new(su2, vec![2], vec![0, 1], DMatrix::identity(2, 2))?;
            let circle = MatrixLieGroup::new(
                vec![DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])],
                DMatrix::identity(1, 1),
            )?;
            let bundle = ChaplyginBundle::parse(
                2,
                &[
                    &["4/(1+q1^2+q2^2)^2", "0"],
                    &["0", "4/(1+q1^2+q2^2)^2"],
                ],
                &[&["-q2/(1+q1^2+q2^2)", "q1/(1+q1^2+q2^2)"]],
                circle,
            )?;
            Scenario {
                name: "hopf_su2",
                structure: None,
                bundle: Some(bundle),
                group: Some(group),
                params,
            }
        }
        // Flat plane with a rotation-group fiber and a potential with
        // noncommuting legs: nonabelian curvature, the charged-particle
        // testbed.
        "ym_plane_so3" => {
            let so3 = MatrixLieGroup::so3(DMatrix::identity(3, 3))?;
            let bundle = ChaplyginBundle::parse(
                2,
                &[&["1", "0"], &["0", "1"]],
                &[&["0", "q1"], &["q2", "0"], &["0", "0"]],
                so3,
            )?;
            Scenario {
                name: "ym_plane_so3",
                structure: None,
                bundle: Some(bundle),
                group: None,
                params,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown scenario `{other}` (available: {})",
                SCENARIO_NAMES.join(", ")
            )))
        }
    };
    validate(&scenario)?;
    Ok(scenario)
}

/// Sample grid for frame-invertibility checks: origin, axis points and a few
/// generic points within the unit box.
fn sample_grid(n: usize) -> Vec<DVector<f64>> {
    let mut pts = vec![DVector::zeros(n)];
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut p = DVector::zeros(n);
            p[i] = sign * 0.9;
            pts.push(p);
        }
    }
    for k in 1..5 {
        pts.push(DVector::from_fn(n, |r, _| {
            ((k * (r + 1)) as f64 * 0.7).sin() * 0.8
        }));
    }
    pts
}

fn validate(sc: &Scenario) -> Result<()> {
    if let Some(s) = &sc.structure {
        let worst = s.validate_on_grid(&sample_grid(s.dim()))?;
        if !worst.is_finite() {
            return Err(Error::SingularFrame { point: vec![] });
        }
    }
    if let Some(b) = &sc.bundle {
        // Metric positivity on the grid.
        let g = b.base_metric();
        for p in sample_grid(b.base_dim()) {
            g.eval_inverse(&p)?;
        }
        // Chart structures must reproduce a valid frame.
        if let Ok(s) = b.chart_structure() {
            s.validate_on_grid(&sample_grid(s.dim()))?;
        }
    }
    Ok(())
}
