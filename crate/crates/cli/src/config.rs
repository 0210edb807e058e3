//! Run configuration: a single JSON document with inline expression strings.
//! Command-line flags override config keys; `SUBRIEM_TOL_OVERRIDE` scales the
//! rank/kernel tolerances globally.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use subriem::chaplygin::{ChaplyginBundle, GroupChaplygin, MatrixLieGroup};
use subriem::geometry::{SRStructure, VectorField};
use subriem::scenarios;
use subriem::{Error, NumericParams, Result};

use crate::CommonArgs;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub custom: Option<CustomSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub charge: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<f64>>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<Tolerances>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Tolerances {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blowup: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct OutputSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
}

/// Inline structure definition: frame/rigging component expressions over
/// `q1..q{dim}`, constant metric coefficients, and an optional bundle block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSpec {
    pub dim: usize,
    pub frame: Vec<Vec<String>>,
    #[serde(default)]
    pub rigging: Vec<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_d: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<BundleSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    pub base_dim: usize,
    pub g_m: Vec<Vec<String>>,
    pub potential: Vec<Vec<String>>,
    pub group: GroupSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    /// `vector` (needs `k`), `so3` or `su2`.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_alg: Option<Vec<Vec<f64>>>,
}

/// Everything a solver needs, resolved from the config.
pub struct Loaded {
    pub label: String,
    pub structure: Option<SRStructure>,
    pub bundle: Option<ChaplyginBundle>,
    pub group: Option<GroupChaplygin>,
    pub params: NumericParams,
}

impl RunConfig {
    pub fn load(common: &CommonArgs) -> Result<RunConfig> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config `{path}`: {e}"))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("bad config `{path}`: {e}")))?
            }
            None => RunConfig::default(),
        };
        if common.scenario.is_some() {
            cfg.scenario = common.scenario.clone();
        }
        if common.t_end.is_some() {
            cfg.t_end = common.t_end;
        }
        if common.step.is_some() {
            cfg.step = common.step;
        }
        if common.csv.is_some() || common.report.is_some() {
            let mut out = cfg.output.take().unwrap_or_default();
            if common.csv.is_some() {
                out.csv = common.csv.clone();
            }
            if common.report.is_some() {
                out.report = common.report.clone();
            }
            cfg.output = Some(out);
        }
        Ok(cfg)
    }

    pub fn merge_opt_str(&mut self, key: &str, value: Option<String>) {
        if value.is_none() {
            return;
        }
        match key {
            "mode" => self.mode = value,
            "sweep" => self.sweep = value,
            _ => unreachable!("unknown string key {key}"),
        }
    }

    pub fn merge_control(&mut self, value: Option<String>) {
        if let Some(v) = value {
            self.control = Some(v.split(',').map(|s| s.trim().to_string()).collect());
        }
    }

    pub fn merge_vec(&mut self, key: &str, value: Option<String>) -> Result<()> {
        let Some(text) = value else { return Ok(()) };
        let parsed = parse_vec(&text)?;
        match key {
            "q0" => self.q0 = Some(parsed),
            "v0" => self.v0 = Some(parsed),
            "lambda" => self.lambda = Some(parsed),
            "k0" => self.k0 = Some(parsed),
            "charge" => self.charge = Some(parsed),
            "x0" => self.x0 = Some(parsed),
            "point" => self.point = Some(parsed),
            "w" => self.w = Some(parsed),
            "a" => self.a = Some(parsed),
            _ => unreachable!("unknown vector key {key}"),
        }
        Ok(())
    }

    pub fn params(&self) -> NumericParams {
        let mut p = NumericParams::default();
        if let Some(t) = &self.tolerances {
            if let Some(v) = t.rank_tol {
                p.rank_tol = v;
            }
            if let Some(v) = t.kernel_tol {
                p.kernel_tol = v;
            }
            if let Some(v) = t.fd_step {
                p.fd_step = v;
            }
            if let Some(v) = t.blowup {
                p.blowup = v;
            }
        }
        // Global tolerance scale for rank decisions.
        if let Ok(scale) = std::env::var("SUBRIEM_TOL_OVERRIDE") {
            if let Ok(scale) = scale.parse::<f64>() {
                p.rank_tol *= scale;
                p.kernel_tol *= scale;
            }
        }
        p
    }

    pub fn t_end(&self) -> f64 {
        self.t_end.unwrap_or(1.0)
    }

    pub fn step(&self) -> f64 {
        self.step.unwrap_or(1e-3)
    }

    pub fn resolve(&self) -> Result<Loaded> {
        let params = self.params();
        match (&self.scenario, &self.custom) {
            (Some(name), None) => {
                let sc = scenarios::load(name)?;
                Ok(Loaded {
                    label: sc.name.to_string(),
                    structure: sc.structure,
                    bundle: sc.bundle,
                    group: sc.group,
                    params,
                })
            }
            (None, Some(spec)) => build_custom(spec, params),
            (Some(_), Some(_)) => Err(Error::Config(
                "give either `scenario` or `custom`, not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "missing `--scenario` or a config with `scenario`/`custom`".into(),
            )),
        }
    }
}

fn build_custom(spec: &CustomSpec, params: NumericParams) -> Result<Loaded> {
    let n = spec.dim;
    let parse_fields = |rows: &[Vec<String>]| -> Result<Vec<VectorField>> {
        rows.iter()
            .map(|row| {
                let refs: Vec<&str> = row.iter().map(|s| s.as_str()).collect();
                VectorField::parse(n, &refs)
            })
            .collect()
    };
    let frame = parse_fields(&spec.frame)?;
    let rigging = parse_fields(&spec.rigging)?;
    let m = frame.len();
    let g_d = match &spec.g_d {
        Some(rows) => matrix_from(rows, m)?,
        None => DMatrix::identity(m, m),
    };
    let structure = SRStructure::new(frame, rigging, g_d)?;
    // Frame must be invertible where runs start.
    structure.frame_condition(&DVector::zeros(n))?;

    let bundle = match &spec.bundle {
        None => None,
        Some(b) => {
            let group = build_group(&b.group)?;
            let parse_matrix = |rows: &[Vec<String>]| -> Result<Vec<Vec<subriem::Expr>>> {
                rows.iter()
                    .map(|r| {
                        r.iter()
                            .map(|s| subriem::Expr::parse(s, b.base_dim))
                            .collect()
                    })
                    .collect()
            };
            Some(ChaplyginBundle::new(
                b.base_dim,
                parse_matrix(&b.g_m)?,
                parse_matrix(&b.potential)?,
                group,
            )?)
        }
    };
    Ok(Loaded {
        label: "custom".to_string(),
        structure: Some(structure),
        bundle,
        group: None,
        params,
    })
}

fn build_group(spec: &GroupSpec) -> Result<MatrixLieGroup> {
    let g_alg = |dim: usize| -> Result<DMatrix<f64>> {
        match &spec.g_alg {
            Some(rows) => matrix_from(rows, dim),
            None => Ok(DMatrix::identity(dim, dim)),
        }
    };
    match spec.kind.as_str() {
        "vector" => {
            let k = spec
                .k
                .ok_or_else(|| Error::Config("vector group needs `k`".into()))?;
            MatrixLieGroup::vector_group(k, g_alg(k)?)
        }
        "so3" => MatrixLieGroup::so3(g_alg(3)?),
        "su2" => MatrixLieGroup::su2(g_alg(3)?),
        other => Err(Error::Config(format!(
            "unknown group kind `{other}` (vector, so3, su2)"
        ))),
    }
}

fn matrix_from(rows: &[Vec<f64>], expect: usize) -> Result<DMatrix<f64>> {
    if rows.len() != expect || rows.iter().any(|r| r.len() != expect) {
        return Err(Error::Config(format!("matrix must be {expect}×{expect}")));
    }
    Ok(DMatrix::from_fn(expect, expect, |i, j| rows[i][j]))
}

pub fn parse_vec(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{t}` in vector argument")))
        })
        .collect()
}

pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
