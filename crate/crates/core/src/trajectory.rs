//! Time-stamped solution curves and their per-run diagnostics.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::{Error, Result};

/// Named residuals and drifts recorded by a solver run.
///
/// Backed by an ordered map so reports serialize deterministically.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics(pub BTreeMap<String, f64>);

impl Diagnostics {
    pub fn set(&mut self, key: &str, value: f64) {
        self.0.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied()
    }
}

/// A sampled curve `t_k ↦ q(t_k)` with optional parallel channels:
/// momenta `p` (covectors, n components), configuration velocities `q̇`,
/// frame controls `u` (m components) and fiber covector coordinates `k`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub positions: Vec<DVector<f64>>,
    pub momenta: Option<Vec<DVector<f64>>>,
    pub velocities: Option<Vec<DVector<f64>>>,
    pub controls: Option<Vec<DVector<f64>>>,
    pub fiber: Option<Vec<DVector<f64>>>,
    pub diagnostics: Diagnostics,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, positions: Vec<DVector<f64>>) -> Self {
        Trajectory {
            times,
            positions,
            momenta: None,
            velocities: None,
            controls: None,
            fiber: None,
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("empty trajectory")
    }

    fn segment_of(&self, t: f64) -> usize {
        // times are strictly increasing; find k with times[k] <= t < times[k+1]
        match self
            .times
            .binary_search_by(|x| x.partial_cmp(&t).expect("NaN time"))
        {
            Ok(k) => k.min(self.times.len().saturating_sub(2)),
            Err(k) => k.saturating_sub(1).min(self.times.len().saturating_sub(2)),
        }
    }

    /// Position at an off-node time by cubic Hermite interpolation, using the
    /// stored velocity channel for the nodal derivatives. O(h^4) accurate.
    pub fn sample_position(&self, t: f64) -> Result<DVector<f64>> {
        let vel = self
            .velocities
            .as_ref()
            .ok_or(Error::MissingControls)?;
        let k = self.segment_of(t);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (p0, p1) = (&self.positions[k], &self.positions[k + 1]);
        let (v0, v1) = (&vel[k], &vel[k + 1]);
        let h00 = 2.0 * s.powi(3) - 3.0 * s.powi(2) + 1.0;
        let h10 = s.powi(3) - 2.0 * s.powi(2) + s;
        let h01 = -2.0 * s.powi(3) + 3.0 * s.powi(2);
        let h11 = s.powi(3) - s.powi(2);
        Ok(p0 * h00 + v0 * (h10 * h) + p1 * h01 + v1 * (h11 * h))
    }

    /// Velocity at an off-node time by centered 4-point Lagrange interpolation
    /// of the stored velocity channel.
    pub fn sample_velocity(&self, t: f64) -> Result<DVector<f64>> {
        let vel = self
            .velocities
            .as_ref()
            .ok_or(Error::MissingControls)?;
        Ok(lagrange4(&self.times, vel, t, self.segment_of(t)))
    }

    /// Controls at an off-node time, same interpolation as the velocities.
    pub fn sample_controls(&self, t: f64) -> Result<DVector<f64>> {
        let u = self.controls.as_ref().ok_or(Error::MissingControls)?;
        Ok(lagrange4(&self.times, u, t, self.segment_of(t)))
    }
}

/// 4-point Lagrange interpolation around segment `k`; falls back to the
/// available stencil near the ends.
fn lagrange4(times: &[f64], values: &[DVector<f64>], t: f64, k: usize) -> DVector<f64> {
    let n = times.len();
    if n == 1 {
        return values[0].clone();
    }
    let lo = k.saturating_sub(1).min(n.saturating_sub(4.min(n)));
    let count = 4.min(n);
    let lo = lo.min(n - count);
    let idx: Vec<usize> = (lo..lo + count).collect();
    let mut acc = DVector::zeros(values[0].len());
    for &i in &idx {
        let mut w = 1.0;
        for &j in &idx {
            if j != i {
                w *= (t - times[j]) / (times[i] - times[j]);
            }
        }
        acc += &values[i] * w;
    }
    acc
}
