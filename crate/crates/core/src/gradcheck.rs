//! Central finite-difference checks of tape gradients with respect to model
//! parameters.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{ModelState, ParamVars};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub n_coords: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so that coordinates
    /// where both gradients vanish compare by absolute error.
    pub floor: f64,
    /// Share of coordinates drawn among those with a non-negligible
    /// analytic gradient; the rest are drawn uniformly.
    pub nonzero_share: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            n_coords: 200,
            seed: 0,
            floor: 1e-6,
            nonzero_share: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `objective` against central differences
/// at `config.n_coords` sampled parameter coordinates.
pub fn check<F>(state: &ModelState, objective: F, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ModelState, &ParamVars) -> Result<Var>,
{
    let eval = |s: &ModelState| -> Result<f64> {
        let mut tape = Tape::new();
        let p = s.load(&mut tape);
        let loss = objective(&mut tape, s, &p)?;
        Ok(tape.scalar(loss))
    };
    let analytic = {
        let mut tape = Tape::new();
        let p = state.load(&mut tape);
        let loss = objective(&mut tape, state, &p)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::NonFiniteLoss { step: None });
        }
        let mut g = tape.backward(loss);
        p.collect(&tape, &mut g)
    };

    // Flattened coordinate space across all parameter tensors.
    let offsets: Vec<usize> = state
        .params()
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let total = state.param_count();
    let locate = |flat: usize| {
        let i = offsets.partition_point(|&o| o <= flat) - 1;
        (i, flat - offsets[i])
    };
    let grad_at = |flat: usize| {
        let (i, k) = locate(flat);
        analytic.0[i].data()[k]
    };
    let nonzero: Vec<usize> = (0..total).filter(|&f| grad_at(f).abs() > config.floor).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_coords.min(total);
    let n_nz = ((n as f64 * config.nonzero_share).round() as usize).min(nonzero.len());
    let mut coords: Vec<usize> = sample(&mut rng, nonzero.len(), n_nz).into_iter().map(|i| nonzero[i]).collect();
    while coords.len() < n {
        let f = rng.random_range(0..total);
        if !coords.contains(&f) {
            coords.push(f);
        }
    }

    let mut probe = state.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for flat in coords {
        let (i, k) = locate(flat);
        let orig = probe.params()[i].data()[k];
        probe.params_mut()[i].data_mut()[k] = orig + config.eps;
        let up = eval(&probe)?;
        probe.params_mut()[i].data_mut()[k] = orig - config.eps;
        let down = eval(&probe)?;
        probe.params_mut()[i].data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * config.eps);
        let a = grad_at(flat);
        let rel = relative_error(a, numeric, config.floor);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(Coordinate {
                param: state.names()[i].clone(),
                index: k,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}
