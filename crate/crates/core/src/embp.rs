//! Interleaved BP E-steps and momentum M-steps.

use crate::bp::{bp_iteration, compute_factors, BeliefSet, MessageSet};
use crate::em::{em_step_with_stats, ParamTrajectory, Schedule};
use crate::error::{invalid, Error, Result};
use crate::model::{build_matched_stats, complex_normal, ChannelParams, Constellation};
use crate::scalar::Real;
use num_complex::Complex64;
use rand::Rng;

/// How `theta^(0)` is obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum InitStrategy {
    /// Single-tap guess from the received power: `h_0 = sqrt((1 - alpha) P_y)`,
    /// `sigma2 = alpha P_y`.
    ImpulsePower { alpha: f64 },
    /// Ground truth plus `scale * CN(0, 1)` per tap. Test and baseline use only.
    GeniePerturbed { scale: f64 },
    External(ChannelParams),
}

impl Default for InitStrategy {
    fn default() -> Self {
        Self::ImpulsePower { alpha: 0.1 }
    }
}

/// Output of one EMBP run.
#[derive(Clone, Debug)]
pub struct EmbpResult<S: Real = f64> {
    pub final_params: ChannelParams<S>,
    pub final_beliefs: BeliefSet<S>,
    pub trajectory: ParamTrajectory<S>,
    /// Beliefs after each iteration, when requested.
    pub belief_history: Option<Vec<BeliefSet<S>>>,
    /// Raw M-step updates performed.
    pub raw_updates: usize,
}

pub fn initialize<R: Rng + ?Sized>(
    strategy: &InitStrategy,
    observation: &[Complex64],
    memory: usize,
    truth: Option<&ChannelParams>,
    rng: &mut R,
) -> Result<ChannelParams> {
    if observation.is_empty() {
        return Err(invalid("observation is empty"));
    }
    match strategy {
        InitStrategy::ImpulsePower { alpha } => {
            if !(*alpha > 0.0 && *alpha < 1.0) {
                return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
            }
            let power =
                observation.iter().map(|y| y.norm_sqr()).sum::<f64>() / observation.len() as f64;
            if !(power > 0.0) {
                return Err(invalid("observation has zero power"));
            }
            let mut h = vec![Complex64::new(0.0, 0.0); memory + 1];
            h[0] = Complex64::new(((1.0 - alpha) * power).sqrt(), 0.0);
            ChannelParams::new(h, alpha * power)
        }
        InitStrategy::GeniePerturbed { scale } => {
            let truth = truth.ok_or_else(|| invalid("genie initialization needs the true channel"))?;
            if truth.memory() != memory {
                return Err(invalid("true channel memory differs from the requested memory"));
            }
            let h = truth
                .h
                .iter()
                .map(|&hk| {
                    if *scale == 0.0 {
                        hk
                    } else {
                        hk + complex_normal(rng) * *scale
                    }
                })
                .collect();
            ChannelParams::new(h, truth.sigma2)
        }
        InitStrategy::External(params) => {
            if params.memory() != memory {
                return Err(invalid("external estimate has the wrong memory"));
            }
            Ok(params.clone())
        }
    }
}

/// Runs EMBP from `initial`. Every iteration rebuilds the factors from the
/// previous estimate, performs one BP iteration (messages persist across
/// iterations) and one momentum M-step.
pub fn run_embp<S: Real>(
    observation: &[Complex64],
    constellation: &Constellation,
    schedule: &Schedule<S>,
    initial: ChannelParams<S>,
    keep_history: bool,
) -> Result<EmbpResult<S>> {
    let l = initial.memory();
    if schedule.memory() != l {
        return Err(invalid(format!(
            "schedule is for memory {}, initial estimate has memory {l}",
            schedule.memory()
        )));
    }
    if observation.len() <= l {
        return Err(invalid("observation shorter than channel memory"));
    }
    let n = observation.len() - l;
    let m = constellation.len();
    let mut msgs = MessageSet::<S>::uniform(n, m, l);
    let mut beliefs = BeliefSet::<S>::uniform(n, m);
    let mut theta = initial;
    let mut estimates = Vec::with_capacity(schedule.iterations() + 1);
    estimates.push(theta.clone());
    let mut history = keep_history.then(|| Vec::with_capacity(schedule.iterations()));
    let mut raw_updates = 0;

    for t in 1..=schedule.iterations() {
        let stats = build_matched_stats(&theta, observation)?;
        let factors = compute_factors(&stats, constellation)
            .map_err(|e| Error::NonFinite(format!("iteration {t}: {e}")))?;
        let (next, b) = bp_iteration(&msgs, &factors, schedule.beta_bp()[t - 1])
            .map_err(|e| Error::NonFinite(format!("iteration {t}: {e}")))?;
        msgs = next;
        beliefs = b;
        let step = em_step_with_stats(t, schedule, &beliefs, observation, &theta, &stats, constellation)?;
        raw_updates += step.raw_updates;
        theta = step.params;
        estimates.push(theta.clone());
        if let Some(h) = history.as_mut() {
            h.push(beliefs.clone());
        }
    }
    Ok(EmbpResult {
        final_params: theta,
        final_beliefs: beliefs,
        trajectory: ParamTrajectory { estimates },
        belief_history: history,
        raw_updates,
    })
}
