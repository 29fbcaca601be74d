//! Small-instance oracle battery, runnable from the command line.

use crate::baselines::{
    brute_force_posterior, elbo, exact_em_step, log_likelihood, pilot_ls_estimate,
    trellis_map_detect, PilotConfig,
};
use crate::bp::{
    apply_momentum, bp_iteration, compute_beliefs, compute_factors, detect, flood_messages, run_bp,
    BeliefSet, MessageSet,
};
use crate::em::{em_step, make_schedule, Schedule, ScheduleKind};
use crate::embp::{initialize, run_embp, InitStrategy};
use crate::error::Result;
use crate::model::{
    build_matched_stats, sample_channel, snr_to_sigma2, substream, transmit, ChannelParams,
    Constellation, TransmissionBlock,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match run() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_block(rng: &mut ChaCha8Rng, n: usize, l: usize, snr_db: f64) -> Result<TransmissionBlock> {
    let c = Constellation::bpsk();
    let mut h = sample_channel(l, rng);
    h.sigma2 = snr_to_sigma2(snr_db, &h.h, &c, n)?;
    let symbols = c.random_symbols(n, rng);
    transmit(&h, symbols, &c, rng)
}

/// Gaussian tail `Q(x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Runs every check; `seed` selects the random instances.
pub fn run_all(seed: u64) -> Vec<Check> {
    let bpsk = Constellation::bpsk();
    let rng = |i: u64| substream(seed, 0x7365_6c66, i);
    vec![
        check("trellis MAP equals enumeration", || {
            let mut worst = 0.0f64;
            let mut r = rng(0);
            for i in 0..20 {
                let n = 2 + i % 5;
                let l = i % 3;
                let snr = r.random_range(0.0..12.0);
                let b = random_block(&mut r, n, l, snr)?;
                let exact = brute_force_posterior(&b.observation, &b.truth, &bpsk)?;
                let tr = trellis_map_detect(&b.observation, &b.truth, &bpsk)?;
                worst = worst.max(exact.marginals.max_change(&tr));
            }
            Ok((worst <= 1e-9, format!("max deviation {worst:.2e}")))
        }),
        check("BP exact on a single edge", || {
            let mut worst = 0.0f64;
            let mut r = rng(1);
            for _ in 0..20 {
                let snr = r.random_range(0.0..12.0);
                let b = random_block(&mut r, 2, 1, snr)?;
                let exact = brute_force_posterior(&b.observation, &b.truth, &bpsk)?;
                let stats = build_matched_stats(&b.truth, &b.observation)?;
                let beliefs = run_bp(&stats, &bpsk, &[1.0, 1.0])?;
                worst = worst.max(exact.marginals.max_change(&beliefs));
            }
            Ok((worst <= 1e-6, format!("max deviation {worst:.2e}")))
        }),
        check("momentum limits", || {
            let mut r = rng(2);
            let b = random_block(&mut r, 10, 2, 6.0)?;
            let stats = build_matched_stats(&b.truth, &b.observation)?;
            let factors = compute_factors(&stats, &bpsk)?;
            let mut msgs = MessageSet::uniform(10, 2, 2);
            for _ in 0..3 {
                msgs = flood_messages(&msgs, &factors)?;
            }
            let plain = flood_messages(&msgs, &factors)?;
            let (full, beliefs) = bp_iteration(&msgs, &factors, 1.0)?;
            let frozen = apply_momentum(plain.clone(), &msgs, 0.0)?;
            let ok = full == plain && frozen == msgs && beliefs == compute_beliefs(&plain, &factors)?;
            Ok((ok, "beta=1 full update, beta=0 frozen".into()))
        }),
        check("ELBO stationary at the M-step", || {
            let mut r = rng(3);
            let b = random_block(&mut r, 4, 1, 5.0)?;
            let rows: Vec<Vec<f64>> = (0..4).map(|_| vec![r.random::<f64>() + 0.05, r.random::<f64>() + 0.05]).collect();
            let q = BeliefSet::from_probs(&rows)?;
            let start = initialize(&InitStrategy::GeniePerturbed { scale: 0.3 }, &b.observation, 1, Some(&b.truth), &mut r)?;
            let schedule = make_schedule(ScheduleKind::Serial, 3, 1)?;
            let mut worst = 0.0f64;
            for t in 1..=3 {
                let next = em_step(t, &schedule, &q, &b.observation, &start, &bpsk)?.params;
                let grad = elbo_gradient(&q, &b.observation, &next, &bpsk, t - 1)?;
                worst = worst.max(grad);
            }
            Ok((worst < 1e-5, format!("max scaled derivative {worst:.2e}")))
        }),
        check("exact EM never decreases the likelihood", || {
            let mut r = rng(4);
            let mut worst = 0.0f64;
            for _ in 0..5 {
                let snr = r.random_range(0.0..12.0);
                let b = random_block(&mut r, 8, 2, snr)?;
                let mut theta = initialize(&InitStrategy::GeniePerturbed { scale: 0.1 }, &b.observation, 2, Some(&b.truth), &mut r)?;
                let mut ll = log_likelihood(&b.observation, &theta, &bpsk)?;
                for _ in 0..10 {
                    theta = exact_em_step(&b.observation, &theta, &bpsk)?;
                    let next = log_likelihood(&b.observation, &theta, &bpsk)?;
                    worst = worst.max(ll - next);
                    ll = next;
                }
            }
            Ok((worst <= 1e-9, format!("largest decrease {worst:.2e}")))
        }),
        check("frozen EMBP equals coherent BP", || {
            let mut r = rng(5);
            let b = random_block(&mut r, 30, 2, 9.0)?;
            let schedule = Schedule::new(vec![vec![0.0; 4]; 8], vec![1.0; 8])?;
            let res = run_embp(&b.observation, &bpsk, &schedule, b.truth.clone(), false)?;
            let stats = build_matched_stats(&b.truth, &b.observation)?;
            let bp = run_bp(&stats, &bpsk, &[1.0; 8])?;
            Ok((res.final_beliefs == bp && res.raw_updates == 0, "bitwise comparison".into()))
        }),
        check("schedule text round trip", || {
            let mut r = rng(6);
            let em: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| r.random::<f64>()).collect()).collect();
            let s = Schedule::new(em, (0..4).map(|_| r.random::<f64>()).collect())?;
            Ok((Schedule::from_text(&s.to_text())? == s, "exact decimal round trip".into()))
        }),
        check("pilot least squares on clean data", || {
            let mut r = rng(7);
            let h = sample_channel(3, &mut r);
            let pilots = PilotConfig::preamble(0.2, 40, 3, &bpsk, &mut r)?;
            let mut symbols = bpsk.random_symbols(40, &mut r);
            symbols[..pilots.len()].copy_from_slice(&pilots.symbols);
            let y = crate::model::convolve(&h.h, &bpsk.values(&symbols));
            let est = pilot_ls_estimate(&y, &pilots, &bpsk, 3)?;
            let err = est.h.iter().zip(&h.h).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            Ok((err < 1e-10, format!("max tap error {err:.2e}")))
        }),
        check("memoryless BER matches Q(sqrt(2 snr))", || {
            let snr_db = 4.0;
            let n = 1000;
            let blocks = 100;
            let mut errors = 0usize;
            for i in 0..blocks {
                let mut r = rng(100 + i);
                let h = ChannelParams::new(vec![num_complex::Complex64::new(1.0, 0.0)], 1.0)?;
                let h = h.clone().with_sigma2(snr_to_sigma2(snr_db, &h.h, &bpsk, n)?);
                let symbols = bpsk.random_symbols(n, &mut r);
                let b = transmit(&h, symbols, &bpsk, &mut r)?;
                let dec = detect(&trellis_map_detect(&b.observation, &h, &bpsk)?);
                errors += dec.iter().zip(&b.symbols).filter(|(a, b)| a != b).count();
            }
            let bits = (n * blocks as usize) as f64;
            let p = q_function((2.0 * 10f64.powf(snr_db / 10.0)).sqrt());
            let sd = (p * (1.0 - p) / bits).sqrt();
            let ber = errors as f64 / bits;
            Ok(((ber - p).abs() <= 3.0 * sd, format!("ber {ber:.5} vs {p:.5}")))
        }),
    ]
}

/// Largest finite-difference ELBO derivative with respect to parameter `k`
/// of `theta` (taps as real/imaginary pairs, then `sigma2`), scaled by the
/// parameter magnitude.
pub fn elbo_gradient(
    q: &BeliefSet,
    observation: &[num_complex::Complex64],
    theta: &ChannelParams,
    constellation: &Constellation,
    k: usize,
) -> Result<f64> {
    let l = theta.memory();
    let eval = |d: f64, part: usize| -> Result<f64> {
        let mut p = theta.clone();
        if k <= l {
            if part == 0 {
                p.h[k].re += d;
            } else {
                p.h[k].im += d;
            }
        } else {
            p.sigma2 += d;
        }
        elbo(q, observation, &p, constellation)
    };
    let parts = if k <= l { 2 } else { 1 };
    let scale = if k <= l { theta.h[k].norm().max(1e-3) } else { theta.sigma2 };
    let step = 1e-5 * scale.max(1e-3);
    let mut worst = 0.0f64;
    for part in 0..parts {
        let g = (eval(step, part)? - eval(-step, part)?) / (2.0 * step);
        worst = worst.max((g * scale).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all(1) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn q_function_reference_points() {
        assert!((q_function(0.0) - 0.5).abs() < 1e-15);
        let q1 = q_function(1.0);
        assert!((q1 - 0.158_655_253_931_457_05).abs() < 1e-9, "{q1:.17}");
    }
}
