//! Exact and pilot-aided reference receivers.
//!
//! The enumeration routines are exponential in the block length and exist as
//! oracles for small instances; the trellis detector is exponential only in
//! the channel memory.

use crate::bp::BeliefSet;
use crate::em::{em_step, make_schedule, sigma2_floor, ScheduleKind};
use crate::error::{invalid, Error, Result};
use crate::model::{convolve, ChannelParams, Constellation};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::PI;

/// Largest sequence count the enumeration oracles accept.
pub const MAX_ENUMERATION: usize = 1 << 20;
/// Largest trellis state count.
pub const MAX_TRELLIS_STATES: usize = 4096;

/// Exact posterior of a block.
#[derive(Clone, Debug)]
pub struct Posterior {
    /// `P(c | y)` for every sequence; symbol 0 is the least significant digit.
    pub joint: Vec<f64>,
    pub marginals: BeliefSet,
}

fn enumeration_size(m: usize, n: usize) -> Result<usize> {
    let mut total: usize = 1;
    for _ in 0..n {
        total = total
            .checked_mul(m)
            .filter(|t| *t <= MAX_ENUMERATION)
            .ok_or_else(|| Error::TooLarge(format!("{m}^{n} sequences exceed {MAX_ENUMERATION}")))?;
    }
    Ok(total)
}

fn block_len(observation: &[Complex64], params: &ChannelParams) -> Result<usize> {
    let l = params.memory();
    if observation.len() <= l {
        return Err(invalid("observation shorter than channel memory"));
    }
    Ok(observation.len() - l)
}

/// Calls `f(sequence, ||y - Hc||^2)` for every symbol sequence.
fn for_each_sequence(
    observation: &[Complex64],
    params: &ChannelParams,
    constellation: &Constellation,
    mut f: impl FnMut(&[usize], f64),
) -> Result<()> {
    let n = block_len(observation, params)?;
    let m = constellation.len();
    let total = enumeration_size(m, n)?;
    let mut seq = vec![0usize; n];
    for _ in 0..total {
        let hc = convolve(&params.h, &constellation.values(&seq));
        let dist: f64 = observation
            .iter()
            .zip(hc.iter())
            .map(|(y, z)| (y - z).norm_sqr())
            .sum();
        f(&seq, dist);
        for digit in seq.iter_mut() {
            *digit += 1;
            if *digit < m {
                break;
            }
            *digit = 0;
        }
    }
    Ok(())
}

/// `log p(c, y | theta)` up to the sequence, with all Gaussian constants.
fn log_joint_const(n: usize, l: usize, m: usize, sigma2: f64) -> f64 {
    -(n as f64) * (m as f64).ln() - ((n + l) as f64) * (PI * sigma2).ln()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Exact `P(c | y, theta)` by enumeration.
pub fn brute_force_posterior(
    observation: &[Complex64],
    params: &ChannelParams,
    constellation: &Constellation,
) -> Result<Posterior> {
    let n = block_len(observation, params)?;
    let m = constellation.len();
    let mut logs = Vec::new();
    for_each_sequence(observation, params, constellation, |_, d| logs.push(-d / params.sigma2))?;
    let z = logs.iter().fold(f64::NEG_INFINITY, |acc, &v| log_add(acc, v));
    let joint: Vec<f64> = logs.iter().map(|v| (v - z).exp()).collect();
    let mut marg = vec![vec![0.0; m]; n];
    for (idx, p) in joint.iter().enumerate() {
        let mut rest = idx;
        for row in marg.iter_mut() {
            row[rest % m] += p;
            rest /= m;
        }
    }
    Ok(Posterior {
        joint,
        marginals: BeliefSet::from_probs(&marg)?,
    })
}

/// Exact `log p(y | theta)` under a uniform symbol prior.
pub fn log_likelihood(
    observation: &[Complex64],
    params: &ChannelParams,
    constellation: &Constellation,
) -> Result<f64> {
    let n = block_len(observation, params)?;
    let mut acc = f64::NEG_INFINITY;
    for_each_sequence(observation, params, constellation, |_, d| {
        acc = log_add(acc, -d / params.sigma2)
    })?;
    Ok(acc + log_joint_const(n, params.memory(), constellation.len(), params.sigma2))
}

/// Evidence lower bound for the product distribution `q`, by enumeration.
pub fn elbo(
    q: &BeliefSet,
    observation: &[Complex64],
    params: &ChannelParams,
    constellation: &Constellation,
) -> Result<f64> {
    let n = block_len(observation, params)?;
    if q.len() != n || q.alphabet() != constellation.len() {
        return Err(invalid("trial distribution has the wrong shape"));
    }
    let c0 = log_joint_const(n, params.memory(), constellation.len(), params.sigma2);
    let mut acc = 0.0;
    for_each_sequence(observation, params, constellation, |seq, d| {
        let log_q: f64 = seq.iter().enumerate().map(|(j, &a)| q.log_row(j)[a]).sum();
        if log_q > f64::NEG_INFINITY {
            acc += log_q.exp() * (c0 - d / params.sigma2 - log_q);
        }
    })?;
    Ok(acc)
}

/// Symbol-wise MAP marginals by forward-backward over the ISI trellis.
pub fn trellis_map_detect(
    observation: &[Complex64],
    params: &ChannelParams,
    constellation: &Constellation,
) -> Result<BeliefSet> {
    let n = block_len(observation, params)?;
    trellis_map_detect_known(observation, params, constellation, &vec![None; n])
}

/// [`trellis_map_detect`] with some symbols known to the receiver.
pub fn trellis_map_detect_known(
    observation: &[Complex64],
    params: &ChannelParams,
    constellation: &Constellation,
    known: &[Option<usize>],
) -> Result<BeliefSet> {
    let trellis = Trellis::run(observation, params, constellation, known)?;
    let (n, m) = (trellis.n, trellis.m);
    let mut log_w = vec![f64::NEG_INFINITY; n * m];
    trellis.for_each_transition(n, |t, _, a, lp| {
        log_w[t * m + a] = log_add(log_w[t * m + a], lp);
    });
    BeliefSet::from_log_weights(n, m, log_w)
}

/// Forward-backward state of the ISI trellis. The state at step `t` holds
/// the `L` most recent symbols, digit `i` being `c_{t-1-i}`.
struct Trellis {
    n: usize,
    l: usize,
    m: usize,
    states: usize,
    lg: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl Trellis {
    fn run(
        observation: &[Complex64],
        params: &ChannelParams,
        constellation: &Constellation,
        known: &[Option<usize>],
    ) -> Result<Self> {
        let n = block_len(observation, params)?;
        let l = params.memory();
        let m = constellation.len();
        if known.len() != n {
            return Err(invalid("known-symbol mask has the wrong length"));
        }
        if known.iter().flatten().any(|&k| k >= m) {
            return Err(invalid("known symbol index out of range"));
        }
        let states = (0..l)
            .try_fold(1usize, |acc, _| {
                acc.checked_mul(m).filter(|s| *s <= MAX_TRELLIS_STATES)
            })
            .ok_or_else(|| {
                Error::TooLarge(format!("{m}^{l} trellis states exceed {MAX_TRELLIS_STATES}"))
            })?;
        let pts = constellation.points();
        let zero = Complex64::new(0.0, 0.0);
        let value = |pos: isize, digit: usize| -> Complex64 {
            if pos < 0 || pos as usize >= n {
                zero
            } else {
                pts[digit]
            }
        };
        let steps = n + l;
        let inv = 1.0 / params.sigma2;
        let mut tr = Self {
            n,
            l,
            m,
            states,
            lg: vec![f64::NEG_INFINITY; steps * states * m],
            alpha: vec![f64::NEG_INFINITY; (steps + 1) * states],
            beta: vec![f64::NEG_INFINITY; (steps + 1) * states],
        };
        for t in 0..steps {
            let inputs: Vec<usize> = if t >= n {
                vec![0]
            } else if let Some(k) = known[t] {
                vec![k]
            } else {
                (0..m).collect()
            };
            for s in 0..states {
                let mut isi = zero;
                let mut rest = s;
                for i in 0..l {
                    isi += params.h[i + 1] * value(t as isize - 1 - i as isize, rest % m);
                    rest /= m;
                }
                for &a in &inputs {
                    let yhat = params.h[0] * value(t as isize, a) + isi;
                    tr.lg[(t * states + s) * m + a] = -(observation[t] - yhat).norm_sqr() * inv;
                }
            }
        }
        tr.alpha[0] = 0.0;
        for t in 0..steps {
            let mut next = vec![f64::NEG_INFINITY; states];
            for s in 0..states {
                let prev = tr.alpha[t * states + s];
                if prev == f64::NEG_INFINITY {
                    continue;
                }
                for a in 0..m {
                    let g = tr.lg[(t * states + s) * m + a];
                    if g > f64::NEG_INFINITY {
                        let ns = tr.next_state(s, a);
                        next[ns] = log_add(next[ns], prev + g);
                    }
                }
            }
            let z = next.iter().fold(f64::NEG_INFINITY, |acc, &v| log_add(acc, v));
            if !z.is_finite() {
                return Err(Error::NonFinite(format!("trellis forward pass at step {t}")));
            }
            for (dst, v) in tr.alpha[(t + 1) * states..(t + 2) * states].iter_mut().zip(next) {
                *dst = v - z;
            }
        }
        tr.beta[steps * states..].iter_mut().for_each(|v| *v = 0.0);
        for t in (0..steps).rev() {
            let mut cur = vec![f64::NEG_INFINITY; states];
            for (s, slot) in cur.iter_mut().enumerate() {
                for a in 0..m {
                    let g = tr.lg[(t * states + s) * m + a];
                    if g > f64::NEG_INFINITY {
                        let after = tr.beta[(t + 1) * states + tr.next_state(s, a)];
                        *slot = log_add(*slot, g + after);
                    }
                }
            }
            let z = cur.iter().fold(f64::NEG_INFINITY, |acc, &v| log_add(acc, v));
            if !z.is_finite() {
                return Err(Error::NonFinite(format!("trellis backward pass at step {t}")));
            }
            for (dst, v) in tr.beta[t * states..(t + 1) * states].iter_mut().zip(cur) {
                *dst = v - z;
            }
        }
        Ok(tr)
    }

    fn next_state(&self, s: usize, a: usize) -> usize {
        if self.l == 0 {
            0
        } else {
            a + self.m * (s % (self.states / self.m))
        }
    }

    /// Visits `(t, state, input, unnormalized log posterior)` of every live
    /// transition for steps `0..steps`.
    fn for_each_transition(&self, steps: usize, mut f: impl FnMut(usize, usize, usize, f64)) {
        let (states, m) = (self.states, self.m);
        for t in 0..steps {
            for s in 0..states {
                let a_s = self.alpha[t * states + s];
                if a_s == f64::NEG_INFINITY {
                    continue;
                }
                for a in 0..m {
                    let g = self.lg[(t * states + s) * m + a];
                    if g > f64::NEG_INFINITY {
                        let v = a_s + g + self.beta[(t + 1) * states + self.next_state(s, a)];
                        f(t, s, a, v);
                    }
                }
            }
        }
    }

    /// Posterior means `E[c_t]`, energies `E|c_t|^2` and lagged correlations
    /// `E[conj(c_t) c_{t-d}]`, `d = 1..=L`, under the joint posterior.
    fn moments(&self, constellation: &Constellation) -> JointMoments {
        let (n, l, m) = (self.n, self.l, self.m);
        let pts = constellation.points();
        let mut mean = vec![Complex64::new(0.0, 0.0); n];
        let mut energy = vec![0.0; n];
        let mut corr = vec![vec![Complex64::new(0.0, 0.0); l]; n];
        // per-step normalizers
        let mut z = vec![f64::NEG_INFINITY; n];
        self.for_each_transition(n, |t, _, _, lp| z[t] = log_add(z[t], lp));
        self.for_each_transition(n, |t, s, a, lp| {
            let w = (lp - z[t]).exp();
            let c = pts[a];
            mean[t] += c * w;
            energy[t] += c.norm_sqr() * w;
            let mut rest = s;
            for d in 1..=l.min(t) {
                corr[t][d - 1] += c.conj() * pts[rest % m] * w;
                rest /= m;
            }
        });
        JointMoments { mean, energy, corr }
    }
}

struct JointMoments {
    mean: Vec<Complex64>,
    energy: Vec<f64>,
    corr: Vec<Vec<Complex64>>,
}

/// Known preamble occupying the first `symbols.len()` block positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotConfig {
    pub symbols: Vec<usize>,
}

impl PilotConfig {
    /// `round(fraction * n)` pseudo-random pilots drawn from `rng`.
    pub fn preamble<R: Rng + ?Sized>(
        fraction: f64,
        n: usize,
        memory: usize,
        constellation: &Constellation,
        rng: &mut R,
    ) -> Result<Self> {
        let count = Self::count(fraction, n, memory)?;
        Ok(Self {
            symbols: constellation.random_symbols(count, rng),
        })
    }

    /// Pilot count for a block, validated against the channel memory.
    pub fn count(fraction: f64, n: usize, memory: usize) -> Result<usize> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(invalid(format!("pilot fraction must lie in (0, 1), got {fraction}")));
        }
        let count = (fraction * n as f64).round() as usize;
        if count < memory + 1 || count > n {
            return Err(invalid(format!(
                "{count} pilots cannot identify a channel with memory {memory}"
            )));
        }
        Ok(count)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Known-symbol mask over a block of length `n`.
    pub fn known_mask(&self, n: usize) -> Vec<Option<usize>> {
        (0..n).map(|j| self.symbols.get(j).copied()).collect()
    }
}

/// Least-squares channel estimate from output samples that depend only on
/// the preamble (and the known zeros before the block).
pub fn pilot_ls_estimate(
    observation: &[Complex64],
    pilots: &PilotConfig,
    constellation: &Constellation,
    memory: usize,
) -> Result<ChannelParams> {
    let rows = pilots.len();
    if rows < memory + 1 || rows > observation.len() {
        return Err(invalid(format!(
            "{rows} pilot samples cannot identify {} taps",
            memory + 1
        )));
    }
    let vals = constellation.values(&pilots.symbols);
    let a = DMatrix::from_fn(rows, memory + 1, |r, k| {
        if r >= k {
            vals[r - k]
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let b = DVector::from_iterator(rows, observation[..rows].iter().copied());
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::RankDeficient);
    }
    let h = svd
        .solve(&b, 0.0)
        .map_err(|e| invalid(format!("least squares failed: {e}")))?;
    let resid = &b - &a * &h;
    let power = resid.iter().map(|r| r.norm_sqr()).sum::<f64>() / rows as f64;
    let sigma2 = power.max(sigma2_floor(observation));
    ChannelParams::new(h.iter().copied().collect(), sigma2)
}

/// One exact EM iteration: the E-step takes first and second moments of the
/// joint posterior from the trellis and the M-step maximizes the expected
/// complete-data log-likelihood jointly over all taps and the noise variance.
pub fn exact_em_step(
    observation: &[Complex64],
    params: &ChannelParams,
    constellation: &Constellation,
) -> Result<ChannelParams> {
    let n = block_len(observation, params)?;
    let l = params.memory();
    let trellis = Trellis::run(observation, params, constellation, &vec![None; n])?;
    let mom = trellis.moments(constellation);
    // normal equations A h = b with A_{lk} = sum_j E[conj(c_j) c_{j+l-k}]
    let lag = |d: usize| -> Complex64 {
        // sum_j E[conj(c_j) c_{j+d}]
        if d == 0 {
            return Complex64::new(mom.energy.iter().sum(), 0.0);
        }
        (d..n).map(|t| mom.corr[t][d - 1].conj()).sum()
    };
    let lags: Vec<Complex64> = (0..=l).map(lag).collect();
    let a = DMatrix::from_fn(l + 1, l + 1, |r, k| {
        if r >= k {
            lags[r - k]
        } else {
            lags[k - r].conj()
        }
    });
    let b = DVector::from_fn(l + 1, |r, _| {
        (0..n).map(|j| mom.mean[j].conj() * observation[j + r]).sum::<Complex64>()
    });
    let h = a
        .clone()
        .lu()
        .solve(&b)
        .filter(|h| h.iter().all(|v| v.re.is_finite() && v.im.is_finite()))
        .ok_or(Error::RankDeficient)?;
    let y2: f64 = observation.iter().map(|y| y.norm_sqr()).sum();
    let cross = h.dotc(&b).re;
    let quad = h.dotc(&(&a * &h)).re;
    let sigma2 = ((y2 - 2.0 * cross + quad) / observation.len() as f64).max(sigma2_floor(observation));
    ChannelParams::new(h.iter().copied().collect(), sigma2)
}

/// One parallel M-step of the closed-form coordinate updates, fed with exact
/// symbol-wise marginals.
pub fn marginal_em_step(
    observation: &[Complex64],
    params: &ChannelParams,
    constellation: &Constellation,
) -> Result<ChannelParams> {
    let marginals = trellis_map_detect(observation, params, constellation)?;
    let schedule = make_schedule(ScheduleKind::Parallel, 1, params.memory())?;
    Ok(em_step(1, &schedule, &marginals, observation, params, constellation)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{complex_normal, sample_channel, transmit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn two_term_posterior() {
        let bpsk = Constellation::bpsk();
        let p = ChannelParams::new(vec![c(1.0)], 1.0).unwrap();
        let post = brute_force_posterior(&[c(10.0)], &p, &bpsk).unwrap();
        // ratio exp(-(81) + 121) = e^40
        let ratio = post.joint[0] / post.joint[1];
        assert!((ratio.ln() - 40.0).abs() < 1e-9);
        assert!((post.marginals.prob(0, 0) - 1.0).abs() < 1e-15);

        let p = ChannelParams::new(vec![c(1.0)], 1e12).unwrap();
        let post = brute_force_posterior(&[c(0.3), c(-2.0)], &p, &bpsk).unwrap();
        for j in 0..2 {
            assert!((post.marginals.prob(j, 0) - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn size_guard() {
        let bpsk = Constellation::bpsk();
        let p = ChannelParams::new(vec![c(1.0)], 1.0).unwrap();
        assert!(brute_force_posterior(&vec![c(0.0); 21], &p, &bpsk).is_err());
        assert!(log_likelihood(&vec![c(0.0); 21], &p, &bpsk).is_err());
        let long = ChannelParams::new(vec![c(1.0); 14], 1.0).unwrap();
        assert!(trellis_map_detect(&vec![c(0.0); 30], &long, &bpsk).is_err());
    }

    #[test]
    fn single_symbol_likelihood_is_gaussian_mixture() {
        let bpsk = Constellation::bpsk();
        let (y, s2) = (Complex64::new(0.4, -0.2), 0.7);
        let p = ChannelParams::new(vec![Complex64::new(0.8, 0.6)], s2).unwrap();
        let ll = log_likelihood(&[y], &p, &bpsk).unwrap();
        let dens = |mu: Complex64| (-(y - mu).norm_sqr() / s2).exp() / (PI * s2);
        let want = (0.5 * dens(p.h[0]) + 0.5 * dens(-p.h[0])).ln();
        assert!((ll - want).abs() < 1e-12);
    }

    #[test]
    fn elbo_bounds_likelihood() {
        let q4 = Constellation::qpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let p = sample_channel(1, &mut rng).with_sigma2(0.5);
            let b = transmit(&p, q4.random_symbols(4, &mut rng), &q4, &mut rng).unwrap();
            let ll = log_likelihood(&b.observation, &p, &q4).unwrap();
            let post = brute_force_posterior(&b.observation, &p, &q4).unwrap();
            // product of marginals is below the bound unless the posterior factorizes
            let e = elbo(&post.marginals, &b.observation, &p, &q4).unwrap();
            assert!(e <= ll + 1e-9);
            let u = elbo(&BeliefSet::uniform(4, 4), &b.observation, &p, &q4).unwrap();
            assert!(u <= ll + 1e-9);
        }
        // memoryless channel: the posterior factorizes, so the bound is tight
        let p = ChannelParams::new(vec![Complex64::new(0.3, 0.9)], 0.4).unwrap();
        let y: Vec<Complex64> = (0..5).map(|_| complex_normal(&mut rng)).collect();
        let post = brute_force_posterior(&y, &p, &q4).unwrap();
        let e = elbo(&post.marginals, &y, &p, &q4).unwrap();
        let ll = log_likelihood(&y, &p, &q4).unwrap();
        assert!((e - ll).abs() < 1e-9);
    }

    #[test]
    fn trellis_equals_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for con in [Constellation::bpsk(), Constellation::qpsk()] {
            for l in 0..3 {
                let p = sample_channel(l, &mut rng).with_sigma2(0.3);
                let n = if con.len() == 2 { 6 } else { 4 };
                let b = transmit(&p, con.random_symbols(n, &mut rng), &con, &mut rng).unwrap();
                let post = brute_force_posterior(&b.observation, &p, &con).unwrap();
                let map = trellis_map_detect(&b.observation, &p, &con).unwrap();
                for j in 0..n {
                    for a in 0..con.len() {
                        assert!((post.marginals.prob(j, a) - map.prob(j, a)).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn memoryless_trellis_is_per_symbol() {
        let bpsk = Constellation::bpsk();
        let p = ChannelParams::new(vec![Complex64::new(0.6, 0.8)], 0.5).unwrap();
        let y = vec![Complex64::new(0.2, 0.1), Complex64::new(-1.0, 0.4)];
        let map = trellis_map_detect(&y, &p, &bpsk).unwrap();
        for (j, yj) in y.iter().enumerate() {
            let llr = 4.0 * (yj * p.h[0].conj()).re / p.sigma2;
            let p0 = 1.0 / (1.0 + (-llr).exp());
            assert!((map.prob(j, 0) - p0).abs() < 1e-12);
        }
    }

    #[test]
    fn known_symbols_are_pinned() {
        let bpsk = Constellation::bpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = sample_channel(2, &mut rng).with_sigma2(1.0);
        let b = transmit(&p, bpsk.random_symbols(8, &mut rng), &bpsk, &mut rng).unwrap();
        let mut known = vec![None; 8];
        known[0] = Some(1);
        known[3] = Some(0);
        let map = trellis_map_detect_known(&b.observation, &p, &bpsk, &known).unwrap();
        assert_eq!(map.prob(0, 1), 1.0);
        assert_eq!(map.prob(3, 0), 1.0);
        // conditioning oracle: enumerate only the compatible sequences
        let mut marg = vec![vec![0.0; 2]; 8];
        let mut z = 0.0;
        for_each_sequence(&b.observation, &p, &bpsk, |seq, d| {
            if seq[0] == 1 && seq[3] == 0 {
                let w = (-d / p.sigma2).exp();
                z += w;
                for (j, &s) in seq.iter().enumerate() {
                    marg[j][s] += w;
                }
            }
        })
        .unwrap();
        for j in 0..8 {
            assert!((map.prob(j, 0) - marg[j][0] / z).abs() < 1e-9);
        }
    }

    #[test]
    fn pilot_estimates() {
        let bpsk = Constellation::bpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for l in 0..4 {
            let p = sample_channel(l, &mut rng).with_sigma2(1e-300);
            let pilots = PilotConfig::preamble(0.1, 100, l, &bpsk, &mut rng).unwrap();
            let mut sym = bpsk.random_symbols(100, &mut rng);
            sym[..pilots.len()].copy_from_slice(&pilots.symbols);
            let y = convolve(&p.h, &bpsk.values(&sym));
            let est = pilot_ls_estimate(&y, &pilots, &bpsk, l).unwrap();
            for (a, b) in est.h.iter().zip(p.h.iter()) {
                assert!((a - b).norm() < 1e-10);
            }
        }
        let single = PilotConfig { symbols: vec![0] };
        let est = pilot_ls_estimate(&[c(0.7), c(0.1)], &single, &bpsk, 0).unwrap();
        assert!((est.h[0] - c(0.7)).norm() < 1e-15);
        assert!(PilotConfig::count(0.01, 100, 2).is_err());
        assert!(PilotConfig::count(1.5, 100, 2).is_err());
        assert_eq!(PilotConfig::count(0.05, 100, 2).unwrap(), 5);
    }

    #[test]
    fn exact_em_fixed_point_on_clean_data() {
        let bpsk = Constellation::bpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let p = sample_channel(2, &mut rng).with_sigma2(1e-4);
        let sym = bpsk.random_symbols(10, &mut rng);
        let y = convolve(&p.h, &bpsk.values(&sym));
        let next = exact_em_step(&y, &p, &bpsk).unwrap();
        let marg = marginal_em_step(&y, &p, &bpsk).unwrap();
        for (a, b) in marg.h.iter().zip(p.h.iter()) {
            assert!((a - b).norm() < 1e-9);
        }
        for (a, b) in next.h.iter().zip(p.h.iter()) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(next.sigma2 <= 1e-8 * 2.0);
    }
}
