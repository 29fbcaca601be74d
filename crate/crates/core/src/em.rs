//! Closed-form M-step updates with per-parameter momentum schedules.
//!
//! Parameters are ordered `(h_0, ..., h_L, sigma2)`. Within one step every raw
//! update reads the previous estimate; momentum combinations are applied
//! afterwards.

use crate::bp::BeliefSet;
use crate::error::{invalid, Error, Result};
use crate::model::{build_matched_stats, ChannelParams, Constellation, MatchedStats};
use crate::scalar::{lift, Real};
use num_complex::{Complex, Complex64};
use std::fmt::Write as _;
use std::path::Path;

/// Relative noise-variance floor, scaled by the mean received power.
pub const SIGMA2_FLOOR_REL: f64 = 1e-8;

/// Momentum weights for every EMBP iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule<S: Real = f64> {
    /// `T` rows of `L + 2` weights (`h_0..h_L`, `sigma2`).
    beta_em: Vec<Vec<S>>,
    beta_bp: Vec<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// One parameter per step, cycling `h_0, ..., h_L, sigma2`.
    Serial,
    /// Every parameter in every step.
    Parallel,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "serial" => Ok(Self::Serial),
            "parallel" => Ok(Self::Parallel),
            other => Err(invalid(format!("unknown schedule kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Serial => "serial",
            Self::Parallel => "parallel",
        })
    }
}

impl<S: Real> Schedule<S> {
    pub fn new(beta_em: Vec<Vec<S>>, beta_bp: Vec<S>) -> Result<Self> {
        let t = beta_em.len();
        if t == 0 {
            return Err(invalid("schedule needs at least one iteration"));
        }
        let cols = beta_em[0].len();
        if cols < 2 {
            return Err(invalid("schedule rows need at least two entries (h_0, sigma2)"));
        }
        if beta_em.iter().any(|r| r.len() != cols) {
            return Err(invalid("schedule rows have unequal lengths"));
        }
        if beta_bp.len() != t {
            return Err(invalid(format!(
                "expected {t} BP weights, got {}",
                beta_bp.len()
            )));
        }
        let bad = beta_em
            .iter()
            .flatten()
            .chain(beta_bp.iter())
            .find(|b| !(0.0..=1.0).contains(&b.value()));
        if let Some(b) = bad {
            return Err(invalid(format!(
                "momentum weight {} outside [0, 1]",
                b.value()
            )));
        }
        Ok(Self { beta_em, beta_bp })
    }

    pub fn iterations(&self) -> usize {
        self.beta_em.len()
    }

    /// Channel memory `L` implied by the row width.
    pub fn memory(&self) -> usize {
        self.beta_em[0].len() - 2
    }

    pub fn beta_em(&self) -> &[Vec<S>] {
        &self.beta_em
    }

    pub fn beta_bp(&self) -> &[S] {
        &self.beta_bp
    }

    /// Number of raw parameter updates one EMBP run performs.
    pub fn raw_update_count(&self) -> usize {
        self.beta_em
            .iter()
            .flatten()
            .filter(|b| !b.is_const(0.0))
            .count()
    }

    pub fn primal(&self) -> Schedule<f64> {
        Schedule {
            beta_em: self
                .beta_em
                .iter()
                .map(|r| r.iter().map(|b| b.value()).collect())
                .collect(),
            beta_bp: self.beta_bp.iter().map(|b| b.value()).collect(),
        }
    }
}

impl Schedule<f64> {
    pub fn lift<S: Real>(&self) -> Schedule<S> {
        Schedule {
            beta_em: self
                .beta_em
                .iter()
                .map(|r| r.iter().map(|&b| S::cst(b)).collect())
                .collect(),
            beta_bp: self.beta_bp.iter().map(|&b| S::cst(b)).collect(),
        }
    }

    pub fn beta_em_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.beta_em
    }

    pub fn beta_bp_mut(&mut self) -> &mut [f64] {
        &mut self.beta_bp
    }

    /// Replaces the BP weights, keeping the EM weights.
    pub fn with_beta_bp(mut self, beta_bp: Vec<f64>) -> Result<Self> {
        if beta_bp.len() != self.iterations() {
            return Err(invalid("BP weight count must equal T"));
        }
        self.beta_bp = beta_bp;
        Schedule::new(self.beta_em, self.beta_bp)
    }

    /// Text form: `T`, then `T` rows of `L + 2` EM weights, then one row of
    /// `T` BP weights. Values use shortest round-trip decimal formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# embp schedule: T, beta_em rows (h_0..h_L sigma2), beta_bp");
        let _ = writeln!(out, "{}", self.iterations());
        for row in &self.beta_em {
            let _ = writeln!(out, "{}", join(row));
        }
        let _ = writeln!(out, "{}", join(&self.beta_bp));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line, first) = lines.next().ok_or(Error::Parse {
            line: 0,
            msg: "empty schedule file".into(),
        })?;
        let t: usize = first.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("expected iteration count, got '{first}'"),
        })?;
        let mut rows = Vec::with_capacity(t + 1);
        for (line, l) in lines.by_ref().take(t + 1) {
            let row = l
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        msg: format!("bad number '{tok}'"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.len() != t + 1 {
            return Err(Error::Parse {
                line: 0,
                msg: format!("expected {} data rows, found {}", t + 1, rows.len()),
            });
        }
        if let Some((line, _)) = lines.next() {
            return Err(Error::Parse {
                line,
                msg: "trailing data after BP weights".into(),
            });
        }
        let beta_bp = rows.pop().expect("non-empty");
        Schedule::new(rows, beta_bp)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

/// Named schedules with all BP weights set to one.
pub fn make_schedule(kind: ScheduleKind, iterations: usize, memory: usize) -> Result<Schedule> {
    if iterations == 0 {
        return Err(invalid("schedule needs at least one iteration"));
    }
    let cols = memory + 2;
    let beta_em = (0..iterations)
        .map(|t| match kind {
            ScheduleKind::Parallel => vec![1.0; cols],
            ScheduleKind::Serial => {
                let mut row = vec![0.0; cols];
                row[t % cols] = 1.0;
                row
            }
        })
        .collect();
    Schedule::new(beta_em, vec![1.0; iterations])
}

/// Estimates `theta^(0) .. theta^(T)` of one run.
#[derive(Clone, Debug)]
pub struct ParamTrajectory<S: Real = f64> {
    pub estimates: Vec<ChannelParams<S>>,
}

/// Lower bound on the noise-variance estimate.
pub fn sigma2_floor(observation: &[Complex64]) -> f64 {
    let p = observation.iter().map(|y| y.norm_sqr()).sum::<f64>() / observation.len().max(1) as f64;
    (SIGMA2_FLOOR_REL * p).max(1e-300)
}

/// Per-symbol first and second belief moments.
pub(crate) struct Moments<S: Real> {
    pub mean: Vec<Complex<S>>,
    pub energy: Vec<S>,
}

impl<S: Real> Moments<S> {
    pub fn of(beliefs: &BeliefSet<S>, constellation: &Constellation) -> Self {
        let n = beliefs.len();
        Self {
            mean: (0..n).map(|j| beliefs.mean(j, constellation)).collect(),
            energy: (0..n).map(|j| beliefs.energy(j, constellation)).collect(),
        }
    }
}

fn check_lengths<S: Real>(
    beliefs: &BeliefSet<S>,
    observation: &[Complex64],
    current: &ChannelParams<S>,
    constellation: &Constellation,
) -> Result<()> {
    let l = current.memory();
    if observation.len() != beliefs.len() + l {
        return Err(invalid(format!(
            "observation length {} != N + L = {}",
            observation.len(),
            beliefs.len() + l
        )));
    }
    if beliefs.alphabet() != constellation.len() {
        return Err(invalid("belief alphabet does not match constellation"));
    }
    Ok(())
}

fn raw_sigma2<S: Real>(
    moments: &Moments<S>,
    stats: &MatchedStats<S>,
    observation: &[Complex64],
) -> S {
    let n = stats.len();
    let l = stats.memory();
    let two = S::cst(2.0);
    let mut residual = S::cst(observation.iter().map(|y| y.norm_sqr()).sum());
    for j in 0..n {
        let mu = moments.mean[j];
        let mut term = two * (stats.x[j] * mu.conj()).re - stats.diag(j) * moments.energy[j];
        for i in j.saturating_sub(l)..j {
            term -= two * (stats.g(j, i) * moments.mean[i] * mu.conj()).re;
        }
        residual -= term;
    }
    let raw = residual / S::cst(observation.len() as f64);
    raw.max_by_value(S::cst(sigma2_floor(observation)))
}

fn raw_tap<S: Real>(
    ell: usize,
    moments: &Moments<S>,
    observation: &[Complex64],
    h: &[Complex<S>],
) -> Result<Complex<S>> {
    let n = moments.mean.len();
    let zero = Complex::new(S::zero(), S::zero());
    let mut num = zero;
    for j in 0..n {
        num = num + moments.mean[j].conj() * lift::<S>(observation[j + ell]);
    }
    for (k, &hk) in h.iter().enumerate() {
        if k == ell {
            continue;
        }
        let mut corr = zero;
        if ell > k {
            let d = ell - k;
            for j in 0..n.saturating_sub(d) {
                corr = corr + moments.mean[j].conj() * moments.mean[j + d];
            }
        } else {
            let d = k - ell;
            for j in d..n {
                corr = corr + moments.mean[j].conj() * moments.mean[j - d];
            }
        }
        num = num - hk * corr;
    }
    let mut den = S::zero();
    for e in &moments.energy {
        den += *e;
    }
    if !(den.value() > 1e-12) {
        return Err(Error::DegenerateDenominator(den.value()));
    }
    Ok(num * (S::one() / den))
}

/// Noise-variance update from the current impulse response and beliefs,
/// floored at [`sigma2_floor`].
pub fn update_sigma2<S: Real>(
    beliefs: &BeliefSet<S>,
    observation: &[Complex64],
    current: &ChannelParams<S>,
    constellation: &Constellation,
) -> Result<S> {
    check_lengths(beliefs, observation, current, constellation)?;
    let stats = build_matched_stats(current, observation)?;
    Ok(raw_sigma2(&Moments::of(beliefs, constellation), &stats, observation))
}

/// Update of tap `ell`, holding the other taps at `current`.
pub fn update_tap<S: Real>(
    ell: usize,
    beliefs: &BeliefSet<S>,
    observation: &[Complex64],
    current: &ChannelParams<S>,
    constellation: &Constellation,
) -> Result<Complex<S>> {
    check_lengths(beliefs, observation, current, constellation)?;
    if ell > current.memory() {
        return Err(invalid(format!("tap index {ell} exceeds memory {}", current.memory())));
    }
    raw_tap(ell, &Moments::of(beliefs, constellation), observation, &current.h)
}

/// Result of one momentum M-step.
#[derive(Clone, Debug)]
pub struct EmStep<S: Real = f64> {
    pub params: ChannelParams<S>,
    /// Raw updates actually computed (entries with nonzero weight).
    pub raw_updates: usize,
}

/// Momentum M-step `t` (1-based) of `schedule`.
pub fn em_step<S: Real>(
    t: usize,
    schedule: &Schedule<S>,
    beliefs: &BeliefSet<S>,
    observation: &[Complex64],
    current: &ChannelParams<S>,
    constellation: &Constellation,
) -> Result<EmStep<S>> {
    check_lengths(beliefs, observation, current, constellation)?;
    let stats = build_matched_stats(current, observation)?;
    em_step_with_stats(t, schedule, beliefs, observation, current, &stats, constellation)
}

/// [`em_step`] with matched statistics already built from `current`.
pub(crate) fn em_step_with_stats<S: Real>(
    t: usize,
    schedule: &Schedule<S>,
    beliefs: &BeliefSet<S>,
    observation: &[Complex64],
    current: &ChannelParams<S>,
    stats: &MatchedStats<S>,
    constellation: &Constellation,
) -> Result<EmStep<S>> {
    if t == 0 || t > schedule.iterations() {
        return Err(invalid(format!(
            "step {t} outside 1..={}",
            schedule.iterations()
        )));
    }
    let l = current.memory();
    if schedule.memory() != l {
        return Err(invalid(format!(
            "schedule is for memory {}, estimate has memory {l}",
            schedule.memory()
        )));
    }
    let row = &schedule.beta_em()[t - 1];
    if row.iter().all(|b| b.is_const(0.0)) {
        return Ok(EmStep {
            params: current.clone(),
            raw_updates: 0,
        });
    }
    let moments = Moments::of(beliefs, constellation);
    let mut next = current.clone();
    let mut raw_updates = 0;
    for ell in 0..=l {
        let beta = row[ell];
        if beta.is_const(0.0) {
            continue;
        }
        let raw = raw_tap(ell, &moments, observation, &current.h)?;
        raw_updates += 1;
        next.h[ell] = raw * beta + current.h[ell] * (S::one() - beta);
    }
    let beta = row[l + 1];
    if !beta.is_const(0.0) {
        let raw = raw_sigma2(&moments, stats, observation);
        raw_updates += 1;
        let mixed = beta * raw + (S::one() - beta) * current.sigma2;
        next.sigma2 = mixed.max_by_value(S::cst(sigma2_floor(observation)));
    }
    if !next.is_finite() {
        return Err(Error::NonFinite(format!("parameter estimate at step {t}")));
    }
    Ok(EmStep {
        params: next,
        raw_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{complex_normal, convolve, sample_channel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_beliefs(rng: &mut ChaCha8Rng, n: usize, m: usize) -> BeliefSet {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.random::<f64>() + 0.01).collect())
            .collect();
        BeliefSet::from_probs(&rows).unwrap()
    }

    #[test]
    fn serial_and_parallel_schedules() {
        let s = make_schedule(ScheduleKind::Serial, 12, 2).unwrap();
        for k in 0..4 {
            let ones = s.beta_em().iter().filter(|r| r[k] == 1.0).count();
            assert_eq!(ones, 3);
        }
        assert!(s.beta_em().iter().all(|r| r.iter().sum::<f64>() == 1.0));
        assert_eq!(s.raw_update_count(), 12);
        let p = make_schedule(ScheduleKind::Parallel, 5, 3).unwrap();
        assert!(p.beta_em().iter().flatten().all(|b| *b == 1.0));
        assert!(p.beta_bp().iter().all(|b| *b == 1.0));
        assert!(make_schedule(ScheduleKind::Serial, 0, 2).is_err());
    }

    #[test]
    fn custom_schedule_validation() {
        assert!(Schedule::new(vec![vec![1.0, 1.5, 0.0]], vec![1.0]).is_err());
        assert!(Schedule::new(vec![vec![1.0, 0.5, 0.0]], vec![-0.1]).is_err());
        assert!(Schedule::new(vec![vec![1.0, 0.5, 0.0]], vec![1.0, 1.0]).is_err());
        assert!(Schedule::new(vec![vec![1.0, 0.5], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(Schedule::new(vec![vec![0.2, 0.5, 0.0]], vec![0.9]).is_ok());
    }

    #[test]
    fn schedule_text_round_trip_and_errors() {
        let s = Schedule::new(
            vec![vec![0.1, 0.30000000000000004, 1.0], vec![0.0, 1e-17, 0.5]],
            vec![1.0, 0.123456789012345],
        )
        .unwrap();
        assert_eq!(Schedule::from_text(&s.to_text()).unwrap(), s);
        assert!(Schedule::from_text("").is_err());
        assert!(Schedule::from_text("2\n1 1\n1 1\n").is_err());
        assert!(Schedule::from_text("1\n1 x\n1\n").is_err());
        assert!(Schedule::from_text("1\n1 1\n1\n1\n").is_err());
    }

    #[test]
    fn perfect_beliefs_noiseless_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let con = Constellation::qpsk();
        for l in 0..3 {
            let p = sample_channel(l, &mut rng).with_sigma2(0.1);
            let sym = con.random_symbols(30, &mut rng);
            let y = convolve(&p.h, &con.values(&sym));
            let b = BeliefSet::delta(&sym, con.len());
            for ell in 0..=l {
                let h = update_tap(ell, &b, &y, &p, &con).unwrap();
                assert!((h - p.h[ell]).norm() < 1e-9, "tap {ell}");
            }
            let s2 = update_sigma2(&b, &y, &p, &con).unwrap();
            assert_eq!(s2, sigma2_floor(&y));
        }
        // L = 0 reduces to a correlation estimator
        let p = ChannelParams::new(vec![Complex64::new(0.6, -0.8)], 1.0).unwrap();
        let sym = con.random_symbols(25, &mut rng);
        let y = convolve(&p.h, &con.values(&sym));
        let b = BeliefSet::delta(&sym, 4);
        let h = update_tap(0, &b, &y, &ChannelParams::new(vec![Complex64::new(1.0, 0.0)], 1.0).unwrap(), &con).unwrap();
        assert!((h - p.h[0]).norm() < 1e-12);
    }

    #[test]
    fn delta_beliefs_noisy_sigma2_is_residual_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let con = Constellation::bpsk();
        let p = sample_channel(2, &mut rng).with_sigma2(0.3);
        let sym = con.random_symbols(40, &mut rng);
        let clean = convolve(&p.h, &con.values(&sym));
        let y: Vec<Complex64> = clean
            .iter()
            .map(|c| c + complex_normal(&mut rng) * 0.3f64.sqrt())
            .collect();
        let want = y
            .iter()
            .zip(clean.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            / y.len() as f64;
        let got = update_sigma2(&BeliefSet::delta(&sym, 2), &y, &p, &con).unwrap();
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn em_step_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let con = Constellation::bpsk();
        let (n, l) = (20, 2);
        let p = sample_channel(l, &mut rng).with_sigma2(0.4);
        let y: Vec<Complex64> = (0..n + l).map(|_| complex_normal(&mut rng)).collect();
        let b = random_beliefs(&mut rng, n, 2);

        let zeros = Schedule::new(vec![vec![0.0; l + 2]], vec![1.0]).unwrap();
        let out = em_step(1, &zeros, &b, &y, &p, &con).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.raw_updates, 0);

        let ones = make_schedule(ScheduleKind::Parallel, 1, l).unwrap();
        let out = em_step(1, &ones, &b, &y, &p, &con).unwrap();
        assert_eq!(out.raw_updates, l + 2);
        for ell in 0..=l {
            assert_eq!(out.params.h[ell], update_tap(ell, &b, &y, &p, &con).unwrap());
        }
        assert_eq!(out.params.sigma2, update_sigma2(&b, &y, &p, &con).unwrap());

        let half = Schedule::new(vec![vec![0.5, 0.0, 0.0, 0.0]], vec![1.0]).unwrap();
        let out = em_step(1, &half, &b, &y, &p, &con).unwrap();
        let raw = update_tap(0, &b, &y, &p, &con).unwrap();
        assert!((out.params.h[0] - (raw + p.h[0]) * 0.5).norm() < 1e-15);
        assert_eq!(&out.params.h[1..], &p.h[1..]);
        assert_eq!(out.params.sigma2, p.sigma2);
        assert_eq!(out.raw_updates, 1);

        assert!(em_step(0, &half, &b, &y, &p, &con).is_err());
        assert!(em_step(2, &half, &b, &y, &p, &con).is_err());
        let wrong_l = make_schedule(ScheduleKind::Parallel, 1, 1).unwrap();
        assert!(em_step(1, &wrong_l, &b, &y, &p, &con).is_err());
    }
}
