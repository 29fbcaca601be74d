//! Log-domain belief propagation on the Ungerboeck factor graph.
//!
//! Variable nodes are the transmitted symbols; every pair `(n, m)` with
//! `0 < |n - m| <= L` is joined by one pairwise factor `I_nm`, and each node
//! carries a local factor `F_n`. Messages are exchanged with a flooding
//! schedule and blended with the previous iteration's messages by a momentum
//! weight.

use crate::error::{Error, Result};
use crate::model::{Constellation, MatchedStats};
use crate::scalar::{lift, logsumexp, Real};
use num_complex::Complex;

/// Floor applied to stored log-messages.
pub const LOG_FLOOR: f64 = -700.0;

/// Local and pairwise log-factors.
#[derive(Clone, Debug)]
pub struct FactorTables<S: Real = f64> {
    n: usize,
    m: usize,
    l: usize,
    log_f: Vec<S>,
    /// Pair `(j, j - d)`, `d = 1..=L`: `log I(c_j = a, c_{j-d} = b)`.
    log_i: Vec<S>,
}

impl<S: Real> FactorTables<S> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn alphabet(&self) -> usize {
        self.m
    }

    pub fn memory(&self) -> usize {
        self.l
    }

    pub fn log_f(&self, n: usize, a: usize) -> S {
        self.log_f[n * self.m + a]
    }

    /// `log I_nm(c_n = a, c_m = b)` for `0 < |n - m| <= L`.
    pub fn log_i(&self, n: usize, m: usize, a: usize, b: usize) -> S {
        if n > m {
            self.log_i[self.pair_index(n, n - m) + a * self.m + b]
        } else {
            self.log_i[self.pair_index(m, m - n) + b * self.m + a]
        }
    }

    #[inline]
    fn pair_index(&self, j: usize, d: usize) -> usize {
        (j * self.l + d - 1) * self.m * self.m
    }
}

/// Directed messages `mu_{n -> m}(c_m)` in the log domain, each normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageSet<S: Real = f64> {
    n: usize,
    m: usize,
    l: usize,
    log_mu: Vec<S>,
}

impl<S: Real> MessageSet<S> {
    /// All messages uniform.
    pub fn uniform(n: usize, m: usize, l: usize) -> Self {
        let u = S::cst(-(m as f64).ln());
        Self {
            n,
            m,
            l,
            log_mu: vec![u; n * 2 * l * m],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Message from `from` to `to`; `None` when the nodes are not adjacent.
    pub fn get(&self, from: usize, to: usize) -> Option<&[S]> {
        let off = to as isize - from as isize;
        if off == 0 || off.unsigned_abs() > self.l || from >= self.n || to >= self.n {
            return None;
        }
        let i = self.index(from, off);
        Some(&self.log_mu[i..i + self.m])
    }

    #[inline]
    fn index(&self, from: usize, off: isize) -> usize {
        let l = self.l as isize;
        let slot = if off < 0 { off + l } else { off + l - 1 } as usize;
        (from * 2 * self.l + slot) * self.m
    }

    fn neighbors(&self, j: usize) -> impl Iterator<Item = usize> {
        let lo = j.saturating_sub(self.l);
        let hi = (j + self.l).min(self.n - 1);
        (lo..=hi).filter(move |&k| k != j)
    }

    pub fn is_finite(&self) -> bool {
        self.log_mu.iter().all(|x| x.value().is_finite())
    }

    pub fn primal(&self) -> MessageSet<f64> {
        MessageSet {
            n: self.n,
            m: self.m,
            l: self.l,
            log_mu: self.log_mu.iter().map(|x| x.value()).collect(),
        }
    }
}

/// Per-symbol beliefs `b_n(c_n)` in the log domain, each row normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefSet<S: Real = f64> {
    n: usize,
    m: usize,
    log_b: Vec<S>,
}

impl<S: Real> BeliefSet<S> {
    pub fn uniform(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            log_b: vec![S::cst(-(m as f64).ln()); n * m],
        }
    }

    /// Builds beliefs from unnormalized log weights (row-major `n x m`).
    pub fn from_log_weights(n: usize, m: usize, mut log_w: Vec<S>) -> Result<Self> {
        if log_w.len() != n * m || m == 0 {
            return Err(crate::error::invalid("belief table has the wrong shape"));
        }
        for row in log_w.chunks_mut(m) {
            normalize(row);
        }
        let b = Self { n, m, log_b: log_w };
        if !b.is_finite_rows() {
            return Err(Error::NonFinite("belief row without support".into()));
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn alphabet(&self) -> usize {
        self.m
    }

    pub fn log_row(&self, n: usize) -> &[S] {
        &self.log_b[n * self.m..(n + 1) * self.m]
    }

    pub fn prob(&self, n: usize, a: usize) -> f64 {
        self.log_b[n * self.m + a].value().exp()
    }

    /// `E[c_n]` under the belief.
    pub fn mean(&self, n: usize, constellation: &Constellation) -> Complex<S> {
        let mut acc = Complex::new(S::zero(), S::zero());
        for (a, &lb) in self.log_row(n).iter().enumerate() {
            acc = acc + lift::<S>(constellation.point(a)) * lb.exp();
        }
        acc
    }

    /// `E[|c_n|^2]` under the belief.
    pub fn energy(&self, n: usize, constellation: &Constellation) -> S {
        let mut acc = S::zero();
        for (a, &lb) in self.log_row(n).iter().enumerate() {
            acc += S::cst(constellation.point(a).norm_sqr()) * lb.exp();
        }
        acc
    }

    fn is_finite_rows(&self) -> bool {
        self.log_b
            .chunks(self.m)
            .all(|row| row.iter().any(|x| x.value().is_finite()) && row.iter().all(|x| !x.value().is_nan()))
    }

    pub fn primal(&self) -> BeliefSet<f64> {
        BeliefSet {
            n: self.n,
            m: self.m,
            log_b: self.log_b.iter().map(|x| x.value()).collect(),
        }
    }
}

impl BeliefSet<f64> {
    /// Point-mass beliefs at the given symbol indices.
    pub fn delta(symbols: &[usize], m: usize) -> Self {
        let mut log_b = vec![f64::NEG_INFINITY; symbols.len() * m];
        for (n, &s) in symbols.iter().enumerate() {
            log_b[n * m + s] = 0.0;
        }
        Self {
            n: symbols.len(),
            m,
            log_b,
        }
    }

    /// Beliefs from linear probabilities; rows are renormalized.
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m || r.iter().any(|p| !(*p >= 0.0))) {
            return Err(crate::error::invalid("probabilities must be non-negative with equal row lengths"));
        }
        let log_w = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        Self::from_log_weights(rows.len(), m, log_w)
    }

    pub fn lift<S: Real>(&self) -> BeliefSet<S> {
        BeliefSet {
            n: self.n,
            m: self.m,
            log_b: self.log_b.iter().map(|&x| S::cst(x)).collect(),
        }
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.log_b
            .chunks(self.m)
            .map(|r| r.iter().map(|x| x.exp()).collect())
            .collect()
    }

    /// Largest absolute change of any linear-domain belief entry.
    pub fn max_change(&self, other: &Self) -> f64 {
        self.log_b
            .iter()
            .zip(other.log_b.iter())
            .map(|(a, b)| (a.exp() - b.exp()).abs())
            .fold(0.0, f64::max)
    }
}

/// Shifts a log-vector so that it sums to one in the linear domain.
fn normalize<S: Real>(row: &mut [S]) {
    let z = logsumexp(row);
    if z.value().is_finite() {
        for x in row.iter_mut() {
            *x -= z;
        }
    }
}

/// Evaluates `log F_n` and `log I_nm` from matched-filter statistics.
pub fn compute_factors<S: Real>(
    stats: &MatchedStats<S>,
    constellation: &Constellation,
) -> Result<FactorTables<S>> {
    if !(stats.sigma2.value() > 0.0) || !stats.sigma2.value().is_finite() {
        return Err(crate::error::invalid(format!(
            "sigma2 must be finite and > 0, got {:e}",
            stats.sigma2.value()
        )));
    }
    let n = stats.len();
    let l = stats.memory();
    let m = constellation.len();
    let pts: Vec<Complex<S>> = constellation.points().iter().map(|&p| lift(p)).collect();
    let inv = S::one() / stats.sigma2;
    let two = S::cst(2.0);

    let mut log_f = Vec::with_capacity(n * m);
    for j in 0..n {
        let gjj = stats.diag(j);
        for p in &pts {
            let v = two * (stats.x[j] * p.conj()).re - gjj * p.norm_sqr();
            log_f.push(v * inv);
        }
    }

    let mut log_i = vec![S::zero(); n * l * m * m];
    for j in 0..n {
        for d in 1..=l.min(j) {
            let g = stats.g(j, j - d);
            let base = (j * l + d - 1) * m * m;
            for (a, pa) in pts.iter().enumerate() {
                for (b, pb) in pts.iter().enumerate() {
                    log_i[base + a * m + b] = -(two * (g * *pb * pa.conj()).re) * inv;
                }
            }
        }
    }
    Ok(FactorTables {
        n,
        m,
        l,
        log_f,
        log_i,
    })
}

/// `log F_n + sum_k log mu_{k -> n}` for every node.
fn incoming_totals<S: Real>(msgs: &MessageSet<S>, factors: &FactorTables<S>) -> Vec<S> {
    let m = factors.m;
    let mut totals = factors.log_f.clone();
    for j in 0..factors.n {
        for k in msgs.neighbors(j) {
            let inc = msgs.get(k, j).expect("adjacent");
            for a in 0..m {
                totals[j * m + a] += inc[a];
            }
        }
    }
    totals
}

fn check_shapes<S: Real>(msgs: &MessageSet<S>, factors: &FactorTables<S>) -> Result<()> {
    if msgs.n != factors.n || msgs.m != factors.m || msgs.l != factors.l {
        return Err(crate::error::invalid(format!(
            "message set ({}, {}, {}) does not match factor graph ({}, {}, {})",
            msgs.n, msgs.m, msgs.l, factors.n, factors.m, factors.l
        )));
    }
    Ok(())
}

/// One flooding update without momentum: every message is recomputed from
/// the previous iteration's messages and the current factors.
pub fn flood_messages<S: Real>(
    msgs: &MessageSet<S>,
    factors: &FactorTables<S>,
) -> Result<MessageSet<S>> {
    check_shapes(msgs, factors)?;
    let m = factors.m;
    let totals = incoming_totals(msgs, factors);
    let mut out = msgs.clone();
    let floor = S::cst(LOG_FLOOR);
    let mut cavity = vec![S::zero(); m];
    let mut terms = vec![S::zero(); m];
    for j in 0..factors.n {
        for k in msgs.neighbors(j) {
            // extrinsic information at j excluding what k sent
            let back = msgs.get(k, j).expect("adjacent");
            for a in 0..m {
                cavity[a] = totals[j * m + a] - back[a];
            }
            let idx = out.index(j, k as isize - j as isize);
            let dst = &mut out.log_mu[idx..idx + m];
            for (b, slot) in dst.iter_mut().enumerate() {
                for a in 0..m {
                    terms[a] = factors.log_i(j, k, a, b) + cavity[a];
                }
                *slot = logsumexp(&terms);
            }
            normalize(dst);
            for x in dst.iter_mut() {
                *x = x.max_by_value(floor);
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("BP message".into()));
    }
    Ok(out)
}

/// Normalized beliefs `b_n ∝ F_n * prod_k mu_{k -> n}`.
pub fn compute_beliefs<S: Real>(
    msgs: &MessageSet<S>,
    factors: &FactorTables<S>,
) -> Result<BeliefSet<S>> {
    check_shapes(msgs, factors)?;
    let mut log_b = incoming_totals(msgs, factors);
    for row in log_b.chunks_mut(factors.m) {
        normalize(row);
    }
    let b = BeliefSet {
        n: factors.n,
        m: factors.m,
        log_b,
    };
    if !b.log_b.iter().all(|x| x.value().is_finite()) {
        return Err(Error::NonFinite("BP belief".into()));
    }
    Ok(b)
}

/// Convex combination `beta * new + (1 - beta) * old` of normalized
/// linear-domain messages, evaluated in the log domain.
pub fn apply_momentum<S: Real>(
    new: MessageSet<S>,
    old: &MessageSet<S>,
    beta: S,
) -> Result<MessageSet<S>> {
    if !(0.0..=1.0).contains(&beta.value()) {
        return Err(crate::error::invalid(format!(
            "momentum weight must lie in [0, 1], got {}",
            beta.value()
        )));
    }
    if beta.is_const(1.0) {
        return Ok(new);
    }
    if beta.is_const(0.0) {
        return Ok(old.clone());
    }
    let mut out = new;
    let one_minus = S::one() - beta;
    let floor = S::cst(LOG_FLOOR);
    let m = out.m;
    for (dst, prev) in out.log_mu.chunks_mut(m).zip(old.log_mu.chunks(m)) {
        for (x, &p) in dst.iter_mut().zip(prev.iter()) {
            let shift = S::cst(x.value().max(p.value()));
            *x = shift + (beta * (*x - shift).exp() + one_minus * (p - shift).exp()).ln();
        }
        normalize(dst);
        for x in dst.iter_mut() {
            *x = x.max_by_value(floor);
        }
    }
    Ok(out)
}

/// One BP iteration: flooding message update, momentum with weight `beta`,
/// then belief update.
pub fn bp_iteration<S: Real>(
    msgs: &MessageSet<S>,
    factors: &FactorTables<S>,
    beta: S,
) -> Result<(MessageSet<S>, BeliefSet<S>)> {
    let fresh = flood_messages(msgs, factors)?;
    let next = apply_momentum(fresh, msgs, beta)?;
    let beliefs = compute_beliefs(&next, factors)?;
    Ok((next, beliefs))
}

/// Runs `betas.len()` BP iterations from uniform messages and returns the
/// beliefs after every iteration, starting with the uniform initial beliefs.
pub fn run_bp_history(
    stats: &MatchedStats,
    constellation: &Constellation,
    betas: &[f64],
) -> Result<Vec<BeliefSet>> {
    if betas.is_empty() {
        return Err(crate::error::invalid("BP needs at least one iteration"));
    }
    let factors = compute_factors(stats, constellation)?;
    let mut msgs = MessageSet::uniform(stats.len(), constellation.len(), stats.memory());
    let mut history = Vec::with_capacity(betas.len() + 1);
    history.push(BeliefSet::uniform(stats.len(), constellation.len()));
    for &beta in betas {
        let (next, beliefs) = bp_iteration(&msgs, &factors, beta)?;
        msgs = next;
        history.push(beliefs);
    }
    Ok(history)
}

/// Coherent BP detector: `betas.len()` iterations from uniform messages.
pub fn run_bp(
    stats: &MatchedStats,
    constellation: &Constellation,
    betas: &[f64],
) -> Result<BeliefSet> {
    if betas.is_empty() {
        return Err(crate::error::invalid("BP needs at least one iteration"));
    }
    let factors = compute_factors(stats, constellation)?;
    let mut msgs = MessageSet::uniform(stats.len(), constellation.len(), stats.memory());
    let mut beliefs = BeliefSet::uniform(stats.len(), constellation.len());
    for &beta in betas {
        let (next, b) = bp_iteration(&msgs, &factors, beta)?;
        msgs = next;
        beliefs = b;
    }
    Ok(beliefs)
}

/// Symbol-wise argmax; ties go to the lowest constellation index.
pub fn detect<S: Real>(beliefs: &BeliefSet<S>) -> Vec<usize> {
    (0..beliefs.n)
        .map(|n| {
            let row = beliefs.log_row(n);
            let mut best = 0;
            for a in 1..row.len() {
                if row[a].value() > row[best].value() {
                    best = a;
                }
            }
            best
        })
        .collect()
}
