//! End-to-end learning of momentum schedules by unrolling EMBP.
//!
//! Gradients with respect to the schedule weights are exact: the unrolled
//! computation is evaluated with forward-mode dual numbers, a chunk of
//! [`CHUNK`] weights per pass. A simultaneous-perturbation estimator is
//! available as a cheaper stochastic alternative.

use crate::bp::BeliefSet;
use crate::embp::{initialize, run_embp, EmbpResult, InitStrategy};
use crate::error::{invalid, Error, Result};
use crate::model::{
    sample_channel, snr_to_sigma2, substream, transmit, ChannelParams, Constellation,
    TransmissionBlock,
};
use crate::em::Schedule;
use crate::scalar::{lift, Dual, Real};
use num_complex::{Complex, Complex64};
use rand::Rng;
use rayon::prelude::*;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

/// Weights differentiated per forward-mode pass.
pub const CHUNK: usize = 12;

const DOMAIN_TRAIN: u64 = 0x7472_6169_6e;
const DOMAIN_VALIDATION: u64 = 0x7661_6c69_64;
const BELIEF_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Sign-resolved `||h_hat - h||^2` of the final estimate.
    MseH,
    /// Negative bitwise mutual information of the final beliefs.
    NegBmi,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse_h" => Ok(Self::MseH),
            "neg_bmi" => Ok(Self::NegBmi),
            other => Err(invalid(format!("unknown objective `{other}` (mse_h, neg_bmi)"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MseH => "mse_h",
            Self::NegBmi => "neg_bmi",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradientMode {
    /// Forward-mode differentiation of the unrolled computation.
    Exact,
    /// Simultaneous perturbation with Rademacher directions, averaged over
    /// `repeats` draws.
    Spsa { perturbation: f64, repeats: usize },
}

impl FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "spsa" => Ok(Self::Spsa {
                perturbation: 0.02,
                repeats: 4,
            }),
            other => Err(invalid(format!("unknown gradient mode `{other}` (exact, spsa)"))),
        }
    }
}

impl fmt::Display for GradientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Exact => f.write_str("exact"),
            Self::Spsa { .. } => f.write_str("spsa"),
        }
    }
}

/// Which weight groups are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamMask {
    pub em: bool,
    pub bp: bool,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batches: usize,
    pub batch_size: usize,
    /// Adam learning rate.
    pub step_size: f64,
    /// Budget of raw M-step updates. `None` disables pruning.
    pub k_em_target: Option<usize>,
    pub lambda_l1: f64,
    pub gradient_mode: GradientMode,
    pub mask: ParamMask,
    pub seed: u64,
    /// Validation interval in batches; 0 validates only after the last batch.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::MseH,
            batches: 250,
            batch_size: 256,
            step_size: 0.02,
            k_em_target: None,
            lambda_l1: 0.1,
            gradient_mode: GradientMode::Exact,
            mask: ParamMask { em: true, bp: false },
            seed: 0,
            validate_every: 0,
        }
    }
}

/// One training example: a block and the initial estimate EMBP starts from.
#[derive(Clone, Debug)]
pub struct TrainingRecord {
    pub block: TransmissionBlock,
    pub initial: ChannelParams,
}

/// Recipe for drawing training blocks on demand.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub block_len: usize,
    pub memory: usize,
    pub constellation: Constellation,
    /// SNR drawn uniformly from this closed range (dB).
    pub snr_db: (f64, f64),
    pub init: InitStrategy,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Record `index` of stream family `domain`: random channel, SNR, symbols,
    /// noise and initial estimate, all from one private substream.
    pub fn record(&self, domain: u64, index: u64) -> Result<TrainingRecord> {
        let mut rng = substream(self.seed, domain, index);
        let (lo, hi) = self.snr_db;
        let mut truth = sample_channel(self.memory, &mut rng);
        let snr = lo + (hi - lo) * rng.random::<f64>();
        truth.sigma2 = snr_to_sigma2(snr, &truth.h, &self.constellation, self.block_len)?;
        let symbols = self.constellation.random_symbols(self.block_len, &mut rng);
        let block = transmit(&truth, symbols, &self.constellation, &mut rng)?;
        let initial = initialize(&self.init, &block.observation, self.memory, Some(&truth), &mut rng)?;
        Ok(TrainingRecord { block, initial })
    }
}

#[derive(Clone, Debug)]
enum Source {
    Fixed(Vec<TrainingRecord>),
    Synthetic(SyntheticSpec),
}

/// Training data: either a fixed record list, cycled through batch by batch,
/// or a synthetic generator that produces fresh blocks for every batch.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    source: Source,
    constellation: Constellation,
    validation: Vec<TrainingRecord>,
}

impl TrainingSet {
    pub fn fixed(records: Vec<TrainingRecord>, constellation: Constellation) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid("training set is empty"));
        }
        Ok(Self {
            source: Source::Fixed(records),
            constellation,
            validation: Vec::new(),
        })
    }

    /// Synthetic set with `validation_blocks` held-out records.
    pub fn synthetic(spec: SyntheticSpec, validation_blocks: usize) -> Result<Self> {
        if spec.block_len == 0 {
            return Err(invalid("block length must be positive"));
        }
        let (lo, hi) = spec.snr_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(invalid(format!("bad snr range [{lo}, {hi}]")));
        }
        let validation = (0..validation_blocks as u64)
            .into_par_iter()
            .map(|i| spec.record(DOMAIN_VALIDATION, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            constellation: spec.constellation.clone(),
            source: Source::Synthetic(spec),
            validation,
        })
    }

    pub fn with_validation(mut self, records: Vec<TrainingRecord>) -> Self {
        self.validation = records;
        self
    }

    pub fn constellation(&self) -> &Constellation {
        &self.constellation
    }

    pub fn validation(&self) -> &[TrainingRecord] {
        &self.validation
    }

    /// Records of batch `index`.
    pub fn batch(&self, index: usize, size: usize) -> Result<Vec<TrainingRecord>> {
        match &self.source {
            Source::Fixed(records) => Ok((0..size)
                .map(|j| records[(index * size + j) % records.len()].clone())
                .collect()),
            Source::Synthetic(spec) => (0..size)
                .into_par_iter()
                .map(|j| spec.record(DOMAIN_TRAIN, (index * size + j) as u64))
                .collect(),
        }
    }
}

/// Sign-resolved squared error `min(||e - h||^2, ||e + h||^2)`.
pub fn squared_error<S: Real>(estimate: &[Complex<S>], truth: &[Complex64]) -> S {
    let (mut plus, mut minus) = (S::zero(), S::zero());
    for (&e, &t) in estimate.iter().zip(truth) {
        let t = lift::<S>(t);
        plus += (e - t).norm_sqr();
        minus += (e + t).norm_sqr();
    }
    if minus.value() < plus.value() {
        minus
    } else {
        plus
    }
}

/// Whether `estimate` is closer to `-truth` than to `truth`.
pub fn sign_flipped(estimate: &[Complex64], truth: &[Complex64]) -> bool {
    let (plus, minus) = estimate.iter().zip(truth).fold((0.0, 0.0), |(p, m), (e, t)| {
        (p + (e - t).norm_sqr(), m + (e + t).norm_sqr())
    });
    minus < plus
}

pub fn loss_mse<S: Real>(result: &EmbpResult<S>, truth: &ChannelParams) -> S {
    squared_error(&result.final_params.h, &truth.h)
}

/// `-BMI` with `BMI = log2 M - (1/N) sum_n -log2 b_n(c_n)`, unclipped.
pub fn loss_bmi<S: Real>(
    beliefs: &BeliefSet<S>,
    true_symbols: &[usize],
    constellation: &Constellation,
) -> Result<S> {
    let m = constellation.len();
    if beliefs.len() != true_symbols.len() || beliefs.alphabet() != m {
        return Err(invalid("beliefs and symbols disagree in shape"));
    }
    if true_symbols.iter().any(|&s| s >= m) {
        return Err(invalid("symbol index out of range"));
    }
    let floor = S::cst(BELIEF_FLOOR.ln());
    let mut ce = S::zero();
    for (n, &s) in true_symbols.iter().enumerate() {
        ce -= beliefs.log_row(n)[s].max_by_value(floor);
    }
    let n = S::cst(true_symbols.len().max(1) as f64);
    Ok(ce / (n * S::cst(std::f64::consts::LN_2)) - S::cst((m as f64).log2()))
}

/// BMI clipped to `[0, log2 M]` for reporting.
pub fn bmi(beliefs: &BeliefSet, true_symbols: &[usize], constellation: &Constellation) -> Result<f64> {
    let raw = -loss_bmi(beliefs, true_symbols, constellation)?;
    Ok(raw.clamp(0.0, (constellation.len() as f64).log2()))
}

/// Positions `(t, k)` of the `k_prime` smallest-magnitude `beta_em` entries,
/// ties broken by `(t, k)` order.
pub fn smallest_entries<S: Real>(schedule: &Schedule<S>, k_prime: usize) -> Vec<(usize, usize)> {
    let mut entries: Vec<(f64, usize, usize)> = schedule
        .beta_em()
        .iter()
        .enumerate()
        .flat_map(|(t, row)| row.iter().enumerate().map(move |(k, b)| (b.value().abs(), t, k)))
        .collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    entries.into_iter().take(k_prime).map(|(_, t, k)| (t, k)).collect()
}

/// Sum of the `k_prime` smallest `|beta_em|` entries.
pub fn l1_penalty<S: Real>(schedule: &Schedule<S>, k_prime: usize) -> S {
    let mut acc = S::zero();
    for (t, k) in smallest_entries(schedule, k_prime) {
        let b = schedule.beta_em()[t][k];
        acc += if b.value() < 0.0 { -b } else { b };
    }
    acc
}

/// Gradient of the mean batch loss over all schedule weights. Entries outside
/// the mask are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    /// Mean batch loss at the schedule.
    pub loss: f64,
    pub beta_em: Vec<Vec<f64>>,
    pub beta_bp: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Weight {
    Em(usize, usize),
    Bp(usize),
}

fn weights(schedule: &Schedule, mask: ParamMask) -> Vec<Weight> {
    let mut out = Vec::new();
    if mask.em {
        for t in 0..schedule.iterations() {
            out.extend((0..schedule.memory() + 2).map(|k| Weight::Em(t, k)));
        }
    }
    if mask.bp {
        out.extend((0..schedule.iterations()).map(Weight::Bp));
    }
    out
}

fn get(schedule: &Schedule, w: Weight) -> f64 {
    match w {
        Weight::Em(t, k) => schedule.beta_em()[t][k],
        Weight::Bp(t) => schedule.beta_bp()[t],
    }
}

fn set(schedule: &mut Schedule, w: Weight, v: f64) {
    match w {
        Weight::Em(t, k) => schedule.beta_em_mut()[t][k] = v,
        Weight::Bp(t) => schedule.beta_bp_mut()[t] = v,
    }
}

fn block_loss<S: Real>(
    record: &TrainingRecord,
    schedule: &Schedule<S>,
    objective: Objective,
    constellation: &Constellation,
) -> Result<S> {
    let result = run_embp(
        &record.block.observation,
        constellation,
        schedule,
        record.initial.lift(),
        false,
    )?;
    let truth = &record.block.truth;
    match objective {
        Objective::MseH => Ok(loss_mse(&result, truth)),
        Objective::NegBmi => {
            let estimate = result.final_params.primal();
            let symbols = match constellation.negation_map() {
                Some(neg) if sign_flipped(&estimate.h, &truth.h) => {
                    record.block.symbols.iter().map(|&s| neg[s]).collect()
                }
                _ => record.block.symbols.clone(),
            };
            loss_bmi(&result.final_beliefs, &symbols, constellation)
        }
    }
}

fn mean_loss<S: Real>(
    batch: &[TrainingRecord],
    schedule: &Schedule<S>,
    objective: Objective,
    constellation: &Constellation,
) -> Result<S> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let losses = batch
        .par_iter()
        .map(|r| block_loss(r, schedule, objective, constellation))
        .collect::<Result<Vec<S>>>()?;
    let mut acc = S::zero();
    for l in losses {
        acc += l;
    }
    let mean = acc / S::cst(batch.len() as f64);
    if !mean.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {:?}", mean.value())));
    }
    Ok(mean)
}

/// Mean batch loss of a plain (non-differentiated) schedule.
pub fn batch_loss(
    schedule: &Schedule,
    batch: &[TrainingRecord],
    objective: Objective,
    constellation: &Constellation,
) -> Result<f64> {
    mean_loss(batch, schedule, objective, constellation)
}

/// Estimates the gradient of the mean batch loss. `seed` drives the
/// perturbations in stochastic mode and is ignored otherwise.
pub fn gradient_estimate(
    schedule: &Schedule,
    batch: &[TrainingRecord],
    constellation: &Constellation,
    objective: Objective,
    mode: GradientMode,
    mask: ParamMask,
    seed: u64,
) -> Result<Gradient> {
    let dirs = weights(schedule, mask);
    let mut grad = Gradient {
        loss: f64::NAN,
        beta_em: vec![vec![0.0; schedule.memory() + 2]; schedule.iterations()],
        beta_bp: vec![0.0; schedule.iterations()],
    };
    let mut put = |w: Weight, g: f64| match w {
        Weight::Em(t, k) => grad.beta_em[t][k] = g,
        Weight::Bp(t) => grad.beta_bp[t] = g,
    };
    let loss = match mode {
        GradientMode::Exact => {
            let mut loss = None;
            for chunk in dirs.chunks(CHUNK) {
                let lifted = seeded_schedule(schedule, chunk)?;
                let l = mean_loss(batch, &lifted, objective, constellation)?;
                for (i, &w) in chunk.iter().enumerate() {
                    put(w, l.d[i]);
                }
                loss = Some(l.v);
            }
            match loss {
                Some(l) => l,
                None => mean_loss(batch, schedule, objective, constellation)?,
            }
        }
        GradientMode::Spsa {
            perturbation,
            repeats,
        } => {
            if !(perturbation > 0.0) || repeats == 0 {
                return Err(invalid("perturbation and repeats must be positive"));
            }
            let mut rng = substream(seed, 0x7370_7361, 0);
            let mut acc = vec![0.0; dirs.len()];
            for _ in 0..repeats {
                let mut plus = schedule.clone();
                let mut minus = schedule.clone();
                for &w in &dirs {
                    let delta = if rng.random::<bool>() { perturbation } else { -perturbation };
                    let b = get(schedule, w);
                    set(&mut plus, w, (b + delta).clamp(0.0, 1.0));
                    set(&mut minus, w, (b - delta).clamp(0.0, 1.0));
                }
                let diff = mean_loss(batch, &plus, objective, constellation)?
                    - mean_loss(batch, &minus, objective, constellation)?;
                for (a, &w) in acc.iter_mut().zip(&dirs) {
                    let span = get(&plus, w) - get(&minus, w);
                    if span != 0.0 {
                        *a += diff / span;
                    }
                }
            }
            for (&a, &w) in acc.iter().zip(&dirs) {
                put(w, a / repeats as f64);
            }
            mean_loss(batch, schedule, objective, constellation)?
        }
    };
    grad.loss = loss;
    let finite = grad.beta_em.iter().flatten().chain(&grad.beta_bp).all(|g| g.is_finite());
    if !finite {
        return Err(Error::NonFinite("gradient entry".into()));
    }
    Ok(grad)
}

fn seeded_schedule(schedule: &Schedule, chunk: &[Weight]) -> Result<Schedule<Dual<CHUNK>>> {
    let mut em: Vec<Vec<Dual<CHUNK>>> = schedule
        .beta_em()
        .iter()
        .map(|row| row.iter().map(|&b| Dual::constant(b)).collect())
        .collect();
    let mut bp: Vec<Dual<CHUNK>> = schedule.beta_bp().iter().map(|&b| Dual::constant(b)).collect();
    for (i, &w) in chunk.iter().enumerate() {
        match w {
            Weight::Em(t, k) => em[t][k] = Dual::variable(em[t][k].v, i),
            Weight::Bp(t) => bp[t] = Dual::variable(bp[t].v, i),
        }
    }
    Schedule::new(em, bp)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub batch: usize,
    /// Mean objective plus the weighted L1 penalty.
    pub loss: f64,
    pub k_prime: usize,
    pub validation_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub schedule: Schedule,
    pub log: Vec<TrainLogRow>,
}

/// Number of `beta_em` entries to prune for a budget of `k_em` raw updates.
pub fn prune_count(schedule: &Schedule, k_em: usize) -> usize {
    (schedule.iterations() * (schedule.memory() + 2)).saturating_sub(k_em)
}

/// Value of K' during batch `batch`: a staircase from 0 that steps up every
/// `ceil(batches / (target + 1))` batches.
pub fn k_prime_at(batch: usize, batches: usize, target: usize) -> usize {
    if target == 0 || batches == 0 {
        return 0;
    }
    let step = batches.div_ceil(target + 1);
    (batch / step).min(target)
}

/// Sets the `k_prime` smallest `beta_em` entries to zero.
pub fn prune(schedule: &mut Schedule, k_prime: usize) {
    for (t, k) in smallest_entries(schedule, k_prime) {
        schedule.beta_em_mut()[t][k] = 0.0;
    }
}

/// Mean sign-resolved squared error of the final estimate over `records`.
pub fn validation_mse(
    schedule: &Schedule,
    records: &[TrainingRecord],
    constellation: &Constellation,
) -> Result<f64> {
    batch_loss(schedule, records, Objective::MseH, constellation)
}

/// Adam on the mean batch loss plus `lambda * L1(K')`, clamping weights to
/// `[0, 1]` after every step and pruning to the budget at the end.
pub fn train_schedule(
    train: &TrainingSet,
    config: &TrainConfig,
    initial: Schedule,
) -> Result<TrainOutcome> {
    if config.batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    if !(config.step_size > 0.0) || !(config.lambda_l1 >= 0.0) {
        return Err(invalid("step size must be positive and lambda non-negative"));
    }
    let target = config.k_em_target.map_or(0, |k| prune_count(&initial, k));
    let dirs = weights(&initial, config.mask);
    let mut schedule = initial;
    let mut params: Vec<f64> = dirs.iter().map(|&w| get(&schedule, w)).collect();
    let mut adam = Adam::new(dirs.len(), config.step_size);
    let constellation = train.constellation();
    let mut log = Vec::with_capacity(config.batches);

    for b in 0..config.batches {
        let k_prime = k_prime_at(b, config.batches, target);
        let batch = train.batch(b, config.batch_size)?;
        let g = gradient_estimate(
            &schedule,
            &batch,
            constellation,
            config.objective,
            config.gradient_mode,
            config.mask,
            config.seed.wrapping_add(b as u64),
        )
        .map_err(|e| Error::NonFinite(format!("batch {b}: {e}")))?;
        let penalty = l1_penalty(&schedule, k_prime);
        let mut grad_em = g.beta_em.clone();
        if config.mask.em {
            for (t, k) in smallest_entries(&schedule, k_prime) {
                if schedule.beta_em()[t][k] > 0.0 {
                    grad_em[t][k] += config.lambda_l1;
                }
            }
        }
        let flat: Vec<f64> = dirs
            .iter()
            .map(|&w| match w {
                Weight::Em(t, k) => grad_em[t][k],
                Weight::Bp(t) => g.beta_bp[t],
            })
            .collect();
        adam.step(&mut params, &flat);
        for (p, &w) in params.iter_mut().zip(&dirs) {
            *p = p.clamp(0.0, 1.0);
            set(&mut schedule, w, *p);
        }
        let last = b + 1 == config.batches;
        let due = config.validate_every > 0 && (b + 1) % config.validate_every == 0;
        let validation = if !train.validation().is_empty() && (due || last) {
            Some(validation_mse(&schedule, train.validation(), constellation)?)
        } else {
            None
        };
        log.push(TrainLogRow {
            batch: b,
            loss: g.loss + config.lambda_l1 * penalty,
            k_prime,
            validation_mse: validation,
        });
    }
    prune(&mut schedule, target);
    Ok(TrainOutcome { schedule, log })
}

/// Writes the training log as CSV.
pub fn write_log_csv<W: Write>(rows: &[TrainLogRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "batch,loss,k_prime,validation_mse")?;
    for r in rows {
        let v = r.validation_mse.map_or(String::new(), |v| format!("{v:.7e}"));
        writeln!(out, "{},{:.7e},{},{}", r.batch, r.loss, r.k_prime, v)?;
    }
    Ok(())
}
