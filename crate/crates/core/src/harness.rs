//! Monte Carlo experiment runner: BER sweeps over SNR and estimation error
//! over EMBP iterations.
//!
//! Every block draws its channel, symbols, unit-variance noise and initializer
//! randomness from a private substream keyed by the block index, so results
//! do not depend on scheduling and the same realizations are reused at every
//! SNR point. Blocks run in parallel and are merged in index order.

use crate::baselines::{pilot_ls_estimate, trellis_map_detect, trellis_map_detect_known, PilotConfig};
use crate::bp::{detect, run_bp, run_bp_history, BeliefSet};
use crate::em::{make_schedule, Schedule, ScheduleKind};
use crate::embp::{initialize, run_embp, EmbpResult, InitStrategy};
use crate::error::{invalid, Error, Result};
use crate::model::{
    build_matched_stats, complex_normal, convolve, sample_channel, snr_to_sigma2, substream,
    ChannelParams, Constellation, TransmissionBlock,
};
use crate::train::{bmi, sign_flipped, squared_error};
use ini::Ini;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

const DOMAIN_BLOCK: u64 = 0x626c_6f63_6b;
const DOMAIN_INIT: u64 = 0x696e_6974;
const DOMAIN_ADVERSARIAL: u64 = 0x6164_7665_7273;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Detector {
    /// Blind EMBP.
    Embp,
    /// BP with the true channel.
    BpCoherent,
    /// BP run from scratch with the final EMBP estimate.
    BpEmbpEstimate,
    /// Trellis MAP with the true channel.
    MapCoherent,
    /// Pilot least-squares estimate followed by trellis MAP; the preamble
    /// holds `fraction * N` known symbols.
    MapPilot { fraction: f64 },
}

impl Detector {
    fn is_blind(self) -> bool {
        matches!(self, Self::Embp | Self::BpEmbpEstimate)
    }
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "embp" => Ok(Self::Embp),
            "bp_coherent" => Ok(Self::BpCoherent),
            "bp_embp" => Ok(Self::BpEmbpEstimate),
            "map_coherent" => Ok(Self::MapCoherent),
            other => {
                let frac = other
                    .strip_prefix("map_pilot:")
                    .ok_or_else(|| invalid(format!("unknown detector `{other}`")))?;
                let fraction: f64 = frac
                    .parse()
                    .map_err(|_| invalid(format!("bad pilot fraction `{frac}`")))?;
                if !(fraction > 0.0 && fraction < 1.0) {
                    return Err(invalid(format!("pilot fraction {fraction} outside (0, 1)")));
                }
                Ok(Self::MapPilot { fraction })
            }
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Embp => f.write_str("embp"),
            Self::BpCoherent => f.write_str("bp_coherent"),
            Self::BpEmbpEstimate => f.write_str("bp_embp"),
            Self::MapCoherent => f.write_str("map_coherent"),
            Self::MapPilot { fraction } => write!(f, "map_pilot:{fraction}"),
        }
    }
}

/// Where the EMBP schedule comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleSource {
    /// Built-in schedule; `iterations` defaults to `3 (L + 2)`.
    Named {
        kind: ScheduleKind,
        iterations: Option<usize>,
    },
    File(PathBuf),
    Inline(Schedule),
}

impl ScheduleSource {
    pub fn resolve(&self, memory: usize) -> Result<Schedule> {
        let schedule = match self {
            Self::Named { kind, iterations } => {
                make_schedule(*kind, iterations.unwrap_or(3 * (memory + 2)), memory)?
            }
            Self::File(path) => Schedule::load(path)?,
            Self::Inline(s) => s.clone(),
        };
        if schedule.memory() != memory {
            return Err(invalid(format!(
                "schedule is for memory {}, experiment uses {memory}",
                schedule.memory()
            )));
        }
        Ok(schedule)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub block_len: usize,
    pub memory: usize,
    pub constellation: Constellation,
    pub snr_db: Vec<f64>,
    pub blocks: usize,
    pub detectors: Vec<Detector>,
    pub schedule: ScheduleSource,
    pub init: InitStrategy,
    pub seed: u64,
    /// Fixed channels cycled through by block index instead of random draws.
    pub channel_set: Option<Vec<ChannelParams>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            block_len: 100,
            memory: 2,
            constellation: Constellation::bpsk(),
            snr_db: vec![0.0, 3.0, 6.0, 9.0, 12.0],
            blocks: 10_000,
            detectors: vec![
                Detector::Embp,
                Detector::BpCoherent,
                Detector::BpEmbpEstimate,
                Detector::MapCoherent,
                Detector::MapPilot { fraction: 0.05 },
                Detector::MapPilot { fraction: 0.1 },
            ],
            schedule: ScheduleSource::Named {
                kind: ScheduleKind::Serial,
                iterations: None,
            },
            init: InitStrategy::default(),
            seed: 0,
            channel_set: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl ExperimentConfig {
    /// Parses an INI document on top of the defaults.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut config = Self::default();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let full = match section {
                    Some(s) => format!("{s}.{key}"),
                    None => key.to_string(),
                };
                config.set(&full, value)?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_ini_str(&text)
    }

    /// Sets one `section.key` entry; used for config files and flag
    /// overrides alike.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "experiment.block_len" => self.block_len = parse_num(key, v)?,
            "experiment.memory" => self.memory = parse_num(key, v)?,
            "experiment.constellation" => self.constellation = Constellation::by_name(v)?,
            "experiment.snr_db" => self.snr_db = parse_list(key, v)?,
            "experiment.blocks" => self.blocks = parse_num(key, v)?,
            "experiment.seed" => self.seed = parse_num(key, v)?,
            "detectors.list" => {
                self.detectors = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "schedule.kind" => {
                self.schedule = match v {
                    "file" => match &self.schedule {
                        ScheduleSource::File(_) => self.schedule.clone(),
                        _ => return Err(Error::Config("schedule.kind = file needs schedule.file".into())),
                    },
                    name => {
                        let kind: ScheduleKind = name.parse()?;
                        let iterations = match &self.schedule {
                            ScheduleSource::Named { iterations, .. } => *iterations,
                            _ => None,
                        };
                        ScheduleSource::Named { kind, iterations }
                    }
                }
            }
            "schedule.iterations" => {
                let t: usize = parse_num(key, v)?;
                let kind = match &self.schedule {
                    ScheduleSource::Named { kind, .. } => *kind,
                    _ => ScheduleKind::Serial,
                };
                self.schedule = ScheduleSource::Named {
                    kind,
                    iterations: Some(t),
                };
            }
            "schedule.file" => self.schedule = ScheduleSource::File(PathBuf::from(v)),
            "init.kind" => {
                self.init = match v {
                    "impulse_power" => InitStrategy::ImpulsePower { alpha: 0.1 },
                    "genie_perturbed" => InitStrategy::GeniePerturbed { scale: 0.05 },
                    other => return Err(Error::Config(format!("unknown init kind `{other}`"))),
                }
            }
            "init.alpha" => match &mut self.init {
                InitStrategy::ImpulsePower { alpha } => *alpha = parse_num(key, v)?,
                _ => return Err(Error::Config("init.alpha needs init.kind = impulse_power".into())),
            },
            "init.scale" => match &mut self.init {
                InitStrategy::GeniePerturbed { scale } => *scale = parse_num(key, v)?,
                _ => return Err(Error::Config("init.scale needs init.kind = genie_perturbed".into())),
            },
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_len == 0 {
            return Err(Error::Config("block_len must be positive".into()));
        }
        if self.blocks == 0 {
            return Err(Error::Config("blocks must be at least 1".into()));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("snr grid must be nonempty and finite".into()));
        }
        if let Some(set) = &self.channel_set {
            if set.is_empty() || set.iter().any(|c| c.memory() != self.memory) {
                return Err(Error::Config("channel set empty or of the wrong memory".into()));
            }
        }
        Ok(())
    }

    /// The resolved configuration as INI text, loadable by [`Self::from_ini_str`].
    pub fn to_ini(&self) -> String {
        let snr: Vec<String> = self.snr_db.iter().map(|s| s.to_string()).collect();
        let det: Vec<String> = self.detectors.iter().map(|d| d.to_string()).collect();
        let mut out = format!(
            "[experiment]\nblock_len = {}\nmemory = {}\nconstellation = {}\nsnr_db = {}\nblocks = {}\nseed = {}\n\n[detectors]\nlist = {}\n\n[schedule]\n",
            self.block_len,
            self.memory,
            self.constellation.name(),
            snr.join(", "),
            self.blocks,
            self.seed,
            det.join(", "),
        );
        match &self.schedule {
            ScheduleSource::Named { kind, iterations } => {
                out += &format!("kind = {kind}\n");
                let t = iterations.unwrap_or(3 * (self.memory + 2));
                out += &format!("iterations = {t}\n");
            }
            ScheduleSource::File(p) => out += &format!("file = {}\nkind = file\n", p.display()),
            ScheduleSource::Inline(s) => {
                out += &format!("; inline schedule with {} iterations\n", s.iterations())
            }
        }
        out += "\n[init]\n";
        match &self.init {
            InitStrategy::ImpulsePower { alpha } => {
                out += &format!("kind = impulse_power\nalpha = {alpha}\n")
            }
            InitStrategy::GeniePerturbed { scale } => {
                out += &format!("kind = genie_perturbed\nscale = {scale}\n")
            }
            InitStrategy::External(_) => out += "; external initial estimate\n",
        }
        if let Some(set) = &self.channel_set {
            out += &format!("; fixed channel set of {} channels\n", set.len());
        }
        out
    }
}

/// Randomness of one block that is shared across SNR points.
struct BlockDraw {
    channel: ChannelParams,
    symbols: Vec<usize>,
    unit_noise: Vec<Complex64>,
}

fn draw_block(config: &ExperimentConfig, index: usize) -> BlockDraw {
    let mut rng = substream(config.seed, DOMAIN_BLOCK, index as u64);
    let channel = match &config.channel_set {
        Some(set) => set[index % set.len()].clone(),
        None => sample_channel(config.memory, &mut rng),
    };
    let symbols = config.constellation.random_symbols(config.block_len, &mut rng);
    let unit_noise = (0..config.block_len + config.memory)
        .map(|_| complex_normal(&mut rng))
        .collect();
    BlockDraw {
        channel,
        symbols,
        unit_noise,
    }
}

fn realize(draw: &BlockDraw, snr_db: f64, constellation: &Constellation) -> Result<TransmissionBlock> {
    let n = draw.symbols.len();
    let sigma2 = snr_to_sigma2(snr_db, &draw.channel.h, constellation, n)?;
    let truth = draw.channel.clone().with_sigma2(sigma2);
    let scale = sigma2.sqrt();
    let observation = convolve(&truth.h, &constellation.values(&draw.symbols))
        .into_iter()
        .zip(&draw.unit_noise)
        .map(|(y, w)| y + w * scale)
        .collect();
    Ok(TransmissionBlock {
        symbols: draw.symbols.clone(),
        observation,
        truth,
    })
}

fn initial_estimate(config: &ExperimentConfig, block: &TransmissionBlock, index: usize) -> Result<ChannelParams> {
    let mut rng = substream(config.seed, DOMAIN_INIT, index as u64);
    initialize(&config.init, &block.observation, config.memory, Some(&block.truth), &mut rng)
}

/// Bit errors between two symbol indices under a Gray labeling.
pub fn bit_errors(a: usize, b: usize) -> u32 {
    ((a ^ (a >> 1)) ^ (b ^ (b >> 1))).count_ones()
}

/// Result of one detector on one block.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectorOutcome {
    pub bit_errors: u64,
    pub bits: u64,
    /// Sign-resolved `||h_hat - h||^2`, for detectors that estimate `h`.
    pub squared_error: Option<f64>,
    pub bmi: f64,
}

/// Per-block record, one entry per configured detector.
#[derive(Clone, Debug, Serialize)]
pub struct BlockRecord {
    pub snr_db: f64,
    pub block: usize,
    pub detectors: Vec<String>,
    pub outcomes: Vec<std::result::Result<DetectorOutcome, String>>,
}

fn score(
    decisions: &[usize],
    beliefs: &BeliefSet,
    symbols: &[usize],
    positions: std::ops::Range<usize>,
    constellation: &Constellation,
    squared_error: Option<f64>,
) -> Result<DetectorOutcome> {
    let bits_per = constellation.bits_per_symbol() as u64;
    let errors = positions
        .clone()
        .map(|j| bit_errors(decisions[j], symbols[j]) as u64)
        .sum();
    let m = constellation.len();
    let rows: Vec<f64> = positions.clone().flat_map(|j| beliefs.log_row(j).to_vec()).collect();
    let sub = BeliefSet::from_log_weights(positions.len(), m, rows)?;
    Ok(DetectorOutcome {
        bit_errors: errors,
        bits: positions.len() as u64 * bits_per,
        squared_error,
        bmi: bmi(&sub, &symbols[positions], constellation)?,
    })
}

/// Maps decisions, beliefs and the estimate through the global sign flip when
/// the estimate is closer to `-h`.
fn resolve_sign(
    estimate: &ChannelParams,
    truth: &ChannelParams,
    decisions: Vec<usize>,
    beliefs: BeliefSet,
    constellation: &Constellation,
) -> Result<(Vec<usize>, BeliefSet)> {
    let Some(neg) = constellation.negation_map() else {
        return Ok((decisions, beliefs));
    };
    if !sign_flipped(&estimate.h, &truth.h) {
        return Ok((decisions, beliefs));
    }
    let m = constellation.len();
    let rows: Vec<f64> = (0..beliefs.len())
        .flat_map(|j| {
            let row = beliefs.log_row(j);
            (0..m).map(|a| row[neg[a]]).collect::<Vec<_>>()
        })
        .collect();
    let flipped = BeliefSet::from_log_weights(beliefs.len(), m, rows)?;
    Ok((decisions.into_iter().map(|d| neg[d]).collect(), flipped))
}

fn run_block(
    config: &ExperimentConfig,
    schedule: &Schedule,
    block: &TransmissionBlock,
    index: usize,
) -> Vec<std::result::Result<DetectorOutcome, String>> {
    let c = &config.constellation;
    let n = config.block_len;
    let truth = &block.truth;
    let y = &block.observation;
    let needs_embp = config.detectors.iter().any(|d| d.is_blind());
    let embp: Option<Result<EmbpResult>> = needs_embp.then(|| {
        let initial = initial_estimate(config, block, index)?;
        run_embp(y, c, schedule, initial, false)
    });
    let one = |d: Detector| -> Result<DetectorOutcome> {
        match d {
            Detector::Embp | Detector::BpEmbpEstimate => {
                let res = embp.as_ref().expect("EMBP computed for blind detectors");
                let res = res.as_ref().map_err(|e| Error::NonFinite(e.to_string()))?;
                let estimate = &res.final_params;
                let beliefs = if d == Detector::Embp {
                    res.final_beliefs.clone()
                } else {
                    let stats = build_matched_stats(estimate, y)?;
                    run_bp(&stats, c, schedule.beta_bp())?
                };
                let (dec, beliefs) = resolve_sign(estimate, truth, detect(&beliefs), beliefs, c)?;
                let se = squared_error(&estimate.h, &truth.h);
                score(&dec, &beliefs, &block.symbols, 0..n, c, Some(se))
            }
            Detector::BpCoherent => {
                let stats = build_matched_stats(truth, y)?;
                let beliefs = run_bp(&stats, c, schedule.beta_bp())?;
                score(&detect(&beliefs), &beliefs, &block.symbols, 0..n, c, None)
            }
            Detector::MapCoherent => {
                let beliefs = trellis_map_detect(y, truth, c)?;
                score(&detect(&beliefs), &beliefs, &block.symbols, 0..n, c, None)
            }
            Detector::MapPilot { fraction } => {
                let count = PilotConfig::count(fraction, n, config.memory)?;
                // the transmitted symbols are uniform, so treating the first
                // `count` of them as the pilot preamble is a valid draw
                let pilots = PilotConfig {
                    symbols: block.symbols[..count].to_vec(),
                };
                let estimate = pilot_ls_estimate(y, &pilots, c, config.memory)?;
                let beliefs = trellis_map_detect_known(y, &estimate, c, &pilots.known_mask(n))?;
                let se = squared_error(&estimate.h, &truth.h);
                score(&detect(&beliefs), &beliefs, &block.symbols, count..n, c, Some(se))
            }
        }
    };
    config
        .detectors
        .iter()
        .map(|&d| one(d).map_err(|e| e.to_string()))
        .collect()
}

/// Aggregate of one detector at one SNR point.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorSummary {
    pub detector: Detector,
    pub bit_errors: u64,
    pub bits: u64,
    pub ber: f64,
    /// Mean squared estimation error, for estimating detectors.
    pub mse: Option<f64>,
    pub bmi: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub snr_db: f64,
    pub blocks: usize,
    pub detectors: Vec<DetectorSummary>,
    /// Not written to CSV, which must be reproducible byte for byte.
    pub wall_time: Duration,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    /// Per-block records, when requested.
    pub records: Option<Vec<BlockRecord>>,
}

/// BER sweep over the SNR grid for every configured detector.
pub fn run_ber_sweep(config: &ExperimentConfig, keep_records: bool) -> Result<SweepOutput> {
    config.validate()?;
    let schedule = config.schedule.resolve(config.memory)?;
    let draws: Vec<BlockDraw> = (0..config.blocks)
        .into_par_iter()
        .map(|b| draw_block(config, b))
        .collect();
    let mut rows = Vec::with_capacity(config.snr_db.len());
    let mut records = keep_records.then(Vec::new);
    for &snr in &config.snr_db {
        let start = Instant::now();
        let outcomes = draws
            .par_iter()
            .enumerate()
            .map(|(b, draw)| {
                let block = realize(draw, snr, &config.constellation)?;
                Ok(run_block(config, &schedule, &block, b))
            })
            .collect::<Result<Vec<_>>>()?;
        let detectors = config
            .detectors
            .iter()
            .enumerate()
            .map(|(i, &d)| summarize(d, outcomes.iter().map(|o| &o[i])))
            .collect();
        rows.push(ResultRow {
            snr_db: snr,
            blocks: config.blocks,
            detectors,
            wall_time: start.elapsed(),
        });
        if let Some(r) = records.as_mut() {
            let names: Vec<String> = config.detectors.iter().map(|d| d.to_string()).collect();
            r.extend(outcomes.into_iter().enumerate().map(|(b, o)| BlockRecord {
                snr_db: snr,
                block: b,
                detectors: names.clone(),
                outcomes: o,
            }));
        }
    }
    Ok(SweepOutput { rows, records })
}

fn summarize<'a>(
    detector: Detector,
    outcomes: impl Iterator<Item = &'a std::result::Result<DetectorOutcome, String>>,
) -> DetectorSummary {
    let (mut errors, mut bits, mut failures, mut ok) = (0u64, 0u64, 0usize, 0usize);
    let (mut se_sum, mut se_n, mut bmi_sum) = (0.0, 0usize, 0.0);
    for o in outcomes {
        match o {
            Ok(o) => {
                ok += 1;
                errors += o.bit_errors;
                bits += o.bits;
                bmi_sum += o.bmi;
                if let Some(se) = o.squared_error {
                    se_sum += se;
                    se_n += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    DetectorSummary {
        detector,
        bit_errors: errors,
        bits,
        ber: if bits > 0 { errors as f64 / bits as f64 } else { f64::NAN },
        mse: (se_n > 0).then(|| se_sum / se_n as f64),
        bmi: if ok > 0 { bmi_sum / ok as f64 } else { f64::NAN },
        failures,
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.7e}")
}

/// Writes sweep rows as CSV: `snr_db,blocks` followed by
/// `<detector>_{ber,bit_errors,bits,mse,bmi,failures}` per detector.
pub fn write_sweep_csv<W: Write>(rows: &[ResultRow], mut out: W) -> std::io::Result<()> {
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let mut header = vec!["snr_db".to_string(), "blocks".to_string()];
    for d in &first.detectors {
        for col in ["ber", "bit_errors", "bits", "mse", "bmi", "failures"] {
            header.push(format!("{}_{col}", d.detector));
        }
    }
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        let mut cells = vec![fmt_float(r.snr_db), r.blocks.to_string()];
        for d in &r.detectors {
            cells.push(fmt_float(d.ber));
            cells.push(d.bit_errors.to_string());
            cells.push(d.bits.to_string());
            cells.push(d.mse.map_or(String::new(), fmt_float));
            cells.push(fmt_float(d.bmi));
            cells.push(d.failures.to_string());
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Writes per-block records as JSON lines.
pub fn write_block_records<W: Write>(records: &[BlockRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    Ok(())
}

/// Squared estimation error after every EMBP iteration, per schedule.
#[derive(Clone, Debug)]
pub struct MseTrace {
    pub snr_db: Vec<f64>,
    pub names: Vec<String>,
    /// `samples[snr][schedule][t][block]`; NaN marks a failed run.
    pub samples: Vec<Vec<Vec<Vec<f64>>>>,
}

fn mean_stderr(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::NAN, 1);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt(), n)
}

impl MseTrace {
    /// Mean and standard error of the squared error at iteration `t`.
    pub fn at(&self, snr: usize, schedule: usize, t: usize) -> (f64, f64) {
        let (m, s, _) = mean_stderr(self.samples[snr][schedule][t].iter().copied());
        (m, s)
    }

    /// Mean and standard error of the per-block difference
    /// `error(a, ta) - error(b, tb)`.
    pub fn paired_difference(&self, snr: usize, a: (usize, usize), b: (usize, usize)) -> (f64, f64) {
        let xa = &self.samples[snr][a.0][a.1];
        let xb = &self.samples[snr][b.0][b.1];
        let (m, s, _) = mean_stderr(xa.iter().zip(xb).map(|(x, y)| x - y));
        (m, s)
    }

    pub fn failures(&self, snr: usize, schedule: usize) -> usize {
        self.samples[snr][schedule]
            .last()
            .map_or(0, |v| v.iter().filter(|x| !x.is_finite()).count())
    }

    /// CSV with one row per `(snr, t)` and mean/stderr columns per schedule.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["snr_db".to_string(), "t".to_string()];
        for n in &self.names {
            header.push(format!("{n}_mse"));
            header.push(format!("{n}_stderr"));
        }
        writeln!(out, "{}", header.join(","))?;
        for (i, snr) in self.snr_db.iter().enumerate() {
            let t_max = self.samples[i].iter().map(|s| s.len()).max().unwrap_or(0);
            for t in 0..t_max {
                let mut cells = vec![fmt_float(*snr), t.to_string()];
                for s in 0..self.names.len() {
                    if t < self.samples[i][s].len() {
                        let (m, e) = self.at(i, s, t);
                        cells.push(fmt_float(m));
                        cells.push(fmt_float(e));
                    } else {
                        cells.push(String::new());
                        cells.push(String::new());
                    }
                }
                writeln!(out, "{}", cells.join(","))?;
            }
        }
        Ok(())
    }
}

/// Runs every schedule on the same blocks and initial estimates and records
/// the sign-resolved squared error of `h_hat^(t)` for `t = 0..=T`.
pub fn run_mse_over_iters(config: &ExperimentConfig, schedules: &[(String, Schedule)]) -> Result<MseTrace> {
    config.validate()?;
    if schedules.is_empty() {
        return Err(invalid("no schedules to trace"));
    }
    if let Some((name, _)) = schedules.iter().find(|(_, s)| s.memory() != config.memory) {
        return Err(invalid(format!("schedule `{name}` has the wrong memory")));
    }
    let draws: Vec<BlockDraw> = (0..config.blocks)
        .into_par_iter()
        .map(|b| draw_block(config, b))
        .collect();
    let mut samples = Vec::with_capacity(config.snr_db.len());
    for &snr in &config.snr_db {
        let per_block: Vec<Vec<Vec<f64>>> = draws
            .par_iter()
            .enumerate()
            .map(|(b, draw)| -> Result<Vec<Vec<f64>>> {
                let block = realize(draw, snr, &config.constellation)?;
                let initial = initial_estimate(config, &block, b)?;
                Ok(schedules
                    .iter()
                    .map(|(_, s)| match run_embp(&block.observation, &config.constellation, s, initial.clone(), false) {
                        Ok(res) => res
                            .trajectory
                            .estimates
                            .iter()
                            .map(|e| squared_error(&e.h, &block.truth.h))
                            .collect(),
                        Err(_) => vec![f64::NAN; s.iterations() + 1],
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        // transpose to [schedule][t][block]
        let grid = schedules
            .iter()
            .enumerate()
            .map(|(s, (_, sch))| {
                (0..=sch.iterations())
                    .map(|t| per_block.iter().map(|b| b[s][t]).collect())
                    .collect()
            })
            .collect();
        samples.push(grid);
    }
    Ok(MseTrace {
        snr_db: config.snr_db.clone(),
        names: schedules.iter().map(|(n, _)| n.clone()).collect(),
        samples,
    })
}

/// Search for channels on which plain coherent BP fails to settle.
#[derive(Clone, Debug)]
pub struct AdversarialSearch {
    pub block_len: usize,
    pub memory: usize,
    pub constellation: Constellation,
    pub snr_db: f64,
    pub candidates: usize,
    pub iterations: usize,
    /// A channel qualifies when some belief still moves by more than this
    /// between the last two iterations.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for AdversarialSearch {
    fn default() -> Self {
        Self {
            block_len: 100,
            memory: 2,
            constellation: Constellation::bpsk(),
            snr_db: 12.0,
            candidates: 2000,
            iterations: 50,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

/// Final belief change of `iterations` undamped BP iterations.
pub fn bp_residual_change(block: &TransmissionBlock, constellation: &Constellation, iterations: usize) -> Result<f64> {
    let stats = build_matched_stats(&block.truth, &block.observation)?;
    let history = run_bp_history(&stats, constellation, &vec![1.0; iterations])?;
    let k = history.len();
    Ok(history[k - 1].max_change(&history[k - 2]))
}

/// Channels (unit energy) whose coherent BP beliefs are still changing after
/// `iterations` undamped iterations on one test block at `snr_db`.
pub fn adversarial_channels(search: &AdversarialSearch) -> Result<Vec<ChannelParams>> {
    if search.iterations < 1 {
        return Err(invalid("need at least one BP iteration"));
    }
    let found = (0..search.candidates)
        .into_par_iter()
        .map(|i| -> Result<Option<ChannelParams>> {
            let mut rng = substream(search.seed, DOMAIN_ADVERSARIAL, i as u64);
            let mut channel = sample_channel(search.memory, &mut rng);
            channel.sigma2 = snr_to_sigma2(search.snr_db, &channel.h, &search.constellation, search.block_len)?;
            let symbols = search.constellation.random_symbols(search.block_len, &mut rng);
            let block = crate::model::transmit(&channel, symbols, &search.constellation, &mut rng)?;
            let change = bp_residual_change(&block, &search.constellation, search.iterations)?;
            Ok((change > search.tolerance).then_some(channel))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(found.into_iter().flatten().collect())
}
