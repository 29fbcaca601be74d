//! Block-fading ISI channel model, constellations and matched-filter statistics.

use crate::error::{invalid, Result};
use crate::scalar::{lift, primal, Real};
use num_complex::{Complex, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Symbol alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    name: String,
    points: Vec<Complex64>,
}

impl Constellation {
    pub fn bpsk() -> Self {
        Self {
            name: "bpsk".into(),
            points: vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
        }
    }

    /// Unit-energy QPSK.
    pub fn qpsk() -> Self {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            name: "qpsk".into(),
            points: vec![
                Complex64::new(a, a),
                Complex64::new(-a, a),
                Complex64::new(-a, -a),
                Complex64::new(a, -a),
            ],
        }
    }

    pub fn from_points(name: &str, points: Vec<Complex64>) -> Result<Self> {
        if points.len() < 2 || !points.len().is_power_of_two() {
            return Err(invalid(format!(
                "constellation size must be a power of two >= 2, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.re.is_finite() || !p.im.is_finite()) {
            return Err(invalid("constellation points must be finite"));
        }
        Ok(Self {
            name: name.into(),
            points,
        })
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "bpsk" => Ok(Self::bpsk()),
            "qpsk" => Ok(Self::qpsk()),
            other => Err(invalid(format!("unknown constellation '{other}'"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Complex64 {
        self.points[index]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bits_per_symbol(&self) -> u32 {
        self.points.len().trailing_zeros()
    }

    /// E|c|^2 under a uniform prior.
    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64
    }

    /// Index of the point equal to `-c_i` for every `i`, if the alphabet is
    /// closed under negation.
    pub fn negation_map(&self) -> Option<Vec<usize>> {
        self.points
            .iter()
            .map(|p| {
                self.points
                    .iter()
                    .position(|q| (*q + *p).norm() < 1e-12)
            })
            .collect()
    }

    pub fn random_symbols<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.len())).collect()
    }

    pub fn values(&self, symbols: &[usize]) -> Vec<Complex64> {
        symbols.iter().map(|&s| self.points[s]).collect()
    }
}

/// Parameters of one block: impulse response and complex noise variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelParams<S: Real = f64> {
    pub h: Vec<Complex<S>>,
    pub sigma2: S,
}

impl<S: Real> ChannelParams<S> {
    pub fn new(h: Vec<Complex<S>>, sigma2: S) -> Result<Self> {
        if h.is_empty() {
            return Err(invalid("impulse response must have at least one tap"));
        }
        if !(sigma2.value() > 0.0) {
            return Err(invalid(format!("sigma2 must be > 0, got {:e}", sigma2.value())));
        }
        Ok(Self { h, sigma2 })
    }

    /// Channel memory L.
    pub fn memory(&self) -> usize {
        self.h.len() - 1
    }

    pub fn primal(&self) -> ChannelParams<f64> {
        ChannelParams {
            h: self.h.iter().map(|&c| primal(c)).collect(),
            sigma2: self.sigma2.value(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.sigma2.is_finite() && self.h.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

impl ChannelParams<f64> {
    pub fn lift<S: Real>(&self) -> ChannelParams<S> {
        ChannelParams {
            h: self.h.iter().map(|&c| lift(c)).collect(),
            sigma2: S::cst(self.sigma2),
        }
    }

    pub fn energy(&self) -> f64 {
        self.h.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = sigma2;
        self
    }
}

/// One transmitted block together with its ground truth.
#[derive(Clone, Debug)]
pub struct TransmissionBlock {
    /// Constellation indices of the transmitted symbols.
    pub symbols: Vec<usize>,
    pub observation: Vec<Complex64>,
    pub truth: ChannelParams,
}

/// Matched-filter output `x = H^H y` and Gram matrix `G = H^H H` (band form).
#[derive(Clone, Debug)]
pub struct MatchedStats<S: Real = f64> {
    pub x: Vec<Complex<S>>,
    /// `band[d][m] = G[m + d][m]`, `d = 0..=L`.
    band: Vec<Vec<Complex<S>>>,
    pub sigma2: S,
}

impl<S: Real> MatchedStats<S> {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn memory(&self) -> usize {
        self.band.len() - 1
    }

    /// Entry `G[n][m]`; zero outside the band.
    pub fn g(&self, n: usize, m: usize) -> Complex<S> {
        let l = self.memory();
        if n >= m {
            let d = n - m;
            if d > l {
                Complex::new(S::zero(), S::zero())
            } else {
                self.band[d][m]
            }
        } else {
            let d = m - n;
            if d > l {
                Complex::new(S::zero(), S::zero())
            } else {
                self.band[d][n].conj()
            }
        }
    }

    pub fn diag(&self, n: usize) -> S {
        self.band[0][n].re
    }
}

/// Draws i.i.d. CN(0,1) taps and normalizes them to unit energy. `sigma2` is
/// left at 1 and set separately from the target SNR.
pub fn sample_channel<R: Rng + ?Sized>(memory: usize, rng: &mut R) -> ChannelParams {
    loop {
        let h: Vec<Complex64> = (0..=memory).map(|_| complex_normal(rng)).collect();
        let norm = h.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if norm > 1e-300 {
            return ChannelParams {
                h: h.into_iter().map(|c| c / norm).collect(),
                sigma2: 1.0,
            };
        }
    }
}

/// Independent generator for item `index` of stream family `domain` under
/// `seed`. Results never depend on the order in which items are produced.
pub fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Circularly-symmetric CN(0, 1) sample.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Noise variance realizing `snr_db` for a block of `n` symbols.
pub fn snr_to_sigma2(
    snr_db: f64,
    h: &[Complex64],
    constellation: &Constellation,
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(invalid("block length must be positive"));
    }
    if !snr_db.is_finite() {
        return Err(invalid("snr must be finite"));
    }
    let energy: f64 = h.iter().map(|c| c.norm_sqr()).sum();
    if !(energy > 0.0) {
        return Err(invalid("channel has zero energy"));
    }
    let l = h.len() - 1;
    let snr = 10f64.powf(snr_db / 10.0);
    Ok(energy * n as f64 * constellation.mean_energy() / ((n + l) as f64 * snr))
}

/// Receiver SNR in dB for the given channel and noise variance.
pub fn snr_of(h: &[Complex64], sigma2: f64, constellation: &Constellation, n: usize) -> f64 {
    let energy: f64 = h.iter().map(|c| c.norm_sqr()).sum();
    let l = h.len() - 1;
    let snr = energy * n as f64 * constellation.mean_energy() / ((n + l) as f64 * sigma2);
    10.0 * snr.log10()
}

/// Noiseless channel output `Hc`, length `N + L`.
pub fn convolve(h: &[Complex64], values: &[Complex64]) -> Vec<Complex64> {
    let n = values.len();
    let l = h.len() - 1;
    let mut y = vec![Complex64::new(0.0, 0.0); n + l];
    for (j, &c) in values.iter().enumerate() {
        for (k, &hk) in h.iter().enumerate() {
            y[j + k] += hk * c;
        }
    }
    y
}

/// Sends `symbols` through `params`, adding CN(0, sigma2) noise.
pub fn transmit<R: Rng + ?Sized>(
    params: &ChannelParams,
    symbols: Vec<usize>,
    constellation: &Constellation,
    rng: &mut R,
) -> Result<TransmissionBlock> {
    if symbols.is_empty() {
        return Err(invalid("cannot transmit an empty block"));
    }
    let mut y = convolve(&params.h, &constellation.values(&symbols));
    let scale = params.sigma2.sqrt();
    for v in y.iter_mut() {
        *v += complex_normal(rng) * scale;
    }
    Ok(TransmissionBlock {
        symbols,
        observation: y,
        truth: params.clone(),
    })
}

/// Builds `x = H^H y` and `G = H^H H` for the impulse response in `params`.
pub fn build_matched_stats<S: Real>(
    params: &ChannelParams<S>,
    observation: &[Complex64],
) -> Result<MatchedStats<S>> {
    let l = params.memory();
    if observation.len() <= l {
        return Err(invalid(format!(
            "observation length {} too short for memory {l}",
            observation.len()
        )));
    }
    let n = observation.len() - l;
    let h = &params.h;
    let x = (0..n)
        .map(|j| {
            let mut acc = Complex::new(S::zero(), S::zero());
            for (k, hk) in h.iter().enumerate() {
                acc = acc + hk.conj() * lift::<S>(observation[j + k]);
            }
            acc
        })
        .collect();
    let band = (0..=l)
        .map(|d| {
            let mut g = Complex::new(S::zero(), S::zero());
            for k in 0..=(l - d) {
                g = g + h[k].conj() * h[k + d];
            }
            if d == 0 {
                g.im = S::zero();
            }
            vec![g; n.saturating_sub(d)]
        })
        .collect();
    Ok(MatchedStats {
        x,
        band,
        sigma2: params.sigma2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Dense (N+L) x N Toeplitz channel matrix.
    fn dense_h(h: &[Complex64], n: usize) -> Vec<Vec<Complex64>> {
        let l = h.len() - 1;
        let mut m = vec![vec![c(0.0, 0.0); n]; n + l];
        for j in 0..n {
            for k in 0..=l {
                m[j + k][j] = h[k];
            }
        }
        m
    }

    #[test]
    fn sampled_channels_have_unit_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h0 = sample_channel(0, &mut rng);
        assert!((h0.h[0].norm() - 1.0).abs() < 1e-12);
        for _ in 0..20 {
            let p = sample_channel(2, &mut rng);
            assert_eq!(p.h.len(), 3);
            assert!((p.energy() - 1.0).abs() < 1e-12);
        }
        let a = sample_channel(3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_channel(3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn snr_conversion() {
        let bpsk = Constellation::bpsk();
        let s = snr_to_sigma2(0.0, &[c(1.0, 0.0)], &bpsk, 100).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        let s = snr_to_sigma2(10.0, &[c(1.0, 0.0), c(0.0, 0.0)], &bpsk, 100).unwrap();
        assert!((s - 100.0 / (101.0 * 10.0)).abs() < 1e-15);
        assert!(snr_to_sigma2(3.0, &[c(1.0, 0.0)], &bpsk, 0).is_err());
        let h = [c(0.3, 0.1), c(-0.7, 0.2), c(0.1, 0.5)];
        for &db in &[-4.0, 0.0, 7.5, 30.0] {
            let s2 = snr_to_sigma2(db, &h, &bpsk, 37).unwrap();
            assert!((snr_of(&h, s2, &bpsk, 37) - db).abs() < 1e-10);
        }
    }

    #[test]
    fn noiseless_transmission() {
        let bpsk = Constellation::bpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ChannelParams::new(vec![c(1.0, 0.0)], 1e-300).unwrap();
        let b = transmit(&p, vec![0, 1], &bpsk, &mut rng).unwrap();
        assert!((b.observation[0] - c(1.0, 0.0)).norm() < 1e-12);
        assert!((b.observation[1] - c(-1.0, 0.0)).norm() < 1e-12);
        let p = ChannelParams::new(vec![c(1.0, 0.0), c(0.5, 0.0)], 1e-300).unwrap();
        let b = transmit(&p, vec![0, 0], &bpsk, &mut rng).unwrap();
        let want = [c(1.0, 0.0), c(1.5, 0.0), c(0.5, 0.0)];
        for (y, w) in b.observation.iter().zip(want.iter()) {
            assert!((y - w).norm() < 1e-12);
        }
        assert!(transmit(&p, vec![], &bpsk, &mut rng).is_err());
    }

    #[test]
    fn noise_variance_matches_sigma2() {
        let bpsk = Constellation::bpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma2 = 0.37;
        let p = ChannelParams::new(vec![c(0.0, 0.0)], sigma2).unwrap();
        let n = 1_000_000;
        let b = transmit(&p, vec![0; n], &bpsk, &mut rng).unwrap();
        let (mut re, mut im) = (0.0, 0.0);
        for y in &b.observation {
            re += y.re * y.re;
            im += y.im * y.im;
        }
        let (re, im) = (re / n as f64, im / n as f64);
        assert!(((re + im) / sigma2 - 1.0).abs() < 0.01);
        assert!((re / (sigma2 / 2.0) - 1.0).abs() < 0.01);
        assert!((im / (sigma2 / 2.0) - 1.0).abs() < 0.01);
    }

    #[test]
    fn matched_stats_identity_channel() {
        let p = ChannelParams::new(vec![c(1.0, 0.0)], 0.5).unwrap();
        let y = vec![c(0.3, -1.0), c(2.0, 0.5), c(-0.1, 0.0)];
        let s = build_matched_stats(&p, &y).unwrap();
        assert_eq!(s.len(), 3);
        for n in 0..3 {
            assert_eq!(s.x[n], y[n]);
            for m in 0..3 {
                let want = if n == m { 1.0 } else { 0.0 };
                assert_eq!(s.g(n, m), c(want, 0.0));
            }
        }
    }

    #[test]
    fn matched_stats_two_tap() {
        let p = ChannelParams::new(vec![c(1.0, 0.0), c(0.5, 0.0)], 1.0).unwrap();
        let s = build_matched_stats(&p, &[c(0.0, 0.0); 3]).unwrap();
        assert_eq!(s.g(0, 0), c(1.25, 0.0));
        assert_eq!(s.g(1, 1), c(1.25, 0.0));
        assert_eq!(s.g(0, 1), c(0.5, 0.0));
        assert_eq!(s.g(1, 0), c(0.5, 0.0));
    }

    #[test]
    fn matched_stats_match_dense_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, l) = (16, 3);
        let p = sample_channel(l, &mut rng).with_sigma2(0.2);
        let y: Vec<Complex64> = (0..n + l).map(|_| complex_normal(&mut rng)).collect();
        let s = build_matched_stats(&p, &y).unwrap();
        let hm = dense_h(&p.h, n);
        for j in 0..n {
            let x: Complex64 = (0..n + l).map(|r| hm[r][j].conj() * y[r]).sum();
            assert!((x - s.x[j]).norm() < 1e-12);
            for m in 0..n {
                let g: Complex64 = (0..n + l).map(|r| hm[r][j].conj() * hm[r][m]).sum();
                assert!((g - s.g(j, m)).norm() < 1e-12);
                assert_eq!(s.g(j, m), s.g(m, j).conj());
                if j.abs_diff(m) > l {
                    assert_eq!(s.g(j, m), c(0.0, 0.0));
                }
            }
            assert!(s.diag(j) >= 0.0);
            assert_eq!(s.g(j, j).im, 0.0);
        }
    }

    #[test]
    fn noiseless_energy_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Constellation::qpsk();
        for _ in 0..10 {
            let p = sample_channel(4, &mut rng);
            let sym = q.random_symbols(20, &mut rng);
            let v = q.values(&sym);
            let y = convolve(&p.h, &v);
            let s = build_matched_stats(&p, &y).unwrap();
            let mut quad = c(0.0, 0.0);
            for n in 0..20 {
                for m in 0..20 {
                    quad += v[n].conj() * s.g(n, m) * v[m];
                }
            }
            let ey: f64 = y.iter().map(|z| z.norm_sqr()).sum();
            assert!((quad.re - ey).abs() <= 1e-9 * ey);
        }
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let draw = |seed, domain, index| substream(seed, domain, index).random::<u64>();
        assert_eq!(draw(7, 1, 3), draw(7, 1, 3));
        assert_ne!(draw(7, 1, 3), draw(7, 1, 4));
        assert_ne!(draw(7, 1, 3), draw(7, 2, 3));
        assert_ne!(draw(7, 1, 3), draw(8, 1, 3));
    }

}
