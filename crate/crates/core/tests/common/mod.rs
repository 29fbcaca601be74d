//! Brute-force references shared by the oracle and acceptance targets.

#![allow(dead_code)]

use embp_core::baselines::elbo;
use embp_core::bp::BeliefSet;
use embp_core::model::{
    complex_normal, convolve, sample_channel, snr_to_sigma2, transmit, ChannelParams, Constellation,
    TransmissionBlock,
};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn instance(rng: &mut ChaCha8Rng, n: usize, l: usize, c: &Constellation) -> (TransmissionBlock, BeliefSet, ChannelParams) {
    let mut h = sample_channel(l, rng);
    let snr = rng.random_range(0.0..12.0);
    h.sigma2 = snr_to_sigma2(snr, &h.h, c, n).unwrap();
    let symbols = c.random_symbols(n, rng);
    let block = transmit(&h, symbols, c, rng).unwrap();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..c.len()).map(|_| rng.random::<f64>() + 0.02).collect())
        .collect();
    let beliefs = BeliefSet::from_probs(&rows).unwrap();
    let current = ChannelParams::new(
        h.h.iter().map(|&t| t + complex_normal(rng) * 0.3).collect(),
        h.sigma2 * rng.random_range(0.5..2.0),
    )
    .unwrap();
    (block, beliefs, current)
}

/// Noise-variance update written out term by term over 1-based indices, with
/// `x` and `G` built from an explicit dense `H`.
pub fn literal_sigma2(b: &BeliefSet, y: &[Complex64], h: &[Complex64], c: &Constellation) -> f64 {
    let n_sym = b.len();
    let l = h.len() - 1;
    let rows = n_sym + l;
    // dense H, 1-based: H[r][s] = h_{r-s} for 0 <= r-s <= L
    let hm = |r: usize, s: usize| -> Complex64 {
        if r >= s && r - s <= l {
            h[r - s]
        } else {
            Complex64::new(0.0, 0.0)
        }
    };
    let x = |nn: usize| -> Complex64 { (1..=rows).map(|r| hm(r, nn).conj() * y[r - 1]).sum() };
    let g = |a: usize, bb: usize| -> Complex64 { (1..=rows).map(|r| hm(r, a).conj() * hm(r, bb)).sum() };
    let prob = |nn: usize, a: usize| b.prob(nn - 1, a);
    let mut acc = 0.0;
    for nn in 1..=n_sym {
        for (a, &cn) in c.points().iter().enumerate() {
            let mut inner = 2.0 * (x(nn) * cn.conj()).re - g(nn, nn).re * cn.norm_sqr();
            for mm in 1..nn {
                for (bb, &cm) in c.points().iter().enumerate() {
                    inner -= prob(mm, bb) * 2.0 * (g(nn, mm) * cm * cn.conj()).re;
                }
            }
            acc += prob(nn, a) * inner;
        }
    }
    let y2: f64 = y.iter().map(|v| v.norm_sqr()).sum();
    (y2 - acc) / rows as f64
}

/// Tap update with the partner index `n - |l - k|` and the sign-switched
/// imaginary part, 1-based, dropping partners outside the block.
pub fn literal_tap(ell: usize, b: &BeliefSet, y: &[Complex64], h: &[Complex64], c: &Constellation) -> Complex64 {
    let n_sym = b.len();
    let l = h.len() - 1;
    let prob = |nn: usize, a: usize| b.prob(nn - 1, a);
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    for nn in 1..=n_sym {
        for (a, &cn) in c.points().iter().enumerate() {
            let p = prob(nn, a);
            num += p * y[nn + ell - 1] * cn.conj();
            den += p * cn.norm_sqr();
            for k in (0..=l).filter(|&k| k != ell) {
                let d = ell.abs_diff(k);
                if nn <= d {
                    continue;
                }
                let sign = if ell > k { 1.0 } else { -1.0 };
                for (bb, &cp) in c.points().iter().enumerate() {
                    let z = cp * cn.conj();
                    let term = Complex64::new(z.re, -z.im * sign);
                    num -= p * prob(nn - d, bb) * h[k] * term;
                }
            }
        }
    }
    num / den
}

pub fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
    (a - b).norm() <= tol * (1.0 + b.norm())
}

pub fn elbo_partial(q: &BeliefSet, y: &[Complex64], theta: &ChannelParams, c: &Constellation, param: usize, imag: bool) -> f64 {
    let l = theta.memory();
    let scale = if param <= l { 1.0 } else { theta.sigma2 };
    let step = 1e-5 * scale;
    let eval = |d: f64| {
        let mut p = theta.clone();
        if param > l {
            p.sigma2 += d;
        } else if imag {
            p.h[param].im += d;
        } else {
            p.h[param].re += d;
        }
        elbo(q, y, &p, c).unwrap()
    };
    (eval(step) - eval(-step)) / (2.0 * step) * scale
}

/// `E_q ||y - H c||^2 / (N + L)` by enumerating all sequences.
pub fn expected_residual(q: &BeliefSet, y: &[Complex64], h: &[Complex64], c: &Constellation) -> f64 {
    let n = q.len();
    let m = c.len();
    let total = m.pow(n as u32);
    let mut acc = 0.0;
    for idx in 0..total {
        let mut rest = idx;
        let seq: Vec<usize> = (0..n)
            .map(|_| {
                let s = rest % m;
                rest /= m;
                s
            })
            .collect();
        let p: f64 = seq.iter().enumerate().map(|(j, &s)| q.prob(j, s)).product();
        let clean = convolve(h, &c.values(&seq));
        let r: f64 = clean.iter().zip(y).map(|(a, b)| (b - a).norm_sqr()).sum();
        acc += p * r;
    }
    acc / y.len() as f64
}

