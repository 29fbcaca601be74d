//! Scalar abstraction shared by the numeric kernels.
//!
//! Every kernel that sits on the path from a momentum schedule to a training
//! loss is generic over [`Real`], so the same code runs on plain `f64` for
//! detection and on [`Dual`] numbers when the schedule optimizer needs exact
//! derivatives with respect to the momentum weights.

use num_complex::Complex;
use num_traits::{Num, One, Zero};
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

/// Real scalar usable by the detection and estimation kernels.
pub trait Real:
    Num
    + Copy
    + Debug
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + PartialOrd
    + Send
    + Sync
    + 'static
{
    /// Lifts a constant.
    fn cst(v: f64) -> Self;
    /// Primal value.
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    /// True when the primal equals `v` and no derivative is carried.
    fn is_const(self, v: f64) -> bool;
    fn is_finite(self) -> bool;

    #[inline]
    fn max_by_value(self, other: Self) -> Self {
        if self.value() >= other.value() {
            self
        } else {
            other
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn is_const(self, v: f64) -> bool {
        self == v
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Lifts an `f64` complex constant into `Complex<S>`.
#[inline]
pub fn lift<S: Real>(c: Complex<f64>) -> Complex<S> {
    Complex::new(S::cst(c.re), S::cst(c.im))
}

/// Primal part of a generic complex value.
#[inline]
pub fn primal<S: Real>(c: Complex<S>) -> Complex<f64> {
    Complex::new(c.re.value(), c.im.value())
}

/// `log(sum(exp(v)))` with max subtraction. Returns `-inf` for an empty slice.
#[inline]
pub fn logsumexp<S: Real>(v: &[S]) -> S {
    let mut m = f64::NEG_INFINITY;
    for x in v {
        m = m.max(x.value());
    }
    if !m.is_finite() {
        return S::cst(m);
    }
    let shift = S::cst(m);
    let mut acc = S::zero();
    for &x in v {
        acc += (x - shift).exp();
    }
    shift + acc.ln()
}

/// Forward-mode dual number carrying `K` directional derivatives.
#[derive(Clone, Copy, Debug)]
pub struct Dual<const K: usize> {
    pub v: f64,
    pub d: [f64; K],
}

impl<const K: usize> Dual<K> {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; K] }
    }

    /// Independent variable seeded in direction `dir`.
    pub fn variable(v: f64, dir: usize) -> Self {
        let mut d = [0.0; K];
        d[dir] = 1.0;
        Self { v, d }
    }

    #[inline]
    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= dv;
        }
        Self { v, d }
    }
}

impl<const K: usize> PartialEq for Dual<K> {
    fn eq(&self, other: &Self) -> bool {
        self.v == other.v
    }
}

impl<const K: usize> PartialOrd for Dual<K> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.v.partial_cmp(&other.v)
    }
}

impl<const K: usize> Add for Dual<K> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.v += rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d.iter()) {
            *a += b;
        }
        self
    }
}

impl<const K: usize> Sub for Dual<K> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.v -= rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d.iter()) {
            *a -= b;
        }
        self
    }
}

impl<const K: usize> Mul for Dual<K> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; K];
        for i in 0..K {
            d[i] = self.d[i] * rhs.v + self.v * rhs.d[i];
        }
        Self { v: self.v * rhs.v, d }
    }
}

impl<const K: usize> Div for Dual<K> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        let mut d = [0.0; K];
        for i in 0..K {
            d[i] = (self.d[i] - v * rhs.d[i]) * inv;
        }
        Self { v, d }
    }
}

impl<const K: usize> Rem for Dual<K> {
    type Output = Self;
    fn rem(self, rhs: Self) -> Self {
        let q = (self.v / rhs.v).trunc();
        self - rhs * Self::constant(q)
    }
}

impl<const K: usize> Neg for Dual<K> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl<const K: usize> AddAssign for Dual<K> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const K: usize> SubAssign for Dual<K> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<const K: usize> MulAssign for Dual<K> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const K: usize> Zero for Dual<K> {
    fn zero() -> Self {
        Self::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.v == 0.0 && self.d.iter().all(|x| *x == 0.0)
    }
}

impl<const K: usize> One for Dual<K> {
    fn one() -> Self {
        Self::constant(1.0)
    }
}

impl<const K: usize> Num for Dual<K> {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<const K: usize> Real for Dual<K> {
    #[inline]
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    #[inline]
    fn is_const(self, v: f64) -> bool {
        self.v == v && self.d.iter().all(|x| *x == 0.0)
    }
    fn is_finite(self) -> bool {
        self.v.is_finite() && self.d.iter().all(|x| x.is_finite())
    }
}
