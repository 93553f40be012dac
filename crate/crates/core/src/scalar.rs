//! Coordinate scalars for values in C^m.
//!
//! Two modes exist: exact (`CRat`, complex rationals) and float
//! (`Complex64`). A computation never mixes them; the mode is a type
//! parameter throughout the crate and is checked at the file boundary.

use std::fmt;
use std::hash::{Hash, Hasher};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::error::{Error, Result};
use crate::rational::{CRat, Rational};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exact,
    Float,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Exact => "exact",
            Mode::Float => "float",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Mode::Exact),
            "float" => Ok(Mode::Float),
            other => Err(Error::Parse(format!("unknown mode {other:?}"))),
        }
    }
}

pub trait Scalar: Clone + PartialEq + fmt::Debug + Send + Sync + 'static {
    const MODE: Mode;

    fn zero() -> Self;
    fn from_crat(c: &CRat) -> Self;
    fn plus(&self, rhs: &Self) -> Self;
    fn minus(&self, rhs: &Self) -> Self;
    fn times(&self, rhs: &Self) -> Self;
    fn over(&self, rhs: &Self) -> Self;
    fn is_zero(&self) -> bool;
    fn is_finite(&self) -> bool;
    fn norm_sqr_f64(&self) -> f64;
    fn to_c64(&self) -> Complex64;
    /// |z|^2 exactly, when the mode supports it.
    fn norm_sqr_exact(&self) -> Option<Rational>;
    fn hash_into<H: Hasher>(&self, state: &mut H);
    /// Cheap hash consistent with equality but not covering every digit.
    fn hash_quick<H: Hasher>(&self, state: &mut H) {
        self.hash_into(state);
    }
    /// Approximate memory footprint in bytes.
    fn footprint(&self) -> usize;
    /// Bounds `(lo, hi)` with `2^lo ≤ |z| < 2^hi`; `None` for zero or when
    /// the mode has no cheap estimate.
    fn log2_bounds(&self) -> Option<(i64, i64)> {
        None
    }
    fn to_json(&self) -> Json;
    fn from_json(v: &Json) -> Result<Self>;
}

impl Scalar for CRat {
    const MODE: Mode = Mode::Exact;

    fn zero() -> Self {
        CRat::zero()
    }
    fn from_crat(c: &CRat) -> Self {
        c.clone()
    }
    fn plus(&self, rhs: &Self) -> Self {
        self.add(rhs)
    }
    fn minus(&self, rhs: &Self) -> Self {
        self.sub(rhs)
    }
    fn times(&self, rhs: &Self) -> Self {
        self.mul(rhs)
    }
    fn over(&self, rhs: &Self) -> Self {
        self.div(rhs)
    }
    fn is_zero(&self) -> bool {
        CRat::is_zero(self)
    }
    fn is_finite(&self) -> bool {
        true
    }
    fn norm_sqr_f64(&self) -> f64 {
        self.norm_sqr().to_f64()
    }
    fn to_c64(&self) -> Complex64 {
        let (re, im) = self.to_f64_pair();
        Complex64::new(re, im)
    }
    fn norm_sqr_exact(&self) -> Option<Rational> {
        Some(self.norm_sqr())
    }
    fn hash_into<H: Hasher>(&self, state: &mut H) {
        self.hash(state);
    }
    fn hash_quick<H: Hasher>(&self, state: &mut H) {
        for r in [&self.re, &self.im] {
            for x in [r.numer(), r.denom()] {
                state.write_u64(x.bits());
                state.write_u64(x.iter_u64_digits().next().unwrap_or(0));
                state.write_u8(x.sign() as u8);
            }
        }
    }
    fn footprint(&self) -> usize {
        let bits = |r: &Rational| (r.numer().bits() + r.denom().bits()) as usize;
        std::mem::size_of::<CRat>() + (bits(&self.re) + bits(&self.im)) / 8
    }
    fn log2_bounds(&self) -> Option<(i64, i64)> {
        // 2^(a−b−1) < p/q < 2^(a−b+1) for a = bits(p), b = bits(q).
        let part = |r: &Rational| {
            (!r.is_zero()).then(|| r.numer().bits() as i64 - r.denom().bits() as i64)
        };
        match (part(&self.re), part(&self.im)) {
            (None, None) => None,
            (Some(e), None) | (None, Some(e)) => Some((e - 1, e + 1)),
            (Some(a), Some(b)) => Some((a.max(b) - 1, a.max(b) + 2)),
        }
    }
    fn to_json(&self) -> Json {
        serde_json::to_value(self).expect("rational pair serializes")
    }
    fn from_json(v: &Json) -> Result<Self> {
        Ok(serde_json::from_value(v.clone())?)
    }
}

impl Scalar for Complex64 {
    const MODE: Mode = Mode::Float;

    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn from_crat(c: &CRat) -> Self {
        let (re, im) = c.to_f64_pair();
        Complex64::new(re, im)
    }
    fn plus(&self, rhs: &Self) -> Self {
        self + rhs
    }
    fn minus(&self, rhs: &Self) -> Self {
        self - rhs
    }
    fn times(&self, rhs: &Self) -> Self {
        self * rhs
    }
    fn over(&self, rhs: &Self) -> Self {
        self / rhs
    }
    fn is_zero(&self) -> bool {
        self.re == 0.0 && self.im == 0.0
    }
    fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
    fn norm_sqr_f64(&self) -> f64 {
        self.norm_sqr()
    }
    fn to_c64(&self) -> Complex64 {
        *self
    }
    fn norm_sqr_exact(&self) -> Option<Rational> {
        None
    }
    fn hash_into<H: Hasher>(&self, state: &mut H) {
        // +0.0 and -0.0 compare equal, so they must hash equally.
        let canon = |x: f64| if x == 0.0 { 0u64 } else { x.to_bits() };
        canon(self.re).hash(state);
        canon(self.im).hash(state);
    }
    fn footprint(&self) -> usize {
        std::mem::size_of::<Complex64>()
    }
    fn to_json(&self) -> Json {
        serde_json::json!([self.re, self.im])
    }
    fn from_json(v: &Json) -> Result<Self> {
        match v {
            Json::Number(n) => Ok(Complex64::new(n.as_f64().unwrap_or(f64::NAN), 0.0)),
            Json::Array(parts) if parts.len() == 2 => {
                let part = |j: &Json| match j {
                    Json::String(s) => Ok(s.parse::<Rational>()?.to_f64()),
                    _ => j.as_f64().ok_or_else(|| Error::Parse(format!("expected a number, found {j}"))),
                };
                Ok(Complex64::new(part(&parts[0])?, part(&parts[1])?))
            }
            other => Err(Error::Parse(format!("expected [re, im], found {other}"))),
        }
    }
}

/// `t / (1 + t)`, the bounded transform inside the convergence-in-probability
/// metric. Saturates to 1 for infinite distances.
pub fn bounded(t: f64) -> f64 {
    if t.is_infinite() {
        1.0
    } else {
        t / (1.0 + t)
    }
}

/// Squared Euclidean distance between two points of C^m, exact when possible.
pub fn dist_sqr_exact<S: Scalar>(a: &[S], b: &[S]) -> Option<Rational> {
    let mut acc = Rational::zero();
    for (x, y) in a.iter().zip(b) {
        acc = &acc + &x.minus(y).norm_sqr_exact()?;
    }
    Some(acc)
}

/// Euclidean distance between two points of C^m as a double.
///
/// Differences are taken exactly and only then rounded, so equal points give
/// exactly 0 and huge exact values never need squaring.
pub fn distance<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let mut scale = 0.0f64;
    let mut parts = Vec::with_capacity(2 * a.len());
    for (x, y) in a.iter().zip(b) {
        let diff = x.minus(y);
        if diff.is_zero() {
            continue;
        }
        let z = diff.to_c64();
        for v in [z.re.abs(), z.im.abs()] {
            scale = scale.max(v);
            parts.push(v);
        }
    }
    if scale == 0.0 || scale.is_infinite() || scale.is_nan() {
        return if parts.is_empty() { 0.0 } else { f64::INFINITY };
    }
    scale * parts.iter().map(|v| (v / scale) * (v / scale)).sum::<f64>().sqrt()
}

/// `bounded(distance(a, b))`, or `None` when the points are equal.
///
/// A coordinate whose difference certainly exceeds `2^64` saturates the
/// result to 1 without forming the difference; the rounded value is the
/// same either way.
pub fn separation<S: Scalar>(a: &[S], b: &[S]) -> Option<f64> {
    if a == b {
        return None;
    }
    let far = |a: Option<(i64, i64)>, b: Option<(i64, i64)>, b_zero: bool| match a {
        Some((lo, _)) if lo >= 66 => b_zero || b.is_some_and(|(_, hi)| hi < lo),
        _ => false,
    };
    for (x, y) in a.iter().zip(b) {
        let (bx, by) = (x.log2_bounds(), y.log2_bounds());
        if far(bx, by, y.is_zero()) || far(by, bx, x.is_zero()) {
            return Some(1.0);
        }
    }
    let d = distance(a, b);
    (d != 0.0).then(|| bounded(d))
}

/// `d/(1+d)` exactly, when the distance itself is rational.
pub fn bounded_exact<S: Scalar>(a: &[S], b: &[S]) -> Option<Rational> {
    let d = dist_sqr_exact(a, b)?.exact_sqrt()?;
    let denom = &Rational::one() + &d;
    Some(&d / &denom)
}

/// Wrapper giving exact-equality hashing to a point of C^m.
#[derive(Clone, Debug)]
pub struct PointKey<S: Scalar>(pub Box<[S]>);

impl<S: Scalar> PartialEq for PointKey<S> {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl<S: Scalar> Eq for PointKey<S> {}

impl<S: Scalar> Hash for PointKey<S> {
    fn hash<H: Hasher>(&self, state: &mut H) {
        for s in self.0.iter() {
            s.hash_into(state);
        }
    }
}

pub fn add_points<S: Scalar>(a: &[S], b: &[S]) -> Box<[S]> {
    a.iter().zip(b).map(|(x, y)| x.plus(y)).collect()
}

pub fn sub_points<S: Scalar>(a: &[S], b: &[S]) -> Box<[S]> {
    a.iter().zip(b).map(|(x, y)| x.minus(y)).collect()
}

pub fn scale_point<S: Scalar>(c: &S, a: &[S]) -> Box<[S]> {
    a.iter().map(|x| c.times(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> Rational {
        s.parse().unwrap()
    }

    #[test]
    fn distance_is_euclidean_over_coordinates() {
        let a = [CRat::real(q("3")), CRat::new(q("0"), q("4"))];
        let b = [CRat::zero(), CRat::zero()];
        assert_eq!(distance(&a, &b), 5.0);
        assert_eq!(bounded_exact(&a, &b), Some(q("5/6")));
        let fa = [Complex64::new(3.0, 0.0), Complex64::new(0.0, 4.0)];
        let fb = [Complex64::new(0.0, 0.0); 2];
        assert_eq!(distance(&fa, &fb), 5.0);
    }

    #[test]
    fn separation_fast_path_agrees() {
        let big = |e: u32, sign: i64| {
            let n = num_bigint::BigInt::from(sign) * num_bigint::BigInt::from(3u8).pow(e);
            CRat::real(Rational::new(n, num_bigint::BigInt::from(7u8)))
        };
        for e in [30u32, 40, 41, 42, 43, 60, 400] {
            for (a, b) in [
                (vec![big(e, 1)], vec![CRat::zero()]),
                (vec![big(e, 1)], vec![big(e - 1, -1)]),
                (vec![CRat::real(q("1/3")), big(e, -1)], vec![CRat::real(q("2")), big(e, 1)]),
                (vec![big(e, 1)], vec![big(e, 1)]),
            ] {
                let d = distance(&a, &b);
                let slow = (d != 0.0).then(|| bounded(d));
                assert_eq!(separation(&a, &b), slow, "e = {e}");
            }
        }
    }

    #[test]
    fn bounded_saturates() {
        assert_eq!(bounded(f64::INFINITY), 1.0);
        assert_eq!(bounded(1.0), 0.5);
        assert_eq!(bounded(0.0), 0.0);
    }

    #[test]
    fn float_json_round_trip() {
        let z = Complex64::new(0.1, -2.5e-300);
        assert_eq!(Complex64::from_json(&z.to_json()).unwrap(), z);
    }
}
