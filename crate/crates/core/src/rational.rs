//! Exact rational and complex-rational scalars.
//!
//! `Rational` keeps a reduced numerator/denominator pair with a positive
//! denominator. Reduction uses a Euclid step before falling back to the
//! binary algorithm, which matters for the builder: forced values grow to
//! thousands of bits while their denominators stay tiny.

use std::cmp::Ordering;
use std::fmt;
use std::hash::Hash;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use num_bigint::{BigInt, Sign};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

fn gcd(a: &BigInt, b: &BigInt) -> BigInt {
    // One machine-word operand: a single remainder pass over the other.
    for (big, small) in [(a, b), (b, a)] {
        if let Some(y) = small.magnitude().to_u64() {
            if y == 0 {
                return big.abs();
            }
            if y == 1 {
                return BigInt::one();
            }
            if y.is_power_of_two() {
                let tz = big.trailing_zeros().unwrap_or(u64::MAX).min(y.trailing_zeros() as u64);
                return BigInt::one() << tz as usize;
            }
            return BigInt::from(y.gcd(&rem_small(big, y)));
        }
    }
    let mut x = a.abs();
    let mut y = b.abs();
    if x < y {
        std::mem::swap(&mut x, &mut y);
    }
    while !y.is_zero() {
        if let (Some(p), Some(q)) = (x.to_u64(), y.to_u64()) {
            return BigInt::from(p.gcd(&q));
        }
        let r = &x % &y;
        x = y;
        y = r;
    }
    x
}

/// `|x| mod y`. Divisors below `2^32` use a precomputed reciprocal instead
/// of a hardware division per digit.
fn rem_small(x: &BigInt, y: u64) -> u64 {
    if y >= 1 << 32 {
        return (x.magnitude() % y).to_u64().expect("remainder below a word");
    }
    let m = u64::MAX / y;
    let mut r = 0u64;
    for d in x.magnitude().iter_u32_digits().rev() {
        let t = (r << 32) | d as u64;
        let q = ((t as u128 * m as u128) >> 64) as u64;
        r = t - q * y;
        while r >= y {
            r -= y;
        }
    }
    r
}

fn div_exact(x: &BigInt, g: &BigInt) -> BigInt {
    if g.is_one() {
        x.clone()
    } else if let Some(tz) = pow2(g) {
        x >> tz as usize
    } else {
        x / g
    }
}

/// `k` when `g = 2^k`.
fn pow2(g: &BigInt) -> Option<u64> {
    let tz = g.trailing_zeros()?;
    (g.sign() == Sign::Plus && g.bits() == tz + 1).then_some(tz)
}

fn mul_int(x: &BigInt, y: BigInt) -> BigInt {
    if y.is_one() {
        x.clone()
    } else {
        x * y
    }
}

/// Exact rational number in lowest terms.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Rational {
    numer: BigInt,
    denom: BigInt,
}

impl Rational {
    pub fn new(numer: BigInt, denom: BigInt) -> Self {
        assert!(!denom.is_zero(), "zero denominator");
        let mut r = Rational { numer, denom };
        r.normalize();
        r
    }

    pub fn from_integer(n: impl Into<BigInt>) -> Self {
        Rational { numer: n.into(), denom: BigInt::one() }
    }

    pub fn from_ratio(n: i64, d: i64) -> Self {
        Self::new(BigInt::from(n), BigInt::from(d))
    }

    fn normalize(&mut self) {
        if self.numer.is_zero() {
            self.denom = BigInt::one();
            return;
        }
        if self.denom.sign() == Sign::Minus {
            self.numer = -std::mem::take(&mut self.numer);
            self.denom = -std::mem::take(&mut self.denom);
        }
        if self.denom.is_one() {
            return;
        }
        let g = gcd(&self.numer, &self.denom);
        if !g.is_one() {
            self.numer = div_exact(&self.numer, &g);
            self.denom = div_exact(&self.denom, &g);
        }
    }

    pub fn zero() -> Self {
        Rational { numer: BigInt::zero(), denom: BigInt::one() }
    }

    pub fn one() -> Self {
        Rational { numer: BigInt::one(), denom: BigInt::one() }
    }

    pub fn numer(&self) -> &BigInt {
        &self.numer
    }

    pub fn denom(&self) -> &BigInt {
        &self.denom
    }

    pub fn is_zero(&self) -> bool {
        self.numer.is_zero()
    }

    pub fn is_one(&self) -> bool {
        self.numer.is_one() && self.denom.is_one()
    }

    pub fn is_positive(&self) -> bool {
        self.numer.sign() == Sign::Plus
    }

    pub fn is_negative(&self) -> bool {
        self.numer.sign() == Sign::Minus
    }

    pub fn abs(&self) -> Self {
        Rational { numer: self.numer.abs(), denom: self.denom.clone() }
    }

    pub fn recip(&self) -> Self {
        assert!(!self.is_zero(), "reciprocal of zero");
        Self::new(self.denom.clone(), self.numer.clone())
    }

    pub fn pow(&self, exp: u32) -> Self {
        Rational { numer: self.numer.pow(exp), denom: self.denom.pow(exp) }
    }

    /// Nearest double; saturates to infinity and flushes to zero outside the
    /// representable range.
    pub fn to_f64(&self) -> f64 {
        if let (Some(n), Some(d)) = (self.numer.to_i64(), self.denom.to_i64()) {
            if n.unsigned_abs() < (1 << 53) && d < (1 << 53) {
                return n as f64 / d as f64;
            }
        }
        BigRational::new_raw(self.numer.clone(), self.denom.clone())
            .to_f64()
            .unwrap_or(f64::NAN)
    }

    /// Square root when the value is the square of a rational.
    pub fn exact_sqrt(&self) -> Option<Rational> {
        if self.is_negative() {
            return None;
        }
        let n = self.numer.sqrt();
        let d = self.denom.sqrt();
        if &n * &n == self.numer && &d * &d == self.denom {
            Some(Rational { numer: n, denom: d })
        } else {
            None
        }
    }

    /// Non-negative square root as a double, without overflowing for huge
    /// inputs.
    pub fn sqrt_f64(&self) -> f64 {
        let x = self.to_f64();
        if x.is_finite() {
            return x.sqrt();
        }
        let bits = self.numer.bits() as i64 - self.denom.bits() as i64;
        if bits > 2100 {
            f64::INFINITY
        } else {
            // 2^1024 < x < 2^2100: halve the exponent before converting.
            let shift = (bits / 2) as u32;
            let scaled = Rational::new(self.numer.clone(), &self.denom << (2 * shift) as usize);
            scaled.to_f64().sqrt() * 2f64.powi(shift as i32)
        }
    }

    pub fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    pub fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
}

impl Default for Rational {
    fn default() -> Self {
        Rational::zero()
    }
}

impl From<i64> for Rational {
    fn from(n: i64) -> Self {
        Rational::from_integer(n)
    }
}

impl Ord for Rational {
    fn cmp(&self, other: &Self) -> Ordering {
        if self.denom == other.denom {
            return self.numer.cmp(&other.numer);
        }
        (&self.numer * &other.denom).cmp(&(&other.numer * &self.denom))
    }
}

impl PartialOrd for Rational {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<'a> Add<&'a Rational> for &'a Rational {
    type Output = Rational;
    fn add(self, rhs: &Rational) -> Rational {
        if rhs.numer.is_zero() {
            return self.clone();
        }
        if self.numer.is_zero() {
            return rhs.clone();
        }
        if self.denom == rhs.denom {
            return Rational::new(&self.numer + &rhs.numer, self.denom.clone());
        }
        if self.denom.is_one() {
            return Rational { numer: &self.numer * &rhs.denom + &rhs.numer, denom: rhs.denom.clone() };
        }
        if rhs.denom.is_one() {
            return Rational { numer: &self.numer + &rhs.numer * &self.denom, denom: self.denom.clone() };
        }
        let g = gcd(&self.denom, &rhs.denom);
        if g.is_one() {
            return Rational::new(&self.numer * &rhs.denom + &rhs.numer * &self.denom, &self.denom * &rhs.denom);
        }
        let lhs_scale = &rhs.denom / &g;
        let rhs_scale = &self.denom / &g;
        Rational::new(&self.numer * &lhs_scale + &rhs.numer * &rhs_scale, &self.denom * &lhs_scale)
    }
}

impl<'a> Sub<&'a Rational> for &'a Rational {
    type Output = Rational;
    fn sub(self, rhs: &Rational) -> Rational {
        if self.denom == rhs.denom {
            return Rational::new(&self.numer - &rhs.numer, self.denom.clone());
        }
        if rhs.numer.is_zero() {
            return self.clone();
        }
        self + &(-rhs)
    }
}

impl<'a> Mul<&'a Rational> for &'a Rational {
    type Output = Rational;
    fn mul(self, rhs: &Rational) -> Rational {
        if self.is_zero() || rhs.is_zero() {
            return Rational::zero();
        }
        // Cross-cancel so each gcd pairs a large operand with a small one.
        let g1 = gcd(&self.numer, &rhs.denom);
        let g2 = gcd(&rhs.numer, &self.denom);
        let numer = mul_int(&div_exact(&self.numer, &g1), div_exact(&rhs.numer, &g2));
        let denom = mul_int(&div_exact(&self.denom, &g2), div_exact(&rhs.denom, &g1));
        let mut r = Rational { numer, denom };
        if r.denom.sign() == Sign::Minus {
            r.numer = -r.numer;
            r.denom = -r.denom;
        }
        r
    }
}

impl<'a> Div<&'a Rational> for &'a Rational {
    type Output = Rational;
    fn div(self, rhs: &Rational) -> Rational {
        self * &rhs.recip()
    }
}

impl Neg for &Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        Rational { numer: -&self.numer, denom: self.denom.clone() }
    }
}

impl Neg for Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        Rational { numer: -self.numer, denom: self.denom }
    }
}

macro_rules! forward_owned {
    ($($imp:ident $method:ident),*) => {$(
        impl $imp<Rational> for Rational {
            type Output = Rational;
            fn $method(self, rhs: Rational) -> Rational { (&self).$method(&rhs) }
        }
        impl<'a> $imp<&'a Rational> for Rational {
            type Output = Rational;
            fn $method(self, rhs: &Rational) -> Rational { (&self).$method(rhs) }
        }
        impl<'a> $imp<Rational> for &'a Rational {
            type Output = Rational;
            fn $method(self, rhs: Rational) -> Rational { self.$method(&rhs) }
        }
    )*};
}
forward_owned!(Add add, Sub sub, Mul mul, Div div);

impl std::iter::Sum for Rational {
    fn sum<I: Iterator<Item = Rational>>(iter: I) -> Rational {
        iter.fold(Rational::zero(), |acc, x| &acc + &x)
    }
}

impl<'a> std::iter::Sum<&'a Rational> for Rational {
    fn sum<I: Iterator<Item = &'a Rational>>(iter: I) -> Rational {
        iter.fold(Rational::zero(), |acc, x| &acc + x)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer, self.denom)
    }
}

impl fmt::Debug for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Rational {
    type Err = Error;

    /// Accepts `"a/b"`, integers, and finite decimals such as `"0.49"`.
    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::Parse(format!("invalid rational {s:?}"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n: BigInt = n.trim().parse().map_err(|_| bad())?;
            let d: BigInt = d.trim().parse().map_err(|_| bad())?;
            if d.is_zero() {
                return Err(bad());
            }
            return Ok(Rational::new(n, d));
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let negative = int.starts_with('-');
            let int_part: BigInt = match int.trim_start_matches(['-', '+']) {
                "" => BigInt::zero(),
                digits => digits.parse().map_err(|_| bad())?,
            };
            let scale = BigInt::from(10u32).pow(frac.len() as u32);
            let frac_part: BigInt = frac.parse().map_err(|_| bad())?;
            let magnitude = int_part * &scale + frac_part;
            let numer = if negative { -magnitude } else { magnitude };
            return Ok(Rational::new(numer, scale));
        }
        let n: BigInt = s.parse().map_err(|_| bad())?;
        Ok(Rational::from_integer(n))
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Complex number with exact rational parts.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct CRat {
    pub re: Rational,
    pub im: Rational,
}

impl CRat {
    pub fn new(re: Rational, im: Rational) -> Self {
        CRat { re, im }
    }

    pub fn real(re: Rational) -> Self {
        CRat { re, im: Rational::zero() }
    }

    pub fn zero() -> Self {
        CRat::default()
    }

    pub fn one() -> Self {
        CRat::real(Rational::one())
    }

    pub fn is_zero(&self) -> bool {
        self.re.is_zero() && self.im.is_zero()
    }

    pub fn is_real(&self) -> bool {
        self.im.is_zero()
    }

    pub fn norm_sqr(&self) -> Rational {
        if self.im.is_zero() {
            return &self.re * &self.re;
        }
        &(&self.re * &self.re) + &(&self.im * &self.im)
    }

    pub fn conj(&self) -> Self {
        CRat { re: self.re.clone(), im: -&self.im }
    }

    pub fn add(&self, o: &CRat) -> CRat {
        CRat { re: &self.re + &o.re, im: add_im(&self.im, &o.im) }
    }

    pub fn sub(&self, o: &CRat) -> CRat {
        CRat { re: &self.re - &o.re, im: sub_im(&self.im, &o.im) }
    }

    pub fn mul(&self, o: &CRat) -> CRat {
        if self.im.is_zero() && o.im.is_zero() {
            return CRat::real(&self.re * &o.re);
        }
        CRat {
            re: &(&self.re * &o.re) - &(&self.im * &o.im),
            im: &(&self.re * &o.im) + &(&self.im * &o.re),
        }
    }

    pub fn div(&self, o: &CRat) -> CRat {
        assert!(!o.is_zero(), "division by zero");
        if o.im.is_zero() {
            return CRat { re: &self.re / &o.re, im: div_im(&self.im, &o.re) };
        }
        let den = o.norm_sqr();
        let num = self.mul(&o.conj());
        CRat { re: &num.re / &den, im: &num.im / &den }
    }

    pub fn neg(&self) -> CRat {
        CRat { re: -&self.re, im: -&self.im }
    }

    pub fn abs_f64(&self) -> f64 {
        self.norm_sqr().sqrt_f64()
    }

    pub fn to_f64_pair(&self) -> (f64, f64) {
        (self.re.to_f64(), self.im.to_f64())
    }
}

fn add_im(a: &Rational, b: &Rational) -> Rational {
    if b.is_zero() {
        a.clone()
    } else if a.is_zero() {
        b.clone()
    } else {
        a + b
    }
}

fn sub_im(a: &Rational, b: &Rational) -> Rational {
    if b.is_zero() {
        a.clone()
    } else {
        a - b
    }
}

fn div_im(a: &Rational, b: &Rational) -> Rational {
    if a.is_zero() {
        Rational::zero()
    } else {
        a / b
    }
}

impl fmt::Debug for CRat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.im.is_zero() {
            write!(f, "{}", self.re)
        } else {
            write!(f, "({} + {}i)", self.re, self.im)
        }
    }
}

impl From<Rational> for CRat {
    fn from(r: Rational) -> Self {
        CRat::real(r)
    }
}

/// Serialized as `"a/b"` for reals on input; always written as `["re", "im"]`.
impl Serialize for CRat {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (&self.re, &self.im).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CRat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Real(Rational),
            Pair(Rational, Rational),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Real(re) => CRat::real(re),
            Repr::Pair(re, im) => CRat::new(re, im),
        })
    }
}

/// Hash helper shared by value-keyed maps.
#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> Rational {
        s.parse().unwrap()
    }

    #[test]
    fn small_remainder_matches_bigint() {
        let x: BigInt = num_traits::Pow::pow(BigInt::from(3u8), 900u32) * -11 + 12345;
        for y in [1u64, 2, 3, 7, 1000003, (1 << 32) - 1, 1 << 32, u64::MAX] {
            let expected = (x.magnitude() % y).to_u64().unwrap();
            assert_eq!(rem_small(&x, y), expected, "y = {y}");
        }
        for y in [1i64, 2, 8, 33, 1 << 40] {
            assert_eq!(gcd(&x, &BigInt::from(y)), Integer::gcd(&x, &BigInt::from(y)));
            assert_eq!(gcd(&(&x << 5usize), &BigInt::from(y)), Integer::gcd(&(&x << 5usize), &BigInt::from(y)));
        }
    }

    #[test]
    fn parses_fractions_integers_and_decimals() {
        assert_eq!(q("2/4"), Rational::from_ratio(1, 2));
        assert_eq!(q("-3"), Rational::from_integer(-3));
        assert_eq!(q("0.49"), Rational::from_ratio(49, 100));
        assert_eq!(q("-0.5"), Rational::from_ratio(-1, 2));
        assert_eq!(q("3/-6"), Rational::from_ratio(-1, 2));
        assert!("1/0".parse::<Rational>().is_err());
        assert!("abc".parse::<Rational>().is_err());
        assert!("1.".parse::<Rational>().is_err());
    }

    #[test]
    fn display_round_trips() {
        for s in ["1/3", "-7/2", "0/1", "5/1"] {
            assert_eq!(q(s).to_string(), s);
            assert_eq!(q(&q(s).to_string()), q(s));
        }
    }

    #[test]
    fn arithmetic_matches_big_rational() {
        let samples = ["1/3", "-2/7", "5/6", "0/1", "9/4", "-11/12"];
        for a in samples {
            for b in samples {
                let (x, y) = (q(a), q(b));
                let bx: BigRational = a.parse().unwrap();
                let by: BigRational = b.parse().unwrap();
                let check = |r: Rational, e: BigRational| {
                    assert_eq!((r.numer().clone(), r.denom().clone()), (e.numer().clone(), e.denom().clone()));
                };
                check(&x + &y, &bx + &by);
                check(&x - &y, &bx - &by);
                check(&x * &y, &bx * &by);
                if !y.is_zero() {
                    check(&x / &y, &bx / &by);
                }
                assert_eq!(x.cmp(&y), bx.cmp(&by));
            }
        }
    }

    #[test]
    fn huge_values_convert_without_nan() {
        let big = Rational::from_integer(BigInt::one() << 5000usize);
        assert_eq!(big.to_f64(), f64::INFINITY);
        assert_eq!(big.recip().to_f64(), 0.0);
        assert_eq!(big.sqrt_f64(), f64::INFINITY);
        let mid = Rational::from_integer(BigInt::one() << 1500usize);
        let root = mid.sqrt_f64();
        assert!((root.log2() - 750.0).abs() < 1e-9);
    }

    #[test]
    fn exact_sqrt_detects_squares() {
        assert_eq!(q("9/4").exact_sqrt(), Some(q("3/2")));
        assert_eq!(q("2").exact_sqrt(), None);
        assert_eq!(q("-1").exact_sqrt(), None);
    }

    #[test]
    fn complex_division_inverts_multiplication() {
        let a = CRat::new(q("1/2"), q("-3"));
        let b = CRat::new(q("2/3"), q("1/5"));
        assert_eq!(a.mul(&b).div(&b), a);
        assert_eq!(a.sub(&a), CRat::zero());
    }

    #[test]
    fn complex_json_accepts_real_shorthand() {
        let c: CRat = serde_json::from_str("\"1/2\"").unwrap();
        assert_eq!(c, CRat::real(q("1/2")));
        let c: CRat = serde_json::from_str("[\"1\", \"-1/3\"]").unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), "[\"1/1\",\"-1/3\"]");
    }
}
