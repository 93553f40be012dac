//! Counting densities of index sets at finite horizons.
//!
//! Nothing here claims a lower or upper density: liminf and limsup are not
//! visible in finite data. Reports carry exact counting densities and their
//! extremes over a window, labelled as finite-horizon quantities.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rational::Rational;

/// Strictly increasing positive integers, all at most `horizon`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSet {
    horizon: u64,
    indices: Vec<u64>,
}

impl IndexSet {
    pub fn new(horizon: u64, indices: Vec<u64>) -> Result<Self> {
        if indices.first() == Some(&0) {
            return Err(Error::Argument("indices must be positive".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("indices must be strictly increasing".into()));
        }
        if indices.last().is_some_and(|&l| l > horizon) {
            return Err(Error::Argument(format!("index beyond the horizon {horizon}")));
        }
        Ok(IndexSet { horizon, indices })
    }

    /// `{n ≤ horizon : pred(n)}`.
    pub fn from_predicate(horizon: u64, pred: impl Fn(u64) -> bool) -> Self {
        IndexSet { horizon, indices: (1..=horizon).filter(|&n| pred(n)).collect() }
    }

    pub fn empty(horizon: u64) -> Self {
        IndexSet { horizon, indices: Vec::new() }
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, n: u64) -> bool {
        self.indices.binary_search(&n).is_ok()
    }

    /// `|A ∩ [1, n]|`.
    pub fn count_up_to(&self, n: u64) -> u64 {
        self.indices.partition_point(|&i| i <= n) as u64
    }

    /// `|A ∩ [1, n]| / n`.
    pub fn counting_density(&self, n: u64) -> Result<Rational> {
        if n == 0 || n > self.horizon {
            return Err(Error::Argument(format!("checkpoint {n} outside [1, {}]", self.horizon)));
        }
        Ok(Rational::from_ratio(self.count_up_to(n) as i64, n as i64))
    }

    pub fn is_disjoint(&self, other: &IndexSet) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return false,
            }
        }
        true
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        let mut indices: Vec<u64> = self.indices.iter().chain(&other.indices).copied().collect();
        indices.sort_unstable();
        indices.dedup();
        IndexSet { horizon: self.horizon.max(other.horizon), indices }
    }

    pub fn is_subset(&self, other: &IndexSet) -> bool {
        self.indices.iter().all(|&i| other.contains(i))
    }

    /// Exact counting density at every checkpoint in `[n0, horizon]`.
    pub fn density_profile(&self, n0: u64) -> Result<DensityReport> {
        if n0 == 0 || n0 > self.horizon {
            return Err(Error::Argument(format!("window start {n0} outside [1, {}]", self.horizon)));
        }
        let mut profile = Vec::with_capacity((self.horizon - n0 + 1) as usize);
        let mut count = self.count_up_to(n0 - 1);
        let mut next = count as usize;
        let mut min: Option<(u64, u64)> = None;
        let mut max: Option<(u64, u64)> = None;
        // Compare count/n without building rationals on the hot path.
        let below = |a: (u64, u64), b: (u64, u64)| (a.0 as u128) * (b.1 as u128) < (b.0 as u128) * (a.1 as u128);
        for n in n0..=self.horizon {
            if self.indices.get(next) == Some(&n) {
                count += 1;
                next += 1;
            }
            profile.push(DensityPoint { n, count });
            if min.is_none_or(|m| below((count, n), m)) {
                min = Some((count, n));
            }
            if max.is_none_or(|m| below(m, (count, n))) {
                max = Some((count, n));
            }
        }
        let point = |(c, n): (u64, u64)| Extreme { n, density: Rational::from_ratio(c as i64, n as i64) };
        Ok(DensityReport {
            horizon: self.horizon,
            window_start: n0,
            finite_horizon_min: point(min.expect("window is non-empty")),
            finite_horizon_max: point(max.expect("window is non-empty")),
            profile,
        })
    }

    /// Profile over the default window `[max(1, H/2), H]`.
    pub fn default_profile(&self) -> Result<DensityReport> {
        self.density_profile((self.horizon / 2).max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityPoint {
    pub n: u64,
    pub count: u64,
}

impl DensityPoint {
    pub fn density(&self) -> Rational {
        Rational::from_ratio(self.count as i64, self.n as i64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extreme {
    pub n: u64,
    pub density: Rational,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub horizon: u64,
    pub window_start: u64,
    pub finite_horizon_min: Extreme,
    pub finite_horizon_max: Extreme,
    pub profile: Vec<DensityPoint>,
}

impl DensityReport {
    pub fn at(&self, n: u64) -> Option<Rational> {
        let i = n.checked_sub(self.window_start)? as usize;
        self.profile.get(i).map(DensityPoint::density)
    }

    /// Plain-text table with columns `N`, `count`, `density`.
    pub fn to_table(&self) -> String {
        let mut out = String::from("# finite-horizon counting density\n# N\tcount\tdensity\n");
        for p in &self.profile {
            let _ = writeln!(out, "{}\t{}\t{:.6}", p.n, p.count, p.count as f64 / p.n as f64);
        }
        out
    }
}

/// 2-adic valuation `ν₂(n)`, `n ≥ 1`.
pub fn nu2(n: u64) -> u32 {
    n.trailing_zeros()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> Rational {
        s.parse().unwrap()
    }

    #[test]
    fn counting_density_examples() {
        let evens = IndexSet::from_predicate(100, |n| n % 2 == 0);
        assert_eq!(evens.counting_density(10).unwrap(), q("1/2"));
        let nu_one = IndexSet::from_predicate(100, |n| nu2(n) == 1);
        assert_eq!(&nu_one.indices()[..3], &[2, 6, 10]);
        assert_eq!(nu_one.counting_density(8).unwrap(), q("1/4"));
        let powers = IndexSet::from_predicate(1024, |n| n.is_power_of_two() && n > 1);
        assert_eq!(powers.counting_density(1024).unwrap(), q("10/1024"));
        assert!(evens.counting_density(0).is_err());
        assert!(evens.counting_density(101).is_err());
    }

    #[test]
    fn validation() {
        assert!(IndexSet::new(10, vec![1, 3, 3]).is_err());
        assert!(IndexSet::new(10, vec![0, 3]).is_err());
        assert!(IndexSet::new(10, vec![11]).is_err());
        assert!(IndexSet::new(10, vec![1, 10]).is_ok());
    }

    #[test]
    fn profile_of_evens() {
        let evens = IndexSet::from_predicate(100, |n| n % 2 == 0);
        let r = evens.density_profile(1).unwrap();
        assert_eq!(r.finite_horizon_min.density, q("0"));
        assert_eq!(r.finite_horizon_max.density, q("1/2"));
        let r = evens.density_profile(2).unwrap();
        assert_eq!(r.finite_horizon_min.density, q("1/3"));
        for n in (2..=100).step_by(2) {
            assert_eq!(r.at(n).unwrap(), q("1/2"));
        }
    }

    #[test]
    fn factorial_blocks_reach_high_upper_density() {
        let fact = |k: u64| (1..=k).product::<u64>();
        let horizon = fact(8);
        let a = IndexSet::from_predicate(horizon, |n| (1..=4).any(|j| fact(2 * j - 1) <= n && n < fact(2 * j)));
        let r = a.density_profile(1).unwrap();
        for j in 1..=4 {
            let end = fact(2 * j);
            let floor = Rational::one() - Rational::from_ratio(fact(2 * j - 1) as i64, end as i64);
            // The block is half-open, so `end` itself is not a member.
            let at = a.counting_density(end - 1).unwrap();
            assert!(at >= floor - Rational::from_ratio(1, end as i64), "j = {j}");
            assert!(r.at(end - 1).unwrap() <= r.finite_horizon_max.density);
        }
    }

    #[test]
    fn empty_set_profile() {
        let r = IndexSet::empty(50).density_profile(1).unwrap();
        assert!(r.profile.iter().all(|p| p.count == 0));
        assert_eq!(r.finite_horizon_max.density, q("0"));
    }

    #[test]
    fn set_operations_and_table() {
        let a = IndexSet::from_predicate(20, |n| n % 4 == 1);
        let b = IndexSet::from_predicate(20, |n| n % 4 == 3);
        assert!(a.is_disjoint(&b));
        let u = a.union(&b);
        assert!(a.is_subset(&u));
        assert_eq!(u.counting_density(20).unwrap(), a.counting_density(20).unwrap() + b.counting_density(20).unwrap());
        let table = u.density_profile(18).unwrap().to_table();
        assert!(table.contains("20\t10\t0.500000"));
    }
}
