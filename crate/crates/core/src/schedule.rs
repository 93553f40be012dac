//! Visit schedules: which target the builder steers toward at each level.
//!
//! Level `t_start` of a block is the first level produced toward its target.
//! After `j` steered levels the unmatched measure is at most `μ^j`, so a hold
//! beginning `L = transition_length(ε)` levels into the block already sits
//! inside the `ε`-ball.

use serde::{Deserialize, Serialize};

use crate::density::{nu2, IndexSet};
use crate::error::{Error, Result};
use crate::rational::Rational;
use crate::tree::TreeConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    /// 1-based index into the target list.
    pub target: usize,
    pub eps: Rational,
    /// `[t_start, t_end]`; empty when `t_end = t_start − 1`.
    pub transition: [u64; 2],
    pub hold: [u64; 2],
}

impl Block {
    pub fn t_start(&self) -> u64 {
        self.transition[0]
    }

    pub fn start(&self) -> u64 {
        self.transition[0]
    }

    pub fn end(&self) -> u64 {
        self.hold[1]
    }

    pub fn holds(&self, n: u64) -> bool {
        self.hold[0] <= n && n <= self.hold[1]
    }

    pub fn covers(&self, n: u64) -> bool {
        self.start() <= n && n <= self.end()
    }

    pub fn hold_len(&self) -> u64 {
        self.hold[1] + 1 - self.hold[0]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub horizon: u64,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Initial,
    Transition,
    Hold,
    Tail,
}

/// Least `L ≥ 1` with `μ^L ≤ ε`, i.e. `⌈ln(1/ε)/ln(1/μ)⌉`, computed exactly.
pub fn transition_length(tree: &TreeConfig, eps: &Rational) -> Result<u64> {
    contraction_length(&tree.mu(), eps)
}

pub(crate) fn contraction_length(mu: &Rational, eps: &Rational) -> Result<u64> {
    if !eps.is_positive() || *eps >= Rational::one() {
        return Err(Error::Argument(format!("tolerance {eps} must lie in (0, 1)")));
    }
    let mut power = mu.clone();
    let mut l = 1;
    while power > *eps {
        power = &power * mu;
        l += 1;
    }
    Ok(l)
}

/// Block boundaries `N_1 < N_2 < …` for class-X schedules.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Growth {
    /// `N_j = j · N_{j−1}`.
    Factorial { n1: u64 },
    Explicit { boundaries: Vec<u64> },
}

impl Default for Growth {
    fn default() -> Self {
        Growth::Factorial { n1: 1 }
    }
}

impl Growth {
    /// Boundaries up to and including the first one reaching `horizon`.
    pub fn boundaries(&self, horizon: u64) -> Result<Vec<u64>> {
        let mut out = Vec::new();
        match self {
            Growth::Factorial { n1 } => {
                if *n1 == 0 {
                    return Err(Error::Argument("N_1 must be positive".into()));
                }
                let mut n = *n1;
                let mut j = 1;
                loop {
                    out.push(n);
                    if n >= horizon {
                        break;
                    }
                    j += 1;
                    let next = n.checked_mul(j).ok_or_else(|| Error::Argument("block boundary overflow".into()))?;
                    if next <= n {
                        return Err(Error::Argument("block boundaries must increase".into()));
                    }
                    n = next;
                }
            }
            Growth::Explicit { boundaries } => {
                if boundaries.first() == Some(&0) || boundaries.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Argument("block boundaries must be positive and increasing".into()));
                }
                for &b in boundaries {
                    out.push(b);
                    if b >= horizon {
                        break;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct XBlockInfo {
    /// Block number `j`, counting blocks folded into the initial segment.
    pub j: u64,
    pub target: usize,
    pub start: u64,
    pub end: u64,
    pub scheduled: bool,
}

/// Class-X schedule together with its nominal block structure.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct XSchedule {
    pub schedule: Schedule,
    pub blocks: Vec<XBlockInfo>,
}

impl XSchedule {
    /// `1 − N_{j−1}/N_j − L/N_j` for a scheduled block.
    pub fn density_floor(&self, tree: &TreeConfig, info: &XBlockInfo) -> Result<Rational> {
        let block = self
            .schedule
            .blocks
            .iter()
            .find(|b| b.end() == info.end)
            .ok_or_else(|| Error::Argument(format!("block {} is not scheduled", info.j)))?;
        let l = transition_length(tree, &block.eps)?;
        let end = info.end as i64;
        Ok(Rational::one() - Rational::from_ratio((info.start - 1) as i64, end) - Rational::from_ratio(l as i64, end))
    }
}

/// Cyclic block schedule with growing blocks: block `j` covers
/// `(N_{j−1}, N_j]` and steers toward target `((j−1) mod K) + 1`. Blocks too
/// short for their transition, or starting below their target's level, are
/// left to constant extension.
pub fn make_x_schedule(
    tree: &TreeConfig,
    target_levels: &[usize],
    eps: &[Rational],
    horizon: u64,
    growth: &Growth,
) -> Result<XSchedule> {
    let k = target_levels.len();
    if k == 0 {
        return Err(Error::Argument("at least one target is required".into()));
    }
    if eps.len() != k {
        return Err(Error::Argument(format!("{} tolerances for {k} targets", eps.len())));
    }
    let lengths: Vec<u64> = eps.iter().map(|e| transition_length(tree, e)).collect::<Result<_>>()?;
    let mut blocks = Vec::new();
    let mut infos = Vec::new();
    let mut prev = 0u64;
    for (j, &boundary) in growth.boundaries(horizon)?.iter().enumerate() {
        let end = boundary.min(horizon);
        let target = j % k;
        let start = prev + 1;
        let hold_start = prev + lengths[target];
        let scheduled = hold_start <= end && target_levels[target] as u64 <= start;
        if scheduled {
            blocks.push(Block {
                target: target + 1,
                eps: eps[target].clone(),
                transition: [start, hold_start - 1],
                hold: [hold_start, end],
            });
        }
        infos.push(XBlockInfo { j: j as u64 + 1, target: target + 1, start, end, scheduled });
        prev = end;
        if end >= horizon {
            break;
        }
    }
    for t in 1..=k {
        if !blocks.iter().any(|b| b.target == t) {
            return Err(Error::Schedule(format!(
                "horizon {horizon} leaves target {t} without a block long enough for its transition of {} levels",
                lengths[t - 1]
            )));
        }
    }
    let schedule = Schedule { horizon, blocks };
    schedule.validate(tree, target_levels)?;
    Ok(XSchedule { schedule, blocks: infos })
}

/// Frequent-visit schedule: pair `k` is held exactly at the levels
/// `m·{i : ν₂(i) = k−1}` (the last pair takes `ν₂(i) ≥ K−1`), each hold
/// preceded by a transition filling the gap of length `m`.
pub fn make_fm_schedule(
    tree: &TreeConfig,
    pairs: &[(usize, Rational)],
    target_levels: &[usize],
    stride: u64,
    horizon: u64,
) -> Result<Schedule> {
    let k = pairs.len();
    if k == 0 {
        return Err(Error::Argument("at least one pair is required".into()));
    }
    if stride == 0 {
        return Err(Error::Schedule("stride must be positive".into()));
    }
    for (target, eps) in pairs {
        let l = transition_length(tree, eps)?;
        if stride < l {
            return Err(Error::Schedule(format!(
                "stride {stride} is below the transition length {l} required for ε = {eps} (target {target})"
            )));
        }
    }
    let mut blocks = Vec::new();
    for i in 1..=horizon / stride {
        let v = stride * i;
        let pair = (nu2(i) as usize).min(k - 1);
        let (target, eps) = &pairs[pair];
        blocks.push(Block { target: *target, eps: eps.clone(), transition: [v - stride + 1, v - 1], hold: [v, v] });
    }
    for (target, _) in pairs {
        if !blocks.iter().any(|b| b.target == *target) {
            return Err(Error::Schedule(format!(
                "horizon {horizon} leaves target {target} without a hold at stride {stride}"
            )));
        }
    }
    let schedule = Schedule { horizon, blocks };
    schedule.validate(tree, target_levels)?;
    Ok(schedule)
}

/// The FM index set of pair `k` (1-based) among `count` pairs.
pub fn fm_scheduled_set(k: usize, count: usize, stride: u64, horizon: u64) -> IndexSet {
    IndexSet::from_predicate(horizon, |n| {
        n % stride == 0 && {
            let v = nu2(n / stride) as usize;
            if k == count {
                v + 1 >= k
            } else {
                v + 1 == k
            }
        }
    })
}

impl Schedule {
    pub fn empty(horizon: u64) -> Self {
        Schedule { horizon, blocks: Vec::new() }
    }

    pub fn target_count(&self) -> usize {
        self.blocks.iter().map(|b| b.target).max().unwrap_or(0)
    }

    /// Checks ordering, tiling and transition budgets.
    pub fn validate(&self, tree: &TreeConfig, target_levels: &[usize]) -> Result<()> {
        if self.horizon as u128 > tree.depth_cap() as u128 {
            return Err(Error::Cap(format!("horizon {} exceeds the depth cap {}", self.horizon, tree.depth_cap())));
        }
        let mut prev_end = 0u64;
        for (i, b) in self.blocks.iter().enumerate() {
            let [t0, t1] = b.transition;
            let [h0, h1] = b.hold;
            let at = |msg: String| Error::Schedule(format!("block {}: {msg}", i + 1));
            if b.target == 0 || b.target > target_levels.len() {
                return Err(at(format!("target {} is not among the {} targets", b.target, target_levels.len())));
            }
            if t0 == 0 {
                return Err(at("levels start at 1; level 0 is the root".into()));
            }
            if t1 + 1 != h0 || t0 > h0 {
                return Err(at(format!("transition [{t0}, {t1}] must end right before the hold starting at {h0}")));
            }
            if h0 > h1 {
                return Err(at(format!("empty hold [{h0}, {h1}]")));
            }
            if t0 <= prev_end {
                return Err(at(format!("starts at level {t0}, overlapping the previous block ending at {prev_end}")));
            }
            if h1 > self.horizon {
                return Err(at(format!("hold ends at {h1}, beyond the horizon {}", self.horizon)));
            }
            let l = transition_length(tree, &b.eps)?;
            if h0 - t0 + 1 < l {
                return Err(at(format!(
                    "transition budget exceeded: hold starts {} levels into the block, ε = {} needs {l}",
                    h0 - t0 + 1,
                    b.eps
                )));
            }
            let k = target_levels[b.target - 1] as u64;
            if k > t0 {
                return Err(at(format!("target level {k} exceeds the block start {t0}")));
            }
            prev_end = h1;
        }
        Ok(())
    }

    /// Block index and phase of level `n ≥ 1`.
    pub fn locate(&self, n: u64) -> (Option<usize>, Phase) {
        let i = self.blocks.partition_point(|b| b.end() < n);
        match self.blocks.get(i) {
            Some(b) if b.covers(n) => (Some(i), if b.holds(n) { Phase::Hold } else { Phase::Transition }),
            _ if i == 0 => (None, Phase::Initial),
            _ => (Some(i - 1), Phase::Tail),
        }
    }

    /// Hold levels of each target (1-based targets, index `k − 1`).
    pub fn scheduled_sets(&self, targets: usize) -> Vec<IndexSet> {
        let mut sets = vec![Vec::new(); targets];
        for b in &self.blocks {
            sets[b.target - 1].extend(b.hold[0]..=b.hold[1]);
        }
        sets.into_iter().map(|s| IndexSet::new(self.horizon, s).expect("blocks are increasing")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> Rational {
        s.parse().unwrap()
    }

    #[test]
    fn transition_lengths() {
        let binary = TreeConfig::binary(8);
        assert_eq!(transition_length(&binary, &q("1/2")).unwrap(), 1);
        assert_eq!(transition_length(&binary, &q("1/100")).unwrap(), 7);
        assert_eq!(transition_length(&binary, &q("1/5")).unwrap(), 3);
        let thirds = TreeConfig::uniform(&[q("1/3"), q("2/3")], 8).unwrap();
        assert_eq!(transition_length(&thirds, &q("1/9")).unwrap(), 2);
        assert!(transition_length(&binary, &q("1")).is_err());
    }

    #[test]
    fn x_schedule_single_target() {
        let t = TreeConfig::binary(200);
        let x = make_x_schedule(&t, &[1], &[q("1/10")], 100, &Growth::Factorial { n1: 100 }).unwrap();
        assert_eq!(x.schedule.blocks.len(), 1);
        assert_eq!(x.schedule.blocks[0].hold, [4, 100]);
    }

    #[test]
    fn x_schedule_factorial_blocks() {
        let t = TreeConfig::binary(6000);
        let x = make_x_schedule(&t, &[1, 1], &[q("1/10"), q("1/10")], 5040, &Growth::default()).unwrap();
        let last = x.schedule.blocks.last().unwrap();
        assert_eq!((last.target, last.transition, last.hold), (1, [721, 723], [724, 5040]));
        let info = x.blocks.last().unwrap();
        let floor = x.density_floor(&t, info).unwrap();
        assert_eq!(floor, Rational::one() - q("720/5040") - q("4/5040"));
        // Blocks (1,2] and (0,1] are too short for four levels.
        assert!(!x.blocks[0].scheduled && !x.blocks[1].scheduled);
        assert!(x.blocks[2..].iter().all(|b| b.scheduled));
    }

    #[test]
    fn x_schedule_three_targets() {
        let t = TreeConfig::binary(20000);
        let x = make_x_schedule(&t, &[1, 1, 1], &vec![q("1/10"); 3], 10_000, &Growth::default()).unwrap();
        for k in 1..=3 {
            assert!(x.schedule.blocks.iter().any(|b| b.target == k));
        }
        assert!(matches!(make_x_schedule(&t, &[1, 1], &vec![q("1/10"); 2], 3, &Growth::default()), Err(Error::Schedule(_))));
    }

    #[test]
    fn fm_schedule_sets() {
        let t = TreeConfig::binary(100);
        let s = make_fm_schedule(&t, &[(1, q("1/2")), (2, q("1/2"))], &[0, 0], 4, 48).unwrap();
        let sets = s.scheduled_sets(2);
        assert_eq!(sets[0].indices(), &[4, 12, 20, 28, 36, 44]);
        assert_eq!(sets[1].indices(), &[8, 16, 24, 32, 40, 48]);
        assert_eq!(sets[0], fm_scheduled_set(1, 2, 4, 48));
        assert_eq!(sets[1], fm_scheduled_set(2, 2, 4, 48));
        assert!(sets[0].is_disjoint(&sets[1]));
        let one = make_fm_schedule(&t, &[(1, q("1/2"))], &[0], 1, 20).unwrap();
        assert_eq!(one.scheduled_sets(1)[0].len(), 20);
        let err = make_fm_schedule(&t, &[(1, q("1/10"))], &[0], 3, 20).unwrap_err();
        assert!(err.to_string().contains("transition length 4"), "{err}");
    }

    #[test]
    fn validation_catches_bad_blocks() {
        let t = TreeConfig::binary(50);
        let ok = Block { target: 1, eps: q("1/5"), transition: [1, 2], hold: [3, 5] };
        assert!(Schedule { horizon: 10, blocks: vec![ok.clone()] }.validate(&t, &[1]).is_ok());
        let short = Block { hold: [2, 5], transition: [1, 1], ..ok.clone() };
        assert!(matches!(Schedule { horizon: 10, blocks: vec![short] }.validate(&t, &[1]), Err(Error::Schedule(_))));
        let early = Block { transition: [1, 2], ..ok.clone() };
        assert!(Schedule { horizon: 10, blocks: vec![early] }.validate(&t, &[2]).is_err());
        let overlap = Block { transition: [5, 6], hold: [7, 9], ..ok.clone() };
        assert!(Schedule { horizon: 10, blocks: vec![ok.clone(), overlap] }.validate(&t, &[1]).is_err());
        assert!(matches!(Schedule { horizon: 51, blocks: vec![] }.validate(&t, &[]), Err(Error::Cap(_))));
    }

    #[test]
    fn locate_levels() {
        let s = Schedule {
            horizon: 20,
            blocks: vec![
                Block { target: 1, eps: q("1/5"), transition: [3, 5], hold: [6, 8] },
                Block { target: 1, eps: q("1/5"), transition: [12, 14], hold: [15, 15] },
            ],
        };
        assert_eq!(s.locate(1), (None, Phase::Initial));
        assert_eq!(s.locate(3), (Some(0), Phase::Transition));
        assert_eq!(s.locate(8), (Some(0), Phase::Hold));
        assert_eq!(s.locate(10), (Some(0), Phase::Tail));
        assert_eq!(s.locate(15), (Some(1), Phase::Hold));
        assert_eq!(s.locate(20), (Some(1), Phase::Tail));
    }

    #[test]
    fn schedule_json_round_trip() {
        let t = TreeConfig::binary(100);
        let s = make_fm_schedule(&t, &[(1, q("1/10")), (2, q("1/10"))], &[1, 1], 8, 64).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"eps\":\"1/10\""));
        assert_eq!(serde_json::from_str::<Schedule>(&text).unwrap(), s);
    }
}
