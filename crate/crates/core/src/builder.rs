//! Level-by-level construction of harmonic truncations that follow a visit
//! schedule.
//!
//! Inside a block every father sends all children but one to the target's
//! sector constant; the remaining correction child takes the value forced by
//! the harmonic identity. A father already carrying its constant extends
//! constantly, so the unmatched measure contracts by `μ` per level. Outside
//! blocks the function is extended constantly.
//!
//! Nodes are shared between vertices with the same class, depth-`K` sector
//! and value (`K` the deepest target level), which keeps each level small.

use rustc_hash::FxHashMap;
use std::sync::Arc;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::density::{DensityReport, IndexSet};
use crate::error::{Error, Result};
use crate::harmonic::{CorrectionPolicy, HarmonicTruncation, Layer, Node};
use crate::measure::{same_tree, SimpleFunction};
use crate::rational::Rational;
use crate::scalar::{bounded_exact, separation, Mode, Scalar};
use crate::schedule::{Phase, Schedule};
use crate::sweep::{check_frame, locate_node, sector_values, Frame, LevelSource, MassSweep, Probe};
use crate::tree::{ClassId, TreeConfig, VertexId};

/// Exact `P` values are logged up to this level.
pub const EXACT_P_LEVELS: usize = 16;

/// Stored truncations larger than this are dropped and replayed on demand.
pub const DEFAULT_STORE_BUDGET: usize = 256 << 20;

/// Tolerance when comparing independently recomputed float `P` values.
pub const P_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Target<S: Scalar> {
    pub h: SimpleFunction<S>,
    pub label: String,
}

impl<S: Scalar> Target<S> {
    pub fn new(h: SimpleFunction<S>, label: impl Into<String>) -> Self {
        Target { h, label: label.into() }
    }

    pub fn level(&self) -> usize {
        self.h.level()
    }

    pub fn to_json(&self) -> Json {
        json!({"label": self.label, "h": self.h.to_json()})
    }

    pub fn from_json(tree: Arc<TreeConfig>, doc: &Json) -> Result<Self> {
        let label = doc.get("label").and_then(Json::as_str).unwrap_or_default().to_string();
        let h = doc.get("h").ok_or_else(|| Error::Parse("target without \"h\"".into()))?;
        Ok(Target { h: SimpleFunction::from_json(tree, h)?, label })
    }
}

/// Everything needed to run, and later replay, a build.
#[derive(Clone, Debug)]
pub struct BuildSpec<S: Scalar> {
    pub tree: Arc<TreeConfig>,
    pub targets: Vec<Target<S>>,
    pub schedule: Schedule,
    pub initial: Vec<S>,
    pub policy: CorrectionPolicy,
    /// Number of equal coordinate groups reported separately (joint builds).
    pub groups: usize,
}

impl<S: Scalar> BuildSpec<S> {
    pub fn new(tree: Arc<TreeConfig>, targets: Vec<Target<S>>, schedule: Schedule, initial: Vec<S>) -> Self {
        BuildSpec { tree, targets, schedule, initial, policy: CorrectionPolicy::default(), groups: 1 }
    }

    pub fn with_policy(mut self, policy: CorrectionPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn m(&self) -> usize {
        self.initial.len()
    }

    pub fn horizon(&self) -> usize {
        self.schedule.horizon as usize
    }

    /// Deepest target level.
    pub fn sector_depth(&self) -> usize {
        self.targets.iter().map(Target::level).max().unwrap_or(0)
    }

    /// `max_x q(x, y*(x))` for the chosen correction children.
    pub fn mu(&self) -> Rational {
        (0..self.tree.classes().len())
            .map(|c| self.tree.class(c as ClassId).q[self.policy.choose(&self.tree, c as ClassId)].clone())
            .fold(Rational::zero(), Rational::max)
    }

    fn check(&self) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return Err(Error::Shape("the initial value has no coordinates".into()));
        }
        if self.groups == 0 || !m.is_multiple_of(self.groups) {
            return Err(Error::Shape(format!("{m} coordinates do not split into {} groups", self.groups)));
        }
        for t in &self.targets {
            if t.h.m() != m || !same_tree(t.h.tree(), &self.tree) {
                return Err(Error::Shape(format!("target {:?} does not match the build", t.label)));
            }
        }
        let levels: Vec<usize> = self.targets.iter().map(Target::level).collect();
        self.schedule.validate(&self.tree, &levels)
    }

    /// Tolerance used for target `k` (1-based) outside its own blocks: the
    /// smallest scheduled one.
    pub fn target_eps(&self, k: usize) -> Option<Rational> {
        self.schedule.blocks.iter().filter(|b| b.target == k).map(|b| b.eps.clone()).reduce(Rational::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub level: u64,
    /// 0-based block index; the last block during a tail.
    pub block: Option<usize>,
    pub phase: Phase,
    /// 1-based target the level is measured against.
    pub target: Option<usize>,
    pub p_value: Option<f64>,
    pub p_exact: Option<Rational>,
    /// `P` per coordinate group.
    pub group_p: Vec<f64>,
    /// `P` against every target.
    pub p_all: Vec<f64>,
    pub unmatched: Option<Rational>,
    /// `μ^j`, `j` levels into the block.
    pub bound: Option<Rational>,
}

/// Bookkeeping for a node of the current level.
struct Meta {
    /// Vertex index at depth `min(n, K)`.
    vertex: u32,
    /// Mass times `Q^{max(n, K)}`.
    num: BigInt,
    mass: f64,
}

struct Child<S: Scalar> {
    class: ClassId,
    vertex: u32,
    value: Box<[S]>,
    num: BigInt,
    mass: f64,
}

/// One `P` evaluation: target index and coordinate range.
struct ProbeSpec {
    target: usize,
    coords: std::ops::Range<usize>,
    exact: bool,
}

struct Measured {
    p: f64,
    exact: Option<Rational>,
    unmatched: BigInt,
}

fn point_hash<S: Scalar>(value: &[S]) -> u64 {
    use std::hash::Hasher;
    let mut h = rustc_hash::FxHasher::default();
    for x in value {
        x.hash_quick(&mut h);
    }
    h.finish()
}

/// Precomputed shape of the first `K` levels.
struct Prefix {
    k: usize,
    q_scaled: Vec<Vec<BigInt>>,
    q_f64: Vec<Vec<f64>>,
    q_lcm: BigInt,
    /// `first_child[d][x]`: index at depth `d + 1` of the first child.
    first_child: Vec<Vec<u32>>,
    /// `ranges[d][x]`: depth-`K` descendants of vertex `x` at depth `d`.
    ranges: Vec<Vec<(u32, u32)>>,
    sector_num: Vec<BigInt>,
    sector_mass: Vec<f64>,
}

impl Prefix {
    fn new(tree: &TreeConfig, k: usize) -> Result<Self> {
        let mut q_lcm = BigInt::one();
        for class in tree.classes() {
            for q in &class.q {
                q_lcm = q_lcm.lcm(q.denom());
            }
        }
        let q_scaled = tree
            .classes()
            .iter()
            .map(|c| c.q.iter().map(|q| q.numer() * (&q_lcm / q.denom())).collect())
            .collect();
        let q_f64 = tree.classes().iter().map(|c| c.q.iter().map(Rational::to_f64).collect()).collect();
        let mut first_child = Vec::with_capacity(k);
        let mut counts: Vec<Vec<u32>> = Vec::with_capacity(k + 1);
        for d in 0..k {
            let (classes, _) = tree.level_classes(d)?;
            let mut next = 0u32;
            let firsts = classes
                .iter()
                .map(|&c| {
                    let f = next;
                    next += tree.class(c).branching() as u32;
                    f
                })
                .collect();
            first_child.push(firsts);
        }
        let (_, measures) = tree.level_classes(k)?;
        counts.push(vec![1; measures.len()]);
        for d in (0..k).rev() {
            let below = counts.last().expect("nonempty");
            let (classes, _) = tree.level_classes(d)?;
            let row = classes
                .iter()
                .zip(&first_child[d])
                .map(|(&c, &f)| (f..f + tree.class(c).branching() as u32).map(|y| below[y as usize]).sum())
                .collect();
            counts.push(row);
        }
        counts.reverse();
        let ranges = counts
            .iter()
            .map(|row| {
                let mut start = 0;
                row.iter()
                    .map(|&c| {
                        let r = (start, start + c);
                        start += c;
                        r
                    })
                    .collect()
            })
            .collect();
        let scale = num_traits::pow(q_lcm.clone(), k);
        let sector_num = measures.iter().map(|p| p.numer() * &scale / p.denom()).collect();
        let sector_mass = measures.iter().map(Rational::to_f64).collect();
        Ok(Prefix { k, q_scaled, q_f64, q_lcm, first_child, ranges, sector_num, sector_mass })
    }

    fn range(&self, n: usize, vertex: u32) -> (u32, u32) {
        if n >= self.k {
            (vertex, vertex + 1)
        } else {
            self.ranges[n][vertex as usize]
        }
    }

    fn denominator(&self, n: usize) -> BigInt {
        num_traits::pow(self.q_lcm.clone(), n.max(self.k))
    }
}

/// Runs a build one level at a time.
pub struct Builder<S: Scalar> {
    spec: BuildSpec<S>,
    prefix: Prefix,
    /// Target values per depth-`K` sector, one row per target.
    sector_targets: Vec<Vec<S>>,
    mu: Rational,
    level: usize,
    meta: Vec<Meta>,
    /// Node layers; the last is the current level.
    layers: Vec<Layer<S>>,
    /// Level of `layers[0]`.
    first: usize,
    keep: bool,
    budget: usize,
    footprint: usize,
}

fn layer_footprint<S: Scalar>(layer: &Layer<S>) -> usize {
    layer
        .iter()
        .map(|n| std::mem::size_of::<Node<S>>() + n.value.iter().map(Scalar::footprint).sum::<usize>() + 4 * n.children.len())
        .sum()
}

#[cfg(feature = "parallel")]
fn map_nodes<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    if items.len() < 64 || rayon::current_num_threads() < 2 {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn map_nodes<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}

impl<S: Scalar> Builder<S> {
    pub fn new(spec: BuildSpec<S>, keep: bool) -> Result<Self> {
        spec.check()?;
        let k = spec.sector_depth();
        let prefix = Prefix::new(&spec.tree, k)?;
        let sector_targets = spec.targets.iter().map(|t| sector_values(&t.h, k)).collect::<Result<_>>()?;
        let layer = vec![Node {
            class: spec.tree.root_class(),
            value: spec.initial.clone().into_boxed_slice(),
            children: Box::new([]),
        }];
        let meta = vec![Meta { vertex: 0, num: prefix.denominator(0), mass: 1.0 }];
        let footprint = layer_footprint(&layer);
        Ok(Builder {
            mu: spec.mu(),
            spec,
            prefix,
            sector_targets,
            level: 0,
            meta,
            layers: vec![layer],
            first: 0,
            keep,
            budget: DEFAULT_STORE_BUDGET,
            footprint,
        })
    }

    pub fn with_budget(mut self, bytes: usize) -> Self {
        self.budget = bytes;
        self
    }

    pub fn spec(&self) -> &BuildSpec<S> {
        &self.spec
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn is_done(&self) -> bool {
        self.level >= self.spec.horizon()
    }

    pub fn mu(&self) -> &Rational {
        &self.mu
    }

    /// `true` while every layer so far is retained.
    pub fn keeps_layers(&self) -> bool {
        self.keep
    }

    /// Current level as a stream frame.
    pub fn frame(&self) -> Frame<'_, S> {
        let last = self.layers.len() - 1;
        Frame {
            depth: self.level,
            parent: if self.level == 0 { None } else { Some(&self.layers[last - 1]) },
            layer: &self.layers[last],
        }
    }

    fn current(&self) -> &Layer<S> {
        self.layers.last().expect("current layer")
    }

    fn children_of(&self, node: &Node<S>, meta: &Meta, target: Option<usize>) -> Vec<Child<S>> {
        let tree = &self.spec.tree;
        let n = self.level;
        let p = &self.prefix;
        let class = tree.class(node.class);
        let b = class.branching();
        let vertex = |i: usize| if n < p.k { p.first_child[n][meta.vertex as usize] + i as u32 } else { meta.vertex };
        let mass = |i: usize| -> (BigInt, f64) {
            if n < p.k {
                let (lo, hi) = p.range(n + 1, vertex(i));
                let num = (lo..hi).map(|s| &p.sector_num[s as usize]).sum();
                (num, (lo..hi).map(|s| p.sector_mass[s as usize]).sum())
            } else {
                (&meta.num * &p.q_scaled[node.class as usize][i], meta.mass * p.q_f64[node.class as usize][i])
            }
        };
        let mut values: Vec<Box<[S]>> = match target {
            None => vec![node.value.clone(); b],
            Some(t) => {
                let m = self.spec.m();
                let row = &self.sector_targets[t];
                let goal = |i: usize| {
                    let s = p.range(n + 1, vertex(i)).0 as usize;
                    &row[s * m..(s + 1) * m]
                };
                if (0..b).all(|i| goal(i) == &*node.value) {
                    vec![node.value.clone(); b]
                } else {
                    let star = self.spec.policy.choose(tree, node.class);
                    let mut forced = node.value.to_vec();
                    for i in (0..b).filter(|&i| i != star) {
                        let w = S::from_crat(&class.w[i]);
                        for (a, y) in forced.iter_mut().zip(goal(i)) {
                            if !y.is_zero() {
                                *a = a.minus(&w.times(y));
                            }
                        }
                    }
                    let w_star = S::from_crat(&class.w[star]);
                    let forced: Box<[S]> = forced.iter().map(|a| a.over(&w_star)).collect();
                    let mut out: Vec<Box<[S]>> =
                        (0..b).map(|i| if i == star { Box::default() } else { goal(i).into() }).collect();
                    out[star] = forced;
                    out
                }
            }
        };
        values
            .drain(..)
            .enumerate()
            .map(|(i, value)| {
                let (num, mass) = mass(i);
                Child { class: class.children[i], vertex: vertex(i), value, num, mass }
            })
            .collect()
    }

    /// Produces the next level and its log record.
    pub fn step(&mut self) -> Result<LevelRecord> {
        if self.is_done() {
            return Err(Error::Argument(format!("the horizon {} is reached", self.spec.horizon())));
        }
        let next_level = self.level as u64 + 1;
        let (block, phase) = self.spec.schedule.locate(next_level);
        let steer = match phase {
            Phase::Transition | Phase::Hold => block.map(|i| self.spec.schedule.blocks[i].target - 1),
            _ => None,
        };
        let pairs: Vec<(&Node<S>, &Meta)> = self.current().iter().zip(&self.meta).collect();
        let families = map_nodes(&pairs, |(node, meta)| self.children_of(node, meta, steer));
        drop(pairs);
        // Keyed by class, sector, value hash and collision ordinal.
        let mut index: FxHashMap<(ClassId, u32, u64, u32), u32> = FxHashMap::default();
        let mut layer: Layer<S> = Vec::new();
        let mut meta: Vec<Meta> = Vec::new();
        let mut links: Vec<Box<[u32]>> = Vec::with_capacity(families.len());
        for kids in families {
            let row = kids
                .into_iter()
                .map(|kid| {
                    let h = point_hash(&kid.value);
                    let mut ordinal = 0;
                    loop {
                        match index.get(&(kid.class, kid.vertex, h, ordinal)) {
                            Some(&at) if layer[at as usize].value == kid.value => {
                                let slot = &mut meta[at as usize];
                                slot.num += kid.num;
                                slot.mass += kid.mass;
                                return at;
                            }
                            Some(_) => ordinal += 1,
                            None => {
                                let at = layer.len() as u32;
                                index.insert((kid.class, kid.vertex, h, ordinal), at);
                                layer.push(Node { class: kid.class, value: kid.value, children: Box::new([]) });
                                meta.push(Meta { vertex: kid.vertex, num: kid.num, mass: kid.mass });
                                return at;
                            }
                        }
                    }
                })
                .collect();
            links.push(row);
        }
        let parent = self.layers.last_mut().expect("current layer");
        for (node, row) in parent.iter_mut().zip(links) {
            node.children = row;
        }
        self.level += 1;
        self.meta = meta;
        if self.keep {
            self.footprint += layer_footprint(&layer);
            if self.footprint > self.budget {
                self.keep = false;
            }
        }
        self.layers.push(layer);
        if !self.keep && self.layers.len() > 2 {
            let drop = self.layers.len() - 2;
            self.layers.drain(..drop);
            self.first += drop;
        }
        Ok(self.record(block, phase))
    }

    fn measure(&self, probes: &[ProbeSpec]) -> Vec<Measured> {
        let n = self.level;
        let p = &self.prefix;
        let m = self.spec.m();
        let mut out: Vec<Measured> = probes
            .iter()
            .map(|pr| Measured { p: 0.0, exact: pr.exact.then(Rational::zero), unmatched: BigInt::zero() })
            .collect();
        for (node, meta) in self.current().iter().zip(&self.meta) {
            let (lo, hi) = p.range(n, meta.vertex);
            for s in lo as usize..hi as usize {
                let (num, mass) = if n >= p.k { (&meta.num, meta.mass) } else { (&p.sector_num[s], p.sector_mass[s]) };
                for (pr, acc) in probes.iter().zip(out.iter_mut()) {
                    let row = &self.sector_targets[pr.target];
                    let goal = &row[s * m..(s + 1) * m][pr.coords.clone()];
                    let v = &node.value[pr.coords.clone()];
                    let Some(b) = separation(v, goal) else { continue };
                    acc.unmatched += num;
                    acc.p += mass * b;
                    if let Some(sum) = acc.exact.as_mut() {
                        match bounded_exact(v, goal) {
                            Some(e) => *sum = &*sum + &(&Rational::new(num.clone(), BigInt::one()) * &e),
                            None => acc.exact = None,
                        }
                    }
                }
            }
        }
        let unit = Rational::new(BigInt::one(), p.denominator(n));
        for acc in &mut out {
            acc.exact = acc.exact.take().map(|e| &e * &unit);
        }
        out
    }

    fn record(&self, block: Option<usize>, phase: Phase) -> LevelRecord {
        let n = self.level;
        let m = self.spec.m();
        let count = self.spec.targets.len();
        let target = match phase {
            Phase::Initial => None,
            _ => block.map(|i| self.spec.schedule.blocks[i].target),
        };
        let exact = S::MODE == Mode::Exact && n <= EXACT_P_LEVELS;
        let mut probes: Vec<ProbeSpec> =
            (0..count).map(|t| ProbeSpec { target: t, coords: 0..m, exact: exact && Some(t + 1) == target }).collect();
        let groups = self.spec.groups;
        let width = m / groups;
        if let (Some(t), true) = (target, groups > 1) {
            probes.extend((0..groups).map(|g| ProbeSpec { target: t - 1, coords: g * width..(g + 1) * width, exact: false }));
        }
        let mut measured = self.measure(&probes);
        let group_p: Vec<f64> = measured.drain(count..).map(|x| x.p).collect();
        let p_all = measured.iter().map(|x| x.p).collect();
        let mut rec = LevelRecord {
            level: n as u64,
            block,
            phase,
            target,
            p_value: None,
            p_exact: None,
            group_p,
            p_all,
            unmatched: None,
            bound: None,
        };
        if let Some(t) = target {
            let cur = &mut measured[t - 1];
            rec.p_value = Some(cur.p);
            rec.p_exact = cur.exact.take();
            rec.unmatched = Some(Rational::new(std::mem::take(&mut cur.unmatched), self.prefix.denominator(n)));
            if groups == 1 {
                rec.group_p = vec![cur.p];
            }
            if matches!(phase, Phase::Transition | Phase::Hold) {
                let b = &self.spec.schedule.blocks[block.expect("block phase")];
                rec.bound = Some(self.mu.pow((n as u64 - b.t_start() + 1) as u32));
            }
        }
        rec
    }

    /// Takes the retained layers, when all were kept.
    fn into_truncation(self) -> Result<Option<HarmonicTruncation<S>>> {
        if !self.keep || self.first != 0 {
            return Ok(None);
        }
        Ok(Some(HarmonicTruncation::from_layers(self.spec.tree.clone(), self.spec.m(), self.layers)?))
    }
}

#[derive(Clone, Debug)]
pub struct BuildResult<S: Scalar> {
    pub spec: BuildSpec<S>,
    /// The truncation, when it fit the storage budget.
    pub f: Option<HarmonicTruncation<S>>,
    pub log: Vec<LevelRecord>,
    /// Hold levels of each target where `P < ε`.
    pub visits: Vec<IndexSet>,
    /// All levels where `P` against the target is below its tolerance.
    pub occupancy: Vec<IndexSet>,
    pub mu: Rational,
    pub sector_depth: usize,
}

pub fn build<S: Scalar>(spec: BuildSpec<S>) -> Result<BuildResult<S>> {
    build_with_budget(spec, DEFAULT_STORE_BUDGET)
}

pub fn build_with_budget<S: Scalar>(spec: BuildSpec<S>, budget: usize) -> Result<BuildResult<S>> {
    let mut builder = Builder::new(spec, true)?.with_budget(budget);
    let mut log = Vec::with_capacity(builder.spec.horizon());
    while !builder.is_done() {
        log.push(builder.step()?);
    }
    assemble(builder, log)
}

pub(crate) fn assemble<S: Scalar>(builder: Builder<S>, log: Vec<LevelRecord>) -> Result<BuildResult<S>> {
    let spec = builder.spec.clone();
    let mu = builder.mu.clone();
    let sector_depth = builder.prefix.k;
    let f = builder.into_truncation()?;
    let (visits, occupancy) = visit_sets(&spec, &log);
    Ok(BuildResult { spec, f, log, visits, occupancy, mu, sector_depth })
}

/// The first `depth` levels of the function `spec` describes.
pub(crate) fn build_prefix<S: Scalar>(spec: &BuildSpec<S>, depth: usize) -> Result<HarmonicTruncation<S>> {
    if depth > spec.horizon() {
        return Err(Error::Argument(format!("cannot truncate depth {} to {depth}", spec.horizon())));
    }
    let mut builder = Builder::new(spec.clone(), false)?;
    let mut layers: Vec<Layer<S>> = Vec::with_capacity(depth + 1);
    layers.push(builder.current().clone());
    while layers.len() <= depth {
        builder.step()?;
        let frame = builder.frame();
        *layers.last_mut().expect("root is stored") = frame.parent.expect("stepped").to_vec();
        layers.push(frame.layer.to_vec());
    }
    if let Some(last) = layers.last_mut() {
        for node in last.iter_mut() {
            node.children = Box::new([]);
        }
    }
    HarmonicTruncation::from_layers(spec.tree.clone(), spec.m(), layers)
}

fn visit_sets<S: Scalar>(spec: &BuildSpec<S>, log: &[LevelRecord]) -> (Vec<IndexSet>, Vec<IndexSet>) {
    let horizon = spec.schedule.horizon;
    let count = spec.targets.len();
    let mut visits = vec![Vec::new(); count];
    let mut occupancy = vec![Vec::new(); count];
    let eps: Vec<Option<f64>> = (1..=count).map(|k| spec.target_eps(k).map(|e| e.to_f64())).collect();
    for r in log {
        if r.phase == Phase::Hold {
            let b = &spec.schedule.blocks[r.block.expect("hold has a block")];
            if below(r.p_value.expect("hold is measured"), r.p_exact.as_ref(), &b.eps) {
                visits[b.target - 1].push(r.level);
            }
        }
        for (k, p) in r.p_all.iter().enumerate() {
            if eps[k].is_some_and(|e| *p < e) {
                occupancy[k].push(r.level);
            }
        }
    }
    let wrap = |sets: Vec<Vec<u64>>| sets.into_iter().map(|s| IndexSet::new(horizon, s).expect("increasing")).collect();
    (wrap(visits), wrap(occupancy))
}

/// `P < ε`, exactly when the exact value is known.
fn below(p: f64, exact: Option<&Rational>, eps: &Rational) -> bool {
    match exact {
        Some(e) => e < eps,
        None => p < eps.to_f64(),
    }
}

impl<S: Scalar> BuildResult<S> {
    pub fn horizon(&self) -> u64 {
        self.spec.schedule.horizon
    }

    pub fn m(&self) -> usize {
        self.spec.m()
    }

    /// The stored truncation, or a replayed one.
    pub fn truncation(&self) -> Result<HarmonicTruncation<S>> {
        match &self.f {
            Some(f) => Ok(f.clone()),
            None => self.prefix(self.horizon() as usize),
        }
    }

    /// The truncation of `f` to `depth` levels.
    pub fn prefix(&self, depth: usize) -> Result<HarmonicTruncation<S>> {
        if let Some(f) = &self.f {
            return f.truncate(depth);
        }
        build_prefix(&self.spec, depth)
    }

    /// Realized visit density profiles, one per target.
    pub fn density_reports(&self) -> Result<Vec<DensityReport>> {
        self.visits.iter().map(IndexSet::default_profile).collect()
    }

    /// Plain-text trace: one row per level.
    pub fn trace(&self) -> String {
        let mut out = String::from("level\tphase\ttarget\tP\tunmatched\tbound\n");
        for r in &self.log {
            let phase = serde_json::to_value(r.phase).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            let p = match (&r.p_exact, r.p_value) {
                (Some(e), _) => e.to_string(),
                (None, Some(p)) => format!("{p:.6e}"),
                _ => "-".into(),
            };
            let opt = |x: &Option<Rational>| x.as_ref().map_or("-".into(), |v| {
                let s = v.to_string();
                if s.len() > 24 { format!("{:.6e}", v.to_f64()) } else { s }
            });
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.level,
                phase,
                r.target.map_or("-".into(), |t| t.to_string()),
                p,
                opt(&r.unmatched),
                opt(&r.bound)
            ));
        }
        out
    }

    pub fn to_json(&self) -> Json {
        json!({
            "mode": S::MODE,
            "horizon": self.horizon(),
            "m": self.m(),
            "groups": self.spec.groups,
            "policy": self.spec.policy,
            "initial": self.spec.initial.iter().map(S::to_json).collect::<Vec<_>>(),
            "targets": self.spec.targets.iter().map(Target::to_json).collect::<Vec<_>>(),
            "schedule": self.spec.schedule,
            "mu": self.mu,
            "sector_depth": self.sector_depth,
            "log": self.log,
            "visits": self.visits,
            "occupancy": self.occupancy,
            "f": self.f.as_ref().map(HarmonicTruncation::to_json),
        })
    }

    pub fn from_json(tree: Arc<TreeConfig>, doc: &Json) -> Result<Self> {
        let field = |name: &str| doc.get(name).ok_or_else(|| Error::Parse(format!("missing field {name:?}")));
        let mode: Mode = serde_json::from_value(field("mode")?.clone())?;
        if mode != S::MODE {
            return Err(Error::Mode { expected: S::MODE.as_str(), found: mode.to_string() });
        }
        let initial = field("initial")?
            .as_array()
            .ok_or_else(|| Error::Parse("initial must be an array".into()))?
            .iter()
            .map(S::from_json)
            .collect::<Result<Vec<_>>>()?;
        let targets = field("targets")?
            .as_array()
            .ok_or_else(|| Error::Parse("targets must be an array".into()))?
            .iter()
            .map(|t| Target::from_json(tree.clone(), t))
            .collect::<Result<Vec<_>>>()?;
        let spec = BuildSpec {
            tree: tree.clone(),
            targets,
            schedule: serde_json::from_value(field("schedule")?.clone())?,
            initial,
            policy: serde_json::from_value(field("policy")?.clone())?,
            groups: serde_json::from_value(field("groups")?.clone())?,
        };
        let f = match field("f")? {
            Json::Null => None,
            f => Some(HarmonicTruncation::from_json(tree, f)?),
        };
        Ok(BuildResult {
            spec,
            f,
            log: serde_json::from_value(field("log")?.clone())?,
            visits: serde_json::from_value(field("visits")?.clone())?,
            occupancy: serde_json::from_value(field("occupancy")?.clone())?,
            mu: serde_json::from_value(field("mu")?.clone())?,
            sector_depth: serde_json::from_value(field("sector_depth")?.clone())?,
        })
    }
}

impl<S: Scalar> LevelSource<S> for BuildResult<S> {
    fn tree(&self) -> &Arc<TreeConfig> {
        &self.spec.tree
    }

    fn m(&self) -> usize {
        self.spec.m()
    }

    fn depth(&self) -> usize {
        self.horizon() as usize
    }

    fn stream(&self, visit: &mut dyn FnMut(Frame<'_, S>) -> Result<()>) -> Result<()> {
        if let Some(f) = &self.f {
            return f.stream(visit);
        }
        let mut builder = Builder::new(self.spec.clone(), false)?;
        visit(builder.frame())?;
        while !builder.is_done() {
            builder.step()?;
            visit(builder.frame())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HarmonicFailure {
    pub depth: usize,
    pub vertex: Option<VertexId>,
    pub residual_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelFailure {
    pub level: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub levels_checked: u64,
    pub harmonic: Vec<HarmonicFailure>,
    pub root_ok: bool,
    pub failures: Vec<LevelFailure>,
    /// Recomputed from scratch.
    pub visits: Vec<IndexSet>,
    pub occupancy: Vec<IndexSet>,
    pub densities: Vec<DensityReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.harmonic.is_empty() && self.root_ok && self.failures.is_empty()
    }
}

/// Re-checks a build from its truncation alone: harmonicity, every logged
/// `P` and unmatched measure, the scheduled guarantees and the visit sets.
pub fn verify<S: Scalar>(result: &BuildResult<S>) -> Result<VerifyReport> {
    let mut verifier = Verifier::new(&result.spec, result.mu.clone())?;
    result.stream(&mut |frame| verifier.observe(&frame))?;
    verifier.finish(result)
}

/// Builds and verifies in a single pass over the levels.
///
/// The verifier sees each frame as the builder produces it, so nothing is
/// replayed when the truncation is too large to store.
pub fn build_checked<S: Scalar>(spec: BuildSpec<S>) -> Result<(BuildResult<S>, VerifyReport)> {
    let mut builder = Builder::new(spec, true)?;
    let mut verifier = Verifier::new(&builder.spec, builder.mu.clone())?;
    let mut log = Vec::with_capacity(builder.spec.horizon());
    verifier.observe(&builder.frame())?;
    while !builder.is_done() {
        log.push(builder.step()?);
        verifier.observe(&builder.frame())?;
    }
    let result = assemble(builder, log)?;
    let report = verifier.finish(&result)?;
    Ok((result, report))
}

/// Independent per-level recomputation of a build, fed one frame at a time.
pub(crate) struct Verifier<S: Scalar> {
    spec: BuildSpec<S>,
    mu: Rational,
    targets: Vec<Vec<S>>,
    sweep: MassSweep,
    harmonic: Vec<(usize, u32, f64)>,
    failures: Vec<LevelFailure>,
    root_ok: bool,
    recomputed: Vec<LevelRecord>,
    last_unmatched: Option<Rational>,
}

impl<S: Scalar> Verifier<S> {
    pub(crate) fn new(spec: &BuildSpec<S>, mu: Rational) -> Result<Self> {
        let k = spec.sector_depth();
        let targets = spec.targets.iter().map(|t| sector_values(&t.h, k)).collect::<Result<_>>()?;
        Ok(Verifier {
            spec: spec.clone(),
            mu,
            targets,
            sweep: MassSweep::new(spec.tree.clone(), k)?,
            harmonic: Vec::new(),
            failures: Vec::new(),
            root_ok: false,
            recomputed: Vec::with_capacity(spec.horizon()),
            last_unmatched: None,
        })
    }

    pub(crate) fn observe(&mut self, frame: &Frame<'_, S>) -> Result<()> {
        let spec = &self.spec;
        let m = spec.m();
        self.sweep.advance(frame)?;
        for (j, residual) in check_frame(&spec.tree, frame) {
            let norm = residual.iter().map(Scalar::norm_sqr_f64).sum::<f64>().sqrt();
            self.harmonic.push((frame.depth - 1, j, norm));
        }
        if frame.depth == 0 {
            self.root_ok = *frame.layer[0].value == *spec.initial;
            return Ok(());
        }
        let n = frame.depth as u64;
        let (block, phase) = spec.schedule.locate(n);
        let target = match phase {
            Phase::Initial => None,
            _ => block.map(|i| spec.schedule.blocks[i].target),
        };
        let exact = S::MODE == Mode::Exact && frame.depth <= EXACT_P_LEVELS;
        let sweep = &self.sweep;
        let targets = &self.targets;
        let p_all = targets.iter().map(|t| sweep.evaluate(frame.layer, &Probe { coords: 0..m, target: t }, false).p).collect();
        let mut record = LevelRecord {
            level: n,
            block,
            phase,
            target,
            p_value: None,
            p_exact: None,
            group_p: Vec::new(),
            p_all,
            unmatched: None,
            bound: None,
        };
        let fail = |level: u64, reason: String| LevelFailure { level, reason };
        if let Some(t) = target {
            let v = sweep.evaluate(frame.layer, &Probe { coords: 0..m, target: &targets[t - 1] }, exact);
            let width = m / spec.groups;
            record.group_p = if spec.groups > 1 {
                (0..spec.groups)
                    .map(|g| {
                        let sub: Vec<S> = targets[t - 1]
                            .chunks(m)
                            .flat_map(|c| c[g * width..(g + 1) * width].iter().cloned())
                            .collect();
                        sweep.evaluate(frame.layer, &Probe { coords: g * width..(g + 1) * width, target: &sub }, false).p
                    })
                    .collect()
            } else {
                vec![v.p]
            };
            if let (Phase::Transition | Phase::Hold, Some(i)) = (phase, block) {
                let b = &spec.schedule.blocks[i];
                let j = n - b.t_start() + 1;
                let bound = self.mu.pow(j as u32);
                if v.unmatched > bound {
                    self.failures.push(fail(n, format!("unmatched measure {} exceeds μ^{j}", v.unmatched)));
                }
                if v.p > bound.to_f64() + P_TOLERANCE {
                    self.failures.push(fail(n, format!("P = {} exceeds μ^{j}", v.p)));
                }
                if n > b.t_start() {
                    if let Some(prev) = &self.last_unmatched {
                        if v.unmatched > &self.mu * prev {
                            self.failures.push(fail(n, "unmatched measure did not contract by μ".into()));
                        }
                    }
                }
                if phase == Phase::Hold && !below(v.p, v.p_exact.as_ref(), &b.eps) {
                    self.failures.push(fail(n, format!("scheduled visit missed: P = {} ≥ ε = {}", v.p, b.eps)));
                }
                record.bound = Some(bound);
            }
            self.last_unmatched = Some(v.unmatched.clone());
            record.p_value = Some(v.p);
            record.p_exact = v.p_exact;
            record.unmatched = Some(v.unmatched);
        } else {
            self.last_unmatched = None;
        }
        self.recomputed.push(record);
        Ok(())
    }

    pub(crate) fn finish(self, result: &BuildResult<S>) -> Result<VerifyReport> {
        let Verifier { spec, harmonic, mut failures, root_ok, recomputed, .. } = self;
        let fail = |level: u64, reason: String| LevelFailure { level, reason };
        let mut located = Vec::with_capacity(harmonic.len());
        for (depth, node, residual_norm) in harmonic {
            let vertex = locate_node(result, depth, node).ok();
            located.push(HarmonicFailure { depth, vertex, residual_norm });
        }
        if recomputed.len() != result.log.len() {
            failures.push(fail(0, format!("log has {} levels, the truncation {}", result.log.len(), recomputed.len())));
        }
        for (got, logged) in recomputed.iter().zip(&result.log) {
            if let Some(reason) = compare_records(got, logged) {
                failures.push(fail(got.level, reason));
            }
        }
        let (visits, occupancy) = visit_sets(&spec, &recomputed);
        if visits != result.visits {
            failures.push(fail(0, "logged visit sets differ from the recomputed ones".into()));
        }
        if occupancy != result.occupancy {
            failures.push(fail(0, "logged occupancy sets differ from the recomputed ones".into()));
        }
        let densities = visits.iter().map(IndexSet::default_profile).collect::<Result<_>>()?;
        Ok(VerifyReport { levels_checked: recomputed.len() as u64, harmonic: located, root_ok, failures, visits, occupancy, densities })
    }
}

fn compare_records(got: &LevelRecord, logged: &LevelRecord) -> Option<String> {
    let close = |a: f64, b: f64| (a - b).abs() <= P_TOLERANCE.max(1e-9 * a.abs().max(b.abs()));
    if (got.block, got.phase, got.target) != (logged.block, logged.phase, logged.target) {
        return Some("phase or target differs from the schedule".into());
    }
    match (got.p_value, logged.p_value) {
        (Some(a), Some(b)) if !close(a, b) => return Some(format!("P recomputed as {a}, logged {b}")),
        (Some(_), None) | (None, Some(_)) => return Some("P presence differs".into()),
        _ => {}
    }
    if got.p_exact.is_some() && got.p_exact != logged.p_exact {
        return Some("exact P differs".into());
    }
    if got.unmatched != logged.unmatched {
        return Some("unmatched measure differs".into());
    }
    if got.bound != logged.bound {
        return Some("bound differs".into());
    }
    if got.group_p.len() != logged.group_p.len() || got.group_p.iter().zip(&logged.group_p).any(|(a, b)| !close(*a, *b)) {
        return Some("per-group P differs".into());
    }
    if got.p_all.len() != logged.p_all.len() || got.p_all.iter().zip(&logged.p_all).any(|(a, b)| !close(*a, *b)) {
        return Some("P against some target differs".into());
    }
    None
}
