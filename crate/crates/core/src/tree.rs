//! Finitely presented rooted trees with exact transition weights.
//!
//! A tree is a finite automaton over *vertex classes*: every vertex has a
//! class, the class fixes the branching number, the measure weights `q`, the
//! harmonic weights `w`, and the class of each child. Uniform, periodic and
//! explicit-prefix rules all compile to this form, which is what lets the
//! builder work at depths far beyond anything that could be enumerated.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rational::{CRat, Rational};

pub type ClassId = u32;

/// Default limit on the number of vertices a single level enumeration may
/// produce.
pub const DEFAULT_MAX_LEVEL_SIZE: usize = 1 << 20;
pub const DEFAULT_DEPTH_CAP: usize = 32;

/// Address of a vertex: child indices from the root.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VertexId {
    pub path: Vec<u32>,
}

impl VertexId {
    pub fn root() -> Self {
        VertexId { path: Vec::new() }
    }

    pub fn new(path: Vec<u32>) -> Self {
        VertexId { path }
    }

    pub fn depth(&self) -> usize {
        self.path.len()
    }

    pub fn child(&self, index: u32) -> VertexId {
        let mut path = self.path.clone();
        path.push(index);
        VertexId { path }
    }

    /// The father `x⁻`; `None` for the root.
    pub fn father(&self) -> Option<VertexId> {
        let (_, init) = self.path.split_last()?;
        Some(VertexId { path: init.to_vec() })
    }

    pub fn ancestor(&self, depth: usize) -> VertexId {
        VertexId { path: self.path[..depth.min(self.path.len())].to_vec() }
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.path)
    }
}

impl fmt::Debug for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VertexClass {
    pub q: Vec<Rational>,
    pub w: Vec<CRat>,
    pub children: Vec<ClassId>,
}

impl VertexClass {
    pub fn branching(&self) -> usize {
        self.q.len()
    }

    pub fn min_q(&self) -> &Rational {
        self.q.iter().min().expect("classes have at least two children")
    }
}

// ---------------------------------------------------------------------------
// File format

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weights<T> {
    Flat(Vec<T>),
    PerClass(Vec<Vec<T>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RuleSpec {
    Uniform {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        branching: Option<usize>,
    },
    Periodic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        branching: Option<Vec<usize>>,
    },
    Explicit { prefix: Vec<PrefixEntry> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixEntry {
    pub path: Vec<u32>,
    pub q: Vec<Rational>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<CRat>>,
}

/// On-disk tree description. Rationals are `"a/b"` strings; complex `w`
/// entries are either a real string or a `["re", "im"]` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub rule: RuleSpec,
    pub q: Weights<Rational>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Weights<CRat>>,
    #[serde(default = "default_depth_cap")]
    pub depth_cap: usize,
    #[serde(default = "default_max_level_size")]
    pub max_level_size: usize,
}

fn default_depth_cap() -> usize {
    DEFAULT_DEPTH_CAP
}

fn default_max_level_size() -> usize {
    DEFAULT_MAX_LEVEL_SIZE
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TreeConfig {
    spec: TreeSpec,
    classes: Vec<VertexClass>,
    root: ClassId,
    /// A representative vertex per class, used in diagnostics.
    witnesses: Vec<VertexId>,
}

/// Vertices of one level in canonical order, with their classes and exact
/// sector measures.
#[derive(Clone, Debug)]
pub struct Level {
    pub depth: usize,
    pub vertices: Vec<VertexId>,
    pub classes: Vec<ClassId>,
    pub measures: Vec<Rational>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyViolation {
    pub vertex: VertexId,
    pub father_measure: Rational,
    pub children_sum: Rational,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyReport {
    pub level: usize,
    pub vertices_checked: usize,
    pub violations: Vec<ConsistencyViolation>,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn invalid(vertex: &VertexId, reason: impl Into<String>) -> Error {
    Error::InvalidConfig { vertex: vertex.to_string(), reason: reason.into() }
}

fn build_class(
    vertex: &VertexId,
    q: &[Rational],
    w: Option<&[CRat]>,
    children: Vec<ClassId>,
) -> Result<VertexClass> {
    if q.len() < 2 {
        return Err(invalid(vertex, format!("branching {} < 2", q.len())));
    }
    if let Some((i, _)) = q.iter().enumerate().find(|(_, x)| !x.is_positive()) {
        return Err(invalid(vertex, format!("q[{i}] = {} is not positive", q[i])));
    }
    let total: Rational = q.iter().sum();
    if !total.is_one() {
        return Err(invalid(vertex, format!("q sums to {total}, not 1")));
    }
    let w: Vec<CRat> = match w {
        Some(w) => w.to_vec(),
        None => q.iter().cloned().map(CRat::real).collect(),
    };
    if w.len() != q.len() {
        return Err(invalid(vertex, format!("w has {} entries, q has {}", w.len(), q.len())));
    }
    if let Some(i) = w.iter().position(CRat::is_zero) {
        return Err(invalid(vertex, format!("w[{i}] is zero")));
    }
    let wsum = w.iter().fold(CRat::zero(), |acc, x| acc.add(x));
    if wsum != CRat::one() {
        return Err(invalid(vertex, format!("w sums to {wsum:?}, not 1")));
    }
    Ok(VertexClass { q: q.to_vec(), w, children })
}

impl TreeConfig {
    pub fn from_spec(spec: TreeSpec) -> Result<Self> {
        let (classes, root, witnesses) = match &spec.rule {
            RuleSpec::Uniform { branching } => {
                let Weights::Flat(q) = &spec.q else {
                    return Err(Error::Parse("uniform rule expects a flat q list".into()));
                };
                let w = match &spec.w {
                    None => None,
                    Some(Weights::Flat(w)) => Some(w.as_slice()),
                    Some(_) => return Err(Error::Parse("uniform rule expects a flat w list".into())),
                };
                let root = VertexId::root();
                if let Some(b) = branching {
                    if *b != q.len() {
                        return Err(invalid(&root, format!("branching {b} but {} weights", q.len())));
                    }
                }
                let class = build_class(&root, q, w, vec![0; q.len()])?;
                (vec![class], 0, vec![root])
            }
            RuleSpec::Periodic { branching } => {
                let Weights::PerClass(qs) = &spec.q else {
                    return Err(Error::Parse("periodic rule expects one q list per phase".into()));
                };
                let ws: Option<&Vec<Vec<CRat>>> = match &spec.w {
                    None => None,
                    Some(Weights::PerClass(w)) => Some(w),
                    Some(_) => return Err(Error::Parse("periodic rule expects one w list per phase".into())),
                };
                let period = qs.len();
                if period == 0 {
                    return Err(Error::Parse("periodic rule needs at least one phase".into()));
                }
                if let Some(ws) = ws {
                    if ws.len() != period {
                        return Err(Error::Parse(format!("{} w phases for {period} q phases", ws.len())));
                    }
                }
                let mut classes = Vec::with_capacity(period);
                let mut witnesses = Vec::with_capacity(period);
                for (phase, q) in qs.iter().enumerate() {
                    let vertex = VertexId::new(vec![0; phase]);
                    if let Some(b) = branching.as_ref().and_then(|b| b.get(phase)) {
                        if *b != q.len() {
                            return Err(invalid(&vertex, format!("branching {b} but {} weights", q.len())));
                        }
                    }
                    if let Some(b) = branching {
                        if b.len() != period {
                            return Err(Error::Parse(format!("{} branching phases for {period} q phases", b.len())));
                        }
                    }
                    let next = ((phase + 1) % period) as ClassId;
                    let w = ws.map(|ws| ws[phase].as_slice());
                    classes.push(build_class(&vertex, q, w, vec![next; q.len()])?);
                    witnesses.push(vertex);
                }
                (classes, 0, witnesses)
            }
            RuleSpec::Explicit { prefix } => {
                let Weights::Flat(default_q) = &spec.q else {
                    return Err(Error::Parse("explicit rule expects a flat default q list".into()));
                };
                let default_w = match &spec.w {
                    None => None,
                    Some(Weights::Flat(w)) => Some(w.as_slice()),
                    Some(_) => return Err(Error::Parse("explicit rule expects a flat default w list".into())),
                };
                Self::compile_explicit(prefix, default_q, default_w)?
            }
        };
        Ok(TreeConfig { spec, classes, root, witnesses })
    }

    fn compile_explicit(
        prefix: &[PrefixEntry],
        default_q: &[Rational],
        default_w: Option<&[CRat]>,
    ) -> Result<(Vec<VertexClass>, ClassId, Vec<VertexId>)> {
        let mut index: BTreeMap<&[u32], usize> = BTreeMap::new();
        for (i, entry) in prefix.iter().enumerate() {
            if index.insert(entry.path.as_slice(), i).is_some() {
                return Err(invalid(&VertexId::new(entry.path.clone()), "duplicate prefix entry"));
            }
        }
        for entry in prefix {
            let v = VertexId::new(entry.path.clone());
            let Some((last, parent)) = entry.path.split_last() else { continue };
            let Some(&p) = index.get(parent) else {
                return Err(invalid(&v, "prefix is not closed under taking fathers"));
            };
            if *last as usize >= prefix[p].q.len() {
                return Err(invalid(&v, format!("child index {last} out of range for its father")));
            }
        }
        let default_id = prefix.len() as ClassId;
        let mut classes = Vec::with_capacity(prefix.len() + 1);
        let mut witnesses = Vec::with_capacity(prefix.len() + 1);
        for entry in prefix {
            let v = VertexId::new(entry.path.clone());
            let children = (0..entry.q.len() as u32)
                .map(|i| {
                    let mut path = entry.path.clone();
                    path.push(i);
                    index.get(path.as_slice()).map_or(default_id, |&c| c as ClassId)
                })
                .collect();
            classes.push(build_class(&v, &entry.q, entry.w.as_deref(), children)?);
            witnesses.push(v);
        }
        // First vertex governed by the default rule, for diagnostics.
        let default_witness = if prefix.is_empty() || !index.contains_key([].as_slice()) {
            VertexId::root()
        } else {
            let mut found = None;
            'search: for (i, entry) in prefix.iter().enumerate() {
                for (c, &child) in classes[i].children.iter().enumerate() {
                    if child == default_id {
                        found = Some(VertexId::new(entry.path.clone()).child(c as u32));
                        break 'search;
                    }
                }
            }
            found.unwrap_or_else(VertexId::root)
        };
        classes.push(build_class(
            &default_witness,
            default_q,
            default_w,
            vec![default_id; default_q.len()],
        )?);
        witnesses.push(default_witness);
        let root = index.get([].as_slice()).map_or(default_id, |&c| c as ClassId);
        Ok((classes, root, witnesses))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: TreeSpec = serde_json::from_str(text)?;
        Self::from_spec(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("tree spec serializes")
    }

    pub fn spec(&self) -> &TreeSpec {
        &self.spec
    }

    /// Uniform tree with measure weights `q` and `w = q`.
    pub fn uniform(q: &[Rational], depth_cap: usize) -> Result<Self> {
        Self::from_spec(TreeSpec {
            rule: RuleSpec::Uniform { branching: None },
            q: Weights::Flat(q.to_vec()),
            w: None,
            depth_cap,
            max_level_size: DEFAULT_MAX_LEVEL_SIZE,
        })
    }

    /// Uniform tree with separate harmonic weights.
    pub fn uniform_with_w(q: &[Rational], w: &[CRat], depth_cap: usize) -> Result<Self> {
        Self::from_spec(TreeSpec {
            rule: RuleSpec::Uniform { branching: None },
            q: Weights::Flat(q.to_vec()),
            w: Some(Weights::Flat(w.to_vec())),
            depth_cap,
            max_level_size: DEFAULT_MAX_LEVEL_SIZE,
        })
    }

    /// Binary tree with `q = w = (1/2, 1/2)`.
    pub fn binary(depth_cap: usize) -> Self {
        let half = Rational::from_ratio(1, 2);
        Self::uniform(&[half.clone(), half], depth_cap).expect("binary tree is valid")
    }

    pub fn depth_cap(&self) -> usize {
        self.spec.depth_cap
    }

    pub fn max_level_size(&self) -> usize {
        self.spec.max_level_size
    }

    pub fn with_depth_cap(mut self, cap: usize) -> Self {
        self.spec.depth_cap = cap;
        self
    }

    pub fn with_max_level_size(mut self, limit: usize) -> Self {
        self.spec.max_level_size = limit;
        self
    }

    pub fn root_class(&self) -> ClassId {
        self.root
    }

    pub fn class(&self, id: ClassId) -> &VertexClass {
        &self.classes[id as usize]
    }

    pub fn classes(&self) -> &[VertexClass] {
        &self.classes
    }

    pub fn class_witness(&self, id: ClassId) -> &VertexId {
        &self.witnesses[id as usize]
    }

    fn check_depth(&self, n: usize) -> Result<()> {
        if n > self.depth_cap() {
            return Err(Error::Cap(format!("depth {n} exceeds the cap {}", self.depth_cap())));
        }
        Ok(())
    }

    /// Walks `v` from the root, returning the classes along the path
    /// (root first, `v` last).
    fn path_classes(&self, v: &VertexId) -> Result<Vec<ClassId>> {
        let mut out = Vec::with_capacity(v.depth() + 1);
        let mut c = self.root;
        out.push(c);
        for (j, &i) in v.path.iter().enumerate() {
            let class = self.class(c);
            if i as usize >= class.branching() {
                return Err(Error::Address {
                    path: v.path.clone(),
                    reason: format!("index {i} at position {j} but branching is {}", class.branching()),
                });
            }
            c = class.children[i as usize];
            out.push(c);
        }
        Ok(out)
    }

    pub fn class_of(&self, v: &VertexId) -> Result<ClassId> {
        Ok(*self.path_classes(v)?.last().expect("root class present"))
    }

    pub fn branching(&self, v: &VertexId) -> Result<usize> {
        Ok(self.class(self.class_of(v)?).branching())
    }

    /// Children of `v` with their measure and harmonic weights.
    pub fn children(&self, v: &VertexId) -> Result<Vec<(VertexId, Rational, CRat)>> {
        let class = self.class(self.class_of(v)?);
        Ok((0..class.branching())
            .map(|i| (v.child(i as u32), class.q[i].clone(), class.w[i].clone()))
            .collect())
    }

    /// `p(B_v)`: product of `q` along the root-to-`v` path.
    pub fn sector_measure(&self, v: &VertexId) -> Result<Rational> {
        let classes = self.path_classes(v)?;
        let mut p = Rational::one();
        for (j, &i) in v.path.iter().enumerate() {
            p = &p * &self.class(classes[j]).q[i as usize];
        }
        Ok(p)
    }

    /// Number of vertices of depth `n`, or `None` if it exceeds `u128`.
    pub fn level_size(&self, n: usize) -> Option<u128> {
        let mut counts = vec![0u128; self.classes.len()];
        counts[self.root as usize] = 1;
        for _ in 0..n {
            let mut next = vec![0u128; self.classes.len()];
            for (c, &k) in counts.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                for &child in &self.classes[c].children {
                    next[child as usize] = next[child as usize].checked_add(k)?;
                }
            }
            counts = next;
        }
        counts.iter().try_fold(0u128, |acc, &k| acc.checked_add(k))
    }

    fn check_enumerable(&self, n: usize) -> Result<usize> {
        self.check_depth(n)?;
        match self.level_size(n) {
            Some(size) if size <= self.max_level_size() as u128 => Ok(size as usize),
            _ => Err(Error::Cap(format!(
                "level {n} has more than {} vertices; refusing to enumerate",
                self.max_level_size()
            ))),
        }
    }

    /// All vertices of depth `n` in lexicographic order.
    pub fn level(&self, n: usize) -> Result<Vec<VertexId>> {
        Ok(self.level_full(n)?.vertices)
    }

    /// Level `n` together with classes and exact sector measures.
    pub fn level_full(&self, n: usize) -> Result<Level> {
        self.check_enumerable(n)?;
        let mut level = Level {
            depth: 0,
            vertices: vec![VertexId::root()],
            classes: vec![self.root],
            measures: vec![Rational::one()],
        };
        for d in 0..n {
            let mut next = Level { depth: d + 1, vertices: Vec::new(), classes: Vec::new(), measures: Vec::new() };
            for ((v, &c), p) in level.vertices.iter().zip(&level.classes).zip(&level.measures) {
                let class = self.class(c);
                for i in 0..class.branching() {
                    next.vertices.push(v.child(i as u32));
                    next.classes.push(class.children[i]);
                    next.measures.push(p * &class.q[i]);
                }
            }
            level = next;
        }
        Ok(level)
    }

    /// Classes and sector measures of level `n`, without materializing
    /// vertex addresses.
    pub fn level_classes(&self, n: usize) -> Result<(Vec<ClassId>, Vec<Rational>)> {
        self.check_enumerable(n)?;
        let mut classes = vec![self.root];
        let mut measures = vec![Rational::one()];
        for _ in 0..n {
            let mut next_c = Vec::with_capacity(classes.len() * 2);
            let mut next_m = Vec::with_capacity(classes.len() * 2);
            for (&c, p) in classes.iter().zip(&measures) {
                let class = self.class(c);
                for i in 0..class.branching() {
                    next_c.push(class.children[i]);
                    next_m.push(p * &class.q[i]);
                }
            }
            classes = next_c;
            measures = next_m;
        }
        Ok((classes, measures))
    }

    /// Child of smallest `q` in a class, lowest index on ties.
    pub fn argmin_child(&self, class: ClassId) -> usize {
        let q = &self.class(class).q;
        let mut best = 0;
        for i in 1..q.len() {
            if q[i] < q[best] {
                best = i;
            }
        }
        best
    }

    /// Checks `Σ_{y∈S(x)} p(B_y) = p(B_x)` for every `x ∈ T_n`.
    pub fn consistency_check(&self, n: usize) -> Result<ConsistencyReport> {
        self.check_depth(n + 1)?;
        let level = self.level_full(n)?;
        let mut violations = Vec::new();
        for ((v, &c), p) in level.vertices.iter().zip(&level.classes).zip(&level.measures) {
            let class = self.class(c);
            let children_sum: Rational = class.q.iter().map(|qi| p * qi).sum();
            if &children_sum != p {
                violations.push(ConsistencyViolation {
                    vertex: v.clone(),
                    father_measure: p.clone(),
                    children_sum,
                });
            }
        }
        Ok(ConsistencyReport { level: n, vertices_checked: level.len(), violations })
    }

    fn descendants_at(&self, class: ClassId, rel_depth: usize, memo: &mut HashMap<(ClassId, usize), u128>) -> Option<u128> {
        if rel_depth == 0 {
            return Some(1);
        }
        if let Some(&k) = memo.get(&(class, rel_depth)) {
            return Some(k);
        }
        let mut total = 0u128;
        for &child in &self.class(class).children {
            total = total.checked_add(self.descendants_at(child, rel_depth - 1, memo)?)?;
        }
        memo.insert((class, rel_depth), total);
        Some(total)
    }

    /// Position of `v` among the vertices of its own level (0-based).
    pub fn level_index(&self, v: &VertexId) -> Result<u128> {
        let classes = self.path_classes(v)?;
        let overflow = || Error::Cap(format!("level index of {v} overflows"));
        let mut memo = HashMap::new();
        let mut rank: u128 = 0;
        for (j, &i) in v.path.iter().enumerate() {
            let class = self.class(classes[j]);
            let remaining = v.depth() - j - 1;
            for sibling in 0..i as usize {
                let k = self.descendants_at(class.children[sibling], remaining, &mut memo).ok_or_else(overflow)?;
                rank = rank.checked_add(k).ok_or_else(overflow)?;
            }
        }
        Ok(rank)
    }

    /// 1-based position of `v` in breadth-first order, lexicographic within
    /// each level.
    pub fn bfs_index(&self, v: &VertexId) -> Result<u64> {
        self.check_depth(v.depth())?;
        let overflow = || Error::Cap(format!("breadth-first index of {v} overflows"));
        let rank = self.level_index(v)?;
        let mut before: u128 = 0;
        for d in 0..v.depth() {
            before = before.checked_add(self.level_size(d).ok_or_else(overflow)?).ok_or_else(overflow)?;
        }
        let index = before.checked_add(rank + 1).ok_or_else(overflow)?;
        u64::try_from(index).map_err(|_| overflow())
    }

    /// The first `count` vertices in breadth-first order, never descending
    /// past the depth cap.
    pub fn bfs_prefix(&self, count: usize) -> Vec<VertexId> {
        let mut out = Vec::with_capacity(count);
        let mut frontier = vec![(VertexId::root(), self.root)];
        let mut depth = 0;
        while out.len() < count && !frontier.is_empty() {
            let mut next = Vec::new();
            for (v, c) in frontier {
                if out.len() < count {
                    out.push(v.clone());
                }
                if depth < self.depth_cap() && out.len() + next.len() < count {
                    let class = self.class(c);
                    for i in 0..class.branching() {
                        next.push((v.child(i as u32), class.children[i]));
                    }
                }
            }
            frontier = next;
            depth += 1;
        }
        out
    }

    /// The vertex `z_index` of the breadth-first enumeration (1-based).
    pub fn vertex_at_bfs(&self, index: u64) -> Result<VertexId> {
        if index == 0 {
            return Err(Error::Argument("breadth-first indices start at 1".into()));
        }
        let prefix = self.bfs_prefix(usize::try_from(index).map_err(|_| Error::Cap("index too large".into()))?);
        prefix
            .into_iter()
            .nth(index as usize - 1)
            .ok_or_else(|| Error::Cap(format!("vertex z_{index} lies beyond the depth cap")))
    }

    /// Number of vertices of depth at most `n`, saturating.
    pub fn count_within(&self, n: usize) -> u128 {
        (0..=n).fold(0u128, |acc, d| acc.saturating_add(self.level_size(d).unwrap_or(u128::MAX)))
    }

    /// `μ = max_x min_{y∈S(x)} q(x, y)` over all vertex classes.
    pub fn mu(&self) -> Rational {
        self.classes.iter().map(|c| c.min_q().clone()).max().expect("at least one class")
    }
}
