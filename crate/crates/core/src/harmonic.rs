//! Truncated generalized harmonic functions.
//!
//! A truncation of depth `N` assigns a point of `C^m` to every vertex of depth
//! at most `N`. It is stored as a layered DAG: vertices whose subtrees carry
//! identical data share a node. Constant extension and the builder keep node
//! counts per level small, so truncations thousands of levels deep stay cheap;
//! [`HarmonicTruncation::from_levels`] produces one node per vertex.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::error::{Error, Result};
use crate::measure::{same_tree, SimpleFunction};
use crate::rational::{CRat, Rational};
use crate::scalar::{bounded, distance, Mode, PointKey, Scalar};
use crate::tree::{ClassId, TreeConfig, VertexId};

/// Float-mode tolerance on the residual norm, relative to
/// `max(1, |f(x)| + Σ_y |w(x,y)|·|f(y)|)`.
pub const FLOAT_TOLERANCE: f64 = 1e-9;

/// Terms of the pointwise metric beyond this index are below double
/// precision and are folded into the tail bound.
pub const RHO_TERM_LIMIT: usize = 1100;

#[derive(Clone, Debug, PartialEq)]
pub struct Node<S: Scalar> {
    pub class: ClassId,
    pub value: Box<[S]>,
    /// Indices into the next layer, one per child; empty on the last layer.
    pub children: Box<[u32]>,
}

pub type Layer<S> = Vec<Node<S>>;

#[derive(Clone, Debug)]
pub struct HarmonicTruncation<S: Scalar> {
    tree: Arc<TreeConfig>,
    m: usize,
    layers: Vec<Layer<S>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub vertex: VertexId,
    pub depth: usize,
    pub residual: Vec<Json>,
    pub residual_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HarmonicReport {
    pub mode: Mode,
    pub depth: usize,
    pub nodes_checked: usize,
    pub violations: Vec<Violation>,
}

impl HarmonicReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Bracket `[lo, hi]` around the pointwise metric `ρ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RhoInterval {
    pub lo: f64,
    pub hi: f64,
    pub terms: usize,
}

/// Which child absorbs the harmonic identity in a corrected extension.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrectionPolicy {
    /// Child of smallest measure weight, lowest index on ties.
    #[default]
    ArgminQ,
    /// Fixed child index, clamped to the last child.
    Fixed(usize),
}

impl CorrectionPolicy {
    pub fn choose(self, tree: &TreeConfig, class: ClassId) -> usize {
        match self {
            CorrectionPolicy::ArgminQ => tree.argmin_child(class),
            CorrectionPolicy::Fixed(i) => i.min(tree.class(class).branching() - 1),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrectionReport {
    /// `Σ_x p(B_{y*(x)})` over the fathers `x`.
    pub unmatched_measure: Rational,
    /// Measure of the correction sectors whose forced value differs from
    /// the target.
    pub mismatched_measure: Rational,
    pub correction_children: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlattenReport {
    pub n: u64,
    pub j0: u64,
    pub n_of_n: usize,
    pub working_depth: usize,
    pub harmonic: bool,
    pub flat_beyond: bool,
    /// `ρ(φ − f, g)`.
    pub rho_offset: RhoInterval,
    /// `ρ(f + g, φ)`.
    pub rho_target: RhoInterval,
    /// `ρ(f + g, g)`, the literal form of the bound; recorded only.
    pub rho_literal: RhoInterval,
}

impl FlattenReport {
    pub fn passed(&self) -> bool {
        let bound = 1.0 / self.n as f64;
        self.harmonic && self.flat_beyond && self.rho_offset.hi < bound && self.rho_target.hi < bound
    }
}

fn residual_norm<S: Scalar>(r: &[S]) -> f64 {
    r.iter().map(Scalar::norm_sqr_f64).sum::<f64>().sqrt()
}

/// Residual `f(x) − Σ_y w(x,y) f(y)` and whether it vanishes: exactly in
/// exact mode, in float mode up to [`FLOAT_TOLERANCE`] relative to the size
/// of the terms.
pub(crate) fn harmonic_residual<'a, S: Scalar + 'a>(
    value: &[S],
    weights: &[CRat],
    children: impl Iterator<Item = &'a [S]>,
) -> (Vec<S>, bool) {
    let mut acc: Vec<S> = value.to_vec();
    let mut scale = if S::MODE == Mode::Float { residual_norm(value) } else { 0.0 };
    for (w, child) in weights.iter().zip(children) {
        let ws = S::from_crat(w);
        for (a, y) in acc.iter_mut().zip(child) {
            *a = a.minus(&ws.times(y));
        }
        if S::MODE == Mode::Float {
            let (re, im) = w.to_f64_pair();
            scale += re.hypot(im) * residual_norm(child);
        }
    }
    let ok = match S::MODE {
        Mode::Exact => acc.iter().all(Scalar::is_zero),
        Mode::Float => acc.iter().all(Scalar::is_finite) && residual_norm(&acc) <= FLOAT_TOLERANCE * scale.max(1.0),
    };
    (acc, ok)
}

/// `j₀(n)`: least `j` with `2^{−j+1} < 1/n`.
pub fn j0(n: u64) -> u64 {
    (u64::BITS - n.leading_zeros()) as u64 + 1
}

impl<S: Scalar> HarmonicTruncation<S> {
    /// Builds from explicit layers, checking shape against the tree.
    pub fn from_layers(tree: Arc<TreeConfig>, m: usize, layers: Vec<Layer<S>>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Shape("value dimension m must be at least 1".into()));
        }
        if layers.is_empty() || layers[0].len() != 1 {
            return Err(Error::Shape("the first layer must hold exactly the root".into()));
        }
        if layers.len() - 1 > tree.depth_cap() {
            return Err(Error::Cap(format!("depth {} exceeds the cap {}", layers.len() - 1, tree.depth_cap())));
        }
        if layers[0][0].class != tree.root_class() {
            return Err(Error::Shape("root node has the wrong class".into()));
        }
        for (d, layer) in layers.iter().enumerate() {
            let last = d + 1 == layers.len();
            for node in layer {
                if node.value.len() != m {
                    return Err(Error::Shape(format!("node at depth {d} has {} coordinates", node.value.len())));
                }
                let class = tree.class(node.class);
                if last {
                    if !node.children.is_empty() {
                        return Err(Error::Shape("last layer nodes cannot have children".into()));
                    }
                    continue;
                }
                if node.children.len() != class.branching() {
                    return Err(Error::Shape(format!("node at depth {d} has the wrong number of children")));
                }
                for (i, &c) in node.children.iter().enumerate() {
                    let child = layers[d + 1]
                        .get(c as usize)
                        .ok_or_else(|| Error::Shape(format!("child index {c} out of range at depth {}", d + 1)))?;
                    if child.class != class.children[i] {
                        return Err(Error::Shape(format!("child class mismatch at depth {}", d + 1)));
                    }
                }
            }
        }
        Ok(HarmonicTruncation { tree, m, layers })
    }

    /// One node per vertex, from per-level values in canonical order.
    pub fn from_levels(tree: Arc<TreeConfig>, m: usize, levels: &[Vec<S>]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Shape("at least the root level is required".into()));
        }
        let mut layers = Vec::with_capacity(levels.len());
        let mut classes = vec![tree.root_class()];
        for (d, values) in levels.iter().enumerate() {
            if values.len() != classes.len() * m {
                return Err(Error::Shape(format!(
                    "level {d} needs {} coordinates, found {}",
                    classes.len() * m,
                    values.len()
                )));
            }
            let last = d + 1 == levels.len();
            let mut next_classes = Vec::new();
            let mut layer = Vec::with_capacity(classes.len());
            for (i, &c) in classes.iter().enumerate() {
                let children: Box<[u32]> = if last {
                    Box::new([])
                } else {
                    let kids = &tree.class(c).children;
                    let start = next_classes.len() as u32;
                    next_classes.extend_from_slice(kids);
                    (start..start + kids.len() as u32).collect()
                };
                layer.push(Node { class: c, value: values[i * m..(i + 1) * m].into(), children });
            }
            layers.push(layer);
            classes = next_classes;
        }
        Self::from_layers(tree, m, layers)
    }

    /// One node per vertex from values in breadth-first order.
    pub fn from_dense(tree: Arc<TreeConfig>, depth: usize, m: usize, values: &[S]) -> Result<Self> {
        let mut levels = Vec::with_capacity(depth + 1);
        let mut offset = 0;
        for d in 0..=depth {
            let size = tree.level_size(d).filter(|&s| s <= tree.max_level_size() as u128).ok_or_else(|| {
                Error::Cap(format!("level {d} is too large to materialize"))
            })? as usize;
            let end = offset + size * m;
            let chunk = values
                .get(offset..end)
                .ok_or_else(|| Error::Shape(format!("{} coordinates are too few for depth {depth}", values.len())))?;
            levels.push(chunk.to_vec());
            offset = end;
        }
        if offset != values.len() {
            return Err(Error::Shape(format!("{} surplus coordinates", values.len() - offset)));
        }
        Self::from_levels(tree, m, &levels)
    }

    pub fn constant(tree: Arc<TreeConfig>, depth: usize, point: &[S]) -> Result<Self> {
        let root = Node { class: tree.root_class(), value: point.into(), children: Box::new([]) };
        Self::from_layers(tree, point.len(), vec![vec![root]])?.constant_extend(depth)
    }

    pub fn tree(&self) -> &Arc<TreeConfig> {
        &self.tree
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer<S>> {
        self.layers
    }

    pub fn node_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn root_value(&self) -> &[S] {
        &self.layers[0][0].value
    }

    fn node_of(&self, v: &VertexId) -> Result<u32> {
        if v.depth() > self.depth() {
            return Err(Error::Argument(format!("vertex {v} is deeper than the truncation depth {}", self.depth())));
        }
        let mut idx = 0u32;
        for (d, &i) in v.path.iter().enumerate() {
            let node = &self.layers[d][idx as usize];
            idx = *node.children.get(i as usize).ok_or_else(|| Error::Address {
                path: v.path.clone(),
                reason: format!("index {i} at position {d} exceeds the branching"),
            })?;
        }
        Ok(idx)
    }

    pub fn value_at(&self, v: &VertexId) -> Result<&[S]> {
        let idx = self.node_of(v)?;
        Ok(&self.layers[v.depth()][idx as usize].value)
    }

    /// Node index of every vertex of level `n`, in canonical order.
    pub fn level_nodes(&self, n: usize) -> Result<Vec<u32>> {
        if n > self.depth() {
            return Err(Error::Argument(format!("level {n} exceeds the truncation depth {}", self.depth())));
        }
        match self.tree.level_size(n) {
            Some(s) if s <= self.tree.max_level_size() as u128 => {}
            _ => return Err(Error::Cap(format!("level {n} is too large to materialize"))),
        }
        let mut nodes = vec![0u32];
        for d in 0..n {
            nodes = nodes.iter().flat_map(|&i| self.layers[d][i as usize].children.iter().copied()).collect();
        }
        Ok(nodes)
    }

    /// `ω_n(f)`: the level-`n` simple function reading `f` on `T_n`.
    pub fn omega(&self, n: usize) -> Result<SimpleFunction<S>> {
        let nodes = self.level_nodes(n)?;
        let mut values = Vec::with_capacity(nodes.len() * self.m);
        for i in nodes {
            values.extend_from_slice(&self.layers[n][i as usize].value);
        }
        SimpleFunction::new(self.tree.clone(), n, self.m, values)
    }

    /// All values in breadth-first order.
    pub fn to_dense(&self) -> Result<Vec<S>> {
        let mut out = Vec::new();
        for n in 0..=self.depth() {
            out.extend(self.omega(n)?.values().iter().cloned());
        }
        Ok(out)
    }

    /// The same function with one node per vertex.
    pub fn to_tree_shape(&self) -> Result<Self> {
        let levels: Vec<Vec<S>> =
            (0..=self.depth()).map(|n| self.omega(n).map(|f| f.values().to_vec())).collect::<Result<_>>()?;
        Self::from_levels(self.tree.clone(), self.m, &levels)
    }

    /// For each node, one (father node, child index) pair reaching it.
    fn first_parents(&self) -> Vec<Vec<Option<(u32, u32)>>> {
        let mut parents: Vec<Vec<Option<(u32, u32)>>> = self.layers.iter().map(|l| vec![None; l.len()]).collect();
        for (d, layer) in self.layers.iter().enumerate().take(self.depth()) {
            for (j, node) in layer.iter().enumerate() {
                for (i, &c) in node.children.iter().enumerate() {
                    parents[d + 1][c as usize].get_or_insert((j as u32, i as u32));
                }
            }
        }
        parents
    }

    fn representative(parents: &[Vec<Option<(u32, u32)>>], depth: usize, node: u32) -> VertexId {
        let mut path = Vec::with_capacity(depth);
        let mut cur = node;
        for d in (1..=depth).rev() {
            let (p, i) = parents[d][cur as usize].expect("every node below the root has a father");
            path.push(i);
            cur = p;
        }
        path.reverse();
        VertexId::new(path)
    }

    /// Residual `f(x) − Σ_y w(x,y) f(y)` at a node.
    fn residual(&self, d: usize, node: &Node<S>) -> (Vec<S>, bool) {
        let children = node.children.iter().map(|&c| &*self.layers[d + 1][c as usize].value);
        harmonic_residual(&node.value, &self.tree.class(node.class).w, children)
    }

    /// Checks `f(x) = Σ_{y∈S(x)} w(x,y) f(y)` at every internal vertex.
    pub fn is_harmonic(&self) -> HarmonicReport {
        let mut bad: Vec<(usize, u32, Vec<S>)> = Vec::new();
        let mut nodes_checked = 0;
        for d in 0..self.depth() {
            for (j, node) in self.layers[d].iter().enumerate() {
                nodes_checked += 1;
                let (r, ok) = self.residual(d, node);
                if !ok {
                    bad.push((d, j as u32, r));
                }
            }
        }
        let violations = if bad.is_empty() {
            Vec::new()
        } else {
            let parents = self.first_parents();
            bad.into_iter()
                .map(|(d, j, r)| Violation {
                    vertex: Self::representative(&parents, d, j),
                    depth: d,
                    residual_norm: residual_norm(&r),
                    residual: r.iter().map(S::to_json).collect(),
                })
                .collect()
        };
        HarmonicReport { mode: S::MODE, depth: self.depth(), nodes_checked, violations }
    }

    /// Vertices `x ∈ T_n` where `Σ_y p(B_y) f(y) ≠ p(B_x) f(x)`; with `w = q`
    /// this is the martingale property of `(ω_n(f))_n`. Exact mode only.
    pub fn martingale_violations(&self, n: usize) -> Result<Vec<VertexId>> {
        if S::MODE != Mode::Exact {
            return Err(Error::Mode { expected: "exact", found: S::MODE.to_string() });
        }
        if n >= self.depth() {
            return Err(Error::Argument(format!("level {n} has no children inside depth {}", self.depth())));
        }
        let vertices = self.tree.level(n)?;
        let nodes = self.level_nodes(n)?;
        let (_, measures) = self.tree.level_classes(n)?;
        let mut out = Vec::new();
        for ((v, &j), p) in vertices.iter().zip(&nodes).zip(&measures) {
            let node = &self.layers[n][j as usize];
            let class = self.tree.class(node.class);
            let pc = S::from_crat(&CRat::real(p.clone()));
            let mut lhs = vec![S::zero(); self.m];
            for (i, &c) in node.children.iter().enumerate() {
                let py = S::from_crat(&CRat::real(p * &class.q[i]));
                for (a, y) in lhs.iter_mut().zip(self.layers[n + 1][c as usize].value.iter()) {
                    *a = a.plus(&py.times(y));
                }
            }
            let rhs: Vec<S> = node.value.iter().map(|x| pc.times(x)).collect();
            if lhs != rhs {
                out.push(v.clone());
            }
        }
        Ok(out)
    }

    fn compatible(&self, other: &Self) -> Result<()> {
        if !same_tree(&self.tree, &other.tree) {
            return Err(Error::Shape("truncations live on different trees".into()));
        }
        if self.m != other.m {
            return Err(Error::Shape(format!("dimensions differ: {} vs {}", self.m, other.m)));
        }
        Ok(())
    }

    /// Brackets `ρ(f, g) = Σ_n 2^{−n} d(f(z_n), g(z_n))/(1 + d(…))` using the
    /// vertices common to both truncations in breadth-first order.
    pub fn metric_rho(&self, other: &Self) -> Result<RhoInterval> {
        self.compatible(other)?;
        let depth = self.depth().min(other.depth());
        let mut lo = 0.0;
        let mut terms = 0usize;
        let mut frontier = vec![(0u32, 0u32)];
        'outer: for d in 0..=depth {
            for &(a, b) in &frontier {
                if terms == RHO_TERM_LIMIT {
                    break 'outer;
                }
                terms += 1;
                let x = &self.layers[d][a as usize].value;
                let y = &other.layers[d][b as usize].value;
                let t = distance(x, y);
                if t != 0.0 {
                    lo += bounded(t) * 2f64.powi(-(terms as i32));
                }
            }
            if d == depth {
                break;
            }
            let mut next = Vec::new();
            for &(a, b) in &frontier {
                let ka = &self.layers[d][a as usize].children;
                let kb = &other.layers[d][b as usize].children;
                next.extend(ka.iter().copied().zip(kb.iter().copied()));
                if next.len() + terms >= RHO_TERM_LIMIT {
                    break;
                }
            }
            frontier = next;
        }
        let mut tail = 2f64.powi(-(terms as i32));
        if tail == 0.0 {
            tail = f64::from_bits(1);
        }
        Ok(RhoInterval { lo, hi: lo + tail, terms })
    }

    /// The first `depth + 1` levels.
    pub fn truncate(&self, depth: usize) -> Result<Self> {
        if depth > self.depth() {
            return Err(Error::Argument(format!("cannot truncate depth {} to {depth}", self.depth())));
        }
        let mut layers = self.layers[..=depth].to_vec();
        for node in layers[depth].iter_mut() {
            node.children = Box::new([]);
        }
        Ok(HarmonicTruncation { tree: self.tree.clone(), m: self.m, layers })
    }

    /// Extends to `to_depth` by giving every new vertex its father's value.
    pub fn constant_extend(&self, to_depth: usize) -> Result<Self> {
        if to_depth < self.depth() {
            return Err(Error::Argument(format!("cannot extend depth {} to {to_depth}", self.depth())));
        }
        if to_depth > self.tree.depth_cap() {
            return Err(Error::Cap(format!("depth {to_depth} exceeds the cap {}", self.tree.depth_cap())));
        }
        let mut layers = self.layers.clone();
        while layers.len() <= to_depth {
            let last = layers.last_mut().expect("non-empty");
            let mut index: HashMap<(ClassId, PointKey<S>), u32> = HashMap::new();
            let mut next: Layer<S> = Vec::new();
            for node in last.iter_mut() {
                let kids = &self.tree.class(node.class).children;
                node.children = kids
                    .iter()
                    .map(|&c| {
                        *index.entry((c, PointKey(node.value.clone()))).or_insert_with(|| {
                            next.push(Node { class: c, value: node.value.clone(), children: Box::new([]) });
                            next.len() as u32 - 1
                        })
                    })
                    .collect();
            }
            layers.push(next);
        }
        Ok(HarmonicTruncation { tree: self.tree.clone(), m: self.m, layers })
    }

    /// Adds one level: every child takes its target value except the
    /// correction child, whose value is forced by the harmonic identity.
    pub fn corrected_extend(
        &self,
        targets: &SimpleFunction<S>,
        policy: CorrectionPolicy,
    ) -> Result<(Self, CorrectionReport)> {
        let n = self.depth();
        if targets.level() != n + 1 {
            return Err(Error::Argument(format!("targets must be at level {}, found {}", n + 1, targets.level())));
        }
        if targets.m() != self.m || !same_tree(targets.tree(), &self.tree) {
            return Err(Error::Shape("targets do not match the truncation".into()));
        }
        if n + 1 > self.tree.depth_cap() {
            return Err(Error::Cap(format!("depth {} exceeds the cap {}", n + 1, self.tree.depth_cap())));
        }
        let shaped = self.to_tree_shape()?;
        let mut layers = shaped.layers;
        let (_, measures) = self.tree.level_classes(n)?;
        let mut unmatched = Rational::zero();
        let mut mismatched = Rational::zero();
        let mut next: Layer<S> = Vec::with_capacity(targets.len());
        for (node, p) in layers[n].iter_mut().zip(&measures) {
            let class = self.tree.class(node.class);
            let star = policy.choose(&self.tree, node.class);
            let base = next.len();
            let mut forced: Vec<S> = node.value.to_vec();
            for i in 0..class.branching() {
                let t = targets.value(base + i);
                if i != star {
                    let w = S::from_crat(&class.w[i]);
                    for (a, y) in forced.iter_mut().zip(t) {
                        *a = a.minus(&w.times(y));
                    }
                }
            }
            let w_star = S::from_crat(&class.w[star]);
            let forced: Box<[S]> = forced.iter().map(|a| a.over(&w_star)).collect();
            let sector = p * &class.q[star];
            if *forced != *targets.value(base + star) {
                mismatched = &mismatched + &sector;
            }
            unmatched = &unmatched + &sector;
            for i in 0..class.branching() {
                let value = if i == star { forced.clone() } else { targets.value(base + i).into() };
                next.push(Node { class: class.children[i], value, children: Box::new([]) });
            }
            node.children = (base as u32..(base + class.branching()) as u32).collect();
        }
        let correction_children = layers[n].len();
        layers.push(next);
        let out = HarmonicTruncation { tree: self.tree.clone(), m: self.m, layers };
        Ok((out, CorrectionReport { unmatched_measure: unmatched, mismatched_measure: mismatched, correction_children }))
    }

    /// `Σ_i a_i f_i` over truncations of equal depth, built on the product
    /// of their DAGs.
    pub fn combine(terms: &[(S, &Self)]) -> Result<Self> {
        let (_, first) = terms.first().ok_or_else(|| Error::Shape("empty linear combination".into()))?;
        for (_, t) in terms {
            first.compatible(t)?;
            if t.depth() != first.depth() {
                return Err(Error::Shape(format!("depths differ: {} vs {}", first.depth(), t.depth())));
            }
        }
        let m = first.m;
        let value_of = |d: usize, tuple: &[u32]| -> Box<[S]> {
            let mut acc = vec![S::zero(); m];
            for ((a, t), &j) in terms.iter().zip(tuple) {
                for (x, y) in acc.iter_mut().zip(t.layers[d][j as usize].value.iter()) {
                    *x = x.plus(&a.times(y));
                }
            }
            acc.into()
        };
        let mut layers: Vec<Layer<S>> = Vec::with_capacity(first.layers.len());
        let mut tuples: Vec<Vec<u32>> = vec![vec![0; terms.len()]];
        for d in 0..=first.depth() {
            let last = d == first.depth();
            let mut index: HashMap<Vec<u32>, u32> = HashMap::new();
            let mut next_tuples: Vec<Vec<u32>> = Vec::new();
            let mut layer = Vec::with_capacity(tuples.len());
            for tuple in &tuples {
                let class = first.layers[d][tuple[0] as usize].class;
                let children: Box<[u32]> = if last {
                    Box::new([])
                } else {
                    (0..first.tree.class(class).branching())
                        .map(|i| {
                            let child: Vec<u32> = terms
                                .iter()
                                .zip(tuple)
                                .map(|((_, t), &j)| t.layers[d][j as usize].children[i])
                                .collect();
                            *index.entry(child.clone()).or_insert_with(|| {
                                next_tuples.push(child);
                                next_tuples.len() as u32 - 1
                            })
                        })
                        .collect()
                };
                layer.push(Node { class, value: value_of(d, tuple), children });
            }
            layers.push(layer);
            tuples = next_tuples;
        }
        Ok(HarmonicTruncation { tree: first.tree.clone(), m, layers })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let one = S::from_crat(&CRat::one());
        Self::combine(&[(one.clone(), self), (one, other)])
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let one = S::from_crat(&CRat::one());
        let minus_one = S::zero().minus(&one);
        Self::combine(&[(one, self), (minus_one, other)])
    }

    pub fn scale(&self, c: &S) -> Result<Self> {
        Self::combine(&[(c.clone(), self)])
    }

    /// The harmonic function agreeing with `h` on `T_k` (`k = h.level()`),
    /// obtained by applying the harmonic identity upward, then extended
    /// constantly to `depth`.
    pub fn harmonic_lift(h: &SimpleFunction<S>, depth: usize) -> Result<Self> {
        let k = h.level();
        if depth < k {
            return Err(Error::Argument(format!("depth {depth} is shallower than the target level {k}")));
        }
        let tree = h.tree().clone();
        let m = h.m();
        let mut levels: Vec<Vec<S>> = vec![Vec::new(); k + 1];
        levels[k] = h.values().to_vec();
        for d in (0..k).rev() {
            let (classes, _) = tree.level_classes(d)?;
            let below = &levels[d + 1];
            let mut values = Vec::with_capacity(classes.len() * m);
            let mut offset = 0;
            for &c in &classes {
                let class = tree.class(c);
                let mut acc = vec![S::zero(); m];
                for i in 0..class.branching() {
                    let w = S::from_crat(&class.w[i]);
                    for (a, y) in acc.iter_mut().zip(&below[(offset + i) * m..(offset + i + 1) * m]) {
                        *a = a.plus(&w.times(y));
                    }
                }
                offset += class.branching();
                values.extend(acc);
            }
            levels[d] = values;
        }
        Self::from_levels(tree, m, &levels)?.constant_extend(depth)
    }

    /// `true` when every vertex deeper than `n` carries its father's value,
    /// i.e. `ω_k = refine(ω_n)` for all `k > n`.
    pub fn is_flat_beyond(&self, n: usize) -> bool {
        (n..self.depth()).all(|d| {
            self.layers[d]
                .iter()
                .all(|node| node.children.iter().all(|&c| self.layers[d + 1][c as usize].value == node.value))
        })
    }

    /// Offset `g` with `f + g` close to `φ` in `ρ` and constant beyond a
    /// finite depth `N(n)`.
    pub fn flatten_perturbation(f: &Self, phi: &Self, n: u64) -> Result<(Self, FlattenReport)> {
        if n == 0 {
            return Err(Error::Argument("n must be positive".into()));
        }
        f.compatible(phi)?;
        let j0 = j0(n);
        let n_of_n = f.tree.vertex_at_bfs(j0)?.depth();
        let working_depth = f.depth().min(phi.depth());
        if working_depth < n_of_n {
            return Err(Error::Cap(format!("N({n}) = {n_of_n} exceeds the available depth {working_depth}")));
        }
        let f = f.truncate(working_depth)?;
        let phi = phi.truncate(working_depth)?;
        let diff = phi.sub(&f)?;
        let g = diff.truncate(n_of_n)?.constant_extend(working_depth)?;
        let report = FlattenReport {
            n,
            j0,
            n_of_n,
            working_depth,
            harmonic: g.is_harmonic().passed(),
            flat_beyond: g.is_flat_beyond(n_of_n),
            rho_offset: diff.metric_rho(&g)?,
            rho_target: f.add(&g)?.metric_rho(&phi)?,
            rho_literal: f.add(&g)?.metric_rho(&g)?,
        };
        Ok((g, report))
    }

    /// Dense JSON when every level can be materialized, otherwise the DAG.
    pub fn to_json(&self) -> Json {
        match self.to_dense() {
            Ok(values) => {
                let points: Vec<Json> =
                    values.chunks(self.m).map(|p| Json::Array(p.iter().map(S::to_json).collect())).collect();
                json!({"depth": self.depth(), "m": self.m, "mode": S::MODE, "values": points})
            }
            Err(_) => {
                let dag: Vec<Json> = self
                    .layers
                    .iter()
                    .map(|layer| {
                        Json::Array(
                            layer
                                .iter()
                                .map(|n| {
                                    json!({
                                        "class": n.class,
                                        "value": n.value.iter().map(S::to_json).collect::<Vec<_>>(),
                                        "children": n.children,
                                    })
                                })
                                .collect(),
                        )
                    })
                    .collect();
                json!({"depth": self.depth(), "m": self.m, "mode": S::MODE, "dag": dag})
            }
        }
    }

    pub fn from_json(tree: Arc<TreeConfig>, doc: &Json) -> Result<Self> {
        if let Some(mode) = doc.get("mode") {
            let found: Mode = serde_json::from_value(mode.clone())?;
            if found != S::MODE {
                return Err(Error::Mode { expected: S::MODE.as_str(), found: found.to_string() });
            }
        }
        let uint = |name: &str| {
            doc.get(name).and_then(Json::as_u64).ok_or_else(|| Error::Parse(format!("missing integer field {name:?}")))
        };
        let depth = uint("depth")? as usize;
        let m = uint("m")? as usize;
        let point = |p: &Json| -> Result<Box<[S]>> {
            let Json::Array(coords) = p else {
                return Err(Error::Parse("each value must be an array of coordinates".into()));
            };
            if coords.len() != m {
                return Err(Error::Shape(format!("value has {} coordinates, expected {m}", coords.len())));
            }
            coords.iter().map(S::from_json).collect()
        };
        if let Some(Json::Array(values)) = doc.get("values") {
            let mut flat = Vec::with_capacity(values.len() * m);
            for p in values {
                flat.extend(point(p)?.into_vec());
            }
            return Self::from_dense(tree, depth, m, &flat);
        }
        let Some(Json::Array(dag)) = doc.get("dag") else {
            return Err(Error::Parse("expected a values or dag field".into()));
        };
        let mut layers = Vec::with_capacity(dag.len());
        for layer in dag {
            let Json::Array(nodes) = layer else {
                return Err(Error::Parse("each dag layer must be an array".into()));
            };
            let mut out = Vec::with_capacity(nodes.len());
            for node in nodes {
                let class = node.get("class").and_then(Json::as_u64).ok_or_else(|| Error::Parse("node class".into()))?;
                let value = point(node.get("value").ok_or_else(|| Error::Parse("node value".into()))?)?;
                let children: Vec<u32> = serde_json::from_value(node.get("children").cloned().unwrap_or(Json::Null))?;
                out.push(Node { class: class as ClassId, value, children: children.into() });
            }
            layers.push(out);
        }
        let t = Self::from_layers(tree, m, layers)?;
        if t.depth() != depth {
            return Err(Error::Shape(format!("declared depth {depth}, found {}", t.depth())));
        }
        Ok(t)
    }
}
