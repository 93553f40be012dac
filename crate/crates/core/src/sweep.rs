//! Level streams and boundary mass sweeps.
//!
//! Deep truncations are processed one level at a time. A [`LevelSource`]
//! yields frames `(parent layer with child links, current layer)`; consumers
//! such as [`MassSweep`] and [`check_frame`] never need the whole DAG.

use rustc_hash::FxHashMap;
use std::ops::Range;
use std::sync::Arc;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::harmonic::{harmonic_residual, HarmonicTruncation, Layer, Node};
use crate::measure::SimpleFunction;
use crate::rational::{CRat, Rational};
use crate::scalar::{bounded_exact, separation, Mode, Scalar};
use crate::tree::{TreeConfig, VertexId};

pub struct Frame<'a, S: Scalar> {
    pub depth: usize,
    /// Layer `depth − 1` with child links into `layer`; `None` at the root.
    pub parent: Option<&'a [Node<S>]>,
    pub layer: &'a [Node<S>],
}

pub trait LevelSource<S: Scalar> {
    fn tree(&self) -> &Arc<TreeConfig>;
    fn m(&self) -> usize;
    fn depth(&self) -> usize;
    /// Visits the levels `0..=depth` in order.
    fn stream(&self, visit: &mut dyn FnMut(Frame<'_, S>) -> Result<()>) -> Result<()>;
}

impl<S: Scalar> LevelSource<S> for HarmonicTruncation<S> {
    fn tree(&self) -> &Arc<TreeConfig> {
        HarmonicTruncation::tree(self)
    }

    fn m(&self) -> usize {
        HarmonicTruncation::m(self)
    }

    fn depth(&self) -> usize {
        HarmonicTruncation::depth(self)
    }

    fn stream(&self, visit: &mut dyn FnMut(Frame<'_, S>) -> Result<()>) -> Result<()> {
        let layers = self.layers();
        for (n, layer) in layers.iter().enumerate() {
            let parent = n.checked_sub(1).map(|p| layers[p].as_slice());
            visit(Frame { depth: n, parent, layer })?;
        }
        Ok(())
    }
}

/// Residuals `f(x) − Σ_y w(x,y) f(y)` of the parent nodes of a frame that
/// fail the harmonic identity.
pub fn check_frame<S: Scalar>(tree: &TreeConfig, frame: &Frame<'_, S>) -> Vec<(u32, Vec<S>)> {
    let Some(parent) = frame.parent else { return Vec::new() };
    let mut bad = Vec::new();
    for (j, node) in parent.iter().enumerate() {
        let children = node.children.iter().map(|&c| &*frame.layer[c as usize].value);
        let (acc, ok) = harmonic_residual(&node.value, &tree.class(node.class).w, children);
        if !ok {
            bad.push((j as u32, acc));
        }
    }
    bad
}

/// A vertex reaching node `node` of layer `depth`, found by re-streaming.
pub fn locate_node<S: Scalar>(source: &dyn LevelSource<S>, depth: usize, node: u32) -> Result<VertexId> {
    let mut parents: Vec<Vec<Option<(u32, u32)>>> = Vec::with_capacity(depth + 1);
    source.stream(&mut |frame| {
        if frame.depth > depth {
            return Ok(());
        }
        let mut mine = vec![None; frame.layer.len()];
        if let Some(parent) = frame.parent {
            for (j, p) in parent.iter().enumerate() {
                for (i, &c) in p.children.iter().enumerate() {
                    mine[c as usize].get_or_insert((j as u32, i as u32));
                }
            }
        }
        parents.push(mine);
        Ok(())
    })?;
    if parents.len() <= depth {
        return Err(Error::Argument(format!("depth {depth} beyond the source")));
    }
    let mut path = Vec::with_capacity(depth);
    let mut cur = node;
    for d in (1..=depth).rev() {
        let (p, i) = parents[d][cur as usize].ok_or_else(|| Error::Shape(format!("node {cur} at depth {d} is unreachable")))?;
        path.push(i);
        cur = p;
    }
    path.reverse();
    Ok(VertexId::new(path))
}

/// Materializes a whole stream.
pub fn collect<S: Scalar>(source: &dyn LevelSource<S>) -> Result<HarmonicTruncation<S>> {
    let mut layers: Vec<Layer<S>> = Vec::with_capacity(source.depth() + 1);
    source.stream(&mut |frame| {
        if let (Some(parent), Some(last)) = (frame.parent, layers.last_mut()) {
            *last = parent.to_vec();
        }
        layers.push(frame.layer.to_vec());
        Ok(())
    })?;
    if let Some(last) = layers.last_mut() {
        for node in last.iter_mut() {
            node.children = Box::new([]);
        }
    }
    HarmonicTruncation::from_layers(source.tree().clone(), source.m(), layers)
}

/// `out = map · (base + offset)`, streamed. The offset is a stored
/// truncation at least as deep as the base.
pub struct Affine<'a, S: Scalar> {
    pub base: &'a dyn LevelSource<S>,
    pub offset: Option<&'a HarmonicTruncation<S>>,
    pub map: Option<LinearMap<S>>,
}

/// Dense `rows × cols` matrix acting on points of `C^cols`.
#[derive(Clone, Debug)]
pub struct LinearMap<S: Scalar> {
    pub rows: usize,
    pub cols: usize,
    pub coeffs: Vec<S>,
}

impl<S: Scalar> LinearMap<S> {
    /// Selects coordinates `range`.
    pub fn select(cols: usize, range: Range<usize>) -> Self {
        let rows = range.len();
        let mut coeffs = vec![S::zero(); rows * cols];
        let one = S::from_crat(&CRat::one());
        for (r, c) in range.enumerate() {
            coeffs[r * cols + c] = one.clone();
        }
        LinearMap { rows, cols, coeffs }
    }

    /// Maps `C^{mJ} → C^m`, `(v_1, …, v_J) ↦ Σ a_i v_i`.
    pub fn combo(m: usize, coefficients: &[S], groups: usize) -> Self {
        let cols = m * groups;
        let mut coeffs = vec![S::zero(); m * cols];
        for (i, a) in coefficients.iter().enumerate() {
            for r in 0..m {
                coeffs[r * cols + i * m + r] = a.clone();
            }
        }
        LinearMap { rows: m, cols, coeffs }
    }

    /// Block rows of several maps sharing the same input.
    pub fn stack(maps: &[LinearMap<S>]) -> Self {
        let cols = maps.first().map_or(0, |m| m.cols);
        let rows = maps.iter().map(|m| m.rows).sum();
        let coeffs = maps.iter().flat_map(|m| m.coeffs.iter().cloned()).collect();
        LinearMap { rows, cols, coeffs }
    }

    pub fn apply(&self, v: &[S]) -> Box<[S]> {
        (0..self.rows)
            .map(|r| {
                let row = &self.coeffs[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(v).fold(S::zero(), |acc, (a, x)| if a.is_zero() { acc } else { acc.plus(&a.times(x)) })
            })
            .collect()
    }
}

impl<'a, S: Scalar> LevelSource<S> for Affine<'a, S> {
    fn tree(&self) -> &Arc<TreeConfig> {
        self.base.tree()
    }

    fn m(&self) -> usize {
        self.map.as_ref().map_or(self.base.m(), |m| m.rows)
    }

    fn depth(&self) -> usize {
        self.base.depth()
    }

    fn stream(&self, visit: &mut dyn FnMut(Frame<'_, S>) -> Result<()>) -> Result<()> {
        let mut mapper = AffineMapper::new(self.base.m(), self.base.depth(), self.offset, self.map.clone())?;
        self.base.stream(&mut |frame| {
            mapper.push(&frame)?;
            visit(mapper.frame())
        })
    }
}

/// Frame-by-frame form of [`Affine`], for consumers that receive the base
/// levels one at a time.
pub struct AffineMapper<'a, S: Scalar> {
    offset: Option<&'a HarmonicTruncation<S>>,
    map: Option<LinearMap<S>>,
    depth: Option<usize>,
    pairs: Vec<(u32, u32)>,
    parent: Layer<S>,
    layer: Layer<S>,
}

impl<'a, S: Scalar> AffineMapper<'a, S> {
    /// `m` and `depth` describe the base stream.
    pub fn new(m: usize, depth: usize, offset: Option<&'a HarmonicTruncation<S>>, map: Option<LinearMap<S>>) -> Result<Self> {
        if let Some(map) = &map {
            if map.cols != m {
                return Err(Error::Shape(format!("map expects {} coordinates, source has {m}", map.cols)));
            }
        }
        if let Some(offset) = offset {
            if offset.depth() < depth || offset.m() != m {
                return Err(Error::Shape("offset truncation does not cover the source".into()));
            }
        }
        Ok(AffineMapper { offset, map, depth: None, pairs: Vec::new(), parent: Vec::new(), layer: Vec::new() })
    }

    fn value(&self, base: &[S], offset: Option<&[S]>) -> Box<[S]> {
        let sum: Box<[S]> = match offset {
            Some(o) => base.iter().zip(o).map(|(x, y)| x.plus(y)).collect(),
            None => base.into(),
        };
        match &self.map {
            Some(map) => map.apply(&sum),
            None => sum,
        }
    }

    /// Consumes the next base frame.
    pub fn push(&mut self, frame: &Frame<'_, S>) -> Result<()> {
        self.push_with(frame, true)
    }

    /// Consumes the next base frame, tracking only the node structure; the
    /// mapped layer carries empty values.
    pub fn push_shape(&mut self, frame: &Frame<'_, S>) -> Result<()> {
        self.push_with(frame, false)
    }

    fn push_with(&mut self, frame: &Frame<'_, S>, values: bool) -> Result<()> {
        let expected = self.depth.map_or(0, |d| d + 1);
        if frame.depth != expected {
            return Err(Error::Argument(format!("expected level {expected}, received {}", frame.depth)));
        }
        let off_layer = self.offset.map(|o| &o.layers()[frame.depth]);
        let off_value = |b: u32| off_layer.map(|l| &*l[b as usize].value);
        let mut layer = std::mem::take(&mut self.layer);
        let pairs = match frame.parent {
            None => vec![(0, 0)],
            Some(parent) => {
                let off_parent = self.offset.map(|o| &o.layers()[frame.depth - 1]);
                let mut index: FxHashMap<(u32, u32), u32> = FxHashMap::default();
                let mut pairs = Vec::new();
                for (k, &(a, b)) in self.pairs.iter().enumerate() {
                    let pa = &parent[a as usize];
                    let kids: Box<[u32]> = pa
                        .children
                        .iter()
                        .enumerate()
                        .map(|(i, &ca)| {
                            let cb = off_parent.map_or(0, |l| l[b as usize].children[i]);
                            *index.entry((ca, cb)).or_insert_with(|| {
                                pairs.push((ca, cb));
                                pairs.len() as u32 - 1
                            })
                        })
                        .collect();
                    layer[k].children = kids;
                }
                pairs
            }
        };
        let next = pairs
            .iter()
            .map(|&(a, b)| {
                let node = &frame.layer[a as usize];
                let value = if values { self.value(&node.value, off_value(b)) } else { Box::new([]) };
                Node { class: node.class, value, children: Box::new([]) }
            })
            .collect();
        self.parent = layer;
        self.layer = next;
        self.pairs = pairs;
        self.depth = Some(frame.depth);
        Ok(())
    }

    /// The mapped frame of the last pushed level.
    pub fn frame(&self) -> Frame<'_, S> {
        let depth = self.depth.unwrap_or(0);
        let parent = if depth == 0 { None } else { Some(self.parent.as_slice()) };
        Frame { depth, parent, layer: &self.layer }
    }
}

/// Values of `h` on every vertex of depth `k ≥ h.level()`.
pub fn sector_values<S: Scalar>(h: &SimpleFunction<S>, k: usize) -> Result<Vec<S>> {
    Ok(h.refine(k)?.values().to_vec())
}

/// What to compare at each level: coordinates `coords` of every node against
/// `target`, given per depth-`K` sector.
pub struct Probe<'a, S: Scalar> {
    pub coords: Range<usize>,
    pub target: &'a [S],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeValue {
    pub p: f64,
    pub p_exact: Option<Rational>,
    pub unmatched: Rational,
}

struct Entry {
    node: u32,
    sector: u32,
    /// Mass times `Q^e`, where `e = max(level, K)`.
    num: BigInt,
    mass: f64,
}

/// Boundary masses of `(node, sector)` pairs, advanced one level at a time.
///
/// Masses are kept as integers over a common denominator `Q^e`, with `Q` the
/// least common multiple of all weight denominators, so sums never need a
/// gcd.
pub struct MassSweep {
    k: usize,
    width: usize,
    q_scaled: Vec<Vec<BigInt>>,
    q_f64: Vec<Vec<f64>>,
    q_lcm: BigInt,
    /// Sector masses at depth `K`, scaled by `Q^K`.
    sector_num: Vec<BigInt>,
    sector_mass: Vec<f64>,
    /// `anc[d][s]`: index at depth `d` of the ancestor of sector `s`.
    anc: Vec<Vec<u32>>,
    level: usize,
    vertex_nodes: Vec<u32>,
    entries: Vec<Entry>,
}

impl MassSweep {
    pub fn new(tree: Arc<TreeConfig>, k: usize) -> Result<Self> {
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
        let (_, measures) = tree.level_classes(k)?;
        let scale = num_traits::pow(q_lcm.clone(), k);
        let sector_num: Vec<BigInt> = measures
            .iter()
            .map(|p| {
                let (n, r) = (p.numer() * &scale).div_rem(p.denom());
                debug_assert!(r.is_zero());
                n
            })
            .collect();
        let sector_mass = measures.iter().map(Rational::to_f64).collect();
        // fathers[d][x]: index at depth d − 1 of the father of vertex x.
        let mut fathers: Vec<Vec<u32>> = vec![Vec::new()];
        let mut classes = vec![tree.root_class()];
        for _ in 0..k {
            let mut next = Vec::new();
            let mut up = Vec::new();
            for (i, &c) in classes.iter().enumerate() {
                for &child in &tree.class(c).children {
                    up.push(i as u32);
                    next.push(child);
                }
            }
            fathers.push(up);
            classes = next;
        }
        let sectors = sector_num.len();
        let mut up: Vec<u32> = (0..sectors as u32).collect();
        let mut anc = vec![up.clone()];
        for d in (1..=k).rev() {
            up = up.iter().map(|&x| fathers[d][x as usize]).collect();
            anc.push(up.clone());
        }
        anc.reverse();
        Ok(MassSweep {
            k,
            width: sectors,
            q_scaled,
            q_f64,
            q_lcm,
            sector_num,
            sector_mass,
            anc,
            level: 0,
            vertex_nodes: Vec::new(),
            entries: Vec::new(),
        })
    }

    pub fn sector_depth(&self) -> usize {
        self.k
    }

    pub fn sectors(&self) -> usize {
        self.width
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// Moves to the frame's level.
    pub fn advance<S: Scalar>(&mut self, frame: &Frame<'_, S>) -> Result<()> {
        match frame.parent {
            None => {
                if frame.depth != 0 {
                    return Err(Error::Argument("streams start at the root".into()));
                }
                self.level = 0;
                self.vertex_nodes = vec![0];
            }
            Some(parent) => {
                if frame.depth != self.level + 1 {
                    return Err(Error::Argument(format!("expected level {}, got {}", self.level + 1, frame.depth)));
                }
                self.level = frame.depth;
                if self.level <= self.k {
                    self.vertex_nodes = self
                        .vertex_nodes
                        .iter()
                        .flat_map(|&j| parent[j as usize].children.iter().copied())
                        .collect();
                } else {
                    let mut index: FxHashMap<(u32, u32), usize> = FxHashMap::default();
                    let mut next: Vec<Entry> = Vec::with_capacity(self.entries.len() * 2);
                    for e in &self.entries {
                        let node = &parent[e.node as usize];
                        let qs = &self.q_scaled[node.class as usize];
                        let qf = &self.q_f64[node.class as usize];
                        for (i, &c) in node.children.iter().enumerate() {
                            let num = &e.num * &qs[i];
                            let mass = e.mass * qf[i];
                            match index.get(&(c, e.sector)) {
                                Some(&at) => {
                                    next[at].num += num;
                                    next[at].mass += mass;
                                }
                                None => {
                                    index.insert((c, e.sector), next.len());
                                    next.push(Entry { node: c, sector: e.sector, num, mass });
                                }
                            }
                        }
                    }
                    self.entries = next;
                    return Ok(());
                }
            }
        }
        let d = self.level;
        self.entries = (0..self.width)
            .map(|s| Entry {
                node: self.vertex_nodes[self.anc[d][s] as usize],
                sector: s as u32,
                num: self.sector_num[s].clone(),
                mass: self.sector_mass[s],
            })
            .collect();
        Ok(())
    }

    fn denominator(&self) -> BigInt {
        num_traits::pow(self.q_lcm.clone(), self.level.max(self.k))
    }

    /// `P(ω_n(f)|coords, target)` and the unmatched measure at the current
    /// level. The exact value is attempted only when `exact` is set.
    pub fn evaluate<S: Scalar>(&self, layer: &[Node<S>], probe: &Probe<'_, S>, exact: bool) -> ProbeValue {
        let width = probe.coords.len();
        let mut p = 0.0;
        let mut unmatched = BigInt::zero();
        let mut p_exact = if exact && S::MODE == Mode::Exact { Some(Rational::zero()) } else { None };
        let denom = if p_exact.is_some() { Some(Rational::new(BigInt::one(), self.denominator())) } else { None };
        for e in &self.entries {
            let v = &layer[e.node as usize].value[probe.coords.clone()];
            let t = &probe.target[e.sector as usize * width..(e.sector as usize + 1) * width];
            let Some(b) = separation(v, t) else { continue };
            unmatched += &e.num;
            p += e.mass * b;
            if let (Some(acc), Some(unit)) = (p_exact.as_mut(), denom.as_ref()) {
                match bounded_exact(v, t) {
                    Some(b) => *acc = &*acc + &(&Rational::new(e.num.clone(), BigInt::one()) * &(unit * &b)),
                    None => p_exact = None,
                }
            }
        }
        let unmatched = Rational::new(unmatched, self.denominator());
        ProbeValue { p, p_exact, unmatched }
    }

    /// Total mass currently tracked; 1 up to rounding.
    pub fn total_mass(&self) -> Rational {
        let total: BigInt = self.entries.iter().map(|e| &e.num).sum();
        Rational::new(total, self.denominator())
    }

    /// Largest mass numerator in bits, a rough cost indicator.
    pub fn max_num_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.num.bits()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::dense_family;

    fn q(s: &str) -> Rational {
        s.parse().unwrap()
    }

    fn c(s: &str) -> CRat {
        CRat::real(q(s))
    }

    /// P at every level via the sweep, against dense evaluation.
    fn compare(tree: Arc<TreeConfig>, f: &HarmonicTruncation<CRat>, h: &SimpleFunction<CRat>, k: usize) {
        let target = sector_values(h, k).unwrap();
        let mut sweep = MassSweep::new(tree.clone(), k).unwrap();
        let m = f.m();
        f.stream(&mut |frame| {
            sweep.advance(&frame)?;
            assert_eq!(sweep.total_mass(), Rational::one());
            let got = sweep.evaluate(frame.layer, &Probe { coords: 0..m, target: &target }, true);
            let omega = f.omega(frame.depth)?;
            let expected = omega.metric_p_exact(h)?;
            assert_eq!(got.p_exact, expected, "level {}", frame.depth);
            assert!((got.p - omega.metric_p(h)?).abs() < 1e-12);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn sweep_matches_dense_metric() {
        let t = Arc::new(TreeConfig::uniform(&[q("1/3"), q("2/3")], 10).unwrap());
        let h = SimpleFunction::new(t.clone(), 2, 1, vec![c("1"), c("0"), c("3"), c("-1")]).unwrap();
        let g = dense_family::<CRat>(&t, 1, 4321).unwrap();
        let f = HarmonicTruncation::harmonic_lift(&g, 6).unwrap();
        compare(t.clone(), &f, &h, 2);
        compare(t.clone(), &f, &h, 3);
        let tree_shaped = f.to_tree_shape().unwrap();
        compare(t, &tree_shaped, &h, 2);
    }

    #[test]
    fn affine_stream_matches_combine() {
        let t = Arc::new(TreeConfig::binary(8));
        let a = HarmonicTruncation::harmonic_lift(&dense_family::<CRat>(&t, 2, 9000).unwrap(), 5).unwrap();
        let b = HarmonicTruncation::harmonic_lift(&dense_family::<CRat>(&t, 2, 70).unwrap(), 5).unwrap();
        let sum = a.add(&b).unwrap();
        let map = LinearMap::combo(1, &[c("2"), c("-1/3")], 2);
        let view = Affine { base: &a, offset: Some(&b), map: Some(map) };
        let mut levels = Vec::new();
        view.stream(&mut |frame| {
            assert!(check_frame(&t, &frame).is_empty());
            if let Some(parent) = frame.parent {
                *levels.last_mut().unwrap() = parent.to_vec();
            }
            levels.push(frame.layer.to_vec());
            Ok(())
        })
        .unwrap();
        for n in 0..=5 {
            let direct = sum.omega(n).unwrap();
            let expected: Vec<CRat> =
                direct.points().map(|p| p[0].mul(&c("2")).add(&p[1].mul(&c("-1/3")))).collect();
            let got = HarmonicTruncation::from_layers(t.clone(), 1, {
                let mut ls = levels[..=n].to_vec();
                for node in ls[n].iter_mut() {
                    node.children = Box::new([]);
                }
                ls
            })
            .unwrap()
            .omega(n)
            .unwrap();
            assert_eq!(got.values(), expected.as_slice());
        }
    }

    #[test]
    fn frame_check_and_locate() {
        let t = Arc::new(TreeConfig::binary(6));
        let f = HarmonicTruncation::harmonic_lift(&dense_family::<CRat>(&t, 1, 5555).unwrap(), 3).unwrap();
        let mut layers = f.to_tree_shape().unwrap().into_layers();
        layers[3][5].value[0] = layers[3][5].value[0].add(&c("1"));
        let bad = HarmonicTruncation::from_layers(t.clone(), 1, layers).unwrap();
        let mut found = Vec::new();
        bad.stream(&mut |frame| {
            for (j, _) in check_frame(&t, &frame) {
                found.push((frame.depth - 1, j));
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(found, vec![(2, 2)]);
        assert_eq!(locate_node(&bad, 2, 2).unwrap(), VertexId::new(vec![1, 0]));
    }
}
