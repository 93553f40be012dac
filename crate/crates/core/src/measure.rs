//! Simple functions on the boundary and the convergence-in-probability
//! metric between them.

use std::sync::Arc;

use serde_json::{json, Value as Json};

use crate::error::{Error, Result};
use crate::rational::{CRat, Rational};
use crate::scalar::{bounded, bounded_exact, distance, Mode, Scalar};
use crate::tree::{ClassId, TreeConfig, VertexId};

/// An `M_n`-measurable function `∂T → C^m`: one point per vertex of `T_n`,
/// stored flat in canonical order.
#[derive(Clone, Debug)]
pub struct SimpleFunction<S: Scalar> {
    tree: Arc<TreeConfig>,
    level: usize,
    m: usize,
    values: Vec<S>,
}

pub(crate) fn same_tree(a: &Arc<TreeConfig>, b: &Arc<TreeConfig>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

fn enumerable_size(tree: &TreeConfig, level: usize) -> Result<usize> {
    if level > tree.depth_cap() {
        return Err(Error::Cap(format!("level {level} exceeds the cap {}", tree.depth_cap())));
    }
    match tree.level_size(level) {
        Some(n) if n <= tree.max_level_size() as u128 => Ok(n as usize),
        _ => Err(Error::Cap(format!("level {level} is too large to materialize"))),
    }
}

/// Repeats each point once per descendant, walking down from level `from`
/// to level `to`.
pub(crate) fn expand_points<S: Scalar>(
    tree: &TreeConfig,
    mut classes: Vec<ClassId>,
    mut values: Vec<S>,
    m: usize,
    from: usize,
    to: usize,
) -> (Vec<ClassId>, Vec<S>) {
    for _ in from..to {
        let mut next_c = Vec::with_capacity(classes.len() * 2);
        let mut next_v = Vec::with_capacity(values.len() * 2);
        for (i, &c) in classes.iter().enumerate() {
            let class = tree.class(c);
            for &child in &class.children {
                next_c.push(child);
                next_v.extend_from_slice(&values[i * m..(i + 1) * m]);
            }
        }
        classes = next_c;
        values = next_v;
    }
    (classes, values)
}

impl<S: Scalar> SimpleFunction<S> {
    pub fn new(tree: Arc<TreeConfig>, level: usize, m: usize, values: Vec<S>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Shape("value dimension m must be at least 1".into()));
        }
        let size = enumerable_size(&tree, level)?;
        if values.len() != size * m {
            return Err(Error::Shape(format!(
                "level {level} has {size} vertices, expected {} coordinates, found {}",
                size * m,
                values.len()
            )));
        }
        Ok(SimpleFunction { tree, level, m, values })
    }

    pub fn constant(tree: Arc<TreeConfig>, level: usize, point: &[S]) -> Result<Self> {
        let size = enumerable_size(&tree, level)?;
        let values = point.iter().cloned().cycle().take(size * point.len()).collect();
        Self::new(tree, level, point.len(), values)
    }

    pub fn zero(tree: Arc<TreeConfig>, m: usize) -> Self {
        Self::new(tree, 0, m, vec![S::zero(); m]).expect("level 0 is always enumerable")
    }

    pub fn from_points(tree: Arc<TreeConfig>, level: usize, points: &[Vec<S>]) -> Result<Self> {
        let m = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != m) {
            return Err(Error::Shape("points have differing dimensions".into()));
        }
        Self::new(tree, level, m, points.concat())
    }

    pub fn tree(&self) -> &Arc<TreeConfig> {
        &self.tree
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of sectors, `|T_level|`.
    pub fn len(&self) -> usize {
        self.values.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, i: usize) -> &[S] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn points(&self) -> impl Iterator<Item = &[S]> {
        self.values.chunks(self.m)
    }

    /// Value on the sector `B_v`, where `v` has depth `level`.
    pub fn value_at(&self, v: &VertexId) -> Result<&[S]> {
        if v.depth() != self.level {
            return Err(Error::Argument(format!("vertex {v} is not at level {}", self.level)));
        }
        Ok(self.value(self.tree.level_index(v)? as usize))
    }

    /// The same function viewed as `M_{n2}`-measurable.
    pub fn refine(&self, n2: usize) -> Result<Self> {
        if n2 < self.level {
            return Err(Error::Argument(format!("cannot refine level {} down to {n2}", self.level)));
        }
        if n2 == self.level {
            return Ok(self.clone());
        }
        enumerable_size(&self.tree, n2)?;
        let (classes, _) = self.tree.level_classes(self.level)?;
        let (_, values) = expand_points(&self.tree, classes, self.values.clone(), self.m, self.level, n2);
        Self::new(self.tree.clone(), n2, self.m, values)
    }

    fn compatible(&self, other: &Self) -> Result<()> {
        if !same_tree(&self.tree, &other.tree) {
            return Err(Error::Shape("simple functions live on different trees".into()));
        }
        if self.m != other.m {
            return Err(Error::Shape(format!("dimensions differ: {} vs {}", self.m, other.m)));
        }
        Ok(())
    }

    /// Both functions at their common refinement level.
    pub fn common(&self, other: &Self) -> Result<(Self, Self)> {
        self.compatible(other)?;
        let level = self.level.max(other.level);
        Ok((self.refine(level)?, other.refine(level)?))
    }

    /// `P(ψ, φ) = Σ_x p(B_x) d/(1+d)` at the common refinement level.
    pub fn metric_p(&self, other: &Self) -> Result<f64> {
        let (a, b) = self.common(other)?;
        let (_, measures) = self.tree.level_classes(a.level)?;
        Ok(measures
            .iter()
            .zip(a.points().zip(b.points()))
            .map(|(p, (x, y))| {
                let d = distance(x, y);
                if d == 0.0 {
                    0.0
                } else {
                    p.to_f64() * bounded(d)
                }
            })
            .sum())
    }

    /// `P(ψ, φ)` as an exact rational, available when every sector distance
    /// is rational.
    pub fn metric_p_exact(&self, other: &Self) -> Result<Option<Rational>> {
        let (a, b) = self.common(other)?;
        let (_, measures) = self.tree.level_classes(a.level)?;
        let mut total = Rational::zero();
        for (p, (x, y)) in measures.iter().zip(a.points().zip(b.points())) {
            match bounded_exact(x, y) {
                Some(t) => total = &total + &(p * &t),
                None => return Ok(None),
            }
        }
        Ok(Some(total))
    }

    fn zip_with(&self, other: &Self, f: impl Fn(&S, &S) -> S) -> Result<Self> {
        let (a, b) = self.common(other)?;
        let values = a.values.iter().zip(&b.values).map(|(x, y)| f(x, y)).collect();
        Ok(SimpleFunction { values, ..a })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, S::plus)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, S::minus)
    }

    pub fn scale(&self, c: &S) -> Self {
        SimpleFunction { values: self.values.iter().map(|x| c.times(x)).collect(), ..self.clone() }
    }

    /// Equality as elements of `L⁰`: sector-wise after common refinement.
    pub fn l0_eq(&self, other: &Self) -> Result<bool> {
        let (a, b) = self.common(other)?;
        Ok(a.values == b.values)
    }

    /// A function `ψ' ≠ ψ` with `0 < P(ψ, ψ') < ε`, obtained by adding 1 to
    /// the first coordinate on one sector of measure below `ε`. The sector is
    /// found by following the smallest-weight child from the root.
    pub fn perturb(&self, eps: &Rational) -> Result<Self> {
        if !eps.is_positive() || *eps >= Rational::one() {
            return Err(Error::Argument(format!("perturbation size {eps} must lie in (0, 1)")));
        }
        let mut v = VertexId::root();
        let mut class = self.tree.root_class();
        let mut measure = Rational::one();
        while measure >= *eps || v.depth() < self.level {
            if v.depth() >= self.tree.depth_cap() {
                return Err(Error::Cap(format!("no sector of measure below {eps} within the depth cap")));
            }
            let i = self.tree.argmin_child(class);
            measure = &measure * &self.tree.class(class).q[i];
            class = self.tree.class(class).children[i];
            v = v.child(i as u32);
        }
        let mut out = self.refine(v.depth())?;
        let index = self.tree.level_index(&v)? as usize;
        let slot = &mut out.values[index * self.m];
        *slot = slot.plus(&S::from_crat(&CRat::one()));
        Ok(out)
    }

    pub fn to_json(&self) -> Json {
        let values: Vec<Json> =
            self.points().map(|p| Json::Array(p.iter().map(S::to_json).collect())).collect();
        json!({"level": self.level, "m": self.m, "mode": S::MODE, "values": values})
    }

    pub fn from_json(tree: Arc<TreeConfig>, doc: &Json) -> Result<Self> {
        if let Some(mode) = doc.get("mode") {
            let found: Mode = serde_json::from_value(mode.clone())?;
            if found != S::MODE {
                return Err(Error::Mode { expected: S::MODE.as_str(), found: found.to_string() });
            }
        }
        let field = |name: &str| doc.get(name).ok_or_else(|| Error::Parse(format!("missing field {name:?}")));
        let level = field("level")?.as_u64().ok_or_else(|| Error::Parse("level must be an integer".into()))?;
        let m = field("m")?.as_u64().ok_or_else(|| Error::Parse("m must be an integer".into()))? as usize;
        let Json::Array(points) = field("values")? else {
            return Err(Error::Parse("values must be an array".into()));
        };
        let mut values = Vec::with_capacity(points.len() * m);
        for p in points {
            let Json::Array(coords) = p else {
                return Err(Error::Parse("each value must be an array of coordinates".into()));
            };
            if coords.len() != m {
                return Err(Error::Shape(format!("value has {} coordinates, expected {m}", coords.len())));
            }
            for c in coords {
                values.push(S::from_json(c)?);
            }
        }
        Self::new(tree, level as usize, m, values)
    }
}

impl<S: Scalar> PartialEq for SimpleFunction<S> {
    fn eq(&self, other: &Self) -> bool {
        self.level == other.level && self.m == other.m && same_tree(&self.tree, &other.tree) && self.values == other.values
    }
}

fn zigzag(i: u64) -> i64 {
    if i % 2 == 1 {
        i.div_ceil(2) as i64
    } else {
        -((i / 2) as i64)
    }
}

/// The `index`-th member (1-based) of a fixed enumeration of simple functions
/// with Gaussian-rational values.
///
/// Stage `s = 1, 2, …` lists, for each level `k < s` and each denominator
/// `r ≤ s`, every assignment of values `(a + bi)/r` with `|a|, |b| ≤ s` to the
/// `|T_k|·m` coordinates. Levels vary slowest, then denominators, then the
/// assignment in lexicographic order (first coordinate most significant,
/// value digits ordered `0, 1, −1, 2, −2, …`). Every simple function with
/// Gaussian-rational values appears, so the family is dense in `L⁰`.
pub fn dense_family<S: Scalar>(tree: &Arc<TreeConfig>, m: usize, index: u64) -> Result<SimpleFunction<S>> {
    if index == 0 {
        return Err(Error::Argument("dense family indices start at 1".into()));
    }
    if m == 0 {
        return Err(Error::Shape("value dimension m must be at least 1".into()));
    }
    let mut rem = (index - 1) as u128;
    let mut s: u64 = 1;
    loop {
        let side = 2 * s + 1;
        let radix = (side * side) as u128;
        for k in 0..s as usize {
            let coords = tree.level_size(k).and_then(|n| n.checked_mul(m as u128));
            let block = coords.and_then(|c| u32::try_from(c).ok()).and_then(|c| radix.checked_pow(c));
            for r in 1..=s {
                if let Some(b) = block {
                    if rem >= b {
                        rem -= b;
                        continue;
                    }
                }
                let n_coords = enumerable_size(tree, k)? * m;
                let mut digits = vec![0u128; n_coords];
                for slot in digits.iter_mut().rev() {
                    if rem == 0 {
                        break;
                    }
                    *slot = rem % radix;
                    rem /= radix;
                }
                let denom = Rational::from_integer(r as i64);
                let values = digits
                    .into_iter()
                    .map(|d| {
                        let d = d as u64;
                        let re = Rational::from_integer(zigzag(d % side)) / &denom;
                        let im = Rational::from_integer(zigzag(d / side)) / &denom;
                        S::from_crat(&CRat::new(re, im))
                    })
                    .collect();
                return SimpleFunction::new(tree.clone(), k, m, values);
            }
        }
        s += 1;
    }
}
