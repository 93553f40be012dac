//! Linear combinations of jointly built families and certificates for the
//! levels at which a combination provably visits the combined target.
//!
//! A joint family stacks `J` coordinate functions `f_1, …, f_J: T → C^m`
//! into one function with values in `C^{mJ}` and builds it in a single
//! pass. The builder logs `β_i(n) = P(ω_n(f_i), u_i)` for every coordinate.
//! For a combination `Σ a_i f_i`, translation invariance and the scaling
//! bound give
//!
//! ```text
//! P(ω_n(Σ a_i f_i), Σ a_i u_i) ≤ Σ_i P(a_i ω_n(f_i), a_i u_i) ≤ Σ_i max(1, |a_i|) β_i(n),
//! ```
//!
//! so every level where the right side is below `ε` is a predicted visit.
//! Certificates check each predicted level against a direct computation.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rustc_hash::FxHashMap;
use serde::Serialize;
use serde_json::{json, Value as Json};

use crate::builder::{
    assemble, build_prefix, BuildResult, BuildSpec, Builder, LevelRecord, Target, Verifier, VerifyReport, DEFAULT_STORE_BUDGET,
};
use crate::density::{DensityReport, IndexSet};
use crate::error::{Error, Result};
use crate::harmonic::{j0, CorrectionPolicy, FlattenReport, HarmonicTruncation};
use crate::measure::{dense_family, same_tree, SimpleFunction};
use crate::rational::{CRat, Rational};
use crate::scalar::Scalar;
use crate::schedule::{fm_scheduled_set, make_fm_schedule, make_x_schedule, Growth, Schedule, XBlockInfo};
use crate::sweep::{collect, sector_values, Affine, AffineMapper, Frame, LevelSource, LinearMap, MassSweep, Probe};
use crate::tree::TreeConfig;

/// Slack allowed when comparing two floating-point evaluations of `P`.
const BOUND_SLACK: f64 = 1e-12;

fn at_most(a: f64, b: f64) -> bool {
    a <= b + BOUND_SLACK * b.abs().max(1.0)
}

/// One schedule entry of a joint build: a target for every coordinate.
#[derive(Clone, Debug)]
pub struct JointTuple<S: Scalar> {
    pub coords: Vec<SimpleFunction<S>>,
    pub label: String,
}

impl<S: Scalar> JointTuple<S> {
    pub fn new(coords: Vec<SimpleFunction<S>>, label: impl Into<String>) -> Result<Self> {
        let first = coords.first().ok_or_else(|| Error::Argument("a joint tuple needs at least one coordinate".into()))?;
        for c in &coords[1..] {
            if !same_tree(first.tree(), c.tree()) || c.m() != first.m() {
                return Err(Error::Shape("tuple coordinates must share the tree and the dimension".into()));
            }
        }
        Ok(JointTuple { coords, label: label.into() })
    }

    /// `(0, …, 0, h)` with `j` coordinates.
    pub fn pattern(h: SimpleFunction<S>, j: usize, label: impl Into<String>) -> Result<Self> {
        if j == 0 {
            return Err(Error::Argument("a joint tuple needs at least one coordinate".into()));
        }
        let zero = SimpleFunction::zero(h.tree().clone(), h.m());
        let mut coords = vec![zero; j - 1];
        coords.push(h);
        Self::new(coords, label)
    }

    /// Consecutive members `first, first + 1, …` of the dense family.
    pub fn dense(tree: &Arc<TreeConfig>, m: usize, j: usize, first: u64, label: impl Into<String>) -> Result<Self> {
        let coords = (0..j as u64).map(|i| dense_family(tree, m, first + i)).collect::<Result<_>>()?;
        Self::new(coords, label)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn m(&self) -> usize {
        self.coords[0].m()
    }

    pub fn level(&self) -> usize {
        self.coords.iter().map(SimpleFunction::level).max().unwrap_or(0)
    }

    /// The tuple as one function into `C^{mJ}`.
    pub fn stacked(&self) -> Result<SimpleFunction<S>> {
        stack(&self.coords)
    }
}

fn stack<S: Scalar>(parts: &[SimpleFunction<S>]) -> Result<SimpleFunction<S>> {
    let level = parts.iter().map(SimpleFunction::level).max().unwrap_or(0);
    let refined: Vec<SimpleFunction<S>> = parts.iter().map(|p| p.refine(level)).collect::<Result<_>>()?;
    let m = parts[0].m();
    let mut values = Vec::with_capacity(refined[0].values().len() * parts.len());
    for v in 0..refined[0].len() {
        for p in &refined {
            values.extend_from_slice(p.value(v));
        }
    }
    SimpleFunction::new(parts[0].tree().clone(), level, m * parts.len(), values)
}

/// Rows `rows` of `map` applied pointwise to `f`.
fn map_function<S: Scalar>(map: &LinearMap<S>, rows: Range<usize>, f: &SimpleFunction<S>) -> Result<SimpleFunction<S>> {
    if map.cols != f.m() {
        return Err(Error::Shape(format!("map expects {} coordinates, function has {}", map.cols, f.m())));
    }
    let width = rows.len();
    let sub = LinearMap { rows: width, cols: map.cols, coeffs: map.coeffs[rows.start * map.cols..rows.end * map.cols].to_vec() };
    let values = f.points().flat_map(|p| sub.apply(p).into_vec()).collect();
    SimpleFunction::new(f.tree().clone(), f.level(), width, values)
}

/// Coefficients `a_1, …, a_s` of `a_1 f_1 + … + a_s f_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Combo<S: Scalar> {
    pub coefficients: Vec<S>,
}

impl<S: Scalar> Combo<S> {
    pub fn new(coefficients: Vec<S>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::Argument("a combination needs at least one coefficient".into()));
        }
        Ok(Combo { coefficients })
    }

    /// `f_i` itself among `s` coefficients (1-based `i`).
    pub fn unit(i: usize, s: usize) -> Result<Self> {
        if i == 0 || i > s {
            return Err(Error::Argument(format!("coordinate {i} outside 1..={s}")));
        }
        let mut c = vec![S::zero(); s];
        c[i - 1] = S::from_crat(&CRat::one());
        Self::new(c)
    }

    /// Random Gaussian-rational coefficients `(p + qi)/r`, `r ∈ {1, 2}`,
    /// with `|a_i| ≤ bound` and a nonzero last coefficient.
    pub fn random(rng: &mut impl Rng, max_s: usize, bound: u32) -> Result<Self> {
        if max_s == 0 {
            return Err(Error::Argument("max_s must be positive".into()));
        }
        let s = rng.gen_range(1..=max_s);
        let mut coefficients = Vec::with_capacity(s);
        for i in 0..s {
            loop {
                let r: i64 = rng.gen_range(1..=2);
                let b = bound as i64 * r;
                let (p, q) = (rng.gen_range(-b..=b), rng.gen_range(-b..=b));
                if p * p + q * q > b * b || (i + 1 == s && p == 0 && q == 0) {
                    continue;
                }
                let c = CRat::new(Rational::from_ratio(p, r), Rational::from_ratio(q, r));
                coefficients.push(S::from_crat(&c));
                break;
            }
        }
        Self::new(coefficients)
    }

    pub fn s(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.iter().all(Scalar::is_zero)
    }

    /// `|a_i|` for every coefficient.
    pub fn moduli(&self) -> Vec<f64> {
        self.coefficients.iter().map(|a| a.norm_sqr_f64().sqrt()).collect()
    }

    /// `b_i = a_i`, or `1` where `a_i = 0`.
    pub fn b(&self) -> Vec<S> {
        let one = S::from_crat(&CRat::one());
        self.coefficients.iter().map(|a| if a.is_zero() { one.clone() } else { a.clone() }).collect()
    }

    /// `C^{mJ} → C^m`.
    pub fn map(&self, m: usize, j: usize) -> Result<LinearMap<S>> {
        if self.s() > j {
            return Err(Error::Shape(format!("{} coefficients for {j} coordinates", self.s())));
        }
        Ok(LinearMap::combo(m, &self.coefficients, j))
    }

    /// Every coefficient multiplied by `c`.
    pub fn scaled(&self, c: &S) -> Self {
        Combo { coefficients: self.coefficients.iter().map(|a| a.times(c)).collect() }
    }

    pub fn to_json(&self) -> Json {
        Json::Array(self.coefficients.iter().map(Scalar::to_json).collect())
    }
}

/// `max(1, |c|)·β`, an upper bound for `P(cψ, cφ)` when `P(ψ, φ) ≤ β`.
pub fn scaling_bound<S: Scalar>(c: &S, beta: f64) -> f64 {
    c.norm_sqr_f64().sqrt().max(1.0) * beta
}

fn scaling_bound_modulus(modulus: f64, beta: f64) -> f64 {
    modulus.max(1.0) * beta
}

/// What a joint build is asked to produce.
#[derive(Clone, Debug)]
pub struct JointSpec<S: Scalar> {
    pub tree: Arc<TreeConfig>,
    pub tuples: Vec<JointTuple<S>>,
    pub schedule: Schedule,
    pub policy: CorrectionPolicy,
    /// Add the flattening offsets `g_i`.
    pub flatten: bool,
}

impl<S: Scalar> JointSpec<S> {
    pub fn new(tree: Arc<TreeConfig>, tuples: Vec<JointTuple<S>>, schedule: Schedule) -> Self {
        JointSpec { tree, tuples, schedule, policy: CorrectionPolicy::default(), flatten: true }
    }

    pub fn with_flatten(mut self, flatten: bool) -> Self {
        self.flatten = flatten;
        self
    }

    pub fn with_policy(mut self, policy: CorrectionPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn coords(&self) -> usize {
        self.tuples.first().map_or(0, JointTuple::len)
    }

    pub fn m(&self) -> usize {
        self.tuples.first().map_or(0, JointTuple::m)
    }

    pub fn target_levels(&self) -> Vec<usize> {
        self.tuples.iter().map(JointTuple::level).collect()
    }

    fn build_spec(&self) -> Result<BuildSpec<S>> {
        let j = self.coords();
        if j == 0 {
            return Err(Error::Argument("a joint build needs at least one tuple".into()));
        }
        if self.tuples.iter().any(|t| t.len() != j || t.m() != self.m()) {
            return Err(Error::Shape("tuples differ in length or dimension".into()));
        }
        let targets = self
            .tuples
            .iter()
            .map(|t| Ok(Target::new(t.stacked()?, t.label.clone())))
            .collect::<Result<Vec<_>>>()?;
        let initial = vec![S::zero(); self.m() * j];
        Ok(BuildSpec::new(self.tree.clone(), targets, self.schedule.clone(), initial).with_policy(self.policy).with_groups(j))
    }
}

/// The flattening offsets `g_1, …, g_J`, stacked.
#[derive(Clone, Debug)]
pub struct Offsets<S: Scalar> {
    /// `(g_1, …, g_J)` to the full horizon; constant beyond `shift_level`.
    pub stacked: HarmonicTruncation<S>,
    /// `L = max_i N(i)`.
    pub shift_level: usize,
    pub reports: Vec<FlattenReport>,
}

/// `F_i = f_i + g_i`, `i = 1, …, J`, built jointly.
#[derive(Clone, Debug)]
pub struct JointFamily<S: Scalar> {
    pub spec: JointSpec<S>,
    pub result: BuildResult<S>,
    /// Verification of the stacked build, run alongside it.
    pub report: VerifyReport,
    pub offsets: Option<Offsets<S>>,
}

impl<S: Scalar> JointFamily<S> {
    pub fn coords(&self) -> usize {
        self.spec.coords()
    }

    pub fn m(&self) -> usize {
        self.spec.m()
    }

    pub fn horizon(&self) -> u64 {
        self.result.horizon()
    }

    /// First level from which the offsets are constant; 0 without offsets.
    pub fn shift_level(&self) -> usize {
        self.offsets.as_ref().map_or(0, |o| o.shift_level)
    }

    /// `β_1(n), …, β_J(n)` at a level with an active tuple.
    pub fn beta(&self, n: u64) -> Option<&[f64]> {
        let record = self.result.log.get(n.checked_sub(1)? as usize)?;
        record.target.map(|_| record.group_p.as_slice())
    }

    /// `F_i` (1-based), materialized.
    pub fn coordinate(&self, i: usize) -> Result<HarmonicTruncation<S>> {
        let j = self.coords();
        if i == 0 || i > j {
            return Err(Error::Argument(format!("coordinate {i} outside 1..={j}")));
        }
        let m = self.m();
        let map = LinearMap::select(m * j, (i - 1) * m..i * m);
        collect(&Affine { base: &self.result, offset: self.offsets.as_ref().map(|o| &o.stacked), map: Some(map) })
    }

    /// The stacked target of tuple `t` (1-based) shifted by `ω_L(g)`.
    pub fn shifted_target(&self, t: usize) -> Result<SimpleFunction<S>> {
        shifted_target(&self.spec, self.offsets.as_ref(), t)
    }
}

fn shifted_target<S: Scalar>(spec: &JointSpec<S>, offsets: Option<&Offsets<S>>, t: usize) -> Result<SimpleFunction<S>> {
    let tuple = spec.tuples.get(t.wrapping_sub(1)).ok_or_else(|| Error::Argument(format!("no tuple {t}")))?;
    let u = tuple.stacked()?;
    match offsets {
        Some(o) => u.add(&o.stacked.omega(o.shift_level)?),
        None => Ok(u),
    }
}

/// `N(i)`: the depth of the `j₀(i)`-th vertex in breadth-first order.
fn flat_depth(tree: &TreeConfig, i: u64) -> Result<usize> {
    Ok(tree.vertex_at_bfs(j0(i))?.depth())
}

fn make_offsets<S: Scalar>(spec: &JointSpec<S>, build_spec: &BuildSpec<S>) -> Result<Offsets<S>> {
    let tree = &spec.tree;
    let (m, j) = (spec.m(), spec.coords());
    let horizon = build_spec.horizon();
    let shift_level = (1..=j as u64).map(|i| flat_depth(tree, i)).collect::<Result<Vec<_>>>()?.into_iter().max().unwrap_or(0);
    let phis: Vec<SimpleFunction<S>> = (1..=j as u64).map(|i| dense_family(tree, m, i)).collect::<Result<_>>()?;
    let working = phis.iter().map(SimpleFunction::level).max().unwrap_or(0).max(shift_level);
    if working > horizon {
        return Err(Error::Cap(format!("the offsets need depth {working}, the horizon is {horizon}")));
    }
    let prefix = build_prefix(build_spec, working)?;
    let mut dense: Vec<Vec<S>> = Vec::with_capacity(j);
    let mut reports = Vec::with_capacity(j);
    for (i, phi) in phis.iter().enumerate() {
        let select = LinearMap::select(m * j, i * m..(i + 1) * m);
        let f = collect(&Affine { base: &prefix, offset: None, map: Some(select) })?;
        let phi = HarmonicTruncation::harmonic_lift(phi, working)?;
        let (g, report) = HarmonicTruncation::flatten_perturbation(&f, &phi, i as u64 + 1)?;
        dense.push(g.to_dense()?);
        reports.push(report);
    }
    let vertices = dense[0].len() / m;
    let mut values = Vec::with_capacity(vertices * m * j);
    for v in 0..vertices {
        for g in &dense {
            values.extend_from_slice(&g[v * m..(v + 1) * m]);
        }
    }
    let stacked = HarmonicTruncation::from_dense(tree.clone(), working, m * j, &values)?.constant_extend(horizon)?;
    Ok(Offsets { stacked, shift_level, reports })
}

/// Builds `F_1, …, F_J` in one stacked pass and verifies the build.
pub fn joint_build<S: Scalar>(spec: JointSpec<S>) -> Result<JointFamily<S>> {
    joint_build_certified(spec, &[]).map(|(family, _)| family)
}

/// [`joint_build`] with certificates for `requests` computed in the same
/// pass.
pub fn joint_build_certified<S: Scalar>(
    spec: JointSpec<S>,
    requests: &[CertificateRequest<S>],
) -> Result<(JointFamily<S>, Vec<Certificate>)> {
    let build_spec = spec.build_spec()?;
    let offsets = if spec.flatten { Some(make_offsets(&spec, &build_spec)?) } else { None };
    let mut builder = Builder::new(build_spec, true)?.with_budget(DEFAULT_STORE_BUDGET);
    let mut verifier = Verifier::new(builder.spec(), builder.mu().clone())?;
    let mut checker = SpanChecker::new(&spec, offsets.as_ref(), builder.spec().sector_depth(), requests)?;
    let mut log: Vec<LevelRecord> = Vec::with_capacity(builder.spec().horizon());
    verifier.observe(&builder.frame())?;
    checker.observe(&builder.frame(), None)?;
    while !builder.is_done() {
        let record = builder.step()?;
        verifier.observe(&builder.frame())?;
        checker.observe(&builder.frame(), Some(&record))?;
        log.push(record);
    }
    let result = assemble(builder, log)?;
    let report = verifier.finish(&result)?;
    let certificates = checker.finish();
    Ok((JointFamily { spec, result, report, offsets }, certificates))
}

/// `F = Σ a_i F_i`, materialized.
pub fn combo<S: Scalar>(family: &JointFamily<S>, c: &Combo<S>) -> Result<HarmonicTruncation<S>> {
    let map = c.map(family.m(), family.coords())?;
    collect(&Affine { base: &family.result, offset: family.offsets.as_ref().map(|o| &o.stacked), map: Some(map) })
}

#[derive(Clone, Debug)]
pub struct CertificateRequest<S: Scalar> {
    pub combo: Combo<S>,
    pub eps: Rational,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertificateEntry {
    pub level: u64,
    /// `Σ_i max(1, |a_i|) β_i(n)`.
    pub predicted_bound: f64,
    /// `P(ω_n(Σ a_i F_i), Σ a_i ũ_i)`, computed directly.
    #[serde(rename = "measured_P")]
    pub measured_p: f64,
    /// `Σ_i P(a_i ω_n(F_i), a_i ũ_i)`, computed directly.
    pub term_sum: f64,
    pub target_label: String,
}

impl CertificateEntry {
    /// `measured < ε` and `measured ≤ term_sum ≤ predicted`.
    pub fn sound(&self, eps: f64) -> bool {
        self.measured_p < eps && at_most(self.measured_p, self.term_sum) && at_most(self.term_sum, self.predicted_bound)
    }
}

/// Predicted visit levels of a combination, each checked directly.
#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub coefficients: Json,
    pub eps: Rational,
    /// Levels below this one are not certified.
    pub shift_level: usize,
    pub levels: IndexSet,
    pub entries: Vec<CertificateEntry>,
}

impl Certificate {
    /// Levels whose direct check failed.
    pub fn unsound(&self) -> Vec<u64> {
        let eps = self.eps.to_f64();
        self.entries.iter().filter(|e| !e.sound(eps)).map(|e| e.level).collect()
    }

    pub fn passed(&self) -> bool {
        self.unsound().is_empty()
    }

    pub fn to_json(&self) -> Json {
        json!({
            "coefficients": self.coefficients,
            "eps": self.eps.to_string(),
            "shift_level": self.shift_level,
            "levels": self.levels.indices(),
            "entries": self.entries,
        })
    }
}

/// Certificates for a finished family, by streaming it once more.
pub fn span_certificates<S: Scalar>(family: &JointFamily<S>, requests: &[CertificateRequest<S>]) -> Result<Vec<Certificate>> {
    let mut checker =
        SpanChecker::new(&family.spec, family.offsets.as_ref(), family.result.sector_depth, requests)?;
    family.result.stream(&mut |frame| {
        let record = frame.depth.checked_sub(1).and_then(|i| family.result.log.get(i));
        checker.observe(&frame, record)
    })?;
    Ok(checker.finish())
}

pub fn span_certificate<S: Scalar>(family: &JointFamily<S>, c: &Combo<S>, eps: &Rational) -> Result<Certificate> {
    let request = CertificateRequest { combo: c.clone(), eps: eps.clone() };
    Ok(span_certificates(family, &[request])?.remove(0))
}

struct Request {
    eps: f64,
    moduli: Vec<f64>,
    /// First row of `Σ a_i x_i` in the stacked map.
    row: usize,
    /// `(i, row)` of each nonzero term `a_i x_i`.
    terms: Vec<(usize, usize)>,
}

/// Streams a stacked build, evaluating the requested combinations at their
/// predicted visit levels.
struct SpanChecker<'a, S: Scalar> {
    m: usize,
    shift: usize,
    requests: Vec<Request>,
    originals: Vec<CertificateRequest<S>>,
    mapper: AffineMapper<'a, S>,
    map: LinearMap<S>,
    sweep: MassSweep,
    targets: Vec<SimpleFunction<S>>,
    labels: Vec<String>,
    sectors: FxHashMap<(usize, usize), Vec<S>>,
    k: usize,
    entries: Vec<Vec<CertificateEntry>>,
}

impl<'a, S: Scalar> SpanChecker<'a, S> {
    fn new(
        spec: &JointSpec<S>,
        offsets: Option<&'a Offsets<S>>,
        sector_depth: usize,
        originals: &[CertificateRequest<S>],
    ) -> Result<Self> {
        let (m, j) = (spec.m(), spec.coords());
        let mut maps = Vec::new();
        let mut requests = Vec::with_capacity(originals.len());
        let mut row = 0;
        for r in originals {
            if r.combo.is_zero() {
                return Err(Error::Argument("a certificate needs a nonzero combination".into()));
            }
            if !r.eps.is_positive() {
                return Err(Error::Argument(format!("ε must be positive, got {}", r.eps)));
            }
            maps.push(r.combo.map(m, j)?);
            let start = row;
            row += m;
            let mut terms = Vec::new();
            for (i, a) in r.combo.coefficients.iter().enumerate() {
                if a.is_zero() {
                    continue;
                }
                let mut single = vec![S::zero(); i + 1];
                single[i] = a.clone();
                maps.push(LinearMap::combo(m, &single, j));
                terms.push((i, row));
                row += m;
            }
            requests.push(Request { eps: r.eps.to_f64(), moduli: r.combo.moduli(), row: start, terms });
        }
        let map = if maps.is_empty() { LinearMap { rows: 0, cols: m * j, coeffs: Vec::new() } } else { LinearMap::stack(&maps) };
        let shift = offsets.map_or(0, |o| o.shift_level);
        let targets: Vec<SimpleFunction<S>> =
            (1..=spec.tuples.len()).map(|t| shifted_target(spec, offsets, t)).collect::<Result<_>>()?;
        let k = targets.iter().map(SimpleFunction::level).max().unwrap_or(0).max(sector_depth).max(shift);
        let depth = spec.schedule.horizon as usize;
        let mapper = AffineMapper::new(m * j, depth, offsets.map(|o| &o.stacked), Some(map.clone()))?;
        Ok(SpanChecker {
            m,
            shift,
            entries: vec![Vec::new(); requests.len()],
            requests,
            originals: originals.to_vec(),
            mapper,
            map,
            sweep: MassSweep::new(spec.tree.clone(), k)?,
            targets,
            labels: spec.tuples.iter().map(|t| t.label.clone()).collect(),
            sectors: FxHashMap::default(),
            k,
        })
    }

    fn target_sectors(&mut self, t: usize, row: usize) -> Result<&[S]> {
        if !self.sectors.contains_key(&(t, row)) {
            let f = map_function(&self.map, row..row + self.m, &self.targets[t - 1])?;
            self.sectors.insert((t, row), sector_values(&f, self.k)?);
        }
        Ok(&self.sectors[&(t, row)])
    }

    fn observe(&mut self, frame: &Frame<'_, S>, record: Option<&LevelRecord>) -> Result<()> {
        let mut due: Vec<(usize, f64)> = Vec::new();
        let active = record.filter(|r| r.level as usize >= self.shift.max(1)).and_then(|r| r.target.map(|t| (r, t)));
        if let Some((r, _)) = active {
            for (i, req) in self.requests.iter().enumerate() {
                let predicted: f64 =
                    req.moduli.iter().zip(&r.group_p).map(|(&a, &beta)| scaling_bound_modulus(a, beta)).sum();
                if predicted < req.eps {
                    due.push((i, predicted));
                }
            }
        }
        if due.is_empty() {
            self.mapper.push_shape(frame)?;
        } else {
            self.mapper.push(frame)?;
        }
        self.sweep.advance(&self.mapper.frame())?;
        let Some((r, t)) = active else { return Ok(()) };
        for (i, predicted) in due {
            let (row, terms) = (self.requests[i].row, self.requests[i].terms.clone());
            let measured = self.evaluate(t, row)?;
            let mut term_sum = 0.0;
            for &(_, term_row) in &terms {
                term_sum += self.evaluate(t, term_row)?;
            }
            self.entries[i].push(CertificateEntry {
                level: r.level,
                predicted_bound: predicted,
                measured_p: measured,
                term_sum,
                target_label: self.labels[t - 1].clone(),
            });
        }
        Ok(())
    }

    fn evaluate(&mut self, t: usize, row: usize) -> Result<f64> {
        let m = self.m;
        let target = self.target_sectors(t, row)?.to_vec();
        let layer = self.mapper.frame().layer;
        Ok(self.sweep.evaluate(layer, &Probe { coords: row..row + m, target: &target }, false).p)
    }

    fn finish(self) -> Vec<Certificate> {
        let horizon = self.mapper.frame().depth as u64;
        self.originals
            .into_iter()
            .zip(self.entries)
            .map(|(r, entries)| Certificate {
                coefficients: r.combo.to_json(),
                levels: IndexSet::new(horizon, entries.iter().map(|e| e.level).collect()).expect("levels increase"),
                eps: r.eps,
                shift_level: self.shift,
                entries,
            })
            .collect()
    }
}

/// Parameters of the double-genericity demonstration.
#[derive(Clone, Debug)]
pub struct DemoConfig {
    pub horizon: u64,
    /// Coordinates per family.
    pub coords: usize,
    /// Tuples per family.
    pub targets: usize,
    pub stride: u64,
    pub eps: Rational,
    /// Random combinations certified per family.
    pub combos: usize,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig { horizon: 5040, coords: 2, targets: 2, stride: 8, eps: Rational::from_ratio(1, 10), combos: 8, seed: 1 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TargetDensity {
    pub target: usize,
    pub label: String,
    pub visits: usize,
    /// Counting density of the realized visits at the horizon.
    pub density: String,
    pub floor: String,
    pub meets_floor: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockEnd {
    pub block: u64,
    pub target: usize,
    pub end: u64,
    pub density: String,
    pub floor: String,
    pub meets_floor: bool,
}

#[derive(Clone, Debug)]
pub struct FamilySummary {
    pub name: String,
    pub verified: bool,
    pub shift_level: usize,
    pub targets: Vec<TargetDensity>,
    pub block_ends: Vec<BlockEnd>,
    pub profiles: Vec<DensityReport>,
    pub certificates: Vec<Certificate>,
}

impl FamilySummary {
    pub fn unsound(&self) -> usize {
        self.certificates.iter().map(|c| c.unsound().len()).sum()
    }

    pub fn to_json(&self) -> Json {
        json!({
            "name": self.name,
            "verified": self.verified,
            "shift_level": self.shift_level,
            "targets": self.targets,
            "block_ends": self.block_ends,
            "profiles": self.profiles,
            "certificates": self.certificates.iter().map(Certificate::to_json).collect::<Vec<_>>(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct DemoReport {
    pub horizon: u64,
    pub fm: FamilySummary,
    pub x: FamilySummary,
}

impl DemoReport {
    /// Both builds verified and every certified level checked out.
    pub fn passed(&self) -> bool {
        self.fm.verified && self.x.verified && self.fm.unsound() == 0 && self.x.unsound() == 0
    }

    pub fn to_json(&self) -> Json {
        json!({
            "horizon": self.horizon,
            "passed": self.passed(),
            "fm": self.fm.to_json(),
            "x": self.x.to_json(),
        })
    }

    /// Plain-text summary.
    pub fn to_text(&self) -> String {
        let mut out = format!("double genericity demo, horizon {}\n", self.horizon);
        for fam in [&self.fm, &self.x] {
            let certified: usize = fam.certificates.iter().map(|c| c.entries.len()).sum();
            out += &format!(
                "\n[{}] verified={} shift_level={} certificates={} certified_levels={} unsound={}\n",
                fam.name,
                fam.verified,
                fam.shift_level,
                fam.certificates.len(),
                certified,
                fam.unsound()
            );
            for t in &fam.targets {
                out += &format!(
                    "  target {} ({}): visits={} density={} floor={} ok={}\n",
                    t.target, t.label, t.visits, t.density, t.floor, t.meets_floor
                );
            }
            for b in &fam.block_ends {
                out += &format!(
                    "  block {} end {} target {}: density={} floor={} ok={}\n",
                    b.block, b.end, b.target, b.density, b.floor, b.meets_floor
                );
            }
        }
        out += &format!("\npassed={}\n", self.passed());
        out
    }
}

fn demo_tuples(tree: &Arc<TreeConfig>, config: &DemoConfig, first: u64) -> Result<Vec<JointTuple<CRat>>> {
    let (m, j) = (1, config.coords);
    (0..config.targets as u64)
        .map(|k| {
            if k == 0 {
                JointTuple::pattern(dense_family(tree, m, first)?, j, format!("(0,…,0,h{first})"))
            } else {
                let start = first + 1 + (k - 1) * j as u64;
                JointTuple::dense(tree, m, j, start, format!("dense{start}"))
            }
        })
        .collect()
}

/// One FM-built and one X-built joint family over the same tree, with
/// random combinations of each certified.
pub fn double_genericity(tree: Arc<TreeConfig>, config: &DemoConfig) -> Result<DemoReport> {
    use rand::SeedableRng;
    if config.coords == 0 || config.targets == 0 {
        return Err(Error::Argument("the demo needs at least one coordinate and one target".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let eps = vec![config.eps.clone(); config.targets];
    let requests = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<CertificateRequest<CRat>>> {
        (0..config.combos)
            .map(|_| Ok(CertificateRequest { combo: Combo::random(rng, config.coords.min(3), 4)?, eps: config.eps.clone() }))
            .collect()
    };

    let fm_tuples = demo_tuples(&tree, config, 300)?;
    let levels: Vec<usize> = fm_tuples.iter().map(JointTuple::level).collect();
    let pairs: Vec<(usize, Rational)> = (1..=config.targets).map(|k| (k, config.eps.clone())).collect();
    let fm_schedule = make_fm_schedule(&tree, &pairs, &levels, config.stride, config.horizon)?;
    let fm_requests = requests(&mut rng)?;
    let (fm, fm_certs) = joint_build_certified(JointSpec::new(tree.clone(), fm_tuples, fm_schedule), &fm_requests)?;
    let mut fm_targets = Vec::new();
    for k in 1..=config.targets {
        let visits = &fm.result.visits[k - 1];
        let scheduled = fm_scheduled_set(k, config.targets, config.stride, config.horizon);
        let share = if k == config.targets { k - 1 } else { k };
        let floor = Rational::from_ratio(1, (1i64 << share) * config.stride as i64);
        let density = visits.counting_density(config.horizon)?;
        fm_targets.push(TargetDensity {
            target: k,
            label: fm.spec.tuples[k - 1].label.clone(),
            visits: visits.len(),
            meets_floor: density >= floor && *visits == scheduled,
            density: density.to_string(),
            floor: floor.to_string(),
        });
    }
    let fm_summary = FamilySummary {
        name: "FM".into(),
        verified: fm.report.passed(),
        shift_level: fm.shift_level(),
        targets: fm_targets,
        block_ends: Vec::new(),
        profiles: fm.report.densities.clone(),
        certificates: fm_certs,
    };

    let x_tuples = demo_tuples(&tree, config, 41)?;
    let levels: Vec<usize> = x_tuples.iter().map(JointTuple::level).collect();
    let x = make_x_schedule(&tree, &levels, &eps, config.horizon, &Growth::default())?;
    let x_requests = requests(&mut rng)?;
    let (xf, x_certs) = joint_build_certified(JointSpec::new(tree.clone(), x_tuples, x.schedule.clone()), &x_requests)?;
    let block_ends = x_block_ends(&tree, &x, &xf.result.visits)?;
    let x_summary = FamilySummary {
        name: "X".into(),
        verified: xf.report.passed(),
        shift_level: xf.shift_level(),
        targets: Vec::new(),
        block_ends,
        profiles: xf.report.densities.clone(),
        certificates: x_certs,
    };
    Ok(DemoReport { horizon: config.horizon, fm: fm_summary, x: x_summary })
}

/// Counting density of each scheduled block's target at the block end.
pub fn x_block_ends(tree: &TreeConfig, x: &crate::schedule::XSchedule, visits: &[IndexSet]) -> Result<Vec<BlockEnd>> {
    let mut out = Vec::new();
    for info in x.blocks.iter().filter(|b: &&XBlockInfo| b.scheduled) {
        let density = visits[info.target - 1].counting_density(info.end)?;
        let floor = x.density_floor(tree, info)?;
        out.push(BlockEnd {
            block: info.j,
            target: info.target,
            end: info.end,
            meets_floor: density >= floor,
            density: density.to_string(),
            floor: floor.to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Block;

    fn q(s: &str) -> Rational {
        s.parse().unwrap()
    }

    fn c(s: &str) -> CRat {
        CRat::real(q(s))
    }

    fn sf(t: &Arc<TreeConfig>, level: usize, values: &[&str]) -> SimpleFunction<CRat> {
        SimpleFunction::new(t.clone(), level, 1, values.iter().map(|v| c(v)).collect()).unwrap()
    }

    fn pair_family(flatten: bool, horizon: u64) -> JointFamily<CRat> {
        let t = Arc::new(TreeConfig::binary(400));
        let tuples = vec![
            JointTuple::pattern(sf(&t, 1, &["1", "0"]), 2, "pattern").unwrap(),
            JointTuple::new(vec![sf(&t, 1, &["2", "-1"]), sf(&t, 0, &["1/2"])], "dense").unwrap(),
        ];
        let levels: Vec<usize> = tuples.iter().map(JointTuple::level).collect();
        let schedule = make_fm_schedule(&t, &[(1, q("1/10")), (2, q("1/10"))], &levels, 6, horizon).unwrap();
        joint_build(JointSpec::new(t, tuples, schedule).with_flatten(flatten)).unwrap()
    }

    /// `P(ω_n(F), Σ a_i ũ_i)` from the materialized combination.
    fn direct(family: &JointFamily<CRat>, a: &Combo<CRat>, n: u64) -> f64 {
        let f = combo(family, a).unwrap();
        let t = family.result.log[n as usize - 1].target.unwrap();
        let u = family.shifted_target(t).unwrap();
        let map = a.map(family.m(), family.coords()).unwrap();
        let target = map_function(&map, 0..family.m(), &u).unwrap();
        f.omega(n as usize).unwrap().metric_p(&target).unwrap()
    }

    #[test]
    fn combo_examples() {
        let fam = pair_family(false, 12);
        let f1 = fam.coordinate(1).unwrap();
        let first = combo(&fam, &Combo::new(vec![c("1"), c("0")]).unwrap()).unwrap();
        for n in 0..=12 {
            assert_eq!(first.omega(n).unwrap(), f1.omega(n).unwrap());
        }
        let zero = combo(&fam, &Combo::new(vec![c("0"), c("0")]).unwrap()).unwrap();
        assert!(zero.layers().iter().flatten().all(|node| node.value.iter().all(Scalar::is_zero)));
        let sum = combo(&fam, &Combo::new(vec![c("1"), c("1")]).unwrap()).unwrap();
        assert!(sum.is_harmonic().passed());
        let f2 = fam.coordinate(2).unwrap();
        for n in 0..=12 {
            assert_eq!(sum.omega(n).unwrap(), f1.omega(n).unwrap().add(&f2.omega(n).unwrap()).unwrap());
        }
        assert!(matches!(combo(&fam, &Combo::new(vec![c("1"); 3]).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn scaling_bound_examples() {
        let t = Arc::new(TreeConfig::binary(8));
        let one = sf(&t, 0, &["1"]);
        let zero = sf(&t, 0, &["0"]);
        let base = one.metric_p(&zero).unwrap();
        assert_eq!(scaling_bound(&c("1"), 0.3), 0.3);
        let doubled = one.scale(&c("2")).metric_p_exact(&zero).unwrap().unwrap();
        assert_eq!(doubled, q("2/3"));
        assert!(doubled.to_f64() <= scaling_bound(&c("2"), base));
        let halved = one.scale(&c("1/2")).metric_p_exact(&zero).unwrap().unwrap();
        assert_eq!(halved, q("1/3"));
        assert!(halved.to_f64() <= scaling_bound(&c("1/2"), base));
    }

    #[test]
    fn unit_certificate_is_the_visit_set() {
        let t = Arc::new(TreeConfig::binary(400));
        let h = sf(&t, 1, &["1", "0"]);
        let schedule = Schedule { horizon: 12, blocks: vec![Block { target: 1, eps: q("1/5"), transition: [1, 2], hold: [3, 12] }] };
        let fam = joint_build(JointSpec::new(t, vec![JointTuple::new(vec![h], "h").unwrap()], schedule).with_flatten(false)).unwrap();
        let eps = q("1/5");
        let cert = span_certificate(&fam, &Combo::unit(1, 1).unwrap(), &eps).unwrap();
        let f = fam.coordinate(1).unwrap();
        let h = &fam.spec.tuples[0].coords[0];
        let expected: Vec<u64> = (1..=12).filter(|&n| f.omega(n as usize).unwrap().metric_p(h).unwrap() < 0.2).collect();
        assert_eq!(cert.levels.indices(), expected.as_slice());
        assert!(cert.passed());
    }

    #[test]
    fn shifted_visits_and_pattern_combos() {
        let fam = pair_family(true, 200);
        assert!(fam.report.passed(), "{:?}", fam.report.failures);
        let offsets = fam.offsets.as_ref().unwrap();
        assert!(offsets.reports.iter().all(FlattenReport::passed));
        assert_eq!(offsets.shift_level, 1);
        assert!(offsets.stacked.is_flat_beyond(offsets.shift_level));
        let eps = q("1/10");
        let requests: Vec<CertificateRequest<CRat>> = [vec!["1"], vec!["0", "1"], vec!["3", "-2"], vec!["1/2", "4"]]
            .iter()
            .map(|a| CertificateRequest { combo: Combo::new(a.iter().map(|x| c(x)).collect()).unwrap(), eps: eps.clone() })
            .collect();
        let certs = span_certificates(&fam, &requests).unwrap();
        for (r, cert) in requests.iter().zip(&certs) {
            assert!(!cert.levels.is_empty());
            assert!(cert.passed(), "{:?}", cert.unsound());
            assert!(cert.levels.indices().iter().all(|&n| n as usize >= offsets.shift_level));
            for e in cert.entries.iter().filter(|e| e.level <= 12) {
                assert!((direct(&fam, &r.combo, e.level) - e.measured_p).abs() < 1e-12);
            }
        }
        // The unit combination sees exactly the first coordinate's logged visits.
        let own: Vec<u64> =
            (1..=200).filter(|&n| fam.beta(n).is_some_and(|b| b[0] < 0.1) && n as usize >= offsets.shift_level).collect();
        assert_eq!(certs[0].levels.indices(), own.as_slice());
        let (single, together) = joint_build_certified(fam.spec.clone(), &requests).unwrap();
        assert_eq!(single.result.log, fam.result.log);
        assert_eq!(together, certs);
    }

    #[test]
    fn normalized_coefficients_certify_a_superset() {
        let fam = pair_family(false, 120);
        let eps = q("1/10");
        let a = Combo::new(vec![c("4"), CRat::new(q("-3"), q("2"))]).unwrap();
        let scaled = a.scaled(&c("1/4"));
        let certs = span_certificates(
            &fam,
            &[CertificateRequest { combo: a, eps: eps.clone() }, CertificateRequest { combo: scaled, eps }],
        )
        .unwrap();
        assert!(certs[0].levels.is_subset(&certs[1].levels));
        assert!(certs.iter().all(Certificate::passed));
    }

    #[test]
    fn zero_combination_is_rejected() {
        let fam = pair_family(false, 12);
        let r = span_certificate(&fam, &Combo::new(vec![c("0"), c("0")]).unwrap(), &q("1/10"));
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn random_coefficients_respect_the_bound() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = Combo::<CRat>::random(&mut rng, 3, 4).unwrap();
            assert!((1..=3).contains(&a.s()));
            assert!(a.moduli().iter().all(|&m| m <= 4.0));
            assert!(!a.coefficients.last().unwrap().is_zero());
            assert_eq!(a.b().len(), a.s());
        }
    }

    #[test]
    fn small_demo_passes() {
        let t = Arc::new(TreeConfig::binary(400));
        let config = DemoConfig { horizon: 128, combos: 3, ..DemoConfig::default() };
        let report = double_genericity(t, &config).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        assert!(report.fm.targets.iter().all(|t| t.meets_floor));
        assert!(!report.x.block_ends.is_empty());
    }
}
