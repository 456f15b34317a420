//! Bilinear forms over admissible pair collections.
//!
//! `B_Q(f, g) = Σ_Q E^σ_{Q₂} Δ^σ_{Q₁} f · ⟨H_σ(I₀ − Q̃₁), Δ^w_{Q₂} g⟩_w`
//! where `Q̃₁` is the child of `Q₁` containing `Q₂`. In Haar coordinates the
//! summand is `f̂(Q₁) h^σ_{Q₁}(Q̃₁) ĝ(Q₂) ⟨H_σ(1_{I₀−Q̃₁}), h^w_{Q₂}⟩_w`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::sync::Mutex;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{DyadicInterval, GridConfig};
use crate::haar::{self, HaarCoefficients, HaarSystem, WeightedFunction};
use crate::linalg::NormPair;
use crate::measure::{poisson_annulus, MeasurePair, TruncationWindow};
use crate::sum::{csum, Accumulator};

type Interval = DyadicInterval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Pair {
    pub q1: Interval,
    pub q2: Interval,
}

impl Pair {
    pub fn new(q1: Interval, q2: Interval) -> Result<Self> {
        if !q1.strictly_contains(&q2) {
            return Err(Error::NotContained { inner: q2, outer: q1 });
        }
        Ok(Self { q1, q2 })
    }

    /// `Q̃₁`, the child of `Q₁` containing `Q₂`.
    pub fn tilde_q1(&self) -> Interval {
        self.q2.ancestor_at(self.q1.n + 1)
    }

    /// `log₂(|Q₁| / |Q₂|)`.
    pub fn scale_gap(&self) -> u32 {
        self.q2.n - self.q1.n
    }
}

/// Members of `set` contained in `k` (including `k`), scanning scales
/// `k.n ..= depth`.
pub fn subintervals_in<'a>(
    set: &'a BTreeSet<Interval>,
    k: &Interval,
    depth: u32,
) -> impl Iterator<Item = &'a Interval> + 'a {
    let k = *k;
    (k.n..=depth).flat_map(move |m| {
        let (lo, hi) = k.cell_range(m);
        set.range(Interval { n: m, j: lo }..Interval { n: m, j: hi })
    })
}

/// The minimal member of `set` containing `k`, if any.
pub fn minimal_container(set: &BTreeSet<Interval>, k: &Interval) -> Option<Interval> {
    if set.contains(k) {
        return Some(*k);
    }
    k.ancestors().find(|a| set.contains(a))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PairCollection {
    pub i0: Interval,
    pairs: BTreeSet<Pair>,
}

impl PairCollection {
    pub fn new(i0: Interval, pairs: impl IntoIterator<Item = Pair>) -> Self {
        Self { i0, pairs: pairs.into_iter().collect() }
    }

    pub fn empty(i0: Interval) -> Self {
        Self { i0, pairs: BTreeSet::new() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pair> {
        self.pairs.iter()
    }

    pub fn pairs(&self) -> &BTreeSet<Pair> {
        &self.pairs
    }

    pub fn contains(&self, p: &Pair) -> bool {
        self.pairs.contains(p)
    }

    pub fn insert(&mut self, p: Pair) -> bool {
        self.pairs.insert(p)
    }

    pub fn q1_set(&self) -> BTreeSet<Interval> {
        self.pairs.iter().map(|p| p.q1).collect()
    }

    pub fn q2_set(&self) -> BTreeSet<Interval> {
        self.pairs.iter().map(|p| p.q2).collect()
    }

    pub fn tilde_q1_set(&self) -> BTreeSet<Interval> {
        self.pairs.iter().map(Pair::tilde_q1).collect()
    }

    /// `Q̃₁ ∪ Q₂`, the intervals the size ranges over.
    pub fn size_candidates(&self) -> BTreeSet<Interval> {
        let mut s = self.tilde_q1_set();
        s.extend(self.q2_set());
        s
    }

    pub fn filter(&self, keep: impl Fn(&Pair) -> bool) -> Self {
        Self { i0: self.i0, pairs: self.pairs.iter().filter(|p| keep(p)).copied().collect() }
    }

    pub fn union<'a>(i0: Interval, parts: impl IntoIterator<Item = &'a PairCollection>) -> Self {
        let mut pairs = BTreeSet::new();
        for p in parts {
            pairs.extend(p.pairs.iter().copied());
        }
        Self { i0, pairs }
    }

    /// `Q₂ ⋐ Q₁ ⊆ I₀` and `Q₁` good, for every pair.
    pub fn check_structure(&self, cfg: &GridConfig) -> Result<()> {
        for p in &self.pairs {
            if !self.i0.contains(&p.q1) {
                return Err(Error::NotAdmissible(format!("{:?} is not inside I0 {:?}", p.q1, self.i0)));
            }
            if !cfg.is_good(&p.q1) {
                return Err(Error::NotAdmissible(format!("Q1 {:?} is not good", p.q1)));
            }
            if !cfg.deeply_contained(&p.q2, &p.q1) {
                return Err(Error::NotAdmissible(format!(
                    "{:?} is not deeply contained in {:?}",
                    p.q2, p.q1
                )));
            }
        }
        Ok(())
    }

    /// Convexity in `Q₁` at fixed `Q₂`: every good interval between two
    /// present `Q₁` is present.
    pub fn check_convexity(&self, cfg: &GridConfig) -> Result<()> {
        let mut by_q2: BTreeMap<Interval, Vec<Interval>> = BTreeMap::new();
        for p in &self.pairs {
            by_q2.entry(p.q2).or_default().push(p.q1);
        }
        for (q2, q1s) in by_q2 {
            let top = q1s.iter().min_by_key(|i| i.n).copied().expect("nonempty");
            let bottom = q1s.iter().max_by_key(|i| i.n).copied().expect("nonempty");
            for m in top.n..=bottom.n {
                let i = q2.ancestor_at(m);
                if cfg.is_good(&i) && !self.pairs.contains(&Pair { q1: i, q2 }) {
                    return Err(Error::NotAdmissible(format!(
                        "convexity fails: ({:?}, {:?}) missing between {:?} and {:?}",
                        i, q2, top, bottom
                    )));
                }
            }
        }
        Ok(())
    }

    /// No interval of `Q̃₁ ∪ Q₂` lies inside an energy stopping interval.
    pub fn check_energy(&self, energy: &[Interval]) -> Result<()> {
        for k in self.size_candidates() {
            if let Some(f) = energy.iter().find(|f| f.contains(&k)) {
                return Err(Error::NotAdmissible(format!(
                    "{k:?} lies in energy stopping interval {f:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn check_admissible(&self, cfg: &GridConfig, energy: &[Interval]) -> Result<()> {
        self.check_structure(cfg)?;
        self.check_convexity(cfg)?;
        self.check_energy(energy)
    }
}

/// A supremum together with the interval attaining it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Sup {
    pub value: f64,
    pub witness: Option<Interval>,
}

impl Sup {
    fn offer(&mut self, v: f64, k: Interval) {
        if v > self.value {
            self.value = v;
            self.witness = Some(k);
        }
    }

    fn sqrt(self) -> Self {
        Self { value: self.value.sqrt(), ..self }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SizeReport {
    pub value: f64,
    pub witness: Option<Interval>,
    /// Candidates skipped because `σ(K) = 0`.
    pub skipped_zero_mass: usize,
}

/// Exact Haar-coordinate matrix of `B_Q`: rows are σ-nondegenerate `Q₁`,
/// columns w-nondegenerate `Q₂`.
#[derive(Debug, Clone)]
pub struct FormMatrix {
    pub rows: Vec<Interval>,
    pub cols: Vec<Interval>,
    pub m: DMatrix<f64>,
}

impl FormMatrix {
    /// `f̂ᵀ M ĝ`.
    pub fn apply(&self, f: &HaarCoefficients, g: &HaarCoefficients) -> f64 {
        let fv: Vec<f64> = self.rows.iter().map(|i| f.get(i)).collect();
        let gv: Vec<f64> = self.cols.iter().map(|j| g.get(j)).collect();
        let mut acc = Accumulator::new();
        for (r, &fr) in fv.iter().enumerate() {
            if fr == 0.0 {
                continue;
            }
            for (c, &gc) in gv.iter().enumerate() {
                acc.add(fr * self.m[(r, c)] * gc);
            }
        }
        acc.value()
    }

    pub fn norm(&self) -> NormPair {
        NormPair::of(&self.m)
    }
}

/// Stopping data `(𝓕, α_f)`: `α(F') = E_{F'}|f| > 4 α(F)` on maximal `F'`.
#[derive(Debug, Clone, Serialize)]
pub struct StoppingData {
    pub alpha: BTreeMap<Interval, f64>,
}

impl StoppingData {
    pub fn tree(&self) -> impl Iterator<Item = &Interval> {
        self.alpha.keys()
    }

    /// `π_𝓕 J`, the minimal stopping interval containing `J`.
    pub fn parent_of(&self, j: &Interval) -> Option<Interval> {
        if self.alpha.contains_key(j) {
            return Some(*j);
        }
        j.ancestors().find(|a| self.alpha.contains_key(a))
    }

    /// `Σ_F α(F)² σ(F)`.
    pub fn carleson_sum(&self, pair: &MeasurePair) -> f64 {
        csum(self.alpha.iter().map(|(f, a)| a * a * pair.sigma.mass(f)))
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonotonicityRatio {
    pub ratio: f64,
    /// Set when `P(σ(I₀−S), J) = 0`; the ratio is then reported as 0.
    pub zero_denominator: bool,
}

/// Measures, window, Haar systems and a cache of Hilbert pairings.
pub struct FormContext {
    pub pair: MeasurePair,
    pub win: TruncationWindow,
    pub i0: Interval,
    pub sys_sigma: HaarSystem,
    pub sys_w: HaarSystem,
    x_coef: BTreeMap<Interval, f64>,
    stop_cache: Mutex<HashMap<(Interval, Interval), f64>>,
    norm_log: Mutex<NormLog>,
}

/// Running record of every spectral norm taken through a context.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct NormLog {
    pub count: usize,
    pub max_gap: f64,
    pub max_dim: usize,
    pub unconverged: usize,
}

impl NormLog {
    pub fn record(&mut self, n: &NormPair) {
        self.count += 1;
        self.max_gap = self.max_gap.max(n.relative_gap());
        self.max_dim = self.max_dim.max(n.rows.max(n.cols));
        self.unconverged += usize::from(!n.converged);
    }

    pub fn merge(&mut self, other: &NormLog) {
        self.count += other.count;
        self.max_gap = self.max_gap.max(other.max_gap);
        self.max_dim = self.max_dim.max(other.max_dim);
        self.unconverged += other.unconverged;
    }
}

impl FormContext {
    pub fn new(pair: MeasurePair, win: TruncationWindow, i0: Interval) -> Self {
        let sys_sigma = HaarSystem::new(&pair.sigma);
        let sys_w = HaarSystem::new(&pair.w);
        let x_coef =
            sys_w.intervals().map(|j| (j, haar::coefficient_x(&pair.w, &sys_w, &j))).collect();
        Self {
            pair,
            win,
            i0,
            sys_sigma,
            sys_w,
            x_coef,
            stop_cache: Mutex::new(HashMap::new()),
            norm_log: Mutex::new(NormLog::default()),
        }
    }

    pub fn with_default_window(pair: MeasurePair) -> Self {
        let win = pair.default_window();
        Self::new(pair, win, Interval::unit())
    }

    pub fn cfg(&self) -> &GridConfig {
        &self.pair.cfg
    }

    /// `⟨x, h^w_J⟩_w`, zero for degenerate `J`.
    pub fn x_coef(&self, j: &Interval) -> f64 {
        self.x_coef.get(j).copied().unwrap_or(0.0)
    }

    /// `h^σ_{Q₁}` on `Q̃₁`; `None` for σ-degenerate `Q₁`.
    pub fn sigma_value(&self, p: &Pair) -> Option<f64> {
        self.sys_sigma.get(&p.q1).map(|n| n.value_toward(&p.q2))
    }

    /// `⟨H_σ(1_E), h^w_J⟩_w` with `E` the union of the given σ-index ranges.
    fn pairing(&self, ranges: &[Range<usize>], j: &Interval) -> f64 {
        let Some(node) = self.sys_w.get(j) else {
            return 0.0;
        };
        let (s, w) = (&self.pair.sigma, &self.pair.w);
        let (sx, wx) = (s.positions(), w.positions());
        let mut acc = Accumulator::new();
        for idx in node.range.clone() {
            let x = wx[idx];
            let mut field = Accumulator::new();
            for r in ranges {
                for k in r.clone() {
                    field.add(s.atoms()[k].mass * self.win.kernel(x, sx[k]));
                }
            }
            acc.add(w.atoms()[idx].mass * node.value_at(idx) * field.value());
        }
        acc.value()
    }

    /// `⟨H_σ(1_{I₀−K}), h^w_J⟩_w`.
    pub fn stop_entry(&self, k: &Interval, j: &Interval) -> f64 {
        if let Some(v) = self.stop_cache.lock().expect("cache lock").get(&(*k, *j)) {
            return *v;
        }
        let outer = self.pair.sigma.range(&self.i0);
        let hole = self.pair.sigma.range(k);
        let v = if outer.start <= hole.start && hole.end <= outer.end {
            self.pairing(&[outer.start..hole.start, hole.end..outer.end], j)
        } else {
            self.pairing(&[outer], j)
        };
        self.stop_cache.lock().expect("cache lock").insert((*k, *j), v);
        v
    }

    /// `⟨H_σ(1_K), h^w_J⟩_w`.
    pub fn inside_entry(&self, k: &Interval, j: &Interval) -> f64 {
        self.pairing(&[self.pair.sigma.range(k)], j)
    }

    /// `⟨H_σ(1_{I₀}), h^w_J⟩_w`.
    pub fn full_entry(&self, j: &Interval) -> f64 {
        self.inside_entry(&self.i0, j)
    }

    /// The pair's entry of the form matrix, `None` when either side is degenerate.
    pub fn entry(&self, p: &Pair) -> Option<f64> {
        if !self.sys_w.is_nondegenerate(&p.q2) {
            return None;
        }
        let h = self.sigma_value(p)?;
        Some(h * self.stop_entry(&p.tilde_q1(), &p.q2))
    }

    /// `B_Q(f, g)` by direct summation over pairs.
    pub fn b_form(&self, q: &PairCollection, f: &HaarCoefficients, g: &HaarCoefficients) -> f64 {
        csum(q.iter().filter_map(|p| {
            let (a, b) = (f.coeffs.get(&p.q1)?, g.coeffs.get(&p.q2)?);
            Some(a * b * self.entry(p)?)
        }))
    }

    pub fn form_matrix(&self, q: &PairCollection) -> FormMatrix {
        let rows: Vec<Interval> =
            q.q1_set().into_iter().filter(|i| self.sys_sigma.is_nondegenerate(i)).collect();
        let cols: Vec<Interval> =
            q.q2_set().into_iter().filter(|j| self.sys_w.is_nondegenerate(j)).collect();
        let ri: HashMap<Interval, usize> = rows.iter().enumerate().map(|(a, &i)| (i, a)).collect();
        let ci: HashMap<Interval, usize> = cols.iter().enumerate().map(|(a, &j)| (j, a)).collect();
        let mut m = DMatrix::zeros(rows.len(), cols.len());
        for p in q.iter() {
            if let (Some(&r), Some(&c)) = (ri.get(&p.q1), ci.get(&p.q2)) {
                if let Some(v) = self.entry(p) {
                    m[(r, c)] += v;
                }
            }
        }
        FormMatrix { rows, cols, m }
    }

    /// `𝐁_Q` by both spectral routes; `.svd` is the reported value.
    pub fn norm(&self, q: &PairCollection) -> NormPair {
        let n = self.form_matrix(q).norm();
        self.norm_log.lock().expect("norm log lock").record(&n);
        n
    }

    pub fn norm_log(&self) -> NormLog {
        *self.norm_log.lock().expect("norm log lock")
    }

    /// `μ(T_K) = Σ_{J ∈ Q₂, J ⊆ K} ⟨x, h^w_J⟩²`.
    pub fn tent(&self, q2: &BTreeSet<Interval>, k: &Interval) -> f64 {
        csum(subintervals_in(q2, k, self.cfg().k).map(|j| self.x_coef(j).powi(2)))
    }

    /// `P(σ(outer − K), target)`.
    pub fn poisson_outside(&self, outer: &Interval, hole: &Interval, target: &Interval) -> f64 {
        poisson_annulus(&self.pair.sigma, outer, Some(hole), target)
    }

    /// `size(Q)² = sup_K P(σ(I₀−K), K)² tent(K) / (σ(K)|K|²)` over `K ∈ Q̃₁ ∪ Q₂`
    /// with `σ(K) > 0`.
    pub fn size(&self, q: &PairCollection) -> SizeReport {
        self.size_relative(q, |_| self.i0)
    }

    /// The size functional with `I₀` replaced by `outer(K)`.
    pub fn size_relative(&self, q: &PairCollection, outer: impl Fn(&Interval) -> Interval) -> SizeReport {
        let q2 = q.q2_set();
        let mut sup = Sup::default();
        let mut skipped = 0;
        for k in q.size_candidates() {
            let m = self.pair.sigma.mass(&k);
            if m <= 0.0 {
                skipped += 1;
                continue;
            }
            let p = self.poisson_outside(&outer(&k), &k, &k);
            let v = p * p / (m * k.len() * k.len()) * self.tent(&q2, &k);
            sup.offer(v, k);
        }
        let s = sup.sqrt();
        SizeReport { value: s.value, witness: s.witness, skipped_zero_mass: skipped }
    }

    /// `sup_{S} σ(S)⁻¹ Σ_{J ∈ Q₂, J ⋐ S} P(σ(I₀−S), J)² ⟨x/|J|, h^w_J⟩²`.
    pub fn holes_functional(&self, q: &PairCollection, family: &[Interval]) -> Sup {
        let q2 = q.q2_set();
        let cfg = self.cfg();
        let mut sup = Sup::default();
        for s in family {
            let m = self.pair.sigma.mass(s);
            if m <= 0.0 {
                continue;
            }
            let total = csum(subintervals_in(&q2, s, cfg.k).filter(|j| cfg.deeply_contained(j, s)).map(
                |j| {
                    let p = self.poisson_outside(&self.i0, s, j);
                    (p * self.x_coef(j) / j.len()).powi(2)
                },
            ));
            sup.offer(total / m, *s);
        }
        sup.sqrt()
    }

    /// `η` for a family with `Q₂ ⋐ S ⊆ Q̃₁` for every pair.
    pub fn eta_holes(&self, q: &PairCollection, family: &[Interval]) -> Result<Sup> {
        check_disjoint(family)?;
        let cfg = self.cfg();
        for p in q.iter() {
            let t = p.tilde_q1();
            if !family.iter().any(|s| cfg.deeply_contained(&p.q2, s) && t.contains(s)) {
                return Err(Error::Hypothesis(format!(
                    "no S with {:?} deeply inside S inside {:?}",
                    p.q2, t
                )));
            }
        }
        Ok(self.holes_functional(q, family))
    }

    /// `η` for a family with `Q₂ ⊆ S` and `S` scale-contained in `Q̃₁`:
    /// `sup_S P(σ(I₀ − π S), S)² tent(S) / (σ(S)|S|²)`, `π S` the minimal
    /// member of `Q̃₁` containing `S`.
    pub fn eta_big_holes(&self, q: &PairCollection, family: &[Interval]) -> Result<Sup> {
        check_disjoint(family)?;
        let cfg = self.cfg();
        for p in q.iter() {
            let t = p.tilde_q1();
            if !family.iter().any(|s| s.contains(&p.q2) && cfg.scale_contained(s, &t)) {
                return Err(Error::Hypothesis(format!(
                    "no S with {:?} inside S well inside {:?}",
                    p.q2, t
                )));
            }
        }
        let tilde = q.tilde_q1_set();
        let q2 = q.q2_set();
        let mut sup = Sup::default();
        for s in family {
            let m = self.pair.sigma.mass(s);
            let Some(pi) = minimal_container(&tilde, s) else {
                continue;
            };
            if m <= 0.0 {
                continue;
            }
            let p = poisson_annulus(&self.pair.sigma, &self.i0, Some(&pi), s);
            sup.offer(p * p / (m * s.len() * s.len()) * self.tent(&q2, s), *s);
        }
        Ok(sup.sqrt())
    }

    /// `|⟨H_σ(1_{I₀−S}), h^w_J⟩| / (P(σ(I₀−S), J) ⟨x/|J|, h^w_J⟩)` for `J ⋐ S`.
    pub fn monotonicity_ratio(&self, s: &Interval, j: &Interval) -> Result<MonotonicityRatio> {
        if !self.cfg().deeply_contained(j, s) {
            return Err(Error::Hypothesis(format!("{j:?} is not deeply contained in {s:?}")));
        }
        if !self.sys_w.is_nondegenerate(j) {
            return Err(Error::Degenerate(*j));
        }
        let num = self.stop_entry(s, j).abs();
        let den = self.poisson_outside(&self.i0, s, j) * self.x_coef(j) / j.len();
        if den <= 0.0 {
            return Ok(MonotonicityRatio { ratio: 0.0, zero_denominator: true });
        }
        Ok(MonotonicityRatio { ratio: num / den, zero_denominator: false })
    }

    pub fn stopping_data(&self, f: &WeightedFunction) -> Result<StoppingData> {
        let sigma = &self.pair.sigma;
        let depth = self.cfg().k;
        let abs = WeightedFunction { values: f.values.iter().map(|v| v.abs()).collect() };
        let root = haar::average(&abs, sigma, &self.i0)?;
        let mut alpha = BTreeMap::from([(self.i0, root)]);
        let mut frontier = vec![(self.i0, root)];
        while let Some((f0, a0)) = frontier.pop() {
            let mut stack: Vec<Interval> = if f0.n < depth {
                let (l, r) = f0.halves();
                vec![r, l]
            } else {
                Vec::new()
            };
            while let Some(i) = stack.pop() {
                let Ok(avg) = haar::average(&abs, sigma, &i) else {
                    continue;
                };
                if avg > 4.0 * a0 {
                    alpha.insert(i, avg);
                    frontier.push((i, avg));
                } else if i.n < depth && sigma.count_in(&i) > 1 {
                    let (l, r) = i.halves();
                    stack.push(r);
                    stack.push(l);
                }
            }
        }
        Ok(StoppingData { alpha })
    }

    /// `φ_J = Σ_{Q: Q₂ = J} E^σ_J Δ^σ_{Q₁} f · 1_{I₀ − Q̃₁}` on the σ-atoms.
    pub fn phi_j(&self, q: &PairCollection, f: &HaarCoefficients, j: &Interval) -> WeightedFunction {
        let sigma = &self.pair.sigma;
        let outer = sigma.range(&self.i0);
        let mut acc = vec![Accumulator::new(); sigma.len()];
        for p in q.iter().filter(|p| p.q2 == *j) {
            let (Some(c), Some(h)) = (f.coeffs.get(&p.q1), self.sigma_value(p)) else {
                continue;
            };
            let hole = sigma.range(&p.tilde_q1());
            for k in outer.clone() {
                if !hole.contains(&k) {
                    acc[k].add(c * h);
                }
            }
        }
        WeightedFunction { values: acc.iter().map(Accumulator::value).collect() }
    }

    /// Pairs `(I, J)` with `I ⊆ I₀`, `J ⋐ I`, `I` σ-nondegenerate and `J`
    /// w-nondegenerate: the common index set of the above and stopping forms.
    pub fn above_pairs(&self) -> Vec<Pair> {
        let cfg = self.cfg();
        let mut out = Vec::new();
        for j in self.sys_w.intervals().filter(|j| self.i0.contains(j)) {
            for i in j.ancestors() {
                if !self.i0.contains(&i) {
                    break;
                }
                if cfg.deeply_contained(&j, &i) && self.sys_sigma.is_nondegenerate(&i) {
                    out.push(Pair { q1: i, q2: j });
                }
            }
        }
        out.sort();
        out
    }

    /// `Σ_{I ⊆ I₀} Σ_{J ⋐ I} E^σ_J Δ^σ_I f · ⟨H_σ 1_{I_J}, Δ^w_J g⟩_w`.
    pub fn b_above(&self, f: &HaarCoefficients, g: &HaarCoefficients) -> f64 {
        csum(self.above_pairs().iter().filter_map(|p| {
            let (a, b) = (f.coeffs.get(&p.q1)?, g.coeffs.get(&p.q2)?);
            Some(a * b * self.sigma_value(p)? * self.inside_entry(&p.tilde_q1(), &p.q2))
        }))
    }

    /// The stopping form, with argument `1_{I₀} − 1_{I_J}`.
    pub fn b_stop(&self, f: &HaarCoefficients, g: &HaarCoefficients) -> f64 {
        csum(self.above_pairs().iter().filter_map(|p| {
            let (a, b) = (f.coeffs.get(&p.q1)?, g.coeffs.get(&p.q2)?);
            Some(a * b * self.sigma_value(p)? * self.stop_entry(&p.tilde_q1(), &p.q2))
        }))
    }

    /// `Σ_J ε_J ⟨H_σ 1_{I₀}, Δ^w_J g⟩_w`.
    pub fn i0_part(&self, f: &HaarCoefficients, g: &HaarCoefficients) -> f64 {
        let cfg = self.cfg();
        csum(g.coeffs.iter().filter(|(j, _)| self.i0.contains(j)).map(|(j, b)| {
            let eps = haar::epsilon_j(f, &self.sys_sigma, j, &self.i0, cfg);
            eps * b * self.full_entry(j)
        }))
    }

    /// `ε_J` for every `J` in the Haar support of `g`.
    pub fn epsilons(&self, f: &HaarCoefficients, g: &HaarCoefficients) -> BTreeMap<Interval, f64> {
        g.coeffs
            .keys()
            .map(|j| (*j, haar::epsilon_j(f, &self.sys_sigma, j, &self.i0, self.cfg())))
            .collect()
    }

    /// `𝒬₀ = {(I, J): J ⋐ I ⊆ I₀, I good, J ⊄ ∪𝒮}`, restricted to
    /// w-nondegenerate `J`.
    pub fn make_q0(&self, uniform: &[Interval], energy: &[Interval]) -> Result<PairCollection> {
        check_disjoint(uniform)?;
        for s in uniform {
            if !self.i0.contains(s) {
                return Err(Error::Hypothesis(format!("{s:?} is not inside I0")));
            }
        }
        for f in energy {
            if !uniform.iter().any(|s| s.contains(f)) {
                return Err(Error::Hypothesis(format!(
                    "energy stopping interval {f:?} is not inside any S"
                )));
            }
        }
        let cfg = self.cfg();
        let mut q = PairCollection::empty(self.i0);
        for j in self.sys_w.intervals().filter(|j| self.i0.contains(j)) {
            if uniform.iter().any(|s| s.contains(&j)) || !cfg.is_good(&j) {
                continue;
            }
            for i in j.ancestors() {
                if !self.i0.contains(&i) {
                    break;
                }
                if cfg.scale_contained(&j, &i) && cfg.is_good(&i) {
                    q.insert(Pair { q1: i, q2: j });
                }
            }
        }
        Ok(q)
    }

    /// Random `f` uniform with respect to `family`: Haar support on
    /// σ-nondegenerate `I ⊆ I₀` inside no `S`, mean zero, then rescaled until
    /// `E^σ_I |f| ≤ 1` on every interval not inside an `S`.
    pub fn uniform_f(&self, family: &[Interval], good_only: bool, rng: &mut ChaCha8Rng) -> HaarCoefficients {
        let cfg = self.cfg();
        let mut c = HaarCoefficients::default();
        for i in self.sys_sigma.intervals() {
            if self.i0.contains(&i)
                && !family.iter().any(|s| s.contains(&i))
                && (!good_only || cfg.is_good(&i))
            {
                c.coeffs.insert(i, rng.gen_range(-1.0..1.0));
            }
        }
        for _ in 0..20 {
            let v = haar::reconstruct(&c, &self.pair.sigma, &self.sys_sigma);
            let top = self.max_abs_average(&v, family);
            if top <= 1.0 {
                break;
            }
            for x in c.coeffs.values_mut() {
                *x /= top;
            }
        }
        c
    }

    /// `max E^σ_I |f|` over intervals `I ⊆ I₀` with σ-mass inside no `S`.
    pub fn max_abs_average(&self, f: &WeightedFunction, family: &[Interval]) -> f64 {
        let sigma = &self.pair.sigma;
        let depth = self.cfg().k;
        let abs = WeightedFunction { values: f.values.iter().map(|v| v.abs()).collect() };
        let mut best: f64 = 0.0;
        let mut stack = vec![self.i0];
        while let Some(i) = stack.pop() {
            if sigma.count_in(&i) == 0 {
                continue;
            }
            if family.iter().any(|s| s.contains(&i)) {
                continue;
            }
            if let Ok(a) = haar::average(&abs, sigma, &i) {
                best = best.max(a);
            }
            if i.n < depth {
                let (l, r) = i.halves();
                stack.push(l);
                stack.push(r);
            }
        }
        best
    }

    /// Random `g` adapted to `family`: Haar support on w-nondegenerate `J ⊆ I₀`
    /// inside no `S`, mean zero.
    pub fn adapted_g(&self, family: &[Interval], rng: &mut ChaCha8Rng) -> HaarCoefficients {
        let mut c = HaarCoefficients::default();
        for j in self.sys_w.intervals() {
            if self.i0.contains(&j) && !family.iter().any(|s| s.contains(&j)) {
                c.coeffs.insert(j, rng.gen_range(-1.0..1.0));
            }
        }
        c
    }
}

fn check_disjoint(family: &[Interval]) -> Result<()> {
    for (a, s) in family.iter().enumerate() {
        for t in &family[a + 1..] {
            if !s.is_disjoint(t) {
                return Err(Error::Hypothesis(format!("{s:?} and {t:?} overlap")));
            }
        }
    }
    Ok(())
}

/// Checks that `parts` are mutually orthogonal: pairwise disjoint `Q₂` sets
/// and pairwise disjoint `Q̃₁` sets. Returns the largest number of parts any
/// single `Q₁` appears in (at most two for orthogonal families).
pub fn mutual_orthogonality(parts: &[&PairCollection]) -> Result<usize> {
    let mut q2_owner: HashMap<Interval, usize> = HashMap::new();
    let mut t_owner: HashMap<Interval, usize> = HashMap::new();
    let mut q1_parts: HashMap<Interval, BTreeSet<usize>> = HashMap::new();
    for (a, q) in parts.iter().enumerate() {
        for p in q.iter() {
            if let Some(&b) = q2_owner.get(&p.q2) {
                if b != a {
                    return Err(Error::Hypothesis(format!("{:?} in two Q2 families", p.q2)));
                }
            }
            q2_owner.insert(p.q2, a);
            let t = p.tilde_q1();
            if let Some(&b) = t_owner.get(&t) {
                if b != a {
                    return Err(Error::Hypothesis(format!("{t:?} in two tilde-Q1 families")));
                }
            }
            t_owner.insert(t, a);
            q1_parts.entry(p.q1).or_default().insert(a);
        }
    }
    Ok(q1_parts.values().map(BTreeSet::len).max().unwrap_or(0))
}
