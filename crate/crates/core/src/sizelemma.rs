//! Energy stopping, the ℒ construction, the pair partition and the size
//! recursion driver.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forms::{minimal_container, mutual_orthogonality, subintervals_in, FormContext, PairCollection};
use crate::grid::{DyadicInterval, GridConfig};
use crate::haar;
use crate::linalg::NormPair;
use crate::measure::{poisson_annulus, MeasurePair};

type Interval = DyadicInterval;

pub const RHO: f64 = 17.0 / 16.0;
/// Relative slack on the exact structural inequalities.
pub const SLACK: f64 = 1e-12;
/// Absolute slack on the √2 aggregation of spectral norms.
pub const ORTHO_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct EnergyStopping {
    pub root: Interval,
    /// Maximal `I ⊊ I₀` with `P(σ 1_{I₀}, I)² E(w,I)² w(I) > 10 C₀ 𝓗² σ(I)`.
    pub family: Vec<Interval>,
    /// Same scan with `P(σ(I₀ − I), I)`.
    pub hole_family: Vec<Interval>,
    pub c0: f64,
    pub h_const: f64,
}

impl EnergyStopping {
    fn fraction(sigma_total: f64, pair: &MeasurePair, family: &[Interval]) -> f64 {
        if sigma_total <= 0.0 {
            return 0.0;
        }
        family.iter().fold(0.0, |a, f| a + pair.sigma.mass(f)) / sigma_total
    }

    /// `σ(∪𝓕) / σ(I₀)`.
    pub fn sigma_fraction(&self, pair: &MeasurePair) -> f64 {
        Self::fraction(pair.sigma.mass(&self.root), pair, &self.family)
    }

    pub fn hole_sigma_fraction(&self, pair: &MeasurePair) -> f64 {
        Self::fraction(pair.sigma.mass(&self.root), pair, &self.hole_family)
    }
}

fn energy_scan(
    pair: &MeasurePair,
    i0: &Interval,
    threshold: f64,
    poisson: impl Fn(&Interval) -> f64,
) -> Vec<Interval> {
    let depth = pair.cfg.k;
    let mut out = Vec::new();
    let mut stack = Vec::new();
    if i0.n < depth {
        let (l, r) = i0.halves();
        stack.extend([r, l]);
    }
    while let Some(i) = stack.pop() {
        if pair.w.count_in(&i) < 2 {
            continue;
        }
        let p = poisson(&i);
        let lhs = p * p * haar::energy_sq(&pair.w, &i) * pair.w.mass(&i);
        if lhs > threshold * pair.sigma.mass(&i) {
            out.push(i);
        } else if i.n < depth {
            let (l, r) = i.halves();
            stack.extend([r, l]);
        }
    }
    out.sort();
    out
}

pub fn energy_stopping(pair: &MeasurePair, i0: &Interval, c0: f64, h_const: f64) -> EnergyStopping {
    let threshold = 10.0 * c0 * h_const * h_const;
    let family = energy_scan(pair, i0, threshold, |i| poisson_annulus(&pair.sigma, i0, None, i));
    let hole_family = energy_scan(pair, i0, threshold, |i| poisson_annulus(&pair.sigma, i0, Some(i), i));
    EnergyStopping { root: *i0, family, hole_family, c0, h_const }
}

/// The ℒ collection with generation tags and the tent over every candidate.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LCollection {
    pub tau: f64,
    pub generation: BTreeMap<Interval, u32>,
    pub rounds: usize,
    pub candidates: usize,
    #[serde(skip)]
    members: BTreeSet<Interval>,
    #[serde(skip)]
    tent: BTreeMap<Interval, f64>,
}

impl LCollection {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &BTreeSet<Interval> {
        &self.members
    }

    pub fn tent(&self, k: &Interval) -> f64 {
        self.tent.get(k).copied().unwrap_or(0.0)
    }

    /// `π_ℒ K`, the minimal member containing `K`.
    pub fn parent(&self, k: &Interval) -> Option<Interval> {
        minimal_container(&self.members, k)
    }

    /// The minimal member strictly containing `K`.
    pub fn strict_parent(&self, k: &Interval) -> Option<Interval> {
        k.ancestors().find(|a| self.members.contains(a))
    }

    /// `π^t_ℒ K` for `t ≥ 1`.
    pub fn pi(&self, k: &Interval, t: u32) -> Option<Interval> {
        let mut p = self.parent(k)?;
        for _ in 1..t {
            p = self.strict_parent(&p)?;
        }
        Some(p)
    }

    /// The `t ≥ 1` with `π^t_ℒ K = L`.
    pub fn steps_to(&self, k: &Interval, l: &Interval) -> Option<u32> {
        let mut p = self.parent(k)?;
        let mut t = 1;
        while p != *l {
            p = self.strict_parent(&p)?;
            t += 1;
        }
        Some(t)
    }

    /// ℒ*, the maximal members.
    pub fn maximal(&self) -> Vec<Interval> {
        self.members.iter().filter(|l| self.strict_parent(l).is_none()).copied().collect()
    }

    /// `𝒮_L`, the members whose minimal strict ℒ-ancestor is `L`.
    pub fn children_of(&self, l: &Interval) -> Vec<Interval> {
        self.members.iter().filter(|m| self.strict_parent(m) == Some(*l)).copied().collect()
    }

    /// The maximal members strictly inside `s`.
    fn maximal_inside(&self, s: &Interval, depth: u32) -> Vec<Interval> {
        subintervals_in(&self.members, s, depth)
            .filter(|m| *m != s && !self.strict_parent(m).is_some_and(|p| s.strictly_contains(&p)))
            .copied()
            .collect()
    }
}

fn kdef_holds(ctx: &FormContext, tau: f64, tent: f64, k: &Interval) -> bool {
    let m = ctx.pair.sigma.mass(k);
    if m <= 0.0 {
        return false;
    }
    let p = ctx.poisson_outside(&ctx.i0, k, k);
    p * p / (k.len() * k.len()) * tent >= tau * tau * m / 16.0
}

fn minimal_of(set: &BTreeSet<Interval>, depth: u32) -> BTreeSet<Interval> {
    set.iter()
        .filter(|k| subintervals_in(set, k, depth).all(|m| m == *k))
        .copied()
        .collect()
}

pub fn build_l(ctx: &FormContext, q: &PairCollection) -> LCollection {
    let depth = ctx.cfg().k;
    let tau = ctx.size(q).value;
    let cands = q.size_candidates();
    let q2 = q.q2_set();
    let tent: BTreeMap<Interval, f64> = cands.iter().map(|k| (*k, ctx.tent(&q2, k))).collect();
    let mut l = LCollection { tau, candidates: cands.len(), tent, ..Default::default() };
    if q.is_empty() || tau <= 0.0 {
        return l;
    }
    let passing: BTreeSet<Interval> =
        cands.iter().filter(|k| kdef_holds(ctx, tau, l.tent(k), k)).copied().collect();
    for k in minimal_of(&passing, depth) {
        l.members.insert(k);
        l.generation.insert(k, 0);
    }
    let mut stock: BTreeSet<Interval> = cands
        .iter()
        .filter(|s| !l.members.contains(s) && subintervals_in(&l.members, s, depth).next().is_some())
        .filter(|s| !l.members.iter().any(|m| m.contains(s)))
        .copied()
        .collect();
    loop {
        let selected: BTreeSet<Interval> = stock
            .iter()
            .filter(|s| {
                let below: f64 = l.maximal_inside(s, depth).iter().map(|m| l.tent(m)).sum();
                l.tent(s) >= RHO * below
            })
            .copied()
            .collect();
        let fresh = minimal_of(&selected, depth);
        if fresh.is_empty() {
            break;
        }
        l.rounds += 1;
        let g = l.rounds as u32;
        for k in fresh {
            l.members.insert(k);
            l.generation.insert(k, g);
        }
        stock.retain(|s| !l.members.iter().any(|m| m.contains(s)));
    }
    l
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct DdecayReport {
    /// `max Σ_{π^t L' = L} tent(L') / (ρ^{-t} tent(L))`, 0 when vacuous.
    pub max_ratio: f64,
    pub worst: Option<(Interval, u32)>,
    pub checked: usize,
}

pub fn check_ddecay(l: &LCollection) -> DdecayReport {
    let mut sums: BTreeMap<(Interval, u32), f64> = BTreeMap::new();
    for m in l.members() {
        let mut p = *m;
        let mut t = 0;
        while let Some(a) = l.strict_parent(&p) {
            t += 1;
            *sums.entry((a, t)).or_default() += l.tent(m);
            p = a;
        }
    }
    let mut r = DdecayReport { checked: sums.len(), ..Default::default() };
    for ((a, t), s) in sums {
        let ratio = s * RHO.powi(t as i32) / l.tent(&a);
        if ratio > r.max_ratio {
            r.max_ratio = ratio;
            r.worst = Some((a, t));
        }
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassKey {
    Small1 { l: Interval },
    Small2,
    Large1 { l: Interval },
    /// `Q^sub_{L,t}` for `t ≥ 2`, `sub ∈ {1, 2, 3}`.
    Large2 { l: Interval, t: u32, sub: u8 },
    Large3,
    Large4,
    Large5,
}

impl ClassKey {
    pub fn is_small(&self) -> bool {
        matches!(self, ClassKey::Small1 { .. } | ClassKey::Small2)
    }

    pub fn name(&self) -> String {
        match self {
            ClassKey::Small1 { l } => format!("small1[{},{}]", l.n, l.j),
            ClassKey::Small2 => "small2".into(),
            ClassKey::Large1 { l } => format!("large1[{},{}]", l.n, l.j),
            ClassKey::Large2 { l, t, sub } => format!("large2[{},{}][t={t}][{sub}]", l.n, l.j),
            ClassKey::Large3 => "large3".into(),
            ClassKey::Large4 => "large4".into(),
            ClassKey::Large5 => "large5".into(),
        }
    }
}

pub fn classify(l: &LCollection, cfg: &GridConfig, p: &crate::forms::Pair) -> Result<ClassKey> {
    let q2 = p.q2;
    let t1 = p.tilde_q1();
    if l.parent(&q2).is_none() {
        return Ok(ClassKey::Small2);
    }
    if let Some(top) = l.parent(&t1) {
        let t = l
            .steps_to(&q2, &top)
            .ok_or_else(|| Error::Internal(format!("{top:?} is not an L-ancestor of {q2:?}")))?;
        if t == 1 {
            return Ok(if t1 != top { ClassKey::Small1 { l: top } } else { ClassKey::Large1 { l: top } });
        }
        let s = l.pi(&q2, t - 1).expect("shorter chain exists");
        let sub = if cfg.deeply_contained(&q2, &s) {
            1
        } else if cfg.scale_contained(&s, &t1) {
            2
        } else {
            3
        };
        return Ok(ClassKey::Large2 { l: top, t, sub });
    }
    let s = minimal_container(&l.maximal().into_iter().collect(), &q2).expect("Q2 has an L-parent");
    if !t1.strictly_contains(&s) {
        return Err(Error::Internal(format!("maximal {s:?} not strictly inside {t1:?}")));
    }
    Ok(if cfg.deeply_contained(&q2, &s) {
        ClassKey::Large3
    } else if cfg.scale_contained(&s, &t1) {
        ClassKey::Large4
    } else {
        ClassKey::Large5
    })
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub i0: Interval,
    pub classes: BTreeMap<ClassKey, PairCollection>,
}

impl Partition {
    pub fn total(&self) -> usize {
        self.classes.values().map(PairCollection::len).sum()
    }

    fn gather(&self, pick: impl Fn(&ClassKey) -> Option<Interval>) -> BTreeMap<Interval, PairCollection> {
        let mut out: BTreeMap<Interval, PairCollection> = BTreeMap::new();
        for (k, q) in &self.classes {
            if let Some(l) = pick(k) {
                let e = out.entry(l).or_insert_with(|| PairCollection::empty(self.i0));
                *e = PairCollection::union(self.i0, [&*e, q]);
            }
        }
        out
    }

    pub fn small1(&self) -> BTreeMap<Interval, PairCollection> {
        self.gather(|k| match k {
            ClassKey::Small1 { l } => Some(*l),
            _ => None,
        })
    }

    pub fn large1(&self) -> BTreeMap<Interval, PairCollection> {
        self.gather(|k| match k {
            ClassKey::Large1 { l } => Some(*l),
            _ => None,
        })
    }

    /// `Q_{L,t}` for every `L` at fixed `t`.
    pub fn q_lt(&self, t: u32) -> BTreeMap<Interval, PairCollection> {
        self.gather(|k| match *k {
            ClassKey::Small1 { l } | ClassKey::Large1 { l } if t == 1 => Some(l),
            ClassKey::Large2 { l, t: s, .. } if s == t => Some(l),
            _ => None,
        })
    }

    pub fn ts(&self) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        for k in self.classes.keys() {
            match k {
                ClassKey::Small1 { .. } | ClassKey::Large1 { .. } => {
                    out.insert(1);
                }
                ClassKey::Large2 { t, .. } => {
                    out.insert(*t);
                }
                _ => {}
            }
        }
        out
    }

    pub fn get(&self, k: &ClassKey) -> Option<&PairCollection> {
        self.classes.get(k)
    }
}

pub fn partition(q: &PairCollection, l: &LCollection, cfg: &GridConfig) -> Result<Partition> {
    let mut classes: BTreeMap<ClassKey, PairCollection> = BTreeMap::new();
    for p in q.iter() {
        let k = classify(l, cfg, p)?;
        classes.entry(k).or_insert_with(|| PairCollection::empty(q.i0)).insert(*p);
    }
    Ok(Partition { i0: q.i0, classes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "lemma", rename_all = "snake_case")]
pub enum Lemma {
    /// `𝐁 ≤ C_h η` with the disjoint-holes functional.
    Holes,
    /// `𝐁 ≤ C_Holes η` with the big-holes functional.
    BigHoles,
    /// `𝐁 ≤ C_e size` at fixed `log₂(|Q₁|/|Q₂|) = u`.
    Equal { u: u32 },
    /// `𝐁_{Q_{L,t}} ≤ C_Y ρ^{-t/2} τ`.
    Decay { t: u32 },
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaSample {
    #[serde(flatten)]
    pub lemma: Lemma,
    pub class: String,
    pub pairs: usize,
    /// Pairs left out because they miss the lemma's hypothesis.
    pub dropped: usize,
    pub norm: f64,
    pub bound: f64,
    pub ratio: f64,
    /// Size of the collection the lemma was applied to.
    pub size: f64,
}

impl LemmaSample {
    fn new(lemma: Lemma, class: String, c: &PairCollection, dropped: usize, ctx: &FormContext, bound: f64) -> Self {
        let (pairs, norm, size) = (c.len(), ctx.norm(c).svd, ctx.size(c).value);
        let ratio = if norm == 0.0 {
            0.0
        } else if bound > 0.0 {
            norm / bound
        } else {
            f64::INFINITY
        };
        Self { lemma, class, pairs, dropped, norm, bound, ratio, size }
    }
}

/// A failed structural check, tagged with its stable check identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub check: &'static str,
    pub detail: String,
}

impl Violation {
    pub fn new(check: &'static str, detail: String) -> Self {
        Self { check, detail }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}", self.check, self.detail)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassSummary {
    pub name: String,
    #[serde(skip)]
    pub key: ClassKey,
    pub count: usize,
    pub size: f64,
    pub norm: f64,
    pub norm_power: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrthoCheck {
    pub family: String,
    pub parts: usize,
    pub union_norm: f64,
    pub max_norm: f64,
    pub q1_overlap: usize,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaSample {
    pub l: Interval,
    pub t: u32,
    pub beta: f64,
    /// `ρ^{-t/2} τ`.
    pub scale: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PartitionFacts {
    /// Largest `t` seen with a non-`Q¹` member (must be ≤ r + 1).
    pub max_t_off_q1: Option<u32>,
    /// Range of `log₂(|Q₁|/|Q₂|)` over `Q³` and large5.
    pub far_log_ratio: Option<(u32, u32)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeLemmaReport {
    pub tau: f64,
    pub pairs: usize,
    pub norm: NormPair,
    pub l_count: usize,
    pub l_rounds: usize,
    pub l_candidates: usize,
    pub l_maximal: usize,
    pub ddecay: DdecayReport,
    pub classes: Vec<ClassSummary>,
    /// Size of the union of all small1 classes (only the per-`L` bound is asserted).
    pub small1_union_size: f64,
    /// Largest small1 size with `P(σ(L − K), K)` in place of `P(σ(I₀ − K), K)`.
    pub small1_alt_size: f64,
    pub small_max_norm: f64,
    pub node_constant: f64,
    pub orthogonality: Vec<OrthoCheck>,
    pub lemmas: Vec<LemmaSample>,
    pub beta: Vec<BetaSample>,
    pub facts: PartitionFacts,
    pub violations: Vec<Violation>,
}

fn check_family(
    ctx: &FormContext,
    name: String,
    parts: &BTreeMap<Interval, PairCollection>,
    violations: &mut Vec<Violation>,
) -> Option<OrthoCheck> {
    if parts.len() < 2 {
        return None;
    }
    let refs: Vec<&PairCollection> = parts.values().collect();
    let overlap = match mutual_orthogonality(&refs) {
        Ok(o) => o,
        Err(e) => {
            violations.push(Violation::new("sizelemma.orthogonality", format!("{name}: {e}")));
            return None;
        }
    };
    let union = PairCollection::union(ctx.i0, refs.iter().copied());
    let union_norm = ctx.norm(&union).svd;
    let max_norm = refs.iter().map(|q| ctx.norm(q).svd).fold(0.0, f64::max);
    let holds = overlap <= 2 && union_norm <= 2f64.sqrt() * max_norm + ORTHO_SLACK;
    if !holds {
        violations.push(Violation::new(
            "forms.subadditivity",
            format!("{name}: union norm {union_norm:e} vs sqrt2 * {max_norm:e} (Q1 overlap {overlap})"),
        ));
    }
    Some(OrthoCheck { family: name, parts: parts.len(), union_norm, max_norm, q1_overlap: overlap, holds })
}

/// One step of the Size Lemma on `q`: builds ℒ, partitions, and measures
/// every quantity the lemma controls. Structural failures land in
/// `violations`; calibrated constants are only recorded.
pub fn verify_size_lemma(ctx: &FormContext, q: &PairCollection, energy: &[Interval]) -> Result<SizeLemmaReport> {
    let cfg = *ctx.cfg();
    let r = cfg.r;
    let mut violations: Vec<Violation> = Vec::new();
    let l = build_l(ctx, q);
    let tau = l.tau;
    let norm = ctx.norm(q);
    if !q.is_empty() && tau > 0.0 && l.is_empty() {
        violations.push(Violation::new("sizelemma.l-construction", "nonempty collection produced an empty L".into()));
    }
    if l.rounds > l.candidates {
        violations.push(Violation::new(
            "sizelemma.l-construction",
            format!("L construction took {} rounds for {} candidates", l.rounds, l.candidates),
        ));
    }
    let ddecay = check_ddecay(&l);
    if ddecay.max_ratio > 1.0 + SLACK {
        violations.push(Violation::new(
            "sizelemma.ddecay",
            format!("ddecay ratio {:e} at {:?}", ddecay.max_ratio, ddecay.worst),
        ));
    }
    let part = partition(q, &l, &cfg)?;
    if part.total() != q.len() {
        violations.push(Violation::new(
            "sizelemma.partition",
            format!("partition has {} pairs, input {}", part.total(), q.len()),
        ));
    }

    let mut classes = Vec::new();
    let mut small_max_norm: f64 = 0.0;
    for (k, c) in &part.classes {
        if let Err(e) = c.check_admissible(&cfg, energy) {
            violations.push(Violation::new("sizelemma.admissible", format!("{}: {e}", k.name())));
        }
        let n = ctx.norm(c);
        let size = ctx.size(c).value;
        if k.is_small() {
            small_max_norm = small_max_norm.max(n.svd);
            if size > tau / 4.0 * (1.0 + SLACK) {
                violations.push(Violation::new(
                    "sizelemma.small-size",
                    format!("{}: size {size:e} exceeds tau/4 = {:e}", k.name(), tau / 4.0),
                ));
            }
        }
        classes.push(ClassSummary { name: k.name(), key: *k, count: c.len(), size, norm: n.svd, norm_power: n.power });
    }

    let small1 = part.small1();
    let small1_union_size = ctx.size(&PairCollection::union(q.i0, small1.values())).value;
    let small1_alt_size =
        small1.iter().map(|(lk, c)| ctx.size_relative(c, |_| *lk).value).fold(0.0, f64::max);

    let mut facts = PartitionFacts::default();
    for (k, c) in &part.classes {
        match *k {
            ClassKey::Large2 { t, sub, .. } if sub != 1 => {
                facts.max_t_off_q1 = Some(facts.max_t_off_q1.map_or(t, |m| m.max(t)));
                if t > r + 1 {
                    violations.push(Violation::new("sizelemma.t-range", format!("{}: non-Q1 member at t > r+1", k.name())));
                }
                if sub == 3 {
                    record_far(&mut facts, c);
                }
            }
            ClassKey::Large5 => record_far(&mut facts, c),
            _ => {}
        }
    }
    if let Some((lo, hi)) = facts.far_log_ratio {
        if lo < r || hi > 2 * r + 2 {
            violations.push(Violation::new(
                "sizelemma.t-range",
                format!("far classes have log ratios {lo}..{hi} outside [r, 2r+2]"),
            ));
        }
    }

    let mut orthogonality = Vec::new();
    for t in part.ts() {
        if let Some(o) = check_family(ctx, format!("Q_(L,{t})"), &part.q_lt(t), &mut violations) {
            orthogonality.push(o);
        }
    }
    if let Some(o) = check_family(ctx, "small1".into(), &small1, &mut violations) {
        orthogonality.push(o);
    }
    if let Some(o) = check_family(ctx, "large1".into(), &part.large1(), &mut violations) {
        orthogonality.push(o);
    }

    let lemmas = lemma_samples(ctx, &l, &part, tau)?;
    for s in lemmas.iter().filter(|s| s.lemma == Lemma::BigHoles) {
        if s.bound > tau * (1.0 + SLACK) {
            violations.push(Violation::new(
                "forms.big-holes-eta",
                format!("{}: big-holes eta {:e} exceeds size {tau:e}", s.class, s.bound),
            ));
        }
    }
    let mut beta = Vec::new();
    for t in part.ts().into_iter().filter(|t| *t >= 2) {
        for (lk, c) in part.q_lt(t) {
            let b = ctx.holes_functional(&c, &l.children_of(&lk)).value;
            beta.push(BetaSample { l: lk, t, beta: b, scale: RHO.powf(-(t as f64) / 2.0) * tau });
        }
    }

    let node_constant =
        if tau > 0.0 { ((norm.svd - (1.0 + 2f64.sqrt()) * small_max_norm) / tau).max(0.0) } else { 0.0 };
    Ok(SizeLemmaReport {
        tau,
        pairs: q.len(),
        norm,
        l_count: l.len(),
        l_rounds: l.rounds,
        l_candidates: l.candidates,
        l_maximal: l.maximal().len(),
        ddecay,
        classes,
        small1_union_size,
        small1_alt_size,
        small_max_norm,
        node_constant,
        orthogonality,
        lemmas,
        beta,
        facts,
        violations,
    })
}

fn record_far(facts: &mut PartitionFacts, c: &PairCollection) {
    for p in c.iter() {
        let u = p.scale_gap();
        facts.far_log_ratio = Some(match facts.far_log_ratio {
            None => (u, u),
            Some((lo, hi)) => (lo.min(u), hi.max(u)),
        });
    }
}

fn lemma_samples(ctx: &FormContext, l: &LCollection, part: &Partition, tau: f64) -> Result<Vec<LemmaSample>> {
    let cfg = *ctx.cfg();
    let mut out = Vec::new();
    let mut holes = |name: String, c: &PairCollection, family: &[Interval]| -> Result<()> {
        let fit = c.filter(|p| {
            family.iter().any(|s| cfg.deeply_contained(&p.q2, s) && p.tilde_q1().contains(s))
        });
        if fit.is_empty() {
            return Ok(());
        }
        let eta = ctx.eta_holes(&fit, family)?.value;
        out.push(LemmaSample::new(Lemma::Holes, name, &fit, c.len() - fit.len(), ctx, eta));
        Ok(())
    };
    let maximal = l.maximal();
    for (k, c) in &part.classes {
        match *k {
            ClassKey::Large2 { l: lk, sub: 1, .. } => holes(k.name(), c, &l.children_of(&lk))?,
            ClassKey::Large1 { l: lk } => holes(k.name(), c, &[lk])?,
            ClassKey::Large3 => holes(k.name(), c, &maximal)?,
            _ => {}
        }
    }
    for (k, c) in &part.classes {
        let family = match *k {
            ClassKey::Large2 { l: lk, sub: 2, .. } => l.children_of(&lk),
            ClassKey::Large4 => maximal.clone(),
            _ => continue,
        };
        let eta = ctx.eta_big_holes(c, &family)?.value;
        out.push(LemmaSample::new(Lemma::BigHoles, k.name(), c, 0, ctx, eta));
    }
    for (k, c) in &part.classes {
        if !matches!(k, ClassKey::Large2 { sub: 3, .. } | ClassKey::Large5) {
            continue;
        }
        let us: BTreeSet<u32> = c.iter().map(|p| p.scale_gap()).collect();
        for u in us {
            let cu = c.filter(|p| p.scale_gap() == u);
            if cu.q2_set().len() != cu.len() {
                return Err(Error::Internal(format!("{}: a Q2 has two Q1 at gap {u}", k.name())));
            }
            let s = ctx.size(&cu).value;
            out.push(LemmaSample::new(Lemma::Equal { u }, k.name(), &cu, 0, ctx, s));
        }
    }
    for t in part.ts().into_iter().filter(|t| *t >= 2) {
        for (lk, c) in part.q_lt(t) {
            let scale = RHO.powf(-(t as f64) / 2.0) * tau;
            let name = format!("Q_(L,{t})[{},{}]", lk.n, lk.j);
            out.push(LemmaSample::new(Lemma::Decay { t }, name, &c, 0, ctx, scale));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionNode {
    pub class: String,
    pub level: u32,
    pub pairs: usize,
    pub tau: f64,
    pub norm: f64,
    pub node_constant: f64,
    pub leaf: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lemma: Option<Box<SizeLemmaReport>>,
    pub children: Vec<DecompositionNode>,
}

impl DecompositionNode {
    pub fn walk<'a>(&'a self, out: &mut Vec<&'a DecompositionNode>) {
        out.push(self);
        for c in &self.children {
            c.walk(out);
        }
    }

    pub fn nodes(&self) -> Vec<&DecompositionNode> {
        let mut out = Vec::new();
        self.walk(&mut out);
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Decomposition {
    pub threshold: f64,
    pub tau0: f64,
    pub norm0: f64,
    pub depth: u32,
    pub depth_bound: u32,
    pub c_max: f64,
    /// `4 C_max τ₀`, to be compared with `norm0`.
    pub accumulated_bound: f64,
    pub node_count: usize,
    pub violations: Vec<Violation>,
    pub root: DecompositionNode,
}

/// Applies the Size Lemma recursively to every nonempty small class until
/// the size falls below `threshold`.
pub fn decompose_until(
    ctx: &FormContext,
    q: &PairCollection,
    energy: &[Interval],
    threshold: f64,
) -> Result<Decomposition> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Hypothesis(format!("threshold {threshold} must be positive")));
    }
    let root = node(ctx, q, energy, threshold, "root".into(), 0)?;
    let nodes = root.nodes();
    let depth = nodes.iter().map(|n| n.level).max().unwrap_or(0);
    let c_max = nodes.iter().map(|n| n.node_constant).fold(0.0, f64::max);
    let tau0 = root.tau;
    let depth_bound = if tau0 <= threshold { 1 } else { (tau0 / threshold).log(4.0).ceil() as u32 + 1 };
    let mut violations: Vec<Violation> = nodes
        .iter()
        .filter_map(|n| n.lemma.as_ref())
        .flat_map(|r| r.violations.iter().cloned())
        .collect();
    if depth > depth_bound {
        violations.push(Violation::new("sizelemma.recursion", format!("recursion depth {depth} exceeds {depth_bound}")));
    }
    let accumulated_bound = 4.0 * c_max * tau0;
    if root.norm > accumulated_bound * (1.0 + 1e-9) + 1e-300 {
        violations.push(Violation::new(
            "sizelemma.recursion",
            format!("norm {:e} exceeds 4 C_max tau0 = {accumulated_bound:e}", root.norm),
        ));
    }
    Ok(Decomposition {
        threshold,
        tau0,
        norm0: root.norm,
        depth,
        depth_bound,
        c_max,
        accumulated_bound,
        node_count: nodes.len(),
        violations,
        root,
    })
}

fn node(
    ctx: &FormContext,
    q: &PairCollection,
    energy: &[Interval],
    threshold: f64,
    class: String,
    level: u32,
) -> Result<DecompositionNode> {
    let tau = ctx.size(q).value;
    if q.is_empty() || tau == 0.0 || tau < threshold {
        let norm = ctx.norm(q).svd;
        let c = if tau > 0.0 { norm / tau } else { 0.0 };
        return Ok(DecompositionNode {
            class,
            level,
            pairs: q.len(),
            tau,
            norm,
            node_constant: c,
            leaf: true,
            lemma: None,
            children: Vec::new(),
        });
    }
    let report = verify_size_lemma(ctx, q, energy)?;
    let l = build_l(ctx, q);
    let part = partition(q, &l, ctx.cfg())?;
    let mut children = Vec::new();
    for (k, c) in part.classes.iter().filter(|(k, c)| k.is_small() && !c.is_empty()) {
        let child = node(ctx, c, energy, threshold, k.name(), level + 1)?;
        if child.tau > tau / 4.0 * (1.0 + SLACK) {
            return Err(Error::Internal(format!(
                "size did not drop by four: {} -> {} in {}",
                tau,
                child.tau,
                k.name()
            )));
        }
        children.push(child);
    }
    Ok(DecompositionNode {
        class,
        level,
        pairs: q.len(),
        tau,
        norm: report.norm.svd,
        node_constant: report.node_constant,
        leaf: false,
        lemma: Some(Box::new(report)),
        children,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::Pair;
    use crate::gen;
    use crate::measure::AtomicMeasure;

    fn ctx(seed: u64, n: usize) -> FormContext {
        FormContext::with_default_window(gen::uniform_random(GridConfig::default(), n, n, seed).unwrap())
    }

    #[test]
    fn energy_stopping_extremes() {
        let pair = gen::uniform_random(GridConfig::default(), 30, 30, 1).unwrap();
        let i0 = Interval::unit();
        assert!(energy_stopping(&pair, &i0, f64::INFINITY, 1.0).family.is_empty());
        let no_w = MeasurePair::new(pair.sigma.clone(), AtomicMeasure::empty(12), pair.cfg).unwrap();
        assert!(energy_stopping(&no_w, &i0, 1e-9, 1.0).family.is_empty());
        let loose = energy_stopping(&pair, &i0, 1e-6, 1.0);
        assert!(!loose.family.is_empty());
        for (a, f) in loose.family.iter().enumerate() {
            for g in &loose.family[a + 1..] {
                assert!(f.is_disjoint(g));
            }
        }
    }

    #[test]
    fn energy_stopping_brute_force() {
        let cfg = GridConfig::new(7, 2, 0.25).unwrap();
        let sigma = AtomicMeasure::from_cells(7, [(5, 1.0), (70, 2.0)]).unwrap();
        let w = AtomicMeasure::from_cells(7, [(20, 1.0), (30, 3.0), (100, 1.0), (101, 0.5)]).unwrap();
        let pair = MeasurePair::new(sigma, w, cfg).unwrap();
        let i0 = Interval::unit();
        for c0 in [1e-3, 1e-2, 0.1, 1.0] {
            let got = energy_stopping(&pair, &i0, c0, 1.0).family;
            let viol = |i: &Interval| {
                let p = poisson_annulus(&pair.sigma, &i0, None, i);
                p * p * haar::energy_sq(&pair.w, i) * pair.w.mass(i) > 10.0 * c0 * pair.sigma.mass(i)
            };
            let brute: Vec<Interval> = cfg
                .intervals()
                .filter(|i| *i != i0 && viol(i) && !i.ancestors().any(|a| a != i0 && viol(&a)))
                .collect();
            assert_eq!(got, brute, "c0 = {c0}");
        }
    }

    #[test]
    fn empty_collection_gives_empty_l() {
        let c = ctx(1, 32);
        let l = build_l(&c, &PairCollection::empty(c.i0));
        assert!(l.is_empty());
        let d = decompose_until(&c, &PairCollection::empty(c.i0), &[], 1e-9).unwrap();
        assert!(d.root.leaf && d.root.children.is_empty());
        assert_eq!(d.norm0, 0.0);
    }

    #[test]
    fn size_witness_enters_l() {
        for seed in 0..6 {
            let c = ctx(seed, 96);
            let q = c.make_q0(&[], &[]).unwrap();
            if q.is_empty() {
                continue;
            }
            let l = build_l(&c, &q);
            let w = c.size(&q).witness.unwrap();
            assert!(!l.is_empty());
            assert!(l.members().iter().any(|m| w.contains(m)), "witness {w:?} has no member below");
            assert!(l.rounds <= l.candidates);
            assert!(check_ddecay(&l).max_ratio <= 1.0 + SLACK);
        }
    }

    #[test]
    fn single_member_l_brute_force_classes() {
        let cfg = GridConfig::default();
        let lk = Interval::new(3, 2).unwrap();
        let l = LCollection {
            members: [lk].into(),
            generation: [(lk, 0)].into(),
            tent: [(lk, 1.0)].into(),
            ..Default::default()
        };
        let good: Vec<Interval> = cfg.intervals().filter(|j| j.n <= 10 && cfg.is_good(j)).collect();
        let mut seen = BTreeSet::new();
        for &j in &good {
            for q1 in j.ancestors().filter(|i| cfg.deeply_contained(&j, i) && cfg.is_good(i)) {
                let p = Pair { q1, q2: j };
                let k = classify(&l, &cfg, &p).unwrap();
                let t1 = p.tilde_q1();
                let expect = if !lk.contains(&j) {
                    ClassKey::Small2
                } else if lk.contains(&t1) {
                    if t1 == lk {
                        ClassKey::Large1 { l: lk }
                    } else {
                        ClassKey::Small1 { l: lk }
                    }
                } else if cfg.deeply_contained(&j, &lk) {
                    ClassKey::Large3
                } else if cfg.scale_contained(&lk, &t1) {
                    ClassKey::Large4
                } else {
                    ClassKey::Large5
                };
                assert_eq!(k, expect, "{p:?}");
                seen.insert(k.name().split('[').next().unwrap().to_string());
            }
        }
        assert!(seen.len() >= 4);
    }

    #[test]
    fn tent_single_interval() {
        let c = ctx(2, 48);
        let j = c.sys_w.intervals().find(|j| j.n >= 5).unwrap();
        let q2: BTreeSet<Interval> = [j].into();
        for k in GridConfig::default().intervals().filter(|k| k.n <= 6) {
            let expected = if k.contains(&j) { c.x_coef(&j).powi(2) } else { 0.0 };
            assert_eq!(c.tent(&q2, &k), expected);
        }
    }

    #[test]
    fn partition_and_node_checks_on_random_instances() {
        for seed in 0..6 {
            let c = ctx(10 + seed, 128);
            let q = c.make_q0(&[], &[]).unwrap();
            let r = verify_size_lemma(&c, &q, &[]).unwrap();
            assert!(r.violations.is_empty(), "{:?}", r.violations);
            assert_eq!(r.classes.iter().map(|k| k.count).sum::<usize>(), q.len());
        }
    }

    #[test]
    fn recursion_respects_depth_and_bound() {
        for seed in 0..4 {
            let c = ctx(20 + seed, 128);
            let q = c.make_q0(&[], &[]).unwrap();
            let tau0 = c.size(&q).value;
            let d = decompose_until(&c, &q, &[], (1e-6 * tau0).max(1e-300)).unwrap();
            assert!(d.violations.is_empty(), "{:?}", d.violations);
            assert!(d.depth <= d.depth_bound);
            assert!(d.norm0 <= d.accumulated_bound * (1.0 + 1e-9) + 1e-300);
        }
    }

    #[test]
    fn leaf_when_size_below_threshold() {
        let c = ctx(3, 96);
        let q = c.make_q0(&[], &[]).unwrap();
        let tau = c.size(&q).value;
        let d = decompose_until(&c, &q, &[], 2.0 * tau + 1.0).unwrap();
        assert!(d.root.leaf);
        assert_eq!(d.depth, 0);
    }
}
