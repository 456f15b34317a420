//! Atomic measures on `[0, 1)`, Poisson integrals and truncated Hilbert sums.
//!
//! Atoms sit at centers of depth-`K` cells, `x = (2k + 1) 2^-(K+1)`, so no atom
//! is ever on the boundary of a dyadic interval of scale at most `K`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DyadicInterval, GridConfig};
use crate::sum::{csum, Accumulator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub k: u64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomicMeasure {
    depth: u32,
    atoms: Vec<Atom>,
    positions: Vec<f64>,
}

pub fn cell_center(depth: u32, k: u64) -> f64 {
    (2 * k + 1) as f64 * (-((depth + 1) as f64)).exp2()
}

impl AtomicMeasure {
    /// Builds a measure; atoms must have strictly increasing cells and
    /// positive finite masses.
    pub fn new(depth: u32, atoms: Vec<Atom>) -> Result<Self> {
        if depth > crate::grid::MAX_DEPTH - 1 {
            return Err(Error::InvalidMeasure(format!("depth {depth} too large")));
        }
        for (i, a) in atoms.iter().enumerate() {
            if a.k >= 1u64 << depth {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i}: cell k={} outside depth-{depth} grid",
                    a.k
                )));
            }
            if !(a.mass.is_finite() && a.mass > 0.0) {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i}: mass must be positive and finite, got {}",
                    a.mass
                )));
            }
            if i > 0 && atoms[i - 1].k >= a.k {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i}: cells must be strictly increasing ({} then {})",
                    atoms[i - 1].k,
                    a.k
                )));
            }
        }
        let positions = atoms.iter().map(|a| cell_center(depth, a.k)).collect();
        Ok(Self { depth, atoms, positions })
    }

    /// Builds a measure from unsorted `(cell, mass)` entries.
    pub fn from_cells(depth: u32, cells: impl IntoIterator<Item = (u64, f64)>) -> Result<Self> {
        let mut atoms: Vec<Atom> = cells.into_iter().map(|(k, mass)| Atom { k, mass }).collect();
        atoms.sort_by_key(|a| a.k);
        Self::new(depth, atoms)
    }

    pub fn empty(depth: u32) -> Self {
        Self { depth, atoms: Vec::new(), positions: Vec::new() }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn masses(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.atoms.iter().map(|a| a.mass)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        csum(self.masses())
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        let atoms = self.atoms.iter().map(|a| Atom { k: a.k, mass: a.mass * c }).collect();
        Self::new(self.depth, atoms)
    }

    /// The mirror image under `x -> 1 - x`.
    pub fn reflected(&self) -> Self {
        let top = (1u64 << self.depth) - 1;
        let mut atoms: Vec<Atom> =
            self.atoms.iter().map(|a| Atom { k: top - a.k, mass: a.mass }).collect();
        atoms.reverse();
        Self::new(self.depth, atoms).expect("reflection preserves validity")
    }

    /// Union of the atom lists, adding masses on shared cells.
    pub fn merged(&self, other: &Self) -> Result<Self> {
        if self.depth != other.depth {
            return Err(Error::InvalidMeasure("depth mismatch".into()));
        }
        let mut map = std::collections::BTreeMap::new();
        for a in self.atoms.iter().chain(&other.atoms) {
            *map.entry(a.k).or_insert(0.0) += a.mass;
        }
        Self::from_cells(self.depth, map)
    }

    /// Indices of the atoms lying in the cell range `[lo, hi)`.
    pub fn cell_index_range(&self, lo: u64, hi: u64) -> Range<usize> {
        let a = self.atoms.partition_point(|x| x.k < lo);
        let b = self.atoms.partition_point(|x| x.k < hi);
        a..b
    }

    /// Indices of the atoms lying in `i`. Intervals finer than the atom
    /// depth contain at most one atom.
    pub fn range(&self, i: &DyadicInterval) -> Range<usize> {
        if i.n <= self.depth {
            let (lo, hi) = i.cell_range(self.depth);
            self.cell_index_range(lo, hi)
        } else {
            let cell = i.ancestor_at(self.depth);
            let r = self.cell_index_range(cell.j, cell.j + 1);
            // the atom sits at the cell center, the left edge of the right half
            match r.clone().next() {
                Some(idx) if i.left() <= self.positions[idx] && self.positions[idx] < i.right() => r,
                _ => r.start..r.start,
            }
        }
    }

    pub fn count_in(&self, i: &DyadicInterval) -> usize {
        self.range(i).len()
    }

    /// `ν(I)`.
    pub fn mass(&self, i: &DyadicInterval) -> f64 {
        csum(self.atoms[self.range(i)].iter().map(|a| a.mass))
    }

    /// Index of the atom at exactly `x`, if any.
    pub fn atom_at(&self, x: f64) -> Option<usize> {
        let idx = self.positions.partition_point(|&p| p < x);
        (idx < self.positions.len() && self.positions[idx] == x).then_some(idx)
    }

    /// `ν` restricted to a region, as a predicate on atom indices.
    pub fn poisson_where(&self, target: &Span, keep: impl Fn(usize) -> bool) -> f64 {
        let len = target.len();
        let mut acc = Accumulator::new();
        for (idx, (a, &x)) in self.atoms.iter().zip(&self.positions).enumerate() {
            if keep(idx) {
                let d = target.dist(x);
                acc.add(a.mass * len / (len * len + d * d));
            }
        }
        acc.value()
    }
}

/// A closed-open span `[left, right)` of the line, used where the candidate
/// intervals are not dyadic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub left: f64,
    pub right: f64,
}

impl Span {
    pub fn len(&self) -> f64 {
        self.right - self.left
    }

    /// Distance from `x` to the closure of the span.
    pub fn dist(&self, x: f64) -> f64 {
        if x < self.left {
            self.left - x
        } else if x > self.right {
            x - self.right
        } else {
            0.0
        }
    }
}

impl From<&DyadicInterval> for Span {
    fn from(i: &DyadicInterval) -> Self {
        Span { left: i.left(), right: i.right() }
    }
}

/// `P(ν, I) = Σ m |I| / (|I|² + dist(x, I)²)`.
pub fn poisson(nu: &AtomicMeasure, i: &DyadicInterval) -> f64 {
    nu.poisson_where(&Span::from(i), |_| true)
}

pub fn poisson_span(nu: &AtomicMeasure, span: &Span) -> f64 {
    nu.poisson_where(span, |_| true)
}

/// `P(ν (outer − hole), target)`: the Poisson integral of `ν` restricted to
/// `outer` with `hole` removed.
pub fn poisson_annulus(
    nu: &AtomicMeasure,
    outer: &DyadicInterval,
    hole: Option<&DyadicInterval>,
    target: &DyadicInterval,
) -> f64 {
    let keep = nu.range(outer);
    let skip = hole.map(|h| nu.range(h)).unwrap_or(0..0);
    nu.poisson_where(&Span::from(target), |idx| keep.contains(&idx) && !skip.contains(&idx))
}

/// Truncation `ε < |x − y| < δ` of the Hilbert kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationWindow {
    pub eps: f64,
    pub delta: f64,
}

impl TruncationWindow {
    pub fn new(eps: f64, delta: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < delta && delta.is_finite()) {
            return Err(Error::InvalidWindow { eps, delta });
        }
        Ok(Self { eps, delta })
    }

    #[inline]
    pub fn admits(&self, dist: f64) -> bool {
        self.eps < dist && dist < self.delta
    }

    /// `1 / (y − x)` inside the window, `0` outside.
    #[inline]
    pub fn kernel(&self, x: f64, y: f64) -> f64 {
        let d = y - x;
        if self.admits(d.abs()) {
            1.0 / d
        } else {
            0.0
        }
    }
}

/// `H_{ε,δ} ν (x) = Σ_{ε < |x − y| < δ} m / (y − x)`.
pub fn hilbert_truncated(nu: &AtomicMeasure, x: f64, win: &TruncationWindow) -> Result<f64> {
    if nu.atom_at(x).is_some() {
        return Err(Error::SingularPoint(x));
    }
    Ok(csum(nu.atoms().iter().zip(nu.positions()).map(|(a, &y)| a.mass * win.kernel(x, y))))
}

/// A pair of weights on a common grid with no shared atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurePair {
    pub sigma: AtomicMeasure,
    pub w: AtomicMeasure,
    pub cfg: GridConfig,
}

impl MeasurePair {
    pub fn new(sigma: AtomicMeasure, w: AtomicMeasure, cfg: GridConfig) -> Result<Self> {
        cfg.validate()?;
        if sigma.depth() != cfg.k || w.depth() != cfg.k {
            return Err(Error::InvalidMeasure(format!(
                "measure depths ({}, {}) differ from grid depth {}",
                sigma.depth(),
                w.depth(),
                cfg.k
            )));
        }
        let (mut a, mut b) = (sigma.atoms().iter().peekable(), w.atoms().iter().peekable());
        while let (Some(x), Some(y)) = (a.peek(), b.peek()) {
            match x.k.cmp(&y.k) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => return Err(Error::CommonAtom(x.k)),
            }
        }
        Ok(Self { sigma, w, cfg })
    }

    /// The pair with the roles of the two weights exchanged.
    pub fn swapped(&self) -> Self {
        Self { sigma: self.w.clone(), w: self.sigma.clone(), cfg: self.cfg }
    }

    pub fn reflected(&self) -> Self {
        Self { sigma: self.sigma.reflected(), w: self.w.reflected(), cfg: self.cfg }
    }

    /// Smallest distance between a σ-atom and a w-atom.
    pub fn min_cross_distance(&self) -> Option<f64> {
        let (xs, ys) = (self.sigma.positions(), self.w.positions());
        if xs.is_empty() || ys.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        let mut j = 0;
        for &x in xs {
            while j < ys.len() && ys[j] < x {
                j += 1;
            }
            if j < ys.len() {
                best = best.min(ys[j] - x);
            }
            if j > 0 {
                best = best.min(x - ys[j - 1]);
            }
        }
        Some(best)
    }

    /// `ε` = half the smallest σ–w gap, `δ = 2`: every cross pair of atoms
    /// is retained, so truncated sums equal the full discrete transform.
    pub fn default_window(&self) -> TruncationWindow {
        let eps = self
            .min_cross_distance()
            .map(|d| 0.5 * d)
            .unwrap_or_else(|| (-((self.cfg.k + 1) as f64)).exp2());
        TruncationWindow { eps, delta: 2.0 }
    }
}

/// `H(1_I f σ)` at every w-atom.
pub fn hilbert_field(
    f: &[f64],
    pair: &MeasurePair,
    indicator: &DyadicInterval,
    win: &TruncationWindow,
) -> Result<Vec<f64>> {
    let sigma = &pair.sigma;
    if f.len() != sigma.len() {
        return Err(Error::LengthMismatch { expected: sigma.len(), got: f.len() });
    }
    let range = sigma.range(indicator);
    let ys = &sigma.positions()[range.clone()];
    let weights: Vec<f64> =
        sigma.atoms()[range.clone()].iter().zip(&f[range]).map(|(a, v)| a.mass * v).collect();
    Ok(pair
        .w
        .positions()
        .iter()
        .map(|&x| csum(ys.iter().zip(&weights).map(|(&y, &m)| m * win.kernel(x, y))))
        .collect())
}

/// Bounds `[c_P, C_P]` on `(P(ν,J)/|J|) / (P(ν,L)/|L|)` for `J ⊆ L` when every
/// atom of ν sits at distance at least `s|L|` from `L`.
///
/// Each atom contributes `(1 + x²)/(a² + (x + δ)²)` with `x = d/|L|`, `|J| = a|L|`
/// and `δ ∈ [0, 1 − a]`; the bounds are the extremes of that kernel ratio over
/// dyadic `a`, both ends of `δ` and a log-spaced sweep of `x ≥ s`.
pub fn poisson_comparability(s: f64, depth: u32) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 1.0;
    for k in 0..=depth {
        let a = (-(k as f64)).exp2();
        for step in 0..=4000 {
            let x = s * 10f64.powf(step as f64 / 400.0);
            for delta in [0.0, 1.0 - a] {
                let v = (1.0 + x * x) / (a * a + (x + delta) * (x + delta));
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    (lo, hi.max(1.0 + 1.0 / (s * s)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparabilityScan {
    pub checked: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub c_lo: f64,
    pub c_hi: f64,
}

impl ComparabilityScan {
    pub fn holds(&self) -> bool {
        self.checked == 0
            || (self.min_ratio >= self.c_lo * (1.0 - 1e-12) && self.max_ratio <= self.c_hi * (1.0 + 1e-12))
    }
}

/// Every `(J, L, K)` with `L` good or the child of a good interval,
/// `|L| ≤ 2^-max_l`, `K ⊋ L` a proper subinterval of `[0,1)` with
/// `2^r|L| ≤ |K|`, and `J ⊆ L` at most `below` levels down; ν restricted to
/// `[0,1) − K`.
pub fn comparability_scan(nu: &AtomicMeasure, cfg: &GridConfig, max_l: u32, below: u32) -> ComparabilityScan {
    let s = (cfg.r as f64 * (1.0 - cfg.eps)).exp2();
    let (c_lo, c_hi) = poisson_comparability(s, cfg.k);
    let unit = DyadicInterval::unit();
    let mut out = ComparabilityScan { checked: 0, min_ratio: f64::INFINITY, max_ratio: 0.0, c_lo, c_hi };
    for l in cfg.intervals().filter(|l| l.n <= max_l) {
        if !(cfg.is_good(&l) || l.parent().is_some_and(|p| cfg.is_good(&p))) {
            continue;
        }
        for k in l.ancestors().filter(|k| k.n > 0 && l.n >= k.n + cfg.r) {
            let pl = poisson_annulus(nu, &unit, Some(&k), &l) / l.len();
            if pl == 0.0 {
                continue;
            }
            for n in l.n..=(l.n + below).min(cfg.k) {
                let (lo, hi) = l.cell_range(n);
                for j in lo..hi {
                    let j = DyadicInterval { n, j };
                    let ratio = poisson_annulus(nu, &unit, Some(&k), &j) / j.len() / pl;
                    out.checked += 1;
                    out.min_ratio = out.min_ratio.min(ratio);
                    out.max_ratio = out.max_ratio.max(ratio);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const K: u32 = 12;

    fn iv(n: u32, j: u64) -> DyadicInterval {
        DyadicInterval::new(n, j).unwrap()
    }

    fn measure(cells: &[(u64, f64)]) -> AtomicMeasure {
        AtomicMeasure::from_cells(K, cells.iter().copied()).unwrap()
    }

    #[test]
    fn rejects_bad_atoms() {
        assert!(AtomicMeasure::new(K, vec![Atom { k: 1, mass: 0.0 }]).is_err());
        assert!(AtomicMeasure::new(K, vec![Atom { k: 1 << K, mass: 1.0 }]).is_err());
        assert!(AtomicMeasure::new(K, vec![Atom { k: 3, mass: 1.0 }, Atom { k: 3, mass: 1.0 }])
            .is_err());
        assert!(AtomicMeasure::new(K, vec![Atom { k: 3, mass: f64::NAN }]).is_err());
    }

    #[test]
    fn pair_rejects_common_atoms() {
        let s = measure(&[(5, 1.0), (9, 1.0)]);
        let w = measure(&[(9, 2.0)]);
        let cfg = GridConfig::default();
        assert!(matches!(MeasurePair::new(s, w, cfg), Err(Error::CommonAtom(9))));
    }

    #[test]
    fn mass_examples() {
        assert_eq!(AtomicMeasure::empty(K).mass(&iv(0, 0)), 0.0);
        let half = 1u64 << (K - 1);
        let nu = measure(&[(half, 1.0)]);
        assert_eq!(nu.positions()[0], 0.5 + (-(K as f64 + 1.0)).exp2());
        assert_eq!(nu.mass(&iv(1, 1)), 1.0);
        assert_eq!(nu.mass(&iv(1, 0)), 0.0);
        let nu = measure(&[(10, 0.25), (half + 10, 0.5)]);
        assert_eq!(nu.mass(&iv(0, 0)), nu.mass(&iv(1, 0)) + nu.mass(&iv(1, 1)));
    }

    #[test]
    fn ranges_below_atom_depth() {
        let nu = measure(&[(6, 1.0)]);
        let cell = iv(K, 6);
        let (l, r) = cell.halves();
        assert_eq!(nu.count_in(&cell), 1);
        assert_eq!(nu.count_in(&l), 0);
        assert_eq!(nu.count_in(&r), 1);
    }

    #[test]
    fn poisson_examples() {
        // unit atom at the center of [0,1): distance zero
        let nu = measure(&[(1 << (K - 1), 1.0)]);
        let p = poisson(&nu, &iv(0, 0));
        assert_eq!(p, 1.0);
        assert_eq!(poisson(&AtomicMeasure::empty(K), &iv(3, 1)), 0.0);
        // |I| = 1/2, d = 1/4 -> (1/2) / (1/4 + 1/16) = 1.6
        let span = Span { left: 0.0, right: 0.5 };
        let d = 0.25;
        let direct = span.len() / (span.len().powi(2) + d * d);
        assert_relative_eq!(direct, 1.6, max_relative = 1e-15);
        // atom at 3/4 + half cell is d = 1/4 + 2^-13 from [0, 1/2)
        let nu = measure(&[(3 << (K - 2), 1.0)]);
        let d = nu.positions()[0] - 0.5;
        assert_relative_eq!(
            poisson(&nu, &iv(1, 0)),
            0.5 / (0.25 + d * d),
            max_relative = 1e-15
        );
    }

    #[test]
    fn poisson_hole_examples() {
        let nu = measure(&[(100, 1.0), (3000, 2.0)]);
        let hole = iv(1, 0);
        let target = iv(3, 1);
        // only the exterior atom at cell 3000 survives
        let x = nu.positions()[1];
        let d = x - target.right();
        let expected = 2.0 * target.len() / (target.len().powi(2) + d * d);
        assert_relative_eq!(
            poisson_annulus(&nu, &iv(0, 0), Some(&hole), &target),
            expected,
            max_relative = 1e-15
        );
        assert_eq!(poisson_annulus(&nu, &iv(0, 0), Some(&iv(0, 0)), &target), 0.0);
        let inside = measure(&[(100, 1.0), (200, 2.0)]);
        assert_eq!(poisson_annulus(&inside, &iv(0, 0), Some(&hole), &target), 0.0);
    }

    #[test]
    fn hilbert_examples() {
        let win = TruncationWindow::new(1e-6, 2.0).unwrap();
        // single atom at distance d to the right of x: H = m / d
        let nu = measure(&[(2730, 1.0)]);
        let x = cell_center(K, 1365);
        let d = nu.positions()[0] - x;
        assert_relative_eq!(hilbert_truncated(&nu, x, &win).unwrap(), 1.0 / d, max_relative = 1e-15);
        // symmetric atoms cancel
        let nu = measure(&[(1000, 1.0), (1200, 1.0)]);
        let mid = cell_center(K, 1100);
        assert_eq!(hilbert_truncated(&nu, mid, &win).unwrap(), 0.0);
        // atoms inside eps contribute nothing
        let narrow = TruncationWindow::new(1.0, 2.0).unwrap();
        assert_eq!(hilbert_truncated(&nu, mid, &narrow).unwrap(), 0.0);
        assert!(hilbert_truncated(&nu, nu.positions()[0], &win).is_err());
    }

    #[test]
    fn hilbert_field_examples() {
        let cfg = GridConfig::default();
        let pair =
            MeasurePair::new(measure(&[(10, 1.0), (400, 0.5)]), measure(&[(77, 2.0)]), cfg).unwrap();
        let win = pair.default_window();
        let zero = hilbert_field(&[0.0, 0.0], &pair, &iv(0, 0), &win).unwrap();
        assert_eq!(zero, vec![0.0]);
        let single =
            MeasurePair::new(measure(&[(10, 1.0)]), measure(&[(77, 2.0)]), cfg).unwrap();
        let field = hilbert_field(&[1.0], &single, &iv(0, 0), &win).unwrap();
        let direct = hilbert_truncated(&single.sigma, single.w.positions()[0], &win).unwrap();
        assert_eq!(field[0], direct);
        let f = [0.3, -1.7];
        let g = [2.0, 0.25];
        let fg: Vec<f64> = f.iter().zip(&g).map(|(a, b)| a + b).collect();
        let a = hilbert_field(&f, &pair, &iv(0, 0), &win).unwrap();
        let b = hilbert_field(&g, &pair, &iv(0, 0), &win).unwrap();
        let c = hilbert_field(&fg, &pair, &iv(0, 0), &win).unwrap();
        assert_relative_eq!(c[0], a[0] + b[0], max_relative = 1e-12);
        assert!(hilbert_field(&[1.0], &pair, &iv(0, 0), &win).is_err());
    }

    #[test]
    fn default_window_keeps_every_cross_pair() {
        let cfg = GridConfig::default();
        let pair = MeasurePair::new(
            measure(&[(10, 1.0), (11, 1.0), (4000, 1.0)]),
            measure(&[(12, 1.0), (2000, 1.0)]),
            cfg,
        )
        .unwrap();
        let win = pair.default_window();
        for &x in pair.w.positions() {
            for &y in pair.sigma.positions() {
                assert!(win.admits((x - y).abs()));
            }
        }
    }

    #[test]
    fn mass_and_poisson_are_additive() {
        let a = measure(&[(10, 1.0), (500, 0.25), (3000, 0.75)]);
        let b = measure(&[(11, 0.5), (2999, 2.0)]);
        let ab = a.merged(&b).unwrap();
        for i in [iv(0, 0), iv(2, 1), iv(5, 0), iv(3, 5)] {
            assert_relative_eq!(ab.mass(&i), a.mass(&i) + b.mass(&i), max_relative = 1e-12);
            assert_relative_eq!(
                poisson(&ab, &i),
                poisson(&a, &i) + poisson(&b, &i),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn poisson_comparability_on_valid_triples() {
        use crate::grid::GridConfig;
        let cfg = GridConfig::default();
        let s = (cfg.r as f64 * (1.0 - cfg.eps)).exp2();
        let (c_lo, c_hi) = poisson_comparability(s, cfg.k);
        assert!(0.0 < c_lo && c_lo < 1.0 && c_hi > 1.0 && c_hi < 1.1);
        let cells: Vec<(u64, f64)> = (0..60u64).map(|i| ((i * 977 + 13) % 4096, 1.0 + (i % 7) as f64)).collect();
        let nu = AtomicMeasure::from_cells(K, cells).unwrap();
        let scan = comparability_scan(&nu, &cfg, 9, 3);
        assert!(scan.holds(), "{scan:?}");
        assert!(scan.checked > 1000, "{scan:?}");
    }

}
