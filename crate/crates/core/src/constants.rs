//! 𝒜₂, the interval testing constants, the norm 𝒩 and `𝓗 = √𝒜₂ + 𝒯`.
//!
//! Suprema over intervals run over a finite candidate family: every interval
//! whose endpoints are depth-`K` cell boundaries next to an atom (or 0, 1),
//! together with every dyadic interval of the grid.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm_power, spectral_norm_svd, NormPair};
use crate::measure::{poisson_span, AtomicMeasure, MeasurePair, Span, TruncationWindow};
use crate::sum::Accumulator;

/// `[lo 2^-K, hi 2^-K)` with cell indices `lo < hi ≤ 2^K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct LatticeInterval {
    pub lo: u64,
    pub hi: u64,
}

impl LatticeInterval {
    pub fn span(&self, depth: u32) -> Span {
        let s = (-(depth as f64)).exp2();
        Span { left: self.lo as f64 * s, right: self.hi as f64 * s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// `∫_I |H(1_I σ)|² dw ≤ 𝒯² σ(I)`.
    SigmaToW,
    /// The dual condition with σ and w exchanged.
    WToSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Witnessed {
    pub value: f64,
    pub witness: Option<LatticeInterval>,
}

fn candidate_endpoints(pair: &MeasurePair) -> Vec<u64> {
    let top = 1u64 << pair.cfg.k;
    let mut e: BTreeSet<u64> = [0, top].into();
    for a in pair.sigma.atoms().iter().chain(pair.w.atoms()) {
        e.insert(a.k);
        e.insert(a.k + 1);
    }
    e.into_iter().collect()
}

/// The candidate family, sorted lexicographically.
pub fn candidate_intervals(pair: &MeasurePair) -> Vec<LatticeInterval> {
    let k = pair.cfg.k;
    let e = candidate_endpoints(pair);
    let mut set = BTreeSet::new();
    for (a, &lo) in e.iter().enumerate() {
        for &hi in &e[a + 1..] {
            set.insert(LatticeInterval { lo, hi });
        }
    }
    for i in pair.cfg.intervals() {
        let (lo, hi) = i.cell_range(k);
        set.insert(LatticeInterval { lo, hi });
    }
    set.into_iter().collect()
}

/// `sup_I P(σ, I) P(w, I)` over the candidate family.
pub fn a2_constant(pair: &MeasurePair) -> Witnessed {
    let mut best = Witnessed { value: 0.0, witness: None };
    if pair.sigma.is_empty() || pair.w.is_empty() {
        return best;
    }
    for c in candidate_intervals(pair) {
        let s = c.span(pair.cfg.k);
        let v = poisson_span(&pair.sigma, &s) * poisson_span(&pair.w, &s);
        if v > best.value {
            best = Witnessed { value: v, witness: Some(c) };
        }
    }
    best
}

/// `𝒯` in the given direction: the square root of
/// `sup_{σ(I)>0} ∫_I |H(1_I σ)|² dw / σ(I)`.
///
/// The ratio depends only on which atoms lie in `I`, so scanning every
/// contiguous run of the merged atom list is exact.
pub fn testing_constant(pair: &MeasurePair, dir: Direction, win: &TruncationWindow) -> Witnessed {
    let (src, dst) = match dir {
        Direction::SigmaToW => (&pair.sigma, &pair.w),
        Direction::WToSigma => (&pair.w, &pair.sigma),
    };
    testing_scan(src, dst, win)
}

#[derive(Clone, Copy)]
enum Side {
    Src(usize),
    Dst(usize),
}

fn testing_scan(src: &AtomicMeasure, dst: &AtomicMeasure, win: &TruncationWindow) -> Witnessed {
    let mut merged: Vec<(u64, Side)> = src
        .atoms()
        .iter()
        .enumerate()
        .map(|(i, a)| (a.k, Side::Src(i)))
        .chain(dst.atoms().iter().enumerate().map(|(i, a)| (a.k, Side::Dst(i))))
        .collect();
    merged.sort_by_key(|(k, _)| *k);

    let (sx, dx) = (src.positions(), dst.positions());
    let mut best = Witnessed { value: 0.0, witness: None };
    // field[d] = H(1_I src) at dst atom d, for the dst atoms in the run
    let mut field: Vec<Accumulator> = vec![Accumulator::new(); dst.len()];
    for start in 0..merged.len() {
        let mut in_src: Vec<usize> = Vec::new();
        let mut in_dst: Vec<usize> = Vec::new();
        let mut src_mass = Accumulator::new();
        for &(k_end, side) in &merged[start..] {
            match side {
                Side::Src(i) => {
                    src_mass.add(src.atoms()[i].mass);
                    for &d in &in_dst {
                        field[d].add(src.atoms()[i].mass * win.kernel(dx[d], sx[i]));
                    }
                    in_src.push(i);
                }
                Side::Dst(d) => {
                    let mut acc = Accumulator::new();
                    for &i in &in_src {
                        acc.add(src.atoms()[i].mass * win.kernel(dx[d], sx[i]));
                    }
                    field[d] = acc;
                    in_dst.push(d);
                }
            }
            let m = src_mass.value();
            if m <= 0.0 {
                continue;
            }
            let mut num = Accumulator::new();
            for &d in &in_dst {
                num.add(dst.atoms()[d].mass * field[d].value().powi(2));
            }
            let v = num.value() / m;
            if v > best.value {
                let lo = merged[start].0;
                best = Witnessed { value: v, witness: Some(LatticeInterval { lo, hi: k_end + 1 }) };
            }
        }
    }
    Witnessed { value: best.value.sqrt(), witness: best.witness }
}

/// `A[i, j] = √w_i √σ_j / (y_j − x_i)` over retained pairs; rows are w-atoms.
pub fn kernel_matrix(pair: &MeasurePair, win: &TruncationWindow) -> DMatrix<f64> {
    let (s, w) = (&pair.sigma, &pair.w);
    DMatrix::from_fn(w.len(), s.len(), |i, j| {
        (w.atoms()[i].mass * s.atoms()[j].mass).sqrt() * win.kernel(w.positions()[i], s.positions()[j])
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NormEstimate {
    pub norm: f64,
    pub routes: NormPair,
    /// Right singular vector over σ-atoms in `√σ`-weighted coordinates.
    pub right_vector: Vec<f64>,
}

/// `𝒩`: the largest singular value of the kernel matrix.
pub fn norm_estimate(pair: &MeasurePair, win: &TruncationWindow) -> NormEstimate {
    let a = kernel_matrix(pair, win);
    let p = spectral_norm_power(&a);
    let svd = spectral_norm_svd(&a);
    NormEstimate {
        norm: svd,
        routes: NormPair {
            svd,
            power: p.norm,
            iterations: p.iterations,
            converged: p.converged,
            restarted: p.restarted,
            rows: a.nrows(),
            cols: a.ncols(),
        },
        right_vector: p.vector.iter().copied().collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstantsReport {
    pub a2: Witnessed,
    pub testing_sw: Witnessed,
    pub testing_ws: Witnessed,
    pub norm: NormEstimate,
    pub h_const: f64,
    pub ratio: Option<f64>,
    pub window: TruncationWindow,
}

pub fn h_constant(a2: f64, t_sw: f64, t_ws: f64) -> f64 {
    a2.sqrt() + t_sw.max(t_ws)
}

/// `𝒩 / 𝓗`.
pub fn theorem_ratio(norm: f64, h: f64, pair: &MeasurePair) -> Result<f64> {
    if pair.sigma.is_empty() {
        return Err(Error::Undefined("theorem ratio (sigma is zero)"));
    }
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Undefined("theorem ratio (H is zero)"));
    }
    Ok(norm / h)
}

pub fn constants(pair: &MeasurePair, win: &TruncationWindow) -> ConstantsReport {
    let a2 = a2_constant(pair);
    let testing_sw = testing_constant(pair, Direction::SigmaToW, win);
    let testing_ws = testing_constant(pair, Direction::WToSigma, win);
    let norm = norm_estimate(pair, win);
    let h_const = h_constant(a2.value, testing_sw.value, testing_ws.value);
    let ratio = theorem_ratio(norm.norm, h_const, pair).ok();
    ConstantsReport { a2, testing_sw, testing_ws, norm, h_const, ratio, window: *win }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridConfig;
    use crate::measure::hilbert_truncated;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig, Strategy};

    const K: u32 = 12;

    fn pair(s: &[(u64, f64)], w: &[(u64, f64)]) -> MeasurePair {
        MeasurePair::new(
            AtomicMeasure::from_cells(K, s.iter().copied()).unwrap(),
            AtomicMeasure::from_cells(K, w.iter().copied()).unwrap(),
            GridConfig::default(),
        )
        .unwrap()
    }

    // cells 1365 and 2730 put the atoms a distance 1365/4096 ≈ 1/3 apart
    fn single_atoms() -> MeasurePair {
        pair(&[(1365, 1.0)], &[(2730, 1.0)])
    }

    #[test]
    fn single_atom_pair() {
        let p = single_atoms();
        let d = p.w.positions()[0] - p.sigma.positions()[0];
        let win = p.default_window();
        let t = testing_constant(&p, Direction::SigmaToW, &win);
        let n = norm_estimate(&p, &win);
        assert_relative_eq!(t.value, 1.0 / d, max_relative = 1e-14);
        assert_relative_eq!(n.norm, 1.0 / d, max_relative = 1e-14);
        assert_relative_eq!(n.routes.power, 1.0 / d, max_relative = 1e-12);
        assert_relative_eq!(
            testing_constant(&p, Direction::WToSigma, &win).value,
            1.0 / d,
            max_relative = 1e-14
        );
        let a2 = a2_constant(&p);
        assert!(a2.value >= 1.0);
        let r = constants(&p, &win);
        assert_relative_eq!(r.ratio.unwrap(), n.norm / (n.norm + a2.value.sqrt()));
        assert!(r.ratio.unwrap() <= 1.0);
    }

    #[test]
    fn unit_interval_product_is_one_for_unit_masses() {
        let p = single_atoms();
        let s = Span { left: 0.0, right: 1.0 };
        assert_eq!(poisson_span(&p.sigma, &s) * poisson_span(&p.w, &s), 1.0);
    }

    #[test]
    fn empty_measures() {
        let p = MeasurePair::new(
            AtomicMeasure::empty(K),
            AtomicMeasure::from_cells(K, [(7, 1.0)]).unwrap(),
            GridConfig::default(),
        )
        .unwrap();
        let win = TruncationWindow::new(1e-6, 2.0).unwrap();
        assert_eq!(a2_constant(&p).value, 0.0);
        assert_eq!(testing_constant(&p, Direction::SigmaToW, &win).value, 0.0);
        assert!(theorem_ratio(1.0, 1.0, &p).is_err());
        let q = p.swapped();
        assert_eq!(norm_estimate(&q, &win).norm, 0.0);
    }

    #[test]
    fn w_outside_every_sigma_interval_gives_zero_testing() {
        let p = pair(&[(100, 1.0)], &[(3000, 1.0)]);
        let win = p.default_window();
        let t = testing_constant(&p, Direction::SigmaToW, &win);
        assert!(t.value > 0.0);
        let q = pair(&[(100, 1.0)], &[]);
        assert_eq!(testing_constant(&q, Direction::SigmaToW, &win).value, 0.0);
    }

    #[test]
    fn scaling_laws() {
        let p = pair(&[(100, 1.0), (900, 0.5)], &[(400, 2.0), (3000, 0.3)]);
        let q = MeasurePair::new(p.sigma.scaled(3.0).unwrap(), p.w.clone(), p.cfg).unwrap();
        assert_relative_eq!(a2_constant(&q).value, 3.0 * a2_constant(&p).value, max_relative = 1e-12);
        let win = p.default_window();
        let r = MeasurePair::new(p.sigma.clone(), p.w.scaled(2.0).unwrap(), p.cfg).unwrap();
        let (t1, t2) = (
            testing_constant(&p, Direction::SigmaToW, &win).value,
            testing_constant(&r, Direction::SigmaToW, &win).value,
        );
        assert_relative_eq!(t2 * t2, 2.0 * t1 * t1, max_relative = 1e-12);
    }

    #[test]
    fn norm_is_reflection_invariant() {
        let p = pair(&[(100, 1.0), (900, 0.5), (2000, 1.5)], &[(400, 2.0), (3000, 0.3)]);
        let win = p.default_window();
        let a = norm_estimate(&p, &win).norm;
        let b = norm_estimate(&p.reflected(), &win).norm;
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    /// Brute force over every lattice interval on a coarse grid.
    fn testing_oracle(p: &MeasurePair, win: &TruncationWindow) -> f64 {
        let top = 1u64 << p.cfg.k;
        let mut best: f64 = 0.0;
        for lo in 0..top {
            for hi in lo + 1..=top {
                let inside = |k: u64| lo <= k && k < hi;
                let s_in: Vec<(u64, f64)> =
                    p.sigma.atoms().iter().filter(|a| inside(a.k)).map(|a| (a.k, a.mass)).collect();
                let m: f64 = s_in.iter().map(|x| x.1).sum();
                if m <= 0.0 {
                    continue;
                }
                let restricted = AtomicMeasure::from_cells(p.cfg.k, s_in).unwrap();
                let mut num = 0.0;
                for (a, &x) in p.w.atoms().iter().zip(p.w.positions()) {
                    if inside(a.k) {
                        num += a.mass * hilbert_truncated(&restricted, x, win).unwrap().powi(2);
                    }
                }
                best = best.max(num / m);
            }
        }
        best.sqrt()
    }

    #[test]
    fn testing_scan_matches_brute_force() {
        let cfg = GridConfig::new(6, 2, 0.3).unwrap();
        let mk = |cells: &[(u64, f64)]| AtomicMeasure::from_cells(6, cells.iter().copied()).unwrap();
        let p = MeasurePair::new(
            mk(&[(3, 1.0), (10, 0.4), (11, 2.0), (40, 0.7), (63, 1.1)]),
            mk(&[(4, 0.9), (12, 0.3), (30, 1.0), (41, 2.2), (62, 0.5)]),
            cfg,
        )
        .unwrap();
        let win = p.default_window();
        for dir in [Direction::SigmaToW, Direction::WToSigma] {
            let q = if dir == Direction::SigmaToW { p.clone() } else { p.swapped() };
            let scan = testing_constant(&p, dir, &win).value;
            assert_relative_eq!(scan, testing_oracle(&q, &win), max_relative = 1e-12);
        }
    }

    fn pair_strategy() -> impl Strategy<Value = MeasurePair> {
        prop::collection::btree_map(0u64..4096, (0.01f64..3.0, proptest::bool::ANY), 2..40).prop_map(
            |m| {
                let (s, w): (Vec<_>, Vec<_>) = m.into_iter().partition(|(_, (_, side))| *side);
                MeasurePair::new(
                    AtomicMeasure::from_cells(K, s.into_iter().map(|(k, (m, _))| (k, m))).unwrap(),
                    AtomicMeasure::from_cells(K, w.into_iter().map(|(k, (m, _))| (k, m))).unwrap(),
                    GridConfig::default(),
                )
                .unwrap()
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn testing_never_exceeds_norm(p in pair_strategy()) {
            let win = p.default_window();
            let n = norm_estimate(&p, &win).norm;
            for dir in [Direction::SigmaToW, Direction::WToSigma] {
                let t = testing_constant(&p, dir, &win).value;
                prop_assert!(t <= n * (1.0 + 1e-9), "{t} > {n}");
            }
        }

        #[test]
        fn norm_routes_agree(p in pair_strategy()) {
            let win = p.default_window();
            let n = norm_estimate(&p, &win);
            prop_assert!(n.routes.relative_gap() < 1e-6, "{:?}", n.routes);
        }
    }
}
