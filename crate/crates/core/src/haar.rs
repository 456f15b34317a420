//! Weighted Haar systems: expansion, reconstruction, martingale differences
//! and energy.
//!
//! The Haar function of a nondegenerate interval `J` (both children carry
//! mass) is
//! `h_J = sqrt(m₋ m₊ / m) (1_{J₊}/m₊ − 1_{J₋}/m₋)`, positive on the right child.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{DyadicInterval, GridConfig};
use crate::measure::AtomicMeasure;
use crate::sum::{csum, Accumulator};

#[derive(Debug, Clone, PartialEq)]
pub struct HaarNode {
    pub interval: DyadicInterval,
    /// Atom indices in the interval; `split` is the first index of the right child.
    pub range: Range<usize>,
    pub split: usize,
    pub mass_left: f64,
    pub mass_right: f64,
    /// Value of `h` on the left child (negative).
    pub left_value: f64,
    /// Value of `h` on the right child (positive).
    pub right_value: f64,
}

impl HaarNode {
    fn new(interval: DyadicInterval, range: Range<usize>, split: usize, nu: &AtomicMeasure) -> Self {
        let atoms = nu.atoms();
        let ml = csum(atoms[range.start..split].iter().map(|a| a.mass));
        let mr = csum(atoms[split..range.end].iter().map(|a| a.mass));
        let m = ml + mr;
        Self {
            interval,
            range,
            split,
            mass_left: ml,
            mass_right: mr,
            left_value: -(mr / (m * ml)).sqrt(),
            right_value: (ml / (m * mr)).sqrt(),
        }
    }

    /// Value of `h` on the child of this interval containing `j`.
    pub fn value_toward(&self, j: &DyadicInterval) -> f64 {
        if j.left() < self.interval.center() {
            self.left_value
        } else {
            self.right_value
        }
    }

    /// Value of `h` at atom `idx` (zero outside the interval).
    pub fn value_at(&self, idx: usize) -> f64 {
        if idx < self.range.start || idx >= self.range.end {
            0.0
        } else if idx < self.split {
            self.left_value
        } else {
            self.right_value
        }
    }

    /// `⟨v, h⟩_ν` for a vector over the atoms of ν.
    pub fn pair_with(&self, nu: &AtomicMeasure, v: &[f64]) -> f64 {
        let atoms = nu.atoms();
        let mut l = Accumulator::new();
        for i in self.range.start..self.split {
            l.add(atoms[i].mass * v[i]);
        }
        let mut r = Accumulator::new();
        for i in self.split..self.range.end {
            r.add(atoms[i].mass * v[i]);
        }
        self.left_value * l.value() + self.right_value * r.value()
    }
}

/// All nondegenerate intervals of a measure, in (scale, index) order.
#[derive(Debug, Clone)]
pub struct HaarSystem {
    nodes: Vec<HaarNode>,
    index: BTreeMap<DyadicInterval, usize>,
}

impl HaarSystem {
    pub fn new(nu: &AtomicMeasure) -> Self {
        let mut nodes = Vec::new();
        let mut stack = vec![(DyadicInterval::unit(), 0..nu.len())];
        while let Some((i, r)) = stack.pop() {
            if r.len() < 2 || i.n >= nu.depth() {
                continue;
            }
            let (lc, rc) = i.halves();
            let (lo, hi) = rc.cell_range(nu.depth());
            let split = r.start + nu.atoms()[r.clone()].partition_point(|a| a.k < lo);
            debug_assert!(nu.atoms()[r.clone()].iter().all(|a| a.k < hi));
            if split > r.start && split < r.end {
                nodes.push(HaarNode::new(i, r.clone(), split, nu));
            }
            stack.push((lc, r.start..split));
            stack.push((rc, split..r.end));
        }
        nodes.sort_by_key(|n| n.interval);
        let index = nodes.iter().enumerate().map(|(k, n)| (n.interval, k)).collect();
        Self { nodes, index }
    }

    pub fn nodes(&self) -> &[HaarNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, i: &DyadicInterval) -> Option<&HaarNode> {
        self.index.get(i).map(|&k| &self.nodes[k])
    }

    pub fn position(&self, i: &DyadicInterval) -> Option<usize> {
        self.index.get(i).copied()
    }

    pub fn is_nondegenerate(&self, i: &DyadicInterval) -> bool {
        self.index.contains_key(i)
    }

    pub fn intervals(&self) -> impl Iterator<Item = DyadicInterval> + '_ {
        self.nodes.iter().map(|n| n.interval)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedFunction {
    pub values: Vec<f64>,
}

impl WeightedFunction {
    pub fn new(nu: &AtomicMeasure, values: Vec<f64>) -> Result<Self> {
        if values.len() != nu.len() {
            return Err(Error::LengthMismatch { expected: nu.len(), got: values.len() });
        }
        Ok(Self { values })
    }

    pub fn zeros(nu: &AtomicMeasure) -> Self {
        Self { values: vec![0.0; nu.len()] }
    }

    pub fn constant(nu: &AtomicMeasure, c: f64) -> Self {
        Self { values: vec![c; nu.len()] }
    }

    pub fn identity(nu: &AtomicMeasure) -> Self {
        Self { values: nu.positions().to_vec() }
    }
}

/// `⟨f, g⟩_ν`.
pub fn inner(nu: &AtomicMeasure, f: &[f64], g: &[f64]) -> f64 {
    csum(nu.atoms().iter().zip(f.iter().zip(g)).map(|(a, (x, y))| a.mass * x * y))
}

pub fn norm_sq(nu: &AtomicMeasure, f: &[f64]) -> f64 {
    inner(nu, f, f)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct HaarCoefficients {
    pub mean: f64,
    pub coeffs: BTreeMap<DyadicInterval, f64>,
}

impl HaarCoefficients {
    pub fn get(&self, i: &DyadicInterval) -> f64 {
        self.coeffs.get(i).copied().unwrap_or(0.0)
    }

    /// `Σ ĉ(I)²`, the squared norm of the mean-zero part.
    pub fn energy(&self) -> f64 {
        csum(self.coeffs.values().map(|c| c * c))
    }

    pub fn norm_sq(&self, total_mass: f64) -> f64 {
        self.mean * self.mean * total_mass + self.energy()
    }

    /// Coefficients as a dense vector in the order of `sys`.
    pub fn dense(&self, sys: &HaarSystem) -> Vec<f64> {
        sys.intervals().map(|i| self.get(&i)).collect()
    }

    pub fn from_dense(sys: &HaarSystem, v: &[f64]) -> Self {
        let coeffs =
            sys.intervals().zip(v).filter(|(_, &c)| c != 0.0).map(|(i, &c)| (i, c)).collect();
        Self { mean: 0.0, coeffs }
    }

    /// Keeps the coefficients on `intervals` and drops the mean.
    pub fn project(&self, intervals: &BTreeSet<DyadicInterval>) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .filter(|(i, _)| intervals.contains(i))
            .map(|(&i, &c)| (i, c))
            .collect();
        Self { mean: 0.0, coeffs }
    }
}

/// `h^ν_J` as a vector over the atoms of ν.
pub fn haar_function(nu: &AtomicMeasure, j: &DyadicInterval) -> Result<WeightedFunction> {
    let r = nu.range(j);
    if j.n >= nu.depth() {
        return Err(Error::Degenerate(*j));
    }
    let (_, rc) = j.halves();
    let split = r.start + nu.atoms()[r.clone()].partition_point(|a| a.k < rc.cell_range(nu.depth()).0);
    if split == r.start || split == r.end {
        return Err(Error::Degenerate(*j));
    }
    let node = HaarNode::new(*j, r, split, nu);
    Ok(WeightedFunction { values: (0..nu.len()).map(|i| node.value_at(i)).collect() })
}

pub fn expand(f: &WeightedFunction, nu: &AtomicMeasure, sys: &HaarSystem) -> Result<HaarCoefficients> {
    if f.values.len() != nu.len() {
        return Err(Error::LengthMismatch { expected: nu.len(), got: f.values.len() });
    }
    let total = nu.total_mass();
    let mean = if total > 0.0 { inner(nu, &f.values, &vec![1.0; nu.len()]) / total } else { 0.0 };
    let coeffs = sys.nodes().iter().map(|n| (n.interval, n.pair_with(nu, &f.values))).collect();
    Ok(HaarCoefficients { mean, coeffs })
}

pub fn reconstruct(c: &HaarCoefficients, nu: &AtomicMeasure, sys: &HaarSystem) -> WeightedFunction {
    let mut acc = vec![Accumulator::new(); nu.len()];
    for a in acc.iter_mut() {
        a.add(c.mean);
    }
    for (i, &v) in &c.coeffs {
        if let Some(n) = sys.get(i) {
            for (k, a) in acc.iter_mut().enumerate().take(n.range.end).skip(n.range.start) {
                a.add(v * n.value_at(k));
            }
        }
    }
    WeightedFunction { values: acc.iter().map(Accumulator::value).collect() }
}

/// `E^ν_I f`.
pub fn average(f: &WeightedFunction, nu: &AtomicMeasure, i: &DyadicInterval) -> Result<f64> {
    let r = nu.range(i);
    let m = csum(nu.atoms()[r.clone()].iter().map(|a| a.mass));
    if m <= 0.0 {
        return Err(Error::ZeroMass(*i));
    }
    Ok(csum(nu.atoms()[r.clone()].iter().zip(&f.values[r]).map(|(a, v)| a.mass * v)) / m)
}

/// `Δ^ν_I f = Σ_c (E_c f) 1_c − (E_I f) 1_I`.
pub fn mart_diff(f: &WeightedFunction, nu: &AtomicMeasure, i: &DyadicInterval) -> WeightedFunction {
    let mut out = vec![0.0; nu.len()];
    let Ok(parent) = average(f, nu, i) else {
        return WeightedFunction { values: out };
    };
    if i.n < nu.depth() {
        let (l, r) = i.halves();
        for c in [l, r] {
            if let Ok(avg) = average(f, nu, &c) {
                for v in &mut out[nu.range(&c)] {
                    *v = avg - parent;
                }
            }
        }
    }
    WeightedFunction { values: out }
}

/// `⟨x, h^ν_J⟩_ν`, zero for degenerate `J`.
pub fn coefficient_x(nu: &AtomicMeasure, sys: &HaarSystem, j: &DyadicInterval) -> f64 {
    sys.get(j).map(|n| n.pair_with(nu, nu.positions())).unwrap_or(0.0)
}

/// `E(ν, I)²`: the variance of position under ν restricted to `I`, over `|I|²`.
pub fn energy_sq(nu: &AtomicMeasure, i: &DyadicInterval) -> f64 {
    let r = nu.range(i);
    let atoms = &nu.atoms()[r.clone()];
    let xs = &nu.positions()[r];
    let m = csum(atoms.iter().map(|a| a.mass));
    if m <= 0.0 {
        return 0.0;
    }
    let mean = csum(atoms.iter().zip(xs).map(|(a, x)| a.mass * x)) / m;
    let len = i.len();
    csum(atoms.iter().zip(xs).map(|(a, x)| a.mass * ((x - mean) / len).powi(2))) / m
}

pub fn energy(nu: &AtomicMeasure, i: &DyadicInterval) -> f64 {
    energy_sq(nu, i).sqrt()
}

/// `ε_J = Σ_{J ⋐ I ⊆ I₀} f̂(I) h^σ_I(I_J)`.
pub fn epsilon_j(
    f: &HaarCoefficients,
    sys: &HaarSystem,
    j: &DyadicInterval,
    i0: &DyadicInterval,
    cfg: &GridConfig,
) -> f64 {
    csum(j.ancestors().filter(|i| i0.contains(i) && cfg.deeply_contained(j, i)).filter_map(|i| {
        let c = f.coeffs.get(&i)?;
        Some(c * sys.get(&i)?.value_toward(j))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_measure(rng: &mut ChaCha8Rng, depth: u32, max_atoms: usize) -> AtomicMeasure {
        let n = rng.gen_range(1..=max_atoms.min(1 << depth));
        let cells: BTreeSet<u64> = (0..n).map(|_| rng.gen_range(0..(1u64 << depth))).collect();
        AtomicMeasure::from_cells(depth, cells.into_iter().map(|k| (k, rng.gen_range(0.01..2.0))))
            .unwrap()
    }

    fn two_atoms() -> AtomicMeasure {
        // cells adjacent to 1/4 and 3/4 so positions are 1/4 + half cell, 3/4 + half cell
        AtomicMeasure::from_cells(12, [(1024, 1.0), (3072, 1.0)]).unwrap()
    }

    #[test]
    fn two_atom_examples() {
        let nu = two_atoms();
        let sys = HaarSystem::new(&nu);
        assert_eq!(sys.len(), 1);
        let h = haar_function(&nu, &DyadicInterval::unit()).unwrap();
        assert_relative_eq!(h.values[0], -(0.5f64).sqrt(), max_relative = 1e-15);
        assert_relative_eq!(h.values[1], (0.5f64).sqrt(), max_relative = 1e-15);
        let cx = coefficient_x(&nu, &sys, &DyadicInterval::unit());
        assert_relative_eq!(cx, 2f64.sqrt() / 4.0, max_relative = 1e-14);
        assert_relative_eq!(energy(&nu, &DyadicInterval::unit()), 0.25, max_relative = 1e-14);
        assert!(haar_function(&nu, &DyadicInterval::new(1, 0).unwrap()).is_err());
        assert_eq!(coefficient_x(&nu, &sys, &DyadicInterval::new(1, 0).unwrap()), 0.0);
    }

    #[test]
    fn reflection_flips_coefficient_x_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nu = random_measure(&mut rng, 8, 20);
        let mu = nu.reflected();
        let (s, t) = (HaarSystem::new(&nu), HaarSystem::new(&mu));
        for n in s.nodes() {
            let i = n.interval;
            let mirror = DyadicInterval::new(i.n, (1u64 << i.n) - 1 - i.j).unwrap();
            let a = coefficient_x(&nu, &s, &i);
            let b = coefficient_x(&mu, &t, &mirror);
            assert_relative_eq!(a, b, max_relative = 1e-10);
            // h on the mirror is minus the mirrored h, and x maps to 1 - x
            let ha = haar_function(&nu, &i).unwrap();
            let hb = haar_function(&mu, &mirror).unwrap();
            let m = nu.len();
            for k in n.range.clone() {
                assert_relative_eq!(ha.values[k], -hb.values[m - 1 - k], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn single_atom_has_no_energy() {
        let nu = AtomicMeasure::from_cells(12, [(77, 3.0)]).unwrap();
        assert_eq!(energy(&nu, &DyadicInterval::unit()), 0.0);
        assert!(HaarSystem::new(&nu).is_empty());
    }

    #[test]
    fn nondegenerate_count_is_atoms_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let nu = random_measure(&mut rng, 12, 64);
            assert_eq!(HaarSystem::new(&nu).len(), nu.len() - 1);
        }
    }

    #[test]
    fn orthonormal_on_shallow_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let nu = random_measure(&mut rng, 6, 40);
            let sys = HaarSystem::new(&nu);
            let hs: Vec<_> =
                sys.intervals().map(|i| haar_function(&nu, &i).unwrap().values).collect();
            for (a, ha) in hs.iter().enumerate() {
                assert!(inner(&nu, ha, &vec![1.0; nu.len()]).abs() < 1e-12);
                for (b, hb) in hs.iter().enumerate() {
                    let expected = if a == b { 1.0 } else { 0.0 };
                    assert!((inner(&nu, ha, hb) - expected).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn expand_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let nu = random_measure(&mut rng, 12, 30);
        let sys = HaarSystem::new(&nu);
        let c = expand(&WeightedFunction::constant(&nu, 2.5), &nu, &sys).unwrap();
        assert_relative_eq!(c.mean, 2.5, max_relative = 1e-14);
        assert!(c.coeffs.values().all(|v| v.abs() < 1e-12));
        let j = sys.nodes()[sys.len() / 2].interval;
        let c = expand(&haar_function(&nu, &j).unwrap(), &nu, &sys).unwrap();
        for (i, v) in &c.coeffs {
            let expected = if *i == j { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn expand_matches_dense_oracle() {
        let nu = AtomicMeasure::from_cells(
            12,
            [(3, 0.5), (700, 1.5), (701, 0.25), (2000, 1.0), (2100, 0.75), (3000, 2.0), (3500, 0.1), (4095, 0.3)],
        )
        .unwrap();
        let sys = HaarSystem::new(&nu);
        let f: Vec<f64> = (0..8).map(|i| (i as f64 * 1.7).sin()).collect();
        let c = expand(&WeightedFunction { values: f.clone() }, &nu, &sys).unwrap();
        for j in sys.intervals() {
            let h = haar_function(&nu, &j).unwrap();
            let direct: f64 =
                (0..8).map(|k| nu.atoms()[k].mass * f[k] * h.values[k]).sum();
            assert_relative_eq!(c.get(&j), direct, max_relative = 1e-12, epsilon = 1e-14);
        }
        let back = reconstruct(&c, &nu, &sys);
        for (a, b) in back.values.iter().zip(&f) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn average_and_mart_diff() {
        let nu = AtomicMeasure::from_cells(12, [(10, 1.0), (20, 3.0), (3000, 1.0)]).unwrap();
        let f = WeightedFunction { values: vec![1.0, 2.0, 5.0] };
        let unit = DyadicInterval::unit();
        assert_relative_eq!(average(&f, &nu, &unit).unwrap(), 12.0 / 5.0);
        assert!(average(&f, &nu, &DyadicInterval::new(2, 1).unwrap()).is_err());
        let d = mart_diff(&f, &nu, &unit);
        assert_relative_eq!(d.values[0], 7.0 / 4.0 - 2.4, max_relative = 1e-14);
        assert_relative_eq!(d.values[2], 5.0 - 2.4, max_relative = 1e-14);
        assert!(inner(&nu, &d.values, &[1.0; 3]).abs() < 1e-14);
        let c = mart_diff(&WeightedFunction::constant(&nu, 4.0), &nu, &unit);
        assert!(c.values.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn mart_diff_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let nu = random_measure(&mut rng, 12, 50);
        let f = WeightedFunction { values: (0..nu.len()).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let mean = average(&f, &nu, &DyadicInterval::unit()).unwrap();
        for (k, a) in nu.atoms().iter().enumerate() {
            let cell = DyadicInterval::new(12, a.k).unwrap();
            let mut total = mean;
            for i in cell.ancestors() {
                total += mart_diff(&f, &nu, &i).values[k];
            }
            assert_relative_eq!(total, f.values[k], max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn mart_diff_on_child_is_coefficient_times_haar_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nu = random_measure(&mut rng, 12, 40);
        let sys = HaarSystem::new(&nu);
        let f = WeightedFunction { values: (0..nu.len()).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let c = expand(&f, &nu, &sys).unwrap();
        for n in sys.nodes() {
            let d = mart_diff(&f, &nu, &n.interval);
            let (l, r) = n.interval.halves();
            for (child, val, m) in [(l, n.left_value, n.mass_left), (r, n.right_value, n.mass_right)] {
                let k = nu.range(&child).start;
                let expected = c.get(&n.interval) * val;
                assert_relative_eq!(d.values[k], expected, max_relative = 1e-9, epsilon = 1e-12);
                assert!(expected.abs() <= c.get(&n.interval).abs() / m.sqrt() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn epsilon_examples() {
        let cfg = GridConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nu = random_measure(&mut rng, 12, 60);
        let sys = HaarSystem::new(&nu);
        let unit = DyadicInterval::unit();
        let j = cfg.intervals().find(|j| j.n >= 8 && cfg.is_good(j)).unwrap();
        assert_eq!(epsilon_j(&HaarCoefficients::default(), &sys, &j, &unit, &cfg), 0.0);
        let outer = j.ancestors().find(|i| sys.is_nondegenerate(i) && cfg.deeply_contained(&j, i));
        if let Some(i) = outer {
            let mut c = HaarCoefficients::default();
            c.coeffs.insert(i, 0.7);
            let e = epsilon_j(&c, &sys, &j, &unit, &cfg);
            assert_relative_eq!(e, 0.7 * sys.get(&i).unwrap().value_toward(&j));
        }
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let nu = random_measure(&mut rng, 12, 30);
        let sys = HaarSystem::new(&nu);
        let f = WeightedFunction { values: (0..nu.len()).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let c = expand(&f, &nu, &sys).unwrap();
        assert!(c.project(&BTreeSet::new()).coeffs.is_empty());
        let all: BTreeSet<_> = sys.intervals().collect();
        assert_eq!(c.project(&all).coeffs, c.coeffs);
        let half: BTreeSet<_> = sys.intervals().step_by(2).collect();
        let rest: BTreeSet<_> = all.difference(&half).copied().collect();
        let p = c.project(&half);
        assert_eq!(p.project(&half), p);
        assert_relative_eq!(
            p.energy() + c.project(&rest).energy(),
            c.energy(),
            max_relative = 1e-12
        );
    }

    fn measure_strategy() -> impl Strategy<Value = AtomicMeasure> {
        prop::collection::btree_map(0u64..4096, 0.01f64..5.0, 1..64)
            .prop_map(|m| AtomicMeasure::from_cells(12, m).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn parseval_and_round_trip(nu in measure_strategy(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = WeightedFunction { values: (0..nu.len()).map(|_| rng.gen_range(-3.0..3.0)).collect() };
            let sys = HaarSystem::new(&nu);
            let c = expand(&f, &nu, &sys).unwrap();
            let lhs = norm_sq(&nu, &f.values);
            prop_assert!((c.norm_sq(nu.total_mass()) - lhs).abs() <= 1e-10 * lhs.max(1e-300));
            let back = reconstruct(&c, &nu, &sys);
            let err: f64 = back.values.iter().zip(&f.values).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(err.sqrt() <= 1e-10 * lhs.sqrt().max(1e-300) * 10.0);
        }

        #[test]
        fn energy_two_formulas_agree(nu in measure_strategy(), n in 0u32..8, j in any::<u64>()) {
            let i = DyadicInterval::new(n, j % (1u64 << n)).unwrap();
            let sys = HaarSystem::new(&nu);
            let variance = energy_sq(&nu, &i) * nu.mass(&i) * i.len() * i.len();
            let haar = csum(sys.intervals().filter(|k| i.contains(k)).map(|k| coefficient_x(&nu, &sys, &k).powi(2)));
            prop_assert!((variance - haar).abs() <= 1e-10 * nu.mass(&i) * i.len() * i.len());
        }

        #[test]
        fn two_overlap_projection_bound(nu in measure_strategy(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = HaarSystem::new(&nu);
            let f = WeightedFunction { values: (0..nu.len()).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let c = expand(&f, &nu, &sys).unwrap();
            let parts = 5;
            let mut sets = vec![BTreeSet::new(); parts];
            for i in sys.intervals() {
                let a = rng.gen_range(0..parts);
                let b = rng.gen_range(0..parts);
                sets[a].insert(i);
                sets[b].insert(i);
            }
            let total = csum(sets.iter().map(|s| c.project(s).energy()));
            prop_assert!(total <= 2.0 * c.energy() * (1.0 + 1e-12) + 1e-300);
        }
    }
}
