//! Dyadic intervals of `[0, 1)`, goodness and deep containment.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported depth. Keeps lattice indices well inside `u64` and every
/// endpoint exactly representable as an `f64`.
pub const MAX_DEPTH: u32 = 40;

/// The half-open interval `[j 2^-n, (j+1) 2^-n)`.
///
/// Ordering is lexicographic in `(n, j)`: coarser scales first, then left to
/// right. Every minimality scan in the crate relies on it for tie-breaking.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicInterval {
    pub n: u32,
    pub j: u64,
}

impl fmt::Debug for DyadicInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "I({},{})", self.n, self.j)
    }
}

impl fmt::Display for DyadicInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}/2^{}, {}/2^{})", self.j, self.n, self.j + 1, self.n)
    }
}

impl DyadicInterval {
    pub fn new(n: u32, j: u64) -> Result<Self> {
        if n > MAX_DEPTH || j >= (1u64 << n) {
            return Err(Error::InvalidInterval { n, j });
        }
        Ok(Self { n, j })
    }

    /// `[0, 1)`.
    pub const fn unit() -> Self {
        Self { n: 0, j: 0 }
    }

    pub fn len(&self) -> f64 {
        (-(self.n as f64)).exp2()
    }

    pub fn left(&self) -> f64 {
        self.j as f64 * self.len()
    }

    pub fn right(&self) -> f64 {
        (self.j + 1) as f64 * self.len()
    }

    pub fn center(&self) -> f64 {
        (self.j as f64 + 0.5) * self.len()
    }

    /// Left and right children, with no depth check.
    pub fn halves(&self) -> (Self, Self) {
        let n = self.n + 1;
        (Self { n, j: 2 * self.j }, Self { n, j: 2 * self.j + 1 })
    }

    pub fn parent(&self) -> Option<Self> {
        (self.n > 0).then(|| Self { n: self.n - 1, j: self.j >> 1 })
    }

    /// The ancestor at scale `m <= n`.
    pub fn ancestor_at(&self, m: u32) -> Self {
        debug_assert!(m <= self.n);
        Self { n: m, j: self.j >> (self.n - m) }
    }

    /// Strict ancestors, nearest first.
    pub fn ancestors(&self) -> impl Iterator<Item = DyadicInterval> + '_ {
        (0..self.n).rev().map(move |m| self.ancestor_at(m))
    }

    /// `other ⊆ self`.
    pub fn contains(&self, other: &Self) -> bool {
        other.n >= self.n && (other.j >> (other.n - self.n)) == self.j
    }

    /// `other ⊊ self`.
    pub fn strictly_contains(&self, other: &Self) -> bool {
        other.n > self.n && self.contains(other)
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        !self.contains(other) && !other.contains(self)
    }

    /// Index range `[lo, hi)` of the depth-`depth` cells inside `self`.
    pub fn cell_range(&self, depth: u32) -> (u64, u64) {
        debug_assert!(depth >= self.n);
        let s = depth - self.n;
        (self.j << s, (self.j + 1) << s)
    }

    /// The child of `self` containing `inner`, for `inner ⊊ self`.
    pub fn child_containing(&self, inner: &Self) -> Result<Self> {
        if !self.strictly_contains(inner) {
            return Err(Error::NotContained { inner: *inner, outer: *self });
        }
        Ok(inner.ancestor_at(self.n + 1))
    }

    /// Distance from `self` to the boundary of an enclosing interval `outer`,
    /// counted in cells of length `|self|`.
    fn boundary_gap_cells(&self, outer: &Self) -> u64 {
        let s = self.n - outer.n;
        let p = self.j - (outer.j << s);
        p.min((1u64 << s) - 1 - p)
    }

    /// Distance from `self` to the boundary of an enclosing interval `outer`.
    pub fn dist_to_boundary(&self, outer: &Self) -> f64 {
        debug_assert!(outer.contains(self));
        self.boundary_gap_cells(outer) as f64 * self.len()
    }
}

/// Depth, goodness separation exponent and goodness exponent of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(rename = "K")]
    pub k: u32,
    pub r: u32,
    pub eps: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { k: 12, r: 5, eps: 0.45 }
    }
}

impl GridConfig {
    pub fn new(k: u32, r: u32, eps: f64) -> Result<Self> {
        let cfg = Self { k, r, eps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(Error::InvalidGrid(format!("r must be >= 1, got {}", self.r)));
        }
        if self.k < self.r + 2 {
            return Err(Error::InvalidGrid(format!(
                "K must be >= r + 2, got K={} r={}",
                self.k, self.r
            )));
        }
        if self.k > MAX_DEPTH - 1 {
            return Err(Error::InvalidGrid(format!("K must be <= {}", MAX_DEPTH - 1)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::InvalidGrid(format!("eps must lie in (0, 1/2), got {}", self.eps)));
        }
        Ok(())
    }

    pub fn in_grid(&self, i: &DyadicInterval) -> bool {
        i.n <= self.k && i.j < (1u64 << i.n)
    }

    /// Children of `i`; fails at the finest scale.
    pub fn children(&self, i: &DyadicInterval) -> Result<(DyadicInterval, DyadicInterval)> {
        if i.n >= self.k {
            return Err(Error::ScaleOverflow(*i));
        }
        Ok(i.halves())
    }

    /// Separation of `inner` from the boundary of a single enclosing interval:
    /// `dist(inner, ∂outer) >= |inner|^eps |outer|^(1-eps)`.
    pub fn separated_from(&self, inner: &DyadicInterval, outer: &DyadicInterval) -> bool {
        debug_assert!(outer.contains(inner));
        let s = (inner.n - outer.n) as f64;
        inner.boundary_gap_cells(outer) as f64 >= (s * (1.0 - self.eps)).exp2()
    }

    /// `J` is good when it is separated from the boundary of every strict
    /// dyadic superinterval `Ĩ ⊆ [0,1)` with `|Ĩ| >= 2^(r-1) |J|`.
    pub fn is_good(&self, j: &DyadicInterval) -> bool {
        let gap = self.r - 1;
        j.ancestors()
            .filter(|a| j.n - a.n >= gap)
            .all(|a| self.separated_from(j, &a))
    }

    /// `J ⊆ I` with `2^r |J| <= |I|`, ignoring goodness.
    pub fn scale_contained(&self, j: &DyadicInterval, i: &DyadicInterval) -> bool {
        i.contains(j) && j.n >= i.n + self.r
    }

    /// `J ⋐ I`: `J ⊆ I`, `2^r |J| <= |I|` and `J` good.
    pub fn deeply_contained(&self, j: &DyadicInterval, i: &DyadicInterval) -> bool {
        self.scale_contained(j, i) && self.is_good(j)
    }

    /// Every interval of the grid, coarse to fine.
    pub fn intervals(&self) -> impl Iterator<Item = DyadicInterval> {
        let k = self.k;
        (0..=k).flat_map(|n| (0..(1u64 << n)).map(move |j| DyadicInterval { n, j }))
    }
}
