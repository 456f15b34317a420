//! Deterministic generators for measure pairs.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::measure::{AtomicMeasure, MeasurePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    UniformRandom,
    Cantor,
    Lattice,
    AdversarialSpike,
}

impl std::str::FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-random" => Ok(Kind::UniformRandom),
            "cantor" => Ok(Kind::Cantor),
            "lattice" => Ok(Kind::Lattice),
            "adversarial-spike" => Ok(Kind::AdversarialSpike),
            _ => Err(Error::InvalidMeasure(format!("unknown generator kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Kind::UniformRandom => "uniform-random",
            Kind::Cantor => "cantor",
            Kind::Lattice => "lattice",
            Kind::AdversarialSpike => "adversarial-spike",
        })
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n_sigma + n_w` distinct random cells, masses log-uniform in `[1/10, 10]`.
pub fn uniform_random(cfg: GridConfig, n_sigma: usize, n_w: usize, seed: u64) -> Result<MeasurePair> {
    cfg.validate()?;
    let cells = 1usize << cfg.k;
    if n_sigma + n_w > cells {
        return Err(Error::InvalidMeasure(format!(
            "{} atoms do not fit in {cells} cells",
            n_sigma + n_w
        )));
    }
    let mut rng = rng(seed);
    let picked = sample(&mut rng, cells, n_sigma + n_w).into_vec();
    let mass = |rng: &mut ChaCha8Rng| 10f64.powf(rng.gen_range(-1.0..1.0));
    let s: Vec<(u64, f64)> = picked[..n_sigma].iter().map(|&k| (k as u64, mass(&mut rng))).collect();
    let w: Vec<(u64, f64)> = picked[n_sigma..].iter().map(|&k| (k as u64, mass(&mut rng))).collect();
    MeasurePair::new(
        AtomicMeasure::from_cells(cfg.k, s)?,
        AtomicMeasure::from_cells(cfg.k, w)?,
        cfg,
    )
}

/// σ at cells `⌊(i + 1/4) 2^K / n⌋`, w at `⌊(i + 3/4) 2^K / n⌋`, all masses `1/n`.
pub fn lattice(cfg: GridConfig, n: usize) -> Result<MeasurePair> {
    cfg.validate()?;
    let top = 1u64 << cfg.k;
    if n == 0 || 2 * n as u64 > top {
        return Err(Error::InvalidMeasure(format!("lattice size {n} does not fit the grid")));
    }
    let at = |num: u64| num * top / (4 * n as u64);
    let m = 1.0 / n as f64;
    let s = (0..n as u64).map(|i| (at(4 * i + 1), m));
    let w = (0..n as u64).map(|i| (at(4 * i + 3), m));
    MeasurePair::new(AtomicMeasure::from_cells(cfg.k, s)?, AtomicMeasure::from_cells(cfg.k, w)?, cfg)
}

/// Base-4 Cantor construction keeping the outer quarters.
///
/// After `d` steps there are `2^d` retained cells of length `4^-d`; σ puts mass
/// `2^-d` at the center of each. The middle half removed at step `ℓ` carries a
/// w-atom of mass `2·4^-ℓ` (its length) at its center.
pub fn cantor(cfg: GridConfig, d: u32) -> Result<MeasurePair> {
    cfg.validate()?;
    if d == 0 || 2 * d + 1 > cfg.k {
        return Err(Error::InvalidMeasure(format!(
            "cantor depth {d} needs 1 <= 2d + 1 <= K = {}",
            cfg.k
        )));
    }
    let k = cfg.k;
    // left endpoints in units of 2^-K
    let mut retained = vec![0u64];
    let mut w = Vec::new();
    for level in 1..=d {
        let quarter = 1u64 << (k - 2 * level);
        let mut next = Vec::with_capacity(retained.len() * 2);
        for &b in &retained {
            next.push(b);
            next.push(b + 3 * quarter);
            w.push((b + 2 * quarter, 2.0 * (-(2.0 * level as f64)).exp2()));
        }
        retained = next;
    }
    let half_cell = 1u64 << (k - 2 * d - 1);
    let m = (-(d as f64)).exp2();
    let s = retained.iter().map(|&b| (b + half_cell, m));
    MeasurePair::new(AtomicMeasure::from_cells(k, s)?, AtomicMeasure::from_cells(k, w)?, cfg)
}

/// Random background atoms plus heavy w-spikes in the cells next to σ-atoms.
pub fn adversarial_spike(cfg: GridConfig, n: usize, spikes: usize, seed: u64) -> Result<MeasurePair> {
    let base = uniform_random(cfg, n, n, seed)?;
    let mut rng = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let taken: BTreeSet<u64> =
        base.sigma.atoms().iter().chain(base.w.atoms()).map(|a| a.k).collect();
    let top = 1u64 << cfg.k;
    let mut extra = Vec::new();
    let mut tries = 0;
    while extra.len() < spikes && tries < 100 * (spikes + 1) {
        tries += 1;
        let a = base.sigma.atoms()[rng.gen_range(0..base.sigma.len())];
        let k = if rng.gen_bool(0.5) { a.k.wrapping_sub(1) } else { a.k + 1 };
        if k < top && !taken.contains(&k) && !extra.iter().any(|&(e, _)| e == k) {
            extra.push((k, 10f64.powf(rng.gen_range(1.5..3.0))));
        }
    }
    let spiked = AtomicMeasure::from_cells(cfg.k, extra)?;
    MeasurePair::new(base.sigma.clone(), base.w.merged(&spiked)?, cfg)
}

/// Seeded standard-normal-like vector (sum of uniforms).
pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0)).collect()
}
