//! The seeded 50-instance calibration and acceptance corpus.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gen::{self, Kind};
use crate::grid::GridConfig;
use crate::measure::MeasurePair;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub name: String,
    pub kind: Kind,
    /// Atoms per measure (uniform, spikes), lattice size, or Cantor depth.
    pub size: usize,
    #[serde(default)]
    pub spikes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Exchange the roles of σ and w after generation.
    #[serde(default)]
    pub swapped: bool,
}

impl InstanceSpec {
    pub fn build(&self, cfg: GridConfig) -> Result<MeasurePair> {
        let pair = match self.kind {
            Kind::UniformRandom => gen::uniform_random(cfg, self.size, self.size, self.seed)?,
            Kind::Lattice => gen::lattice(cfg, self.size)?,
            Kind::Cantor => gen::cantor(cfg, self.size as u32)?,
            Kind::AdversarialSpike => gen::adversarial_spike(cfg, self.size, self.spikes, self.seed)?,
        };
        Ok(if self.swapped { pair.swapped() } else { pair })
    }
}

fn spec(kind: Kind, size: usize, spikes: usize, seed: u64, swapped: bool) -> InstanceSpec {
    let tag = if swapped { "-swapped" } else { "" };
    let name = match kind {
        Kind::UniformRandom => format!("uniform-{size}-s{seed}"),
        Kind::Lattice => format!("lattice-{size}"),
        Kind::Cantor => format!("cantor-d{size}{tag}"),
        Kind::AdversarialSpike => format!("spike-{size}x{spikes}-s{seed}"),
    };
    InstanceSpec { name, kind, size, spikes, seed, swapped }
}

/// 20 uniform (8 to 64 atoms), 10 lattices, 8 Cantor pairs, 8 spiked pairs
/// and 4 large uniform pairs (up to 200 atoms per measure).
pub fn standard() -> Vec<InstanceSpec> {
    let mut out = Vec::with_capacity(50);
    let uniform_sizes = [8, 12, 16, 20, 24, 28, 32, 36, 40, 44, 48, 52, 56, 60, 64, 64, 48, 32, 24, 16];
    for (i, &n) in uniform_sizes.iter().enumerate() {
        out.push(spec(Kind::UniformRandom, n, 0, 1000 + i as u64, false));
    }
    for n in [4, 8, 12, 16, 24, 32, 48, 64, 128, 200] {
        out.push(spec(Kind::Lattice, n, 0, 0, false));
    }
    for d in 2..=5 {
        out.push(spec(Kind::Cantor, d, 0, 0, false));
        out.push(spec(Kind::Cantor, d, 0, 0, true));
    }
    for (i, (n, s)) in [(16, 2), (24, 3), (32, 4), (40, 5), (48, 6), (56, 8), (64, 10), (64, 16)].iter().enumerate() {
        out.push(spec(Kind::AdversarialSpike, *n, *s, 2000 + i as u64, false));
    }
    for (i, n) in [100, 150, 200, 200].iter().enumerate() {
        out.push(spec(Kind::UniformRandom, *n, 0, 3000 + i as u64, false));
    }
    out
}
