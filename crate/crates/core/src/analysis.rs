//! The per-instance pipeline: constants, energy stopping, 𝒬₀, the form
//! identities, the size recursion and every measured constant.

use serde::{Deserialize, Serialize};

use crate::caps;
use crate::constants::{self, ConstantsReport};
use crate::error::Result;
use crate::forms::{FormContext, NormLog, PairCollection};
use crate::gen;
use crate::grid::DyadicInterval;
use crate::haar::{self, WeightedFunction};
use crate::measure::{MeasurePair, TruncationWindow};
use crate::sizelemma::{self, Decomposition, Lemma};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub c0: f64,
    /// Recursion threshold as a fraction of the initial size.
    pub threshold_rel: f64,
    /// Random `(f, g)` draws per instance.
    pub samples: usize,
    pub window: Option<TruncationWindow>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, c0: caps::C0, threshold_rel: 1e-6, samples: 8, window: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergySummary {
    pub c0: f64,
    pub family: Vec<DyadicInterval>,
    pub hole_family: Vec<DyadicInterval>,
    pub fraction: f64,
    pub hole_fraction: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct IdentityReport {
    pub samples: usize,
    /// `|B^above − (I₀ part − B^stop)|` over the largest of the three magnitudes.
    pub above_gap: f64,
    /// `|f̂ᵀMĝ − B_Q(f, g)|` relative, on 𝒬₀.
    pub matrix_gap: f64,
    /// `|B_{𝒬₀} − B^stop|` relative, for good-supported uniform `f`.
    pub q0_stop_gap: f64,
    pub max_abs_epsilon: f64,
    /// `max E^σ_I |f|` outside 𝒮 after the uniform rescaling.
    pub max_uniform_average: f64,
}

/// Per-instance maxima of every calibrated ratio.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Measured {
    pub theorem_ratio: f64,
    pub holes: f64,
    pub big_holes: f64,
    pub equal: f64,
    pub decay: f64,
    pub monotonicity: f64,
    pub carleson: f64,
    pub node: f64,
    pub phi: f64,
    /// `η / size` over the disjoint-holes samples.
    pub eta_over_size: f64,
}

impl Measured {
    pub fn max_with(&mut self, o: &Measured) {
        let pairs = [
            (&mut self.theorem_ratio, o.theorem_ratio),
            (&mut self.holes, o.holes),
            (&mut self.big_holes, o.big_holes),
            (&mut self.equal, o.equal),
            (&mut self.decay, o.decay),
            (&mut self.monotonicity, o.monotonicity),
            (&mut self.carleson, o.carleson),
            (&mut self.node, o.node),
            (&mut self.phi, o.phi),
            (&mut self.eta_over_size, o.eta_over_size),
        ];
        for (a, b) in pairs {
            *a = a.max(b);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct MonotonicityScan {
    pub checked: usize,
    pub zero_denominators: usize,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceReport {
    pub name: String,
    pub sigma_atoms: usize,
    pub w_atoms: usize,
    pub constants: ConstantsReport,
    pub energy: EnergySummary,
    pub q0_pairs: usize,
    pub identities: IdentityReport,
    pub monotonicity: MonotonicityScan,
    pub measured: Measured,
    pub norms: NormLog,
    pub decomposition: Decomposition,
}

fn rel_gap(a: f64, b: f64, scale: f64) -> f64 {
    let s = scale.max(a.abs()).max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// Everything downstream of the energy stopping step.
pub struct Prepared {
    pub constants: ConstantsReport,
    pub energy: EnergySummary,
    pub ctx: FormContext,
    pub q0: PairCollection,
}

impl Prepared {
    pub fn family(&self) -> &[DyadicInterval] {
        &self.energy.family
    }
}

pub fn prepare(pair: MeasurePair, rc: &RunConfig) -> Result<Prepared> {
    let win = rc.window.unwrap_or_else(|| pair.default_window());
    let constants = constants::constants(&pair, &win);
    let i0 = DyadicInterval::unit();
    let stopping = sizelemma::energy_stopping(&pair, &i0, rc.c0, constants.h_const);
    let energy = EnergySummary {
        c0: rc.c0,
        fraction: stopping.sigma_fraction(&pair),
        hole_fraction: stopping.hole_sigma_fraction(&pair),
        family: stopping.family,
        hole_family: stopping.hole_family,
    };
    let ctx = FormContext::new(pair, win, i0);
    let q0 = ctx.make_q0(&energy.family, &energy.family)?;
    q0.check_admissible(ctx.cfg(), &energy.family)?;
    Ok(Prepared { constants, energy, ctx, q0 })
}

pub fn analyze(name: &str, pair: MeasurePair, rc: &RunConfig) -> Result<InstanceReport> {
    let (sigma_atoms, w_atoms) = (pair.sigma.len(), pair.w.len());
    let Prepared { constants: consts, energy, ctx, q0 } = prepare(pair, rc)?;
    let family = energy.family.clone();
    let mut rng = gen::rng(rc.seed);
    let identities = identity_check(&ctx, &q0, &family, rc.samples, &mut rng);
    let monotonicity = monotonicity_scan(&ctx);

    let mut carleson: f64 = 0.0;
    let mut phi: f64 = 0.0;
    for _ in 0..rc.samples {
        let f = WeightedFunction { values: gen::random_vector(&mut rng, ctx.pair.sigma.len()) };
        let norm = haar::norm_sq(&ctx.pair.sigma, &f.values);
        if norm > 0.0 {
            carleson = carleson.max(ctx.stopping_data(&f)?.carleson_sum(&ctx.pair) / norm);
        }
        let fu = ctx.uniform_f(&family, false, &mut rng);
        phi = phi.max(phi_ratio(&ctx, &q0, &fu)?);
    }

    let tau0 = ctx.size(&q0).value;
    let threshold = if tau0 > 0.0 { rc.threshold_rel * tau0 } else { 1.0 };
    let decomposition = sizelemma::decompose_until(&ctx, &q0, &family, threshold)?;

    let mut measured = Measured {
        theorem_ratio: consts.ratio.unwrap_or(0.0),
        monotonicity: monotonicity.max_ratio,
        carleson,
        node: decomposition.c_max,
        phi,
        ..Default::default()
    };
    for node in decomposition.root.nodes() {
        let Some(rep) = &node.lemma else { continue };
        for s in &rep.lemmas {
            let slot = match s.lemma {
                Lemma::Holes => {
                    if s.size > 0.0 {
                        measured.eta_over_size = measured.eta_over_size.max(s.bound / s.size);
                    }
                    &mut measured.holes
                }
                Lemma::BigHoles => &mut measured.big_holes,
                Lemma::Equal { .. } => &mut measured.equal,
                Lemma::Decay { .. } => &mut measured.decay,
            };
            *slot = slot.max(s.ratio);
        }
    }

    let mut norms = ctx.norm_log();
    norms.record(&consts.norm.routes);
    Ok(InstanceReport {
        name: name.into(),
        sigma_atoms,
        w_atoms,
        constants: consts,
        energy,
        q0_pairs: q0.len(),
        identities,
        monotonicity,
        measured,
        norms,
        decomposition,
    })
}

/// The exact form identities over `samples` seeded `(f, g)` draws.
pub fn identity_check(
    ctx: &FormContext,
    q0: &PairCollection,
    family: &[DyadicInterval],
    samples: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> IdentityReport {
    let mut r = IdentityReport { samples, ..Default::default() };
    let m = ctx.form_matrix(q0);
    for _ in 0..samples {
        let f = ctx.uniform_f(family, false, rng);
        let g = ctx.adapted_g(family, rng);
        let above = ctx.b_above(&f, &g);
        let (i0p, stop) = (ctx.i0_part(&f, &g), ctx.b_stop(&f, &g));
        r.above_gap = r.above_gap.max(rel_gap(above, i0p - stop, i0p.abs().max(stop.abs())));
        r.matrix_gap = r.matrix_gap.max(rel_gap(m.apply(&f, &g), ctx.b_form(q0, &f, &g), 0.0));
        for e in ctx.epsilons(&f, &g).values() {
            r.max_abs_epsilon = r.max_abs_epsilon.max(e.abs());
        }
        let v = haar::reconstruct(&f, &ctx.pair.sigma, &ctx.sys_sigma);
        r.max_uniform_average = r.max_uniform_average.max(ctx.max_abs_average(&v, family));
        let fg = ctx.uniform_f(family, true, rng);
        r.q0_stop_gap = r.q0_stop_gap.max(rel_gap(ctx.b_form(q0, &fg, &g), ctx.b_stop(&fg, &g), 0.0));
    }
    r
}

/// `max_J sup |φ_J| / α_f(π_𝓕 J)`; also checks that `φ_J` vanishes on the
/// smallest `Q̃₁` paired with `J`.
fn phi_ratio(ctx: &FormContext, q: &PairCollection, f: &haar::HaarCoefficients) -> Result<f64> {
    let values = haar::reconstruct(f, &ctx.pair.sigma, &ctx.sys_sigma);
    let data = ctx.stopping_data(&values)?;
    let mut worst: f64 = 0.0;
    for j in q.q2_set() {
        let phi = ctx.phi_j(q, f, &j);
        let inner = q.iter().filter(|p| p.q2 == j).map(|p| p.tilde_q1()).max_by_key(|t| t.n);
        if let Some(t) = inner {
            if ctx.pair.sigma.range(&t).any(|k| phi.values[k] != 0.0) {
                return Err(crate::Error::Internal(format!("phi_J nonzero on {t:?}")));
            }
        }
        let top = phi.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let alpha = data.parent_of(&j).map(|p| data.alpha[&p]).unwrap_or(0.0);
        if top > 0.0 {
            worst = worst.max(if alpha > 0.0 { top / alpha } else { f64::INFINITY });
        }
    }
    Ok(worst)
}

/// Every `(S, J)` with `J ⋐ S ⊊ I₀` and `J` w-nondegenerate.
pub fn monotonicity_scan(ctx: &FormContext) -> MonotonicityScan {
    let cfg = *ctx.cfg();
    let mut r = MonotonicityScan::default();
    for j in ctx.sys_w.intervals() {
        for s in j.ancestors().filter(|s| *s != ctx.i0 && cfg.deeply_contained(&j, s)) {
            if let Ok(m) = ctx.monotonicity_ratio(&s, &j) {
                r.checked += 1;
                if m.zero_denominator {
                    r.zero_denominators += 1;
                } else {
                    r.max_ratio = r.max_ratio.max(m.ratio);
                }
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridConfig;

    #[test]
    fn pipeline_runs_on_small_instances() {
        let rc = RunConfig { samples: 2, ..Default::default() };
        for seed in 0..3 {
            let pair = gen::uniform_random(GridConfig::default(), 40, 40, seed).unwrap();
            let r = analyze("t", pair, &rc).unwrap();
            assert!(r.identities.above_gap < 1e-9);
            assert!(r.identities.max_abs_epsilon <= 1.0 + 1e-12);
            assert!(r.decomposition.violations.is_empty(), "{:?}", r.decomposition.violations);
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let rc = RunConfig { samples: 2, ..Default::default() };
        let pair = gen::adversarial_spike(GridConfig::default(), 24, 3, 5).unwrap();
        let a = crate::io::to_stable_json(&analyze("t", pair.clone(), &rc).unwrap());
        let b = crate::io::to_stable_json(&analyze("t", pair, &rc).unwrap());
        assert_eq!(a, b);
    }
}
