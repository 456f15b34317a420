//! Committed calibration caps for the measured constants.
//!
//! Each cap sits above the largest value measured on the standard corpus
//! (seeds 0, 1 and 2, eight random draws per instance) with room for seed
//! noise; the measured maxima are listed beside each cap.

/// Default `C₀` in the energy stopping threshold: the smallest power of 2
/// with `σ(∪𝓕) ≤ σ(I₀)/10` on every corpus instance (`2⁻⁸` gives 0.345).
pub const C0: f64 = 1.0 / 128.0;

/// `𝒩 / 𝓗`; measured 0.530, minimum 0.387.
pub const R_CAP: f64 = 0.75;

/// `𝐁 / η` over the disjoint-holes samples; measured 0.733.
pub const C_HOLES: f64 = 1.0;

/// `𝐁 / η` over the big-holes samples; measured 0.379.
pub const C_BIG_HOLES: f64 = 0.5;

/// `𝐁 / size` over the equal-scale samples; measured 0.176.
pub const C_EQUAL: f64 = 0.25;

/// `𝐁_{Q_{L,t}} / (ρ^{-t/2} τ)`; measured 0.0255.
pub const C_DECAY: f64 = 0.05;

/// Monotonicity principle ratio; measured 0.998.
pub const C_MONO: f64 = 1.25;

/// `Σ α² σ(F) / ‖f‖²`; measured 1.27.
pub const C_CARLESON: f64 = 2.0;

/// Node constant `C` of the size recursion; measured 0.109.
pub const C_NODE: f64 = 0.25;

/// `sup |φ_J| / α(π_𝓕 J)`; measured 1.42.
pub const C_PHI: f64 = 2.0;

/// `η / size` over the disjoint-holes samples; measured 0.0367.
pub const C_ETA: f64 = 0.1;
