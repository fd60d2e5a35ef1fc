//! Adaptive optimistic exponentiated gradient on the singular values of each
//! perturbation channel.
//!
//! Per channel the state is an SVD-shaped decision variable `U diag(z) Vᵀ`
//! with `z ≥ 0`, an adaptive step accumulator `η` and the previous gradient.
//! Iteration `t` (1-based) with gradient `g = ∇G(δ_t)`:
//!
//! ```text
//! η  ← η + t²·‖g − g_prev‖₂²
//! U' diag(θ) V'ᵀ ← svd(η·U diag(ln(1+z)) Vᵀ + (2t+1)·g − t·g_prev)
//! z' ← singular_value_step(θ, η, (t+1)λ1, (t+1)λ2)
//! w  ← w + t·topk(z')
//! δ_{t+1} = 2/(t(t+1)) · U' diag(w) V'ᵀ
//! ```
//!
//! The regularizer enters each step with the same weight `t+1` as the
//! accumulated gradient, which keeps the averaged iterate on the composite
//! minimizer.

use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;

use super::{check_finite, AttackOracle, AttackOutcome, GradientOracle, TraceRow};
use crate::detector::Detector;
use crate::losses::{self, LossWeights, RegularizerConfig};
use crate::scene::FrameSequence;
use crate::spectral;
use crate::{Error, Matrix, Result};

/// How many leading singular values enter the reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TopK {
    #[default]
    Full,
    K(usize),
}

impl TopK {
    fn count(self, r: usize) -> usize {
        match self {
            TopK::Full => r,
            TopK::K(k) => k.min(r),
        }
    }
}

impl std::str::FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(TopK::Full);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(TopK::K(k)),
            _ => Err(Error::Config(format!("top_k must be a positive integer or \"full\", got {s:?}"))),
        }
    }
}

impl std::fmt::Display for TopK {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopK::Full => f.write_str("full"),
            TopK::K(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoExpConfig {
    pub regularizer: RegularizerConfig,
    pub iterations: usize,
    pub top_k: TopK,
    pub eta0: f64,
}

impl Default for AoExpConfig {
    fn default() -> Self {
        AoExpConfig {
            regularizer: RegularizerConfig::default(),
            iterations: 100,
            top_k: TopK::Full,
            eta0: 1.0,
        }
    }
}

impl AoExpConfig {
    pub fn validate(&self) -> Result<()> {
        self.regularizer.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("ao_exp iterations must be >= 1".into()));
        }
        if self.top_k == TopK::K(0) {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Config(format!("eta0 must be positive, got {}", self.eta0)));
        }
        Ok(())
    }
}

/// One singular value of the decision variable:
/// `z = (η/λ2)·W₀((λ2/η)·exp((λ2 + max(θ − λ1, 0))/η)) − 1`,
/// i.e. the root of `η·ln(1+z) + λ2·z = max(θ − λ1, 0)`.
///
/// With `λ2 = 0` this reduces to `z = exp(max(θ − λ1, 0)/η) − 1`.
pub fn singular_value_step(theta: f64, eta: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    if !(eta > 0.0) || !theta.is_finite() || !(lambda1 >= 0.0) || !(lambda2 >= 0.0) {
        return Err(Error::Domain(format!(
            "singular value step needs finite θ, η > 0, λ ≥ 0 (θ={theta}, η={eta}, λ1={lambda1}, λ2={lambda2})"
        )));
    }
    let m = (theta - lambda1).max(0.0);
    let z = if lambda2 == 0.0 {
        (m / eta).exp_m1()
    } else {
        let a = lambda2 / eta;
        let w = spectral::lambert_w0_exp(a.ln() + (lambda2 + m) / eta)?;
        w / a - 1.0
    };
    if !z.is_finite() {
        return Err(Error::Numerical(format!("singular value step overflowed (θ={theta}, η={eta})")));
    }
    if z < -1e-12 {
        return Err(Error::Numerical(format!("negative singular value {z:e} (θ={theta}, η={eta})")));
    }
    Ok(z.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
struct ChannelState {
    u: Matrix,
    vt: Matrix,
    z: Array1<f64>,
    eta: f64,
    prev_grad: Matrix,
    /// `Σ_s s·topk(z_{s+1})`.
    weighted: Array1<f64>,
}

/// Solver state across iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct AoExpState {
    channels: Vec<ChannelState>,
    t: usize,
    delta: Array3<f64>,
}

impl AoExpState {
    pub fn new(dims: (usize, usize, usize), eta0: f64) -> Self {
        let (h, w, c) = dims;
        let r = h.min(w);
        let ch = ChannelState {
            u: Array2::eye(h),
            vt: Array2::eye(w),
            z: Array1::zeros(r),
            eta: eta0,
            prev_grad: Array2::zeros((h, w)),
            weighted: Array1::zeros(r),
        };
        AoExpState {
            channels: vec![ch; c],
            t: 0,
            delta: Array3::zeros(dims),
        }
    }

    /// Current perturbation `δ_{t+1}` (zero before the first step).
    pub fn delta(&self) -> &Array3<f64> {
        &self.delta
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn eta(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.eta).collect()
    }

    /// Decision-variable singular values per channel.
    pub fn z(&self) -> Vec<Array1<f64>> {
        self.channels.iter().map(|c| c.z.clone()).collect()
    }

    /// Advances one iteration with `grad = ∇G(δ_t)`.
    pub fn step(&mut self, grad: &Array3<f64>, cfg: &AoExpConfig) -> Result<()> {
        if grad.dim() != self.delta.dim() {
            return Err(Error::Shape(format!(
                "gradient {:?} vs perturbation {:?}",
                grad.dim(),
                self.delta.dim()
            )));
        }
        let t = self.t + 1;
        check_finite(grad, "gradient", t)?;
        let tf = t as f64;
        let l1 = (tf + 1.0) * cfg.regularizer.lambda1;
        let l2 = (tf + 1.0) * cfg.regularizer.lambda2;
        let scale = 2.0 / (tf * (tf + 1.0));

        let updated: Vec<(ChannelState, Matrix)> = self
            .channels
            .par_iter()
            .enumerate()
            .map(|(c, st)| {
                let g = grad.index_axis(Axis(2), c).to_owned();
                let diff = &g - &st.prev_grad;
                let eta = st.eta + tf * tf * spectral::spectral_norm(&diff)?.powi(2);
                let zbar: Vec<f64> = st.z.iter().map(|z| z.ln_1p()).collect();
                let m = spectral::compose(&st.u, &zbar, &st.vt) * eta + &g * (2.0 * tf + 1.0) - &st.prev_grad * tf;
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { what: "dual matrix", iteration: t, channel: c });
                }
                let f = spectral::svd(&m)?;
                let z = f
                    .sigma
                    .iter()
                    .map(|&theta| singular_value_step(theta, eta, l1, l2))
                    .collect::<Result<Array1<f64>>>()
                    .map_err(|e| match e {
                        Error::Numerical(_) | Error::Domain(_) => Error::NonFinite { what: "singular values", iteration: t, channel: c },
                        other => other,
                    })?;
                let k = cfg.top_k.count(z.len());
                let mut weighted = st.weighted.clone();
                for i in 0..k {
                    weighted[i] += tf * z[i];
                }
                let avg: Vec<f64> = weighted.iter().map(|w| w * scale).collect();
                let delta_c = spectral::compose(&f.u, &avg, &f.vt);
                if delta_c.iter().any(|v| !v.is_finite()) || !eta.is_finite() {
                    return Err(Error::NonFinite { what: "perturbation", iteration: t, channel: c });
                }
                Ok((
                    ChannelState {
                        u: f.u,
                        vt: f.vt,
                        z,
                        eta,
                        prev_grad: g,
                        weighted,
                    },
                    delta_c,
                ))
            })
            .collect::<Result<_>>()?;

        for (c, (st, d)) in updated.into_iter().enumerate() {
            self.delta.index_axis_mut(Axis(2), c).assign(&d);
            self.channels[c] = st;
        }
        self.t = t;
        Ok(())
    }
}

/// Runs AO-Exp for `cfg.iterations` steps against any oracle.
///
/// Trace row `t` holds the losses at `δ_{t+1}`, so the final row describes
/// the returned perturbation.
pub fn ao_exp(oracle: &impl GradientOracle, cfg: &AoExpConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let mut state = AoExpState::new(oracle.dims(), cfg.eta0);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut bundle = oracle.gradient(state.delta())?;
    for t in 1..=cfg.iterations {
        state.step(&bundle.grad, cfg)?;
        let values = if t < cfg.iterations {
            bundle = oracle.gradient(state.delta())?;
            bundle.values()
        } else {
            oracle.loss(state.delta())?
        };
        let penalty = losses::regularizer_value(state.delta(), &cfg.regularizer)?;
        trace.push(TraceRow::new(t, values, state.delta(), penalty)?);
    }
    Ok(AttackOutcome {
        delta: state.delta,
        trace,
        fw_gaps: Vec::new(),
    })
}

pub fn ao_exp_attack(
    seq: &FrameSequence,
    detector: &Detector,
    weights: LossWeights,
    cfg: &AoExpConfig,
) -> Result<AttackOutcome> {
    let oracle = AttackOracle::new(seq, detector, weights)?;
    ao_exp(&oracle, cfg)
}
