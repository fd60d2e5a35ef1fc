//! Frank-Wolfe ascent over a per-channel nuclear-norm ball of radius `ε`.
//!
//! The linear maximization oracle over the ball is the rank-one vertex
//! `ε·u₁v₁ᵀ` built from the top singular pair of the gradient channel. The
//! step size is the best of `γ ∈ {1/n, 2/n, …, 1}` by loss value.

use ndarray::{Array3, Axis, Zip};

use super::{check_finite, AttackOracle, AttackOutcome, GradientOracle, TraceRow};
use crate::detector::Detector;
use crate::losses::{self, LossValues, LossWeights};
use crate::scene::FrameSequence;
use crate::spectral;
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwNuclConfig {
    /// Nuclear radius per channel.
    pub epsilon: f64,
    pub iterations: usize,
    pub line_search_evals: usize,
}

impl Default for FwNuclConfig {
    fn default() -> Self {
        FwNuclConfig {
            epsilon: 40.0,
            iterations: 30,
            line_search_evals: 5,
        }
    }
}

impl FwNuclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("fw epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("fw_nucl iterations must be >= 1".into()));
        }
        if self.line_search_evals == 0 {
            return Err(Error::Config("line search needs at least one evaluation".into()));
        }
        Ok(())
    }
}

/// `ε·u₁v₁ᵀ` for the top singular pair of `g`; zero if `g` vanishes.
pub fn nuclear_vertex(g: &Matrix, epsilon: f64) -> Result<Matrix> {
    let f = spectral::svd(g)?;
    if f.sigma[0] == 0.0 {
        return Ok(Matrix::zeros(g.dim()));
    }
    Ok(spectral::compose(&f.u, &[epsilon], &f.vt))
}

pub fn fw_nucl(oracle: &impl GradientOracle, cfg: &FwNuclConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let dims = oracle.dims();
    let mut delta = Array3::<f64>::zeros(dims);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut gaps = Vec::with_capacity(cfg.iterations);
    let n = cfg.line_search_evals;

    for t in 1..=cfg.iterations {
        let bundle = oracle.gradient(&delta)?;
        check_finite(&bundle.grad, "gradient", t)?;
        let mut vertex = Array3::<f64>::zeros(dims);
        for c in 0..dims.2 {
            let s = nuclear_vertex(&losses::channel(&bundle.grad, c), cfg.epsilon)?;
            vertex.index_axis_mut(Axis(2), c).assign(&s);
        }
        let gap = Zip::from(&vertex)
            .and(&delta)
            .and(&bundle.grad)
            .fold(0.0, |acc, s, d, g| acc + (s - d) * g);
        gaps.push(gap);

        let mut best: Option<(Array3<f64>, LossValues)> = None;
        for j in 1..=n {
            let gamma = j as f64 / n as f64;
            let mut cand = delta.clone();
            Zip::from(&mut cand).and(&vertex).for_each(|d, &s| *d = (1.0 - gamma) * *d + gamma * s);
            let v = oracle.loss(&cand)?;
            if !v.l_total.is_finite() {
                return Err(Error::NonFinite { what: "line search loss", iteration: t, channel: 0 });
            }
            if best.as_ref().is_none_or(|(_, b)| v.l_total > b.l_total) {
                best = Some((cand, v));
            }
        }
        let (next, values) = best.expect("at least one line search evaluation");
        delta = next;
        trace.push(TraceRow::new(t, values, &delta, 0.0)?);
    }
    Ok(AttackOutcome {
        delta,
        trace,
        fw_gaps: gaps,
    })
}

pub fn fw_nucl_attack(
    seq: &FrameSequence,
    detector: &Detector,
    weights: LossWeights,
    cfg: &FwNuclConfig,
) -> Result<AttackOutcome> {
    let oracle = AttackOracle::new(seq, detector, weights)?;
    fw_nucl(&oracle, cfg)
}
