//! Factored projected gradient ascent: each channel is `δ^c = U_c V_c` with
//! `U_c ∈ R^{H×r}`, `V_c ∈ R^{r×W}`, updated by normalized gradient steps and
//! rescaled into the nuclear budget.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{check_finite, AttackOracle, AttackOutcome, GradientOracle, TraceRow};
use crate::detector::Detector;
use crate::losses::LossWeights;
use crate::scene::FrameSequence;
use crate::spectral;
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoRaPgdConfig {
    /// Fraction of `min(H, W)` used as the factor rank.
    pub rank_fraction: f64,
    /// Per-channel nuclear budget; `f64::INFINITY` disables the projection.
    pub nuclear_budget: f64,
    pub step: f64,
    pub iterations: usize,
    /// Standard deviation of the Gaussian factor initialization.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for LoRaPgdConfig {
    fn default() -> Self {
        LoRaPgdConfig {
            rank_fraction: 0.1,
            nuclear_budget: 60.0,
            step: 0.05,
            iterations: 100,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

impl LoRaPgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rank_fraction > 0.0 && self.rank_fraction <= 1.0) {
            return Err(Error::Config(format!("rank fraction {} outside (0, 1]", self.rank_fraction)));
        }
        if !(self.nuclear_budget > 0.0) {
            return Err(Error::Config(format!("nuclear budget must be > 0, got {}", self.nuclear_budget)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("step size must be > 0, got {}", self.step)));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("init scale must be > 0, got {}", self.init_scale)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("lora_pgd iterations must be >= 1".into()));
        }
        Ok(())
    }

    /// `floor(ρ·min(H, W))`, which must be at least 1.
    pub fn rank(&self, height: usize, width: usize) -> Result<usize> {
        let r = (self.rank_fraction * height.min(width) as f64 + 1e-9).floor() as usize;
        if r == 0 {
            return Err(Error::Config(format!(
                "rank fraction {} gives rank 0 on {height}x{width} frames",
                self.rank_fraction
            )));
        }
        Ok(r)
    }
}

/// Factor pairs per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LoRaPgdState {
    pub u: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl LoRaPgdState {
    pub fn init(dims: (usize, usize, usize), cfg: &LoRaPgdConfig) -> Result<Self> {
        let (h, w, c) = dims;
        let r = cfg.rank(h, w)?;
        let normal = Normal::new(0.0, cfg.init_scale).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut u = Vec::with_capacity(c);
        let mut v = Vec::with_capacity(c);
        for _ in 0..c {
            u.push(Array2::from_shape_simple_fn((h, r), || normal.sample(&mut rng)));
            v.push(Array2::from_shape_simple_fn((r, w), || normal.sample(&mut rng)));
        }
        let mut st = LoRaPgdState { u, v };
        st.project(cfg.nuclear_budget)?;
        Ok(st)
    }

    pub fn delta(&self) -> Array3<f64> {
        let (h, w) = (self.u[0].nrows(), self.v[0].ncols());
        let mut out = Array3::zeros((h, w, self.u.len()));
        for (c, (u, v)) in self.u.iter().zip(&self.v).enumerate() {
            out.index_axis_mut(Axis(2), c).assign(&u.dot(v));
        }
        out
    }

    /// `(∇_U, ∇_V) = (G Vᵀ, Uᵀ G)` for channel `c`.
    pub fn factor_gradients(&self, c: usize, g: &Matrix) -> (Matrix, Matrix) {
        (g.dot(&self.v[c].t()), self.u[c].t().dot(g))
    }

    /// Scales both factors by `sqrt(τ/‖UV‖_*)` where the budget is exceeded.
    pub fn project(&mut self, budget: f64) -> Result<()> {
        if budget.is_infinite() {
            return Ok(());
        }
        for (u, v) in self.u.iter_mut().zip(self.v.iter_mut()) {
            let nuc = spectral::nuclear_norm(&u.dot(v))?;
            if nuc > budget {
                let s = (budget / nuc).sqrt();
                u.mapv_inplace(|x| x * s);
                v.mapv_inplace(|x| x * s);
            }
        }
        Ok(())
    }

    /// Normalized ascent step on both factors, then projection.
    pub fn step(&mut self, grad: &Array3<f64>, cfg: &LoRaPgdConfig) -> Result<()> {
        for c in 0..self.u.len() {
            let g = grad.index_axis(Axis(2), c).to_owned();
            let (gu, gv) = self.factor_gradients(c, &g);
            let nu = gu.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = gv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu > 0.0 {
                self.u[c].scaled_add(cfg.step / nu, &gu);
            }
            if nv > 0.0 {
                self.v[c].scaled_add(cfg.step / nv, &gv);
            }
        }
        self.project(cfg.nuclear_budget)
    }
}

pub fn lora_pgd(oracle: &impl GradientOracle, cfg: &LoRaPgdConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let mut state = LoRaPgdState::init(oracle.dims(), cfg)?;
    let mut delta = state.delta();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut bundle = oracle.gradient(&delta)?;
    for t in 1..=cfg.iterations {
        check_finite(&bundle.grad, "gradient", t)?;
        state.step(&bundle.grad, cfg)?;
        delta = state.delta();
        check_finite(&delta, "perturbation", t)?;
        let values = if t < cfg.iterations {
            bundle = oracle.gradient(&delta)?;
            bundle.values()
        } else {
            oracle.loss(&delta)?
        };
        trace.push(TraceRow::new(t, values, &delta, 0.0)?);
    }
    Ok(AttackOutcome {
        delta,
        trace,
        fw_gaps: Vec::new(),
    })
}

pub fn lora_pgd_attack(
    seq: &FrameSequence,
    detector: &Detector,
    weights: LossWeights,
    cfg: &LoRaPgdConfig,
) -> Result<AttackOutcome> {
    let oracle = AttackOracle::new(seq, detector, weights)?;
    lora_pgd(&oracle, cfg)
}
