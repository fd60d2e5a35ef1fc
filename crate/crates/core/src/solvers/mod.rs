//! Universal perturbation solvers.
//!
//! Every solver talks to the problem only through a [`GradientOracle`],
//! which returns the frame-averaged loss `L` and `∇G = ∂L/∂δ`. Solvers ascend
//! `L`; AO-Exp additionally pays the spectral regularizer.

use std::io::Write;

use ndarray::{Array3, Zip};

use crate::detector::Detector;
use crate::losses::{self, GroundTruthPartition, LossBundle, LossValues, LossWeights};
use crate::scene::FrameSequence;
use crate::spectral;
use crate::{Error, Result};

pub mod ao_exp;
pub mod fw_nucl;
pub mod lora_pgd;

pub use ao_exp::{ao_exp, ao_exp_attack, singular_value_step, AoExpConfig, AoExpState, TopK};
pub use fw_nucl::{fw_nucl, fw_nucl_attack, FwNuclConfig};
pub use lora_pgd::{lora_pgd, lora_pgd_attack, LoRaPgdConfig, LoRaPgdState};

/// Loss and gradient with respect to the universal perturbation.
pub trait GradientOracle: Sync {
    /// `(H, W, C)` of the perturbation.
    fn dims(&self) -> (usize, usize, usize);

    fn gradient(&self, delta: &Array3<f64>) -> Result<LossBundle>;

    fn loss(&self, delta: &Array3<f64>) -> Result<LossValues>;
}

/// The detector attack: frame-averaged `L_total` against clean-frame partitions.
pub struct AttackOracle<'a> {
    seq: &'a FrameSequence,
    detector: &'a Detector,
    partitions: Vec<GroundTruthPartition>,
    weights: LossWeights,
}

impl<'a> AttackOracle<'a> {
    pub fn new(seq: &'a FrameSequence, detector: &'a Detector, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        if seq.is_empty() {
            return Err(Error::Argument("empty frame sequence".into()));
        }
        if seq.channels() != detector.channels() {
            return Err(Error::Shape(format!(
                "frames have {} channels, detector expects {}",
                seq.channels(),
                detector.channels()
            )));
        }
        let partitions = losses::clean_partitions(seq, detector)?;
        Ok(AttackOracle {
            seq,
            detector,
            partitions,
            weights,
        })
    }

    pub fn partitions(&self) -> &[GroundTruthPartition] {
        &self.partitions
    }
}

impl GradientOracle for AttackOracle<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        self.seq.dims()
    }

    fn gradient(&self, delta: &Array3<f64>) -> Result<LossBundle> {
        losses::averaged_gradient(self.seq, delta, self.detector, &self.partitions, &self.weights)
    }

    fn loss(&self, delta: &Array3<f64>) -> Result<LossValues> {
        losses::averaged_loss(self.seq, delta, self.detector, &self.partitions, &self.weights)
    }
}

/// `L(δ) = ⟨G, δ⟩` for a fixed `G`.
#[derive(Debug, Clone)]
pub struct LinearOracle {
    pub g: Array3<f64>,
}

impl LinearOracle {
    pub fn new(g: Array3<f64>) -> Self {
        LinearOracle { g }
    }

    fn value(&self, delta: &Array3<f64>) -> LossValues {
        let v = Zip::from(&self.g).and(delta).fold(0.0, |acc, g, d| acc + g * d);
        LossValues {
            l_total: v,
            ..LossValues::default()
        }
    }
}

impl GradientOracle for LinearOracle {
    fn dims(&self) -> (usize, usize, usize) {
        self.g.dim()
    }

    fn gradient(&self, delta: &Array3<f64>) -> Result<LossBundle> {
        let v = self.value(delta);
        Ok(LossBundle {
            l_fg: 0.0,
            l_bg: 0.0,
            l_conf: 0.0,
            l_total: v.l_total,
            grad: self.g.clone(),
            empty_foreground: true,
        })
    }

    fn loss(&self, delta: &Array3<f64>) -> Result<LossValues> {
        Ok(self.value(delta))
    }
}

/// One solver iteration: losses at the iterate produced by that iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub losses: LossValues,
    /// `‖δ^c‖_*` per channel.
    pub channel_nuclear: Vec<f64>,
    /// Sum of the per-channel nuclear norms.
    pub nuclear_norm: f64,
    pub frobenius_norm: f64,
    /// Minimized quantity: `-L_total + R(δ)` for AO-Exp, `-L_total` otherwise.
    pub objective: f64,
}

impl TraceRow {
    pub(crate) fn new(iteration: usize, losses: LossValues, delta: &Array3<f64>, penalty: f64) -> Result<Self> {
        let (channel_nuclear, nuclear_norm) = channel_nuclear_norms(delta)?;
        let frobenius_norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(TraceRow {
            iteration,
            losses,
            channel_nuclear,
            nuclear_norm,
            frobenius_norm,
            objective: -losses.l_total + penalty,
        })
    }
}

pub fn channel_nuclear_norms(delta: &Array3<f64>) -> Result<(Vec<f64>, f64)> {
    let per: Vec<f64> = (0..delta.dim().2)
        .map(|c| spectral::nuclear_norm(&losses::channel(delta, c)))
        .collect::<Result<_>>()?;
    let total = per.iter().sum();
    Ok((per, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub delta: Array3<f64>,
    pub trace: Vec<TraceRow>,
    /// Frank-Wolfe gaps `⟨S_t − δ_t, ∇G(δ_t)⟩`; empty for other solvers.
    pub fw_gaps: Vec<f64>,
}

pub const TRACE_HEADER: [&str; 8] = [
    "iteration",
    "l_fg",
    "l_bg",
    "l_conf",
    "l_total",
    "nuclear_norm",
    "frobenius_norm",
    "objective",
];

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.losses.l_fg.to_string(),
            r.losses.l_bg.to_string(),
            r.losses.l_conf.to_string(),
            r.losses.l_total.to_string(),
            r.nuclear_norm.to_string(),
            r.frobenius_norm.to_string(),
            r.objective.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `clamp(x_b + δ, 0, 1)` for every frame.
pub fn apply_perturbation(seq: &FrameSequence, delta: &Array3<f64>) -> Result<FrameSequence> {
    if delta.dim() != seq.dims() {
        return Err(Error::Shape(format!(
            "perturbation {:?} vs frames {:?}",
            delta.dim(),
            seq.dims()
        )));
    }
    let frames = seq
        .frames()
        .iter()
        .map(|f| {
            let mut out = f.clone();
            Zip::from(&mut out).and(delta).for_each(|x, &d| {
                *x = (f64::from(*x) + d).clamp(0.0, 1.0) as f32;
            });
            out
        })
        .collect();
    FrameSequence::new(frames)
}

pub(crate) fn check_finite(a: &Array3<f64>, what: &'static str, iteration: usize) -> Result<()> {
    for c in 0..a.dim().2 {
        if a.index_axis(ndarray::Axis(2), c).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what,
                iteration,
                channel: c,
            });
        }
    }
    Ok(())
}
