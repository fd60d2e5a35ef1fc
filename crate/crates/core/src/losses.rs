//! Attack losses on detector outputs and the spectral regularizer.
//!
//! The clean detections of each frame fix a binary target mask `y`
//! (foreground `F`, background `B`). The perturbed frame is scored by
//! cross-entropy over `F` and `B` separately plus the summed confidence of
//! detections above threshold:
//! `L_total = α·L_fg + β·L_bg + γ·L_conf`.

use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};
use rayon::prelude::*;

use crate::detector::{aggregate_grad, Detection, Detector};
use crate::scene::FrameSequence;
use crate::spectral;
use crate::{Error, Result};

/// Probability clamp applied before logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite".into()))
        }
    }
}

/// Frozen target segmentation of one clean frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPartition {
    pub mask: Array2<bool>,
    pub foreground: Vec<(usize, usize)>,
    pub background: Vec<(usize, usize)>,
    pub clean_detections: Vec<Detection>,
}

impl GroundTruthPartition {
    pub fn dims(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

/// Unified mask of the clean detections scoring above `tau`.
pub fn build_partition(clean: &[Detection], height: usize, width: usize, tau: f64) -> GroundTruthPartition {
    let mut unified = Array2::<f64>::zeros((height, width));
    for det in clean.iter().filter(|d| d.score > tau) {
        if det.mask.dim() == (height, width) {
            unified += &det.mask;
        }
    }
    let mask = unified.mapv(|m| m > 0.0);
    let mut foreground = Vec::new();
    let mut background = Vec::new();
    for ((y, x), &fg) in mask.indexed_iter() {
        if fg {
            foreground.push((y, x));
        } else {
            background.push((y, x));
        }
    }
    GroundTruthPartition {
        mask,
        foreground,
        background,
        clean_detections: clean.to_vec(),
    }
}

fn ce(p: f64, y: bool) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean cross-entropy against the partition's target over `F` and over `B`.
/// An empty set contributes zero.
pub fn cross_entropy_split(p: &Array2<f64>, part: &GroundTruthPartition) -> Result<(f64, f64)> {
    if p.dim() != part.dims() {
        return Err(Error::Shape(format!(
            "probability map {:?} vs partition {:?}",
            p.dim(),
            part.dims()
        )));
    }
    let mean = |set: &[(usize, usize)], y: bool| {
        if set.is_empty() {
            0.0
        } else {
            set.iter().map(|&px| ce(p[px], y)).sum::<f64>() / set.len() as f64
        }
    };
    Ok((mean(&part.foreground, true), mean(&part.background, false)))
}

pub fn confidence_loss(detections: &[Detection], tau: f64) -> f64 {
    detections
        .iter()
        .filter(|d| d.score > tau)
        .map(|d| d.score)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda1: 0.1,
            lambda2: 0.01,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.lambda1) && ok(self.lambda2) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "regularizer weights must be finite and non-negative (lambda1={}, lambda2={})",
                self.lambda1, self.lambda2
            )))
        }
    }
}

pub fn channel(delta: &Array3<f64>, c: usize) -> Array2<f64> {
    delta.index_axis(Axis(2), c).to_owned()
}

/// `Σ_c λ1·‖δ^c‖_* + (λ2/2)·‖δ^c‖_F²`.
pub fn regularizer_value(delta: &Array3<f64>, cfg: &RegularizerConfig) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..delta.dim().2 {
        let d = channel(delta, c);
        let fro2: f64 = d.iter().map(|v| v * v).sum();
        let nuc = if cfg.lambda1 == 0.0 {
            0.0
        } else {
            spectral::nuclear_norm(&d)?
        };
        total += cfg.lambda1 * nuc + 0.5 * cfg.lambda2 * fro2;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub l_fg: f64,
    pub l_bg: f64,
    pub l_conf: f64,
    pub l_total: f64,
}

impl LossValues {
    pub fn combine(l_fg: f64, l_bg: f64, l_conf: f64, w: &LossWeights) -> Self {
        LossValues {
            l_fg,
            l_bg,
            l_conf,
            l_total: w.alpha * l_fg + w.gamma * l_conf + w.beta * l_bg,
        }
    }
}

/// Loss values plus `∂L_total/∂input` for one frame (or a frame average).
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub l_fg: f64,
    pub l_bg: f64,
    pub l_conf: f64,
    pub l_total: f64,
    pub grad: Array3<f64>,
    /// Set when the clean frame had no confident detection, so `L_fg` is 0.
    pub empty_foreground: bool,
}

impl LossBundle {
    pub fn values(&self) -> LossValues {
        LossValues {
            l_fg: self.l_fg,
            l_bg: self.l_bg,
            l_conf: self.l_conf,
            l_total: self.l_total,
        }
    }
}

fn check_partition(part: &GroundTruthPartition, image: &ArrayView3<'_, f64>) -> Result<()> {
    let (h, w, _) = image.dim();
    if part.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "partition {:?} vs image {:?}",
            part.dims(),
            (h, w)
        )));
    }
    Ok(())
}

/// Loss values at `image` without the gradient.
pub fn frame_loss(
    detector: &Detector,
    part: &GroundTruthPartition,
    image: ArrayView3<'_, f64>,
    weights: &LossWeights,
    tau: f64,
) -> Result<LossValues> {
    check_partition(part, &image)?;
    let (map, dets) = detector.forward(image)?;
    let (l_fg, l_bg) = cross_entropy_split(&map.scores, part)?;
    Ok(LossValues::combine(l_fg, l_bg, confidence_loss(&dets, tau), weights))
}

/// Loss values and exact gradient with respect to `image`.
///
/// Partition and component supports are held fixed; only scores carry
/// gradient.
pub fn frame_loss_gradient(
    detector: &Detector,
    part: &GroundTruthPartition,
    image: ArrayView3<'_, f64>,
    weights: &LossWeights,
    tau: f64,
) -> Result<LossBundle> {
    check_partition(part, &image)?;
    let (map, dets) = detector.forward(image)?;
    let s = &map.scores;
    let (l_fg, l_bg) = cross_entropy_split(s, part)?;
    let l_conf = confidence_loss(&dets, tau);
    let values = LossValues::combine(l_fg, l_bg, l_conf, weights);

    // dL/ds, then chain through the sigmoid.
    let mut ds = Array2::<f64>::zeros(s.dim());
    let inside = |p: f64| p > PROB_EPS && p < 1.0 - PROB_EPS;
    if !part.foreground.is_empty() {
        let scale = weights.alpha / part.foreground.len() as f64;
        for &px in &part.foreground {
            if inside(s[px]) {
                ds[px] -= scale / s[px];
            }
        }
    }
    if !part.background.is_empty() {
        let scale = weights.beta / part.background.len() as f64;
        for &px in &part.background {
            if inside(s[px]) {
                ds[px] += scale / (1.0 - s[px]);
            }
        }
    }
    for det in dets.iter().filter(|d| d.score > tau) {
        for (px, wgt) in aggregate_grad(s, &det.support, detector.config().aggregation) {
            ds[px] += weights.gamma * wgt;
        }
    }
    let mut dl = ds;
    Zip::from(&mut dl).and(s).for_each(|g, &p| *g *= p * (1.0 - p));
    let grad = detector.backprop_logits(&dl);

    Ok(LossBundle {
        l_fg: values.l_fg,
        l_bg: values.l_bg,
        l_conf: values.l_conf,
        l_total: values.l_total,
        grad,
        empty_foreground: part.foreground.is_empty(),
    })
}

/// `clamp(x + δ, 0, 1)` in f64.
pub fn perturbed_frame(frame: &Array3<f32>, delta: &Array3<f64>) -> Array3<f64> {
    let mut out = frame.mapv(f64::from);
    Zip::from(&mut out).and(delta).for_each(|x, &d| *x = (*x + d).clamp(0.0, 1.0));
    out
}

fn check_sequence(seq: &FrameSequence, delta: &Array3<f64>, partitions: &[GroundTruthPartition]) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::Argument("empty frame sequence".into()));
    }
    if delta.dim() != seq.dims() {
        return Err(Error::Shape(format!(
            "perturbation {:?} vs frames {:?}",
            delta.dim(),
            seq.dims()
        )));
    }
    if partitions.len() != seq.len() {
        return Err(Error::Shape(format!(
            "{} partitions for {} frames",
            partitions.len(),
            seq.len()
        )));
    }
    Ok(())
}

/// One partition per frame from the clean detections.
pub fn clean_partitions(seq: &FrameSequence, detector: &Detector) -> Result<Vec<GroundTruthPartition>> {
    let tau = detector.config().confidence_threshold;
    let (h, w, _) = seq.dims();
    seq.frames()
        .par_iter()
        .map(|f| Ok(build_partition(&detector.detect_frame(f)?, h, w, tau)))
        .collect()
}

fn mean_values(per_frame: &[LossValues]) -> LossValues {
    let n = per_frame.len() as f64;
    let mut acc = LossValues::default();
    for v in per_frame {
        acc.l_fg += v.l_fg;
        acc.l_bg += v.l_bg;
        acc.l_conf += v.l_conf;
        acc.l_total += v.l_total;
    }
    LossValues {
        l_fg: acc.l_fg / n,
        l_bg: acc.l_bg / n,
        l_conf: acc.l_conf / n,
        l_total: acc.l_total / n,
    }
}

/// Frame-averaged loss values at `δ`.
pub fn averaged_loss(
    seq: &FrameSequence,
    delta: &Array3<f64>,
    detector: &Detector,
    partitions: &[GroundTruthPartition],
    weights: &LossWeights,
) -> Result<LossValues> {
    check_sequence(seq, delta, partitions)?;
    let tau = detector.config().confidence_threshold;
    let per_frame = seq
        .frames()
        .par_iter()
        .zip(partitions)
        .map(|(f, part)| frame_loss(detector, part, perturbed_frame(f, delta).view(), weights, tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_values(&per_frame))
}

/// Frame-averaged losses and `∇G = (1/B)·Σ_b ∂L_total/∂δ`.
///
/// The clamp passes gradient where `x + δ ∈ [0, 1]` and blocks it outside.
/// Frames are evaluated in parallel and summed in frame order.
pub fn averaged_gradient(
    seq: &FrameSequence,
    delta: &Array3<f64>,
    detector: &Detector,
    partitions: &[GroundTruthPartition],
    weights: &LossWeights,
) -> Result<LossBundle> {
    check_sequence(seq, delta, partitions)?;
    let tau = detector.config().confidence_threshold;
    let bundles = seq
        .frames()
        .par_iter()
        .zip(partitions)
        .map(|(f, part)| {
            let image = perturbed_frame(f, delta);
            let mut b = frame_loss_gradient(detector, part, image.view(), weights, tau)?;
            Zip::from(&mut b.grad).and(f).and(delta).for_each(|g, &x, &d| {
                let v = f64::from(x) + d;
                if !(0.0..=1.0).contains(&v) {
                    *g = 0.0;
                }
            });
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = bundles.len() as f64;
    let mut grad = Array3::<f64>::zeros(delta.dim());
    for b in &bundles {
        grad += &b.grad;
    }
    grad.mapv_inplace(|g| g / n);
    let values = mean_values(&bundles.iter().map(LossBundle::values).collect::<Vec<_>>());
    Ok(LossBundle {
        l_fg: values.l_fg,
        l_bg: values.l_bg,
        l_conf: values.l_conf,
        l_total: values.l_total,
        grad,
        empty_foreground: bundles.iter().all(|b| b.empty_foreground),
    })
}
