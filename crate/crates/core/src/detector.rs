//! Differentiable blob detector used as the attack target.
//!
//! Per-pixel logits are a reflect-padded correlation of each channel with a
//! fixed template plus a bias, `ℓ = Σ_c k_c ⋆ x_c + b`, and scores are
//! `s = sigmoid(ℓ)`. Detections are the 4-connected components of
//! `{s > threshold}` with at least `min_area` pixels.

use std::collections::VecDeque;

use ndarray::{Array2, Array3, ArrayView3};

use crate::losses::{self, GroundTruthPartition, LossBundle, LossWeights};
use crate::metrics::BBox;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            other => Err(Error::Config(format!("unknown score aggregation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        })
    }
}

/// Correlation templates.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// Unit-sum Gaussian of odd `size`, scaled by `gain / C` in every channel,
    /// so that logits respond to the channel mean.
    Gaussian { size: usize, sigma: f64, gain: f64 },
    /// One explicit odd-sized square template per channel.
    Custom(Vec<Array2<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub kernel: KernelSpec,
    pub bias: f64,
    /// Component threshold on the score map.
    pub threshold: f64,
    pub min_area: usize,
    pub aggregation: Aggregation,
    /// Threshold for confident detections in the mask construction and in
    /// the confidence loss.
    pub confidence_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kernel: KernelSpec::Gaussian {
                size: 11,
                sigma: 2.0,
                gain: 12.0,
            },
            bias: -6.0,
            threshold: 0.5,
            min_area: 6,
            aggregation: Aggregation::Mean,
            confidence_threshold: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "detection threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(Error::Config(format!(
                "confidence threshold {} outside (0, 1)",
                self.confidence_threshold
            )));
        }
        if self.min_area == 0 {
            return Err(Error::Config("min_area must be >= 1".into()));
        }
        if !self.bias.is_finite() {
            return Err(Error::Config("bias must be finite".into()));
        }
        match &self.kernel {
            KernelSpec::Gaussian { size, sigma, gain } => {
                if size % 2 == 0 {
                    return Err(Error::Config(format!("kernel size {size} must be odd")));
                }
                if !(*sigma > 0.0 && sigma.is_finite() && gain.is_finite()) {
                    return Err(Error::Config("kernel sigma must be > 0 and gain finite".into()));
                }
            }
            KernelSpec::Custom(ks) => {
                let Some(first) = ks.first() else {
                    return Err(Error::Config("custom kernel list is empty".into()));
                };
                let k = first.nrows();
                for kc in ks {
                    if kc.nrows() != k || kc.ncols() != k || k % 2 == 0 {
                        return Err(Error::Config("custom kernels must be odd, square and equal-sized".into()));
                    }
                    if kc.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Config("custom kernel has non-finite entries".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Unit-sum Gaussian template.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Array2<f64> {
    let r = (size / 2) as f64;
    let mut k = Array2::from_shape_fn((size, size), |(i, j)| {
        let dy = i as f64 - r;
        let dx = j as f64 - r;
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    });
    let total = k.sum();
    k.mapv_inplace(|v| v / total);
    k
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Reflect index `i` into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Scores and logits over the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub scores: Array2<f64>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    /// Score map restricted to the component, zero elsewhere.
    pub mask: Array2<f64>,
    /// Component pixels `(row, col)` in scan order.
    pub support: Vec<(usize, usize)>,
    pub label: u32,
}

/// A detector instance bound to a channel count.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    kernels: Vec<Array2<f64>>,
    radius: usize,
}

impl Detector {
    pub fn new(config: DetectorConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::Argument("detector needs at least one channel".into()));
        }
        let kernels = match &config.kernel {
            KernelSpec::Gaussian { size, sigma, gain } => {
                let k = gaussian_kernel(*size, *sigma).mapv(|v| v * gain / channels as f64);
                vec![k; channels]
            }
            KernelSpec::Custom(ks) => {
                if ks.len() != channels {
                    return Err(Error::Shape(format!(
                        "{} custom kernels for {channels} channels",
                        ks.len()
                    )));
                }
                ks.clone()
            }
        };
        let radius = kernels[0].nrows() / 2;
        Ok(Detector {
            config,
            kernels,
            radius,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.kernels.len()
    }

    fn check_image(&self, dim: (usize, usize, usize)) -> Result<()> {
        if dim.2 != self.kernels.len() {
            return Err(Error::Shape(format!(
                "image has {} channels, detector expects {}",
                dim.2,
                self.kernels.len()
            )));
        }
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        Ok(())
    }

    /// `ℓ = Σ_c k_c ⋆ x_c + b` with reflect padding.
    pub fn logits(&self, image: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        let (h, w, c) = image.dim();
        self.check_image(image.dim())?;
        let r = self.radius;
        let k = 2 * r + 1;
        let (ph, pw) = (h + 2 * r, w + 2 * r);
        let mut out = Array2::from_elem((h, w), self.config.bias);
        let mut padded = vec![0.0; ph * pw];
        for ch in 0..c {
            for py in 0..ph {
                let y = reflect(py as isize - r as isize, h);
                for px in 0..pw {
                    let x = reflect(px as isize - r as isize, w);
                    padded[py * pw + px] = image[[y, x, ch]];
                }
            }
            let kern = &self.kernels[ch];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for u in 0..k {
                        let row = &padded[(i + u) * pw + j..(i + u) * pw + j + k];
                        for (kv, pv) in kern.row(u).iter().zip(row) {
                            acc += kv * pv;
                        }
                    }
                    out[[i, j]] += acc;
                }
            }
        }
        Ok(out)
    }

    /// Gradient with respect to the image given the gradient with respect to
    /// the logits (adjoint of the padded correlation).
    pub fn backprop_logits(&self, grad_logits: &Array2<f64>) -> Array3<f64> {
        let (h, w) = grad_logits.dim();
        let c = self.kernels.len();
        let r = self.radius;
        let k = 2 * r + 1;
        let (ph, pw) = (h + 2 * r, w + 2 * r);
        let mut out = Array3::zeros((h, w, c));
        let mut padded = vec![0.0; ph * pw];
        for ch in 0..c {
            padded.iter_mut().for_each(|v| *v = 0.0);
            let kern = &self.kernels[ch];
            for i in 0..h {
                for j in 0..w {
                    let g = grad_logits[[i, j]];
                    if g == 0.0 {
                        continue;
                    }
                    for u in 0..k {
                        let row = &mut padded[(i + u) * pw + j..(i + u) * pw + j + k];
                        for (pv, kv) in row.iter_mut().zip(kern.row(u)) {
                            *pv += kv * g;
                        }
                    }
                }
            }
            for py in 0..ph {
                let y = reflect(py as isize - r as isize, h);
                for px in 0..pw {
                    let x = reflect(px as isize - r as isize, w);
                    out[[y, x, ch]] += padded[py * pw + px];
                }
            }
        }
        out
    }

    pub fn score_map(&self, image: ArrayView3<'_, f64>) -> Result<ScoreMap> {
        let logits = self.logits(image)?;
        let scores = logits.mapv(sigmoid);
        Ok(ScoreMap { scores, logits })
    }

    /// Thresholded connected components of a score map, ordered by descending
    /// score and then by `(y0, x0)`.
    pub fn components(&self, scores: &Array2<f64>) -> Vec<Detection> {
        let (h, w) = scores.dim();
        let tau = self.config.threshold;
        let mut seen = Array2::from_elem((h, w), false);
        let mut dets = Vec::new();
        let mut queue = VecDeque::new();
        for y0 in 0..h {
            for x0 in 0..w {
                if seen[[y0, x0]] || scores[[y0, x0]] <= tau {
                    continue;
                }
                seen[[y0, x0]] = true;
                queue.push_back((y0, x0));
                let mut support = Vec::new();
                while let Some((y, x)) = queue.pop_front() {
                    support.push((y, x));
                    let mut push = |ny: usize, nx: usize| {
                        if !seen[[ny, nx]] && scores[[ny, nx]] > tau {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    };
                    if y > 0 {
                        push(y - 1, x);
                    }
                    if y + 1 < h {
                        push(y + 1, x);
                    }
                    if x > 0 {
                        push(y, x - 1);
                    }
                    if x + 1 < w {
                        push(y, x + 1);
                    }
                }
                if support.len() < self.config.min_area {
                    continue;
                }
                support.sort_unstable();
                let mut mask = Array2::zeros((h, w));
                let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
                for &(y, x) in &support {
                    mask[[y, x]] = scores[[y, x]];
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
                let score = aggregate(scores, &support, self.config.aggregation);
                dets.push(Detection {
                    bbox: BBox::new_unchecked(bx0 as i64, by0 as i64, bx1 as i64, by1 as i64),
                    score,
                    mask,
                    support,
                    label: 0,
                });
            }
        }
        dets.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.bbox.y0.cmp(&b.bbox.y0))
                .then(a.bbox.x0.cmp(&b.bbox.x0))
        });
        dets
    }

    pub fn forward(&self, image: ArrayView3<'_, f64>) -> Result<(ScoreMap, Vec<Detection>)> {
        let map = self.score_map(image)?;
        let dets = self.components(&map.scores);
        Ok((map, dets))
    }

    pub fn forward_frame(&self, frame: &Array3<f32>) -> Result<(ScoreMap, Vec<Detection>)> {
        self.forward(frame.mapv(f64::from).view())
    }

    pub fn detect_frame(&self, frame: &Array3<f32>) -> Result<Vec<Detection>> {
        Ok(self.forward_frame(frame)?.1)
    }

    /// Losses and their exact gradient with respect to `image`, with clean
    /// detections `clean` defining the foreground/background partition.
    pub fn loss_gradient(
        &self,
        clean: &[Detection],
        image: ArrayView3<'_, f64>,
        weights: &LossWeights,
        tau: f64,
    ) -> Result<LossBundle> {
        let (h, w, _) = image.dim();
        let partition = losses::build_partition(clean, h, w, tau);
        losses::frame_loss_gradient(self, &partition, image, weights, tau)
    }

    /// Convenience wrapper around [`losses::frame_loss_gradient`].
    pub fn loss_gradient_with_partition(
        &self,
        partition: &GroundTruthPartition,
        image: ArrayView3<'_, f64>,
        weights: &LossWeights,
    ) -> Result<LossBundle> {
        losses::frame_loss_gradient(self, partition, image, weights, self.config.confidence_threshold)
    }
}

pub(crate) fn aggregate(scores: &Array2<f64>, support: &[(usize, usize)], how: Aggregation) -> f64 {
    match how {
        Aggregation::Mean => {
            support.iter().map(|&(y, x)| scores[[y, x]]).sum::<f64>() / support.len() as f64
        }
        Aggregation::Max => support
            .iter()
            .map(|&(y, x)| scores[[y, x]])
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `∂ξ/∂s` restricted to the (frozen) support: `(pixel, weight)` pairs.
pub(crate) fn aggregate_grad(
    scores: &Array2<f64>,
    support: &[(usize, usize)],
    how: Aggregation,
) -> Vec<((usize, usize), f64)> {
    match how {
        Aggregation::Mean => {
            let wgt = 1.0 / support.len() as f64;
            support.iter().map(|&p| (p, wgt)).collect()
        }
        Aggregation::Max => {
            let best = support
                .iter()
                .copied()
                .max_by(|a, b| scores[*a].total_cmp(&scores[*b]).then(b.cmp(a)))
                .expect("components are non-empty");
            vec![(best, 1.0)]
        }
    }
}
