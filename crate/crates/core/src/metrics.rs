//! Attack evaluation metrics.
//!
//! `IoU_t` is the plain double sum of pairwise IoUs between clean and
//! adversarial boxes of a frame. There is no matching step, so it can exceed 1
//! when several boxes overlap.

use ndarray::{Array3, Axis};
use rayon::prelude::*;

use crate::detector::Detector;
use crate::scene::FrameSequence;
use crate::spectral;
use crate::{Error, Result};

/// Half-open integer pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Argument(format!(
                "degenerate box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub(crate) fn new_unchecked(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        debug_assert!(x0 < x1 && y0 < y1);
        BBox { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn area(&self) -> i64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn translate(&self, dx: i64, dy: i64) -> BBox {
        BBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::Argument(format!("degenerate box {bx:?}")));
        }
    }
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok(inter as f64 / union as f64)
}

/// `IoU_t = Σ_i Σ_j IoU(clean_i, adv_j)`.
pub fn iou_frame(clean: &[BBox], adv: &[BBox]) -> Result<f64> {
    let mut total = 0.0;
    for a in clean {
        for b in adv {
            total += iou(a, b)?;
        }
    }
    Ok(total)
}

/// Mean of the per-frame IoU sums.
pub fn iou_acc(per_frame: &[f64]) -> Result<f64> {
    if per_frame.is_empty() {
        return Err(Error::Argument("IoU_acc needs at least one frame".into()));
    }
    Ok(per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

/// Total adversarial boxes over total clean boxes.
pub fn adv_box_ratio(clean_counts: &[usize], adv_counts: &[usize]) -> Result<f64> {
    let clean: usize = clean_counts.iter().sum();
    let adv: usize = adv_counts.iter().sum();
    if clean == 0 {
        return Err(Error::Argument(
            "adversarial box ratio is undefined without clean boxes".into(),
        ));
    }
    Ok(adv as f64 / clean as f64)
}

/// `(1 / (H·W)) Σ_{i,j} Σ_c |δ_ijc|`. Channels are summed, not averaged.
pub fn mean_abs_perturbation(delta: &Array3<f64>) -> f64 {
    let (h, w, _) = delta.dim();
    delta.iter().map(|v| v.abs()).sum::<f64>() / (h * w) as f64
}

/// Scores of every method on every instance for one metric, `[method][instance]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricScores {
    pub values: Vec<Vec<f64>>,
    pub lower_is_better: bool,
}

/// Ranks of `values` (1 = best), ties share the mean of the ranks they span.
fn rank_column(values: &[f64], lower_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = values[a].total_cmp(&values[b]);
        if lower_is_better {
            ord
        } else {
            ord.reverse()
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let shared = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = shared;
        }
        start = end;
    }
    ranks
}

/// Average rank of each method over every (metric, instance) pair.
pub fn average_ranks(metrics: &[MetricScores]) -> Result<Vec<f64>> {
    let first = metrics
        .first()
        .ok_or_else(|| Error::Argument("average_ranks needs at least one metric".into()))?;
    let n_methods = first.values.len();
    if n_methods < 2 {
        return Err(Error::Argument("average_ranks needs at least two methods".into()));
    }
    let mut sums = vec![0.0; n_methods];
    let mut observations = 0usize;
    for metric in metrics {
        if metric.values.len() != n_methods {
            return Err(Error::Argument("every metric must score the same methods".into()));
        }
        let n_instances = metric.values[0].len();
        if n_instances == 0 {
            return Err(Error::Argument("average_ranks needs at least one instance".into()));
        }
        if metric.values.iter().any(|row| row.len() != n_instances) {
            return Err(Error::Argument("ragged score table".into()));
        }
        if metric.values.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::Argument("NaN score in rank table".into()));
        }
        for inst in 0..n_instances {
            let column: Vec<f64> = metric.values.iter().map(|row| row[inst]).collect();
            for (s, r) in sums.iter_mut().zip(rank_column(&column, metric.lower_is_better)) {
                *s += r;
            }
            observations += 1;
        }
    }
    Ok(sums.into_iter().map(|s| s / observations as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub iou: f64,
    pub clean_boxes: usize,
    pub adv_boxes: usize,
}

/// Aggregate and per-frame metrics of one attack run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub method: String,
    pub instance: String,
    pub config_hash: String,
    pub iou_acc: f64,
    /// IoU_acc of the clean detections against themselves; the no-attack baseline.
    pub clean_iou_acc: f64,
    pub adv_br: f64,
    pub map: f64,
    pub channel_nuclear: Vec<f64>,
    pub nuclear_norm: f64,
    pub frobenius_norm: f64,
    pub frames: Vec<FrameRecord>,
}

/// Per-channel nuclear norms and the overall Frobenius norm of `delta`.
pub fn perturbation_norms(delta: &Array3<f64>) -> Result<(Vec<f64>, f64)> {
    let nuclear = delta
        .axis_iter(Axis(2))
        .map(|ch| spectral::nuclear_norm(&ch.to_owned()))
        .collect::<Result<Vec<f64>>>()?;
    let frob = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((nuclear, frob))
}

/// Runs the detector on every clean and adversarial frame and assembles the
/// metric suite. Clean detections serve as ground truth.
pub fn evaluate_attack(
    clean: &FrameSequence,
    adv: &FrameSequence,
    delta: &Array3<f64>,
    detector: &Detector,
) -> Result<AttackReport> {
    if clean.len() != adv.len() || clean.dims() != adv.dims() {
        return Err(Error::Shape(format!(
            "clean sequence {}x{:?} and adversarial sequence {}x{:?} are not aligned",
            clean.len(),
            clean.dims(),
            adv.len(),
            adv.dims()
        )));
    }
    if delta.dim() != clean.dims() {
        return Err(Error::Shape(format!(
            "perturbation shape {:?} does not match frames {:?}",
            delta.dim(),
            clean.dims()
        )));
    }
    let boxes = |seq: &FrameSequence| -> Result<Vec<Vec<BBox>>> {
        seq.frames()
            .par_iter()
            .map(|f| Ok(detector.detect_frame(f)?.into_iter().map(|d| d.bbox).collect()))
            .collect()
    };
    let clean_boxes = boxes(clean)?;
    let adv_boxes = boxes(adv)?;

    let mut frames = Vec::with_capacity(clean.len());
    let mut clean_self = Vec::with_capacity(clean.len());
    for (b, (cb, ab)) in clean_boxes.iter().zip(&adv_boxes).enumerate() {
        frames.push(FrameRecord {
            index: b,
            iou: iou_frame(cb, ab)?,
            clean_boxes: cb.len(),
            adv_boxes: ab.len(),
        });
        clean_self.push(iou_frame(cb, cb)?);
    }
    let per_frame: Vec<f64> = frames.iter().map(|f| f.iou).collect();
    let clean_counts: Vec<usize> = frames.iter().map(|f| f.clean_boxes).collect();
    let adv_counts: Vec<usize> = frames.iter().map(|f| f.adv_boxes).collect();
    let (channel_nuclear, frobenius_norm) = perturbation_norms(delta)?;
    Ok(AttackReport {
        method: String::new(),
        instance: String::new(),
        config_hash: String::new(),
        iou_acc: iou_acc(&per_frame)?,
        clean_iou_acc: iou_acc(&clean_self)?,
        adv_br: adv_box_ratio(&clean_counts, &adv_counts)?,
        map: mean_abs_perturbation(delta),
        nuclear_norm: channel_nuclear.iter().sum(),
        channel_nuclear,
        frobenius_norm,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: i64, y0: i64, x1: i64, y1: i64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0, 0, 2, 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &bx(5, 5, 6, 6)).unwrap(), 0.0);
        // intersection 1, union 4 + 4 - 1
        assert!((iou(&a, &bx(1, 1, 3, 3)).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        // touching edges share no pixels
        assert_eq!(iou(&a, &bx(2, 0, 4, 2)).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::new(1, 0, 1, 3).is_err());
        let bad = BBox { x0: 3, y0: 0, x1: 1, y1: 2 };
        assert!(iou(&bad, &bx(0, 0, 1, 1)).is_err());
    }

    #[test]
    fn iou_frame_examples() {
        let a = bx(0, 0, 4, 2);
        assert_eq!(iou_frame(&[a], &[]).unwrap(), 0.0);
        assert_eq!(iou_frame(&[a], &[a]).unwrap(), 1.0);
        // Both clean boxes overlap the adversarial box with IoU 1/2.
        let adv = bx(0, 0, 4, 4);
        let c1 = bx(0, 0, 4, 2);
        let c2 = bx(0, 2, 4, 4);
        assert_eq!(iou(&c1, &adv).unwrap(), 0.5);
        assert_eq!(iou(&c2, &adv).unwrap(), 0.5);
        assert_eq!(iou_frame(&[c1, c2], &[adv]).unwrap(), 1.0);
    }

    #[test]
    fn iou_acc_examples() {
        assert_eq!(iou_acc(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(iou_acc(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((iou_acc(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-15);
        assert!(iou_acc(&[]).is_err());
    }

    #[test]
    fn adv_box_ratio_examples() {
        assert_eq!(adv_box_ratio(&[2, 2], &[1, 0]).unwrap(), 0.25);
        assert_eq!(adv_box_ratio(&[3, 1], &[2, 2]).unwrap(), 1.0);
        assert_eq!(adv_box_ratio(&[3, 1], &[0, 0]).unwrap(), 0.0);
        assert!(adv_box_ratio(&[0, 0], &[1, 0]).is_err());
    }

    #[test]
    fn map_examples() {
        assert_eq!(mean_abs_perturbation(&Array3::zeros((4, 5, 3))), 0.0);
        assert_eq!(mean_abs_perturbation(&Array3::from_elem((4, 5, 3), 0.5)), 1.5);
        let d = Array3::from_shape_fn((3, 2, 2), |(i, j, c)| (i as f64 - 1.0) * (j as f64 + 1.0) * if c == 0 { 1.0 } else { -2.0 });
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..2 {
                for c in 0..2 {
                    expected += d[[i, j, c]].abs();
                }
            }
        }
        assert_eq!(mean_abs_perturbation(&d), expected / 6.0);
    }

    #[test]
    fn rank_examples() {
        let two = MetricScores {
            values: vec![vec![0.1, 0.2, 0.3], vec![0.5, 0.6, 0.7]],
            lower_is_better: true,
        };
        assert_eq!(average_ranks(&[two]).unwrap(), vec![1.0, 2.0]);

        let tied = MetricScores {
            values: vec![vec![1.0, 2.0]; 4],
            lower_is_better: true,
        };
        assert_eq!(average_ranks(&[tied]).unwrap(), vec![2.5; 4]);

        // Hand-ranked: instance 0 -> (1, 2, 3); instance 1 -> (3, 1, 2);
        // instance 2 ties methods 0 and 2 at the top -> (1.5, 3, 1.5).
        let table = MetricScores {
            values: vec![vec![0.1, 0.9, 0.2], vec![0.5, 0.3, 0.8], vec![0.7, 0.4, 0.2]],
            lower_is_better: true,
        };
        let r = average_ranks(&[table]).unwrap();
        let expected = [(1.0 + 3.0 + 1.5) / 3.0, (2.0 + 1.0 + 3.0) / 3.0, (3.0 + 2.0 + 1.5) / 3.0];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_direction_and_errors() {
        let higher = MetricScores {
            values: vec![vec![0.9], vec![0.1]],
            lower_is_better: false,
        };
        assert_eq!(average_ranks(&[higher]).unwrap(), vec![1.0, 2.0]);
        let nan = MetricScores {
            values: vec![vec![f64::NAN], vec![0.1]],
            lower_is_better: true,
        };
        assert!(average_ranks(&[nan]).is_err());
        let single = MetricScores {
            values: vec![vec![0.1]],
            lower_is_better: true,
        };
        assert!(average_ranks(&[single]).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-20i64..20, -20i64..20, 1i64..15, 1i64..15).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn iou_frame_grows_with_adversarial_boxes(
            clean in proptest::collection::vec(arb_box(), 0..4),
            adv in proptest::collection::vec(arb_box(), 0..4),
            extra in arb_box(),
        ) {
            prop_assert_eq!(iou_frame(&clean, &[]).unwrap(), 0.0);
            let before = iou_frame(&clean, &adv).unwrap();
            let mut more = adv.clone();
            more.push(extra);
            prop_assert!(iou_frame(&clean, &more).unwrap() >= before);
        }

        #[test]
        fn map_is_absolutely_homogeneous(c in -5.0f64..5.0, seed in 0u64..1000) {
            let d = Array3::from_shape_fn((3, 4, 2), |(i, j, k)| ((seed as f64 + (i * 8 + j * 2 + k) as f64) * 0.37).sin());
            let lhs = mean_abs_perturbation(&d.mapv(|v| c * v));
            let rhs = c.abs() * mean_abs_perturbation(&d);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }

        #[test]
        fn adv_box_ratio_of_self_is_one(counts in proptest::collection::vec(0usize..5, 1..6)) {
            prop_assume!(counts.iter().sum::<usize>() > 0);
            prop_assert_eq!(adv_box_ratio(&counts, &counts).unwrap(), 1.0);
        }

        #[test]
        fn ranks_sum_to_triangular_number(
            m in 2usize..6,
            n in 1usize..5,
            seed in 0u64..10_000,
        ) {
            // Coarse values so ties are common.
            let values: Vec<Vec<f64>> = (0..m)
                .map(|i| (0..n).map(|j| ((seed as usize * 7 + i * 13 + j * 29) % 4) as f64).collect())
                .collect();
            let ranks = average_ranks(&[MetricScores { values, lower_is_better: true }]).unwrap();
            let total: f64 = ranks.iter().sum();
            prop_assert!((total - (m * (m + 1)) as f64 / 2.0).abs() < 1e-9);
        }
    }
}
