//! Evaluation metrics for dense label anticipation.
//!
//! * Mean-over-classes accuracy (`moc`): per-class frame accuracy averaged
//!   over the classes actually present in the ground-truth region, in
//!   percent. Insensitive to class imbalance inside the region.
//! * Sample-set diversity (`mfss_one`): mean pairwise frame disagreement of
//!   a set of sampled futures, in percent. Zero means all samples agree
//!   everywhere; it measures how multi-modal the predictor believes the
//!   future is.
//! * Quartile table: videos bucketed by observed-window diversity, exposing
//!   whether uncertainty in the observation predicts degraded anticipation.

use crate::tensor::NumericsError;
use serde::Serialize;
use std::ops::Range;

fn invalid(op: &'static str, detail: String) -> NumericsError {
    NumericsError::InvalidArgument { op, detail }
}

fn check_region(
    op: &'static str,
    len: usize,
    region: &Range<usize>,
) -> Result<(), NumericsError> {
    if region.start >= region.end || region.end > len {
        return Err(invalid(
            op,
            format!("region {region:?} does not fit a {len}-frame sequence"),
        ));
    }
    Ok(())
}

/// Mean-over-classes accuracy of `pred` against `gt` on `region`, percent.
pub fn moc(pred: &[usize], gt: &[usize], region: Range<usize>) -> Result<f64, NumericsError> {
    if pred.len() != gt.len() {
        return Err(invalid(
            "moc",
            format!("{} predictions for {} labels", pred.len(), gt.len()),
        ));
    }
    check_region("moc", gt.len(), &region)?;
    let classes = 1 + gt[region.clone()].iter().max().expect("non-empty region");
    let mut total = vec![0usize; classes];
    let mut correct = vec![0usize; classes];
    for f in region {
        total[gt[f]] += 1;
        correct[gt[f]] += (pred[f] == gt[f]) as usize;
    }
    let mut acc_sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        if total[c] > 0 {
            acc_sum += correct[c] as f64 / total[c] as f64;
            present += 1;
        }
    }
    Ok(acc_sum / present as f64 * 100.0)
}

/// Scores a set of sampled label sequences against the ground truth on a
/// region: returns `(mean, best)` of the per-sample accuracy in percent.
/// The gap between best and mean is the payoff of drawing several samples
/// when the future is ambiguous.
pub fn evaluate_samples(
    samples: &[Vec<usize>],
    gt: &[usize],
    region: Range<usize>,
) -> Result<(f64, f64), NumericsError> {
    if samples.is_empty() {
        return Err(invalid("evaluate_samples", "need at least one sample".into()));
    }
    let mut sum = 0.0;
    let mut best = f64::NEG_INFINITY;
    for s in samples {
        let v = moc(s, gt, region.clone())?;
        sum += v;
        best = best.max(v);
    }
    Ok((sum / samples.len() as f64, best))
}

/// Mean pairwise frame disagreement of a sample set on a region, percent:
/// `(2 / (M (M-1))) * sum_{i<j} 100 * (1 - agreement_fraction(i, j))`.
/// Needs at least two samples.
pub fn mfss_one(samples: &[Vec<usize>], region: Range<usize>) -> Result<f64, NumericsError> {
    let m = samples.len();
    if m < 2 {
        return Err(invalid(
            "mfss",
            format!("diversity needs >= 2 samples, got {m}"),
        ));
    }
    for s in samples {
        check_region("mfss", s.len(), &region)?;
        if s.len() != samples[0].len() {
            return Err(invalid("mfss", "samples have different lengths".into()));
        }
    }
    let frames = (region.end - region.start) as f64;
    let mut sum = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let agree = region
                .clone()
                .filter(|&f| samples[i][f] == samples[j][f])
                .count();
            sum += 100.0 * (1.0 - agree as f64 / frames);
        }
    }
    Ok(sum * 2.0 / (m as f64 * (m - 1) as f64))
}

/// Per-video numbers feeding the quartile table.
#[derive(Debug, Clone, Serialize)]
pub struct VideoSummary {
    pub id: String,
    pub observed_mfss: f64,
    pub future_mfss: f64,
    pub future_mean_moc: f64,
}

/// One rank bucket of the quartile table.
#[derive(Debug, Clone, Serialize)]
pub struct QuartileBucket {
    pub count: usize,
    pub mean_observed_mfss: f64,
    pub mean_future_mfss: f64,
    pub mean_future_moc: f64,
}

/// Videos ranked by observed-window diversity and cut into four contiguous
/// buckets (sizes as equal as possible, earlier buckets take the remainder).
#[derive(Debug, Clone, Serialize)]
pub struct QuartileTable {
    pub buckets: Vec<QuartileBucket>,
}

/// Builds the quartile table; requires at least four videos. Sorting is
/// stable and ascending in observed diversity, so the first bucket holds the
/// most confidently observed videos.
pub fn quartile_report(videos: &[VideoSummary]) -> Result<QuartileTable, NumericsError> {
    let z = videos.len();
    if z < 4 {
        return Err(invalid(
            "quartile_report",
            format!("need >= 4 videos, got {z}"),
        ));
    }
    let mut order: Vec<usize> = (0..z).collect();
    order.sort_by(|&a, &b| {
        videos[a]
            .observed_mfss
            .partial_cmp(&videos[b].observed_mfss)
            .expect("metric values are finite")
    });

    let base = z / 4;
    let rem = z % 4;
    let mut buckets = Vec::with_capacity(4);
    let mut start = 0;
    for i in 0..4 {
        let size = base + usize::from(i < rem);
        let members = &order[start..start + size];
        start += size;
        let mean = |f: fn(&VideoSummary) -> f64| {
            members.iter().map(|&v| f(&videos[v])).sum::<f64>() / size as f64
        };
        buckets.push(QuartileBucket {
            count: size,
            mean_observed_mfss: mean(|v| v.observed_mfss),
            mean_future_mfss: mean(|v| v.future_mfss),
            mean_future_moc: mean(|v| v.future_mean_moc),
        });
    }
    Ok(QuartileTable { buckets })
}

impl std::fmt::Display for QuartileTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<10} {:>6} {:>14} {:>12} {:>12}",
            "quartile", "count", "obs diversity", "fut moc", "fut diversity"
        )?;
        for (i, b) in self.buckets.iter().enumerate() {
            writeln!(
                f,
                "{:<10} {:>6} {:>14.2} {:>12.2} {:>12.2}",
                format!("q{}", i + 1),
                b.count,
                b.mean_observed_mfss,
                b.mean_future_moc,
                b.mean_future_mfss
            )?;
        }
        Ok(())
    }
}

/// Spearman rank correlation of two equal-length samples; ties receive the
/// average of the ranks they span.
pub fn spearman_rank_correlation(x: &[f64], y: &[f64]) -> Result<f64, NumericsError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid(
            "spearman",
            format!("need two equal samples of >= 2 values, got {} and {}", x.len(), y.len()),
        ));
    }
    let rx = average_ranks(x)?;
    let ry = average_ranks(y)?;
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let (mut dx2, mut dy2) = (0.0, 0.0);
    for i in 0..x.len() {
        let (a, b) = (rx[i] - mean, ry[i] - mean);
        num += a * b;
        dx2 += a * a;
        dy2 += b * b;
    }
    if dx2 == 0.0 || dy2 == 0.0 {
        return Err(invalid("spearman", "one sample is constant".into()));
    }
    Ok(num / (dx2 * dy2).sqrt())
}

fn average_ranks(values: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite { op: "spearman" });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks; a tie group shares the average of its span.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    Ok(ranks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moc_averages_per_class_accuracy() {
        // Class 0: 2/2 correct. Class 1: 1/2. Mean = 0.75 -> 75%.
        let gt = vec![0, 0, 1, 1];
        let pred = vec![0, 0, 1, 0];
        assert_eq!(moc(&pred, &gt, 0..4).unwrap(), 75.0);
        // Perfect and all-wrong extremes.
        assert_eq!(moc(&gt, &gt, 0..4).unwrap(), 100.0);
        assert_eq!(moc(&[2, 2, 0, 0], &gt, 0..4).unwrap(), 0.0);
    }

    #[test]
    fn moc_only_counts_classes_inside_the_region() {
        // Region covers only the class-1 frames; class 0 must not dilute it.
        let gt = vec![0, 0, 1, 1];
        let pred = vec![1, 1, 1, 1];
        assert_eq!(moc(&pred, &gt, 2..4).unwrap(), 100.0);
        // Predicting classes absent from the region only hurts via misses.
        let pred = vec![0, 0, 3, 1];
        assert_eq!(moc(&pred, &gt, 2..4).unwrap(), 50.0);
    }

    #[test]
    fn moc_validates_region_and_lengths() {
        assert!(moc(&[0], &[0, 1], 0..2).is_err());
        assert!(moc(&[0, 1], &[0, 1], 0..3).is_err());
        assert!(moc(&[0, 1], &[0, 1], 1..1).is_err());
    }

    #[test]
    fn sample_scores_report_mean_and_best() {
        let gt = vec![0; 5];
        // 2/5 and 3/5 correct: 40% and 60%.
        let samples = vec![vec![0, 0, 1, 1, 1], vec![0, 0, 0, 1, 1]];
        let (mean, best) = evaluate_samples(&samples, &gt, 0..5).unwrap();
        assert!((mean - 50.0).abs() < 1e-12);
        assert!((best - 60.0).abs() < 1e-12);
        assert!(evaluate_samples(&[], &gt, 0..5).is_err());
    }

    #[test]
    fn diversity_counts_pairwise_disagreement() {
        // Two samples differing on one of four frames: 25%.
        let samples = vec![vec![0, 0, 1, 1], vec![0, 0, 1, 0]];
        assert_eq!(mfss_one(&samples, 0..4).unwrap(), 25.0);
        // Identical samples have zero diversity; disjoint ones score 100.
        assert_eq!(mfss_one(&[vec![1, 2], vec![1, 2]], 0..2).unwrap(), 0.0);
        assert_eq!(mfss_one(&[vec![1, 2], vec![2, 1]], 0..2).unwrap(), 100.0);
        // Three samples: pairs (a,b) 50%, (a,c) 100%, (b,c) 50%.
        let three = vec![vec![0, 0], vec![0, 1], vec![1, 1]];
        assert!((mfss_one(&three, 0..2).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!(mfss_one(&[vec![0, 1]], 0..2).is_err());
    }

    #[test]
    fn quartiles_cut_by_rank_with_remainder_up_front() {
        let videos: Vec<VideoSummary> = (0..10)
            .map(|i| VideoSummary {
                id: format!("v{i}"),
                // Descending observed diversity so sorting must reorder.
                observed_mfss: (9 - i) as f64 * 10.0,
                future_mfss: i as f64,
                future_mean_moc: i as f64 * 5.0,
            })
            .collect();
        let table = quartile_report(&videos).unwrap();
        let counts: Vec<usize> = table.buckets.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![3, 3, 2, 2]);
        // After the ascending sort, bucket 1 holds videos 9, 8, 7 (observed 0, 10, 20).
        assert!((table.buckets[0].mean_observed_mfss - 10.0).abs() < 1e-12);
        assert!((table.buckets[0].mean_future_moc - 40.0).abs() < 1e-12);
        // Monotone increasing observed diversity across buckets.
        for w in table.buckets.windows(2) {
            assert!(w[0].mean_observed_mfss < w[1].mean_observed_mfss);
        }
        assert!(quartile_report(&videos[..3]).is_err());
    }

    #[test]
    fn quartile_sizes_for_exact_multiples() {
        let videos: Vec<VideoSummary> = (0..8)
            .map(|i| VideoSummary {
                id: format!("v{i}"),
                observed_mfss: i as f64,
                future_mfss: 0.0,
                future_mean_moc: 0.0,
            })
            .collect();
        let counts: Vec<usize> = quartile_report(&videos)
            .unwrap()
            .buckets
            .iter()
            .map(|b| b.count)
            .collect();
        assert_eq!(counts, vec![2, 2, 2, 2]);
    }

    #[test]
    fn spearman_tracks_monotone_relations() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let up = vec![10.0, 20.0, 25.0, 40.0, 41.0];
        let down = vec![5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman_rank_correlation(&x, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman_rank_correlation(&x, &down).unwrap() + 1.0).abs() < 1e-12);
        // Ties: [1, 2, 2, 4] ranks to [1, 2.5, 2.5, 4].
        let tied = vec![1.0, 2.0, 2.0, 4.0];
        let r = average_ranks(&tied).unwrap();
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
        assert!(spearman_rank_correlation(&x, &[1.0; 5]).is_err());
        assert!(spearman_rank_correlation(&x, &down[..3]).is_err());
    }
}
