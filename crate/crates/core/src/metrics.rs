//! Detection accuracy, ROC-AUC and mean class-wise IoU.

use std::io::Write;

use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::vd::BinaryMask;

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(dim_err!("{} predictions for {} labels", preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Runs in O(N log N) by ranking.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(dim_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {bad} is not comparable")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract(format!("AUC undefined with {pos} positives and {neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled average ranks keep the arithmetic in integers.
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u64; // twice the mean 1-based rank
        rank_sum2 += avg2 * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Brute-force pair enumeration, kept as the reference for [`auc`].
pub fn auc_pairs(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract("AUC needs both classes".into()));
    }
    let mut twice = 0u64;
    for p in &pos {
        for n in &neg {
            twice += if p > n { 2 } else if p == n { 1 } else { 0 };
        }
    }
    Ok(twice as f64 / (2 * pos.len() * neg.len()) as f64)
}

/// Mean over the two classes of per-class IoU; a class absent from both
/// maps scores 1.
pub fn miou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(dim_err!(
            "mask {}×{} vs ground truth {}×{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    let mut total = 0.0;
    for class in [0u8, 1] {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (a, b) = (p == class, g == class);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / 2.0)
}

/// Per-sample mIoU averaged over samples.
pub fn mean_miou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(dim_err!("{} predicted masks for {} ground truths", preds.len(), gts.len()));
    }
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        sum += miou(p, g)?;
    }
    Ok(sum / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc: f64,
    /// `None` when the evaluated set holds a single class.
    pub auc: Option<f64>,
    pub miou: f64,
    pub n: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "dataset,split,acc,auc,miou,n";

    pub fn write_csv(&self, out: &mut impl Write, dataset: &str, split: &str) -> std::io::Result<()> {
        let auc = self.auc.map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
        writeln!(out, "{dataset},{split},{:.6},{auc},{:.6},{}", self.acc, self.miou, self.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, data: &[u8]) -> BinaryMask {
        BinaryMask {
            height: h,
            width: w,
            data: data.to_vec(),
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 1, 1, 0]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1, f64::NAN], &[1, 0]).is_err());
    }

    #[test]
    fn miou_examples() {
        let gt = mask(2, 2, &[1, 1, 0, 0]);
        assert_eq!(miou(&gt, &gt).unwrap(), 1.0);
        let pred = mask(2, 2, &[1, 0, 0, 0]);
        assert!((miou(&pred, &gt).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        let inverted = mask(2, 2, &[0, 0, 1, 1]);
        assert_eq!(miou(&inverted, &gt).unwrap(), 0.0);
        // all-real pair: class 1 absent from both
        let z = mask(2, 2, &[0; 4]);
        assert_eq!(miou(&z, &z).unwrap(), 1.0);
        assert!(miou(&mask(1, 4, &[0; 4]), &gt).is_err());
    }

    #[test]
    fn report_csv_line() {
        let r = MetricsReport {
            acc: 1.0,
            auc: Some(0.75),
            miou: 0.5,
            n: 4,
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf, "train", "all").unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "train,all,1.000000,0.750000,0.500000,4\n");
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (2usize..=64).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..8).prop_map(|k| k as f64 / 8.0), n),
                prop::collection::vec(0usize..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn ranked_auc_equals_pair_count((scores, labels) in scored()) {
            let both = labels.contains(&0) && labels.contains(&1);
            prop_assume!(both);
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc_pairs(&scores, &labels).unwrap());
        }

        #[test]
        fn flipped_scores_complement_without_ties(
            labels in prop::collection::vec(0usize..2, 2..40),
            seed in any::<u64>(),
        ) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            // distinct scores: 7919 is prime, so i -> 7919·i + seed is a bijection mod n
            let n = labels.len() as u64;
            let scores: Vec<f64> = (0..n).map(|i| ((7919 * i + seed % n) % n) as f64).collect();
            let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = auc(&scores, &labels).unwrap();
            let b = auc(&flipped, &labels).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn miou_is_symmetric(a in prop::collection::vec(0u8..2, 16), b in prop::collection::vec(0u8..2, 16)) {
            let (x, y) = (mask(4, 4, &a), mask(4, 4, &b));
            prop_assert_eq!(miou(&x, &y).unwrap(), miou(&y, &x).unwrap());
        }
    }
}
