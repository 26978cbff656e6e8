//! Segmentation and correspondence evaluation.
//!
//! Segmentation metrics are computed inside a region mask (normally the
//! degradation rectangle): a confusion matrix, per-class IoU, mean IoU and
//! mean per-class accuracy. Classes absent from both prediction and truth
//! within the region are skipped, not zero-counted, so a class that never
//! occurs cannot dilute the mean.

use crate::error::{Error, Result};
use crate::fuse::CorrespondenceMap;

/// Row-major `classes x classes` confusion counts: `counts[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn zeros(classes: usize) -> Confusion {
        Confusion { classes, counts: vec![0; classes * classes] }
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate another confusion matrix into this one.
    pub fn merge(&mut self, other: &Confusion) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Count masked pixels by (truth, prediction) class pair.
pub fn confusion(pred: &[u8], truth: &[u8], region_mask: &[u8], classes: usize) -> Result<Confusion> {
    if pred.len() != truth.len() || pred.len() != region_mask.len() {
        return Err(Error::Dimension(format!(
            "confusion inputs disagree: {} vs {} vs {}",
            pred.len(),
            truth.len(),
            region_mask.len()
        )));
    }
    let mut conf = Confusion::zeros(classes);
    for ((&p, &t), &m) in pred.iter().zip(truth).zip(region_mask) {
        if m == 0 {
            continue;
        }
        if (p as usize) < classes && (t as usize) < classes {
            conf.counts[t as usize * classes + p as usize] += 1;
        } else {
            return Err(Error::Dimension(format!(
                "class id out of range: truth {t}, pred {p}, classes {classes}"
            )));
        }
    }
    Ok(conf)
}

/// Per-class IoU plus the two summary numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    /// `None` when the class is absent from both prediction and truth.
    pub iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    /// Mean per-class recall over classes present in truth.
    pub mean_accuracy: f64,
}

/// IoU per class (skipping classes absent from both sides), mean IoU, and
/// mean per-class accuracy.
pub fn iou_per_class(conf: &Confusion) -> ClassScores {
    let c = conf.classes;
    let mut iou = Vec::with_capacity(c);
    let mut recalls = Vec::new();
    for k in 0..c {
        let tp = conf.at(k, k);
        let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| conf.at(k, p)).sum();
        let fp: u64 = (0..c).filter(|&t| t != k).map(|t| conf.at(t, k)).sum();
        let denom = tp + fp + fn_;
        iou.push(if denom == 0 { None } else { Some(tp as f64 / denom as f64) });
        if tp + fn_ > 0 {
            recalls.push(tp as f64 / (tp + fn_) as f64);
        }
    }
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    ClassScores {
        mean_iou: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        mean_accuracy: if recalls.is_empty() { 0.0 } else { recalls.iter().sum::<f64>() / recalls.len() as f64 },
        iou,
    }
}

/// Fraction of cells whose predicted channel (match cell or no-match)
/// equals the ground truth.
pub fn correspondence_accuracy(pred: &CorrespondenceMap, gt: &[u16]) -> Result<f64> {
    let labels = pred.channel_labels();
    correspondence_accuracy_masked(&labels, gt, None)
}

/// Same as [`correspondence_accuracy`], restricted to cells where the mask
/// is nonzero (when given).
pub fn correspondence_accuracy_masked(pred: &[u16], gt: &[u16], mask: Option<&[u8]>) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "correspondence labels disagree: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, (&p, &t)) in pred.iter().zip(gt).enumerate() {
        if let Some(m) = mask {
            if m[i] == 0 {
                continue;
            }
        }
        total += 1;
        if p == t {
            hits += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

// ── Reporting ─────────────────────────────────────────────────────────────

/// One method's scores, as rendered in the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub mean_accuracy: f64,
    pub mean_iou: f64,
    pub class_iou: Vec<Option<f64>>,
}

/// Class display names; the default 5-class palette mirrors a street scene.
pub fn class_names(classes: usize) -> Vec<String> {
    const NAMED: [&str; 5] = ["road", "building", "bus", "car", "truck"];
    (0..classes)
        .map(|c| if classes == NAMED.len() { NAMED[c].to_string() } else { format!("class{c}") })
        .collect()
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", 100.0 * x),
        None => "-".to_string(),
    }
}

/// Render rows as an aligned plain-text table (percentages, two decimals).
pub fn render_table(rows: &[MethodRow], classes: usize) -> String {
    let names = class_names(classes);
    let mut header = vec!["method".to_string(), "mean_acc".to_string(), "mean_iou".to_string()];
    header.extend(names.iter().map(|n| format!("iou_{n}")));
    let mut body: Vec<Vec<String>> = vec![header];
    for row in rows {
        let mut line = vec![
            row.method.clone(),
            format!("{:.2}", 100.0 * row.mean_accuracy),
            format!("{:.2}", 100.0 * row.mean_iou),
        ];
        line.extend(row.class_iou.iter().map(|&v| fmt_cell(v)));
        body.push(line);
    }
    let cols = body[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| body.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &body {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{:>width$}", cell, width = widths[c]));
        }
        out.push('\n');
    }
    out
}

/// Render rows as comma-separated lines with a header.
pub fn render_csv(rows: &[MethodRow], classes: usize) -> String {
    let names = class_names(classes);
    let mut out = String::from("method,mean_accuracy,mean_iou");
    for n in &names {
        out.push_str(&format!(",iou_{n}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4}",
            row.method,
            100.0 * row.mean_accuracy,
            100.0 * row.mean_iou
        ));
        for v in &row.class_iou {
            match v {
                Some(x) => out.push_str(&format!(",{:.4}", 100.0 * x)),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Parse rows previously written by [`render_csv`].
pub fn parse_csv_rows(text: &str) -> Result<Vec<MethodRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Config(format!("metrics csv line {} too short: `{line}`", i + 1)));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map(|v| v / 100.0)
                .map_err(|_| Error::Config(format!("bad metrics value `{s}`")))
        };
        let class_iou = fields[3..]
            .iter()
            .map(|s| if s.is_empty() { Ok(None) } else { num(s).map(Some) })
            .collect::<Result<Vec<_>>>()?;
        rows.push(MethodRow {
            method: fields[0].to_string(),
            mean_accuracy: num(fields[1])?,
            mean_iou: num(fields[2])?,
            class_iou,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_through_parse() {
        let rows = vec![MethodRow {
            method: "Inpainting".into(),
            mean_accuracy: 0.37085,
            mean_iou: 0.31175,
            class_iou: vec![Some(0.7434), None, Some(0.0552), Some(0.839)],
        }];
        let text = render_csv(&rows, 4);
        let back = parse_csv_rows(&text).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].method, "Inpainting");
        assert!((back[0].mean_iou - rows[0].mean_iou).abs() < 1e-5);
        assert_eq!(back[0].class_iou[1], None);
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let truth = vec![0u8, 1, 2, 1, 0, 2];
        let mask = vec![1u8; 6];
        let conf = confusion(&truth, &truth, &mask, 3).unwrap();
        assert_eq!(conf.total(), 6);
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(conf.at(t, p), if t == p { truth.iter().filter(|&&x| x == t as u8).count() as u64 } else { 0 });
            }
        }
        let scores = iou_per_class(&conf);
        assert_eq!(scores.mean_iou, 1.0);
        assert_eq!(scores.mean_accuracy, 1.0);
        assert!(scores.iou.iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn empty_mask_gives_zero_matrix() {
        let conf = confusion(&[0, 1], &[1, 0], &[0, 0], 2).unwrap();
        assert_eq!(conf.total(), 0);
    }

    #[test]
    fn two_class_toy_counts() {
        // truth [0,0,1,1], pred [0,1,1,1]: counts [[1,1],[0,2]].
        let conf = confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], &[1; 4], 2).unwrap();
        assert_eq!(conf.counts, vec![1, 1, 0, 2]);
    }

    #[test]
    fn iou_from_tp_fp_fn() {
        // TP=3, FP=1, FN=1 for class 0: IoU = 3/5.
        let mut conf = Confusion::zeros(2);
        conf.counts = vec![3, 1, 1, 10];
        let scores = iou_per_class(&conf);
        assert!((scores.iou[0].unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_skipped_not_zeroed() {
        // Class 2 never appears in truth or pred: excluded from the mean.
        let mut conf = Confusion::zeros(3);
        conf.counts = vec![4, 0, 0, 0, 4, 0, 0, 0, 0];
        let scores = iou_per_class(&conf);
        assert_eq!(scores.iou[2], None);
        assert_eq!(scores.mean_iou, 1.0);
        assert_eq!(scores.mean_accuracy, 1.0);
    }

    #[test]
    fn confusion_counts_equal_masked_pixels() {
        let pred = vec![0u8, 1, 2, 0, 1, 2, 0, 1];
        let truth = vec![0u8, 0, 2, 1, 1, 1, 0, 2];
        let mask = vec![1u8, 0, 1, 1, 0, 1, 1, 1];
        let conf = confusion(&pred, &truth, &mask, 3).unwrap();
        let masked: u64 = mask.iter().map(|&m| m as u64).sum();
        assert_eq!(conf.total(), masked);
    }

    #[test]
    fn iou_is_relabeling_equivariant() {
        let pred = vec![0u8, 1, 2, 0, 1, 2, 2, 1];
        let truth = vec![0u8, 0, 2, 1, 1, 2, 2, 0];
        let mask = vec![1u8; 8];
        let base = iou_per_class(&confusion(&pred, &truth, &mask, 3).unwrap());
        // Relabel classes with the cycle 0->1->2->0 in both inputs.
        let relabel = |v: &[u8]| -> Vec<u8> { v.iter().map(|&c| (c + 1) % 3).collect() };
        let cycled = iou_per_class(&confusion(&relabel(&pred), &relabel(&truth), &mask, 3).unwrap());
        for c in 0..3 {
            assert_eq!(base.iou[c], cycled.iou[(c + 1) % 3]);
        }
        assert!((base.mean_iou - cycled.mean_iou).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_pixels_outside_the_mask() {
        let pred = vec![0u8, 0, 1, 1];
        let truth = vec![0u8, 0, 1, 1];
        let mask = vec![1u8, 1, 0, 0];
        let a = iou_per_class(&confusion(&pred, &truth, &mask, 2).unwrap());
        let pred_b = vec![0u8, 0, 0, 0]; // changed only outside the mask
        let b = iou_per_class(&confusion(&pred_b, &truth, &mask, 2).unwrap());
        assert_eq!(a.mean_iou, b.mean_iou);
    }

    #[test]
    fn correspondence_accuracy_cases() {
        let gt: Vec<u16> = vec![0, 1, 2, 3];
        assert_eq!(correspondence_accuracy_masked(&gt, &gt, None).unwrap(), 1.0);
        let all_no_match = vec![4u16; 4];
        assert_eq!(correspondence_accuracy_masked(&all_no_match, &gt, None).unwrap(), 0.0);
        let half = vec![0u16, 1, 9, 9];
        assert_eq!(correspondence_accuracy_masked(&half, &gt, None).unwrap(), 0.5);
        let masked = correspondence_accuracy_masked(&half, &gt, Some(&[1, 1, 0, 0])).unwrap();
        assert_eq!(masked, 1.0);
    }

    #[test]
    fn random_correspondence_sits_near_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let channels = 65u16;
        let n = 200_000;
        let gt: Vec<u16> = (0..n).map(|_| rng.gen_range(0..channels)).collect();
        let pred: Vec<u16> = (0..n).map(|_| rng.gen_range(0..channels)).collect();
        let acc = correspondence_accuracy_masked(&pred, &gt, None).unwrap();
        let chance = 1.0 / channels as f64;
        assert!((acc - chance).abs() < 0.25 * chance, "acc {acc} vs chance {chance}");
    }

    #[test]
    fn render_formats_two_decimal_percent_columns() {
        let rows = vec![MethodRow {
            method: "MAIN".into(),
            mean_accuracy: 0.5283,
            mean_iou: 0.4634,
            class_iou: vec![Some(0.8310), Some(0.3055), Some(0.3208), Some(0.8886), None],
        }];
        let table = render_table(&rows, 5);
        assert!(table.contains("52.83"), "{table}");
        assert!(table.contains("46.34"), "{table}");
        assert!(table.contains("83.10"), "{table}");
        assert!(table.lines().count() == 2);
        let csv = render_csv(&rows, 5);
        assert!(csv.contains("MAIN,52.8300,46.3400"), "{csv}");
        assert!(csv.ends_with('\n'));
    }
}
