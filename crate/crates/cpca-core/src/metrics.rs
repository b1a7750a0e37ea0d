//! Confusion-matrix evaluation: per-class precision/recall/F1/IoU and the
//! aggregate overall accuracy, mean accuracy and mean IoU.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{LabelBatch, IGNORE};

/// Pixel counts with ground truth on rows and predictions on columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one prediction/ground-truth pair of equal-shaped maps. IGNORE in
    /// the ground truth skips the pixel; out-of-range values anywhere are a
    /// contract violation.
    pub fn accumulate(&mut self, pred: &LabelBatch, gt: &LabelBatch) -> Result<()> {
        if (pred.batch, pred.height, pred.width) != (gt.batch, gt.height, gt.width) {
            return Err(Error::Contract(
                "confusion accumulate: shape mismatch between pred and gt".into(),
            ));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if (p as usize) >= self.num_classes {
                return Err(Error::Contract(format!(
                    "confusion accumulate: prediction {p} out of range for {} classes",
                    self.num_classes
                )));
            }
            if g == IGNORE {
                self.ignored += 1;
                continue;
            }
            if (g as usize) >= self.num_classes {
                return Err(Error::Contract(format!(
                    "confusion accumulate: ground truth {g} out of range for {} classes",
                    self.num_classes
                )));
            }
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Merge a matrix accumulated elsewhere (parallel workers).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
    }

    fn tp(&self, k: usize) -> u64 {
        self.count(k, k)
    }

    fn support(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|j| self.count(k, j)).sum()
    }

    fn predicted(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|j| self.count(j, k)).sum()
    }
}

/// Per-class scores; `None` marks an undefined ratio (no support and/or no
/// predictions), which aggregate means skip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub name: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub support: u64,
    pub predicted: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_class: Vec<ClassScores>,
    pub oa: Option<f64>,
    pub ma: Option<f64>,
    pub miou: Option<f64>,
    pub total_pixels: u64,
    pub ignored: u64,
}

/// Derive all scores from a confusion matrix. Per class k with TP, FP, FN:
/// precision TP/(TP+FP), recall TP/(TP+FN), IoU TP/(TP+FP+FN) and
/// F1 = 2 IoU/(1+IoU); overall accuracy is trace/total and mean accuracy is
/// the mean per-class recall. Classes with TP+FP+FN = 0 are undefined and
/// excluded from every mean.
pub fn scores(conf: &ConfusionMatrix, class_names: &[String]) -> MetricReport {
    assert_eq!(class_names.len(), conf.num_classes());
    let total = conf.total();
    let mut per_class = Vec::with_capacity(conf.num_classes());
    let mut trace = 0u64;
    for k in 0..conf.num_classes() {
        let tp = conf.tp(k);
        trace += tp;
        let support = conf.support(k);
        let predicted = conf.predicted(k);
        let fp = predicted - tp;
        let fn_ = support - tp;
        let denom_union = tp + fp + fn_;
        let iou = (denom_union > 0).then(|| tp as f64 / denom_union as f64);
        let f1 = iou.map(|i| 2.0 * i / (1.0 + i));
        per_class.push(ClassScores {
            name: class_names[k].clone(),
            precision: (predicted > 0).then(|| tp as f64 / predicted as f64),
            recall: (support > 0).then(|| tp as f64 / support as f64),
            f1,
            iou,
            support,
            predicted,
        });
    }
    let mean = |vals: Vec<f64>| -> Option<f64> {
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    MetricReport {
        oa: (total > 0).then(|| trace as f64 / total as f64),
        ma: mean(per_class.iter().filter_map(|c| c.recall).collect()),
        miou: mean(per_class.iter().filter_map(|c| c.iou).collect()),
        per_class,
        total_pixels: total,
        ignored: conf.ignored(),
    }
}

// ── Serialization ──────────────────────────────────────────────────────────

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "nan".to_string(),
    }
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "nan" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Contract(format!("bad metric value `{s}`")))
}

impl MetricReport {
    /// Machine-readable record; floats use shortest round-trip formatting,
    /// so `from_record(to_record())` is lossless.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# CPCA metric record").unwrap();
        writeln!(out, "version = 1").unwrap();
        writeln!(out, "total_pixels = {}", self.total_pixels).unwrap();
        writeln!(out, "ignored = {}", self.ignored).unwrap();
        writeln!(out, "oa = {}", fmt_opt(self.oa)).unwrap();
        writeln!(out, "ma = {}", fmt_opt(self.ma)).unwrap();
        writeln!(out, "miou = {}", fmt_opt(self.miou)).unwrap();
        for c in &self.per_class {
            writeln!(
                out,
                "class = {},{},{},{},{},{},{}",
                c.name,
                fmt_opt(c.precision),
                fmt_opt(c.recall),
                fmt_opt(c.f1),
                fmt_opt(c.iou),
                c.support,
                c.predicted
            )
            .unwrap();
        }
        out
    }

    pub fn from_record(text: &str) -> Result<MetricReport> {
        let bad = |reason: String| Error::Parse {
            path: Path::new("<metric record>").to_path_buf(),
            reason,
        };
        let mut total_pixels = None;
        let mut ignored = None;
        let (mut oa, mut ma, mut miou) = (None, None, None);
        let mut per_class = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "version" => {
                    if value != "1" {
                        return Err(bad(format!("unsupported record version {value}")));
                    }
                }
                "total_pixels" => total_pixels = Some(value.parse().map_err(|_| bad("bad total_pixels".into()))?),
                "ignored" => ignored = Some(value.parse().map_err(|_| bad("bad ignored".into()))?),
                "oa" => oa = parse_opt(value)?,
                "ma" => ma = parse_opt(value)?,
                "miou" => miou = parse_opt(value)?,
                "class" => {
                    let f: Vec<&str> = value.split(',').collect();
                    if f.len() != 7 {
                        return Err(bad(format!("class line needs 7 fields, got {}", f.len())));
                    }
                    per_class.push(ClassScores {
                        name: f[0].to_string(),
                        precision: parse_opt(f[1])?,
                        recall: parse_opt(f[2])?,
                        f1: parse_opt(f[3])?,
                        iou: parse_opt(f[4])?,
                        support: f[5].parse().map_err(|_| bad("bad support".into()))?,
                        predicted: f[6].parse().map_err(|_| bad("bad predicted".into()))?,
                    });
                }
                other => return Err(bad(format!("unknown record key `{other}`"))),
            }
        }
        if per_class.is_empty() {
            return Err(bad("record has no class lines".into()));
        }
        Ok(MetricReport {
            per_class,
            oa,
            ma,
            miou,
            total_pixels: total_pixels.ok_or_else(|| bad("missing total_pixels".into()))?,
            ignored: ignored.ok_or_else(|| bad("missing ignored".into()))?,
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        self.per_class.iter().map(|c| c.name.clone()).collect()
    }
}

/// Aligned comparison table: one row per run, per-class F1 columns followed
/// by OA/MA/mIoU, all in percent with two decimals. Rows sort by run name.
pub fn format_table(runs: &[(String, MetricReport)]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Empty("no metric records to tabulate".into()));
    }
    let names = runs[0].1.class_names();
    for (run, report) in runs {
        if report.class_names() != names {
            return Err(Error::Contract(format!(
                "run `{run}` has a different class list"
            )));
        }
    }
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by(|&a, &b| runs[a].0.cmp(&runs[b].0));

    let pct = |v: Option<f64>| match v {
        Some(x) => format!("{:.2}", x * 100.0),
        None => "nan".to_string(),
    };
    let mut header: Vec<String> = vec!["run".to_string()];
    header.extend(names.iter().map(|n| format!("F1:{n}")));
    header.extend(["OA", "MA", "mIoU"].map(String::from));

    let mut rows: Vec<Vec<String>> = vec![header];
    for &i in &order {
        let (run, report) = &runs[i];
        let mut row = vec![run.clone()];
        row.extend(report.per_class.iter().map(|c| pct(c.f1)));
        row.push(pct(report.oa));
        row.push(pct(report.ma));
        row.push(pct(report.miou));
        rows.push(row);
    }

    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for row in &rows {
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                write!(out, "{:<width$}", cell, width = widths[0]).unwrap();
            } else {
                write!(out, "  {:>width$}", cell, width = widths[c]).unwrap();
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn batch(vals: &[u8]) -> LabelBatch {
        LabelBatch {
            batch: 1,
            height: 1,
            width: vals.len(),
            data: vals.to_vec(),
        }
    }

    #[test]
    fn perfect_prediction_is_diagonal_with_unit_scores() {
        let mut conf = ConfusionMatrix::new(3);
        let gt = batch(&[0, 1, 2, 1, 0, 2]);
        conf.accumulate(&gt, &gt).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(conf.count(g, p), if g == p { 2 } else { 0 });
            }
        }
        let report = scores(&conf, &names(3));
        assert_eq!(report.oa, Some(1.0));
        assert_eq!(report.ma, Some(1.0));
        assert_eq!(report.miou, Some(1.0));
        for c in &report.per_class {
            assert_eq!(c.f1, Some(1.0));
        }
    }

    #[test]
    fn hand_counted_two_class_example() {
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&batch(&[0, 1, 1, 1]), &batch(&[0, 0, 1, 1])).unwrap();
        let r = scores(&conf, &names(2));
        let c0 = &r.per_class[0];
        assert_eq!(c0.precision, Some(1.0));
        assert_eq!(c0.recall, Some(0.5));
        assert!((c0.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c0.iou, Some(0.5));
        let c1 = &r.per_class[1];
        assert!((c1.precision.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c1.recall, Some(1.0));
        assert!((c1.f1.unwrap() - 0.8).abs() < 1e-15);
        assert!((c1.iou.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.oa, Some(0.75));
        assert_eq!(r.ma, Some(0.75));
        assert!((r.miou.unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn ignored_ground_truth_only_bumps_the_ignore_counter() {
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&batch(&[0, 1]), &batch(&[IGNORE, IGNORE])).unwrap();
        assert_eq!(conf.total(), 0);
        assert_eq!(conf.ignored(), 2);
    }

    #[test]
    fn accumulation_is_additive_over_images() {
        let mut one = ConfusionMatrix::new(2);
        one.accumulate(&batch(&[0, 1, 0, 1]), &batch(&[0, 0, 1, 1])).unwrap();
        let mut split = ConfusionMatrix::new(2);
        split.accumulate(&batch(&[0, 1]), &batch(&[0, 0])).unwrap();
        split.accumulate(&batch(&[0, 1]), &batch(&[1, 1])).unwrap();
        assert_eq!(one, split);
        let mut merged = ConfusionMatrix::new(2);
        let mut part = ConfusionMatrix::new(2);
        part.accumulate(&batch(&[0, 1]), &batch(&[1, 1])).unwrap();
        merged.accumulate(&batch(&[0, 1]), &batch(&[0, 0])).unwrap();
        merged.merge(&part);
        assert_eq!(one, merged);
    }

    #[test]
    fn out_of_range_values_are_contract_violations() {
        let mut conf = ConfusionMatrix::new(2);
        assert!(conf.accumulate(&batch(&[2]), &batch(&[0])).is_err());
        assert!(conf.accumulate(&batch(&[0]), &batch(&[7])).is_err());
    }

    #[test]
    fn empty_matrix_yields_undefined_aggregates() {
        let conf = ConfusionMatrix::new(3);
        let r = scores(&conf, &names(3));
        assert_eq!(r.oa, None);
        assert_eq!(r.ma, None);
        assert_eq!(r.miou, None);
        assert!(r.per_class.iter().all(|c| c.f1.is_none()));
    }

    #[test]
    fn absent_class_is_excluded_from_means() {
        let mut conf = ConfusionMatrix::new(3);
        // class 2 never appears in gt or pred
        conf.accumulate(&batch(&[0, 1, 1]), &batch(&[0, 1, 0])).unwrap();
        let r = scores(&conf, &names(3));
        assert!(r.per_class[2].f1.is_none());
        let miou = (r.per_class[0].iou.unwrap() + r.per_class[1].iou.unwrap()) / 2.0;
        assert!((r.miou.unwrap() - miou).abs() < 1e-15);
    }

    #[test]
    fn record_round_trip_on_paper_style_values() {
        // fixture mirroring a published results row (values in percent /100)
        let f1 = [0.8492, 0.9176, 0.6199, 0.7975, 0.6810, 0.6018];
        let class_names = ["imp_surf", "building", "low_veg", "tree", "car", "clutter"];
        let report = MetricReport {
            per_class: f1
                .iter()
                .zip(class_names)
                .map(|(&f1, name)| ClassScores {
                    name: name.to_string(),
                    precision: Some(f1),
                    recall: Some(f1),
                    f1: Some(f1),
                    iou: Some(f1 / (2.0 - f1)),
                    support: 1000,
                    predicted: 1000,
                })
                .collect(),
            oa: Some(0.8018),
            ma: Some(0.7694),
            miou: Some(0.6075),
            total_pixels: 6000,
            ignored: 3,
        };
        let text = report.to_record();
        let back = MetricReport::from_record(&text).unwrap();
        assert_eq!(back, report);
        let table = format_table(&[("cpca".to_string(), report)]).unwrap();
        assert!(table.contains("80.18"));
        assert!(table.contains("76.94"));
        assert!(table.contains("60.75"));
        assert!(table.contains("84.92"));
    }

    #[test]
    fn table_rows_sort_by_run_name_and_class_lists_must_match() {
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&batch(&[0, 1]), &batch(&[0, 1])).unwrap();
        let r = scores(&conf, &names(2));
        let table = format_table(&[("zeta".to_string(), r.clone()), ("alpha".to_string(), r.clone())]).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[1].starts_with("alpha"));
        assert!(lines[2].starts_with("zeta"));

        let other = scores(&ConfusionMatrix::new(3), &names(3));
        assert!(format_table(&[("a".to_string(), r), ("b".to_string(), other)]).is_err());
    }

    /// Brute-force oracle: recount TP/FP/FN by direct iteration.
    fn oracle_counts(pred: &[u8], gt: &[u8], k: usize) -> (Vec<u64>, Vec<u64>, Vec<u64>, u64) {
        let mut tp = vec![0u64; k];
        let mut fp = vec![0u64; k];
        let mut fn_ = vec![0u64; k];
        let mut ignored = 0u64;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                ignored += 1;
                continue;
            }
            if p == g {
                tp[p as usize] += 1;
            } else {
                fp[p as usize] += 1;
                fn_[g as usize] += 1;
            }
        }
        (tp, fp, fn_, ignored)
    }

    proptest! {
        #[test]
        fn scores_match_brute_force_oracle(seed in 0u64..100) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, &[40]);
            let k = rng.gen_range(2..6);
            let n = rng.gen_range(1..200);
            let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
            let gt: Vec<u8> = (0..n)
                .map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..k) as u8 })
                .collect();
            let mut conf = ConfusionMatrix::new(k);
            conf.accumulate(&batch(&pred), &batch(&gt)).unwrap();
            let (tp, fp, fn_, ignored) = oracle_counts(&pred, &gt, k);
            prop_assert_eq!(conf.ignored(), ignored);
            let report = scores(&conf, &names(k));
            for c in 0..k {
                prop_assert_eq!(conf.tp(c), tp[c]);
                prop_assert_eq!(conf.predicted(c) - conf.tp(c), fp[c]);
                prop_assert_eq!(conf.support(c) - conf.tp(c), fn_[c]);
                // identical formulas on identical integers: exact equality
                let denom = tp[c] + fp[c] + fn_[c];
                let want_iou = (denom > 0).then(|| tp[c] as f64 / denom as f64);
                prop_assert_eq!(report.per_class[c].iou, want_iou);
            }
        }

        #[test]
        fn f1_equals_two_iou_over_one_plus_iou(seed in 0u64..200) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, &[41]);
            let k = rng.gen_range(2..7);
            let mut conf = ConfusionMatrix::new(k);
            for g in 0..k {
                for p in 0..k {
                    conf.counts[g * k + p] = rng.gen_range(0..50);
                }
            }
            let report = scores(&conf, &names(k));
            for c in &report.per_class {
                if let (Some(f1), Some(iou)) = (c.f1, c.iou) {
                    prop_assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
                    // and against precision/recall when both defined
                    if let (Some(p), Some(r)) = (c.precision, c.recall) {
                        if p + r > 0.0 {
                            prop_assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
                        }
                    }
                }
            }
        }

        #[test]
        fn oa_is_the_support_weighted_mean_of_recalls(seed in 0u64..200) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, &[42]);
            let k = rng.gen_range(2..6);
            let mut conf = ConfusionMatrix::new(k);
            for g in 0..k {
                for p in 0..k {
                    conf.counts[g * k + p] = rng.gen_range(0..30);
                }
            }
            let report = scores(&conf, &names(k));
            if let Some(oa) = report.oa {
                let mut weighted = 0.0;
                let total = conf.total() as f64;
                for c in 0..k {
                    if let Some(recall) = report.per_class[c].recall {
                        weighted += recall * conf.support(c) as f64 / total;
                    }
                }
                prop_assert!((oa - weighted).abs() < 1e-12);
            }
        }
    }
}
