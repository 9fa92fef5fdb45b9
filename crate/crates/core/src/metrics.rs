//! Confusion counting and the semantic / binary change metrics.

use serde::{Deserialize, Serialize};

use crate::datakit::{class_names, Raster, CLASS_COUNT};
use crate::error::{ensure, Error, Result};

/// `counts[g][p]`: pixels of ground-truth class `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        Self {
            counts: vec![vec![0; k]; k],
            class_names,
        }
    }

    /// The change-class names for 12 classes, `class{i}` otherwise.
    pub fn with_default_names(k: usize) -> Self {
        if k == CLASS_COUNT {
            Self::new(class_names())
        } else {
            Self::new((0..k).map(|i| format!("class{i}")).collect())
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accumulate(&mut self, pred: &Raster<u8>, label: &Raster<u8>) -> Result<()> {
        ensure!(
            pred.channels == 1 && label.channels == 1 && pred.same_extent(label),
            "prediction {}x{}x{} and label {}x{}x{} must be single-channel with equal extents",
            pred.channels,
            pred.height,
            pred.width,
            label.channels,
            label.height,
            label.width
        );
        let k = self.classes();
        for (i, (&p, &g)) in pred.data.iter().zip(&label.data).enumerate() {
            ensure!(
                (p as usize) < k && (g as usize) < k,
                "class out of range at row {}, col {}: label {g}, prediction {p}, {k} classes",
                i / label.width,
                i % label.width
            );
        }
        for (&p, &g) in pred.data.iter().zip(&label.data) {
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise sum with another shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        ensure!(
            self.classes() == other.classes(),
            "cannot merge {}-class and {}-class confusion matrices",
            self.classes(),
            other.classes()
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Collapse to background vs change.
    pub fn binary(&self) -> ConfusionMatrix {
        let mut out = ConfusionMatrix::new(vec!["unchanged".into(), "changed".into()]);
        for (g, row) in self.counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                out.counts[(g != 0) as usize][(p != 0) as usize] += n;
            }
        }
        out
    }
}

/// Background stays 0, every other class becomes 1.
pub fn binarize(r: &Raster<u8>) -> Raster<u8> {
    Raster {
        channels: r.channels,
        height: r.height,
        width: r.width,
        data: r.data.iter().map(|&v| (v != 0) as u8).collect(),
    }
}

/// Per-class scores as fractions; `None` marks a zero denominator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub class_name: String,
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub rec: Option<f64>,
    pub pre: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<MetricRow> {
    let k = cm.classes();
    (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let fp: u64 = (0..k).filter(|&g| g != c).map(|g| cm.counts[g][c]).sum();
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.counts[c][p]).sum();
            MetricRow {
                class_name: cm.class_names[c].clone(),
                iou: ratio(tp, tp + fp + fn_),
                f1: ratio(2 * tp, 2 * tp + fp + fn_),
                rec: ratio(tp, tp + fn_),
                pre: ratio(tp, tp + fp),
            }
        })
        .collect()
}

/// Mean IoU over defined rows and the names of the rows left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Miou {
    pub value: f64,
    pub excluded: Vec<String>,
}

/// Mean of the defined IoUs; row 0 is the background.
pub fn miou(rows: &[MetricRow], include_background: bool) -> Result<Miou> {
    let skip = usize::from(!include_background);
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = Vec::new();
    for row in rows.iter().skip(skip) {
        match row.iou {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => excluded.push(row.class_name.clone()),
        }
    }
    if n == 0 {
        return Err(Error::Evaluation("every class IoU is undefined".into()));
    }
    Ok(Miou {
        value: sum / n as f64,
        excluded,
    })
}

fn pct(v: Option<f64>) -> Option<f64> {
    v.map(|x| (x * 10000.0).round() / 100.0)
}

/// One row as rounded percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class_name: String,
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub rec: Option<f64>,
    pub pre: Option<f64>,
}

impl From<&MetricRow> for ReportRow {
    fn from(r: &MetricRow) -> Self {
        Self {
            class_name: r.class_name.clone(),
            iou: pct(r.iou),
            f1: pct(r.f1),
            rec: pct(r.rec),
            pre: pct(r.pre),
        }
    }
}

/// Full evaluation output; all scores are percentages at two decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ReportRow>,
    pub miou: Option<f64>,
    pub miou_excluding_background: Option<f64>,
    pub excluded_classes: Vec<String>,
    pub binary: ReportRow,
    pub confusion: ConfusionMatrix,
    pub pixels: u64,
}

impl MetricReport {
    pub fn new(cm: &ConfusionMatrix) -> Self {
        let rows = per_class_metrics(cm);
        let with_bg = miou(&rows, true).ok();
        let without_bg = miou(&rows, false).ok();
        let bin = per_class_metrics(&cm.binary());
        Self {
            per_class: rows.iter().map(ReportRow::from).collect(),
            miou: with_bg.as_ref().and_then(|m| pct(Some(m.value))),
            miou_excluding_background: without_bg.and_then(|m| pct(Some(m.value))),
            excluded_classes: with_bg.map(|m| m.excluded).unwrap_or_default(),
            binary: ReportRow {
                class_name: "change".into(),
                ..ReportRow::from(&bin[1])
            },
            confusion: cm.clone(),
            pixels: cm.total(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("n/a".to_owned(), |x| format!("{x:.2}"));
        let width = self
            .per_class
            .iter()
            .map(|r| r.class_name.len())
            .max()
            .unwrap_or(5)
            .max("mIoU (no background)".len());
        let mut out = format!(
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            "class", "IoU", "F1", "Rec", "Pre"
        );
        for r in self.per_class.iter().chain(std::iter::once(&self.binary)) {
            out += &format!(
                "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
                r.class_name,
                cell(r.iou),
                cell(r.f1),
                cell(r.rec),
                cell(r.pre)
            );
        }
        out += &format!("{:<width$}  {:>7}\n", "mIoU", cell(self.miou));
        out += &format!(
            "{:<width$}  {:>7}\n",
            "mIoU (no background)",
            cell(self.miou_excluding_background)
        );
        if !self.excluded_classes.is_empty() {
            out += &format!("undefined: {}\n", self.excluded_classes.join(", "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm2(tp: u64, fp: u64, fn_: u64) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::with_default_names(2);
        cm.counts = vec![vec![0, fp], vec![fn_, tp]];
        cm
    }

    #[test]
    fn worked_example() {
        let rows = per_class_metrics(&cm2(50, 10, 40));
        let r = &rows[1];
        assert!((r.pre.unwrap() - 0.8333).abs() < 5e-5);
        assert!((r.rec.unwrap() - 0.5556).abs() < 5e-5);
        assert!((r.f1.unwrap() - 0.6667).abs() < 5e-5);
        assert!((r.iou.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_diagonal() {
        let l = Raster::new(1, 10, 10, (0..100).map(|i| (i % 3) as u8).collect()).unwrap();
        let mut cm = ConfusionMatrix::with_default_names(12);
        cm.accumulate(&l, &l).unwrap();
        let diag: u64 = (0..12).map(|i| cm.counts[i][i]).sum();
        assert_eq!(diag, 100);
        assert_eq!(cm.total(), 100);
        let rep = MetricReport::new(&cm);
        assert_eq!(rep.miou, Some(100.0));
        assert_eq!(rep.excluded_classes.len(), 9);
        assert!(rep.to_text().contains("100.00"));
    }

    #[test]
    fn absent_class_is_undefined() {
        let rows = per_class_metrics(&cm2(5, 0, 0));
        assert_eq!(rows[0].iou, None);
        assert_eq!(rows[0].pre, None);
        assert!(miou(&rows[..1], true).is_err());
    }

    #[test]
    fn miou_means_and_background_toggle() {
        let row = |name: &str, iou| MetricRow {
            class_name: name.into(),
            iou: Some(iou),
            f1: None,
            rec: None,
            pre: None,
        };
        let rows = vec![row("background", 0.9), row("a", 0.4), row("b", 0.6)];
        assert!((miou(&rows[1..], true).unwrap().value - 0.5).abs() < 1e-15);
        assert!((miou(&rows, false).unwrap().value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_and_mismatch_rejected() {
        let mut cm = ConfusionMatrix::with_default_names(3);
        let a = Raster::new(1, 1, 2, vec![0, 3]).unwrap();
        let b = Raster::new(1, 1, 2, vec![0, 1]).unwrap();
        assert!(cm.accumulate(&a, &b).is_err());
        let c = Raster::new(1, 2, 1, vec![0, 1]).unwrap();
        assert!(cm.accumulate(&b, &c).is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn binarize_examples() {
        let r = Raster::new(1, 1, 4, vec![0, 0, 7, 0]).unwrap();
        assert_eq!(binarize(&r).data, vec![0, 0, 1, 0]);
        let z = Raster::filled(1, 2, 2, 0u8);
        assert!(binarize(&z).data.iter().all(|&v| v == 0));
    }

    #[test]
    fn disjoint_prediction_has_zero_iou() {
        let p = Raster::new(1, 1, 4, vec![1, 1, 0, 0]).unwrap();
        let l = Raster::new(1, 1, 4, vec![0, 0, 1, 1]).unwrap();
        let mut cm = ConfusionMatrix::with_default_names(2);
        cm.accumulate(&p, &l).unwrap();
        assert!(per_class_metrics(&cm).iter().all(|r| r.iou == Some(0.0)));
    }
}
