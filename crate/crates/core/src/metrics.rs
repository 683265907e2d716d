//! Segmentation and grounding metrics plus the tunable-parameter report.

use ndarray::Array2;

use crate::adapter::ParamRegistry;
use crate::error::{Error, Result};

/// Per-pair mask intersection over union. Empty prediction against empty
/// ground truth counts as 1; empty against non-empty as 0.
pub fn mask_iou(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Input(format!(
            "mask shapes {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if *p && *g {
            inter += 1;
        }
        if *p || *g {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Exact pixel counts for one evaluated sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleCounts {
    pub intersection: u64,
    pub union: u64,
}

impl SampleCounts {
    pub fn from_masks(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::Input("mask shape mismatch".into()));
        }
        let mut intersection = 0;
        let mut union = 0;
        for (p, g) in pred.iter().zip(gt.iter()) {
            if *p && *g {
                intersection += 1;
            }
            if *p || *g {
                union += 1;
            }
        }
        Ok(SampleCounts {
            intersection,
            union,
        })
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Aggregate segmentation numbers: mIoU is the mean of per-sample IoUs,
/// oIoU the ratio of summed intersections to summed unions, Prec@X the
/// fraction of samples with IoU strictly above X.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationAggregate {
    pub miou: f64,
    pub oiou: f64,
    pub prec50: f64,
    pub prec70: f64,
    pub prec90: f64,
}

pub fn aggregate(samples: &[SampleCounts]) -> Result<SegmentationAggregate> {
    if samples.is_empty() {
        return Err(Error::Metric("no samples to aggregate".into()));
    }
    let n = samples.len() as f64;
    let miou = samples.iter().map(|s| s.iou()).sum::<f64>() / n;
    let inter: u64 = samples.iter().map(|s| s.intersection).sum();
    let union: u64 = samples.iter().map(|s| s.union).sum();
    let oiou = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    let prec = |x: f64| samples.iter().filter(|s| s.iou() > x).count() as f64 / n;
    Ok(SegmentationAggregate {
        miou,
        oiou,
        prec50: prec(0.5),
        prec70: prec(0.7),
        prec90: prec(0.9),
    })
}

/// Grounding success: the selected grasp pixel lies inside the target's
/// ground-truth mask.
pub fn grounding_success(pixel: (usize, usize), target_mask: &Array2<bool>) -> bool {
    let (x, y) = pixel;
    y < target_mask.nrows() && x < target_mask.ncols() && target_mask[(y, x)]
}

/// Full evaluation report; task-inapplicable metrics stay `None`.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub sample_count: usize,
    pub miou: Option<f64>,
    pub oiou: Option<f64>,
    pub prec50: Option<f64>,
    pub prec70: Option<f64>,
    pub prec90: Option<f64>,
    pub j1: Option<f64>,
    pub j_any: Option<f64>,
    pub grounding_accuracy: Option<f64>,
    pub grasp_success_rate: Option<f64>,
    pub tunable_params: usize,
    pub frozen_params: usize,
    pub tunable_ratio_percent: f64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.miou,
            self.oiou,
            self.prec50,
            self.prec70,
            self.prec90,
            self.j1,
            self.j_any,
            self.grounding_accuracy,
            self.grasp_success_rate,
        ];
        for r in rates.into_iter().flatten() {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Metric(format!("rate {r} outside [0, 1]")));
            }
        }
        if let (Some(p5), Some(p7), Some(p9)) = (self.prec50, self.prec70, self.prec90) {
            if !(p5 >= p7 && p7 >= p9) {
                return Err(Error::Metric(format!(
                    "precision chain violated: {p5} >= {p7} >= {p9}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_params(mut self, registry: &ParamRegistry) -> Self {
        self.tunable_params = registry.tunable_total();
        self.frozen_params = registry.frozen_total();
        self.tunable_ratio_percent = registry.ratio_percent();
        self
    }

    /// Flat structured-text serialization with stable field names.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    /// Human-readable table for the CLI.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![("samples".into(), self.sample_count.to_string())];
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                rows.push((name.into(), format!("{:.4}", v)));
            }
        };
        push("mIoU", self.miou);
        push("oIoU", self.oiou);
        push("Pr@50", self.prec50);
        push("Pr@70", self.prec70);
        push("Pr@90", self.prec90);
        push("J@1", self.j1);
        push("J@Any", self.j_any);
        push("grounding", self.grounding_accuracy);
        push("grasp_success", self.grasp_success_rate);
        rows.push(("tunable params".into(), self.tunable_params.to_string()));
        rows.push(("frozen params".into(), self.frozen_params.to_string()));
        rows.push((
            "tunable/frozen".into(),
            format!("{:.3}%", self.tunable_ratio_percent),
        ));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:width$}  {v}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Exact parameter counts and the tunable/frozen ratio from the registry.
pub fn param_report(registry: &ParamRegistry) -> Result<(usize, usize, f64)> {
    if registry.entries.is_empty() {
        return Err(Error::Audit("parameter registry is empty".into()));
    }
    Ok((
        registry.tunable_total(),
        registry.frozen_total(),
        registry.ratio_percent(),
    ))
}
