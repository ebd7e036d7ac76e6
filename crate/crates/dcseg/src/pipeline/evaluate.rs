//! Split evaluation: per-case metrics plus mean-and-spread aggregates,
//! over cases within a run and over seeds across runs.

use super::data::LoadedCase;
use super::infer::infer;
use super::PipelineError;
use crate::metrics::{metric_report, MetricReport};
use crate::net::Network;
use crate::tensor::Element;

#[derive(Debug, Clone)]
pub struct CaseEval {
    pub name: String,
    pub report: MetricReport,
}

/// Mean and sample standard deviation; `n < 2` reports zero spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn from_values(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(MeanStd { mean, std, n })
    }

    pub fn format(&self) -> String {
        format!("{:.1} \u{00b1} {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone)]
pub struct EvalAggregate {
    pub dsc: MeanStd,
    pub jaccard: MeanStd,
    /// Missing when no case had a defined surface distance.
    pub asd: Option<MeanStd>,
    /// Cases whose ASD was undefined (an empty surface).
    pub asd_missing: usize,
    pub cases: usize,
}

/// Evaluate a labeled split with sliding-window inference.
pub fn evaluate_split<E: Element>(
    net: &Network<E>,
    cases: &[LoadedCase],
    stride: usize,
) -> Result<(Vec<CaseEval>, EvalAggregate), PipelineError> {
    if cases.is_empty() {
        return Err(PipelineError::Config("split has no cases".into()));
    }
    let mut evals = Vec::with_capacity(cases.len());
    for case in cases {
        let gt = case.label.as_ref().ok_or_else(|| {
            PipelineError::Config(format!("case {} has no label; cannot evaluate", case.name))
        })?;
        let (_, pred) = infer(net, &case.image, stride)?;
        evals.push(CaseEval {
            name: case.name.clone(),
            report: metric_report(&pred, gt)?,
        });
    }
    let aggregate = aggregate_cases(&evals)?;
    Ok((evals, aggregate))
}

pub fn aggregate_cases(evals: &[CaseEval]) -> Result<EvalAggregate, PipelineError> {
    let dsc: Vec<f64> = evals.iter().map(|e| e.report.dsc).collect();
    let jac: Vec<f64> = evals.iter().map(|e| e.report.jaccard).collect();
    let asd: Vec<f64> = evals.iter().filter_map(|e| e.report.asd).collect();
    Ok(EvalAggregate {
        dsc: MeanStd::from_values(&dsc)
            .ok_or_else(|| PipelineError::Config("no cases to aggregate".into()))?,
        jaccard: MeanStd::from_values(&jac).expect("same length as dsc"),
        asd_missing: evals.len() - asd.len(),
        asd: MeanStd::from_values(&asd),
        cases: evals.len(),
    })
}

/// Aggregate per-seed means into a cross-seed mean-and-spread table.
pub fn aggregate_seeds(per_seed: &[EvalAggregate]) -> Option<SeedAggregate> {
    if per_seed.is_empty() {
        return None;
    }
    let dsc: Vec<f64> = per_seed.iter().map(|a| a.dsc.mean).collect();
    let jac: Vec<f64> = per_seed.iter().map(|a| a.jaccard.mean).collect();
    let asd: Vec<f64> = per_seed.iter().filter_map(|a| a.asd.map(|m| m.mean)).collect();
    Some(SeedAggregate {
        dsc: MeanStd::from_values(&dsc)?,
        jaccard: MeanStd::from_values(&jac)?,
        asd: MeanStd::from_values(&asd),
        seeds: per_seed.len(),
    })
}

#[derive(Debug, Clone)]
pub struct SeedAggregate {
    pub dsc: MeanStd,
    pub jaccard: MeanStd,
    pub asd: Option<MeanStd>,
    pub seeds: usize,
}

/// Render per-case lines plus the aggregate in a fixed-width report.
pub fn format_eval_report(evals: &[CaseEval], agg: &EvalAggregate) -> String {
    let mut out = String::new();
    out.push_str("case\tdsc[%]\tjaccard[%]\tasd[mm]\n");
    for e in evals {
        let asd = e
            .report
            .asd
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "missing".to_string());
        out.push_str(&format!(
            "{}\t{:.2}\t{:.2}\t{}\n",
            e.name, e.report.dsc, e.report.jaccard, asd
        ));
    }
    out.push_str(&format!(
        "aggregate over {} cases: DSC {} | Jaccard {} | ASD {}{}\n",
        agg.cases,
        agg.dsc.format(),
        agg.jaccard.format(),
        agg.asd
            .map(|m| m.format())
            .unwrap_or_else(|| "undefined".to_string()),
        if agg.asd_missing > 0 {
            format!(" ({} case(s) missing)", agg.asd_missing)
        } else {
            String::new()
        }
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::BinaryMask;

    fn eval(dsc: f64, jac: f64, asd: Option<f64>) -> CaseEval {
        CaseEval {
            name: "case".into(),
            report: MetricReport {
                dsc,
                jaccard: jac,
                asd,
            },
        }
    }

    #[test]
    fn aggregate_mean_matches_hand_mean() {
        let evals = vec![
            eval(80.0, 66.0, Some(2.0)),
            eval(90.0, 81.0, None),
            eval(70.0, 54.0, Some(4.0)),
        ];
        let agg = aggregate_cases(&evals).unwrap();
        assert!((agg.dsc.mean - 80.0).abs() < 1e-12);
        assert!((agg.jaccard.mean - 67.0).abs() < 1e-12);
        assert_eq!(agg.asd_missing, 1);
        assert!((agg.asd.unwrap().mean - 3.0).abs() < 1e-12);
    }

    #[test]
    fn seed_std_matches_direct_formula() {
        let mk = |d: f64| EvalAggregate {
            dsc: MeanStd {
                mean: d,
                std: 0.0,
                n: 3,
            },
            jaccard: MeanStd {
                mean: d - 10.0,
                std: 0.0,
                n: 3,
            },
            asd: None,
            asd_missing: 0,
            cases: 3,
        };
        let seeds = [mk(70.0), mk(74.0), mk(72.0)];
        let agg = aggregate_seeds(&seeds).unwrap();
        let mean = (70.0 + 74.0 + 72.0) / 3.0;
        let var = ((70.0f64 - mean).powi(2) + (74.0 - mean).powi(2) + (72.0 - mean).powi(2)) / 2.0;
        assert!((agg.dsc.mean - mean).abs() < 1e-12);
        assert!((agg.dsc.std - var.sqrt()).abs() < 1e-12);
        assert_eq!(agg.seeds, 3);
    }

    #[test]
    fn ground_truth_as_prediction_scores_perfectly() {
        // Bypass inference: feed the metric layer directly.
        let gt = BinaryMask::new([4, 4, 4], {
            let mut d = vec![false; 64];
            d[21] = true;
            d[22] = true;
            d
        })
        .unwrap();
        let report = metric_report(&gt, &gt).unwrap();
        assert_eq!(report.dsc, 100.0);
        assert_eq!(report.jaccard, 100.0);
        assert_eq!(report.asd, Some(0.0));
    }

    #[test]
    fn formatted_report_mentions_missing_asd() {
        let evals = vec![eval(80.0, 66.0, None)];
        let agg = aggregate_cases(&evals).unwrap();
        let text = format_eval_report(&evals, &agg);
        assert!(text.contains("missing"));
        assert!(text.contains("undefined"));
    }
}
