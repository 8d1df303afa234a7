use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::EvalRun;
use super::{similarity, tgtlabel_trace, EstimationTrace};
use crate::error::{Error, Result};
use crate::estimator::EstimatorNet;

pub const FIXED_EPOCH: &str = "FixedEpoch";
const DEGRADATION_THRESHOLD: f64 = -0.05;

/// Mean similarity (percent) of one method on one domain and algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub domain: String,
    pub algorithm: String,
    /// `None` where the method yields no trace.
    pub similarity: Option<f64>,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean: Option<f64>,
    pub per_algorithm: BTreeMap<String, f64>,
    pub per_domain: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSummary {
    pub estimator_balanced: f64,
    pub estimator_imbalanced: f64,
    pub tgtlabel_imbalanced: f64,
    /// Similarity lost by the estimator when validating on skewed data.
    pub estimator_change: f64,
    /// Similarity lost by labeled-target accuracy on the same skewed data.
    pub tgtlabel_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSummary {
    pub threshold: f64,
    pub cases: usize,
    pub estimator_sign_agreement: Option<f64>,
    pub softmax_sign_agreement: Option<f64>,
}

impl DegradationSummary {
    /// Among pairs whose true final change is below the threshold, the
    /// share of estimates that are also negative.
    pub fn from_finals(truth: &[f64], estimator: &[f64], softmax: &[f64]) -> Self {
        let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] < DEGRADATION_THRESHOLD).collect();
        let share = |est: &[f64]| {
            (!idx.is_empty()).then(|| idx.iter().filter(|&&i| est[i] < 0.0).count() as f64 / idx.len() as f64)
        };
        DegradationSummary {
            threshold: DEGRADATION_THRESHOLD,
            cases: idx.len(),
            estimator_sign_agreement: share(estimator),
            softmax_sign_agreement: share(softmax),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub failed_runs: usize,
    pub methods: Vec<MethodSummary>,
    pub imbalance: ImbalanceSummary,
    pub degradation: DegradationSummary,
}

impl Summary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Per-epoch truth and estimates of one run, for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub name: String,
    pub traces: Vec<EstimationTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summary: Summary,
    pub curves: Vec<Curve>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores every method on every successful run. The first estimator is the
/// primary one, reported as `DAPPER` and used for the skewed-validation and
/// degradation summaries; the rest are reported under their given names.
pub fn build_report(runs: &[EvalRun], estimators: &[(String, &EstimatorNet)]) -> Result<Report> {
    let (primary, _) = estimators
        .first()
        .ok_or_else(|| Error::MissingArtifact("estimator for evaluation".into()))?;
    let ok: Vec<&EvalRun> = runs.iter().filter(|r| r.is_ok()).collect();
    if ok.is_empty() {
        return Err(Error::invalid("evaluation produced no successful runs"));
    }
    // (method, domain, algorithm) -> similarities
    let mut cells: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut method_order: Vec<String> = vec!["TgtLabel".into()];
    method_order.extend(estimators.iter().map(|(n, _)| n.clone()));
    method_order.extend(["SoftmaxScore".to_string(), "SrcLabel".to_string()]);
    let mut curves = Vec::with_capacity(ok.len());
    let (mut imb_est, mut imb_tgt) = (Vec::new(), Vec::new());
    let (mut fin_truth, mut fin_est, mut fin_soft) = (Vec::new(), Vec::new(), Vec::new());

    for r in &ok {
        let truth = tgtlabel_trace(&r.accuracies)?;
        let mut traces = vec![truth.clone()];
        for (name, net) in estimators {
            traces.push(EstimationTrace::new(name.clone(), net.estimate_sequence(&r.records)?));
        }
        traces.push(EstimationTrace::from_levels("SoftmaxScore", &r.softmax_scores)?);
        traces.push(EstimationTrace::from_levels("SrcLabel", &r.source_accuracies)?);
        for t in &traces {
            let s = similarity(&truth, t)?.value * 100.0;
            cells
                .entry((t.method.clone(), r.target.clone(), r.algorithm.name().to_string()))
                .or_default()
                .push(s);
        }
        let primary_net = estimators[0].1;
        let skewed_est = EstimationTrace::new(primary.clone(), primary_net.estimate_sequence(&r.imbalanced_records)?);
        imb_est.push(similarity(&truth, &skewed_est)?.value * 100.0);
        imb_tgt.push(similarity(&truth, &tgtlabel_trace(&r.imbalanced_accuracies)?)?.value * 100.0);
        fin_truth.push(*truth.values.last().unwrap());
        fin_est.push(*traces[1].values.last().unwrap());
        fin_soft.push(*traces[estimators.len() + 1].values.last().unwrap());
        curves.push(Curve {
            name: format!("{}_{}_seed{}", r.target, r.algorithm, r.seed),
            traces,
        });
    }

    let mut rows = Vec::new();
    let mut methods = Vec::new();
    for m in &method_order {
        let mine: Vec<(&(String, String, String), &Vec<f64>)> = cells.iter().filter(|(k, _)| &k.0 == m).collect();
        let mut per_algorithm: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut per_domain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut all = Vec::new();
        for ((_, d, a), v) in &mine {
            rows.push(ReportRow {
                method: m.clone(),
                domain: d.clone(),
                algorithm: a.clone(),
                similarity: Some(mean(v)),
                runs: v.len(),
            });
            per_algorithm.entry(a.clone()).or_default().extend(v.iter());
            per_domain.entry(d.clone()).or_default().extend(v.iter());
            all.extend(v.iter());
        }
        for (a, v) in &per_algorithm {
            rows.push(ReportRow {
                method: m.clone(),
                domain: "all".into(),
                algorithm: a.clone(),
                similarity: Some(mean(v)),
                runs: v.len(),
            });
        }
        rows.push(ReportRow {
            method: m.clone(),
            domain: "all".into(),
            algorithm: "all".into(),
            similarity: Some(mean(&all)),
            runs: all.len(),
        });
        methods.push(MethodSummary {
            method: m.clone(),
            mean: Some(mean(&all)),
            per_algorithm: per_algorithm.iter().map(|(k, v)| (k.clone(), mean(v))).collect(),
            per_domain: per_domain.iter().map(|(k, v)| (k.clone(), mean(v))).collect(),
        });
    }
    rows.push(ReportRow {
        method: FIXED_EPOCH.into(),
        domain: "all".into(),
        algorithm: "all".into(),
        similarity: None,
        runs: ok.len(),
    });
    methods.push(MethodSummary {
        method: FIXED_EPOCH.into(),
        mean: None,
        per_algorithm: BTreeMap::new(),
        per_domain: BTreeMap::new(),
    });

    let balanced = methods[1].mean.expect("estimator rows exist");
    let estimator_imbalanced = mean(&imb_est);
    let tgtlabel_imbalanced = mean(&imb_tgt);
    Ok(Report {
        rows,
        summary: Summary {
            runs: runs.len(),
            failed_runs: runs.len() - ok.len(),
            methods,
            imbalance: ImbalanceSummary {
                estimator_balanced: balanced,
                estimator_imbalanced,
                tgtlabel_imbalanced,
                estimator_change: balanced - estimator_imbalanced,
                tgtlabel_change: 100.0 - tgtlabel_imbalanced,
            },
            degradation: DegradationSummary::from_finals(&fin_truth, &fin_est, &fin_soft),
        },
        curves,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `similarity.csv`, `summary.json` and one CSV per curve under
/// `curves/`.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    let curves_dir = dir.join("curves");
    std::fs::create_dir_all(&curves_dir).map_err(|e| Error::io(format!("creating {}", curves_dir.display()), e))?;
    let mut csv = String::from("method,domain,algorithm,similarity_pct,runs\n");
    for r in &report.rows {
        let s = r.similarity.map_or("N/A".to_string(), |v| format!("{v:.4}"));
        writeln!(csv, "{},{},{},{s},{}", r.method, r.domain, r.algorithm, r.runs).unwrap();
    }
    write(&dir.join("similarity.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&report.summary).map_err(|e| Error::format("summary", e.to_string()))?;
    write(&dir.join("summary.json"), &(json + "\n"))?;
    for c in &report.curves {
        let mut text = String::from("epoch");
        for t in &c.traces {
            text.push(',');
            text.push_str(&t.method);
        }
        text.push('\n');
        for e in 0..c.traces[0].values.len() {
            write!(text, "{e}").unwrap();
            for t in &c.traces {
                write!(text, ",{}", t.values[e]).unwrap();
            }
            text.push('\n');
        }
        write(&curves_dir.join(format!("{}.csv", c.name)), &text)?;
    }
    Ok(())
}
