//! Diagnostics: robustness summaries, loss and input-gradient norms split by
//! correctness, confidence histograms, reliability bins and ECE.
//!
//! Confidence is the maximum softmax probability of the raw scores.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attacks::{robust_accuracy, Attack, AttackConfig, Scorer, SquareConfig};
use crate::data::{argmax_rows, Dataset};
use crate::error::{Error, Result};
use crate::krr::{loss_rows, softmax_row, LossKind};

pub const DEFAULT_BINS: usize = 15;
/// Accuracy gap (PGD minus square, in points) that flags obfuscated gradients.
pub const DEFAULT_GAP_THRESHOLD: f64 = 10.0;

/// Mean of a per-example quantity over a subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetMean {
    pub count: usize,
    /// `NaN` for an empty subset.
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub all: SubsetMean,
    pub correct: SubsetMean,
    pub incorrect: SubsetMean,
}

impl Decomposition {
    pub fn new(values: &[f64], correct: &[bool]) -> Self {
        let subset = |keep: &dyn Fn(bool) -> bool| {
            let (mut sum, mut count) = (0.0, 0usize);
            for (&v, &c) in values.iter().zip(correct) {
                if keep(c) {
                    sum += v;
                    count += 1;
                }
            }
            SubsetMean {
                count,
                mean: if count == 0 {
                    f64::NAN
                } else {
                    sum / count as f64
                },
            }
        };
        Self {
            all: subset(&|_| true),
            correct: subset(&|c| c),
            incorrect: subset(&|c| !c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `NaN` for empty bins.
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustEntry {
    pub attack: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub n: usize,
    pub clean_accuracy: f64,
    pub robust: Vec<RobustEntry>,
    /// Cross-entropy per example.
    pub loss: Decomposition,
    /// Input-gradient norms of the cross-entropy; absent for gradient-free scorers.
    pub grad_norm: Option<Decomposition>,
    pub confidence_histogram: Vec<usize>,
    pub reliability: Vec<ReliabilityBin>,
    pub ece: f64,
    pub mean_confidence: f64,
}

/// Max-softmax confidence and correctness per row.
pub fn confidences(
    scores: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> (Vec<f64>, Vec<bool>) {
    let pred = argmax_rows(scores);
    let truth = argmax_rows(targets);
    let conf = scores
        .rows()
        .into_iter()
        .map(|r| softmax_row(r).iter().cloned().fold(0.0, f64::max))
        .collect();
    (conf, pred.iter().zip(&truth).map(|(a, b)| a == b).collect())
}

fn bin_index(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).floor() as usize).min(bins - 1)
}

/// Equal-width reliability bins over `[0, 1]` and the resulting ECE.
pub fn reliability(conf: &[f64], correct: &[bool], bins: usize) -> (Vec<ReliabilityBin>, f64) {
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in conf.iter().zip(correct) {
        let b = bin_index(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = conf.len().max(1) as f64;
    let mut ece = 0.0;
    let table = (0..bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let m = conf_sum[b] / count[b] as f64;
                let a = hits[b] as f64 / count[b] as f64;
                ece += count[b] as f64 / n * (a - m).abs();
                (m, a)
            };
            ReliabilityBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count: count[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    (table, ece)
}

/// Score-level part of the report (everything except attacks and gradients).
pub fn summarize_scores(
    scores: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    grad_norms: Option<&[f64]>,
    bins: usize,
) -> Result<EvalReport> {
    if bins == 0 {
        return Err(Error::config("bins must be >= 1"));
    }
    let (losses, _) = loss_rows(&LossKind::Ce, scores, targets)?;
    let (conf, correct) = confidences(scores, targets);
    let (table, ece) = reliability(&conf, &correct, bins);
    let n = conf.len();
    Ok(EvalReport {
        n,
        clean_accuracy: if n == 0 {
            0.0
        } else {
            correct.iter().filter(|&&c| c).count() as f64 / n as f64
        },
        robust: Vec::new(),
        loss: Decomposition::new(losses.as_slice().expect("contiguous"), &correct),
        grad_norm: grad_norms.map(|g| Decomposition::new(g, &correct)),
        confidence_histogram: table.iter().map(|b| b.count).collect(),
        reliability: table,
        ece,
        mean_confidence: if n == 0 {
            f64::NAN
        } else {
            conf.iter().sum::<f64>() / n as f64
        },
    })
}

/// Full diagnostic battery on `ds`.
pub fn diagnose<S: Scorer + ?Sized>(
    scorer: &S,
    ds: &Dataset,
    attacks: &[Attack],
    bins: usize,
) -> Result<EvalReport> {
    let x = ds.examples().view();
    let y = ds.labels().view();
    let scores = scorer.scores(x)?;
    let norms: Option<Array1<f64>> = if scorer.has_gradients() {
        let g = scorer.input_gradients(x, y, &LossKind::Ce)?;
        Some(g.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect())
    } else {
        None
    };
    let mut report = summarize_scores(
        scores.view(),
        y,
        norms.as_ref().and_then(|v| v.as_slice()),
        bins,
    )?;
    for a in attacks {
        if matches!(a, Attack::Clean) {
            continue;
        }
        if a.needs_gradients() && !scorer.has_gradients() {
            return Err(Error::NoGradient);
        }
        report.robust.push(RobustEntry {
            attack: a.name(),
            accuracy: robust_accuracy(scorer, ds, a)?,
        });
    }
    Ok(report)
}

/// PGD versus square-search accuracy; a large gap signals uninformative gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationVerdict {
    pub pgd_acc: f64,
    pub square_acc: f64,
    /// `pgd_acc − square_acc` in percentage points.
    pub gap: f64,
    pub threshold: f64,
    pub obfuscated: bool,
}

pub fn obfuscation_probe<S: Scorer + ?Sized>(
    scorer: &S,
    ds: &Dataset,
    pgd_cfg: &AttackConfig,
    square_cfg: &AttackConfig,
    search: &SquareConfig,
    threshold: f64,
) -> Result<ObfuscationVerdict> {
    let pgd_acc = robust_accuracy(
        scorer,
        ds,
        &Attack::Pgd {
            config: pgd_cfg.clone(),
        },
    )?;
    let square_acc = robust_accuracy(
        scorer,
        ds,
        &Attack::Square {
            config: square_cfg.clone(),
            search: *search,
        },
    )?;
    Ok(ObfuscationVerdict::from_accuracies(
        pgd_acc, square_acc, threshold,
    ))
}

impl ObfuscationVerdict {
    pub fn from_accuracies(pgd_acc: f64, square_acc: f64, threshold: f64) -> Self {
        let gap = 100.0 * (pgd_acc - square_acc);
        Self {
            pgd_acc,
            square_acc,
            gap,
            threshold,
            obfuscated: gap >= threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

fn subset_rows(prefix: &str, d: &Decomposition, out: &mut Vec<(String, String)>) {
    for (name, s) in [
        ("all", d.all),
        ("correct", d.correct),
        ("incorrect", d.incorrect),
    ] {
        out.push((format!("{prefix}.{name}.count"), s.count.to_string()));
        out.push((format!("{prefix}.{name}.mean"), s.mean.to_string()));
    }
}

/// `(metric, value)` rows in the fixed CSV order.
pub fn report_rows(r: &EvalReport) -> Vec<(String, String)> {
    let mut out = vec![
        ("n".to_string(), r.n.to_string()),
        ("clean_accuracy".to_string(), r.clean_accuracy.to_string()),
    ];
    for e in &r.robust {
        out.push((format!("robust.{}", e.attack), e.accuracy.to_string()));
    }
    subset_rows("loss", &r.loss, &mut out);
    if let Some(g) = &r.grad_norm {
        subset_rows("grad_norm", g, &mut out);
    }
    for (i, b) in r.reliability.iter().enumerate() {
        out.push((format!("bin.{i}.lo"), b.lo.to_string()));
        out.push((format!("bin.{i}.hi"), b.hi.to_string()));
        out.push((format!("bin.{i}.count"), b.count.to_string()));
        out.push((
            format!("bin.{i}.mean_confidence"),
            b.mean_confidence.to_string(),
        ));
        out.push((format!("bin.{i}.accuracy"), b.accuracy.to_string()));
    }
    out.push(("ece".to_string(), r.ece.to_string()));
    out.push(("mean_confidence".to_string(), r.mean_confidence.to_string()));
    out
}

pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        ReportFormat::Json => {
            // NaN (empty subsets) is written as null.
            serde_json::to_writer_pretty(&mut f, report)?;
            writeln!(f)?;
        }
        ReportFormat::Csv => {
            writeln!(f, "metric,value")?;
            for (k, v) in report_rows(report) {
                writeln!(f, "{k},{v}")?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

fn parse_f64(v: &serde_json::Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn report_from_json(v: &serde_json::Value) -> Result<EvalReport> {
    let sub = |s: &serde_json::Value| SubsetMean {
        count: s["count"].as_u64().unwrap_or(0) as usize,
        mean: parse_f64(&s["mean"]),
    };
    let dec = |d: &serde_json::Value| Decomposition {
        all: sub(&d["all"]),
        correct: sub(&d["correct"]),
        incorrect: sub(&d["incorrect"]),
    };
    let bad = |what: &str| Error::format(format!("report JSON lacks {what}"));
    Ok(EvalReport {
        n: v["n"].as_u64().ok_or_else(|| bad("n"))? as usize,
        clean_accuracy: parse_f64(&v["clean_accuracy"]),
        robust: serde_json::from_value(v["robust"].clone())?,
        loss: dec(&v["loss"]),
        grad_norm: if v["grad_norm"].is_null() {
            None
        } else {
            Some(dec(&v["grad_norm"]))
        },
        confidence_histogram: serde_json::from_value(v["confidence_histogram"].clone())?,
        reliability: v["reliability"]
            .as_array()
            .ok_or_else(|| bad("reliability"))?
            .iter()
            .map(|b| ReliabilityBin {
                lo: parse_f64(&b["lo"]),
                hi: parse_f64(&b["hi"]),
                count: b["count"].as_u64().unwrap_or(0) as usize,
                mean_confidence: parse_f64(&b["mean_confidence"]),
                accuracy: parse_f64(&b["accuracy"]),
            })
            .collect(),
        ece: parse_f64(&v["ece"]),
        mean_confidence: parse_f64(&v["mean_confidence"]),
    })
}

fn report_from_rows(rows: &[(String, String)]) -> Result<EvalReport> {
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::format(format!("{s}: {e}")))
    };
    let int = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::format(format!("{s}: {e}")))
    };
    let get = |k: &str| rows.iter().find(|(m, _)| m == k).map(|(_, v)| v.as_str());
    let need = |k: &str| get(k).ok_or_else(|| Error::format(format!("report CSV lacks {k}")));
    let dec = |p: &str| -> Result<Option<Decomposition>> {
        if get(&format!("{p}.all.count")).is_none() {
            return Ok(None);
        }
        let sub = |s: &str| -> Result<SubsetMean> {
            Ok(SubsetMean {
                count: int(need(&format!("{p}.{s}.count"))?)?,
                mean: num(need(&format!("{p}.{s}.mean"))?)?,
            })
        };
        Ok(Some(Decomposition {
            all: sub("all")?,
            correct: sub("correct")?,
            incorrect: sub("incorrect")?,
        }))
    };
    let mut reliability = Vec::new();
    while get(&format!("bin.{}.count", reliability.len())).is_some() {
        let i = reliability.len();
        let f = |s: &str| need(&format!("bin.{i}.{s}"));
        reliability.push(ReliabilityBin {
            lo: num(f("lo")?)?,
            hi: num(f("hi")?)?,
            count: int(f("count")?)?,
            mean_confidence: num(f("mean_confidence")?)?,
            accuracy: num(f("accuracy")?)?,
        });
    }
    let robust = rows
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("robust.").map(|a| (a, v)))
        .map(|(a, v)| {
            Ok(RobustEntry {
                attack: a.to_string(),
                accuracy: num(v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        n: int(need("n")?)?,
        clean_accuracy: num(need("clean_accuracy")?)?,
        robust,
        loss: dec("loss")?.ok_or_else(|| Error::format("report CSV lacks loss"))?,
        grad_norm: dec("grad_norm")?,
        confidence_histogram: reliability.iter().map(|b| b.count).collect(),
        reliability,
        ece: num(need("ece")?)?,
        mean_confidence: num(need("mean_confidence")?)?,
    })
}

pub fn read_report(path: &Path, format: ReportFormat) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    match format {
        ReportFormat::Json => report_from_json(&serde_json::from_str(&text)?),
        ReportFormat::Csv => {
            let mut lines = text.lines();
            if lines.next() != Some("metric,value") {
                return Err(Error::format("report CSV header mismatch"));
            }
            let rows: Vec<(String, String)> = lines
                .filter(|l| !l.is_empty())
                .map(|l| {
                    l.split_once(',')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| Error::format(format!("bad report row: {l}")))
                })
                .collect::<Result<_>>()?;
            report_from_rows(&rows)
        }
    }
}

/// Equality that treats `NaN == NaN` (reports carry NaN for empty subsets).
pub fn reports_equal(a: &EvalReport, b: &EvalReport) -> bool {
    report_rows(a) == report_rows(b)
}
