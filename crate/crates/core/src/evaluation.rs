//! MSE against context length for a model and the baseline estimators.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::baselines::{estimate, BaselineKind};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tasks::{Prompt, TaskConfig};
use crate::training::{fingerprint_text, held_out_set};

/// What to evaluate on. Every k uses the same episode seeds, so the function
/// instances are shared across rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub task: TaskConfig,
    pub d: usize,
    pub k_values: Vec<usize>,
    pub n_episodes: usize,
    pub base_seed: u64,
}

impl EvalSpec {
    pub fn fingerprint(&self) -> String {
        fingerprint_text(&serde_json::to_string(self).expect("spec serializes"))
    }

    pub fn ood_name(&self) -> String {
        self.task.input.ood.as_ref().map_or_else(
            || "in-distribution".to_string(),
            |o| o.kind.name().to_string(),
        )
    }

    /// The evaluation prompts for one context length.
    pub fn prompts(&self, k: usize) -> Result<Vec<Prompt>> {
        held_out_set(&self.task, self.d, k, self.base_seed, self.n_episodes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub family: String,
    pub arch: Option<String>,
    pub seeds: Vec<u64>,
    /// Fingerprint of the evaluation spec.
    pub fingerprint: String,
    /// Fingerprint of the training configuration behind the model, if any.
    pub model_fingerprint: Option<String>,
    pub ood_kind: String,
    pub d: usize,
    pub n_episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub k: usize,
    pub model_mse: Option<f64>,
    pub model_stderr: Option<f64>,
    pub zero_mse: f64,
    pub lsq_mse: f64,
    pub knn3_mse: f64,
    pub avg_mse: f64,
}

impl EvalRow {
    pub fn baseline(&self, kind: BaselineKind) -> f64 {
        match kind {
            BaselineKind::Zero => self.zero_mse,
            BaselineKind::LeastSquares => self.lsq_mse,
            BaselineKind::Knn3 => self.knn3_mse,
            BaselineKind::Averaging => self.avg_mse,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMeta,
    pub rows: Vec<EvalRow>,
}

/// Mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

const PREDICT_CHUNK: usize = 50;

/// Query predictions of `model`, batched in fixed chunks so results do not
/// depend on the thread count.
pub fn model_predictions(model: &Model, prompts: &[Prompt]) -> Result<Vec<f64>> {
    Ok(prompts
        .par_chunks(PREDICT_CHUNK)
        .map(|c| model.predict_batch(c))
        .collect::<Result<Vec<_>>>()?
        .concat())
}

pub fn squared_errors(preds: &[f64], prompts: &[Prompt]) -> Vec<f64> {
    preds
        .iter()
        .zip(prompts)
        .map(|(p, q)| (p - q.query_target) * (p - q.query_target))
        .collect()
}

fn baseline_mse(kind: BaselineKind, prompts: &[Prompt]) -> Result<f64> {
    let errs = prompts
        .par_iter()
        .map(|p| estimate(kind, p).map(|y| (y - p.query_target) * (y - p.query_target)))
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Evaluates `model` (when given) and the four baselines on identical
/// prompts for every k in the spec. Parameters are only read.
pub fn eval_mse_vs_context(
    model: Option<&Model>,
    spec: &EvalSpec,
    model_fingerprint: Option<String>,
) -> Result<EvalReport> {
    if spec.k_values.is_empty() || spec.n_episodes == 0 {
        return Err(Error::invalid("need at least one k and one episode"));
    }
    let mut rows = Vec::with_capacity(spec.k_values.len());
    for &k in &spec.k_values {
        if let Some(m) = model {
            let needed = crate::models::seq_len_for(k);
            if needed > m.config.max_seq_len {
                return Err(Error::invalid(format!(
                    "k = {k} needs {needed} positions but the model allows {}",
                    m.config.max_seq_len
                )));
            }
        }
        let prompts = spec.prompts(k)?;
        let (model_mse, model_stderr) = match model {
            Some(m) => {
                let preds = model_predictions(m, &prompts)?;
                let (mean, se) = mean_stderr(&squared_errors(&preds, &prompts));
                (Some(mean), Some(se))
            }
            None => (None, None),
        };
        rows.push(EvalRow {
            k,
            model_mse,
            model_stderr,
            zero_mse: baseline_mse(BaselineKind::Zero, &prompts)?,
            lsq_mse: baseline_mse(BaselineKind::LeastSquares, &prompts)?,
            knn3_mse: baseline_mse(BaselineKind::Knn3, &prompts)?,
            avg_mse: baseline_mse(BaselineKind::Averaging, &prompts)?,
        });
    }
    Ok(EvalReport {
        metadata: ReportMeta {
            family: spec.task.family.family().name().to_string(),
            arch: model.map(|m| m.config.arch.name().to_string()),
            seeds: vec![spec.base_seed],
            fingerprint: spec.fingerprint(),
            model_fingerprint,
            ood_kind: spec.ood_name(),
            d: spec.d,
            n_episodes: spec.n_episodes,
        },
        rows,
    })
}

/// Two-sided sign test: probability under a fair coin of a split at least as
/// unbalanced as `positive` vs `negative` (ties are dropped beforehand).
pub fn sign_test_p_value(positive: u64, negative: u64) -> f64 {
    let n = positive + negative;
    if n == 0 {
        return 1.0;
    }
    let binom = Binomial::new(0.5, n).expect("valid binomial");
    (2.0 * binom.cdf(positive.min(negative))).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub k: usize,
    pub standard_mse: f64,
    pub scaled_mse: f64,
    /// Mean over episodes of `scaled error − standard error`.
    pub mean_difference: f64,
    pub scaled_better: u64,
    pub standard_better: u64,
    pub sign_test_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingComparison {
    pub metadata: ReportMeta,
    pub rows: Vec<ScalingRow>,
    /// Per k, the stream seed of every evaluation prompt, identical for
    /// both models.
    pub prompt_seeds: Vec<Vec<u64>>,
}

/// Paired evaluation of a model trained on standard inputs against one
/// trained on scaled inputs, on the same prompts.
pub fn compare_input_scaling(
    model_std: &Model,
    model_scaled: &Model,
    spec: &EvalSpec,
) -> Result<ScalingComparison> {
    if model_std.config != model_scaled.config {
        return Err(Error::invalid(
            "input-scaling comparison needs two models with the same architecture",
        ));
    }
    let mut rows = Vec::new();
    let mut prompt_seeds = Vec::new();
    for &k in &spec.k_values {
        let prompts = spec.prompts(k)?;
        let e_std = squared_errors(&model_predictions(model_std, &prompts)?, &prompts);
        let e_sc = squared_errors(&model_predictions(model_scaled, &prompts)?, &prompts);
        let diffs: Vec<f64> = e_sc.iter().zip(&e_std).map(|(a, b)| a - b).collect();
        let scaled_better = diffs.iter().filter(|&&d| d < 0.0).count() as u64;
        let standard_better = diffs.iter().filter(|&&d| d > 0.0).count() as u64;
        rows.push(ScalingRow {
            k,
            standard_mse: mean_stderr(&e_std).0,
            scaled_mse: mean_stderr(&e_sc).0,
            mean_difference: mean_stderr(&diffs).0,
            scaled_better,
            standard_better,
            sign_test_p: sign_test_p_value(scaled_better, standard_better),
        });
        prompt_seeds.push(prompts.iter().map(|p| p.meta.seed).collect());
    }
    Ok(ScalingComparison {
        metadata: ReportMeta {
            family: spec.task.family.family().name().to_string(),
            arch: Some(model_std.config.arch.name().to_string()),
            seeds: vec![spec.base_seed],
            fingerprint: spec.fingerprint(),
            model_fingerprint: None,
            ood_kind: spec.ood_name(),
            d: spec.d,
            n_episodes: spec.n_episodes,
        },
        rows,
        prompt_seeds,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(ReportFormat::Csv),
            Some("json") => Ok(ReportFormat::Json),
            _ => Err(Error::invalid(format!(
                "cannot infer report format from {}",
                path.display()
            ))),
        }
    }
}

pub const CSV_HEADER: &str = "k,model_mse,model_stderr,zero_mse,lsq_mse,knn3_mse,avg_mse";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Header of a report without a model.
pub const BASELINE_CSV_HEADER: &str = "k,zero_mse,lsq_mse,knn3_mse,avg_mse";

/// CSV form of a report; the model columns are left out when no row has a
/// model value.
pub fn report_csv(report: &EvalReport) -> String {
    let with_model = report.rows.iter().any(|r| r.model_mse.is_some());
    let header = if with_model {
        CSV_HEADER
    } else {
        BASELINE_CSV_HEADER
    };
    let mut out = format!("{header}\n");
    for r in &report.rows {
        let _ = write!(out, "{}", r.k);
        if with_model {
            let _ = write!(out, ",{},{}", opt(r.model_mse), opt(r.model_stderr));
        }
        let _ = writeln!(
            out,
            ",{:?},{:?},{:?},{:?}",
            r.zero_mse, r.lsq_mse, r.knn3_mse, r.avg_mse
        );
    }
    out
}

/// Parses the rows of a CSV report, with or without model columns.
pub fn parse_report_csv(text: &str) -> Result<Vec<EvalRow>> {
    let mut lines = text.lines();
    let with_model = match lines.next() {
        Some(CSV_HEADER) => true,
        Some(BASELINE_CSV_HEADER) => false,
        _ => return Err(Error::invalid("unexpected report header")),
    };
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::invalid(format!("bad number `{s}` in report")))
    };
    let opt_num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let width = if with_model { 7 } else { 5 };
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != width {
                return Err(Error::invalid(format!("malformed report row `{line}`")));
            }
            let (model_mse, model_stderr, b) = if with_model {
                (opt_num(f[1])?, opt_num(f[2])?, &f[3..])
            } else {
                (None, None, &f[1..])
            };
            Ok(EvalRow {
                k: f[0]
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad k `{}`", f[0])))?,
                model_mse,
                model_stderr,
                zero_mse: num(b[0])?,
                lsq_mse: num(b[1])?,
                knn3_mse: num(b[2])?,
                avg_mse: num(b[3])?,
            })
        })
        .collect()
}

pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
