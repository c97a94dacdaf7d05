//! Evaluation harness: per-class precision/recall over a confidence
//! threshold sweep, attention-vs-baseline agreement, heatmap rendering,
//! and the one-vs-two layer ablation.
//!
//! A prediction is accepted at a threshold when its confidence (max class
//! probability) reaches it. Precision is computed over accepted samples,
//! recall over all samples; a zero denominator yields 0 and a flag rather
//! than NaN.
//!
//! ```
//! use h2rat::eval::{compute_pr_points, default_thresholds};
//!
//! // (label, prediction, confidence) triples from a perfect predictor
//! let triples: Vec<(usize, usize, f64)> = (0..8).map(|i| (i % 4, i % 4, 1.0)).collect();
//! let points = compute_pr_points(&triples, 4, &default_thresholds());
//! assert!(points.iter().all(|p| p.macro_precision == 1.0 && p.macro_recall == 1.0));
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model;
use crate::numerics::Tensor;
use crate::scenarios::Scenario;
use crate::training::{self, Checkpoint, TrainConfig};
use crate::vision::{apply_edge_filter, EdgeFilterSpec};

/// Pixels per region cell in rendered heatmaps.
pub const HEATMAP_BLOCK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPr {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    /// True when a denominator was 0 and the metric was defined as 0.
    pub zero_denominator: bool,
}

/// One point of the precision/recall sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub per_class: Vec<ClassPr>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub accepted: usize,
}

/// Agreement between model attention and the baseline attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionAgreement {
    /// Fraction of samples whose attention argmax is a culprit region.
    pub argmax_hit_rate: f64,
    /// Mean attention mass landing on culprit regions.
    pub mean_culprit_mass: f64,
    /// Mean total-variation distance to the baseline distribution.
    pub mean_tv_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub reference_threshold: f64,
    /// The mean of macro precision and macro recall at the reference
    /// threshold; an unusual accuracy definition, kept for comparability,
    /// so the plain classification accuracy is reported alongside.
    pub pr_mean_accuracy: f64,
    pub classification_accuracy: f64,
    pub sample_count: usize,
    pub any_zero_denominator: bool,
}

/// Per-sample record retained for dumps and heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePrediction {
    pub label: usize,
    pub predicted: usize,
    pub confidence: f64,
    /// Attention used for agreement metrics (edge-filtered by default).
    pub attention: Tensor,
    pub attention_raw: Tensor,
    pub baseline: Tensor,
    pub recommended_action: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub pr_points: Vec<PrPoint>,
    pub agreement: AttentionAgreement,
    pub summary: EvalSummary,
    pub predictions: Vec<SamplePrediction>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub thresholds: Vec<f64>,
    pub edge_filter: bool,
    pub reference_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            thresholds: default_thresholds(),
            edge_filter: true,
            reference_threshold: 0.5,
        }
    }
}

/// 0.05 steps over [0, 1]; always contains 0.5.
pub fn default_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// Precision/recall sweep over bare (label, prediction, confidence)
/// triples; the core the model-independent harness tests exercise.
pub fn compute_pr_points(
    triples: &[(usize, usize, f64)],
    classes: usize,
    thresholds: &[f64],
) -> Vec<PrPoint> {
    let mut points = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut tp = vec![0usize; classes];
        let mut fp = vec![0usize; classes];
        let mut total = vec![0usize; classes];
        let mut accepted = 0usize;
        for &(label, pred, conf) in triples {
            total[label] += 1;
            if conf >= thr {
                accepted += 1;
                if pred == label {
                    tp[pred] += 1;
                } else {
                    fp[pred] += 1;
                }
            }
        }
        let mut per_class = Vec::with_capacity(classes);
        for c in 0..classes {
            let p_den = tp[c] + fp[c];
            let r_den = total[c];
            per_class.push(ClassPr {
                class: c,
                precision: if p_den > 0 { tp[c] as f64 / p_den as f64 } else { 0.0 },
                recall: if r_den > 0 { tp[c] as f64 / r_den as f64 } else { 0.0 },
                zero_denominator: p_den == 0 || r_den == 0,
            });
        }
        let macro_precision = per_class.iter().map(|c| c.precision).sum::<f64>() / classes as f64;
        let macro_recall = per_class.iter().map(|c| c.recall).sum::<f64>() / classes as f64;
        points.push(PrPoint {
            threshold: thr,
            per_class,
            macro_precision,
            macro_recall,
            accepted,
        });
    }
    points
}

fn agreement_from(predictions: &[SamplePrediction], scenarios: &[Scenario]) -> AttentionAgreement {
    let n = predictions.len() as f64;
    let mut hits = 0usize;
    let mut mass = 0.0;
    let mut tv = 0.0;
    for (p, s) in predictions.iter().zip(scenarios) {
        let argmax = p.attention.argmax();
        if s.spec.culprit_regions.contains(&argmax) {
            hits += 1;
        }
        mass += s
            .spec
            .culprit_regions
            .iter()
            .map(|&r| p.attention.get(r, 0))
            .sum::<f64>();
        tv += 0.5
            * p.attention
                .as_slice()
                .iter()
                .zip(p.baseline.as_slice())
                .map(|(&a, &b)| (a - b).abs())
                .sum::<f64>();
    }
    AttentionAgreement {
        argmax_hit_rate: hits as f64 / n,
        mean_culprit_mass: mass / n,
        mean_tv_distance: tv / n,
    }
}

/// Run the checkpoint over a test split: threshold sweep, attention
/// agreement on (by default) edge-filtered second-layer attention, and
/// the summary at the reference threshold.
pub fn evaluate(ckpt: &Checkpoint, test: &[Scenario], opts: &EvalOptions) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptyInput { what: "test split" });
    }
    let rows = ckpt.params.dims.grid_rows;
    let cols = ckpt.params.dims.grid_cols;
    let spec = EdgeFilterSpec::default();

    let mut predictions = Vec::with_capacity(test.len());
    for s in test {
        let reminder = crate::textenc::tokenize(&s.reminder_text, &ckpt.vocabulary)?;
        let out = model::infer(&ckpt.params, &reminder, &s.grid)?;
        let attention = if opts.edge_filter {
            apply_edge_filter(&out.p2, rows, cols, &spec)?
        } else {
            out.p2.clone()
        };
        let zone = crate::vision::zone_of_region(rows, cols, attention.argmax());
        let recommended_action = ckpt
            .correction_table
            .best_action(out.predicted_class, zone)
            .ok();
        predictions.push(SamplePrediction {
            label: s.spec.abnormality.class_id(),
            predicted: out.predicted_class,
            confidence: out.confidence,
            attention,
            attention_raw: out.p2,
            baseline: s.baseline_attention.clone(),
            recommended_action,
        });
    }

    let triples: Vec<(usize, usize, f64)> = predictions
        .iter()
        .map(|p| (p.label, p.predicted, p.confidence))
        .collect();
    let classes = ckpt.params.dims.classes;
    let mut thresholds = opts.thresholds.clone();
    if !thresholds
        .iter()
        .any(|t| (t - opts.reference_threshold).abs() < 1e-12)
    {
        thresholds.push(opts.reference_threshold);
        thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let pr_points = compute_pr_points(&triples, classes, &thresholds);

    let reference = pr_points
        .iter()
        .min_by(|a, b| {
            let da = (a.threshold - opts.reference_threshold).abs();
            let db = (b.threshold - opts.reference_threshold).abs();
            da.partial_cmp(&db).unwrap()
        })
        .expect("non-empty sweep");
    let correct = triples.iter().filter(|(l, p, _)| l == p).count();
    let summary = EvalSummary {
        reference_threshold: reference.threshold,
        pr_mean_accuracy: (reference.macro_precision + reference.macro_recall) / 2.0,
        classification_accuracy: correct as f64 / triples.len() as f64,
        sample_count: triples.len(),
        any_zero_denominator: pr_points
            .iter()
            .flat_map(|p| &p.per_class)
            .any(|c| c.zero_denominator),
    };
    let agreement = agreement_from(&predictions, test);
    Ok(Evaluation {
        pr_points,
        agreement,
        summary,
        predictions,
    })
}

/// Write a grayscale PGM (P5, maxval 255) with one block per region,
/// intensity scaled by the attention maximum.
pub fn render_heatmap(attn: &Tensor, rows: usize, cols: usize, path: &Path) -> Result<()> {
    if attn.shape() != (rows * cols, 1) {
        return Err(Error::DimensionMismatch {
            op: "render_heatmap",
            lhs: format!("{rows}x{cols} grid"),
            rhs: format!("{}x{}", attn.rows(), attn.cols()),
        });
    }
    if attn.as_slice().iter().any(|&v| v < 0.0) || attn.max() <= 0.0 {
        return Err(Error::Config(
            "attention vector is not a distribution (no positive mass)".into(),
        ));
    }
    let max = attn.max();
    let width = cols * HEATMAP_BLOCK;
    let height = rows * HEATMAP_BLOCK;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.reserve(width * height);
    for py in 0..height {
        let r = py / HEATMAP_BLOCK;
        for px in 0..width {
            let c = px / HEATMAP_BLOCK;
            let v = attn.get(r * cols + c, 0) / max;
            out.push((v * 255.0).round() as u8);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Metrics of one ablation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub layer_count: usize,
    pub classification_accuracy: f64,
    pub pr_mean_accuracy: f64,
    pub attention_hit_rate: f64,
    pub mean_culprit_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub one_layer: VariantMetrics,
    pub two_layer: VariantMetrics,
}

/// Train 1-layer and 2-layer variants under identical seeds and config
/// and evaluate both. The directional expectation (two layers localize
/// at least as well) is reported, not asserted.
pub fn ablate_layers(corpus: &crate::scenarios::Corpus, config: &TrainConfig) -> Result<AblationReport> {
    let run = |layer_count: usize| -> Result<VariantMetrics> {
        let cfg = TrainConfig {
            layer_count,
            ..config.clone()
        };
        let ckpt = training::train(corpus, &cfg)?;
        let ev = evaluate(&ckpt, &corpus.test, &EvalOptions::default())?;
        Ok(VariantMetrics {
            layer_count,
            classification_accuracy: ev.summary.classification_accuracy,
            pr_mean_accuracy: ev.summary.pr_mean_accuracy,
            attention_hit_rate: ev.agreement.argmax_hit_rate,
            mean_culprit_mass: ev.agreement.mean_culprit_mass,
        })
    };
    Ok(AblationReport {
        one_layer: run(1)?,
        two_layer: run(2)?,
    })
}

/// Line-oriented human-readable report table.
pub fn render_report(ev: &Evaluation) -> String {
    let s = &ev.summary;
    let mut out = String::new();
    out.push_str(&format!(
        "evaluation: {} samples, reference threshold {:.2}\n",
        s.sample_count, s.reference_threshold
    ));
    out.push_str(&format!(
        "accuracy (mean of macro P and R): {:.4}\n",
        s.pr_mean_accuracy
    ));
    out.push_str(&format!(
        "classification accuracy:          {:.4}\n",
        s.classification_accuracy
    ));
    let a = &ev.agreement;
    out.push_str(&format!(
        "attention argmax hit rate:        {:.4}\n",
        a.argmax_hit_rate
    ));
    out.push_str(&format!(
        "mean culprit attention mass:      {:.4}\n",
        a.mean_culprit_mass
    ));
    out.push_str(&format!(
        "mean TV distance to baseline:     {:.4}\n",
        a.mean_tv_distance
    ));
    if s.any_zero_denominator {
        out.push_str("note: some sweep points had zero denominators (metric defined as 0)\n");
    }
    out.push_str("threshold  macro_p  macro_r  accepted\n");
    for p in &ev.pr_points {
        out.push_str(&format!(
            "{:9.2}  {:7.4}  {:7.4}  {:8}\n",
            p.threshold, p.macro_precision, p.macro_recall, p.accepted
        ));
    }
    out
}

/// Machine-readable key/value metrics document.
pub fn render_metrics_kv(ev: &Evaluation) -> String {
    let s = &ev.summary;
    let a = &ev.agreement;
    let mut out = String::new();
    out.push_str(&format!("samples = {}\n", s.sample_count));
    out.push_str(&format!("reference_threshold = {}\n", s.reference_threshold));
    out.push_str(&format!("pr_mean_accuracy = {}\n", s.pr_mean_accuracy));
    out.push_str(&format!(
        "classification_accuracy = {}\n",
        s.classification_accuracy
    ));
    out.push_str(&format!("attention_argmax_hit_rate = {}\n", a.argmax_hit_rate));
    out.push_str(&format!("mean_culprit_mass = {}\n", a.mean_culprit_mass));
    out.push_str(&format!("mean_tv_distance = {}\n", a.mean_tv_distance));
    out.push_str(&format!("any_zero_denominator = {}\n", s.any_zero_denominator));
    out
}

/// P-R sweep as comma-separated rows: threshold, class, precision, recall.
pub fn render_pr_csv(ev: &Evaluation) -> String {
    let mut out = String::from("threshold,class,precision,recall\n");
    for p in &ev.pr_points {
        for c in &p.per_class {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.threshold, c.class, c.precision, c.recall
            ));
        }
    }
    out
}
