//! The stacked attention core: two attention layers over the projected
//! region features and the reminder vector, a classification head, and
//! the correction lookup.
//!
//! Each layer scores every region against the current query vector,
//! softmaxes the scores into an attention distribution, pools the region
//! columns under that distribution, and adds the pooled summary back onto
//! the query. Layer 1's query is the reminder vector; layer 2's query is
//! layer 1's refined vector, which is what sharpens the distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tape, Tensor, Var};
use crate::vision::zone_of_region;

/// One attention layer's weights: region transform `w_v` (k x m), query
/// transform `w_r` (k x m) with bias `b_r` (k x 1), and the per-region
/// scoring row `w_p` (1 x k) with scalar bias `b_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnLayerParams {
    pub w_v: Tensor,
    pub w_r: Tensor,
    pub b_r: Tensor,
    pub w_p: Tensor,
    pub b_p: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnLayerVars {
    pub w_v: Var,
    pub w_r: Var,
    pub b_r: Var,
    pub w_p: Var,
    pub b_p: Var,
}

impl AttnLayerParams {
    pub fn init(k: usize, m: usize, rng: &mut RngStream) -> AttnLayerParams {
        let s_km = (6.0 / (k + m) as f64).sqrt();
        let s_k = (6.0 / (k + 1) as f64).sqrt();
        AttnLayerParams {
            w_v: Tensor::uniform_init(k, m, s_km, rng),
            w_r: Tensor::uniform_init(k, m, s_km, rng),
            b_r: Tensor::zeros(k, 1),
            w_p: Tensor::uniform_init(1, k, s_k, rng),
            b_p: Tensor::zeros(1, 1),
        }
    }

    pub fn zeros(k: usize, m: usize) -> AttnLayerParams {
        AttnLayerParams {
            w_v: Tensor::zeros(k, m),
            w_r: Tensor::zeros(k, m),
            b_r: Tensor::zeros(k, 1),
            w_p: Tensor::zeros(1, k),
            b_p: Tensor::zeros(1, 1),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AttnLayerVars {
        AttnLayerVars {
            w_v: tape.param(self.w_v.clone()),
            w_r: tape.param(self.w_r.clone()),
            b_r: tape.param(self.b_r.clone()),
            w_p: tape.param(self.w_p.clone()),
            b_p: tape.param(self.b_p.clone()),
        }
    }

    fn tensors(&self, prefix: &'static str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.w_v"), &self.w_v),
            (format!("{prefix}.w_r"), &self.w_r),
            (format!("{prefix}.b_r"), &self.b_r),
            (format!("{prefix}.w_p"), &self.w_p),
            (format!("{prefix}.b_p"), &self.b_p),
        ]
    }

    fn tensors_mut(&mut self, prefix: &'static str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.w_v"), &mut self.w_v),
            (format!("{prefix}.w_r"), &mut self.w_r),
            (format!("{prefix}.b_r"), &mut self.b_r),
            (format!("{prefix}.w_p"), &mut self.w_p),
            (format!("{prefix}.b_p"), &mut self.b_p),
        ]
    }
}

/// Classification head over the refined query vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_u: Tensor,
    pub b_u: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_u: Var,
    pub b_u: Var,
}

impl HeadParams {
    pub fn init(classes: usize, m: usize, rng: &mut RngStream) -> HeadParams {
        let s = (6.0 / (classes + m) as f64).sqrt();
        HeadParams {
            w_u: Tensor::uniform_init(classes, m, s, rng),
            b_u: Tensor::zeros(classes, 1),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            w_u: tape.param(self.w_u.clone()),
            b_u: tape.param(self.b_u.clone()),
        }
    }
}

/// Full attention-core parameters. `layer_count` is 2 in the default
/// model; 1 drops the second refinement for the ablation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H2ratParams {
    pub layer1: AttnLayerParams,
    pub layer2: AttnLayerParams,
    pub head: HeadParams,
    pub layer_count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct H2ratVars {
    pub layer1: AttnLayerVars,
    pub layer2: AttnLayerVars,
    pub head: HeadVars,
    pub layer_count: usize,
}

impl H2ratParams {
    pub fn init(m: usize, k: usize, classes: usize, layer_count: usize, rng: &mut RngStream) -> H2ratParams {
        H2ratParams {
            layer1: AttnLayerParams::init(k, m, rng),
            layer2: AttnLayerParams::init(k, m, rng),
            head: HeadParams::init(classes, m, rng),
            layer_count,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layer1.w_v.cols()
    }

    pub fn class_count(&self) -> usize {
        self.head.w_u.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> H2ratVars {
        H2ratVars {
            layer1: self.layer1.bind(tape),
            layer2: self.layer2.bind(tape),
            head: self.head.bind(tape),
            layer_count: self.layer_count,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.layer1.tensors("attn1");
        out.extend(self.layer2.tensors("attn2"));
        out.push(("head.w_u".into(), &self.head.w_u));
        out.push(("head.b_u".into(), &self.head.b_u));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.layer1.tensors_mut("attn1");
        out.extend(self.layer2.tensors_mut("attn2"));
        out.push(("head.w_u".into(), &mut self.head.w_u));
        out.push(("head.b_u".into(), &mut self.head.b_u));
        out
    }
}

/// Tape handles to the interesting intermediates of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub p1: Var,
    pub p2: Var,
    pub u1: Var,
    pub u2: Var,
    pub p_ans: Var,
}

/// Materialized forward-pass result.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutcome {
    pub p1: Tensor,
    pub p2: Tensor,
    pub u1: Tensor,
    pub u2: Tensor,
    pub p_ans: Tensor,
    pub predicted_class: usize,
    pub confidence: f64,
}

/// One attention layer. Returns the attention distribution `p` (d x 1),
/// the attended region summary `v` (m x 1), and the refined query
/// `u = v + query`.
pub fn attention_layer(
    tape: &mut Tape,
    regions: Var,
    query: Var,
    params: &AttnLayerVars,
) -> Result<(Var, Var, Var)> {
    let wv = tape.matmul(params.w_v, regions)?; // k x d
    let wr = tape.matmul(params.w_r, query)?; // k x 1
    let wr_b = tape.add(wr, params.b_r)?;
    let pre = tape.broadcast_add_cols(wv, wr_b)?;
    let h = tape.tanh(pre)?; // k x d
    let scores = tape.matmul(params.w_p, h)?; // 1 x d
    let scores_b = tape.broadcast_add_cols(scores, params.b_p)?;
    let logits = tape.transpose(scores_b)?; // d x 1
    let p = tape.softmax_vec(logits)?;
    let v = tape.matmul(regions, p)?; // m x 1, attention-weighted column sum
    let u = tape.add(v, query)?;
    Ok((p, v, u))
}

/// The full core on an existing tape: both attention layers plus the
/// classification softmax.
pub fn forward_on_tape(
    tape: &mut Tape,
    regions: Var,
    reminder: Var,
    params: &H2ratVars,
) -> Result<ForwardVars> {
    let (p1, _v1, u1) = attention_layer(tape, regions, reminder, &params.layer1)?;
    let (p2, u2) = if params.layer_count >= 2 {
        let (p2, _v2, u2) = attention_layer(tape, regions, u1, &params.layer2)?;
        (p2, u2)
    } else {
        (p1, u1)
    };
    let logits = tape.matmul(params.head.w_u, u2)?;
    let logits_b = tape.add(logits, params.head.b_u)?;
    let p_ans = tape.softmax_vec(logits_b)?;
    Ok(ForwardVars {
        p1,
        p2,
        u1,
        u2,
        p_ans,
    })
}

/// Convenience forward over frozen parameters; builds a private tape.
pub fn forward(regions: &Tensor, reminder: &Tensor, params: &H2ratParams) -> Result<AttentionOutcome> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let rv = tape.constant(regions.clone());
    let qv = tape.constant(reminder.clone());
    let fv = forward_on_tape(&mut tape, rv, qv, &vars)?;
    outcome_from_tape(&tape, &fv)
}

/// Read the materialized outcome out of a tape.
pub fn outcome_from_tape(tape: &Tape, fv: &ForwardVars) -> Result<AttentionOutcome> {
    let p_ans = tape.value(fv.p_ans)?.clone();
    let predicted_class = p_ans.argmax();
    let confidence = p_ans.get(predicted_class, 0);
    Ok(AttentionOutcome {
        p1: tape.value(fv.p1)?.clone(),
        p2: tape.value(fv.p2)?.clone(),
        u1: tape.value(fv.u1)?.clone(),
        u2: tape.value(fv.u2)?.clone(),
        p_ans,
        predicted_class,
        confidence,
    })
}

/// One candidate corrective action with its conditional probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionProb {
    pub action: u32,
    pub p: f64,
}

/// Correction candidates for one (abnormality class, attention zone) key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRule {
    pub class: usize,
    pub zone: usize,
    pub actions: Vec<ActionProb>,
}

/// Lookup from (predicted class, quadrant of the attention argmax) to a
/// distribution over corrective actions.
///
/// ```
/// use h2rat::scenarios::CorpusDefinition;
///
/// let table = CorpusDefinition::desk_default(1).correction_table;
/// assert_eq!(table.best_action(0, 0).unwrap(), 0);
/// ```
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrectionTable {
    pub rules: Vec<CorrectionRule>,
}

impl CorrectionTable {
    pub fn lookup(&self, class: usize, zone: usize) -> Option<&CorrectionRule> {
        self.rules.iter().find(|r| r.class == class && r.zone == zone)
    }

    /// Every rule must carry a non-empty probability distribution.
    pub fn validate(&self) -> Result<()> {
        for r in &self.rules {
            if r.actions.is_empty() {
                return Err(Error::Config(format!(
                    "correction rule ({}, {}) has no actions",
                    r.class, r.zone
                )));
            }
            let sum: f64 = r.actions.iter().map(|a| a.p).sum();
            if (sum - 1.0).abs() > 1e-9 || r.actions.iter().any(|a| a.p < 0.0) {
                return Err(Error::Config(format!(
                    "correction rule ({}, {}) probabilities sum to {sum}",
                    r.class, r.zone
                )));
            }
        }
        Ok(())
    }

    /// Highest-probability action for the rule; exact ties break toward
    /// the lowest action id.
    pub fn best_action(&self, class: usize, zone: usize) -> Result<u32> {
        let rule = self
            .lookup(class, zone)
            .ok_or(Error::NoCorrection { class, zone })?;
        let mut best: Option<&ActionProb> = None;
        for a in &rule.actions {
            best = Some(match best {
                None => a,
                Some(b) if a.p > b.p || (a.p == b.p && a.action < b.action) => a,
                Some(b) => b,
            });
        }
        Ok(best.expect("validated rules are non-empty").action)
    }
}

/// Recommend the corrective action for an outcome: the attention argmax
/// picks the zone, the predicted class picks the rule, argmax picks the
/// action.
pub fn recommend_correction(
    outcome: &AttentionOutcome,
    rows: usize,
    cols: usize,
    table: &CorrectionTable,
) -> Result<u32> {
    let region = outcome.p2.argmax();
    let zone = zone_of_region(rows, cols, region);
    table.best_action(outcome.predicted_class, zone)
}
