//! End-to-end model: word embedding, LSTM reminder encoding, region
//! projection, and the stacked attention core wired together on one tape.

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionOutcome, ForwardVars, H2ratParams, H2ratVars};
use crate::error::Result;
use crate::numerics::{RngStream, Tape, Tensor, Var};
use crate::textenc::{self, LstmCellParams, LstmCellVars, Reminder};
use crate::vision::{self, ProjectionParams, ProjectionVars, RegionGrid};

/// Model shape record; stored in checkpoints and validated on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Embedding / hidden / projected-feature dimension.
    pub m: usize,
    /// Attention layer width.
    pub k: usize,
    /// Abnormality class count.
    pub classes: usize,
    /// Raw region feature dimension.
    pub feat_dim: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub vocab_size: usize,
    /// Stacked attention depth (2 in the default model).
    pub layer_count: usize,
}

impl ModelDims {
    pub fn region_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

/// Every trainable tensor of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Word embedding matrix, m x vocab_size.
    pub embedding: Tensor,
    pub lstm: LstmCellParams,
    pub projection: ProjectionParams,
    pub attention: H2ratParams,
}

/// Tape handles for one bound forward/backward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub embedding: Var,
    pub lstm: LstmCellVars,
    pub projection: ProjectionVars,
    pub attention: H2ratVars,
}

impl ModelParams {
    pub fn init(dims: ModelDims, rng: &mut RngStream) -> ModelParams {
        let s_emb = (6.0 / (dims.m + dims.vocab_size) as f64).sqrt();
        ModelParams {
            dims,
            embedding: Tensor::uniform_init(dims.m, dims.vocab_size, s_emb, rng),
            lstm: LstmCellParams::init(dims.m, rng),
            projection: ProjectionParams::init(dims.m, dims.feat_dim, rng),
            attention: H2ratParams::init(dims.m, dims.k, dims.classes, dims.layer_count, rng),
        }
    }

    /// Register every parameter on a fresh tape. The order here matches
    /// [`ModelVars::vars`] and [`ModelParams::tensors_mut`]; the optimizer
    /// relies on that pairing.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            embedding: tape.param(self.embedding.clone()),
            lstm: self.lstm.bind(tape),
            projection: self.projection.bind(tape),
            attention: self.attention.bind(tape),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embedding".into(), &self.embedding)];
        out.extend(
            self.lstm
                .tensors()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t)),
        );
        out.extend(
            self.projection
                .tensors()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t)),
        );
        out.extend(self.attention.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("embedding".into(), &mut self.embedding)];
        out.extend(
            self.lstm
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t)),
        );
        out.extend(
            self.projection
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t)),
        );
        out.extend(self.attention.tensors_mut());
        out
    }

    /// Round all parameters through f32, the checkpoint storage precision.
    pub fn quantize_f32(&self) -> ModelParams {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            *t = t.quantize_f32();
        }
        out
    }
}

impl ModelVars {
    /// Parameter handles in the same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = vec![("embedding".into(), self.embedding)];
        out.extend(
            self.lstm
                .vars()
                .into_iter()
                .map(|(n, v)| (n.to_string(), v)),
        );
        out.extend(
            self.projection
                .vars()
                .into_iter()
                .map(|(n, v)| (n.to_string(), v)),
        );
        let a = &self.attention;
        for (prefix, l) in [("attn1", a.layer1), ("attn2", a.layer2)] {
            out.push((format!("{prefix}.w_v"), l.w_v));
            out.push((format!("{prefix}.w_r"), l.w_r));
            out.push((format!("{prefix}.b_r"), l.b_r));
            out.push((format!("{prefix}.w_p"), l.w_p));
            out.push((format!("{prefix}.b_p"), l.b_p));
        }
        out.push(("head.w_u".into(), a.head.w_u));
        out.push(("head.b_u".into(), a.head.b_u));
        out
    }
}

/// Run the whole pipeline on a tape: tokens -> embedding -> LSTM ->
/// region projection -> stacked attention -> class probabilities.
pub fn forward_sample(
    tape: &mut Tape,
    vars: &ModelVars,
    reminder: &Reminder,
    grid: &RegionGrid,
) -> Result<ForwardVars> {
    let seq = textenc::embed(tape, reminder, vars.embedding)?;
    let r_i = textenc::encode_reminder(tape, &seq, &vars.lstm)?;
    let v_i = vision::project_regions(tape, grid, &vars.projection)?;
    attention::forward_on_tape(tape, v_i, r_i, &vars.attention)
}

/// Inference over frozen parameters; builds a private tape per call.
pub fn infer(params: &ModelParams, reminder: &Reminder, grid: &RegionGrid) -> Result<AttentionOutcome> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let fv = forward_sample(&mut tape, &vars, reminder, grid)?;
    attention::outcome_from_tape(&tape, &fv)
}
