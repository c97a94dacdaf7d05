//! Verbal reminder encoding: tokenization, one-hot word embedding, and an
//! LSTM scan whose final hidden state is the sentence vector.
//!
//! The embedding of a one-hot index is just the matching column of the
//! embedding matrix, so the embed step is implemented as a differentiable
//! column selection.
//!
//! ```
//! use h2rat::textenc::{tokenize, Vocabulary, UNK};
//!
//! let vocab = Vocabulary::build(["stop", "wrong", "pose"]);
//! let r = tokenize("Stop! The pose is WRONG.", &vocab).unwrap();
//! assert_eq!(r.tokens.len(), 5);
//! assert!(r.tokens.contains(&UNK)); // "the" and "is" are out of vocabulary
//! ```

use std::collections::BTreeSet;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tape, Tensor, Var};

/// Reserved index for padding.
pub const PAD: usize = 0;
/// Reserved index for out-of-vocabulary words.
pub const UNK: usize = 1;
/// Reminders are short; longer inputs truncate rather than error.
pub const MAX_REMINDER_LEN: usize = 15;

/// Token to dense-index bijection with reserved PAD/UNK slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    index_to_token: Vec<String>,
    #[serde(skip)]
    token_to_index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from a word collection; duplicates collapse, order is sorted
    /// so the same corpus always yields the same index assignment.
    pub fn build<I, S>(words: I) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let unique: BTreeSet<String> = words.into_iter().map(Into::into).collect();
        let mut index_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
        index_to_token.extend(unique);
        let mut v = Vocabulary {
            index_to_token,
            token_to_index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    /// Rebuilds the lookup map; needed after deserialization since only
    /// the token list is stored.
    pub fn rebuild_index(&mut self) {
        self.token_to_index = self
            .index_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.token_to_index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token_at(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(String::as_str)
    }
}

/// A tokenized verbal alert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reminder {
    pub raw_text: String,
    pub tokens: Vec<usize>,
}

impl Reminder {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True when every token fell back to UNK.
    pub fn all_unknown(&self) -> bool {
        self.tokens.iter().all(|&t| t == UNK)
    }
}

/// Lowercase, strip ASCII punctuation, split on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Tokenize a reminder against a vocabulary; truncates at [`MAX_REMINDER_LEN`].
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Reminder> {
    let words = normalize_words(text);
    if words.is_empty() {
        return Err(Error::EmptyInput {
            what: "reminder text",
        });
    }
    let tokens = words
        .iter()
        .take(MAX_REMINDER_LEN)
        .map(|w| vocab.index_of(w))
        .collect();
    Ok(Reminder {
        raw_text: text.to_string(),
        tokens,
    })
}

/// Embed each token as the matching column of the embedding matrix.
pub fn embed(tape: &mut Tape, reminder: &Reminder, embedding: Var) -> Result<Vec<Var>> {
    let cols = tape.value(embedding)?.cols();
    reminder
        .tokens
        .iter()
        .map(|&idx| {
            if idx >= cols {
                return Err(Error::IndexOutOfRange {
                    what: "vocabulary index",
                    index: idx,
                    bound: cols,
                });
            }
            tape.select_column(embedding, idx)
        })
        .collect()
}

/// Gate weights for a single-layer LSTM cell; embedding dim equals hidden
/// dim `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub b_f: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub b_o: Tensor,
    pub w_xg: Tensor,
    pub w_hg: Tensor,
    pub b_g: Tensor,
}

/// Tape handles for bound LSTM parameters.
#[derive(Debug, Clone, Copy)]
pub struct LstmCellVars {
    pub w_xi: Var,
    pub w_hi: Var,
    pub b_i: Var,
    pub w_xf: Var,
    pub w_hf: Var,
    pub b_f: Var,
    pub w_xo: Var,
    pub w_ho: Var,
    pub b_o: Var,
    pub w_xg: Var,
    pub w_hg: Var,
    pub b_g: Var,
}

impl LstmCellParams {
    /// Xavier-uniform weights, zero biases, forget bias +1.
    pub fn init(m: usize, rng: &mut RngStream) -> LstmCellParams {
        let s = (6.0 / (m + m) as f64).sqrt();
        let mut w = || Tensor::uniform_init(m, m, s, rng);
        let mut forget_bias = Tensor::zeros(m, 1);
        let w_xi = w();
        let w_hi = w();
        let w_xf = w();
        let w_hf = w();
        let w_xo = w();
        let w_ho = w();
        let w_xg = w();
        let w_hg = w();
        for b in forget_bias.as_mut_slice() {
            *b = 1.0;
        }
        LstmCellParams {
            w_xi,
            w_hi,
            b_i: Tensor::zeros(m, 1),
            w_xf,
            w_hf,
            b_f: forget_bias,
            w_xo,
            w_ho,
            b_o: Tensor::zeros(m, 1),
            w_xg,
            w_hg,
            b_g: Tensor::zeros(m, 1),
        }
    }

    pub fn zeros(m: usize) -> LstmCellParams {
        let z = || Tensor::zeros(m, m);
        let b = || Tensor::zeros(m, 1);
        LstmCellParams {
            w_xi: z(),
            w_hi: z(),
            b_i: b(),
            w_xf: z(),
            w_hf: z(),
            b_f: b(),
            w_xo: z(),
            w_ho: z(),
            b_o: b(),
            w_xg: z(),
            w_hg: z(),
            b_g: b(),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_xi.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmCellVars {
        LstmCellVars {
            w_xi: tape.param(self.w_xi.clone()),
            w_hi: tape.param(self.w_hi.clone()),
            b_i: tape.param(self.b_i.clone()),
            w_xf: tape.param(self.w_xf.clone()),
            w_hf: tape.param(self.w_hf.clone()),
            b_f: tape.param(self.b_f.clone()),
            w_xo: tape.param(self.w_xo.clone()),
            w_ho: tape.param(self.w_ho.clone()),
            b_o: tape.param(self.b_o.clone()),
            w_xg: tape.param(self.w_xg.clone()),
            w_hg: tape.param(self.w_hg.clone()),
            b_g: tape.param(self.b_g.clone()),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("lstm.w_xi", &self.w_xi),
            ("lstm.w_hi", &self.w_hi),
            ("lstm.b_i", &self.b_i),
            ("lstm.w_xf", &self.w_xf),
            ("lstm.w_hf", &self.w_hf),
            ("lstm.b_f", &self.b_f),
            ("lstm.w_xo", &self.w_xo),
            ("lstm.w_ho", &self.w_ho),
            ("lstm.b_o", &self.b_o),
            ("lstm.w_xg", &self.w_xg),
            ("lstm.w_hg", &self.w_hg),
            ("lstm.b_g", &self.b_g),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("lstm.w_xi", &mut self.w_xi),
            ("lstm.w_hi", &mut self.w_hi),
            ("lstm.b_i", &mut self.b_i),
            ("lstm.w_xf", &mut self.w_xf),
            ("lstm.w_hf", &mut self.w_hf),
            ("lstm.b_f", &mut self.b_f),
            ("lstm.w_xo", &mut self.w_xo),
            ("lstm.w_ho", &mut self.w_ho),
            ("lstm.b_o", &mut self.b_o),
            ("lstm.w_xg", &mut self.w_xg),
            ("lstm.w_hg", &mut self.w_hg),
            ("lstm.b_g", &mut self.b_g),
        ]
    }
}

impl LstmCellVars {
    pub fn vars(&self) -> Vec<(&'static str, Var)> {
        vec![
            ("lstm.w_xi", self.w_xi),
            ("lstm.w_hi", self.w_hi),
            ("lstm.b_i", self.b_i),
            ("lstm.w_xf", self.w_xf),
            ("lstm.w_hf", self.w_hf),
            ("lstm.b_f", self.b_f),
            ("lstm.w_xo", self.w_xo),
            ("lstm.w_ho", self.w_ho),
            ("lstm.b_o", self.b_o),
            ("lstm.w_xg", self.w_xg),
            ("lstm.w_hg", self.w_hg),
            ("lstm.b_g", self.b_g),
        ]
    }
}

fn gate(
    tape: &mut Tape,
    w_x: Var,
    x: Var,
    w_h: Var,
    h: Var,
    b: Var,
) -> Result<Var> {
    let xa = tape.matmul(w_x, x)?;
    let ha = tape.matmul(w_h, h)?;
    let s = tape.add(xa, ha)?;
    tape.add(s, b)
}

/// One LSTM step: standard input/forget/output gates with tanh candidate.
pub fn lstm_step(
    tape: &mut Tape,
    p: &LstmCellVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let i_pre = gate(tape, p.w_xi, x, p.w_hi, h_prev, p.b_i)?;
    let i = tape.sigmoid(i_pre)?;
    let f_pre = gate(tape, p.w_xf, x, p.w_hf, h_prev, p.b_f)?;
    let f = tape.sigmoid(f_pre)?;
    let o_pre = gate(tape, p.w_xo, x, p.w_ho, h_prev, p.b_o)?;
    let o = tape.sigmoid(o_pre)?;
    let g_pre = gate(tape, p.w_xg, x, p.w_hg, h_prev, p.b_g)?;
    let g = tape.tanh(g_pre)?;

    let keep = tape.mul_elem(f, c_prev)?;
    let write = tape.mul_elem(i, g)?;
    let c = tape.add(keep, write)?;
    let c_tanh = tape.tanh(c)?;
    let h = tape.mul_elem(o, c_tanh)?;
    Ok((h, c))
}

/// Scan the embedded word sequence from a zero initial state; the final
/// hidden state represents the whole reminder.
pub fn encode_reminder(tape: &mut Tape, seq: &[Var], params: &LstmCellVars) -> Result<Var> {
    if seq.is_empty() {
        return Err(Error::EmptyInput {
            what: "embedded reminder sequence",
        });
    }
    let m = tape.value(params.w_xi)?.rows();
    let mut h = tape.constant(Tensor::zeros(m, 1));
    let mut c = tape.constant(Tensor::zeros(m, 1));
    for &x in seq {
        let (nh, nc) = lstm_step(tape, params, x, h, c)?;
        h = nh;
        c = nc;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::build(["stop", "the", "pose", "is", "wrong", "arm"])
    }

    #[test]
    fn tokenize_normalizes() {
        let v = tiny_vocab();
        let r = tokenize("Stop! The pose is wrong.", &v).unwrap();
        let words: Vec<_> = r
            .tokens
            .iter()
            .map(|&i| v.token_at(i).unwrap().to_string())
            .collect();
        assert_eq!(words, ["stop", "the", "pose", "is", "wrong"]);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = tiny_vocab();
        let r = tokenize("stop the zeppelin", &v).unwrap();
        assert_eq!(r.tokens[2], UNK);
    }

    #[test]
    fn long_input_truncates_at_max_len() {
        let v = tiny_vocab();
        let text = (0..20).map(|_| "stop").collect::<Vec<_>>().join(" ");
        let r = tokenize(&text, &v).unwrap();
        assert_eq!(r.len(), MAX_REMINDER_LEN);
    }

    #[test]
    fn empty_after_normalization_errors() {
        let v = tiny_vocab();
        assert!(tokenize("!!! ...", &v).is_err());
    }

    #[test]
    fn vocab_indices_dense_and_bijective() {
        let v = Vocabulary::build(["b", "a", "b", "c"]);
        assert_eq!(v.size(), 5); // pad, unk, a, b, c
        for i in 2..v.size() {
            let tok = v.token_at(i).unwrap().to_string();
            assert_eq!(v.index_of(&tok), i);
        }
    }

    #[test]
    fn embed_selects_columns() {
        let v = tiny_vocab();
        let m = 3;
        let mut rng = RngStream::new(4);
        let emb = Tensor::uniform_init(m, v.size(), 1.0, &mut rng);
        let r = tokenize("pose pose wrong", &v).unwrap();
        let mut tape = Tape::new();
        let ev = tape.param(emb.clone());
        let seq = embed(&mut tape, &r, ev).unwrap();
        // one-hot at index j selects column j
        let j = r.tokens[0];
        assert_eq!(tape.value(seq[0]).unwrap(), &emb.column(j).unwrap());
        // repeated token, identical embedding
        assert_eq!(tape.value(seq[0]).unwrap(), tape.value(seq[1]).unwrap());
    }

    #[test]
    fn embed_identity_matrix_recovers_one_hot() {
        let v = tiny_vocab();
        let emb = Tensor::identity(v.size());
        let r = tokenize("wrong", &v).unwrap();
        let mut tape = Tape::new();
        let ev = tape.constant(emb);
        let seq = embed(&mut tape, &r, ev).unwrap();
        let x = tape.value(seq[0]).unwrap();
        assert_eq!(x.get(r.tokens[0], 0), 1.0);
        assert_eq!(x.sum(), 1.0);
    }

    #[test]
    fn embed_out_of_range_errors() {
        let mut tape = Tape::new();
        let ev = tape.constant(Tensor::zeros(2, 3));
        let r = Reminder {
            raw_text: String::new(),
            tokens: vec![7],
        };
        assert!(embed(&mut tape, &r, ev).is_err());
    }

    #[test]
    fn zero_params_zero_inputs_encode_to_zero() {
        let m = 4;
        let params = LstmCellParams::zeros(m);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let xs: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::zeros(m, 1))).collect();
        let h = encode_reminder(&mut tape, &xs, &vars).unwrap();
        assert_eq!(tape.value(h).unwrap(), &Tensor::zeros(m, 1));
    }

    #[test]
    fn single_step_matches_gate_equation_oracle() {
        let m = 3;
        let mut rng = RngStream::new(12);
        let params = LstmCellParams::init(m, &mut rng);
        let x = Tensor::uniform_init(m, 1, 1.0, &mut rng);

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let h = encode_reminder(&mut tape, &[xv], &vars).unwrap();
        let got = tape.value(h).unwrap().clone();

        // Direct gate-equation evaluation with zero initial state.
        let sig = |t: &Tensor| t.sigmoid_elem().unwrap();
        let i = sig(&params.w_xi.matmul(&x).unwrap().add(&params.b_i).unwrap());
        let o = sig(&params.w_xo.matmul(&x).unwrap().add(&params.b_o).unwrap());
        let g = params
            .w_xg
            .matmul(&x)
            .unwrap()
            .add(&params.b_g)
            .unwrap()
            .tanh_elem()
            .unwrap();
        let c = i.mul_elem(&g).unwrap();
        let expected = o.mul_elem(&c.tanh_elem().unwrap()).unwrap();
        assert!(got.approx_eq(&expected, 1e-15));
    }

    #[test]
    fn word_order_changes_encoding() {
        let m = 4;
        let mut rng = RngStream::new(77);
        let params = LstmCellParams::init(m, &mut rng);
        let a = Tensor::uniform_init(m, 1, 1.0, &mut rng);
        let b = Tensor::uniform_init(m, 1, 1.0, &mut rng);
        let c = Tensor::uniform_init(m, 1, 1.0, &mut rng);

        let encode = |order: [&Tensor; 3]| {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let seq: Vec<Var> = order.iter().map(|t| tape.constant((*t).clone())).collect();
            let h = encode_reminder(&mut tape, &seq, &vars).unwrap();
            tape.value(h).unwrap().clone()
        };
        let fwd = encode([&a, &b, &c]);
        let rev = encode([&c, &b, &a]);
        assert_ne!(fwd, rev);
    }

    #[test]
    fn empty_sequence_errors() {
        let params = LstmCellParams::zeros(2);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        assert!(encode_reminder(&mut tape, &[], &vars).is_err());
    }

    #[test]
    fn output_shape_independent_of_length() {
        let m = 3;
        let mut rng = RngStream::new(9);
        let params = LstmCellParams::init(m, &mut rng);
        for len in [1, 5, 15] {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let seq: Vec<Var> = (0..len)
                .map(|_| {
                    let t = Tensor::uniform_init(m, 1, 1.0, &mut rng);
                    tape.constant(t)
                })
                .collect();
            let h = encode_reminder(&mut tape, &seq, &vars).unwrap();
            assert_eq!(tape.value(h).unwrap().shape(), (m, 1));
        }
    }
}
