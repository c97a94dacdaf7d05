//! Loss, Adam optimizer, training loop, and checkpoint persistence.
//!
//! Training is a pure function of (corpus, config): one splitmix stream
//! seeds initialization and batch shuffling, batches run on a single tape
//! with the loss averaged over members, and parameters update in a fixed
//! order. Two runs with the same inputs produce byte-identical
//! checkpoints.
//!
//! ```
//! use h2rat::numerics::RngStream;
//! use h2rat::scenarios::{generate_corpus, CorpusDefinition};
//! use h2rat::training::{train, TrainConfig};
//!
//! let def = CorpusDefinition::desk_default(3);
//! let mut rng = RngStream::new(3);
//! let corpus = generate_corpus(&def, 8, &mut rng).unwrap();
//! let config = TrainConfig { epochs: 2, batch_size: 4, m: 8, k: 6, eval_every: 2, ..TrainConfig::default() };
//! let ckpt = train(&corpus, &config).unwrap();
//! assert_eq!(ckpt.metadata.epochs_run, 2);
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::CorrectionTable;
use crate::error::{Error, Result};
use crate::io_util::{self, Reader};
use crate::model::{self, ModelDims, ModelParams};
use crate::numerics::{RngStream, Tape, Tensor, Var};
use crate::scenarios::{Corpus, Scenario};
use crate::textenc::{self, Reminder, Vocabulary};

pub const CHECKPOINT_MAGIC: &str = "H2RW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which parameters end up in the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSelection {
    /// Best held-out accuracy seen at an eval point; ties keep the
    /// earlier epoch.
    BestValidation,
    /// Whatever the final epoch produced.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Validate every n epochs.
    pub eval_every: usize,
    /// Stop after this many eval points without improvement.
    pub patience: usize,
    pub selection: ModelSelection,
    /// Embedding / hidden dimension.
    pub m: usize,
    /// Attention layer width.
    pub k: usize,
    /// Stacked attention depth.
    pub layer_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 1,
            eval_every: 5,
            patience: 8,
            selection: ModelSelection::BestValidation,
            m: 32,
            k: 24,
            layer_count: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("m", self.m),
            ("k", self.k),
            ("layer_count", self.layer_count),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub config: TrainConfig,
    pub corpus_seed: u64,
    pub final_train_loss: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Self-describing trained model: parameters, vocabulary, correction
/// table, and how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocabulary: Vocabulary,
    pub correction_table: CorrectionTable,
    pub metadata: TrainMetadata,
}

/// `-log(p_ans[label])`, recorded on the tape; the classification loss.
pub fn loss_cross_entropy(tape: &mut Tape, p_ans: Var, label: usize) -> Result<Var> {
    tape.nll_loss(p_ans, label)
}

struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl AdamState {
    fn new(params: &ModelParams) -> AdamState {
        let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|(_, t)| t.shape()).collect();
        AdamState {
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((idx, (_, p)), g) in params.tensors_mut().into_iter().enumerate().zip(grads) {
            let m = self.m[idx].as_mut_slice();
            let v = self.v[idx].as_mut_slice();
            let pd = p.as_mut_slice();
            for i in 0..pd.len() {
                let gi = g.as_slice()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn tokenize_split(split: &[Scenario], vocab: &Vocabulary) -> Result<Vec<Reminder>> {
    split
        .iter()
        .map(|s| textenc::tokenize(&s.reminder_text, vocab))
        .collect()
}

/// Fraction of samples whose predicted class matches the label.
pub fn split_accuracy(
    params: &ModelParams,
    reminders: &[Reminder],
    samples: &[Scenario],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput { what: "split" });
    }
    let mut hits = 0usize;
    for (r, s) in reminders.iter().zip(samples) {
        let out = model::infer(params, r, &s.grid)?;
        if out.predicted_class == s.spec.abnormality.class_id() {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// One epoch's log line.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Train on the corpus train split, validating on the test split.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<Checkpoint> {
    train_with_log(corpus, config, |_| {})
}

pub fn train_with_log(
    corpus: &Corpus,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(EpochLog),
) -> Result<Checkpoint> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::EmptyInput { what: "train split" });
    }
    let def = &corpus.definition;
    let vocab = def.vocabulary();
    let dims = ModelDims {
        m: config.m,
        k: config.k,
        classes: crate::scenarios::ABNORMALITIES.len(),
        feat_dim: def.feat_dim,
        grid_rows: def.rows,
        grid_cols: def.cols,
        vocab_size: vocab.size(),
        layer_count: config.layer_count,
    };

    let mut rng = RngStream::new(config.seed);
    let mut params = ModelParams::init(dims, &mut rng);
    let mut adam = AdamState::new(&params);

    let train_reminders = tokenize_split(&corpus.train, &vocab)?;
    let val_reminders = tokenize_split(&corpus.test, &vocab)?;

    let mut best_params = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut evals_since_best = 0usize;
    let mut final_train_loss = f64::INFINITY;
    let mut epochs_run = 0usize;

    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    'epochs: for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let mut batch_loss: Option<Var> = None;
            for &idx in batch {
                let sample = &corpus.train[idx];
                let fv = model::forward_sample(&mut tape, &vars, &train_reminders[idx], &sample.grid)?;
                let loss = loss_cross_entropy(&mut tape, fv.p_ans, sample.spec.abnormality.class_id())?;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let total = batch_loss.expect("non-empty batch");
            let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
            let loss_value = tape.value(mean)?.get(0, 0);
            if !loss_value.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            epoch_loss += loss_value * batch.len() as f64;

            let var_list = vars.vars();
            let grads = tape.backward(mean)?;
            let grad_tensors: Vec<Tensor> = var_list
                .iter()
                .map(|(_, v)| grads.get(*v).expect("registered parameter").clone())
                .collect();
            adam.step(&mut params, &grad_tensors, config);
        }
        let mean_train_loss = epoch_loss / corpus.train.len() as f64;
        final_train_loss = mean_train_loss;
        epochs_run = epoch;

        let mut val_accuracy = None;
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let acc = if corpus.test.is_empty() {
                0.0
            } else {
                split_accuracy(&params, &val_reminders, &corpus.test)?
            };
            val_accuracy = Some(acc);
            if acc > best_val {
                best_val = acc;
                best_params = params.clone();
                best_epoch = epoch;
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
            }
            if evals_since_best > config.patience {
                on_epoch(EpochLog {
                    epoch,
                    train_loss: mean_train_loss,
                    val_accuracy,
                });
                break 'epochs;
            }
        }
        on_epoch(EpochLog {
            epoch,
            train_loss: mean_train_loss,
            val_accuracy,
        });
    }

    let chosen = match config.selection {
        ModelSelection::BestValidation => best_params,
        ModelSelection::Final => params,
    };
    Ok(Checkpoint {
        // checkpoints store f32; quantize once so save/load is bit-exact
        params: chosen.quantize_f32(),
        vocabulary: vocab,
        correction_table: def.correction_table.clone(),
        metadata: TrainMetadata {
            config: config.clone(),
            corpus_seed: def.seed,
            final_train_loss,
            best_val_accuracy: best_val.max(0.0),
            best_epoch,
            epochs_run,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dims: ModelDims,
    tensors: Vec<(String, usize, usize)>,
    vocabulary: Vocabulary,
    correction_table: CorrectionTable,
    metadata: TrainMetadata,
}

/// Write the checkpoint: magic, version, JSON manifest, tensor data as
/// little-endian f32 in manifest order, trailing CRC32.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tensors = ckpt.params.tensors();
    let manifest = Manifest {
        dims: ckpt.params.dims,
        tensors: tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.rows(), t.cols()))
            .collect(),
        vocabulary: ckpt.vocabulary.clone(),
        correction_table: ckpt.correction_table.clone(),
        metadata: ckpt.metadata.clone(),
    };
    let mut payload = Vec::new();
    io_util::put_u32(&mut payload, CHECKPOINT_VERSION);
    io_util::put_str_prefixed(&mut payload, &serde_json::to_string(&manifest)?);
    for (_, t) in &tensors {
        io_util::put_f32_slice(&mut payload, t.as_slice());
    }
    let crc = io_util::crc32(&payload);
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.extend_from_slice(&payload);
    io_util::put_u32(&mut out, crc);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    if r.remaining() < 8 {
        return Err(Error::Truncated {
            what: "checkpoint payload",
        });
    }
    let payload = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = io_util::crc32(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader::new(payload);
    let version = r.u32("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut manifest: Manifest = serde_json::from_str(r.str_prefixed("checkpoint manifest")?)?;
    manifest.vocabulary.rebuild_index();

    // rebuild parameters: a zero-shaped skeleton from dims, filled by name
    let mut skeleton_rng = RngStream::new(0);
    let mut params = ModelParams::init(manifest.dims, &mut skeleton_rng);
    let mut filled = 0usize;
    for (name, rows, cols) in &manifest.tensors {
        let data = r.f32_vec(rows * cols, "tensor data")?;
        let tensor = Tensor::new(*rows, *cols, data)?;
        let mut found = false;
        for (pname, p) in params.tensors_mut() {
            if &pname == name {
                if p.shape() != tensor.shape() {
                    return Err(Error::DimensionMismatch {
                        op: "load_checkpoint",
                        lhs: format!("{name} expects {}x{}", p.rows(), p.cols()),
                        rhs: format!("{rows}x{cols}"),
                    });
                }
                *p = tensor.clone();
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Config(format!("unknown tensor {name} in checkpoint")));
        }
        filled += 1;
    }
    if filled != params.tensors().len() {
        return Err(Error::Truncated {
            what: "checkpoint tensor set",
        });
    }
    // shape cross-check against dims
    if params.embedding.cols() != manifest.dims.vocab_size
        || manifest.dims.vocab_size != manifest.vocabulary.size()
    {
        return Err(Error::DimensionMismatch {
            op: "load_checkpoint",
            lhs: format!("vocab size {}", manifest.vocabulary.size()),
            rhs: format!("embedding {} columns", params.embedding.cols()),
        });
    }
    params.attention.layer_count = manifest.dims.layer_count;
    Ok(Checkpoint {
        params,
        vocabulary: manifest.vocabulary,
        correction_table: manifest.correction_table,
        metadata: manifest.metadata,
    })
}
