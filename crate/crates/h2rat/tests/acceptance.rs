//! Acceptance suite: ten end-to-end checks covering gradients, the
//! forward contract, distribution invariants, learning, evaluation,
//! serialization, the edge filter, and the layer ablation. Each test
//! prints one "criterion N ...: pass" line (visible with --nocapture)
//! with the achieved numbers.

use std::time::Instant;

use h2rat::attention::{forward, H2ratParams};
use h2rat::error::Error;
use h2rat::eval::{self, EvalOptions};
use h2rat::model::{self, ModelDims, ModelParams};
use h2rat::numerics::{RngStream, Tape, Tensor};
use h2rat::scenarios::{self, CorpusDefinition};
use h2rat::textenc::{self, Vocabulary};
use h2rat::training::{self, ModelSelection, TrainConfig};
use h2rat::vision::{apply_edge_filter, zone_of_region, EdgeFilterSpec, FeatureSource, RegionGrid};

const WORDS: [&str; 10] = [
    "stop", "wrong", "pose", "arm", "left", "right", "gear", "water", "region", "grasp",
];

fn random_setup(seed: u64) -> (ModelParams, Vocabulary, Vec<usize>, RegionGrid) {
    let mut rng = RngStream::new(seed);
    let vocab = Vocabulary::build(WORDS);
    let m = 2 + rng.next_index(7); // <= 8
    let k = 2 + rng.next_index(5); // <= 6
    let grid_rows = 2 + rng.next_index(2); // 2..=3, d <= 9
    let grid_cols = 2 + rng.next_index(2);
    let feat_dim = 2 + rng.next_index(5);
    let dims = ModelDims {
        m,
        k,
        classes: 4,
        feat_dim,
        grid_rows,
        grid_cols,
        vocab_size: vocab.size(),
        layer_count: 2,
    };
    let params = ModelParams::init(dims, &mut rng);
    let len = 1 + rng.next_index(5); // <= 5
    let tokens: Vec<usize> = (0..len).map(|_| rng.next_index(vocab.size())).collect();
    let feats = Tensor::uniform_init(feat_dim, grid_rows * grid_cols, 1.0, &mut rng);
    let grid = RegionGrid::new(grid_rows, grid_cols, feats, FeatureSource::Synthetic).unwrap();
    (params, vocab, tokens, grid)
}

fn reminder_from(tokens: &[usize]) -> textenc::Reminder {
    textenc::Reminder {
        raw_text: String::new(),
        tokens: tokens.to_vec(),
    }
}

#[test]
fn criterion_01_gradient_oracle() {
    let start = Instant::now();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let (params, _vocab, tokens, grid) = random_setup(1000 + seed);
        let reminder = reminder_from(&tokens);
        let label = (seed % 4) as usize;

        let loss_at = |p: &ModelParams| -> f64 {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let fv = model::forward_sample(&mut tape, &vars, &reminder, &grid).unwrap();
            let loss = tape.nll_loss(fv.p_ans, label).unwrap();
            tape.value(loss).unwrap().get(0, 0)
        };

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let fv = model::forward_sample(&mut tape, &vars, &reminder, &grid).unwrap();
        let loss = tape.nll_loss(fv.p_ans, label).unwrap();
        let var_list = vars.vars();
        let grads = tape.backward(loss).unwrap();

        for ((name, tensor), (_, var)) in params.tensors().iter().zip(&var_list) {
            let analytic = grads.get(*var).unwrap().clone();
            for i in 0..tensor.len() {
                let mut plus = params.clone();
                plus.tensors_mut().into_iter().find(|(n, _)| n == name).unwrap().1.as_mut_slice()[i] += eps;
                let mut minus = params.clone();
                minus.tensors_mut().into_iter().find(|(n, _)| n == name).unwrap().1.as_mut_slice()[i] -= eps;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
                let a = analytic.as_slice()[i];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                let rel = (a - numeric).abs() / denom;
                worst = worst.max(rel);
                assert!(rel < 1e-4, "seed {seed} {name}[{i}]: analytic {a} vs numeric {numeric}");
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "gradient oracle took {elapsed:.1}s");
    println!("criterion 1 (gradient oracle, 50 configs): pass; max rel err {worst:.2e}, {elapsed:.1}s");
}

#[test]
fn criterion_02_stepwise_forward_oracle() {
    for seed in 0..20u64 {
        let mut rng = RngStream::new(2000 + seed);
        let m = 3 + rng.next_index(6);
        let k = 2 + rng.next_index(5);
        let d = 4 + rng.next_index(12);
        let params = H2ratParams::init(m, k, 4, 2, &mut rng);
        let regions = Tensor::uniform_init(m, d, 1.0, &mut rng);
        let query = Tensor::uniform_init(m, 1, 1.0, &mut rng);
        let out = forward(&regions, &query, &params).unwrap();

        // independent composition from the tensor primitives
        let layer = |q: &Tensor, lp: &h2rat::attention::AttnLayerParams| {
            let cv = lp.w_v.matmul(&regions).unwrap();
            let cq = lp.w_r.matmul(q).unwrap().add(&lp.b_r).unwrap();
            let h = cv.broadcast_add_cols(&cq).unwrap().tanh_elem().unwrap();
            let scores = lp
                .w_p
                .matmul(&h)
                .unwrap()
                .broadcast_add_cols(&lp.b_p)
                .unwrap();
            let p = scores.transpose().softmax_vec().unwrap();
            let v = regions.matmul(&p).unwrap();
            let u = v.add(q).unwrap();
            (p, u)
        };
        let (p1, u1) = layer(&query, &params.layer1);
        let (p2, u2) = layer(&u1, &params.layer2);
        let p_ans = params
            .head
            .w_u
            .matmul(&u2)
            .unwrap()
            .add(&params.head.b_u)
            .unwrap()
            .softmax_vec()
            .unwrap();

        assert!(out.p1.approx_eq(&p1, 1e-12), "seed {seed} p1");
        assert!(out.p2.approx_eq(&p2, 1e-12), "seed {seed} p2");
        assert!(out.p_ans.approx_eq(&p_ans, 1e-12), "seed {seed} p_ans");
    }
    println!("criterion 2 (stepwise forward oracle, 20 cases): pass");
}

fn assert_prob_vec(t: &Tensor, what: &str) {
    assert!(t.as_slice().iter().all(|&v| v >= 0.0), "{what}: negative entry");
    assert!((t.sum() - 1.0).abs() < 1e-9, "{what}: sums to {}", t.sum());
}

#[test]
fn criterion_03_distribution_invariants_fuzz() {
    let table = CorpusDefinition::desk_default(3).correction_table;
    table.validate().unwrap();
    for rule in &table.rules {
        let sum: f64 = rule.actions.iter().map(|a| a.p).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(rule.actions.iter().all(|a| a.p >= 0.0));
    }

    let mut rng = RngStream::new(303);
    let scales = [0.01, 0.3, 1.0, 10.0, 100.0];
    for case in 0..1000usize {
        let m = 2 + rng.next_index(7);
        let k = 2 + rng.next_index(5);
        let rows = 3 + rng.next_index(3);
        let cols = 3 + rng.next_index(3);
        let d = rows * cols;
        let scale = scales[case % scales.len()];
        let mut prng = rng.fork();
        let params = H2ratParams::init(m, k, 4, 2, &mut prng);
        let regions = Tensor::uniform_init(m, d, scale, &mut rng);
        let query = Tensor::uniform_init(m, 1, scale, &mut rng);
        let out = forward(&regions, &query, &params).unwrap();
        assert_prob_vec(&out.p1, "p1");
        assert_prob_vec(&out.p2, "p2");
        assert_prob_vec(&out.p_ans, "p_ans");
        let filtered = apply_edge_filter(&out.p2, rows, cols, &EdgeFilterSpec::default()).unwrap();
        assert_prob_vec(&filtered, "filtered p2");
    }
    println!("criterion 3 (distribution invariants, 1000-case fuzz): pass");
}

#[test]
fn criterion_04_permutation_equivariance() {
    for seed in 0..20u64 {
        let mut rng = RngStream::new(4000 + seed);
        let m = 3 + rng.next_index(6);
        let k = 2 + rng.next_index(5);
        let d = 5 + rng.next_index(12);
        let params = H2ratParams::init(m, k, 4, 2, &mut rng);
        let regions = Tensor::uniform_init(m, d, 1.0, &mut rng);
        let query = Tensor::uniform_init(m, 1, 1.0, &mut rng);

        let mut perm: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut perm);
        let mut permuted = Tensor::zeros(m, d);
        for (dst, &src) in perm.iter().enumerate() {
            permuted.set_column(dst, &regions.column(src).unwrap()).unwrap();
        }

        let base = forward(&regions, &query, &params).unwrap();
        let shuf = forward(&permuted, &query, &params).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert!((shuf.p1.get(dst, 0) - base.p1.get(src, 0)).abs() <= 1e-12, "seed {seed} p1");
            assert!((shuf.p2.get(dst, 0) - base.p2.get(src, 0)).abs() <= 1e-12, "seed {seed} p2");
        }
        assert!(base.p_ans.approx_eq(&shuf.p_ans, 1e-12), "seed {seed} p_ans");
    }
    println!("criterion 4 (permutation equivariance, 20 cases): pass");
}

#[test]
fn criterion_05_memorization() {
    let start = Instant::now();
    let def = CorpusDefinition::desk_default(5);
    let mut rng = RngStream::new(5);
    let corpus = scenarios::generate_corpus(&def, 32, &mut rng).unwrap();
    let config = TrainConfig {
        epochs: 500,
        batch_size: 8,
        seed: 5,
        eval_every: 100,
        patience: 100,
        selection: ModelSelection::Final,
        ..TrainConfig::default()
    };
    let run = || {
        let mut first_below = None;
        let ckpt = training::train_with_log(&corpus, &config, |log| {
            if first_below.is_none() && log.train_loss < 0.05 {
                first_below = Some(log.epoch);
            }
        })
        .unwrap();
        (ckpt, first_below)
    };
    let (ckpt, first_below) = run();
    let (ckpt2, _) = run();
    assert_eq!(ckpt.params, ckpt2.params, "training not deterministic per seed");

    assert!(
        ckpt.metadata.final_train_loss < 0.05,
        "final train loss {}",
        ckpt.metadata.final_train_loss
    );
    let vocab = &ckpt.vocabulary;
    let reminders: Vec<_> = corpus
        .train
        .iter()
        .map(|s| textenc::tokenize(&s.reminder_text, vocab).unwrap())
        .collect();
    let acc = training::split_accuracy(&ckpt.params, &reminders, &corpus.train).unwrap();
    assert_eq!(acc, 1.0, "train accuracy {acc}");

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "memorization took {elapsed:.1}s");
    println!(
        "criterion 5 (memorization): pass; loss {:.4} (first below 0.05 at epoch {:?}), train acc 1.0, {elapsed:.1}s",
        ckpt.metadata.final_train_loss, first_below
    );
}

#[test]
fn criterion_06_learning_at_scale() {
    let def = CorpusDefinition::desk_default(42);
    let mut rng = RngStream::new(42);
    let corpus = scenarios::generate_corpus(&def, 2000, &mut rng).unwrap();
    let config = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    let ckpt = training::train(&corpus, &config).unwrap();
    let ev = eval::evaluate(&ckpt, &corpus.test, &EvalOptions::default()).unwrap();
    let acc = ev.summary.classification_accuracy;
    let hit = ev.agreement.argmax_hit_rate;
    assert!(acc >= 0.90, "test accuracy {acc}");
    assert!(hit >= 0.75, "attention argmax hit rate {hit}");
    println!(
        "criterion 6 (learning at scale, 2000 samples, sigma 0.3): pass; test acc {acc:.4}, attention hit rate {hit:.4}"
    );
}

#[test]
fn criterion_07_evaluation_harness_oracle() {
    // perfect predictor
    let perfect: Vec<(usize, usize, f64)> = (0..400).map(|i| (i % 4, i % 4, 1.0)).collect();
    for p in eval::compute_pr_points(&perfect, 4, &eval::default_thresholds()) {
        assert_eq!(p.macro_precision, 1.0, "threshold {}", p.threshold);
        assert_eq!(p.macro_recall, 1.0);
    }

    // seeded uniform-random predictor on a balanced set
    let n_per_class = 250usize;
    let mut rng = RngStream::new(707);
    let random: Vec<(usize, usize, f64)> = (0..4 * n_per_class)
        .map(|i| (i % 4, rng.next_index(4), 1.0))
        .collect();
    let points = eval::compute_pr_points(&random, 4, &[0.0]);
    let macro_recall = points[0].macro_recall;
    // macro recall is a mean of 4 independent Bin(n, 1/4)/n draws
    let sigma = (0.25 * 0.75 / n_per_class as f64 / 4.0).sqrt();
    assert!(
        (macro_recall - 0.25).abs() <= 3.0 * sigma,
        "macro recall {macro_recall} outside 0.25 +/- {}",
        3.0 * sigma
    );
    println!(
        "criterion 7 (evaluation harness oracle): pass; random-predictor macro recall {macro_recall:.4}"
    );
}

#[test]
fn criterion_08_serialization() {
    let dir = tempfile::tempdir().unwrap();
    let def = CorpusDefinition::desk_default(8);
    let mut rng = RngStream::new(8);
    let corpus = scenarios::generate_corpus(&def, 16, &mut rng).unwrap();

    // corpus round trip, field-for-field and byte-for-byte
    let cpath = dir.path().join("c.h2rc");
    scenarios::save_corpus(&corpus, &cpath).unwrap();
    let loaded = scenarios::load_corpus(&cpath).unwrap();
    assert_eq!(corpus, loaded);
    let cpath2 = dir.path().join("c2.h2rc");
    scenarios::save_corpus(&loaded, &cpath2).unwrap();
    assert_eq!(std::fs::read(&cpath).unwrap(), std::fs::read(&cpath2).unwrap());

    // checkpoint round trip with identical forward outputs
    let config = TrainConfig {
        epochs: 3,
        seed: 8,
        eval_every: 3,
        ..TrainConfig::default()
    };
    let ckpt = training::train(&corpus, &config).unwrap();
    let kpath = dir.path().join("k.h2rw");
    training::save_checkpoint(&ckpt, &kpath).unwrap();
    let kloaded = training::load_checkpoint(&kpath).unwrap();
    assert_eq!(ckpt, kloaded);
    for s in corpus.test.iter().take(4) {
        let r = textenc::tokenize(&s.reminder_text, &ckpt.vocabulary).unwrap();
        let a = model::infer(&ckpt.params, &r, &s.grid).unwrap();
        let b = model::infer(&kloaded.params, &r, &s.grid).unwrap();
        assert_eq!(a, b);
    }

    // designated error classes on corruption
    for (path, magicless) in [(&cpath, "corpus"), (&kpath, "checkpoint")] {
        let bytes = std::fs::read(path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xFF;
        let bm = dir.path().join(format!("{magicless}.badmagic"));
        std::fs::write(&bm, &bad_magic).unwrap();

        // cut right after the magic: parsing cannot even reach the checksum
        let tr = dir.path().join(format!("{magicless}.trunc"));
        std::fs::write(&tr, &bytes[..6]).unwrap();
        // cut mid-payload: caught as truncation or checksum damage
        let half = dir.path().join(format!("{magicless}.half"));
        std::fs::write(&half, &bytes[..bytes.len() / 2]).unwrap();

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x01;
        let fl = dir.path().join(format!("{magicless}.flip"));
        std::fs::write(&fl, &flipped).unwrap();

        let load = |p: &std::path::Path| -> Error {
            if magicless == "corpus" {
                scenarios::load_corpus(p).unwrap_err()
            } else {
                training::load_checkpoint(p).unwrap_err()
            }
        };
        assert!(matches!(load(&bm), Error::BadMagic { .. }), "{magicless} magic");
        assert!(matches!(load(&tr), Error::Truncated { .. }), "{magicless} truncation");
        assert!(
            matches!(load(&half), Error::Truncated { .. } | Error::ChecksumMismatch { .. }),
            "{magicless} mid-payload cut: {:?}",
            load(&half)
        );
        assert!(
            matches!(load(&fl), Error::ChecksumMismatch { .. } | Error::Metadata(_)),
            "{magicless} bit flip: {:?}",
            load(&fl)
        );
    }
    println!("criterion 8 (serialization round trips and error classes): pass");
}

#[test]
fn criterion_09_edge_filter_fuzz() {
    let mut rng = RngStream::new(909);
    let spec = EdgeFilterSpec::default();
    for _ in 0..10_000usize {
        let rows = 3 + rng.next_index(4);
        let cols = 3 + rng.next_index(4);
        let d = rows * cols;
        let raw: Vec<f64> = (0..d).map(|_| rng.next_f64() + 1e-9).collect();
        let sum: f64 = raw.iter().sum();
        let p = Tensor::new(d, 1, raw.into_iter().map(|v| v / sum).collect()).unwrap();
        let f = apply_edge_filter(&p, rows, cols, &spec).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                if r == 0 || c == 0 || r == rows - 1 || c == cols - 1 {
                    assert_eq!(f.get(r * cols + c, 0), 0.0, "rim mass at ({r},{c})");
                }
            }
        }
        assert!((f.sum() - 1.0).abs() < 1e-9);
        let am = f.argmax();
        let (ar, ac) = (am / cols, am % cols);
        assert!(ar > 0 && ac > 0 && ar < rows - 1 && ac < cols - 1, "argmax on rim");
        // zone ids stay in quadrant range
        assert!(zone_of_region(rows, cols, am) < 4);
    }
    println!("criterion 9 (edge filter, 10000-vector fuzz): pass");
}

#[test]
fn criterion_10_layer_ablation() {
    let def = CorpusDefinition::desk_default(10);
    let mut rng = RngStream::new(10);
    let corpus = scenarios::generate_corpus(&def, 240, &mut rng).unwrap();
    let config = TrainConfig {
        epochs: 25,
        seed: 10,
        ..TrainConfig::default()
    };
    let a = eval::ablate_layers(&corpus, &config).unwrap();
    let b = eval::ablate_layers(&corpus, &config).unwrap();
    assert_eq!(a, b, "ablation not deterministic");
    assert_eq!(a.one_layer.layer_count, 1);
    assert_eq!(a.two_layer.layer_count, 2);
    let direction = if a.two_layer.attention_hit_rate >= a.one_layer.attention_hit_rate {
        "holds"
    } else {
        "does not hold on this corpus"
    };
    println!(
        "criterion 10 (layer ablation): pass; 1-layer acc {:.4} hit {:.4}; 2-layer acc {:.4} hit {:.4}; two-layer advantage {direction}",
        a.one_layer.classification_accuracy,
        a.one_layer.attention_hit_rate,
        a.two_layer.classification_accuracy,
        a.two_layer.attention_hit_rate
    );
}
