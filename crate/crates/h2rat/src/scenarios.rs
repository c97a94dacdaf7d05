//! Synthetic scenario corpus: labeled region grids with an implanted
//! abnormality, templated verbal reminders, baseline attention, and the
//! correction table.
//!
//! Each sample plants a class signature (plus Gaussian noise) in one or
//! two interior culprit regions and a shared background signature
//! everywhere else, then instantiates a reminder template for the class.
//! A configurable fraction of reminders name no location at all, so the
//! attention mechanism has to find the culprit from vision alone.
//!
//! ```
//! use h2rat::numerics::RngStream;
//! use h2rat::scenarios::{generate_corpus, CorpusDefinition};
//!
//! let def = CorpusDefinition::desk_default(11);
//! let mut rng = RngStream::new(11);
//! let corpus = generate_corpus(&def, 8, &mut rng).unwrap();
//! assert_eq!(corpus.train.len(), 4);
//! assert_eq!(corpus.test.len(), 4);
//! assert!(corpus.train.iter().all(|s| !s.spec.culprit_regions.is_empty()));
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{ActionProb, CorrectionRule, CorrectionTable};
use crate::error::{Error, Result};
use crate::io_util::{self, Reader};
use crate::numerics::{RngStream, Tensor};
use crate::textenc::{normalize_words, Vocabulary};
use crate::vision::{is_interior, zone_of_region, FeatureSource, RegionGrid};

pub const CORPUS_MAGIC: &str = "H2RC";
pub const CORPUS_VERSION: u32 = 1;

/// Corrective action ids used by the default correction table:
/// 0 pause and replan, 1 release the grasp, 2 adjust the wrist pose,
/// 3 re-align the elbow, 4 move to the target region, 5 back off and
/// re-approach, 6 reorder the placement, 7 re-stack the objects.
pub const ACTION_NAMES: [&str; 8] = [
    "pause and replan",
    "release the grasp",
    "adjust the wrist pose",
    "re-align the elbow",
    "move to the target region",
    "back off and re-approach",
    "reorder the placement",
    "re-stack the objects",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    KitchenServeWater,
    FactoryPickGear,
}

pub const TASKS: [Task; 2] = [Task::KitchenServeWater, Task::FactoryPickGear];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Abnormality {
    WrongAction,
    WrongPose,
    WrongRegion,
    WrongSpatialRelation,
}

pub const ABNORMALITIES: [Abnormality; 4] = [
    Abnormality::WrongAction,
    Abnormality::WrongPose,
    Abnormality::WrongRegion,
    Abnormality::WrongSpatialRelation,
];

impl Abnormality {
    pub fn class_id(self) -> usize {
        ABNORMALITIES.iter().position(|&a| a == self).unwrap()
    }

    pub fn from_class_id(id: usize) -> Option<Abnormality> {
        ABNORMALITIES.get(id).copied()
    }
}

impl fmt::Display for Abnormality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Abnormality::WrongAction => "wrong action",
            Abnormality::WrongPose => "wrong pose",
            Abnormality::WrongRegion => "wrong region",
            Abnormality::WrongSpatialRelation => "wrong spatial relation",
        };
        f.write_str(s)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::KitchenServeWater => "kitchen serve water",
            Task::FactoryPickGear => "factory pick gear",
        };
        f.write_str(s)
    }
}

/// Ground-truth description of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub task: Task,
    pub abnormality: Abnormality,
    /// Interior region ids carrying the class signature; sorted, non-empty.
    pub culprit_regions: Vec<usize>,
    pub correction_action: u32,
}

/// One labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub grid: RegionGrid,
    pub reminder_text: String,
    /// Probability vector over regions, uniform on the culprit set.
    pub baseline_attention: Tensor,
}

/// Reminder templates for one (task, abnormality) pair. `{loc}` expands
/// to the culprit zone phrase; `{name}` expands to a synonym choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub task: Task,
    pub abnormality: Abnormality,
    pub with_location: Vec<String>,
    pub without_location: Vec<String>,
}

/// Class signature feature vector for one (task, abnormality) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub task: Task,
    pub abnormality: Abnormality,
    pub vector: Vec<f64>,
}

/// Everything needed to regenerate or interpret a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDefinition {
    pub rows: usize,
    pub cols: usize,
    pub feat_dim: usize,
    /// Gaussian noise level on region features; the difficulty knob.
    pub sigma: f64,
    pub seed: u64,
    pub split_ratio: f64,
    /// Fraction of reminders instantiated without a location phrase.
    pub location_ambiguous_rate: f64,
    pub templates: Vec<TemplateSet>,
    pub synonyms: Vec<(String, Vec<String>)>,
    pub signatures: Vec<Signature>,
    pub background: Vec<f64>,
    pub correction_table: CorrectionTable,
}

/// A generated corpus with its definition and 50/50 class-stratified
/// train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub definition: CorpusDefinition,
    pub train: Vec<Scenario>,
    pub test: Vec<Scenario>,
}

const ZONE_PHRASES: [&str; 4] = ["upper left", "upper right", "lower left", "lower right"];

fn default_templates() -> Vec<TemplateSet> {
    let mut out = Vec::new();
    for &task in &TASKS {
        let obj = match task {
            Task::KitchenServeWater => "{k_obj}",
            Task::FactoryPickGear => "{f_obj}",
        };
        let verb = match task {
            Task::KitchenServeWater => "{k_verb}",
            Task::FactoryPickGear => "{f_verb}",
        };
        for &abn in &ABNORMALITIES {
            let (with_location, without_location) = match abn {
                Abnormality::WrongAction => (
                    vec![
                        format!("{{alert}} that is the wrong action near the {{loc}} area"),
                        format!("{{alert}} do not {verb} the {obj} by the {{loc}} part"),
                        format!("wrong action in the {{loc}} region you must {verb} the {obj} differently"),
                    ],
                    vec![
                        format!("{{alert}} the robot is doing the wrong action with the {obj}"),
                        format!("that action is wrong you should not {verb} the {obj} now"),
                    ],
                ),
                Abnormality::WrongPose => (
                    vec![
                        format!("{{alert}} the arm pose is wrong in the {{loc}} area"),
                        format!("the gripper pose looks wrong near the {{loc}} corner {{alert}}"),
                        format!("bad pose by the {{loc}} side fix the wrist before the {obj}"),
                    ],
                    vec![
                        format!("{{alert}} the pose of the arm is wrong"),
                        format!("the elbow pose looks bad please adjust before the {obj}"),
                    ],
                ),
                Abnormality::WrongRegion => (
                    vec![
                        format!("{{alert}} wrong region the {obj} sits in the {{loc}} area"),
                        format!("you moved to the wrong region check the {{loc}} part"),
                        format!("that is the wrong region the target is at the {{loc}} spot"),
                    ],
                    vec![
                        format!("{{alert}} the robot is searching in the wrong region"),
                        format!("wrong region the {obj} is somewhere else entirely"),
                    ],
                ),
                Abnormality::WrongSpatialRelation => (
                    vec![
                        format!("{{alert}} the spatial relation is wrong the {obj} tilts at the {{loc}} area"),
                        format!("the {obj} should sit above the surface see the {{loc}} part"),
                        format!("wrong relation the {obj} overlaps the holder near the {{loc}} corner"),
                    ],
                    vec![
                        format!("the spatial relation is wrong the {obj} is behind the holder"),
                        format!("{{alert}} the {obj} and the holder are arranged wrong"),
                    ],
                ),
            };
            out.push(TemplateSet {
                task,
                abnormality: abn,
                with_location,
                without_location,
            });
        }
    }
    out
}

fn default_synonyms() -> Vec<(String, Vec<String>)> {
    vec![
        (
            "alert".into(),
            vec!["stop".into(), "wait".into(), "careful".into(), "hey".into()],
        ),
        (
            "k_obj".into(),
            vec!["cup".into(), "glass".into(), "pitcher".into()],
        ),
        (
            "k_verb".into(),
            vec!["grab".into(), "tilt".into(), "pour".into()],
        ),
        (
            "f_obj".into(),
            vec!["gear".into(), "part".into(), "bin".into()],
        ),
        (
            "f_verb".into(),
            vec!["pick".into(), "drop".into(), "press".into()],
        ),
    ]
}

fn default_correction_table() -> CorrectionTable {
    let mut rules = Vec::new();
    for class in 0..ABNORMALITIES.len() {
        for zone in 0..4 {
            let a = (2 * class) as u32;
            let (p_first, p_second) = if zone < 2 { (0.7, 0.3) } else { (0.3, 0.7) };
            rules.push(CorrectionRule {
                class,
                zone,
                actions: vec![
                    ActionProb { action: a, p: p_first },
                    ActionProb { action: a + 1, p: p_second },
                ],
            });
        }
    }
    CorrectionTable { rules }
}

/// Quantize through f32 and renormalize; the canonical in-memory form of
/// any probability vector that round-trips through an f32 file field.
fn f32_canonical_probs(vals: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = vals.iter().map(|&v| v as f32 as f64).collect();
    let sum: f64 = q.iter().sum();
    q.into_iter().map(|v| v / sum).collect()
}

impl CorpusDefinition {
    /// The desk-scale default: 4x4 grid, 16-dim raw features, sigma 0.3.
    pub fn desk_default(seed: u64) -> CorpusDefinition {
        Self::with_geometry(seed, 4, 4, 16, 0.3)
    }

    pub fn with_geometry(
        seed: u64,
        rows: usize,
        cols: usize,
        feat_dim: usize,
        sigma: f64,
    ) -> CorpusDefinition {
        let mut rng = RngStream::new(seed ^ 0x5167_A770_5EED);
        let unit_vec = |rng: &mut RngStream| {
            let v: Vec<f64> = (0..feat_dim).map(|_| rng.next_gauss()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| (x / norm) as f32 as f64).collect::<Vec<f64>>()
        };
        let mut signatures = Vec::new();
        for &task in &TASKS {
            for &abn in &ABNORMALITIES {
                signatures.push(Signature {
                    task,
                    abnormality: abn,
                    vector: unit_vec(&mut rng),
                });
            }
        }
        let background = unit_vec(&mut rng);
        CorpusDefinition {
            rows,
            cols,
            feat_dim,
            sigma,
            seed,
            split_ratio: 0.5,
            location_ambiguous_rate: 0.3,
            templates: default_templates(),
            synonyms: default_synonyms(),
            signatures,
            background,
            correction_table: default_correction_table(),
        }
    }

    pub fn region_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn signature(&self, task: Task, abn: Abnormality) -> Option<&[f64]> {
        self.signatures
            .iter()
            .find(|s| s.task == task && s.abnormality == abn)
            .map(|s| s.vector.as_slice())
    }

    fn template_set(&self, task: Task, abn: Abnormality) -> Result<&TemplateSet> {
        self.templates
            .iter()
            .find(|t| t.task == task && t.abnormality == abn)
            .ok_or_else(|| Error::MissingTemplate {
                task: task.to_string(),
                abnormality: abn.to_string(),
            })
    }

    fn synonym_options(&self, key: &str) -> Option<&[String]> {
        self.synonyms
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
    }

    /// Every word any template can produce, as a frozen vocabulary, so
    /// generated reminders never contain UNK.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words = BTreeSet::new();
        let add_text = |words: &mut BTreeSet<String>, text: &str| {
            for w in normalize_words(text) {
                words.insert(w);
            }
        };
        for ts in &self.templates {
            for t in ts.with_location.iter().chain(&ts.without_location) {
                for tok in t.split_whitespace() {
                    if let Some(key) = tok.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
                        if key == "loc" {
                            for z in ZONE_PHRASES {
                                add_text(&mut words, z);
                            }
                        } else if let Some(opts) = self.synonym_options(key) {
                            for o in opts {
                                add_text(&mut words, o);
                            }
                        }
                    } else {
                        add_text(&mut words, tok);
                    }
                }
            }
        }
        Vocabulary::build(words)
    }

    fn instantiate(&self, template: &str, zone: usize, rng: &mut RngStream) -> String {
        let mut out = Vec::new();
        for tok in template.split_whitespace() {
            if let Some(key) = tok.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
                if key == "loc" {
                    out.push(ZONE_PHRASES[zone].to_string());
                } else if let Some(opts) = self.synonym_options(key) {
                    out.push(opts[rng.next_index(opts.len())].clone());
                } else {
                    out.push(tok.to_string());
                }
            } else {
                out.push(tok.to_string());
            }
        }
        out.join(" ")
    }

    fn validate_templates(&self) -> Result<()> {
        for &task in &TASKS {
            for &abn in &ABNORMALITIES {
                let ts = self.template_set(task, abn)?;
                if ts.with_location.is_empty() || ts.without_location.is_empty() {
                    return Err(Error::MissingTemplate {
                        task: task.to_string(),
                        abnormality: abn.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn generate_sample(
    def: &CorpusDefinition,
    abn: Abnormality,
    rng: &mut RngStream,
) -> Result<Scenario> {
    let d = def.region_count();
    let task = TASKS[rng.next_index(TASKS.len())];

    // culprits: one or two distinct interior regions, never on the rim,
    // so the edge filter cannot erase ground truth
    let interior: Vec<usize> = (0..d)
        .filter(|&i| is_interior(def.rows, def.cols, i, 1))
        .collect();
    let count = 1 + rng.next_index(2.min(interior.len()));
    let mut culprits = BTreeSet::new();
    while culprits.len() < count {
        culprits.insert(interior[rng.next_index(interior.len())]);
    }
    let culprits: Vec<usize> = culprits.into_iter().collect();

    let signature = def
        .signature(task, abn)
        .ok_or_else(|| Error::MissingTemplate {
            task: task.to_string(),
            abnormality: abn.to_string(),
        })?;

    // features: class signature in culprit columns, background elsewhere,
    // both plus N(0, sigma); stored through f32 so files round-trip exactly
    let mut features = Tensor::zeros(def.feat_dim, d);
    for j in 0..d {
        let base = if culprits.contains(&j) {
            signature
        } else {
            &def.background
        };
        for (i, &b) in base.iter().enumerate() {
            let v = b + def.sigma * rng.next_gauss();
            features.set(i, j, v as f32 as f64);
        }
    }
    let grid = RegionGrid::new(def.rows, def.cols, features, FeatureSource::Synthetic)?;

    // reminder text
    let zone = zone_of_region(def.rows, def.cols, culprits[0]);
    let ts = def.template_set(task, abn)?;
    let ambiguous = rng.next_f64() < def.location_ambiguous_rate;
    let pool = if ambiguous {
        &ts.without_location
    } else {
        &ts.with_location
    };
    let template = &pool[rng.next_index(pool.len())];
    let reminder_text = def.instantiate(template, zone, rng);

    // baseline: uniform over culprits, in f32-canonical form
    let mut baseline_raw = vec![0.0; d];
    for &c in &culprits {
        baseline_raw[c] = 1.0 / culprits.len() as f64;
    }
    let baseline_attention = Tensor::new(d, 1, f32_canonical_probs(&baseline_raw))?;

    let correction_action = def.correction_table.best_action(abn.class_id(), zone)?;

    Ok(Scenario {
        spec: ScenarioSpec {
            task,
            abnormality: abn,
            culprit_regions: culprits,
            correction_action,
        },
        grid,
        reminder_text,
        baseline_attention,
    })
}

/// Generate `n` samples, class-balanced round-robin over the four
/// abnormality types, split 50/50 stratified by class. Deterministic in
/// the stream seed.
pub fn generate_corpus(def: &CorpusDefinition, n: usize, rng: &mut RngStream) -> Result<Corpus> {
    if n < 2 {
        return Err(Error::Config(format!("corpus size {n} must be at least 2")));
    }
    def.validate_templates()?;
    def.correction_table.validate()?;

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut per_class_seen = [0usize; 4];
    for i in 0..n {
        let abn = ABNORMALITIES[i % ABNORMALITIES.len()];
        let sample = generate_sample(def, abn, rng)?;
        let k = abn.class_id();
        // alternate within each class: stratified, equal split
        if per_class_seen[k] % 2 == 0 {
            train.push(sample);
        } else {
            test.push(sample);
        }
        per_class_seen[k] += 1;
    }
    Ok(Corpus {
        definition: def.clone(),
        train,
        test,
    })
}

fn write_scenario(out: &mut Vec<u8>, s: &Scenario) {
    out.push(TASKS.iter().position(|&t| t == s.spec.task).unwrap() as u8);
    out.push(s.spec.abnormality.class_id() as u8);
    io_util::put_u32(out, s.spec.culprit_regions.len() as u32);
    for &c in &s.spec.culprit_regions {
        io_util::put_u32(out, c as u32);
    }
    io_util::put_u32(out, s.spec.correction_action);
    io_util::put_str_prefixed(out, &s.reminder_text);
    // region-major f32 features
    for j in 0..s.grid.region_count() {
        for i in 0..s.grid.feature_dim() {
            io_util::put_f32(out, s.grid.raw_features.get(i, j));
        }
    }
    io_util::put_f32_slice(out, s.baseline_attention.as_slice());
}

fn read_scenario(r: &mut Reader<'_>, def: &CorpusDefinition) -> Result<Scenario> {
    let task_idx = r.take(1, "task id")?[0] as usize;
    let task = *TASKS.get(task_idx).ok_or(Error::Truncated { what: "task id" })?;
    let class = r.take(1, "abnormality id")?[0] as usize;
    let abnormality =
        Abnormality::from_class_id(class).ok_or(Error::Truncated { what: "abnormality id" })?;
    let n_culprits = r.u32("culprit count")? as usize;
    let mut culprit_regions = Vec::with_capacity(n_culprits);
    for _ in 0..n_culprits {
        culprit_regions.push(r.u32("culprit region")? as usize);
    }
    let correction_action = r.u32("correction action")?;
    let reminder_text = r.str_prefixed("reminder text")?.to_string();

    let d = def.region_count();
    let f = def.feat_dim;
    let mut features = Tensor::zeros(f, d);
    for j in 0..d {
        let col = r.f32_vec(f, "region features")?;
        for (i, v) in col.into_iter().enumerate() {
            features.set(i, j, v);
        }
    }
    let baseline = r.f32_vec(d, "baseline attention")?;
    Ok(Scenario {
        spec: ScenarioSpec {
            task,
            abnormality,
            culprit_regions,
            correction_action,
        },
        grid: RegionGrid::new(def.rows, def.cols, features, FeatureSource::Synthetic)?,
        reminder_text,
        baseline_attention: Tensor::new(d, 1, f32_canonical_probs(&baseline))?,
    })
}

/// Write the corpus file: magic, version, JSON metadata, sample records,
/// trailing CRC32 of everything after the magic.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    io_util::put_u32(&mut payload, CORPUS_VERSION);
    let meta = serde_json::to_string(&corpus.definition)?;
    io_util::put_str_prefixed(&mut payload, &meta);
    io_util::put_u32(&mut payload, corpus.train.len() as u32);
    io_util::put_u32(&mut payload, corpus.test.len() as u32);
    for s in corpus.train.iter().chain(&corpus.test) {
        write_scenario(&mut payload, s);
    }
    let crc = io_util::crc32(&payload);
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(CORPUS_MAGIC.as_bytes());
    out.extend_from_slice(&payload);
    io_util::put_u32(&mut out, crc);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(CORPUS_MAGIC)?;
    if r.remaining() < 8 {
        return Err(Error::Truncated { what: "corpus payload" });
    }
    let payload = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = io_util::crc32(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader::new(payload);
    let version = r.u32("corpus version")?;
    if version != CORPUS_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CORPUS_VERSION,
        });
    }
    let definition: CorpusDefinition = serde_json::from_str(r.str_prefixed("corpus metadata")?)?;
    let n_train = r.u32("train count")? as usize;
    let n_test = r.u32("test count")? as usize;
    let mut train = Vec::with_capacity(n_train);
    for _ in 0..n_train {
        train.push(read_scenario(&mut r, &definition)?);
    }
    let mut test = Vec::with_capacity(n_test);
    for _ in 0..n_test {
        test.push(read_scenario(&mut r, &definition)?);
    }
    Ok(Corpus {
        definition,
        train,
        test,
    })
}
