//! Pipeline orchestration behind the command-line entry point: prepare
//! deterministic artifacts from raw DSTC2, train single models or
//! ensembles per component, evaluate (our checkpoints or external
//! tracker-output files), and track token streams incrementally on stdin.

use crate::corpus::{
    self, DialogAnnotations, DialogExample, SlotSchema, Source, TokenEvent, UserSource,
};
use crate::ensemble::{EnsembleManifest, EnsembleMember, Tracker};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport, TurnPrediction};
use crate::model::{path_with_suffix, ComponentModel};
use crate::preprocess::{
    abstract_example, build_abstraction_dict, class_sets, deabstract_distribution, label_counts,
    AbstractionAssignment, AbstractionDict, Vocabulary,
};
use crate::rng::derive_seed;
use crate::train::{DevDialog, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub const ABSTRACTION_THRESHOLD: u32 = 40;
pub const MAX_ABSTRACT_TOKENS: usize = 8;

/// Paths of the three official splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlistPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

/// One run of the pipeline, JSON-serializable; the canonical hash of this
/// struct ties artifacts together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub flists: FlistPaths,
    pub ontology: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_ensemble_size() -> usize {
    10
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Referenced input paths must exist at launch.
    pub fn validate_inputs(&self) -> Result<()> {
        for (what, path) in [
            ("data_root", &self.data_root),
            ("train flist", &self.flists.train),
            ("dev flist", &self.flists.dev),
            ("test flist", &self.flists.test),
            ("ontology", &self.ontology),
        ] {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "{what} does not exist: {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        crate::sha256_hex(self.canonical_json().as_bytes())
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.out_dir.join("prepared")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }

    pub fn ensemble_dir(&self) -> PathBuf {
        self.out_dir.join("ensemble")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

// --- jsonl helpers -----------------------------------------------------------

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = String::new();
    for item in items {
        buf.push_str(&serde_json::to_string(item).expect("item serializes"));
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

// --- prepare -----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareManifest {
    pub version: u32,
    pub config_sha256: String,
    pub vocab_sha256: String,
    pub dict_sha256: String,
    pub counts: BTreeMap<String, usize>,
    /// file name -> sha256 of its bytes
    pub files: BTreeMap<String, String>,
}

fn file_sha(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::sha256_hex(&bytes))
}

/// Serialize all three splits, build the abstraction dict and vocabulary
/// per the config flags, and write deterministic artifacts with a hashed
/// manifest.
pub fn cmd_prepare(config: &RunConfig) -> Result<PrepareManifest> {
    config.validate_inputs()?;
    let dir = config.prepared_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let (train_raw, schema) =
        corpus::load_dataset(&config.data_root, &config.flists.train, &config.ontology)?;
    let (dev_raw, _) =
        corpus::load_dataset(&config.data_root, &config.flists.dev, &config.ontology)?;
    let (test_raw, _) =
        corpus::load_dataset(&config.data_root, &config.flists.test, &config.ontology)?;

    let serialize_all = |raws: &[corpus::RawDialog], source: UserSource| -> Vec<DialogExample> {
        raws.iter()
            .map(|r| corpus::serialize_dialog(r, source, &schema))
            .collect()
    };
    let train_asr = serialize_all(&train_raw, UserSource::Asr1Best);
    let train_transcript = serialize_all(&train_raw, UserSource::Transcript);
    let dev_asr = serialize_all(&dev_raw, UserSource::Asr1Best);
    let test_asr = serialize_all(&test_raw, UserSource::Asr1Best);

    let dict = if config.train.use_abstraction {
        let counts = label_counts(&train_asr);
        build_abstraction_dict(&schema, &counts, ABSTRACTION_THRESHOLD, MAX_ABSTRACT_TOKENS)
    } else {
        AbstractionDict::empty()
    };

    // the vocabulary is built over the abstracted training streams the
    // trainer will actually see
    let mut vocab_source: Vec<DialogExample> = Vec::new();
    let mut add_abstracted = |examples: &[DialogExample]| {
        for ex in examples {
            vocab_source.push(if dict.is_empty() {
                ex.clone()
            } else {
                abstract_example(ex, &dict, &schema).0
            });
        }
    };
    add_abstracted(&train_asr);
    if config.train.use_transcriptions {
        add_abstracted(&train_transcript);
    }
    let vocab = Vocabulary::build(&vocab_source, &dict.abstract_tokens(&schema));

    let dev_annotations: Vec<DialogAnnotations> = dev_raw
        .iter()
        .map(|r| corpus::annotations(r, &schema))
        .collect();
    let test_annotations: Vec<DialogAnnotations> = test_raw
        .iter()
        .map(|r| corpus::annotations(r, &schema))
        .collect();

    let schema_json = serde_json::to_string_pretty(&schema).expect("schema serializes");
    std::fs::write(dir.join("schema.json"), &schema_json)
        .map_err(|e| Error::io(dir.join("schema.json"), e))?;
    vocab.save(&dir.join("vocab.json"))?;
    dict.save(&dir.join("abstraction.json"))?;
    write_jsonl(&dir.join("train.asr.jsonl"), &train_asr)?;
    write_jsonl(&dir.join("train.transcript.jsonl"), &train_transcript)?;
    write_jsonl(&dir.join("dev.asr.jsonl"), &dev_asr)?;
    write_jsonl(&dir.join("test.asr.jsonl"), &test_asr)?;
    write_jsonl(&dir.join("dev.annotations.jsonl"), &dev_annotations)?;
    write_jsonl(&dir.join("test.annotations.jsonl"), &test_annotations)?;

    let mut counts = BTreeMap::new();
    counts.insert("train_asr".to_string(), train_asr.len());
    counts.insert("train_transcript".to_string(), train_transcript.len());
    counts.insert(
        "train_total".to_string(),
        train_asr.len()
            + if config.train.use_transcriptions {
                train_transcript.len()
            } else {
                0
            },
    );
    counts.insert("dev".to_string(), dev_asr.len());
    counts.insert("test".to_string(), test_asr.len());
    counts.insert("vocabulary".to_string(), vocab.len());

    let mut files = BTreeMap::new();
    for name in [
        "schema.json",
        "vocab.json",
        "abstraction.json",
        "train.asr.jsonl",
        "train.transcript.jsonl",
        "dev.asr.jsonl",
        "test.asr.jsonl",
        "dev.annotations.jsonl",
        "test.annotations.jsonl",
    ] {
        files.insert(name.to_string(), file_sha(&dir.join(name))?);
    }
    let manifest = PrepareManifest {
        version: 1,
        config_sha256: config.sha256(),
        vocab_sha256: vocab.sha256(),
        dict_sha256: file_sha(&dir.join("abstraction.json"))?,
        counts,
        files,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(dir.join("manifest.json"), e))?;
    Ok(manifest)
}

/// Prepared artifacts loaded back into memory.
pub struct PreparedData {
    pub schema: SlotSchema,
    pub vocab: Vocabulary,
    pub dict: AbstractionDict,
    pub manifest: PrepareManifest,
    dir: PathBuf,
}

impl PreparedData {
    pub fn load(config: &RunConfig) -> Result<PreparedData> {
        let dir = config.prepared_dir();
        if !dir.join("manifest.json").exists() {
            return Err(Error::Config(format!(
                "no prepared artifacts in {}; run `prepare` first",
                dir.display()
            )));
        }
        let manifest: PrepareManifest = serde_json::from_str(
            &std::fs::read_to_string(dir.join("manifest.json"))
                .map_err(|e| Error::io(dir.join("manifest.json"), e))?,
        )
        .map_err(|e| Error::parse(dir.join("manifest.json"), e.to_string()))?;
        let schema: SlotSchema = serde_json::from_str(
            &std::fs::read_to_string(dir.join("schema.json"))
                .map_err(|e| Error::io(dir.join("schema.json"), e))?,
        )
        .map_err(|e| Error::parse(dir.join("schema.json"), e.to_string()))?;
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let dict = AbstractionDict::load(&dir.join("abstraction.json"))?;
        Ok(PreparedData {
            schema,
            vocab,
            dict,
            manifest,
            dir,
        })
    }

    pub fn examples(&self, name: &str) -> Result<Vec<DialogExample>> {
        read_jsonl(&self.dir.join(name))
    }

    pub fn annotations(&self, split: Split) -> Result<Vec<DialogAnnotations>> {
        read_jsonl(&self.dir.join(format!("{}.annotations.jsonl", split.name())))
    }

    /// Abstract one example under the prepared dict (identity when the
    /// dict is empty).
    pub fn abstracted(&self, ex: &DialogExample) -> (DialogExample, AbstractionAssignment) {
        if self.dict.is_empty() {
            (ex.clone(), AbstractionAssignment::default())
        } else {
            abstract_example(ex, &self.dict, &self.schema)
        }
    }
}

/// Stable per-component tag mixed into derived seeds.
fn component_tag(component: &str) -> u64 {
    let digest = crate::sha256_hex(component.as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

fn selected_components<'s>(schema: &'s SlotSchema, selection: &str) -> Result<Vec<&'s str>> {
    if selection == "all" {
        return Ok(schema.components.iter().map(|c| c.name.as_str()).collect());
    }
    match schema.component(selection) {
        Some(c) => Ok(vec![c.name.as_str()]),
        None => Err(Error::Argument(format!(
            "unknown component {selection:?}; known: {}",
            schema
                .components
                .iter()
                .map(|c| c.name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

/// Everything `fit` needs for one component, assembled from prepared data.
struct ComponentData {
    train: Vec<crate::preprocess::EncodedDialog>,
    dev: Vec<DevDialog>,
}

fn assemble_component_data(
    prepared: &PreparedData,
    component: &str,
    config: &TrainConfig,
) -> Result<ComponentData> {
    let sets = class_sets(&prepared.schema, &prepared.dict);
    let classes = &sets[component];

    let mut train_examples = prepared.examples("train.asr.jsonl")?;
    if config.use_transcriptions {
        train_examples.extend(prepared.examples("train.transcript.jsonl")?);
    }
    let mut train = Vec::with_capacity(train_examples.len());
    for ex in &train_examples {
        let (abstracted, _) = prepared.abstracted(ex);
        let mut enc = crate::preprocess::encode_for_component(&abstracted, &prepared.vocab, classes)?;
        if !config.use_scores {
            enc.flatten_scores();
        }
        train.push(enc);
    }

    let mut dev = Vec::new();
    for ex in &prepared.examples("dev.asr.jsonl")? {
        let (abstracted, assignment) = prepared.abstracted(ex);
        let mut encoded =
            crate::preprocess::encode_for_component(&abstracted, &prepared.vocab, classes)?;
        if !config.use_scores {
            encoded.flatten_scores();
        }
        // concrete targets come from the pre-abstraction labels
        let targets = ex
            .labels
            .iter()
            .map(|(&idx_pre, label)| {
                // abstraction preserves the count and order of labeled
                // indices, so pair them positionally
                (idx_pre, label[component].clone())
            })
            .collect::<Vec<_>>();
        let abstracted_indices: Vec<usize> = abstracted.labels.keys().copied().collect();
        assert_eq!(abstracted_indices.len(), targets.len());
        let targets = abstracted_indices
            .into_iter()
            .zip(targets)
            .map(|(idx_abs, (idx_pre, value))| {
                (idx_abs, ex.events[idx_pre].turn_index, value)
            })
            .collect();
        dev.push(DevDialog {
            encoded,
            assignment,
            targets,
            first_mention: ex.schedule.get(component).copied().flatten(),
        });
    }
    Ok(ComponentData { train, dev })
}

/// Train one model per selected component (ensemble member `member_index`),
/// writing checkpoints and reports under `models_dir`.
fn train_components(
    config: &RunConfig,
    prepared: &PreparedData,
    selection: &str,
    member_index: u64,
    models_dir: &Path,
    stem_suffix: &str,
) -> Result<Vec<(String, PathBuf)>> {
    std::fs::create_dir_all(models_dir).map_err(|e| Error::io(models_dir, e))?;
    let member_seed = config.train.seed + member_index;
    let config_sha = config.train.sha256();
    let mut stems = Vec::new();
    for component in selected_components(&prepared.schema, selection)? {
        let data = assemble_component_data(prepared, component, &config.train)?;
        let trainer = Trainer {
            config: &config.train,
            oov_id: prepared.vocab.oov_id(),
        };
        let sets = class_sets(&prepared.schema, &prepared.dict);
        let init_seed = derive_seed(member_seed, &[component_tag(component)]);
        eprintln!(
            "training {component} (member {member_index}, {} train dialogs, {} dev dialogs)",
            data.train.len(),
            data.dev.len()
        );
        let (model, report) = trainer.fit(
            component,
            sets[component].clone(),
            prepared.vocab.len(),
            init_seed,
            &data.train,
            &data.dev,
        )?;
        let stem = models_dir.join(format!("{component}{stem_suffix}"));
        model.save(&stem, &prepared.vocab.sha256(), &config_sha)?;
        let report_path = path_with_suffix(&stem, ".train.json");
        std::fs::write(&report_path, report.to_json())
            .map_err(|e| Error::io(&report_path, e))?;
        eprintln!(
            "  epoch {} selected, dev metric {:.4}",
            report.selected_epoch, report.best_dev_metric
        );
        stems.push((component.to_string(), stem));
    }
    Ok(stems)
}

/// Train one model per component.
pub fn cmd_train(config: &RunConfig, selection: &str) -> Result<()> {
    let prepared = PreparedData::load(config)?;
    train_components(config, &prepared, selection, 0, &config.models_dir(), "")?;
    Ok(())
}

/// Train `ensemble_size` members per component from distinct seeds and
/// write an ensemble manifest per component.
pub fn cmd_ensemble(config: &RunConfig, selection: &str) -> Result<()> {
    if config.ensemble_size < 1 {
        return Err(Error::Argument("ensemble size must be >= 1".into()));
    }
    let prepared = PreparedData::load(config)?;
    let dir = config.ensemble_dir();
    let mut per_component: BTreeMap<String, Vec<EnsembleMember>> = BTreeMap::new();
    for member in 0..config.ensemble_size {
        let stems = train_components(
            config,
            &prepared,
            selection,
            member as u64,
            &dir,
            &format!(".member{member}"),
        )?;
        for (component, stem) in stems {
            let manifest_path = path_with_suffix(&stem, ".json");
            let manifest: crate::model::CheckpointManifest = serde_json::from_str(
                &std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
            )
            .map_err(|e| Error::parse(&manifest_path, e.to_string()))?;
            per_component.entry(component).or_default().push(EnsembleMember {
                stem: stem
                    .file_name()
                    .expect("stem has file name")
                    .to_string_lossy()
                    .into_owned(),
                weights_sha256: manifest.weights_sha256,
            });
        }
    }
    for (component, members) in per_component {
        let manifest = EnsembleManifest {
            version: 1,
            component: component.clone(),
            members,
        };
        manifest.save(&dir.join(format!("{component}.ensemble.json")))?;
    }
    Ok(())
}

/// What to evaluate or track with.
#[derive(Debug, Clone)]
pub enum TrackerSource {
    /// Single-model checkpoints directory (from `train`).
    Models(PathBuf),
    /// Ensemble directory (from `ensemble`).
    Ensemble(PathBuf),
}

fn load_trackers(
    source: &TrackerSource,
    prepared: &PreparedData,
    selection: &str,
) -> Result<BTreeMap<String, Tracker>> {
    let expected_vocab = prepared.vocab.sha256();
    let mut trackers = BTreeMap::new();
    for component in selected_components(&prepared.schema, selection)? {
        let tracker = match source {
            TrackerSource::Models(dir) => {
                let stem = dir.join(component);
                let (model, manifest) = ComponentModel::load(&stem)?;
                if manifest.vocab_sha256 != expected_vocab {
                    return Err(Error::Config(format!(
                        "checkpoint {} was trained against a different vocabulary; refusing to run",
                        stem.display()
                    )));
                }
                Tracker::Single(model)
            }
            TrackerSource::Ensemble(dir) => {
                let path = dir.join(format!("{component}.ensemble.json"));
                let manifest: EnsembleManifest = serde_json::from_str(
                    &std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?,
                )
                .map_err(|e| Error::parse(&path, e.to_string()))?;
                // every member must have been trained against the prepared
                // vocabulary; the member .json is enough to check
                for m in &manifest.members {
                    let member_manifest_path =
                        path_with_suffix(&dir.join(&m.stem), ".json");
                    let member_manifest: crate::model::CheckpointManifest =
                        serde_json::from_str(
                            &std::fs::read_to_string(&member_manifest_path)
                                .map_err(|e| Error::io(&member_manifest_path, e))?,
                        )
                        .map_err(|e| Error::parse(&member_manifest_path, e.to_string()))?;
                    if member_manifest.vocab_sha256 != expected_vocab {
                        return Err(Error::Config(format!(
                            "ensemble member {} was trained against a different vocabulary; refusing to run",
                            m.stem
                        )));
                    }
                }
                Tracker::Ensemble(EnsembleManifest::load_ensemble(&path)?)
            }
        };
        trackers.insert(component.to_string(), tracker);
    }
    Ok(trackers)
}

/// Belief distributions at the end of every turn, with empty turns carrying
/// the previous belief forward and leading empty turns using the prior.
pub fn predictions_for_dialog(
    trackers: &BTreeMap<String, Tracker>,
    prepared: &PreparedData,
    example: &DialogExample,
    use_scores: bool,
) -> Result<Vec<TurnPrediction>> {
    let (abstracted, assignment) = prepared.abstracted(example);
    let mut record = vec![false; abstracted.events.len()];
    for (i, e) in abstracted.events.iter().enumerate() {
        if e.turn_final {
            record[i] = true;
        }
    }
    // per component: turn -> concrete distribution at that turn's end
    let mut per_turn: Vec<BTreeMap<String, BTreeMap<String, f64>>> =
        vec![BTreeMap::new(); example.turn_count];
    for (name, tracker) in trackers {
        let mut encoded =
            crate::preprocess::encode_for_component(&abstracted, &prepared.vocab, tracker.classes())?;
        if !use_scores {
            encoded.flatten_scores();
        }
        let beliefs = tracker.beliefs_at(&encoded, &record);
        let mut by_turn: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (idx, dist) in beliefs {
            by_turn.insert(abstracted.events[idx].turn_index, dist);
        }
        let prior = tracker.prior();
        let mut last: &Vec<f64> = &prior;
        for turn in 0..example.turn_count {
            if let Some(d) = by_turn.get(&turn) {
                last = d;
            }
            let concrete = deabstract_distribution(last, tracker.classes(), &assignment);
            per_turn[turn].insert(name.clone(), concrete);
        }
    }
    Ok(per_turn
        .into_iter()
        .enumerate()
        .map(|(turn, dists)| TurnPrediction {
            dialog_id: example.dialog_id.clone(),
            turn,
            dists,
        })
        .collect())
}

/// Evaluate a tracker source (or an external tracker-output file) on a
/// split. Writes the metrics report and, for internal trackers, the
/// official-format output file. Returns the report.
pub fn cmd_eval(
    config: &RunConfig,
    split: Split,
    external: Option<&Path>,
    source: Option<&TrackerSource>,
    selection: &str,
) -> Result<MetricsReport> {
    let prepared = PreparedData::load(config)?;
    let annotations = prepared.annotations(split)?;
    std::fs::create_dir_all(config.eval_dir()).map_err(|e| Error::io(config.eval_dir(), e))?;

    let (report, tag) = match (external, source) {
        (Some(path), None) => (
            eval::score_external(path, &annotations, &prepared.schema)?,
            format!("{}.external", split.name()),
        ),
        (None, Some(source)) => {
            let trackers = load_trackers(source, &prepared, selection)?;
            let use_scores = config.train.use_scores;
            let examples = prepared.examples(&format!("{}.asr.jsonl", split.name()))?;
            let t0 = std::time::Instant::now();
            let mut preds = Vec::new();
            for ex in &examples {
                preds.extend(predictions_for_dialog(&trackers, &prepared, ex, use_scores)?);
            }
            let wall = t0.elapsed().as_secs_f64();
            let tag = match source {
                TrackerSource::Models(_) => format!("{}.models", split.name()),
                TrackerSource::Ensemble(_) => format!("{}.ensemble", split.name()),
            };
            let out = config.eval_dir().join(format!("{tag}.output.json"));
            eval::export_official(&preds, &prepared.schema, split.name(), wall, &out)?;
            (eval::report(&preds, &annotations, &prepared.schema), tag)
        }
        _ => {
            return Err(Error::Argument(
                "eval needs exactly one of --external or a tracker source".into(),
            ))
        }
    };

    let report_path = config.eval_dir().join(format!("{tag}.report.json"));
    std::fs::write(&report_path, report.to_json()).map_err(|e| Error::io(&report_path, e))?;
    println!("{report}");
    Ok(report)
}

// --- incremental tracking over stdin ----------------------------------------

/// One line of the tracking protocol: `token [score] [system|user]`,
/// or the literal `RESET`.
fn parse_track_line(line: &str) -> Result<(String, f64, Source)> {
    let mut token = None;
    let mut score = 1.0;
    let mut source = Source::UserAsr;
    let mut score_seen = false;
    for field in line.split_whitespace() {
        if token.is_none() {
            token = Some(field.to_string());
        } else if field == "system" {
            source = Source::System;
        } else if field == "user" {
            source = Source::UserAsr;
        } else if !score_seen {
            score = field
                .parse::<f64>()
                .map_err(|_| Error::Argument(format!("bad score {field:?}")))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Argument(format!("score {score} outside [0, 1]")));
            }
            score_seen = true;
        } else {
            return Err(Error::Argument(format!("unexpected field {field:?}")));
        }
    }
    match token {
        Some(token) => Ok((token, score, source)),
        None => Err(Error::Argument("empty line".into())),
    }
}

/// Incremental tracking session with streaming abstraction: the raw token
/// history is re-abstracted after every token and the LSTM states are
/// rewound and replayed over the changed tail, so the states always match
/// what batch preprocessing would have produced on the current prefix.
pub struct TrackSession<'a> {
    trackers: &'a BTreeMap<String, Tracker>,
    prepared: &'a PreparedData,
    use_scores: bool,
    raw: Vec<TokenEvent>,
    /// snapshot k = per-component member states before abstract token k
    snapshots: Vec<BTreeMap<String, Vec<crate::model::TrackerState>>>,
    /// abstract stream consumed so far, as (vocab id, score) pairs
    consumed: Vec<(u32, f64)>,
    assignment: AbstractionAssignment,
    /// averaged abstract distributions per component at the current point
    current: BTreeMap<String, Vec<f64>>,
    tokens_seen: usize,
}

/// One emitted trace line: the belief after consuming one input token.
#[derive(Debug, Serialize)]
pub struct TraceLine {
    pub dialog_id: String,
    pub t: usize,
    pub token: String,
    pub score: f64,
    pub components: BTreeMap<String, Vec<(String, f64)>>,
}

impl<'a> TrackSession<'a> {
    pub fn new(
        trackers: &'a BTreeMap<String, Tracker>,
        prepared: &'a PreparedData,
        use_scores: bool,
    ) -> TrackSession<'a> {
        let mut s = TrackSession {
            trackers,
            prepared,
            use_scores,
            raw: Vec::new(),
            snapshots: Vec::new(),
            consumed: Vec::new(),
            assignment: AbstractionAssignment::default(),
            current: BTreeMap::new(),
            tokens_seen: 0,
        };
        s.reset();
        s
    }

    pub fn reset(&mut self) {
        self.raw.clear();
        self.consumed.clear();
        self.assignment = AbstractionAssignment::default();
        self.tokens_seen = 0;
        let initial: BTreeMap<String, Vec<crate::model::TrackerState>> = self
            .trackers
            .iter()
            .map(|(n, t)| (n.clone(), t.initial_states()))
            .collect();
        self.snapshots = vec![initial];
        self.current = self
            .trackers
            .iter()
            .map(|(n, t)| (n.clone(), t.prior()))
            .collect();
    }

    /// Current per-component top-k concrete values with probabilities.
    pub fn top_k(&self, k: usize) -> BTreeMap<String, Vec<(String, f64)>> {
        let mut out = BTreeMap::new();
        for (name, tracker) in self.trackers {
            let dist = &self.current[name];
            let concrete = deabstract_distribution(dist, tracker.classes(), &self.assignment);
            let mut pairs: Vec<(String, f64)> = concrete.into_iter().collect();
            pairs.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            pairs.truncate(k);
            out.insert(name.clone(), pairs);
        }
        out
    }

    /// Feed one token and return how many abstract steps were replayed.
    pub fn push(&mut self, token: &str, score: f64, source: Source) -> usize {
        // turn boundaries are unknown on a stream; source runs stand in for
        // them so abstraction never merges across a speaker change
        let run_index = match self.raw.last() {
            Some(prev) if prev.source == source => prev.turn_index,
            Some(prev) => prev.turn_index + 1,
            None => 0,
        };
        self.raw.push(TokenEvent {
            token: corpus::tokenize(token).first().cloned().unwrap_or_default(),
            score: score.clamp(0.0, 1.0),
            source,
            turn_index: run_index,
            turn_final: false,
        });
        self.tokens_seen += 1;

        let synthetic = DialogExample {
            dialog_id: "session".into(),
            turn_count: run_index + 1,
            events: self.raw.clone(),
            labels: BTreeMap::new(),
            schedule: BTreeMap::new(),
        };
        let (abstracted, assignment) = self.prepared.abstracted(&synthetic);
        self.assignment = assignment;
        let target: Vec<(u32, f64)> = abstracted
            .events
            .iter()
            .map(|e| {
                let score = if self.use_scores { e.score } else { 1.0 };
                (self.prepared.vocab.encode(&e.token), score)
            })
            .collect();

        // longest common prefix with what the members already consumed
        let common = self
            .consumed
            .iter()
            .zip(&target)
            .take_while(|(a, b)| a == b)
            .count();
        self.snapshots.truncate(common + 1);
        self.consumed.truncate(common);
        let replayed = target.len() - common;
        for &(id, score) in &target[common..] {
            let prev = self.snapshots.last().expect("initial snapshot").clone();
            let mut next = BTreeMap::new();
            for (name, tracker) in self.trackers {
                let (states, dist) = tracker.step(&prev[name], id, score);
                next.insert(name.clone(), states);
                self.current.insert(name.clone(), dist);
            }
            self.snapshots.push(next);
            self.consumed.push((id, score));
        }
        replayed
    }
}

/// Read the line protocol from `input`, write one JSON trace line per
/// token to `output`. Malformed lines warn and are skipped.
pub fn run_track_loop(
    trackers: &BTreeMap<String, Tracker>,
    prepared: &PreparedData,
    use_scores: bool,
    dialog_id: &str,
    top_k: usize,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    let mut session = TrackSession::new(trackers, prepared, use_scores);
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed == "RESET" {
            session.reset();
            // the line after a reset shows the fresh-session prior
            let trace = TraceLine {
                dialog_id: dialog_id.to_string(),
                t: 0,
                token: "RESET".to_string(),
                score: 1.0,
                components: session.top_k(top_k),
            };
            let json = serde_json::to_string(&trace).expect("trace serializes");
            writeln!(output, "{json}").map_err(|e| Error::io("<stdout>", e))?;
            continue;
        }
        let (token, score, source) = match parse_track_line(trimmed) {
            Ok(parsed) => parsed,
            Err(e) => {
                eprintln!("warning: skipping line {trimmed:?}: {e}");
                continue;
            }
        };
        session.push(&token, score, source);
        let trace = TraceLine {
            dialog_id: dialog_id.to_string(),
            t: session.tokens_seen,
            token,
            score,
            components: session.top_k(top_k),
        };
        let json = serde_json::to_string(&trace).expect("trace serializes");
        writeln!(output, "{json}").map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

/// `track` command: stdin to stdout.
pub fn cmd_track(
    config: &RunConfig,
    source: &TrackerSource,
    selection: &str,
    dialog_id: &str,
    top_k: usize,
) -> Result<()> {
    let prepared = PreparedData::load(config)?;
    let trackers = load_trackers(source, &prepared, selection)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    run_track_loop(
        &trackers,
        &prepared,
        config.train.use_scores,
        dialog_id,
        top_k,
        stdin.lock(),
        stdout.lock(),
    )
}
