//! Preprocessing between the serialized corpus and the trainable tensors:
//! vocabulary construction, abstraction of low-occurring slot values into
//! placeholder tokens/classes, OOV noise injection, transcription mixing,
//! and integer encoding of dialogs against a vocabulary and class set.

use crate::corpus::{DialogExample, Group, SlotSchema, TokenEvent};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

/// Token id for all words unseen at training time.
pub const OOV_TOKEN: &str = "#OOV";

const VOCAB_FORMAT_VERSION: u32 = 1;
const DICT_FORMAT_VERSION: u32 = 1;

/// Bijective token <-> id map with dense ids and a reserved OOV token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    oov: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    version: u32,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Deterministic construction: every distinct token in `examples`, plus
    /// the OOV token and any abstract tokens, in sorted order.
    pub fn build(examples: &[DialogExample], abstract_tokens: &[String]) -> Vocabulary {
        let mut set: std::collections::BTreeSet<String> = examples
            .iter()
            .flat_map(|ex| ex.events.iter().map(|e| e.token.clone()))
            .collect();
        set.insert(OOV_TOKEN.to_string());
        set.extend(abstract_tokens.iter().cloned());
        Vocabulary::from_tokens(set.into_iter().collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let ids: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        assert_eq!(ids.len(), tokens.len(), "vocabulary tokens must be unique");
        let oov = *ids.get(OOV_TOKEN).expect("vocabulary must contain #OOV");
        Vocabulary { tokens, ids, oov }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn oov_id(&self) -> u32 {
        self.oov
    }

    /// Encode a token; anything unknown maps to the OOV id.
    pub fn encode(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(self.oov)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabularyFile {
            version: VOCAB_FORMAT_VERSION,
            tokens: self.tokens.clone(),
        })
        .expect("vocabulary serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabularyFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(Error::parse(
                path,
                format!("unsupported vocabulary version {}", file.version),
            ));
        }
        Ok(Vocabulary::from_tokens(file.tokens))
    }

    /// Hash of the canonical serialization; stored in checkpoint manifests
    /// so incompatible artifacts refuse to combine.
    pub fn sha256(&self) -> String {
        crate::sha256_hex(self.to_json().as_bytes())
    }
}

/// One abstractable value: its tokenized surface form and the value string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceForm {
    pub surface: Vec<String>,
    pub value: String,
}

/// Per-component map of low-occurring values to abstract placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionDict {
    pub threshold: u32,
    pub max_tokens: usize,
    /// component name -> surface forms, longest first (match priority).
    pub per_component: BTreeMap<String, Vec<SurfaceForm>>,
}

#[derive(Serialize, Deserialize)]
struct DictFile {
    version: u32,
    #[serde(flatten)]
    dict: AbstractionDict,
}

impl AbstractionDict {
    pub fn empty() -> AbstractionDict {
        AbstractionDict {
            threshold: 0,
            max_tokens: 0,
            per_component: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.per_component.values().all(|v| v.is_empty())
    }

    /// Number of abstract classes a component carries.
    pub fn class_count(&self, component: &str) -> usize {
        self.per_component
            .get(component)
            .map(|v| v.len().min(self.max_tokens))
            .unwrap_or(0)
    }

    pub fn contains_value(&self, component: &str, value: &str) -> bool {
        self.per_component
            .get(component)
            .map(|v| v.iter().any(|f| f.value == value))
            .unwrap_or(false)
    }

    /// All abstract token strings, in schema component order.
    pub fn abstract_tokens(&self, schema: &SlotSchema) -> Vec<String> {
        let mut out = Vec::new();
        for c in &schema.components {
            for j in 1..=self.class_count(&c.name) {
                out.push(abstract_token(&c.slot, j));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DictFile {
            version: DICT_FORMAT_VERSION,
            dict: self.clone(),
        };
        let text = serde_json::to_string_pretty(&file).expect("dict serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<AbstractionDict> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DictFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if file.version != DICT_FORMAT_VERSION {
            return Err(Error::parse(
                path,
                format!("unsupported abstraction dict version {}", file.version),
            ));
        }
        Ok(file.dict)
    }
}

pub fn abstract_token(slot: &str, index: usize) -> String {
    format!("#{slot}{index}")
}

/// Count Goal label occurrences per (component, value) over a training set,
/// one count per labeled turn.
pub fn label_counts(examples: &[DialogExample]) -> BTreeMap<(String, String), u32> {
    let mut counts = BTreeMap::new();
    for ex in examples {
        for label in ex.labels.values() {
            for (component, value) in label {
                *counts.entry((component.clone(), value.clone())).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Every ontology value of a Goal component whose training-label count is
/// strictly below `threshold` becomes abstractable. Values never seen in
/// training are included (count zero), which is what makes zero-shot
/// tracking of unseen values possible. "none" and "dontcare" never abstract.
pub fn build_abstraction_dict(
    schema: &SlotSchema,
    counts: &BTreeMap<(String, String), u32>,
    threshold: u32,
    max_tokens: usize,
) -> AbstractionDict {
    let mut per_component = BTreeMap::new();
    for c in schema.group_components(Group::Goal) {
        let mut forms: Vec<SurfaceForm> = c
            .values
            .iter()
            .filter(|v| *v != "none" && *v != "dontcare")
            .filter(|v| {
                counts
                    .get(&(c.name.clone(), (*v).clone()))
                    .copied()
                    .unwrap_or(0)
                    < threshold
            })
            .map(|v| SurfaceForm {
                surface: crate::corpus::tokenize(v),
                value: v.clone(),
            })
            .filter(|f| !f.surface.is_empty())
            .collect();
        // longest surface first so maximal n-grams win at match time
        forms.sort_by(|a, b| {
            b.surface
                .len()
                .cmp(&a.surface.len())
                .then_with(|| a.value.cmp(&b.value))
        });
        per_component.insert(c.name.clone(), forms);
    }
    AbstractionDict {
        threshold,
        max_tokens,
        per_component,
    }
}

/// Which concrete value each abstract index stands for, per component, in
/// one dialog. Index `j` is 1-based; the vector position is `j - 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AbstractionAssignment {
    pub per_component: BTreeMap<String, Vec<String>>,
}

impl AbstractionAssignment {
    pub fn value_for(&self, component: &str, index: usize) -> Option<&str> {
        self.per_component
            .get(component)
            .and_then(|v| v.get(index.checked_sub(1)?))
            .map(String::as_str)
    }

    /// Existing index for a value, or a fresh one if capacity remains.
    fn assign(&mut self, component: &str, value: &str, max_tokens: usize) -> Option<usize> {
        let values = self.per_component.entry(component.to_string()).or_default();
        if let Some(pos) = values.iter().position(|v| v == value) {
            return Some(pos + 1);
        }
        if values.len() < max_tokens {
            values.push(value.to_string());
            Some(values.len())
        } else {
            None
        }
    }
}

/// Find the longest dict surface form matching at `pos`. The span must stay
/// within one turn and one source run so turn-final flags keep their place.
fn longest_match_at<'a>(
    events: &[TokenEvent],
    pos: usize,
    dict: &'a AbstractionDict,
    schema: &'a SlotSchema,
) -> Option<(&'a str, usize, &'a str)> {
    let mut best: Option<(&str, usize, &str)> = None;
    for c in &schema.components {
        let Some(forms) = dict.per_component.get(&c.name) else {
            continue;
        };
        for form in forms {
            let n = form.surface.len();
            if let Some(b) = best {
                if n <= b.1 {
                    // forms are sorted longest-first per component, but a
                    // later component could still hold a longer one
                    continue;
                }
            }
            if pos + n > events.len() {
                continue;
            }
            let span = &events[pos..pos + n];
            let same_run = span
                .iter()
                .all(|e| e.turn_index == span[0].turn_index && e.source == span[0].source);
            if !same_run {
                continue;
            }
            if span
                .iter()
                .zip(&form.surface)
                .all(|(e, s)| e.token == *s)
            {
                best = Some((c.name.as_str(), n, form.value.as_str()));
            }
        }
    }
    best
}

fn slot_of<'s>(schema: &'s SlotSchema, component: &str) -> &'s str {
    &schema
        .component(component)
        .unwrap_or_else(|| panic!("unknown component {component}"))
        .slot
}

/// Replace each maximal contiguous n-gram equal to a dict surface form by
/// one abstract token, assign abstract indices in order of first
/// appearance (token stream and labels alike), and rewrite labels of
/// abstracted values to the abstract class.
pub fn abstract_example(
    example: &DialogExample,
    dict: &AbstractionDict,
    schema: &SlotSchema,
) -> (DialogExample, AbstractionAssignment) {
    let mut assignment = AbstractionAssignment::default();
    let mut events: Vec<TokenEvent> = Vec::with_capacity(example.events.len());
    let mut labels: BTreeMap<usize, crate::corpus::LabelMap> = BTreeMap::new();

    let register_label = |assignment: &mut AbstractionAssignment,
                          label: &crate::corpus::LabelMap|
     -> crate::corpus::LabelMap {
        let mut out = label.clone();
        for (component, value) in label {
            if dict.contains_value(component, value) {
                if let Some(j) = assignment.assign(component, value, dict.max_tokens) {
                    out.insert(
                        component.clone(),
                        abstract_token(slot_of(schema, component), j),
                    );
                }
            }
        }
        out
    };

    let mut pos = 0;
    while pos < example.events.len() {
        let matched = longest_match_at(&example.events, pos, dict, schema).and_then(
            |(component, len, value)| {
                assignment
                    .assign(component, value, dict.max_tokens)
                    .map(|j| (component, len, j))
            },
        );
        match matched {
            Some((component, len, j)) => {
                let span = &example.events[pos..pos + len];
                let score = span.iter().map(|e| e.score).fold(f64::INFINITY, f64::min);
                events.push(TokenEvent {
                    token: abstract_token(slot_of(schema, component), j),
                    score,
                    source: span[0].source,
                    turn_index: span[0].turn_index,
                    turn_final: span.last().unwrap().turn_final,
                });
                for idx in pos..pos + len {
                    if let Some(label) = example.labels.get(&idx) {
                        labels.insert(events.len() - 1, register_label(&mut assignment, label));
                    }
                }
                pos += len;
            }
            None => {
                events.push(example.events[pos].clone());
                if let Some(label) = example.labels.get(&pos) {
                    labels.insert(events.len() - 1, register_label(&mut assignment, label));
                }
                pos += 1;
            }
        }
    }

    (
        DialogExample {
            dialog_id: example.dialog_id.clone(),
            turn_count: example.turn_count,
            events,
            labels,
            schedule: example.schedule.clone(),
        },
        assignment,
    )
}

/// The ordered classifier classes for one component: the concrete values in
/// schema order followed by the component's abstract classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSet {
    pub component: String,
    pub classes: Vec<String>,
    pub n_concrete: usize,
}

impl ClassSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == value)
    }

    pub fn concrete(&self) -> &[String] {
        &self.classes[..self.n_concrete]
    }
}

/// Class sets for every component under an (optional) abstraction dict.
pub fn class_sets(schema: &SlotSchema, dict: &AbstractionDict) -> BTreeMap<String, ClassSet> {
    schema
        .components
        .iter()
        .map(|c| {
            let mut classes = c.values.clone();
            let n_concrete = classes.len();
            for j in 1..=dict.class_count(&c.name) {
                classes.push(abstract_token(&c.slot, j));
            }
            (
                c.name.clone(),
                ClassSet {
                    component: c.name.clone(),
                    classes,
                    n_concrete,
                },
            )
        })
        .collect()
}

/// Move abstract-class mass back to concrete values: assigned classes to
/// their value, unassigned ones to "none". Total mass is conserved.
pub fn deabstract_distribution(
    p: &[f64],
    class_set: &ClassSet,
    assignment: &AbstractionAssignment,
) -> BTreeMap<String, f64> {
    assert_eq!(p.len(), class_set.len(), "distribution/class set mismatch");
    let mut out: BTreeMap<String, f64> = class_set
        .concrete()
        .iter()
        .map(|v| (v.clone(), 0.0))
        .collect();
    for (i, &mass) in p.iter().enumerate() {
        if i < class_set.n_concrete {
            *out.get_mut(&class_set.classes[i]).unwrap() += mass;
        } else {
            let j = i - class_set.n_concrete + 1;
            let target = assignment
                .value_for(&class_set.component, j)
                .unwrap_or("none");
            *out.entry(target.to_string()).or_insert(0.0) += mass;
        }
    }
    out
}

/// Replace user-source tokens by the OOV token with probability `alpha`.
/// Scores and system tokens are untouched; deterministic under a fixed rng.
pub fn inject_oov(
    example: &DialogExample,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DialogExample> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!(
            "oov probability must be in [0, 1], got {alpha}"
        )));
    }
    let mut out = example.clone();
    for event in &mut out.events {
        if event.source.is_user() && rng.gen::<f64>() < alpha {
            event.token = OOV_TOKEN.to_string();
        }
    }
    Ok(out)
}

/// Expanded training set: every dialog once per user source. Shuffling is
/// the trainer's job.
pub fn mix_transcriptions(
    asr: Vec<DialogExample>,
    transcript: Vec<DialogExample>,
) -> Vec<DialogExample> {
    let mut out = asr;
    out.extend(transcript);
    out
}

/// A dialog encoded against a vocabulary and one component's class set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedDialog {
    pub dialog_id: String,
    pub token_ids: Vec<u32>,
    pub scores: Vec<f64>,
    pub user: Vec<bool>,
    pub turn_index: Vec<usize>,
    pub turn_final: Vec<bool>,
    /// (event index, class index) at each labeled time.
    pub labels: Vec<(usize, usize)>,
}

impl EncodedDialog {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Drop confidence information (the no-scores ablation): every token
    /// is fed as if fully trusted.
    pub fn flatten_scores(&mut self) {
        self.scores.iter_mut().for_each(|s| *s = 1.0);
    }
}

/// Encode one (already abstracted) dialog for one component. Unknown tokens
/// become OOV; a label value outside the class set is a data error naming
/// the dialog and turn.
pub fn encode_for_component(
    example: &DialogExample,
    vocab: &Vocabulary,
    class_set: &ClassSet,
) -> Result<EncodedDialog> {
    let mut labels = Vec::with_capacity(example.labels.len());
    for (&idx, label) in &example.labels {
        let value = label.get(&class_set.component).ok_or_else(|| {
            Error::data(
                &example.dialog_id,
                format!("label record missing component {}", class_set.component),
            )
        })?;
        let class = class_set.index_of(value).ok_or_else(|| {
            Error::data(
                &example.dialog_id,
                format!(
                    "turn {}: label value {value:?} is not a class of {}",
                    example.events[idx].turn_index, class_set.component
                ),
            )
        })?;
        labels.push((idx, class));
    }
    Ok(EncodedDialog {
        dialog_id: example.dialog_id.clone(),
        token_ids: example.events.iter().map(|e| vocab.encode(&e.token)).collect(),
        scores: example.events.iter().map(|e| e.score).collect(),
        user: example.events.iter().map(|e| e.source.is_user()).collect(),
        turn_index: example.events.iter().map(|e| e.turn_index).collect(),
        turn_final: example.events.iter().map(|e| e.turn_final).collect(),
        labels,
    })
}
