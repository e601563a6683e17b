//! DSTC2 corpus ingestion: parse dialog logs and label files, flatten
//! system dialog acts, and serialize each dialog into a flat stream of
//! (token, confidence) events with labels attached to turn-final tokens.
//!
//! Expected directory layout is the official DSTC2 release:
//! `<data_root>/<session-dir>/log.json` and `label.json`, flist files with
//! one session-dir path per line, and a JSON ontology with informable
//! slots/values, requestable slots and methods.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Who produced a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    System,
    UserAsr,
    UserTranscript,
}

impl Source {
    pub fn is_user(self) -> bool {
        matches!(self, Source::UserAsr | Source::UserTranscript)
    }
}

/// Which user-side text to serialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserSource {
    Asr1Best,
    Transcript,
}

/// One (token, confidence) pair in the serialized dialog stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub token: String,
    pub score: f64,
    pub source: Source,
    pub turn_index: usize,
    pub turn_final: bool,
}

/// Metric group of a dialog state component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Goal,
    Method,
    Requested,
}

/// One tracked dialog state component and its closed value set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// Unique name: `goal.<slot>`, `method`, or `requested.<slot>`.
    pub name: String,
    /// Bare slot name used for mention matching and abstract tokens.
    pub slot: String,
    pub group: Group,
    /// Frozen class order: "none" first, then "dontcare" for informables,
    /// then the remaining values sorted.
    pub values: Vec<String>,
}

/// The full component schema derived from the ontology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSchema {
    pub components: Vec<Component>,
}

impl SlotSchema {
    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn group_components(&self, group: Group) -> impl Iterator<Item = &Component> {
        self.components.iter().filter(move |c| c.group == group)
    }
}

/// Per-turn gold annotation, already expanded to one value per component.
pub type LabelMap = BTreeMap<String, String>;

/// A dialog serialized into a flat token stream. Labels are keyed by the
/// event index of the turn-final token they attach to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogExample {
    pub dialog_id: String,
    pub turn_count: usize,
    pub events: Vec<TokenEvent>,
    pub labels: BTreeMap<usize, LabelMap>,
    /// First turn each component is mentioned at, if ever.
    pub schedule: BTreeMap<String, Option<usize>>,
}

/// Gold labels plus mention schedule, in turn space (used by the scorer,
/// which never looks at token streams).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogAnnotations {
    pub dialog_id: String,
    pub turn_labels: Vec<LabelMap>,
    pub schedule: BTreeMap<String, Option<usize>>,
}

/// One system dialog act: an act type plus (slot, value) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogAct {
    pub act_type: String,
    pub pairs: Vec<(String, String)>,
}

/// One SLU n-best hypothesis (acts only; used for the mention schedule).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SluHyp {
    pub acts: Vec<DialogAct>,
    pub score: f64,
}

/// Gold labels for one turn as they appear in label.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLabel {
    pub goals: BTreeMap<String, String>,
    pub method: String,
    pub requested: BTreeSet<String>,
    pub transcription: String,
}

/// One raw DSTC2 turn: system output followed by user input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTurn {
    pub system_acts: Vec<DialogAct>,
    pub system_transcript: String,
    /// Live ASR n-best, sorted by descending score.
    pub asr_hyps: Vec<(String, f64)>,
    pub slu_hyps: Vec<SluHyp>,
    pub label: TurnLabel,
}

/// A full parsed dialog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDialog {
    pub dialog_id: String,
    pub turns: Vec<RawTurn>,
}

// --- DSTC2 on-disk JSON shapes ---------------------------------------------

#[derive(Deserialize)]
struct LogFile {
    #[serde(rename = "session-id")]
    session_id: String,
    turns: Vec<LogTurn>,
}

#[derive(Deserialize)]
struct LogTurn {
    output: LogOutput,
    #[serde(default)]
    input: Option<LogInput>,
}

#[derive(Deserialize)]
struct LogOutput {
    #[serde(rename = "dialog-acts", default)]
    dialog_acts: Vec<JsonAct>,
    #[serde(default)]
    transcript: String,
}

#[derive(Deserialize)]
struct JsonAct {
    act: String,
    #[serde(default)]
    slots: Vec<Vec<serde_json::Value>>,
}

#[derive(Deserialize)]
struct LogInput {
    live: LiveInput,
}

#[derive(Deserialize)]
struct LiveInput {
    #[serde(rename = "asr-hyps", default)]
    asr_hyps: Vec<AsrHyp>,
    #[serde(rename = "slu-hyps", default)]
    slu_hyps: Vec<JsonSluHyp>,
}

#[derive(Deserialize)]
struct AsrHyp {
    #[serde(rename = "asr-hyp")]
    hyp: String,
    score: f64,
}

#[derive(Deserialize)]
struct JsonSluHyp {
    #[serde(rename = "slu-hyp")]
    acts: Vec<JsonAct>,
    score: f64,
}

#[derive(Deserialize)]
struct LabelFile {
    #[serde(rename = "session-id")]
    session_id: String,
    turns: Vec<LabelTurn>,
}

#[derive(Deserialize)]
struct LabelTurn {
    #[serde(rename = "goal-labels", default)]
    goal_labels: BTreeMap<String, String>,
    #[serde(rename = "method-label", default)]
    method_label: String,
    #[serde(rename = "requested-slots", default)]
    requested_slots: BTreeSet<String>,
    #[serde(default)]
    transcription: String,
}

#[derive(Deserialize)]
struct OntologyFile {
    informable: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    requestable: Vec<String>,
    #[serde(default)]
    method: Vec<String>,
}

fn json_value_to_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Null => "none".to_string(),
        other => other.to_string(),
    }
}

impl JsonAct {
    fn into_act(self) -> DialogAct {
        DialogAct {
            act_type: self.act,
            pairs: self
                .slots
                .iter()
                .filter(|p| !p.is_empty())
                .map(|p| {
                    let slot = json_value_to_string(&p[0]);
                    let value = p.get(1).map(json_value_to_string).unwrap_or_default();
                    (slot, value)
                })
                .collect(),
        }
    }
}

// --- operations -------------------------------------------------------------

/// Lowercase, strip punctuation characters, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .filter_map(|w| {
            let cleaned: String = w.chars().filter(|c| c.is_alphanumeric()).collect();
            if cleaned.is_empty() {
                None
            } else {
                Some(cleaned)
            }
        })
        .collect()
}

/// Flatten one system act into tokens-to-be: `[act_type, slot, value]` per
/// (slot, value) pair, or just `[act_type]` when the act has no pairs.
pub fn flatten_system_act(act: &DialogAct) -> Vec<String> {
    if act.pairs.is_empty() {
        return vec![act.act_type.clone()];
    }
    let mut out = Vec::with_capacity(act.pairs.len() * 3);
    for (slot, value) in &act.pairs {
        out.push(act.act_type.clone());
        out.push(slot.clone());
        out.push(value.clone());
    }
    out
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Build the component schema from the ontology: one Goal component per
/// informable slot, one Method component, one binary Requested component
/// per requestable slot.
pub fn schema_from_ontology(path: &Path) -> Result<SlotSchema> {
    let ont: OntologyFile = read_json(path)?;
    let mut components = Vec::new();
    for (slot, values) in &ont.informable {
        let rest: Vec<String> = values
            .iter()
            .filter(|v| *v != "none" && *v != "dontcare")
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut vals = vec!["none".to_string(), "dontcare".to_string()];
        vals.extend(rest);
        components.push(Component {
            name: format!("goal.{slot}"),
            slot: slot.clone(),
            group: Group::Goal,
            values: vals,
        });
    }
    let methods: Vec<String> = ont
        .method
        .iter()
        .filter(|m| *m != "none")
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut vals = vec!["none".to_string()];
    vals.extend(methods);
    components.push(Component {
        name: "method".to_string(),
        slot: "method".to_string(),
        group: Group::Method,
        values: vals,
    });
    for slot in ont.requestable.iter().collect::<BTreeSet<_>>() {
        components.push(Component {
            name: format!("requested.{slot}"),
            slot: slot.clone(),
            group: Group::Requested,
            values: vec!["none".to_string(), "requested".to_string()],
        });
    }
    Ok(SlotSchema { components })
}

fn parse_dialog(dir: &Path, entry: &str) -> Result<RawDialog> {
    let log: LogFile = read_json(&dir.join("log.json"))?;
    let label: LabelFile = read_json(&dir.join("label.json"))?;
    if log.session_id != label.session_id {
        return Err(Error::data(
            entry,
            format!(
                "session-id mismatch: log {} vs label {}",
                log.session_id, label.session_id
            ),
        ));
    }
    if log.turns.len() != label.turns.len() {
        return Err(Error::data(
            entry,
            format!(
                "turn count mismatch: log has {}, label has {}",
                log.turns.len(),
                label.turns.len()
            ),
        ));
    }
    let mut turns = Vec::with_capacity(log.turns.len());
    for (lt, lb) in log.turns.into_iter().zip(label.turns) {
        let (mut asr_hyps, slu_hyps) = match lt.input {
            Some(input) => (
                input
                    .live
                    .asr_hyps
                    .into_iter()
                    .map(|h| (h.hyp, h.score))
                    .collect::<Vec<_>>(),
                input
                    .live
                    .slu_hyps
                    .into_iter()
                    .map(|h| SluHyp {
                        acts: h.acts.into_iter().map(JsonAct::into_act).collect(),
                        score: h.score,
                    })
                    .collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        // restore the descending-score invariant in case the log violates it
        asr_hyps.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        turns.push(RawTurn {
            system_acts: lt
                .output
                .dialog_acts
                .into_iter()
                .map(JsonAct::into_act)
                .collect(),
            system_transcript: lt.output.transcript,
            asr_hyps,
            slu_hyps,
            label: TurnLabel {
                goals: lb.goal_labels,
                method: if lb.method_label.is_empty() {
                    "none".to_string()
                } else {
                    lb.method_label
                },
                requested: lb.requested_slots,
                transcription: lb.transcription,
            },
        });
    }
    if turns.is_empty() {
        return Err(Error::data(entry, "dialog has no turns"));
    }
    Ok(RawDialog {
        dialog_id: log.session_id,
        turns,
    })
}

/// Load every dialog named by the flist, in flist order, plus the schema.
pub fn load_dataset(
    data_root: &Path,
    flist: &Path,
    ontology: &Path,
) -> Result<(Vec<RawDialog>, SlotSchema)> {
    let schema = schema_from_ontology(ontology)?;
    let listing = std::fs::read_to_string(flist).map_err(|e| Error::io(flist, e))?;
    let mut dialogs = Vec::new();
    for entry in listing.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let dir = data_root.join(entry);
        dialogs.push(parse_dialog(&dir, entry)?);
    }
    Ok((dialogs, schema))
}

/// Expand one turn's gold record into a full per-component assignment.
pub fn full_assignment(label: &TurnLabel, schema: &SlotSchema) -> LabelMap {
    let mut map = BTreeMap::new();
    for c in &schema.components {
        let value = match c.group {
            Group::Goal => label
                .goals
                .get(&c.slot)
                .cloned()
                .unwrap_or_else(|| "none".to_string()),
            Group::Method => label.method.clone(),
            Group::Requested => {
                if label.requested.contains(&c.slot) {
                    "requested".to_string()
                } else {
                    "none".to_string()
                }
            }
        };
        map.insert(c.name.clone(), value);
    }
    map
}

/// Slots mentioned by an act list. A pair `(slot, v)` mentions `slot`,
/// except the indirect form `("slot", v)` (as in `request(slot=food)`),
/// which mentions `v`.
fn mentioned_slots(acts: &[DialogAct], into: &mut BTreeSet<String>) {
    for act in acts {
        for (slot, value) in &act.pairs {
            if slot == "slot" {
                into.insert(value.clone());
            } else {
                into.insert(slot.clone());
            }
        }
    }
}

/// First turn each component's slot is mentioned in a system act or any SLU
/// n-best hypothesis; `None` when it is never mentioned. The Method
/// component is always scheduled from turn 0.
pub fn mention_schedule(raw: &RawDialog, schema: &SlotSchema) -> BTreeMap<String, Option<usize>> {
    let per_turn: Vec<BTreeSet<String>> = raw
        .turns
        .iter()
        .map(|t| {
            let mut s = BTreeSet::new();
            mentioned_slots(&t.system_acts, &mut s);
            for hyp in &t.slu_hyps {
                mentioned_slots(&hyp.acts, &mut s);
            }
            s
        })
        .collect();
    let mut schedule = BTreeMap::new();
    for c in &schema.components {
        let first = if c.group == Group::Method {
            Some(0)
        } else {
            per_turn.iter().position(|s| s.contains(&c.slot))
        };
        schedule.insert(c.name.clone(), first);
    }
    schedule
}

/// Gold labels and schedule in turn space for the scorer.
pub fn annotations(raw: &RawDialog, schema: &SlotSchema) -> DialogAnnotations {
    DialogAnnotations {
        dialog_id: raw.dialog_id.clone(),
        turn_labels: raw
            .turns
            .iter()
            .map(|t| full_assignment(&t.label, schema))
            .collect(),
        schedule: mention_schedule(raw, schema),
    }
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(0.0, 1.0)
}

/// Serialize one dialog into a flat token stream: per turn, the flattened
/// system acts (score 1.0) followed by the user tokens, with the turn's
/// label attached to the last emitted token.
pub fn serialize_dialog(
    raw: &RawDialog,
    user_source: UserSource,
    schema: &SlotSchema,
) -> DialogExample {
    let mut events: Vec<TokenEvent> = Vec::new();
    let mut labels = BTreeMap::new();
    for (ti, turn) in raw.turns.iter().enumerate() {
        let start = events.len();
        for act in &turn.system_acts {
            for field in flatten_system_act(act) {
                for token in tokenize(&field) {
                    events.push(TokenEvent {
                        token,
                        score: 1.0,
                        source: Source::System,
                        turn_index: ti,
                        turn_final: false,
                    });
                }
            }
        }
        match user_source {
            UserSource::Asr1Best => {
                if let Some((hyp, score)) = turn.asr_hyps.first() {
                    let sc = clamp_score(*score);
                    for token in tokenize(hyp) {
                        events.push(TokenEvent {
                            token,
                            score: sc,
                            source: Source::UserAsr,
                            turn_index: ti,
                            turn_final: false,
                        });
                    }
                }
            }
            UserSource::Transcript => {
                for token in tokenize(&turn.label.transcription) {
                    events.push(TokenEvent {
                        token,
                        score: 1.0,
                        source: Source::UserTranscript,
                        turn_index: ti,
                        turn_final: false,
                    });
                }
            }
        }
        let assignment = full_assignment(&turn.label, schema);
        if events.len() > start {
            events.last_mut().unwrap().turn_final = true;
            labels.insert(events.len() - 1, assignment);
        } else if let Some(last) = events.len().checked_sub(1) {
            // a turn with no tokens at all: its label supersedes the
            // previous turn-final label
            eprintln!(
                "warning: dialog {} turn {} produced no tokens; label moved to previous turn",
                raw.dialog_id, ti
            );
            labels.insert(last, assignment);
        } else {
            eprintln!(
                "warning: dialog {} turn {} produced no tokens and has no predecessor; label dropped",
                raw.dialog_id, ti
            );
        }
    }
    DialogExample {
        dialog_id: raw.dialog_id.clone(),
        turn_count: raw.turns.len(),
        events,
        labels,
        schedule: mention_schedule(raw, schema),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(act_type: &str, pairs: &[(&str, &str)]) -> DialogAct {
        DialogAct {
            act_type: act_type.to_string(),
            pairs: pairs
                .iter()
                .map(|(s, v)| (s.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn tiny_schema() -> SlotSchema {
        SlotSchema {
            components: vec![
                Component {
                    name: "goal.food".into(),
                    slot: "food".into(),
                    group: Group::Goal,
                    values: vec![
                        "none".into(),
                        "dontcare".into(),
                        "chinese".into(),
                        "indian".into(),
                    ],
                },
                Component {
                    name: "method".into(),
                    slot: "method".into(),
                    group: Group::Method,
                    values: vec!["none".into(), "byconstraints".into(), "byname".into()],
                },
                Component {
                    name: "requested.phone".into(),
                    slot: "phone".into(),
                    group: Group::Requested,
                    values: vec!["none".into(), "requested".into()],
                },
            ],
        }
    }

    fn label(
        goals: &[(&str, &str)],
        method: &str,
        requested: &[&str],
        transcription: &str,
    ) -> TurnLabel {
        TurnLabel {
            goals: goals
                .iter()
                .map(|(s, v)| (s.to_string(), v.to_string()))
                .collect(),
            method: method.to_string(),
            requested: requested.iter().map(|s| s.to_string()).collect(),
            transcription: transcription.to_string(),
        }
    }

    #[test]
    fn flatten_request_slot_food() {
        let a = act("request", &[("slot", "food")]);
        assert_eq!(flatten_system_act(&a), vec!["request", "slot", "food"]);
    }

    #[test]
    fn flatten_act_without_pairs() {
        let a = act("repeat", &[]);
        assert_eq!(flatten_system_act(&a), vec!["repeat"]);
    }

    #[test]
    fn flatten_multiple_acts_concatenate() {
        let acts = [
            act("inform", &[("pricerange", "cheap")]),
            act("offer", &[("name", "prezzo")]),
        ];
        let tokens: Vec<String> = acts.iter().flat_map(flatten_system_act).collect();
        assert_eq!(
            tokens,
            vec!["inform", "pricerange", "cheap", "offer", "name", "prezzo"]
        );
    }

    #[test]
    fn tokenize_lowercases_and_strips_punctuation() {
        assert_eq!(tokenize("Hello , World!"), vec!["hello", "world"]);
        assert_eq!(tokenize("i'm  FINE."), vec!["im", "fine"]);
        assert_eq!(tokenize("  , .. "), Vec::<String>::new());
    }

    #[test]
    fn serialize_one_turn_matches_stated_stream() {
        let raw = RawDialog {
            dialog_id: "d1".into(),
            turns: vec![RawTurn {
                system_acts: vec![act("request", &[("slot", "food")])],
                system_transcript: String::new(),
                asr_hyps: vec![("chinese food".into(), 0.82)],
                slu_hyps: vec![],
                label: label(&[("food", "chinese")], "byconstraints", &[], "chinese food"),
            }],
        };
        let ex = serialize_dialog(&raw, UserSource::Asr1Best, &tiny_schema());
        let toks: Vec<(&str, f64)> = ex
            .events
            .iter()
            .map(|e| (e.token.as_str(), e.score))
            .collect();
        assert_eq!(
            toks,
            vec![
                ("request", 1.0),
                ("slot", 1.0),
                ("food", 1.0),
                ("chinese", 0.82),
                ("food", 0.82)
            ]
        );
        assert!(ex.events[4].turn_final);
        assert!(ex.events[..4].iter().all(|e| !e.turn_final));
        assert_eq!(ex.labels.len(), 1);
        assert_eq!(ex.labels[&4]["goal.food"], "chinese");
        assert_eq!(ex.labels[&4]["method"], "byconstraints");
        assert_eq!(ex.labels[&4]["requested.phone"], "none");
    }

    #[test]
    fn serialize_transcript_variant_scores_one() {
        let raw = RawDialog {
            dialog_id: "d1".into(),
            turns: vec![RawTurn {
                system_acts: vec![act("request", &[("slot", "food")])],
                system_transcript: String::new(),
                asr_hyps: vec![("chinese food".into(), 0.82)],
                slu_hyps: vec![],
                label: label(&[], "none", &[], "indian food"),
            }],
        };
        let ex = serialize_dialog(&raw, UserSource::Transcript, &tiny_schema());
        let toks: Vec<&str> = ex.events.iter().map(|e| e.token.as_str()).collect();
        assert_eq!(toks, vec!["request", "slot", "food", "indian", "food"]);
        assert!(ex.events.iter().all(|e| e.score == 1.0));
    }

    #[test]
    fn out_of_range_scores_are_clamped() {
        for (raw_score, want) in [(-0.2, 0.0), (1.5, 1.0), (0.3, 0.3)] {
            let raw = RawDialog {
                dialog_id: "d1".into(),
                turns: vec![RawTurn {
                    system_acts: vec![],
                    system_transcript: String::new(),
                    asr_hyps: vec![("hello there".into(), raw_score)],
                    slu_hyps: vec![],
                    label: label(&[], "none", &[], ""),
                }],
            };
            let ex = serialize_dialog(&raw, UserSource::Asr1Best, &tiny_schema());
            assert!(ex.events.iter().all(|e| e.score == want));
            assert!(ex.events.iter().all(|e| (0.0..=1.0).contains(&e.score)));
        }
    }

    #[test]
    fn empty_turn_moves_label_back() {
        let raw = RawDialog {
            dialog_id: "d1".into(),
            turns: vec![
                RawTurn {
                    system_acts: vec![act("welcomemsg", &[])],
                    system_transcript: String::new(),
                    asr_hyps: vec![("hi".into(), 0.9)],
                    slu_hyps: vec![],
                    label: label(&[], "none", &[], "hi"),
                },
                RawTurn {
                    system_acts: vec![],
                    system_transcript: String::new(),
                    asr_hyps: vec![],
                    slu_hyps: vec![],
                    label: label(&[("food", "indian")], "byconstraints", &[], ""),
                },
            ],
        };
        let ex = serialize_dialog(&raw, UserSource::Asr1Best, &tiny_schema());
        // turn 1 emitted nothing: its label lands on turn 0's final token
        assert_eq!(ex.labels.len(), 1);
        let (&idx, lab) = ex.labels.iter().next().unwrap();
        assert_eq!(idx, ex.events.len() - 1);
        assert_eq!(lab["goal.food"], "indian");
    }

    #[test]
    fn serialize_round_trip_and_determinism() {
        let raw = RawDialog {
            dialog_id: "d2".into(),
            turns: vec![
                RawTurn {
                    system_acts: vec![
                        act("inform", &[("pricerange", "cheap")]),
                        act("offer", &[("name", "prezzo")]),
                    ],
                    system_transcript: String::new(),
                    asr_hyps: vec![
                        ("im looking for chinese".into(), 0.7),
                        ("im cooking".into(), 0.2),
                    ],
                    slu_hyps: vec![],
                    label: label(&[("food", "chinese")], "byconstraints", &[], ""),
                },
                RawTurn {
                    system_acts: vec![act("request", &[("slot", "area")])],
                    system_transcript: String::new(),
                    asr_hyps: vec![("phone number".into(), 0.4)],
                    slu_hyps: vec![],
                    label: label(&[("food", "chinese")], "byconstraints", &["phone"], ""),
                },
            ],
        };
        let schema = tiny_schema();
        let ex1 = serialize_dialog(&raw, UserSource::Asr1Best, &schema);
        let ex2 = serialize_dialog(&raw, UserSource::Asr1Best, &schema);
        assert_eq!(ex1, ex2);

        // round-trip: per-turn slices reproduce flattened acts + top hypothesis
        for (ti, turn) in raw.turns.iter().enumerate() {
            let slice: Vec<&str> = ex1
                .events
                .iter()
                .filter(|e| e.turn_index == ti)
                .map(|e| e.token.as_str())
                .collect();
            let mut want: Vec<String> = turn
                .system_acts
                .iter()
                .flat_map(flatten_system_act)
                .flat_map(|f| tokenize(&f))
                .collect();
            want.extend(tokenize(&turn.asr_hyps[0].0));
            assert_eq!(slice, want.iter().map(String::as_str).collect::<Vec<_>>());
        }
        // exactly one turn-final event per turn
        for ti in 0..raw.turns.len() {
            let finals = ex1
                .events
                .iter()
                .filter(|e| e.turn_index == ti && e.turn_final)
                .count();
            assert_eq!(finals, 1);
        }
        assert_eq!(ex1.labels.len(), 2);
    }

    #[test]
    fn schedule_from_slu_and_system_acts() {
        let raw = RawDialog {
            dialog_id: "d3".into(),
            turns: vec![
                RawTurn {
                    system_acts: vec![act("welcomemsg", &[])],
                    system_transcript: String::new(),
                    asr_hyps: vec![],
                    slu_hyps: vec![],
                    label: label(&[], "none", &[], ""),
                },
                RawTurn {
                    system_acts: vec![],
                    system_transcript: String::new(),
                    asr_hyps: vec![],
                    slu_hyps: vec![],
                    label: label(&[], "none", &[], ""),
                },
                RawTurn {
                    system_acts: vec![],
                    system_transcript: String::new(),
                    asr_hyps: vec![],
                    slu_hyps: vec![SluHyp {
                        acts: vec![act("inform", &[("food", "chinese")])],
                        score: 0.5,
                    }],
                    label: label(&[("food", "chinese")], "byconstraints", &[], ""),
                },
            ],
        };
        let schedule = mention_schedule(&raw, &tiny_schema());
        assert_eq!(schedule["goal.food"], Some(2));
        assert_eq!(schedule["requested.phone"], None);
        assert_eq!(schedule["method"], Some(0));
    }

    #[test]
    fn schedule_handles_request_slot_indirection() {
        let raw = RawDialog {
            dialog_id: "d4".into(),
            turns: vec![RawTurn {
                system_acts: vec![act("request", &[("slot", "food")])],
                system_transcript: String::new(),
                asr_hyps: vec![],
                slu_hyps: vec![],
                label: label(&[], "none", &[], ""),
            }],
        };
        let schedule = mention_schedule(&raw, &tiny_schema());
        assert_eq!(schedule["goal.food"], Some(0));
    }

    #[test]
    fn load_dataset_from_disk_layout() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("s1")).unwrap();
        std::fs::write(
            root.join("s1/log.json"),
            serde_json::json!({
                "session-id": "voip-1",
                "turns": [{
                    "output": {"dialog-acts": [{"act": "request", "slots": [["slot", "food"]]}], "transcript": "What food?"},
                    "input": {"live": {
                        "asr-hyps": [{"asr-hyp": "chinese food", "score": 0.82}],
                        "slu-hyps": [{"slu-hyp": [{"act": "inform", "slots": [["food", "chinese"]]}], "score": 0.8}]
                    }}
                }]
            })
            .to_string(),
        )
        .unwrap();
        std::fs::write(
            root.join("s1/label.json"),
            serde_json::json!({
                "session-id": "voip-1",
                "turns": [{
                    "goal-labels": {"food": "chinese"},
                    "method-label": "byconstraints",
                    "requested-slots": [],
                    "transcription": "chinese food"
                }]
            })
            .to_string(),
        )
        .unwrap();
        std::fs::write(root.join("flist.txt"), "s1\n").unwrap();
        std::fs::write(
            root.join("ontology.json"),
            serde_json::json!({
                "informable": {"area": ["north", "south"], "food": ["chinese", "indian"],
                               "name": ["prezzo"], "pricerange": ["cheap", "expensive"]},
                "requestable": ["phone", "addr"],
                "method": ["byconstraints", "byname", "byalternatives", "finished"]
            })
            .to_string(),
        )
        .unwrap();

        let (dialogs, schema) =
            load_dataset(root, &root.join("flist.txt"), &root.join("ontology.json")).unwrap();
        assert_eq!(dialogs.len(), 1);
        assert_eq!(dialogs[0].dialog_id, "voip-1");
        assert_eq!(dialogs[0].turns[0].asr_hyps[0].1, 0.82);
        assert_eq!(dialogs[0].turns[0].slu_hyps.len(), 1);

        // ontology with 4 informables yields a Goal group of 4 components
        assert_eq!(schema.group_components(Group::Goal).count(), 4);
        assert_eq!(schema.group_components(Group::Method).count(), 1);
        assert_eq!(schema.group_components(Group::Requested).count(), 2);
        let food = schema.component("goal.food").unwrap();
        assert_eq!(food.values[0], "none");
        assert_eq!(food.values[1], "dontcare");

        // empty flist: no dialogs, schema still built
        std::fs::write(root.join("empty.txt"), "").unwrap();
        let (dialogs, schema2) =
            load_dataset(root, &root.join("empty.txt"), &root.join("ontology.json")).unwrap();
        assert!(dialogs.is_empty());
        assert_eq!(schema2, schema);
    }

    #[test]
    fn load_dataset_rejects_turn_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("bad")).unwrap();
        std::fs::write(
            root.join("bad/log.json"),
            serde_json::json!({"session-id": "x", "turns": [
                {"output": {"dialog-acts": [], "transcript": ""}},
                {"output": {"dialog-acts": [], "transcript": ""}}
            ]})
            .to_string(),
        )
        .unwrap();
        std::fs::write(
            root.join("bad/label.json"),
            serde_json::json!({"session-id": "x", "turns": [{}]}).to_string(),
        )
        .unwrap();
        std::fs::write(root.join("flist.txt"), "bad\n").unwrap();
        std::fs::write(
            root.join("ontology.json"),
            serde_json::json!({"informable": {}, "requestable": [], "method": []}).to_string(),
        )
        .unwrap();
        let err =
            load_dataset(root, &root.join("flist.txt"), &root.join("ontology.json")).unwrap_err();
        assert!(err.to_string().contains("turn count"), "{err}");
    }

    #[test]
    fn missing_file_is_a_fatal_load_error_naming_the_dialog() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::write(root.join("flist.txt"), "ghost\n").unwrap();
        std::fs::write(
            root.join("ontology.json"),
            serde_json::json!({"informable": {}, "requestable": [], "method": []}).to_string(),
        )
        .unwrap();
        let err =
            load_dataset(root, &root.join("flist.txt"), &root.join("ontology.json")).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }
}
