//! DSTC2 featured metrics: joint accuracy and L2 for the Goal, Method and
//! Requested groups under the mention schedule, over our own predictions or
//! any tracker-output file in the official DSTC2 JSON format.
//!
//! Joint distributions are formed as products of per-component marginals
//! (components are treated as independent). Hypotheses below a prune
//! threshold are dropped and their mass kept as an explicit residual that
//! is always counted as incorrect.

use crate::corpus::{DialogAnnotations, Group, SlotSchema};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Joint hypotheses with product mass below this are folded into the
/// residual.
pub const PRUNE_THRESHOLD: f64 = 1e-6;

/// Requested slots with p(requested) above this belong to the predicted set.
pub const REQUESTED_THRESHOLD: f64 = 0.5;

/// Per-component distributions over concrete values for one dialog turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub dialog_id: String,
    pub turn: usize,
    pub dists: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub accuracy: f64,
    pub l2: f64,
    pub scored_turns: usize,
}

/// The six featured numbers plus scored-turn counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub goal: GroupMetrics,
    pub method: GroupMetrics,
    pub requested: GroupMetrics,
}

impl MetricsReport {
    pub fn group(&self, group: Group) -> GroupMetrics {
        match group {
            Group::Goal => self.goal,
            Group::Method => self.method,
            Group::Requested => self.requested,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<10} {:>9} {:>9} {:>8}", "group", "acc", "l2", "turns")?;
        for (name, m) in [
            ("Goal", &self.goal),
            ("Method", &self.method),
            ("Requested", &self.requested),
        ] {
            writeln!(
                f,
                "{:<10} {:>9.4} {:>9.4} {:>8}",
                name, m.accuracy, m.l2, m.scored_turns
            )?;
        }
        Ok(())
    }
}

/// One marginal prepared for joint enumeration: values sorted by
/// descending probability (ties by value, for determinism).
struct SortedMarginal {
    values: Vec<(String, f64)>,
}

fn sort_marginal(dist: &BTreeMap<String, f64>) -> SortedMarginal {
    let mut values: Vec<(String, f64)> = dist.iter().map(|(v, &p)| (v.clone(), p)).collect();
    values.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    SortedMarginal { values }
}

/// Depth-first enumeration of the joint product distribution, visiting
/// every hypothesis with mass >= `prune`. Marginals must be sorted
/// descending so the suffix-max bound can cut whole branches.
fn enumerate_joint(
    marginals: &[SortedMarginal],
    prune: f64,
    visit: &mut dyn FnMut(&[usize], f64),
) {
    if marginals.is_empty() {
        return;
    }
    // max_rest[d] = product of the largest probabilities of marginals d+1..
    let mut max_rest = vec![1.0f64; marginals.len()];
    for d in (0..marginals.len() - 1).rev() {
        let head = marginals[d + 1].values.first().map(|v| v.1).unwrap_or(0.0);
        max_rest[d] = head * max_rest[d + 1];
    }
    let mut indices = vec![0usize; marginals.len()];
    fn rec(
        marginals: &[SortedMarginal],
        max_rest: &[f64],
        prune: f64,
        depth: usize,
        partial: f64,
        indices: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize], f64),
    ) {
        if depth == marginals.len() {
            visit(indices, partial);
            return;
        }
        for (vi, (_, p)) in marginals[depth].values.iter().enumerate() {
            let with = partial * p;
            // values are sorted descending: once this bound fails it fails
            // for every later value too
            if with * max_rest[depth] < prune {
                break;
            }
            indices[depth] = vi;
            rec(marginals, max_rest, prune, depth + 1, with, indices, visit);
        }
    }
    rec(marginals, &max_rest, prune, 0, 1.0, &mut indices, visit);
}

/// The joint distribution over one metric group, pruned, with the dropped
/// mass as an explicit residual and the per-component argmax tuple on top.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    /// (value tuple in component order, product score), each >= prune.
    pub hypotheses: Vec<(Vec<String>, f64)>,
    /// Total mass of pruned hypotheses; never matches any label.
    pub residual: f64,
    /// Tuple of per-component argmaxes (the top joint hypothesis).
    pub top: Vec<String>,
}

/// Form the joint over the given marginals as a product distribution.
pub fn joint_goal(marginals: &[(&str, &BTreeMap<String, f64>)]) -> JointDistribution {
    let sorted: Vec<SortedMarginal> = marginals.iter().map(|(_, d)| sort_marginal(d)).collect();
    let mut hypotheses = Vec::new();
    let mut retained = 0.0;
    enumerate_joint(&sorted, PRUNE_THRESHOLD, &mut |indices, score| {
        let tuple: Vec<String> = indices
            .iter()
            .zip(&sorted)
            .map(|(&vi, m)| m.values[vi].0.clone())
            .collect();
        retained += score;
        hypotheses.push((tuple, score));
    });
    let top = sorted
        .iter()
        .map(|m| m.values.first().map(|v| v.0.clone()).unwrap_or_default())
        .collect();
    JointDistribution {
        hypotheses,
        residual: (1.0 - retained).max(0.0),
        top,
    }
}

/// Euclidean distance between the pruned joint and the one-hot correct
/// label, with the residual (and a missing correct hypothesis) counted as
/// wholly incorrect.
fn joint_l2(marginals: &[SortedMarginal], correct: &[&str], prune: f64) -> f64 {
    let mut sum_sq = 0.0;
    let mut retained = 0.0;
    let mut correct_found = false;
    enumerate_joint(marginals, prune, &mut |indices, score| {
        retained += score;
        let is_correct = indices
            .iter()
            .zip(marginals)
            .zip(correct)
            .all(|((&vi, m), c)| m.values[vi].0 == *c);
        if is_correct {
            correct_found = true;
            sum_sq += (score - 1.0) * (score - 1.0);
        } else {
            sum_sq += score * score;
        }
    });
    let residual = (1.0 - retained).max(0.0);
    sum_sq += residual * residual;
    if !correct_found {
        sum_sq += 1.0;
    }
    sum_sq.sqrt()
}

const NONE_DIST: &BTreeMap<String, f64> = &BTreeMap::new();

fn dist_or_none<'a>(
    dists: &'a BTreeMap<String, BTreeMap<String, f64>>,
    component: &str,
) -> &'a BTreeMap<String, f64> {
    dists.get(component).unwrap_or(NONE_DIST)
}

/// Argmax value of a marginal; an empty marginal means implicit "none".
fn argmax(dist: &BTreeMap<String, f64>) -> &str {
    let mut best: Option<(&str, f64)> = None;
    for (v, &p) in dist {
        match best {
            Some((_, bp)) if p <= bp => {}
            _ => best = Some((v, p)),
        }
    }
    best.map(|(v, _)| v).unwrap_or("none")
}

fn p_of(dist: &BTreeMap<String, f64>, value: &str) -> f64 {
    dist.get(value).copied().unwrap_or(0.0)
}

/// First scored turn for a group: the earliest mention of any component in
/// the group (Method is always scheduled).
fn group_first_mention(
    schedule: &BTreeMap<String, Option<usize>>,
    components: &[&str],
) -> Option<usize> {
    components
        .iter()
        .filter_map(|c| schedule.get(*c).copied().flatten())
        .min()
}

struct GroupAccumulator {
    correct: usize,
    l2_sum: f64,
    scored: usize,
}

impl GroupAccumulator {
    fn new() -> Self {
        GroupAccumulator {
            correct: 0,
            l2_sum: 0.0,
            scored: 0,
        }
    }

    fn finish(self) -> GroupMetrics {
        let n = self.scored.max(1) as f64;
        GroupMetrics {
            accuracy: self.correct as f64 / n,
            l2: self.l2_sum / n,
            scored_turns: self.scored,
        }
    }
}

/// Score one turn for one group. Returns (correct, l2).
fn score_turn(
    components: &[&str],
    group: Group,
    dists: &BTreeMap<String, BTreeMap<String, f64>>,
    labels: &BTreeMap<String, String>,
) -> (bool, f64) {
    let label_of = |c: &str| labels.get(c).map(String::as_str).unwrap_or("none");

    let correct = match group {
        Group::Requested => components.iter().all(|c| {
            let predicted = p_of(dist_or_none(dists, c), "requested") > REQUESTED_THRESHOLD;
            predicted == (label_of(c) == "requested")
        }),
        _ => components
            .iter()
            .all(|c| argmax(dist_or_none(dists, c)) == label_of(c)),
    };

    let marginals: Vec<SortedMarginal> = components
        .iter()
        .map(|c| {
            let d = dist_or_none(dists, c);
            if d.is_empty() {
                // implicit all-mass-on-none marginal
                let mut m = BTreeMap::new();
                m.insert("none".to_string(), 1.0);
                sort_marginal(&m)
            } else {
                sort_marginal(d)
            }
        })
        .collect();
    let correct_tuple: Vec<&str> = components.iter().map(|c| label_of(c)).collect();
    let l2 = joint_l2(&marginals, &correct_tuple, PRUNE_THRESHOLD);
    (correct, l2)
}

/// Compute the featured metrics for a set of predictions against gold
/// annotations. Predictions may arrive in any order; missing turns are
/// scored as incorrect with a warning.
pub fn report(
    preds: &[TurnPrediction],
    annotations: &[DialogAnnotations],
    schema: &SlotSchema,
) -> MetricsReport {
    let mut by_key: BTreeMap<(&str, usize), &TurnPrediction> = BTreeMap::new();
    for p in preds {
        by_key.insert((p.dialog_id.as_str(), p.turn), p);
    }
    let group_names: BTreeMap<Group, Vec<&str>> = [Group::Goal, Group::Method, Group::Requested]
        .into_iter()
        .map(|g| {
            (
                g,
                schema
                    .group_components(g)
                    .map(|c| c.name.as_str())
                    .collect(),
            )
        })
        .collect();

    let mut acc: BTreeMap<Group, GroupAccumulator> = group_names
        .keys()
        .map(|&g| (g, GroupAccumulator::new()))
        .collect();

    for ann in annotations {
        for (&group, components) in &group_names {
            if components.is_empty() {
                continue;
            }
            let Some(first) = group_first_mention(&ann.schedule, components) else {
                continue;
            };
            for turn in first..ann.turn_labels.len() {
                let a = acc.get_mut(&group).unwrap();
                a.scored += 1;
                match by_key.get(&(ann.dialog_id.as_str(), turn)) {
                    Some(pred) => {
                        let (correct, l2) =
                            score_turn(components, group, &pred.dists, &ann.turn_labels[turn]);
                        if correct {
                            a.correct += 1;
                        }
                        a.l2_sum += l2;
                    }
                    None => {
                        eprintln!(
                            "warning: no prediction for dialog {} turn {turn}; scored as incorrect",
                            ann.dialog_id
                        );
                        a.l2_sum += std::f64::consts::SQRT_2;
                    }
                }
            }
        }
    }

    MetricsReport {
        goal: acc.remove(&Group::Goal).unwrap().finish(),
        method: acc.remove(&Group::Method).unwrap().finish(),
        requested: acc.remove(&Group::Requested).unwrap().finish(),
    }
}

// --- official DSTC2 tracker-output format -----------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TrackerOutputFile {
    #[serde(default)]
    dataset: String,
    #[serde(rename = "wall-time", default, skip_serializing_if = "Option::is_none")]
    wall_time: Option<f64>,
    sessions: Vec<TrackerSession>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackerSession {
    #[serde(rename = "session-id")]
    session_id: String,
    turns: Vec<TrackerTurn>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct TrackerTurn {
    #[serde(rename = "goal-labels", default)]
    goal_labels: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(rename = "method-label", default)]
    method_label: BTreeMap<String, f64>,
    #[serde(rename = "requested-slots", default)]
    requested_slots: BTreeMap<String, f64>,
}

/// Listed values keep their mass; the remainder goes to "none".
fn with_implicit_none(listed: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let mut dist = listed.clone();
    let sum: f64 = listed.values().sum();
    *dist.entry("none".to_string()).or_insert(0.0) += (1.0 - sum).max(0.0);
    dist
}

/// Parse a tracker-output file in the official DSTC2 JSON format into
/// per-turn predictions over the schema's components.
pub fn parse_official(path: &Path, schema: &SlotSchema) -> Result<Vec<TurnPrediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TrackerOutputFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut out = Vec::new();
    for session in &file.sessions {
        for (turn_index, turn) in session.turns.iter().enumerate() {
            let mut dists = BTreeMap::new();
            for c in &schema.components {
                let dist = match c.group {
                    Group::Goal => match turn.goal_labels.get(&c.slot) {
                        Some(d) => with_implicit_none(d),
                        None => continue,
                    },
                    Group::Method => with_implicit_none(&turn.method_label),
                    Group::Requested => {
                        let p = turn
                            .requested_slots
                            .get(&c.slot)
                            .copied()
                            .unwrap_or(0.0)
                            .clamp(0.0, 1.0);
                        let mut d = BTreeMap::new();
                        d.insert("requested".to_string(), p);
                        d.insert("none".to_string(), 1.0 - p);
                        d
                    }
                };
                dists.insert(c.name.clone(), dist);
            }
            out.push(TurnPrediction {
                dialog_id: session.session_id.clone(),
                turn: turn_index,
                dists,
            });
        }
    }
    Ok(out)
}

/// Score an external tracker-output file with the same pipeline used for
/// internal predictions. Turn counts must match the annotations.
pub fn score_external(
    path: &Path,
    annotations: &[DialogAnnotations],
    schema: &SlotSchema,
) -> Result<MetricsReport> {
    let preds = parse_official(path, schema)?;
    let mut turns_per_dialog: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &preds {
        let n = turns_per_dialog.entry(p.dialog_id.as_str()).or_insert(0);
        *n = (*n).max(p.turn + 1);
    }
    for ann in annotations {
        match turns_per_dialog.get(ann.dialog_id.as_str()) {
            Some(&n) if n == ann.turn_labels.len() => {}
            Some(&n) => {
                return Err(Error::parse(
                    path,
                    format!(
                        "dialog {}: {} turns in file, {} in labels",
                        ann.dialog_id,
                        n,
                        ann.turn_labels.len()
                    ),
                ));
            }
            None => {
                return Err(Error::parse(
                    path,
                    format!("dialog {} missing from tracker output", ann.dialog_id),
                ));
            }
        }
    }
    Ok(report(&preds, annotations, schema))
}

/// Write predictions in the official DSTC2 tracker-output format. The
/// "none" mass is left implicit, as the official scorer expects.
pub fn export_official(
    preds: &[TurnPrediction],
    schema: &SlotSchema,
    dataset: &str,
    wall_time: f64,
    path: &Path,
) -> Result<()> {
    let mut by_dialog: BTreeMap<&str, BTreeMap<usize, &TurnPrediction>> = BTreeMap::new();
    for p in preds {
        by_dialog
            .entry(p.dialog_id.as_str())
            .or_default()
            .insert(p.turn, p);
    }
    let mut sessions = Vec::new();
    for (dialog_id, turns) in by_dialog {
        let n = turns.keys().max().map(|&t| t + 1).unwrap_or(0);
        let mut out_turns = Vec::with_capacity(n);
        for t in 0..n {
            let Some(pred) = turns.get(&t) else {
                return Err(Error::Argument(format!(
                    "dialog {dialog_id} is missing a prediction for turn {t}"
                )));
            };
            let mut turn = TrackerTurn::default();
            for c in &schema.components {
                let Some(dist) = pred.dists.get(&c.name) else {
                    continue;
                };
                match c.group {
                    Group::Goal => {
                        let slot_dist: BTreeMap<String, f64> = dist
                            .iter()
                            .filter(|(v, &p)| *v != "none" && p > 0.0)
                            .map(|(v, &p)| (v.clone(), p))
                            .collect();
                        turn.goal_labels.insert(c.slot.clone(), slot_dist);
                    }
                    Group::Method => {
                        turn.method_label = dist
                            .iter()
                            .filter(|(v, &p)| *v != "none" && p > 0.0)
                            .map(|(v, &p)| (v.clone(), p))
                            .collect();
                    }
                    Group::Requested => {
                        turn.requested_slots
                            .insert(c.slot.clone(), p_of(dist, "requested"));
                    }
                }
            }
            out_turns.push(turn);
        }
        sessions.push(TrackerSession {
            session_id: dialog_id.to_string(),
            turns: out_turns,
        });
    }
    let file = TrackerOutputFile {
        dataset: dataset.to_string(),
        wall_time: Some(wall_time),
        sessions,
    };
    let text = serde_json::to_string_pretty(&file).expect("tracker output serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
