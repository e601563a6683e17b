//! Model averaging: N independently initialized models per component whose
//! predicted distributions are averaged elementwise. Averaging happens in
//! abstract class space, before de-abstraction, so members must share one
//! vocabulary and abstraction dict.

use crate::corpus::DialogExample;
use crate::error::{Error, Result};
use crate::model::{BeliefState, ComponentModel, TrackerState};
use crate::preprocess::{deabstract_distribution, AbstractionAssignment, ClassSet, EncodedDialog, Vocabulary};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Elementwise arithmetic mean of probability vectors.
pub fn average_predictions(distributions: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = distributions.first() else {
        return Err(Error::Argument("cannot average zero distributions".into()));
    };
    for d in distributions {
        if d.len() != first.len() {
            return Err(Error::Argument(format!(
                "distribution length mismatch: {} vs {}",
                d.len(),
                first.len()
            )));
        }
    }
    let n = distributions.len() as f64;
    let mut out = vec![0.0; first.len()];
    for d in distributions {
        for (o, p) in out.iter_mut().zip(d) {
            *o += p;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// N members for one component, dimension-identical.
#[derive(Debug, Clone)]
pub struct ComponentEnsemble {
    pub component: String,
    pub members: Vec<ComponentModel>,
}

impl ComponentEnsemble {
    pub fn new(members: Vec<ComponentModel>) -> Result<ComponentEnsemble> {
        let Some(first) = members.first() else {
            return Err(Error::Argument("ensemble needs at least one member".into()));
        };
        for m in &members {
            if m.component != first.component {
                return Err(Error::Argument(format!(
                    "ensemble mixes components {} and {}",
                    first.component, m.component
                )));
            }
            if m.dims != first.dims || m.classes != first.classes {
                return Err(Error::Argument(format!(
                    "ensemble member of {} has mismatched dimensions or classes",
                    m.component
                )));
            }
        }
        Ok(ComponentEnsemble {
            component: first.component.clone(),
            members,
        })
    }

    pub fn classes(&self) -> &ClassSet {
        &self.members[0].classes
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Averaged abstract-class distributions at the recorded indices.
    pub fn beliefs_at(&self, encoded: &EncodedDialog, record: &[bool]) -> Vec<(usize, Vec<f64>)> {
        let per_member: Vec<Vec<(usize, Vec<f64>)>> = self
            .members
            .par_iter()
            .map(|m| m.beliefs_at(encoded, record))
            .collect();
        let n_points = per_member[0].len();
        let mut out = Vec::with_capacity(n_points);
        for p in 0..n_points {
            let idx = per_member[0][p].0;
            let dists: Vec<Vec<f64>> = per_member.iter().map(|m| m[p].1.clone()).collect();
            out.push((idx, average_predictions(&dists).expect("same dims")));
        }
        out
    }
}

/// Single model or ensemble behind one tracking interface. A session's
/// incremental state is one `TrackerState` per member.
#[derive(Debug, Clone)]
pub enum Tracker {
    Single(ComponentModel),
    Ensemble(ComponentEnsemble),
}

impl Tracker {
    pub fn component(&self) -> &str {
        match self {
            Tracker::Single(m) => &m.component,
            Tracker::Ensemble(e) => &e.component,
        }
    }

    pub fn classes(&self) -> &ClassSet {
        match self {
            Tracker::Single(m) => &m.classes,
            Tracker::Ensemble(e) => e.classes(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tracker::Single(m) => m.dims.vocab,
            Tracker::Ensemble(e) => e.members[0].dims.vocab,
        }
    }

    fn members(&self) -> &[ComponentModel] {
        match self {
            Tracker::Single(m) => std::slice::from_ref(m),
            Tracker::Ensemble(e) => &e.members,
        }
    }

    pub fn initial_states(&self) -> Vec<TrackerState> {
        self.members().iter().map(|m| m.initial_state()).collect()
    }

    /// Averaged distribution before any token has been consumed.
    pub fn prior(&self) -> Vec<f64> {
        let dists: Vec<Vec<f64>> = self
            .members()
            .iter()
            .map(|m| m.classify(&m.initial_state()))
            .collect();
        average_predictions(&dists).expect("same dims")
    }

    /// Advance every member by one token; the emitted distribution is the
    /// member average (abstract class space).
    pub fn step(&self, states: &[TrackerState], token_id: u32, score: f64) -> (Vec<TrackerState>, Vec<f64>) {
        let members = self.members();
        assert_eq!(states.len(), members.len(), "one state per member");
        let mut next = Vec::with_capacity(members.len());
        let mut dists = Vec::with_capacity(members.len());
        for (m, s) in members.iter().zip(states) {
            let (ns, d) = m.track_token(s, token_id, score);
            next.push(ns);
            dists.push(d);
        }
        let avg = average_predictions(&dists).expect("same dims");
        (next, avg)
    }

    /// Averaged abstract-class distributions at the recorded indices.
    pub fn beliefs_at(&self, encoded: &EncodedDialog, record: &[bool]) -> Vec<(usize, Vec<f64>)> {
        match self {
            Tracker::Single(m) => m.beliefs_at(encoded, record),
            Tracker::Ensemble(e) => e.beliefs_at(encoded, record),
        }
    }
}

/// Run each member over the stream, average per labeled time, then
/// de-abstract once on the averaged distribution.
pub fn track_ensemble(
    trackers: &BTreeMap<String, Tracker>,
    example: &DialogExample,
    assignment: &AbstractionAssignment,
    vocab: &Vocabulary,
    use_scores: bool,
) -> Result<BTreeMap<usize, BeliefState>> {
    let mut out: BTreeMap<usize, BeliefState> = example
        .labels
        .keys()
        .map(|&i| {
            (
                i,
                BeliefState {
                    per_component: BTreeMap::new(),
                },
            )
        })
        .collect();
    let mut record = vec![false; example.events.len()];
    for &i in example.labels.keys() {
        record[i] = true;
    }
    for (name, tracker) in trackers {
        let mut encoded =
            crate::preprocess::encode_for_component(example, vocab, tracker.classes())?;
        if !use_scores {
            encoded.flatten_scores();
        }
        for (idx, dist) in tracker.beliefs_at(&encoded, &record) {
            let concrete = deabstract_distribution(&dist, tracker.classes(), assignment);
            out.get_mut(&idx)
                .expect("recorded index is labeled")
                .per_component
                .insert(name.clone(), concrete);
        }
    }
    Ok(out)
}

/// On-disk description of one component's ensemble: member checkpoint
/// stems plus their weight hashes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub version: u32,
    pub component: String,
    pub members: Vec<EnsembleMember>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleMember {
    /// Checkpoint stem relative to the manifest's directory.
    pub stem: String,
    pub weights_sha256: String,
}

impl EnsembleManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("manifest serializes"),
        )
        .map_err(|e| Error::io(path, e))
    }

    /// Load the manifest and every member checkpoint, verifying hashes.
    pub fn load_ensemble(path: &Path) -> Result<ComponentEnsemble> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: EnsembleManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut members = Vec::with_capacity(manifest.members.len());
        for m in &manifest.members {
            let stem: PathBuf = dir.join(&m.stem);
            let (model, ckpt_manifest) = ComponentModel::load(&stem)?;
            if ckpt_manifest.weights_sha256 != m.weights_sha256 {
                return Err(Error::parse(
                    &stem,
                    "member checkpoint hash does not match the ensemble manifest",
                ));
            }
            members.push(model);
        }
        ComponentEnsemble::new(members)
    }
}
