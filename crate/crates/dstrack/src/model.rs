//! The per-component tracking network: score-aware embedding, ReLU input
//! network, single-layer LSTM encoder and softmax classifier, exposed both
//! as a strictly incremental token-at-a-time interface and as a full-stream
//! evaluation used for training.
//!
//! Contrary to the usual LSTM formulation the input gate uses tanh (range
//! [-1, 1]); forget, output and candidate activations are standard.

use crate::corpus::DialogExample;
use crate::error::{Error, Result};
use crate::nncore::{Gradients, InitSpec, NodeId, ParamId, ParamStore, Tape};
use crate::preprocess::{
    deabstract_distribution, AbstractionAssignment, ClassSet, EncodedDialog, Vocabulary,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const EMBED_DIM: usize = 170;
pub const INPUT_NET_DIM: usize = 300;
pub const HIDDEN_DIM: usize = 100;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DSTKCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Tensor dimensions of one component model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub input_net: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn standard(vocab: usize, classes: usize) -> ModelDims {
        ModelDims {
            vocab,
            embed: EMBED_DIM,
            input_net: INPUT_NET_DIM,
            hidden: HIDDEN_DIM,
            classes,
        }
    }
}

/// Gate order is frozen as (i, f, o, g) in parameter names and checkpoints.
const GATES: [char; 4] = ['i', 'f', 'o', 'g'];

/// The LSTM hidden pair carried incrementally across tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
    pub token_count: usize,
}

impl TrackerState {
    pub fn initial(hidden: usize) -> TrackerState {
        TrackerState {
            c: vec![0.0; hidden],
            h: vec![0.0; hidden],
            token_count: 0,
        }
    }
}

/// Per-component probability distributions over concrete values at one
/// point in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub per_component: BTreeMap<String, BTreeMap<String, f64>>,
}

/// All trainable weights for one dialog state component's tracker.
#[derive(Debug, Clone)]
pub struct ComponentModel {
    pub component: String,
    pub dims: ModelDims,
    pub classes: ClassSet,
    pub params: ParamStore,
    ids: ParamIds,
}

#[derive(Debug, Clone)]
struct ParamIds {
    embed: ParamId,
    input_w: ParamId,
    input_b: ParamId,
    wx: [ParamId; 4],
    wh: [ParamId; 4],
    b: [ParamId; 4],
    cls_w: ParamId,
    cls_b: ParamId,
}

fn init_spec(dims: &ModelDims) -> InitSpec {
    let mut spec = InitSpec::new()
        // embedding rows feed the input net; their own width is the fan-in
        .gaussian("embed", dims.vocab, dims.embed, dims.embed)
        .gaussian("input.w", dims.input_net, dims.embed + 1, dims.embed + 1)
        .constant("input.b", dims.input_net, 1, 0.0);
    for gate in GATES {
        spec = spec
            .gaussian(&format!("lstm.wx.{gate}"), dims.hidden, dims.input_net, dims.input_net)
            .gaussian(&format!("lstm.wh.{gate}"), dims.hidden, dims.hidden, dims.hidden)
            // forget-gate bias starts at 1.0, all other biases at zero
            .constant(&format!("lstm.b.{gate}"), dims.hidden, 1, if gate == 'f' { 1.0 } else { 0.0 });
    }
    spec.gaussian("cls.w", dims.classes, dims.hidden, dims.hidden)
        .constant("cls.b", dims.classes, 1, 0.0)
}

fn lookup_ids(params: &ParamStore) -> ParamIds {
    let g = |name: &str| params.id(name);
    ParamIds {
        embed: g("embed"),
        input_w: g("input.w"),
        input_b: g("input.b"),
        wx: GATES.map(|c| g(&format!("lstm.wx.{c}"))),
        wh: GATES.map(|c| g(&format!("lstm.wh.{c}"))),
        b: GATES.map(|c| g(&format!("lstm.b.{c}"))),
        cls_w: g("cls.w"),
        cls_b: g("cls.b"),
    }
}

impl ComponentModel {
    /// Fresh model with Gaussian weights (std sqrt(2/fan_in)), zero biases
    /// and forget-gate bias 1.0, deterministic under `seed`.
    pub fn new(component: &str, classes: ClassSet, vocab_size: usize, seed: u64) -> ComponentModel {
        let dims = ModelDims::standard(vocab_size, classes.len());
        Self::with_dims(component, classes, dims, seed)
    }

    /// Same, with explicit dimensions (tests use tiny ones).
    pub fn with_dims(
        component: &str,
        classes: ClassSet,
        dims: ModelDims,
        seed: u64,
    ) -> ComponentModel {
        assert_eq!(classes.len(), dims.classes, "class set does not match dims");
        let params = ParamStore::init(&init_spec(&dims), seed);
        let ids = lookup_ids(&params);
        ComponentModel {
            component: component.to_string(),
            dims,
            classes,
            params,
            ids,
        }
    }

    pub fn initial_state(&self) -> TrackerState {
        TrackerState::initial(self.dims.hidden)
    }

    /// u = relu(W [E[token]; score] + b)
    pub fn embed_with_score(&self, tape: &mut Tape, token_id: u32, score: f64) -> NodeId {
        let e = tape.embed_row(&self.params, self.ids.embed, token_id as usize);
        let s = tape.input(vec![score]);
        let cat = tape.concat(e, s);
        let a = tape.affine(&self.params, self.ids.input_w, Some(self.ids.input_b), cat);
        tape.relu(a)
    }

    /// One LSTM step. Note the tanh input gate.
    pub fn lstm_step(
        &self,
        tape: &mut Tape,
        u: NodeId,
        c: NodeId,
        h: NodeId,
    ) -> (NodeId, NodeId) {
        let pre = |tape: &mut Tape, k: usize| {
            let xu = tape.affine(&self.params, self.ids.wx[k], Some(self.ids.b[k]), u);
            let hh = tape.affine(&self.params, self.ids.wh[k], None, h);
            tape.add(xu, hh)
        };
        let pi = pre(tape, 0);
        let i = tape.tanh(pi);
        let pf = pre(tape, 1);
        let f = tape.sigmoid(pf);
        let po = pre(tape, 2);
        let o = tape.sigmoid(po);
        let pg = pre(tape, 3);
        let g = tape.tanh(pg);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc);
        (c_new, h_new)
    }

    pub fn logits(&self, tape: &mut Tape, h: NodeId) -> NodeId {
        tape.affine(&self.params, self.ids.cls_w, Some(self.ids.cls_b), h)
    }

    /// softmax(W h + b) for an explicit state.
    pub fn classify(&self, state: &TrackerState) -> Vec<f64> {
        let mut tape = Tape::new();
        let h = tape.input(state.h.clone());
        let l = self.logits(&mut tape, h);
        tape.softmax_value(l)
    }

    /// Consume one token: embed -> LSTM step -> classify. Pure in `state`.
    pub fn track_token(&self, state: &TrackerState, token_id: u32, score: f64) -> (TrackerState, Vec<f64>) {
        assert!(
            (token_id as usize) < self.dims.vocab,
            "token id {token_id} out of range for vocabulary of {}",
            self.dims.vocab
        );
        let mut tape = Tape::new();
        let c0 = tape.input(state.c.clone());
        let h0 = tape.input(state.h.clone());
        let u = self.embed_with_score(&mut tape, token_id, score);
        let (c1, h1) = self.lstm_step(&mut tape, u, c0, h0);
        let l = self.logits(&mut tape, h1);
        let probs = tape.softmax_value(l);
        let next = TrackerState {
            c: tape.value(c1).to_vec(),
            h: tape.value(h1).to_vec(),
            token_count: state.token_count + 1,
        };
        (next, probs)
    }

    /// Run the whole stream on one tape and return the class distribution
    /// at every index where `record[i]` is true.
    pub fn beliefs_at(&self, encoded: &EncodedDialog, record: &[bool]) -> Vec<(usize, Vec<f64>)> {
        assert_eq!(record.len(), encoded.len(), "record mask length mismatch");
        let mut tape = Tape::new();
        let mut c = tape.input(vec![0.0; self.dims.hidden]);
        let mut h = tape.input(vec![0.0; self.dims.hidden]);
        let mut out = Vec::new();
        for (i, (&token, &score)) in encoded.token_ids.iter().zip(&encoded.scores).enumerate() {
            let u = self.embed_with_score(&mut tape, token, score);
            let (c1, h1) = self.lstm_step(&mut tape, u, c, h);
            c = c1;
            h = h1;
            if record[i] {
                let l = self.logits(&mut tape, h);
                out.push((i, tape.softmax_value(l)));
            }
        }
        out
    }

    /// Full-unroll training pass: cross-entropy at every labeled time.
    /// Returns the tape, the summed loss node and the label count.
    pub fn loss_tape(&self, encoded: &EncodedDialog) -> (Tape, NodeId, usize) {
        let mut tape = Tape::new();
        let mut c = tape.input(vec![0.0; self.dims.hidden]);
        let mut h = tape.input(vec![0.0; self.dims.hidden]);
        let mut losses = Vec::with_capacity(encoded.labels.len());
        let mut label_iter = encoded.labels.iter().peekable();
        for (i, (&token, &score)) in encoded.token_ids.iter().zip(&encoded.scores).enumerate() {
            let u = self.embed_with_score(&mut tape, token, score);
            let (c1, h1) = self.lstm_step(&mut tape, u, c, h);
            c = c1;
            h = h1;
            while let Some(&&(idx, class)) = label_iter.peek() {
                if idx != i {
                    break;
                }
                let l = self.logits(&mut tape, h);
                losses.push(tape.softmax_cross_entropy(l, class));
                label_iter.next();
            }
        }
        assert!(
            label_iter.peek().is_none(),
            "label index beyond end of stream in {}",
            encoded.dialog_id
        );
        let loss = tape.sum_scalars(losses);
        (tape, loss, encoded.labels.len())
    }

    /// Loss value only.
    pub fn dialog_loss(&self, encoded: &EncodedDialog) -> f64 {
        let (tape, loss, _) = self.loss_tape(encoded);
        tape.scalar(loss)
    }

    /// Loss with gradients accumulated into `grads`, scaled by `scale`.
    pub fn dialog_loss_backward(
        &self,
        encoded: &EncodedDialog,
        grads: &mut Gradients,
        scale: f64,
    ) -> Result<f64> {
        let (tape, loss, _) = self.loss_tape(encoded);
        tape.backward_scaled(loss, &self.params, grads, scale)?;
        Ok(tape.scalar(loss))
    }

    // --- checkpoint io ------------------------------------------------------

    /// Binary weights next to a JSON manifest:
    /// `<stem>.ckpt` and `<stem>.json`.
    pub fn save(&self, stem: &Path, vocab_sha256: &str, config_sha256: &str) -> Result<()> {
        let ckpt_path = path_with_suffix(stem, ".ckpt");
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let tensors = self.params.tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.value {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(&ckpt_path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(&ckpt_path, e))?;

        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            component: self.component.clone(),
            dims: self.dims,
            classes: self.classes.clone(),
            vocab_sha256: vocab_sha256.to_string(),
            config_sha256: config_sha256.to_string(),
            weights_sha256: crate::sha256_hex(&buf),
        };
        let manifest_path = path_with_suffix(stem, ".json");
        std::fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )
        .map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn load(stem: &Path) -> Result<(ComponentModel, CheckpointManifest)> {
        let manifest_path = path_with_suffix(stem, ".json");
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(&manifest_path, e.to_string()))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                &manifest_path,
                format!("unsupported checkpoint version {}", manifest.version),
            ));
        }

        let ckpt_path = path_with_suffix(stem, ".ckpt");
        let mut bytes = Vec::new();
        std::fs::File::open(&ckpt_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&ckpt_path, e))?;
        if manifest.weights_sha256 != crate::sha256_hex(&bytes) {
            return Err(Error::parse(&ckpt_path, "weight file hash mismatch"));
        }

        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                return Err(Error::parse(&ckpt_path, "truncated checkpoint"));
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        let read_u32 = |cur: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(cur, 4)?.try_into().unwrap()))
        };
        if take(&mut cur, 8)? != CHECKPOINT_MAGIC {
            return Err(Error::parse(&ckpt_path, "bad checkpoint magic"));
        }
        if read_u32(&mut cur)? != CHECKPOINT_VERSION {
            return Err(Error::parse(&ckpt_path, "bad checkpoint version"));
        }
        let count = read_u32(&mut cur)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut cur)? as usize;
            let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
                .map_err(|_| Error::parse(&ckpt_path, "bad tensor name"))?;
            let rows = read_u32(&mut cur)? as usize;
            let cols = read_u32(&mut cur)? as usize;
            let mut value = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                value.push(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
            }
            params.push(&name, rows, cols, value);
        }
        let expected = init_spec(&manifest.dims);
        for (name, rows, cols, _) in &expected.tensors {
            let t = params.tensor(params.id(name));
            if t.rows != *rows || t.cols != *cols {
                return Err(Error::parse(
                    &ckpt_path,
                    format!("tensor {name} has shape {}x{}, expected {rows}x{cols}", t.rows, t.cols),
                ));
            }
        }
        let ids = lookup_ids(&params);
        Ok((
            ComponentModel {
                component: manifest.component.clone(),
                dims: manifest.dims,
                classes: manifest.classes.clone(),
                params,
                ids,
            },
            manifest,
        ))
    }
}

/// Append a suffix to a path verbatim. `Path::with_extension` would
/// truncate at the last dot, which breaks component names like
/// `goal.food.member0`.
pub(crate) fn path_with_suffix(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    std::path::PathBuf::from(s)
}

/// Sidecar metadata stored with every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub component: String,
    pub dims: ModelDims,
    pub classes: ClassSet,
    pub vocab_sha256: String,
    pub config_sha256: String,
    pub weights_sha256: String,
}

/// Run every component model over one (already abstracted) dialog and
/// record the de-abstracted belief state at each labeled index.
pub fn track_dialog(
    models: &BTreeMap<String, ComponentModel>,
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
    for (name, model) in models {
        let mut encoded = crate::preprocess::encode_for_component(example, vocab, &model.classes)?;
        if !use_scores {
            encoded.flatten_scores();
        }
        for (idx, dist) in model.beliefs_at(&encoded, &record) {
            let concrete = deabstract_distribution(&dist, &model.classes, assignment);
            out.get_mut(&idx)
                .expect("recorded index is labeled")
                .per_component
                .insert(name.clone(), concrete);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::ClassSet;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn toy_classes(n: usize) -> ClassSet {
        ClassSet {
            component: "goal.food".into(),
            classes: (0..n).map(|i| format!("v{i}")).collect(),
            n_concrete: n,
        }
    }

    fn toy_model(vocab: usize, embed: usize, input_net: usize, hidden: usize, classes: usize, seed: u64) -> ComponentModel {
        ComponentModel::with_dims(
            "goal.food",
            toy_classes(classes),
            ModelDims {
                vocab,
                embed,
                input_net,
                hidden,
                classes,
            },
            seed,
        )
    }

    fn zeroed(mut model: ComponentModel) -> ComponentModel {
        let names: Vec<String> = model.params.tensors().iter().map(|t| t.name.clone()).collect();
        for name in names {
            let id = model.params.id(&name);
            model.params.tensor_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
        }
        model
    }

    fn set_tensor(model: &mut ComponentModel, name: &str, values: &[f64]) {
        let id = model.params.id(name);
        let t = model.params.tensor_mut(id);
        assert_eq!(t.value.len(), values.len());
        t.value.copy_from_slice(values);
    }

    #[test]
    fn forget_gate_bias_is_exactly_one() {
        let model = toy_model(12, 4, 5, 3, 4, 7);
        let bf = model.params.tensor(model.params.id("lstm.b.f"));
        assert!(bf.value.iter().all(|&v| v == 1.0));
        let bi = model.params.tensor(model.params.id("lstm.b.i"));
        assert!(bi.value.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_input_representation() {
        let model = zeroed(toy_model(6, 4, 5, 3, 4, 7));
        let mut tape = Tape::new();
        let u = model.embed_with_score(&mut tape, 2, 0.8);
        assert!(tape.value(u).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_representation_depends_on_score() {
        let model = toy_model(6, 4, 5, 3, 4, 7);
        let mut t1 = Tape::new();
        let u1 = model.embed_with_score(&mut t1, 2, 0.2);
        let mut t2 = Tape::new();
        let u2 = model.embed_with_score(&mut t2, 2, 0.9);
        assert_ne!(t1.value(u1), t2.value(u2));
        // relu output is non-negative
        assert!(t1.value(u1).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn input_representation_hand_case() {
        // emb 2, input net 3: W (3x3) @ [e0, e1, score] + b, relu on top
        let mut model = zeroed(toy_model(2, 2, 3, 2, 2, 0));
        set_tensor(&mut model, "embed", &[1.0, 0.0, 0.0, 1.0]);
        set_tensor(
            &mut model,
            "input.w",
            &[
                0.5, -1.0, 2.0, // row 0
                -0.25, 0.75, -2.0, // row 1
                1.0, 1.0, 1.0, // row 2
            ],
        );
        set_tensor(&mut model, "input.b", &[0.1, -0.1, -3.0]);
        let mut tape = Tape::new();
        let u = model.embed_with_score(&mut tape, 0, 0.5);
        // x = [1, 0, 0.5]
        // pre = [0.5 + 1.0 + 0.1, -0.25 - 1.0 - 0.1, 1 + 0.5 - 3] = [1.6, -1.35, -1.5]
        let got = tape.value(u);
        assert!((got[0] - 1.6).abs() < 1e-12);
        assert_eq!(got[1], 0.0);
        assert_eq!(got[2], 0.0);
    }

    #[test]
    fn lstm_step_closed_form_scalar_case() {
        // all-zero weights, forget bias 1, c = [2.0]:
        //   i = tanh(0) = 0, f = sigmoid(1), o = sigmoid(0) = 0.5, g = tanh(0) = 0
        //   c' = sigmoid(1) * 2, h' = 0.5 * tanh(c')
        let model = {
            let mut m = zeroed(toy_model(2, 2, 2, 1, 2, 0));
            set_tensor(&mut m, "lstm.b.f", &[1.0]);
            m
        };
        let state = TrackerState {
            c: vec![2.0],
            h: vec![0.0],
            token_count: 5,
        };
        let (next, _) = model.track_token(&state, 0, 1.0);
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((next.c[0] - sig1 * 2.0).abs() < 1e-12, "c' = {}", next.c[0]);
        assert!((next.c[0] - 1.46211715726).abs() < 1e-9);
        assert!((next.h[0] - 0.5 * (sig1 * 2.0).tanh()).abs() < 1e-12);
        assert_eq!(next.token_count, 6);
    }

    #[test]
    fn zero_state_zero_weights_stays_zero() {
        let model = zeroed(toy_model(2, 2, 2, 3, 2, 0));
        let (next, probs) = model.track_token(&model.initial_state(), 1, 0.3);
        assert!(next.c.iter().all(|&v| v == 0.0));
        assert!(next.h.iter().all(|&v| v == 0.0));
        // zero classifier: uniform prior
        assert!(probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    /// Independent scalar oracle for one LSTM step, written directly from
    /// the gate equations without the tape.
    fn oracle_step(
        wx: &[Vec<f64>; 4],
        wh: &[Vec<f64>; 4],
        b: &[Vec<f64>; 4],
        u: &[f64],
        c: &[f64],
        h: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hidden = c.len();
        let matvec = |w: &Vec<f64>, x: &[f64], r: usize| -> f64 {
            x.iter().enumerate().map(|(j, xv)| w[r * x.len() + j] * xv).sum()
        };
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut c_new = vec![0.0; hidden];
        let mut h_new = vec![0.0; hidden];
        for r in 0..hidden {
            let i = (matvec(&wx[0], u, r) + matvec(&wh[0], h, r) + b[0][r]).tanh();
            let f = sigmoid(matvec(&wx[1], u, r) + matvec(&wh[1], h, r) + b[1][r]);
            let o = sigmoid(matvec(&wx[2], u, r) + matvec(&wh[2], h, r) + b[2][r]);
            let g = (matvec(&wx[3], u, r) + matvec(&wh[3], h, r) + b[3][r]).tanh();
            c_new[r] = f * c[r] + i * g;
            h_new[r] = o * c_new[r].tanh();
        }
        (c_new, h_new)
    }

    #[test]
    fn lstm_step_matches_independent_oracle() {
        let model = toy_model(4, 3, 4, 2, 3, 99);
        let grab = |name: &str| model.params.tensor(model.params.id(name)).value.clone();
        let wx = [grab("lstm.wx.i"), grab("lstm.wx.f"), grab("lstm.wx.o"), grab("lstm.wx.g")];
        let wh = [grab("lstm.wh.i"), grab("lstm.wh.f"), grab("lstm.wh.o"), grab("lstm.wh.g")];
        let b = [grab("lstm.b.i"), grab("lstm.b.f"), grab("lstm.b.o"), grab("lstm.b.g")];

        let state = TrackerState {
            c: vec![0.3, -0.7],
            h: vec![0.1, 0.2],
            token_count: 0,
        };
        // compute u through the model, then step both ways
        let mut tape = Tape::new();
        let u_node = model.embed_with_score(&mut tape, 1, 0.6);
        let u = tape.value(u_node).to_vec();

        let (want_c, want_h) = oracle_step(&wx, &wh, &b, &u, &state.c, &state.h);
        let (next, _) = model.track_token(&state, 1, 0.6);
        for (a, b) in next.c.iter().zip(&want_c) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in next.h.iter().zip(&want_h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_closed_forms() {
        // logits (1, 0) -> (0.7311, 0.2689)
        let mut model = zeroed(toy_model(2, 2, 2, 1, 2, 0));
        set_tensor(&mut model, "cls.w", &[0.0, 0.0]);
        set_tensor(&mut model, "cls.b", &[1.0, 0.0]);
        let p = model.classify(&model.initial_state());
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert!((p[1] - 0.2689).abs() < 1e-4);

        // equal logits -> exactly (0.5, 0.5)
        set_tensor(&mut model, "cls.b", &[3.0, 3.0]);
        let p = model.classify(&model.initial_state());
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn classify_of_initial_state_is_model_prior() {
        let model = toy_model(5, 3, 4, 3, 4, 11);
        let prior = model.classify(&model.initial_state());
        let sum: f64 = prior.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // zero tokens consumed: track after no input equals the prior
        let state = model.initial_state();
        assert_eq!(model.classify(&state), prior);
    }

    fn random_encoded(model: &ComponentModel, len: usize, seed: u64) -> EncodedDialog {
        let mut rng = seeded_rng(seed);
        EncodedDialog {
            dialog_id: format!("rand-{seed}"),
            token_ids: (0..len).map(|_| rng.gen_range(0..model.dims.vocab as u32)).collect(),
            scores: (0..len).map(|_| rng.gen_range(0.0..1.0)).collect(),
            user: vec![true; len],
            turn_index: (0..len).collect(),
            turn_final: vec![true; len],
            labels: vec![],
        }
    }

    #[test]
    fn incremental_equals_batched_evaluation() {
        let model = toy_model(9, 4, 5, 3, 4, 21);
        let encoded = random_encoded(&model, 17, 3);
        let record = vec![true; encoded.len()];
        let batched = model.beliefs_at(&encoded, &record);

        let mut state = model.initial_state();
        for (i, (&tok, &score)) in encoded.token_ids.iter().zip(&encoded.scores).enumerate() {
            let (next, probs) = model.track_token(&state, tok, score);
            let (bi, bdist) = &batched[i];
            assert_eq!(*bi, i);
            for (a, b) in probs.iter().zip(bdist) {
                assert!((a - b).abs() <= 1e-12, "token {i}: {a} vs {b}");
            }
            state = next;
        }
        assert_eq!(state.token_count, encoded.len());
    }

    #[test]
    fn track_token_is_pure_and_deterministic() {
        let model = toy_model(9, 4, 5, 3, 4, 21);
        let state = model.initial_state();
        let snapshot = state.clone();
        let (s1, p1) = model.track_token(&state, 3, 0.4);
        assert_eq!(state, snapshot);
        // two divergent continuations from one saved state are independent
        let (a1, _) = model.track_token(&s1, 1, 0.9);
        let (a2, _) = model.track_token(&s1, 7, 0.1);
        let (b1, _) = model.track_token(&s1, 1, 0.9);
        assert_eq!(a1, b1);
        assert_ne!(a1, a2);
        let (s1_again, p1_again) = model.track_token(&state, 3, 0.4);
        assert_eq!(s1, s1_again);
        assert_eq!(p1, p1_again);
    }

    #[test]
    fn cell_growth_is_bounded_by_token_count() {
        // |c_t| <= |c_0| + t because f in (0,1), |i| <= 1, |g| <= 1
        let model = toy_model(9, 4, 5, 3, 4, 5);
        let mut state = model.initial_state();
        let mut rng = seeded_rng(8);
        for t in 1..=60usize {
            let tok = rng.gen_range(0..9u32);
            let (next, _) = model.track_token(&state, tok, rng.gen_range(0.0..1.0));
            state = next;
            let max_c = state.c.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_c <= t as f64 + 1e-9, "step {t}: |c| = {max_c}");
        }
    }

    #[test]
    fn loss_tape_counts_labels_and_is_finite() {
        let model = toy_model(9, 4, 5, 3, 4, 21);
        let mut encoded = random_encoded(&model, 12, 4);
        encoded.labels = vec![(5, 2), (11, 0)];
        let (tape, loss, n) = model.loss_tape(&encoded);
        assert_eq!(n, 2);
        assert!(tape.scalar(loss).is_finite());
        assert!(tape.scalar(loss) > 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy_model(9, 4, 5, 3, 4, 21);
        let stem = dir.path().join("goal.food");
        model.save(&stem, "vhash", "chash").unwrap();
        let (loaded, manifest) = ComponentModel::load(&stem).unwrap();
        assert_eq!(manifest.vocab_sha256, "vhash");
        assert_eq!(manifest.config_sha256, "chash");
        assert_eq!(loaded.component, model.component);
        assert_eq!(loaded.dims, model.dims);
        assert_eq!(loaded.classes, model.classes);
        for (a, b) in loaded.params.tensors().iter().zip(model.params.tensors()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value, "tensor {} differs", a.name);
        }
        // tampering with the weight file is detected
        let ckpt = super::path_with_suffix(&stem, ".ckpt");
        let mut bytes = std::fs::read(&ckpt).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&ckpt, bytes).unwrap();
        assert!(ComponentModel::load(&stem).is_err());
    }
}
