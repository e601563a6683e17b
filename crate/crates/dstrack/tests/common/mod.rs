//! Shared fixture: a deterministic synthetic corpus in the DSTC2 on-disk
//! layout, small enough to train in seconds but shaped like the real
//! thing (ASR noise with confidence scores, SLU mention hypotheses, rare
//! values for abstraction, multi-word values, requested slots).

use dstrack::cli::{FlistPaths, RunConfig};
use dstrack::rng::seeded_rng;
use dstrack::train::{NetDims, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::path::{Path, PathBuf};

pub const COMMON_FOODS: [&str; 2] = ["chinese", "indian"];
pub const RARE_FOODS: [&str; 3] = ["jamaican", "basque", "north african"];
/// In the ontology but never uttered or labeled: zero-shot via abstraction.
pub const ZERO_SHOT_FOOD: &str = "eritrean";
pub const AREAS: [&str; 2] = ["north", "south"];
pub const REQUESTABLES: [&str; 2] = ["addr", "phone"];

pub struct SyntheticCorpus {
    pub root: PathBuf,
    pub config_path: PathBuf,
    pub config: RunConfig,
}

struct DialogSpec {
    food: String,
    area: Option<String>,
    asr_food: String,
    asr_score: f64,
    requested: Option<String>,
}

fn sample_dialog(rng: &mut ChaCha8Rng) -> DialogSpec {
    let food = if rng.gen_bool(0.2) {
        RARE_FOODS.choose(rng).unwrap().to_string()
    } else {
        COMMON_FOODS.choose(rng).unwrap().to_string()
    };
    // ASR corrupts the food word sometimes, with a telltale low score
    let (asr_food, asr_score) = if rng.gen_bool(0.15) {
        let wrong = COMMON_FOODS.choose(rng).unwrap().to_string();
        (wrong, rng.gen_range(0.25..0.55))
    } else {
        (food.clone(), rng.gen_range(0.7..0.98))
    };
    DialogSpec {
        food,
        area: if rng.gen_bool(0.6) {
            Some(AREAS.choose(rng).unwrap().to_string())
        } else {
            None
        },
        asr_food,
        asr_score,
        requested: if rng.gen_bool(0.5) {
            Some(REQUESTABLES.choose(rng).unwrap().to_string())
        } else {
            None
        },
    }
}

fn dialog_json(session_id: &str, spec: &DialogSpec) -> (serde_json::Value, serde_json::Value) {
    let truth_0 = match &spec.area {
        Some(area) => format!("i want {} food in the {}", spec.food, area),
        None => format!("i want {} food", spec.food),
    };
    let asr_0 = match &spec.area {
        Some(area) => format!("i want {} food in the {}", spec.asr_food, area),
        None => format!("i want {} food", spec.asr_food),
    };
    let mut slu_slots_0 = vec![json!(["food", spec.asr_food])];
    if let Some(area) = &spec.area {
        slu_slots_0.push(json!(["area", area]));
    }

    let (truth_1, asr_1, slu_1) = match &spec.requested {
        Some(slot) => {
            let utt = format!("what is the {slot} of the place");
            (
                utt.clone(),
                utt,
                json!([{"slu-hyp": [{"act": "request", "slots": [["slot", slot]]}], "score": 0.85}]),
            )
        }
        None => (
            "thank you good bye".to_string(),
            "thank you good bye".to_string(),
            json!([{"slu-hyp": [{"act": "bye", "slots": []}], "score": 0.9}]),
        ),
    };

    let log = json!({
        "session-id": session_id,
        "turns": [
            {
                "output": {
                    "dialog-acts": [{"act": "welcomemsg", "slots": []}],
                    "transcript": "Hello, welcome. What kind of food would you like?"
                },
                "input": {"live": {
                    "asr-hyps": [
                        {"asr-hyp": asr_0, "score": spec.asr_score},
                        {"asr-hyp": "noise", "score": (spec.asr_score * 0.3)}
                    ],
                    "slu-hyps": [{"slu-hyp": [{"act": "inform", "slots": slu_slots_0}], "score": 0.8}]
                }}
            },
            {
                "output": {
                    "dialog-acts": [
                        {"act": "offer", "slots": [["name", "prezzo"]]},
                        {"act": "inform", "slots": [["food", spec.asr_food]]}
                    ],
                    "transcript": "prezzo serves that food."
                },
                "input": {"live": {
                    "asr-hyps": [{"asr-hyp": asr_1, "score": 0.9}],
                    "slu-hyps": slu_1
                }}
            }
        ]
    });

    let requested_slots: Vec<&str> = spec.requested.as_deref().into_iter().collect();
    let mut goals_0 = serde_json::Map::new();
    goals_0.insert("food".into(), json!(spec.food));
    if let Some(area) = &spec.area {
        goals_0.insert("area".into(), json!(area));
    }
    let label = json!({
        "session-id": session_id,
        "turns": [
            {
                "goal-labels": goals_0,
                "method-label": "byconstraints",
                "requested-slots": [],
                "transcription": truth_0
            },
            {
                "goal-labels": goals_0,
                "method-label": "byconstraints",
                "requested-slots": requested_slots,
                "transcription": truth_1
            }
        ]
    });
    (log, label)
}

fn ontology_json() -> serde_json::Value {
    let mut foods: Vec<&str> = COMMON_FOODS.to_vec();
    foods.extend(RARE_FOODS);
    foods.push(ZERO_SHOT_FOOD);
    json!({
        "informable": {"food": foods, "area": AREAS},
        "requestable": REQUESTABLES,
        "method": ["byconstraints", "byname", "byalternatives", "finished"]
    })
}

/// Write a corpus of `n_train`/`n_dev`/`n_test` dialogs under `root` and a
/// ready run config beside it.
pub fn build_corpus(
    root: &Path,
    seed: u64,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    train: TrainConfig,
) -> SyntheticCorpus {
    let data_root = root.join("data");
    std::fs::create_dir_all(&data_root).unwrap();
    let mut rng = seeded_rng(seed);
    let mut write_split = |name: &str, count: usize, offset: usize| -> PathBuf {
        let mut entries = Vec::new();
        for i in 0..count {
            let session = format!("voip-{name}-{:03}", offset + i);
            let dir = data_root.join(&session);
            std::fs::create_dir_all(&dir).unwrap();
            let spec = sample_dialog(&mut rng);
            let (log, label) = dialog_json(&session, &spec);
            std::fs::write(dir.join("log.json"), log.to_string()).unwrap();
            std::fs::write(dir.join("label.json"), label.to_string()).unwrap();
            entries.push(session);
        }
        let flist = root.join(format!("{name}.flist"));
        std::fs::write(&flist, entries.join("\n") + "\n").unwrap();
        flist
    };
    let train_flist = write_split("train", n_train, 0);
    let dev_flist = write_split("dev", n_dev, 1000);
    let test_flist = write_split("test", n_test, 2000);
    let ontology = root.join("ontology.json");
    std::fs::write(&ontology, ontology_json().to_string()).unwrap();

    let config = RunConfig {
        data_root,
        flists: FlistPaths {
            train: train_flist,
            dev: dev_flist,
            test: test_flist,
        },
        ontology,
        out_dir: root.join("out"),
        ensemble_size: 2,
        train,
    };
    let config_path = root.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    SyntheticCorpus {
        root: root.to_path_buf(),
        config_path,
        config,
    }
}

/// Training shrunk for tests: tiny network, few epochs, a hotter learning
/// rate so the easy synthetic mapping converges in seconds.
pub fn fast_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        minibatch_size: 10,
        patience: 4,
        max_epochs: 15,
        seed,
        adam: dstrack::nncore::AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        dims: NetDims {
            embed: 16,
            input_net: 24,
            hidden: 12,
        },
        ..TrainConfig::default()
    }
}
