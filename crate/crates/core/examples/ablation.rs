//! Trains the three transmission policies on the same synthetic data for
//! three seeds and scores each on a held-out set.
//!
//! ```text
//! cargo run --release --example ablation -- results/ablation [epochs]
//! ```
//!
//! Finished runs are kept in `<out>/<policy>-seed<k>.json` and skipped on
//! restart. `summary.json` is rewritten after every run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use pointspot::dataset::{Dataset, Sample};
use pointspot::decode::DecodeConfig;
use pointspot::eval::EvalConfig;
use pointspot::model::{ModelConfig, TransmissionPolicy};
use pointspot::pipeline::evaluate_weights;
use pointspot::synth::{render_scene, scene_seed, SceneSpec};
use pointspot::train::{AugmentConfig, EvalSet, FitOptions, Schedule, TrainConfig, Trainer};

const TRAIN_SCENES: usize = 2000;
const TEST_SCENES: usize = 200;
const SEEDS: [u64; 3] = [0, 1, 2];
const POLICIES: [TransmissionPolicy; 3] = [TransmissionPolicy::TokenFeat, TransmissionPolicy::Token, TransmissionPolicy::Feat];

#[derive(Serialize, Deserialize)]
struct Run {
    policy: TransmissionPolicy,
    seed: u64,
    precision: f64,
    recall: f64,
    hmean: f64,
    steps: u64,
    seconds: f64,
}

#[derive(Serialize)]
struct Recipe {
    scenes: SceneSpec,
    model: ModelConfig,
    train: TrainConfig,
    train_scenes: usize,
    test_scenes: usize,
}

fn scenes() -> SceneSpec {
    SceneSpec {
        side: 64,
        instances: [1, 2],
        scale: [2.0, 2.5],
        rotation: 5.0,
        curvature: [0.0, 0.01],
        min_separation: 4.0,
        word_len: [1, 3],
        charset: "0123456789".into(),
        n_bins: 64,
        ..Default::default()
    }
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr: Schedule { peak: 1e-3, floor: 1e-5, warmup: 200 },
        augmentation: AugmentConfig { scale: [0.9, 1.1], rotation: 5.0 },
        eval_every: 5,
        ..Default::default()
    }
}

fn dataset(spec: &SceneSpec, base: u64, n: usize) -> Dataset {
    let samples = (0..n)
        .map(|i| {
            let s = render_scene(spec, scene_seed(base, i)).expect("scene renders");
            Sample { name: format!("{:06}", i), image: s.image, instances: s.instances }
        })
        .collect();
    Dataset { samples }
}

fn run_name(policy: TransmissionPolicy, seed: u64) -> String {
    let p = serde_json::to_value(policy).unwrap();
    format!("{}-seed{}", p.as_str().unwrap(), seed)
}

fn write_summary(out: &Path, recipe: &Recipe, runs: &[Run]) {
    let mut seeds = Vec::new();
    let mut held = 0;
    for &seed in &SEEDS {
        let f = |p| runs.iter().find(|r| r.seed == seed && r.policy == p).map(|r| r.hmean);
        let (Some(both), Some(token), Some(feat)) = (f(TransmissionPolicy::TokenFeat), f(TransmissionPolicy::Token), f(TransmissionPolicy::Feat))
        else {
            continue;
        };
        held += usize::from(both > token && both > feat);
        seeds.push(serde_json::json!({
            "seed": seed,
            "hmean": { "token+feat": both, "token": token, "feat": feat },
        }));
    }
    let summary = serde_json::json!({
        "recipe": recipe,
        "seeds": seeds,
        "ordering_holds": held,
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap()).unwrap();
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("results/ablation"));
    let epochs: usize = args.get(2).map(|s| s.parse().expect("epochs is a number")).unwrap_or(30);
    fs::create_dir_all(&out).unwrap();

    let spec = scenes();
    let model = ModelConfig { charset: spec.charset.clone(), ..ModelConfig::small() };
    let recipe = Recipe { scenes: spec.clone(), model: model.clone(), train: train_config(epochs), train_scenes: TRAIN_SCENES, test_scenes: TEST_SCENES };
    let train = dataset(&spec, 1, TRAIN_SCENES);
    let test = dataset(&spec, 2, TEST_SCENES);
    let decode = DecodeConfig { max_instances: model.max_instances, max_chars: model.max_chars, ..Default::default() };

    let mut runs = Vec::new();
    for &seed in &SEEDS {
        for policy in POLICIES {
            let name = run_name(policy, seed);
            let record = out.join(format!("{}.json", name));
            if let Ok(text) = fs::read_to_string(&record) {
                runs.push(serde_json::from_str::<Run>(&text).unwrap());
                log::info!("{}: recorded", name);
                continue;
            }
            let start = Instant::now();
            let cfg = TrainConfig { seed, transmission: Some(policy), ..train_config(epochs) };
            let mut t = Trainer::new(&model, cfg).unwrap();
            let opts = FitOptions {
                eval: Some(EvalSet { data: &test, decode: decode.clone(), eval: EvalConfig::default() }),
                out_dir: Some(out.join(&name)),
                max_steps: None,
            };
            t.fit(&train, &opts).unwrap();
            let (r, _) = evaluate_weights(&t.weights, &test, &decode, &EvalConfig::default()).unwrap();
            let run = Run {
                policy,
                seed,
                precision: r.precision,
                recall: r.recall,
                hmean: r.hmean,
                steps: t.step,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!("{}: P {:.3} R {:.3} F {:.3} in {:.0}s", name, run.precision, run.recall, run.hmean, run.seconds);
            fs::write(&record, serde_json::to_string_pretty(&run).unwrap()).unwrap();
            runs.push(run);
            write_summary(&out, &recipe, &runs);
        }
    }
    write_summary(&out, &recipe, &runs);
}
