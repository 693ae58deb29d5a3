//! Desk-scale run: synthesise, train the tiny model, report retrieval.
//!
//! `cargo run --release --example desk -- [seed] [iterations]`

use std::time::Instant;

use mtsgait::backbone::{Model, ModelConfig, Preset};
use mtsgait::data::{load_sequences, scan, split, synth_generate, Protocol, Split, SynthConfig};
use mtsgait::mts::MtsConfig;
use mtsgait::retrieval::{evaluate, Metric};
use mtsgait::sampling::{BatchSpec, SamplerConfig};
use mtsgait::trainer::{train, OptimState, TrainConfig, TrainPreset, TrainSetup};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().unwrap());
    let iters: usize = args.get(2).map_or(2000, |s| s.parse().unwrap());
    let dir = std::env::temp_dir().join(format!("mtsgait-desk-{seed}"));
    let _ = std::fs::remove_dir_all(&dir);
    synth_generate(
        &SynthConfig {
            subjects: 8,
            seqs_per_subject: 4,
            frames: 32,
            min_frames: None,
            seed: 7 + seed,
        },
        &dir,
    )
    .unwrap();
    let index = scan(&dir).unwrap();
    let protocol = Protocol::HeldOut { per_subject: 1 };
    let train_items = split(&index, protocol, Split::Train).unwrap();
    let probe_items = split(&index, protocol, Split::Probe).unwrap();
    let train_set = load_sequences(&index, &train_items, 720).unwrap();
    let probe_set = load_sequences(&index, &probe_items, 720).unwrap();

    let mut cfg = ModelConfig::preset(Preset::Tiny, Some(MtsConfig::default()));
    cfg.head.num_classes = 8;
    let mut model = Model::build(cfg, seed).unwrap();
    let mut tc = TrainConfig::preset(TrainPreset::Desk);
    tc.iterations = iters;
    tc.log_every = 200;
    let setup = TrainSetup {
        train: tc,
        sampler: SamplerConfig {
            frames: 8,
            ..SamplerConfig::default()
        },
        batch: BatchSpec { p: 4, k: 4 },
        loss: Default::default(),
        seed,
        out_dir: None,
    };
    let t0 = Instant::now();
    let state = OptimState::new(&model);
    let s = train(&mut model, &train_set, &setup, state, 0).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let gallery = model.embed_all(&train_set).unwrap();
    let probe = model.embed_all(&probe_set).unwrap();
    let loo = evaluate(&gallery, &gallery, Metric::Euclidean, &[1, 5]).unwrap();
    let held = evaluate(&probe, &gallery, Metric::Euclidean, &[1, 5]).unwrap();
    println!(
        "seed {seed} iters {iters} {:.1}s ({:.1} ms/it) last loss {:.4} | train r1 {:.1} | held-out r1 {:.1} map {:.1}",
        secs,
        1e3 * secs / iters as f64,
        s.curve.last().unwrap().total,
        loo.rank(1).unwrap(),
        held.rank(1).unwrap(),
        held.map
    );
}
