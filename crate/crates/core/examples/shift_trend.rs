//! Joint vs meta vs meta+TTT test MSLE on shifted synthetic data, per seed.
//!
//! Usage: `shift_trend [key=value ...]` with keys `seeds`, `dim`, `joint_epochs`,
//! `meta_epochs`, `inner_lr`, `inner_steps`, `meta_lr`, `lr`, `gamma`.

use difftt_core::data::{generate_synthetic, Dataset, SynthConfig};
use difftt_core::model::{ModelConfig, ModelState};
use difftt_core::train::*;

fn main() {
    let mut seeds = 5u64;
    let mut dim = 16usize;
    let mut cfg = TrainConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        match k {
            "seeds" => seeds = v.parse().unwrap(),
            "dim" => dim = v.parse().unwrap(),
            "joint_epochs" => cfg.joint_epochs = v.parse().unwrap(),
            "meta_epochs" => cfg.meta_epochs = v.parse().unwrap(),
            "inner_lr" => cfg.inner_lr = v.parse().unwrap(),
            "inner_steps" => cfg.inner_steps = v.parse().unwrap(),
            "meta_lr" => cfg.meta_lr = v.parse().unwrap(),
            "lr" => cfg.lr = v.parse().unwrap(),
            "gamma" => cfg.gamma = v.parse().unwrap(),
            _ => panic!("unknown key {k}"),
        }
    }
    let results: Vec<String> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..seeds)
            .map(|seed| {
                let cfg = TrainConfig { seed, ..cfg.clone() };
                s.spawn(move || run(seed, dim, &cfg))
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        println!("{r}");
    }
}

fn run(seed: u64, dim: usize, cfg: &TrainConfig) -> String {
    let synth = SynthConfig {
        shift_fraction: 0.1,
        shift_factor: 0.5,
        hub_dropout_k: 5,
        seed,
        ..SynthConfig::default()
    };
    let (graph, cascades) = generate_synthetic(&synth).unwrap();
    let ds = Dataset::identity_labeled(graph, cascades);
    let corpus = Corpus::new(&ds, DEFAULT_SPLIT, DEFAULT_INTERVALS, DEFAULT_OBSERVED_FRACTION).unwrap();
    let mut state = ModelState::new(ModelConfig::new(ds.num_users(), dim), seed).unwrap();
    let t = std::time::Instant::now();
    joint_train(&mut state, &corpus, cfg).unwrap();
    let opts = EvalOptions::default();
    let tables = state.user_tables(&corpus.graph, &corpus.ops).unwrap();
    let joint = evaluate(&state, &tables, &corpus.test, None, &opts).unwrap().msle;
    let jt = t.elapsed().as_secs_f64();
    let rep = meta_train(&mut state, &corpus, cfg).unwrap();
    let mt = t.elapsed().as_secs_f64();
    let tables = state.user_tables(&corpus.graph, &corpus.ops).unwrap();
    let msle = |steps: usize| {
        let ttt = TttSettings { steps, lr: cfg.inner_lr, seed };
        evaluate(&state, &tables, &corpus.test, Some(&ttt), &opts).unwrap().msle
    };
    let m: Vec<f64> = (0..=4).map(msle).collect();
    let a = m[cfg.inner_steps] <= m[0] && m[0] <= joint;
    let b = m[cfg.inner_steps] < m[0] && m[cfg.inner_steps] < m[(cfg.inner_steps + 2).min(4)];
    format!(
        "seed {seed}: joint {joint:.6} meta {:.6} ttt-delta {:?} best_meta_epoch {:?} ({jt:.0}s/{mt:.0}s) order {a} delta {b}",
        m[0],
        m.iter().map(|x| format!("{:+.2e}", x - m[0])).collect::<Vec<_>>(),
        rep.best_epoch
    )
}
