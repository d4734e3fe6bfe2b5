//! Quick pilot for training convergence. Run with:
//! cargo run --release -p cvr-core --example train_pilot

use std::time::Instant;

use cvr_core::episode::EpisodeConfig;
use cvr_core::grpo::train::{train, TrainOptions};
use cvr_core::grpo::GrpoConfig;
use cvr_core::script::generate::{generate_template_script, GeneratorKnobs, ScriptFamily};

fn main() {
    let corpus: Vec<_> = (0..10)
        .map(|seed| {
            generate_template_script(ScriptFamily::ChoiceBehavior, seed, &GeneratorKnobs::default())
                .unwrap()
        })
        .collect();
    for lr in [0.2, 0.5, 1.0, 2.0] {
        for seed in 0..5u64 {
            let grpo = GrpoConfig {
                learning_rate: lr,
                iterations: 500,
                ..GrpoConfig::default()
            };
            let options = TrainOptions {
                seed,
                stop_at_mean_reward: Some(0.9),
                ..TrainOptions::default()
            };
            let started = Instant::now();
            let outcome = train(&corpus, &grpo, &EpisodeConfig::default(), &options).unwrap();
            let rows = &outcome.history.rows;
            let last = rows.last().unwrap();
            let first = rows.first().unwrap();
            println!(
                "lr {lr:>4} seed {seed}: iters {:>3} | mean_r {:.3} | entropy {:.3} -> {:.3} | kl {:.5} | {:?}",
                rows.len(),
                last.mean_r_total,
                first.entropy,
                last.entropy,
                last.kl_to_ref,
                started.elapsed(),
            );
        }
    }
}
