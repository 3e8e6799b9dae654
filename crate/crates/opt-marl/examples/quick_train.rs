//! Short end-to-end training run on a shrunken scenario: collects episodes,
//! takes gradient steps, evaluates on all four splits, and writes metrics +
//! a checkpoint under /tmp.
//!
//!     cargo run --release --example quick_train [env_steps]

use std::path::PathBuf;

use opt_marl::config::RunConfig;
use opt_marl::env::RangePair;
use opt_marl::trainer::Trainer;

fn main() {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(6000);
    let mut cfg = RunConfig::default();
    cfg.model.n_layers = 1;
    cfg.model.n_prototypes = 2;
    cfg.model.d_x = 12;
    cfg.model.d_h = 12;
    cfg.model.d_mix = 8;
    cfg.env.grid_w = 5;
    cfg.env.grid_h = 5;
    cfg.env.sight_range = 2;
    cfg.env.horizon = 30;
    cfg.env.n_agents = RangePair { train: (2, 2), unseen: (3, 3) };
    cfg.env.n_prey = RangePair { train: (1, 1), unseen: (2, 2) };
    cfg.env.n_obstacles = RangePair { train: (0, 1), unseen: (0, 1) };
    cfg.train.total_env_steps = steps;
    cfg.train.batch_episodes = 16;
    cfg.train.buffer_episodes = 200;
    cfg.train.epsilon_anneal_steps = steps / 2;
    cfg.train.eval_interval = steps / 4;
    cfg.train.eval_episodes = 16;

    let out = PathBuf::from("/tmp/opt-marl-quick-train");
    let start = std::time::Instant::now();
    let mut trainer = Trainer::new(cfg).unwrap();
    let summary = trainer.run(&out).unwrap();
    println!(
        "trained for {} env steps / {} gradient steps in {:.1?}",
        summary.env_steps,
        summary.grad_steps,
        start.elapsed()
    );
    for (split, s) in &summary.final_eval {
        println!(
            "{split:?}: win_rate {:.2}, capture_rate {:.2}, mean_return {:+.2}",
            s.win_rate, s.capture_rate, s.mean_return
        );
    }
    println!("metrics + final.ckpt written to {}", out.display());
}
