//! Loads a saved checkpoint and evaluates the greedy policy on all four
//! task splits. With no argument it first trains a small model for a few
//! thousand steps so the example is self-contained.
//!
//!     cargo run --release --example eval_checkpoint [checkpoint.ckpt]

use std::path::PathBuf;

use opt_marl::checkpoint::Checkpoint;
use opt_marl::config::RunConfig;
use opt_marl::env::{RangePair, Split};
use opt_marl::trainer::Trainer;

fn make_checkpoint(path: &PathBuf) {
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
    cfg.train.total_env_steps = 4000;
    cfg.train.batch_episodes = 16;
    cfg.train.buffer_episodes = 200;
    cfg.train.epsilon_anneal_steps = 2000;
    cfg.train.eval_interval = 4000;
    cfg.train.eval_episodes = 8;
    println!("no checkpoint given; training a small model first...");
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.run(&PathBuf::from("/tmp/opt-marl-eval-example")).unwrap();
    trainer.checkpoint().save(path).unwrap();
}

fn main() {
    let path = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let p = PathBuf::from("/tmp/opt-marl-eval-example/final.ckpt");
            make_checkpoint(&p);
            p
        }
    };
    let ck = Checkpoint::load(&path).unwrap();
    println!(
        "loaded {} ({} env steps, {} gradient steps, {} parameters)\n",
        path.display(),
        ck.env_steps,
        ck.grad_steps,
        ck.params.len()
    );
    let trainer = Trainer::from_checkpoint(ck).unwrap();
    println!("{:<18} {:>8} {:>12} {:>12} {:>12}", "split", "win", "capture", "return", "length");
    for split in [
        Split::Train,
        Split::UnseenCapability,
        Split::UnseenScale,
        Split::UnseenBoth,
    ] {
        let s = trainer.evaluate(split, 64, 1234).unwrap();
        println!(
            "{:<18} {:>8.3} {:>12.3} {:>12.3} {:>12.1}",
            format!("{split:?}"),
            s.win_rate,
            s.capture_rate,
            s.mean_return,
            s.mean_length
        );
    }
}
