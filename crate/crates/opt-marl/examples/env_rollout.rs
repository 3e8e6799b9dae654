//! Samples one task per split and rolls a random policy, rendering the grid
//! as ASCII each step for the train-split episode.
//!
//!     cargo run --example env_rollout [seed]

use opt_marl::env::{
    self, ScenarioConfig, Split, WorldState, ACT_CAPTURE, N_ACTIONS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn render(state: &WorldState) -> String {
    let t = &state.task;
    let mut grid = vec![vec!['.'; t.grid_w]; t.grid_h];
    for (e, &(x, y)) in state.positions.iter().enumerate() {
        let c = if e < t.n_agents {
            (b'A' + e as u8) as char
        } else if e < t.n_agents + t.n_prey {
            if state.prey_alive[e - t.n_agents] {
                'p'
            } else {
                continue;
            }
        } else {
            '#'
        };
        grid[y as usize][x as usize] = c;
    }
    grid.iter()
        .map(|row| row.iter().collect::<String>())
        .collect::<Vec<_>>()
        .join("\n")
}

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7);
    let cfg = ScenarioConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let m = cfg.max_entities();

    for split in [
        Split::Train,
        Split::UnseenCapability,
        Split::UnseenScale,
        Split::UnseenBoth,
    ] {
        let task = env::sample_task(split, &cfg, &mut rng).unwrap();
        println!(
            "{split:?}: {} agents (attack {}), {} prey (defense {}), {} obstacles",
            task.n_agents, task.attack_cap, task.n_prey, task.defense_cap, task.n_obstacles
        );
    }

    println!("\nrandom-policy rollout on a train-split task:");
    let task = env::sample_task(Split::Train, &cfg, &mut rng).unwrap();
    let (mut state, mut obs) = env::reset(&task, m, &mut rng).unwrap();
    let mut total = 0.0;
    while !state.done {
        println!("\nt = {}\n{}", state.step, render(&state));
        let actions: Vec<usize> = obs
            .iter()
            .map(|o| loop {
                let a = rng.gen_range(0..N_ACTIONS);
                if o.available_actions[a] {
                    break a;
                }
            })
            .collect();
        let captures = actions.iter().filter(|&&a| a == ACT_CAPTURE).count();
        let r = env::step(&mut state, &actions, &cfg, m, &mut rng).unwrap();
        total += r.reward;
        if captures > 0 || r.captures > 0 {
            println!(
                "{} capture attempts, {} prey captured, reward {:+.2}",
                captures, r.captures, r.reward
            );
        }
        obs = r.observations;
    }
    println!("\nfinal\n{}", render(&state));
    println!(
        "episode over after {} steps: return {:.2}, win = {}",
        state.step,
        total,
        state.live_prey() == 0
    );
}
