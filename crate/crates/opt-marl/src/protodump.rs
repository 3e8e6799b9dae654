//! Inspection export: greedy rollouts that record, per timestep and
//! attention site, every prototype attention matrix P_n and the aggregation
//! weights omega of each layer, serialized as JSON.

use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{self, Split, TaskSpec};
use crate::error::Result;
use crate::model::{mixer, utility};
use crate::params::ParamStore;
use crate::tape::{BlockMask, Tape};

/// One attention layer at one site: omega over prototypes plus the N
/// attention matrices, each `max_entities` x `max_entities` row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub omega: Vec<f64>,
    pub prototypes: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteRecord {
    /// "agent:<index>" or "mixer".
    pub site: String,
    /// Which of the `max_entities` slots hold a real, visible entity.
    pub entity_mask: Vec<bool>,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub sites: Vec<SiteRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: TaskSpec,
    pub steps: Vec<StepRecord>,
    pub episode_return: f64,
    pub win: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeDump {
    pub split: Split,
    pub n_layers: usize,
    pub n_prototypes: usize,
    pub max_entities: usize,
    pub episodes: Vec<EpisodeRecord>,
}

fn matrix_rows(v: &Array2<f64>, row0: usize, rows: usize) -> Vec<Vec<f64>> {
    (row0..row0 + rows)
        .map(|r| v.row(r).to_vec())
        .collect()
}

/// Runs greedy episodes and records attention internals at every step.
pub fn dump_rollout(
    cfg: &RunConfig,
    store: &ParamStore,
    split: Split,
    n_episodes: usize,
    seed: u64,
) -> Result<PrototypeDump> {
    let mc = cfg.model_config();
    let m = mc.max_entities;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let task = env::sample_task(split, &cfg.env, &mut rng)?;
        let (mut state, mut obs) = env::reset(&task, m, &mut rng)?;
        let na = task.n_agents;
        let mut h = Array2::zeros((na, mc.d_h));
        let mut steps = Vec::new();
        let mut episode_return = 0.0;
        let mut win = false;
        let mut t = 0usize;
        while !state.done {
            let mut tape = Tape::new();
            let mut stacked = Array2::zeros((na * m, mc.d_e));
            let mut mask_blocks = Vec::with_capacity(na);
            let mut self_rows = Vec::with_capacity(na);
            for (a, o) in obs.iter().enumerate() {
                stacked
                    .slice_mut(ndarray::s![a * m..(a + 1) * m, ..])
                    .assign(&o.features);
                mask_blocks.push(o.entity_mask.clone());
                self_rows.push(a * m + a);
            }
            let mask: BlockMask = Rc::new(mask_blocks);
            let h_prev = tape.constant(h.clone());
            let step = utility::utility_forward(
                &mut tape,
                store,
                false,
                &mc,
                &stacked,
                &mask,
                Rc::new(self_rows),
                h_prev,
            );
            let qv = tape.value(step.q).clone();
            h = tape.value(step.h).clone();
            let actions: Vec<usize> = (0..na)
                .map(|a| {
                    utility::greedy_action(&qv.row(a).to_vec(), &obs[a].available_actions)
                })
                .collect();

            let mut sites = Vec::with_capacity(na + 1);
            // only the first layer's omega is retained on the step struct
            // (the CMI regularizer is defined on that layer); report it for
            // every layer
            let omega_v = tape.value(step.omega).clone();
            for a in 0..na {
                let mut layer_recs = Vec::with_capacity(mc.n_layers);
                for protos in step.prototypes.iter() {
                    let omega = omega_v.row(a).to_vec();
                    let prototypes = protos
                        .iter()
                        .map(|&p| matrix_rows(tape.value(p), a * m, m))
                        .collect();
                    layer_recs.push(LayerRecord { omega, prototypes });
                }
                sites.push(SiteRecord {
                    site: format!("agent:{a}"),
                    entity_mask: obs[a].entity_mask.clone(),
                    layers: layer_recs,
                });
            }

            // mixer site on the fully observed state
            let (gstate, gmask) = env::global_state(&state, m);
            let mixer_mask = gmask.clone();
            let mut mtape = Tape::new();
            let zero_q = mtape.constant(Array2::zeros((1, mc.max_agents)));
            let gmask: BlockMask = Rc::new(vec![gmask]);
            let mout =
                mixer::mixer_forward(&mut mtape, store, false, &mc, &gstate, &gmask, zero_q);
            let mut layer_recs = Vec::with_capacity(mc.n_layers);
            for protos in &mout.prototypes {
                let prototypes = protos
                    .iter()
                    .map(|&p| matrix_rows(mtape.value(p), 0, m))
                    .collect();
                layer_recs.push(LayerRecord {
                    omega: Vec::new(),
                    prototypes,
                });
            }
            sites.push(SiteRecord {
                site: "mixer".into(),
                entity_mask: mixer_mask,
                layers: layer_recs,
            });

            let result = env::step(&mut state, &actions, &cfg.env, m, &mut rng)?;
            episode_return += result.reward;
            win = result.win;
            steps.push(StepRecord {
                t,
                actions,
                reward: result.reward,
                sites,
            });
            obs = result.observations;
            t += 1;
        }
        episodes.push(EpisodeRecord {
            task,
            steps,
            episode_return,
            win,
        });
    }
    Ok(PrototypeDump {
        split,
        n_layers: mc.n_layers,
        n_prototypes: mc.n_prototypes,
        max_entities: m,
        episodes,
    })
}

/// Counts `(exact_zeros, total)` over attention entries whose row and column
/// both index real, visible entities. Padded slots are excluded so the count
/// reflects the activation, not the mask.
pub fn attention_sparsity(dump: &PrototypeDump) -> (usize, usize) {
    let mut zeros = 0;
    let mut total = 0;
    for ep in &dump.episodes {
        for step in &ep.steps {
            for site in &step.sites {
                let valid = &site.entity_mask;
                for layer in &site.layers {
                    for proto in &layer.prototypes {
                        for (r, row) in proto.iter().enumerate() {
                            if !valid[r] {
                                continue;
                            }
                            for (c, &v) in row.iter().enumerate() {
                                if valid[c] {
                                    total += 1;
                                    if v == 0.0 {
                                        zeros += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (zeros, total)
}

pub fn to_json(dump: &PrototypeDump) -> Result<String> {
    serde_json::to_string_pretty(dump)
        .map_err(|e| crate::error::OptError::InvalidState(format!("serialize dump: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.n_layers = 1;
        cfg.model.n_prototypes = 2;
        cfg.model.d_x = 4;
        cfg.model.d_h = 4;
        cfg.model.d_mix = 4;
        cfg.env.grid_w = 5;
        cfg.env.grid_h = 5;
        cfg.env.horizon = 5;
        cfg
    }

    #[test]
    fn dump_shapes_and_simplex_rows() {
        let cfg = small_run_config();
        let mc = cfg.model_config();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let store = ParamStore::init_uniform(mc.build_layout(), &mut rng);
        let dump = dump_rollout(&cfg, &store, Split::Train, 2, 7).unwrap();
        assert_eq!(dump.episodes.len(), 2);
        assert_eq!(dump.n_prototypes, 2);
        for ep in &dump.episodes {
            assert!(!ep.steps.is_empty());
            for step in &ep.steps {
                assert_eq!(step.sites.len(), ep.task.n_agents + 1);
                assert_eq!(step.sites.last().unwrap().site, "mixer");
                for site in &step.sites {
                    assert_eq!(site.layers.len(), 1);
                    for layer in &site.layers {
                        assert_eq!(layer.prototypes.len(), 2);
                        for p in &layer.prototypes {
                            assert_eq!(p.len(), dump.max_entities);
                            for row in p {
                                assert_eq!(row.len(), dump.max_entities);
                                let s: f64 = row.iter().sum();
                                // rows are either on the simplex or all-zero
                                // (masked / padded entities)
                                assert!(
                                    (s - 1.0).abs() < 1e-9 || s == 0.0,
                                    "row sum {s}"
                                );
                                assert!(row.iter().all(|&v| v >= 0.0));
                            }
                        }
                        if !layer.omega.is_empty() {
                            let s: f64 = layer.omega.iter().sum();
                            assert!((s - 1.0).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dump_is_seed_deterministic_and_json_roundtrips() {
        let cfg = small_run_config();
        let mc = cfg.model_config();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let store = ParamStore::init_uniform(mc.build_layout(), &mut rng);
        let d1 = dump_rollout(&cfg, &store, Split::Train, 1, 3).unwrap();
        let d2 = dump_rollout(&cfg, &store, Split::Train, 1, 3).unwrap();
        let j1 = to_json(&d1).unwrap();
        let j2 = to_json(&d2).unwrap();
        assert_eq!(j1, j2);
        let back: PrototypeDump = serde_json::from_str(&j1).unwrap();
        assert_eq!(back.episodes.len(), 1);
        assert_eq!(back.episodes[0].steps.len(), d1.episodes[0].steps.len());
    }
}
