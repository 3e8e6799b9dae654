//! Monotone mixing network: the global state runs through its own attention
//! stack, and a hypernetwork on the pooled state emits nonnegative mixing
//! weights for a two-layer combination of the per-agent chosen-action values.
//! An additive (VDN) variant is kept as an ablation backbone.

use ndarray::Array2;

use crate::error::{OptError, Result};
use crate::model::opt_block::{self, OptStackOutput};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tape::{BlockMask, NodeId, Tape};

pub struct MixerOut {
    /// Joint value, (B, 1).
    pub q_tot: NodeId,
    /// Per-layer per-block contrastive disagreement, each (B, 1).
    pub cd_blocks: Vec<NodeId>,
    /// Attention matrices per layer / prototype.
    pub prototypes: Vec<Vec<NodeId>>,
}

/// QMIX-style monotone mix of `agent_qs` (B, max_agents) under the global
/// state (B blocks of M entity rows). Absent agents must carry q = 0.
pub fn mixer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    trainable: bool,
    cfg: &ModelConfig,
    state: &Array2<f64>,
    mask: &BlockMask,
    agent_qs: NodeId,
) -> MixerOut {
    let keep = opt_block::keep_rows(mask, cfg.max_entities);
    let raw = tape.constant(state.clone());
    let x = opt_block::embed_entities(tape, store, "mix", trainable, raw, keep.clone());
    let OptStackOutput { y, layers, .. } =
        opt_block::opt_stack(tape, store, "mix", trainable, cfg, x, mask, &keep);
    let pooled = tape.mean_pool_blocks(y, mask.clone(), cfg.max_entities);

    let affine = |tape: &mut Tape, name: &str| -> NodeId {
        let w = store.leaf(tape, &format!("mix.hyper.{name}.w"), trainable);
        let b = store.leaf(tape, &format!("mix.hyper.{name}.b"), trainable);
        let out = tape.matmul(pooled, w);
        tape.add_bias(out, b)
    };
    let w1 = affine(tape, "w1");
    let w1 = tape.abs(w1);
    let b1 = affine(tape, "b1");
    let w2 = affine(tape, "w2");
    let w2 = tape.abs(w2);
    let b2 = affine(tape, "b2");

    let hidden = tape.batched_vec_mat(agent_qs, w1, cfg.d_mix);
    let hidden = tape.add(hidden, b1);
    let hidden = tape.elu(hidden);
    let mixed = tape.row_dot(hidden, w2);
    let q_tot = tape.add(mixed, b2);

    let cd_blocks = layers.iter().map(|l| l.cd_blocks).collect();
    let prototypes = layers.into_iter().map(|l| l.prototypes).collect();
    MixerOut {
        q_tot,
        cd_blocks,
        prototypes,
    }
}

/// Additive mixing: Q_tot = sum of the agent values.
pub fn vdn_mix(agent_qs: &[f64]) -> Result<f64> {
    if agent_qs.is_empty() {
        return Err(OptError::InvalidInput("empty agent value vector".into()));
    }
    Ok(agent_qs.iter().sum())
}

/// TD targets from rewards, termination flags and the target network's joint
/// values at the next step: y_t = r_t for terminal steps, else
/// r_t + gamma * Q_tot^target(t+1).
pub fn td_targets(
    rewards: &[f64],
    terminals: &[bool],
    next_target_qtot: &[f64],
    gamma: f64,
) -> Vec<f64> {
    assert_eq!(rewards.len(), terminals.len());
    assert_eq!(rewards.len(), next_target_qtot.len());
    rewards
        .iter()
        .zip(terminals)
        .zip(next_target_qtot)
        .map(|((&r, &term), &qn)| if term { r } else { r + gamma * qn })
        .collect()
}

/// Hard copy of live parameters into the target store.
pub fn sync_target(live: &ParamStore, target: &mut ParamStore) {
    target.copy_from(live);
}
