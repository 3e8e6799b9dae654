//! Per-agent utility network: observation embedding, stacked attention
//! layers, GRU over time, action-value head, and epsilon-greedy selection.
//! All agents share one parameter set; identity enters through the self flag
//! in the observation features.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::error::{OptError, Result};
use crate::model::opt_block::{self, OptStackOutput};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tape::{BlockMask, NodeId, Tape};

/// Sentinel for unavailable actions; low enough to never win an argmax over
/// finite q-values.
pub const UNAVAILABLE_Q: f64 = -1e10;

/// One batched utility step. Blocks stack (batch x agent) sites.
pub struct UtilityStep {
    /// Action values, (BA, n_actions); availability not yet applied.
    pub q: NodeId,
    /// Next hidden state, (BA, d_h).
    pub h: NodeId,
    /// First-layer aggregation weights, (BA, N).
    pub omega: NodeId,
    /// Per-site KL between the aggregator and the history posterior, (BA, 1).
    pub cmi_blocks: NodeId,
    /// Per-layer per-block contrastive disagreement, each (BA, 1).
    pub cd_blocks: Vec<NodeId>,
    /// Attention matrices per layer / prototype, for inspection dumps.
    pub prototypes: Vec<Vec<NodeId>>,
}

/// Forward pass over a batch of observations.
///
/// `obs` stacks BA blocks of M entity-feature rows; `self_rows` gives, per
/// block, the absolute row index of the observing agent's own entity.
pub fn utility_forward(
    tape: &mut Tape,
    store: &ParamStore,
    trainable: bool,
    cfg: &ModelConfig,
    obs: &Array2<f64>,
    mask: &BlockMask,
    self_rows: Rc<Vec<usize>>,
    h_prev: NodeId,
) -> UtilityStep {
    let keep = opt_block::keep_rows(mask, cfg.max_entities);
    let raw = tape.constant(obs.clone());
    let x = opt_block::embed_entities(tape, store, "util", trainable, raw, keep.clone());
    let OptStackOutput {
        y,
        pooled_embed,
        layers,
    } = opt_block::opt_stack(tape, store, "util", trainable, cfg, x, mask, &keep);

    // recurrent update on the pooled pattern
    let pooled_y = tape.mean_pool_blocks(y, mask.clone(), cfg.max_entities);
    let h = gru_cell(tape, store, trainable, pooled_y, h_prev);

    // action head reads the agent's own entity row plus the history state
    let y_self = tape.gather_rows(y, self_rows);
    let head_in = tape.concat_cols(h, y_self);
    let w = store.leaf(tape, "util.head.w", trainable);
    let b = store.leaf(tape, "util.head.b", trainable);
    let q = tape.matmul(head_in, w);
    let q = tape.add_bias(q, b);

    // history posterior over the first layer's aggregation weights
    let omega = layers[0].omega;
    let psi_in = tape.concat_cols(h_prev, pooled_embed);
    let wp = store.leaf(tape, "util.psi.w", trainable);
    let bp = store.leaf(tape, "util.psi.b", trainable);
    let psi_logits = tape.matmul(psi_in, wp);
    let psi_logits = tape.add_bias(psi_logits, bp);
    let q_post = tape.softmax_rows(psi_logits, None, cfg.n_prototypes);
    let cmi_blocks = kl_rows(tape, omega, q_post, cfg.kl_clamp);

    let cd_blocks = layers.iter().map(|l| l.cd_blocks).collect();
    let prototypes = layers.into_iter().map(|l| l.prototypes).collect();
    UtilityStep {
        q,
        h,
        omega,
        cmi_blocks,
        cd_blocks,
        prototypes,
    }
}

/// Row-wise KL(p || q) with the crate-wide clamp on q, (B, N) -> (B, 1).
fn kl_rows(tape: &mut Tape, p: NodeId, q: NodeId, clamp: f64) -> NodeId {
    let ln_p = tape.ln_clamped(p, clamp);
    let ln_q = tape.ln_clamped(q, clamp);
    let diff = tape.sub(ln_p, ln_q);
    let terms = tape.mul(p, diff);
    tape.sum_cols(terms)
}

fn gru_cell(
    tape: &mut Tape,
    store: &ParamStore,
    trainable: bool,
    x: NodeId,
    h_prev: NodeId,
) -> NodeId {
    let gate = |tape: &mut Tape, name: &str, x: NodeId, h: NodeId| -> NodeId {
        let w = store.leaf(tape, &format!("util.gru.w{name}"), trainable);
        let u = store.leaf(tape, &format!("util.gru.u{name}"), trainable);
        let b = store.leaf(tape, &format!("util.gru.b{name}"), trainable);
        let xa = tape.matmul(x, w);
        let ha = tape.matmul(h, u);
        let s = tape.add(xa, ha);
        tape.add_bias(s, b)
    };
    let z = gate(tape, "z", x, h_prev);
    let z = tape.sigmoid(z);
    let r = gate(tape, "r", x, h_prev);
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h_prev);
    let hc = gate(tape, "h", x, rh);
    let hc = tape.tanh(hc);
    let zc = tape.one_minus(z);
    let keep_old = tape.mul(zc, h_prev);
    let take_new = tape.mul(z, hc);
    tape.add(keep_old, take_new)
}

/// Epsilon-greedy over available actions. Greedy ties break to the lowest
/// index.
pub fn select_action<R: Rng>(
    q: &[f64],
    available: &[bool],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    let avail: Vec<usize> = (0..q.len()).filter(|&i| available[i]).collect();
    if avail.is_empty() {
        return Err(OptError::InvalidInput("no available action".into()));
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(avail[rng.gen_range(0..avail.len())]);
    }
    Ok(greedy_action(q, available))
}

/// Masked argmax with lowest-index tie breaking.
pub fn greedy_action(q: &[f64], available: &[bool]) -> usize {
    let mut best = usize::MAX;
    let mut best_q = f64::NEG_INFINITY;
    for i in 0..q.len() {
        let v = if available[i] { q[i] } else { UNAVAILABLE_Q };
        if available[i] && v > best_q {
            best_q = v;
            best = i;
        }
    }
    best
}

/// Linear anneal from `start` to `end` over `anneal_steps` environment steps.
pub fn epsilon_schedule(env_step: u64, start: f64, end: f64, anneal_steps: u64) -> f64 {
    if anneal_steps == 0 || env_step >= anneal_steps {
        return end;
    }
    start + (end - start) * (env_step as f64 / anneal_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, MixerKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_prototypes: 2,
            d_x: 4,
            d_h: 4,
            d_mix: 4,
            d_e: 3,
            max_entities: 3,
            n_actions: 6,
            max_agents: 2,
            activation: Activation::Sparsemax,
            mixer: MixerKind::Qmix,
            kl_clamp: 1e-8,
        }
    }

    fn forward_once(store: &ParamStore, obs: &Array2<f64>, mask: BlockMask) -> (Vec<f64>, Vec<f64>) {
        let c = cfg();
        let mut tape = Tape::new();
        let h0 = tape.constant(Array2::zeros((1, c.d_h)));
        let step = utility_forward(
            &mut tape,
            store,
            false,
            &c,
            obs,
            &mask,
            Rc::new(vec![0]),
            h0,
        );
        (
            tape.value(step.q).iter().cloned().collect(),
            tape.value(step.h).iter().cloned().collect(),
        )
    }

    #[test]
    fn zero_parameters_give_constant_action_values() {
        let c = cfg();
        let store = ParamStore::zeros(c.build_layout());
        let obs = Array2::from_shape_fn((3, 3), |(i, j)| (i + j) as f64 * 0.2);
        let (q, _) = forward_once(&store, &obs, Rc::new(vec![vec![true; 3]]));
        for v in &q {
            assert_eq!(*v, q[0]);
        }
        assert_eq!(greedy_action(&q, &[true; 6]), 0, "tie broken to lowest index");
    }

    #[test]
    fn deterministic_given_parameters_and_inputs() {
        let c = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let store = ParamStore::init_uniform(c.build_layout(), &mut rng);
        let obs = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.4);
        let mask: BlockMask = Rc::new(vec![vec![true, true, false]]);
        let (q1, h1) = forward_once(&store, &obs, mask.clone());
        let (q2, h2) = forward_once(&store, &obs, mask);
        assert_eq!(q1, q2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn permuting_invisible_entities_preserves_forward() {
        // swapping two non-self entity rows permutes attention symmetrically;
        // the pooled path and the self row are unchanged, so q is unchanged
        let c = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let store = ParamStore::init_uniform(c.build_layout(), &mut rng);
        let obs = Array2::from_shape_vec(
            (3, 3),
            vec![0.1, 0.2, 1.0, 0.5, -0.3, 0.0, -0.8, 0.9, 0.0],
        )
        .unwrap();
        let mut swapped = obs.clone();
        let tmp = swapped.row(1).to_owned();
        swapped.row_mut(1).assign(&obs.row(2));
        swapped.row_mut(2).assign(&tmp);
        let mask: BlockMask = Rc::new(vec![vec![true; 3]]);
        let (q1, _) = forward_once(&store, &obs, mask.clone());
        let (q2, _) = forward_once(&store, &swapped, mask);
        for (a, b) in q1.iter().zip(&q2) {
            assert!((a - b).abs() < 1e-9, "{q1:?} vs {q2:?}");
        }
    }

    #[test]
    fn select_action_examples() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let q = [1.0, 3.0, 2.0];
        assert_eq!(select_action(&q, &[true; 3], 0.0, &mut rng).unwrap(), 1);
        let q = [5.0, 9.0, 2.0];
        assert_eq!(
            select_action(&q, &[true, false, true], 0.0, &mut rng).unwrap(),
            0
        );
        assert!(select_action(&q, &[false; 3], 0.0, &mut rng).is_err());
    }

    #[test]
    fn epsilon_one_is_uniform_over_available() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let q = [0.0, 100.0, 0.0, 0.0];
        let available = [true, true, false, true];
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            counts[select_action(&q, &available, 1.0, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[2], 0);
        let expected = n as f64 / 3.0;
        let sigma = (expected * (1.0 - 1.0 / 3.0)).sqrt();
        for &i in &[0usize, 1, 3] {
            assert!(
                (counts[i] as f64 - expected).abs() < 3.0 * sigma,
                "counts {counts:?}"
            );
        }
    }

    #[test]
    fn greedy_is_invariant_under_positive_affine_maps() {
        let q = [0.3, -0.9, 2.1, 0.0];
        let available = [true, true, true, false];
        let base = greedy_action(&q, &available);
        let mapped: Vec<f64> = q.iter().map(|v| 3.5 * v + 7.0).collect();
        assert_eq!(greedy_action(&mapped, &available), base);
    }

    #[test]
    fn epsilon_schedule_endpoints_and_midpoint() {
        assert_eq!(epsilon_schedule(0, 1.0, 0.05, 50_000), 1.0);
        assert_eq!(epsilon_schedule(50_000, 1.0, 0.05, 50_000), 0.05);
        assert_eq!(epsilon_schedule(80_000, 1.0, 0.05, 50_000), 0.05);
        assert!((epsilon_schedule(25_000, 1.0, 0.05, 50_000) - 0.525).abs() < 1e-12);
    }
}
