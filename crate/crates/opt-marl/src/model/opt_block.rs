//! The prototype-attention block: entity embedding, per-prototype QKV
//! projection, sparse attention, contrastive disagreement, aggregation and
//! restructuring, stacked K times with residual feed-forward layers.
//!
//! All functions operate on batched entity tensors of shape (B*M, d) where
//! each block of M rows is one attention site (one agent's observation, or
//! one global state).

use std::rc::Rc;

use crate::model::{Activation, ModelConfig};
use crate::params::ParamStore;
use crate::tape::{BlockMask, NodeId, Tape};

/// Per-layer artifacts kept for losses and inspection.
pub struct LayerOutput {
    /// Attention matrices P_n, each (B*M, M).
    pub prototypes: Vec<NodeId>,
    /// Aggregation weights, (B, N).
    pub omega: NodeId,
    /// Per-block contrastive disagreement values, (B, 1).
    pub cd_blocks: NodeId,
}

pub struct OptStackOutput {
    /// Final entity representation, (B*M, d_x).
    pub y: NodeId,
    /// Mean-pooled input embedding of the first layer, (B, d_x).
    pub pooled_embed: NodeId,
    pub layers: Vec<LayerOutput>,
}

/// Keep-mask over stacked rows derived from per-block entity masks.
pub fn keep_rows(mask: &BlockMask, block: usize) -> Rc<Vec<bool>> {
    let mut keep = Vec::with_capacity(mask.len() * block);
    for bm in mask.iter() {
        keep.extend_from_slice(bm);
    }
    Rc::new(keep)
}

/// Entity-wise embedding: relu(raw . W + b), padded rows forced to zero.
pub fn embed_entities(
    tape: &mut Tape,
    store: &ParamStore,
    site: &str,
    trainable: bool,
    raw: NodeId,
    keep: Rc<Vec<bool>>,
) -> NodeId {
    let w = store.leaf(tape, &format!("{site}.embed.w"), trainable);
    let b = store.leaf(tape, &format!("{site}.embed.b"), trainable);
    let x = tape.matmul(raw, w);
    let x = tape.add_bias(x, b);
    let x = tape.relu(x);
    tape.zero_rows(x, keep)
}

/// One disentangling pass: per-prototype QKV projection and row-normalized
/// attention. Returns (P_n, P_n V_n) pairs.
pub fn disentangle(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    trainable: bool,
    cfg: &ModelConfig,
    x: NodeId,
    mask: &BlockMask,
    keep: &Rc<Vec<bool>>,
) -> (Vec<NodeId>, Vec<NodeId>) {
    let m = cfg.max_entities;
    let scale = 1.0 / (cfg.d_x as f64).sqrt();
    let mut protos = Vec::with_capacity(cfg.n_prototypes);
    let mut pvs = Vec::with_capacity(cfg.n_prototypes);
    for p in 0..cfg.n_prototypes {
        let wq = store.leaf(tape, &format!("{prefix}.p{p}.wq"), trainable);
        let wk = store.leaf(tape, &format!("{prefix}.p{p}.wk"), trainable);
        let wv = store.leaf(tape, &format!("{prefix}.p{p}.wv"), trainable);
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let scores = tape.block_mat_nt(q, k, m);
        let scaled = tape.scale(scores, scale);
        let attn = match cfg.activation {
            Activation::Sparsemax => tape.sparsemax_rows(scaled, Some(mask.clone()), m),
            Activation::Softmax => tape.softmax_rows(scaled, Some(mask.clone()), m),
        };
        let attn = tape.zero_rows(attn, keep.clone());
        let pv = tape.block_mat(attn, v, m);
        protos.push(attn);
        pvs.push(pv);
    }
    (protos, pvs)
}

/// Aggregation weights from the mean-pooled embedding: softmax(affine(x_bar)).
pub fn aggregate_weights(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    trainable: bool,
    cfg: &ModelConfig,
    x: NodeId,
    mask: &BlockMask,
) -> (NodeId, NodeId) {
    let pooled = tape.mean_pool_blocks(x, mask.clone(), cfg.max_entities);
    let w = store.leaf(tape, &format!("{prefix}.agg.w"), trainable);
    let b = store.leaf(tape, &format!("{prefix}.agg.b"), trainable);
    let logits = tape.matmul(pooled, w);
    let logits = tape.add_bias(logits, b);
    let omega = tape.softmax_rows(logits, None, cfg.n_prototypes);
    (pooled, omega)
}

/// Convex recombination of the prototype outputs: Y = sum_n omega_n P_n V_n.
pub fn restructure(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pvs: &[NodeId],
    omega: NodeId,
) -> NodeId {
    let m = cfg.max_entities;
    let mut acc: Option<NodeId> = None;
    for (n, &pv) in pvs.iter().enumerate() {
        let w_n = tape.select_cols(omega, n, 1);
        let scaled = tape.col_scale_blocks(pv, w_n, m);
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled),
            None => scaled,
        });
    }
    acc.expect("at least one prototype")
}

/// K stacked layers over an already-embedded input.
pub fn opt_stack(
    tape: &mut Tape,
    store: &ParamStore,
    site: &str,
    trainable: bool,
    cfg: &ModelConfig,
    x0: NodeId,
    mask: &BlockMask,
    keep: &Rc<Vec<bool>>,
) -> OptStackOutput {
    let m = cfg.max_entities;
    let mut x = x0;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut pooled_embed = None;
    for k in 0..cfg.n_layers {
        let prefix = format!("{site}.l{k}");
        let (protos, pvs) = disentangle(tape, store, &prefix, trainable, cfg, x, mask, keep);
        let (pooled, omega) = aggregate_weights(tape, store, &prefix, trainable, cfg, x, mask);
        if k == 0 {
            pooled_embed = Some(pooled);
        }
        let cd = tape.cd_loss_blocks(&pvs, mask.clone(), m);
        let restructured = restructure(tape, cfg, &pvs, omega);
        let x1 = tape.add(x, restructured);
        // entity-wise feed-forward with residual; padded rows re-zeroed so
        // biases cannot leak into them
        let w1 = store.leaf(tape, &format!("{prefix}.ff.w1"), trainable);
        let b1 = store.leaf(tape, &format!("{prefix}.ff.b1"), trainable);
        let w2 = store.leaf(tape, &format!("{prefix}.ff.w2"), trainable);
        let b2 = store.leaf(tape, &format!("{prefix}.ff.b2"), trainable);
        let h = tape.matmul(x1, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.relu(h);
        let ff = tape.matmul(h, w2);
        let ff = tape.add_bias(ff, b2);
        let x2 = tape.add(x1, ff);
        x = tape.zero_rows(x2, keep.clone());
        layers.push(LayerOutput {
            prototypes: protos,
            omega,
            cd_blocks: cd,
        });
    }
    OptStackOutput {
        y: x,
        pooled_embed: pooled_embed.expect("at least one layer"),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MixerKind;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn small_cfg(activation: Activation) -> ModelConfig {
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
            activation,
            mixer: MixerKind::Qmix,
            kl_clamp: 1e-8,
        }
    }

    fn init_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let layout = cfg.build_layout();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ParamStore::init_uniform(layout, &mut rng)
    }

    fn full_mask(nb: usize, m: usize) -> BlockMask {
        Rc::new(vec![vec![true; m]; nb])
    }

    #[test]
    fn embed_is_entity_wise_and_zeroes_padding() {
        let cfg = small_cfg(Activation::Sparsemax);
        let store = init_store(&cfg, 1);
        let raw = Array2::from_shape_fn((6, 3), |(i, j)| 0.1 * (i * 3 + j) as f64);
        let mask: BlockMask = Rc::new(vec![vec![true, true, false], vec![true, true, false]]);
        let keep = keep_rows(&mask, 3);
        let mut tape = Tape::new();
        let rawn = tape.constant(raw.clone());
        let x = embed_entities(&mut tape, &store, "util", false, rawn, keep.clone());
        let xv = tape.value(x).clone();
        assert_eq!(xv.nrows(), 6);
        assert!(xv.row(2).iter().all(|&v| v == 0.0), "padded row zeroed");
        // permuting entity rows permutes embedding rows identically
        let mut permuted = raw.clone();
        let tmp = permuted.row(0).to_owned();
        permuted.row_mut(0).assign(&raw.row(1));
        permuted.row_mut(1).assign(&tmp);
        let mut tape2 = Tape::new();
        let rawn2 = tape2.constant(permuted);
        let keep2: Rc<Vec<bool>> = Rc::new(vec![true, true, false, true, true, false]);
        let x2 = embed_entities(&mut tape2, &store, "util", false, rawn2, keep2);
        let x2v = tape2.value(x2);
        assert_eq!(xv.row(0), x2v.row(1));
        assert_eq!(xv.row(1), x2v.row(0));
    }

    #[test]
    fn qkv_matches_naive_triple_loop() {
        let cfg = small_cfg(Activation::Sparsemax);
        let store = init_store(&cfg, 2);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64) - 0.3 * (j as f64));
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let wq = store.leaf(&mut tape, "util.l0.p0.wq", false);
        let q = tape.matmul(xn, wq);
        let wq_v = tape.value(wq).clone();
        let qv = tape.value(q);
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += x[(i, k)] * wq_v[(k, j)];
                }
                assert!((qv[(i, j)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_on_the_simplex() {
        let cfg = small_cfg(Activation::Sparsemax);
        let store = init_store(&cfg, 3);
        let mask: BlockMask = Rc::new(vec![vec![true, true, false]]);
        let keep = keep_rows(&mask, 3);
        let raw = Array2::from_shape_fn((3, 3), |(i, j)| (i + j) as f64 * 0.4 - 0.5);
        let mut tape = Tape::new();
        let rawn = tape.constant(raw);
        let x = embed_entities(&mut tape, &store, "util", false, rawn, keep.clone());
        let (protos, _) =
            disentangle(&mut tape, &store, "util.l0", false, &cfg, x, &mask, &keep);
        for &p in &protos {
            let pv = tape.value(p);
            for r in 0..2 {
                let row = pv.row(r);
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert_eq!(row[2], 0.0, "masked column is zero");
            }
            assert!(pv.row(2).iter().all(|&v| v == 0.0), "padded query row zeroed");
        }
    }

    #[test]
    fn single_entity_attention_is_trivial() {
        let mut cfg = small_cfg(Activation::Sparsemax);
        cfg.max_entities = 1;
        let store = init_store(&cfg, 4);
        let mask = full_mask(1, 1);
        let keep = keep_rows(&mask, 1);
        let mut tape = Tape::new();
        let raw = tape.constant(Array2::from_shape_vec((1, 3), vec![0.5, -0.2, 1.0]).unwrap());
        let x = embed_entities(&mut tape, &store, "util", false, raw, keep.clone());
        let (protos, _) =
            disentangle(&mut tape, &store, "util.l0", false, &cfg, x, &mask, &keep);
        for &p in &protos {
            assert_eq!(tape.value(p)[(0, 0)], 1.0);
        }
    }

    #[test]
    fn identical_qk_rows_give_uniform_attention() {
        let cfg = small_cfg(Activation::Sparsemax);
        let store = init_store(&cfg, 5);
        let mask = full_mask(1, 3);
        let keep = keep_rows(&mask, 3);
        // identical entities -> identical Q and K rows -> uniform rows
        let raw = Array2::from_shape_fn((3, 3), |(_, j)| 0.3 * j as f64 + 0.1);
        let mut tape = Tape::new();
        let rawn = tape.constant(raw);
        let x = embed_entities(&mut tape, &store, "util", false, rawn, keep.clone());
        let (protos, _) =
            disentangle(&mut tape, &store, "util.l0", false, &cfg, x, &mask, &keep);
        for &p in &protos {
            let pv = tape.value(p);
            for r in 0..3 {
                for c in 0..3 {
                    assert!((pv[(r, c)] - 1.0 / 3.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn aggregator_uniform_for_zero_params_and_permutation_invariant() {
        let cfg = small_cfg(Activation::Sparsemax);
        let layout = cfg.build_layout();
        let store = ParamStore::zeros(layout);
        let mask = full_mask(1, 3);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.05);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let (pooled, omega) =
            aggregate_weights(&mut tape, &store, "util.l0", false, &cfg, xn, &mask);
        let ov = tape.value(omega);
        for n in 0..cfg.n_prototypes {
            assert!((ov[(0, n)] - 0.5).abs() < 1e-12);
        }
        // permuting entity rows leaves the pooled vector unchanged
        let mut perm = x.clone();
        let tmp = perm.row(0).to_owned();
        perm.row_mut(0).assign(&x.row(2));
        perm.row_mut(2).assign(&tmp);
        let mut tape2 = Tape::new();
        let xn2 = tape2.constant(perm);
        let (pooled2, _) =
            aggregate_weights(&mut tape2, &store, "util.l0", false, &cfg, xn2, &mask);
        let a = tape.value(pooled).clone();
        let b = tape2.value(pooled2).clone();
        for j in 0..4 {
            assert!((a[(0, j)] - b[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn masking_one_entity_changes_the_pooled_mean() {
        let cfg = small_cfg(Activation::Sparsemax);
        let store = ParamStore::zeros(cfg.build_layout());
        let x = Array2::from_shape_vec(
            (3, 4),
            vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 2.0, 0.0, 0.0, //
                0.0, 0.0, 3.0, 0.0,
            ],
        )
        .unwrap();
        let mask: BlockMask = Rc::new(vec![vec![true, true, false]]);
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let (pooled, _) = aggregate_weights(&mut tape, &store, "util.l0", false, &cfg, xn, &mask);
        let pv = tape.value(pooled);
        assert!((pv[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((pv[(0, 1)] - 1.0).abs() < 1e-12);
        assert!((pv[(0, 2)] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn restructure_examples() {
        let mut cfg = small_cfg(Activation::Sparsemax);
        cfg.max_entities = 1;
        let mut tape = Tape::new();
        let pv1 = tape.constant(Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap());
        let pv2 = tape.constant(Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap());
        let mut cfg2 = cfg.clone();
        cfg2.d_x = 2;
        // omega = (0.25, 0.75)
        let omega = tape.constant(Array2::from_shape_vec((1, 2), vec![0.25, 0.75]).unwrap());
        let y = restructure(&mut tape, &cfg2, &[pv1, pv2], omega);
        let yv = tape.value(y);
        assert!((yv[(0, 0)] - 0.25).abs() < 1e-12);
        assert!((yv[(0, 1)] - 0.75).abs() < 1e-12);
        // one-hot omega selects a single prototype
        let onehot = tape.constant(Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap());
        let y2 = restructure(&mut tape, &cfg2, &[pv1, pv2], onehot);
        assert_eq!(tape.value(y2)[(0, 1)], 1.0);
        // identical prototype outputs are a fixed point of any omega
        let y3 = restructure(&mut tape, &cfg2, &[pv1, pv1], omega);
        assert_eq!(tape.value(y3).row(0), tape.value(pv1).row(0));
    }

    #[test]
    fn stack_residual_identity_with_zero_weights() {
        let cfg = small_cfg(Activation::Sparsemax);
        // all-zero parameters: V = 0 kills the attention path, the
        // feed-forward is 0, so the stack is the identity on its input
        let store = ParamStore::zeros(cfg.build_layout());
        let mask = full_mask(2, 3);
        let keep = keep_rows(&mask, 3);
        let x0 = Array2::from_shape_fn((6, 4), |(i, j)| 0.2 * (i as f64) - 0.1 * (j as f64));
        let mut tape = Tape::new();
        let xn = tape.constant(x0.clone());
        let out = opt_stack(&mut tape, &store, "util", false, &cfg, xn, &mask, &keep);
        let yv = tape.value(out.y);
        for (a, b) in yv.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_layers_equal_composition_of_single_layers() {
        let mut cfg = small_cfg(Activation::Sparsemax);
        let store = init_store(&cfg, 6);
        let mask = full_mask(1, 3);
        let keep = keep_rows(&mask, 3);
        let x0 = Array2::from_shape_fn((3, 4), |(i, j)| 0.31 * (i as f64) - 0.17 * (j as f64));
        let mut tape = Tape::new();
        let xn = tape.constant(x0.clone());
        let two = opt_stack(&mut tape, &store, "util", false, &cfg, xn, &mask, &keep);
        let y_two = tape.value(two.y).clone();

        // run layer 0 alone, feed its output through a stack that only has
        // layer 1's parameters at position 0
        cfg.n_layers = 1;
        let mut t1 = Tape::new();
        let xn1 = t1.constant(x0);
        let first = opt_stack(&mut t1, &store, "util", false, &cfg, xn1, &mask, &keep);
        let mid = t1.value(first.y).clone();

        let mut remap = ParamStore::zeros(store.layout.clone());
        remap.data.copy_from_slice(&store.data);
        // copy layer-1 tensors into the layer-0 slots
        for name in ["p0.wq", "p0.wk", "p0.wv", "p1.wq", "p1.wk", "p1.wv", "agg.w",
            "agg.b", "ff.w1", "ff.b1", "ff.w2", "ff.b2"]
        {
            let src = store.offset_of(&format!("util.l1.{name}"));
            let dst = store.offset_of(&format!("util.l0.{name}"));
            let shape = store.layout.shape_of(&format!("util.l0.{name}")).unwrap();
            let n = shape.0 * shape.1;
            let vals: Vec<f64> = store.data[src..src + n].to_vec();
            remap.data[dst..dst + n].copy_from_slice(&vals);
        }
        let mut t2 = Tape::new();
        let midn = t2.constant(mid);
        let second = opt_stack(&mut t2, &remap, "util", false, &cfg, midn, &mask, &keep);
        let composed = t2.value(second.y);
        for (a, b) in y_two.iter().zip(composed.iter()) {
            assert!((a - b).abs() < 1e-12, "stack must equal layer composition");
        }
    }

    #[test]
    fn sparsity_contrast_between_activations() {
        // dominant-margin logits: sparsemax rows go one-hot, softmax stays dense
        let cfg_s = small_cfg(Activation::Sparsemax);
        let cfg_d = small_cfg(Activation::Softmax);
        let store = init_store(&cfg_s, 7);
        let mask = full_mask(4, 3);
        let keep = keep_rows(&mask, 3);
        // large-magnitude embeddings produce large pairwise margins
        let raw = Array2::from_shape_fn((12, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 3.0);
        let count_zeros = |cfg: &ModelConfig| {
            let mut tape = Tape::new();
            let rawn = tape.constant(raw.clone());
            let x = embed_entities(&mut tape, &store, "util", false, rawn, keep.clone());
            let (protos, _) =
                disentangle(&mut tape, &store, "util.l0", false, cfg, x, &mask, &keep);
            let mut zeros = 0usize;
            for &p in &protos {
                let pv = tape.value(p);
                for r in 0..pv.nrows() {
                    if !keep[r] {
                        continue;
                    }
                    zeros += pv.row(r).iter().filter(|&&v| v == 0.0).count();
                }
            }
            zeros
        };
        assert!(count_zeros(&cfg_s) > 0, "sparsemax must produce exact zeros");
        assert_eq!(count_zeros(&cfg_d), 0, "softmax must not produce exact zeros");
    }
}
