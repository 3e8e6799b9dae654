//! Network architecture: the prototype-attention block ([`opt_block`]), the
//! recurrent per-agent utility network ([`utility`]) and the monotone mixing
//! network ([`mixer`]), all parameterized over one flat [`ParamLayout`].

pub mod mixer;
pub mod opt_block;
pub mod utility;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::params::ParamLayout;

/// Row-normalization used inside the attention block. Softmax is the
/// "dense" ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sparsemax,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Qmix,
    Vdn,
}

/// Shapes and switches of the full network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Stacked attention layers (K).
    pub n_layers: usize,
    /// Interaction prototypes per layer (N).
    pub n_prototypes: usize,
    /// Entity embedding width (d_x).
    pub d_x: usize,
    /// GRU hidden width.
    pub d_h: usize,
    /// Mixing hidden width.
    pub d_mix: usize,
    /// Per-entity feature width of the environment.
    pub d_e: usize,
    /// Padded entity count per scenario family (M).
    pub max_entities: usize,
    pub n_actions: usize,
    pub max_agents: usize,
    pub activation: Activation,
    pub mixer: MixerKind,
    /// Probability floor inside KL logarithms.
    pub kl_clamp: f64,
}

impl ModelConfig {
    /// Registers every trainable tensor of both networks.
    pub fn build_layout(&self) -> Rc<ParamLayout> {
        let mut l = ParamLayout::new();
        let dx = self.d_x;
        let dh = self.d_h;
        let n = self.n_prototypes;
        for site in ["util", "mix"] {
            l.add(&format!("{site}.embed.w"), self.d_e, dx, self.d_e);
            l.add(&format!("{site}.embed.b"), 1, dx, self.d_e);
            for k in 0..self.n_layers {
                for p in 0..n {
                    l.add(&format!("{site}.l{k}.p{p}.wq"), dx, dx, dx);
                    l.add(&format!("{site}.l{k}.p{p}.wk"), dx, dx, dx);
                    l.add(&format!("{site}.l{k}.p{p}.wv"), dx, dx, dx);
                }
                l.add(&format!("{site}.l{k}.agg.w"), dx, n, dx);
                l.add(&format!("{site}.l{k}.agg.b"), 1, n, dx);
                l.add(&format!("{site}.l{k}.ff.w1"), dx, dx, dx);
                l.add(&format!("{site}.l{k}.ff.b1"), 1, dx, dx);
                l.add(&format!("{site}.l{k}.ff.w2"), dx, dx, dx);
                l.add(&format!("{site}.l{k}.ff.b2"), 1, dx, dx);
            }
        }
        for gate in ["z", "r", "h"] {
            l.add(&format!("util.gru.w{gate}"), dx, dh, dx);
            l.add(&format!("util.gru.u{gate}"), dh, dh, dh);
            l.add(&format!("util.gru.b{gate}"), 1, dh, dh);
        }
        l.add("util.head.w", dh + dx, self.n_actions, dh + dx);
        l.add("util.head.b", 1, self.n_actions, dh + dx);
        l.add("util.psi.w", dh + dx, n, dh + dx);
        l.add("util.psi.b", 1, n, dh + dx);
        let a = self.max_agents;
        let dm = self.d_mix;
        l.add("mix.hyper.w1.w", dx, a * dm, dx);
        l.add("mix.hyper.w1.b", 1, a * dm, dx);
        l.add("mix.hyper.b1.w", dx, dm, dx);
        l.add("mix.hyper.b1.b", 1, dm, dx);
        l.add("mix.hyper.w2.w", dx, dm, dx);
        l.add("mix.hyper.w2.b", 1, dm, dx);
        l.add("mix.hyper.b2.w", dx, 1, dx);
        l.add("mix.hyper.b2.b", 1, 1, dx);
        Rc::new(l)
    }
}
