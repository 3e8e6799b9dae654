//! Counts multiply-accumulate operations for one utility-network forward
//! pass as the entity count M grows at fixed embedding width, showing the
//! prototype attention's O(M^2 d) scaling.
//!
//!     cargo run --example complexity_scaling

use std::rc::Rc;

use ndarray::Array2;
use opt_marl::model::{utility, Activation, MixerKind, ModelConfig};
use opt_marl::params::ParamStore;
use opt_marl::tape::{BlockMask, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn macs_for(m: usize) -> u64 {
    let mc = ModelConfig {
        n_layers: 2,
        n_prototypes: 4,
        d_x: 32,
        d_h: 32,
        d_mix: 32,
        d_e: 8,
        max_entities: m,
        n_actions: 6,
        max_agents: 1,
        activation: Activation::Sparsemax,
        mixer: MixerKind::Qmix,
        kl_clamp: 1e-8,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let store = ParamStore::init_uniform(mc.build_layout(), &mut rng);
    let obs = Array2::from_shape_fn((m, mc.d_e), |(i, j)| 0.1 * i as f64 - 0.07 * j as f64);
    let mask: BlockMask = Rc::new(vec![vec![true; m]]);
    let mut tape = Tape::new();
    let h0 = tape.constant(Array2::zeros((1, mc.d_h)));
    utility::utility_forward(&mut tape, &store, false, &mc, &obs, &mask, Rc::new(vec![0]), h0);
    tape.macs()
}

fn main() {
    println!("{:>4} {:>14} {:>10}", "M", "MACs", "ratio");
    let mut prev: Option<u64> = None;
    for m in [4, 8, 16, 32, 64] {
        let macs = macs_for(m);
        match prev {
            Some(p) => println!("{m:>4} {macs:>14} {:>10.2}", macs as f64 / p as f64),
            None => println!("{m:>4} {macs:>14} {:>10}", "-"),
        }
        prev = Some(macs);
    }
    println!(
        "\nDoubling M multiplies the attention term (O(M^2 d)) by 4 and the\n\
         per-entity terms (O(M d^2)) by 2, so the observed ratio sits in (2, 4)\n\
         and climbs toward 4 as attention dominates."
    );
}
