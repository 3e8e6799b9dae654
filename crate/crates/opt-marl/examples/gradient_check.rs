//! Checks the hand-written backward pass of the full utility network (Q
//! values plus the contrastive-disagreement and CMI losses) against central
//! finite differences on randomly chosen parameter coordinates, reporting
//! per-coordinate status including kink detection.
//!
//!     cargo run --example gradient_check

use std::rc::Rc;

use ndarray::Array2;
use opt_marl::model::{utility, Activation, MixerKind, ModelConfig};
use opt_marl::numerics::{finite_difference_check, CoordStatus};
use opt_marl::params::ParamStore;
use opt_marl::tape::{BlockMask, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let mc = ModelConfig {
        n_layers: 2,
        n_prototypes: 3,
        d_x: 6,
        d_h: 6,
        d_mix: 4,
        d_e: 4,
        max_entities: 4,
        n_actions: 3,
        max_agents: 2,
        activation: Activation::Sparsemax,
        mixer: MixerKind::Qmix,
        kl_clamp: 1e-8,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let store = ParamStore::init_uniform(mc.build_layout(), &mut rng);
    let obs = Array2::from_shape_fn((8, 4), |(i, j)| 0.13 * i as f64 - 0.21 * j as f64);
    let mask: BlockMask = Rc::new(vec![vec![true, true, true, false], vec![true; 4]]);
    let w = Rc::new(Array2::from_shape_fn((2, 3), |(i, j)| {
        0.2 + 0.1 * (i * 3 + j) as f64
    }));
    let ones = Rc::new(Array2::ones((2, 1)));

    let build = |tape: &mut Tape, s: &ParamStore| {
        let h0 = tape.constant(Array2::from_elem((2, 6), 0.05));
        let step = utility::utility_forward(
            tape,
            s,
            true,
            &mc,
            &obs,
            &mask,
            Rc::new(vec![0, 5]),
            h0,
        );
        let q = tape.weighted_sum_all(step.q, w.clone());
        let cd0 = tape.weighted_sum_all(step.cd_blocks[0], ones.clone());
        let cd1 = tape.weighted_sum_all(step.cd_blocks[1], ones.clone());
        let cmi = tape.weighted_sum_all(step.cmi_blocks, ones.clone());
        let a = tape.add(q, cd0);
        let b = tape.add(a, cd1);
        tape.add(b, cmi)
    };

    let mut grads = vec![0.0; store.data.len()];
    let mut tape = Tape::new();
    let loss = build(&mut tape, &store);
    println!(
        "scalar loss {:.6} over {} parameters ({} tape nodes, {} MACs)",
        tape.value(loss)[(0, 0)],
        store.data.len(),
        tape.len(),
        tape.macs()
    );
    tape.backward(loss, &mut grads);

    let coords: Vec<usize> = (0..60).map(|_| rng.gen_range(0..store.data.len())).collect();
    let x: Vec<f64> = coords.iter().map(|&i| store.data[i]).collect();
    let analytic: Vec<f64> = coords.iter().map(|&i| grads[i]).collect();
    let eval = |sub: &[f64]| {
        let mut s = ParamStore::zeros(store.layout.clone());
        s.data.copy_from_slice(&store.data);
        for (&i, &v) in coords.iter().zip(sub) {
            s.data[i] = v;
        }
        let mut t = Tape::new();
        let l = build(&mut t, &s);
        (t.value(l)[(0, 0)], t.region_signature())
    };
    let mut f = |sub: &[f64]| eval(sub).0;
    let mut sig = |sub: &[f64]| eval(sub).1;
    let report = finite_difference_check(&mut f, &x, &analytic, 1e-5, 1e-4, Some(&mut sig));

    for c in &report.coords {
        let flag = match c.status {
            CoordStatus::Pass => "pass",
            CoordStatus::Fail => "FAIL",
            CoordStatus::Kink => "kink (excluded)",
            CoordStatus::NonFinite => "NON-FINITE",
        };
        println!(
            "param[{:5}]  analytic {:+.3e}  numeric {:+.3e}  rel_err {:.2e}  {flag}",
            coords[c.index], c.analytic, c.numeric, c.rel_err
        );
    }
    println!(
        "\n{} checked, {} kinks, passed = {}",
        report.coords.len(),
        report.kink_count(),
        report.passed()
    );
}
