//! Projects a few score vectors onto the probability simplex and contrasts
//! sparsemax with softmax: support sizes, thresholds, and exact zeros.
//!
//!     cargo run --example sparsemax_playground

use opt_marl::numerics::{softmax, sparsemax, sparsemax_support};

fn show(z: &[f64]) {
    let p = sparsemax(z, None).unwrap();
    let s = sparsemax_support(z).unwrap();
    let q = softmax(z, None).unwrap();
    println!("z         = {z:?}");
    println!("sparsemax = {:?}", p.values());
    println!("softmax   = {:?}", q.values());
    println!(
        "support m = {}, threshold sigma = {:.6}, exact zeros = {}",
        s.support_size,
        s.threshold,
        p.values().iter().filter(|&&v| v == 0.0).count()
    );
    println!();
}

fn main() {
    println!("== closed-form two-element case ==");
    show(&[0.5, 0.0]);
    println!("== one entry outside the support ==");
    show(&[3.1, 2.6, 0.1]);
    println!("== large margin: one-hot with hard zeros ==");
    show(&[4.0, 0.0, -1.0, -2.0]);
    println!("== uniform scores: uniform output ==");
    show(&[1.0, 1.0, 1.0, 1.0]);
    println!("== masked projection (second entry excluded) ==");
    let p = sparsemax(&[1.0, 9.0, 0.5], Some(&[true, false, true])).unwrap();
    println!("z = [1.0, 9.0(masked), 0.5] -> {:?}", p.values());
}
