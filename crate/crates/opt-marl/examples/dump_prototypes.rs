//! Records greedy rollouts with per-step prototype attention matrices and
//! mixing weights, writes the JSON dump, and summarizes attention sparsity.
//!
//!     cargo run --release --example dump_prototypes [checkpoint.ckpt]
//!
//! Without a checkpoint the dump uses freshly initialized parameters, which
//! still illustrates the format and sparsemax's exact zeros.

use std::path::PathBuf;

use opt_marl::checkpoint::Checkpoint;
use opt_marl::config::RunConfig;
use opt_marl::env::Split;
use opt_marl::params::ParamStore;
use opt_marl::protodump;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let (cfg, store) = match std::env::args().nth(1) {
        Some(p) => {
            let ck = Checkpoint::load(&PathBuf::from(p)).unwrap();
            let mc = ck.config.model_config();
            let mut store = ParamStore::zeros(mc.build_layout());
            store.data.copy_from_slice(&ck.params);
            (ck.config, store)
        }
        None => {
            let cfg = RunConfig::default();
            let mc = cfg.model_config();
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            let store = ParamStore::init_uniform(mc.build_layout(), &mut rng);
            println!("no checkpoint given; dumping with untrained parameters\n");
            (cfg, store)
        }
    };

    let dump = protodump::dump_rollout(&cfg, &store, Split::Train, 4, 99).unwrap();
    let json = protodump::to_json(&dump).unwrap();
    let out = PathBuf::from("/tmp/opt-marl-prototypes.json");
    std::fs::write(&out, &json).unwrap();

    let steps: usize = dump.episodes.iter().map(|e| e.steps.len()).sum();
    println!(
        "dumped {} episodes / {} steps, {} prototypes x {} layers, {} x {} attention",
        dump.episodes.len(),
        steps,
        dump.n_prototypes,
        dump.n_layers,
        dump.max_entities,
        dump.max_entities
    );
    let (zeros, total) = protodump::attention_sparsity(&dump);
    println!(
        "visible attention entries: {total}, exact zeros: {zeros} ({:.1}%)",
        100.0 * zeros as f64 / total as f64
    );
    let first = &dump.episodes[0].steps[0];
    println!("\nfirst step, first site ({}):", first.sites[0].site);
    let layer = &first.sites[0].layers[0];
    println!("omega = {:?}", layer.omega);
    for (n, proto) in layer.prototypes.iter().enumerate() {
        println!("prototype {n}, row 0: {:?}", proto[0]);
    }
    println!("\nfull dump written to {} ({} bytes)", out.display(), json.len());
}
