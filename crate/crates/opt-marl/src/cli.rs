//! Command-line surface: train / eval / ablate / check / dump-prototypes.
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
//! 3 check-suite failure.

use std::path::PathBuf;
use std::rc::Rc;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::env::Split;
use crate::error::{OptError, Result};
use crate::model::{mixer, utility, Activation, ModelConfig};
use crate::numerics::{self, ProbabilityVector};
use crate::params::ParamStore;
use crate::tape::{BlockMask, Tape};
use crate::trainer::Trainer;
use crate::{protodump, trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "opt-marl", version, about = "Interaction-pattern disentangling for multi-agent RL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides [train].seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write metrics + checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint greedily on one split; prints JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | unseen_capability | unseen_scale | unseen_both
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a named ablation variant.
    Ablate {
        /// no-sparse | no-cd | no-cmi | n-prototypes=K
        #[arg(long)]
        variant: String,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run a verification sub-suite; prints per-test pass/fail lines.
    Check {
        /// sparsemax | gradients | cmi | mixer
        #[arg(long)]
        suite: String,
    },
    /// Export prototype attention matrices and omega weights as JSON.
    DumpPrototypes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Dispatches a parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(args) => cmd_train(args, None),
        Command::Eval {
            checkpoint,
            split,
            episodes,
            seed,
        } => cmd_eval(&checkpoint, &split, episodes, seed),
        Command::Ablate { variant, train } => cmd_train(train, Some(variant)),
        Command::Check { suite } => return cmd_check(&suite),
        Command::DumpPrototypes {
            checkpoint,
            episodes,
            out,
            split,
            seed,
        } => cmd_dump(&checkpoint, episodes, &out, &split, seed),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                OptError::Config(_) | OptError::InvalidInput(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

/// Applies an ablation variant to a base configuration.
pub fn apply_variant(cfg: &mut RunConfig, variant: &str) -> Result<()> {
    match variant {
        "no-sparse" => cfg.model.activation = Activation::Softmax,
        "no-cd" => cfg.loss.alpha = 0.0,
        "no-cmi" => cfg.loss.beta = 0.0,
        other => {
            if let Some(k) = other.strip_prefix("n-prototypes=") {
                let n: usize = k.parse().map_err(|_| {
                    OptError::Config(format!("bad prototype count '{k}'"))
                })?;
                if n == 0 {
                    return Err(OptError::Config("n-prototypes must be positive".into()));
                }
                cfg.model.n_prototypes = n;
            } else {
                return Err(OptError::Config(format!(
                    "unknown variant '{other}' (valid: no-sparse, no-cd, no-cmi, n-prototypes=K)"
                )));
            }
        }
    }
    Ok(())
}

fn cmd_train(args: TrainArgs, variant: Option<String>) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            if !path.exists() {
                return Err(OptError::Config(format!(
                    "config file not found: {}",
                    path.display()
                )));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(v) = &variant {
        apply_variant(&mut cfg, v)?;
    }
    let mut t = Trainer::new(cfg)?;
    let summary = t.run(&args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "variant": variant,
            "env_steps": summary.env_steps,
            "grad_steps": summary.grad_steps,
            "early_stopped": summary.early_stopped,
            "final_eval": summary
                .final_eval
                .iter()
                .map(|(split, s)| {
                    serde_json::json!({
                        "split": format!("{split:?}"),
                        "mean_return": s.mean_return,
                        "win_rate": s.win_rate,
                        "capture_rate": s.capture_rate,
                    })
                })
                .collect::<Vec<_>>(),
        })
    );
    Ok(())
}

fn load_params(path: &std::path::Path) -> Result<(RunConfig, ModelConfig, ParamStore)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck.config.clone();
    let mc = cfg.model_config();
    let layout = mc.build_layout();
    if layout.total_len() != ck.params.len() {
        return Err(OptError::Checkpoint(
            "checkpoint does not match its own model shape".into(),
        ));
    }
    let mut store = ParamStore::zeros(layout);
    store.data.copy_from_slice(&ck.params);
    Ok((cfg, mc, store))
}

fn cmd_eval(checkpoint: &std::path::Path, split: &str, episodes: usize, seed: u64) -> Result<()> {
    if episodes == 0 {
        return Err(OptError::InvalidInput("--episodes must be positive".into()));
    }
    let split = Split::parse(split)?;
    let (cfg, mc, store) = load_params(checkpoint)?;
    let stats = trainer::evaluate(&cfg, &mc, &store, split, episodes, seed)?;
    println!(
        "{}",
        serde_json::json!({
            "split": format!("{split:?}"),
            "episodes": episodes,
            "seed": seed,
            "win_rate": stats.win_rate,
            "capture_rate": stats.capture_rate,
            "mean_return": stats.mean_return,
            "mean_length": stats.mean_length,
        })
    );
    Ok(())
}

fn cmd_dump(
    checkpoint: &std::path::Path,
    episodes: usize,
    out: &std::path::Path,
    split: &str,
    seed: u64,
) -> Result<()> {
    if episodes == 0 {
        return Err(OptError::InvalidInput("--episodes must be positive".into()));
    }
    let split = Split::parse(split)?;
    let (cfg, _, store) = load_params(checkpoint)?;
    let dump = protodump::dump_rollout(&cfg, &store, split, episodes, seed)?;
    std::fs::write(out, protodump::to_json(&dump)?)?;
    println!(
        "wrote {} episodes of prototype dumps to {}",
        episodes,
        out.display()
    );
    Ok(())
}

type CheckResult = (String, std::result::Result<(), String>);

fn cmd_check(suite: &str) -> i32 {
    let checks = match suite {
        "sparsemax" => check_sparsemax(),
        "gradients" => check_gradients(),
        "cmi" => check_cmi(),
        "mixer" => check_mixer(),
        other => {
            eprintln!(
                "error: unknown suite '{other}' (valid: sparsemax, gradients, cmi, mixer)"
            );
            return EXIT_USAGE;
        }
    };
    let mut ok = true;
    for (name, result) in &checks {
        match result {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                ok = false;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    if ok {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

fn check<F: FnOnce() -> std::result::Result<(), String>>(
    out: &mut Vec<CheckResult>,
    name: &str,
    f: F,
) {
    out.push((name.to_string(), f()));
}

fn expect(cond: bool, msg: &str) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

fn check_sparsemax() -> Vec<CheckResult> {
    let mut out = Vec::new();
    check(&mut out, "two_element_closed_form", || {
        let p = numerics::sparsemax(&[0.5, 0.0], None).map_err(|e| e.to_string())?;
        expect(
            (p.values()[0] - 0.75).abs() < 1e-12 && (p.values()[1] - 0.25).abs() < 1e-12,
            "expected (0.75, 0.25)",
        )
    });
    check(&mut out, "support_and_threshold", || {
        let s = numerics::sparsemax_support(&[3.1, 2.6, 0.1]).map_err(|e| e.to_string())?;
        expect(
            s.support_size == 2 && (s.threshold - 2.35).abs() < 1e-12,
            "expected m=2, sigma=2.35",
        )
    });
    check(&mut out, "hard_zeros_on_large_margin", || {
        let p = numerics::sparsemax(&[4.0, 0.0, -1.0], None).map_err(|e| e.to_string())?;
        expect(
            p.values()[0] == 1.0 && p.values()[1] == 0.0 && p.values()[2] == 0.0,
            "expected exact one-hot",
        )
    });
    check(&mut out, "masked_positions_are_exact_zero", || {
        let p = numerics::sparsemax(&[1.0, 9.0, 0.5], Some(&[true, false, true]))
            .map_err(|e| e.to_string())?;
        expect(p.values()[1] == 0.0, "masked position must be exactly 0")
    });
    check(&mut out, "projection_matches_support_enumeration", || {
        // oracle: try every support set, solve the KKT system, keep the
        // feasible solution closest to z
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(2..6);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = numerics::sparsemax(&z, None).map_err(|e| e.to_string())?;
            let oracle = brute_force_projection(&z);
            for (a, b) in p.values().iter().zip(&oracle) {
                if (a - b).abs() > 1e-9 {
                    return Err(format!("{z:?}: got {:?}, oracle {oracle:?}", p.values()));
                }
            }
        }
        Ok(())
    });
    out
}

/// Simplex projection by exhaustive support enumeration (exponential; for
/// verification only).
fn brute_force_projection(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for bits in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| bits >> i & 1 == 1).collect();
        let s: f64 = support.iter().map(|&i| z[i]).sum();
        let sigma = (s - 1.0) / support.len() as f64;
        let mut p = vec![0.0; n];
        let mut feasible = true;
        for &i in &support {
            p[i] = z[i] - sigma;
            if p[i] < 0.0 {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        let dist: f64 = z.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().map_or(true, |(d, _)| dist < *d) {
            best = Some((dist, p));
        }
    }
    best.expect("some support is feasible").1
}

fn small_model() -> (ModelConfig, ParamStore) {
    let mc = ModelConfig {
        n_layers: 1,
        n_prototypes: 2,
        d_x: 4,
        d_h: 4,
        d_mix: 4,
        d_e: 3,
        max_entities: 3,
        n_actions: 4,
        max_agents: 2,
        activation: Activation::Sparsemax,
        mixer: crate::model::MixerKind::Qmix,
        kl_clamp: 1e-8,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let store = ParamStore::init_uniform(mc.build_layout(), &mut rng);
    (mc, store)
}

/// Finite-difference check of `build`'s scalar output against tape gradients
/// on a random subset of parameter coordinates.
fn fd_param_check(
    mc: &ModelConfig,
    store: &ParamStore,
    build: &dyn Fn(&mut Tape, &ParamStore) -> crate::tape::NodeId,
    coords: usize,
) -> std::result::Result<(), String> {
    let mut grads = vec![0.0; store.data.len()];
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.backward(loss, &mut grads);
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let idx: Vec<usize> = (0..coords)
        .map(|_| rng.gen_range(0..store.data.len()))
        .collect();
    let x: Vec<f64> = idx.iter().map(|&i| store.data[i]).collect();
    let analytic: Vec<f64> = idx.iter().map(|&i| grads[i]).collect();
    let eval = |sub: &[f64]| -> (f64, u64) {
        let mut s = ParamStore::zeros(store.layout.clone());
        s.data.copy_from_slice(&store.data);
        for (&i, &v) in idx.iter().zip(sub) {
            s.data[i] = v;
        }
        let mut t = Tape::new();
        let l = build(&mut t, &s);
        (t.value(l)[(0, 0)], t.region_signature())
    };
    let mut f = |sub: &[f64]| eval(sub).0;
    let mut sig = |sub: &[f64]| eval(sub).1;
    let report = numerics::finite_difference_check(
        &mut f,
        &x,
        &analytic,
        1e-6,
        1e-4,
        Some(&mut sig),
    );
    let _ = mc;
    // near-zero gradients fall below the central-difference resolution;
    // judge those on an absolute scale instead
    let fails: Vec<_> = report
        .failures()
        .into_iter()
        .filter(|c| c.analytic.abs().max(c.numeric.abs()) > 1e-5)
        .collect();
    if fails.is_empty() {
        Ok(())
    } else {
        Err(format!(
            "{} of {} coords failed, first: {:?}",
            fails.len(),
            coords,
            fails.first()
        ))
    }
}

fn check_gradients() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let (mc, _) = small_model();
    let obs = Array2::from_shape_fn((6, 3), |(i, j)| 0.17 * (i as f64) - 0.23 * (j as f64));
    let mask: BlockMask = Rc::new(vec![vec![true, true, true], vec![true, true, false]]);
    let weights = Rc::new(Array2::from_shape_fn((2, 4), |(i, j)| {
        0.1 + 0.05 * (i * 4 + j) as f64
    }));
    let ones2 = Rc::new(Array2::ones((2, 1)));
    {
        let mc = mc.clone();
        let obs = obs.clone();
        let mask = mask.clone();
        let weights = weights.clone();
        let ones2 = ones2.clone();
        check(&mut out, "utility_q_and_losses_grad", move || {
            let build = move |tape: &mut Tape, s: &ParamStore| {
                let h0 = tape.constant(Array2::from_elem((2, 4), 0.1));
                let step = utility::utility_forward(
                    tape,
                    s,
                    true,
                    &mc,
                    &obs,
                    &mask,
                    Rc::new(vec![0, 4]),
                    h0,
                );
                let q_part = tape.weighted_sum_all(step.q, weights.clone());
                let cd_part = tape.weighted_sum_all(step.cd_blocks[0], ones2.clone());
                let cmi_part = tape.weighted_sum_all(step.cmi_blocks, ones2.clone());
                let a = tape.add(q_part, cd_part);
                tape.add(a, cmi_part)
            };
            fd_param_check(&small_model().0, &small_model().1, &build, 40)
        });
    }
    {
        let mc = mc.clone();
        check(&mut out, "mixer_qtot_grad", move || {
            let state = Array2::from_shape_fn((3, 3), |(i, j)| 0.2 * (i + j) as f64 - 0.3);
            let mask: BlockMask = Rc::new(vec![vec![true, true, true]]);
            let ones1 = Rc::new(Array2::ones((1, 1)));
            let build = move |tape: &mut Tape, s: &ParamStore| {
                let qs = tape.constant(Array2::from_shape_vec((1, 2), vec![0.7, -0.4]).unwrap());
                let m = mixer::mixer_forward(tape, s, true, &mc, &state, &mask, qs);
                tape.weighted_sum_all(m.q_tot, ones1.clone())
            };
            fd_param_check(&small_model().0, &small_model().1, &build, 40)
        });
    }
    check(&mut out, "sparsemax_jacobian_vs_fd", || {
        let z = [0.3, -0.1, 0.7, 0.2];
        let upstream = [1.0, -0.5, 0.25, 2.0];
        let p = numerics::sparsemax(&z, None).map_err(|e| e.to_string())?;
        let analytic = numerics::sparsemax_backward(p.values(), &upstream);
        let mut f = |x: &[f64]| {
            let p = numerics::sparsemax(x, None).unwrap();
            p.values().iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let mut sig = |x: &[f64]| numerics::sparsemax_support(x).unwrap().support_size as u64;
        let report = numerics::finite_difference_check(
            &mut f,
            &z,
            &analytic,
            1e-6,
            1e-6,
            Some(&mut sig),
        );
        expect(report.passed(), "jacobian-vector product mismatch")
    });
    out
}

fn check_cmi() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let pv = |v: &[f64]| ProbabilityVector::new(v.to_vec()).unwrap();
    check(&mut out, "kl_zero_iff_equal", || {
        let p = pv(&[0.2, 0.5, 0.3]);
        let kl = numerics::categorical_kl(&p, &p).map_err(|e| e.to_string())?;
        expect(kl.abs() < 1e-12, "KL(p||p) must be 0")
    });
    check(&mut out, "kl_positive_when_different", || {
        let p = pv(&[0.9, 0.1]);
        let q = pv(&[0.5, 0.5]);
        let kl = numerics::categorical_kl(&p, &q).map_err(|e| e.to_string())?;
        expect(kl > 0.0, "KL must be positive")
    });
    check(&mut out, "kl_hand_value", || {
        let p = pv(&[0.5, 0.5]);
        let q = pv(&[0.75, 0.25]);
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        let kl = numerics::categorical_kl(&p, &q).map_err(|e| e.to_string())?;
        expect((kl - expected).abs() < 1e-12, "hand value mismatch")
    });
    check(&mut out, "kl_clamp_keeps_zero_support_finite", || {
        let p = pv(&[1.0, 0.0]);
        let q = pv(&[0.0, 1.0]);
        let kl = numerics::categorical_kl(&p, &q).map_err(|e| e.to_string())?;
        expect(kl.is_finite() && kl > 0.0, "clamped KL must be finite")
    });
    check(&mut out, "gibbs_inequality_random", || {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let p = pv(&raw.iter().map(|v| v / s).collect::<Vec<_>>());
            let raw2: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s2: f64 = raw2.iter().sum();
            let q = pv(&raw2.iter().map(|v| v / s2).collect::<Vec<_>>());
            let kl = numerics::categorical_kl(&p, &q).map_err(|e| e.to_string())?;
            if kl < -1e-12 {
                return Err(format!("negative KL {kl}"));
            }
        }
        Ok(())
    });
    out
}

fn check_mixer() -> Vec<CheckResult> {
    let mut out = Vec::new();
    check(&mut out, "qtot_monotone_in_agent_values", || {
        let (mc, _) = small_model();
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for trial in 0..30 {
            let store = ParamStore::init_uniform(mc.build_layout(), &mut rng);
            let state = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
            let qs = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let value = |qs: &[f64; 2]| {
                let mut tape = Tape::new();
                let qn = tape.constant(Array2::from_shape_vec((1, 2), qs.to_vec()).unwrap());
                let mask: BlockMask = Rc::new(vec![vec![true; 3]]);
                let m = mixer::mixer_forward(&mut tape, &store, false, &mc, &state, &mask, qn);
                tape.value(m.q_tot)[(0, 0)]
            };
            let base = value(&qs);
            for a in 0..2 {
                let mut bumped = qs;
                bumped[a] += 0.5;
                if value(&bumped) < base - 1e-12 {
                    return Err(format!("trial {trial}: raising agent {a} lowered Q_tot"));
                }
            }
        }
        Ok(())
    });
    check(&mut out, "vdn_is_plain_sum", || {
        let v = mixer::vdn_mix(&[1.5, -0.5, 2.0]).map_err(|e| e.to_string())?;
        expect((v - 3.0).abs() < 1e-12, "expected 3.0")
    });
    check(&mut out, "td_targets_terminal_and_bootstrap", || {
        let y = mixer::td_targets(&[1.0, 5.0], &[false, true], &[2.0, 9.0], 0.99);
        expect(
            (y[0] - 2.98).abs() < 1e-12 && y[1] == 5.0,
            "expected (2.98, 5.0)",
        )
    });
    out
}
