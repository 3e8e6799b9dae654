//! Episode-replay training loop: epsilon-greedy collection into a FIFO
//! episode buffer, batched TD learning through the mixer with the auxiliary
//! contrastive-disagreement and conditional-mutual-information losses, a
//! periodically synced target network, RMSprop with gradient clipping, and
//! CSV metrics plus binary checkpoints.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::env::{self, Observation, Split, TaskSpec};
use crate::error::{OptError, Result};
use crate::model::{mixer, utility, MixerKind, ModelConfig};
use crate::params::{ParamStore, RmsProp};
use crate::tape::{BlockMask, NodeId, Tape};

/// One stored episode. Index t in 0..=T for observations and states
/// (entry T is the post-terminal frame used for bootstrapping), t in 0..T
/// for actions, rewards and terminal flags.
#[derive(Debug, Clone)]
pub struct Episode {
    pub task: TaskSpec,
    /// Stacked per-agent observations, each (n_agents * max_entities, d_e).
    pub obs: Vec<Array2<f64>>,
    /// Entity masks per agent block.
    pub masks: Vec<Vec<Vec<bool>>>,
    pub avail: Vec<Vec<Vec<bool>>>,
    /// Global states, each (max_entities, d_e).
    pub states: Vec<Array2<f64>>,
    pub state_masks: Vec<Vec<bool>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub win: bool,
    pub captures: usize,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalStats {
    pub episodes: usize,
    pub mean_return: f64,
    /// Fraction of episodes where every prey was captured.
    pub win_rate: f64,
    /// Captured prey / total prey over all episodes.
    pub capture_rate: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    pub loss: f64,
    pub td_loss: f64,
    pub cd_loss: f64,
    pub cmi_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub env_steps: u64,
    pub split: Split,
    pub stats: EvalStats,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub env_steps: u64,
    pub grad_steps: u64,
    pub early_stopped: bool,
    pub eval_history: Vec<EvalRow>,
    pub final_eval: Vec<(Split, EvalStats)>,
}

fn stack_obs(obs: &[Observation], m: usize, d_e: usize) -> (Array2<f64>, Vec<Vec<bool>>) {
    let na = obs.len();
    let mut stacked = Array2::zeros((na * m, d_e));
    let mut masks = Vec::with_capacity(na);
    for (a, o) in obs.iter().enumerate() {
        stacked.slice_mut(s![a * m..(a + 1) * m, ..]).assign(&o.features);
        masks.push(o.entity_mask.clone());
    }
    (stacked, masks)
}

/// Runs one episode with the given exploration rate and records every frame.
pub fn collect_episode(
    cfg: &RunConfig,
    mc: &ModelConfig,
    store: &ParamStore,
    split: Split,
    epsilon: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Episode> {
    let m = mc.max_entities;
    let task = env::sample_task(split, &cfg.env, rng)?;
    let (mut state, mut obs) = env::reset(&task, m, rng)?;
    let na = task.n_agents;
    let self_rows: Rc<Vec<usize>> = Rc::new((0..na).map(|a| a * m + a).collect());
    let mut h = Array2::zeros((na, mc.d_h));
    let mut ep = Episode {
        task,
        obs: Vec::new(),
        masks: Vec::new(),
        avail: Vec::new(),
        states: Vec::new(),
        state_masks: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        terminals: Vec::new(),
        win: false,
        captures: 0,
    };
    loop {
        let (stacked, masks) = stack_obs(&obs, m, mc.d_e);
        let avail: Vec<Vec<bool>> = obs.iter().map(|o| o.available_actions.clone()).collect();
        let (gstate, gmask) = env::global_state(&state, m);
        ep.obs.push(stacked.clone());
        ep.masks.push(masks.clone());
        ep.avail.push(avail.clone());
        ep.states.push(gstate);
        ep.state_masks.push(gmask);
        if state.done {
            break;
        }

        let mut tape = Tape::new();
        let h_prev = tape.constant(h.clone());
        let mask: BlockMask = Rc::new(masks);
        let step = utility::utility_forward(
            &mut tape,
            store,
            false,
            mc,
            &stacked,
            &mask,
            self_rows.clone(),
            h_prev,
        );
        let qv = tape.value(step.q).clone();
        h = tape.value(step.h).clone();
        let actions: Vec<usize> = (0..na)
            .map(|a| utility::select_action(&qv.row(a).to_vec(), &avail[a], epsilon, rng))
            .collect::<Result<_>>()?;
        let result = env::step(&mut state, &actions, &cfg.env, m, rng)?;
        ep.actions.push(actions);
        ep.rewards.push(result.reward);
        ep.terminals.push(result.done);
        ep.captures += result.captures;
        ep.win = result.win;
        obs = result.observations;
    }
    Ok(ep)
}

/// Greedy evaluation on a split with its own RNG stream, so identical
/// parameters and seed give identical results.
pub fn evaluate(
    cfg: &RunConfig,
    mc: &ModelConfig,
    store: &ParamStore,
    split: Split,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut total_return = 0.0;
    let mut wins = 0usize;
    let mut captured = 0usize;
    let mut prey_total = 0usize;
    let mut length = 0usize;
    for _ in 0..episodes {
        let ep = collect_episode(cfg, mc, store, split, 0.0, &mut rng)?;
        total_return += ep.episode_return();
        wins += ep.win as usize;
        captured += ep.captures;
        prey_total += ep.task.n_prey;
        length += ep.len();
    }
    let n = episodes.max(1) as f64;
    Ok(EvalStats {
        episodes,
        mean_return: total_return / n,
        win_rate: wins as f64 / n,
        capture_rate: captured as f64 / prey_total.max(1) as f64,
        mean_length: length as f64 / n,
    })
}

/// FIFO episode buffer with uniform sampling.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, ep: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Uniform sample of `n` distinct episodes.
    pub fn sample<'a, R: Rng>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Episode> {
        rand::seq::index::sample(rng, self.episodes.len(), n.min(self.episodes.len()))
            .iter()
            .map(|i| &self.episodes[i])
            .collect()
    }
}

/// Per-batch normalizers shared by every gradient-accumulation chunk, so
/// chunked accumulation reproduces the whole-batch gradient exactly.
struct BatchWeights {
    td: f64,
    cd: f64,
    cmi: f64,
}

fn batch_weights(batch: &[&Episode], mc: &ModelConfig) -> BatchWeights {
    let mut td = 0.0;
    let mut cd = 0.0;
    let mut cmi = 0.0;
    for ep in batch {
        let t = ep.len() as f64;
        let na = ep.task.n_agents as f64;
        td += t;
        // one CD term per attention site per layer: every agent plus the
        // mixer when it runs its own stack
        let mixer_sites = match mc.mixer {
            MixerKind::Qmix => 1.0,
            MixerKind::Vdn => 0.0,
        };
        cd += t * (na + mixer_sites) * mc.n_layers as f64;
        cmi += t * na;
    }
    BatchWeights { td, cd, cmi }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub mc: ModelConfig,
    pub params: ParamStore,
    pub target: ParamStore,
    opt: RmsProp,
    pub buffer: ReplayBuffer,
    rng: ChaCha20Rng,
    pub env_steps: u64,
    pub grad_steps: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = cfg.model_config();
        let layout = mc.build_layout();
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.train.seed);
        let params = ParamStore::init_uniform(layout.clone(), &mut rng);
        let mut target = ParamStore::zeros(layout);
        target.copy_from(&params);
        let opt = RmsProp::new(
            cfg.train.lr,
            cfg.train.rmsprop_alpha,
            cfg.train.rmsprop_eps,
            params.data.len(),
        );
        let buffer = ReplayBuffer::new(cfg.train.buffer_episodes);
        Ok(Self {
            mc,
            params,
            target,
            opt,
            buffer,
            rng,
            env_steps: 0,
            grad_steps: 0,
            cfg,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            env_steps: self.env_steps,
            grad_steps: self.grad_steps,
            params: self.params.data.clone(),
            target_params: self.target.data.clone(),
            opt_sq: self.opt.sq_state().to_vec(),
        }
    }

    /// Restores parameters, optimizer state and counters. The replay buffer
    /// and RNG stream restart fresh.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config.clone())?;
        if ck.params.len() != t.params.data.len() {
            return Err(OptError::Checkpoint(format!(
                "parameter count mismatch: {} stored vs {} expected",
                ck.params.len(),
                t.params.data.len()
            )));
        }
        t.params.data.copy_from_slice(&ck.params);
        t.target.data.copy_from_slice(&ck.target_params);
        t.opt.set_sq_state(&ck.opt_sq)?;
        t.env_steps = ck.env_steps;
        t.grad_steps = ck.grad_steps;
        Ok(t)
    }

    pub fn collect(&mut self, split: Split, epsilon: f64) -> Result<Episode> {
        collect_episode(&self.cfg, &self.mc, &self.params, split, epsilon, &mut self.rng)
    }

    /// One gradient step over a sampled batch of episodes.
    pub fn train_batch(&mut self) -> Result<TrainStats> {
        let batch = self
            .buffer
            .sample(self.cfg.train.batch_episodes, &mut self.rng);
        if batch.is_empty() {
            return Err(OptError::InvalidState("empty replay buffer".into()));
        }
        let weights = batch_weights(&batch, &self.mc);
        let mut grads = vec![0.0; self.params.data.len()];
        let mut td_sum = 0.0;
        let mut cd_sum = 0.0;
        let mut cmi_sum = 0.0;
        for chunk in batch.chunks(self.cfg.train.accum_chunk) {
            let (td, cd, cmi) = self.chunk_backward(chunk, &weights, &mut grads)?;
            td_sum += td;
            cd_sum += cd;
            cmi_sum += cmi;
        }
        let grad_norm = self
            .opt
            .step(&mut self.params, &mut grads, self.cfg.train.grad_clip)?;
        self.grad_steps += 1;
        if self.grad_steps % self.cfg.train.target_sync_interval as u64 == 0 {
            mixer::sync_target(&self.params, &mut self.target);
        }
        let td_loss = td_sum / weights.td;
        let cd_loss = cd_sum / weights.cd.max(1.0);
        let cmi_loss = cmi_sum / weights.cmi;
        Ok(TrainStats {
            loss: td_loss
                + self.cfg.loss.alpha * cd_loss
                + self.cfg.loss.beta * cmi_loss,
            td_loss,
            cd_loss,
            cmi_loss,
            grad_norm,
        })
    }

    /// Forward + backward over one chunk of episodes; returns the raw
    /// (unnormalized) TD / CD / CMI sums.
    fn chunk_backward(
        &self,
        chunk: &[&Episode],
        weights: &BatchWeights,
        grads: &mut [f64],
    ) -> Result<(f64, f64, f64)> {
        let mc = &self.mc;
        let m = mc.max_entities;
        let n_ep = chunk.len();
        let t_max = chunk.iter().map(|e| e.len()).max().unwrap();
        // agent-block offsets over the chunk
        let mut block_off = Vec::with_capacity(n_ep);
        let mut ba = 0usize;
        for ep in chunk {
            block_off.push(ba);
            ba += ep.task.n_agents;
        }
        let self_rows: Rc<Vec<usize>> = Rc::new(
            chunk
                .iter()
                .zip(&block_off)
                .flat_map(|(ep, &off)| {
                    (0..ep.task.n_agents).map(move |a| (off + a) * m + a)
                })
                .collect(),
        );
        // gather index + presence mask mapping agent blocks into the fixed
        // (episode, max_agents) grid of the mixer input
        let gather_idx: Rc<Vec<usize>> = Rc::new(
            (0..n_ep)
                .flat_map(|e| {
                    let off = block_off[e];
                    let na = chunk[e].task.n_agents;
                    (0..mc.max_agents).map(move |a| if a < na { off + a } else { 0 })
                })
                .collect(),
        );
        let presence = Rc::new(Array2::from_shape_fn((n_ep, mc.max_agents), |(e, a)| {
            (a < chunk[e].task.n_agents) as i32 as f64
        }));

        let targets = self.chunk_targets(chunk, &block_off, ba, t_max)?;

        let mut tape = Tape::new();
        let presence_node = tape.constant((*presence).clone());
        let mut h = tape.constant(Array2::zeros((ba, mc.d_h)));
        let mut td_acc: Option<NodeId> = None;
        let mut cd_acc: Option<NodeId> = None;
        let mut cmi_acc: Option<NodeId> = None;
        let push = |tape: &mut Tape, acc: &mut Option<NodeId>, v: NodeId| {
            *acc = Some(match *acc {
                Some(a) => tape.add(a, v),
                None => v,
            });
        };
        for t in 0..t_max {
            let (obs, masks, actions, fill) = self.stack_chunk_step(chunk, t, ba);
            let mask: BlockMask = Rc::new(masks);
            let step = utility::utility_forward(
                &mut tape,
                &self.params,
                true,
                mc,
                &obs,
                &mask,
                self_rows.clone(),
                h,
            );
            h = step.h;

            // chosen-action values routed into the mixer grid
            let qsel = tape.select_per_row(step.q, Rc::new(actions));
            let qg = tape.gather_rows(qsel, gather_idx.clone());
            let qg = tape.reshape(qg, n_ep, mc.max_agents);
            let agent_qs = tape.mul(qg, presence_node);

            let (q_tot, mixer_cd) = match mc.mixer {
                MixerKind::Qmix => {
                    let (state, smask) = self.stack_chunk_state(chunk, t);
                    let smask: BlockMask = Rc::new(smask);
                    let out = mixer::mixer_forward(
                        &mut tape,
                        &self.params,
                        true,
                        mc,
                        &state,
                        &smask,
                        agent_qs,
                    );
                    (out.q_tot, out.cd_blocks)
                }
                MixerKind::Vdn => {
                    let ones = tape.constant(Array2::ones((mc.max_agents, 1)));
                    (tape.matmul(agent_qs, ones), Vec::new())
                }
            };

            // TD term with padded timesteps weighted out
            let y = tape.constant(Array2::from_shape_fn((n_ep, 1), |(e, _)| {
                targets[t][e]
            }));
            let ep_fill = Rc::new(Array2::from_shape_fn((n_ep, 1), |(e, _)| {
                (t < chunk[e].len()) as i32 as f64
            }));
            let diff = tape.sub(q_tot, y);
            let sq = tape.mul(diff, diff);
            let td_t = tape.weighted_sum_all(sq, ep_fill.clone());
            push(&mut tape, &mut td_acc, td_t);

            let block_fill = Rc::new(Array2::from_shape_vec((ba, 1), fill).unwrap());
            for &cd in &step.cd_blocks {
                let v = tape.weighted_sum_all(cd, block_fill.clone());
                push(&mut tape, &mut cd_acc, v);
            }
            for &cd in &mixer_cd {
                let v = tape.weighted_sum_all(cd, ep_fill.clone());
                push(&mut tape, &mut cd_acc, v);
            }
            let v = tape.weighted_sum_all(step.cmi_blocks, block_fill);
            push(&mut tape, &mut cmi_acc, v);
        }

        let td_acc = td_acc.expect("at least one timestep");
        let cmi_acc = cmi_acc.expect("at least one timestep");
        let td_part = tape.scale(td_acc, 1.0 / weights.td);
        let cmi_part = tape.scale(cmi_acc, self.cfg.loss.beta / weights.cmi);
        let mut loss = tape.add(td_part, cmi_part);
        let mut cd_val = 0.0;
        if let Some(cd_acc) = cd_acc {
            let cd_part = tape.scale(cd_acc, self.cfg.loss.alpha / weights.cd);
            loss = tape.add(loss, cd_part);
            cd_val = tape.value(cd_acc)[(0, 0)];
        }
        let td_val = tape.value(td_acc)[(0, 0)];
        let cmi_val = tape.value(cmi_acc)[(0, 0)];
        tape.backward(loss, grads);
        Ok((td_val, cd_val, cmi_val))
    }

    /// TD targets y[t][e] from the target network: per-agent greedy values at
    /// t+1 mixed under the target mixer. Runs on throwaway tapes.
    fn chunk_targets(
        &self,
        chunk: &[&Episode],
        block_off: &[usize],
        ba: usize,
        t_max: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mc = &self.mc;
        let m = mc.max_entities;
        let n_ep = chunk.len();
        let self_rows: Rc<Vec<usize>> = Rc::new(
            chunk
                .iter()
                .zip(block_off)
                .flat_map(|(ep, &off)| {
                    (0..ep.task.n_agents).map(move |a| (off + a) * m + a)
                })
                .collect(),
        );
        let mut h = Array2::zeros((ba, mc.d_h));
        let mut next_qtot = vec![vec![0.0; n_ep]; t_max + 1];
        for t in 0..=t_max {
            let (obs, masks, _, _) = self.stack_chunk_step(chunk, t, ba);
            let mask: BlockMask = Rc::new(masks);
            let mut tape = Tape::new();
            let h_prev = tape.constant(h);
            let step = utility::utility_forward(
                &mut tape,
                &self.target,
                false,
                mc,
                &obs,
                &mask,
                self_rows.clone(),
                h_prev,
            );
            let qv = tape.value(step.q).clone();
            h = tape.value(step.h).clone();
            if t == 0 {
                continue;
            }
            // per-agent greedy value over available actions
            let mut agent_qs = Array2::zeros((n_ep, mc.max_agents));
            for (e, ep) in chunk.iter().enumerate() {
                let idx = t.min(ep.len());
                for a in 0..ep.task.n_agents {
                    let row = qv.row(block_off[e] + a).to_vec();
                    let greedy = utility::greedy_action(&row, &ep.avail[idx][a]);
                    agent_qs[(e, a)] = row[greedy];
                }
            }
            match mc.mixer {
                MixerKind::Qmix => {
                    let (state, smask) = self.stack_chunk_state(chunk, t);
                    let smask: BlockMask = Rc::new(smask);
                    let mut mtape = Tape::new();
                    let qn = mtape.constant(agent_qs);
                    let out = mixer::mixer_forward(
                        &mut mtape,
                        &self.target,
                        false,
                        mc,
                        &state,
                        &smask,
                        qn,
                    );
                    let qt = mtape.value(out.q_tot);
                    for e in 0..n_ep {
                        next_qtot[t][e] = qt[(e, 0)];
                    }
                }
                MixerKind::Vdn => {
                    for e in 0..n_ep {
                        next_qtot[t][e] = agent_qs.row(e).sum();
                    }
                }
            }
        }
        let gamma = self.cfg.train.gamma;
        let mut y = vec![vec![0.0; n_ep]; t_max];
        for t in 0..t_max {
            for (e, ep) in chunk.iter().enumerate() {
                if t >= ep.len() {
                    continue;
                }
                y[t][e] = mixer::td_targets(
                    &[ep.rewards[t]],
                    &[ep.terminals[t]],
                    &[next_qtot[t + 1][e]],
                    gamma,
                )[0];
            }
        }
        Ok(y)
    }

    /// Stacks observation frame `min(t, T_e)` of every chunk episode.
    /// Returns (obs, masks, chosen actions per block, per-block fill weight).
    fn stack_chunk_step(
        &self,
        chunk: &[&Episode],
        t: usize,
        ba: usize,
    ) -> (Array2<f64>, Vec<Vec<bool>>, Vec<usize>, Vec<f64>) {
        let mc = &self.mc;
        let m = mc.max_entities;
        let mut obs = Array2::zeros((ba * m, mc.d_e));
        let mut masks = Vec::with_capacity(ba);
        let mut actions = Vec::with_capacity(ba);
        let mut fill = Vec::with_capacity(ba);
        let mut row = 0usize;
        for ep in chunk {
            let idx = t.min(ep.len());
            let na = ep.task.n_agents;
            obs.slice_mut(s![row * m..(row + na) * m, ..]).assign(&ep.obs[idx]);
            for a in 0..na {
                masks.push(ep.masks[idx][a].clone());
                actions.push(if t < ep.len() { ep.actions[t][a] } else { 0 });
                fill.push((t < ep.len()) as i32 as f64);
            }
            row += na;
        }
        (obs, masks, actions, fill)
    }

    fn stack_chunk_state(&self, chunk: &[&Episode], t: usize) -> (Array2<f64>, Vec<Vec<bool>>) {
        let m = self.mc.max_entities;
        let mut state = Array2::zeros((chunk.len() * m, self.mc.d_e));
        let mut masks = Vec::with_capacity(chunk.len());
        for (e, ep) in chunk.iter().enumerate() {
            let idx = t.min(ep.len());
            state
                .slice_mut(s![e * m..(e + 1) * m, ..])
                .assign(&ep.states[idx]);
            masks.push(ep.state_masks[idx].clone());
        }
        (state, masks)
    }

    pub fn evaluate(&self, split: Split, episodes: usize, seed: u64) -> Result<EvalStats> {
        evaluate(&self.cfg, &self.mc, &self.params, split, episodes, seed)
    }

    fn eval_seed(&self) -> u64 {
        self.cfg
            .train
            .seed
            .wrapping_mul(1_000_003)
            .wrapping_add(self.env_steps)
    }

    /// Full training run: collection, learning, periodic evaluation on every
    /// split, CSV metrics, checkpoints, optional early stopping.
    pub fn run(&mut self, out_dir: &Path) -> Result<RunSummary> {
        std::fs::create_dir_all(out_dir)?;
        let mut metrics = std::fs::File::create(out_dir.join("metrics.csv"))?;
        writeln!(
            metrics,
            "env_steps,grad_steps,epsilon,loss,td_loss,cd_loss,cmi_loss,grad_norm,episode_return,episode_win"
        )?;
        let mut evals = std::fs::File::create(out_dir.join("eval.csv"))?;
        writeln!(
            evals,
            "env_steps,split,episodes,mean_return,win_rate,capture_rate,mean_length"
        )?;
        let splits = [
            Split::Train,
            Split::UnseenCapability,
            Split::UnseenScale,
            Split::UnseenBoth,
        ];
        let mut history = Vec::new();
        let mut early_stopped = false;
        let t = self.cfg.train.clone();
        // schedule relative to the current step count so a resumed run keeps
        // the configured cadence instead of firing immediately
        let mut next_eval = self.env_steps + t.eval_interval as u64;
        let mut next_ckpt = self.env_steps + t.checkpoint_interval as u64;
        while self.env_steps < t.total_env_steps as u64 {
            let epsilon = utility::epsilon_schedule(
                self.env_steps,
                t.epsilon_start,
                t.epsilon_end,
                t.epsilon_anneal_steps as u64,
            );
            let ep = self.collect(Split::Train, epsilon)?;
            self.env_steps += ep.len() as u64;
            let ep_return = ep.episode_return();
            let ep_win = ep.win;
            self.buffer.push(ep);
            if self.buffer.len() >= t.batch_episodes {
                let stats = self.train_batch()?;
                writeln!(
                    metrics,
                    "{},{},{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3},{}",
                    self.env_steps,
                    self.grad_steps,
                    epsilon,
                    stats.loss,
                    stats.td_loss,
                    stats.cd_loss,
                    stats.cmi_loss,
                    stats.grad_norm,
                    ep_return,
                    ep_win as u8,
                )?;
            }
            if t.eval_interval > 0 && self.env_steps >= next_eval {
                next_eval += t.eval_interval as u64;
                let seed = self.eval_seed();
                for split in splits {
                    let stats = self.evaluate(split, t.eval_episodes, seed)?;
                    write_eval_row(&mut evals, self.env_steps, split, &stats)?;
                    history.push(EvalRow {
                        env_steps: self.env_steps,
                        split,
                        stats,
                    });
                    if split == Split::Train
                        && t.early_stop_win_rate > 0.0
                        && stats.win_rate >= t.early_stop_win_rate
                    {
                        early_stopped = true;
                    }
                }
                if early_stopped {
                    break;
                }
            }
            if t.checkpoint_interval > 0 && self.env_steps >= next_ckpt {
                next_ckpt += t.checkpoint_interval as u64;
                self.checkpoint()
                    .save(&out_dir.join(format!("step_{}.ckpt", self.env_steps)))?;
            }
        }
        let seed = self.eval_seed().wrapping_add(1);
        let mut final_eval = Vec::new();
        for split in splits {
            let stats = self.evaluate(split, t.eval_episodes, seed)?;
            write_eval_row(&mut evals, self.env_steps, split, &stats)?;
            final_eval.push((split, stats));
        }
        self.checkpoint().save(&out_dir.join("final.ckpt"))?;
        Ok(RunSummary {
            env_steps: self.env_steps,
            grad_steps: self.grad_steps,
            early_stopped,
            eval_history: history,
            final_eval,
        })
    }
}

fn write_eval_row(
    f: &mut std::fs::File,
    env_steps: u64,
    split: Split,
    s: &EvalStats,
) -> Result<()> {
    writeln!(
        f,
        "{},{:?},{},{:.4},{:.4},{:.4},{:.2}",
        env_steps, split, s.episodes, s.mean_return, s.win_rate, s.capture_rate, s.mean_length
    )?;
    Ok(())
}
