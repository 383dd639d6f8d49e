//! The iterative masked-diffusion sampling loop.
//!
//! Four modes share one step routine:
//!
//! * `baseline`: every position is recomputed at every step.
//! * `surelock`: positions whose step-wise KL falls to `ε` (and that pass the
//!   optional confidence gate) are locked for good. Their K/V are cached and
//!   they leave the per-step compute.
//! * `selection`: a fixed fraction `k` of the rows is recomputed each step;
//!   the rest reuse their last K/V and posterior.
//! * `hybrid`: selection applied to the positions that are not yet locked.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{flops_base_step, flops_step_actual, GemmCounter};
use crate::lockctl::{
    evaluate_locks, probe_unlock, uncertainty, LockEvent, LockInputs, LockPolicy, LockState,
};
use crate::model::{forward_partial, LayerKVCache, Weights};
use crate::numkit::{kl_from_logits, log_softmax, percentile_nearest_rank, Posterior};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Surelock,
    Selection,
    Hybrid,
}

impl Mode {
    pub fn locks(self) -> bool {
        matches!(self, Mode::Surelock | Mode::Hybrid)
    }

    pub fn selects(self) -> bool {
        matches!(self, Mode::Selection | Mode::Hybrid)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "surelock" => Ok(Mode::Surelock),
            "selection" => Ok(Mode::Selection),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Surelock => "surelock",
            Mode::Selection => "selection",
            Mode::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub steps: usize,
    /// Block length; `None` means one block spanning the whole generation region.
    pub block_len: Option<usize>,
    pub temperature: f64,
    pub policy: LockPolicy,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for RunConfig {
    /// 16 prompt and 16 generated positions over 16 steps, with locking.
    fn default() -> Self {
        Self::new(16, 16, 16, Mode::Surelock)
    }
}

impl RunConfig {
    pub fn new(prompt_len: usize, gen_len: usize, steps: usize, mode: Mode) -> Self {
        Self {
            prompt_len,
            gen_len,
            steps,
            block_len: None,
            temperature: 0.0,
            policy: LockPolicy::default(),
            mode,
            seed: 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_len + self.gen_len
    }

    pub fn block_len(&self) -> usize {
        self.block_len.unwrap_or(self.gen_len)
    }

    pub fn num_blocks(&self) -> usize {
        self.gen_len / self.block_len()
    }

    pub fn validate(&self, max_seq: usize) -> Result<()> {
        if self.gen_len == 0 {
            return Err(Error::InvalidConfig("gen_len must be positive".into()));
        }
        if self.steps == 0 || self.steps > self.gen_len {
            return Err(Error::InvalidConfig(format!(
                "steps {} must lie in [1, gen_len = {}]",
                self.steps, self.gen_len
            )));
        }
        let bl = self.block_len();
        if bl == 0 || !self.gen_len.is_multiple_of(bl) {
            return Err(Error::InvalidConfig(format!(
                "block length {bl} does not divide gen_len {}",
                self.gen_len
            )));
        }
        if !self.steps.is_multiple_of(self.num_blocks()) || self.steps / self.num_blocks() > bl {
            return Err(Error::InvalidConfig(format!(
                "steps {} cannot be split evenly over {} blocks of length {bl}",
                self.steps,
                self.num_blocks()
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature {} must be finite and ≥ 0",
                self.temperature
            )));
        }
        if self.seq_len() > max_seq {
            return Err(Error::InvalidConfig(format!(
                "sequence length {} exceeds the model's max_seq {max_seq}",
                self.seq_len()
            )));
        }
        self.policy.validate()?;
        if self.mode.selects() && self.policy.hybrid_fraction.is_none() {
            return Err(Error::InvalidConfig(format!(
                "mode {} requires a hybrid fraction k",
                self.mode
            )));
        }
        Ok(())
    }
}

/// Per-step unmask counts: the first `N_gen mod S` steps get `⌈N_gen/S⌉`,
/// the remaining steps `⌊N_gen/S⌋`.
pub fn unmask_schedule(gen_len: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > gen_len {
        return Err(Error::InvalidConfig(format!(
            "cannot unmask {gen_len} positions in {steps} steps"
        )));
    }
    let base = gen_len / steps;
    let extra = gen_len % steps;
    Ok((0..steps).map(|t| base + usize::from(t < extra)).collect())
}

/// Largest probability among committable ids (every id but MASK) and the
/// lowest id attaining it.
fn best_committable(p: &Posterior, mask_id: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (v, &lp) in p.log_probs().iter().enumerate() {
        if v != mask_id && lp > best.1 {
            best = (v, lp);
        }
    }
    (best.0, best.1.exp())
}

/// Commits `k` masked positions inside `block`, most confident first (ties by
/// lowest index). Returns `(position, token)` pairs in position order.
///
/// Confidence is the largest committable probability of the raw posterior.
/// At `τ = 0` the committed token is its argmax; otherwise it is drawn from
/// the τ-tempered posterior. MASK is never committed.
pub fn update_mask(
    posteriors: &[Option<Posterior>],
    masked: &[bool],
    k: usize,
    block: Range<usize>,
    temperature: f64,
    mask_id: usize,
    rng: &mut SeededRng,
) -> Result<Vec<(usize, usize)>> {
    let mut pool: Vec<(usize, f64)> = Vec::new();
    for i in block {
        if masked[i] {
            let p = posteriors[i]
                .as_ref()
                .ok_or_else(|| Error::InvalidState(format!("masked position {i} has no posterior")))?;
            pool.push((i, best_committable(p, mask_id).1));
        }
    }
    if k > pool.len() {
        return Err(Error::InvalidState(format!(
            "asked to unmask {k} positions but only {} are masked in the block",
            pool.len()
        )));
    }
    pool.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = pool.into_iter().take(k).map(|(i, _)| i).collect();
    chosen.sort_unstable();

    let mut out = Vec::with_capacity(k);
    for i in chosen {
        let p = posteriors[i].as_ref().expect("checked above");
        let token = if temperature == 0.0 {
            best_committable(p, mask_id).0
        } else {
            let lp = p.log_probs();
            let max = lp
                .iter()
                .enumerate()
                .filter(|(v, _)| *v != mask_id)
                .map(|(_, l)| *l)
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(v, l)| {
                    if v == mask_id {
                        0.0
                    } else {
                        ((l - max) / temperature).exp()
                    }
                })
                .collect();
            rng.categorical(&weights)
        };
        out.push((i, token));
    }
    Ok(out)
}

/// The `⌈k·|active|⌉` active positions with the largest previous-step KL, ties
/// by lowest index. A position without a previous-step KL ranks as `+∞`.
/// Returned in ascending position order.
pub fn select_rows_hybrid(active: &[usize], prev_divergence: &[Option<f64>], k: f64) -> Result<Vec<usize>> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::InvalidInput(format!("fraction {k} outside (0, 1]")));
    }
    if active.is_empty() {
        return Ok(Vec::new());
    }
    // Tolerate products like 0.8·5 landing a hair above an integer.
    let quota = ((k * active.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut ranked: Vec<(usize, f64)> = active
        .iter()
        .map(|&i| (i, prev_divergence[i].unwrap_or(f64::INFINITY)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut rows: Vec<usize> = ranked.into_iter().take(quota).map(|(i, _)| i).collect();
    rows.sort_unstable();
    Ok(rows)
}

/// One step of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    /// Token positions B·N (the sampler runs one sequence, so N).
    pub positions: usize,
    /// M_t: non-locked positions at the start of the step.
    pub active: usize,
    /// C_t: rows actually recomputed.
    pub computed: usize,
    pub f_base: u64,
    /// Instrumented GEMM count of the step.
    pub f_actual: u64,
    pub head_flops: u64,
    pub probe_flops: u64,
    pub computed_rows: Vec<usize>,
    /// Computed rows that were unmasked after this step's unmasking (the lock candidates).
    pub candidates: Vec<usize>,
    pub newly_unmasked: Vec<usize>,
    pub committed_tokens: Vec<usize>,
    pub newly_locked: Vec<usize>,
    pub newly_unlocked: Vec<usize>,
    /// D_t per position; `Some(∞)` at t = 1, `None` when the row was not computed.
    pub divergence: Vec<Option<f64>>,
    pub uncertainty: Vec<Option<f64>>,
    /// Raw logits of the rows computed this step.
    pub logits: Vec<Option<Vec<f64>>>,
    /// Reported log-posterior of every position after the step (frozen for locked rows).
    pub log_posteriors: Vec<Vec<f64>>,
    pub locked_after: Vec<bool>,
    pub masked_after: Vec<bool>,
    pub elapsed_secs: f64,
}

impl StepTrace {
    pub fn ratio(&self) -> f64 {
        if self.f_base == 0 {
            0.0
        } else {
            self.f_actual as f64 / self.f_base as f64
        }
    }

    /// Mean finite D over the computed unmasked rows, if any.
    pub fn mean_divergence(&self) -> Option<f64> {
        let finite: Vec<f64> = self
            .candidates
            .iter()
            .filter_map(|&i| self.divergence[i])
            .filter(|d| d.is_finite())
            .collect();
        (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
    }
}

/// Everything a sampling loop carries between steps.
#[derive(Debug, Clone)]
pub struct SamplerState {
    tokens: Vec<usize>,
    masked: Vec<bool>,
    locks: LockState,
    /// Most recent K/V of every row that has been computed at least once.
    recent: Vec<LayerKVCache>,
    posteriors: Vec<Option<Posterior>>,
    prev_divergence: Vec<Option<f64>>,
    t: usize,
    rng: SeededRng,
}

impl SamplerState {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn locks(&self) -> &LockState {
        &self.locks
    }

    pub fn posterior(&self, i: usize) -> Option<&Posterior> {
        self.posteriors[i].as_ref()
    }

    pub fn step_count(&self) -> usize {
        self.t
    }
}

/// A run in progress: configuration, weights and state.
#[derive(Debug, Clone)]
pub struct Sampler<'w> {
    cfg: RunConfig,
    weights: &'w Weights,
    schedule: Vec<usize>,
    state: SamplerState,
}

impl<'w> Sampler<'w> {
    pub fn new(cfg: RunConfig, weights: &'w Weights, prompt: &[usize]) -> Result<Self> {
        let model = &weights.config;
        cfg.validate(model.max_seq)?;
        if prompt.len() != cfg.prompt_len {
            return Err(Error::InvalidInput(format!(
                "prompt has {} tokens, config says {}",
                prompt.len(),
                cfg.prompt_len
            )));
        }
        let mask_id = model.mask_id();
        if let Some(t) = prompt.iter().find(|&&t| t >= model.vocab_size || t == mask_id) {
            return Err(Error::InvalidInput(format!("prompt token {t} is not a committable id")));
        }
        let n = cfg.seq_len();
        let mut tokens = prompt.to_vec();
        tokens.resize(n, mask_id);
        let masked = (0..n).map(|i| i >= cfg.prompt_len).collect();
        let schedule = unmask_schedule(cfg.block_len(), cfg.steps / cfg.num_blocks())?;
        let state = SamplerState {
            tokens,
            masked,
            locks: LockState::new(model, n),
            recent: LayerKVCache::empty_stack(model, n),
            posteriors: vec![None; n],
            prev_divergence: vec![None; n],
            t: 0,
            rng: SeededRng::new(cfg.seed),
        };
        Ok(Self {
            cfg,
            weights,
            schedule,
            state,
        })
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn is_done(&self) -> bool {
        self.state.t >= self.cfg.steps
    }

    fn block_for_step(&self, t: usize) -> (Range<usize>, usize) {
        let per_block = self.schedule.len();
        let b = (t - 1) / per_block;
        let start = self.cfg.prompt_len + b * self.cfg.block_len();
        (start..start + self.cfg.block_len(), self.schedule[(t - 1) % per_block])
    }

    /// Advance one diffusion step.
    pub fn step(&mut self) -> Result<StepTrace> {
        if self.is_done() {
            return Err(Error::InvalidState("all steps already taken".into()));
        }
        let started = Instant::now();
        let w = self.weights;
        let model = &w.config;
        let n = self.state.tokens.len();
        let t = self.state.t + 1;
        let mode = self.cfg.mode;

        let active = self.state.locks.active();
        let computed_rows = if mode.selects() && active.iter().all(|&i| self.state.posteriors[i].is_some()) {
            let k = self.cfg.policy.hybrid_fraction.expect("validated");
            select_rows_hybrid(&active, &self.state.prev_divergence, k)?
        } else {
            // First step of a selection run has nothing to reuse.
            active.clone()
        };

        let caches = if mode.selects() {
            &self.state.recent
        } else {
            self.state.locks.caches()
        };
        let mut counter = GemmCounter::new();
        let output = forward_partial(w, &self.state.tokens, &computed_rows, caches, &mut counter)?;

        let f_base = flops_base_step(model, 1, n as u64);
        let f_expected = flops_step_actual(model, 1, n as u64, computed_rows.len() as u64)?;
        if counter.flops() != f_expected {
            return Err(Error::InternalConsistency(format!(
                "step {t}: counted {} GEMM FLOPs, formula gives {f_expected}",
                counter.flops()
            )));
        }

        let mut divergence = vec![None; n];
        let mut uncert = vec![None; n];
        let mut logits = vec![None; n];
        for (slot, &i) in computed_rows.iter().enumerate() {
            let post = log_softmax(&output.logits[slot])?;
            let d = match (&self.state.posteriors[i], t) {
                (Some(prev), t) if t > 1 => kl_from_logits(post.log_probs(), prev.log_probs())?,
                _ => f64::INFINITY,
            };
            divergence[i] = Some(d);
            uncert[i] = Some(uncertainty(&post));
            logits[i] = Some(output.logits[slot].clone());
            self.state.posteriors[i] = Some(post);
            for (cache, fresh) in self.state.recent.iter_mut().zip(&output.fresh_kv) {
                cache.store(i, fresh.key(slot), fresh.value(slot));
            }
        }

        let (block, k_t) = self.block_for_step(t);
        let unmasked = update_mask(
            &self.state.posteriors,
            &self.state.masked,
            k_t,
            block,
            self.cfg.temperature,
            model.mask_id(),
            &mut self.state.rng,
        )?;
        for &(i, tok) in &unmasked {
            self.state.tokens[i] = tok;
            self.state.masked[i] = false;
        }

        let candidates: Vec<usize> = computed_rows
            .iter()
            .copied()
            .filter(|&i| !self.state.masked[i])
            .collect();

        let mut newly_locked = Vec::new();
        let mut newly_unlocked = Vec::new();
        let mut probe_flops = 0;
        if mode.locks() {
            let d_all: Vec<f64> = divergence.iter().map(|d| d.unwrap_or(f64::INFINITY)).collect();
            let u_all: Vec<f64> = uncert.iter().map(|u| u.unwrap_or(1.0)).collect();
            newly_locked = evaluate_locks(
                &candidates,
                &d_all,
                &u_all,
                &self.cfg.policy,
                self.state.locks.history(),
                t,
            )?;
            self.state.locks.apply_locks(
                &newly_locked,
                t,
                LockInputs {
                    output: &output,
                    posteriors: &self.state.posteriors,
                    divergence: &d_all,
                    uncertainty: &u_all,
                    masked: &self.state.masked,
                },
            )?;

            let policy = &self.cfg.policy;
            if policy.unlock_enabled && t.is_multiple_of(policy.probe_period) {
                let probed: Vec<usize> = self
                    .state
                    .locks
                    .locked()
                    .into_iter()
                    .filter(|i| !newly_locked.contains(i))
                    .collect();
                let us: Vec<f64> = computed_rows.iter().filter_map(|&i| uncert[i]).collect();
                if !probed.is_empty() && !us.is_empty() {
                    let theta = percentile_nearest_rank(&us, policy.percentile)?;
                    let outcome = probe_unlock(
                        &self.state.locks,
                        w,
                        &self.state.tokens,
                        &probed,
                        &self.state.recent,
                        policy,
                        theta,
                        t,
                    )?;
                    probe_flops = outcome.flops;
                    self.state.locks.apply_unlocks(&outcome.unlock, t)?;
                    newly_unlocked = outcome.unlock.iter().map(|r| r.position).collect();
                }
            }
            self.state.locks.check_invariants()?;
        }

        self.state.prev_divergence = divergence.clone();
        self.state.t = t;

        let log_posteriors = (0..n)
            .map(|i| {
                self.state
                    .locks
                    .frozen_posterior(i)
                    .or(self.state.posteriors[i].as_ref())
                    .map(|p| p.log_probs().to_vec())
                    .unwrap_or_default()
            })
            .collect();

        Ok(StepTrace {
            t,
            positions: n,
            active: active.len(),
            computed: computed_rows.len(),
            f_base,
            f_actual: counter.flops(),
            head_flops: counter.head_flops(),
            probe_flops,
            computed_rows,
            candidates,
            newly_unmasked: unmasked.iter().map(|(i, _)| *i).collect(),
            committed_tokens: unmasked.iter().map(|(_, tok)| *tok).collect(),
            newly_locked,
            newly_unlocked,
            divergence,
            uncertainty: uncert,
            logits,
            log_posteriors,
            locked_after: self.state.locks.bitmap().to_vec(),
            masked_after: self.state.masked.clone(),
            elapsed_secs: started.elapsed().as_secs_f64(),
        })
    }
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub tokens: Vec<usize>,
    pub trace: Vec<StepTrace>,
    pub events: Vec<LockEvent>,
    pub elapsed_secs: f64,
}

impl RunOutput {
    pub fn total_flops(&self) -> u64 {
        self.trace.iter().map(|s| s.f_actual).sum()
    }

    pub fn total_base_flops(&self) -> u64 {
        self.trace.iter().map(|s| s.f_base).sum()
    }

    pub fn flops_ratio(&self) -> f64 {
        self.total_flops() as f64 / self.total_base_flops() as f64
    }

    /// Generated tokens per second over the whole run.
    pub fn e2e_tps(&self) -> f64 {
        let generated: usize = self.trace.iter().map(|s| s.newly_unmasked.len()).sum();
        generated as f64 / self.elapsed_secs.max(f64::MIN_POSITIVE)
    }

    /// Per-step newly unmasked tokens over the step's wall-clock time.
    pub fn step_tps(&self) -> Vec<f64> {
        self.trace
            .iter()
            .map(|s| s.newly_unmasked.len() as f64 / s.elapsed_secs.max(f64::MIN_POSITIVE))
            .collect()
    }
}

/// Initialize the generation region to MASK and run all `S` steps.
pub fn run_sampler(cfg: &RunConfig, w: &Weights, prompt: &[usize]) -> Result<RunOutput> {
    let started = Instant::now();
    let mut sampler = Sampler::new(cfg.clone(), w, prompt)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    while !sampler.is_done() {
        trace.push(sampler.step()?);
    }
    if sampler.state.masked.iter().any(|m| *m) {
        return Err(Error::InternalConsistency("positions left masked after the final step".into()));
    }
    Ok(RunOutput {
        tokens: sampler.state.tokens.clone(),
        events: sampler.state.locks.history().events().to_vec(),
        trace,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

/// A seeded prompt of committable ids.
pub fn random_prompt(vocab_size: usize, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = SeededRng::new(seed ^ 0x7072_6f6d_7074);
    (0..len)
        .map(|_| (rng.next_u64() % (vocab_size as u64 - 1)) as usize)
        .collect()
}
