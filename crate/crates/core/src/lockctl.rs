//! Lock control: the KL criterion with its optional confidence gate, lock
//! application, the closed-form threshold, and the optional unlock protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::GemmCounter;
use crate::model::{forward_partial, FrozenInputs, LayerKVCache, ModelConfig, Weights};
use crate::numkit::{kl_from_logits, log_softmax, percentile_nearest_rank, Posterior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockPolicy {
    /// KL threshold ε.
    pub epsilon: f64,
    /// Gate percentile m in `[0, 100]`.
    pub percentile: f64,
    pub gate_enabled: bool,
    pub unlock_enabled: bool,
    /// Probe period P in steps.
    pub probe_period: usize,
    pub epsilon_unlock: f64,
    /// A position must have been locked for strictly more than this many steps to unlock.
    pub min_locked_steps: usize,
    /// Steps after an unlock during which re-locking is refused.
    pub relock_cooldown: usize,
    /// Re-locks must satisfy `D ≤ relock_factor · ε`.
    pub relock_factor: f64,
    /// Fraction k of active rows computed per step in selection and hybrid modes.
    pub hybrid_fraction: Option<f64>,
}

impl Default for LockPolicy {
    fn default() -> Self {
        Self {
            epsilon: 5e-3,
            percentile: 20.0,
            gate_enabled: true,
            unlock_enabled: false,
            probe_period: 4,
            epsilon_unlock: 5e-2,
            min_locked_steps: 2,
            relock_cooldown: 2,
            relock_factor: 0.5,
            hybrid_fraction: None,
        }
    }
}

impl LockPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon == f64::NEG_INFINITY {
            return Err(Error::InvalidConfig(format!("epsilon {} is not usable", self.epsilon)));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::InvalidConfig(format!(
                "percentile {} outside [0, 100]",
                self.percentile
            )));
        }
        if !(self.relock_factor > 0.0 && self.relock_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "relock factor {} outside (0, 1]",
                self.relock_factor
            )));
        }
        if self.probe_period == 0 || self.min_locked_steps == 0 || self.relock_cooldown == 0 {
            return Err(Error::InvalidConfig(
                "probe period, minimum locked duration and cooldown must be ≥ 1".into(),
            ));
        }
        if self.epsilon_unlock.is_nan() {
            return Err(Error::InvalidConfig("epsilon_unlock is NaN".into()));
        }
        if let Some(k) = self.hybrid_fraction {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::InvalidConfig(format!("hybrid fraction {k} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LockEventKind {
    Lock,
    Unlock,
    Relock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockEvent {
    pub position: usize,
    pub step: usize,
    /// Divergence at the event: D for locks, the probe drift D̃ for unlocks.
    pub divergence: f64,
    pub uncertainty: f64,
    pub kind: LockEventKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct PositionHistory {
    locked_at: Option<usize>,
    last_unlock: Option<usize>,
    unlocked_before: bool,
}

/// Per-position lock bookkeeping plus the ordered event log.
#[derive(Debug, Clone, PartialEq)]
pub struct LockHistory {
    positions: Vec<PositionHistory>,
    events: Vec<LockEvent>,
}

impl LockHistory {
    pub fn new(n: usize) -> Self {
        Self {
            positions: vec![PositionHistory::default(); n],
            events: Vec::new(),
        }
    }

    pub fn is_locked(&self, i: usize) -> bool {
        self.positions[i].locked_at.is_some()
    }

    pub fn locked_at(&self, i: usize) -> Option<usize> {
        self.positions[i].locked_at
    }

    /// True while step `t` falls inside the re-lock cooldown after an unlock.
    pub fn in_cooldown(&self, i: usize, t: usize, cooldown: usize) -> bool {
        self.positions[i]
            .last_unlock
            .is_some_and(|tu| t <= tu + cooldown)
    }

    /// ε for position `i`: tightened by `relock_factor` once it has ever been unlocked.
    pub fn threshold(&self, i: usize, policy: &LockPolicy) -> f64 {
        if self.positions[i].unlocked_before {
            policy.relock_factor * policy.epsilon
        } else {
            policy.epsilon
        }
    }

    pub fn events(&self) -> &[LockEvent] {
        &self.events
    }

    fn record_lock(&mut self, i: usize, t: usize, d: f64, u: f64) {
        let p = &mut self.positions[i];
        p.locked_at = Some(t);
        let kind = if p.unlocked_before {
            LockEventKind::Relock
        } else {
            LockEventKind::Lock
        };
        self.events.push(LockEvent {
            position: i,
            step: t,
            divergence: d,
            uncertainty: u,
            kind,
        });
    }

    fn record_unlock(&mut self, i: usize, t: usize, d: f64, u: f64) {
        let p = &mut self.positions[i];
        p.locked_at = None;
        p.last_unlock = Some(t);
        p.unlocked_before = true;
        self.events.push(LockEvent {
            position: i,
            step: t,
            divergence: d,
            uncertainty: u,
            kind: LockEventKind::Unlock,
        });
    }
}

/// `1 − max_v p(v)`.
pub fn uncertainty(p: &Posterior) -> f64 {
    (1.0 - p.max_prob()).max(0.0)
}

/// The lock set 𝓕_t: candidates with `D ≤ ε` (or the tightened re-lock
/// threshold) that also pass the confidence gate when it is enabled.
///
/// `divergence` and `uncertainty` are indexed by position. The gate threshold
/// is the nearest-rank `m`-th percentile of the candidates' uncertainties.
/// Already-locked positions and positions in re-lock cooldown are never returned.
pub fn evaluate_locks(
    candidates: &[usize],
    divergence: &[f64],
    uncertainty: &[f64],
    policy: &LockPolicy,
    history: &LockHistory,
    t: usize,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let gate = if policy.gate_enabled {
        let us: Vec<f64> = candidates.iter().map(|&i| uncertainty[i]).collect();
        Some(percentile_nearest_rank(&us, policy.percentile)?)
    } else {
        None
    };
    Ok(candidates
        .iter()
        .copied()
        .filter(|&i| !history.is_locked(i))
        .filter(|&i| !history.in_cooldown(i, t, policy.relock_cooldown))
        .filter(|&i| divergence[i] <= history.threshold(i, policy))
        .filter(|&i| gate.is_none_or(|theta| uncertainty[i] <= theta))
        .collect())
}

/// `ε(δ) = δ² / C_tail²`.
pub fn epsilon_for_delta(delta: f64, c_tail: f64) -> Result<f64> {
    if !(c_tail > 0.0) {
        return Err(Error::InvalidInput(format!("C_tail must be positive, got {c_tail}")));
    }
    if !(delta >= 0.0) {
        return Err(Error::InvalidInput(format!("δ must be non-negative, got {delta}")));
    }
    Ok(delta * delta / (c_tail * c_tail))
}

/// Lock bitmap with everything a locked row needs: per-layer K/V, frozen block
/// input and frozen posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct LockState {
    lock: Vec<bool>,
    caches: Vec<LayerKVCache>,
    frozen: FrozenInputs,
    frozen_posteriors: Vec<Option<Posterior>>,
    history: LockHistory,
}

/// Fresh per-row data needed to lock a position this step.
#[derive(Debug, Clone, Copy)]
pub struct LockInputs<'a> {
    pub output: &'a crate::model::ForwardOutput,
    /// Current posterior per position.
    pub posteriors: &'a [Option<Posterior>],
    pub divergence: &'a [f64],
    pub uncertainty: &'a [f64],
    pub masked: &'a [bool],
}

impl LockState {
    pub fn new(cfg: &ModelConfig, seq_len: usize) -> Self {
        Self {
            lock: vec![false; seq_len],
            caches: LayerKVCache::empty_stack(cfg, seq_len),
            frozen: FrozenInputs::new(seq_len, cfg.d_model),
            frozen_posteriors: vec![None; seq_len],
            history: LockHistory::new(seq_len),
        }
    }

    pub fn len(&self) -> usize {
        self.lock.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock.is_empty()
    }

    pub fn is_locked(&self, i: usize) -> bool {
        self.lock[i]
    }

    pub fn bitmap(&self) -> &[bool] {
        &self.lock
    }

    pub fn locked(&self) -> Vec<usize> {
        (0..self.lock.len()).filter(|&i| self.lock[i]).collect()
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.lock.len()).filter(|&i| !self.lock[i]).collect()
    }

    pub fn caches(&self) -> &[LayerKVCache] {
        &self.caches
    }

    pub fn frozen(&self) -> &FrozenInputs {
        &self.frozen
    }

    pub fn frozen_posterior(&self, i: usize) -> Option<&Posterior> {
        self.frozen_posteriors[i].as_ref()
    }

    pub fn history(&self) -> &LockHistory {
        &self.history
    }

    /// Lock every position in `positions` at step `t`, caching this step's
    /// K/V at all layers, its block input and its current posterior.
    /// Validates the whole set before mutating anything.
    pub fn apply_locks(&mut self, positions: &[usize], t: usize, inputs: LockInputs<'_>) -> Result<()> {
        let mut slots = Vec::with_capacity(positions.len());
        for &i in positions {
            if i >= self.lock.len() {
                return Err(Error::InvalidState(format!("position {i} out of range")));
            }
            if self.lock[i] {
                return Err(Error::InvalidState(format!("position {i} is already locked")));
            }
            if inputs.masked[i] {
                return Err(Error::InvalidState(format!("position {i} is still masked")));
            }
            let slot = inputs.output.slot_of(i).ok_or_else(|| {
                Error::InvalidState(format!("position {i} has no fresh K/V this step"))
            })?;
            if inputs.posteriors[i].is_none() {
                return Err(Error::InvalidState(format!("position {i} has no posterior")));
            }
            slots.push(slot);
        }
        for (&i, &slot) in positions.iter().zip(&slots) {
            for (cache, fresh) in self.caches.iter_mut().zip(&inputs.output.fresh_kv) {
                cache.store(i, fresh.key(slot), fresh.value(slot));
            }
            self.frozen.capture(i, &inputs.output.block_inputs[slot]);
            self.frozen_posteriors[i] = inputs.posteriors[i].clone();
            self.lock[i] = true;
            self.history
                .record_lock(i, t, inputs.divergence[i], inputs.uncertainty[i]);
        }
        Ok(())
    }

    /// Return positions to the active set: caches, frozen input and frozen
    /// posterior are invalidated and the re-lock cooldown starts at `t`.
    pub fn apply_unlocks(&mut self, readings: &[ProbeReading], t: usize) -> Result<()> {
        if let Some(r) = readings.iter().find(|r| !self.lock[r.position]) {
            return Err(Error::InvalidState(format!("position {} is not locked", r.position)));
        }
        for r in readings {
            let i = r.position;
            self.lock[i] = false;
            for cache in &mut self.caches {
                cache.invalidate(i);
            }
            self.frozen.invalidate(i);
            self.frozen_posteriors[i] = None;
            self.history.record_unlock(i, t, r.drift, r.uncertainty);
        }
        Ok(())
    }

    /// Lock-state invariants: cache rows and frozen inputs valid exactly on locked rows.
    pub fn check_invariants(&self) -> Result<()> {
        for i in 0..self.lock.len() {
            let locked = self.lock[i];
            if self.caches.iter().any(|c| c.is_valid(i) != locked)
                || self.frozen.is_valid(i) != locked
                || self.frozen_posteriors[i].is_some() != locked
                || self.history.is_locked(i) != locked
            {
                return Err(Error::StateCorruption(format!(
                    "lock bookkeeping inconsistent at position {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Probe result for one locked row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReading {
    pub position: usize,
    /// Proxy uncertainty ũ.
    pub uncertainty: f64,
    /// Drift D̃ = KL(proxy ‖ frozen posterior).
    pub drift: f64,
    pub locked_at: usize,
}

/// The unlock rule: all three of `ũ > θ_t`, `D̃ > ε_unlock` and `t − t* > D_interval`.
pub fn unlock_decision(
    readings: &[ProbeReading],
    theta: f64,
    policy: &LockPolicy,
    t: usize,
) -> Vec<ProbeReading> {
    readings
        .iter()
        .filter(|r| {
            r.uncertainty > theta
                && r.drift > policy.epsilon_unlock
                && t.saturating_sub(r.locked_at) > policy.min_locked_steps
        })
        .copied()
        .collect()
}

/// Probe outcome: rows to unlock plus every reading taken.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub unlock: Vec<ProbeReading>,
    pub readings: Vec<ProbeReading>,
    pub flops: u64,
}

/// Probe the given locked rows with a full-depth forward restricted to them
/// as queries and decide which to unlock. Runs only when `t` is a multiple
/// of the probe period; otherwise returns an empty outcome.
///
/// `context` must hold valid K/V for every row not being probed (the current
/// step's K/V for active rows, cached K/V for other locked rows).
#[allow(clippy::too_many_arguments)]
pub fn probe_unlock(
    state: &LockState,
    w: &Weights,
    tokens: &[usize],
    rows: &[usize],
    context: &[LayerKVCache],
    policy: &LockPolicy,
    theta: f64,
    t: usize,
) -> Result<ProbeOutcome> {
    if !policy.unlock_enabled {
        return Err(Error::InvalidConfig("unlocking is disabled".into()));
    }
    if let Some(&r) = rows.iter().find(|&&r| !state.is_locked(r)) {
        return Err(Error::InvalidState(format!("probe on unlocked row {r}")));
    }
    if rows.is_empty() || !t.is_multiple_of(policy.probe_period) {
        return Ok(ProbeOutcome {
            unlock: Vec::new(),
            readings: Vec::new(),
            flops: 0,
        });
    }
    let mut counter = GemmCounter::new();
    let out = forward_partial(w, tokens, rows, context, &mut counter)?;
    let mut readings = Vec::with_capacity(rows.len());
    for (slot, &i) in rows.iter().enumerate() {
        let proxy = log_softmax(&out.logits[slot])?;
        let frozen = state
            .frozen_posterior(i)
            .ok_or_else(|| Error::StateCorruption(format!("locked row {i} has no frozen posterior")))?;
        readings.push(ProbeReading {
            position: i,
            uncertainty: uncertainty(&proxy),
            drift: kl_from_logits(proxy.log_probs(), frozen.log_probs())?,
            locked_at: state.history.locked_at(i).unwrap_or(t),
        });
    }
    Ok(ProbeOutcome {
        unlock: unlock_decision(&readings, theta, policy, t),
        readings,
        flops: counter.flops(),
    })
}
