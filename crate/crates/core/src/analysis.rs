//! Error-bound verification for locked positions and the Lipschitz constants behind it.
//!
//! For a position locked at `t*`, the deviation between the terminal
//! log-posterior of an uninterrupted run and the frozen one obeys
//!
//! `‖log p_T − log p_{t*}‖_∞ ≤ C_tail·√D_{t*}`, with `C_tail = L_sm·L/(1 − √ρ)`,
//!
//! whenever the tail divergences contract geometrically at rate `ρ` and each
//! logit step is bounded by `L·√D_{s−1}`. [`offline_lock_check`] measures `ρ`
//! and `L` on a trajectory as the worst observed tail ratios, so the bound must
//! hold on every trajectory where the measured `ρ̂ < 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{feed_forward, full_forward, Weights};
use crate::numkit::{
    self, kl_from_logits, l2_norm, layer_norm, linf_norm, log_softmax, spectral_norm, sub, Matrix,
    SPECTRAL_MAX_ITERS, SPECTRAL_TOL,
};
use crate::rng::SeededRng;
use crate::sampler::StepTrace;

/// Lipschitz constant of log-softmax from `‖·‖₂` to `‖·‖_∞`.
pub const DEFAULT_L_SM: f64 = 2.0;

/// Absolute slack allowed when comparing the two sides of the bound.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectorySource {
    Sampled,
    Synthetic,
}

/// Logits of one position over steps `s = 1..=T` and the step-wise KL `D_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub position: usize,
    pub source: TrajectorySource,
    pub logits: Vec<Vec<f64>>,
    /// `divergence[s − 1] = D_s`; `D_1 = ∞`.
    #[serde(skip)]
    pub divergence: Vec<f64>,
}

impl Trajectory {
    pub fn from_logits(position: usize, source: TrajectorySource, logits: Vec<Vec<f64>>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidInput("empty trajectory".into()));
        }
        let mut divergence = Vec::with_capacity(logits.len());
        divergence.push(f64::INFINITY);
        for pair in logits.windows(2) {
            divergence.push(kl_from_logits(&pair[1], &pair[0])?);
        }
        Ok(Self {
            position,
            source,
            logits,
            divergence,
        })
    }

    /// The trajectory of `position` in a run that computed it at every step.
    pub fn from_trace(trace: &[StepTrace], position: usize) -> Result<Self> {
        let logits = trace
            .iter()
            .map(|s| {
                s.logits.get(position).cloned().flatten().ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "position {position} was not computed at step {}",
                        s.t
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_logits(position, TrajectorySource::Sampled, logits)
    }

    /// Number of steps T.
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// `D_s` for a 1-based step.
    pub fn d(&self, s: usize) -> f64 {
        self.divergence[s - 1]
    }

    pub fn z(&self, s: usize) -> &[f64] {
        &self.logits[s - 1]
    }
}

/// A tail maximum together with how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub value: f64,
    /// Steps skipped because both terms were zero.
    pub skipped: usize,
    /// Set when no step contributed (a fully converged tail) or a step forced `+∞`.
    pub flagged: bool,
}

fn tail_range(traj: &Trajectory, t_star: usize) -> Result<std::ops::RangeInclusive<usize>> {
    if t_star < 1 || t_star >= traj.len() {
        return Err(Error::UndefinedEstimate(format!(
            "no tail after step {t_star} in a trajectory of {} steps",
            traj.len()
        )));
    }
    Ok(t_star + 1..=traj.len())
}

/// `ρ̂ = max_{s > t*} D_s / D_{s−1}`. Zero-to-zero steps are skipped;
/// zero-to-positive steps give `+∞`.
pub fn estimate_rho(traj: &Trajectory, t_star: usize) -> Result<TailEstimate> {
    let mut est = TailEstimate {
        value: 0.0,
        skipped: 0,
        flagged: false,
    };
    let mut contributed = false;
    for s in tail_range(traj, t_star)? {
        let (prev, cur) = (traj.d(s - 1), traj.d(s));
        let ratio = if prev == 0.0 {
            if cur == 0.0 {
                est.skipped += 1;
                continue;
            }
            est.flagged = true;
            f64::INFINITY
        } else {
            cur / prev
        };
        contributed = true;
        est.value = est.value.max(ratio);
    }
    if !contributed {
        est.flagged = true;
    }
    Ok(est)
}

/// `L̂ = max_{s > t*} ‖z_s − z_{s−1}‖₂ / √D_{s−1}`. Where `D_{s−1} = 0` the
/// step must not move (else `+∞`).
pub fn estimate_l(traj: &Trajectory, t_star: usize) -> Result<TailEstimate> {
    let mut est = TailEstimate {
        value: 0.0,
        skipped: 0,
        flagged: false,
    };
    for s in tail_range(traj, t_star)? {
        let dz = l2_norm(&sub(traj.z(s), traj.z(s - 1)));
        let prev = traj.d(s - 1);
        let ratio = if prev == 0.0 {
            if dz == 0.0 {
                est.skipped += 1;
                continue;
            }
            est.flagged = true;
            f64::INFINITY
        } else {
            dz / prev.sqrt()
        };
        est.value = est.value.max(ratio);
    }
    Ok(est)
}

/// `C_tail = L_sm·L / (1 − √ρ)`.
pub fn c_tail(l_sm: f64, l: f64, rho: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("ρ = {rho} outside [0, 1)")));
    }
    if !(l_sm > 0.0) || !(l >= 0.0) {
        return Err(Error::InvalidInput(format!("need L_sm > 0 and L ≥ 0, got {l_sm}, {l}")));
    }
    Ok(l_sm * l / (1.0 - rho.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub position: usize,
    pub t_star: usize,
    pub d_t_star: f64,
    pub rho_hat: f64,
    pub l_hat: f64,
    pub l_sm: f64,
    /// `+∞` when the bound does not apply.
    pub c_tail: f64,
    /// `‖log p_T − log p_{t*}‖_∞`
    pub lhs: f64,
    /// `C_tail·√D_{t*}`
    pub rhs: f64,
    /// `lhs ≤ rhs + 1e-9`.
    pub holds: bool,
    /// `ρ̂ < 1` and `L̂` finite.
    pub applicable: bool,
}

/// Find the first `t* ≥ 2` (with at least one later step) where `D_{t*} ≤ ε`
/// and compare the terminal deviation with `C_tail·√D_{t*}` built from the
/// measured tail constants. `None` when nothing locks.
pub fn offline_lock_check(traj: &Trajectory, epsilon: f64, l_sm: f64) -> Result<Option<BoundReport>> {
    if traj.len() < 3 {
        return Err(Error::InvalidInput("offline check needs at least 3 steps".into()));
    }
    let Some(t_star) = (2..traj.len()).find(|&s| traj.d(s) <= epsilon) else {
        return Ok(None);
    };
    let rho = estimate_rho(traj, t_star)?;
    let l = estimate_l(traj, t_star)?;
    let d_t_star = traj.d(t_star);
    let lhs = linf_norm(&sub(
        log_softmax(traj.z(traj.len()))?.log_probs(),
        log_softmax(traj.z(t_star))?.log_probs(),
    ));
    let applicable = rho.value < 1.0 && l.value.is_finite();
    let c = if applicable {
        c_tail(l_sm, l.value, rho.value)?
    } else {
        f64::INFINITY
    };
    let rhs = if applicable { c * d_t_star.sqrt() } else { f64::INFINITY };
    Ok(Some(BoundReport {
        position: traj.position,
        t_star,
        d_t_star,
        rho_hat: rho.value,
        l_hat: l.value,
        l_sm,
        c_tail: c,
        lhs,
        rhs,
        holds: lhs <= rhs + BOUND_SLACK,
        applicable,
    }))
}

/// `z_s = z* + magnitude·ρ^{s/2}·v` for a seeded anchor `z* ~ N(0, I)` and unit
/// direction `v`, `s = 1..=T`.
pub fn simulate_trajectory(seed: u64, vocab: usize, steps: usize, rho: f64, magnitude: f64) -> Result<Trajectory> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidInput(format!("ρ_target = {rho} outside (0, 1)")));
    }
    if steps < 4 || vocab < 2 {
        return Err(Error::InvalidInput("need T ≥ 4 and V ≥ 2".into()));
    }
    let mut rng = SeededRng::new(seed);
    let anchor: Vec<f64> = (0..vocab).map(|_| rng.standard_normal()).collect();
    let dir = rng.unit_vector(vocab);
    let logits = (1..=steps)
        .map(|s| {
            let c = magnitude * rho.powf(s as f64 / 2.0);
            anchor.iter().zip(&dir).map(|(a, v)| a + c * v).collect()
        })
        .collect();
    Trajectory::from_logits(0, TrajectorySource::Synthetic, logits)
}

/// Per-step mean D over computed unmasked rows, for steps where one is defined.
pub fn a2_curve(trace: &[StepTrace]) -> Vec<(usize, f64)> {
    trace
        .iter()
        .filter_map(|s| s.mean_divergence().map(|m| (s.t, m)))
        .collect()
}

/// Largest `‖J(s)‖₂` of the softmax Jacobian `diag(α) − ααᵀ` over random score vectors.
pub fn softmax_jacobian_sup(samples: usize, seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut sup: f64 = 0.0;
    for i in 0..samples {
        let n = 2 + (rng.next_u64() % 15) as usize;
        let scale = [0.1, 1.0, 3.0, 10.0][i % 4];
        let scores: Vec<f64> = (0..n).map(|_| rng.normal(0.0, scale)).collect();
        let alpha = numkit::softmax(&scores);
        let mut j = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                let diag = if r == c { alpha[r] } else { 0.0 };
                j.row_mut(r)[c] = diag - alpha[r] * alpha[c];
            }
        }
        sup = sup.max(spectral_norm(&j, SPECTRAL_MAX_ITERS, 1e-13)?.value);
    }
    Ok(sup)
}

/// Largest `‖f(x) − f(x′)‖₂ / ‖x − x′‖₂` over seeded pairs inside the ball of
/// the given radius. Even-numbered pairs are independent points; odd-numbered
/// pairs are a point and a nearby perturbation of it.
pub fn empirical_lipschitz(
    f: impl Fn(&[f64]) -> Vec<f64>,
    dim: usize,
    radius: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = SeededRng::new(seed);
    let point = |rng: &mut SeededRng| -> Vec<f64> {
        let r = radius * rng.uniform().powf(1.0 / dim as f64);
        rng.unit_vector(dim).into_iter().map(|v| v * r).collect()
    };
    let mut best: f64 = 0.0;
    for i in 0..samples {
        let x = point(&mut rng);
        let y = if i % 2 == 0 {
            point(&mut rng)
        } else {
            let step = 1e-3 * radius;
            let mut y: Vec<f64> = x
                .iter()
                .zip(rng.unit_vector(dim))
                .map(|(a, v)| a + step * v)
                .collect();
            let norm = l2_norm(&y);
            if norm > radius {
                y.iter_mut().for_each(|v| *v *= radius / norm);
            }
            y
        };
        let dx = l2_norm(&sub(&x, &y));
        if dx == 0.0 {
            continue;
        }
        best = best.max(l2_norm(&sub(&f(&x), &f(&y))) / dx);
    }
    best
}

/// Inputs of the Lipschitz-constant composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsInput {
    /// Uniform bound on the norm of every block input row.
    pub radius: f64,
    /// Tail attribution ratio κ.
    pub kappa: f64,
    /// Sequence length n.
    pub seq_len: usize,
    /// Key/query width used in the score scaling; defaults to the head width.
    pub d_k: Option<usize>,
    /// Pairs drawn for each empirical Lipschitz estimate.
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConstants {
    /// A_att for each query head.
    pub a_att: Vec<f64>,
    pub w_o_norm: f64,
    pub a_mha: f64,
    pub a_ff: f64,
    pub l_ln: f64,
    pub l_blk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub input: ConstantsInput,
    pub embedding_norm: f64,
    pub l_emb: f64,
    pub layers: Vec<LayerConstants>,
    /// Worst block constant across layers.
    pub l_blk: f64,
    pub head_norm: f64,
    pub l_net: f64,
    pub l_all: f64,
    pub l: f64,
    pub l_sm: f64,
    /// Set if any spectral norm hit its iteration cap.
    pub unconverged: bool,
}

/// The Lipschitz chain from posterior drift to logit drift:
///
/// * `L_emb = √2·‖E‖₂`
/// * `A_att = ‖W_V‖₂·[1 + (‖W_Q‖₂‖W_K‖₂/2)·n·R_x²/√d_k]` per head
/// * `A_mha = ‖W_O‖₂·max_head A_att`
/// * `A_ff`, `L_ln`: empirical over the ball of radius `R_x`
/// * `L_blk = 1 + A_ff·A_mha·L_ln`, `L_net = ‖W_head‖₂·L_blk^{layers}`
/// * `L_all = L_net·L_emb`, `L = L_all·(1 + κ)`
pub fn constants_at_a_glance(w: &Weights, input: &ConstantsInput) -> Result<ConstantsReport> {
    if !(input.radius > 0.0) || !(input.kappa >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "need R_x > 0 and κ ≥ 0, got {} and {}",
            input.radius, input.kappa
        )));
    }
    let cfg = &w.config;
    let dh = cfg.head_dim();
    let d_k = input.d_k.unwrap_or(dh);
    let group = cfg.n_heads / cfg.n_kv_heads;
    let mut unconverged = false;
    let mut norm = |m: &Matrix| -> Result<f64> {
        let est = spectral_norm(m, SPECTRAL_MAX_ITERS, SPECTRAL_TOL)?;
        unconverged |= !est.converged;
        Ok(est.value)
    };

    let embedding_norm = norm(&w.embedding)?;
    let l_emb = std::f64::consts::SQRT_2 * embedding_norm;
    let n = input.seq_len as f64;
    let r2 = input.radius * input.radius;

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, layer) in w.layers.iter().enumerate() {
        let mut a_att = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let g = h / group;
            let wq = norm(&layer.w_q.column_block(h * dh, dh))?;
            let wk = norm(&layer.w_k.column_block(g * dh, dh))?;
            let wv = norm(&layer.w_v.column_block(g * dh, dh))?;
            a_att.push(wv * (1.0 + wq * wk / 2.0 * n * r2 / (d_k as f64).sqrt()));
        }
        let w_o_norm = norm(&layer.w_o)?;
        let a_mha = w_o_norm * a_att.iter().copied().fold(0.0, f64::max);
        let seed = input.seed.wrapping_add(li as u64 * 3);
        let a_ff = empirical_lipschitz(|x| feed_forward(layer, x), cfg.d_model, input.radius, input.samples, seed);
        let l_ln1 = empirical_lipschitz(
            |x| layer_norm(x, &layer.ln1_gain, &layer.ln1_bias),
            cfg.d_model,
            input.radius,
            input.samples,
            seed + 1,
        );
        let l_ln2 = empirical_lipschitz(
            |x| layer_norm(x, &layer.ln2_gain, &layer.ln2_bias),
            cfg.d_model,
            input.radius,
            input.samples,
            seed + 2,
        );
        let l_ln = l_ln1.max(l_ln2);
        layers.push(LayerConstants {
            a_att,
            w_o_norm,
            a_mha,
            a_ff,
            l_ln,
            l_blk: 1.0 + a_ff * a_mha * l_ln,
        });
    }
    let l_blk = layers.iter().map(|l| l.l_blk).fold(1.0, f64::max);
    let head_norm = norm(&w.head)?;
    let l_net = head_norm * l_blk.powi(cfg.n_layers as i32);
    let l_all = l_net * l_emb;
    Ok(ConstantsReport {
        input: input.clone(),
        embedding_norm,
        l_emb,
        layers,
        l_blk,
        head_norm,
        l_net,
        l_all,
        l: l_all * (1.0 + input.kappa),
        l_sm: DEFAULT_L_SM,
        unconverged,
    })
}

/// Largest post-normalization row norm seen in a full forward over `tokens`,
/// the default radius `R_x`.
pub fn calibrate_radius(w: &Weights, tokens: &[usize]) -> Result<f64> {
    Ok(full_forward(w, tokens)?.max_normed_row_norm)
}
