//! KL-gated permanent position locking for masked-diffusion language-model
//! sampling.
//!
//! A position whose posterior has stopped moving (step-wise KL at or below a
//! threshold) is locked: its residual-stream inputs and key/value rows are
//! frozen and it stops issuing queries. The crate contains a small bidirectional
//! transformer with partial-row forwards, the sampler with its baseline,
//! locking, selection and hybrid modes, exact GEMM FLOPs accounting, and an
//! offline checker for the terminal-error bound of locked positions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod flops;
pub mod lockctl;
pub mod model;
pub mod numkit;
pub mod rng;
pub mod sampler;

pub use analysis::{
    constants_at_a_glance, offline_lock_check, simulate_trajectory, BoundReport, ConstantsInput,
    ConstantsReport, Trajectory,
};
pub use error::{Error, Result};
pub use flops::{flops_base_step, flops_step_actual, FlopsReport, GemmCounter};
pub use lockctl::{LockEvent, LockEventKind, LockPolicy, LockState};
pub use model::{forward_partial, full_forward, init_weights, init_weights_with_std, ModelConfig, Weights};
pub use numkit::{kl_from_logits, log_softmax, Matrix, Posterior};
pub use rng::SeededRng;
pub use sampler::{random_prompt, run_sampler, Mode, RunConfig, RunOutput, Sampler, StepTrace};
