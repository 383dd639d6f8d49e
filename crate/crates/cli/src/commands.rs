use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use surelock::analysis::{
    calibrate_radius, constants_at_a_glance, offline_lock_check, simulate_trajectory, BoundReport,
    ConstantsInput, Trajectory, TrajectorySource, DEFAULT_L_SM,
};
use surelock::flops::{flops_base_step, flops_step_actual, micro_active_ratio};
use surelock::lockctl::LockEventKind;
use surelock::model::init_weights_with_std;
use surelock::{random_prompt, run_sampler, Error, Mode, ModelConfig, RunConfig};

use crate::config::ExperimentConfig;
use crate::output::{count_events, read_logits, write_json, write_run};

pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    let w = cfg.load_weights()?;
    let prompt = cfg.prompt_for(&cfg.run, w.config.vocab_size);
    let out = run_sampler(&cfg.run, &w, &prompt)?;
    write_run(&cfg.out_dir, cfg, &prompt, &out)?;
    println!(
        "{} run: {} steps, FLOPs ratio {:.4}, r̄ {:.4}, {} locks; wrote {}",
        cfg.run.mode,
        out.trace.len(),
        out.flops_ratio(),
        micro_active_ratio(&[&out.trace])?,
        count_events(&out.events, LockEventKind::Lock) + count_events(&out.events, LockEventKind::Relock),
        cfg.out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub percentile: f64,
    pub steps: usize,
    pub gen_len: usize,
    pub seed: u64,
    pub mode: Mode,
    pub total_base_flops: u64,
    pub total_flops: u64,
    pub flops_ratio: f64,
    pub r_bar: f64,
    pub locks: usize,
    pub unlocks: usize,
}

fn or_base<T: Copy>(list: &[T], base: T) -> Vec<T> {
    if list.is_empty() {
        vec![base]
    } else {
        list.to_vec()
    }
}

/// Every point of the grid, in row order (ε, m, S, N_gen, seed).
pub fn sweep_points(cfg: &ExperimentConfig) -> surelock::Result<Vec<RunConfig>> {
    let g = &cfg.sweep;
    if g.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one parameter list".into()));
    }
    let base = &cfg.run;
    let mut points = Vec::new();
    for &eps in &or_base(&g.epsilon, base.policy.epsilon) {
        for &m in &or_base(&g.percentile, base.policy.percentile) {
            for &steps in &or_base(&g.steps, base.steps) {
                for &gen_len in &or_base(&g.gen_len, base.gen_len) {
                    for &seed in &or_base(&g.seed, base.seed) {
                        let mut rc = base.clone();
                        rc.policy.epsilon = eps;
                        rc.policy.percentile = m;
                        rc.steps = steps;
                        rc.gen_len = gen_len;
                        rc.seed = seed;
                        points.push(rc);
                    }
                }
            }
        }
    }
    Ok(points)
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let points = sweep_points(cfg)?;
    let w = cfg.load_weights()?;
    for rc in &points {
        rc.validate(w.config.max_seq)?;
    }
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|rc| -> surelock::Result<SweepRow> {
            let prompt = cfg.prompt_for(rc, w.config.vocab_size);
            let out = run_sampler(rc, &w, &prompt)?;
            Ok(SweepRow {
                epsilon: rc.policy.epsilon,
                percentile: rc.policy.percentile,
                steps: rc.steps,
                gen_len: rc.gen_len,
                seed: rc.seed,
                mode: rc.mode,
                total_base_flops: out.total_base_flops(),
                total_flops: out.total_flops(),
                flops_ratio: out.flops_ratio(),
                r_bar: micro_active_ratio(&[&out.trace])?,
                locks: count_events(&out.events, LockEventKind::Lock)
                    + count_events(&out.events, LockEventKind::Relock),
                unlocks: count_events(&out.events, LockEventKind::Unlock),
            })
        })
        .collect::<surelock::Result<_>>()?;
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot create {}", path.display()))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    println!("sweep: {} points; wrote {}", rows.len(), path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct BoundSummary {
    epsilon: f64,
    l_sm: f64,
    trajectories: usize,
    skipped_positions: Vec<usize>,
    locked: usize,
    applicable: usize,
    holds: usize,
    reports: Vec<BoundReport>,
}

pub fn verify_bound(cfg: &ExperimentConfig, trace: Option<PathBuf>, l_sm: f64) -> Result<()> {
    let trajectories: Vec<Option<Trajectory>> = match trace {
        Some(path) => {
            let records = read_logits(&path)?;
            let n = records.first().map_or(0, |r| r.logits.len());
            (0..n)
                .map(|i| -> Result<Option<Trajectory>> {
                    let logits: Option<Vec<Vec<f64>>> =
                        records.iter().map(|r| r.logits.get(i).cloned().flatten()).collect();
                    logits
                        .map(|z| Trajectory::from_logits(i, TrajectorySource::Sampled, z))
                        .transpose()
                        .map_err(Into::into)
                })
                .collect::<Result<_>>()?
        }
        None => {
            let w = cfg.load_weights()?;
            let mut rc = cfg.run.clone();
            rc.mode = Mode::Baseline;
            let out = run_sampler(&rc, &w, &cfg.prompt_for(&rc, w.config.vocab_size))?;
            (0..rc.seq_len())
                .map(|i| Trajectory::from_trace(&out.trace, i).map(Some))
                .collect::<surelock::Result<_>>()?
        }
    };
    let eps = cfg.run.policy.epsilon;
    let mut summary = BoundSummary {
        epsilon: eps,
        l_sm,
        trajectories: trajectories.len(),
        skipped_positions: Vec::new(),
        locked: 0,
        applicable: 0,
        holds: 0,
        reports: Vec::new(),
    };
    for (i, traj) in trajectories.iter().enumerate() {
        let Some(traj) = traj else {
            summary.skipped_positions.push(i);
            continue;
        };
        if let Some(r) = offline_lock_check(traj, eps, l_sm)? {
            summary.locked += 1;
            if r.applicable {
                summary.applicable += 1;
                summary.holds += usize::from(r.holds);
            }
            summary.reports.push(r);
        }
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("bound.json"), &summary)?;
    println!(
        "{}/{} bound holds ({} positions, {} locked, {} skipped)",
        summary.holds,
        summary.applicable,
        summary.trajectories,
        summary.locked,
        summary.skipped_positions.len()
    );
    if summary.holds != summary.applicable {
        return Err(Error::InternalConsistency(format!(
            "bound violated on {} positions",
            summary.applicable - summary.holds
        ))
        .into());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimulationRow {
    index: usize,
    rho_target: f64,
    vocab: usize,
    epsilon: f64,
    t_star: Option<usize>,
    rho_hat: Option<f64>,
    l_hat: Option<f64>,
    lhs: Option<f64>,
    rhs: Option<f64>,
    applicable: bool,
    holds: bool,
}

pub struct SimulateArgs {
    pub count: usize,
    pub steps: usize,
    pub magnitude: f64,
    pub seed: u64,
}

pub fn simulate(cfg: &ExperimentConfig, args: &SimulateArgs) -> Result<()> {
    const RHOS: [f64; 3] = [0.3, 0.6, 0.9];
    const VOCABS: [usize; 2] = [8, 64];
    const EPSILONS: [f64; 4] = [5e-2, 5e-3, 5e-4, 5e-5];
    let rows: Vec<SimulationRow> = (0..args.count)
        .into_par_iter()
        .map(|i| -> surelock::Result<SimulationRow> {
            let rho = RHOS[i % 3];
            let vocab = VOCABS[(i / 3) % 2];
            let epsilon = EPSILONS[i % 4];
            let traj = simulate_trajectory(args.seed.wrapping_add(i as u64), vocab, args.steps, rho, args.magnitude)?;
            let r = offline_lock_check(&traj, epsilon, DEFAULT_L_SM)?;
            Ok(SimulationRow {
                index: i,
                rho_target: rho,
                vocab,
                epsilon,
                t_star: r.as_ref().map(|r| r.t_star),
                rho_hat: r.as_ref().map(|r| r.rho_hat),
                l_hat: r.as_ref().map(|r| r.l_hat),
                lhs: r.as_ref().map(|r| r.lhs),
                rhs: r.as_ref().map(|r| r.rhs),
                applicable: r.as_ref().is_some_and(|r| r.applicable),
                holds: r.as_ref().is_some_and(|r| r.applicable && r.holds),
            })
        })
        .collect::<surelock::Result<_>>()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("simulate.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let applicable = rows.iter().filter(|r| r.applicable).count();
    let holds = rows.iter().filter(|r| r.holds).count();
    println!("{holds}/{applicable} bound holds ({} trajectories)", rows.len());
    if holds != applicable {
        return Err(Error::InternalConsistency(format!("bound violated on {} trajectories", applicable - holds)).into());
    }
    Ok(())
}

pub struct ConstantsArgs {
    pub radius: Option<f64>,
    pub kappa: f64,
    pub samples: usize,
    pub d_k: Option<usize>,
}

pub fn constants(cfg: &ExperimentConfig, args: &ConstantsArgs) -> Result<()> {
    let w = cfg.load_weights()?;
    let mut tokens = cfg.prompt_for(&cfg.run, w.config.vocab_size);
    tokens.resize(cfg.run.seq_len(), w.config.mask_id());
    let radius = match args.radius {
        Some(r) => r,
        None => calibrate_radius(&w, &tokens)?,
    };
    let report = constants_at_a_glance(
        &w,
        &ConstantsInput {
            radius,
            kappa: args.kappa,
            seq_len: tokens.len(),
            d_k: args.d_k,
            samples: args.samples,
            seed: cfg.run.seed,
        },
    )?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("constants.json"), &report)?;
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &report)?;
    writeln!(stdout)?;
    Ok(())
}

/// The hand-checked configuration: 11264 FLOPs per full step.
pub fn worked_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        n_kv_heads: 2,
        d_ff: 16,
        max_seq: 4,
    }
}

pub fn flops_check(cfg: &ExperimentConfig) -> Result<()> {
    let gqa = ModelConfig {
        vocab_size: 24,
        d_model: 24,
        n_layers: 3,
        n_heads: 6,
        n_kv_heads: 2,
        d_ff: 40,
        max_seq: 20,
    };
    // Built-in setups use livelier weights than the default init so that
    // locking and selection actually change the computed rows.
    let mut setups = vec![
        ("worked", worked_config(), RunConfig::new(2, 2, 2, Mode::Baseline), 0.3),
        ("toy", ModelConfig::toy(), RunConfig::new(16, 16, 16, Mode::Baseline), 0.3),
        ("gqa", gqa, RunConfig::new(8, 12, 6, Mode::Baseline), 0.3),
    ];
    if cfg.weights.is_none() {
        setups.push(("config", cfg.model.clone(), cfg.run.clone(), cfg.init_std));
    }
    let mut checked = 0;
    for (name, model, base, std) in setups {
        let w = init_weights_with_std(&model, cfg.init_seed, std)?;
        let n = base.seq_len() as u64;
        let per_step = flops_base_step(&model, 1, n);
        let mut line = format!("{name}: F_base {per_step} per step (N = {n});");
        for mode in [Mode::Baseline, Mode::Surelock, Mode::Selection, Mode::Hybrid] {
            let mut rc = base.clone();
            rc.mode = mode;
            rc.seed = cfg.run.seed;
            if mode.selects() && rc.policy.hybrid_fraction.is_none() {
                rc.policy.hybrid_fraction = Some(0.8);
            }
            let prompt = if name == "config" {
                cfg.prompt_for(&rc, model.vocab_size)
            } else {
                random_prompt(model.vocab_size, rc.prompt_len, rc.seed)
            };
            let out = run_sampler(&rc, &w, &prompt)?;
            for st in &out.trace {
                let expected = flops_step_actual(&model, 1, n, st.computed as u64)?;
                if st.f_actual != expected || st.f_base != per_step {
                    return Err(Error::InternalConsistency(format!(
                        "{name}/{mode} step {}: counted {}, formula {expected}",
                        st.t, st.f_actual
                    ))
                    .into());
                }
                checked += 1;
            }
            line += &format!(" {mode} {} steps ok", out.trace.len());
        }
        println!("{line}");
    }
    println!("flops-check: counter equals formula on all {checked} steps");
    Ok(())
}
