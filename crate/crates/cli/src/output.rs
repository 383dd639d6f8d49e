//! Trace, summary and plot-data files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use surelock::flops::micro_active_ratio;
use surelock::lockctl::LockEventKind;
use surelock::{LockEvent, RunOutput, StepTrace};

use crate::config::ExperimentConfig;

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    #[serde(rename = "M_t")]
    pub m_t: usize,
    #[serde(rename = "C_t")]
    pub c_t: usize,
    #[serde(rename = "F_base")]
    pub f_base: u64,
    #[serde(rename = "F_actual")]
    pub f_actual: u64,
    pub ratio: f64,
    pub newly_unmasked: Vec<usize>,
    pub newly_locked: Vec<usize>,
    pub newly_unlocked: Vec<usize>,
    #[serde(rename = "mean_D")]
    pub mean_d: Option<f64>,
}

impl From<&StepTrace> for StepRecord {
    fn from(s: &StepTrace) -> Self {
        Self {
            t: s.t,
            m_t: s.active,
            c_t: s.computed,
            f_base: s.f_base,
            f_actual: s.f_actual,
            ratio: s.ratio(),
            newly_unmasked: s.newly_unmasked.clone(),
            newly_locked: s.newly_locked.clone(),
            newly_unlocked: s.newly_unlocked.clone(),
            mean_d: s.mean_divergence(),
        }
    }
}

/// One line of `logits.jsonl`: raw logits of the rows computed at step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRecord {
    pub t: usize,
    pub logits: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub elapsed_secs: f64,
    pub e2e_tps: f64,
    pub step_tps: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary<'a> {
    pub config: &'a ExperimentConfig,
    pub seed: u64,
    pub prompt: &'a [usize],
    pub tokens: &'a [usize],
    pub steps: usize,
    pub total_base_flops: u64,
    pub total_flops: u64,
    pub flops_ratio: f64,
    pub r_bar: f64,
    pub head_flops: u64,
    pub probe_flops: u64,
    pub locks: usize,
    pub unlocks: usize,
    pub events: &'a [LockEvent],
    pub timing: Timing,
}

pub fn count_events(events: &[LockEvent], kind: LockEventKind) -> usize {
    events.iter().filter(|e| e.kind == kind).count()
}

impl<'a> Summary<'a> {
    pub fn new(config: &'a ExperimentConfig, prompt: &'a [usize], out: &'a RunOutput) -> Result<Self> {
        Ok(Self {
            config,
            seed: config.run.seed,
            prompt,
            tokens: &out.tokens,
            steps: out.trace.len(),
            total_base_flops: out.total_base_flops(),
            total_flops: out.total_flops(),
            flops_ratio: out.flops_ratio(),
            r_bar: micro_active_ratio(&[&out.trace])?,
            head_flops: out.trace.iter().map(|s| s.head_flops).sum(),
            probe_flops: out.trace.iter().map(|s| s.probe_flops).sum(),
            locks: count_events(&out.events, LockEventKind::Lock) + count_events(&out.events, LockEventKind::Relock),
            unlocks: count_events(&out.events, LockEventKind::Unlock),
            events: &out.events,
            timing: Timing {
                elapsed_secs: out.elapsed_secs,
                e2e_tps: out.e2e_tps(),
                step_tps: out.step_tps(),
            },
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

pub fn write_trace_jsonl(path: &Path, trace: &[StepTrace]) -> Result<()> {
    let mut f = create(path)?;
    for step in trace {
        serde_json::to_writer(&mut f, &StepRecord::from(step))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_trace_csv(path: &Path, trace: &[StepTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(["t", "ratio", "M_t", "mean_D"])?;
    for s in trace {
        let mean = s.mean_divergence().map(|d| d.to_string()).unwrap_or_default();
        w.write_record([s.t.to_string(), s.ratio().to_string(), s.active.to_string(), mean])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_tokens(path: &Path, tokens: &[usize]) -> Result<()> {
    let line: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    fs::write(path, line.join(" ") + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_logits(path: &Path, trace: &[StepTrace]) -> Result<()> {
    let mut f = create(path)?;
    for s in trace {
        serde_json::to_writer(
            &mut f,
            &LogitsRecord {
                t: s.t,
                logits: s.logits.clone(),
            },
        )?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_logits(path: &Path) -> Result<Vec<LogitsRecord>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Write every file of a run into `dir`.
pub fn write_run(dir: &Path, config: &ExperimentConfig, prompt: &[usize], out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_trace_jsonl(&dir.join("trace.jsonl"), &out.trace)?;
    write_trace_csv(&dir.join("trace.csv"), &out.trace)?;
    write_tokens(&dir.join("tokens.txt"), &out.tokens)?;
    if config.write_logits {
        write_logits(&dir.join("logits.jsonl"), &out.trace)?;
    }
    write_json(&dir.join("summary.json"), &Summary::new(config, prompt, out)?)
}
