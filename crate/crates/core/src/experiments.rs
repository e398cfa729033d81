//! Hyperparameter sweeps over the time-embedding size.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data_synth::Splits;
use crate::error::{Error, Result};
use crate::rng::Seeds;
use crate::sequence_model::{EmbedderKind, ModelConfig};
use crate::training::{train, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Number of base frequencies (or Bochner samples).
    D,
    /// Fourier degree of the Mercer embedding.
    K,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d" => Ok(SweepParam::D),
            "k" => Ok(SweepParam::K),
            _ => Err(Error::config(format!(
                "cannot sweep `{s}`; expected d or k"
            ))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::D => "d",
            SweepParam::K => "k",
        })
    }
}

impl SweepParam {
    pub fn apply(self, base: &ModelConfig, value: usize) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::D => cfg.d = value,
            SweepParam::K if base.embedder != EmbedderKind::Mercer => {
                return Err(Error::config("k can only be swept for the mercer embedder"))
            }
            SweepParam::K => cfg.k = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: usize,
    pub repeat: usize,
    pub seed: u64,
    pub epochs: usize,
    pub valid_accuracy: f64,
    pub test_accuracy: f64,
    pub test_ndcg_at_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: usize,
    pub runs: usize,
    pub mean_test_accuracy: f64,
    /// Sample standard deviation; zero for a single run.
    pub std_test_accuracy: f64,
}

/// Seed of one sweep run, derived from the root seed so that runs do not
/// share randomness and adding values leaves existing runs untouched.
pub fn run_seed(root: u64, param: SweepParam, value: usize, repeat: usize) -> u64 {
    Seeds::new(root)
        .child(&format!("sweep/{param}={value}/{repeat}"))
        .root()
}

/// Trains one model per value per repeat on the same splits.
pub fn sweep(
    base: &ModelConfig,
    optim: &OptimConfig,
    splits: &Splits,
    param: SweepParam,
    values: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<SweepRun>> {
    if values.is_empty() || repeats == 0 {
        return Err(Error::config(
            "sweep needs at least one value and one repeat",
        ));
    }
    let cfgs = values
        .iter()
        .map(|&v| param.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut runs = Vec::with_capacity(values.len() * repeats);
    for (&value, cfg) in values.iter().zip(&cfgs) {
        for repeat in 0..repeats {
            let s = run_seed(seed, param, value, repeat);
            let out = train(
                cfg,
                optim,
                &splits.train,
                &splits.valid,
                &splits.test,
                s,
                |_, _| {},
            )?;
            info!(
                "{param}={value} repeat {repeat}: test accuracy {:.4}",
                out.test.accuracy
            );
            runs.push(SweepRun {
                value,
                repeat,
                seed: s,
                epochs: out.log.len(),
                valid_accuracy: out.valid.accuracy,
                test_accuracy: out.test.accuracy,
                test_ndcg_at_10: out.test.ndcg_at_10,
            });
        }
    }
    Ok(runs)
}

/// Mean and spread of test accuracy per value, in first-seen order.
pub fn summarize(runs: &[SweepRun]) -> Vec<SweepSummary> {
    let mut values: Vec<usize> = Vec::new();
    for r in runs {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|value| {
            let acc: Vec<f64> = runs
                .iter()
                .filter(|r| r.value == value)
                .map(|r| r.test_accuracy)
                .collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let var = if acc.len() > 1 {
                acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            SweepSummary {
                value,
                runs: acc.len(),
                mean_test_accuracy: mean,
                std_test_accuracy: var.sqrt(),
            }
        })
        .collect()
}

pub fn write_runs_csv(path: &Path, param: SweepParam, runs: &[SweepRun]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "param,value,repeat,seed,epochs,valid_accuracy,test_accuracy,test_ndcg_at_10"
    )?;
    for r in runs {
        writeln!(
            f,
            "{param},{},{},{},{},{:?},{:?},{:?}",
            r.value,
            r.repeat,
            r.seed,
            r.epochs,
            r.valid_accuracy,
            r.test_accuracy,
            r.test_ndcg_at_10
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, param: SweepParam, rows: &[SweepSummary]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "param,value,runs,mean_test_accuracy,std_test_accuracy")?;
    for r in rows {
        writeln!(
            f,
            "{param},{},{},{:?},{:?}",
            r.value, r.runs, r.mean_test_accuracy, r.std_test_accuracy
        )?;
    }
    f.flush()?;
    Ok(())
}
