use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use serde_json::json;

use timekernel::autodiff::Tensor;
use timekernel::data_synth::{
    bayes_rates, generate, load_jsonl, write_jsonl, Dataset, Splits, Task,
};
use timekernel::experiments::{summarize, sweep, write_runs_csv, write_summary_csv, SweepParam};
use timekernel::kernel_lab::{
    claim1_bound, eigenfunction_residual, mc_approximation_study, truncation_decay, KernelSpec,
    PeriodicKernelSpec,
};
use timekernel::sequence_model::{EmbedderKind, ModelConfig};
use timekernel::training::{train, write_epoch_csv, Checkpoint, Monitor, OptimConfig};
use timekernel::{Error, Result};

use crate::manifest::{write_atomic, Outputs, RunManifest};
use crate::{
    Command, CountArgs, DataArgs, ExportArgs, ExportWhat, GenerateArgs, KernelApproxArgs,
    MercerCheckArgs, ModelArgs, MonitorArg, OptimArgs, SweepArgs, TrainArgs,
};

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Reclassifies a bad flag value as a usage error.
fn as_usage(e: Error) -> Error {
    match e {
        Error::Input(m) | Error::Config(m) | Error::Spec(m) => Error::Config(m),
        other => other,
    }
}

/// Runs one subcommand and writes its manifest. A numerical abort still
/// leaves its outputs and manifest behind before the error is returned.
pub fn run(cmd: &Command, out_dir: &Path) -> Result<()> {
    let start = Instant::now();
    let mut out = Outputs::new(out_dir)?;
    let (seed, abort) = match cmd {
        Command::Generate(a) => (Some(a.seed), generate_cmd(a, &mut out).map(|_| None)?),
        Command::KernelApprox(a) => (Some(a.seed), kernel_approx(a, &mut out).map(|_| None)?),
        Command::MercerCheck(a) => (None, mercer_check(a, &mut out).map(|_| None)?),
        Command::Train(a) => (Some(a.seed), train_cmd(a, &mut out)?),
        Command::Sweep(a) => (Some(a.seed), sweep_cmd(a, &mut out).map(|_| None)?),
        Command::Export(a) => (Some(a.seed), export(a, &mut out).map(|_| None)?),
    };
    let manifest = RunManifest {
        subcommand: cmd.name().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        argv: std::env::args().collect(),
        flags: serde_json::to_value(cmd).map_err(std::io::Error::other)?,
        seed,
        artifacts: Default::default(),
        timing_artifacts: Vec::new(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let path = out.finish(manifest)?;
    info!("wrote {}", path.display());
    match abort {
        Some(msg) => Err(Error::Numerical(msg)),
        None => Ok(()),
    }
}

fn task_with_counts(name: &str, c: &CountArgs) -> Result<Task> {
    let task = Task::by_name(name).map_err(as_usage)?;
    let (mut tr, mut va, mut te) = match &task {
        Task::GapRule(t) => (t.n_train, t.n_valid, t.n_test),
        Task::PeriodicAttention(t) => (t.n_train, t.n_valid, t.n_test),
    };
    tr = c.n_train.unwrap_or(tr);
    va = c.n_valid.unwrap_or(va);
    te = c.n_test.unwrap_or(te);
    Ok(task.with_counts(tr, va, te))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn generate_cmd(a: &GenerateArgs, out: &mut Outputs) -> Result<()> {
    let task = task_with_counts(&a.task, &a.counts)?;
    let splits = generate(&task, a.seed)?;
    for (name, d) in [
        ("train", &splits.train),
        ("valid", &splits.valid),
        ("test", &splits.test),
    ] {
        write_jsonl(&out.file(&format!("{name}.jsonl")), d)?;
    }
    let bayes = bayes_rates(&task).ok();
    write_json(
        &out.file("task.json"),
        &json!({ "task": task, "seed": a.seed, "vocab": task.vocab(), "bayes_rates": bayes }),
    )?;
    println!(
        "{}: {} / {} / {} sequences",
        a.task,
        splits.train.len(),
        splits.valid.len(),
        splits.test.len()
    );
    if let Some(b) = bayes {
        println!(
            "bayes accuracy: with gaps {:.4}, without gaps {:.4} (branch majority {:.4})",
            b.with_gaps, b.without_gaps, b.without_gaps_branch
        );
    }
    Ok(())
}

fn kernel_approx(a: &KernelApproxArgs, out: &mut Outputs) -> Result<()> {
    let spec = KernelSpec::by_name(&a.kernel).map_err(as_usage)?;
    let rows = mc_approximation_study(&spec, &a.d_list, a.seeds, a.seed, a.grid_step)?;
    let path = out.file(&a.out);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(f, "d,mean_sup_error,max_sup_error,bound,bound_clamped")?;
    println!(
        "{:>6}  {:>10}  {:>10}  {:>10}",
        "d", "mean sup", "max sup", "bound"
    );
    for r in &rows {
        let b = claim1_bound(spec.sigma_p2(), spec.t_max(), a.eps, r.d as f64)?;
        writeln!(
            f,
            "{},{:?},{:?},{:?},{:?}",
            r.d, r.mean_sup_error, r.max_sup_error, b.raw, b.clamped
        )?;
        println!(
            "{:>6}  {:>10.5}  {:>10.5}  {:>10.4e}",
            r.d, r.mean_sup_error, r.max_sup_error, b.raw
        );
    }
    f.flush()?;
    Ok(())
}

fn mercer_check(a: &MercerCheckArgs, out: &mut Outputs) -> Result<()> {
    let spec = PeriodicKernelSpec::by_name(&a.kernel).map_err(as_usage)?;
    if a.jmax == 0 {
        return Err(usage("--jmax must be >= 1"));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.file("eigen_residuals.csv"))?);
    writeln!(f, "j,eigenvalue,fourier_coeff,cos_residual,sin_residual")?;
    for j in 1..=a.jmax {
        let r = eigenfunction_residual(&spec, j, a.quad_points)?;
        writeln!(
            f,
            "{j},{:?},{:?},{:?},{:?}",
            r.eigenvalue,
            spec.fourier_coeff(j),
            r.cos_residual,
            r.sin_residual
        )?;
        if j <= 3 {
            println!("j={j}  c_j={:.8}  residual={:.3e}", r.eigenvalue, r.max());
        }
    }
    f.flush()?;

    let d_list: Vec<usize> = (1..=a.jmax).collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.file("truncation_decay.csv"))?);
    writeln!(f, "d,sup_error,rate_shape")?;
    for r in truncation_decay(&spec, &d_list) {
        writeln!(f, "{},{:?},{:?}", r.d, r.sup_error, r.rate_shape)?;
    }
    f.flush()?;
    println!("c_1 = {:.8}", spec.fourier_coeff(1));
    Ok(())
}

fn load_data(d: &DataArgs, seed: u64) -> Result<(Splits, Option<Task>)> {
    let Some(dir) = &d.data_dir else {
        let task = task_with_counts(&d.task, &d.counts)?;
        return Ok((generate(&task, d.data_seed.unwrap_or(seed))?, Some(task)));
    };
    let read = |name: &str| load_jsonl(&dir.join(format!("{name}.jsonl")), d.vocab);
    let (mut train, mut valid, mut test) = (read("train")?, read("valid")?, read("test")?);
    let vocab = train.vocab_size.max(valid.vocab_size).max(test.vocab_size);
    for s in [&mut train, &mut valid, &mut test] {
        s.vocab_size = vocab;
    }
    let cap = |s: Dataset, n: Option<usize>| match n {
        Some(n) => s.truncated(n),
        None => s,
    };
    Ok((
        Splits {
            train: cap(train, d.counts.n_train),
            valid: cap(valid, d.counts.n_valid),
            test: cap(test, d.counts.n_test),
        },
        None,
    ))
}

fn model_config(m: &ModelArgs, vocab: usize) -> Result<ModelConfig> {
    let mut cfg = match &m.config {
        Some(p) => {
            let c = ModelConfig::load(p)?;
            if c.vocab_size != vocab {
                return Err(usage(format!(
                    "config vocab {} does not match data vocab {vocab}",
                    c.vocab_size
                )));
            }
            c
        }
        None => ModelConfig {
            vocab_size: vocab,
            ..ModelConfig::default()
        },
    };
    if let Some(e) = &m.embedder {
        cfg.embedder = e.parse::<EmbedderKind>().map_err(as_usage)?;
    }
    if cfg.embedder != EmbedderKind::Mercer {
        let mut extra = Vec::new();
        for (set, flag) in [
            (m.k.is_some(), "--k"),
            (m.no_intercept, "--no-intercept"),
            (m.tied, "--tied"),
            (m.train_freqs, "--train-freqs"),
        ] {
            if set {
                extra.push(flag);
            }
        }
        if !extra.is_empty() {
            return Err(usage(format!(
                "mercer-only flags given for {}: {}",
                cfg.embedder,
                extra.join(" ")
            )));
        }
    }
    if let Some(k) = m.k {
        cfg.k = k;
    }
    if let Some(d) = m.d {
        cfg.d = d;
    }
    cfg.intercept &= !m.no_intercept;
    cfg.tied |= m.tied;
    cfg.train_freqs |= m.train_freqs;
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = m.$f { cfg.$f = v; } )* };
    }
    set!(
        event_dim,
        hidden,
        max_seq_len,
        num_blocks,
        num_heads,
        dropout
    );
    cfg.validate().map_err(as_usage)?;
    Ok(cfg)
}

fn optim_config(o: &OptimArgs) -> Result<OptimConfig> {
    let mut c = OptimConfig::default();
    if let Some(v) = o.lr {
        c.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = o.max_epochs {
        c.max_epochs = v;
    }
    if let Some(v) = o.patience {
        c.patience = v;
    }
    if let Some(m) = o.monitor {
        c.monitor = match m {
            MonitorArg::Accuracy => Monitor::Accuracy,
            MonitorArg::Ndcg10 => Monitor::Ndcg10,
        };
    }
    c.validate().map_err(as_usage)?;
    Ok(c)
}

fn train_cmd(a: &TrainArgs, out: &mut Outputs) -> Result<Option<String>> {
    let (splits, task) = load_data(&a.data, a.seed)?;
    let cfg = model_config(&a.model, splits.train.vocab_size)?;
    let optim = optim_config(&a.optim)?;
    let last = out.file("last.ckpt");
    let outcome = train(
        &cfg,
        &optim,
        &splits.train,
        &splits.valid,
        &splits.test,
        a.seed,
        |_, ck| {
            if let Err(e) = ck.save(&last) {
                warn!("could not save {}: {e}", last.display());
            }
        },
    )?;
    if !last.exists() {
        outcome.best.save(&last)?;
    }
    outcome.best.save(&out.file("best.ckpt"))?;
    write_atomic(
        &out.file("model.toml"),
        outcome.best.model_cfg.to_toml_string()?.as_bytes(),
    )?;
    write_epoch_csv(&out.timing_file("epochs.csv"), &outcome.log)?;
    let bayes = task.as_ref().and_then(|t| bayes_rates(t).ok());
    write_json(
        &out.file("metrics.json"),
        &json!({
            "embedder": cfg.embedder.to_string(),
            "epochs": outcome.log.len(),
            "best_epoch": outcome.best.epoch,
            "valid": outcome.valid,
            "test": outcome.test,
            "optim": optim,
            "bayes_rates": bayes,
            "aborted": outcome.aborted,
        }),
    )?;
    let t = &outcome.test;
    println!(
        "{}: test accuracy {:.4}  hit@10 {:.4}  ndcg@10 {:.4}  ({} epochs, best {})",
        cfg.embedder,
        t.accuracy,
        t.hit_at_10,
        t.ndcg_at_10,
        outcome.log.len(),
        outcome.best.epoch
    );
    Ok(outcome.aborted)
}

fn sweep_cmd(a: &SweepArgs, out: &mut Outputs) -> Result<()> {
    let param: SweepParam = a.param.parse().map_err(as_usage)?;
    let (splits, _) = load_data(&a.data, a.seed)?;
    let base = model_config(&a.model, splits.train.vocab_size)?;
    if param == SweepParam::K && base.embedder != EmbedderKind::Mercer {
        return Err(usage("--param k needs --embedder mercer"));
    }
    let optim = optim_config(&a.optim)?;
    let runs = sweep(&base, &optim, &splits, param, &a.values, a.repeat, a.seed)?;
    write_runs_csv(&out.file("sweep_runs.csv"), param, &runs)?;
    let summary = summarize(&runs);
    write_summary_csv(&out.file("sweep_summary.csv"), param, &summary)?;
    for s in &summary {
        println!(
            "{param}={:<4} accuracy {:.4} ± {:.4} over {} runs",
            s.value, s.mean_test_accuracy, s.std_test_accuracy, s.runs
        );
    }
    Ok(())
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || {
        usage(format!(
            "bad grid `{s}`; use start:stop:step or a comma list"
        ))
    };
    let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
    let grid: Vec<f64> = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, h] = parts[..] else {
            return Err(bad());
        };
        let (a, b, h) = (num(a)?, num(b)?, num(h)?);
        if !(h > 0.0 && b >= a && a.is_finite() && b.is_finite()) {
            return Err(bad());
        }
        let n = ((b - a) / h + 1e-9).floor() as usize;
        (0..=n).map(|i| a + i as f64 * h).collect()
    } else {
        s.split(',').map(num).collect::<Result<_>>()?
    };
    if grid.is_empty() || grid.iter().any(|t| !t.is_finite()) {
        return Err(bad());
    }
    Ok(grid)
}

fn write_matrix(path: &Path, header: &[String], rows: &[f64], m: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "t,{}", header.join(","))?;
    for (i, t) in rows.iter().enumerate() {
        let cells: Vec<String> = m.row_slice(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(f, "{t:?},{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

fn export(a: &ExportArgs, out: &mut Outputs) -> Result<()> {
    let ck = match &a.config {
        Some(p) => Checkpoint::load_matching(&a.checkpoint, &ModelConfig::load(p)?)?,
        None => Checkpoint::load(&a.checkpoint)?,
    };
    let model = ck.model()?;
    let grid = parse_grid(&a.grid)?;
    match a.what {
        ExportWhat::Phi | ExportWhat::Gram => {
            let emb = model.time_embedding()?.ok_or_else(|| {
                Error::Input("the posenc model has no time embedding to export".into())
            })?;
            if let ExportWhat::Phi = a.what {
                let phi = emb.export_phi_matrix(&grid)?;
                let header: Vec<String> = (0..phi.shape()[1]).map(|j| format!("phi{j}")).collect();
                write_matrix(&out.file("phi.csv"), &header, &grid, &phi)?;
            } else {
                let gram = emb.export_gram(&grid)?;
                let header: Vec<String> = grid.iter().map(|t| format!("{t:?}")).collect();
                write_matrix(&out.file("gram.csv"), &header, &grid, &gram)?;
            }
        }
        ExportWhat::Attention => {
            let seq = match &a.sequence_file {
                Some(p) => {
                    let d = load_jsonl(p, Some(model.config().vocab_size))?;
                    d.sequences.get(a.index).cloned().ok_or_else(|| {
                        Error::Input(format!("{} has no sequence {}", p.display(), a.index))
                    })?
                }
                None => {
                    let task = Task::by_name("periodic")?;
                    let s = generate(&task, a.seed)?;
                    s.test.sequences.get(a.index).cloned().ok_or_else(|| {
                        Error::Input(format!("no generated test sequence {}", a.index))
                    })?
                }
            };
            if grid.iter().any(|&g| g < 0.0) {
                return Err(usage("attention grid offsets must be >= 0"));
            }
            let last = *seq
                .times
                .last()
                .ok_or_else(|| Error::Input("empty sequence".into()))?;
            let targets: Vec<f64> = grid.iter().map(|g| last + g).collect();
            let att = model.export_attention(&seq, &targets)?;
            let l = att.shape()[1];
            let shown = &seq.times[seq.len() - l..];
            let header: Vec<String> = shown.iter().map(|t| format!("event@{t:?}")).collect();
            write_matrix(&out.file("attention.csv"), &header, &targets, &att)?;
        }
    }
    println!("exported {:?} on {} grid points", a.what, grid.len());
    Ok(())
}
