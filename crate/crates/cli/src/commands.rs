use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use mlcnn_core::baseline::{naive_baseline, ArBaseline};
use mlcnn_core::data::{self, SeriesDataset};
use mlcnn_core::metrics;
use mlcnn_core::stats::welch_t_test;
use mlcnn_core::train::{self, parse_summary};
use mlcnn_core::{synthetic, RunConfig, Tensor, Variant};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::run::*;

/// Prints to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Forecast(a) => forecast_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

/// Runs `f` over `items` on `jobs` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> CliResult<R> + Sync) -> CliResult<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CliResult<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

// ------------------------------------------------------------------ train

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let mut cfg = a.config.build()?;
    let ds = load_data(&mut cfg)?;
    let t = train_model(&cfg, &ds, a.config.quiet)?;
    save_run(&a.out, &cfg, &t)?;
    let r = &t.report;
    outln!(
        "trained {} on {} windows: loss {} best_epoch {} best_valid_rmse {} best_valid_mae {} steps {} ({:.1}s)",
        cfg.model.variant,
        t.prepared.train.len(),
        r.loss,
        r.best_epoch,
        r.best_valid_rmse,
        r.best_valid_mae,
        r.steps,
        t.train_seconds
    );
    outln!("run written to {}", a.out.display());
    Ok(())
}

// --------------------------------------------------------------- evaluate

fn evaluate_cmd(a: EvaluateArgs) -> CliResult<()> {
    let run = restore(&a.out, a.data.as_deref())?;
    let windows = a.split.windows(&run.prepared);
    let task = format!("mlcnn-{}", run.cfg.model.variant);
    let (ev, mut report) = evaluate_split(&run.model, windows, &task)?;
    report.train_seconds = read_train_seconds(&a.out);
    write_file(&a.out.join(a.split.file("metrics", "txt")), report.to_text())?;
    write_file(
        &a.out.join(a.split.file("predictions", "csv")),
        predictions_csv(windows, &run.dataset.names, &ev)?,
    )?;
    let baselines = baseline_table(&run.cfg, &run.dataset, &run.prepared, a.split, a.ar_order, a.ar_lambda)?;
    write_file(&a.out.join(a.split.file("baselines", "txt")), &baselines)?;

    out!("{}", report.to_text());
    out!("{baselines}");
    if a.split == SplitName::Valid && a.data.is_none() {
        if let Ok(log) = std::fs::read_to_string(a.out.join(TRAIN_LOG)) {
            let summary = parse_summary(&log)?;
            let logged = summary.get("best_valid_rmse").cloned().unwrap_or_default();
            let same = logged == ev.rmse.to_string();
            outln!("log_match: {same}");
            if !same {
                eprintln!("warning: logged best_valid_rmse {logged} differs from re-derived {}", ev.rmse);
            }
        }
    }
    Ok(())
}

/// Naive and ridge-AR metrics on the same windows as the model.
fn baseline_table(
    cfg: &RunConfig,
    ds: &SeriesDataset,
    prepared: &data::Prepared,
    split: SplitName,
    ar_order: Option<usize>,
    ar_lambda: f64,
) -> CliResult<String> {
    let windows = split.windows(prepared);
    let main = windows.main_index();
    let idx: Vec<usize> = (0..windows.len()).collect();
    let y = train::task_rows(&windows.targets_raw(&idx), main)?;
    let naive = train::task_rows(&naive_baseline(windows), main)?;
    let (nr, nm) = metrics::aggregate(&y, &naive)?;

    let order = ar_order.unwrap_or(cfg.model.p).min(cfg.model.p);
    let scaler = windows.scaler();
    let train_rows = scaler.normalize(&ds.rows(prepared.splits.train.clone())?)?;
    let ar = ArBaseline::fit(&train_rows, order, ar_lambda, cfg.model.horizon)?;
    let mut pred = Vec::with_capacity(windows.len() * windows.n());
    let x = windows.inputs(&idx);
    let (p, n) = (cfg.model.p, windows.n());
    for i in 0..windows.len() {
        let w = Tensor::new([p, n], x.data()[i * p * n..(i + 1) * p * n].to_vec())?;
        pred.extend(ar.predict_window(&w)?);
    }
    let ar_pred = scaler.denormalize(&Tensor::new([windows.len(), n], pred)?)?;
    let (ar_r, ar_m) = metrics::aggregate(&y, &ar_pred)?;

    let mut s = String::new();
    let _ = writeln!(s, "baseline naive rmse: {nr}");
    let _ = writeln!(s, "baseline naive mae: {nm}");
    let _ = writeln!(s, "baseline ar{order} rmse: {ar_r}");
    let _ = writeln!(s, "baseline ar{order} mae: {ar_m}");
    Ok(s)
}

// --------------------------------------------------------------- forecast

fn forecast_cmd(a: ForecastArgs) -> CliResult<()> {
    let run = restore(&a.out, None)?;
    let cfg = &run.cfg;
    let (p, n) = (cfg.model.p, cfg.model.n);
    let source = match &a.input {
        Some(path) => {
            let ds = data::load_csv(path, &cfg.data.csv)?;
            if ds.variables() != n {
                return Err(CliError::data(format!(
                    "{} has {} variables, the model expects {n}",
                    path.display(),
                    ds.variables()
                )));
            }
            ds
        }
        None => run.dataset.clone(),
    };
    if source.len() < p {
        return Err(CliError::data(format!("need at least {p} rows, got {}", source.len())));
    }
    let last = source.len() - 1;
    let window = source.rows(source.len() - p..source.len())?;
    let scaler = run.prepared.train.scaler();
    let x = scaler.normalize(&window)?.reshape([1, p, n])?;
    let y = scaler.denormalize(&run.model.predict(&x)?)?;

    let mut out = String::from("task,offset,target_row,variable,y_pred\n");
    for k in 0..cfg.model.tasks() {
        let offset = cfg.model.target_offset(k);
        for (j, name) in source.names.iter().enumerate() {
            let _ = writeln!(
                out,
                "{k},{offset},{},{},{}",
                last + offset,
                csv_field(name),
                y.data()[k * n + j]
            );
        }
    }
    write_file(&a.out.join("forecast.csv"), &out)?;
    out!("{out}");
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

// ----------------------------------------------------------------- ablate

#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub params: usize,
    pub test_rmse: f64,
    pub test_mae: f64,
    pub best_valid_rmse: f64,
    pub best_epoch: usize,
    pub steps: usize,
    pub train_seconds: f64,
}

/// Trains and tests one configuration; optionally saves the run.
pub fn run_once(cfg: &RunConfig, ds: &SeriesDataset, save: Option<&Path>, quiet: bool) -> CliResult<RunResult> {
    let t = train_model(cfg, ds, quiet)?;
    if let Some(dir) = save {
        save_run(dir, cfg, &t)?;
    }
    let ev = train::evaluate(&t.model, &t.prepared.test)?;
    Ok(RunResult {
        variant: cfg.model.variant,
        seed: cfg.train.seed,
        params: t.model.params().num_scalars(),
        test_rmse: ev.rmse,
        test_mae: ev.mae,
        best_valid_rmse: t.report.best_valid_rmse,
        best_epoch: t.report.best_epoch,
        steps: t.report.steps,
        train_seconds: t.train_seconds,
    })
}

const RUN_COLUMNS: &str = "variant,seed,params,test_rmse,test_mae,best_valid_rmse,best_epoch,steps,train_seconds";

fn run_line(r: &RunResult) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.variant, r.seed, r.params, r.test_rmse, r.test_mae, r.best_valid_rmse, r.best_epoch, r.steps, r.train_seconds
    )
}

/// One row per variant: mean and spread of the test metrics, plus Welch's
/// test of each variant's RMSE against the full model's.
pub fn ablation_table(results: &[RunResult]) -> String {
    let mut s = String::from(
        "variant runs params rmse_mean rmse_std mae_mean mae_std welch_t welch_p significant_5pct\n",
    );
    let rmse_of = |v: Variant| -> Vec<f64> { results.iter().filter(|r| r.variant == v).map(|r| r.test_rmse).collect() };
    let full = rmse_of(Variant::Full);
    for v in Variant::ALL {
        let rs: Vec<&RunResult> = results.iter().filter(|r| r.variant == v).collect();
        if rs.is_empty() {
            continue;
        }
        let rmse: Vec<f64> = rs.iter().map(|r| r.test_rmse).collect();
        let mae: Vec<f64> = rs.iter().map(|r| r.test_mae).collect();
        let (rm, rsd) = mean_std(&rmse);
        let (mm, msd) = mean_std(&mae);
        let welch = if v == Variant::Full { None } else { welch_t_test(&full, &rmse).ok() };
        let (t, p, sig) = match welch {
            Some(w) => (w.t.to_string(), w.p.to_string(), w.significant_at_5pct.to_string()),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let _ = writeln!(
            s,
            "{v} {} {} {rm} {rsd} {mm} {msd} {t} {p} {sig}",
            rs.len(),
            rs[0].params
        );
    }
    s
}

fn ablate_cmd(a: AblateArgs) -> CliResult<()> {
    if a.seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    let mut base = a.config.build()?;
    let ds = load_data(&mut base)?;
    let first = base.train.seed;
    let mut jobs = Vec::new();
    for v in Variant::ALL {
        for s in first..first + a.seeds {
            let mut cfg = base.clone();
            cfg.model.variant = v;
            cfg.set("seed", &s.to_string())?;
            jobs.push(cfg);
        }
    }
    let results = par_map(&jobs, a.jobs, |cfg| {
        let r = run_once(cfg, &ds, None, true)?;
        if !a.config.quiet {
            eprintln!("{} seed {}: test_rmse {} ({:.1}s)", r.variant, r.seed, r.test_rmse, r.train_seconds);
        }
        Ok(r)
    })?;
    let mut runs = format!("{RUN_COLUMNS}\n");
    for r in &results {
        runs.push_str(&run_line(r));
        runs.push('\n');
    }
    let table = ablation_table(&results);
    write_file(&a.out.join("runs.csv"), runs)?;
    write_file(&a.out.join("ablation.txt"), &table)?;
    write_file(&a.out.join(MANIFEST), manifest_text(&base))?;
    out!("{table}");
    Ok(())
}

// ------------------------------------------------------------------ bench

fn bench_cmd(a: BenchArgs) -> CliResult<()> {
    if a.fractions.is_empty() || a.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(CliError::usage("--fractions must lie in (0, 1]"));
    }
    let mut cfg = a.config.build()?;
    let ds = load_data(&mut cfg)?;
    let rows: Vec<(f64, usize)> = a
        .fractions
        .iter()
        .map(|&f| (f, ((ds.len() as f64 * f).floor() as usize).max(1)))
        .collect();
    let lines = par_map(&rows, a.jobs, |&(f, len)| {
        let part = SeriesDataset::new(ds.rows(0..len)?, ds.names.clone())?;
        let t = train_model(&cfg, &part, true)?;
        let start = Instant::now();
        let ev = train::evaluate(&t.model, &t.prepared.test)?;
        let predict_seconds = start.elapsed().as_secs_f64();
        let steps = t.report.steps.max(1);
        let line = format!(
            "{f},{len},{},{},{},{},{},{},{}",
            t.prepared.train.len(),
            t.report.steps,
            t.report.epochs.len(),
            t.train_seconds,
            t.train_seconds / steps as f64,
            predict_seconds,
            ev.rmse
        );
        if !a.config.quiet {
            eprintln!("fraction {f}: {len} rows, {:.2}s train, {:.3}s predict", t.train_seconds, predict_seconds);
        }
        Ok(line)
    })?;
    let mut out =
        String::from("fraction,rows,train_windows,steps,epochs,train_seconds,seconds_per_step,predict_seconds,test_rmse\n");
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    write_file(&a.out.join("bench.csv"), &out)?;
    write_file(&a.out.join(MANIFEST), manifest_text(&cfg))?;
    out!("{out}");
    Ok(())
}

// ------------------------------------------------------------------ sweep

/// Cartesian product of `KEY=V1,V2` specs as lists of assignments.
pub fn expand_grid(specs: &[String]) -> CliResult<Vec<Vec<(String, String)>>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for spec in specs {
        let (k, vs) = spec
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--grid expects KEY=V1,V2,..., got `{spec}`")))?;
        let values: Vec<&str> = vs.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(CliError::usage(format!("--grid `{spec}` lists no values")));
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.trim().to_string(), v.to_string()));
                    c
                })
            })
            .collect();
    }
    Ok(combos)
}

fn sweep_cmd(a: SweepArgs) -> CliResult<()> {
    let mut base = a.config.build()?;
    let ds = load_data(&mut base)?;
    let combos = expand_grid(&a.grid)?;
    let mut cfgs = Vec::with_capacity(combos.len());
    for combo in &combos {
        let mut cfg = base.clone();
        for (k, v) in combo {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        cfgs.push(cfg);
    }
    let indexed: Vec<(usize, &RunConfig)> = cfgs.iter().enumerate().collect();
    let results = par_map(&indexed, a.jobs, |(i, cfg)| {
        let dir = a.out.join(format!("run{i:03}"));
        let r = run_once(cfg, &ds, Some(&dir), true)?;
        if !a.config.quiet {
            eprintln!("run{i:03}: best_valid_rmse {} test_rmse {}", r.best_valid_rmse, r.test_rmse);
        }
        Ok(r)
    })?;
    let mut out = format!("run,setting,{RUN_COLUMNS}\n");
    for (i, (combo, r)) in combos.iter().zip(&results).enumerate() {
        let setting: Vec<String> = combo.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "run{i:03},{},{}", setting.join(";"), run_line(r));
    }
    write_file(&a.out.join("sweep.csv"), &out)?;
    out!("{out}");
    Ok(())
}

// ------------------------------------------------------------------ synth

fn synth_cmd(a: SynthArgs) -> CliResult<()> {
    if a.len == 0 || a.vars == 0 {
        return Err(CliError::usage("--len and --vars must be positive"));
    }
    let values = match a.kind {
        SynthKind::Sinusoids => synthetic::sinusoids(a.len, a.vars, a.noise, a.seed),
        SynthKind::LevelShift => synthetic::level_shift(a.len, a.vars, a.shift_at, a.factor, a.noise, a.seed),
        SynthKind::Ar1 => synthetic::ar1(a.len, a.vars, a.phi, a.sigma, a.seed),
        SynthKind::RandomWalk => synthetic::random_walk(a.len, a.vars, a.sigma, a.seed),
    };
    let names = (0..a.vars).map(|i| format!("x{i}")).collect();
    let ds = SeriesDataset::new(values, names)?;
    let mut buf = Vec::new();
    if a.header {
        data::write_csv(&ds, &mut buf, b',')?;
    } else {
        let mut full = Vec::new();
        data::write_csv(&ds, &mut full, b',')?;
        let skip = full.iter().position(|&b| b == b'\n').map_or(0, |i| i + 1);
        buf.extend_from_slice(&full[skip..]);
    }
    write_file(&a.output, buf)?;
    outln!("wrote {} rows x {} variables to {}", a.len, a.vars, a.output.display());
    Ok(())
}

#[cfg(test)]
mod tests;
