use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lace_core::eval;
use lace_core::eval::{
    convergence, ekf_run, evaluate, tune_on_open_sky, write_convergence_csv, write_sweep_csv,
    BubbleConfig, BubbleModel, ConstantModel, CovModel, EkfConfig, LearnedModel, OracleModel,
};
use lace_core::learn::train::{split_sessions, train_with_progress};
use lace_core::learn::{write_loss_csv, Mode, TrainConfig};
use lace_core::net::checkpoint::Checkpoint;
use lace_core::world::{gen_session, write_jsonl, WorldConfig};

use crate::dataset::{lap_file, lap_seed, session_files, Dataset, EVAL_DIR, TRAIN_DIR, WORLD_FILE};
use crate::error::{CliError, CliResult};
use crate::manifest::Run;
use crate::{ConvergeArgs, EkfArgs, EvalArgs, GenerateArgs, LambdaSweepArgs, TrainArgs};

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(CliError::io(path))
}

fn finish_file(mut w: BufWriter<File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(CliError::io(path))
}

/// Canonical `key = value` lines hashed into the manifest.
fn settings(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn load_checkpoint(path: &Path, delta_t: f64) -> CliResult<Checkpoint> {
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if (ckpt.spectral.delta_t - delta_t).abs() > 1e-9 {
        return Err(CliError::Usage(format!(
            "{}: trained at a sampling period of {} s, dataset has {delta_t} s",
            path.display(),
            ckpt.spectral.delta_t
        )));
    }
    Ok(ckpt)
}

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let mut world = match &args.config {
        Some(p) => WorldConfig::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => WorldConfig::default(),
    };
    if let Some(seed) = args.seed {
        world.seed = seed;
    }
    world.validate()?;
    if args.laps == 0 {
        return Err(CliError::Usage("--laps must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&args.eval_fraction) {
        return Err(CliError::Usage("--eval-fraction must be in [0, 1)".into()));
    }
    let world_toml = world.to_toml()?;
    let effective = format!(
        "{world_toml}\n{}",
        settings(&[("laps", args.laps.to_string()), ("eval_fraction", args.eval_fraction.to_string())])
    );
    let mut run = Run::start("generate", args.config.as_deref(), &effective, world.seed);
    if let Some(p) = &args.config {
        run.input(p);
    }

    let out = &args.out;
    for split in [TRAIN_DIR, EVAL_DIR] {
        let dir = out.join(split);
        create_dir(&dir)?;
        // Stale laps from an earlier, larger run would otherwise join the split.
        for stale in session_files(&dir)? {
            std::fs::remove_file(&stale).map_err(CliError::io(&stale))?;
        }
    }
    let world_path = out.join(WORLD_FILE);
    std::fs::write(&world_path, &world_toml).map_err(CliError::io(&world_path))?;
    run.output(&world_path);

    let (_, eval_idx) = split_sessions(args.laps, args.eval_fraction, world.seed);
    for lap in 0..args.laps {
        let split = if eval_idx.contains(&lap) { EVAL_DIR } else { TRAIN_DIR };
        let path = out.join(split).join(lap_file(lap));
        let records = gen_session(&world, 1, lap_seed(world.seed, lap))?;
        let w = create_file(&path)?;
        write_jsonl(&records, w)?;
        run.output(&path);
    }
    eprintln!(
        "wrote {} training and {} eval laps to {}",
        args.laps - eval_idx.len(),
        eval_idx.len(),
        out.display()
    );
    run.finish(out)?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    cfg.mode = args.mode;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = Dataset::load(&args.data)?;
    let effective = toml::to_string(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut run = Run::start("train", args.config.as_deref(), &effective, cfg.seed);
    for p in ds.paths() {
        run.input(&p);
    }

    let sessions = ds.prepared_train();
    let (fit_idx, val_idx) = split_sessions(sessions.len(), cfg.eval_fraction, cfg.seed);
    let fit: Vec<_> = fit_idx.iter().map(|&i| sessions[i].clone()).collect();
    let val: Vec<_> = val_idx.iter().map(|&i| sessions[i].clone()).collect();
    let mode = cfg.mode;
    let result = train_with_progress(&fit, &val, &cfg, |e| {
        if e.epoch % 10 == 0 {
            let eval = e.eval.map_or(String::from("-"), |l| format!("{:.5}", l.total));
            eprintln!("{} epoch {:>5}  train {:.5}  eval {eval}", mode.name(), e.epoch, e.train.total);
        }
    })?;

    create_dir(&args.out)?;
    let loss_path = args.out.join(format!("{}_loss.csv", mode.name()));
    let mut w = create_file(&loss_path)?;
    write_loss_csv(&result.trace, &mut w)?;
    finish_file(w, &loss_path)?;
    run.output(&loss_path);
    if cfg.epochs > 0 {
        let r0 = (mode == Mode::Lace).then(|| result.r0.clone());
        let mut ckpt = Checkpoint::new(mode, &cfg.model, &result.objective.spectral, &result.params, r0, result.best_epoch);
        ckpt.output_scale = result.objective.scale;
        let ckpt_path = args.out.join(format!("{}_checkpoint.json", mode.name()));
        ckpt.save(&ckpt_path)?;
        run.output(&ckpt_path);
        eprintln!("best epoch {} -> {}", result.best_epoch, ckpt_path.display());
    }
    run.finish(&args.out)?;
    Ok(())
}

fn learned_models(paths: &[PathBuf], delta_t: f64) -> CliResult<Vec<LearnedModel>> {
    let mut models: Vec<LearnedModel> = Vec::new();
    for p in paths {
        let ckpt = load_checkpoint(p, delta_t)?;
        let mut m = LearnedModel::from_checkpoint(&ckpt)?;
        if models.iter().any(|o| o.name == m.name) {
            let stem = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            m = m.named(&stem);
        }
        models.push(m);
    }
    Ok(models)
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let ds = Dataset::load(&args.data)?;
    let effective = settings(&[
        ("checkpoints", format!("{:?}", args.checkpoints)),
        ("r_max", args.r_max.to_string()),
    ]);
    let mut run = Run::start("eval", None, &effective, 0);
    for p in ds.paths().iter().chain(&args.checkpoints) {
        run.input(p);
    }
    let learned = learned_models(&args.checkpoints, ds.delta_t())?;
    let train = ds.prepared_train();
    let constant = ConstantModel::calibrate(&train)?;
    let bubble = BubbleModel::calibrate(&train, BubbleConfig::for_world(&ds.world))?;
    let test: Vec<_> = ds.test_sessions().iter().map(|s| s.prepared.clone()).collect();
    let mut models: Vec<&dyn CovModel> = learned.iter().map(|m| m as &dyn CovModel).collect();
    models.push(&bubble);
    models.push(&constant);
    if test.iter().all(|s| s.truth.is_some()) {
        models.push(&OracleModel);
    }
    let report = evaluate(&models, &test, args.r_max)?;

    create_dir(&args.out)?;
    let path = args.out.join("eval.csv");
    let mut w = create_file(&path)?;
    report.write_csv(&mut w)?;
    finish_file(w, &path)?;
    run.output(&path);
    println!("{}", report.table());
    run.finish(&args.out)?;
    Ok(())
}

pub fn converge(args: &ConvergeArgs) -> CliResult<()> {
    let ds = Dataset::load(&args.data)?;
    let sessions = ds.test_sessions();
    let session = sessions.get(args.session).ok_or_else(|| {
        CliError::Usage(format!("session {} out of range ({} available)", args.session, sessions.len()))
    })?;
    let model = LearnedModel::from_checkpoint(&load_checkpoint(&args.checkpoint, ds.delta_t())?)?;
    let effective = settings(&[
        ("checkpoint", args.checkpoint.display().to_string()),
        ("inits", args.inits.to_string()),
        ("session", session.path.display().to_string()),
    ]);
    let mut run = Run::start("converge", None, &effective, args.seed);
    run.input(&args.checkpoint);
    run.input(&session.path);
    let result = convergence(&model, &session.prepared, args.inits, args.seed)?;

    create_dir(&args.out)?;
    let path = args.out.join("convergence.csv");
    let mut w = create_file(&path)?;
    write_convergence_csv(&result, &mut w)?;
    finish_file(w, &path)?;
    run.output(&path);
    let r = &result.report;
    println!("final max gap      {:.3e}", r.final_max_distance());
    println!("fitted log slope   {:.6}", r.fitted_slope);
    println!("expected log slope {:.6}", r.expected_slope);
    run.finish(&args.out)?;
    Ok(())
}

pub fn lambda_sweep(args: &LambdaSweepArgs) -> CliResult<()> {
    if let Some(l) = args.lambdas.iter().find(|l| !(**l < 0.0)) {
        return Err(CliError::Usage(format!("λ values must be negative, got {l}")));
    }
    let ds = Dataset::load(&args.data)?;
    let model = LearnedModel::from_checkpoint(&load_checkpoint(&args.checkpoint, ds.delta_t())?)?;
    let effective = settings(&[
        ("checkpoint", args.checkpoint.display().to_string()),
        ("lambdas", format!("{:?}", args.lambdas)),
    ]);
    let mut run = Run::start("lambda-sweep", None, &effective, 0);
    run.input(&args.checkpoint);
    for p in ds.paths() {
        run.input(&p);
    }
    let test: Vec<_> = ds.test_sessions().iter().map(|s| s.prepared.clone()).collect();
    let rows = eval::lambda_sweep(&model, &test, &args.lambdas)?;

    create_dir(&args.out)?;
    let path = args.out.join("lambda_sweep.csv");
    let mut w = create_file(&path)?;
    write_sweep_csv(&rows, &mut w)?;
    finish_file(w, &path)?;
    run.output(&path);
    println!("{:>8} {:>12} {:>10} {:>12} {:>12}  bound", "lambda", "avg_loss", "std", "min_rate", "mean_trace");
    for r in &rows {
        println!(
            "{:>8} {:>12.5} {:>10.5} {:>12.4} {:>12.5}  {}",
            r.lambda,
            r.avg_loss,
            r.std,
            r.min_logdet_rate,
            r.mean_trace,
            if r.within_bound { "ok" } else { "OUTSIDE" }
        );
    }
    run.finish(&args.out)?;
    Ok(())
}

fn ekf_model(spec: &str, ds: &Dataset) -> CliResult<Box<dyn CovModel>> {
    let train = ds.prepared_train();
    Ok(match spec {
        "oracle" => Box::new(OracleModel),
        "constant" => Box::new(ConstantModel::calibrate(&train)?),
        "bubble" => Box::new(BubbleModel::calibrate(&train, BubbleConfig::for_world(&ds.world))?),
        s if s.starts_with("constant:") => {
            let c: f64 = s["constant:".len()..]
                .parse()
                .map_err(|_| CliError::Usage(format!("bad constant in {s:?}")))?;
            Box::new(ConstantModel::new(c)?)
        }
        path => Box::new(LearnedModel::from_checkpoint(&load_checkpoint(Path::new(path), ds.delta_t())?)?),
    })
}

pub fn ekf(args: &EkfArgs) -> CliResult<()> {
    let ds = Dataset::load(&args.data)?;
    let model = ekf_model(&args.model, &ds)?;
    let accel_psd = match args.accel_psd {
        Some(q) if q > 0.0 => q,
        Some(q) => return Err(CliError::Usage(format!("--accel-psd must be positive, got {q}"))),
        None => tune_on_open_sky(&ds.world, args.seed)?,
    };
    let effective = settings(&[
        ("model", args.model.clone()),
        ("accel_psd", accel_psd.to_string()),
        ("exit_margin", args.exit_margin.to_string()),
    ]);
    let mut run = Run::start("ekf", None, &effective, args.seed);
    for p in ds.paths() {
        run.input(&p);
    }
    let cfg = EkfConfig {
        accel_psd,
        ..EkfConfig::default()
    };

    create_dir(&args.out)?;
    let summary_path = args.out.join("ekf_summary.csv");
    let mut summary = create_file(&summary_path)?;
    let header = "session,rmse,rmse_zone,zone_steps,max_jump,max_nis,diverged";
    writeln!(summary, "{header}").map_err(CliError::io(&summary_path))?;
    let (mut zone_sq, mut zone_n) = (0.0, 0usize);
    for (i, session) in ds.test_sessions().iter().enumerate() {
        let covs = model.covariances(&session.prepared)?;
        let zone: Vec<bool> = session
            .prepared
            .arc
            .iter()
            .map(|s| ds.world.in_bridge_zone(*s, args.exit_margin))
            .collect();
        let report = ekf_run(&session.records, &covs, &zone, &cfg, args.seed.wrapping_add(i as u64))?;
        let name = session.path.file_stem().map_or_else(|| i.to_string(), |s| s.to_string_lossy().into_owned());
        let traj_path = args.out.join(format!("ekf_{name}.csv"));
        let mut w = create_file(&traj_path)?;
        report.write_csv(&mut w)?;
        finish_file(w, &traj_path)?;
        run.output(&traj_path);
        writeln!(
            summary,
            "{name},{},{},{},{},{},{}",
            report.rmse, report.rmse_zone, report.zone_steps, report.max_jump, report.max_nis, report.diverged
        )
        .map_err(CliError::io(&summary_path))?;
        if report.zone_steps > 0 {
            zone_sq += report.rmse_zone.powi(2) * report.zone_steps as f64;
            zone_n += report.zone_steps;
        }
        println!(
            "{name}: rmse {:.4} m, zone rmse {:.4} m{}",
            report.rmse,
            report.rmse_zone,
            if report.diverged { ", diverged" } else { "" }
        );
    }
    finish_file(summary, &summary_path)?;
    run.output(&summary_path);
    if zone_n > 0 {
        println!("pooled zone rmse {:.4} m over {zone_n} steps ({})", (zone_sq / zone_n as f64).sqrt(), model.name());
    }
    run.finish(&args.out)?;
    Ok(())
}
