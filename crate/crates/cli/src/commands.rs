use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use msp_core::config::{Profile, RunConfig};
use msp_core::pipeline::{
    extract_encoder, load_checkpoint, load_encoder, pretrain, save_encoder, PretrainOptions, TrainState,
};
use msp_core::probes::{compare_runs, pooled_leakage, probe_arms, probe_results_csv, CompareChecks, Report};
use msp_core::scene::{load_cloud, save_cloud, CloudFormat};
use msp_core::selfcheck;
use msp_core::shape_context::{compute_multiscale_sc, format_dump};

use crate::{manifest, Cli, Command, ProfileArg};

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let profile = cli.profile.map(|p| match p {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    });
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse(&text, profile).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::new(profile.unwrap_or(Profile::Desk)),
    };
    if let Some(seed) = cli.seed {
        cfg.msp.seed = seed;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn checks_from(cfg: &RunConfig) -> CompareChecks {
    CompareChecks { probe_margin: cfg.probe.margin, leakage_margin: cfg.probe.leakage_margin }
}

/// Execute the parsed command. `Ok(false)` means it ran but a directional
/// or self check failed.
pub fn run(cli: &Cli) -> Result<bool> {
    let cfg = resolve_config(cli)?;
    if cli.dry_run {
        print!("{}", cfg.to_text());
        return Ok(true);
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    let out = &cli.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let (passed, used) = match &cli.command {
        Command::GenData { scenes, format } => (gen_data(&cfg, out, *scenes, (*format).into())?, cfg),
        Command::ShapeContext { input, every } => (shape_context(&cfg, out, input, *every)?, cfg),
        Command::Pretrain { resume, stop_at } => pretrain_cmd(cfg, out, *resume, *stop_at)?,
        Command::ProbeLeakage => (probe_leakage(&cfg, out)?, cfg),
        Command::ProbeLinear { ckpt } => (probe_linear(&cfg, out, ckpt)?, cfg),
        Command::Compare { reports } => (compare(&cfg, out, reports)?, cfg),
        Command::Selfcheck => (run_selfcheck(out)?, cfg),
    };
    write(&out.join("config.cfg"), &used.to_text())?;
    manifest::write(out)?;
    Ok(passed)
}

fn gen_data(cfg: &RunConfig, out: &Path, scenes: Option<usize>, format: CloudFormat) -> Result<bool> {
    let mut data = cfg.data.clone();
    if let Some(n) = scenes {
        data.scenes = n;
    }
    let dir = out.join("scenes");
    fs::create_dir_all(&dir)?;
    for (i, cloud) in data.training_scenes(cfg.msp.seed)?.iter().enumerate() {
        let path = dir.join(format!("scene_{i:03}.{}", format.extension()));
        save_cloud(cloud, &path, format)?;
    }
    info!("wrote {} scenes to {}", data.scenes, dir.display());
    Ok(true)
}

fn shape_context(cfg: &RunConfig, out: &Path, input: &Path, every: usize) -> Result<bool> {
    if every == 0 {
        bail!("--every must be at least 1");
    }
    let format = CloudFormat::from_path(input)
        .with_context(|| format!("{}: unknown cloud extension (expected .ply or .xyz)", input.display()))?;
    let cloud = load_cloud(input, format)?;
    let centers: Vec<_> = cloud.positions().iter().step_by(every).copied().collect();
    let sc = compute_multiscale_sc(&centers, cloud.positions(), &cfg.msp.sc_partitions)?;
    let stem = input.file_stem().map_or("cloud".into(), |s| s.to_string_lossy().into_owned());
    let path = out.join(format!("{stem}.sc.txt"));
    write(&path, &format_dump(&centers, &sc))?;
    info!("{} descriptors of width {} written to {}", centers.len(), sc.width, path.display());
    Ok(true)
}

fn pretrain_cmd(cfg: RunConfig, out: &Path, resume: bool, stop_at: Option<u64>) -> Result<(bool, RunConfig)> {
    let last = out.join("last.msp");
    let mut state = if resume {
        let state = load_checkpoint(&last).with_context(|| format!("resuming from {}", last.display()))?;
        if state.config != cfg {
            warn!("resuming with the configuration stored in {}", last.display());
        }
        info!("resuming at step {}", state.step);
        state
    } else {
        TrainState::new(&cfg)?
    };
    let scenes = state.config.data.training_scenes(state.config.msp.seed)?;
    let started = Instant::now();
    let history = pretrain(&mut state, &scenes, &PretrainOptions { out_dir: Some(out.to_path_buf()), stop_at })?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        info!(
            "steps {}..{}: loss {:.5} -> {:.5} in {:.1?}",
            first.step,
            last.step,
            first.loss_total,
            last.loss_total,
            started.elapsed()
        );
    }
    save_encoder(&extract_encoder(&state), &state.config, &out.join("encoder.msp"))?;
    Ok((true, state.config))
}

fn probe_leakage(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let scenes = cfg.data.probe_scenes(cfg.msp.seed, cfg.probe.scenes)?;
    let seeds: Vec<u64> = (0..cfg.probe.leakage_seeds as u64).collect();
    let report = pooled_leakage(&cfg.msp, &scenes, &cfg.probe.keep_fractions, &seeds)?;
    write(&out.join("leakage.csv"), &report.to_csv())?;
    let cmp = compare_runs(&[("leakage".into(), Report::Leakage(report))], &checks_from(cfg));
    print!("{}", cmp.table);
    Ok(cmp.passed)
}

fn probe_linear(cfg: &RunConfig, out: &Path, ckpt: &str) -> Result<bool> {
    let path = if ckpt == "last" { out.join("last.msp") } else { PathBuf::from(ckpt) };
    let (pretrained, model_cfg) = load_encoder(&path).with_context(|| format!("loading {}", path.display()))?;
    // The scratch arm is the exact initialization the pre-training run
    // started from.
    let scratch = TrainState::new(&model_cfg)?.model.encoder_params();
    let scenes = model_cfg.data.probe_scenes(model_cfg.msp.seed, cfg.probe.scenes)?;
    let results = probe_arms(&model_cfg.msp, &pretrained, &scratch, &scenes, &cfg.probe)?;
    write(&out.join("probe.csv"), &probe_results_csv(&results))?;
    let cmp = compare_runs(&[("probe".into(), Report::Probe(results))], &checks_from(cfg));
    print!("{}", cmp.table);
    Ok(cmp.passed)
}

fn compare(cfg: &RunConfig, out: &Path, specs: &[String]) -> Result<bool> {
    let mut reports = Vec::new();
    for spec in specs {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                (p.file_stem().map_or(spec.clone(), |s| s.to_string_lossy().into_owned()), p)
            }
        };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        reports.push((label, Report::from_csv(&text).with_context(|| format!("in {}", path.display()))?));
    }
    let cmp = compare_runs(&reports, &checks_from(cfg));
    write(&out.join("compare.csv"), &cmp.csv)?;
    print!("{}", cmp.table);
    Ok(cmp.passed)
}

fn run_selfcheck(out: &Path) -> Result<bool> {
    let work = out.join("selfcheck");
    fs::create_dir_all(&work)?;
    let checks = selfcheck::run_all(&work);
    let mut text = String::new();
    for c in &checks {
        println!("{c}");
        text.push_str(&format!("{c}\n"));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    // The scratch training directory is not an artifact.
    fs::remove_dir_all(&work).with_context(|| format!("removing {}", work.display()))?;
    write(&out.join("selfcheck.txt"), &text)?;
    Ok(failed == 0)
}
