use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lgtse_core::data::{
    load_corpus, load_libri2mix_manifest, plan_triplets, save_corpus, synth_corpus_with, Condition, ConditionTriplet,
    MixRanges, SynthParams, TrainingMode, INDEX_FILE,
};
use lgtse_core::eval_report::{
    compare, consistency_gap, denoiser_probe, evaluate, render_comparison, render_report, EvalOptions, EvalReport,
    Extractor, ReportFormat,
};
use lgtse_core::metrics::PesqHook;
use lgtse_core::model::{load_checkpoint, ModelConfig, MANIFEST_FILE};
use lgtse_core::training::{run_training, LogRecord, Stage, StageConfig, TrainConfig, CHECKPOINT_DIR, LOG_FILE};
use lgtse_core::Error;
use log::{info, warn};

use crate::config::{
    config_hash, dump, file_section, file_wants_tiny, overlay, EvalConfig, SimulateConfig, TrainRunConfig, RUN_CONFIG,
};
use crate::lock::RunLock;
use crate::{Cli, Command, CompareArgs, EvalArgs, SimulateArgs, TrainArgs};

pub const GENERATION_REPORT: &str = "generation_report";
pub const REPORT_JSON: &str = "report.json";

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli.config.as_deref(), a),
        Command::Train(a) => train(cli.config.as_deref(), a),
        Command::Eval(a) => eval(cli.config.as_deref(), a),
        Command::Compare(a) => compare_cmd(a),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn default_dir(command: &str, hash: &str) -> PathBuf {
    PathBuf::from("runs").join(format!("{command}-{hash}"))
}

fn is_nonempty_dir(p: &Path) -> bool {
    std::fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Remove the named entries of `dir`, leaving anything else alone.
fn remove_entries(dir: &Path, names: &[&str]) -> Result<()> {
    for n in names {
        let p = dir.join(n);
        if p.is_dir() {
            std::fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
        } else if p.exists() {
            std::fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    Ok(())
}

fn parse_condition(s: &str) -> Result<Condition> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn simulate(config: Option<&Path>, a: &SimulateArgs) -> Result<()> {
    let file = file_section(config, "simulate")?;
    let base = if a.tiny || file_wants_tiny(&file) {
        SimulateConfig::tiny()
    } else {
        SimulateConfig::default()
    };
    let mut cfg = overlay(&base, &file)?;
    set(&mut cfg.out, a.out.clone().map(Some));
    set(&mut cfg.speakers, a.speakers);
    set(&mut cfg.utts, a.utts);
    set(&mut cfg.duration_s, a.duration);
    set(&mut cfg.noises, a.noises);
    set(&mut cfg.train_triplets, a.train_triplets);
    set(&mut cfg.test_triplets, a.test_triplets);
    set(&mut cfg.seed, a.seed);
    cfg.tiny |= a.tiny;

    let params = SynthParams {
        n_speakers: cfg.speakers,
        utts_per_speaker: cfg.utts,
        duration_s: cfg.duration_s,
        sample_rate: cfg.sample_rate,
        n_noise: cfg.noises,
        test_fraction: cfg.test_fraction,
        seed: cfg.seed,
    };
    params.validate()?;
    let out = cfg.out.clone().unwrap_or_else(|| default_dir("simulate", &config_hash(&cfg)));
    cfg.out = Some(out.clone());
    let existing = is_nonempty_dir(&out);
    if existing && !a.force {
        return Err(usage(format!("{} already exists; pass --force to replace it", out.display())));
    }
    let _lock = RunLock::acquire(&out)?;
    if existing {
        remove_entries(
            &out,
            &[
                "speech",
                "noise",
                INDEX_FILE,
                RUN_CONFIG,
                &format!("{GENERATION_REPORT}.md"),
                &format!("{GENERATION_REPORT}.json"),
            ],
        )?;
    }
    dump(&out, "simulate", &cfg)?;

    let corpus = synth_corpus_with(&params)?;
    let ranges = MixRanges {
        sir_db: cfg.sir_db,
        snr_db: cfg.snr_db,
        enrollment_s: cfg.enrollment_s,
    };
    let plan = plan_triplets(&corpus, cfg.train_triplets, cfg.test_triplets, &ranges, cfg.seed)?;
    save_corpus(&out, &corpus, &ranges, &plan)?;
    let stored = load_corpus(&out)?;
    info!(
        "wrote {} speech and {} noise clips, {} train / {} test triplets to {}",
        corpus.speech.len(),
        corpus.noise.len(),
        stored.train.len(),
        stored.test.len(),
        out.display()
    );

    let mut md = String::from("# Corpus generation report\n");
    let mut reports = serde_json::Map::new();
    for (split, pool) in [("train", &stored.train), ("test", &stored.test)] {
        if pool.is_empty() {
            continue;
        }
        let r = evaluate(Extractor::Identity, pool, &Condition::ALL, &EvalOptions::default())?;
        let s = |c| r.row(c).map_or(f64::NAN, |x| x.si_sdr);
        let ordered = s(Condition::Single) > s(Condition::Clean2) && s(Condition::Clean2) > s(Condition::Both);
        if !ordered {
            warn!("{split} split: unprocessed SI-SDR is not ordered 1spk+noise > 2spk > 2spk+noise");
        }
        for c in Condition::ALL {
            info!("{split} unprocessed {c}: SI-SDR {:.2} dB", s(c));
        }
        md.push_str(&format!("\n## {split} split ({} triplets)\n\n", pool.len()));
        md.push_str(&render_report(&r, ReportFormat::Markdown)?);
        md.push_str(&format!(
            "\nUnprocessed ordering 1spk+noise > 2spk > 2spk+noise: {}\n",
            if ordered { "yes" } else { "no" }
        ));
        reports.insert(split.into(), serde_json::to_value(&r)?);
    }
    write(&out.join(format!("{GENERATION_REPORT}.md")), &md)?;
    write(
        &out.join(format!("{GENERATION_REPORT}.json")),
        &format!("{}\n", serde_json::to_string_pretty(&reports)?),
    )?;
    println!("{}", out.display());
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_pool(corpus: Option<&Path>, manifest: Option<&Path>, split: &str) -> Result<Vec<ConditionTriplet>> {
    match (corpus, manifest) {
        (Some(_), Some(_)) => Err(usage("give either --corpus or --manifest, not both")),
        (Some(dir), None) => {
            let mut stored = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
            match split {
                "train" => Ok(std::mem::take(&mut stored.train)),
                "test" => Ok(std::mem::take(&mut stored.test)),
                other => Err(usage(format!("unknown split {other:?}; expected train or test"))),
            }
        }
        (None, Some(path)) => {
            let load = load_libri2mix_manifest(path)?;
            for r in &load.rejected {
                warn!("manifest lines {:?} rejected: {}", r.lines, r.reason);
            }
            info!("{} triplets from {}", load.triplets.len(), path.display());
            Ok(load.triplets)
        }
        (None, None) => Err(usage("no data: pass --corpus or --manifest")),
    }
}

fn train(config: Option<&Path>, a: &TrainArgs) -> Result<()> {
    let file = file_section(config, "train")?;
    let base = if a.tiny || file_wants_tiny(&file) {
        TrainRunConfig::tiny()
    } else {
        TrainRunConfig::default()
    };
    let mut cfg = overlay(&base, &file)?;
    set(&mut cfg.corpus, a.corpus.clone().map(Some));
    set(&mut cfg.manifest, a.manifest.clone().map(Some));
    set(&mut cfg.out, a.out.clone().map(Some));
    set(&mut cfg.mode, a.mode.clone());
    set(&mut cfg.condition, a.condition.clone().map(Some));
    if let Some(e) = a.epochs {
        cfg.denoiser_epochs = e;
        cfg.backbone_epochs = e;
        cfg.joint_epochs = e;
    }
    set(&mut cfg.denoiser_epochs, a.denoiser_epochs);
    set(&mut cfg.backbone_epochs, a.backbone_epochs);
    set(&mut cfg.joint_epochs, a.joint_epochs);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.w, a.w);
    set(&mut cfg.max_steps_per_stage, a.max_steps_per_stage.map(Some));
    set(&mut cfg.seed, a.seed);
    cfg.tiny |= a.tiny;

    let condition = cfg.condition.as_deref().map(parse_condition).transpose()?;
    let mode = TrainingMode::parse(&cfg.mode, condition)?;
    let tc = train_config(&cfg, mode);
    tc.validate()?;

    let out = cfg.out.clone().unwrap_or_else(|| default_dir("train", &config_hash(&cfg)));
    cfg.out = Some(out.clone());
    let has_ckpt = out.join(CHECKPOINT_DIR).join(MANIFEST_FILE).exists();
    if a.resume {
        if !has_ckpt {
            return Err(Error::Checkpoint(format!("nothing to resume: no checkpoint in {}", out.display())).into());
        }
        let prev = std::fs::read_to_string(out.join(RUN_CONFIG)).context("reading the previous run configuration")?;
        let prev: serde_json::Value = serde_json::from_str(&prev)?;
        if prev["config"] != serde_json::to_value(&cfg)? {
            return Err(usage(format!(
                "configuration differs from the run in {}; resume with the original settings",
                out.display()
            )));
        }
    }
    let existing = !a.resume && is_nonempty_dir(&out);
    if existing && !a.force {
        return Err(usage(format!(
            "{} already holds a run; pass --resume to continue or --force to start over",
            out.display()
        )));
    }

    let pool = load_pool(cfg.corpus.as_deref(), cfg.manifest.as_deref(), "train")?;
    let _lock = RunLock::acquire(&out)?;
    if existing {
        remove_entries(&out, &[CHECKPOINT_DIR, LOG_FILE, RUN_CONFIG])?;
    }
    dump(&out, "train", &cfg)?;
    info!(
        "training {} on {} triplets, mode {}, stages {:?}",
        if cfg.tiny { "tiny model" } else { "reference model" },
        pool.len(),
        mode.name(),
        tc.stages.iter().map(|s| (s.stage.name(), s.epochs)).collect::<Vec<_>>()
    );
    let outcome = run_training(&tc, &pool, &out, a.resume)?;
    let last = outcome.log.iter().rev().find_map(|r| match r {
        LogRecord::Epoch {
            stage, epoch, mean_loss, ..
        } => Some((stage.clone(), *epoch, *mean_loss)),
        _ => None,
    });
    if let Some((stage, epoch, loss)) = last {
        info!(
            "finished after {} steps; last epoch {stage}/{epoch} mean loss {}",
            outcome.global_step,
            loss.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn train_config(cfg: &TrainRunConfig, mode: TrainingMode) -> TrainConfig {
    let mut model = if cfg.tiny {
        ModelConfig::tiny()
    } else {
        ModelConfig::reference()
    };
    model.seed = cfg.seed;
    let stages = [
        (Stage::PretrainDenoiser, cfg.denoiser_epochs),
        (Stage::PretrainBackbone, cfg.backbone_epochs),
        (Stage::FinetuneJoint, cfg.joint_epochs),
    ]
    .into_iter()
    .filter(|(_, e)| *e > 0)
    .map(|(s, e)| {
        let mut sc = StageConfig::new(s, e, mode);
        sc.w = cfg.w;
        sc.schedule.lr0 = cfg.lr;
        sc.schedule.epochs_total = sc.schedule.epochs_total.max(e);
        sc
    })
    .collect();
    TrainConfig {
        model,
        stages,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        max_steps_per_stage: cfg.max_steps_per_stage,
    }
}

fn resolve_checkpoint(p: &Path) -> Result<PathBuf> {
    if p.join(MANIFEST_FILE).exists() {
        Ok(p.to_path_buf())
    } else if p.join(CHECKPOINT_DIR).join(MANIFEST_FILE).exists() {
        Ok(p.join(CHECKPOINT_DIR))
    } else {
        Err(Error::Checkpoint(format!("no checkpoint at {}", p.display())).into())
    }
}

fn eval(config: Option<&Path>, a: &EvalArgs) -> Result<()> {
    let file = file_section(config, "eval")?;
    let mut cfg: EvalConfig = overlay(&EvalConfig::default(), &file)?;
    set(&mut cfg.checkpoint, a.checkpoint.clone().map(Some));
    set(&mut cfg.stub, a.stub.clone().map(Some));
    if a.checkpoint.is_some() {
        cfg.stub = None;
    }
    if a.stub.is_some() {
        cfg.checkpoint = None;
    }
    set(&mut cfg.corpus, a.corpus.clone().map(Some));
    set(&mut cfg.manifest, a.manifest.clone().map(Some));
    set(&mut cfg.split, a.split.clone());
    set(&mut cfg.conditions, a.conditions.clone());
    set(&mut cfg.out, a.out.clone().map(Some));
    set(&mut cfg.formats, a.formats.clone());
    cfg.probe &= !a.no_probe;

    let conditions: Vec<Condition> = cfg.conditions.iter().map(|s| parse_condition(s)).collect::<Result<_>>()?;
    let formats: Vec<ReportFormat> = cfg.formats.iter().map(|s| s.parse()).collect::<lgtse_core::Result<_>>()?;
    let checkpoint = match (&cfg.checkpoint, &cfg.stub) {
        (Some(p), None) => Some(resolve_checkpoint(p)?),
        (None, Some(s)) => {
            Extractor::stub(s)?;
            None
        }
        (None, None) => return Err(usage("pass --checkpoint or --stub")),
        (Some(_), Some(_)) => return Err(usage("--checkpoint and --stub are exclusive")),
    };

    let hash = config_hash(&EvalConfig { out: None, ..cfg.clone() });
    let out = cfg.out.clone().unwrap_or_else(|| default_dir("eval", &hash));
    cfg.out = Some(out.clone());
    if out.join(REPORT_JSON).exists() && !a.force {
        return Err(usage(format!("{} already holds a report; pass --force to overwrite", out.display())));
    }
    let pool = load_pool(cfg.corpus.as_deref(), cfg.manifest.as_deref(), &cfg.split)?;
    let model = checkpoint.as_deref().map(load_checkpoint).transpose()?.map(|c| c.model);
    let extractor = match (&model, &cfg.stub) {
        (Some(m), _) => Extractor::Model(m),
        (None, Some(s)) => Extractor::stub(s)?,
        (None, None) => unreachable!("checked above"),
    };

    let _lock = RunLock::acquire(&out)?;
    dump(&out, "eval", &cfg)?;
    let opts = EvalOptions {
        pesq: PesqHook::from_env(),
        scratch_dir: Some(out.join(".pesq")),
    };
    let mut report = evaluate(extractor, &pool, &conditions, &opts)?;
    let _ = std::fs::remove_dir_all(out.join(".pesq"));
    report.consistency_gap = Some(consistency_gap(extractor, &pool)?);
    if let (Some(m), true) = (&model, cfg.probe) {
        let probe = denoiser_probe(m, &pool, Some(&out))?;
        report.probe = Some(probe.rows);
    }
    report.metadata.insert("config_hash".into(), hash);
    report.metadata.insert("split".into(), cfg.split.clone());
    match (&checkpoint, &cfg.stub) {
        (Some(p), _) => report.metadata.insert("checkpoint".into(), p.display().to_string()),
        (None, Some(s)) => report.metadata.insert("stub".into(), s.clone()),
        _ => None,
    };

    write(
        &out.join(REPORT_JSON),
        &format!("{}\n", serde_json::to_string_pretty(&report)?),
    )?;
    for f in &formats {
        write(&out.join(format!("report.{}", f.extension())), &render_report(&report, *f)?)?;
    }
    print!("{}", render_report(&report, ReportFormat::Text)?);
    Ok(())
}

fn load_report(p: &Path) -> Result<EvalReport> {
    let path = if p.is_dir() { p.join(REPORT_JSON) } else { p.to_path_buf() };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading report {}", path.display()))?;
    let r: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    r.validate()?;
    Ok(r)
}

fn compare_cmd(a: &CompareArgs) -> Result<()> {
    let (ra, rb) = (load_report(&a.run_a)?, load_report(&a.run_b)?);
    let c = compare(&ra, &rb)?;
    let text = render_comparison(&c);
    if let Some(out) = &a.out {
        write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}
