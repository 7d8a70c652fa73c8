//! Pipeline driver: composable commands over one TOML config. Every
//! stage leaves a `stage.json` provenance file carrying the hash of the
//! settings that produced it; downstream commands refuse inputs whose
//! hash no longer matches the current config unless forced.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gazedx_core::attribute::{
    aggregate_attributions, attribute_protocol, fc_weight_readout, fixation_density, maps_to_csv,
    readout_to_csv, DENSITY_BINS_X, DENSITY_BINS_Y,
};
use gazedx_core::config::{RunConfig, Stage};
use gazedx_core::corpus::{exclude_trials, load_cohort, Cohort, ScreenGeometry, Sentiment};
use gazedx_core::harness::{
    build_store, run_protocol, run_protocol_permuted, FoldPlan, ProtocolOutput, ScoreTable,
    TaskName, TaskSpec, TrainedRun,
};
use gazedx_core::nnet::{
    load_checkpoint, save_checkpoint, CheckpointMeta, Model, ModelConfig,
};
use gazedx_core::preprocess::preprocess_participant;
use gazedx_core::sampler::make_sets;
use gazedx_core::segment::{load_store, save_store, SegmentStore};
use gazedx_core::stats::{
    baseline_fixation_ratio, baseline_response_only, bootstrap_ci, cross_task_matrix,
    evaluate_table, roc_auc, roc_points,
};
use gazedx_core::synth::generate_to_dir;

#[derive(Parser)]
#[command(
    name = "gazedx",
    version,
    about = "Gaze-based screening pipeline: synthesize, preprocess, segment, train, evaluate, attribute"
)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, default_value = "gazedx.toml")]
    config: PathBuf,
    /// Artifact directory; relative corpus paths resolve against it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Proceed even when an input artifact was built from a different
    /// configuration.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for the parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Emit log lines as JSON objects.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort configured under [synth].
    Synth,
    /// Clean every recording and write per-participant quality metrics.
    Preprocess,
    /// Cut aligned trial windows and persist the segment store.
    Segment,
    /// Draw the bootstrap trial sets and persist their manifest.
    Sets,
    /// Run the nested cross-validation protocol; write scores and
    /// checkpoints, plus permuted-label runs for the permutation test.
    Train,
    /// Evaluate the score table: report with CIs, ROC points, baselines,
    /// cross-task matrix over whatever tasks have been trained.
    Eval,
    /// Integrated-gradients maps, dense-layer readout, fixation density.
    Attribute,
    /// Sweep set_size, n_sets, and trial_fraction; write AUC curves.
    Sweep,
}

fn main() {
    let cli = Cli::parse();
    init_logging(cli.json);
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("worker pool already initialized: {e}");
        }
    }
    if let Err(e) = run(&cli) {
        log::error!("{e:#}");
        std::process::exit(1);
    }
}

fn init_logging(json: bool) {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if json {
        builder.format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().to_string().to_lowercase(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    builder.init();
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(&cli.config)
        .with_context(|| format!("loading config {}", cli.config.display()))?;
    let started = Instant::now();
    match cli.command {
        Command::Synth => cmd_synth(cli, &cfg)?,
        Command::Preprocess => cmd_preprocess(cli, &cfg)?,
        Command::Segment => cmd_segment(cli, &cfg)?,
        Command::Sets => cmd_sets(cli, &cfg)?,
        Command::Train => cmd_train(cli, &cfg)?,
        Command::Eval => cmd_eval(cli, &cfg)?,
        Command::Attribute => cmd_attribute(cli, &cfg)?,
        Command::Sweep => cmd_sweep(cli, &cfg)?,
    }
    log::info!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

/// Relative corpus paths resolve against the artifact directory so the
/// default config works out of the box with `gazedx synth`.
fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn write_stage(dir: &Path, stage: &str, hash: &str, extra: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let body = serde_json::json!({
        "stage": stage,
        "config_hash": hash,
        "details": extra,
    });
    let path = dir.join("stage.json");
    std::fs::write(&path, serde_json::to_string_pretty(&body)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Verify that the artifact under `dir` was produced by the settings the
/// current config would use for that stage.
fn check_stage(dir: &Path, producer: &str, want_hash: &str, force: bool) -> Result<()> {
    let path = dir.join("stage.json");
    let text = std::fs::read_to_string(&path).map_err(|_| {
        anyhow!(
            "missing artifact {}; run `gazedx {producer}` first",
            path.display()
        )
    })?;
    let body: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    let found = body["config_hash"].as_str().unwrap_or("");
    if found != want_hash {
        if force {
            log::warn!(
                "{} was built from config hash {found}, current is {want_hash}; continuing because of --force",
                dir.display()
            );
        } else {
            bail!(
                "{} was built from config hash {found} but the current config gives {want_hash}; \
                 rerun `gazedx {producer}` or pass --force",
                dir.display()
            );
        }
    }
    Ok(())
}

fn load_cohort_configured(cli: &Cli, cfg: &RunConfig) -> Result<Cohort> {
    let roster = resolve(&cli.out, &cfg.corpus.roster);
    let gaze = resolve(&cli.out, &cfg.corpus.gaze_dir);
    let trials = resolve(&cli.out, &cfg.corpus.trials_dir);
    if !roster.exists() {
        if cfg.synth.is_some() {
            bail!(
                "missing corpus roster {}; run `gazedx synth` first",
                roster.display()
            );
        }
        bail!(
            "missing corpus roster {}; point [corpus] at existing data or add a [synth] recipe",
            roster.display()
        );
    }
    let mut cohort = load_cohort(&roster, &gaze, &trials)?;
    if !cfg.corpus.excluded_sentences.is_empty() {
        let excluded: BTreeSet<String> = cfg.corpus.excluded_sentences.iter().cloned().collect();
        let report = exclude_trials(&mut cohort, &excluded)?;
        let retained: usize = report
            .retained_per_participant
            .iter()
            .map(|(_, n)| n)
            .sum();
        log::info!(
            "excluded {} sentences; {retained} trials retained",
            report.excluded_sentences.len()
        );
    }
    Ok(cohort)
}

fn cmd_synth(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let recipe = cfg
        .synth
        .as_ref()
        .ok_or_else(|| anyhow!("config has no [synth] section to generate from"))?;
    let roster = resolve(&cli.out, &cfg.corpus.roster);
    let dir = roster
        .parent()
        .ok_or_else(|| anyhow!("corpus roster path {} has no parent", roster.display()))?
        .to_path_buf();
    generate_to_dir(&dir, recipe)?;
    let n: usize = recipe.n_per_group.iter().sum();
    log::info!("generated {n} participants into {}", dir.display());
    write_stage(
        &dir,
        "synth",
        &cfg.stage_hash(Stage::Synth),
        serde_json::json!({ "participants": n, "sentences": recipe.n_sentences }),
    )
}

fn cmd_preprocess(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let cohort = load_cohort_configured(cli, cfg)?;
    let geom = ScreenGeometry::default();
    let mut rows = Vec::new();
    for p in &cohort.participants {
        let clean = preprocess_participant(&p.recording, &geom)?;
        let interpolated = clean.interpolated_mask.iter().filter(|&&m| m).count();
        rows.push(serde_json::json!({
            "participant_id": p.participant.id,
            "samples": clean.len(),
            "interpolated_fraction": interpolated as f64 / clean.len().max(1) as f64,
            "heavily_interpolated": clean.heavily_interpolated,
            "trials": p.trials.len(),
        }));
    }
    let dir = cli.out.join("preprocess");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    log::info!("preprocessed {} recordings", rows.len());
    write_stage(
        &dir,
        "preprocess",
        &cfg.stage_hash(Stage::Preprocess),
        serde_json::json!({ "participants": rows.len() }),
    )
}

fn cmd_segment(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let cohort = load_cohort_configured(cli, cfg)?;
    let store = build_store(&cohort, cfg.segment.alignment, cfg.segment.trial_fraction)?;
    let dir = cli.out.join("segment");
    save_store(&dir, &store)?;
    log::info!(
        "segmented {} participants ({} dropped)",
        store.participants.len(),
        store.dropped.len()
    );
    write_stage(
        &dir,
        "segment",
        &cfg.stage_hash(Stage::Segment),
        serde_json::json!({
            "participants": store.participants.len(),
            "dropped": store.dropped,
            "thin_participants": store.thin_participants,
        }),
    )
}

fn load_store_checked(cli: &Cli, cfg: &RunConfig) -> Result<SegmentStore> {
    let dir = cli.out.join("segment");
    check_stage(&dir, "segment", &cfg.stage_hash(Stage::Segment), cli.force)?;
    Ok(load_store(&dir)?)
}

fn cmd_sets(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let store = load_store_checked(cli, cfg)?;
    let collection = make_sets(&store, cfg.model.set_size, cfg.n_sets, cfg.seed)?;
    let dir = cli.out.join("sets");
    std::fs::create_dir_all(&dir)?;
    gazedx_core::sampler::save_set_manifest(&dir.join("sets.json"), &collection)?;
    log::info!(
        "drew {} sets of {} trials for {} participants",
        cfg.n_sets,
        cfg.model.set_size,
        collection.participants.len()
    );
    write_stage(
        &dir,
        "sets",
        &cfg.stage_hash(Stage::Sets),
        serde_json::json!({
            "participants": collection.participants.len(),
            "skipped": collection.skipped,
        }),
    )
}

fn train_dir(out: &Path, task: TaskName) -> PathBuf {
    out.join("train").join(task.as_str())
}

fn cmd_train(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let store = load_store_checked(cli, cfg)?;
    let task = TaskSpec::of(cfg.task);
    let pcfg = cfg.protocol_config();
    let t0 = Instant::now();
    let output = run_protocol(&store, &task, &pcfg)?;
    let train_secs = t0.elapsed().as_secs_f64();
    log::info!(
        "trained {} runs in {train_secs:.1}s; {} participants scored",
        output.runs.len(),
        output.table.rows.len()
    );

    let dir = train_dir(&cli.out, cfg.task);
    let runs_dir = dir.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    output.table.write_csv(&dir.join("score_table.csv"))?;
    std::fs::write(
        dir.join("fold_plan.json"),
        serde_json::to_string_pretty(&output.plan)?,
    )?;

    let t_len = store.alignment.t_len();
    let hash = cfg.stage_hash(Stage::Train);
    let mut log_rows = Vec::new();
    for run in &output.runs {
        let mcfg = ModelConfig {
            t_len,
            set_size: pcfg.set_size,
            filters: pcfg.filters,
            hidden: pcfg.hidden,
            share_direction_weights: pcfg.share_direction_weights,
            seed: 0,
        };
        let mut model = Model::<f32>::new(mcfg.clone());
        model.set_param_vec(&run.params);
        let meta = CheckpointMeta {
            model: mcfg,
            task: cfg.task.as_str().to_string(),
            alignment: store.alignment.as_str().to_string(),
            fold: run.fold,
            seed_index: run.seed_idx,
            best_epoch: run.best_epoch,
            config_hash: hash.clone(),
        };
        save_checkpoint(
            &model,
            &meta,
            &runs_dir.join(format!("fold{}_seed{}.ckpt", run.fold, run.seed_idx)),
        )?;
        log_rows.push(serde_json::json!({
            "fold": run.fold,
            "seed_index": run.seed_idx,
            "best_epoch": run.best_epoch,
            "epochs_run": run.epochs_run,
            "val_trace": run.val_trace,
        }));
    }
    std::fs::write(
        dir.join("train_log.json"),
        serde_json::to_string_pretty(&log_rows)?,
    )?;

    for p in 0..cfg.stats.n_permutations {
        let t0 = Instant::now();
        let permuted = run_protocol_permuted(&store, &task, &pcfg, p as u64)?;
        permuted
            .table
            .write_csv(&dir.join(format!("permuted_{p}.csv")))?;
        log::info!(
            "permuted-label run {p} finished in {:.1}s",
            t0.elapsed().as_secs_f64()
        );
    }

    write_stage(
        &dir,
        "train",
        &hash,
        serde_json::json!({
            "runs": output.runs.len(),
            "skipped": output.skipped,
            "train_seconds": train_secs,
        }),
    )
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let dir = train_dir(&cli.out, cfg.task);
    check_stage(&dir, "train", &cfg.stage_hash(Stage::Train), cli.force)?;
    let table_path = dir.join("score_table.csv");
    if !table_path.exists() {
        bail!(
            "missing score table {}; run `gazedx train` first",
            table_path.display()
        );
    }
    let table = ScoreTable::read_csv(&table_path)?;

    let mut null_tables = Vec::new();
    for p in 0..cfg.stats.n_permutations {
        let path = dir.join(format!("permuted_{p}.csv"));
        if !path.exists() {
            bail!(
                "missing permuted-label table {}; rerun `gazedx train`",
                path.display()
            );
        }
        null_tables.push(ScoreTable::read_csv(&path)?);
    }
    let nulls = if null_tables.is_empty() {
        None
    } else {
        Some(null_tables.as_slice())
    };
    let report = evaluate_table(&table, cfg.stats.bootstrap_iters, cfg.seed, nulls)?;
    log::info!(
        "task {} AUC {:.3} [{:.3}, {:.3}]{}",
        report.task,
        report.auc,
        report.auc_ci.0,
        report.auc_ci.1,
        report
            .p_perm
            .map_or(String::new(), |p| format!(", p_perm {p}"))
    );

    let eval_dir = cli.out.join("eval").join(cfg.task.as_str());
    std::fs::create_dir_all(&eval_dir)?;
    std::fs::write(eval_dir.join("eval_report.json"), report.to_json()?)?;

    let (scores, labels) = table.scores_and_labels();
    let mut roc_csv = String::from("fpr,tpr,threshold\n");
    for (fpr, tpr, th) in roc_points(&scores, &labels)? {
        roc_csv.push_str(&format!("{fpr},{tpr},{th}\n"));
    }
    std::fs::write(eval_dir.join("roc.csv"), roc_csv)?;

    // Per-seed AUCs show the spread the subject scores average over.
    let mut per_seed_auc = Vec::new();
    let n_seeds = table.rows.first().map_or(0, |r| r.per_seed.len());
    for s in 0..n_seeds {
        let seed_scores: Vec<f64> = table
            .rows
            .iter()
            .filter(|r| r.label.is_some())
            .map(|r| r.per_seed[s])
            .collect();
        per_seed_auc.push(roc_auc(&seed_scores, &labels)?);
    }
    std::fs::write(
        eval_dir.join("eval_details.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "per_seed_auc": per_seed_auc }))?,
    )?;

    // Behavioral baselines for the comparison table; they only need the
    // cohort.
    match load_cohort_configured(cli, cfg) {
        Ok(cohort) => {
            let task = TaskSpec::of(cfg.task);
            let geom = ScreenGeometry::default();
            let response =
                baseline_response_only(&cohort, &task, cfg.stats.bootstrap_iters, cfg.seed)?;
            let fixation = baseline_fixation_ratio(
                &cohort,
                &geom,
                100.0,
                &task,
                cfg.stats.bootstrap_iters,
                cfg.seed,
            )?;
            log::info!(
                "baselines: response-only AUC {:.3}, fixation-ratio AUC {:.3}",
                response.auc,
                fixation.auc
            );
            std::fs::write(
                eval_dir.join("baselines.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "response_only": response,
                    "fixation_ratio": fixation,
                }))?,
            )?;
        }
        Err(e) => log::warn!("skipping baselines, corpus unavailable: {e:#}"),
    }

    // Cross-task matrix over whatever tasks have trained tables.
    let mut tables = Vec::new();
    for t in TaskName::ALL {
        let p = train_dir(&cli.out, t).join("score_table.csv");
        if p.exists() {
            tables.push(ScoreTable::read_csv(&p)?);
        }
    }
    let refs: Vec<&ScoreTable> = tables.iter().collect();
    let matrix = cross_task_matrix(&refs, cfg.stats.bootstrap_iters, cfg.seed)?;
    std::fs::write(cli.out.join("eval").join("cross_task.csv"), matrix.to_csv())?;

    write_stage(
        &eval_dir,
        "eval",
        &cfg.stage_hash(Stage::Eval),
        serde_json::json!({ "auc": report.auc, "n_subjects": report.n_subjects }),
    )
}

fn cmd_attribute(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let store = load_store_checked(cli, cfg)?;
    let dir = train_dir(&cli.out, cfg.task);
    check_stage(&dir, "train", &cfg.stage_hash(Stage::Train), cli.force)?;

    let table = ScoreTable::read_csv(&dir.join("score_table.csv"))?;
    let plan: FoldPlan =
        serde_json::from_str(&std::fs::read_to_string(dir.join("fold_plan.json"))?)
            .context("parsing fold_plan.json")?;
    let runs_dir = dir.join("runs");
    let mut runs = Vec::new();
    let mut models_f32 = Vec::new();
    for entry in std::fs::read_dir(&runs_dir)
        .map_err(|_| anyhow!("missing checkpoints {}; run `gazedx train` first", runs_dir.display()))?
    {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ckpt") {
            let (model, meta) = load_checkpoint(&path)?;
            runs.push(TrainedRun {
                fold: meta.fold,
                seed_idx: meta.seed_index,
                params: model.param_vec(),
                best_epoch: meta.best_epoch,
                epochs_run: 0,
                val_trace: Vec::new(),
            });
            models_f32.push(model);
        }
    }
    if runs.is_empty() {
        bail!(
            "no checkpoints under {}; run `gazedx train` first",
            runs_dir.display()
        );
    }
    runs.sort_by_key(|r| (r.fold, r.seed_idx));

    let output = ProtocolOutput {
        table,
        plan,
        runs,
        skipped: Vec::new(),
    };
    let pcfg = cfg.protocol_config();
    let samples = attribute_protocol(&store, &output, &pcfg, cfg.ig_steps, cfg.attr_sets)?;
    let maps = aggregate_attributions(&samples, &output.table)?;
    let attr_dir = cli.out.join("attribute").join(cfg.task.as_str());
    std::fs::create_dir_all(&attr_dir)?;
    std::fs::write(attr_dir.join("attributions.csv"), maps_to_csv(&maps))?;
    log::info!(
        "attributed {} samples into {} group series",
        samples.len(),
        maps.len()
    );

    // Mean |fc1 weight| readout across all trained runs.
    let mut readout = [vec![], vec![], vec![], vec![]];
    for model in &models_f32 {
        let r = fc_weight_readout(model);
        for c in 0..4 {
            if readout[c].is_empty() {
                readout[c] = vec![0.0; r[c].len()];
            }
            for (acc, v) in readout[c].iter_mut().zip(&r[c]) {
                *acc += v / models_f32.len() as f64;
            }
        }
    }
    std::fs::write(attr_dir.join("readout.csv"), readout_to_csv(&readout))?;

    match load_cohort_configured(cli, cfg) {
        Ok(cohort) => {
            let geom = ScreenGeometry::default();
            let maps = fixation_density(
                &cohort,
                &geom,
                100.0,
                Sentiment::Negative,
                DENSITY_BINS_X,
                DENSITY_BINS_Y,
            )?;
            for m in &maps {
                std::fs::write(
                    attr_dir.join(format!("density_{}.csv", m.group)),
                    m.to_csv(),
                )?;
                std::fs::write(
                    attr_dir.join(format!("density_zoom_{}.csv", m.group)),
                    m.central_crop(0.8)?.to_csv(),
                )?;
            }
        }
        Err(e) => log::warn!("skipping density maps, corpus unavailable: {e:#}"),
    }

    write_stage(
        &attr_dir,
        "attribute",
        &cfg.stage_hash(Stage::Attribute),
        serde_json::json!({ "samples": samples.len() }),
    )
}

fn cmd_sweep(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let cohort = load_cohort_configured(cli, cfg)?;
    let task = TaskSpec::of(cfg.task);
    let mut rows = String::from("axis,value,auc,ci_lo,ci_hi\n");

    let run_one = |store: &SegmentStore, set_size: usize, n_sets: usize| -> Result<(f64, (f64, f64))> {
        let mut pcfg = cfg.protocol_config();
        pcfg.set_size = set_size;
        pcfg.n_sets = n_sets;
        let output = run_protocol(store, &task, &pcfg)?;
        let (scores, labels) = output.table.scores_and_labels();
        let auc = roc_auc(&scores, &labels)?;
        let ci = bootstrap_ci(&scores, &labels, roc_auc, cfg.stats.bootstrap_iters, cfg.seed)?;
        Ok((auc, ci))
    };

    // The set_size and n_sets axes reuse one segment store; only the
    // trial_fraction axis re-segments.
    let base_store = build_store(&cohort, cfg.segment.alignment, cfg.segment.trial_fraction)?;
    for &s in &cfg.sweep.set_sizes {
        let (auc, ci) = run_one(&base_store, s, cfg.n_sets)?;
        log::info!("sweep set_size={s}: AUC {auc:.3}");
        rows.push_str(&format!("set_size,{s},{auc},{},{}\n", ci.0, ci.1));
    }
    for &n in &cfg.sweep.n_sets {
        let (auc, ci) = run_one(&base_store, cfg.model.set_size, n)?;
        log::info!("sweep n_sets={n}: AUC {auc:.3}");
        rows.push_str(&format!("n_sets,{n},{auc},{},{}\n", ci.0, ci.1));
    }
    for &f in &cfg.sweep.trial_fractions {
        let store = build_store(&cohort, cfg.segment.alignment, f)?;
        let (auc, ci) = run_one(&store, cfg.model.set_size, cfg.n_sets)?;
        log::info!("sweep trial_fraction={f}: AUC {auc:.3}");
        rows.push_str(&format!("trial_fraction,{f},{auc},{},{}\n", ci.0, ci.1));
    }

    let dir = cli.out.join("sweep");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("sweep.csv"), rows)?;
    write_stage(
        &dir,
        "sweep",
        &cfg.hash(),
        serde_json::json!({
            "set_sizes": cfg.sweep.set_sizes,
            "n_sets": cfg.sweep.n_sets,
            "trial_fractions": cfg.sweep.trial_fractions,
        }),
    )
}
