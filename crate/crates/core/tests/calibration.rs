//! Scratch calibration runs; not part of the suite.

use std::time::Instant;

use gazedx_core::corpus::{Group, ScreenGeometry};
use gazedx_core::harness::{build_store, run_protocol, ProtocolConfig, TaskName, TaskSpec};
use gazedx_core::sampler::AblationMode;
use gazedx_core::segment::Alignment;
use gazedx_core::stats::{baseline_fixation_ratio, baseline_response_only, roc_auc};
use gazedx_core::synth::{generate_cohort, CohortRecipe, EffectSpec};

fn main_recipe() -> CohortRecipe {
    CohortRecipe {
        n_per_group: [10, 10, 10],
        n_sentences: 40,
        seed: 20260825,
        spec: EffectSpec {
            subject_amplitude_sd: 0.06,
            amplitude_trial_sd: 0.45,
            aoi_pull: 0.15,
            ..EffectSpec::default()
        },
    }
}

fn main_protocol(n_inner_seeds: usize) -> ProtocolConfig {
    ProtocolConfig {
        set_size: 30,
        n_sets: 50,
        patience: 5,
        max_epochs: 24,
        n_inner_seeds,
        seed: 20260825,
        ..ProtocolConfig::default()
    }
}

fn group_means(table: &gazedx_core::harness::ScoreTable) -> [f64; 3] {
    let mut sums = [0.0; 3];
    let mut ns = [0usize; 3];
    for r in &table.rows {
        sums[r.group.index()] += r.score;
        ns[r.group.index()] += 1;
    }
    [
        sums[0] / ns[0].max(1) as f64,
        sums[1] / ns[1].max(1) as f64,
        sums[2] / ns[2].max(1) as f64,
    ]
}

#[test]
#[ignore]
fn calib_baselines() {
    let t0 = Instant::now();
    let cohort = generate_cohort(&main_recipe()).unwrap();
    println!("synth: {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let store = build_store(&cohort, Alignment::Response, 1.0).unwrap();
    println!(
        "build_store: {:.1}s, {} participants, {} dropped, thin {:?}",
        t0.elapsed().as_secs_f64(),
        store.participants.len(),
        store.dropped.len(),
        store.thin_participants
    );

    let task = TaskSpec::of(TaskName::CvDS);
    let t0 = Instant::now();
    let resp = baseline_response_only(&cohort, &task, 400, 7).unwrap();
    println!(
        "response_only: auc {:.4} ci [{:.3},{:.3}] ({:.1}s)",
        resp.auc,
        resp.auc_ci.0,
        resp.auc_ci.1,
        t0.elapsed().as_secs_f64()
    );

    let geom = ScreenGeometry::default();
    for pull_probe in [0.25f64] {
        let t0 = Instant::now();
        let fx = baseline_fixation_ratio(&cohort, &geom, 100.0, &task, 400, 7).unwrap();
        println!(
            "fixation (pull {pull_probe}): auc {:.4} ci [{:.3},{:.3}] ({:.1}s)",
            fx.auc,
            fx.auc_ci.0,
            fx.auc_ci.1,
            t0.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn calib_response_protocol() {
    let cohort = generate_cohort(&main_recipe()).unwrap();
    let store = build_store(&cohort, Alignment::Response, 1.0).unwrap();
    let task = TaskSpec::of(TaskName::CvDS);

    let t0 = Instant::now();
    let out = run_protocol(&store, &task, &main_protocol(1)).unwrap();
    let (scores, labels) = out.table.scores_and_labels();
    let auc = roc_auc(&scores, &labels).unwrap();
    let gm = group_means(&out.table);
    println!(
        "response set30 (1 seed): auc {:.4}, means C {:.4} D {:.4} S {:.4}, {:.1}s",
        auc,
        gm[Group::C.index()],
        gm[Group::D.index()],
        gm[Group::S.index()],
        t0.elapsed().as_secs_f64()
    );
    for r in &out.runs {
        println!(
            "  fold {} seed {}: best_epoch {}, epochs_run {}",
            r.fold, r.seed_idx, r.best_epoch, r.epochs_run
        );
    }

    let t0 = Instant::now();
    let mut p1 = main_protocol(1);
    p1.set_size = 1;
    let out1 = run_protocol(&store, &task, &p1).unwrap();
    let (s1, l1) = out1.table.scores_and_labels();
    let auc1 = roc_auc(&s1, &l1).unwrap();
    println!(
        "response set1 (1 seed): auc {:.4}, gap {:.4}, {:.1}s",
        auc1,
        auc - auc1,
        t0.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore]
fn calib_reading_protocol() {
    let cohort = generate_cohort(&main_recipe()).unwrap();
    let store = build_store(&cohort, Alignment::Reading, 1.0).unwrap();
    let task = TaskSpec::of(TaskName::CvDS);
    let t0 = Instant::now();
    let out = run_protocol(&store, &task, &main_protocol(1)).unwrap();
    let (scores, labels) = out.table.scores_and_labels();
    println!(
        "reading set30 (1 seed): auc {:.4}, {:.1}s",
        roc_auc(&scores, &labels).unwrap(),
        t0.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore]
fn calib_ablations() {
    let cohort = generate_cohort(&main_recipe()).unwrap();
    let store = build_store(&cohort, Alignment::Response, 1.0).unwrap();
    let task = TaskSpec::of(TaskName::CvDS);
    for mode in [
        AblationMode::NegativeOnly,
        AblationMode::PositiveOnly,
        AblationMode::XOnly,
        AblationMode::YOnly,
    ] {
        let t0 = Instant::now();
        let mut cfg = main_protocol(1);
        cfg.ablation = mode;
        let out = run_protocol(&store, &task, &cfg).unwrap();
        let (scores, labels) = out.table.scores_and_labels();
        println!(
            "ablation {mode:?}: auc {:.4}, {:.1}s",
            roc_auc(&scores, &labels).unwrap(),
            t0.elapsed().as_secs_f64()
        );
    }
}
