//! End-to-end check that the protocol learns a planted group effect:
//! synthesize, preprocess, segment, sample, train, and score, then verify
//! separation and determinism.

use gazedx_core::corpus::Group;
use gazedx_core::harness::{build_store, run_protocol, ProtocolConfig, TaskName, TaskSpec};
use gazedx_core::segment::Alignment;
use gazedx_core::synth::{CohortRecipe, EffectSpec};

fn pair_count_auc(neg: &[f64], pos: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (neg.len() * pos.len()) as f64
}

#[test]
fn test_protocol_learns_planted_effect() {
    let recipe = CohortRecipe {
        n_per_group: [6, 0, 6],
        n_sentences: 20,
        seed: 424242,
        spec: EffectSpec {
            amplitude_by_group: [0.0, 0.15, 0.3],
            subject_amplitude_sd: 0.05,
            amplitude_trial_sd: 0.2,
            ..EffectSpec::default()
        },
    };
    let cohort = gazedx_core::synth::generate_cohort(&recipe).unwrap();
    let store = build_store(&cohort, Alignment::Response, 1.0).unwrap();

    let config = ProtocolConfig {
        set_size: 10,
        n_sets: 30,
        n_inner_seeds: 1,
        max_epochs: 14,
        patience: 5,
        batch_size: 32,
        seed: 7,
        ..ProtocolConfig::default()
    };
    let task = TaskSpec::of(TaskName::CvS);
    let out = run_protocol(&store, &task, &config).unwrap();

    assert_eq!(out.table.rows.len(), 12);
    for row in &out.table.rows {
        assert!((0.0..=1.0).contains(&row.score), "score {}", row.score);
        assert_eq!(row.per_seed.len(), 1);
    }

    // Training made progress: best validation loss beat the first epoch's
    // in most runs.
    let improved = out
        .runs
        .iter()
        .filter(|r| {
            let first = r.val_trace[0];
            let best = r.val_trace.iter().cloned().fold(f64::INFINITY, f64::min);
            best < first
        })
        .count();
    assert!(improved >= 4, "only {improved} of 5 runs improved");

    let c_scores = out.table.group_scores(Group::C);
    let s_scores = out.table.group_scores(Group::S);
    let auc = pair_count_auc(&c_scores, &s_scores);
    assert!(auc >= 0.85, "C vs S separation too weak: AUC {auc}");

    // Identical bytes on rerun.
    let again = run_protocol(&store, &task, &config).unwrap();
    assert_eq!(out.table, again.table);
}
