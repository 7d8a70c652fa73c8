//! Attribution over a trained protocol: integrated gradients must localize
//! a planted horizontal drift to its time window and channel.

use gazedx_core::attribute::{aggregate_attributions, attribute_protocol, Direction};
use gazedx_core::corpus::{Group, Sentiment};
use gazedx_core::harness::{build_store, run_protocol, ProtocolConfig, TaskName, TaskSpec};
use gazedx_core::segment::Alignment;
use gazedx_core::synth::{generate_cohort, CohortRecipe, EffectSpec};

#[test]
fn test_attribution_localizes_planted_window() {
    // Same planted cohort scale as the training sanity test: drift on the
    // x channel of negative sentences, S amplitude 0.3 in a window that
    // the default S shift puts at [rt-500, rt-300).
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
    let cohort = generate_cohort(&recipe).unwrap();
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

    let samples = attribute_protocol(&store, &out, &config, 20, 5).unwrap();
    assert_eq!(samples.len(), 12 * 5);
    for s in &samples {
        for ser in &s.series {
            assert_eq!(ser.len(), Alignment::Response.t_len());
            assert!(ser.iter().all(|v| v.is_finite()));
        }
    }

    let maps = aggregate_attributions(&samples, &out.table).unwrap();
    assert_eq!(maps.len(), 8, "two groups, four channels");

    // The planted window [rt-500, rt-300) covers segment indices 175..225
    // of the [rt-1200, rt) response window at 250 Hz.
    let window_mean = |vals: &[f64], lo: usize, hi: usize| -> f64 {
        vals[lo..hi].iter().map(|v| v.abs()).sum::<f64>() / (hi - lo) as f64
    };
    let find = |g: Group, c: Sentiment, d: Direction| -> &[f64] {
        &maps
            .iter()
            .find(|m| m.group == g && m.condition == c && m.direction == d)
            .unwrap()
            .values
    };

    let s_neg_x = find(Group::S, Sentiment::Negative, Direction::X);
    let in_window = window_mean(s_neg_x, 175, 225);
    let early = window_mean(s_neg_x, 25, 150);
    assert!(
        in_window > 2.0 * early,
        "planted window not elevated: in {in_window}, early {early}"
    );
    let s_neg_y = window_mean(find(Group::S, Sentiment::Negative, Direction::Y), 175, 225);
    assert!(
        in_window > 2.0 * s_neg_y,
        "x channel not dominant: x {in_window}, y {s_neg_y}"
    );

    // Determinism of the whole attribution pass.
    let again = attribute_protocol(&store, &out, &config, 20, 5).unwrap();
    assert_eq!(samples, again);
}
