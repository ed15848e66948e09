//! Property tests for the pipeline's structural invariants, plus the
//! secret-handling scan over every serialized artifact shape.

use std::collections::BTreeSet;

use proptest::prelude::*;

use sast_recheck::assess::aggregate_scores;
use sast_recheck::calibrate::{confusion_at, threshold_sweep, LabeledScore, ThresholdGrid};
use sast_recheck::gateway::{seed_cache_entry, CompletionRequest, ModelEndpoint};
use sast_recheck::ingest::split_dataset;
use sast_recheck::model::{AggregationRule, GroundTruthLabel};

fn labeled_score_strategy() -> impl Strategy<Value = LabeledScore> {
    (0u32..10_000, prop::sample::select(vec!["sqli", "xss", "cmdi"]), 0u32..=100, any::<bool>())
        .prop_map(|(id, category, tenths, is_real)| LabeledScore {
            finding_id: format!("f{id:05}"),
            category: category.to_string(),
            score: tenths as f64 / 10.0,
            is_real,
        })
}

fn labeled_set_strategy() -> impl Strategy<Value = Vec<LabeledScore>> {
    prop::collection::vec(labeled_score_strategy(), 1..50).prop_map(|mut items| {
        // Duplicate ids would double-count outcomes; keep the first of each.
        let mut seen = BTreeSet::new();
        items.retain(|item| seen.insert(item.finding_id.clone()));
        items
    })
}

proptest! {
    /// Every labeled finding lands in exactly one confusion cell.
    #[test]
    fn outcome_counts_sum_to_set_size(data in labeled_set_strategy(), tenths in 0u32..=100) {
        let threshold = tenths as f64 / 10.0;
        let counts = confusion_at(&data, threshold, None).unwrap();
        prop_assert_eq!(counts.total(), data.len() as u64);
    }

    /// Per-category counts partition the overall counts.
    #[test]
    fn category_counts_partition_overall(data in labeled_set_strategy(), tenths in 0u32..=100) {
        let threshold = tenths as f64 / 10.0;
        let overall = confusion_at(&data, threshold, None).unwrap();
        let categories: BTreeSet<&str> = data.iter().map(|d| d.category.as_str()).collect();
        let mut summed = 0u64;
        for cat in categories {
            summed += confusion_at(&data, threshold, Some(cat)).unwrap().total();
        }
        prop_assert_eq!(summed, overall.total());
    }

    /// Every aggregation rule stays within the observed score range, and is
    /// invariant under permutation of the runs.
    #[test]
    fn aggregate_within_bounds_and_permutation_invariant(
        scores in prop::collection::vec(0u32..=100u32, 1..10),
        seed in any::<u64>(),
    ) {
        let scores: Vec<f64> = scores.iter().map(|&s| s as f64 / 10.0).collect();
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut shuffled = scores.clone();
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        for rule in [AggregationRule::Mean, AggregationRule::Median, AggregationRule::Min, AggregationRule::Max] {
            let aggregate = aggregate_scores(&scores, rule);
            prop_assert!(aggregate >= lo - 1e-9 && aggregate <= hi + 1e-9, "{rule:?} out of range");
            prop_assert_eq!(aggregate, aggregate_scores(&shuffled, rule), "{:?} depends on run order", rule);
        }
    }

    /// The sweep never reports a conservative threshold with assessment FNs.
    #[test]
    fn conservative_threshold_has_zero_fn(data in labeled_set_strategy()) {
        let result = threshold_sweep("prop", &data, &ThresholdGrid::default(), 2.0).unwrap();
        if let Some(threshold) = result.conservative_threshold {
            let row = result.rows_overall.iter().find(|r| r.threshold == threshold).unwrap();
            prop_assert_eq!(row.counts.fn_, 0);
        }
    }

    /// Train/test splitting is deterministic in the seed, disjoint, and
    /// covers the input exactly.
    #[test]
    fn split_is_deterministic_and_partitions(n in 2usize..200, seed in any::<u64>(), percent in 1u32..100) {
        let ratio = percent as f64 / 100.0;
        let labels: Vec<GroundTruthLabel> = (0..n)
            .map(|i| GroundTruthLabel { finding_id: format!("f{i}"), is_real: i % 3 == 0 })
            .collect();
        let first = split_dataset(&labels, ratio, seed);
        let second = split_dataset(&labels, ratio, seed);
        prop_assert_eq!(&first.train, &second.train);
        prop_assert_eq!(&first.test, &second.test);
        prop_assert_eq!(first.train.len(), (ratio * n as f64).floor() as usize);

        let train: BTreeSet<&String> = first.train.iter().collect();
        let test: BTreeSet<&String> = first.test.iter().collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), n);
    }
}

/// API keys are referenced by environment-variable name only; no serialized
/// artifact (endpoint config, request, or cache entry) may ever contain the
/// key value.
#[test]
fn secrets_never_reach_serialized_artifacts() {
    const SENTINEL: &str = "sk-EXTREMELY-SECRET-9f8e7d6c";
    const ENV_NAME: &str = "PROPTEST_RECHECK_API_KEY";
    std::env::set_var(ENV_NAME, SENTINEL);

    let endpoint = ModelEndpoint {
        model_id: "gpt-4o".into(),
        base_url: "https://api.example.com/v1".into(),
        auth_env: Some(ENV_NAME.into()),
        max_retries: 3,
        timeout_secs: 30,
        requests_per_minute: Some(60),
        supports_system_message: true,
    };
    let endpoint_json = serde_json::to_string(&endpoint).unwrap();
    assert!(endpoint_json.contains(ENV_NAME), "env var name should be serialized");
    assert!(!endpoint_json.contains(SENTINEL), "secret value leaked into endpoint config");

    let request = CompletionRequest {
        system_message: "You are a software security expert.".into(),
        user_message: "Analyze the following potential vulnerability.".into(),
        temperature: 0.0,
        max_output_tokens: 1024,
    };
    assert!(!serde_json::to_string(&request).unwrap().contains(SENTINEL));

    let cache_dir = tempfile::tempdir().unwrap();
    seed_cache_entry(cache_dir.path(), &endpoint.model_id, &request, 0, "Decision: 5.0").unwrap();
    for entry in std::fs::read_dir(cache_dir.path()).unwrap() {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(!text.contains(SENTINEL), "secret value leaked into a cache file");
    }

    std::env::remove_var(ENV_NAME);
}
