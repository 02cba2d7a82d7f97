use proptest::prelude::*;

use tp3::deliberation::combine_posteriors;
use tp3::metrics::{
    edit_distance, label_f1, micro_f1, parse_label_sequence, serialize_labels, slu_f1, wer_bucket, wer_bucket_report,
    Entity, EntitySet,
};
use tp3::oracle::{exact_posterior, random_pipeline, viterbi_posterior, PipelineKind};
use tp3::synth::{features_from_bytes, features_to_bytes};
use tp3::tensor::{log_softmax_slice, softmax_slice, Tensor};

const LABELS: [&str; 3] = ["time", "place", "person"];
const WORDS: [&str; 4] = ["red", "five", "oslo", "anna"];

fn entity() -> impl Strategy<Value = Entity> {
    (0..LABELS.len(), prop::collection::vec(0..WORDS.len(), 1..3)).prop_map(|(l, ws)| {
        let mention: Vec<&str> = ws.into_iter().map(|w| WORDS[w]).collect();
        Entity::new(LABELS[l], &mention.join(" "))
    })
}

fn entity_set() -> impl Strategy<Value = EntitySet> {
    prop::collection::vec(entity(), 0..4).prop_map(EntitySet::new)
}

fn corpus() -> impl Strategy<Value = (Vec<EntitySet>, Vec<EntitySet>)> {
    (1usize..6).prop_flat_map(|n| (prop::collection::vec(entity_set(), n), prop::collection::vec(entity_set(), n)))
}

/// Pair counting: each gold entity claims the first unclaimed identical
/// prediction in the same utterance.
fn pair_counting_f1(golds: &[EntitySet], preds: &[EntitySet]) -> f64 {
    let (mut tp, mut n_gold, mut n_pred) = (0usize, 0usize, 0usize);
    for (g, p) in golds.iter().zip(preds) {
        n_gold += g.entities.len();
        n_pred += p.entities.len();
        let mut claimed = vec![false; p.entities.len()];
        for ge in &g.entities {
            if let Some(j) = (0..p.entities.len()).find(|&j| !claimed[j] && p.entities[j] == *ge) {
                claimed[j] = true;
                tp += 1;
            }
        }
    }
    if n_gold + n_pred == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (n_gold + n_pred) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn micro_f1_matches_pair_counting((golds, preds) in corpus()) {
        let f = micro_f1(&golds, &preds).unwrap();
        let oracle = pair_counting_f1(&golds, &preds);
        // Both sides empty: either convention is fine as long as it is in range.
        let empty = golds.iter().chain(&preds).all(|s| s.is_empty());
        if !empty {
            prop_assert!((f - oracle).abs() < 1e-12, "{f} vs {oracle}");
        }
    }

    #[test]
    fn f1_scores_are_bounded_and_ordered((golds, preds) in corpus()) {
        let m = micro_f1(&golds, &preds).unwrap();
        let s = slu_f1(&golds, &preds).unwrap();
        let l = label_f1(&golds, &preds).unwrap();
        for v in [m, s, l] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        // Exact matches earn full credit under every metric.
        prop_assert!(m <= s + 1e-12);
        prop_assert!(m <= l + 1e-12);
    }

    #[test]
    fn identical_sets_score_one(golds in prop::collection::vec(entity_set(), 1..5)) {
        prop_assume!(golds.iter().any(|s| !s.is_empty()));
        prop_assert_eq!(micro_f1(&golds, &golds).unwrap(), 1.0);
        prop_assert!((slu_f1(&golds, &golds).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(label_f1(&golds, &golds).unwrap(), 1.0);
    }

    #[test]
    fn label_text_round_trips(set in entity_set()) {
        let parsed = parse_label_sequence(&serialize_labels(&set));
        prop_assert_eq!(parsed.malformed, 0);
        prop_assert_eq!(parsed.entities, set);
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in prop::collection::vec(0u8..3, 0..6),
        b in prop::collection::vec(0u8..3, 0..6),
        c in prop::collection::vec(0u8..3, 0..6),
    ) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y).dist;
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
        let e = edit_distance(&a, &b);
        prop_assert_eq!(e.sub + e.ins + e.del, e.dist);
    }

    #[test]
    fn wer_buckets_count_exactly(rates in prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.5f64, Just(0.25)], 0..30)) {
        let rows: Vec<_> = rates.iter().map(|&w| (w, EntitySet::default(), EntitySet::default())).collect();
        let report = wer_bucket_report(&rows).unwrap();
        let expect = [
            rates.iter().filter(|&&w| w == 0.0).count(),
            rates.iter().filter(|&&w| w > 0.0 && w <= 0.25).count(),
            rates.iter().filter(|&&w| w > 0.25).count(),
        ];
        prop_assert_eq!(report.iter().map(|r| r.n).collect::<Vec<_>>(), expect.to_vec());
        for &w in &rates {
            prop_assert!(wer_bucket(w) < 3);
        }
    }

    #[test]
    fn softmax_rows_normalise(x in prop::collection::vec(-30.0..30.0f64, 1..8)) {
        let p = softmax_slice(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax_slice(&x);
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln() - b).abs() < 1e-9 || *a == 0.0);
        }
    }

    #[test]
    fn combined_posterior_normalises_and_interpolates(
        pair in (1usize..6).prop_flat_map(|n| (prop::collection::vec(-5.0..5.0f64, n), prop::collection::vec(-5.0..5.0f64, n))),
        alpha in 0.0..=1.0f64,
    ) {
        let (del, lm) = pair;
        let p = combine_posteriors(&del, Some(&lm), alpha, true).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let only_del = combine_posteriors(&del, Some(&lm), 1.0, true).unwrap();
        let plain = combine_posteriors(&del, Some(&lm), alpha, false).unwrap();
        for (a, b) in only_del.iter().zip(&plain) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_files_round_trip(rows in 1usize..6, cols in 1usize..5, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32 / 7.0) as f64).collect();
        let t = Tensor::matrix(rows, cols, data).unwrap();
        let back = features_from_bytes(&features_to_bytes(&t)).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn viterbi_never_exceeds_exact(seed in any::<u64>()) {
        let p = random_pipeline(seed, PipelineKind::Random);
        for x in p.x_sequences() {
            let mut total = 0.0;
            for y in p.y_sequences() {
                let e = exact_posterior(&p, &x, &y).unwrap();
                let (v, _, _) = viterbi_posterior(&p, &x, &y).unwrap();
                prop_assert!(v <= e + 1e-15);
                total += e;
            }
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
