mod common;

use std::collections::{BTreeSet, HashMap};

use common::*;
use crowdpipe::operators::{
    filtered_join, pair_fingerprint, simple_join, token_jaccard, transitive_join, PairOrder,
    PairSource, Verdict,
};
use crowdpipe::platform::{worker_pool, WorkerProfile};
use crowdpipe::{CrowdContext, Error, Presenter};
use proptest::prelude::*;
use serde_json::{json, Value};

/// Crowd with planted cluster truth for the records.
fn planted_with(records: &[(&str, u32)], pool: Vec<WorkerProfile>) -> (Env, Vec<Value>) {
    let objs: Vec<Value> = records.iter().map(|(name, _)| json!(name)).collect();
    let mut truth = HashMap::new();
    for (i, (a, ca)) in records.iter().enumerate() {
        for (j, (b, cb)) in records.iter().enumerate() {
            if i != j {
                let label = if ca == cb { "match" } else { "nonmatch" };
                truth.insert(pair_fingerprint(&json!(a), &json!(b)), json!(label));
            }
        }
    }
    (Env::new(pool, truth), objs)
}

fn planted(records: &[(&str, u32)]) -> (Env, Vec<Value>) {
    planted_with(records, worker_pool(3, 1.0, 5))
}

fn oracle(records: &[(&str, u32)]) -> BTreeSet<(u64, u64)> {
    let mut out = BTreeSet::new();
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            if records[i].1 == records[j].1 {
                out.insert((i as u64 + 1, j as u64 + 1));
            }
        }
    }
    out
}

fn ctx(env: &Env) -> CrowdContext {
    env.ctx(3)
}

#[test]
fn cross_product_of_two_by_two_publishes_four_pairs() {
    let (env, _) = planted(&[("a", 1), ("b", 2), ("a2", 1), ("c", 3)]);
    let ctx = ctx(&env);
    let left = ctx.crowddata(vec![json!("a"), json!("b")], "left").unwrap();
    let right = ctx
        .crowddata(vec![json!("a2"), json!("c")], "right")
        .unwrap();
    let out = simple_join(&ctx, &left, Some(&right), &Presenter::entity_match()).unwrap();
    assert_eq!(out.published, 4);
    assert_eq!(env.platform.task_census(), 4);
    assert_eq!(out.matched_ids(), BTreeSet::from([(1, 1)]));
}

#[test]
fn self_join_of_three_publishes_three_pairs_and_finds_truth() {
    let recs = [("x", 1), ("y", 1), ("z", 2)];
    let (env, objs) = planted(&recs);
    let ctx = ctx(&env);
    let cd = ctx.crowddata(objs, "items").unwrap();
    let out = simple_join(&ctx, &cd, None, &Presenter::entity_match()).unwrap();
    assert_eq!(out.published, 3);
    assert_eq!(out.matched_ids(), oracle(&recs));
}

#[test]
fn join_presenter_must_be_match_nonmatch() {
    let (env, objs) = planted(&[("x", 1), ("y", 1)]);
    let ctx = ctx(&env);
    let cd = ctx.crowddata(objs, "items").unwrap();
    assert!(matches!(
        simple_join(&ctx, &cd, None, &Presenter::image_label()),
        Err(Error::InvalidPresenter(_))
    ));
}

#[test]
fn filtered_join_thresholds() {
    let recs = [
        ("iPad 2nd Gen", 1),
        ("iPad Two", 1),
        ("Kindle Fire", 2),
        ("kindle fire hd", 2),
    ];
    let (env, objs) = planted(&recs);
    let ctx = ctx(&env);
    let cd = ctx.crowddata(objs, "items").unwrap();

    let all = filtered_join(&ctx, &cd, token_jaccard, 0.0, &Presenter::entity_match()).unwrap();
    assert_eq!(all.published, 6);
    assert!(all.pairs.iter().all(|p| p.source == PairSource::Crowd));

    let none = filtered_join(&ctx, &cd, token_jaccard, 1.0, &Presenter::entity_match()).unwrap();
    assert_eq!(none.published, 0);
    assert!(none
        .pairs
        .iter()
        .all(|p| p.source == PairSource::Pruned && p.verdict == Some(Verdict::Nonmatch)));

    let half = filtered_join(&ctx, &cd, token_jaccard, 0.5, &Presenter::entity_match()).unwrap();
    // "iPad 2nd Gen" vs "iPad Two" is 1/4 and gets pruned.
    let ipad = half
        .pairs
        .iter()
        .find(|p| (p.left_id, p.right_id) == (1, 2))
        .unwrap();
    assert_eq!(ipad.source, PairSource::Pruned);
    let kindle = half
        .pairs
        .iter()
        .find(|p| (p.left_id, p.right_id) == (3, 4))
        .unwrap();
    assert_eq!(
        (kindle.source, kindle.verdict),
        (PairSource::Crowd, Some(Verdict::Match))
    );
    // All crowd pairs across the three runs were already published by tau=0.
    assert_eq!(env.platform.task_census(), 6);

    for bad in [-0.1, 1.5, f64::NAN] {
        assert!(matches!(
            filtered_join(&ctx, &cd, token_jaccard, bad, &Presenter::entity_match()),
            Err(Error::InvalidThreshold(_))
        ));
    }
}

#[test]
fn transitive_join_on_two_clusters_saves_pairs() {
    let recs = [("a", 1), ("b", 1), ("c", 1), ("d", 2)];
    let (env, objs) = planted(&recs);
    let ctx = ctx(&env);
    let cd = ctx.crowddata(objs, "items").unwrap();
    let out = transitive_join(
        &ctx,
        &cd,
        &PairOrder::IdAscending,
        &Presenter::entity_match(),
    )
    .unwrap();
    assert!(out.published <= 5, "published {}", out.published);
    assert_eq!(out.published, env.platform.task_census());
    assert_eq!(out.matched_ids(), oracle(&recs));
    assert!(out.inconsistencies.is_empty());
    // Deduced pairs never reach the platform.
    let published: BTreeSet<_> = env
        .platform
        .tasks()
        .into_iter()
        .map(|t| t.fingerprint)
        .collect();
    for p in out.pairs.iter().filter(|p| p.source == PairSource::Deduced) {
        assert!(!published.contains(&p.pair_fingerprint));
    }
}

#[test]
fn transitive_join_without_matches_publishes_everything() {
    let recs = [("a", 1), ("b", 2), ("c", 3), ("d", 4)];
    let (env, objs) = planted(&recs);
    let ctx = ctx(&env);
    let cd = ctx.crowddata(objs, "items").unwrap();
    let out =
        transitive_join(&ctx, &cd, &PairOrder::default(), &Presenter::entity_match()).unwrap();
    assert_eq!(out.published, 6);
    assert!(out.matched_ids().is_empty());
}

#[test]
fn transitive_join_of_two_items_publishes_one_pair() {
    let (env, objs) = planted(&[("a", 1), ("b", 1)]);
    let ctx = ctx(&env);
    let cd = ctx.crowddata(objs, "items").unwrap();
    let out =
        transitive_join(&ctx, &cd, &PairOrder::default(), &Presenter::entity_match()).unwrap();
    assert_eq!(out.published, 1);
    assert_eq!(out.verdicts()[&(1, 2)], Verdict::Match);
}

#[test]
fn transitive_join_rerun_is_served_from_cache() {
    let recs = [("a x", 1), ("a y", 1), ("b x", 2), ("b y", 2), ("c", 3)];
    let (env, objs) = planted(&recs);
    let first = {
        let ctx = ctx(&env);
        let cd = ctx.crowddata(objs.clone(), "items").unwrap();
        transitive_join(
            &ctx,
            &cd,
            &PairOrder::SimilarityDescending,
            &Presenter::entity_match(),
        )
        .unwrap()
    };
    let census = env.platform.task_census();
    let ctx = ctx(&env);
    let cd = ctx.crowddata(objs, "items").unwrap();
    let again = transitive_join(
        &ctx,
        &cd,
        &PairOrder::SimilarityDescending,
        &Presenter::entity_match(),
    )
    .unwrap();
    assert_eq!(first, again);
    assert_eq!(env.platform.task_census(), census);
    assert_eq!(again.matched_ids(), oracle(&recs));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noiseless_variants_agree_with_simple_join(clusters in proptest::collection::vec(0u32..4, 2..8)) {
        let names: Vec<String> = (0..clusters.len()).map(|i| format!("item {i}")).collect();
        let recs: Vec<(&str, u32)> = names.iter().map(String::as_str).zip(clusters.iter().copied()).collect();
        let n = recs.len();
        let (env, objs) = planted(&recs);
        let ctx = ctx(&env);
        let cd = ctx.crowddata(objs, "items").unwrap();
        let all = simple_join(&ctx, &cd, None, &Presenter::entity_match()).unwrap();
        let trans = transitive_join(&ctx, &cd, &PairOrder::IdAscending, &Presenter::entity_match()).unwrap();
        let filt = filtered_join(&ctx, &cd, token_jaccard, 0.0, &Presenter::entity_match()).unwrap();
        prop_assert_eq!(all.matched_ids(), oracle(&recs));
        prop_assert_eq!(trans.verdicts(), all.verdicts());
        prop_assert_eq!(filt.verdicts(), all.verdicts());
        prop_assert!(trans.published <= n * (n - 1) / 2);
        prop_assert_eq!(env.platform.task_census(), n * (n - 1) / 2);
    }

    #[test]
    fn noisy_transitive_join_stays_closed(clusters in proptest::collection::vec(0u32..3, 3..7), seed in 0u64..1000) {
        let names: Vec<String> = (0..clusters.len()).map(|i| format!("item {i}")).collect();
        let recs: Vec<(&str, u32)> = names.iter().map(String::as_str).zip(clusters.iter().copied()).collect();
        let (env, objs) = planted_with(&recs, worker_pool(1, 0.6, seed));
        let ctx = env.ctx(1);
        let cd = ctx.crowddata(objs, "items").unwrap();
        let out = transitive_join(&ctx, &cd, &PairOrder::IdAscending, &Presenter::entity_match()).unwrap();
        let verdicts = out.verdicts();
        let n = recs.len() as u64;
        prop_assert_eq!(verdicts.len() as u64, n * (n - 1) / 2);
        // Final verdicts form an equivalence relation.
        let m = |a: u64, b: u64| verdicts[&(a.min(b), a.max(b))] == Verdict::Match;
        for a in 1..=n {
            for b in 1..=n {
                for c in 1..=n {
                    if a != b && b != c && a != c && m(a, b) && m(b, c) {
                        prop_assert!(m(a, c));
                    }
                }
            }
        }
    }
}
