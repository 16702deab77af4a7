use dialcrit::corpus::{generate_corpus, Corpus, Split};
use dialcrit::dialenv::{Env, EnvConfig, Ontology, DEFAULT_ONTOLOGY};
use dialcrit::evaluator::{correlate, ranks, Interval};
use dialcrit::numerics::{dropout_mask, log_sum_exp, sigmoid, ParameterSet, Tensor};
use dialcrit::policy::{EpsilonOracle, Policy};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env() -> Env {
    Env::new(Ontology::miniwoz(), EnvConfig::default()).unwrap()
}

fn params(values: &[f64]) -> ParameterSet {
    let mut ps = ParameterSet::new();
    ps.insert("w", Tensor::row(values.to_vec())).unwrap();
    ps
}

proptest! {
    #[test]
    fn log_sum_exp_is_bounded_and_shift_invariant(row in vec(-50.0f64..50.0, 1..20), shift in -100.0f64..100.0) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = log_sum_exp(&row);
        prop_assert!(l >= m - 1e-12);
        prop_assert!(l <= m + (row.len() as f64).ln() + 1e-12);
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        prop_assert!((log_sum_exp(&shifted) - l - shift).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_is_symmetric(x in -700.0f64..700.0) {
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_update_stays_between_endpoints(
        pairs in vec((-5.0f64..5.0, -5.0f64..5.0), 1..10),
        tau in 0.0f64..=1.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut target = params(&a);
        target.soft_update(&params(&b), tau).unwrap();
        for ((x, s), t) in target.get("w").unwrap().values().iter().zip(&b).zip(&a) {
            prop_assert!(*x >= s.min(*t) - 1e-12 && *x <= s.max(*t) + 1e-12);
        }
    }

    #[test]
    fn dropout_masks_keep_expectation(n in 1usize..200, rate in 0.0f64..0.95, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match dropout_mask(n, rate, &mut rng).unwrap() {
            None => prop_assert_eq!(rate, 0.0),
            Some(m) => {
                prop_assert_eq!(m.len(), n);
                let keep = 1.0 / (1.0 - rate);
                prop_assert!(m.iter().all(|&v| v == 0.0 || (v - keep).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn ranks_are_a_permutation_average(xs in vec(-3i32..3, 1..30)) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let r = ranks(&xs);
        let n = xs.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                prop_assert_eq!(xs[i] < xs[j], r[i] < r[j]);
            }
        }
    }

    #[test]
    fn correlations_are_coefficients(pairs in vec((-1.0f64..1.0, -1.0f64..1.0), 3..15)) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(c) = correlate(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&c.pearson));
            prop_assert!((-1.0..=1.0).contains(&c.spearman));
            let self_c = correlate(&x, &x).unwrap();
            prop_assert!((self_c.spearman - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn binomial_interval_is_centred(n in 1usize..5000, frac in 0.0f64..=1.0) {
        let k = (frac * n as f64).floor() as usize;
        let iv = Interval::binomial(k, n).unwrap();
        prop_assert!(iv.contains(k as f64 / n as f64));
        prop_assert!(iv.half_width >= 0.0 && iv.half_width <= 0.98 / (n as f64).sqrt() + 1e-12);
    }

    #[test]
    fn parameter_text_round_trips(values in vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 1..40)) {
        let ps = params(&values);
        let back = ParameterSet::from_text(&ps.to_text(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.content_hash(), ps.content_hash());
        prop_assert_eq!(back, ps);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn episodes_replay_exactly(seed in any::<u64>(), eps in 0.0f64..=1.0) {
        let env = env();
        let pol = EpsilonOracle::new(&env, eps).unwrap();
        let corpus = generate_corpus(&env, &pol, 2, seed, Split::Train).unwrap();
        for e in &corpus.episodes {
            e.replay(&env).unwrap();
            prop_assert!(e.reward == 0.0 || e.reward == 1.0);
            prop_assert_eq!(e.success(), e.reward == 1.0);
        }
        prop_assert_eq!(generate_corpus(&env, &pol, 2, seed, Split::Train).unwrap(), corpus);
    }

    #[test]
    fn corpus_jsonl_round_trips(seed in any::<u64>(), eps in 0.0f64..=1.0) {
        let env = env();
        let pol = EpsilonOracle::new(&env, eps).unwrap();
        let corpus = generate_corpus(&env, &pol, 3, seed, Split::Valid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        corpus.save(&path, env.ontology()).unwrap();
        let back = Corpus::load(&path, &env).unwrap();
        prop_assert_eq!(back.to_jsonl(env.ontology()).unwrap(), corpus.to_jsonl(env.ontology()).unwrap());
        prop_assert_eq!(back, corpus);
    }

    #[test]
    fn policies_only_pick_valid_actions(seed in any::<u64>(), eps in 0.0f64..=1.0) {
        let env = env();
        let pol = EpsilonOracle::new(&env, eps).unwrap();
        let corpus = generate_corpus(&env, &pol, 1, seed, Split::Test).unwrap();
        let n = env.actions().len();
        prop_assert!(corpus.episodes[0].acts.iter().all(|&a| a < n));
        let want = if eps == 1.0 { "random".to_string() } else { format!("eps-{eps}") };
        prop_assert_eq!(pol.name(), want);
    }
}

#[test]
fn bundled_ontology_text_matches_builtin() {
    let parsed = Ontology::from_toml_str(DEFAULT_ONTOLOGY).unwrap();
    assert_eq!(parsed.hash(), Ontology::miniwoz().hash());
}
