use niser::synth::{gen_sessions, SynthConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sessions_respect_bounds(
        m in 10usize..80,
        min_len in 2usize..5,
        extra in 0usize..6,
        days in 1usize..4,
        new_per_day in 0usize..3,
        seed in any::<u64>(),
    ) {
        let cfg = SynthConfig {
            m,
            n_sessions: 300,
            min_len,
            max_len: min_len + extra,
            n_days: days,
            new_items_per_day: new_per_day,
            seed,
            ..SynthConfig::default()
        };
        let corpus = gen_sessions(&cfg).unwrap();
        prop_assert_eq!(corpus.sessions.len(), 300);
        for s in &corpus.sessions {
            prop_assert!((min_len..=min_len + extra).contains(&s.items.len()));
            prop_assert!(s.items.iter().all(|&i| i < m));
            prop_assert!(s.day < days);
        }
        for &(day, item) in &corpus.new_items {
            prop_assert!(corpus.sessions.iter().filter(|s| s.day < day).all(|s| !s.items.contains(&item)));
        }
        prop_assert_eq!(gen_sessions(&cfg).unwrap().sessions, corpus.sessions);
    }

    #[test]
    fn popularity_is_long_tailed(seed in any::<u64>(), zipf_s in 1.1f64..1.6) {
        let cfg = SynthConfig { m: 500, n_sessions: 5000, zipf_s, seed, ..SynthConfig::default() };
        let share = gen_sessions(&cfg).unwrap().top_decile_share();
        prop_assert!(share > 0.5, "top decile share {}", share);
    }
}
