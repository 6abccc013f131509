use debcat_bench::{corpus, episode, irt_bundle, ncdm_bundle, policy};
use debcat_core::selector::SelectMode;
use debcat_core::trainer::{run_episode, TrainConfig};

#[test]
fn fixtures_support_a_full_episode() {
    let corpus = corpus();
    let split = episode(&corpus);
    assert!(split.support.len() >= 10 && !split.meta.is_empty());
    let n = corpus.n_questions();
    let p = policy(n);
    for bundle in [irt_bundle(n), ncdm_bundle(n)] {
        let params = TrainConfig::default().episode();
        let trace = run_episode(&bundle, &p, &split, params, SelectMode::Greedy, 0, 0).unwrap().unwrap();
        assert_eq!(trace.selected.len(), 10);
    }
}
