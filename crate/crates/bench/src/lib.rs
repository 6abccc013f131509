//! Fixtures shared by the benchmarks.

use debcat_core::cdm::{enforce_monotonicity, NcdmItem, NcdmNet};
use debcat_core::dataset::{resplit_support_meta, EpisodeSplit};
use debcat_core::rng::{stream, Stream};
use debcat_core::selector::SelectionPolicy;
use debcat_core::sim::{simulate, SimConfig};
use debcat_core::{CdmBundle, Corpus};

pub const N_CONCEPTS: usize = 8;

/// Default-sized simulated corpus.
pub fn corpus() -> Corpus {
    simulate(&SimConfig::default()).expect("default simulation").0
}

pub fn irt_bundle(n_questions: usize) -> CdmBundle {
    CdmBundle::irt((0..n_questions).map(|q| q as f64 / n_questions as f64 - 0.5).collect())
}

/// Untrained NCDM with the production layer sizes.
pub fn ncdm_bundle(n_questions: usize) -> CdmBundle {
    let net = enforce_monotonicity(NcdmNet::new(N_CONCEPTS, &mut stream(Stream::CdmInit, &[0])));
    let items = (0..n_questions)
        .map(|q| NcdmItem {
            concepts: (0..N_CONCEPTS).map(|k| f64::from(u8::from((q + k) % 3 == 0))).collect(),
            difficulty: vec![0.5; N_CONCEPTS],
            discrimination: 0.5,
        })
        .collect();
    CdmBundle::ncdm(items, net)
}

pub fn policy(n_questions: usize) -> SelectionPolicy {
    SelectionPolicy::new(n_questions, 256, &mut stream(Stream::PolicyInit, &[0]))
}

/// Support/meta split of the first examinee.
pub fn episode(corpus: &Corpus) -> EpisodeSplit {
    let (_, log) = corpus.logs().next().expect("nonempty corpus");
    resplit_support_meta(log, 0.2, 0, 0).expect("valid split")
}
