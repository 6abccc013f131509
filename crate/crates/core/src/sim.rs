//! Seeded synthetic response logs with known proficiencies.
//!
//! Each examinee is assigned an intended attribute, draws a latent ability
//! around that attribute's center, and answers a random subset of the bank
//! with probability `sigmoid(slope * (ability - difficulty))`.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Attribute, Corpus, DataError, Interaction, QuestionMeta};
use crate::math::sigmoid;
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_examinees: u32,
    pub n_questions: u32,
    pub n_concepts: u32,
    /// Inclusive range of log lengths.
    pub min_len: usize,
    pub max_len: usize,
    /// Shares of intended A, B and C examinees.
    pub attribute_mix: [f64; 3],
    /// Ability centers for A, B and C.
    pub ability_mean: [f64; 3],
    pub ability_std: f64,
    pub difficulty_std: f64,
    pub slope: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_examinees: 300,
            n_questions: 200,
            n_concepts: 8,
            min_len: 40,
            max_len: 80,
            attribute_mix: [0.35, 0.30, 0.35],
            ability_mean: [-1.6, 0.0, 1.6],
            ability_std: 0.3,
            difficulty_std: 1.0,
            slope: 1.0,
            seed: 0,
        }
    }
}

/// Generating parameters, keyed by examinee and question id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub ability: BTreeMap<u32, f64>,
    pub intended: BTreeMap<u32, Attribute>,
    pub difficulty: Vec<f64>,
}

pub fn simulate(config: &SimConfig) -> Result<(Corpus, SimTruth), DataError> {
    let bad = |m: &str| DataError::Integrity(m.to_string());
    if config.n_questions == 0 || config.n_concepts == 0 {
        return Err(bad("simulation needs questions and concepts"));
    }
    if config.min_len == 0 || config.min_len > config.max_len || config.max_len > config.n_questions as usize {
        return Err(bad("log lengths must satisfy 1 <= min_len <= max_len <= n_questions"));
    }
    let mix_total: f64 = config.attribute_mix.iter().sum();
    if config.attribute_mix.iter().any(|m| *m < 0.0) || mix_total.is_nan() || mix_total <= 0.0 {
        return Err(bad("attribute_mix must be nonnegative with a positive sum"));
    }
    let normal = |std: f64| Normal::new(0.0, std).map_err(|e| bad(&format!("standard deviation: {e}")));
    let ability_noise = normal(config.ability_std)?;
    let difficulty_noise = normal(config.difficulty_std)?;

    let mut rng = stream(Stream::Simulation, &[config.seed, 0]);
    let difficulty: Vec<f64> = (0..config.n_questions)
        .map(|_| difficulty_noise.sample(&mut rng))
        .collect();
    let questions: Vec<QuestionMeta> = (0..config.n_questions)
        .map(|id| {
            let n = rng.random_range(1..=2.min(config.n_concepts as usize));
            let mut concepts: Vec<u32> = sample(&mut rng, config.n_concepts as usize, n)
                .into_iter()
                .map(|c| c as u32)
                .collect();
            concepts.sort_unstable();
            QuestionMeta { id, concepts }
        })
        .collect();

    let mut logs = BTreeMap::new();
    let mut truth = SimTruth {
        ability: BTreeMap::new(),
        intended: BTreeMap::new(),
        difficulty: difficulty.clone(),
    };
    for e in 0..config.n_examinees {
        let mut rng = stream(Stream::Simulation, &[config.seed, 1, u64::from(e)]);
        let u: f64 = rng.random::<f64>() * mix_total;
        let attr = if u < config.attribute_mix[0] {
            Attribute::A
        } else if u < config.attribute_mix[0] + config.attribute_mix[1] {
            Attribute::B
        } else {
            Attribute::C
        };
        let ability = config.ability_mean[attr.index()] + ability_noise.sample(&mut rng);
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut picked: Vec<usize> = sample(&mut rng, config.n_questions as usize, len).into_vec();
        picked.sort_unstable();
        let log: Vec<Interaction> = picked
            .into_iter()
            .map(|q| {
                let p = sigmoid(config.slope * (ability - difficulty[q]));
                Interaction::new(e, q as u32, u8::from(rng.random::<f64>() < p))
            })
            .collect();
        logs.insert(e, log);
        truth.ability.insert(e, ability);
        truth.intended.insert(e, attr);
    }
    let corpus = Corpus::from_parts(logs, questions, config.n_concepts as usize)?;
    Ok((corpus, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::attribute_of;

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = SimConfig {
            n_examinees: 40,
            ..SimConfig::default()
        };
        let (a, ta) = simulate(&cfg).unwrap();
        let (b, tb) = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        for (_, log) in a.logs() {
            assert!((40..=80).contains(&log.len()));
        }
    }

    #[test]
    fn intended_attribute_mostly_realized() {
        let (corpus, truth) = simulate(&SimConfig::default()).unwrap();
        let agree = corpus
            .logs()
            .filter(|(id, log)| attribute_of(log).unwrap() == truth.intended[id])
            .count();
        assert!(agree as f64 > 0.8 * corpus.logs().count() as f64, "{agree}");
    }

    #[test]
    fn csv_roundtrip_keeps_every_response() {
        let (corpus, _) = simulate(&SimConfig {
            n_examinees: 30,
            ..SimConfig::default()
        })
        .unwrap();
        let (back, map) = crate::dataset::read_corpus(crate::dataset::corpus_csv(&corpus).as_bytes()).unwrap();
        assert_eq!(back.counts().interactions, corpus.counts().interactions);
        for (e, log) in back.logs() {
            let original = corpus.log(map.examinees[e as usize] as u32).unwrap();
            let labels = |l: &[Interaction]| l.iter().map(|it| it.label).collect::<Vec<_>>();
            assert_eq!(labels(log), labels(original));
            for (a, b) in log.iter().zip(original) {
                assert_eq!(map.questions[a.question as usize], i64::from(b.question));
                let concepts: Vec<i64> = back.questions()[a.question as usize]
                    .concepts
                    .iter()
                    .map(|&c| map.concepts[c as usize] - 1)
                    .collect();
                let expected: Vec<i64> = corpus.questions()[b.question as usize].concepts.iter().map(|&c| i64::from(c)).collect();
                assert_eq!(concepts, expected);
            }
        }
    }

    #[test]
    fn rejects_bad_lengths() {
        let cfg = SimConfig {
            min_len: 90,
            max_len: 80,
            ..SimConfig::default()
        };
        assert!(simulate(&cfg).is_err());
    }
}
