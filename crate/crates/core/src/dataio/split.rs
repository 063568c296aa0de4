use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::IdentityCorpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Images per identity used to craft the mask.
    pub n_inference: usize,
    /// Held-out images per identity used for evaluation.
    pub n_test: usize,
    /// Identities that only ever appear in the gallery.
    pub n_distractors: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub inference: Vec<String>,
    pub test: Vec<String>,
}

/// Filenames assigned to each split; serialises to stable JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub identities: BTreeMap<String, ManifestEntry>,
    pub distractors: BTreeMap<String, Vec<String>>,
}

impl SplitManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("split manifest: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub inference: IdentityCorpus,
    pub test: IdentityCorpus,
    pub distractors: IdentityCorpus,
    pub manifest: SplitManifest,
}

/// Seeded partition into inference, test and distractor sets.
///
/// Distractor identities are drawn first; every remaining identity then
/// contributes `n_inference` and `n_test` disjoint images. Selected images keep
/// their original (lexicographic) order inside each split.
pub fn split_corpus(corpus: &IdentityCorpus, spec: &SplitSpec) -> Result<CorpusSplit> {
    if spec.n_inference == 0 || spec.n_test == 0 {
        return Err(Error::precondition(
            "n_inference and n_test must both be at least 1",
        ));
    }
    if spec.n_distractors >= corpus.len() {
        return Err(Error::precondition(format!(
            "{} distractors requested but the corpus has only {} identities",
            spec.n_distractors,
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ids: Vec<&str> = corpus.ids().collect();
    ids.shuffle(&mut rng);
    let (distractor_ids, probe_ids) = ids.split_at(spec.n_distractors);
    let mut distractor_ids = distractor_ids.to_vec();
    let mut probe_ids = probe_ids.to_vec();
    distractor_ids.sort_unstable();
    probe_ids.sort_unstable();

    let need = spec.n_inference + spec.n_test;
    let short: Vec<String> = probe_ids
        .iter()
        .filter_map(|id| {
            let have = corpus.get(id).map_or(0, |r| r.images.len());
            (have < need).then(|| format!("{id} ({have} < {need})"))
        })
        .collect();
    if !short.is_empty() {
        return Err(Error::InsufficientImages(short));
    }

    let shape = corpus.shape();
    let mut inference = IdentityCorpus::new(shape);
    let mut test = IdentityCorpus::new(shape);
    let mut entries = BTreeMap::new();
    for id in &probe_ids {
        let rec = corpus.get(id).expect("listed identity");
        let mut order: Vec<usize> = (0..rec.images.len()).collect();
        order.shuffle(&mut rng);
        let mut inf_idx = order[..spec.n_inference].to_vec();
        let mut test_idx = order[spec.n_inference..need].to_vec();
        inf_idx.sort_unstable();
        test_idx.sort_unstable();
        let pick = |idx: &[usize]| {
            (
                idx.iter().map(|&i| rec.names[i].clone()).collect::<Vec<_>>(),
                idx.iter().map(|&i| rec.images[i].clone()).collect::<Vec<_>>(),
            )
        };
        let (inf_names, inf_imgs) = pick(&inf_idx);
        let (test_names, test_imgs) = pick(&test_idx);
        entries.insert(
            id.to_string(),
            ManifestEntry {
                inference: inf_names.clone(),
                test: test_names.clone(),
            },
        );
        inference.insert(*id, inf_names, inf_imgs)?;
        test.insert(*id, test_names, test_imgs)?;
    }

    let distractors = corpus.subset(distractor_ids.iter().copied())?;
    let distractor_entries = distractors
        .iter()
        .map(|(id, rec)| (id.to_string(), rec.names.clone()))
        .collect();
    Ok(CorpusSplit {
        inference,
        test,
        distractors,
        manifest: SplitManifest {
            spec: *spec,
            identities: entries,
            distractors: distractor_entries,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_corpus, ImageShape};

    fn corpus(ids: usize, imgs: usize) -> IdentityCorpus {
        synth_corpus(ids, imgs, ImageShape::new(8, 8, 3), 3).unwrap()
    }

    #[test]
    fn ten_inference_five_test() {
        let c = corpus(500, 15);
        let spec = SplitSpec {
            n_inference: 10,
            n_test: 5,
            n_distractors: 0,
            seed: 1,
        };
        let split = split_corpus(&c, &spec).unwrap();
        assert_eq!(split.inference.len(), 500);
        for (id, rec) in split.inference.iter() {
            let test = split.test.get(id).unwrap();
            assert_eq!(rec.images.len(), 10);
            assert_eq!(test.images.len(), 5);
            assert!(rec.names.iter().all(|n| !test.names.contains(n)));
        }
        assert!(split.distractors.is_empty());
    }

    #[test]
    fn deterministic_in_seed() {
        let c = corpus(12, 8);
        let spec = SplitSpec {
            n_inference: 3,
            n_test: 4,
            n_distractors: 2,
            seed: 1,
        };
        let a = split_corpus(&c, &spec).unwrap();
        let b = split_corpus(&c, &spec).unwrap();
        assert_eq!(a.manifest.to_json(), b.manifest.to_json());
        let other = split_corpus(&c, &SplitSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.manifest, other.manifest);
        let parsed = SplitManifest::from_json(&a.manifest.to_json()).unwrap();
        assert_eq!(parsed, a.manifest);
    }

    #[test]
    fn distractors_are_gallery_only() {
        let c = corpus(10, 6);
        let spec = SplitSpec {
            n_inference: 2,
            n_test: 2,
            n_distractors: 3,
            seed: 9,
        };
        let s = split_corpus(&c, &spec).unwrap();
        assert_eq!(s.distractors.len(), 3);
        assert_eq!(s.inference.len(), 7);
        for id in s.distractors.ids() {
            assert!(s.inference.get(id).is_none() && s.test.get(id).is_none());
            assert_eq!(s.distractors.get(id).unwrap().images.len(), 6);
        }
    }

    #[test]
    fn insufficient_images_listed() {
        let c = corpus(3, 15);
        let spec = SplitSpec {
            n_inference: 15,
            n_test: 5,
            n_distractors: 0,
            seed: 1,
        };
        match split_corpus(&c, &spec) {
            Err(Error::InsufficientImages(ids)) => assert_eq!(ids.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn splits_are_disjoint(seed in 0u64..1000, n_inf in 1usize..4, n_test in 1usize..4) {
            let c = corpus(5, 8);
            let s = split_corpus(&c, &SplitSpec { n_inference: n_inf, n_test, n_distractors: 1, seed }).unwrap();
            for (id, e) in &s.manifest.identities {
                proptest::prop_assert_eq!(e.inference.len(), n_inf);
                proptest::prop_assert!(e.inference.iter().all(|n| !e.test.contains(n)));
                proptest::prop_assert!(!s.manifest.distractors.contains_key(id));
            }
        }
    }
}
