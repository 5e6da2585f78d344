//! The predefined prompt dictionary and best-prompt matching.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{norm, top_k_by_cosine};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub acronym: String,
    #[serde(default)]
    pub description: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DictionaryFile", into = "DictionaryFile")]
pub struct PromptDictionary {
    dim: usize,
    records: Vec<PromptRecord>,
}

#[derive(Serialize, Deserialize)]
struct DictionaryFile {
    dim: usize,
    records: Vec<PromptRecord>,
}

impl TryFrom<DictionaryFile> for PromptDictionary {
    type Error = Error;

    fn try_from(f: DictionaryFile) -> Result<Self> {
        Self::new(f.dim, f.records)
    }
}

impl From<PromptDictionary> for DictionaryFile {
    fn from(d: PromptDictionary) -> Self {
        DictionaryFile { dim: d.dim, records: d.records }
    }
}

/// A ranked dictionary hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub prompt_id: String,
    pub score: f64,
    pub rank: usize,
}

impl PromptDictionary {
    pub fn new(dim: usize, records: Vec<PromptRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDictionary);
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            let bad = |reason: &str| Error::InvalidPrompt { id: r.id.clone(), reason: reason.into() };
            if r.text.is_empty() {
                return Err(bad("empty prompt text"));
            }
            if r.embedding.len() != dim {
                return Err(bad(&format!("embedding has length {}, expected {dim}", r.embedding.len())));
            }
            if r.embedding.iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite embedding"));
            }
            if norm(&r.embedding) == 0.0 {
                return Err(bad("zero-norm embedding"));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PromptRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// The record with the highest cosine similarity to `image_embedding`;
    /// ties go to the earlier record.
    pub fn best_match(&self, image_embedding: &[f64]) -> Result<MatchResult> {
        Ok(self.top_k_match(image_embedding, 1)?.remove(0))
    }

    /// Top-`k` records by cosine, ranks `1..=k`; `k` is clamped to the
    /// dictionary size.
    pub fn top_k_match(&self, image_embedding: &[f64], k: usize) -> Result<Vec<MatchResult>> {
        if image_embedding.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: image_embedding.len() });
        }
        if image_embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let hits = top_k_by_cosine(
            image_embedding,
            self.records.iter().map(|r| r.embedding.as_slice()),
            k.max(1),
        )?;
        Ok(hits
            .into_iter()
            .enumerate()
            .map(|(rank, (i, score))| MatchResult {
                prompt_id: self.records[i].id.clone(),
                score,
                rank: rank + 1,
            })
            .collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(id: &str, embedding: Vec<f64>) -> PromptRecord {
        PromptRecord {
            id: id.into(),
            text: format!("prompt {id}"),
            acronym: String::new(),
            description: String::new(),
            embedding,
        }
    }

    fn three() -> PromptDictionary {
        PromptDictionary::new(
            2,
            vec![record("p1", vec![1.0, 0.0]), record("p2", vec![0.0, 1.0]), record("p3", vec![0.6, 0.8])],
        )
        .unwrap()
    }

    fn random_dict(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> PromptDictionary {
        let records = (0..n)
            .map(|i| record(&format!("p{i}"), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        PromptDictionary::new(dim, records).unwrap()
    }

    #[test]
    fn best_match_examples() {
        let d = three();
        let m = d.best_match(&[1.0, 0.0]).unwrap();
        assert_eq!((m.prompt_id.as_str(), m.score, m.rank), ("p1", 1.0, 1));
        let m = d.best_match(&[0.6, 0.8]).unwrap();
        assert_eq!(m.prompt_id, "p3");
        assert!((m.score - 1.0).abs() < 1e-15);
        let m = d.best_match(&[0.7071, 0.7071]).unwrap();
        assert_eq!(m.prompt_id, "p3");
        assert!((m.score - 1.4 / 2f64.sqrt()).abs() < 1e-12);
        assert!((m.score - 0.98994).abs() < 1e-5);
    }

    #[test]
    fn top_k_examples() {
        let d = three();
        let ids: Vec<_> = d.top_k_match(&[1.0, 0.0], 3).unwrap().into_iter().map(|m| (m.prompt_id, m.rank)).collect();
        assert_eq!(ids, vec![("p1".into(), 1), ("p3".into(), 2), ("p2".into(), 3)]);
        assert_eq!(d.top_k_match(&[1.0, 0.0], 10).unwrap().len(), 3);
    }

    #[test]
    fn top_one_equals_best_match_on_random_dictionaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..12);
            let d = random_dict(&mut rng, n, 6);
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(d.top_k_match(&q, 1).unwrap()[0], d.best_match(&q).unwrap());
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(PromptDictionary::new(2, vec![]), Err(Error::EmptyDictionary)));
        assert!(matches!(three().best_match(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(three().best_match(&[0.0, 0.0]), Err(Error::ZeroNorm)));
        let dup = PromptDictionary::new(1, vec![record("a", vec![1.0]), record("a", vec![1.0])]);
        assert!(matches!(dup, Err(Error::DuplicateId(_))));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let d = three();
        let text = serde_json::to_string(&d).unwrap();
        assert!(text.starts_with("{\"dim\":2,\"records\":["));
        assert_eq!(serde_json::from_str::<PromptDictionary>(&text).unwrap(), d);
        let bad = r#"{"dim":3,"records":[{"id":"a","text":"t","embedding":[1,0]}]}"#;
        assert!(serde_json::from_str::<PromptDictionary>(bad).is_err());
    }

    proptest! {
        #[test]
        fn matching_properties(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..10);
            let d = random_dict(&mut rng, n, 4);
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let best = d.best_match(&q).unwrap();

            let scaled: Vec<f64> = q.iter().map(|x| x * scale).collect();
            prop_assert_eq!(&d.best_match(&scaled).unwrap().prompt_id, &best.prompt_id);

            let all = d.top_k_match(&q, n).unwrap();
            for m in &all {
                let brute = cosine_similarity(&d.get(&m.prompt_id).unwrap().embedding, &q).unwrap();
                prop_assert!((m.score - brute).abs() < 1e-12);
            }

            let winner = d.get(&best.prompt_id).unwrap().clone();
            let alone = PromptDictionary::new(4, vec![winner]).unwrap();
            prop_assert_eq!(alone.best_match(&q).unwrap(), best);
        }
    }
}
