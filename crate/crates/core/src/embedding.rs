//! Vector arithmetic, cosine similarity, exact nearest-neighbor search and the
//! binary embedding-store format.
//!
//! Arithmetic is done in `f64`. Stores persist `f32` payloads and keep them in
//! that precision in memory so that a save/load cycle is bit-exact; vectors are
//! widened (and never normalized) when they are handed out.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Store key for a free-form text: `"x:"` followed by the first 8 bytes of
/// its SHA-256, hex encoded. Generated texts and class prompts are looked up
/// in hash-keyed stores under this key.
pub fn text_key(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    format!("x:{}", hex::encode(&digest[..8]))
}

/// A finite real vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    if !(na.is_finite() && nb.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// One hit of a nearest-neighbor query.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub index: usize,
    pub score: f64,
}

/// Exact top-k by cosine over `candidates`, descending by score, ties to the
/// lower candidate index. `k` is clamped to the candidate count.
pub(crate) fn top_k_by_cosine<'a, I>(query: &[f64], candidates: I, k: usize) -> Result<Vec<(usize, f64)>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let mut scored = Vec::new();
    for (i, c) in candidates.into_iter().enumerate() {
        if c.len() != query.len() {
            return Err(Error::DimensionMismatch { expected: c.len(), found: query.len() });
        }
        let cn = norm(c);
        if cn == 0.0 {
            return Err(Error::ZeroNorm);
        }
        scored.push((i, (dot(query, c) / (qn * cn)).clamp(-1.0, 1.0)));
    }
    // stable sort keeps ascending index among equal scores
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    Ok(scored)
}

const MAGIC: &[u8; 4] = b"EMBS";
const VERSION: u8 = 0x01;

/// Immutable id -> vector map with a fixed dimension and insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    // row-major, dim values per entry
    values: Vec<f32>,
    widened: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    /// Builds a store, narrowing every vector to `f32`.
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
            }
            ids.push(id.into());
            values.extend(v.iter().map(|&x| x as f32));
        }
        Self::from_raw(dim, ids, values)
    }

    fn from_raw(dim: usize, ids: Vec<String>, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidStore("dimension must be positive".into()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() {
                return Err(Error::InvalidStore("empty id".into()));
            }
            if id.len() > u16::MAX as usize {
                return Err(Error::InvalidStore(format!("id longer than {} bytes", u16::MAX)));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        for (i, row) in values.chunks(dim).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidStore(format!("non-finite value in {:?}", ids[i])));
            }
            if row.iter().all(|&x| x == 0.0) {
                return Err(Error::InvalidStore(format!("zero vector for {:?}", ids[i])));
            }
        }
        let widened = values.iter().map(|&x| f64::from(x)).collect();
        Ok(Self { dim, ids, values, widened, index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Raw (unnormalized) vector at entry `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.widened[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn vector(&self, id: &str) -> Option<EmbeddingVector> {
        self.get(id).map(|v| EmbeddingVector(v.to_vec()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> + '_ {
        self.ids.iter().enumerate().map(move |(i, id)| (id.as_str(), self.row(i)))
    }

    /// The `k` entries most cosine-similar to `query`, descending; ties go to
    /// the entry listed first.
    pub fn top_k_neighbors(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        if self.is_empty() {
            return Err(Error::EmptyStore);
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: query.len() });
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let hits = top_k_by_cosine(query, (0..self.len()).map(|i| self.row(i)), k)?;
        Ok(hits
            .into_iter()
            .map(|(index, score)| Neighbor { id: self.ids[index].clone(), index, score })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.values.len() * 4 + self.ids.len() * 16);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in &self.values[i * self.dim..(i + 1) * self.dim] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let dim = u32::from_le_bytes(r.array()?) as usize;
        let count = u64::from_le_bytes(r.array()?);
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::InvalidStore("id is not valid UTF-8".into()))?
                .to_owned();
            for _ in 0..dim {
                values.push(f32::from_le_bytes(r.array()?));
            }
            ids.push(id);
        }
        if r.pos != bytes.len() {
            return Err(Error::TrailingBytes(bytes.len() - r.pos));
        }
        Self::from_raw(dim, ids, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(entries: &[(&str, &[f64])]) -> EmbeddingStore {
        let dim = entries.first().map_or(2, |e| e.1.len());
        EmbeddingStore::from_entries(dim, entries.iter().map(|(id, v)| (*id, v.to_vec()))).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(l2_normalize(&[2.0; 4]).unwrap(), vec![0.5; 4]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroNorm)));
        assert!(matches!(l2_normalize(&[f64::NAN, 1.0]), Err(Error::NonFinite)));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn top_k_examples() {
        let s = store(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0]), ("c", &[0.6, 0.8])]);
        let hits = s.top_k_neighbors(&[1.0, 0.0], 1).unwrap();
        assert_eq!((hits[0].id.as_str(), hits[0].score), ("a", 1.0));

        let hits = s.top_k_neighbors(&[0.0, 1.0], 2).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].id, "b");
        assert_eq!(hits[1].id, "c");
        assert!((hits[1].score - 0.8).abs() < 1e-7);

        assert_eq!(s.top_k_neighbors(&[1.0, 1.0], 10).unwrap().len(), 3);
    }

    #[test]
    fn top_k_ties_go_to_first_entry() {
        let s = store(&[("x", &[0.3, 0.4]), ("y", &[0.3, 0.4])]);
        assert_eq!(s.top_k_neighbors(&[1.0, 1.0], 1).unwrap()[0].id, "x");
    }

    #[test]
    fn top_k_errors() {
        let empty = EmbeddingStore::from_entries::<_, String>(2, vec![]).unwrap();
        assert!(matches!(empty.top_k_neighbors(&[1.0, 0.0], 1), Err(Error::EmptyStore)));
        let s = store(&[("a", &[1.0, 0.0])]);
        assert!(matches!(s.top_k_neighbors(&[1.0], 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn store_rejects_bad_entries() {
        let dup = EmbeddingStore::from_entries(1, vec![("a", vec![1.0]), ("a", vec![2.0])]);
        assert!(matches!(dup, Err(Error::DuplicateId(_))));
        let zero = EmbeddingStore::from_entries(1, vec![("a", vec![0.0])]);
        assert!(matches!(zero, Err(Error::InvalidStore(_))));
    }

    #[test]
    fn empty_store_round_trips() {
        let s = EmbeddingStore::from_entries::<_, String>(4, vec![]).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 17);
        assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn three_entry_store_round_trips() {
        let s = EmbeddingStore::from_entries(
            8,
            (0..3).map(|i| (format!("item-{i}"), (0..8).map(|j| (i * 8 + j) as f64 * 0.37 - 1.1).collect())),
        )
        .unwrap();
        let bytes = s.to_bytes();
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn decode_errors() {
        let s = store(&[("a", &[1.0, 2.0]), ("b", &[3.0, 4.0])]);
        let bytes = s.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(Error::BadMagic)));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(Error::VersionUnsupported(2))));

        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedFile)
        ));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(Error::TrailingBytes(1))));

        // rename "b" to "a"
        let mut bad = bytes.clone();
        let second_id = 17 + 2 + 1 + 8 + 2;
        assert_eq!(bad[second_id], b'b');
        bad[second_id] = b'a';
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(Error::DuplicateId(_))));
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_is_scale_and_normalization_invariant(
            (a, b) in (1usize..12).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d))),
            c in 0.01f64..100.0,
        ) {
            let base = cosine_similarity(&a, &b).unwrap();
            let na = l2_normalize(&a).unwrap();
            let nb = l2_normalize(&b).unwrap();
            prop_assert!((base - cosine_similarity(&na, &nb).unwrap()).abs() < 1e-12);
            prop_assert!((base - cosine_similarity(&b, &a).unwrap()).abs() < 1e-15);
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            prop_assert!((cosine_similarity(&a, &scaled).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((norm(&na) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn full_top_k_matches_brute_force(
            rows in prop::collection::vec(nonzero_vec(5), 1..30),
            query in nonzero_vec(5),
        ) {
            let s = EmbeddingStore::from_entries(5, rows.iter().enumerate().map(|(i, r)| (format!("r{i}"), r.clone()))).unwrap();
            let hits = s.top_k_neighbors(&query, s.len()).unwrap();
            prop_assert_eq!(hits.len(), s.len());
            let mut seen: Vec<usize> = hits.iter().map(|h| h.index).collect();
            seen.sort();
            prop_assert_eq!(seen, (0..s.len()).collect::<Vec<_>>());
            for w in hits.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            for h in &hits {
                let row = s.row(h.index);
                let mut d = 0.0; let mut qq = 0.0; let mut rr = 0.0;
                for j in 0..5 { d += query[j] * row[j]; qq += query[j] * query[j]; rr += row[j] * row[j]; }
                prop_assert!((h.score - d / (qq.sqrt() * rr.sqrt())).abs() < 1e-12);
            }
        }

        #[test]
        fn save_load_save_is_byte_identical(rows in prop::collection::vec(nonzero_vec(3), 0..10)) {
            let s = EmbeddingStore::from_entries(3, rows.iter().enumerate().map(|(i, r)| (format!("id-{i}"), r.clone()))).unwrap();
            let bytes = s.to_bytes();
            let back = EmbeddingStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
