//! Binary feature files for video and query embeddings.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! 0..6   magic  "GRDFV1" (video) | "GRDFQ1" (query)
//! 6..8   reserved, zero
//! 8..12  u32 record count
//! 12..16 u32 dimension
//! video record: u64 video_id, dim x f32
//! query record: u64 query_id, u64 target_video_id, u32 text_len, text bytes, dim x f32
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;

pub const HEADER_LEN: usize = 16;

pub trait Record: Clone + PartialEq + std::fmt::Debug {
    const MAGIC: &'static [u8; 6];
    const MAGIC_STR: &'static str;

    fn id(&self) -> u64;
    fn features(&self) -> &[f32];
    fn features_mut(&mut self) -> &mut Vec<f32>;
    fn encode(&self, out: &mut Vec<u8>);
    /// Decodes one record starting at `buf[0]`, returning it and the bytes consumed.
    fn decode(buf: &[u8], dim: usize) -> std::result::Result<(Self, usize), DecodeError>;
}

#[derive(Debug)]
pub enum DecodeError {
    Short,
    Text(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: u64,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: u64,
    pub target_video_id: u64,
    /// Empty text is stored as length 0 and always reads back as `None`.
    pub text: Option<String>,
    pub features: Vec<f32>,
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32s(buf: &[u8], dim: usize) -> Vec<f32> {
    buf[..dim * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn read_u64(buf: &[u8]) -> u64 {
    u64::from_le_bytes(buf[..8].try_into().unwrap())
}

fn read_u32(buf: &[u8]) -> u32 {
    u32::from_le_bytes(buf[..4].try_into().unwrap())
}

impl Record for VideoRecord {
    const MAGIC: &'static [u8; 6] = b"GRDFV1";
    const MAGIC_STR: &'static str = "GRDFV1";

    fn id(&self) -> u64 {
        self.video_id
    }
    fn features(&self) -> &[f32] {
        &self.features
    }
    fn features_mut(&mut self) -> &mut Vec<f32> {
        &mut self.features
    }
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.video_id.to_le_bytes());
        put_f32s(out, &self.features);
    }
    fn decode(buf: &[u8], dim: usize) -> std::result::Result<(Self, usize), DecodeError> {
        let len = 8 + dim * 4;
        if buf.len() < len {
            return Err(DecodeError::Short);
        }
        Ok((
            VideoRecord {
                video_id: read_u64(buf),
                features: read_f32s(&buf[8..], dim),
            },
            len,
        ))
    }
}

impl Record for QueryRecord {
    const MAGIC: &'static [u8; 6] = b"GRDFQ1";
    const MAGIC_STR: &'static str = "GRDFQ1";

    fn id(&self) -> u64 {
        self.query_id
    }
    fn features(&self) -> &[f32] {
        &self.features
    }
    fn features_mut(&mut self) -> &mut Vec<f32> {
        &mut self.features
    }
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.query_id.to_le_bytes());
        out.extend_from_slice(&self.target_video_id.to_le_bytes());
        let text = self.text.as_deref().unwrap_or("").as_bytes();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text);
        put_f32s(out, &self.features);
    }
    fn decode(buf: &[u8], dim: usize) -> std::result::Result<(Self, usize), DecodeError> {
        if buf.len() < 20 {
            return Err(DecodeError::Short);
        }
        let query_id = read_u64(buf);
        let target_video_id = read_u64(&buf[8..]);
        let text_len = read_u32(&buf[16..]) as usize;
        let len = 20 + text_len + dim * 4;
        if buf.len() < len {
            return Err(DecodeError::Short);
        }
        let text = if text_len == 0 {
            None
        } else {
            let s = std::str::from_utf8(&buf[20..20 + text_len]).map_err(|_| DecodeError::Text(query_id))?;
            Some(s.to_owned())
        };
        Ok((
            QueryRecord {
                query_id,
                target_video_id,
                text,
                features: read_f32s(&buf[20 + text_len..], dim),
            },
            len,
        ))
    }
}

/// An id-addressed, fixed-dimension collection of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore<R> {
    dimension: usize,
    records: Vec<R>,
    normalized: bool,
}

pub type VideoStore = FeatureStore<VideoRecord>;
pub type QueryStore = FeatureStore<QueryRecord>;

/// How [`FeatureStore::normalize`] treats zero-norm vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Degenerate {
    #[default]
    Reject,
    /// Replace with the first standard basis vector and count it.
    ReplaceWithBasis,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NormalizeReport {
    pub replaced_ids: Vec<u64>,
}

impl<R: Record> FeatureStore<R> {
    pub fn new(dimension: usize, records: Vec<R>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::ZeroDimension);
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.features().len() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    got: r.features().len(),
                });
            }
            if r.features().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(r.id()));
            }
            if !seen.insert(r.id()) {
                return Err(Error::DuplicateId(r.id()));
            }
        }
        Ok(Self {
            dimension,
            records,
            normalized: false,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn records(&self) -> &[R] {
        &self.records
    }

    pub fn into_records(self) -> Vec<R> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, id: u64) -> Option<&R> {
        self.records.iter().find(|r| r.id() == id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * (8 + 4 * self.dimension));
        out.extend_from_slice(R::MAGIC);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        for r in &self.records {
            r.encode(&mut out);
        }
        out
    }

    /// Parses a complete file image. `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..6] != R::MAGIC {
            return Err(Error::BadMagic {
                path: path.to_owned(),
                expected: R::MAGIC_STR,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                path: path.to_owned(),
                detail: format!("header is {} of {HEADER_LEN} bytes", bytes.len()),
            });
        }
        let count = read_u32(&bytes[8..]) as usize;
        let dim = read_u32(&bytes[12..]) as usize;
        if dim == 0 {
            return Err(Error::ZeroDimension);
        }
        let mut records = Vec::with_capacity(count.min(1 << 20));
        let mut at = HEADER_LEN;
        for i in 0..count {
            match R::decode(&bytes[at..], dim) {
                Ok((r, used)) => {
                    records.push(r);
                    at += used;
                }
                Err(DecodeError::Short) => {
                    return Err(Error::Truncated {
                        path: path.to_owned(),
                        detail: format!("declared {count} records, found {i}"),
                    })
                }
                Err(DecodeError::Text(id)) => return Err(Error::InvalidText(id)),
            }
        }
        if at != bytes.len() {
            return Err(Error::TrailingBytes {
                path: path.to_owned(),
                count: bytes.len() - at,
            });
        }
        Self::new(dim, records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Scales every vector to unit Euclidean norm.
    ///
    /// Vectors already within 1e-6 of unit norm are left untouched, which makes
    /// the operation exactly idempotent.
    pub fn normalize(mut self, degenerate: Degenerate) -> Result<(Self, NormalizeReport)> {
        let mut report = NormalizeReport::default();
        for r in &mut self.records {
            let id = r.id();
            let v = r.features_mut();
            let n = linalg::norm_f32(v);
            if n == 0.0 {
                match degenerate {
                    Degenerate::Reject => return Err(Error::ZeroNorm(id)),
                    Degenerate::ReplaceWithBasis => {
                        v.iter_mut().for_each(|x| *x = 0.0);
                        v[0] = 1.0;
                        report.replaced_ids.push(id);
                        continue;
                    }
                }
            }
            if (n - 1.0).abs() <= 1e-6 {
                continue;
            }
            for x in v.iter_mut() {
                *x = (*x as f64 / n) as f32;
            }
        }
        if !report.replaced_ids.is_empty() {
            log::warn!(
                "replaced {} zero-norm vectors with the first basis vector",
                report.replaced_ids.len()
            );
        }
        self.normalized = true;
        Ok((self, report))
    }
}

impl QueryStore {
    /// Checks that every query's target resolves in `videos`.
    pub fn check_targets(&self, videos: &VideoStore) -> Result<()> {
        let ids: HashSet<u64> = videos.records().iter().map(|r| r.video_id).collect();
        for q in &self.records {
            if !ids.contains(&q.target_video_id) {
                return Err(Error::MissingTarget(q.query_id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn empty_video_store_is_header_only() {
        let s = VideoStore::new(4, vec![]).unwrap();
        let b = s.to_bytes();
        assert_eq!(b.len(), 16);
        assert_eq!(&b[..6], b"GRDFV1");
        let back = VideoStore::from_bytes(&b, p()).unwrap();
        assert_eq!(back.dimension(), 4);
        assert!(back.is_empty());
    }

    #[test]
    fn single_record_layout() {
        let s = VideoStore::new(
            2,
            vec![VideoRecord {
                video_id: 7,
                features: vec![1.0, 0.0],
            }],
        )
        .unwrap();
        let b = s.to_bytes();
        assert_eq!(b.len(), 16 + 8 + 8);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..24], &7u64.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(&b[28..32], &0.0f32.to_le_bytes());
    }

    #[test]
    fn two_records_round_trip_byte_identical() {
        let s = VideoStore::new(
            3,
            vec![
                VideoRecord {
                    video_id: 1,
                    features: vec![0.5, -1.0, 2.25],
                },
                VideoRecord {
                    video_id: 9,
                    features: vec![f32::MIN_POSITIVE, 3.0, -0.0],
                },
            ],
        )
        .unwrap();
        let b = s.to_bytes();
        let back = VideoStore::from_bytes(&b, p()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn truncated_count_is_reported() {
        let recs = (0..5)
            .map(|i| VideoRecord {
                video_id: i,
                features: vec![i as f32; 3],
            })
            .collect();
        let b = VideoStore::new(3, recs).unwrap().to_bytes();
        let cut = &b[..16 + 3 * (8 + 12)];
        match VideoStore::from_bytes(cut, p()) {
            Err(Error::Truncated { detail, .. }) => assert!(detail.contains("found 3")),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn load_errors_are_distinct() {
        let b = VideoStore::new(2, vec![]).unwrap().to_bytes();
        assert!(matches!(QueryStore::from_bytes(&b, p()), Err(Error::BadMagic { .. })));
        let mut zero_dim = b.clone();
        zero_dim[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            VideoStore::from_bytes(&zero_dim, p()),
            Err(Error::ZeroDimension)
        ));
        let mut trailing = b.clone();
        trailing.push(0);
        assert!(matches!(
            VideoStore::from_bytes(&trailing, p()),
            Err(Error::TrailingBytes { count: 1, .. })
        ));
        let dup = vec![
            VideoRecord {
                video_id: 3,
                features: vec![1.0, 0.0],
            };
            2
        ];
        let mut bytes = VideoStore::new(2, dup[..1].to_vec()).unwrap().to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        dup[1].encode(&mut bytes);
        assert!(matches!(
            VideoStore::from_bytes(&bytes, p()),
            Err(Error::DuplicateId(3))
        ));
    }

    #[test]
    fn query_records_round_trip_with_text() {
        let s = QueryStore::new(
            2,
            vec![
                QueryRecord {
                    query_id: 1,
                    target_video_id: 10,
                    text: Some("a dog on a skateboard".into()),
                    features: vec![0.25, 0.75],
                },
                QueryRecord {
                    query_id: 2,
                    target_video_id: 11,
                    text: None,
                    features: vec![-1.0, 0.0],
                },
            ],
        )
        .unwrap();
        let b = s.to_bytes();
        assert_eq!(b.len(), 16 + (20 + 21 + 8) + (20 + 8));
        let back = QueryStore::from_bytes(&b, p()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn normalize_examples() {
        let s = VideoStore::new(
            2,
            vec![
                VideoRecord {
                    video_id: 0,
                    features: vec![3.0, 4.0],
                },
                VideoRecord {
                    video_id: 1,
                    features: vec![0.0, 1.0],
                },
            ],
        )
        .unwrap();
        let (n, report) = s.normalize(Degenerate::Reject).unwrap();
        assert!(n.is_normalized());
        assert!(report.replaced_ids.is_empty());
        assert_eq!(n.records()[0].features, vec![0.6, 0.8]);
        assert_eq!(n.records()[1].features, vec![0.0, 1.0]);
    }

    #[test]
    fn zero_vector_policy() {
        let s = VideoStore::new(
            3,
            vec![VideoRecord {
                video_id: 5,
                features: vec![0.0; 3],
            }],
        )
        .unwrap();
        assert!(matches!(
            s.clone().normalize(Degenerate::Reject),
            Err(Error::ZeroNorm(5))
        ));
        let (n, report) = s.normalize(Degenerate::ReplaceWithBasis).unwrap();
        assert_eq!(n.records()[0].features, vec![1.0, 0.0, 0.0]);
        assert_eq!(report.replaced_ids, vec![5]);
    }

    fn arb_store() -> impl Strategy<Value = VideoStore> {
        (
            1usize..6,
            prop::collection::vec(prop::collection::vec(-100f32..100f32, 6), 0..12),
        )
            .prop_map(|(dim, rows)| {
                let recs = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| VideoRecord {
                        video_id: (i as u64) * 31 + 2,
                        features: r[..dim].to_vec(),
                    })
                    .collect();
                VideoStore::new(dim, recs).unwrap()
            })
    }

    proptest! {
        #[test]
        fn save_load_save_is_identity(s in arb_store()) {
            let b = s.to_bytes();
            let back = VideoStore::from_bytes(&b, p()).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_bytes(), b);
        }

        #[test]
        fn normalize_is_idempotent(s in arb_store()) {
            let (once, _) = s.normalize(Degenerate::ReplaceWithBasis).unwrap();
            for r in once.records() {
                prop_assert!((linalg::norm_f32(&r.features) - 1.0).abs() < 1e-5);
            }
            let (twice, _) = once.clone().normalize(Degenerate::ReplaceWithBasis).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn length_mismatch_always_rejected(s in arb_store(), extra in 1usize..9) {
            let mut b = s.to_bytes();
            b.extend(std::iter::repeat_n(0u8, extra));
            prop_assert!(VideoStore::from_bytes(&b, p()).is_err());
            let b = s.to_bytes();
            if b.len() > HEADER_LEN {
                prop_assert!(VideoStore::from_bytes(&b[..b.len() - 1], p()).is_err());
            }
        }
    }
}
