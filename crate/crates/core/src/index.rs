//! Prefix trie over corpus semantic IDs with posting lists at the leaves.
//!
//! Index file (little-endian):
//!
//! ```text
//! "GRDIX1", u8 M, u16 K, u32 video count
//! pre-order node stream, starting at the root:
//!   internal node: u16 child count, then per child (ascending code):
//!                  code (u8 when K <= 256, else u16), u32 subtree length, subtree
//!   leaf (depth M): u32 posting count, per posting: u64 video_id, u8 view_id
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tokenizer::SemanticId;

pub const MAGIC: &[u8; 6] = b"GRDIX1";

/// One `(video, view)` entry of a posting list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Posting {
    pub video_id: u64,
    pub view_id: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Node {
    /// Sorted by code.
    children: Vec<(u16, u32)>,
    /// Non-empty only at depth `M`; sorted and duplicate-free.
    postings: Vec<Posting>,
}

/// Immutable prefix trie. Every root-to-leaf path has length `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrieIndex {
    num_layers: usize,
    codebook_size: usize,
    video_count: usize,
    nodes: Vec<Node>,
}

impl TrieIndex {
    /// Builds the trie from every view's ID of every video.
    pub fn build(ids: &BTreeMap<u64, Vec<SemanticId>>, num_layers: usize, codebook_size: usize) -> Result<Self> {
        if num_layers == 0 || num_layers > 255 {
            return Err(Error::Config(format!("trie depth {num_layers} outside 1..=255")));
        }
        if codebook_size == 0 || codebook_size > 65535 {
            return Err(Error::Config(format!(
                "codebook size {codebook_size} outside 1..=65535"
            )));
        }
        let mut trie = Self {
            num_layers,
            codebook_size,
            video_count: 0,
            nodes: vec![Node::default()],
        };
        for (&video_id, set) in ids {
            if set.len() > 256 {
                return Err(Error::InvalidInput(format!(
                    "video {video_id} has {} views; at most 256",
                    set.len()
                )));
            }
            for (view, id) in set.iter().enumerate() {
                id.validate(num_layers, codebook_size)?;
                let mut node = 0usize;
                for &code in id.codes() {
                    node = trie.child_or_insert(node, code);
                }
                trie.nodes[node].postings.push(Posting {
                    video_id,
                    view_id: view as u8,
                });
            }
        }
        for n in &mut trie.nodes {
            n.postings.sort_unstable();
            n.postings.dedup();
        }
        trie.video_count = trie.count_videos();
        trie.renumber_pre_order();
        Ok(trie)
    }

    /// Lays the arena out in pre-order, the same order parsing produces.
    fn renumber_pre_order(&mut self) {
        let old = std::mem::take(&mut self.nodes);
        let mut stack = vec![(0u32, None::<(usize, usize)>)];
        while let Some((id, parent)) = stack.pop() {
            let new_id = self.nodes.len();
            if let Some((p, slot)) = parent {
                self.nodes[p].children[slot].1 = new_id as u32;
            }
            let node = &old[id as usize];
            self.nodes.push(node.clone());
            for (slot, &(_, child)) in node.children.iter().enumerate().rev() {
                stack.push((child, Some((new_id, slot))));
            }
        }
    }

    fn child_or_insert(&mut self, node: usize, code: u16) -> usize {
        match self.nodes[node].children.binary_search_by_key(&code, |c| c.0) {
            Ok(i) => self.nodes[node].children[i].1 as usize,
            Err(i) => {
                let id = self.nodes.len();
                self.nodes.push(Node::default());
                self.nodes[node].children.insert(i, (code, id as u32));
                id
            }
        }
    }

    fn count_videos(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.postings.iter().map(|p| p.video_id))
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn video_count(&self) -> usize {
        self.video_count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes[0].children.is_empty()
    }

    fn find(&self, prefix: &[u16]) -> Option<usize> {
        let mut node = 0usize;
        for &code in prefix {
            let n = &self.nodes[node];
            let i = n.children.binary_search_by_key(&code, |c| c.0).ok()?;
            node = n.children[i].1 as usize;
        }
        Some(node)
    }

    /// Codes that extend `prefix` to a longer valid path. Empty when the
    /// prefix is not in the trie or already has length `M`.
    pub fn allowed_next(&self, prefix: &[u16]) -> Vec<u16> {
        if prefix.len() >= self.num_layers {
            return Vec::new();
        }
        self.find(prefix)
            .map(|n| self.nodes[n].children.iter().map(|c| c.0).collect())
            .unwrap_or_default()
    }

    /// Postings of a full-length ID; empty when the ID was never inserted.
    pub fn resolve(&self, id: &[u16]) -> &[Posting] {
        if id.len() != self.num_layers {
            return &[];
        }
        self.find(id).map(|n| self.nodes[n].postings.as_slice()).unwrap_or(&[])
    }

    /// Every leaf as `(ID, postings)`, in lexicographic ID order.
    pub fn leaves(&self) -> Vec<(SemanticId, &[Posting])> {
        let mut out = Vec::new();
        let mut path = Vec::with_capacity(self.num_layers);
        self.collect_leaves(0, &mut path, &mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, node: usize, path: &mut Vec<u16>, out: &mut Vec<(SemanticId, &'a [Posting])>) {
        if path.len() == self.num_layers {
            out.push((SemanticId(path.clone()), &self.nodes[node].postings));
            return;
        }
        for &(code, child) in &self.nodes[node].children {
            path.push(code);
            self.collect_leaves(child as usize, path, out);
            path.pop();
        }
    }

    /// Largest view id in any posting, plus one.
    pub fn views_per_video(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.postings.iter().map(|p| p.view_id as usize + 1))
            .max()
            .unwrap_or(0)
    }

    /// Bytes per code in the serialized form.
    pub fn code_width(&self) -> usize {
        if self.codebook_size <= 256 {
            1
        } else {
            2
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(self.num_layers as u8);
        out.extend_from_slice(&(self.codebook_size as u16).to_le_bytes());
        out.extend_from_slice(&(self.video_count as u32).to_le_bytes());
        self.write_node(0, 0, &mut out);
        out
    }

    fn write_node(&self, node: usize, depth: usize, out: &mut Vec<u8>) {
        let n = &self.nodes[node];
        if depth == self.num_layers {
            out.extend_from_slice(&(n.postings.len() as u32).to_le_bytes());
            for p in &n.postings {
                out.extend_from_slice(&p.video_id.to_le_bytes());
                out.push(p.view_id);
            }
            return;
        }
        out.extend_from_slice(&(n.children.len() as u16).to_le_bytes());
        for &(code, child) in &n.children {
            if self.code_width() == 1 {
                out.push(code as u8);
            } else {
                out.extend_from_slice(&code.to_le_bytes());
            }
            let len_at = out.len();
            out.extend_from_slice(&[0; 4]);
            self.write_node(child as usize, depth + 1, out);
            let len = (out.len() - len_at - 4) as u32;
            out[len_at..len_at + 4].copy_from_slice(&len.to_le_bytes());
        }
    }

    /// Parses and fully validates an index file. `path` is only used in errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "GRDIX1",
            });
        }
        let mut r = Reader { bytes, pos: 6, path };
        let num_layers = r.take(1)?[0] as usize;
        let codebook_size = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let video_count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        if num_layers == 0 || codebook_size == 0 {
            return Err(malformed("zero trie depth or codebook size"));
        }
        let mut trie = Self {
            num_layers,
            codebook_size,
            video_count: 0,
            nodes: vec![Node::default()],
        };
        trie.read_node(0, 0, &mut r)?;
        if r.pos != bytes.len() {
            return Err(Error::TrailingBytes {
                path: path.to_path_buf(),
                count: bytes.len() - r.pos,
            });
        }
        trie.video_count = trie.count_videos();
        if trie.video_count != video_count {
            return Err(malformed(format!(
                "header says {video_count} videos, postings name {}",
                trie.video_count
            )));
        }
        Ok(trie)
    }

    fn read_node(&mut self, node: usize, depth: usize, r: &mut Reader<'_>) -> Result<()> {
        if depth == self.num_layers {
            let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            if count == 0 {
                return Err(malformed("empty posting list"));
            }
            let raw = r.take(
                count
                    .checked_mul(9)
                    .ok_or_else(|| malformed("posting count overflow"))?,
            )?;
            let postings: Vec<Posting> = raw
                .chunks_exact(9)
                .map(|c| Posting {
                    video_id: u64::from_le_bytes(c[..8].try_into().unwrap()),
                    view_id: c[8],
                })
                .collect();
            if postings.windows(2).any(|w| w[0] >= w[1]) {
                return Err(malformed("posting list not strictly increasing"));
            }
            self.nodes[node].postings = postings;
            return Ok(());
        }
        let count = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        if count == 0 && depth > 0 {
            return Err(malformed("internal node without children"));
        }
        let mut last: Option<u16> = None;
        for _ in 0..count {
            let code = if self.code_width() == 1 {
                r.take(1)?[0] as u16
            } else {
                u16::from_le_bytes(r.take(2)?.try_into().unwrap())
            };
            if code as usize >= self.codebook_size || last.is_some_and(|l| l >= code) {
                return Err(malformed(format!("child code {code} out of range or order")));
            }
            last = Some(code);
            let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let start = r.pos;
            let child = self.nodes.len();
            self.nodes.push(Node::default());
            self.nodes[node].children.push((code, child as u32));
            self.read_node(child, depth + 1, r)?;
            if r.pos - start != len {
                return Err(malformed(format!("subtree length {len} != {}", r.pos - start)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Compares index size with dense video- and frame-level embeddings.
    pub fn storage_report(&self, feature_dim: usize, frames_per_video: usize) -> StorageReport {
        let n = self.video_count;
        let views = self.views_per_video();
        let index_bytes = self.to_bytes().len();
        let id_payload_bytes = n * views * self.num_layers * self.code_width();
        let dense_video_bytes = n * feature_dim * 4;
        let dense_frame_bytes = dense_video_bytes * frames_per_video;
        let ratio = |num: usize, den: usize| (num > 0 && den > 0).then(|| round_sig(num as f64 / den as f64, 3));
        StorageReport {
            video_count: n,
            views_per_video: views,
            num_layers: self.num_layers,
            code_width: self.code_width(),
            feature_dim,
            frames_per_video,
            index_bytes,
            id_payload_bytes,
            dense_video_bytes,
            dense_frame_bytes,
            video_to_payload_ratio: ratio(dense_video_bytes, id_payload_bytes),
            video_to_index_ratio: ratio(dense_video_bytes, index_bytes),
            frame_to_index_ratio: ratio(dense_frame_bytes, index_bytes),
        }
    }
}

/// Byte accounting of an index against dense embeddings. Ratios are rounded
/// to three significant figures and absent for an empty corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageReport {
    pub video_count: usize,
    pub views_per_video: usize,
    pub num_layers: usize,
    pub code_width: usize,
    pub feature_dim: usize,
    pub frames_per_video: usize,
    /// Full serialized index: header, trie structure and postings.
    pub index_bytes: usize,
    /// Semantic-ID codes alone: `videos × views × M × code width`.
    pub id_payload_bytes: usize,
    /// `videos × d_f × 4`.
    pub dense_video_bytes: usize,
    pub dense_frame_bytes: usize,
    pub video_to_payload_ratio: Option<f64>,
    pub video_to_index_ratio: Option<f64>,
    pub frame_to_index_ratio: Option<f64>,
}

/// Rounds to `digits` significant figures.
pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{n} bytes needed at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Malformed {
        what: "index",
        detail: detail.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(entries: &[(u64, &[&[u16]])]) -> BTreeMap<u64, Vec<SemanticId>> {
        entries
            .iter()
            .map(|(v, set)| (*v, set.iter().map(|c| SemanticId(c.to_vec())).collect()))
            .collect()
    }

    #[test]
    fn minimal_trie() {
        let t = TrieIndex::build(&ids(&[(7, &[&[1, 2, 3]])]), 3, 8).unwrap();
        assert_eq!(t.node_count(), 4);
        let leaves = t.leaves();
        assert_eq!(leaves.len(), 1);
        assert_eq!(
            leaves[0].1,
            &[Posting {
                video_id: 7,
                view_id: 0
            }]
        );
    }

    #[test]
    fn collisions_merge() {
        let t = TrieIndex::build(&ids(&[(2, &[&[0, 1]]), (1, &[&[0, 1]])]), 2, 4).unwrap();
        assert_eq!(t.leaves().len(), 1);
        let p: Vec<u64> = t.resolve(&[0, 1]).iter().map(|p| p.video_id).collect();
        assert_eq!(p, vec![1, 2]);
        assert_eq!(t.video_count(), 2);
    }

    #[test]
    fn duplicate_views_keep_one_posting_each() {
        let t = TrieIndex::build(&ids(&[(5, &[&[3, 3], &[3, 3]])]), 2, 4).unwrap();
        assert_eq!(
            t.resolve(&[3, 3]),
            &[
                Posting {
                    video_id: 5,
                    view_id: 0
                },
                Posting {
                    video_id: 5,
                    view_id: 1
                }
            ]
        );
    }

    #[test]
    fn allowed_next_boundaries() {
        let t = TrieIndex::build(&ids(&[(1, &[&[0, 1], &[2, 3]])]), 2, 4).unwrap();
        assert_eq!(t.allowed_next(&[]), vec![0, 2]);
        assert_eq!(t.allowed_next(&[2]), vec![3]);
        assert!(t.allowed_next(&[1]).is_empty());
        assert!(t.allowed_next(&[0, 1]).is_empty());
        assert!(t.resolve(&[0, 3]).is_empty());
        assert!(t.resolve(&[0]).is_empty());
    }

    #[test]
    fn malformed_ids_are_rejected() {
        assert!(TrieIndex::build(&ids(&[(1, &[&[0, 1]])]), 3, 4).is_err());
        assert!(TrieIndex::build(&ids(&[(1, &[&[0, 9]])]), 2, 4).is_err());
    }

    #[test]
    fn wide_codes_round_trip() {
        let t = TrieIndex::build(&ids(&[(1, &[&[300, 2]]), (9, &[&[0, 511]])]), 2, 512).unwrap();
        assert_eq!(t.code_width(), 2);
        let bytes = t.to_bytes();
        let back = TrieIndex::from_bytes(&bytes, Path::new("i")).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn empty_storage_report_has_no_ratio() {
        let t = TrieIndex::build(&BTreeMap::new(), 3, 128).unwrap();
        let r = t.storage_report(512, 32);
        assert_eq!(r.dense_video_bytes, 0);
        assert_eq!(r.video_to_payload_ratio, None);
        assert_eq!(r.video_to_index_ratio, None);
        let back = TrieIndex::from_bytes(&t.to_bytes(), Path::new("e")).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn significant_figures() {
        assert_eq!(round_sig(170.6666, 3), 171.0);
        assert_eq!(round_sig(0.012345, 3), 0.0123);
        assert_eq!(round_sig(42.04, 3), 42.0);
    }
}
