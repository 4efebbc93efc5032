//! The complete set of learnable parameters and corpus tokenization.

use std::collections::BTreeMap;

use rand::Rng;

use crate::cotrainer::TrainConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feature_store::VideoStore;
use crate::linalg;
use crate::nn::Mlp;
use crate::retriever::RetrieverParams;
use crate::tokenizer::{self, Codebook, SemanticId};

/// View encoders and decoders, retriever, the single shared codebook, and τ.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoders: Vec<Mlp>,
    pub decoders: Vec<Mlp>,
    pub retriever: RetrieverParams,
    pub codebook: Codebook,
    pub tau: f64,
}

/// Coarse classification of parameter groups, used for freezing and decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Encoder,
    Decoder,
    Retriever,
    Codebook(usize),
    Temperature,
}

impl GroupKind {
    pub fn is_weight_decayed(self, name: &str) -> bool {
        matches!(self, GroupKind::Encoder | GroupKind::Decoder | GroupKind::Retriever)
            && !name.ends_with(".b1")
            && !name.ends_with(".b2")
    }
}

fn mlp_groups<'a>(prefix: &str, m: &'a Mlp, out: &mut Vec<(String, &'a [f64])>) {
    out.push((format!("{prefix}.w1"), &m.w1));
    out.push((format!("{prefix}.b1"), &m.b1));
    out.push((format!("{prefix}.w2"), &m.w2));
    out.push((format!("{prefix}.b2"), &m.b2));
}

fn mlp_groups_mut<'a>(prefix: &str, m: &'a mut Mlp, out: &mut Vec<(String, &'a mut [f64])>) {
    out.push((format!("{prefix}.w1"), &mut m.w1));
    out.push((format!("{prefix}.b1"), &mut m.b1));
    out.push((format!("{prefix}.w2"), &mut m.w2));
    out.push((format!("{prefix}.b2"), &mut m.b2));
}

impl Params {
    pub fn init<R: Rng>(config: &TrainConfig, feature_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (dz, dh) = (config.latent_dim, config.hidden_dim);
        let encoders = (0..config.num_views)
            .map(|_| Mlp::init(feature_dim, dh, dz, rng))
            .collect();
        let decoders = (0..config.num_views)
            .map(|_| Mlp::init(dz, dh, feature_dim, rng))
            .collect();
        let retriever = RetrieverParams::init(feature_dim, dz, dh, config.num_layers, rng);
        let codebook = Codebook::random(config.num_layers, config.codebook_size, dz, rng)?;
        Ok(Self {
            encoders,
            decoders,
            retriever,
            codebook,
            tau: config.tau_init as f32 as f64,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoders: self.encoders.iter().map(Mlp::zeros_like).collect(),
            decoders: self.decoders.iter().map(Mlp::zeros_like).collect(),
            retriever: self.retriever.zeros_like(),
            codebook: self.codebook.zeros_like(),
            tau: 0.0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.retriever.d_query
    }

    pub fn num_views(&self) -> usize {
        self.encoders.len()
    }

    /// Named parameter groups in their fixed serialization order.
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, e) in self.encoders.iter().enumerate() {
            mlp_groups(&format!("encoder.{i}"), e, &mut out);
        }
        for (i, d) in self.decoders.iter().enumerate() {
            mlp_groups(&format!("decoder.{i}"), d, &mut out);
        }
        out.push(("retriever.query_proj".into(), &self.retriever.query_proj));
        out.push(("retriever.pos".into(), &self.retriever.pos));
        mlp_groups("retriever.ffn", &self.retriever.ffn, &mut out);
        for m in 0..self.codebook.num_layers() {
            out.push((format!("codebook.{m}"), self.codebook.layer(m)));
        }
        out.push(("tau".into(), std::slice::from_ref(&self.tau)));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, e) in self.encoders.iter_mut().enumerate() {
            mlp_groups_mut(&format!("encoder.{i}"), e, &mut out);
        }
        for (i, d) in self.decoders.iter_mut().enumerate() {
            mlp_groups_mut(&format!("decoder.{i}"), d, &mut out);
        }
        out.push(("retriever.query_proj".into(), &mut self.retriever.query_proj));
        out.push(("retriever.pos".into(), &mut self.retriever.pos));
        mlp_groups_mut("retriever.ffn", &mut self.retriever.ffn, &mut out);
        for (m, layer) in self.codebook.layers_mut().iter_mut().enumerate() {
            out.push((format!("codebook.{m}"), layer.as_mut_slice()));
        }
        out.push(("tau".into(), std::slice::from_mut(&mut self.tau)));
        out
    }

    pub fn group_kind(name: &str) -> GroupKind {
        if name.starts_with("encoder.") {
            GroupKind::Encoder
        } else if name.starts_with("decoder.") {
            GroupKind::Decoder
        } else if name.starts_with("retriever.") {
            GroupKind::Retriever
        } else if let Some(m) = name.strip_prefix("codebook.") {
            GroupKind::Codebook(m.parse().expect("codebook group index"))
        } else {
            GroupKind::Temperature
        }
    }

    pub fn add_assign(&mut self, other: &Params) {
        let src = other.groups();
        for ((_, dst), (_, s)) in self.groups_mut().into_iter().zip(src) {
            linalg::add_assign(dst, s);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, g) in self.groups_mut() {
            g.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }

    /// Encodes one normalized video into its `N_v` semantic IDs.
    pub fn tokenize(&self, features: &[f64]) -> Result<Vec<SemanticId>> {
        tokenizer::encode_views(features, &self.encoders)?
            .iter()
            .map(|z| tokenizer::quantize(z, &self.codebook).map(|(id, _)| id))
            .collect()
    }
}

/// Semantic IDs for every video in a store, keyed by video id.
pub fn tokenize_corpus(videos: &VideoStore, params: &Params, exec: Exec) -> Result<BTreeMap<u64, Vec<SemanticId>>> {
    if videos.dimension() != params.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.feature_dim(),
            got: videos.dimension(),
        });
    }
    let ids = exec.map(videos.records(), |r| params.tokenize(&linalg::to_f64(&r.features)));
    videos
        .records()
        .iter()
        .zip(ids)
        .map(|(r, ids)| ids.map(|ids| (r.video_id, ids)))
        .collect()
}

/// Writes the `video_id<TAB>view_id<TAB>c1,...,cM` dump.
pub fn write_id_dump(ids: &BTreeMap<u64, Vec<SemanticId>>, out: &mut impl std::io::Write) -> std::io::Result<()> {
    for (vid, set) in ids {
        for (view, id) in set.iter().enumerate() {
            writeln!(out, "{vid}\t{view}\t{id}")?;
        }
    }
    Ok(())
}

/// Parses the dump written by [`write_id_dump`].
pub fn read_id_dump(text: &str) -> Result<BTreeMap<u64, Vec<SemanticId>>> {
    let mut out: BTreeMap<u64, Vec<SemanticId>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Malformed {
            what: "semantic-id dump",
            detail: format!("line {}: {line:?}", n + 1),
        };
        let mut parts = line.split('\t');
        let vid: u64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let view: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let id: SemanticId = parts.next().ok_or_else(bad)?.parse()?;
        let set = out.entry(vid).or_default();
        if set.len() != view {
            return Err(bad());
        }
        set.push(id);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::VideoRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(nv: usize) -> TrainConfig {
        TrainConfig {
            num_views: nv,
            num_layers: 3,
            codebook_size: 16,
            latent_dim: 8,
            hidden_dim: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn group_order_is_stable_and_complete() {
        let p = Params::init(&tiny(2), 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = p.groups().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "encoder.0.w1");
        assert_eq!(names.last().unwrap(), "tau");
        assert_eq!(names.len(), 8 + 8 + 2 + 4 + 3 + 1);
        let mut q = p.clone();
        let n_mut: Vec<String> = q.groups_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, n_mut);
    }

    #[test]
    fn tokenize_corpus_shapes() {
        let p = Params::init(&tiny(4), 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let recs = vec![
            VideoRecord {
                video_id: 3,
                features: vec![0.5; 6],
            },
            VideoRecord {
                video_id: 8,
                features: vec![0.5; 6],
            },
        ];
        let store = VideoStore::new(6, recs).unwrap();
        let ids = tokenize_corpus(&store, &p, Exec::Sequential).unwrap();
        assert_eq!(ids.len(), 2);
        assert!(ids.values().all(|s| s.len() == 4 && s.iter().all(|id| id.len() == 3)));
        // identical inputs, identical id sets
        assert_eq!(ids[&3], ids[&8]);
        assert_eq!(ids, tokenize_corpus(&store, &p, Exec::Parallel).unwrap());

        let mut buf = Vec::new();
        write_id_dump(&ids, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert_eq!(read_id_dump(&text).unwrap(), ids);

        let wrong = VideoStore::new(5, vec![]).unwrap();
        assert!(tokenize_corpus(&wrong, &p, Exec::Sequential).is_err());
    }
}
