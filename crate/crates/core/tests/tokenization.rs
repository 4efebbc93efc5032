//! Multi-view residual quantization and the query-side decoder.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use genvr::cotrainer::TrainConfig;
use genvr::feature_store::{VideoRecord, VideoStore};
use genvr::index::TrieIndex;
use genvr::linalg;
use genvr::model::{self, Params};
use genvr::retriever;
use genvr::tokenizer::{self, Codebook};
use genvr::Exec;

/// Per layer, the entry with the highest cosine to the running residual.
fn greedy_oracle(z: &[f64], cb: &Codebook) -> Vec<u16> {
    let mut residual = z.to_vec();
    let mut codes = Vec::new();
    for m in 0..cb.num_layers() {
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..cb.size() {
            let c = linalg::cosine(&residual, cb.entry(m, k));
            if c > best.1 {
                best = (k, c);
            }
        }
        for (r, e) in residual.iter_mut().zip(cb.entry(m, best.0)) {
            *r -= e;
        }
        codes.push(best.0 as u16);
    }
    codes
}

proptest! {
    #[test]
    fn quantization_is_greedy_per_layer(seed in any::<u64>(), z in prop::collection::vec(-2.0f64..2.0, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::random(2, 8, 4, &mut rng).unwrap();
        let (id, trace) = tokenizer::quantize(&z, &cb).unwrap();
        prop_assert_eq!(id.codes().to_vec(), greedy_oracle(&z, &cb));
        let sum: Vec<f64> = (0..4).map(|d| cb.entry(0, id.codes()[0] as usize)[d] + cb.entry(1, id.codes()[1] as usize)[d]).collect();
        prop_assert_eq!(trace.quantized, sum);
    }

    #[test]
    fn first_code_ignores_latent_scale(seed in any::<u64>(), z in prop::collection::vec(-2.0f64..2.0, 4), scale in 0.01f64..100.0) {
        prop_assume!(linalg::norm(&z) > 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::random(2, 8, 4, &mut rng).unwrap();
        let scaled: Vec<f64> = z.iter().map(|x| x * scale).collect();
        let a = tokenizer::quantize_depth(&z, &cb, 1).unwrap().codes;
        let b = tokenizer::quantize_depth(&scaled, &cb, 1).unwrap().codes;
        prop_assert_eq!(a, b);
    }
}

fn paper_params() -> Params {
    let cfg = TrainConfig {
        latent_dim: 16,
        hidden_dim: 32,
        ..TrainConfig::default()
    };
    assert_eq!((cfg.num_views, cfg.num_layers, cfg.codebook_size), (4, 3, 128));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Params::init(&cfg, 24, &mut rng).unwrap()
}

fn store(n: usize, dim: usize, seed: u64) -> VideoStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| VideoRecord {
            video_id: i as u64,
            features: (0..dim)
                .map(|_| rand::Rng::random_range(&mut rng, -1.0f32..1.0))
                .collect(),
        })
        .collect();
    VideoStore::new(dim, records).unwrap()
}

#[test]
fn default_shape_gives_four_ids_in_twelve_bytes() {
    let params = paper_params();
    let videos = store(50, 24, 1);
    let ids = model::tokenize_corpus(&videos, &params, Exec::default()).unwrap();
    assert!(ids
        .values()
        .all(|set| set.len() == 4 && set.iter().all(|s| s.len() == 3)));
    let trie = TrieIndex::build(&ids, 3, 128).unwrap();
    let report = trie.storage_report(24, 1);
    assert_eq!(report.id_payload_bytes, 12 * 50);
    assert_eq!(report.code_width, 1);
}

#[test]
fn identical_videos_get_identical_ids() {
    let params = paper_params();
    let base = store(1, 24, 2).records()[0].features.clone();
    let twins = VideoStore::new(
        24,
        vec![
            VideoRecord {
                video_id: 3,
                features: base.clone(),
            },
            VideoRecord {
                video_id: 9,
                features: base,
            },
        ],
    )
    .unwrap();
    let ids = model::tokenize_corpus(&twins, &params, Exec::Sequential).unwrap();
    assert_eq!(ids[&3], ids[&9]);
}

#[test]
fn parallel_tokenization_matches_sequential() {
    let params = paper_params();
    let videos = store(64, 24, 3);
    let a = model::tokenize_corpus(&videos, &params, Exec::Sequential).unwrap();
    let b = model::tokenize_corpus(&videos, &params, Exec::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn decoder_state_depends_on_the_prefix() {
    let params = paper_params();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q: Vec<f64> = (0..24).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let mut states = BTreeMap::new();
    for prefix in [vec![], vec![0u16], vec![1], vec![0, 5], vec![0, 6]] {
        let h = retriever::decode_step(&q, &prefix, &params.retriever, &params.codebook).unwrap();
        states.insert(prefix, h);
    }
    let hs: Vec<&Vec<f64>> = states.values().collect();
    for i in 0..hs.len() {
        for j in i + 1..hs.len() {
            assert_ne!(hs[i], hs[j]);
        }
    }
    let over = retriever::decode_step(&q, &[0, 1, 2], &params.retriever, &params.codebook);
    assert!(over.is_err());
}
