//! Exact search and negative mining against brute-force transcriptions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umr_core::miner::{mine, remine_continual, sample_negative, MinedDoc, NegativeDraw};
use umr_core::trainer::NegativeClass;
use umr_core::{EmbeddingRecord, MinerConfig, MiningQuery, Modality, VectorIndex};

const MODALITIES: [Modality; 3] = [Modality::Text, Modality::Image, Modality::ImageText];

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn random_records(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    prefix: &str,
) -> Vec<EmbeddingRecord> {
    (0..n)
        .map(|i| {
            let m = MODALITIES[rng.gen_range(0..3)];
            EmbeddingRecord::new(format!("{prefix}{i:05}"), m, unit(rng, dim)).unwrap()
        })
        .collect()
}

/// Score exactly as the index does: f64 accumulation, reported as f32.
fn score(q: &[f32], v: &[f32]) -> f32 {
    q.iter()
        .zip(v)
        .map(|(a, b)| f64::from(*a) * f64::from(*b))
        .sum::<f64>() as f32
}

fn full_sort<'a>(q: &[f32], recs: &'a [EmbeddingRecord]) -> Vec<(&'a EmbeddingRecord, f32)> {
    let mut all: Vec<_> = recs.iter().map(|r| (r, score(q, &r.vector))).collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
    all
}

#[test]
fn knn_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let recs = random_records(&mut rng, 10_000, 64, "d");
    let index = VectorIndex::build(&recs, "global").unwrap();
    for _ in 0..100 {
        let q = unit(&mut rng, 64);
        let got: Vec<String> = index
            .search(&q, 50)
            .unwrap()
            .into_iter()
            .map(|h| h.doc_id)
            .collect();
        let want: Vec<&str> = full_sort(&q, &recs)
            .iter()
            .take(50)
            .map(|(r, _)| r.id.as_str())
            .collect();
        assert_eq!(got, want);
    }
}

#[test]
fn merged_pool_equals_concatenated_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let parts: Vec<Vec<EmbeddingRecord>> = (0..3)
        .map(|p| random_records(&mut rng, 700, 32, &format!("p{p}-")))
        .collect();
    let merged = VectorIndex::merge(
        &parts
            .iter()
            .map(|p| VectorIndex::build(p, "part").unwrap())
            .collect::<Vec<_>>(),
        "global",
    )
    .unwrap();
    let concat = VectorIndex::build(&parts.concat(), "global").unwrap();
    for _ in 0..50 {
        let q = unit(&mut rng, 32);
        assert_eq!(
            merged.search(&q, 40).unwrap(),
            concat.search(&q, 40).unwrap()
        );
    }
}

#[test]
fn ties_break_by_id() {
    let v = vec![1.0f32, 0.0];
    let recs: Vec<EmbeddingRecord> = ["c", "a", "b"]
        .iter()
        .map(|id| EmbeddingRecord::new(*id, Modality::Text, v.clone()).unwrap())
        .collect();
    let ix = VectorIndex::build(&recs, "g").unwrap();
    let ids: Vec<String> = ix
        .search(&v, 3)
        .unwrap()
        .into_iter()
        .map(|h| h.doc_id)
        .collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

/// Literal transcription of the two mining rules over a full sort.
fn oracle_mine(
    q: &MiningQuery,
    recs: &[EmbeddingRecord],
    cfg: &MinerConfig,
) -> (Vec<MinedDoc>, Vec<MinedDoc>, Option<usize>) {
    let top: Vec<_> = full_sort(&q.vector, recs)
        .into_iter()
        .take(cfg.top_n)
        .collect();
    let pos_rank = top
        .iter()
        .position(|(r, _)| r.id == q.positive_id)
        .map(|i| i + 1);
    let bound = pos_rank.unwrap_or(cfg.top_n + 1);
    let mut c1 = Vec::new();
    let mut c2 = Vec::new();
    for (i, (r, _)) in top.iter().enumerate() {
        let rank = i + 1;
        if rank < bound && r.modality != q.desired {
            c1.push(MinedDoc {
                doc_id: r.id.clone(),
                rank,
            });
        }
        if rank > cfg.k_prime && r.modality == q.desired && r.id != q.positive_id {
            c2.push(MinedDoc {
                doc_id: r.id.clone(),
                rank,
            });
        }
    }
    (c1, c2, pos_rank)
}

fn random_query(
    rng: &mut ChaCha8Rng,
    recs: &[EmbeddingRecord],
    dim: usize,
    qid: &str,
) -> MiningQuery {
    let desired = MODALITIES[rng.gen_range(0..3)];
    let positive_id = if rng.gen_bool(0.1) {
        "absent".to_string()
    } else {
        recs.choose(rng).unwrap().id.clone()
    };
    MiningQuery {
        qid: qid.into(),
        vector: unit(rng, dim),
        desired,
        positive_id,
    }
}

#[test]
fn mine_matches_rule_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = MinerConfig::default();
    for t in 0..1000 {
        let recs = random_records(&mut rng, 200, 8, "d");
        let index = VectorIndex::build(&recs, "g").unwrap();
        let q = random_query(&mut rng, &recs, 8, &format!("q{t}"));
        let got = mine(&q, &index, &cfg).unwrap();
        let (c1, c2, pos_rank) = oracle_mine(&q, &recs, &cfg);
        assert_eq!(got.c1, c1, "trial {t}");
        assert_eq!(got.c2, c2, "trial {t}");
        assert_eq!(got.positive_rank, pos_rank, "trial {t}");
    }
}

#[test]
fn mine_with_small_cutoffs() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for t in 0..300 {
        let top_n = rng.gen_range(1..30);
        let cfg = MinerConfig {
            top_n,
            k_prime: rng.gen_range(1..=top_n),
        };
        let recs = random_records(&mut rng, 40, 4, "d");
        let index = VectorIndex::build(&recs, "g").unwrap();
        let q = random_query(&mut rng, &recs, 4, "q");
        let got = mine(&q, &index, &cfg).unwrap();
        let (c1, c2, _) = oracle_mine(&q, &recs, &cfg);
        assert_eq!((got.c1, got.c2), (c1, c2), "trial {t} cfg {cfg:?}");
    }
}

#[test]
fn negative_class_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let recs = random_records(&mut rng, 200, 8, "d");
    let index = VectorIndex::build(&recs, "g").unwrap();
    let cfg = MinerConfig::default();
    let mined = (0..)
        .map(|i| {
            mine(
                &random_query(&mut rng, &recs, 8, &format!("q{i}")),
                &index,
                &cfg,
            )
            .unwrap()
        })
        .find(|m| !m.c1.is_empty() && !m.c2.is_empty())
        .unwrap();
    let n = 100_000;
    let mut c1 = 0usize;
    for _ in 0..n {
        match sample_negative(&mined, &mut rng) {
            NegativeDraw::Negative {
                class: NegativeClass::C1,
                doc_id,
            } => {
                assert!(mined.c1.iter().any(|d| d.doc_id == doc_id));
                c1 += 1;
            }
            NegativeDraw::Negative {
                class: NegativeClass::C2,
                doc_id,
            } => {
                assert!(mined.c2.iter().any(|d| d.doc_id == doc_id));
            }
            NegativeDraw::NoNegative => panic!("both classes are non-empty"),
        }
    }
    let sigma = (0.25 / n as f64).sqrt();
    assert!((c1 as f64 / n as f64 - 0.5).abs() <= 3.0 * sigma);
}

#[test]
fn continual_keeps_rand_c1_and_remines_c2() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cfg = MinerConfig::default();
    for t in 0..50 {
        let recs_rand = random_records(&mut rng, 200, 8, "d");
        // Same ids and modalities, different vectors for the second model.
        let recs_hard: Vec<EmbeddingRecord> = recs_rand
            .iter()
            .map(|r| EmbeddingRecord::new(r.id.clone(), r.modality, unit(&mut rng, 8)).unwrap())
            .collect();
        let ix_rand = VectorIndex::build(&recs_rand, "g").unwrap();
        let ix_hard = VectorIndex::build(&recs_hard, "g").unwrap();
        let q = random_query(&mut rng, &recs_rand, 8, &format!("q{t}"));
        let from_rand = mine(&q, &ix_rand, &cfg).unwrap();
        let fresh = mine(&q, &ix_hard, &cfg).unwrap();
        let out = remine_continual(&from_rand, &q, &ix_hard, &cfg).unwrap();
        assert_eq!(
            serde_json::to_vec(&out.c1).unwrap(),
            serde_json::to_vec(&from_rand.c1).unwrap()
        );
        assert_eq!(out.c2, fresh.c2);
    }
}
