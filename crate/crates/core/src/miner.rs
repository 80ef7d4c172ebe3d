//! Modality-aware hard negative mining.
//!
//! From the top-`top_n` list of a retriever, two negative classes are taken:
//! C1 holds wrong-modality candidates ranked above the labeled positive, C2
//! holds desired-modality candidates ranked strictly below `k_prime`. A
//! positive missing from the list counts as rank `top_n + 1`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{SearchHit, VectorIndex};
use crate::trainer::NegativeClass;
use crate::types::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinerConfig {
    pub top_n: usize,
    pub k_prime: usize,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            top_n: 50,
            k_prime: 45,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_prime < 1 || self.k_prime > self.top_n {
            return Err(Error::Config(format!(
                "need 1 <= k_prime <= top_n, got k_prime={} top_n={}",
                self.k_prime, self.top_n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedDoc {
    pub doc_id: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedNegatives {
    pub qid: String,
    pub c1: Vec<MinedDoc>,
    pub c2: Vec<MinedDoc>,
    pub positive_rank: Option<usize>,
}

impl MinedNegatives {
    pub fn c1_ids(&self) -> Vec<&str> {
        self.c1.iter().map(|d| d.doc_id.as_str()).collect()
    }

    pub fn c2_ids(&self) -> Vec<&str> {
        self.c2.iter().map(|d| d.doc_id.as_str()).collect()
    }
}

/// What the miner needs to know about one training query.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningQuery {
    pub qid: String,
    pub vector: Vec<f32>,
    pub desired: Modality,
    pub positive_id: String,
}

/// Apply both rules to an already ranked list (1-based ranks).
pub fn mine_from_ranking(
    qid: &str,
    ranked: &[SearchHit],
    desired: Modality,
    positive_id: &str,
    cfg: &MinerConfig,
) -> MinedNegatives {
    let head = &ranked[..ranked.len().min(cfg.top_n)];
    let positive_rank = head
        .iter()
        .find(|h| h.doc_id == positive_id)
        .map(|h| h.rank);
    let cutoff = positive_rank.unwrap_or(cfg.top_n + 1);
    let doc = |h: &SearchHit| MinedDoc {
        doc_id: h.doc_id.clone(),
        rank: h.rank,
    };
    let c1 = head
        .iter()
        .filter(|h| h.rank < cutoff && h.modality != desired)
        .map(doc)
        .collect();
    let c2 = head
        .iter()
        .filter(|h| h.rank > cfg.k_prime && h.modality == desired && h.doc_id != positive_id)
        .map(doc)
        .collect();
    MinedNegatives {
        qid: qid.to_string(),
        c1,
        c2,
        positive_rank,
    }
}

pub fn mine(query: &MiningQuery, index: &VectorIndex, cfg: &MinerConfig) -> Result<MinedNegatives> {
    cfg.validate()?;
    if index.is_empty() {
        return Err(Error::IndexEmpty);
    }
    let hits = index.search(&query.vector, cfg.top_n)?;
    Ok(mine_from_ranking(
        &query.qid,
        &hits,
        query.desired,
        &query.positive_id,
        cfg,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NegativeDraw {
    Negative {
        doc_id: String,
        class: NegativeClass,
    },
    /// Both classes empty; the example trains with in-batch negatives only.
    NoNegative,
}

/// Class with probability 1/2 when both are non-empty, then uniform within.
pub fn sample_negative(mined: &MinedNegatives, rng: &mut impl Rng) -> NegativeDraw {
    let class = match (mined.c1.is_empty(), mined.c2.is_empty()) {
        (true, true) => return NegativeDraw::NoNegative,
        (false, true) => NegativeClass::C1,
        (true, false) => NegativeClass::C2,
        (false, false) => {
            if rng.gen_bool(0.5) {
                NegativeClass::C1
            } else {
                NegativeClass::C2
            }
        }
    };
    let list = match class {
        NegativeClass::C1 => &mined.c1,
        NegativeClass::C2 => &mined.c2,
    };
    NegativeDraw::Negative {
        doc_id: list[rng.gen_range(0..list.len())].doc_id.clone(),
        class,
    }
}

/// Re-mine C2 with the newer retriever and keep C1 from the first one.
pub fn remine_continual(
    mined_rand: &MinedNegatives,
    query: &MiningQuery,
    index_hard: &VectorIndex,
    cfg: &MinerConfig,
) -> Result<MinedNegatives> {
    if mined_rand.qid != query.qid {
        return Err(Error::QidMismatch {
            left: mined_rand.qid.clone(),
            right: query.qid.clone(),
        });
    }
    let fresh = mine(query, index_hard, cfg)?;
    Ok(MinedNegatives {
        qid: fresh.qid,
        c1: mined_rand.c1.clone(),
        c2: fresh.c2,
        positive_rank: fresh.positive_rank,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MiningStats {
    pub queries: usize,
    pub mean_c1: f64,
    pub mean_c2: f64,
    pub positive_missing_frac: f64,
}

impl MiningStats {
    pub fn from_mined<'a>(mined: impl IntoIterator<Item = &'a MinedNegatives>) -> Self {
        let (mut n, mut c1, mut c2, mut missing) = (0usize, 0usize, 0usize, 0usize);
        for m in mined {
            n += 1;
            c1 += m.c1.len();
            c2 += m.c2.len();
            missing += usize::from(m.positive_rank.is_none());
        }
        let avg = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        MiningStats {
            queries: n,
            mean_c1: avg(c1),
            mean_c2: avg(c2),
            positive_missing_frac: avg(missing),
        }
    }
}

/// Mine every query; the map iterates in qid order.
pub fn mine_all(
    queries: &[MiningQuery],
    index: &VectorIndex,
    cfg: &MinerConfig,
) -> Result<(BTreeMap<String, MinedNegatives>, MiningStats)> {
    let mined: Vec<MinedNegatives> = queries
        .par_iter()
        .map(|q| mine(q, index, cfg).map_err(|e| e.context(format!("mining {}", q.qid))))
        .collect::<Result<_>>()?;
    let mut map = BTreeMap::new();
    for m in mined {
        if map.contains_key(&m.qid) {
            return Err(Error::DuplicateId(m.qid));
        }
        map.insert(m.qid.clone(), m);
    }
    let stats = MiningStats::from_mined(map.values());
    Ok((map, stats))
}

/// One persisted training triplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedTriplet {
    pub qid: String,
    pub positive_id: String,
    pub negative_id: String,
    pub negative_class: NegativeClass,
    pub rank_of_negative: usize,
}

pub fn write_triplets<W: Write>(mut w: W, triplets: &[MinedTriplet]) -> Result<()> {
    for t in triplets {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::parse("triplet", e))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_triplets<R: BufRead>(r: R) -> Result<Vec<MinedTriplet>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("triplets line {}", i + 1), e))?,
        );
    }
    Ok(out)
}

/// Rank of `doc_id` within the mined lists.
pub fn negative_rank(mined: &MinedNegatives, doc_id: &str) -> Option<usize> {
    mined
        .c1
        .iter()
        .chain(&mined.c2)
        .find(|d| d.doc_id == doc_id)
        .map(|d| d.rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hits(mods: &[Modality]) -> Vec<SearchHit> {
        mods.iter()
            .enumerate()
            .map(|(i, &m)| SearchHit {
                doc_id: format!("d{:02}", i + 1),
                score: 1.0 - i as f32 * 0.01,
                rank: i + 1,
                modality: m,
            })
            .collect()
    }

    #[test]
    fn positive_first_has_no_c1() {
        let mut mods = vec![Modality::Text; 50];
        mods[0] = Modality::Image;
        let m = mine_from_ranking(
            "q",
            &hits(&mods),
            Modality::Image,
            "d01",
            &MinerConfig::default(),
        );
        assert!(m.c1.is_empty());
        assert_eq!(m.positive_rank, Some(1));
    }

    #[test]
    fn homogeneous_head_gives_tail_c2() {
        let mods = vec![Modality::Image; 50];
        let m = mine_from_ranking(
            "q",
            &hits(&mods),
            Modality::Image,
            "d10",
            &MinerConfig::default(),
        );
        assert!(m.c1.is_empty());
        assert_eq!(m.c2_ids(), ["d46", "d47", "d48", "d49", "d50"]);
        let m = mine_from_ranking(
            "q",
            &hits(&mods),
            Modality::Image,
            "d47",
            &MinerConfig::default(),
        );
        assert_eq!(m.c2_ids(), ["d46", "d48", "d49", "d50"]);
    }

    #[test]
    fn missing_positive_takes_whole_wrong_modality_head() {
        let mods: Vec<_> = (0..50).map(|i| Modality::ALL[i % 3]).collect();
        let m = mine_from_ranking(
            "q",
            &hits(&mods),
            Modality::Text,
            "absent",
            &MinerConfig::default(),
        );
        assert_eq!(m.positive_rank, None);
        assert_eq!(m.c1.len(), 50 - 17);
        assert!(m.c1.windows(2).all(|w| w[0].rank < w[1].rank));
    }

    #[test]
    fn sample_negative_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let doc = |id: &str| MinedDoc {
            doc_id: id.into(),
            rank: 1,
        };
        let empty = MinedNegatives {
            qid: "q".into(),
            c1: vec![],
            c2: vec![],
            positive_rank: None,
        };
        assert_eq!(sample_negative(&empty, &mut rng), NegativeDraw::NoNegative);
        let only_c2 = MinedNegatives {
            c2: vec![doc("b"), doc("c")],
            ..empty.clone()
        };
        for _ in 0..100 {
            match sample_negative(&only_c2, &mut rng) {
                NegativeDraw::Negative { class, .. } => assert_eq!(class, NegativeClass::C2),
                NegativeDraw::NoNegative => panic!(),
            }
        }
        let both = MinedNegatives {
            c1: vec![doc("a")],
            c2: vec![doc("b")],
            ..empty
        };
        let n = 100_000;
        let a = (0..n)
            .filter(|_| {
                matches!(sample_negative(&both, &mut rng), NegativeDraw::Negative { doc_id, .. } if doc_id == "a")
            })
            .count();
        assert!((a as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn stats_match_entries() {
        let doc = |id: &str| MinedDoc {
            doc_id: id.into(),
            rank: 1,
        };
        let ms = [
            MinedNegatives {
                qid: "a".into(),
                c1: vec![doc("x"), doc("y")],
                c2: vec![],
                positive_rank: Some(3),
            },
            MinedNegatives {
                qid: "b".into(),
                c1: vec![],
                c2: vec![doc("z")],
                positive_rank: None,
            },
        ];
        let s = MiningStats::from_mined(&ms);
        assert_eq!(s.queries, 2);
        assert_eq!(s.mean_c1, 1.0);
        assert_eq!(s.mean_c2, 0.5);
        assert_eq!(s.positive_missing_frac, 0.5);
    }

    #[test]
    fn config_bounds() {
        assert!(MinerConfig {
            top_n: 50,
            k_prime: 0
        }
        .validate()
        .is_err());
        assert!(MinerConfig {
            top_n: 50,
            k_prime: 51
        }
        .validate()
        .is_err());
        MinerConfig::default().validate().unwrap();
    }

    #[test]
    fn triplets_round_trip() {
        let ts = vec![MinedTriplet {
            qid: "q1".into(),
            positive_id: "p".into(),
            negative_id: "n".into(),
            negative_class: NegativeClass::C1,
            rank_of_negative: 2,
        }];
        let mut buf = Vec::new();
        write_triplets(&mut buf, &ts).unwrap();
        assert_eq!(read_triplets(&buf[..]).unwrap(), ts);
    }
}
