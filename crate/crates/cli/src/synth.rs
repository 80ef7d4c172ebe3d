//! Synthetic multimodal benchmark with controllable modality confounds.
//!
//! Every cluster owns a few core concept words; every document adds
//! concept words of its own. Text renders concepts as words, images render
//! them as a sum of per-concept feature directions plus a signature shared by
//! all images. A query mixes core concepts (shared with every document of the
//! cluster, whatever its modality) with concepts specific to its positive, so
//! the larger `modality_confound_strength`, the more a wrong-modality twin
//! looks like the answer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use umr_core::ingest::{save_corpus, save_qrels, save_queries, save_tasks, Query};
use umr_core::{Error, Item, MetricKind, Modality, Qrels, Result, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocsPerCluster {
    pub text: usize,
    pub image: usize,
    pub image_text: usize,
}

impl DocsPerCluster {
    pub fn total(&self) -> usize {
        self.text + self.image + self.image_text
    }

    fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Image => self.image,
            Modality::ImageText => self.image_text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_clusters: usize,
    pub docs_per_cluster: DocsPerCluster,
    /// Queries per task type, before the held-out split.
    pub n_queries: usize,
    pub modality_confound_strength: f64,
    pub heldout_frac: f64,
    pub image_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_clusters: 300,
            docs_per_cluster: DocsPerCluster {
                text: 2,
                image: 2,
                image_text: 2,
            },
            n_queries: 800,
            modality_confound_strength: 1.0,
            heldout_frac: 0.25,
            image_dim: 64,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let d = &self.docs_per_cluster;
        if self.n_clusters == 0
            || d.text == 0
            || d.image == 0
            || d.image_text == 0
            || self.n_queries == 0
        {
            return Err(Error::Config("synth counts must all be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.modality_confound_strength) {
            return Err(Error::Config(
                "modality_confound_strength must be in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.heldout_frac) {
            return Err(Error::Config("heldout_frac must be in [0, 1)".into()));
        }
        if self.image_dim < 8 {
            return Err(Error::Config("image_dim must be >= 8".into()));
        }
        Ok(())
    }
}

/// Task types numbered by (query modality, candidate modality).
pub const TASK_TYPES: [(u8, Modality, Modality, &str); 8] = [
    (
        1,
        Modality::Text,
        Modality::Image,
        "Retrieve a photo that matches this caption.",
    ),
    (
        2,
        Modality::Text,
        Modality::Text,
        "Retrieve a passage that answers this question.",
    ),
    (
        3,
        Modality::Text,
        Modality::ImageText,
        "Retrieve a captioned photo for this description.",
    ),
    (
        4,
        Modality::Image,
        Modality::Text,
        "Retrieve a passage describing this photo.",
    ),
    (
        5,
        Modality::Image,
        Modality::Image,
        "Retrieve a similar photo.",
    ),
    (
        6,
        Modality::ImageText,
        Modality::Text,
        "Retrieve a passage answering this question about the photo.",
    ),
    (
        7,
        Modality::ImageText,
        Modality::Image,
        "Retrieve a photo showing this photo with the described change.",
    ),
    (
        8,
        Modality::ImageText,
        Modality::ImageText,
        "Retrieve a captioned photo matching this photo and text.",
    ),
];

const CORE_WORDS: usize = 4;
const OWN_WORDS: usize = 1;
const QUERY_WORDS: usize = 4;
const FILLERS: [&str; 5] = ["the", "a", "of", "with", "and"];
const SIGNATURE_GAIN: f64 = 0.5;
const IMAGE_NOISE: f64 = 0.3;

/// The generated benchmark, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub corpus: Vec<Item>,
    pub train_queries: Vec<Query>,
    pub eval_queries: Vec<Query>,
    pub tasks: Vec<TaskSpec>,
    pub qrels: Qrels,
}

/// Distinct pronounceable pseudo-word for every index.
fn word(mut i: usize) -> String {
    const SYL: [&str; 20] = [
        "ka", "lo", "mi", "ne", "su", "ta", "ro", "vi", "pe", "zu", "da", "fo", "gi", "he", "ju",
        "ba", "co", "xe", "wy", "qo",
    ];
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(SYL[i % 20]);
        i /= 20;
    }
    while i > 0 {
        w.push_str(SYL[i % 20]);
        i /= 20;
    }
    w
}

struct Renderer {
    concept: BTreeMap<String, Vec<f64>>,
    signature: Vec<f64>,
    dim: usize,
}

impl Renderer {
    fn image(&self, words: &[String], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let scale = 1.0 / (words.len() as f64).sqrt();
        let mut v: Vec<f64> = self.signature.iter().map(|s| s * SIGNATURE_GAIN).collect();
        for w in words {
            for (x, c) in v.iter_mut().zip(&self.concept[w]) {
                *x += c * scale;
            }
        }
        for x in v.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *x += n * IMAGE_NOISE / (self.dim as f64).sqrt();
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn text(words: &[String], rng: &mut ChaCha8Rng) -> String {
        let mut toks: Vec<&str> = words.iter().map(String::as_str).collect();
        toks.extend(FILLERS.choose_multiple(rng, 2));
        toks.shuffle(rng);
        toks.join(" ")
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

type ClusterDocs = BTreeMap<Modality, Vec<(String, Vec<String>)>>;

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.docs_per_cluster;
    let n_words = spec.n_clusters * (CORE_WORDS + d.total() * OWN_WORDS);
    let mut vocab: Vec<String> = (0..n_words).map(word).collect();
    vocab.shuffle(&mut rng);
    let renderer = Renderer {
        concept: vocab
            .iter()
            .map(|w| (w.clone(), gaussian_unit(&mut rng, spec.image_dim)))
            .collect(),
        signature: gaussian_unit(&mut rng, spec.image_dim),
        dim: spec.image_dim,
    };
    let mut words = vocab.into_iter();
    let mut take = |n: usize| -> Vec<String> { words.by_ref().take(n).collect() };

    // cluster core words, modality -> [(doc id, own words)]
    let mut clusters: Vec<(Vec<String>, ClusterDocs)> = Vec::new();
    let mut corpus = Vec::new();
    for c in 0..spec.n_clusters {
        let core = take(CORE_WORDS);
        let mut by_mod = BTreeMap::new();
        for (m, tag) in [
            (Modality::Text, "txt"),
            (Modality::Image, "img"),
            (Modality::ImageText, "mm"),
        ] {
            let mut docs = Vec::new();
            for k in 0..d.get(m) {
                let id = format!("c{c:03}-{tag}{k}");
                let own = take(OWN_WORDS);
                let concepts: Vec<String> = core.iter().chain(&own).cloned().collect();
                let item = match m {
                    Modality::Text => Item::text(&id, &Renderer::text(&concepts, &mut rng)),
                    Modality::Image => Item::image(&id, renderer.image(&concepts, &mut rng)),
                    Modality::ImageText => {
                        let text = Renderer::text(&concepts, &mut rng);
                        Item::image_text(&id, &text, renderer.image(&concepts, &mut rng))
                    }
                };
                corpus.push(item);
                docs.push((id, own));
            }
            by_mod.insert(m, docs);
        }
        clusters.push((core, by_mod));
    }

    let n_core = (spec.modality_confound_strength * QUERY_WORDS as f64).round() as usize;
    let n_eval = (spec.n_queries as f64 * spec.heldout_frac).round() as usize;
    let mut tasks = Vec::new();
    let mut train_queries = Vec::new();
    let mut eval_queries = Vec::new();
    let mut qrels = Qrels::new();
    for &(t, qm, dm, instruction) in &TASK_TYPES {
        let task_id = t.to_string();
        tasks.push(TaskSpec {
            task_id: task_id.clone(),
            dataset_id: format!("synth{t}"),
            instruction: instruction.to_string(),
            desired_modality: dm,
            metric: MetricKind::RecallAt5,
        });
        for j in 0..spec.n_queries {
            let (core, by_mod) = &clusters[rng.gen_range(0..clusters.len())];
            let (pos_id, own) = by_mod[&dm].choose(&mut rng).expect("docs_per_cluster >= 1");
            let mut concepts: Vec<String> = core
                .choose_multiple(&mut rng, n_core.min(CORE_WORDS))
                .cloned()
                .collect();
            concepts.extend(
                own.choose_multiple(&mut rng, QUERY_WORDS - concepts.len())
                    .cloned(),
            );
            let qid = format!("q{t}-{j:04}");
            let item = match qm {
                Modality::Text => Item::text(&qid, &Renderer::text(&concepts, &mut rng)),
                Modality::Image => Item::image(&qid, renderer.image(&concepts, &mut rng)),
                Modality::ImageText => {
                    let text = Renderer::text(&concepts[..QUERY_WORDS / 2], &mut rng);
                    Item::image_text(&qid, &text, renderer.image(&concepts, &mut rng))
                }
            };
            qrels.insert(&qid, pos_id, 1);
            let q = Query {
                item,
                task_id: task_id.clone(),
                pos_ids: vec![pos_id.clone()],
            };
            if j >= spec.n_queries - n_eval {
                eval_queries.push(q);
            } else {
                train_queries.push(q);
            }
        }
    }
    Ok(SynthData {
        corpus,
        train_queries,
        eval_queries,
        tasks,
        qrels,
    })
}

/// Pipeline config tuned for the synthetic benchmark; paths are relative
/// to the directory the files are written to.
pub fn default_pipeline_config(spec: &SynthSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# generated by `umr synth`; paths relative to this file");
    for (k, v) in [
        ("paths.corpus", "corpus.jsonl".to_string()),
        ("paths.train_queries", "queries.train.jsonl".into()),
        ("paths.eval_queries", "queries.eval.jsonl".into()),
        ("paths.tasks", "tasks.jsonl".into()),
        ("paths.qrels", "qrels.txt".into()),
        ("paths.pools", "pools.tsv".into()),
        ("paths.workdir", "work".into()),
        ("seed", spec.seed.to_string()),
        ("featurizer.text_dim", "1024".into()),
        ("featurizer.image_dim", spec.image_dim.to_string()),
        ("encoder.dim", "128".into()),
        ("train.rand.lr", "0.003".into()),
        ("train.rand.epochs", "3".into()),
        ("train.hard.lr", "0.003".into()),
        ("train.hard.epochs", "3".into()),
        ("train.continual.lr", "0.003".into()),
    ] {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Write corpus, query splits, tasks, qrels, per-dataset pools, the generator
/// settings (`synth.json`) and a ready-to-run pipeline config into `dir`.
pub fn cmd_synth(spec: &SynthSpec, dir: &Path) -> Result<SynthData> {
    let data = generate(spec)?;
    std::fs::create_dir_all(dir)?;
    save_corpus(&dir.join("corpus.jsonl"), &data.corpus)?;
    save_queries(&dir.join("queries.train.jsonl"), &data.train_queries)?;
    save_queries(&dir.join("queries.eval.jsonl"), &data.eval_queries)?;
    save_tasks(&dir.join("tasks.jsonl"), &data.tasks)?;
    save_qrels(&dir.join("qrels.txt"), &data.qrels)?;
    let mut pools = String::new();
    for t in &data.tasks {
        for doc in &data.corpus {
            let _ = writeln!(pools, "{}\t{}", t.dataset_id, doc.id);
        }
    }
    std::fs::write(dir.join("pools.tsv"), pools)?;
    let spec_json =
        serde_json::to_string_pretty(spec).map_err(|e| Error::parse("synth spec", e))?;
    std::fs::write(dir.join("synth.json"), spec_json + "\n")?;
    std::fs::write(dir.join("pipeline.cfg"), default_pipeline_config(spec))?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SynthSpec {
        SynthSpec {
            n_clusters: 4,
            n_queries: 8,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn corpus_size_and_ids() {
        let s = small();
        let d = generate(&s).unwrap();
        assert_eq!(d.corpus.len(), 4 * s.docs_per_cluster.total());
        assert_eq!(d.train_queries.len() + d.eval_queries.len(), 8 * 8);
        assert_eq!(d.eval_queries.len(), 8 * 2);
        let ids: HashSet<&str> = d.corpus.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids.len(), d.corpus.len());
        for (qid, doc, _) in d.qrels.iter() {
            assert!(ids.contains(doc), "{qid} -> {doc}");
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthSpec { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn positives_have_desired_modality() {
        let d = generate(&small()).unwrap();
        let modality: BTreeMap<&str, Modality> = d
            .corpus
            .iter()
            .map(|i| (i.id.as_str(), i.modality))
            .collect();
        let tasks: BTreeMap<&str, &TaskSpec> =
            d.tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
        for q in d.train_queries.iter().chain(&d.eval_queries) {
            let t = tasks[q.task_id.as_str()];
            let (_, qm, _, _) = TASK_TYPES[t.task_id.parse::<usize>().unwrap() - 1];
            assert_eq!(q.item.modality, qm);
            assert_eq!(modality[q.pos_ids[0].as_str()], t.desired_modality);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SynthSpec {
            n_clusters: 0,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            modality_confound_strength: 1.5,
            ..small()
        })
        .is_err());
    }
}
