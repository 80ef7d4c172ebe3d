//! Stage functions and the end-to-end train → mine → retrain → continual →
//! retrieve → rerank → eval pipeline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umr_core::encoder::{encode_query, to_f32_unit, EncodeOptions};
use umr_core::featurizer::load_or_featurize;
use umr_core::ingest::{
    load_corpus, load_qrels, load_queries, load_tasks, read_jsonl, write_jsonl, Query,
};
use umr_core::metrics::{read_trec_run, write_trec_run, EvalQuery, Run};
use umr_core::miner::{
    mine_all, remine_continual, sample_negative, MinedTriplet, MiningStats, NegativeDraw,
};
use umr_core::reranker::{
    HttpScorer, MockScorer, RerankContext, ScoreCache, Scorer, ScorerSpec, TemplateRegistry,
};
use umr_core::trainer::{write_loss_trace, TrainOutcome};
use umr_core::{
    encode_corpus, evaluate_run, rerank, train, train_continual, EmbeddingRecord, Error,
    FeaturizerConfig, FusionParams, Item, MinedNegatives, MiningQuery, Modality, Qrels, Result,
    RunReport, Stage, TaskSpec, TrainConfig, TrainExample, VectorIndex,
};

use crate::config::{PipelineConfig, PoolMode};

/// Everything loaded and validated from the configured paths.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Corpus with image references resolved to features.
    pub corpus: Vec<Item>,
    pub train: Vec<Query>,
    pub eval: Vec<Query>,
    pub tasks: BTreeMap<String, TaskSpec>,
    pub qrels: Qrels,
    /// dataset_id -> doc ids, for per-dataset pools.
    pub pools: Option<BTreeMap<String, BTreeSet<String>>>,
}

impl Dataset {
    pub fn corpus_map(&self) -> HashMap<String, Item> {
        self.corpus
            .iter()
            .map(|i| (i.id.clone(), i.clone()))
            .collect()
    }

    pub fn modality_of(&self) -> HashMap<String, Modality> {
        self.corpus
            .iter()
            .map(|i| (i.id.clone(), i.modality))
            .collect()
    }
}

fn stage_err(stage: &str, path: &Path) -> impl Fn(Error) -> Error {
    let label = format!("stage {stage} ({})", path.display());
    move |e| e.context(label.clone())
}

pub fn read_pools(path: &Path) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let text = std::fs::read_to_string(path)?;
    let mut pools: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (ds, doc) = line.split_once('\t').ok_or_else(|| {
            Error::parse(
                format!("pools line {}", i + 1),
                "expected dataset_id<TAB>doc_id",
            )
        })?;
        pools
            .entry(ds.to_string())
            .or_default()
            .insert(doc.to_string());
    }
    Ok(pools)
}

fn resolve_queries(
    queries: Vec<Query>,
    fcfg: &FeaturizerConfig,
    base: &Path,
) -> Result<Vec<Query>> {
    queries
        .into_iter()
        .map(|mut q| {
            q.item = load_or_featurize(&q.item, fcfg, base)?;
            Ok(q)
        })
        .collect()
}

/// Load and cross-check every input. Image references are featurized here.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let p = &cfg.paths;
    let fcfg = cfg.featurizer();
    let base = p
        .image_root
        .clone()
        .unwrap_or_else(|| p.corpus.parent().map(Path::to_path_buf).unwrap_or_default());
    let corpus = load_corpus(&p.corpus)
        .and_then(|c| {
            c.iter()
                .map(|i| load_or_featurize(i, &fcfg, &base))
                .collect::<Result<Vec<_>>>()
        })
        .map_err(stage_err("featurize", &p.corpus))?;
    let train = load_queries(&p.train_queries)
        .and_then(|q| resolve_queries(q, &fcfg, &base))
        .map_err(stage_err("featurize", &p.train_queries))?;
    let eval = load_queries(&p.eval_queries)
        .and_then(|q| resolve_queries(q, &fcfg, &base))
        .map_err(stage_err("featurize", &p.eval_queries))?;
    let tasks: BTreeMap<String, TaskSpec> = load_tasks(&p.tasks)
        .map_err(stage_err("load", &p.tasks))?
        .into_iter()
        .map(|t| (t.task_id.clone(), t))
        .collect();
    let qrels = load_qrels(&p.qrels).map_err(stage_err("load", &p.qrels))?;
    let pools = p.pools.as_deref().map(read_pools).transpose()?;

    let ids: BTreeSet<&str> = corpus.iter().map(|i| i.id.as_str()).collect();
    for q in train.iter().chain(&eval) {
        if !tasks.contains_key(&q.task_id) {
            return Err(Error::parse(
                format!("query {}", q.qid()),
                format!("unknown task {}", q.task_id),
            ));
        }
        if let Some(pos) = q.pos_ids.iter().find(|d| !ids.contains(d.as_str())) {
            return Err(Error::parse(
                format!("query {}", q.qid()),
                format!("positive {pos} not in corpus"),
            ));
        }
    }
    let id_set: std::collections::HashSet<&str> = ids.iter().copied().collect();
    qrels
        .validate(&id_set)
        .map_err(stage_err("load", &p.qrels))?;
    Ok(Dataset {
        corpus,
        train,
        eval,
        tasks,
        qrels,
        pools,
    })
}

/// A training example with the key it is mined under.
#[derive(Debug, Clone)]
pub struct KeyedExample {
    pub key: String,
    pub desired: Modality,
    pub example: TrainExample,
}

/// One example per (query, positive). The key is the qid for the first
/// positive and `qid#j` for later ones.
pub fn train_examples(ds: &Dataset) -> Vec<KeyedExample> {
    let corpus = ds.corpus_map();
    let mut out = Vec::new();
    for q in &ds.train {
        let task = &ds.tasks[&q.task_id];
        for (j, pos) in q.pos_ids.iter().enumerate() {
            let key = if j == 0 {
                q.qid().to_string()
            } else {
                format!("{}#{j}", q.qid())
            };
            out.push(KeyedExample {
                key,
                desired: task.desired_modality,
                example: TrainExample {
                    task_id: q.task_id.clone(),
                    instruction: task.instruction.clone(),
                    query: q.item.clone(),
                    positive: corpus[pos].clone(),
                    negative: None,
                    negative_class: None,
                },
            });
        }
    }
    out
}

pub fn embed_corpus(
    ds: &Dataset,
    params: &FusionParams,
    fcfg: &FeaturizerConfig,
) -> Result<Vec<EmbeddingRecord>> {
    encode_corpus(&ds.corpus, params, fcfg)
}

pub fn mining_queries(
    examples: &[KeyedExample],
    params: &FusionParams,
    fcfg: &FeaturizerConfig,
    opts: EncodeOptions,
) -> Result<Vec<MiningQuery>> {
    examples
        .iter()
        .map(|k| {
            let v = encode_query(&k.example.instruction, &k.example.query, params, fcfg, opts)?;
            Ok(MiningQuery {
                qid: k.key.clone(),
                vector: to_f32_unit(&v),
                desired: k.desired,
                positive_id: k.example.positive.id.clone(),
            })
        })
        .collect()
}

/// Draw one negative per example; examples whose mined sets are both empty
/// keep in-batch negatives only.
pub fn attach_negatives(
    examples: &[KeyedExample],
    mined: &BTreeMap<String, MinedNegatives>,
    corpus: &HashMap<String, Item>,
    seed: u64,
) -> (Vec<TrainExample>, Vec<MinedTriplet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(examples.len());
    let mut triplets = Vec::new();
    for k in examples {
        let mut ex = k.example.clone();
        if let Some(m) = mined.get(&k.key) {
            if let NegativeDraw::Negative { doc_id, class } = sample_negative(m, &mut rng) {
                triplets.push(MinedTriplet {
                    qid: k.key.clone(),
                    positive_id: ex.positive.id.clone(),
                    negative_id: doc_id.clone(),
                    negative_class: class,
                    rank_of_negative: umr_core::miner::negative_rank(m, &doc_id).unwrap_or(0),
                });
                ex.negative = Some(corpus[&doc_id].clone());
                ex.negative_class = Some(class);
            }
        }
        out.push(ex);
    }
    (out, triplets)
}

/// Rebuild training examples from a persisted triplet file.
pub fn examples_from_triplets(
    examples: &[KeyedExample],
    triplets: &[MinedTriplet],
    corpus: &HashMap<String, Item>,
) -> Result<Vec<TrainExample>> {
    let by_key: HashMap<&str, &MinedTriplet> =
        triplets.iter().map(|t| (t.qid.as_str(), t)).collect();
    examples
        .iter()
        .map(|k| {
            let mut ex = k.example.clone();
            if let Some(t) = by_key.get(k.key.as_str()) {
                let neg = corpus.get(&t.negative_id).ok_or_else(|| {
                    Error::parse(
                        format!("triplet {}", t.qid),
                        format!("unknown doc {}", t.negative_id),
                    )
                })?;
                ex.negative = Some(neg.clone());
                ex.negative_class = Some(t.negative_class);
            }
            Ok(ex)
        })
        .collect()
}

/// Continual sources: text-to-text examples form source B, the rest A.
pub fn split_continual(examples: Vec<TrainExample>) -> (Vec<TrainExample>, Vec<TrainExample>) {
    examples.into_iter().partition(|e| {
        !(e.query.modality == Modality::Text && e.positive.modality == Modality::Text)
    })
}

/// Indexes to search, keyed by dataset (`None` = the global pool).
pub fn build_indexes(
    ds: &Dataset,
    records: &[EmbeddingRecord],
    mode: PoolMode,
) -> Result<BTreeMap<Option<String>, VectorIndex>> {
    let mut out = BTreeMap::new();
    match mode {
        PoolMode::Global => {
            out.insert(None, VectorIndex::build(records, "global")?);
        }
        PoolMode::PerDataset => {
            let pools = ds
                .pools
                .as_ref()
                .ok_or_else(|| Error::Config("per-dataset pools not loaded".into()))?;
            for (ds_id, ids) in pools {
                let subset: Vec<EmbeddingRecord> = records
                    .iter()
                    .filter(|r| ids.contains(&r.id))
                    .cloned()
                    .collect();
                out.insert(Some(ds_id.clone()), VectorIndex::build(&subset, ds_id)?);
            }
        }
    }
    Ok(out)
}

pub fn retrieve(
    ds: &Dataset,
    queries: &[Query],
    indexes: &BTreeMap<Option<String>, VectorIndex>,
    params: &FusionParams,
    fcfg: &FeaturizerConfig,
    opts: EncodeOptions,
    k: usize,
) -> Result<Run> {
    let mut run = Run::new();
    for q in queries {
        let task = &ds.tasks[&q.task_id];
        let index = match indexes.get(&None) {
            Some(ix) => ix,
            None => indexes.get(&Some(task.dataset_id.clone())).ok_or_else(|| {
                Error::Config(format!(
                    "no pool for dataset {} (query {})",
                    task.dataset_id,
                    q.qid()
                ))
            })?,
        };
        let v = encode_query(&task.instruction, &q.item, params, fcfg, opts)
            .map_err(|e| e.context(format!("query {}", q.qid())))?;
        run.insert(q.qid().to_string(), index.search(&to_f32_unit(&v), k)?);
    }
    Ok(run)
}

pub fn make_scorer(cfg: &PipelineConfig, qrels: &Qrels) -> Box<dyn Scorer> {
    match &cfg.rerank.scorer {
        ScorerSpec::Mock => Box::new(MockScorer {
            qrels: qrels.clone(),
        }),
        ScorerSpec::Http { url, timeout_ms } => Box::new(HttpScorer {
            url: url.clone(),
            timeout: std::time::Duration::from_millis(*timeout_ms),
        }),
    }
}

pub fn template_registry(cfg: &PipelineConfig) -> Result<TemplateRegistry> {
    match &cfg.paths.templates {
        Some(p) => TemplateRegistry::with_user_templates(TemplateRegistry::load_jsonl(p)?),
        None => Ok(TemplateRegistry::default()),
    }
}

pub fn rerank_run(
    ds: &Dataset,
    queries: &[Query],
    run: &Run,
    cfg: &PipelineConfig,
    cache: &ScoreCache,
) -> Result<Run> {
    let templates = template_registry(cfg)?;
    let scorer = make_scorer(cfg, &ds.qrels);
    let candidates = ds.corpus_map();
    let ctx = RerankContext {
        templates: &templates,
        scorer: scorer.as_ref(),
        cache,
        candidates: &candidates,
        config: &cfg.rerank,
    };
    let mut out = Run::new();
    for q in queries {
        let Some(hits) = run.get(q.qid()) else {
            continue;
        };
        let dataset = ds.tasks.get(&q.task_id).map(|t| t.dataset_id.as_str());
        out.insert(q.qid().to_string(), rerank(&q.item, dataset, hits, &ctx)?);
    }
    Ok(out)
}

pub fn eval_queries(queries: &[Query]) -> Vec<EvalQuery> {
    queries
        .iter()
        .map(|q| EvalQuery {
            qid: q.qid().to_string(),
            task_id: q.task_id.clone(),
            modality: q.item.modality,
        })
        .collect()
}

pub fn evaluate(ds: &Dataset, run: &Run, cfg: &PipelineConfig, tag: &str) -> Result<RunReport> {
    evaluate_run(
        run,
        &eval_queries(&ds.eval),
        &ds.tasks,
        &ds.qrels,
        cfg.recall,
        tag,
        cfg.pool.as_str(),
    )
}

pub fn save_run(path: &Path, run: &Run, tag: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trec_run(&mut w, run, tag)?;
    w.flush()?;
    Ok(())
}

pub fn load_run(path: &Path, modality: &HashMap<String, Modality>) -> Result<Run> {
    let f = File::open(path).map_err(|_| Error::FileNotFound(path.to_path_buf()))?;
    read_trec_run(BufReader::new(f), |id| modality.get(id).copied())
}

pub fn save_report(path: &Path, report: &RunReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn save_loss(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_loss_trace(&mut w, &outcome.trace)?;
    w.flush()?;
    Ok(())
}

fn save_store(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let mut w = BufWriter::new(File::create(path)?);
    umr_core::index::write_store(&mut w, dim, records.iter().cloned())?;
    w.flush()?;
    Ok(())
}

fn save_mined(
    path: &Path,
    mined: &BTreeMap<String, MinedNegatives>,
    stats: &MiningStats,
) -> Result<()> {
    let rows: Vec<&MinedNegatives> = mined.values().collect();
    write_jsonl(File::create(path)?, &rows)?;
    let stats = serde_json::to_string_pretty(stats).map_err(|e| Error::parse("mining stats", e))?;
    std::fs::write(path.with_extension("stats.json"), stats + "\n")?;
    Ok(())
}

pub fn load_mined(path: &Path) -> Result<BTreeMap<String, MinedNegatives>> {
    let rows: Vec<MinedNegatives> = read_jsonl(File::open(path)?, &path.display().to_string())?;
    Ok(rows.into_iter().map(|m| (m.qid.clone(), m)).collect())
}

pub fn save_triplets(path: &Path, triplets: &[MinedTriplet]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    umr_core::miner::write_triplets(&mut w, triplets)?;
    w.flush()?;
    Ok(())
}

pub fn load_triplets(path: &Path) -> Result<Vec<MinedTriplet>> {
    let f = File::open(path).map_err(|_| Error::FileNotFound(path.to_path_buf()))?;
    umr_core::miner::read_triplets(BufReader::new(f))
}

/// What a pipeline run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// Report per run tag, in execution order.
    pub reports: Vec<RunReport>,
    pub artifacts: Vec<PathBuf>,
}

impl PipelineOutcome {
    pub fn report(&self, tag: &str) -> Option<&RunReport> {
        self.reports.iter().find(|r| r.run_tag == tag)
    }
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }
}

fn opts(c: &TrainConfig) -> EncodeOptions {
    EncodeOptions {
        include_instruction: c.include_instruction,
    }
}

/// Run every stage in order, persisting intermediates under the workdir.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let fcfg = cfg.featurizer();
    let [rand_cfg, hard_cfg, cont_cfg] = cfg.stage_configs();
    std::fs::create_dir_all(&cfg.paths.workdir)?;
    let mut art = Artifacts {
        dir: cfg.paths.workdir.clone(),
        written: Vec::new(),
    };
    std::fs::write(art.path("config.resolved.cfg"), cfg.to_kv())?;

    log::info!("featurize");
    let ds = load_dataset(cfg)?;
    let p = art.path("corpus.featurized.jsonl");
    umr_core::ingest::save_corpus(&p, &ds.corpus).map_err(stage_err("featurize", &p))?;
    let corpus = ds.corpus_map();
    let examples = train_examples(&ds);

    let init = FusionParams::for_featurizer(cfg.embed_dim, &fcfg);
    let p = art.path("params.init.umrp");
    init.save(&p).map_err(stage_err("init", &p))?;

    log::info!("train rand ({} examples)", examples.len());
    let plain: Vec<TrainExample> = examples.iter().map(|k| k.example.clone()).collect();
    let p = art.path("params.rand.umrp");
    let m_rand =
        train(&plain, &init, &fcfg, &rand_cfg, Stage::Rand).map_err(stage_err("train-rand", &p))?;
    m_rand.params.save(&p)?;
    save_loss(&art.path("loss.rand.csv"), &m_rand)?;

    log::info!("embed + index rand");
    let p = art.path("embeddings.rand.umre");
    let rec_rand = embed_corpus(&ds, &m_rand.params, &fcfg).map_err(stage_err("embed-rand", &p))?;
    save_store(&p, &rec_rand)?;
    let ix_rand = VectorIndex::build(&rec_rand, "global")?;

    log::info!("mine");
    let p = art.path("mined.rand.jsonl");
    let mq_rand = mining_queries(&examples, &m_rand.params, &fcfg, opts(&rand_cfg))
        .map_err(stage_err("mine", &p))?;
    let (mined_rand, stats) =
        mine_all(&mq_rand, &ix_rand, &cfg.miner).map_err(stage_err("mine", &p))?;
    save_mined(&p, &mined_rand, &stats)?;
    log::info!("mining: {stats:?}");
    let (hard_examples, triplets) =
        attach_negatives(&examples, &mined_rand, &corpus, hard_cfg.seed);
    save_triplets(&art.path("triplets.hard.jsonl"), &triplets)?;

    log::info!("train hard ({} with negatives)", triplets.len());
    let p = art.path("params.hard.umrp");
    let m_hard = train(&hard_examples, &init, &fcfg, &hard_cfg, Stage::Hard)
        .map_err(stage_err("train-hard", &p))?;
    m_hard.params.save(&p)?;
    save_loss(&art.path("loss.hard.csv"), &m_hard)?;

    log::info!("embed + index hard");
    let p = art.path("embeddings.hard.umre");
    let rec_hard = embed_corpus(&ds, &m_hard.params, &fcfg).map_err(stage_err("embed-hard", &p))?;
    save_store(&p, &rec_hard)?;
    let ix_hard = VectorIndex::build(&rec_hard, "global")?;

    log::info!("re-mine for continual");
    let p = art.path("mined.continual.jsonl");
    let mq_hard = mining_queries(&examples, &m_hard.params, &fcfg, opts(&hard_cfg))
        .map_err(stage_err("remine", &p))?;
    let mut mined_cont = BTreeMap::new();
    for q in &mq_hard {
        let m = remine_continual(&mined_rand[&q.qid], q, &ix_hard, &cfg.miner)
            .map_err(stage_err("remine", &p))?;
        mined_cont.insert(q.qid.clone(), m);
    }
    save_mined(
        &p,
        &mined_cont,
        &MiningStats::from_mined(mined_cont.values()),
    )?;
    let (cont_examples, triplets) =
        attach_negatives(&examples, &mined_cont, &corpus, cont_cfg.seed);
    save_triplets(&art.path("triplets.continual.jsonl"), &triplets)?;
    let (source_a, source_b) = split_continual(cont_examples);

    log::info!(
        "train continual (A {}, B {})",
        source_a.len(),
        source_b.len()
    );
    let p = art.path("params.continual.umrp");
    let m_cont = train_continual(&source_a, &source_b, &m_hard.params, &fcfg, &cont_cfg)
        .map_err(stage_err("train-continual", &p))?;
    m_cont.params.save(&p)?;
    save_loss(&art.path("loss.continual.csv"), &m_cont)?;
    let p = art.path("embeddings.continual.umre");
    let rec_cont =
        embed_corpus(&ds, &m_cont.params, &fcfg).map_err(stage_err("embed-continual", &p))?;
    save_store(&p, &rec_cont)?;

    let mut reports = Vec::new();
    let models = [
        ("rand", &m_rand.params, &rec_rand, &rand_cfg),
        ("hard", &m_hard.params, &rec_hard, &hard_cfg),
        ("continual", &m_cont.params, &rec_cont, &cont_cfg),
    ];
    let mut last_run = None;
    for (tag, params, records, stage_cfg) in models {
        log::info!("retrieve + eval {tag}");
        let p = art.path(&format!("run.{tag}.trec"));
        let indexes = build_indexes(&ds, records, cfg.pool).map_err(stage_err("retrieve", &p))?;
        let run = retrieve(
            &ds,
            &ds.eval,
            &indexes,
            params,
            &fcfg,
            opts(stage_cfg),
            cfg.retrieve_k,
        )
        .map_err(stage_err("retrieve", &p))?;
        save_run(&p, &run, tag)?;
        let p = art.path(&format!("report.{tag}.csv"));
        let report = evaluate(&ds, &run, cfg, tag).map_err(stage_err("eval", &p))?;
        save_report(&p, &report)?;
        reports.push(report);
        last_run = Some(run);
    }

    if cfg.rerank_enabled {
        let tag = "continual-rerank";
        log::info!("rerank");
        let cache = ScoreCache::open(&art.path("rerank.cache.jsonl"))?;
        let p = art.path(&format!("run.{tag}.trec"));
        let run = rerank_run(
            &ds,
            &ds.eval,
            last_run.as_ref().expect("three models ran"),
            cfg,
            &cache,
        )
        .map_err(stage_err("rerank", &p))?;
        save_run(&p, &run, tag)?;
        let p = art.path(&format!("report.{tag}.csv"));
        let report = evaluate(&ds, &run, cfg, tag).map_err(stage_err("eval", &p))?;
        save_report(&p, &report)?;
        reports.push(report);
    }
    Ok(PipelineOutcome {
        reports,
        artifacts: art.written,
    })
}
