//! Subcommand definitions and their implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umr_core::encoder::EncodeOptions;
use umr_core::featurizer::SparseVec;
use umr_core::ingest::save_corpus;
use umr_core::miner::{mine_all, remine_continual, MiningStats};
use umr_core::reranker::ScoreCache;
use umr_core::trainer::{grad_check, GradCheckReport};
use umr_core::{Error, Features, FusionParams, Result, Stage, VectorIndex};

use crate::config::PipelineConfig;
use crate::pipeline::{self, Dataset};
use crate::synth::{cmd_synth, DocsPerCluster, SynthSpec};

#[derive(Debug, Parser)]
#[command(
    name = "umr",
    version,
    about = "Instruction-aware multimodal retrieval toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// A config file plus `--key value` overrides.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config keys as `--key value`, given after a `--` separator.
    #[arg(last = true)]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark and a pipeline config for it; unset
    /// flags keep the built-in defaults.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_clusters: Option<usize>,
        #[arg(long)]
        docs_text: Option<usize>,
        #[arg(long)]
        docs_image: Option<usize>,
        #[arg(long)]
        docs_image_text: Option<usize>,
        #[arg(long)]
        n_queries: Option<usize>,
        #[arg(long)]
        confound: Option<f64>,
        #[arg(long)]
        heldout_frac: Option<f64>,
        #[arg(long)]
        image_dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Resolve image references into features and write the corpus.
    Featurize {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one stage.
    Train {
        #[arg(long)]
        stage: Stage,
        /// Starting parameters; default is a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Mined triplets (required for hard and continual).
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Optional loss trace CSV.
        #[arg(long)]
        loss: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Embed the corpus into an embedding store.
    Embed {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Merge embedding stores into one searchable pool.
    Index {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        stores: Vec<PathBuf>,
    },
    /// Mine modality-aware negatives for the training queries.
    Mine {
        #[arg(long)]
        params: PathBuf,
        /// Mined sets of the first model; switches to continual re-mining.
        #[arg(long)]
        remine_from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also sample one negative per query into this triplet file.
        #[arg(long)]
        triplets_out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Retrieve the evaluation queries and write a TREC run.
    Retrieve {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "run")]
        tag: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rerank the head of a TREC run.
    Rerank {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "rerank")]
        tag: String,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate TREC runs; writes report.<tag>.csv next to each run.
    Eval {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check the analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
    },
    /// Run every stage end to end.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn opts(cfg: &PipelineConfig, stage: Stage) -> EncodeOptions {
    let c = match stage {
        Stage::Rand => &cfg.rand,
        Stage::Hard => &cfg.hard,
        Stage::Continual => &cfg.continual,
    };
    EncodeOptions {
        include_instruction: c.include_instruction,
    }
}

fn tag_of(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.strip_prefix("run.").unwrap_or(&stem).to_string()
}

fn load_params(path: &Path, cfg: &PipelineConfig) -> Result<FusionParams> {
    let p =
        FusionParams::load(path).map_err(|e| e.context(format!("params {}", path.display())))?;
    p.check_compatible(&cfg.featurizer())?;
    Ok(p)
}

/// Random gradient-check instance: `d = 8`, 16-dim features, four queries,
/// a pool of positives and one hard negative each.
pub fn gradcheck_instance(seed: u64) -> (FusionParams, Vec<Features>, Vec<Features>, Vec<usize>) {
    const F: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = |rng: &mut ChaCha8Rng| {
        let mut entries = Vec::new();
        for j in 0..F as u32 {
            if rng.gen_bool(0.5) {
                entries.push((j, rng.gen_range(-1.0..1.0)));
            }
        }
        let text = SparseVec { dim: F, entries };
        let image: Vec<f64> = (0..F).map(|_| rng.gen_range(-1.0..1.0)).collect();
        match rng.gen_range(0..3) {
            0 if !text.entries.is_empty() => Features {
                text: Some(text),
                image: None,
            },
            1 => Features {
                text: None,
                image: Some(image),
            },
            _ => Features {
                text: Some(text),
                image: Some(image),
            },
        }
    };
    let queries = (0..4).map(|_| feat(&mut rng)).collect();
    let pool = (0..8).map(|_| feat(&mut rng)).collect();
    (
        FusionParams::init(8, F, F, seed),
        queries,
        pool,
        vec![0, 2, 4, 6],
    )
}

pub fn run_gradcheck(instances: usize, seed: u64, tau: f64) -> Result<Vec<GradCheckReport>> {
    (0..instances as u64)
        .map(|i| {
            let (p, q, pool, pos) = gradcheck_instance(seed + i);
            grad_check(&p, &q, &pool, &pos, tau, seed + i)
        })
        .collect()
}

fn dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    pipeline::load_dataset(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            n_clusters,
            docs_text,
            docs_image,
            docs_image_text,
            n_queries,
            confound,
            heldout_frac,
            image_dim,
            seed,
        } => {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                n_clusters: n_clusters.unwrap_or(d.n_clusters),
                docs_per_cluster: DocsPerCluster {
                    text: docs_text.unwrap_or(d.docs_per_cluster.text),
                    image: docs_image.unwrap_or(d.docs_per_cluster.image),
                    image_text: docs_image_text.unwrap_or(d.docs_per_cluster.image_text),
                },
                n_queries: n_queries.unwrap_or(d.n_queries),
                modality_confound_strength: confound.unwrap_or(d.modality_confound_strength),
                heldout_frac: heldout_frac.unwrap_or(d.heldout_frac),
                image_dim: image_dim.unwrap_or(d.image_dim),
                seed: seed.unwrap_or(d.seed),
            };
            let data = cmd_synth(&spec, &out)?;
            println!(
                "wrote {} docs, {} train / {} eval queries to {}",
                data.corpus.len(),
                data.train_queries.len(),
                data.eval_queries.len(),
                out.display()
            );
        }
        Command::Featurize { out, cfg } => {
            let ds = dataset(&cfg.resolve()?)?;
            save_corpus(&out, &ds.corpus)?;
            println!("featurized {} items", ds.corpus.len());
        }
        Command::Train {
            stage,
            init,
            triplets,
            out,
            loss,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let fcfg = cfg.featurizer();
            let ds = dataset(&cfg)?;
            let init = match &init {
                Some(p) => load_params(p, &cfg)?,
                None => FusionParams::for_featurizer(cfg.embed_dim, &fcfg),
            };
            let keyed = pipeline::train_examples(&ds);
            let [rand_cfg, hard_cfg, cont_cfg] = cfg.stage_configs();
            let examples = match &triplets {
                Some(t) => pipeline::examples_from_triplets(
                    &keyed,
                    &pipeline::load_triplets(t)?,
                    &ds.corpus_map(),
                )?,
                None if stage == Stage::Rand => keyed.iter().map(|k| k.example.clone()).collect(),
                None => {
                    return Err(Error::Config(format!(
                        "--triplets is required for stage {stage:?}"
                    )))
                }
            };
            let outcome = match stage {
                Stage::Rand => umr_core::train(&examples, &init, &fcfg, &rand_cfg, stage)?,
                Stage::Hard => umr_core::train(&examples, &init, &fcfg, &hard_cfg, stage)?,
                Stage::Continual => {
                    let (a, b) = pipeline::split_continual(examples);
                    umr_core::train_continual(&a, &b, &init, &fcfg, &cont_cfg)?
                }
            };
            outcome.params.save(&out)?;
            if let Some(l) = loss {
                let mut w = std::io::BufWriter::new(std::fs::File::create(l)?);
                umr_core::trainer::write_loss_trace(&mut w, &outcome.trace)?;
            }
            let last = outcome.trace.last().map_or(f64::NAN, |p| p.loss);
            println!("{} steps, final loss {last:.6}", outcome.trace.len());
        }
        Command::Embed { params, out, cfg } => {
            let cfg = cfg.resolve()?;
            let ds = dataset(&cfg)?;
            let p = load_params(&params, &cfg)?;
            let recs = pipeline::embed_corpus(&ds, &p, &cfg.featurizer())?;
            VectorIndex::build(&recs, "global")?.save(&out)?;
            println!("embedded {} items", recs.len());
        }
        Command::Index { out, stores } => {
            let parts = stores
                .iter()
                .map(|p| VectorIndex::load(p, &tag_of(p)))
                .collect::<Result<Vec<_>>>()?;
            let merged = VectorIndex::merge(&parts, "global")?;
            merged.save(&out)?;
            println!("indexed {} vectors of dim {}", merged.len(), merged.dim());
        }
        Command::Mine {
            params,
            remine_from,
            out,
            triplets_out,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let fcfg = cfg.featurizer();
            let ds = dataset(&cfg)?;
            let p = load_params(&params, &cfg)?;
            let keyed = pipeline::train_examples(&ds);
            let recs = pipeline::embed_corpus(&ds, &p, &fcfg)?;
            let index = VectorIndex::build(&recs, "global")?;
            let stage = if remine_from.is_some() {
                Stage::Hard
            } else {
                Stage::Rand
            };
            let queries = pipeline::mining_queries(&keyed, &p, &fcfg, opts(&cfg, stage))?;
            let mined = match &remine_from {
                None => mine_all(&queries, &index, &cfg.miner)?.0,
                Some(prev) => {
                    let prev = pipeline::load_mined(prev)?;
                    let mut out = BTreeMap::new();
                    for q in &queries {
                        let m = prev.get(&q.qid).ok_or_else(|| {
                            Error::parse("remine", format!("no earlier mining for {}", q.qid))
                        })?;
                        out.insert(q.qid.clone(), remine_continual(m, q, &index, &cfg.miner)?);
                    }
                    out
                }
            };
            let stats = MiningStats::from_mined(mined.values());
            let rows: Vec<_> = mined.values().collect();
            umr_core::ingest::write_jsonl(std::fs::File::create(&out)?, &rows)?;
            if let Some(t) = triplets_out {
                let seed = cfg.stage_configs()[if remine_from.is_some() { 2 } else { 1 }].seed;
                let (_, triplets) =
                    pipeline::attach_negatives(&keyed, &mined, &ds.corpus_map(), seed);
                pipeline::save_triplets(&t, &triplets)?;
            }
            println!(
                "mined {} queries: mean C1 {:.2}, mean C2 {:.2}, positive missing {:.3}",
                stats.queries, stats.mean_c1, stats.mean_c2, stats.positive_missing_frac
            );
        }
        Command::Retrieve {
            params,
            out,
            tag,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let fcfg = cfg.featurizer();
            let ds = dataset(&cfg)?;
            let p = load_params(&params, &cfg)?;
            let recs = pipeline::embed_corpus(&ds, &p, &fcfg)?;
            let indexes = pipeline::build_indexes(&ds, &recs, cfg.pool)?;
            let run = pipeline::retrieve(
                &ds,
                &ds.eval,
                &indexes,
                &p,
                &fcfg,
                opts(&cfg, Stage::Continual),
                cfg.retrieve_k,
            )?;
            pipeline::save_run(&out, &run, &tag)?;
            println!("retrieved {} queries", run.len());
        }
        Command::Rerank {
            run,
            out,
            tag,
            cache,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let ds = dataset(&cfg)?;
            let input = pipeline::load_run(&run, &ds.modality_of())?;
            let cache = match cache {
                Some(p) => ScoreCache::open(&p)?,
                None => ScoreCache::in_memory(),
            };
            let reranked = pipeline::rerank_run(&ds, &ds.eval, &input, &cfg, &cache)?;
            pipeline::save_run(&out, &reranked, &tag)?;
            println!("reranked {} queries", reranked.len());
        }
        Command::Eval { runs, cfg } => {
            let cfg = cfg.resolve()?;
            let ds = dataset(&cfg)?;
            let modality = ds.modality_of();
            for path in runs {
                let tag = tag_of(&path);
                let run = pipeline::load_run(&path, &modality)?;
                let report = pipeline::evaluate(&ds, &run, &cfg, &tag)?;
                let dir = path.parent().unwrap_or(Path::new("."));
                pipeline::save_report(&dir.join(format!("report.{tag}.csv")), &report)?;
                print!("{}", report.to_table());
            }
        }
        Command::Gradcheck {
            instances,
            seed,
            tau,
        } => {
            let reports = run_gradcheck(instances, seed, tau)?;
            let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            let coords: usize = reports.iter().map(|r| r.coords_checked).sum();
            println!("{instances} instances, {coords} coordinates, max relative error {worst:.3e}");
        }
        Command::Pipeline { cfg } => {
            let cfg = cfg.resolve()?;
            let outcome = pipeline::run_pipeline(&cfg)?;
            for r in &outcome.reports {
                print!("{}", r.to_table());
            }
            println!("artifacts in {}", cfg.paths.workdir.display());
        }
    }
    Ok(())
}
