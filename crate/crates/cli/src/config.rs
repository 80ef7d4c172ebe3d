//! Flat `key = value` pipeline configuration with dotted section keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key can be
//! overridden on the command line as `--key value`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use umr_core::reranker::ScorerSpec;
use umr_core::{
    Error, FeaturizerConfig, MinerConfig, RecallConvention, RerankConfig, Result, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Global,
    PerDataset,
}

impl PoolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Global => "global",
            PoolMode::PerDataset => "per_dataset",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub corpus: PathBuf,
    pub train_queries: PathBuf,
    pub eval_queries: PathBuf,
    pub tasks: PathBuf,
    pub qrels: PathBuf,
    /// `dataset_id<TAB>doc_id` lines; needed only for per-dataset pools.
    pub pools: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    /// Base directory for `img_ref` paths; defaults to the corpus directory.
    pub image_root: Option<PathBuf>,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub seed: u64,
    pub featurizer: FeaturizerConfig,
    pub embed_dim: usize,
    pub rand: TrainConfig,
    pub hard: TrainConfig,
    pub continual: TrainConfig,
    pub miner: MinerConfig,
    pub rerank_enabled: bool,
    pub rerank: RerankConfig,
    pub retrieve_k: usize,
    pub pool: PoolMode,
    pub recall: RecallConvention,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let stage = |epochs, steps| TrainConfig {
            epochs,
            steps,
            ..TrainConfig::default()
        };
        PipelineConfig {
            paths: Paths {
                corpus: "corpus.jsonl".into(),
                train_queries: "queries.train.jsonl".into(),
                eval_queries: "queries.eval.jsonl".into(),
                tasks: "tasks.jsonl".into(),
                qrels: "qrels.txt".into(),
                pools: None,
                templates: None,
                image_root: None,
                workdir: "work".into(),
            },
            seed: 0,
            featurizer: FeaturizerConfig::default(),
            embed_dim: 64,
            rand: stage(10, 0),
            hard: stage(10, 0),
            continual: stage(0, 200),
            miner: MinerConfig::default(),
            rerank_enabled: false,
            rerank: RerankConfig::default(),
            retrieve_k: 50,
            pool: PoolMode::Global,
            recall: RecallConvention::AnyHit,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

fn set_train(cfg: &mut TrainConfig, field: &str, key: &str, value: &str) -> Result<()> {
    match field {
        "tau" => cfg.tau = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "steps" => cfg.steps = parse(key, value)?,
        "include_instruction" => cfg.include_instruction = parse_bool(key, value)?,
        _ => return Err(Error::Config(format!("unknown key {key}"))),
    }
    Ok(())
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl PipelineConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "paths.corpus" => self.paths.corpus = value.into(),
            "paths.train_queries" => self.paths.train_queries = value.into(),
            "paths.eval_queries" => self.paths.eval_queries = value.into(),
            "paths.tasks" => self.paths.tasks = value.into(),
            "paths.qrels" => self.paths.qrels = value.into(),
            "paths.pools" => self.paths.pools = opt_path(value),
            "paths.templates" => self.paths.templates = opt_path(value),
            "paths.image_root" => self.paths.image_root = opt_path(value),
            "paths.workdir" => self.paths.workdir = value.into(),
            "seed" => self.seed = parse(key, value)?,
            "featurizer.text_dim" => self.featurizer.text_dim = parse(key, value)?,
            "featurizer.image_dim" => self.featurizer.image_dim = parse(key, value)?,
            "encoder.dim" => self.embed_dim = parse(key, value)?,
            "miner.top_n" => self.miner.top_n = parse(key, value)?,
            "miner.k_prime" => self.miner.k_prime = parse(key, value)?,
            "rerank.enabled" => self.rerank_enabled = parse_bool(key, value)?,
            "rerank.depth" => self.rerank.depth = parse(key, value)?,
            "rerank.max_in_flight" => self.rerank.max_in_flight = parse(key, value)?,
            "rerank.retries" => self.rerank.retry.retries = parse(key, value)?,
            "rerank.backoff_ms" => self.rerank.retry.base_delay_ms = parse(key, value)?,
            "rerank.scorer" => {
                self.rerank.scorer = match value {
                    "mock" => ScorerSpec::Mock,
                    url if url.starts_with("http://") || url.starts_with("https://") => {
                        let timeout_ms = match &self.rerank.scorer {
                            ScorerSpec::Http { timeout_ms, .. } => *timeout_ms,
                            ScorerSpec::Mock => 30_000,
                        };
                        ScorerSpec::Http {
                            url: url.to_string(),
                            timeout_ms,
                        }
                    }
                    _ => {
                        return Err(Error::Config(format!(
                            "rerank.scorer must be mock or a URL, got {value:?}"
                        )))
                    }
                }
            }
            "rerank.timeout_ms" => {
                let t = parse(key, value)?;
                if let ScorerSpec::Http { timeout_ms, .. } = &mut self.rerank.scorer {
                    *timeout_ms = t;
                }
            }
            "retrieve.k" => self.retrieve_k = parse(key, value)?,
            "eval.pool" => {
                self.pool = match value {
                    "global" => PoolMode::Global,
                    "per_dataset" => PoolMode::PerDataset,
                    _ => {
                        return Err(Error::Config(format!(
                            "eval.pool must be global or per_dataset, got {value:?}"
                        )))
                    }
                }
            }
            "eval.recall" => {
                self.recall = match value {
                    "any_hit" => RecallConvention::AnyHit,
                    "fraction" => RecallConvention::Fraction,
                    _ => {
                        return Err(Error::Config(format!(
                            "eval.recall must be any_hit or fraction, got {value:?}"
                        )))
                    }
                }
            }
            _ => {
                let stage = [
                    ("train.rand.", 0),
                    ("train.hard.", 1),
                    ("train.continual.", 2),
                ]
                .into_iter()
                .find(|(p, _)| key.starts_with(p));
                let Some((prefix, which)) = stage else {
                    return Err(Error::Config(format!("unknown key {key}")));
                };
                let cfg = match which {
                    0 => &mut self.rand,
                    1 => &mut self.hard,
                    _ => &mut self.continual,
                };
                set_train(cfg, &key[prefix.len()..], key, value)?;
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    /// Load a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut cfg = Self::parse_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.corpus,
            &mut paths.train_queries,
            &mut paths.eval_queries,
            &mut paths.tasks,
            &mut paths.qrels,
            &mut paths.workdir,
        ] {
            fix(p);
        }
        for p in [
            &mut paths.pools,
            &mut paths.templates,
            &mut paths.image_root,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Apply `--key value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key, got {flag:?}")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k, v.to_string()),
                None => (
                    key,
                    it.next()
                        .ok_or_else(|| Error::Config(format!("missing value for --{key}")))?
                        .clone(),
                ),
            };
            self.set(key, &value)?;
        }
        Ok(())
    }

    /// Stage configs with their seeds derived from the global seed.
    pub fn stage_configs(&self) -> [TrainConfig; 3] {
        let mut out = [self.rand.clone(), self.hard.clone(), self.continual.clone()];
        for (i, c) in out.iter_mut().enumerate() {
            c.seed = self.seed.wrapping_mul(1000).wrapping_add(i as u64 + 1);
        }
        out
    }

    pub fn featurizer(&self) -> FeaturizerConfig {
        FeaturizerConfig {
            seed: self.seed,
            ..self.featurizer
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.featurizer().validate()?;
        if self.embed_dim == 0 {
            return Err(Error::Config("encoder.dim must be >= 1".into()));
        }
        for c in self.stage_configs() {
            c.validate()?;
        }
        self.miner.validate()?;
        self.rerank.validate()?;
        if self.retrieve_k < 10 {
            return Err(Error::Config(
                "retrieve.k must be >= 10 for the @10 metrics".into(),
            ));
        }
        if self.pool == PoolMode::PerDataset && self.paths.pools.is_none() {
            return Err(Error::Config(
                "eval.pool = per_dataset needs paths.pools".into(),
            ));
        }
        Ok(())
    }

    /// Serialize every key, in a stable order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let p = &self.paths;
        let opt = |o: &Option<PathBuf>| {
            o.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("paths.corpus", p.corpus.display().to_string());
        kv("paths.train_queries", p.train_queries.display().to_string());
        kv("paths.eval_queries", p.eval_queries.display().to_string());
        kv("paths.tasks", p.tasks.display().to_string());
        kv("paths.qrels", p.qrels.display().to_string());
        kv("paths.pools", opt(&p.pools));
        kv("paths.templates", opt(&p.templates));
        kv("paths.image_root", opt(&p.image_root));
        kv("paths.workdir", p.workdir.display().to_string());
        kv("seed", self.seed.to_string());
        kv("featurizer.text_dim", self.featurizer.text_dim.to_string());
        kv(
            "featurizer.image_dim",
            self.featurizer.image_dim.to_string(),
        );
        kv("encoder.dim", self.embed_dim.to_string());
        for (name, c) in [
            ("rand", &self.rand),
            ("hard", &self.hard),
            ("continual", &self.continual),
        ] {
            kv(&format!("train.{name}.tau"), c.tau.to_string());
            kv(
                &format!("train.{name}.batch_size"),
                c.batch_size.to_string(),
            );
            kv(&format!("train.{name}.lr"), c.lr.to_string());
            kv(&format!("train.{name}.epochs"), c.epochs.to_string());
            kv(&format!("train.{name}.steps"), c.steps.to_string());
            kv(
                &format!("train.{name}.include_instruction"),
                c.include_instruction.to_string(),
            );
        }
        kv("miner.top_n", self.miner.top_n.to_string());
        kv("miner.k_prime", self.miner.k_prime.to_string());
        kv("rerank.enabled", self.rerank_enabled.to_string());
        kv("rerank.depth", self.rerank.depth.to_string());
        kv(
            "rerank.max_in_flight",
            self.rerank.max_in_flight.to_string(),
        );
        kv("rerank.retries", self.rerank.retry.retries.to_string());
        kv(
            "rerank.backoff_ms",
            self.rerank.retry.base_delay_ms.to_string(),
        );
        match &self.rerank.scorer {
            ScorerSpec::Mock => kv("rerank.scorer", "mock".into()),
            ScorerSpec::Http { url, timeout_ms } => {
                kv("rerank.scorer", url.clone());
                kv("rerank.timeout_ms", timeout_ms.to_string());
            }
        }
        kv("retrieve.k", self.retrieve_k.to_string());
        kv("eval.pool", self.pool.as_str().into());
        kv(
            "eval.recall",
            match self.recall {
                RecallConvention::AnyHit => "any_hit",
                RecallConvention::Fraction => "fraction",
            }
            .into(),
        );
        s
    }
}
