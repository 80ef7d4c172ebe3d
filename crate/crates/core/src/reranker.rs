//! Pointwise zero-shot reranking with true/false prompts.
//!
//! Each (query, candidate) pair of the retrieval head is rendered into a
//! prompt, a [`Scorer`] returns the logits of the "True" and "False"
//! tokens, and candidates are re-sorted by the probability of "True".

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::index::SearchHit;
use crate::types::{Item, Modality, Qrels};

pub const CAPTION_TEMPLATE: &str =
    "{qry_img}\nCaption:{doc_txt}\nDoes the above daily life image match the caption? True or False";
pub const VQA_TEMPLATE: &str = "{qry_img}\nQuestion:{qry_txt}\nAnswer:{doc_txt}\nDoes the answer correctly answer the question? True or False";
pub const FALLBACK_TEMPLATE: &str =
    "Query:{qry}\nCandidate:{doc}\nDoes the candidate satisfy the query? True or False";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    /// `None` matches any modality.
    #[serde(default)]
    pub query_modality: Option<Modality>,
    #[serde(default)]
    pub candidate_modality: Option<Modality>,
    #[serde(default)]
    pub dataset_id: Option<String>,
    pub body: String,
}

impl PromptTemplate {
    pub fn caption() -> Self {
        PromptTemplate {
            template_id: "caption".into(),
            query_modality: Some(Modality::Image),
            candidate_modality: Some(Modality::Text),
            dataset_id: None,
            body: CAPTION_TEMPLATE.into(),
        }
    }

    pub fn vqa() -> Self {
        PromptTemplate {
            template_id: "vqa".into(),
            query_modality: Some(Modality::ImageText),
            candidate_modality: Some(Modality::Text),
            dataset_id: None,
            body: VQA_TEMPLATE.into(),
        }
    }

    pub fn fallback() -> Self {
        PromptTemplate {
            template_id: "generic".into(),
            query_modality: None,
            candidate_modality: None,
            dataset_id: None,
            body: FALLBACK_TEMPLATE.into(),
        }
    }

    pub fn applies_to(&self, query: Modality, candidate: Modality) -> bool {
        self.query_modality.is_none_or(|m| m == query)
            && self.candidate_modality.is_none_or(|m| m == candidate)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.body.trim_end().ends_with("True or False") {
            return Err(Error::parse(
                format!("template {}", self.template_id),
                "body must end with a True or False question",
            ));
        }
        let needs = |p: &str| self.body.contains(p);
        let check = |m: Option<Modality>, img: &str, txt: &str| match m {
            Some(m) => (!needs(img) || m.has_image()) && (!needs(txt) || m.has_text()),
            None => true,
        };
        if !check(self.query_modality, "{qry_img}", "{qry_txt}")
            || !check(self.candidate_modality, "{doc_img}", "{doc_txt}")
        {
            return Err(Error::parse(
                format!("template {}", self.template_id),
                "placeholder incompatible with declared modality",
            ));
        }
        Ok(())
    }
}

/// Templates searched most specific first: dataset and modalities, then
/// modalities, then wildcard.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateRegistry {
    templates: Vec<PromptTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        TemplateRegistry {
            templates: vec![
                PromptTemplate::caption(),
                PromptTemplate::vqa(),
                PromptTemplate::fallback(),
            ],
        }
    }
}

impl TemplateRegistry {
    pub fn new(templates: Vec<PromptTemplate>) -> Result<Self> {
        for t in &templates {
            t.validate()?;
        }
        Ok(TemplateRegistry { templates })
    }

    /// Built-ins plus user templates, user entries taking precedence.
    pub fn with_user_templates(user: Vec<PromptTemplate>) -> Result<Self> {
        let mut all = user;
        all.extend(Self::default().templates);
        Self::new(all)
    }

    pub fn load_jsonl(path: &Path) -> Result<Vec<PromptTemplate>> {
        let f = File::open(path)?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::parse(format!("template line {}", i + 1), e))?,
            );
        }
        Ok(out)
    }

    pub fn select(
        &self,
        query: Modality,
        candidate: Modality,
        dataset_id: Option<&str>,
    ) -> Option<&PromptTemplate> {
        let specificity = |t: &PromptTemplate| {
            usize::from(t.dataset_id.is_some()) * 4
                + usize::from(t.query_modality.is_some())
                + usize::from(t.candidate_modality.is_some())
        };
        self.templates
            .iter()
            .filter(|t| t.applies_to(query, candidate))
            .filter(|t| t.dataset_id.is_none() || t.dataset_id.as_deref() == dataset_id)
            .enumerate()
            .max_by(|(ia, a), (ib, b)| specificity(a).cmp(&specificity(b)).then(ib.cmp(ia)))
            .map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RenderedPrompt {
    pub prompt: String,
    /// Image references in order of appearance in the prompt.
    pub image_refs: Vec<String>,
}

fn image_marker(item: &Item) -> String {
    format!("<img:{}>", item.id)
}

fn image_ref(item: &Item) -> String {
    item.image_ref.clone().unwrap_or_else(|| item.id.clone())
}

/// Substitute placeholders. Image placeholders become `<img:ID>` markers and
/// the matching references are returned alongside.
pub fn render_prompt(
    template: &PromptTemplate,
    query: &Item,
    candidate: &Item,
) -> Result<RenderedPrompt> {
    if !template.applies_to(query.modality, candidate.modality) {
        return Err(Error::TemplateMismatch {
            template_id: template.template_id.clone(),
            query: query.modality,
            candidate: candidate.modality,
        });
    }
    let missing = |field: &'static str, item: &Item| Error::MissingField {
        template_id: template.template_id.clone(),
        field,
        item_id: item.id.clone(),
    };
    let mut prompt = String::with_capacity(template.body.len() + 64);
    let mut refs = Vec::new();
    let mut rest = template.body.as_str();
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start..].find('}') else {
            break;
        };
        let name = &rest[start + 1..start + len];
        prompt.push_str(&rest[..start]);
        let (item, role) = match name {
            "qry_img" | "qry_txt" | "qry" => (query, "qry"),
            "doc_img" | "doc_txt" | "doc" => (candidate, "doc"),
            _ => {
                prompt.push_str(&rest[start..=start + len]);
                rest = &rest[start + len + 1..];
                continue;
            }
        };
        let has_image = item.modality.has_image();
        match &name[role.len()..] {
            "_img" => {
                if !has_image {
                    return Err(missing(
                        if role == "qry" { "qry_img" } else { "doc_img" },
                        item,
                    ));
                }
                prompt.push_str(&image_marker(item));
                refs.push(image_ref(item));
            }
            "_txt" => {
                let text = item.text.as_deref().ok_or_else(|| {
                    missing(if role == "qry" { "qry_txt" } else { "doc_txt" }, item)
                })?;
                prompt.push_str(text);
            }
            _ => {
                let mut parts = Vec::new();
                if has_image {
                    parts.push(image_marker(item));
                    refs.push(image_ref(item));
                }
                if let Some(t) = &item.text {
                    parts.push(t.clone());
                }
                prompt.push_str(&parts.join(" "));
            }
        }
        rest = &rest[start + len + 1..];
    }
    prompt.push_str(rest);
    Ok(RenderedPrompt {
        prompt,
        image_refs: refs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerResponse {
    pub logit_true: f64,
    pub logit_false: f64,
}

/// Probability of "True" under a softmax over the two logits.
pub fn true_prob(resp: &ScorerResponse) -> Result<f64> {
    if !(resp.logit_true.is_finite() && resp.logit_false.is_finite()) {
        return Err(Error::NonFinite("scorer logits"));
    }
    let x = resp.logit_true - resp.logit_false;
    Ok(if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    })
}

/// A scoring request. Only `prompt` and `image_refs` go over the wire; the
/// ids are context for test doubles and logging.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub image_refs: Vec<String>,
    #[serde(skip)]
    pub qid: String,
    #[serde(skip)]
    pub doc_id: String,
}

impl ScoreRequest {
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.prompt.as_bytes());
        for r in &self.image_refs {
            h.update([0u8]);
            h.update(r.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub trait Scorer: Sync {
    fn score(&self, req: &ScoreRequest) -> std::result::Result<ScorerResponse, String>;
}

/// Oracle test double: +10 for judged-relevant pairs, -10 otherwise.
#[derive(Debug, Clone)]
pub struct MockScorer {
    pub qrels: Qrels,
}

pub fn mock_scorer(qid: &str, doc_id: &str, oracle: &Qrels) -> ScorerResponse {
    ScorerResponse {
        logit_true: if oracle.grade(qid, doc_id) > 0 {
            10.0
        } else {
            -10.0
        },
        logit_false: 0.0,
    }
}

impl Scorer for MockScorer {
    fn score(&self, req: &ScoreRequest) -> std::result::Result<ScorerResponse, String> {
        Ok(mock_scorer(&req.qid, &req.doc_id, &self.qrels))
    }
}

/// Scorer behind an HTTP endpoint taking and returning one JSON record.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    pub url: String,
    pub timeout: Duration,
}

impl Scorer for HttpScorer {
    fn score(&self, req: &ScoreRequest) -> std::result::Result<ScorerResponse, String> {
        let body = serde_json::to_string(req).map_err(|e| e.to_string())?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body.as_str())
            .map_err(|e| e.to_string())?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        serde_json::from_str(line).map_err(|e| format!("bad scorer response: {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retries: usize,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            base_delay_ms: 100,
        }
    }
}

/// One attempt plus `retries` more, doubling the delay each time.
pub fn score_with_retry(
    scorer: &dyn Scorer,
    req: &ScoreRequest,
    policy: RetryPolicy,
) -> std::result::Result<ScorerResponse, String> {
    let mut last = String::new();
    for attempt in 0..=policy.retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(policy.base_delay_ms << (attempt - 1)));
        }
        match scorer.score(req) {
            Ok(r) => return Ok(r),
            Err(e) => {
                log::warn!(
                    "scorer attempt {} for {}/{} failed: {e}",
                    attempt + 1,
                    req.qid,
                    req.doc_id
                );
                last = e;
            }
        }
    }
    Err(last)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    key_hash: String,
    logit_true: f64,
    logit_false: f64,
}

/// Response cache keyed by prompt and image refs, optionally backed by an
/// append-only file.
#[derive(Debug, Default)]
pub struct ScoreCache {
    entries: Mutex<HashMap<String, ScorerResponse>>,
    file: Option<Mutex<File>>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::parse(format!("score cache line {}", i + 1), e))?;
                entries.insert(
                    rec.key_hash,
                    ScorerResponse {
                        logit_true: rec.logit_true,
                        logit_false: rec.logit_false,
                    },
                );
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ScoreCache {
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<ScorerResponse> {
        self.entries.lock().expect("cache lock").get(key).copied()
    }

    pub fn insert(&self, key: String, resp: ScorerResponse) -> Result<()> {
        let mut entries = self.entries.lock().expect("cache lock");
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(f) = &self.file {
            let rec = CacheRecord {
                key_hash: key.clone(),
                logit_true: resp.logit_true,
                logit_false: resp.logit_false,
            };
            let mut line =
                serde_json::to_string(&rec).map_err(|e| Error::parse("score cache", e))?;
            line.push('\n');
            f.lock()
                .expect("cache file lock")
                .write_all(line.as_bytes())?;
        }
        entries.insert(key, resp);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScorerSpec {
    Mock,
    Http { url: String, timeout_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub depth: usize,
    pub scorer: ScorerSpec,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            depth: 10,
            scorer: ScorerSpec::Mock,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("rerank depth must be >= 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything `rerank` needs besides the hit list.
pub struct RerankContext<'a> {
    pub templates: &'a TemplateRegistry,
    pub scorer: &'a dyn Scorer,
    pub cache: &'a ScoreCache,
    pub candidates: &'a HashMap<String, Item>,
    pub config: &'a RerankConfig,
}

/// Rescore the first `depth` hits and re-sort them by probability of
/// "True" (ties keep retrieval order); later hits are left as they are.
pub fn rerank(
    query: &Item,
    dataset_id: Option<&str>,
    hits: &[SearchHit],
    ctx: &RerankContext<'_>,
) -> Result<Vec<SearchHit>> {
    ctx.config.validate()?;
    let depth = ctx.config.depth.min(hits.len());
    let head = &hits[..depth];
    let mut requests = Vec::with_capacity(depth);
    for h in head {
        let cand = ctx.candidates.get(&h.doc_id).ok_or_else(|| {
            Error::parse(
                format!("rerank {}", query.id),
                format!("unknown candidate {}", h.doc_id),
            )
        })?;
        let template = ctx
            .templates
            .select(query.modality, cand.modality, dataset_id)
            .ok_or(Error::TemplateMismatch {
                template_id: "<none>".into(),
                query: query.modality,
                candidate: cand.modality,
            })?;
        let rendered = render_prompt(template, query, cand)?;
        requests.push(ScoreRequest {
            prompt: rendered.prompt,
            image_refs: rendered.image_refs,
            qid: query.id.clone(),
            doc_id: h.doc_id.clone(),
        });
    }

    let results: Vec<Mutex<Option<std::result::Result<ScorerResponse, String>>>> =
        (0..depth).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = ctx.config.max_in_flight.min(depth.max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= depth {
                    break;
                }
                let req = &requests[i];
                let key = req.cache_key();
                let res = match ctx.cache.get(&key) {
                    Some(r) => Ok(r),
                    None => score_with_retry(ctx.scorer, req, ctx.config.retry).and_then(|r| {
                        ctx.cache.insert(key, r).map_err(|e| e.to_string())?;
                        Ok(r)
                    }),
                };
                *results[i].lock().expect("result slot") = Some(res);
            });
        }
    });

    let mut scored = Vec::with_capacity(depth);
    for (pos, slot) in results.into_iter().enumerate() {
        let resp = slot
            .into_inner()
            .expect("result slot")
            .expect("every slot filled")
            .map_err(|reason| Error::ScorerUnavailable {
                qid: query.id.clone(),
                reason,
            })?;
        scored.push((pos, true_prob(&resp)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<SearchHit> = scored
        .into_iter()
        .enumerate()
        .map(|(r, (pos, p))| SearchHit {
            doc_id: head[pos].doc_id.clone(),
            score: p as f32,
            rank: r + 1,
            modality: head[pos].modality,
        })
        .collect();
    out.extend_from_slice(&hits[depth..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img_query(id: &str) -> Item {
        Item::image(id, vec![1.0])
    }

    #[test]
    fn caption_prompt_exact() {
        let r = render_prompt(
            &PromptTemplate::caption(),
            &img_query("q1"),
            &Item::text("c", "a cat"),
        )
        .unwrap();
        assert_eq!(
            r.prompt,
            "<img:q1>\nCaption:a cat\nDoes the above daily life image match the caption? True or False"
        );
        assert_eq!(r.image_refs, ["q1"]);
    }

    #[test]
    fn vqa_prompt_exact() {
        let mut q = Item::image_text("q7", "what color is the bus?", vec![1.0]);
        q.image_ref = Some("imgs/bus.jpg".into());
        let r = render_prompt(&PromptTemplate::vqa(), &q, &Item::text("c", "red")).unwrap();
        assert_eq!(
            r.prompt,
            "<img:q7>\nQuestion:what color is the bus?\nAnswer:red\nDoes the answer correctly answer the question? True or False"
        );
        assert_eq!(r.image_refs, ["imgs/bus.jpg"]);
    }

    #[test]
    fn text_template_rejects_image_query() {
        let t = PromptTemplate {
            template_id: "t2t".into(),
            query_modality: Some(Modality::Text),
            candidate_modality: Some(Modality::Text),
            dataset_id: None,
            body: "Query:{qry_txt}\nDoc:{doc_txt}\nRelevant? True or False".into(),
        };
        assert!(matches!(
            render_prompt(&t, &img_query("q"), &Item::text("c", "x")),
            Err(Error::TemplateMismatch { .. })
        ));
    }

    #[test]
    fn missing_field_detected() {
        let t = PromptTemplate {
            template_id: "any".into(),
            query_modality: None,
            candidate_modality: None,
            dataset_id: None,
            body: "{qry_txt} {doc_txt} True or False".into(),
        };
        assert!(matches!(
            render_prompt(&t, &img_query("q"), &Item::text("c", "x")),
            Err(Error::MissingField {
                field: "qry_txt",
                ..
            })
        ));
    }

    #[test]
    fn fallback_prompt() {
        let r = render_prompt(
            &PromptTemplate::fallback(),
            &Item::image_text("q", "red shirt", vec![1.0]),
            &Item::image("c", vec![1.0]),
        )
        .unwrap();
        assert_eq!(
            r.prompt,
            "Query:<img:q> red shirt\nCandidate:<img:c>\nDoes the candidate satisfy the query? True or False"
        );
        assert_eq!(r.image_refs, ["q", "c"]);
    }

    #[test]
    fn registry_prefers_specific() {
        let reg = TemplateRegistry::default();
        assert_eq!(
            reg.select(Modality::Image, Modality::Text, None)
                .unwrap()
                .template_id,
            "caption"
        );
        assert_eq!(
            reg.select(Modality::ImageText, Modality::Text, None)
                .unwrap()
                .template_id,
            "vqa"
        );
        assert_eq!(
            reg.select(Modality::Text, Modality::Image, None)
                .unwrap()
                .template_id,
            "generic"
        );
        let custom = PromptTemplate {
            template_id: "coco".into(),
            dataset_id: Some("mscoco".into()),
            ..PromptTemplate::caption()
        };
        let reg = TemplateRegistry::with_user_templates(vec![custom]).unwrap();
        assert_eq!(
            reg.select(Modality::Image, Modality::Text, Some("mscoco"))
                .unwrap()
                .template_id,
            "coco"
        );
        assert_eq!(
            reg.select(Modality::Image, Modality::Text, Some("other"))
                .unwrap()
                .template_id,
            "caption"
        );
    }

    #[test]
    fn template_validation() {
        let bad = PromptTemplate {
            body: "no question here".into(),
            ..PromptTemplate::fallback()
        };
        assert!(bad.validate().is_err());
        let wrong = PromptTemplate {
            body: "{qry_txt} True or False".into(),
            ..PromptTemplate::caption()
        };
        assert!(wrong.validate().is_err());
    }

    #[test]
    fn true_prob_anchors() {
        let p = |a, b| {
            true_prob(&ScorerResponse {
                logit_true: a,
                logit_false: b,
            })
            .unwrap()
        };
        assert_eq!(p(0.0, 0.0), 0.5);
        assert!((p(2.0, 0.0) - 0.8807971).abs() < 1e-7);
        assert_eq!(p(7.0, 5.0).to_bits(), p(2.0, 0.0).to_bits());
        assert!(p(-800.0, 0.0) >= 0.0 && p(800.0, 0.0) <= 1.0);
        assert!(true_prob(&ScorerResponse {
            logit_true: f64::NAN,
            logit_false: 0.0
        })
        .is_err());
    }

    #[test]
    fn mock_scorer_grades() {
        let mut q = Qrels::new();
        q.insert("q", "rel", 1);
        let p = |d: &str| true_prob(&mock_scorer("q", d, &q)).unwrap();
        assert!(p("rel") > 0.9999);
        assert!(p("irrel") < 0.0001);
        assert!(true_prob(&mock_scorer("unknown", "rel", &q)).unwrap() < 0.0001);
    }

    struct Flaky {
        failures: AtomicUsize,
    }

    impl Scorer for Flaky {
        fn score(&self, _: &ScoreRequest) -> std::result::Result<ScorerResponse, String> {
            if self.failures.fetch_sub(1, Ordering::SeqCst) > 0 {
                Err("down".into())
            } else {
                Ok(ScorerResponse {
                    logit_true: 1.0,
                    logit_false: 0.0,
                })
            }
        }
    }

    #[test]
    fn retry_then_give_up() {
        let req = ScoreRequest {
            prompt: "p".into(),
            image_refs: vec![],
            qid: "q".into(),
            doc_id: "d".into(),
        };
        let policy = RetryPolicy {
            retries: 3,
            base_delay_ms: 1,
        };
        let ok = Flaky {
            failures: AtomicUsize::new(3),
        };
        assert!(score_with_retry(&ok, &req, policy).is_ok());
        let dead = Flaky {
            failures: AtomicUsize::new(4),
        };
        assert!(score_with_retry(&dead, &req, policy).is_err());
    }

    #[test]
    fn cache_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let resp = ScorerResponse {
            logit_true: 1.5,
            logit_false: -0.25,
        };
        {
            let c = ScoreCache::open(&path).unwrap();
            c.insert("k1".into(), resp).unwrap();
            c.insert("k1".into(), resp).unwrap();
        }
        let c = ScoreCache::open(&path).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.get("k1"), Some(resp));
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
    }

    #[test]
    fn cache_key_depends_on_refs() {
        let mk = |refs: &[&str]| ScoreRequest {
            prompt: "p".into(),
            image_refs: refs.iter().map(|s| s.to_string()).collect(),
            qid: String::new(),
            doc_id: String::new(),
        };
        assert_ne!(mk(&["a"]).cache_key(), mk(&["b"]).cache_key());
        assert_eq!(mk(&["a"]).cache_key(), mk(&["a"]).cache_key());
        assert_eq!(mk(&[]).cache_key().len(), 64);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn true_prob_shift_invariant(a in -1_000_000i64..1_000_000, b in -1_000_000i64..1_000_000, c in -1_000_000i64..1_000_000) {
                let p = |x: f64, y: f64| true_prob(&ScorerResponse { logit_true: x, logit_false: y }).unwrap();
                let (a, b, c) = (a as f64 / 1024.0, b as f64 / 1024.0, c as f64 / 1024.0);
                prop_assert_eq!(p(a + c, b + c).to_bits(), p(a, b).to_bits());
                let v = p(a, b);
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
