//! Domain types shared across the crate and ingestion-time validation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Modality of a query or candidate. The derived order (`Text < Image <
/// ImageText`) is the serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Text,
    Image,
    ImageText,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::ImageText];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::ImageText => "image,text",
        }
    }

    /// Byte tag used by the embedding store.
    pub fn to_byte(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
            Modality::ImageText => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Text),
            1 => Some(Modality::Image),
            2 => Some(Modality::ImageText),
            _ => None,
        }
    }

    pub fn has_text(self) -> bool {
        matches!(self, Modality::Text | Modality::ImageText)
    }

    pub fn has_image(self) -> bool {
        matches!(self, Modality::Image | Modality::ImageText)
    }

    /// Modality implied by which parts are present.
    pub fn from_parts(has_text: bool, has_image: bool) -> Option<Self> {
        match (has_text, has_image) {
            (true, false) => Some(Modality::Text),
            (false, true) => Some(Modality::Image),
            (true, true) => Some(Modality::ImageText),
            (false, false) => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "image,text" | "text,image" => Ok(Modality::ImageText),
            other => Err(Error::parse(
                "modality",
                format!("unknown modality {other:?}"),
            )),
        }
    }
}

impl Serialize for Modality {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Modality {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A query or candidate after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub modality: Modality,
    pub text: Option<String>,
    pub image_feat: Option<Vec<f64>>,
    pub image_ref: Option<String>,
}

/// One ingestion line for a corpus document or query, before validation.
///
/// Corpus lines carry `id` and `modality`; query lines carry `qid` and the
/// modality is inferred from which parts are present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawItem {
    #[serde(alias = "qid")]
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img_feat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img_ref: Option<String>,
}

/// Trim and collapse internal whitespace runs to one space.
pub fn canonicalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Validate one raw record into an [`Item`].
pub fn validate_item(raw: &RawItem) -> Result<Item> {
    let text = raw
        .txt
        .as_deref()
        .map(canonicalize_text)
        .filter(|t| !t.is_empty());
    let has_image = raw.img_feat.is_some() || raw.img_ref.is_some();
    let mismatch = |detail: &str| Error::ModalityMismatch {
        id: raw.id.clone(),
        modality: raw.modality.unwrap_or(Modality::Text),
        detail: detail.to_string(),
    };
    if raw.id.is_empty() {
        return Err(Error::parse("item", "empty id"));
    }
    if raw.img_feat.is_some() && raw.img_ref.is_some() {
        return Err(mismatch("both img_feat and img_ref set"));
    }
    let implied = Modality::from_parts(text.is_some(), has_image);
    let modality = match (raw.modality, implied) {
        (_, None) => return Err(mismatch("neither text nor image present")),
        (Some(declared), Some(found)) if declared != found => {
            let detail = match (declared.has_text(), text.is_some()) {
                (true, false) => "text required but absent",
                (false, true) => "text present but modality has no text part",
                _ if declared.has_image() => "image required but absent",
                _ => "image present but modality has no image part",
            };
            return Err(mismatch(detail));
        }
        (_, Some(found)) => found,
    };
    if let Some(feat) = &raw.img_feat {
        if feat.is_empty() || feat.iter().any(|v| !v.is_finite()) {
            return Err(mismatch("img_feat empty or non-finite"));
        }
    }
    Ok(Item {
        id: raw.id.clone(),
        modality,
        text,
        image_feat: raw.img_feat.clone(),
        image_ref: raw.img_ref.clone(),
    })
}

impl Item {
    pub fn to_record(&self) -> RawItem {
        RawItem {
            id: self.id.clone(),
            modality: Some(self.modality),
            txt: self.text.clone(),
            img_feat: self.image_feat.clone(),
            img_ref: self.image_ref.clone(),
        }
    }

    pub fn text(id: &str, text: &str) -> Self {
        Item {
            id: id.to_string(),
            modality: Modality::Text,
            text: Some(canonicalize_text(text)),
            image_feat: None,
            image_ref: None,
        }
    }

    pub fn image(id: &str, feat: Vec<f64>) -> Self {
        Item {
            id: id.to_string(),
            modality: Modality::Image,
            text: None,
            image_feat: Some(feat),
            image_ref: None,
        }
    }

    pub fn image_text(id: &str, text: &str, feat: Vec<f64>) -> Self {
        Item {
            id: id.to_string(),
            modality: Modality::ImageText,
            text: Some(canonicalize_text(text)),
            image_feat: Some(feat),
            image_ref: None,
        }
    }
}

/// Fail on the first repeated id.
pub fn check_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

/// Evaluation measure selected per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "R@5", alias = "recall@5")]
    RecallAt5,
    #[serde(rename = "R@10", alias = "recall@10")]
    RecallAt10,
    #[serde(rename = "nDCG@10", alias = "ndcg@10")]
    NdcgAt10,
    #[serde(rename = "mAP@5", alias = "map@5")]
    MapAt5,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::RecallAt5 => "R@5",
            MetricKind::RecallAt10 => "R@10",
            MetricKind::NdcgAt10 => "nDCG@10",
            MetricKind::MapAt5 => "mAP@5",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub dataset_id: String,
    pub instruction: String,
    pub desired_modality: Modality,
    pub metric: MetricKind,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.instruction.trim().is_empty() {
            return Err(Error::parse(
                format!("task {}", self.task_id),
                "instruction is empty",
            ));
        }
        if self.task_id.is_empty() || self.dataset_id.is_empty() {
            return Err(Error::parse("task", "empty task_id or dataset_id"));
        }
        Ok(())
    }
}

/// Graded relevance judgments, `qid -> doc_id -> grade`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: &str, doc_id: &str, grade: u32) {
        self.judgments
            .entry(qid.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }

    pub fn get(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn grade(&self, qid: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(qid)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    /// Doc ids with grade > 0.
    pub fn relevant(&self, qid: &str) -> BTreeSet<&str> {
        self.judgments
            .get(qid)
            .map(|m| {
                m.iter()
                    .filter(|(_, &g)| g > 0)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn qids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, docs)| docs.iter().map(move |(d, &g)| (q.as_str(), d.as_str(), g)))
    }

    /// Every judged doc must exist in the pool, every qid needs a positive.
    pub fn validate(&self, pool_ids: &HashSet<&str>) -> Result<()> {
        for (qid, docs) in &self.judgments {
            if !docs.values().any(|&g| g > 0) {
                return Err(Error::parse(
                    format!("qrels for {qid}"),
                    "no document with grade > 0",
                ));
            }
            if let Some(doc) = docs.keys().find(|d| !pool_ids.contains(d.as_str())) {
                return Err(Error::parse(
                    format!("qrels for {qid}"),
                    format!("doc {doc:?} not in candidate pool"),
                ));
            }
        }
        Ok(())
    }
}

/// Unit-norm f32 embedding of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub modality: Modality,
    pub vector: Vec<f32>,
}

pub const UNIT_NORM_TOL: f64 = 1e-5;

pub fn norm_f32(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, modality: Modality, vector: Vec<f32>) -> Result<Self> {
        let id = id.into();
        let norm = norm_f32(&vector);
        if !norm.is_finite() {
            return Err(Error::NonFinite("embedding"));
        }
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::parse(
                format!("embedding {id}"),
                format!("norm {norm} is not 1"),
            ));
        }
        Ok(EmbeddingRecord {
            id,
            modality,
            vector,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(id: &str, m: Option<Modality>, txt: Option<&str>, feat: Option<Vec<f64>>) -> RawItem {
        RawItem {
            id: id.into(),
            modality: m,
            txt: txt.map(String::from),
            img_feat: feat,
            img_ref: None,
        }
    }

    #[test]
    fn well_formed_text_item() {
        let item = validate_item(&raw("d1", Some(Modality::Text), Some("a cat"), None)).unwrap();
        assert_eq!(item.modality, Modality::Text);
        assert_eq!(item.text.as_deref(), Some("a cat"));
    }

    #[test]
    fn image_with_text_is_mismatch() {
        let err = validate_item(&raw("d2", Some(Modality::Image), Some("x"), None)).unwrap_err();
        assert!(matches!(err, Error::ModalityMismatch { .. }), "{err}");
    }

    #[test]
    fn image_text_item_ok() {
        let item = validate_item(&raw(
            "d3",
            Some(Modality::ImageText),
            Some("hat"),
            Some(vec![0.1, 0.2, 0.3]),
        ))
        .unwrap();
        assert_eq!(item.modality, Modality::ImageText);
    }

    #[test]
    fn whitespace_is_canonicalized() {
        let item = validate_item(&raw("d", None, Some("  a \t big\n\ncat "), None)).unwrap();
        assert_eq!(item.text.as_deref(), Some("a big cat"));
    }

    #[test]
    fn both_image_sources_rejected() {
        let mut r = raw("d", Some(Modality::Image), None, Some(vec![1.0]));
        r.img_ref = Some("x.bin".into());
        assert!(matches!(
            validate_item(&r),
            Err(Error::ModalityMismatch { .. })
        ));
    }

    #[test]
    fn query_modality_inferred() {
        let item = validate_item(&raw("q", None, Some("x"), Some(vec![1.0]))).unwrap();
        assert_eq!(item.modality, Modality::ImageText);
        assert!(validate_item(&raw("q", None, Some("   "), None)).is_err());
    }

    #[test]
    fn duplicate_ids_detected() {
        assert!(check_unique_ids(["a", "b"]).is_ok());
        let err = check_unique_ids(["a", "b", "a"]).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(id) if id == "a"));
    }

    #[test]
    fn modality_order_and_strings() {
        assert!(Modality::Text < Modality::Image && Modality::Image < Modality::ImageText);
        for m in Modality::ALL {
            assert_eq!(m.as_str().parse::<Modality>().unwrap(), m);
            assert_eq!(Modality::from_byte(m.to_byte()), Some(m));
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Modality>(&json).unwrap(), m);
        }
    }

    #[test]
    fn qrels_validation() {
        let mut q = Qrels::new();
        q.insert("q1", "d1", 1);
        q.insert("q1", "d2", 0);
        let pool: HashSet<&str> = ["d1", "d2"].into_iter().collect();
        q.validate(&pool).unwrap();
        let small: HashSet<&str> = ["d1"].into_iter().collect();
        assert!(q.validate(&small).is_err());
        let mut zero = Qrels::new();
        zero.insert("q2", "d1", 0);
        assert!(zero.validate(&pool).is_err());
        assert_eq!(q.relevant("q1").into_iter().collect::<Vec<_>>(), vec!["d1"]);
    }

    #[test]
    fn embedding_record_requires_unit_norm() {
        assert!(EmbeddingRecord::new("a", Modality::Text, vec![0.6, 0.8]).is_ok());
        assert!(EmbeddingRecord::new("a", Modality::Text, vec![0.6, 0.6]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_raw() -> impl Strategy<Value = RawItem> {
            (
                "[a-z]{1,6}",
                proptest::option::of("[ a-zA-Z\t]{0,20}"),
                proptest::option::of(proptest::collection::vec(-1.0f64..1.0, 1..6)),
                proptest::option::of(prop_oneof![
                    Just(Modality::Text),
                    Just(Modality::Image),
                    Just(Modality::ImageText)
                ]),
            )
                .prop_map(|(id, txt, img_feat, modality)| RawItem {
                    id,
                    modality,
                    txt,
                    img_feat,
                    img_ref: None,
                })
        }

        proptest! {
            #[test]
            fn validate_is_idempotent(r in arb_raw()) {
                if let Ok(item) = validate_item(&r) {
                    let again = validate_item(&item.to_record()).unwrap();
                    prop_assert_eq!(again, item);
                }
            }

            #[test]
            fn record_json_round_trips(r in arb_raw()) {
                if let Ok(item) = validate_item(&r) {
                    let line = serde_json::to_string(&item.to_record()).unwrap();
                    let back: RawItem = serde_json::from_str(&line).unwrap();
                    prop_assert_eq!(validate_item(&back).unwrap(), item);
                }
            }
        }
    }
}
