//! Line-delimited ingestion of corpora, queries, tasks and TREC qrels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{check_unique_ids, validate_item, Item, Qrels, RawItem, TaskSpec};

/// Parse one JSON object per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(r: impl Read, context: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("{context} line {}", i + 1), e))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(w: impl Write, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(w);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::parse("jsonl write", e))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn read_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(open(path)?, &path.display().to_string())
}

fn write_file<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_jsonl(File::create(path)?, records)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Item>> {
    let raw: Vec<RawItem> = read_file(path)?;
    let items = raw.iter().map(validate_item).collect::<Result<Vec<_>>>()?;
    check_unique_ids(items.iter().map(|i| i.id.as_str()))?;
    Ok(items)
}

pub fn save_corpus(path: &Path, items: &[Item]) -> Result<()> {
    let recs: Vec<RawItem> = items.iter().map(Item::to_record).collect();
    write_file(path, &recs)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub qid: String,
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img_feat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img_ref: Option<String>,
    #[serde(default)]
    pub pos_ids: Vec<String>,
}

/// A validated query: the query item (id = qid) plus its task and positives.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub item: Item,
    pub task_id: String,
    pub pos_ids: Vec<String>,
}

impl Query {
    pub fn qid(&self) -> &str {
        &self.item.id
    }

    pub fn to_record(&self) -> QueryRecord {
        QueryRecord {
            qid: self.item.id.clone(),
            task_id: self.task_id.clone(),
            txt: self.item.text.clone(),
            img_feat: self.item.image_feat.clone(),
            img_ref: self.item.image_ref.clone(),
            pos_ids: self.pos_ids.clone(),
        }
    }
}

pub fn validate_query(rec: &QueryRecord) -> Result<Query> {
    let item = validate_item(&RawItem {
        id: rec.qid.clone(),
        modality: None,
        txt: rec.txt.clone(),
        img_feat: rec.img_feat.clone(),
        img_ref: rec.img_ref.clone(),
    })?;
    if rec.task_id.is_empty() {
        return Err(Error::parse(format!("query {}", rec.qid), "empty task_id"));
    }
    Ok(Query {
        item,
        task_id: rec.task_id.clone(),
        pos_ids: rec.pos_ids.clone(),
    })
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let recs: Vec<QueryRecord> = read_file(path)?;
    let qs = recs
        .iter()
        .map(validate_query)
        .collect::<Result<Vec<_>>>()?;
    check_unique_ids(qs.iter().map(|q| q.qid()))?;
    Ok(qs)
}

pub fn save_queries(path: &Path, queries: &[Query]) -> Result<()> {
    let recs: Vec<QueryRecord> = queries.iter().map(Query::to_record).collect();
    write_file(path, &recs)
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>> {
    let tasks: Vec<TaskSpec> = read_file(path)?;
    for t in &tasks {
        t.validate()?;
    }
    check_unique_ids(tasks.iter().map(|t| t.task_id.as_str()))?;
    Ok(tasks)
}

pub fn save_tasks(path: &Path, tasks: &[TaskSpec]) -> Result<()> {
    write_file(path, tasks)
}

/// TREC qrels: `qid 0 doc_id grade`, whitespace separated.
pub fn read_qrels(r: impl Read) -> Result<Qrels> {
    let mut q = Qrels::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let ctx = || format!("qrels line {}", i + 1);
        if f.len() != 4 {
            return Err(Error::parse(
                ctx(),
                format!("expected 4 fields, got {}", f.len()),
            ));
        }
        let grade: u32 = f[3]
            .parse()
            .map_err(|_| Error::parse(ctx(), format!("bad grade {:?}", f[3])))?;
        q.insert(f[0], f[2], grade);
    }
    Ok(q)
}

pub fn write_qrels(w: impl Write, qrels: &Qrels) -> Result<()> {
    let mut w = BufWriter::new(w);
    for (qid, doc, grade) in qrels.iter() {
        writeln!(w, "{qid} 0 {doc} {grade}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    read_qrels(open(path)?)
}

pub fn save_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    write_qrels(File::create(path)?, qrels)
}

/// Qrels implied by the queries' `pos_ids`, all at grade 1.
pub fn qrels_from_queries(queries: &[Query]) -> Qrels {
    let mut q = Qrels::new();
    for query in queries {
        for p in &query.pos_ids {
            q.insert(query.qid(), p, 1);
        }
    }
    q
}
