//! JSON-lines files for corpora, QA sets and XCoT training sequences.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Granularity, ParallelPair, QaItem};
use crate::error::{Error, Result};

/// One line of a parallel corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusLine {
    pub a: String,
    pub b: String,
    pub granularity: Granularity,
    pub meaning_id: u64,
}

impl From<&ParallelPair> for CorpusLine {
    fn from(p: &ParallelPair) -> Self {
        CorpusLine { a: p.a.join(" "), b: p.b.join(" "), granularity: p.granularity, meaning_id: p.meaning_id }
    }
}

impl From<CorpusLine> for ParallelPair {
    fn from(l: CorpusLine) -> Self {
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect();
        ParallelPair { a: split(&l.a), b: split(&l.b), granularity: l.granularity, meaning_id: l.meaning_id }
    }
}

/// One line of an XCoT training file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XCoTLine {
    pub fact_id: usize,
    pub tokens: Vec<String>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parse every non-blank line; errors name the file and line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    write_jsonl(path, pairs.iter().map(CorpusLine::from))
}

pub fn read_pairs(path: &Path) -> Result<Vec<ParallelPair>> {
    Ok(read_jsonl::<CorpusLine>(path)?.into_iter().map(ParallelPair::from).collect())
}

pub fn write_qa(path: &Path, items: &[QaItem]) -> Result<()> {
    write_jsonl(path, items)
}

pub fn read_qa(path: &Path) -> Result<Vec<QaItem>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Lang;

    #[test]
    fn qa_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        let items = vec![QaItem { q: vec!["alice".into(), "likes".into(), "what".into()], gold: "tea".into(), lang: Lang::A, fact_id: 3 }];
        write_qa(&path, &items).unwrap();
        assert_eq!(read_qa(&path).unwrap(), items);
        std::fs::write(&path, "{\"q\": []}\n").unwrap();
        let err = read_qa(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn corpus_schema() {
        let p = ParallelPair { a: vec!["x".into(), "y".into()], b: vec!["u".into()], granularity: Granularity::Sentence, meaning_id: 4 };
        let line = serde_json::to_string(&CorpusLine::from(&p)).unwrap();
        assert_eq!(line, r#"{"a":"x y","b":"u","granularity":"sentence","meaning_id":4}"#);
    }
}
