//! Stream items and their JSONL encoding.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Result, SageError};

/// One streamed question with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub question: String,
    #[serde(rename = "full prompt")]
    pub full_prompt: String,
    #[serde(rename = "real-answer")]
    pub real_answer: String,
    /// 0 = in-distribution, 1 = out-of-distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    /// Generator template, when known. Only used for reporting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

impl Sample {
    pub fn new(question: impl Into<String>, answer: impl Into<String>, label: Option<u8>) -> Self {
        let question = question.into();
        Sample {
            full_prompt: format!("Question: {question}\nAnswer:"),
            question,
            real_answer: answer.into(),
            label,
            template: None,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if self.real_answer.trim().is_empty() {
            return Err("real-answer is empty".into());
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(format!("label must be 0 or 1, got {l}"));
            }
        }
        Ok(())
    }
}

/// Parses JSONL from a reader. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn read_jsonl_from(reader: impl BufRead, origin: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let data_err = |message: String| SageError::Data {
            path: origin.to_owned(),
            line: line_no,
            message,
        };
        let line = line.map_err(|e| data_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| data_err(e.to_string()))?;
        sample.validate().map_err(data_err)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| SageError::io(path, e))?;
    read_jsonl_from(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| SageError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(w, "{line}").map_err(|e| SageError::io(path, e))?;
    }
    w.flush().map_err(|e| SageError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_names_follow_the_dataset() {
        let s = Sample::new("What is 2 plus 3?", "5", Some(0));
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"full prompt\""));
        assert!(json.contains("\"real-answer\":\"5\""));
        let back: Sample = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn errors_name_the_line() {
        let text = "{\"question\":\"q\",\"full prompt\":\"p\",\"real-answer\":\"1\"}\n\nnot json\n";
        let err = read_jsonl_from(text.as_bytes(), "stream.jsonl").unwrap_err();
        match err {
            SageError::Data { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        let empty_answer = "{\"question\":\"q\",\"full prompt\":\"p\",\"real-answer\":\" \"}\n";
        assert!(read_jsonl_from(empty_answer.as_bytes(), "x").is_err());
    }
}
