//! Pretrained word vectors in the whitespace-separated text format
//! (`token v1 ... vd` per line) and the category query matrix built from
//! them.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::hierarchy::Hierarchy;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: vector has {got} components, expected {expected}")]
    Dimension { line: usize, got: usize, expected: usize },
    #[error("no word vectors found")]
    NoEntries,
    #[error("label is empty")]
    EmptyLabel,
    #[error("token {token:?} of label {label:?} is not in the vocabulary")]
    OutOfVocabulary { token: String, label: String },
    #[error("query for {label:?} is the zero vector")]
    ZeroQuery { label: String },
}

#[derive(Debug, Clone)]
pub struct WordVectorTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl WordVectorTable {
    pub fn load(path: &Path, expected_dim: usize) -> Result<Self, EmbeddingError> {
        let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, expected_dim)
    }

    /// Strict parse: any malformed or wrong-width line is an error naming
    /// its line number. Repeated tokens keep the last vector.
    pub fn parse(text: &str, expected_dim: usize) -> Result<Self, EmbeddingError> {
        let mut entries = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap_or_default().to_lowercase();
            let vector = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| EmbeddingError::Parse {
                        line: line_no,
                        message: format!("{f:?} is not a number"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if vector.len() != expected_dim {
                return Err(EmbeddingError::Dimension {
                    line: line_no,
                    got: vector.len(),
                    expected: expected_dim,
                });
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::Parse {
                    line: line_no,
                    message: "non-finite component".into(),
                });
            }
            entries.insert(token, vector);
        }
        if entries.is_empty() {
            return Err(EmbeddingError::NoEntries);
        }
        Ok(Self {
            dim: expected_dim,
            entries,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(&token.to_lowercase()).map(Vec::as_slice)
    }

    /// Vector for a category label: the token's vector, or the mean over the
    /// tokens of a multi-word label.
    pub fn embed_label(&self, label: &str) -> Result<Vec<f64>, EmbeddingError> {
        let tokens = label_tokens(label);
        if tokens.is_empty() {
            return Err(EmbeddingError::EmptyLabel);
        }
        let mut sum = vec![0.0; self.dim];
        for token in &tokens {
            let v = self
                .entries
                .get(token)
                .ok_or_else(|| EmbeddingError::OutOfVocabulary {
                    token: token.clone(),
                    label: label.to_string(),
                })?;
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
        }
        let n = tokens.len() as f64;
        Ok(sum.into_iter().map(|s| s / n).collect())
    }
}

/// Lowercased tokens of a label split on whitespace, underscores and
/// hyphens.
pub fn label_tokens(label: &str) -> Vec<String> {
    label
        .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// One raw word-vector row per category, in canonical category order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMatrix {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl QueryMatrix {
    pub fn from_rows(dim: usize, rows: Vec<Vec<f64>>) -> Self {
        assert!(rows.iter().all(|r| r.len() == dim), "ragged query rows");
        Self { dim, rows }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Embeds every category of `h`. Rows keep the table's width; mapping to the
/// model width is a learned projection owned by the model.
pub fn build_query_matrix(table: &WordVectorTable, h: &Hierarchy) -> Result<QueryMatrix, EmbeddingError> {
    let rows = h
        .canonical_order()
        .into_iter()
        .map(|id| {
            let label = h.name(id);
            let v = table.embed_label(label)?;
            if v.iter().all(|&x| x == 0.0) {
                return Err(EmbeddingError::ZeroQuery {
                    label: label.to_string(),
                });
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(QueryMatrix {
        dim: table.dim(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "the 0.1 0.2 0.3 0.4\nBird 1 0 0 0\nsmall 0 1 0 0\n";

    #[test]
    fn parses_small_table() {
        let t = WordVectorTable::parse(SMALL, 4).unwrap();
        assert_eq!((t.len(), t.dim()), (3, 4));
        assert_eq!(t.get("BIRD").unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn malformed_line_is_reported() {
        let mut text = String::new();
        for i in 0..100 {
            if i == 41 {
                text.push_str("bad 0.1 zz 0.3\n");
            } else {
                text.push_str(&format!("w{i} 0.1 0.2 0.3\n"));
            }
        }
        let err = WordVectorTable::parse(&text, 3).unwrap_err();
        assert!(matches!(err, EmbeddingError::Parse { line: 42, .. }), "{err}");
        let err = WordVectorTable::parse("a 1 2\n", 3).unwrap_err();
        assert!(matches!(err, EmbeddingError::Dimension { line: 1, got: 2, expected: 3 }));
        assert!(matches!(WordVectorTable::parse("\n\n", 3), Err(EmbeddingError::NoEntries)));
    }

    #[test]
    fn label_embedding() {
        let t = WordVectorTable::parse(SMALL, 4).unwrap();
        assert_eq!(t.embed_label("bird").unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.embed_label("Small_Bird").unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(t.embed_label("small-BIRD").unwrap(), t.embed_label("small bird").unwrap());
        let err = t.embed_label("small heron").unwrap_err();
        assert!(matches!(err, EmbeddingError::OutOfVocabulary { ref token, .. } if token == "heron"));
        assert!(matches!(t.embed_label(" _ "), Err(EmbeddingError::EmptyLabel)));
    }

    #[test]
    fn load_is_line_order_independent() {
        let reversed: String = SMALL.lines().rev().map(|l| format!("{l}\n")).collect();
        let a = WordVectorTable::parse(SMALL, 4).unwrap();
        let b = WordVectorTable::parse(&reversed, 4).unwrap();
        for tok in ["the", "bird", "small"] {
            assert_eq!(a.get(tok), b.get(tok));
        }
    }

    #[test]
    fn query_rows_follow_canonical_order() {
        let t = WordVectorTable::parse(SMALL, 4).unwrap();
        let h = Hierarchy::parse("r\t-\nbird\tr\nsmall\tbird\nthe\tbird\n").unwrap();
        let q = build_query_matrix(&t, &h).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q.rows()[1], t.embed_label("small").unwrap());

        let swapped = Hierarchy::parse("r\t-\nbird\tr\nthe\tbird\nsmall\tbird\n").unwrap();
        let q2 = build_query_matrix(&t, &swapped).unwrap();
        assert_eq!(q.rows()[1], q2.rows()[2]);
        assert_eq!(q.rows()[2], q2.rows()[1]);
    }
}
