//! Plain-text word-vector tables: one token per line followed by its
//! space-separated components.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        WordVectors {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape(
                "word vector",
                self.dim,
                vector.len(),
            ));
        }
        self.vectors.insert(token.into(), vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file), path)
    }

    pub fn read<R: BufRead>(reader: R, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: PathBuf::from(origin),
            line,
            message,
        };
        let mut table: Option<WordVectors> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else {
                continue;
            };
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| parse_err(i + 1, format!("bad component `{f}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(parse_err(i + 1, format!("token `{token}` has no components")));
            }
            let table = table.get_or_insert_with(|| WordVectors::new(values.len()));
            if values.len() != table.dim {
                return Err(parse_err(
                    i + 1,
                    format!("expected {} components, found {}", table.dim, values.len()),
                ));
            }
            table.vectors.insert(token.to_owned(), values);
        }
        table.ok_or_else(|| parse_err(0, "no word vectors found".into()))
    }

    /// Writes tokens in sorted order so equal tables produce identical files.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tokens: Vec<_> = self.vectors.keys().collect();
        tokens.sort();
        let mut out = Vec::new();
        for token in tokens {
            write!(out, "{token}").unwrap();
            for v in &self.vectors[token] {
                write!(out, " {v}").unwrap();
            }
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
