use std::path::Path;

use crate::error::{Error, Result};

/// Token-id corpus: one sequence per line, whitespace-separated ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub sequences: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn parse(text: &str, vocab: usize) -> Result<Self> {
        let mut sequences = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let ids = line
                .split_whitespace()
                .map(|tok| {
                    let id: usize = tok.parse().map_err(|_| Error::Corpus {
                        line: i + 1,
                        msg: format!("`{tok}` is not a token id"),
                    })?;
                    if id >= vocab {
                        return Err(Error::Corpus {
                            line: i + 1,
                            msg: format!("token id {id} out of range for vocab {vocab}"),
                        });
                    }
                    Ok(id)
                })
                .collect::<Result<Vec<_>>>()?;
            if !ids.is_empty() {
                sequences.push(ids);
            }
        }
        Ok(Self { sequences })
    }

    pub fn read(path: impl AsRef<Path>, vocab: usize) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, vocab)
    }

    /// All tokens in file order.
    pub fn tokens(&self) -> Vec<usize> {
        self.sequences.iter().flatten().copied().collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for seq in &self.sequences {
            let line: Vec<String> = seq.iter().map(usize::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_skips_blanks() {
        let c = Corpus::parse("1 2 3\n\n  4\t5 \n", 10).unwrap();
        assert_eq!(c.sequences, vec![vec![1, 2, 3], vec![4, 5]]);
        assert_eq!(c.tokens(), vec![1, 2, 3, 4, 5]);
        assert_eq!(Corpus::parse(&c.to_text(), 10).unwrap(), c);
    }

    #[test]
    fn rejects_out_of_vocab_and_garbage() {
        assert!(matches!(
            Corpus::parse("1 10", 10),
            Err(Error::Corpus { line: 1, .. })
        ));
        assert!(matches!(
            Corpus::parse("1\nx", 10),
            Err(Error::Corpus { line: 2, .. })
        ));
    }
}
