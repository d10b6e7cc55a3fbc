//! Label taxonomy: character classes, row classes and the character → row
//! projection that supplies the auxiliary supervision signal.
//!
//! The blank symbol is not part of a [`LabelMap`]. Each output head appends
//! its own blank at index `num_classes`.
//!
//! # File format
//!
//! UTF-8 text. The first line is a header `#chars=<N> rows=<R>`, followed by
//! one record per character:
//!
//! ```text
//! #chars=4 rows=2
//! 0	0	ሀ
//! 1	0	ሁ
//! 2	1
//! 3	1	ሉ
//! ```
//!
//! Fields are tab separated: `char_id`, `row_id` and an optional display name.
//! [`LabelMap::to_file_string`] writes records sorted by character id, so a
//! canonical file survives load → serialize unchanged byte for byte.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors raised while parsing or querying a label map.
#[derive(Debug, Error)]
pub enum LabelMapError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate character id {0}")]
    DuplicateChar(usize),
    #[error("character id {0} has no row assigned")]
    MissingChar(usize),
    #[error("character id {char_id} maps to row {row_id}, but only {num_rows} rows are declared")]
    RowOutOfRange {
        char_id: usize,
        row_id: usize,
        num_rows: usize,
    },
    #[error("character id {char_id} out of range (map has {num_chars} characters)")]
    CharOutOfRange { char_id: usize, num_chars: usize },
    #[error("row {0} has no characters mapped to it")]
    EmptyRow(usize),
    #[error("label map must contain at least one character")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Character-id ↔ row-id taxonomy.
///
/// Immutable once constructed; every constructor validates the invariants
/// (total mapping, no empty rows).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    num_rows: usize,
    row_of: Vec<usize>,
    names: Vec<Option<String>>,
}

impl LabelMap {
    /// Builds a map from a dense `row_of` table. `names` may be empty.
    pub fn new(
        num_rows: usize,
        row_of: Vec<usize>,
        names: Vec<Option<String>>,
    ) -> Result<Self, LabelMapError> {
        if row_of.is_empty() {
            return Err(LabelMapError::Empty);
        }
        let names = if names.is_empty() {
            vec![None; row_of.len()]
        } else {
            names
        };
        if names.len() != row_of.len() {
            return Err(LabelMapError::Parse {
                line: 0,
                msg: format!(
                    "{} names given for {} characters",
                    names.len(),
                    row_of.len()
                ),
            });
        }
        let mut used = vec![false; num_rows];
        for (char_id, &row_id) in row_of.iter().enumerate() {
            if row_id >= num_rows {
                return Err(LabelMapError::RowOutOfRange {
                    char_id,
                    row_id,
                    num_rows,
                });
            }
            used[row_id] = true;
        }
        if let Some(row) = used.iter().position(|u| !u) {
            return Err(LabelMapError::EmptyRow(row));
        }
        Ok(Self {
            num_rows,
            row_of,
            names,
        })
    }

    /// A regular grid alphabet: `rows × cols` characters, character
    /// `r * cols + c` belonging to row `r`.
    pub fn grid(rows: usize, cols: usize) -> Self {
        let row_of = (0..rows * cols).map(|c| c / cols).collect();
        Self::new(rows, row_of, Vec::new()).expect("grid map is valid")
    }

    /// The bundled desk-scale alphabet: five consonant rows of four vowel
    /// orders each, named after the corresponding Ethiopic syllables.
    pub fn default_synthetic() -> Self {
        const NAMES: [[&str; 4]; 5] = [
            ["ሀ", "ሁ", "ሂ", "ሃ"],
            ["ለ", "ሉ", "ሊ", "ላ"],
            ["ሐ", "ሑ", "ሒ", "ሓ"],
            ["መ", "ሙ", "ሚ", "ማ"],
            ["ሠ", "ሡ", "ሢ", "ሣ"],
        ];
        let mut row_of = Vec::new();
        let mut names = Vec::new();
        for (row, syllables) in NAMES.iter().enumerate() {
            for s in syllables {
                row_of.push(row);
                names.push(Some((*s).to_string()));
            }
        }
        Self::new(NAMES.len(), row_of, names).expect("bundled map is valid")
    }

    pub fn num_chars(&self) -> usize {
        self.row_of.len()
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    /// Row of a single character.
    pub fn row(&self, char_id: usize) -> Result<usize, LabelMapError> {
        self.row_of
            .get(char_id)
            .copied()
            .ok_or(LabelMapError::CharOutOfRange {
                char_id,
                num_chars: self.num_chars(),
            })
    }

    pub fn name(&self, char_id: usize) -> Option<&str> {
        self.names.get(char_id).and_then(|n| n.as_deref())
    }

    /// Looks a character up by display name.
    pub fn char_by_name(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.as_deref() == Some(name))
    }

    /// Characters of `row`, in id order.
    pub fn chars_in_row(&self, row: usize) -> Vec<usize> {
        (0..self.num_chars())
            .filter(|&c| self.row_of[c] == row)
            .collect()
    }

    /// Position of `char_id` within its row (its "column").
    pub fn column(&self, char_id: usize) -> Result<usize, LabelMapError> {
        let row = self.row(char_id)?;
        Ok(self.row_of[..char_id].iter().filter(|&&r| r == row).count())
    }

    /// Element-wise projection of a character sequence onto row labels.
    pub fn rows_of(&self, chars: &[usize]) -> Result<Vec<usize>, LabelMapError> {
        chars.iter().map(|&c| self.row(c)).collect()
    }

    /// Parses the documented text format.
    pub fn parse(text: &str) -> Result<Self, LabelMapError> {
        let mut lines = text.lines().enumerate();
        let (num_chars, num_rows) = match lines.next() {
            Some((_, header)) => parse_header(header)?,
            None => {
                return Err(LabelMapError::Parse {
                    line: 1,
                    msg: "missing header".into(),
                })
            }
        };
        if num_chars == 0 {
            return Err(LabelMapError::Empty);
        }
        let mut row_of: Vec<Option<usize>> = vec![None; num_chars];
        let mut names: Vec<Option<String>> = vec![None; num_chars];
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let char_id = parse_field(fields.next(), "char_id", line_no)?;
            let row_id = parse_field(fields.next(), "row_id", line_no)?;
            let name = fields.next().map(str::to_string);
            if char_id >= num_chars {
                return Err(LabelMapError::CharOutOfRange {
                    char_id,
                    num_chars,
                });
            }
            if row_of[char_id].is_some() {
                return Err(LabelMapError::DuplicateChar(char_id));
            }
            if row_id >= num_rows {
                return Err(LabelMapError::RowOutOfRange {
                    char_id,
                    row_id,
                    num_rows,
                });
            }
            row_of[char_id] = Some(row_id);
            names[char_id] = name;
        }
        let row_of = row_of
            .into_iter()
            .enumerate()
            .map(|(c, r)| r.ok_or(LabelMapError::MissingChar(c)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(num_rows, row_of, names)
    }

    /// Reads and validates a label map file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LabelMapError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| LabelMapError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Canonical serialization (records sorted by character id).
    pub fn to_file_string(&self) -> String {
        let mut out = format!("#chars={} rows={}\n", self.num_chars(), self.num_rows);
        for (c, (&r, name)) in self.row_of.iter().zip(&self.names).enumerate() {
            match name {
                Some(n) => out.push_str(&format!("{c}\t{r}\t{n}\n")),
                None => out.push_str(&format!("{c}\t{r}\n")),
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LabelMapError> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|source| LabelMapError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_file_string().as_bytes()))
    }
}

fn parse_header(line: &str) -> Result<(usize, usize), LabelMapError> {
    let bad = |msg: &str| LabelMapError::Parse {
        line: 1,
        msg: msg.to_string(),
    };
    let rest = line
        .strip_prefix("#chars=")
        .ok_or_else(|| bad("header must start with `#chars=`"))?;
    let (chars, rows) = rest
        .split_once(" rows=")
        .ok_or_else(|| bad("header must contain ` rows=`"))?;
    let chars = chars.parse().map_err(|_| bad("bad character count"))?;
    let rows = rows.trim_end().parse().map_err(|_| bad("bad row count"))?;
    Ok((chars, rows))
}

fn parse_field(field: Option<&str>, what: &str, line: usize) -> Result<usize, LabelMapError> {
    let field = field.ok_or_else(|| LabelMapError::Parse {
        line,
        msg: format!("missing {what}"),
    })?;
    field.trim().parse().map_err(|_| LabelMapError::Parse {
        line,
        msg: format!("invalid {what} `{field}`"),
    })
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_fidel_sized_map_loads() {
        // 265 characters spread over 34 rows, mostly seven per row.
        let mut text = String::from("#chars=265 rows=34\n");
        for c in 0..265 {
            text.push_str(&format!("{}\t{}\n", c, (c / 8).min(33)));
        }
        let map = LabelMap::parse(&text).unwrap();
        assert_eq!(map.num_chars(), 265);
        assert_eq!(map.num_rows(), 34);
    }

    #[test]
    fn minimal_map() {
        let map = LabelMap::parse("#chars=1 rows=1\n0\t0\n").unwrap();
        assert_eq!((map.num_chars(), map.num_rows()), (1, 1));
        assert_eq!(map.rows_of(&[0]).unwrap(), vec![0]);
    }

    #[test]
    fn row_out_of_bounds_is_rejected() {
        let text = "#chars=4 rows=5\n0\t0\n1\t1\n2\t2\n3\t7\n";
        assert!(matches!(
            LabelMap::parse(text),
            Err(LabelMapError::RowOutOfRange { char_id: 3, row_id: 7, num_rows: 5 })
        ));
    }

    #[test]
    fn duplicate_missing_and_empty_rows() {
        assert!(matches!(
            LabelMap::parse("#chars=2 rows=1\n0\t0\n0\t0\n"),
            Err(LabelMapError::DuplicateChar(0))
        ));
        assert!(matches!(
            LabelMap::parse("#chars=2 rows=1\n0\t0\n"),
            Err(LabelMapError::MissingChar(1))
        ));
        assert!(matches!(
            LabelMap::parse("#chars=2 rows=3\n0\t0\n1\t2\n"),
            Err(LabelMapError::EmptyRow(1))
        ));
        assert!(matches!(
            LabelMap::parse("chars=2\n"),
            Err(LabelMapError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            LabelMap::parse("#chars=1 rows=1\nx\t0\n"),
            Err(LabelMapError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn projection_examples() {
        let map = LabelMap::new(3, vec![0, 0, 0, 0, 0, 1, 1, 2], Vec::new()).unwrap();
        assert_eq!(map.rows_of(&[5, 6, 7]).unwrap(), vec![1, 1, 2]);
        assert_eq!(map.rows_of(&[]).unwrap(), Vec::<usize>::new());
        assert!(matches!(
            map.rows_of(&[8]),
            Err(LabelMapError::CharOutOfRange { char_id: 8, .. })
        ));
    }

    #[test]
    fn default_map_round_trips_with_names() {
        let map = LabelMap::default_synthetic();
        assert_eq!(map.num_chars(), 20);
        assert_eq!(map.num_rows(), 5);
        let text = map.to_file_string();
        let back = LabelMap::parse(&text).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.to_file_string(), text);
        assert_eq!(map.char_by_name("ሉ"), Some(5));
        assert_eq!(map.column(5).unwrap(), 1);
    }

    fn arb_map() -> impl Strategy<Value = LabelMap> {
        (1usize..6, 1usize..5).prop_flat_map(|(rows, extra)| {
            proptest::collection::vec(0..rows, extra).prop_map(move |tail| {
                let mut row_of: Vec<usize> = (0..rows).collect();
                row_of.extend(tail);
                LabelMap::new(rows, row_of, Vec::new()).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn rows_of_is_a_homomorphism(map in arb_map(), a in proptest::collection::vec(0usize..64, 0..8), b in proptest::collection::vec(0usize..64, 0..8)) {
            let n = map.num_chars();
            let a: Vec<usize> = a.into_iter().map(|c| c % n).collect();
            let b: Vec<usize> = b.into_iter().map(|c| c % n).collect();
            let ra = map.rows_of(&a).unwrap();
            let rb = map.rows_of(&b).unwrap();
            prop_assert_eq!(ra.len(), a.len());
            let ab: Vec<usize> = a.iter().chain(&b).copied().collect();
            let mut expected = ra.clone();
            expected.extend(rb);
            prop_assert_eq!(map.rows_of(&ab).unwrap(), expected);
        }

        #[test]
        fn serialization_is_identity(map in arb_map()) {
            let text = map.to_file_string();
            let back = LabelMap::parse(&text).unwrap();
            prop_assert_eq!(back.to_file_string(), text);
            prop_assert_eq!(back, map);
        }
    }
}
