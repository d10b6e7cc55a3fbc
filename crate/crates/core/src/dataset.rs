//! Word-image dataset construction: word lists, writer-disjoint splits,
//! rendering through a glyph atlas, and the on-disk manifest.
//!
//! Every word of a split is written by every writer of that split, so a
//! split holds exactly `words × writers` samples.
//!
//! # Manifest format
//!
//! ```text
//! #auxctc-manifest v1
//! #seed=7
//! #label_map=label_map.tsv sha256=<hex>
//! #split	word_id	writer_id	image	width	chars	rows	sha256
//! train	0	0	images/train/00000_000.png	96	1,5,3	0,1,0	<hex>
//! ```
//!
//! Records are tab separated. `chars` and `rows` are comma-separated ids,
//! `image` is relative to the manifest's directory and `sha256` covers the
//! raw 8-bit pixel buffer (row-major), not the PNG bytes.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alphabet::{hex, LabelMap, LabelMapError};
use crate::glyphs::{compose_word_image, Bitmap, GlyphError, GlyphSource, WordSample, GLYPH_SIZE};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const LABEL_MAP_FILE: &str = "label_map.tsv";
const MANIFEST_MAGIC: &str = "#auxctc-manifest v1";
const COLUMNS: &str = "#split\tword_id\twriter_id\timage\twidth\tchars\trows\tsha256";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Glyph(#[from] GlyphError),
    #[error(transparent)]
    Label(#[from] LabelMapError),
    #[error("writer {writer} appears in both {first} and {second}")]
    OverlappingWriters {
        writer: usize,
        first: Split,
        second: Split,
    },
    #[error("split {0} has no writers")]
    NoWriters(Split),
    #[error("word {index} has length {len}, outside [{min}, {max}]")]
    WordLength {
        index: usize,
        len: usize,
        min: usize,
        max: usize,
    },
    #[error("splits need {needed} words but the list has {available}")]
    NotEnoughWords { needed: usize, available: usize },
    #[error("word list is empty")]
    EmptyWordList,
    #[error("word list line {line}: unknown token `{token}`")]
    UnknownToken { line: usize, token: String },
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing image {0}")]
    MissingImage(String),
    #[error("{path}: declared {declared_w}×32, file is {found_w}×{found_h}")]
    DimensionMismatch {
        path: String,
        declared_w: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("{0}: pixel checksum mismatch")]
    ChecksumMismatch(String),
    #[error("label map {path} hash {found} does not match manifest hash {expected}")]
    LabelMapHash {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

/// Writers and word count of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub split: Split,
    pub writers: Vec<usize>,
    /// Number of distinct words; `None` takes the default share of the list.
    pub words: Option<usize>,
}

/// Writer and word allocation for train, validation and test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub plans: Vec<SplitPlan>,
}

impl SplitSpec {
    /// Consecutive writer ids: `train` writers first, then validation, then test.
    pub fn from_counts(writers: [usize; 3], words: Option<[usize; 3]>) -> Self {
        let mut next = 0;
        let plans = Split::ALL
            .iter()
            .enumerate()
            .map(|(i, &split)| {
                let ids = (next..next + writers[i]).collect();
                next += writers[i];
                SplitPlan {
                    split,
                    writers: ids,
                    words: words.map(|w| w[i]),
                }
            })
            .collect();
        Self { plans }
    }

    /// 100/10/10 writers with 2561/320/320 words per split.
    pub fn full_scale() -> Self {
        Self::from_counts([100, 10, 10], Some([2561, 320, 320]))
    }

    pub fn plan(&self, split: Split) -> Option<&SplitPlan> {
        self.plans.iter().find(|p| p.split == split)
    }

    /// Rejects empty splits and writers shared between splits.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut owner: HashMap<usize, Split> = HashMap::new();
        for plan in &self.plans {
            if plan.writers.is_empty() {
                return Err(DatasetError::NoWriters(plan.split));
            }
            for &w in &plan.writers {
                if let Some(&first) = owner.get(&w) {
                    return Err(DatasetError::OverlappingWriters {
                        writer: w,
                        first,
                        second: plan.split,
                    });
                }
                owner.insert(w, plan.split);
            }
        }
        Ok(())
    }

    /// Words allotted to each split when drawing from a list of `available`.
    pub fn word_counts(&self, available: usize) -> Result<Vec<usize>, DatasetError> {
        let explicit: usize = self.plans.iter().filter_map(|p| p.words).sum();
        let defaults = self.plans.iter().filter(|p| p.words.is_none()).count();
        let counts: Vec<usize> = if defaults == 0 {
            self.plans.iter().map(|p| p.words.unwrap()).collect()
        } else {
            // Held-out splits get a tenth of the list each (at least one
            // word); train takes what remains.
            let held_out = (available / 10).max(1);
            let mut remaining = available.saturating_sub(explicit);
            let mut counts = vec![0; self.plans.len()];
            for (i, p) in self.plans.iter().enumerate() {
                if let Some(w) = p.words {
                    counts[i] = w;
                } else if p.split != Split::Train {
                    counts[i] = held_out.min(remaining);
                    remaining -= counts[i];
                }
            }
            for (i, p) in self.plans.iter().enumerate() {
                if p.words.is_none() && p.split == Split::Train {
                    counts[i] = remaining;
                    remaining = 0;
                }
            }
            counts
        };
        let needed: usize = counts.iter().sum();
        if needed > available || counts.iter().any(|&c| c == 0) {
            return Err(DatasetError::NotEnoughWords {
                needed: needed.max(self.plans.len()),
                available,
            });
        }
        Ok(counts)
    }

    /// `words × writers` per split, without rendering anything.
    pub fn sample_counts(&self, available_words: usize) -> Result<Vec<(Split, usize)>, DatasetError> {
        self.validate()?;
        let counts = self.word_counts(available_words)?;
        Ok(self
            .plans
            .iter()
            .zip(counts)
            .map(|(p, words)| (p.split, words * p.writers.len()))
            .collect())
    }
}

/// Inclusive word-length bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LengthBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for LengthBounds {
    fn default() -> Self {
        Self { min: 2, max: 12 }
    }
}

/// Parses a word list: one word per line, whitespace-separated character
/// ids or display names. A token that is neither is split into Unicode
/// scalars, each looked up by name. Blank lines and `#` comments are skipped.
pub fn parse_word_list(text: &str, map: &LabelMap) -> Result<Vec<Vec<usize>>, DatasetError> {
    let mut words = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut word = Vec::new();
        for token in line.split_whitespace() {
            if let Ok(id) = token.parse::<usize>() {
                map.row(id)?;
                word.push(id);
            } else if let Some(id) = map.char_by_name(token) {
                word.push(id);
            } else {
                let mut buf = [0u8; 4];
                for ch in token.chars() {
                    let id = map.char_by_name(ch.encode_utf8(&mut buf)).ok_or_else(|| {
                        DatasetError::UnknownToken {
                            line: i + 1,
                            token: token.to_string(),
                        }
                    })?;
                    word.push(id);
                }
            }
        }
        words.push(word);
    }
    Ok(words)
}

/// Serializes words as space-separated ids, one per line.
pub fn format_word_list(words: &[Vec<usize>]) -> String {
    words
        .iter()
        .map(|w| format!("{}\n", join(w, " ")))
        .collect()
}

/// Draws `count` distinct random words with lengths in `bounds`.
pub fn random_word_list(
    map: &LabelMap,
    count: usize,
    bounds: LengthBounds,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut words = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while words.len() < count && attempts < count * 1000 + 1000 {
        attempts += 1;
        let len = rng.random_range(bounds.min..=bounds.max);
        let word: Vec<usize> = (0..len)
            .map(|_| rng.random_range(0..map.num_chars()))
            .collect();
        if seen.insert(word.clone()) {
            words.push(word);
        }
    }
    words
}

/// One sample to render: which word, which writer, which split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedSample {
    pub split: Split,
    pub word_id: usize,
    pub writer_id: usize,
}

/// Deterministic assignment of shuffled words and writers to splits.
#[derive(Debug, Clone)]
pub struct DatasetPlan {
    pub seed: u64,
    /// Words indexed by `word_id` (shuffled order of the input list).
    pub words: Vec<Vec<usize>>,
    pub splits: Vec<(Split, Vec<usize>, Vec<usize>)>,
}

impl DatasetPlan {
    pub fn samples(&self) -> impl Iterator<Item = PlannedSample> + '_ {
        self.splits.iter().flat_map(|(split, word_ids, writers)| {
            writers.iter().flat_map(move |&writer_id| {
                word_ids.iter().map(move |&word_id| PlannedSample {
                    split: *split,
                    word_id,
                    writer_id,
                })
            })
        })
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits
            .iter()
            .filter(|(s, _, _)| *s == split)
            .map(|(_, words, writers)| words.len() * writers.len())
            .sum()
    }
}

/// Validates the inputs and fixes which words and writers go to each split.
pub fn plan_dataset(
    words: &[Vec<usize>],
    spec: &SplitSpec,
    map: &LabelMap,
    bounds: LengthBounds,
    seed: u64,
) -> Result<DatasetPlan, DatasetError> {
    if words.is_empty() {
        return Err(DatasetError::EmptyWordList);
    }
    spec.validate()?;
    for (index, w) in words.iter().enumerate() {
        if w.len() < bounds.min || w.len() > bounds.max {
            return Err(DatasetError::WordLength {
                index,
                len: w.len(),
                min: bounds.min,
                max: bounds.max,
            });
        }
        map.rows_of(w)?;
    }
    let counts = spec.word_counts(words.len())?;
    let mut shuffled = words.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut next = 0;
    let splits = spec
        .plans
        .iter()
        .zip(counts)
        .map(|(plan, n)| {
            let ids = (next..next + n).collect();
            next += n;
            (plan.split, ids, plan.writers.clone())
        })
        .collect();
    Ok(DatasetPlan {
        seed,
        words: shuffled,
        splits,
    })
}

/// Renders one planned sample.
pub fn render_sample(
    plan: &DatasetPlan,
    sample: &PlannedSample,
    atlas: &dyn GlyphSource,
    map: &LabelMap,
) -> Result<WordSample, DatasetError> {
    Ok(compose_word_image(
        &plan.words[sample.word_id],
        sample.writer_id,
        sample.word_id,
        atlas,
        map,
    )?)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub split: Split,
    pub word_id: usize,
    pub writer_id: usize,
    pub image: String,
    pub width: usize,
    pub chars: Vec<usize>,
    pub rows: Vec<usize>,
    pub checksum: String,
}

/// Parsed manifest plus the directory it lives in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub seed: u64,
    pub label_map_file: String,
    pub label_map_hash: String,
    pub records: Vec<ManifestRecord>,
}

fn join(ids: &[usize], sep: &str) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

pub fn pixel_checksum(bitmap: &Bitmap) -> String {
    hex(&Sha256::digest(bitmap.pixels()))
}

fn image_rel_path(split: Split, word_id: usize, writer_id: usize) -> String {
    format!("images/{split}/{word_id:05}_{writer_id:03}.png")
}

impl Manifest {
    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "{MANIFEST_MAGIC}\n#seed={}\n#label_map={} sha256={}\n{COLUMNS}\n",
            self.seed, self.label_map_file, self.label_map_hash
        );
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.split,
                r.word_id,
                r.writer_id,
                r.image,
                r.width,
                join(&r.chars, ","),
                join(&r.rows, ","),
                r.checksum
            ));
        }
        out
    }

    /// Parses manifest text; `root` resolves relative image paths.
    pub fn parse(text: &str, root: &Path) -> Result<Self, DatasetError> {
        let bad = |line: usize, msg: &str| DatasetError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_MAGIC) {
            return Err(bad(1, "missing manifest header"));
        }
        let seed = lines
            .next()
            .and_then(|l| l.strip_prefix("#seed="))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(2, "expected `#seed=<n>`"))?;
        let (label_map_file, label_map_hash) = lines
            .next()
            .and_then(|l| l.strip_prefix("#label_map="))
            .and_then(|l| l.split_once(" sha256="))
            .ok_or_else(|| bad(3, "expected `#label_map=<file> sha256=<hex>`"))?;
        if lines.next() != Some(COLUMNS) {
            return Err(bad(4, "unexpected column header"));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 5;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(bad(line_no, "expected 8 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(line_no, "bad integer"));
            let ids = |s: &str| -> Result<Vec<usize>, DatasetError> {
                if s.is_empty() {
                    return Ok(Vec::new());
                }
                s.split(',').map(num).collect()
            };
            let record = ManifestRecord {
                split: f[0].parse().map_err(|e: String| bad(line_no, &e))?,
                word_id: num(f[1])?,
                writer_id: num(f[2])?,
                image: f[3].to_string(),
                width: num(f[4])?,
                chars: ids(f[5])?,
                rows: ids(f[6])?,
                checksum: f[7].to_string(),
            };
            if record.rows.len() != record.chars.len() {
                return Err(bad(line_no, "chars and rows differ in length"));
            }
            if record.width != GLYPH_SIZE * record.chars.len() {
                return Err(bad(line_no, "width is not 32 × number of characters"));
            }
            records.push(record);
        }
        Ok(Self {
            root: root.to_path_buf(),
            seed,
            label_map_file: label_map_file.to_string(),
            label_map_hash: label_map_hash.to_string(),
            records,
        })
    }

    /// Records of one split, in manifest order.
    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split_records(split).count()
    }

    /// Distinct writers of a split.
    pub fn writers(&self, split: Split) -> Vec<usize> {
        let mut w: Vec<usize> = self.split_records(split).map(|r| r.writer_id).collect();
        w.sort_unstable();
        w.dedup();
        w
    }

    /// Fails if any writer contributes to more than one split.
    pub fn check_writer_disjointness(&self) -> Result<(), DatasetError> {
        let mut owner: HashMap<usize, Split> = HashMap::new();
        for r in &self.records {
            match owner.get(&r.writer_id) {
                Some(&s) if s != r.split => {
                    let (first, second) = if s < r.split { (s, r.split) } else { (r.split, s) };
                    return Err(DatasetError::OverlappingWriters {
                        writer: r.writer_id,
                        first,
                        second,
                    });
                }
                _ => {
                    owner.insert(r.writer_id, r.split);
                }
            }
        }
        Ok(())
    }

    /// Loads the referenced label map and checks its hash.
    pub fn label_map(&self) -> Result<LabelMap, DatasetError> {
        let path = self.root.join(&self.label_map_file);
        let map = LabelMap::load(&path)?;
        let found = map.content_hash();
        if found != self.label_map_hash {
            return Err(DatasetError::LabelMapHash {
                path: path.display().to_string(),
                expected: self.label_map_hash.clone(),
                found,
            });
        }
        Ok(map)
    }

    /// Reads one record's image and verifies dimensions and checksum.
    pub fn load_sample(&self, record: &ManifestRecord) -> Result<WordSample, DatasetError> {
        let path = self.root.join(&record.image);
        if !path.exists() {
            return Err(DatasetError::MissingImage(path.display().to_string()));
        }
        let image = Bitmap::load_png(&path)?;
        if image.height() != GLYPH_SIZE || image.width() != record.width {
            return Err(DatasetError::DimensionMismatch {
                path: path.display().to_string(),
                declared_w: record.width,
                found_w: image.width(),
                found_h: image.height(),
            });
        }
        if pixel_checksum(&image) != record.checksum {
            return Err(DatasetError::ChecksumMismatch(path.display().to_string()));
        }
        Ok(WordSample {
            image,
            chars: record.chars.clone(),
            rows: record.rows.clone(),
            writer_id: record.writer_id,
            word_id: record.word_id,
        })
    }

    /// Streams the samples of a split in manifest order.
    pub fn iter_split(
        &self,
        split: Split,
    ) -> impl Iterator<Item = Result<WordSample, DatasetError>> + '_ {
        self.split_records(split).map(|r| self.load_sample(r))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<WordSample>, DatasetError> {
        self.iter_split(split).collect()
    }
}

/// Reads a manifest and checks that every image exists with its declared
/// dimensions and that writers are split-disjoint. Pixel checksums are
/// verified when samples are read.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let manifest = Manifest::parse(&text, root)?;
    manifest.check_writer_disjointness()?;
    for r in &manifest.records {
        let img = manifest.root.join(&r.image);
        if !img.exists() {
            return Err(DatasetError::MissingImage(img.display().to_string()));
        }
        let (w, h) = image::image_dimensions(&img).map_err(|source| {
            DatasetError::Glyph(GlyphError::Image {
                path: img.display().to_string(),
                source,
            })
        })?;
        if h as usize != GLYPH_SIZE || w as usize != r.width {
            return Err(DatasetError::DimensionMismatch {
                path: img.display().to_string(),
                declared_w: r.width,
                found_w: w as usize,
                found_h: h as usize,
            });
        }
    }
    Ok(manifest)
}

/// Renders every planned sample into `out` and writes the label map and the
/// manifest. Output appears only if everything succeeds: files are staged in
/// a scratch directory and moved into place at the end.
pub fn build_dataset(
    plan: &DatasetPlan,
    atlas: &dyn GlyphSource,
    map: &LabelMap,
    out: &Path,
) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let staging = out.join(".staging");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    let result = write_dataset(plan, atlas, map, &staging);
    let manifest = match result {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    for name in ["images", MANIFEST_FILE, LABEL_MAP_FILE] {
        let target = out.join(name);
        if target.is_dir() {
            fs::remove_dir_all(&target).map_err(io_err(&target))?;
        }
        fs::rename(staging.join(name), &target).map_err(io_err(&target))?;
    }
    fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    Ok(Manifest {
        root: out.to_path_buf(),
        ..manifest
    })
}

fn write_dataset(
    plan: &DatasetPlan,
    atlas: &dyn GlyphSource,
    map: &LabelMap,
    dir: &Path,
) -> Result<Manifest, DatasetError> {
    for split in Split::ALL {
        let d = dir.join("images").join(split.as_str());
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    map.save(dir.join(LABEL_MAP_FILE))?;
    let mut records = Vec::with_capacity(plan.samples().count());
    for planned in plan.samples() {
        let sample = render_sample(plan, &planned, atlas, map)?;
        let rel = image_rel_path(planned.split, planned.word_id, planned.writer_id);
        sample.image.save_png(&dir.join(&rel))?;
        records.push(ManifestRecord {
            split: planned.split,
            word_id: planned.word_id,
            writer_id: planned.writer_id,
            image: rel,
            width: sample.image.width(),
            chars: sample.chars,
            rows: sample.rows,
            checksum: pixel_checksum(&sample.image),
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        seed: plan.seed,
        label_map_file: LABEL_MAP_FILE.to_string(),
        label_map_hash: map.content_hash(),
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_file_string()).map_err(io_err(&path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphs::SynthAtlas;

    #[test]
    fn full_scale_counts() {
        let counts = SplitSpec::full_scale().sample_counts(2561 + 320 + 320).unwrap();
        assert_eq!(
            counts,
            vec![
                (Split::Train, 256_100),
                (Split::Validation, 3_200),
                (Split::Test, 3_200)
            ]
        );
    }

    #[test]
    fn overlapping_writers_are_rejected() {
        let spec = SplitSpec {
            plans: vec![
                SplitPlan {
                    split: Split::Train,
                    writers: vec![0, 1],
                    words: None,
                },
                SplitPlan {
                    split: Split::Validation,
                    writers: vec![1],
                    words: None,
                },
            ],
        };
        assert!(matches!(
            spec.validate(),
            Err(DatasetError::OverlappingWriters { writer: 1, .. })
        ));
    }

    #[test]
    fn default_word_shares() {
        let spec = SplitSpec::from_counts([3, 1, 1], None);
        assert_eq!(spec.word_counts(100).unwrap(), vec![80, 10, 10]);
        assert_eq!(spec.word_counts(3).unwrap(), vec![1, 1, 1]);
        assert!(spec.word_counts(2).is_err());
        let explicit = SplitSpec::from_counts([1, 1, 1], Some([5, 2, 2]));
        assert!(matches!(
            explicit.word_counts(8),
            Err(DatasetError::NotEnoughWords { needed: 9, available: 8 })
        ));
    }

    #[test]
    fn word_list_parsing() {
        let map = LabelMap::default_synthetic();
        let words = parse_word_list("# comment\n0 5 3\nሀ ሉ\nሀሉሂ\n\n", &map).unwrap();
        assert_eq!(words, vec![vec![0, 5, 3], vec![0, 5], vec![0, 5, 2]]);
        assert!(matches!(
            parse_word_list("xyz\n", &map),
            Err(DatasetError::UnknownToken { line: 1, .. })
        ));
        assert!(parse_word_list("0 99\n", &map).is_err());
        let back = parse_word_list(&format_word_list(&words), &map).unwrap();
        assert_eq!(back, words);
    }

    #[test]
    fn random_words_are_distinct_and_bounded() {
        let map = LabelMap::default_synthetic();
        let words = random_word_list(&map, 200, LengthBounds { min: 2, max: 5 }, 1);
        assert_eq!(words.len(), 200);
        let set: std::collections::HashSet<_> = words.iter().collect();
        assert_eq!(set.len(), 200);
        assert!(words.iter().all(|w| (2..=5).contains(&w.len())));
        assert_eq!(words, random_word_list(&map, 200, LengthBounds { min: 2, max: 5 }, 1));
    }

    #[test]
    fn length_bounds_are_enforced() {
        let map = LabelMap::default_synthetic();
        let spec = SplitSpec::from_counts([1, 1, 1], None);
        let words = vec![vec![0, 1], vec![1], vec![2, 3]];
        assert!(matches!(
            plan_dataset(&words, &spec, &map, LengthBounds::default(), 0),
            Err(DatasetError::WordLength { index: 1, len: 1, .. })
        ));
        let words = vec![vec![0, 1], vec![1, 40], vec![2, 3]];
        assert!(matches!(
            plan_dataset(&words, &spec, &map, LengthBounds::default(), 0),
            Err(DatasetError::Label(_))
        ));
    }

    #[test]
    fn minimal_dataset_round_trip() {
        let map = LabelMap::default_synthetic();
        let atlas = SynthAtlas::new(map.clone(), 3);
        let spec = SplitSpec::from_counts([1, 1, 1], Some([1, 1, 1]));
        let words = vec![vec![0, 1], vec![4, 5, 6], vec![7, 8]];
        let plan = plan_dataset(&words, &spec, &map, LengthBounds::default(), 11).unwrap();
        for split in Split::ALL {
            assert_eq!(plan.count(split), 1);
        }
        let dir = tempfile::tempdir().unwrap();
        let built = build_dataset(&plan, &atlas, &map, dir.path()).unwrap();
        let loaded = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, built);
        assert_eq!(loaded.label_map().unwrap(), map);
        let train = loaded.load_split(Split::Train).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(train[0].image.width(), 32 * train[0].chars.len());
        assert_eq!(train[0].rows, map.rows_of(&train[0].chars).unwrap());
        assert!(!dir.path().join(".staging").exists());
    }

    #[test]
    fn deleted_or_corrupt_images_are_reported() {
        let map = LabelMap::default_synthetic();
        let atlas = SynthAtlas::new(map.clone(), 3);
        let spec = SplitSpec::from_counts([1, 1, 1], Some([1, 1, 1]));
        let words = vec![vec![0, 1], vec![4, 5], vec![7, 8]];
        let plan = plan_dataset(&words, &spec, &map, LengthBounds::default(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&plan, &atlas, &map, dir.path()).unwrap();

        // Swap two images of equal size: dimensions pass, checksum fails.
        let a = dir.path().join(&manifest.records[0].image);
        let b = dir.path().join(&manifest.records[1].image);
        let tmp = dir.path().join("swap.png");
        fs::rename(&a, &tmp).unwrap();
        fs::rename(&b, &a).unwrap();
        fs::rename(&tmp, &b).unwrap();
        let loaded = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(matches!(
            loaded.load_sample(&loaded.records[0]),
            Err(DatasetError::ChecksumMismatch(_))
        ));

        fs::remove_file(&a).unwrap();
        match load_manifest(dir.path().join(MANIFEST_FILE)) {
            Err(DatasetError::MissingImage(p)) => assert!(p.ends_with(&manifest.records[0].image)),
            other => panic!("expected missing image, got {other:?}"),
        }
    }
}
