//! Glyph images, procedural glyph synthesis, atlases and word composition.
//!
//! Synthetic glyphs mirror the structure of a syllabary grid: every row has
//! a base stroke shape, every column adds a small modifier stroke, and each
//! writer applies a deterministic distortion (slant, shift, stroke width and
//! pixel noise). Pixels are stored as 8-bit ink intensities, so values are
//! exact multiples of 1/255 and survive a PNG round trip unchanged.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::alphabet::{LabelMap, LabelMapError};

/// Side length of a glyph image in pixels.
pub const GLYPH_SIZE: usize = 32;

const MAX_ROTATION_DEG: f64 = 8.0;
const MAX_SHIFT_PX: f64 = 2.0;
const BASE_STROKE_WIDTH: f64 = 2.5;
const STROKE_WIDTH_JITTER: f64 = 1.0;
const NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum GlyphError {
    #[error(transparent)]
    Label(#[from] LabelMapError),
    #[error("no glyph for character {char_id} by writer {writer_id}")]
    MissingGlyph { char_id: usize, writer_id: usize },
    #[error("{path}: expected {expected_h}×{expected_w} image, found {found_h}×{found_w}")]
    Dimensions {
        path: String,
        expected_h: usize,
        expected_w: usize,
        found_h: usize,
        found_w: usize,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major 8-bit grayscale image. Ink is 255, background 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Bitmap {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Bitmap {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel buffer size");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Ink intensity in `[0, 1]`.
    #[inline]
    pub fn value(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x] as f32 / 255.0
    }

    /// All intensities in row-major order, scaled to `[0, 1]`.
    pub fn to_unit<F: num_traits::Float>(&self) -> Vec<F> {
        let scale = F::from(255.0).unwrap();
        self.pixels
            .iter()
            .map(|&p| F::from(p).unwrap() / scale)
            .collect()
    }

    /// Copies the `width`-wide column block starting at `x0`.
    pub fn columns(&self, x0: usize, width: usize) -> Bitmap {
        let mut out = Vec::with_capacity(self.height * width);
        for y in 0..self.height {
            out.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + width]);
        }
        Bitmap::new(self.height, width, out)
    }

    /// Horizontal concatenation. All parts must share a height.
    pub fn hconcat(parts: &[&Bitmap]) -> Bitmap {
        let height = parts.first().map_or(GLYPH_SIZE, |p| p.height);
        let width = parts.iter().map(|p| p.width).sum();
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for p in parts {
                assert_eq!(p.height, height, "concatenated images must share a height");
                pixels.extend_from_slice(&p.pixels[y * p.width..(y + 1) * p.width]);
            }
        }
        Bitmap::new(height, width, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), GlyphError> {
        image::save_buffer(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|source| GlyphError::Image {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Bitmap, GlyphError> {
        let img = image::open(path).map_err(|source| GlyphError::Image {
            path: path.display().to_string(),
            source,
        })?;
        let gray = img.into_luma8();
        let (w, h) = gray.dimensions();
        Ok(Bitmap::new(h as usize, w as usize, gray.into_raw()))
    }
}

/// A single 32×32 character image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphImage {
    pub bitmap: Bitmap,
    pub char_id: usize,
    pub writer_id: usize,
}

/// Anything that can hand out the glyph a writer drew for a character.
pub trait GlyphSource: Sync {
    fn glyph(&self, char_id: usize, writer_id: usize) -> Result<GlyphImage, GlyphError>;
}

/// Deterministically mixes a seed with a tag and two ids.
fn mix(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a running state
    let mut z = seed;
    for v in [tag, a, b] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn rng_for(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag, a, b))
}

const TAG_ROW: u64 = 1;
const TAG_COLUMN: u64 = 2;
const TAG_WRITER: u64 = 3;
const TAG_WRITER_CHAR: u64 = 4;
const TAG_NOISE: u64 = 5;

type Point = (f64, f64);
type Stroke = Vec<Point>;

/// Base shape shared by all characters of a row: two or three polylines in
/// the unit square.
fn row_strokes(seed: u64, row: usize) -> Vec<Stroke> {
    let mut rng = rng_for(seed, TAG_ROW, row as u64, 0);
    let n = rng.random_range(2..=3);
    (0..n)
        .map(|_| {
            let pts = rng.random_range(2..=4);
            (0..pts)
                .map(|_| (rng.random_range(0.22..0.78), rng.random_range(0.18..0.72)))
                .collect()
        })
        .collect()
}

/// Modifier shared by all characters of a column. Column 0 carries none.
fn column_strokes(seed: u64, column: usize) -> Vec<Stroke> {
    if column == 0 {
        return Vec::new();
    }
    let mut rng = rng_for(seed, TAG_COLUMN, column as u64, 0);
    // Anchor on the glyph border region so the mark stays legible next to
    // the base shape.
    let anchor = match column % 4 {
        1 => (0.80, rng.random_range(0.35..0.65)),
        2 => (rng.random_range(0.35..0.65), 0.86),
        3 => (0.18, rng.random_range(0.55..0.85)),
        _ => (rng.random_range(0.55..0.8), 0.12),
    };
    let len = rng.random_range(0.10..0.18);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let tip = (anchor.0 + len * angle.cos(), anchor.1 + len * angle.sin());
    let mut strokes = vec![vec![anchor, tip]];
    if column >= 4 {
        let angle2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        strokes.push(vec![tip, (tip.0 + 0.08 * angle2.cos(), tip.1 + 0.08 * angle2.sin())]);
    }
    strokes
}

/// Per-writer and per-(writer, character) distortion parameters.
#[derive(Debug, Clone, Copy)]
struct Distortion {
    rotation: f64,
    shift: (f64, f64),
    stroke_width: f64,
}

fn distortion(seed: u64, char_id: usize, writer_id: usize) -> Distortion {
    let mut writer = rng_for(seed, TAG_WRITER, writer_id as u64, 0);
    let slant = writer.random_range(-0.6..0.6) * MAX_ROTATION_DEG;
    let width = BASE_STROKE_WIDTH + writer.random_range(-STROKE_WIDTH_JITTER..=STROKE_WIDTH_JITTER);
    let mut local = rng_for(seed, TAG_WRITER_CHAR, writer_id as u64, char_id as u64);
    let rotation = (slant + local.random_range(-0.4..0.4) * MAX_ROTATION_DEG)
        .clamp(-MAX_ROTATION_DEG, MAX_ROTATION_DEG);
    let shift = (
        local.random_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
        local.random_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
    );
    Distortion {
        rotation: rotation.to_radians(),
        shift,
        stroke_width: width,
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Renders the glyph `writer_id` would draw for `char_id`.
///
/// Pure function of `(map, char_id, writer_id, seed)`.
pub fn synth_glyph(
    map: &LabelMap,
    char_id: usize,
    writer_id: usize,
    seed: u64,
) -> Result<GlyphImage, GlyphError> {
    let row = map.row(char_id)?;
    let column = map.column(char_id)?;
    let d = distortion(seed, char_id, writer_id);
    let size = GLYPH_SIZE as f64;
    let c = size / 2.0;
    let (sin, cos) = d.rotation.sin_cos();
    let to_px = |(u, v): Point| {
        let (x, y) = (u * size - c, v * size - c);
        (
            cos * x - sin * y + c + d.shift.0,
            sin * x + cos * y + c + d.shift.1,
        )
    };
    let segments: Vec<(Point, Point)> = row_strokes(seed, row)
        .into_iter()
        .chain(column_strokes(seed, column))
        .flat_map(|stroke| {
            stroke
                .windows(2)
                .map(|w| (to_px(w[0]), to_px(w[1])))
                .collect::<Vec<_>>()
        })
        .collect();

    let half = d.stroke_width / 2.0;
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut rng = rng_for(seed, TAG_NOISE, writer_id as u64, char_id as u64);
    let mut pixels = Vec::with_capacity(GLYPH_SIZE * GLYPH_SIZE);
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let dist = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            let ink = (half + 0.5 - dist).clamp(0.0, 1.0);
            let v = (ink + noise.sample(&mut rng)).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    Ok(GlyphImage {
        bitmap: Bitmap::new(GLYPH_SIZE, GLYPH_SIZE, pixels),
        char_id,
        writer_id,
    })
}

/// Procedural atlas backed by [`synth_glyph`].
#[derive(Debug, Clone)]
pub struct SynthAtlas {
    map: LabelMap,
    seed: u64,
}

impl SynthAtlas {
    pub fn new(map: LabelMap, seed: u64) -> Self {
        Self { map, seed }
    }
}

impl GlyphSource for SynthAtlas {
    fn glyph(&self, char_id: usize, writer_id: usize) -> Result<GlyphImage, GlyphError> {
        synth_glyph(&self.map, char_id, writer_id, self.seed)
    }
}

/// Atlas read from `<root>/<writer_id>/<char_id>.png` (8-bit, 32×32).
/// Glyphs are cached after the first read.
#[derive(Debug)]
pub struct DirAtlas {
    root: PathBuf,
    cache: RwLock<HashMap<(usize, usize), GlyphImage>>,
}

impl DirAtlas {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn glyph_path(root: &Path, char_id: usize, writer_id: usize) -> PathBuf {
        root.join(writer_id.to_string()).join(format!("{char_id}.png"))
    }
}

impl GlyphSource for DirAtlas {
    fn glyph(&self, char_id: usize, writer_id: usize) -> Result<GlyphImage, GlyphError> {
        if let Some(g) = self.cache.read().unwrap().get(&(char_id, writer_id)) {
            return Ok(g.clone());
        }
        let path = Self::glyph_path(&self.root, char_id, writer_id);
        if !path.exists() {
            return Err(GlyphError::MissingGlyph { char_id, writer_id });
        }
        let bitmap = Bitmap::load_png(&path)?;
        if bitmap.height() != GLYPH_SIZE || bitmap.width() != GLYPH_SIZE {
            return Err(GlyphError::Dimensions {
                path: path.display().to_string(),
                expected_h: GLYPH_SIZE,
                expected_w: GLYPH_SIZE,
                found_h: bitmap.height(),
                found_w: bitmap.width(),
            });
        }
        let glyph = GlyphImage {
            bitmap,
            char_id,
            writer_id,
        };
        self.cache
            .write()
            .unwrap()
            .insert((char_id, writer_id), glyph.clone());
        Ok(glyph)
    }
}

/// Writes every (writer, character) glyph of `source` in the atlas layout.
pub fn export_atlas(
    source: &dyn GlyphSource,
    root: &Path,
    writers: &[usize],
    num_chars: usize,
) -> Result<(), GlyphError> {
    for &w in writers {
        let dir = root.join(w.to_string());
        std::fs::create_dir_all(&dir).map_err(|source| GlyphError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for c in 0..num_chars {
            source
                .glyph(c, w)?
                .bitmap
                .save_png(&DirAtlas::glyph_path(root, c, w))?;
        }
    }
    Ok(())
}

/// A word image with its character and row supervision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSample {
    pub image: Bitmap,
    pub chars: Vec<usize>,
    pub rows: Vec<usize>,
    pub writer_id: usize,
    pub word_id: usize,
}

/// Concatenates the writer's glyphs for `chars` left to right.
pub fn compose_word_image(
    chars: &[usize],
    writer_id: usize,
    word_id: usize,
    atlas: &dyn GlyphSource,
    map: &LabelMap,
) -> Result<WordSample, GlyphError> {
    let rows = map.rows_of(chars)?;
    let glyphs = chars
        .iter()
        .map(|&c| atlas.glyph(c, writer_id).map(|g| g.bitmap))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Bitmap> = glyphs.iter().collect();
    let image = if refs.is_empty() {
        Bitmap::zeros(GLYPH_SIZE, 0)
    } else {
        Bitmap::hconcat(&refs)
    };
    Ok(WordSample {
        image,
        chars: chars.to_vec(),
        rows,
        writer_id,
        word_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> LabelMap {
        LabelMap::default_synthetic()
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synth_glyph(&map(), 3, 0, 42).unwrap();
        let b = synth_glyph(&map(), 3, 0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bitmap.height(), GLYPH_SIZE);
        assert_eq!(a.bitmap.width(), GLYPH_SIZE);
    }

    #[test]
    fn writers_and_characters_differ() {
        let base = synth_glyph(&map(), 3, 0, 42).unwrap();
        let other_writer = synth_glyph(&map(), 3, 1, 42).unwrap();
        let other_char = synth_glyph(&map(), 4, 0, 42).unwrap();
        assert_ne!(base.bitmap, other_writer.bitmap);
        assert_ne!(base.bitmap, other_char.bitmap);
    }

    #[test]
    fn glyphs_carry_ink() {
        let m = map();
        for c in 0..m.num_chars() {
            let g = synth_glyph(&m, c, 7, 1).unwrap();
            let strong = g.bitmap.pixels().iter().filter(|&&p| p > 200).count();
            assert!(strong > 20, "char {c} has only {strong} inked pixels");
        }
    }

    #[test]
    fn same_row_glyphs_are_closer_than_other_rows() {
        // Row-mates share a base shape; compare mean absolute pixel
        // difference without noise-dominated background.
        let m = map();
        let diff = |a: usize, b: usize| {
            let ga = synth_glyph(&m, a, 0, 5).unwrap();
            let gb = synth_glyph(&m, b, 0, 5).unwrap();
            ga.bitmap
                .pixels()
                .iter()
                .zip(gb.bitmap.pixels())
                .map(|(&x, &y)| (x as i32 - y as i32).abs())
                .sum::<i32>()
        };
        let mut same = 0;
        let mut across = 0;
        for r in 0..m.num_rows() {
            same += diff(r * 4, r * 4 + 1);
            across += diff(r * 4, ((r + 1) % m.num_rows()) * 4);
        }
        assert!(same < across, "same-row {same} vs cross-row {across}");
    }

    #[test]
    fn unknown_character_is_an_error() {
        assert!(matches!(
            synth_glyph(&map(), 99, 0, 0),
            Err(GlyphError::Label(LabelMapError::CharOutOfRange { .. }))
        ));
    }

    #[test]
    fn compose_width_and_blocks() {
        let m = map();
        let atlas = SynthAtlas::new(m.clone(), 9);
        let s = compose_word_image(&[1, 2, 5, 9], 3, 0, &atlas, &m).unwrap();
        assert_eq!((s.image.height(), s.image.width()), (32, 128));
        assert_eq!(s.rows, vec![0, 0, 1, 2]);

        let single = compose_word_image(&[6], 3, 0, &atlas, &m).unwrap();
        assert_eq!(single.image, atlas.glyph(6, 3).unwrap().bitmap);

        let ab = compose_word_image(&[1, 7], 2, 0, &atlas, &m).unwrap();
        let ba = compose_word_image(&[7, 1], 2, 0, &atlas, &m).unwrap();
        assert_eq!(ab.image.columns(0, 32), ba.image.columns(32, 32));
        assert_eq!(ab.image.columns(32, 32), ba.image.columns(0, 32));
    }

    #[test]
    fn dir_atlas_round_trips_synthetic_glyphs() {
        let m = map();
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthAtlas::new(m.clone(), 3);
        export_atlas(&synth, dir.path(), &[0, 4], m.num_chars()).unwrap();
        let disk = DirAtlas::new(dir.path());
        for c in [0, 7, 19] {
            assert_eq!(disk.glyph(c, 4).unwrap(), synth.glyph(c, 4).unwrap());
        }
        assert!(matches!(
            disk.glyph(0, 1),
            Err(GlyphError::MissingGlyph { char_id: 0, writer_id: 1 })
        ));
        let word = compose_word_image(&[2, 3], 0, 0, &disk, &m).unwrap();
        assert_eq!(word, compose_word_image(&[2, 3], 0, 0, &synth, &m).unwrap());
        assert!(matches!(
            compose_word_image(&[2, 3], 5, 0, &disk, &m),
            Err(GlyphError::MissingGlyph { writer_id: 5, .. })
        ));
    }
}
