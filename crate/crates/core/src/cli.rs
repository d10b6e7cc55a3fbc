//! Command-line verbs: `gen-data`, `train`, `eval`, `compare`.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::alphabet::LabelMap;
use crate::checkpoint::{load_checkpoint, save_checkpoint, LoadExpectations};
use crate::dataset::{
    build_dataset, load_manifest, parse_word_list, plan_dataset, random_word_list, LengthBounds,
    Manifest, Split, SplitPlan, SplitSpec, MANIFEST_FILE,
};
use crate::glyphs::{DirAtlas, GlyphSource, SynthAtlas};
use crate::metrics::{evaluate, EvalReport};
use crate::net::{ConvLayer, Model, ModelConfig};
use crate::train::{run_epoch, TrainOptions, CURVES_HEADER};

pub const CURVES_FILE: &str = "curves.csv";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.bin";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const RUN_CONFIG_FILE: &str = "run.toml";
pub const LOCK_FILE: &str = "train.lock";

#[derive(Debug, Parser)]
#[command(name = "auxctc", version, about = "Multi-task CTC word recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a writer-disjoint word-image dataset.
    GenData(GenDataArgs),
    /// Train a baseline or proposed model.
    Train(TrainArgs),
    /// Greedy-decode a split and write a WER/CER report.
    Eval(EvalArgs),
    /// Put two eval reports side by side.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Word list, one word per line (char ids, char names, or glyph text).
    /// Without it, random words are drawn from the label map.
    #[arg(long)]
    pub words: Option<PathBuf>,
    /// How many random words to draw when no list is given.
    #[arg(long, default_value_t = 400)]
    pub num_words: usize,
    /// Writer counts for train, validation and test.
    #[arg(long, default_value = "8,2,2", value_parser = parse_triple)]
    pub writers: [usize; 3],
    /// Explicit writer ids per split, e.g. `0-7;8,9;10,11`. Overrides `--writers`.
    #[arg(long, value_parser = parse_writer_groups)]
    pub writer_ids: Option<WriterGroups>,
    /// Distinct words for train, validation and test (default: 80/10/10 of the list).
    #[arg(long, value_parser = parse_triple)]
    pub split_words: Option<[usize; 3]>,
    #[arg(long, default_value_t = 2)]
    pub min_len: usize,
    #[arg(long, default_value_t = 6)]
    pub max_len: usize,
    /// Label map file (default: the built-in 5x4 synthetic alphabet).
    #[arg(long)]
    pub label_map: Option<PathBuf>,
    /// Glyph directory laid out as `<atlas>/<writer>/<char>.png`.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print per-split sample counts and exit without rendering.
    #[arg(long)]
    pub count_only: bool,
    #[arg(long, required_unless_present = "count_only")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Proposed,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Proposed => "proposed",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory produced by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Label map to check against the dataset's.
    #[arg(long)]
    pub label_map: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Weight of the row loss (proposed mode only).
    #[arg(long)]
    pub row_weight: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint; curves are appended.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Directory for `report_<split>.tsv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub proposed: PathBuf,
    /// Directory for `comparison.txt` and `comparison.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated counts, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("not a count: {p:?}"))?;
    }
    Ok(out)
}

/// Writer ids of train, validation and test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriterGroups(pub [Vec<usize>; 3]);

fn parse_writer_groups(s: &str) -> Result<WriterGroups, String> {
    let groups: Vec<&str> = s.split(';').collect();
    if groups.len() != 3 {
        return Err(format!("expected three ';'-separated writer groups, got {s:?}"));
    }
    let mut out: [Vec<usize>; 3] = Default::default();
    for (ids, group) in out.iter_mut().zip(groups) {
        for item in group.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let bad = || format!("not a writer id or range: {item:?}");
            match item.split_once('-') {
                Some((lo, hi)) => {
                    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                    if lo > hi {
                        return Err(bad());
                    }
                    ids.extend(lo..=hi);
                }
                None => ids.push(item.parse().map_err(|_| bad())?),
            }
        }
    }
    Ok(WriterGroups(out))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Compare(a) => cmd_compare(&a).map(|_| ()),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let map = match &a.label_map {
        Some(p) => LabelMap::load(p)?,
        None => LabelMap::default_synthetic(),
    };
    ensure!(
        a.min_len >= 1 && a.min_len <= a.max_len,
        "bad length bounds {}..={}",
        a.min_len,
        a.max_len
    );
    let bounds = LengthBounds {
        min: a.min_len,
        max: a.max_len,
    };
    let words = match &a.words {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_word_list(&text, &map)?
        }
        None => {
            let words = random_word_list(&map, a.num_words, bounds, a.seed);
            ensure!(
                words.len() == a.num_words,
                "only {} distinct words of length {}..={} exist, {} requested",
                words.len(),
                a.min_len,
                a.max_len,
                a.num_words
            );
            words
        }
    };
    let spec = match &a.writer_ids {
        Some(WriterGroups(groups)) => SplitSpec {
            plans: Split::ALL
                .iter()
                .zip(groups)
                .enumerate()
                .map(|(i, (&split, writers))| SplitPlan {
                    split,
                    writers: writers.clone(),
                    words: a.split_words.map(|w| w[i]),
                })
                .collect(),
        },
        None => SplitSpec::from_counts(a.writers, a.split_words),
    };
    if a.count_only {
        for (split, n) in spec.sample_counts(words.len())? {
            println!("{split}\t{n}");
        }
        return Ok(());
    }
    let out = a.out.as_ref().expect("clap requires --out");
    let plan = plan_dataset(&words, &spec, &map, bounds, a.seed)?;
    let atlas: Box<dyn GlyphSource> = match &a.atlas {
        Some(dir) => Box::new(DirAtlas::new(dir)),
        None => Box::new(SynthAtlas::new(map.clone(), a.seed)),
    };
    let manifest = build_dataset(&plan, atlas.as_ref(), &map, out)?;
    for split in Split::ALL {
        println!(
            "{split}\t{} samples\t{} writers",
            manifest.count(split),
            manifest.writers(split).len()
        );
    }
    Ok(())
}

/// Model shape section of a run configuration. Omitted fields take the
/// standard architecture's values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Output channels of each conv stage; every stage is 2x2-pooled.
    pub conv_channels: Option<Vec<usize>>,
    pub kernel: Option<usize>,
    pub projection: Option<usize>,
    pub hidden: Option<usize>,
    pub bidirectional: Option<bool>,
    /// Defaults to the longest word in the dataset.
    pub max_word_len: Option<usize>,
}

/// Contents of `--config`, and the resolved configuration written to
/// `run.toml` in the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub label_map: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub epochs: Option<u64>,
    pub lr: Option<f64>,
    pub lr_decay: Option<f64>,
    pub row_weight: Option<f64>,
    pub clip_norm: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Flags take precedence over file values.
    fn merge(mut self, a: &TrainArgs) -> Self {
        fn pick<T: Clone>(flag: &Option<T>, file: &mut Option<T>) {
            if flag.is_some() {
                *file = flag.clone();
            }
        }
        pick(&a.data, &mut self.data);
        pick(&a.label_map, &mut self.label_map);
        pick(&a.mode, &mut self.mode);
        pick(&a.epochs, &mut self.epochs);
        pick(&a.lr, &mut self.lr);
        pick(&a.lr_decay, &mut self.lr_decay);
        pick(&a.row_weight, &mut self.row_weight);
        pick(&a.clip_norm, &mut self.clip_norm);
        pick(&a.seed, &mut self.seed);
        pick(&a.out, &mut self.out);
        self
    }
}

/// Fully resolved training run.
#[derive(Debug, Clone)]
struct Run {
    data: PathBuf,
    out: PathBuf,
    mode: Mode,
    epochs: u64,
    seed: u64,
    opts: TrainOptions,
}

fn resolve(cfg: &RunConfig, map: &LabelMap, manifest: &Manifest) -> Result<(Run, ModelConfig)> {
    let mode = cfg.mode.context("missing mode (baseline or proposed)")?;
    let data = cfg.data.clone().context("missing dataset directory")?;
    let out = cfg.out.clone().context("missing output directory")?;
    match mode {
        Mode::Baseline => ensure!(
            cfg.row_weight.is_none(),
            "row_weight applies only to the proposed mode"
        ),
        Mode::Proposed => ensure!(
            map.num_rows() >= 2,
            "the proposed mode needs a label map with at least two rows, found {}",
            map.num_rows()
        ),
    }
    let seed = cfg.seed.unwrap_or(0);
    let defaults = TrainOptions::default();
    let opts = TrainOptions {
        lr: cfg.lr.unwrap_or(defaults.lr),
        lr_decay: cfg.lr_decay.unwrap_or(defaults.lr_decay),
        row_weight: cfg.row_weight.unwrap_or(defaults.row_weight),
        clip_norm: cfg.clip_norm,
        shuffle_seed: seed,
    };
    ensure!(opts.lr > 0.0 && opts.lr.is_finite(), "learning rate must be positive");
    ensure!(opts.lr_decay > 0.0, "lr_decay must be positive");
    ensure!(opts.row_weight >= 0.0, "row_weight must be non-negative");
    if let Some(c) = opts.clip_norm {
        ensure!(c > 0.0, "clip_norm must be positive");
    }

    let longest = manifest.records.iter().map(|r| r.chars.len()).max().unwrap_or(1);
    let mut model = ModelConfig::standard(map.num_chars(), map.num_rows(), mode == Mode::Proposed, seed);
    let m = &cfg.model;
    if let Some(channels) = &m.conv_channels {
        let kernel = m.kernel.unwrap_or(3);
        model.conv = channels
            .iter()
            .map(|&channels| ConvLayer {
                channels,
                kernel,
                pool: true,
            })
            .collect();
    } else if let Some(k) = m.kernel {
        model.conv.iter_mut().for_each(|l| l.kernel = k);
    }
    model.projection = m.projection.unwrap_or(model.projection);
    model.hidden = m.hidden.unwrap_or(model.hidden);
    model.bidirectional = m.bidirectional.unwrap_or(model.bidirectional);
    model.max_word_len = m.max_word_len.unwrap_or(longest);
    ensure!(
        longest <= model.max_word_len,
        "dataset holds words of length {longest}, model max_word_len is {}",
        model.max_word_len
    );
    model.validate()?;
    let run = Run {
        data,
        out,
        mode,
        epochs: cfg.epochs.unwrap_or(30),
        seed,
        opts,
    };
    Ok((run, model))
}

/// Exclusive claim on an output directory, released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| {
                format!(
                    "cannot lock {} (another training run may be using it)",
                    path.display()
                )
            })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Best validation character loss recorded in an existing curves file.
fn best_in_curves(text: &str) -> Option<f64> {
    let header: Vec<&str> = CURVES_HEADER.split(',').collect();
    let col = header.iter().position(|&h| h == "val_char_loss")?;
    text.lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(col)?.parse::<f64>().ok())
        .reduce(f64::min)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    save_checkpoint(model, &tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

/// Trains and returns the output directory.
pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let file_cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = file_cfg.merge(a);
    let data = cfg.data.clone().context("missing --data")?;
    let manifest = load_manifest(data.join(MANIFEST_FILE))?;
    let map = manifest.label_map()?;
    if let Some(p) = &cfg.label_map {
        let given = LabelMap::load(p)?;
        ensure!(
            given.content_hash() == manifest.label_map_hash,
            "label map {} does not match the dataset's",
            p.display()
        );
    }
    let (run, model_cfg) = resolve(&cfg, &map, &manifest)?;
    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    let _lock = RunLock::acquire(&run.out)?;

    let mut model: Model<f32> = match &a.resume {
        Some(p) => load_checkpoint(
            p,
            &LoadExpectations {
                label_map_hash: Some(&manifest.label_map_hash),
                row_head: Some(run.mode == Mode::Proposed),
            },
        )
        .with_context(|| format!("resuming from {}", p.display()))?,
        None => Model::new(model_cfg.clone())?.with_label_map_hash(&manifest.label_map_hash),
    };

    let mut resolved = cfg.clone();
    resolved.data = Some(run.data.clone());
    resolved.out = Some(run.out.clone());
    resolved.seed = Some(run.seed);
    resolved.epochs = Some(run.epochs);
    resolved.lr = Some(run.opts.lr);
    resolved.lr_decay = Some(run.opts.lr_decay);
    if run.mode == Mode::Proposed {
        resolved.row_weight = Some(run.opts.row_weight);
    }
    resolved.model = ModelSection {
        conv_channels: Some(model.config.conv.iter().map(|l| l.channels).collect()),
        kernel: model.config.conv.first().map(|l| l.kernel),
        projection: Some(model.config.projection),
        hidden: Some(model.config.hidden),
        bidirectional: Some(model.config.bidirectional),
        max_word_len: Some(model.config.max_word_len),
    };
    write_atomic(
        &run.out.join(RUN_CONFIG_FILE),
        toml::to_string(&resolved)?.as_bytes(),
    )?;

    let curves_path = run.out.join(CURVES_FILE);
    let mut best = None;
    if a.resume.is_some() && curves_path.exists() {
        best = best_in_curves(&fs::read_to_string(&curves_path)?);
    } else {
        fs::write(&curves_path, format!("{CURVES_HEADER}\n"))
            .with_context(|| format!("writing {}", curves_path.display()))?;
    }
    let mut curves = OpenOptions::new()
        .append(true)
        .open(&curves_path)
        .with_context(|| format!("opening {}", curves_path.display()))?;

    let train = manifest.load_split(Split::Train)?;
    let validation = manifest.load_split(Split::Validation)?;
    for _ in 0..run.epochs {
        let record = run_epoch(&mut model, &train, &validation, &run.opts)?;
        writeln!(curves, "{}", record.csv_line())?;
        eprintln!(
            "epoch {} train_loss {:.4} val_char_loss {:.4} train_word_acc {:.3}",
            record.epoch, record.train_loss, record.val_char_loss, record.train_word_acc
        );
        if best.is_none_or(|b| record.val_char_loss < b) {
            best = Some(record.val_char_loss);
            save_model(&model, &run.out.join(BEST_CHECKPOINT))?;
        }
    }
    save_model(&model, &run.out.join(FINAL_CHECKPOINT))?;
    Ok(run.out)
}

/// Evaluates and returns the report path.
pub fn cmd_eval(a: &EvalArgs) -> Result<PathBuf> {
    let manifest = load_manifest(a.data.join(MANIFEST_FILE))?;
    manifest.label_map()?;
    let model: Model<f32> = load_checkpoint(
        &a.checkpoint,
        &LoadExpectations {
            label_map_hash: Some(&manifest.label_map_hash),
            row_head: None,
        },
    )
    .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let samples = manifest.load_split(a.split)?;
    ensure!(!samples.is_empty(), "split {} is empty", a.split);
    let mode = if model.has_row_head() {
        Mode::Proposed
    } else {
        Mode::Baseline
    };
    let report = evaluate(&model, &samples)?
        .with_meta("mode", mode.as_str())
        .with_meta("split", a.split)
        .with_meta("epoch", model.epoch)
        .with_meta("step", model.step)
        .with_meta("label_map", &manifest.label_map_hash);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let path = a.out.join(format!("report_{}.tsv", a.split));
    report.save(&path)?;
    println!(
        "{} {}: WER {:.2}% CER {:.2}% ({} words, {} chars)",
        mode.as_str(),
        a.split,
        report.wer,
        report.cer,
        report.num_words,
        report.num_chars
    );
    Ok(path)
}

/// One side of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareEntry {
    pub label: String,
    pub wer: f64,
    pub cer: f64,
    pub num_words: usize,
}

impl CompareEntry {
    pub fn from_report(name: &str, r: &EvalReport) -> Self {
        let mut label = name.to_string();
        if let Some(e) = r.meta("epoch") {
            label.push_str(&format!(" ({e} epochs)"));
        }
        Self {
            label,
            wer: r.wer,
            cer: r.cer,
            num_words: r.num_words,
        }
    }
}

/// Side-by-side table as (text, csv).
pub fn comparison_table(baseline: &CompareEntry, proposed: &CompareEntry) -> (String, String) {
    let width = baseline.label.len().max(proposed.label.len()).max(5);
    let mut text = format!("{:<width$}  {:>8}  {:>8}\n", "model", "WER (%)", "CER (%)");
    for e in [baseline, proposed] {
        text.push_str(&format!("{:<width$}  {:>8.2}  {:>8.2}\n", e.label, e.wer, e.cer));
    }
    text.push_str(&format!(
        "{:<width$}  {:>+8.2}  {:>+8.2}\n",
        "delta",
        proposed.wer - baseline.wer,
        proposed.cer - baseline.cer
    ));
    if baseline.num_words != proposed.num_words {
        text.push_str(&format!(
            "note: reports cover {} and {} words\n",
            baseline.num_words, proposed.num_words
        ));
    }
    let mut csv = String::from("model,wer,cer,num_words\n");
    for e in [baseline, proposed] {
        csv.push_str(&format!("{},{:.6},{:.6},{}\n", e.label, e.wer, e.cer, e.num_words));
    }
    csv.push_str(&format!(
        "delta,{:.6},{:.6},\n",
        proposed.wer - baseline.wer,
        proposed.cer - baseline.cer
    ));
    (text, csv)
}

/// Writes the comparison and returns its text form.
pub fn cmd_compare(a: &CompareArgs) -> Result<String> {
    for p in [&a.baseline, &a.proposed] {
        if !p.exists() {
            bail!("report {} does not exist", p.display());
        }
    }
    let b = EvalReport::load(&a.baseline)?;
    let p = EvalReport::load(&a.proposed)?;
    let (text, csv) = comparison_table(
        &CompareEntry::from_report("baseline", &b),
        &CompareEntry::from_report("proposed", &p),
    );
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    File::create(a.out.join("comparison.txt"))?.write_all(text.as_bytes())?;
    File::create(a.out.join("comparison.csv"))?.write_all(csv.as_bytes())?;
    print!("{text}");
    Ok(text)
}
