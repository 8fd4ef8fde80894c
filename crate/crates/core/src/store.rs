//! Manifests, run configuration, the on-disk image cache and the command
//! implementations behind the `dexvec` binary.
//!
//! Cache layout under `--cache-dir`:
//!
//! ```text
//! raw/<id>.dxr1        full-length vector image
//! w<width>/<id>.dxrf   image resized to <width>
//! ```
//!
//! where `<id>` is the hex SHA-256 of the APK file.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::apk::ApkArchive;
use crate::eval::{
    self, dataset_at_width, make_augmented_split, make_temporal_split, roc_curve, run_plans,
    score, validate_records, write_history, write_points, AblationOptions, AblationRow, AblationTable,
    AugmentOptions, Dataset, EvalError, Label, MetricsReport, ObfuscatedTest, ProtocolResult, RunLine, Sample,
    SampleRecord, SplitPlan, SplitRatios, TrainConfig,
};
use crate::image::{
    self, normalize, read_resized, read_vector, resize_vector, to_vector_image, write_resized, write_vector,
    ImageError, VectorImage, DEFAULT_WIDTH,
};
use crate::nn::{read_checkpoint, write_checkpoint, Architecture, Network, NnError};
use crate::par::Exec;

pub const MANIFEST_FORMAT: &str = "dexvec-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("unsupported manifest version {0}")]
    UnsupportedVersion(u32),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid input list: {0}")]
    InputList(String),
    #[error("missing cache file for {id}: {}", path.display())]
    MissingCache { id: String, path: PathBuf },
    #[error("width mismatch: checkpoint expects {checkpoint}, cache holds {cache}")]
    WidthMismatch { checkpoint: usize, cache: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> StoreError {
    let path = path.into();
    move |source| StoreError::Io { path, source }
}

/// Hex SHA-256 of `bytes`.
pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `bytes` to a temporary sibling of `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Manifest

/// An app that could not be turned into an image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    /// Short error name, e.g. `NotAZip` or `NoDexFound`.
    pub reason: String,
    pub message: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ManifestLine {
    Sample(SampleRecord),
    Failure(FailureRecord),
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub failures: Vec<FailureRecord>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = ManifestHeader { format: MANIFEST_FORMAT.into(), version: MANIFEST_VERSION };
        out.push_str(&serde_json::to_string(&header).expect("header serialises"));
        out.push('\n');
        let lines = self
            .records
            .iter()
            .cloned()
            .map(ManifestLine::Sample)
            .chain(self.failures.iter().cloned().map(ManifestLine::Failure));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("manifest line serialises"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| StoreError::Manifest { line, message };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| bad(1, "empty manifest".into()))?;
        let header: ManifestHeader = serde_json::from_str(first).map_err(|e| bad(1, format!("bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(bad(1, format!("unknown format {:?}", header.format)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(StoreError::UnsupportedVersion(header.version));
        }
        let mut manifest = Manifest::default();
        for (i, line) in lines {
            match serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))? {
                ManifestLine::Sample(r) => manifest.records.push(r),
                ManifestLine::Failure(f) => manifest.failures.push(f),
            }
        }
        validate_records(&manifest.records)?;
        Ok(manifest)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_jsonl().as_bytes())
    }

    /// Records that are not obfuscated variants.
    pub fn base_records(&self) -> Vec<SampleRecord> {
        self.records.iter().filter(|r| r.obfuscated_of.is_none()).cloned().collect()
    }

    pub fn obfuscated_records(&self) -> Vec<SampleRecord> {
        self.records.iter().filter(|r| r.obfuscated_of.is_some()).cloned().collect()
    }
}

/// Per-label attrition accounting of a manifest.
pub struct Attrition<'a>(pub &'a Manifest);

impl fmt::Display for Attrition<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.0;
        let count_records = |l: Label| m.records.iter().filter(|r| r.label == l).count();
        let count_failures = |l: Option<Label>| m.failures.iter().filter(|x| x.label == l).count();
        let mut reasons: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
        for x in &m.failures {
            let col = match x.label {
                Some(Label::Malware) => 0,
                Some(Label::Goodware) => 1,
                None => 2,
            };
            reasons.entry(&x.reason).or_default()[col] += 1;
        }
        let unlabelled = count_failures(None);
        let row = |f: &mut fmt::Formatter<'_>, name: &str, mal: usize, good: usize, other: Option<usize>| {
            write!(f, "{name:<44} {mal:>10} {good:>10}")?;
            if let Some(o) = other {
                write!(f, " {o:>10}")?;
            }
            writeln!(f)
        };
        let other = |n: usize| (unlabelled > 0).then_some(n);
        write!(f, "{:<44} {:>10} {:>10}", "", "malware", "goodware")?;
        if unlabelled > 0 {
            write!(f, " {:>10}", "unlabelled")?;
        }
        writeln!(f)?;
        let (mal, good) = (count_records(Label::Malware), count_records(Label::Goodware));
        let (fmal, fgood) = (count_failures(Some(Label::Malware)), count_failures(Some(Label::Goodware)));
        row(f, "Initial set", mal + fmal, good + fgood, other(unlabelled))?;
        row(f, "Removed because of image generation failure", fmal, fgood, other(unlabelled))?;
        for (reason, [a, b, c]) in &reasons {
            row(f, &format!("  {reason}"), *a, *b, other(*c))?;
        }
        row(f, "Final set", mal, good, other(0))?;
        let obf = m.records.iter().filter(|r| r.obfuscated_of.is_some()).count();
        if obf > 0 {
            writeln!(f, "of which obfuscated variants: {obf}")?;
        }
        if let (Some(lo), Some(hi)) =
            (m.records.iter().map(|r| r.dex_date).min(), m.records.iter().map(|r| r.dex_date).max())
        {
            writeln!(f, "dex dates: {lo} to {hi}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub input_width: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub repetitions: usize,
    pub threshold: f64,
    pub stop_on_perfect_validation: bool,
    pub train_fraction: f64,
    pub valid_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let r = SplitRatios::default();
        RunConfig {
            input_width: DEFAULT_WIDTH,
            batch_size: t.batch_size,
            lr: t.lr,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: 0,
            repetitions: 10,
            threshold: t.threshold,
            stop_on_perfect_validation: false,
            train_fraction: r.train,
            valid_fraction: r.valid,
        }
    }
}

impl RunConfig {
    /// Apply `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| StoreError::Config { line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
                value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
            }
            let result = match key {
                "input_width" => num(key, value).map(|v| cfg.input_width = v),
                "batch_size" => num(key, value).map(|v| cfg.batch_size = v),
                "lr" => num(key, value).map(|v| cfg.lr = v),
                "max_epochs" => num(key, value).map(|v| cfg.max_epochs = v),
                "patience" => num(key, value).map(|v| cfg.patience = v),
                "seed" => num(key, value).map(|v| cfg.seed = v),
                "repetitions" => num(key, value).map(|v| cfg.repetitions = v),
                "threshold" => num(key, value).map(|v| cfg.threshold = v),
                "stop_on_perfect_validation" => num(key, value).map(|v| cfg.stop_on_perfect_validation = v),
                "train_fraction" => num(key, value).map(|v| cfg.train_fraction = v),
                "valid_fraction" => num(key, value).map(|v| cfg.valid_fraction = v),
                _ => Err(format!("unknown key {key:?}")),
            };
            result.map_err(bad)?;
        }
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| Err(StoreError::Config { line: 0, message: message.into() });
        if self.repetitions == 0 {
            return bad("repetitions must be positive");
        }
        if !(self.train_fraction > 0.0 && self.valid_fraction > 0.0 && self.train_fraction + self.valid_fraction <= 1.0)
        {
            return bad("train_fraction and valid_fraction must be positive and sum to at most 1");
        }
        Architecture::new(self.input_width)?;
        self.train_config(Exec::default()).validate()?;
        Ok(())
    }

    pub fn train_config(&self, exec: Exec) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            threshold: self.threshold,
            stop_on_perfect_validation: self.stop_on_perfect_validation,
            exec,
        }
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios { train: self.train_fraction, valid: self.valid_fraction }
    }
}

// ---------------------------------------------------------------------------
// Image cache

pub fn raw_relative_path(id: &str) -> String {
    format!("raw/{id}.dxr1")
}

pub fn raw_path(cache: &Path, id: &str) -> PathBuf {
    cache.join(raw_relative_path(id))
}

pub fn resized_dir(cache: &Path, width: usize) -> PathBuf {
    cache.join(format!("w{width}"))
}

pub fn resized_path(cache: &Path, id: &str, width: usize) -> PathBuf {
    resized_dir(cache, width).join(format!("{id}.dxrf"))
}

/// Load every record's resized image at `width`.
pub fn load_dataset(records: &[SampleRecord], cache: &Path, width: usize) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(records.len());
    for record in records {
        let path = resized_path(cache, &record.id, width);
        if !path.is_file() {
            return Err(StoreError::MissingCache { id: record.id.clone(), path });
        }
        let resized = read_resized(&path)?;
        if resized.width() != width {
            return Err(StoreError::WidthMismatch { checkpoint: width, cache: resized.width() });
        }
        samples.push(Sample { record: record.clone(), image: normalize(&resized) });
    }
    Ok(Dataset::new(samples)?)
}

/// Load the full-length images of `records`.
pub fn load_raw(records: &[SampleRecord], cache: &Path) -> Result<Vec<(SampleRecord, VectorImage)>> {
    records
        .iter()
        .map(|r| {
            let path = cache.join(&r.image_path);
            if !path.is_file() {
                return Err(StoreError::MissingCache { id: r.id.clone(), path });
            }
            Ok((r.clone(), read_vector(&path)?))
        })
        .collect()
}

/// Write `w<width>/<id>.dxrf` for every record from its raw image.
pub fn regenerate_resized(records: &[SampleRecord], cache: &Path, width: usize) -> Result<()> {
    let dir = resized_dir(cache, width);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (record, raw) in load_raw(records, cache)? {
        write_resized(resized_path(cache, &record.id, width), &resize_vector(&raw, width)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// extract

/// One APK to ingest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractInput {
    pub path: PathBuf,
    pub label: Label,
    pub dex_date: Option<NaiveDate>,
    /// Id, or path of another input, of the base app.
    pub obfuscated_of: Option<String>,
}

/// `<dir>/malware/*.apk` and `<dir>/goodware/*.apk`, sorted by path.
pub fn inputs_from_dir(dir: &Path) -> Result<Vec<ExtractInput>> {
    let mut inputs = Vec::new();
    for (sub, label) in [("malware", Label::Malware), ("goodware", Label::Goodware)] {
        let d = dir.join(sub);
        if !d.is_dir() {
            continue;
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&d)
            .map_err(io_err(&d))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("apk")))
            .collect();
        paths.sort();
        inputs.extend(paths.into_iter().map(|path| ExtractInput { path, label, dex_date: None, obfuscated_of: None }));
    }
    if inputs.is_empty() {
        return Err(StoreError::InputList(format!("no .apk files under {}/{{malware,goodware}}", dir.display())));
    }
    Ok(inputs)
}

#[derive(Deserialize)]
struct ListRow {
    path: PathBuf,
    label: String,
    #[serde(default)]
    dex_date: Option<String>,
    #[serde(default)]
    obfuscated_of: Option<String>,
}

/// CSV with a header: `path,label[,dex_date][,obfuscated_of]`. Relative paths
/// are resolved against the list's directory.
pub fn inputs_from_list(list: &Path) -> Result<Vec<ExtractInput>> {
    let base = list.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(list).map_err(io_err(list))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut inputs = Vec::new();
    for (i, row) in reader.deserialize::<ListRow>().enumerate() {
        let row = row.map_err(|e| StoreError::InputList(format!("row {}: {e}", i + 1)))?;
        let label = row.label.parse().map_err(|e| StoreError::InputList(format!("row {}: {e}", i + 1)))?;
        let dex_date = match row.dex_date.filter(|d| !d.is_empty()) {
            Some(d) => Some(
                d.parse()
                    .map_err(|e| StoreError::InputList(format!("row {}: bad date {d:?}: {e}", i + 1)))?,
            ),
            None => None,
        };
        let obfuscated_of = row.obfuscated_of.filter(|s| !s.is_empty());
        let path = if row.path.is_absolute() { row.path } else { base.join(row.path) };
        inputs.push(ExtractInput { path, label, dex_date, obfuscated_of });
    }
    Ok(inputs)
}

enum Processed {
    Ok { record: SampleRecord, image: VectorImage },
    Failed(FailureRecord),
}

fn process_input(input: &ExtractInput) -> Processed {
    let fail = |reason: &str, message: String| {
        Processed::Failed(FailureRecord {
            source: input.path.display().to_string(),
            label: Some(input.label),
            reason: reason.into(),
            message,
        })
    };
    let data = match fs::read(&input.path) {
        Ok(d) => d,
        Err(e) => return fail("IoFailure", e.to_string()),
    };
    let id = content_id(&data);
    let result = ApkArchive::from_bytes(&input.path, data).and_then(|a| Ok((a.extract_bytestream()?, a.dex_date())));
    let (stream, archive_date) = match result {
        Ok(v) => v,
        Err(e) => return fail(e.kind(), e.to_string()),
    };
    let image = match to_vector_image(&stream) {
        Ok(i) => i,
        Err(ImageError::EmptyStream) => return fail("EmptyStream", "DEX entries are empty".into()),
        Err(e) => return fail("ImageGeneration", e.to_string()),
    };
    let Some(dex_date) = input.dex_date.or(archive_date) else {
        return fail("MissingDate", "classes.dex has no valid modification date".into());
    };
    let record = SampleRecord {
        image_path: raw_relative_path(&id),
        id,
        label: input.label,
        dex_date,
        obfuscated_of: input.obfuscated_of.clone(),
    };
    Processed::Ok { record, image }
}

/// Ingest APKs into the cache at `width`, never aborting on a bad app. The
/// manifest follows input order whatever the scheduling.
pub fn extract(inputs: &[ExtractInput], cache: &Path, width: usize, exec: Exec) -> Result<Manifest> {
    if width == 0 {
        return Err(ImageError::ZeroTarget.into());
    }
    for dir in [cache.join("raw"), resized_dir(cache, width)] {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let processed = exec.map_slice(inputs, |input| {
        let p = process_input(input);
        if let Processed::Ok { record, image } = &p {
            write_vector(raw_path(cache, &record.id), image)?;
            write_resized(resized_path(cache, &record.id, width), &resize_vector(image, width)?)?;
        }
        Ok::<_, StoreError>(p)
    });

    let mut manifest = Manifest::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut path_ids: HashMap<PathBuf, String> = HashMap::new();
    for (input, p) in inputs.iter().zip(processed) {
        match p? {
            Processed::Ok { record, .. } => {
                if let Some(&first) = seen.get(&record.id) {
                    manifest.failures.push(FailureRecord {
                        source: input.path.display().to_string(),
                        label: Some(input.label),
                        reason: "DuplicateContent".into(),
                        message: format!("same bytes as {}", inputs[first].path.display()),
                    });
                    continue;
                }
                seen.insert(record.id.clone(), manifest.records.len());
                path_ids.insert(input.path.clone(), record.id.clone());
                manifest.records.push(record);
            }
            Processed::Failed(f) => {
                log::warn!("{}: {} ({})", f.source, f.reason, f.message);
                manifest.failures.push(f);
            }
        }
    }

    // Resolve base references given as paths, then drop variants whose base
    // did not make it into the manifest.
    let input_path = |p: &str| inputs.iter().find(|i| i.path.ends_with(p) || i.path == Path::new(p)).map(|i| &i.path);
    for record in &mut manifest.records {
        if let Some(base) = &record.obfuscated_of {
            if let Some(id) = input_path(base).and_then(|p| path_ids.get(p)) {
                record.obfuscated_of = Some(id.clone());
            }
        }
    }
    let ids: HashMap<String, Label> = manifest.records.iter().map(|r| (r.id.clone(), r.label)).collect();
    let (records, orphans): (Vec<_>, Vec<_>) = std::mem::take(&mut manifest.records)
        .into_iter()
        .partition(|r| r.obfuscated_of.as_ref().is_none_or(|b| ids.get(b) == Some(&r.label)));
    manifest.records = records;
    for r in orphans {
        manifest.failures.push(FailureRecord {
            source: r.image_path.clone(),
            label: Some(r.label),
            reason: "MissingLinkage".into(),
            message: format!("base {:?} is not in the manifest or has another label", r.obfuscated_of),
        });
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// train / eval / roc / ablate

#[derive(Clone, Debug, PartialEq)]
pub enum TrainMode {
    Holdout,
    Temporal { cutoff: NaiveDate },
    Augmented { fraction: f64, test: ObfuscatedTest },
}

/// The split plans a training command runs.
pub fn plans_for(manifest: &Manifest, mode: &TrainMode, cfg: &RunConfig) -> Result<Vec<SplitPlan>> {
    let seeds = (0..cfg.repetitions as u64).map(|rep| (rep, cfg.seed));
    Ok(match mode {
        TrainMode::Holdout => seeds
            .map(|(rep, seed)| eval::holdout_split(&manifest.base_records(), seed, rep, cfg.ratios()))
            .collect::<eval::Result<_>>()?,
        TrainMode::Temporal { cutoff } => seeds
            .map(|(rep, seed)| {
                let mut plan = make_temporal_split(&manifest.base_records(), *cutoff, seed.wrapping_add(rep))?;
                plan.repetition = rep;
                Ok(plan)
            })
            .collect::<eval::Result<_>>()?,
        TrainMode::Augmented { fraction, test } => seeds
            .map(|(repetition, seed)| {
                let opts =
                    AugmentOptions { fraction: *fraction, test: *test, ratios: cfg.ratios(), seed, repetition };
                make_augmented_split(&manifest.base_records(), &manifest.obfuscated_records(), &opts)
            })
            .collect::<eval::Result<_>>()?,
    })
}

/// Files written by [`cmd_train`] for run `i`.
pub fn run_files(out: &Path, i: usize) -> [PathBuf; 3] {
    [out.join(format!("split-{i}.json")), out.join(format!("model-{i}.dxrm")), out.join(format!("history-{i}.jsonl"))]
}

pub fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = Vec::new();
    for item in items {
        serde_json::to_writer(&mut text, item).expect("value serialises");
        text.push(b'\n');
    }
    write_atomic(path, &text)
}

fn write_run(out: &Path, i: usize, run: &eval::RunResult) -> Result<()> {
    let [split, model, history] = run_files(out, i);
    write_atomic(&split, serde_json::to_string_pretty(&run.plan).expect("plan serialises").as_bytes())?;
    write_checkpoint(&model, &run.outcome.network, Some(&run.outcome.optimizer))?;
    let mut text = Vec::new();
    write_history(&mut text, &run.outcome.history).map_err(io_err(&history))?;
    write_atomic(&history, &text)
}

/// Train one model per plan and write splits, checkpoints, histories and
/// `metrics.jsonl` to `out`. Prints split sizes and a summary table.
pub fn cmd_train(
    manifest: &Manifest,
    cache: &Path,
    cfg: &RunConfig,
    mode: &TrainMode,
    out: &Path,
    exec: Exec,
    mut w: impl Write,
) -> Result<ProtocolResult> {
    cfg.validate()?;
    let plans = plans_for(manifest, mode, cfg)?;
    let dataset = load_dataset(&manifest.records, cache, cfg.input_width)?;
    for (i, p) in plans.iter().enumerate() {
        let (a, b, c) = p.sizes();
        writeln!(w, "run {i}: train {a} valid {b} test {c}").map_err(io_err("stdout"))?;
    }
    let arch = Architecture::new(cfg.input_width)?;
    let result = run_plans(&dataset, &plans, arch, &cfg.train_config(exec), cfg.seed)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (i, run) in result.runs.iter().enumerate() {
        write_run(out, i, run)?;
    }
    let lines: Vec<RunLine> = result.runs.iter().map(|r| RunLine::new(r, cfg.input_width)).collect();
    write_json_lines(&out.join("metrics.jsonl"), &lines)?;
    writeln!(w, "{}", SummaryTable(&result)).map_err(io_err("stdout"))?;
    Ok(result)
}

/// Mean ± std table of a protocol run.
pub struct SummaryTable<'a>(pub &'a ProtocolResult);

impl fmt::Display for SummaryTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>22}   ({} runs)", "metric", "mean ± std", self.0.runs.len())?;
        for (name, m) in eval::METRIC_NAMES.iter().zip(self.0.summary.values()) {
            writeln!(f, "{name:<10} {:>22}", m.to_string())?;
        }
        Ok(())
    }
}

/// Which records to evaluate on.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    All,
    /// The test ids of a saved split.
    Split(PathBuf),
    /// One id per line.
    Ids(PathBuf),
}

pub fn select_records(manifest: &Manifest, selection: &Selection) -> Result<Vec<SampleRecord>> {
    let ids: Vec<String> = match selection {
        Selection::All => return Ok(manifest.records.clone()),
        Selection::Split(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let plan: SplitPlan = serde_json::from_str(&text)
                .map_err(|e| StoreError::InputList(format!("{}: {e}", path.display())))?;
            plan.test
        }
        Selection::Ids(path) => {
            let file = fs::File::open(path).map_err(io_err(path))?;
            BufReader::new(file)
                .lines()
                .collect::<io::Result<Vec<_>>>()
                .map_err(io_err(path))?
                .into_iter()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        }
    };
    let by_id: HashMap<&str, &SampleRecord> = manifest.records.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.iter()
        .map(|id| by_id.get(id.as_str()).map(|r| (*r).clone()).ok_or_else(|| EvalError::MissingSample(id.clone()).into()))
        .collect()
}

/// Load a checkpoint and the matching cached images.
fn model_and_samples(model: &Path, records: &[SampleRecord], cache: &Path) -> Result<(Network, Dataset)> {
    let net = read_checkpoint(model)?.network;
    let width = net.arch.input_width;
    if let Some(first) = records.first() {
        let path = resized_path(cache, &first.id, width);
        if !path.is_file() {
            // Report a mismatch if the cache was built at another width.
            if let Some(other) = cached_width(cache, &first.id) {
                return Err(StoreError::WidthMismatch { checkpoint: width, cache: other });
            }
        } else {
            let cached = image::peek_width(&path)?;
            if cached != width {
                return Err(StoreError::WidthMismatch { checkpoint: width, cache: cached });
            }
        }
    }
    let dataset = load_dataset(records, cache, width)?;
    Ok((net, dataset))
}

fn cached_width(cache: &Path, id: &str) -> Option<usize> {
    let mut widths: Vec<usize> = fs::read_dir(cache)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix('w')?.parse().ok())
        .filter(|&w| resized_path(cache, id, w).is_file())
        .collect();
    widths.sort_unstable();
    widths.first().copied()
}

pub fn cmd_eval(
    model: &Path,
    manifest: &Manifest,
    cache: &Path,
    selection: &Selection,
    threshold: f64,
    exec: Exec,
    mut w: impl Write,
) -> Result<MetricsReport> {
    let records = select_records(manifest, selection)?;
    let (net, dataset) = model_and_samples(model, &records, cache)?;
    let samples: Vec<&Sample> = dataset.samples().iter().collect();
    let report = eval::evaluate(&net, &samples, threshold, exec)?;
    write!(w, "{report}").map_err(io_err("stdout"))?;
    Ok(report)
}

pub fn cmd_roc(
    model: &Path,
    manifest: &Manifest,
    cache: &Path,
    selection: &Selection,
    points_out: &Path,
    exec: Exec,
    mut w: impl Write,
) -> Result<eval::RocCurve> {
    let records = select_records(manifest, selection)?;
    let (net, dataset) = model_and_samples(model, &records, cache)?;
    let samples: Vec<&Sample> = dataset.samples().iter().collect();
    let scores = score(&net, &samples, exec)?;
    let curve = roc_curve(&scores, &eval::labels_of(&samples))?;
    let mut text = Vec::new();
    write_points(&mut text, &curve).map_err(io_err(points_out))?;
    write_atomic(points_out, &text)?;
    writeln!(w, "auc {:.6} ({} points) -> {}", curve.auc, curve.points.len(), points_out.display())
        .map_err(io_err("stdout"))?;
    Ok(curve)
}

/// Regenerate the cache at each width and run the hold-out protocol there.
pub fn cmd_ablate(
    manifest: &Manifest,
    cache: &Path,
    cfg: &RunConfig,
    opts: &AblationOptions,
    out: Option<&Path>,
    exec: Exec,
    mut w: impl Write,
) -> Result<Vec<AblationRow>> {
    let records = manifest.base_records();
    let raw = load_raw(&records, cache)?;
    let mut regen_error = None;
    let rows = eval::resize_ablation(opts, &cfg.train_config(exec), |width| {
        if let Err(e) = regenerate_resized(&records, cache, width) {
            let msg = e.to_string();
            regen_error = Some(e);
            return Err(EvalError::InvalidConfig(msg));
        }
        dataset_at_width(&raw, width)
    });
    let rows = match (rows, regen_error) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    write!(w, "{}", AblationTable(&rows)).map_err(io_err("stdout"))?;
    if let Some(out) = out {
        let lines: Vec<RunLine> =
            rows.iter().flat_map(|row| row.result.runs.iter().map(|r| RunLine::new(r, row.width))).collect();
        write_json_lines(&out.join("ablation.jsonl"), &lines)?;
    }
    Ok(rows)
}
