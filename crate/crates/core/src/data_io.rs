//! On-disk formats and the synthetic multi-subject ECG generator.
//!
//! Every binary format starts with a four-byte magic and a little-endian
//! `u16` version; numeric payloads are little-endian `f32`. Writers go
//! through a sibling temporary file and an atomic rename, so readers never
//! see a half-written file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ParameterSet};
use crate::numerics::Tensor;
use crate::signal::{EcgRecord, Stage};

pub const RECORD_MAGIC: &[u8; 4] = b"ECGR";
pub const RECORD_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECGB";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const IMAGESET_MAGIC: &[u8; 4] = b"ECGI";
pub const IMAGESET_VERSION: u16 = 1;
pub const MANIFEST_HEADER: &str = "#ecgauth-manifest v1";

// ---------------------------------------------------------------------------
// byte helpers

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(at as u64, format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(self.pos as u64, "length overflow"))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4], version: u16, what: &str) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad {what} magic {m:?}, expected {:?}",
                    std::str::from_utf8(magic).unwrap()
                ),
            ));
        }
        let v = self.u16("version")?;
        if v != version {
            return Err(Error::format(
                4,
                format!("unsupported {what} version {v}, expected {version}"),
            ));
        }
        Ok(())
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes after {what}", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Writes `bytes` through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// records

fn stage_code(stage: Stage) -> u8 {
    match stage {
        Stage::Raw => 0,
        Stage::Filtered => 1,
        Stage::Resampled => 2,
        Stage::Noised => 3,
        Stage::Normalized => 4,
    }
}

fn stage_from_code(code: u8, offset: u64) -> Result<Stage> {
    Ok(match code {
        0 => Stage::Raw,
        1 => Stage::Filtered,
        2 => Stage::Resampled,
        3 => Stage::Noised,
        4 => Stage::Normalized,
        other => return Err(Error::format(offset, format!("unknown stage code {other}"))),
    })
}

/// Layout: magic, version, `f64` fs, subject, lead (u32 length + UTF-8),
/// `u8` stage, `u64` n_samples, then `n_samples` f32 values.
pub fn encode_record(record: &EcgRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + 4 * record.len());
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.extend_from_slice(&record.fs().to_le_bytes());
    put_string(&mut out, record.subject_id());
    put_string(&mut out, record.lead());
    out.push(stage_code(record.stage()));
    out.extend_from_slice(&(record.len() as u64).to_le_bytes());
    put_f32s(&mut out, record.samples());
    out
}

pub fn decode_record(bytes: &[u8]) -> Result<EcgRecord> {
    let mut r = Reader::new(bytes);
    r.header(RECORD_MAGIC, RECORD_VERSION, "record file")?;
    let fs_at = r.pos as u64;
    let fs = r.f64("sampling rate")?;
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::format(
            fs_at,
            format!("sampling rate must be positive, got {fs}"),
        ));
    }
    let subject = r.string("subject id")?;
    let lead = r.string("lead name")?;
    let stage_at = r.pos as u64;
    let stage = stage_from_code(r.u8("stage")?, stage_at)?;
    let n = r.u64("sample count")? as usize;
    let samples = r.f32s(n, "sample payload")?;
    r.finish("record payload")?;
    EcgRecord::with_stage(samples, fs, subject, lead, stage)
}

pub fn write_record(path: &Path, record: &EcgRecord) -> Result<()> {
    write_atomic(path, &encode_record(record))
}

pub fn read_record(path: &Path) -> Result<EcgRecord> {
    decode_record(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Split column of a manifest line. `Auto` leaves the assignment to the
/// beat-level stratified splitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Fixed(Split),
    Auto,
}

impl SplitTag {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => SplitTag::Fixed(Split::Train),
            "val" => SplitTag::Fixed(Split::Val),
            "test" => SplitTag::Fixed(Split::Test),
            "auto" => SplitTag::Auto,
            _ => return None,
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            SplitTag::Fixed(s) => s.as_str(),
            SplitTag::Auto => "auto",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub subject: String,
    pub split: SplitTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub profile: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Sorted distinct subject labels; position = class index.
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.entries.iter().map(|e| e.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn render(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER} profile={}\n", self.profile);
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.path.display(), e.subject, e.split.as_str()));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n');
        let mut offset = 0u64;
        let header = lines.next().ok_or_else(|| Error::format(0, "empty manifest"))?;
        offset += header.len() as u64;
        let profile = header
            .trim_end()
            .strip_prefix(MANIFEST_HEADER)
            .and_then(|rest| rest.trim().strip_prefix("profile="))
            .ok_or_else(|| {
                Error::format(
                    0,
                    format!("manifest header must read `{MANIFEST_HEADER} profile=<name>`"),
                )
            })?
            .to_string();
        let mut entries = Vec::new();
        for line in lines {
            let at = offset;
            offset += line.len() as u64;
            let body = line.trim_end_matches(['\n', '\r']);
            if body.is_empty() {
                continue;
            }
            let cols: Vec<&str> = body.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::format(
                    at,
                    format!("expected 3 tab-separated columns, got {}", cols.len()),
                ));
            }
            let split = SplitTag::parse(cols[2])
                .ok_or_else(|| Error::format(at, format!("unknown split tag {:?}", cols[2])))?;
            if cols[1].is_empty() {
                return Err(Error::format(at, "empty subject label"));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(cols[0]),
                subject: cols[1].to_string(),
                split,
            });
        }
        Ok(Self { profile, entries })
    }

    pub fn resolve(&self, manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(&entry.path)
        }
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_atomic(path, manifest.render().as_bytes())
}

/// Parses the manifest and checks that every listed record exists.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "manifest is not UTF-8"))?;
    let m = Manifest::parse(&text)?;
    for e in &m.entries {
        let p = m.resolve(path, e);
        if !p.is_file() {
            return Err(Error::Io {
                path: p,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "manifest entry does not exist"),
            });
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// checkpoints

/// Layout: magic, version, `u64` config fingerprint, `u64` parameter version,
/// `u32` tensor count, then per tensor: name (u32 length + UTF-8), `u32`
/// rank, `u64` dims, f32 payload.
pub fn encode_checkpoint(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.fingerprint.to_le_bytes());
    out.extend_from_slice(&params.version.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        put_string(&mut out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    out
}

/// Decodes a checkpoint for `config`. The file must carry the config's
/// fingerprint and exactly the tensors `build_model` would create; nothing
/// is returned unless the whole file validates.
pub fn decode_checkpoint(bytes: &[u8], config: &ModelConfig) -> Result<ParameterSet> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let found = r.u64("fingerprint")?;
    let expected = config.fingerprint();
    if found != expected {
        return Err(Error::Fingerprint { expected, found });
    }
    let version = r.u64("parameter version")?;
    let template = build_model(config, 0)?;
    let count_at = r.pos as u64;
    let n = r.u32("tensor count")? as usize;
    if n != template.len() {
        return Err(Error::format(
            count_at,
            format!("checkpoint holds {n} tensors, model needs {}", template.len()),
        ));
    }
    let mut entries = Vec::with_capacity(n);
    for (want, want_t) in template.iter() {
        let at = r.pos as u64;
        let name = r.string("tensor name")?;
        if name != want {
            return Err(Error::format(
                at,
                format!("tensor {name:?} where {want:?} was expected"),
            ));
        }
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dim")? as usize);
        }
        if shape != want_t.shape() {
            return Err(Error::format(
                at,
                format!("tensor {name} has shape {shape:?}, expected {:?}", want_t.shape()),
            ));
        }
        let data = r.f32s(want_t.len(), "tensor payload")?;
        entries.push((name, Tensor::new(shape, data)?));
    }
    r.finish("checkpoint")?;
    let mut params = ParameterSet::new(entries, found)?;
    params.version = version;
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<ParameterSet> {
    decode_checkpoint(&read_file(path)?, config)
}

/// Rounds every tensor to f32 precision, the precision checkpoints keep.
pub fn round_to_storage(params: &mut ParameterSet) {
    for i in 0..params.len() {
        params
            .tensor_mut(i)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = *v as f32 as f64);
    }
}

// ---------------------------------------------------------------------------
// scalogram image sets

/// One labelled network input.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `(3, size, size)`.
    pub pixels: Tensor,
    pub label: usize,
    pub split: Split,
}

/// Preprocessed network inputs for a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub size: usize,
    /// Class index → subject label.
    pub classes: Vec<String>,
    pub items: Vec<LabeledImage>,
}

impl ImageSet {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledImage> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Layout: magic, version, `u32` size, `u32` class count, class labels,
/// `u64` item count, then per item `u32` label, `u8` split, f32 pixels.
pub fn encode_imageset(set: &ImageSet) -> Result<Vec<u8>> {
    let px = 3 * set.size * set.size;
    let mut out = Vec::with_capacity(32 + set.items.len() * (5 + 4 * px));
    out.extend_from_slice(IMAGESET_MAGIC);
    out.extend_from_slice(&IMAGESET_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.size as u32).to_le_bytes());
    out.extend_from_slice(&(set.classes.len() as u32).to_le_bytes());
    for c in &set.classes {
        put_string(&mut out, c);
    }
    out.extend_from_slice(&(set.items.len() as u64).to_le_bytes());
    for item in &set.items {
        if item.pixels.shape() != [3, set.size, set.size] {
            return Err(Error::Shape {
                op: "image set",
                lhs: item.pixels.shape().to_vec(),
                rhs: vec![3, set.size, set.size],
            });
        }
        if item.label >= set.classes.len() {
            return Err(Error::domain(format!(
                "label {} out of {} classes",
                item.label,
                set.classes.len()
            )));
        }
        out.extend_from_slice(&(item.label as u32).to_le_bytes());
        out.push(split_code(item.split));
        put_f32s(&mut out, item.pixels.data());
    }
    Ok(out)
}

pub fn decode_imageset(bytes: &[u8]) -> Result<ImageSet> {
    let mut r = Reader::new(bytes);
    r.header(IMAGESET_MAGIC, IMAGESET_VERSION, "image set")?;
    let size = r.u32("image size")? as usize;
    let n_classes = r.u32("class count")? as usize;
    let mut classes = Vec::with_capacity(n_classes.min(1 << 16));
    for _ in 0..n_classes {
        classes.push(r.string("class label")?);
    }
    let n = r.u64("item count")? as usize;
    let px = 3 * size * size;
    let mut items = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let at = r.pos as u64;
        let label = r.u32("label")? as usize;
        if label >= n_classes {
            return Err(Error::format(at, format!("label {label} out of {n_classes} classes")));
        }
        let split_at = r.pos as u64;
        let split = match r.u8("split")? {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            other => return Err(Error::format(split_at, format!("unknown split code {other}"))),
        };
        let pixels = Tensor::new(vec![3, size, size], r.f32s(px, "pixels")?)?;
        items.push(LabeledImage { pixels, label, split });
    }
    r.finish("image set")?;
    Ok(ImageSet { size, classes, items })
}

pub fn write_imageset(path: &Path, set: &ImageSet) -> Result<()> {
    write_atomic(path, &encode_imageset(set)?)
}

pub fn read_imageset(path: &Path) -> Result<ImageSet> {
    decode_imageset(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// synthetic ECG

/// One Gaussian bump of the P-QRS-T complex, relative to the R peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub offset_s: f64,
    pub width_s: f64,
}

impl Wave {
    fn at(&self, t: f64) -> f64 {
        let u = (t - self.offset_s) / self.width_s;
        self.amplitude * (-0.5 * u * u).exp()
    }
}

/// Subject-specific beat shape and rhythm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Morphology {
    /// P, Q, R, S, T.
    pub waves: [Wave; 5],
    pub heart_rate_bpm: f64,
    pub wander_amplitude: f64,
    pub wander_hz: f64,
}

/// Template window used for the distinctness check.
const TEMPLATE_SPAN_S: (f64, f64) = (-0.3, 0.45);
/// Candidates whose template correlates at least this much with an earlier
/// subject are redrawn.
const MAX_TEMPLATE_CORRELATION: f64 = 0.9;
pub const HEART_RATE_JITTER: f64 = 0.05;
/// Silence before the first and after the last beat.
pub const SYNTH_PADDING_S: f64 = 0.75;

impl Morphology {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let r_amp = rng.random_range(0.9..1.6);
        let w = |rng: &mut ChaCha8Rng, a: (f64, f64), o: (f64, f64), s: (f64, f64)| Wave {
            amplitude: r_amp * rng.random_range(a.0..a.1),
            offset_s: rng.random_range(o.0..o.1),
            width_s: rng.random_range(s.0..s.1),
        };
        let p = w(rng, (0.05, 0.2), (-0.24, -0.14), (0.012, 0.03));
        let q = w(rng, (-0.3, -0.02), (-0.035, -0.018), (0.005, 0.012));
        let r = Wave {
            amplitude: r_amp,
            offset_s: 0.0,
            width_s: rng.random_range(0.007..0.02),
        };
        let s = w(rng, (-0.35, -0.03), (0.018, 0.045), (0.005, 0.014));
        let t_sign = if rng.random_bool(0.2) { -1.0 } else { 1.0 };
        let mut t = w(rng, (0.08, 0.3), (0.18, 0.34), (0.025, 0.06));
        t.amplitude *= t_sign;
        Self {
            waves: [p, q, r, s, t],
            heart_rate_bpm: rng.random_range(55.0..85.0),
            wander_amplitude: r_amp * rng.random_range(0.0..0.04),
            wander_hz: rng.random_range(0.1..0.3),
        }
    }

    /// Noise-free single beat at offsets `t` seconds from the R peak.
    pub fn beat_at(&self, t: f64) -> f64 {
        self.waves.iter().map(|w| w.at(t)).sum()
    }

    pub fn template(&self, fs: f64) -> Vec<f64> {
        let (a, b) = TEMPLATE_SPAN_S;
        let n = ((b - a) * fs).round() as usize;
        (0..n).map(|i| self.beat_at(a + i as f64 / fs)).collect()
    }
}

/// Pearson correlation of two equally long sequences.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEcg {
    pub records: Vec<EcgRecord>,
    /// Exact R-peak sample indices per record.
    pub peaks: Vec<Vec<usize>>,
    pub morphologies: Vec<Morphology>,
}

pub fn subject_label(i: usize) -> String {
    format!("subject{i:03}")
}

/// `n_subjects` clean raw records of `beats_per_subject` beats each, with
/// subject-specific morphology, ±5 % beat-to-beat rate jitter and slow
/// baseline wander. R peaks fall exactly on the returned sample indices.
pub fn synth_ecg(n_subjects: usize, beats_per_subject: usize, fs: f64, seed: u64) -> Result<SynthEcg> {
    if n_subjects < 2 {
        return Err(Error::domain(format!("need at least 2 subjects, got {n_subjects}")));
    }
    if !(fs >= 100.0 && fs.is_finite()) {
        return Err(Error::domain(format!(
            "sampling rate must be at least 100 Hz, got {fs}"
        )));
    }
    if beats_per_subject == 0 {
        return Err(Error::domain("need at least one beat per subject"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut morphologies: Vec<Morphology> = Vec::with_capacity(n_subjects);
    let mut templates: Vec<Vec<f64>> = Vec::with_capacity(n_subjects);
    let mut attempts = 0usize;
    while morphologies.len() < n_subjects {
        attempts += 1;
        if attempts > 1000 * n_subjects {
            return Err(Error::domain(format!(
                "could not draw {n_subjects} distinct morphologies"
            )));
        }
        let m = Morphology::draw(&mut rng);
        let t = m.template(fs);
        if templates.iter().all(|o| correlation(o, &t) < MAX_TEMPLATE_CORRELATION) {
            morphologies.push(m);
            templates.push(t);
        }
    }

    let mut records = Vec::with_capacity(n_subjects);
    let mut peaks = Vec::with_capacity(n_subjects);
    for (i, m) in morphologies.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
        let rr = 60.0 / m.heart_rate_bpm;
        let mut r_idx = Vec::with_capacity(beats_per_subject);
        let mut t = SYNTH_PADDING_S;
        for _ in 0..beats_per_subject {
            r_idx.push((t * fs).round() as usize);
            t += rr * (1.0 + rng.random_range(-HEART_RATE_JITTER..HEART_RATE_JITTER));
        }
        let last = *r_idx.last().unwrap();
        let n = last + (SYNTH_PADDING_S * fs).round() as usize + 1;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut x: Vec<f64> = (0..n)
            .map(|k| m.wander_amplitude * (std::f64::consts::TAU * m.wander_hz * k as f64 / fs + phase).sin())
            .collect();
        // Each beat only touches samples within a second of its R peak.
        let reach = fs.round() as isize;
        for &r in &r_idx {
            let lo = (r as isize - reach).max(0) as usize;
            let hi = ((r as isize + reach) as usize).min(n - 1);
            for (k, v) in x.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *v += m.beat_at((k as f64 - r as f64) / fs);
            }
        }
        records.push(EcgRecord::new(x, fs, subject_label(i), "I")?);
        peaks.push(r_idx);
    }
    Ok(SynthEcg {
        records,
        peaks,
        morphologies,
    })
}
