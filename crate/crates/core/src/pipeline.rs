//! Records to labelled scalogram images: preprocessing, R-peak detection,
//! segmentation, CWT and the train/val/test assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::beats::{detect_r_peaks, segment_beats};
use crate::data_io::{ImageSet, LabeledImage, Split, SplitTag};
use crate::error::{Error, Result};
use crate::scalogram::{cwt_morlet, scalogram_image_sized, CwtMatrix, DEFAULT_SCALES, IMAGE_SIZE};
use crate::signal::{preprocess, EcgRecord, PreprocessConfig};
use crate::training::{derive_seed, split_dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    /// Fraction of the min-max range.
    pub min_height: f64,
    pub min_distance_s: f64,
    /// Samples kept on each side of the R peak, in milliseconds.
    pub window_ms: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            min_height: 0.5,
            min_distance_s: 0.6,
            window_ms: 250.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalogramConfig {
    pub n_scales: usize,
    pub image_size: usize,
}

impl Default for ScalogramConfig {
    fn default() -> Self {
        Self {
            n_scales: DEFAULT_SCALES,
            image_size: IMAGE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub segmentation: SegmentationConfig,
    pub scalogram: ScalogramConfig,
    pub split_ratios: [f64; 3],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            segmentation: SegmentationConfig::default(),
            scalogram: ScalogramConfig::default(),
            split_ratios: [0.70, 0.15, 0.15],
        }
    }
}

/// Per-record bookkeeping from [`build_imageset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub subject: String,
    pub peaks: usize,
    pub beats: usize,
    pub skipped_at_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub records: Vec<RecordSummary>,
    pub split_counts: BTreeMap<Split, usize>,
    /// Subjects dropped because they produced too few beats.
    pub rejected_subjects: Vec<String>,
}

struct RecordBeats {
    images: Vec<crate::numerics::Tensor>,
    summary: RecordSummary,
}

/// Seed used for the record at `index` of a [`build_imageset`] call.
pub fn record_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

/// CWT coefficients of every complete beat in `record`, before resizing.
pub fn beat_transforms(
    record: &EcgRecord,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(Vec<CwtMatrix>, RecordSummary)> {
    let clean = preprocess(record, &config.preprocess, seed)?;
    let seg = &config.segmentation;
    let peaks = detect_r_peaks(&clean, seg.min_height, seg.min_distance_s)?;
    let segmentation = segment_beats(&clean, &peaks, seg.window_ms)?;
    let coeffs = segmentation
        .beats
        .iter()
        .map(|beat| cwt_morlet(beat, config.scalogram.n_scales))
        .collect::<Result<Vec<_>>>()?;
    let summary = RecordSummary {
        subject: record.subject_id().to_string(),
        peaks: peaks.len(),
        beats: segmentation.beats.len(),
        skipped_at_edges: segmentation.skipped,
    };
    Ok((coeffs, summary))
}

fn record_beats(record: &EcgRecord, config: &PipelineConfig, seed: u64) -> Result<RecordBeats> {
    let (coeffs, summary) = beat_transforms(record, config, seed)?;
    let images = coeffs
        .iter()
        .map(|c| Ok(scalogram_image_sized(c, config.scalogram.image_size)?.pixels))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecordBeats { images, summary })
}

/// Runs every record through the pipeline and assigns splits. Records tagged
/// [`SplitTag::Auto`] are split at the beat level, stratified per subject;
/// fixed tags are kept. Records are processed in parallel with per-record
/// seeds, so the result does not depend on scheduling.
pub fn build_imageset(
    records: &[(EcgRecord, SplitTag)],
    config: &PipelineConfig,
    seed: u64,
) -> Result<(ImageSet, DatasetReport)> {
    if records.is_empty() {
        return Err(Error::domain("no records to process"));
    }
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(records.len());
    let per_worker = records.len().div_ceil(workers);
    let mut processed: Vec<Option<Result<RecordBeats>>> = (0..records.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (w, slot) in processed.chunks_mut(per_worker).enumerate() {
            let base = w * per_worker;
            s.spawn(move || {
                for (k, out) in slot.iter_mut().enumerate() {
                    let i = base + k;
                    *out = Some(record_beats(&records[i].0, config, record_seed(seed, i)));
                }
            });
        }
    });

    let mut classes: Vec<String> = records.iter().map(|(r, _)| r.subject_id().to_string()).collect();
    classes.sort();
    classes.dedup();
    let class_of = |s: &str| classes.binary_search_by(|c| c.as_str().cmp(s)).expect("subject listed");

    let mut summaries = Vec::with_capacity(records.len());
    let mut pending: Vec<(usize, crate::numerics::Tensor, SplitTag)> = Vec::new();
    for (p, (rec, tag)) in processed.into_iter().zip(records) {
        let beats = p.expect("every record processed")?;
        let label = class_of(rec.subject_id());
        pending.extend(beats.images.into_iter().map(|img| (label, img, *tag)));
        summaries.push(beats.summary);
    }

    let auto: Vec<usize> = (0..pending.len()).filter(|&i| pending[i].2 == SplitTag::Auto).collect();
    let auto_labels: Vec<usize> = auto.iter().map(|&i| pending[i].0).collect();
    let assignment = split_dataset(&auto_labels, config.split_ratios, derive_seed(seed, &[u64::MAX]))?;
    let mut split_of: Vec<Option<Split>> = pending
        .iter()
        .map(|(_, _, t)| match t {
            SplitTag::Fixed(s) => Some(*s),
            SplitTag::Auto => None,
        })
        .collect();
    for split in Split::ALL {
        for &k in assignment.get(split) {
            split_of[auto[k]] = Some(split);
        }
    }
    let rejected: Vec<String> = assignment
        .rejected_subjects
        .iter()
        .map(|&c| classes[c].clone())
        .collect();

    // Drop subjects that ended up without training beats and relabel densely.
    let mut has_train = vec![false; classes.len()];
    for ((label, _, _), s) in pending.iter().zip(&split_of) {
        if *s == Some(Split::Train) {
            has_train[*label] = true;
        }
    }
    let kept: Vec<usize> = (0..classes.len()).filter(|&c| has_train[c]).collect();
    if kept.len() < 2 {
        return Err(Error::domain(format!(
            "only {} subjects have training beats",
            kept.len()
        )));
    }
    let mut remap = vec![usize::MAX; classes.len()];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let mut items = Vec::with_capacity(pending.len());
    let mut split_counts = BTreeMap::new();
    for ((label, pixels, _), s) in pending.into_iter().zip(split_of) {
        if let (Some(split), true) = (s, remap[label] != usize::MAX) {
            *split_counts.entry(split).or_insert(0) += 1;
            items.push(LabeledImage {
                pixels,
                label: remap[label],
                split,
            });
        }
    }
    let mut rejected_subjects = rejected;
    for c in 0..classes.len() {
        if remap[c] == usize::MAX && !rejected_subjects.contains(&classes[c]) {
            rejected_subjects.push(classes[c].clone());
        }
    }
    let set = ImageSet {
        size: config.scalogram.image_size,
        classes: kept.iter().map(|&c| classes[c].clone()).collect(),
        items,
    };
    Ok((
        set,
        DatasetReport {
            records: summaries,
            split_counts,
            rejected_subjects,
        },
    ))
}
