//! Cohort domain model: slides, tiles, tasks, and manifest persistence.
//!
//! Manifests are line-delimited JSON (one record per line, UTF-8): the first
//! line is a header object carrying the task and split role, every following
//! line is one [`SlideRecord`]. Manifests are immutable after load and safe
//! to share across threads.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::seed;

/// Prediction target. Positive classes are fixed by the label dichotomies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskName {
    MSI,
    BRAF,
    CIMP,
}

impl TaskName {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::MSI => "MSI",
            TaskName::BRAF => "BRAF",
            TaskName::CIMP => "CIMP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "MSI" => Some(TaskName::MSI),
            "BRAF" => Some(TaskName::BRAF),
            "CIMP" => Some(TaskName::CIMP),
            _ => None,
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A binary prediction task and the description of its positive class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub name: TaskName,
    pub positive_class: String,
}

impl Task {
    pub fn new(name: TaskName) -> Self {
        let positive_class = match name {
            TaskName::MSI => "MSI-H",
            TaskName::BRAF => "BRAF-mutant",
            TaskName::CIMP => "CIMP-H",
        };
        Task {
            name,
            positive_class: positive_class.to_string(),
        }
    }
}

/// One whole-slide image with its patient linkage, resolution, and labels.
///
/// Labels are optional per task so one cohort file can serve MSI/BRAF/CIMP
/// with differing N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub cohort: String,
    pub image_path: String,
    pub microns_per_pixel: f64,
    #[serde(default)]
    pub labels: BTreeMap<String, u8>,
}

impl SlideRecord {
    pub fn label(&self, task: TaskName) -> Option<u8> {
        self.labels.get(task.as_str()).copied()
    }
}

/// One tile cut from a slide, with geometry, QC, and selection annotations.
///
/// `x`/`y` are the tile origin in native slide coordinates; `native_size` is
/// the native-pixel side length of the source square; `output_size` is the
/// stored tile side length after resampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub native_size: u32,
    pub output_size: u32,
    pub qc_edge_fraction: f64,
    pub qc_pass: bool,
    #[serde(default)]
    pub tissue_probs: Option<[f64; 9]>,
    #[serde(default)]
    pub selected: bool,
    pub tile_path: String,
}

impl TileRecord {
    /// Stable tile identifier used in score files and external score lookups.
    pub fn tile_id(&self) -> String {
        format!("{}_{}_{}", self.slide_id, self.x, self.y)
    }
}

/// Whether the cohort drives training/CV or external testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    ExternalTest,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    task: Task,
    split_role: SplitRole,
}

/// A validated cohort of slides for one task.
#[derive(Debug, Clone)]
pub struct CohortManifest {
    pub task: Task,
    pub split_role: SplitRole,
    pub slides: Vec<SlideRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum CohortError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

impl CohortManifest {
    pub fn new(
        task: Task,
        split_role: SplitRole,
        slides: Vec<SlideRecord>,
    ) -> Result<Self, CohortError> {
        let manifest = CohortManifest {
            task,
            split_role,
            slides,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<(), CohortError> {
        let mut seen = HashSet::new();
        for slide in &self.slides {
            if !seen.insert(slide.slide_id.as_str()) {
                return Err(CohortError::InvariantViolation(format!(
                    "duplicate slide_id {}",
                    slide.slide_id
                )));
            }
            if !(slide.microns_per_pixel > 0.0) || !slide.microns_per_pixel.is_finite() {
                return Err(CohortError::InvariantViolation(format!(
                    "slide {}: microns_per_pixel must be positive, got {}",
                    slide.slide_id, slide.microns_per_pixel
                )));
            }
            for (task, value) in &slide.labels {
                if *value > 1 {
                    return Err(CohortError::InvariantViolation(format!(
                        "slide {}: label {task} must be 0 or 1, got {value}",
                        slide.slide_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads and validates a manifest from line-delimited JSON.
    pub fn load(path: &Path) -> Result<Self, CohortError> {
        let file = fs::File::open(path).map_err(|source| CohortError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let (_, header_line) = lines.next().ok_or(CohortError::Parse {
            line: 1,
            message: "empty manifest (missing header line)".into(),
        })?;
        let header_line = header_line.map_err(|source| CohortError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let header: ManifestHeader =
            serde_json::from_str(&header_line).map_err(|e| CohortError::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?;

        let mut slides = Vec::new();
        for (idx, line) in lines {
            let line = line.map_err(|source| CohortError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let slide: SlideRecord =
                serde_json::from_str(&line).map_err(|e| CohortError::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            slides.push(slide);
        }
        CohortManifest::new(header.task, header.split_role, slides)
    }

    /// Writes the manifest as line-delimited JSON. Save→load round-trips all fields.
    pub fn save(&self, path: &Path) -> Result<(), CohortError> {
        let mut out = String::new();
        let header = ManifestHeader {
            task: self.task.clone(),
            split_role: self.split_role,
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for slide in &self.slides {
            out.push_str(&serde_json::to_string(slide).expect("slide serializes"));
            out.push('\n');
        }
        write_atomic(path, out.as_bytes()).map_err(|source| CohortError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Positive and negative slide counts for this manifest's task.
    /// Slides without a label for the task are not counted.
    pub fn label_counts(&self) -> LabelCounts {
        let mut counts = LabelCounts::default();
        for slide in &self.slides {
            match slide.label(self.task.name) {
                Some(1) => counts.positives += 1,
                Some(_) => counts.negatives += 1,
                None => counts.unlabeled += 1,
            }
        }
        counts
    }

    /// Keeps exactly one slide per patient, chosen deterministically from
    /// (patient_id, seed). Slide order in the input does not influence the
    /// choice; output is sorted by slide_id.
    pub fn select_one_slide_per_patient(&self, seed_value: u64) -> CohortManifest {
        let mut by_patient: HashMap<&str, Vec<&SlideRecord>> = HashMap::new();
        for slide in &self.slides {
            by_patient
                .entry(slide.patient_id.as_str())
                .or_default()
                .push(slide);
        }
        let mut chosen = Vec::with_capacity(by_patient.len());
        for (patient_id, mut slides) in by_patient {
            slides.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
            let pick =
                seed::value(seed_value, &["slide-selection", patient_id]) as usize % slides.len();
            chosen.push(slides[pick].clone());
        }
        chosen.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
        CohortManifest {
            task: self.task.clone(),
            split_role: self.split_role,
            slides: chosen,
        }
    }
}

/// Slide counts by label, displayed as `positives:negatives`.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LabelCounts {
    pub positives: usize,
    pub negatives: usize,
    pub unlabeled: usize,
}

impl fmt::Display for LabelCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.positives, self.negatives)
    }
}

/// Writes a tile manifest (one [`TileRecord`] JSON object per line).
pub fn save_tiles(path: &Path, tiles: &[TileRecord]) -> Result<(), CohortError> {
    let mut out = String::new();
    for tile in tiles {
        out.push_str(&serde_json::to_string(tile).expect("tile serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|source| CohortError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a tile manifest written by [`save_tiles`].
pub fn load_tiles(path: &Path) -> Result<Vec<TileRecord>, CohortError> {
    let file = fs::File::open(path).map_err(|source| CohortError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut tiles = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CohortError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let tile: TileRecord = serde_json::from_str(&line).map_err(|e| CohortError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        tiles.push(tile);
    }
    Ok(tiles)
}

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// then rename), so partially written artifacts are never observed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "artifact".to_string());
    let tmp = dir.join(format!(".tmp-{file_name}"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
