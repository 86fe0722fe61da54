//! Dataset format, loading, 3-frame stack construction, augmentation, and
//! the synthetic phantom generator.
//!
//! On-disk layout (all paths relative to the manifest):
//!
//! ```text
//! manifest.txt            line-oriented, see below
//! PB000/labels.csv        row r = frame r, comma-separated labels {0,1,2}
//! PB000/frames/f0000.pgm  8-bit grayscale binary PGM
//! ```
//!
//! The manifest starts with the magic line `arcnet-manifest v1`; each
//! pullback block is `pullback <id>` followed by `patient <id>`,
//! `labels <path>` and one `frame <path>` line per frame, in acquisition
//! order. `#` starts a comment. Every label row must carry exactly one
//! value per A-line (224 for the standard imaging configuration).

pub mod pgm;
pub mod phantom;

use crate::error::{Error, Result};
use crate::geometry::{self, CartesianGrid};
use crate::model::InputPair;
use crate::par;
use crate::seed_mix;
use crate::{AnnotationVector, ArtifactClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Standard number of A-lines per frame.
pub const DEFAULT_ALINES: usize = 224;

/// Standard network input resolution (half the imaging system's output).
pub const DEFAULT_FRAME_SIZE: usize = 352;

/// One loaded frame: resized to the target resolution and scaled to [0, 1]
/// by the fixed 8-bit factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub size: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    fn from_raw(raw_size: usize, raw: &[u8], target: usize) -> Frame {
        let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
        let grid = CartesianGrid::new(1, raw_size, raw_size, data).expect("raw frame dims");
        let resized = if raw_size == target {
            grid
        } else {
            geometry::resize_bilinear(&grid, target, target)
        };
        Frame {
            size: target,
            pixels: resized.data().iter().map(|&v| v as f32).collect(),
        }
    }
}

/// One pullback: ordered frames plus one annotation vector per frame.
#[derive(Clone, Debug)]
pub struct PullbackDataset {
    pub pullback_id: String,
    pub patient_id: String,
    pub frames: Vec<Frame>,
    pub labels: Vec<AnnotationVector>,
}

impl PullbackDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_alines(&self) -> usize {
        self.labels.first().map(|y| y.len()).unwrap_or(0)
    }
}

/// Raw 8-bit frame as produced by the generator / stored on disk.
#[derive(Clone, Debug)]
pub struct RawFrame {
    pub size: usize,
    pub pixels: Vec<u8>,
}

/// Generator output (native resolution, exact labels), convertible to an
/// in-memory dataset or written to disk.
#[derive(Clone, Debug)]
pub struct GeneratedPullback {
    pub pullback_id: String,
    pub patient_id: String,
    pub frames: Vec<RawFrame>,
    pub labels: Vec<AnnotationVector>,
}

impl GeneratedPullback {
    /// Resize and normalize into the loader's in-memory representation,
    /// matching what a disk round trip would produce.
    pub fn into_dataset(self, target_size: usize) -> PullbackDataset {
        let frames = par::map_indexed(self.frames.len(), |i| {
            let raw = &self.frames[i];
            Frame::from_raw(raw.size, &raw.pixels, target_size)
        });
        PullbackDataset {
            pullback_id: self.pullback_id,
            patient_id: self.patient_id,
            frames,
            labels: self.labels,
        }
    }
}

fn parse_labels_csv(path: &Path, expected_alines: usize) -> Result<Vec<AnnotationVector>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut row = Vec::with_capacity(expected_alines);
        for tok in line.split(',') {
            let v: u8 = tok.trim().parse().map_err(|_| {
                Error::format(
                    path,
                    lineno + 1,
                    format!("label '{}' is not an integer", tok.trim()),
                )
            })?;
            let cls = ArtifactClass::from_u8(v).ok_or_else(|| {
                Error::format(
                    path,
                    lineno + 1,
                    format!("label value {v} outside {{0, 1, 2}}"),
                )
            })?;
            row.push(cls);
        }
        if row.len() != expected_alines {
            return Err(Error::format(
                path,
                lineno + 1,
                format!(
                    "frame {} has {} labels, expected {expected_alines}",
                    rows.len(),
                    row.len()
                ),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn labels_to_csv(labels: &[AnnotationVector]) -> String {
    let mut out = String::new();
    for row in labels {
        let mut first = true;
        for c in row {
            if !first {
                out.push(',');
            }
            let _ = write!(out, "{}", c.index());
            first = false;
        }
        out.push('\n');
    }
    out
}

/// Load every pullback listed in a manifest, resizing frames to
/// `target_size` and validating one label per A-line.
pub fn load_dataset(
    manifest: &Path,
    target_size: usize,
    expected_alines: usize,
) -> Result<Vec<PullbackDataset>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));

    struct Block {
        id: String,
        line: usize,
        patient: Option<String>,
        labels: Option<PathBuf>,
        frames: Vec<PathBuf>,
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut saw_magic = false;
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_magic {
            if line != "arcnet-manifest v1" {
                return Err(Error::format(
                    manifest,
                    lineno + 1,
                    "expected 'arcnet-manifest v1'",
                ));
            }
            saw_magic = true;
            continue;
        }
        let (key, value) = line.split_once(char::is_whitespace).ok_or_else(|| {
            Error::format(
                manifest,
                lineno + 1,
                format!("malformed directive '{line}'"),
            )
        })?;
        let value = value.trim();
        match key {
            "pullback" => blocks.push(Block {
                id: value.to_string(),
                line: lineno + 1,
                patient: None,
                labels: None,
                frames: Vec::new(),
            }),
            "patient" | "labels" | "frame" => {
                let block = blocks.last_mut().ok_or_else(|| {
                    Error::format(manifest, lineno + 1, "directive before any 'pullback'")
                })?;
                match key {
                    "patient" => block.patient = Some(value.to_string()),
                    "labels" => block.labels = Some(base.join(value)),
                    _ => block.frames.push(base.join(value)),
                }
            }
            other => {
                return Err(Error::format(
                    manifest,
                    lineno + 1,
                    format!("unknown directive '{other}'"),
                ))
            }
        }
    }
    if !saw_magic {
        return Err(Error::format(manifest, 1, "empty manifest"));
    }

    let mut out = Vec::new();
    for block in blocks {
        let patient = block.patient.ok_or_else(|| {
            Error::format(
                manifest,
                block.line,
                format!("pullback {} missing 'patient'", block.id),
            )
        })?;
        let labels_path = block.labels.ok_or_else(|| {
            Error::format(
                manifest,
                block.line,
                format!("pullback {} missing 'labels'", block.id),
            )
        })?;
        let labels = parse_labels_csv(&labels_path, expected_alines)?;
        if labels.len() != block.frames.len() {
            return Err(Error::format(
                manifest,
                block.line,
                format!(
                    "pullback {}: {} label rows for {} frames",
                    block.id,
                    labels.len(),
                    block.frames.len()
                ),
            ));
        }
        // Read raw frames, then resize in parallel.
        let mut raw = Vec::with_capacity(block.frames.len());
        for p in &block.frames {
            let (w, h, pixels) = pgm::read_pgm(p)?;
            if w != h {
                return Err(Error::format(
                    p,
                    1,
                    format!("frame must be square, got {w}x{h}"),
                ));
            }
            raw.push((w, pixels));
        }
        let frames = par::map_indexed(raw.len(), |i| {
            let (size, pixels) = &raw[i];
            Frame::from_raw(*size, pixels, target_size)
        });
        out.push(PullbackDataset {
            pullback_id: block.id,
            patient_id: patient,
            frames,
            labels,
        });
    }
    Ok(out)
}

/// Write generated pullbacks as a dataset tree; returns the manifest path.
pub fn write_dataset(dir: &Path, pullbacks: &[GeneratedPullback]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("arcnet-manifest v1\n");
    for pb in pullbacks {
        let pb_dir = dir.join(&pb.pullback_id);
        let frames_dir = pb_dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        let labels_rel = format!("{}/labels.csv", pb.pullback_id);
        std::fs::write(pb_dir.join("labels.csv"), labels_to_csv(&pb.labels))
            .map_err(|e| Error::io(pb_dir.join("labels.csv"), e))?;
        let _ = writeln!(manifest, "\npullback {}", pb.pullback_id);
        let _ = writeln!(manifest, "patient {}", pb.patient_id);
        let _ = writeln!(manifest, "labels {labels_rel}");
        for (i, frame) in pb.frames.iter().enumerate() {
            let rel = format!("{}/frames/f{:04}.pgm", pb.pullback_id, i);
            pgm::write_pgm(&dir.join(&rel), frame.size, frame.size, &frame.pixels)?;
            let _ = writeln!(manifest, "frame {rel}");
        }
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Build the 3-frame input stack for frame `t`, replicating edges at
/// pullback boundaries, and derive the polar stack.
pub fn make_input_stack(
    ds: &PullbackDataset,
    t: usize,
    rho: usize,
    theta: usize,
) -> Result<InputPair> {
    if t >= ds.len() {
        return Err(Error::Invalid(format!(
            "frame index {t} out of range for pullback {} ({} frames)",
            ds.pullback_id,
            ds.len()
        )));
    }
    let size = ds.frames[t].size;
    let picks = [t.saturating_sub(1), t, (t + 1).min(ds.len() - 1)];
    let mut data = Vec::with_capacity(3 * size * size);
    for &idx in &picks {
        let f = &ds.frames[idx];
        debug_assert_eq!(f.size, size);
        data.extend(f.pixels.iter().map(|&v| v as f64));
    }
    let cart = CartesianGrid::new(3, size, size, data)?;
    let polar = geometry::to_polar(&cart, rho, theta)?;
    Ok(InputPair { cart, polar })
}

/// Deterministic augmentation parameters for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    /// Rotation in A-line steps (the polar stack shifts by exactly this).
    pub rotate_cols: usize,
    pub flip: bool,
    /// Multiplicative brightness factor; stacks are re-clamped to [0, 1].
    pub brightness: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation {
            rotate_cols: 0,
            flip: false,
            brightness: 1.0,
        }
    }

    pub fn draw<R: Rng>(rng: &mut R, theta: usize) -> Self {
        Augmentation {
            rotate_cols: rng.random_range(0..theta),
            flip: rng.random::<bool>(),
            brightness: rng.random_range(0.8..1.2),
        }
    }
}

fn shift_polar_columns(polar: &crate::geometry::PolarGrid, k: usize) -> crate::geometry::PolarGrid {
    let (c, rho, theta) = (polar.channels(), polar.rho(), polar.theta());
    let mut out = crate::geometry::PolarGrid::zeros(c, rho, theta);
    for ci in 0..c {
        for r in 0..rho {
            for j in 0..theta {
                let v = polar.at(ci, r, (j + theta - k) % theta);
                out.data_mut()[(ci * rho + r) * theta + j] = v;
            }
        }
    }
    out
}

fn reverse_polar_columns(polar: &crate::geometry::PolarGrid) -> crate::geometry::PolarGrid {
    let (c, rho, theta) = (polar.channels(), polar.rho(), polar.theta());
    let mut out = crate::geometry::PolarGrid::zeros(c, rho, theta);
    for ci in 0..c {
        for r in 0..rho {
            for j in 0..theta {
                let v = polar.at(ci, r, (theta - j) % theta);
                out.data_mut()[(ci * rho + r) * theta + j] = v;
            }
        }
    }
    out
}

/// Apply a resolved augmentation: rotation by whole A-line steps (Cartesian
/// resampled, polar and labels shifted exactly), optional mirror flip, and a
/// brightness change.
pub fn augment_with(
    pair: &InputPair,
    y: &AnnotationVector,
    aug: Augmentation,
) -> (InputPair, AnnotationVector) {
    let theta = pair.polar.theta();
    debug_assert_eq!(theta, y.len());
    let k = aug.rotate_cols % theta;

    let mut cart = if k == 0 {
        pair.cart.clone()
    } else {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / theta as f64;
        geometry::rotate_about_center(&pair.cart, angle)
    };
    let mut polar = if k == 0 {
        pair.polar.clone()
    } else {
        shift_polar_columns(&pair.polar, k)
    };
    let mut labels: AnnotationVector = (0..theta).map(|j| y[(j + theta - k) % theta]).collect();

    if aug.flip {
        cart = geometry::flip_vertical(&cart);
        polar = reverse_polar_columns(&polar);
        labels = (0..theta).map(|j| labels[(theta - j) % theta]).collect();
    }

    if aug.brightness != 1.0 {
        for v in cart.data_mut() {
            *v = (*v * aug.brightness).clamp(0.0, 1.0);
        }
        for v in polar.data_mut() {
            *v = (*v * aug.brightness).clamp(0.0, 1.0);
        }
    }
    (InputPair { cart, polar }, labels)
}

/// Draw augmentation parameters from `rng` and apply them.
pub fn augment<R: Rng>(
    pair: &InputPair,
    y: &AnnotationVector,
    rng: &mut R,
) -> (InputPair, AnnotationVector) {
    let aug = Augmentation::draw(rng, pair.polar.theta());
    augment_with(pair, y, aug)
}

/// Split pullbacks into train/validation index sets at the patient level.
/// Patients never straddle the split.
pub fn split_by_patient(
    datasets: &[PullbackDataset],
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut patients: Vec<String> = Vec::new();
    for ds in datasets {
        if !patients.contains(&ds.patient_id) {
            patients.push(ds.patient_id.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(&[seed, 0x5917]));
    // Fisher-Yates on the patient list.
    for i in (1..patients.len()).rev() {
        let j = rng.random_range(0..=i);
        patients.swap(i, j);
    }
    let mut n_val = ((patients.len() as f64) * val_fraction).round() as usize;
    if patients.len() > 1 {
        n_val = n_val.clamp(1, patients.len() - 1);
    } else {
        n_val = 0;
    }
    let val_patients: std::collections::HashSet<&String> = patients.iter().take(n_val).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, ds) in datasets.iter().enumerate() {
        if val_patients.contains(&ds.patient_id) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// Check that no patient id appears in more than one of the given groups.
/// A patient may own several pullbacks within one group, but never straddles
/// groups.
pub fn patients_disjoint(groups: &[&[PullbackDataset]]) -> bool {
    let mut owner: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for (gi, group) in groups.iter().enumerate() {
        for d in group.iter() {
            match owner.entry(d.patient_id.as_str()) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(gi);
                }
                std::collections::hash_map::Entry::Occupied(e) => {
                    if *e.get() != gi {
                        return false;
                    }
                }
            }
        }
    }
    true
}
