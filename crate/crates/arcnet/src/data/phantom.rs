//! Synthetic OCT phantom generator with exact per-A-line ground truth.
//!
//! Each frame is a vessel cross-section: a bright arterial wall around a dark
//! flushed lumen, a catheter ring at the center, slow angular brightness and
//! radius modulation, multiplicative speckle. Artifact sectors attenuate the
//! wall signal beyond an onset radius and render a residue band inside the
//! lumen as the visible cause:
//!
//! - severe sectors suppress >= 90% of the wall signal,
//! - mild sectors suppress 30-70%,
//! - red-thrombus sectors attenuate like mild ones but are labeled `none`.
//!
//! The only cue separating a thrombus from a mild artifact is the fine
//! angular striping of its residue band. Stripe frequencies sit just above
//! the A-line sampling rate (`theta + d` cycles per revolution), so on the
//! sampled A-line angles they alias onto the same slow ripples that ordinary
//! residue bands carry: the polar representation of the two causes is
//! statistically identical, while the Cartesian image resolves the stripes.
//! Annotations are derived from the sector spans quantized to A-line
//! columns, so labels match the rendering exactly.

use crate::data::{GeneratedPullback, RawFrame};
use crate::error::{Error, Result};
use crate::par;
use crate::seed_mix;
use crate::{AnnotationVector, ArtifactClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// What a sector does to the image and to the labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SectorKind {
    Mild,
    Severe,
    /// Visually resembles a mild blood artifact but is anatomy: labeled none.
    Thrombus,
}

impl SectorKind {
    pub fn label(self) -> ArtifactClass {
        match self {
            SectorKind::Mild => ArtifactClass::Mild,
            SectorKind::Severe => ArtifactClass::Severe,
            SectorKind::Thrombus => ArtifactClass::None,
        }
    }
}

/// Residue band rendered inside the lumen as the artifact's visible cause.
#[derive(Clone, Debug)]
pub struct BandSpec {
    /// Radial extent in pixels.
    pub inner: f64,
    pub outer: f64,
    /// Base brightness of the band.
    pub base: f64,
    /// Angular cosine components: (cycles per revolution, phase, amplitude).
    pub ripples: Vec<(f64, f64, f64)>,
}

/// One artifact sector; angular extent in A-line column units.
#[derive(Clone, Debug)]
pub struct SectorSpec {
    pub kind: SectorKind,
    pub start_col: f64,
    pub span_cols: f64,
    /// Attenuation applies to wall signal beyond this radius (pixels).
    pub onset_radius: f64,
    /// Fraction of the signal suppressed beyond the onset.
    pub attenuation: f64,
    pub band: Option<BandSpec>,
}

impl SectorSpec {
    pub fn covers_column(&self, col: usize, n_alines: usize) -> bool {
        (col as f64 - self.start_col).rem_euclid(n_alines as f64) < self.span_cols
    }
}

/// Fully resolved description of one frame.
#[derive(Clone, Debug)]
pub struct FrameSpec {
    /// Base inner wall radius in pixels.
    pub vessel_radius: f64,
    /// Slow modulation of the wall radius: (amplitude fraction, phase) for
    /// cos(phi) and cos(2 phi).
    pub radius_mod: [(f64, f64); 2],
    pub wall_thickness: f64,
    pub wall_brightness: f64,
    /// Slow modulation of the wall brightness, same layout as `radius_mod`.
    pub brightness_mod: [(f64, f64); 2],
    pub catheter_radius: f64,
    pub speckle: f64,
    pub noise_seed: u64,
    pub sectors: Vec<SectorSpec>,
}

impl FrameSpec {
    pub fn inner_radius(&self, phi: f64) -> f64 {
        let m = 1.0
            + self.radius_mod[0].0 * (phi + self.radius_mod[0].1).cos()
            + self.radius_mod[1].0 * (2.0 * phi + self.radius_mod[1].1).cos();
        self.vessel_radius * m
    }

    fn wall_b(&self, phi: f64) -> f64 {
        let m = 1.0
            + self.brightness_mod[0].0 * (phi + self.brightness_mod[0].1).cos()
            + self.brightness_mod[1].0 * (2.0 * phi + self.brightness_mod[1].1).cos();
        self.wall_brightness * m
    }
}

/// Derive the annotation vector from the sector spans; the most severe class
/// wins where spans overlap.
pub fn labels_from_sectors(sectors: &[SectorSpec], n_alines: usize) -> AnnotationVector {
    (0..n_alines)
        .map(|col| {
            sectors
                .iter()
                .filter(|s| s.covers_column(col, n_alines))
                .map(|s| s.kind.label())
                .max()
                .unwrap_or(ArtifactClass::None)
        })
        .collect()
}

/// Render one frame. Returns 8-bit pixels (row-major, `size x size`) and the
/// exactly matching annotation.
pub fn render_frame(spec: &FrameSpec, size: usize, n_alines: usize) -> (Vec<u8>, AnnotationVector) {
    let labels = labels_from_sectors(&spec.sectors, n_alines);
    // Per-column render attributes: strongest attenuation among covering
    // sectors, and the band of that sector.
    let mut col_sector: Vec<Option<&SectorSpec>> = vec![None; n_alines];
    for (col, slot) in col_sector.iter_mut().enumerate() {
        let mut best: Option<&SectorSpec> = None;
        for s in &spec.sectors {
            if s.covers_column(col, n_alines) {
                best = match best {
                    None => Some(s),
                    Some(b) if s.attenuation > b.attenuation => Some(s),
                    keep => keep,
                };
            }
        }
        *slot = best;
    }

    let cy = (size as f64 - 1.0) / 2.0;
    let mut pixels = vec![0u8; size * size];
    par::chunks_mut_indexed_if(true, &mut pixels, size, |row, out| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(&[spec.noise_seed, row as u64]));
        for (x, px) in out.iter_mut().enumerate() {
            let dy = row as f64 - cy;
            let dx = x as f64 - cy;
            let r = dy.hypot(dx);
            let mut phi = dy.atan2(dx);
            if phi < 0.0 {
                phi += 2.0 * PI;
            }
            let col = ((phi / (2.0 * PI) * n_alines as f64).round() as usize).rem_euclid(n_alines);

            // Catheter ring and center reflection; never attenuated.
            let mut fixed = 0.02;
            let ring = (r - spec.catheter_radius) / 1.1;
            fixed += 0.8 * (-0.5 * ring * ring).exp();
            fixed += 0.5 * (-r * r / 6.0).exp();

            // Wall and the penetration tail behind it.
            let r_in = spec.inner_radius(phi);
            let t = spec.wall_thickness;
            let mut signal = 0.0;
            if r >= r_in && r <= r_in + t {
                let u = (r - r_in) / t;
                signal += spec.wall_b(phi) * (PI * u).sin().max(0.0);
            } else if r > r_in + t {
                signal += spec.wall_b(phi) * 0.35 * (-(r - r_in - t) / (0.8 * t)).exp();
            }

            // Residue band and attenuation of the covered sector.
            if let Some(sector) = col_sector[col] {
                if let Some(band) = &sector.band {
                    if r >= band.inner && r <= band.outer {
                        let u = (r - band.inner) / (band.outer - band.inner);
                        let mut level = band.base;
                        for &(freq, phase, amp) in &band.ripples {
                            level += amp * (freq * phi + phase).cos();
                        }
                        fixed += level.max(0.0) * (PI * u).sin().max(0.0);
                    }
                }
                if r > sector.onset_radius {
                    signal *= 1.0 - sector.attenuation;
                }
            }

            let mut v = fixed + signal;
            // Multiplicative speckle (Box-Muller).
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
            v *= 1.0 + spec.speckle * g;
            *px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    });
    (pixels, labels)
}

/// Generator configuration. Radii are fractions of the image's outer
/// sampling radius `R_max`; spans are fractions of the full circle.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub pullbacks: usize,
    pub frames_per_pullback: usize,
    pub image_size: usize,
    pub n_alines: usize,
    /// Patient id prefix; one patient per pullback.
    pub patient_prefix: String,
    pub vessel_radius: [f64; 2],
    pub wall_thickness: [f64; 2],
    pub wall_brightness: [f64; 2],
    pub catheter_radius: f64,
    pub speckle: f64,
    /// Expected number of simultaneously active sectors per kind.
    pub mild_rate: f64,
    pub severe_rate: f64,
    pub thrombus_rate: f64,
    pub sector_span: [f64; 2],
    pub mild_attenuation: [f64; 2],
    pub severe_attenuation: [f64; 2],
    /// Artifact persistence across consecutive frames.
    pub event_life: [usize; 2],
    /// Scales the slow anatomical brightness modulation of the wall; lower
    /// values make mild shadows stand out more against healthy tissue.
    pub anatomy_variation: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            pullbacks: 4,
            frames_per_pullback: 50,
            image_size: 352,
            n_alines: 224,
            patient_prefix: "P".into(),
            // Large vessels keep the thrombus stripes above the Cartesian
            // pixel pitch at full scale.
            vessel_radius: [0.62, 0.80],
            wall_thickness: [0.055, 0.085],
            wall_brightness: [0.55, 0.75],
            catheter_radius: 0.08,
            speckle: 0.13,
            mild_rate: 0.45,
            severe_rate: 0.40,
            thrombus_rate: 0.35,
            sector_span: [0.10, 0.24],
            mild_attenuation: [0.30, 0.70],
            severe_attenuation: [0.90, 0.98],
            event_life: [3, 8],
            anatomy_variation: 1.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pullbacks == 0 || self.frames_per_pullback == 0 {
            return Err(Error::Invalid(
                "phantom: needs at least one pullback and frame".into(),
            ));
        }
        if self.image_size < 32 {
            return Err(Error::Invalid("phantom: image_size must be >= 32".into()));
        }
        if self.n_alines < 8 {
            return Err(Error::Invalid("phantom: n_alines must be >= 8".into()));
        }
        for r in [self.vessel_radius, self.wall_thickness, self.sector_span] {
            if r[0] > r[1] || r[0] < 0.0 {
                return Err(Error::Invalid(format!("phantom: bad range {r:?}")));
            }
        }
        if self.sector_span[1] >= 0.5 {
            return Err(Error::Invalid(
                "phantom: sector spans must stay below half the circle".into(),
            ));
        }
        Ok(())
    }
}

/// An artifact event that persists over consecutive frames.
struct Event {
    kind: SectorKind,
    start_col: f64,
    span_cols: f64,
    attenuation: f64,
    band_inner_frac: f64,
    band_outer_frac: f64,
    band_base: f64,
    ripples: Vec<(f64, f64, f64)>,
    drift: f64,
    life: usize,
}

fn spans_overlap(a_start: f64, a_span: f64, b_start: f64, b_span: f64, theta: f64) -> bool {
    // Circular interval overlap with a one-column margin.
    let d = (b_start - a_start).rem_euclid(theta);
    d < a_span + 1.0 || d > theta - b_span - 1.0
}

fn spawn_event(
    cfg: &PhantomConfig,
    kind: SectorKind,
    active: &[Event],
    rng: &mut ChaCha8Rng,
) -> Option<Event> {
    let theta = cfg.n_alines as f64;
    let span = rng.random_range(cfg.sector_span[0]..cfg.sector_span[1]) * theta;
    for _ in 0..8 {
        let start = rng.random_range(0.0..theta);
        if active
            .iter()
            .all(|e| !spans_overlap(start, span, e.start_col, e.span_cols, theta))
        {
            let attenuation = match kind {
                SectorKind::Severe => {
                    rng.random_range(cfg.severe_attenuation[0]..cfg.severe_attenuation[1])
                }
                // Thrombus shadows draw from the same range as mild ones.
                _ => rng.random_range(cfg.mild_attenuation[0]..cfg.mild_attenuation[1]),
            };
            // Slow ripples shared by every band; the thrombus texture rides
            // just above the A-line sampling rate so it aliases onto the
            // same slow family.
            let d1 = rng.random_range(1.0..3.5_f64).round();
            let p1 = rng.random_range(0.0..2.0 * PI);
            let a1 = rng.random_range(0.08..0.18);
            let d2 = rng.random_range(3.5..7.5_f64).round();
            let p2 = rng.random_range(0.0..2.0 * PI);
            let a2 = rng.random_range(0.14..0.26);
            let ripples = match kind {
                SectorKind::Thrombus => {
                    vec![(d1, p1, a1), (theta + d2, p2, a2)]
                }
                _ => {
                    // Match the aliased amplitude the thrombus texture leaves
                    // behind after bilinear sampling.
                    let kappa = rng.random_range(0.45..0.80);
                    vec![(d1, p1, a1), (d2, p2, a2 * kappa)]
                }
            };
            return Some(Event {
                kind,
                start_col: start,
                span_cols: span,
                attenuation,
                band_inner_frac: rng.random_range(0.76..0.82),
                band_outer_frac: rng.random_range(0.92..0.97),
                band_base: rng.random_range(0.38..0.55),
                ripples,
                drift: rng.random_range(-0.4..0.4),
                life: rng.random_range(cfg.event_life[0]..=cfg.event_life[1]),
            });
        }
    }
    None
}

/// Generate one pullback deterministically from the config seed and the
/// pullback index.
pub fn generate_phantom(cfg: &PhantomConfig, pullback_idx: usize) -> Result<GeneratedPullback> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(&[cfg.seed, 0xA11E, pullback_idx as u64]));
    let r_max = crate::geometry::r_max(cfg.image_size, cfg.image_size);

    // Per-pullback anatomy that drifts slowly from frame to frame.
    let base_radius = rng.random_range(cfg.vessel_radius[0]..cfg.vessel_radius[1]) * r_max;
    let thickness = rng.random_range(cfg.wall_thickness[0]..cfg.wall_thickness[1]) * r_max;
    let brightness = rng.random_range(cfg.wall_brightness[0]..cfg.wall_brightness[1]);
    let radius_mod = [
        (
            rng.random_range(0.02..0.08),
            rng.random_range(0.0..2.0 * PI),
        ),
        (
            rng.random_range(0.01..0.05),
            rng.random_range(0.0..2.0 * PI),
        ),
    ];
    let av = cfg.anatomy_variation;
    let brightness_mod = [
        (
            av * rng.random_range(0.06..0.16),
            rng.random_range(0.0..2.0 * PI),
        ),
        (
            av * rng.random_range(0.04..0.10),
            rng.random_range(0.0..2.0 * PI),
        ),
    ];

    let mean_life = (cfg.event_life[0] + cfg.event_life[1]) as f64 / 2.0;
    let mut events: Vec<Event> = Vec::new();
    let mut frames = Vec::with_capacity(cfg.frames_per_pullback);
    let mut labels = Vec::with_capacity(cfg.frames_per_pullback);

    for f in 0..cfg.frames_per_pullback {
        // Retire and drift existing events, then try to spawn new ones.
        events.retain_mut(|e| {
            if e.life == 0 {
                return false;
            }
            e.life -= 1;
            e.start_col = (e.start_col + e.drift).rem_euclid(cfg.n_alines as f64);
            true
        });
        for (kind, rate) in [
            (SectorKind::Mild, cfg.mild_rate),
            (SectorKind::Severe, cfg.severe_rate),
            (SectorKind::Thrombus, cfg.thrombus_rate),
        ] {
            if rng.random::<f64>() < rate / mean_life {
                if let Some(e) = spawn_event(cfg, kind, &events, &mut rng) {
                    events.push(e);
                }
            }
        }

        let frame_radius = base_radius * (1.0 + 0.02 * ((f as f64) * 0.21).sin());
        let sectors: Vec<SectorSpec> = events
            .iter()
            .map(|e| {
                let inner = frame_radius * e.band_inner_frac;
                let outer = frame_radius * e.band_outer_frac;
                SectorSpec {
                    kind: e.kind,
                    start_col: e.start_col,
                    span_cols: e.span_cols,
                    onset_radius: outer + 1.0,
                    attenuation: e.attenuation,
                    band: Some(BandSpec {
                        inner,
                        outer,
                        base: e.band_base,
                        ripples: e.ripples.clone(),
                    }),
                }
            })
            .collect();
        let spec = FrameSpec {
            vessel_radius: frame_radius,
            radius_mod,
            wall_thickness: thickness,
            wall_brightness: brightness,
            brightness_mod,
            catheter_radius: cfg.catheter_radius * r_max,
            speckle: cfg.speckle,
            noise_seed: seed_mix(&[cfg.seed, 0x5eed, pullback_idx as u64, f as u64]),
            sectors,
        };
        let (pixels, y) = render_frame(&spec, cfg.image_size, cfg.n_alines);
        frames.push(RawFrame {
            size: cfg.image_size,
            pixels,
        });
        labels.push(y);
    }

    Ok(GeneratedPullback {
        pullback_id: format!("PB{pullback_idx:03}"),
        patient_id: format!("{}{pullback_idx:03}", cfg.patient_prefix),
        frames,
        labels,
    })
}

/// Generate all pullbacks of the config.
pub fn generate_dataset(cfg: &PhantomConfig) -> Result<Vec<GeneratedPullback>> {
    (0..cfg.pullbacks)
        .map(|i| generate_phantom(cfg, i))
        .collect()
}
