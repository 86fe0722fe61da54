//! Annotation overlay: the Cartesian frame with two annular rings near the
//! border. The outer ring shows the reference annotation, the inner ring the
//! prediction; arcs are colored by class (`none` stays transparent, mild is
//! yellow, severe is blue), and a thin gray scaffold marks the rings even
//! when every A-line is clean.

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::{AnnotationVector, ArtifactClass};
use std::f64::consts::PI;

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn rgb_at(&self, y: usize, x: usize) -> [u8; 3] {
        let off = (y * self.width + x) * 3;
        [self.pixels[off], self.pixels[off + 1], self.pixels[off + 2]]
    }
}

pub const MILD_COLOR: [u8; 3] = [250, 210, 40];
pub const SEVERE_COLOR: [u8; 3] = [60, 110, 255];
const SCAFFOLD: [u8; 3] = [110, 110, 110];

/// Ring placement in pixels, measured inward from the outer sampling radius.
struct Ring {
    inner: f64,
    outer: f64,
}

fn class_color(c: ArtifactClass) -> Option<[u8; 3]> {
    match c {
        ArtifactClass::None => None,
        ArtifactClass::Mild => Some(MILD_COLOR),
        ArtifactClass::Severe => Some(SEVERE_COLOR),
    }
}

/// Column owning angle `phi`: arc `i` covers `[2 pi i / theta, 2 pi (i+1) / theta)`.
fn column_of(phi: f64, theta: usize) -> usize {
    let mut j = (phi / (2.0 * PI) * theta as f64).floor() as isize;
    if j < 0 {
        j = 0;
    }
    (j as usize).min(theta - 1)
}

/// Render the overlay for one frame.
pub fn render_overlay(
    frame: &Frame,
    reference: &AnnotationVector,
    predicted: &AnnotationVector,
) -> Result<RgbImage> {
    if reference.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "overlay: {} reference vs {} predicted labels",
            reference.len(),
            predicted.len()
        )));
    }
    let theta = reference.len();
    if theta < 2 {
        return Err(Error::Invalid("overlay needs at least 2 A-lines".into()));
    }
    let size = frame.size;
    let r_max = crate::geometry::r_max(size, size);
    let outer_ring = Ring {
        inner: r_max - 5.0,
        outer: r_max - 1.0,
    };
    let inner_ring = Ring {
        inner: r_max - 11.0,
        outer: r_max - 7.0,
    };
    let cy = (size as f64 - 1.0) / 2.0;

    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let g = (frame.pixels[y * size + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            let mut rgb = [g, g, g];
            let dy = y as f64 - cy;
            let dx = x as f64 - cy;
            let r = dy.hypot(dx);
            let mut phi = dy.atan2(dx);
            if phi < 0.0 {
                phi += 2.0 * PI;
            }
            for (ring, labels) in [(&outer_ring, reference), (&inner_ring, predicted)] {
                if r >= ring.inner && r <= ring.outer {
                    let col = column_of(phi, theta);
                    match class_color(labels[col]) {
                        Some(c) => rgb = c,
                        None => {
                            // Scaffold: thin edge lines so the rings stay
                            // visible on clean frames.
                            if r - ring.inner < 0.8 || ring.outer - r < 0.8 {
                                rgb = SCAFFOLD;
                            }
                        }
                    }
                }
            }
            pixels.extend_from_slice(&rgb);
        }
    }
    Ok(RgbImage {
        width: size,
        height: size,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_frame(size: usize, v: f32) -> Frame {
        Frame {
            size,
            pixels: vec![v; size * size],
        }
    }

    fn labels(theta: usize, f: impl Fn(usize) -> u8) -> AnnotationVector {
        (0..theta)
            .map(|i| ArtifactClass::from_u8(f(i)).unwrap())
            .collect()
    }

    #[test]
    fn identical_labels_give_identical_rings() {
        let frame = gray_frame(128, 0.2);
        let y = labels(32, |i| if (4..9).contains(&i) { 2 } else { 0 });
        let img = render_overlay(&frame, &y, &y).unwrap();
        // For every angle, the outer and inner ring midline pixels must
        // carry the same color class.
        let cy = 63.5;
        let r_max = crate::geometry::r_max(128, 128);
        for i in 0..32 {
            // Probe the middle of each arc; boundaries are pixel-quantized.
            let phi = 2.0 * PI * (i as f64 + 0.5) / 32.0;
            let probe = |rad: f64| -> [u8; 3] {
                let y = (cy + rad * phi.sin()).round() as usize;
                let x = (cy + rad * phi.cos()).round() as usize;
                img.rgb_at(y, x)
            };
            let outer = probe(r_max - 3.0);
            let inner = probe(r_max - 9.0);
            let is_severe = |c: [u8; 3]| c == SEVERE_COLOR;
            assert_eq!(is_severe(outer), is_severe(inner), "arc {i}");
        }
    }

    #[test]
    fn all_none_changes_only_the_scaffold() {
        let frame = gray_frame(96, 0.5);
        let y = labels(24, |_| 0);
        let img = render_overlay(&frame, &y, &y).unwrap();
        let base = (0.5f32 * 255.0).round() as u8;
        let cy = 47.5;
        let r_max = crate::geometry::r_max(96, 96);
        let mut scaffold_pixels = 0;
        for yy in 0..96 {
            for xx in 0..96 {
                let rgb = img.rgb_at(yy, xx);
                let dy = yy as f64 - cy;
                let dx = xx as f64 - cy;
                let r = dy.hypot(dx);
                // Outside the ring bands the frame must be untouched.
                if !(r >= r_max - 11.0 && r <= r_max - 1.0) {
                    assert_eq!(rgb, [base, base, base], "pixel ({yy}, {xx}) changed");
                } else if rgb != [base, base, base] {
                    assert_eq!(rgb, SCAFFOLD);
                    scaffold_pixels += 1;
                }
            }
        }
        assert!(scaffold_pixels > 100, "scaffold missing");
    }

    #[test]
    fn severe_sector_covers_expected_angles() {
        // Sector on columns [50, 80) of 224: the outer-ring arc must span
        // angles [2 pi 50/224, 2 pi 80/224).
        let frame = gray_frame(352, 0.0);
        let reference = labels(224, |i| if (50..80).contains(&i) { 2 } else { 0 });
        let predicted = labels(224, |_| 0);
        let img = render_overlay(&frame, &reference, &predicted).unwrap();
        let cy = 175.5;
        let r_max = crate::geometry::r_max(352, 352);
        let rad = r_max - 3.0;
        for (i, expect_colored) in [
            (49usize, false),
            (50, true),
            (65, true),
            (79, true),
            (80, false),
        ] {
            // Probe the middle of arc i.
            let phi = 2.0 * PI * (i as f64 + 0.5) / 224.0;
            let y = (cy + rad * phi.sin()).round() as usize;
            let x = (cy + rad * phi.cos()).round() as usize;
            let colored = img.rgb_at(y, x) == SEVERE_COLOR;
            assert_eq!(colored, expect_colored, "arc {i}");
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let frame = gray_frame(64, 0.1);
        let a = labels(16, |_| 0);
        let b = labels(24, |_| 0);
        assert!(render_overlay(&frame, &a, &b).is_err());
    }
}
