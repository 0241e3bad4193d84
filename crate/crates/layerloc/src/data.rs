//! Synthetic shapes-with-boxes dataset: one labelled target shape per image,
//! optional unlabelled line distractors and additive Gaussian noise.

use layerloc_core::metrics::GtBox;
use layerloc_core::{Rng, Shape4, Tensor4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the point `(dx, dy)` relative to the shape center lies inside a
    /// shape of extent `size`.
    fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        let r = size / 2.0;
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // apex up, base at the bottom edge
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Cross => {
                let arm = size / 6.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub edge: usize,
    pub channels: usize,
    /// Shape extent range in pixels (inclusive).
    pub size_min: f64,
    pub size_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Standard deviation of the additive background noise.
    pub noise: f64,
    pub distractors: usize,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        Self {
            edge: 32,
            channels: 1,
            size_min: 8.0,
            size_max: 16.0,
            intensity_min: 0.6,
            intensity_max: 1.0,
            noise: 0.05,
            distractors: 2,
        }
    }
}

impl ShapeSpec {
    /// Targets covering less than 5% of the image.
    pub fn small_box(edge: usize) -> Self {
        let side = ((edge * edge) as f64 * 0.05).sqrt().floor() - 1.0;
        Self {
            edge,
            size_min: (side - 3.0).max(3.0),
            size_max: side.max(3.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Geometry(m));
        if self.edge < 4 {
            return bad(format!("image edge {} is too small", self.edge));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if !(self.size_min >= 2.0 && self.size_min <= self.size_max) {
            return bad(format!("size range {}..{} is empty or below 2 px", self.size_min, self.size_max));
        }
        if self.size_max + 2.0 > self.edge as f64 {
            return bad(format!(
                "shapes up to {} px do not fit a {} px image with a 1 px margin",
                self.size_max, self.edge
            ));
        }
        let unit = 0.0..=1.0;
        if !(unit.contains(&self.intensity_min) && unit.contains(&self.intensity_max) && self.intensity_min <= self.intensity_max) {
            return bad(format!(
                "intensity range {}..{} must lie in [0, 1]",
                self.intensity_min, self.intensity_max
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unsatisfiable geometry: {0}")]
    Geometry(String),
    #[error("{0} classes requested but only {1} shapes exist")]
    TooManyClasses(usize, usize),
}

/// One rendered image with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor4,
    pub label: usize,
    pub bbox: GtBox,
    /// The target's lit pixels, row-major.
    pub target_mask: Vec<bool>,
}

/// Renders image `index` of a dataset seeded with `seed`. Every image draws
/// from its own derived stream, so images can be produced independently.
pub fn render_sample(spec: &ShapeSpec, class_count: usize, seed: u64, index: usize) -> Result<Sample, DataError> {
    spec.validate()?;
    if class_count == 0 || class_count > ShapeKind::ALL.len() {
        return Err(DataError::TooManyClasses(class_count, ShapeKind::ALL.len()));
    }
    let mut rng = Rng::new(seed).derive(&format!("image-{index}"));
    let e = spec.edge;
    let label = rng.int_in(0, class_count - 1);
    let kind = ShapeKind::ALL[label];
    let size = rng.uniform_in(spec.size_min, spec.size_max);
    let lo = size / 2.0 + 1.0;
    let hi = e as f64 - size / 2.0 - 1.0;
    let (cx, cy) = (rng.uniform_in(lo, hi), rng.uniform_in(lo, hi));
    let intensity = rng.uniform_in(spec.intensity_min, spec.intensity_max);
    let tint: Vec<f64> = (0..spec.channels)
        .map(|_| if spec.channels == 1 { 1.0 } else { rng.uniform_in(0.5, 1.0) })
        .collect();

    let mut target_mask = vec![false; e * e];
    for y in 0..e {
        for x in 0..e {
            target_mask[y * e + x] = kind.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, size);
        }
    }
    let bbox = tight_box(&target_mask, e, label).ok_or_else(|| {
        DataError::Geometry(format!("shape of size {size:.2} rendered no pixels"))
    })?;

    let mut plane = vec![0.0; e * e];
    for _ in 0..spec.distractors {
        draw_distractor(&mut plane, e, &bbox, spec, &mut rng);
    }
    for (v, &on) in plane.iter_mut().zip(&target_mask) {
        if on {
            *v = intensity;
        }
    }
    let mut data = Vec::with_capacity(spec.channels * e * e);
    for &t in &tint {
        for &v in &plane {
            let n = if spec.noise > 0.0 { spec.noise * rng.normal() } else { 0.0 };
            data.push((v * t + n).clamp(0.0, 1.0));
        }
    }
    let image = Tensor4::from_vec(Shape4::new(1, spec.channels, e, e), data).expect("image shape");
    Ok(Sample {
        image,
        label,
        bbox,
        target_mask,
    })
}

fn tight_box(mask: &[bool], e: usize, label: usize) -> Option<GtBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..e {
        for x in 0..e {
            if mask[y * e + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| GtBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
        label,
    })
}

/// A one-pixel line segment kept at least one pixel away from the target box.
/// Gives up silently after a few placements that all hit the box.
fn draw_distractor(plane: &mut [f64], e: usize, bbox: &GtBox, spec: &ShapeSpec, rng: &mut Rng) {
    let len = rng.uniform_in(spec.size_min / 2.0, spec.size_max);
    let value = rng.uniform_in(spec.intensity_min, spec.intensity_max) * 0.8;
    for _ in 0..8 {
        let angle = rng.uniform_in(0.0, std::f64::consts::PI);
        let (x0, y0) = (rng.uniform_in(0.0, e as f64), rng.uniform_in(0.0, e as f64));
        let steps = (len * 2.0).ceil() as usize;
        let pixels: Vec<(usize, usize)> = (0..=steps)
            .map(|i| {
                let t = i as f64 / 2.0;
                (x0 + t * angle.cos(), y0 + t * angle.sin())
            })
            .filter(|&(x, y)| x >= 0.0 && y >= 0.0 && x < e as f64 && y < e as f64)
            .map(|(x, y)| (x as usize, y as usize))
            .collect();
        let near_box = |&(x, y): &(usize, usize)| {
            x + 1 >= bbox.x && x <= bbox.x + bbox.w && y + 1 >= bbox.y && y <= bbox.y + bbox.h
        };
        if pixels.is_empty() || pixels.iter().any(near_box) {
            continue;
        }
        for (x, y) in pixels {
            plane[y * e + x] = value;
        }
        return;
    }
}

/// Renders `n_images` samples.
pub fn generate_samples(spec: &ShapeSpec, n_images: usize, class_count: usize, seed: u64) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    (0..n_images).map(|i| render_sample(spec, class_count, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_area_and_containment() {
        let spec = ShapeSpec {
            size_min: 10.0,
            size_max: 10.0,
            noise: 0.0,
            distractors: 0,
            ..ShapeSpec::default()
        };
        for i in 0..40 {
            let s = render_sample(&spec, 1, 9, i).unwrap();
            let area = s.target_mask.iter().filter(|&&b| b).count() as f64;
            let disk = std::f64::consts::PI * 25.0;
            assert!((area - disk).abs() <= 0.2 * disk, "area {area}");
            for (p, &on) in s.target_mask.iter().enumerate() {
                if on {
                    assert!(s.bbox.contains(p / 32, p % 32));
                }
            }
        }
    }

    #[test]
    fn rejects_oversized_shapes() {
        let spec = ShapeSpec {
            size_max: 31.0,
            ..ShapeSpec::default()
        };
        assert!(matches!(spec.validate(), Err(DataError::Geometry(_))));
        assert!(render_sample(&ShapeSpec::default(), 5, 0, 0).is_err());
    }

    #[test]
    fn small_box_preset_is_small() {
        let spec = ShapeSpec::small_box(32);
        for i in 0..50 {
            let s = render_sample(&spec, 3, 1, i).unwrap();
            assert!((s.bbox.area() as f64) < 0.05 * 1024.0, "{:?}", s.bbox);
        }
    }

    #[test]
    fn colour_mode_has_three_channels() {
        let spec = ShapeSpec {
            channels: 3,
            ..ShapeSpec::default()
        };
        assert_eq!(render_sample(&spec, 2, 0, 0).unwrap().image.shape().c, 3);
    }
}
