//! Localisation metrics over binary masks: percentile binarisation, IOU,
//! localisation accuracy, LIME overlap counting and granulometry.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskOrigin {
    Heatmap,
    BoxRaster,
    Lime,
    Other,
}

/// Row-major `h x w` boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
    pub origin: MaskOrigin,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>, origin: MaskOrigin) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::ShapeMismatch {
                context: "binary mask",
                expected: format!("{h}x{w} = {} bits", h * w),
                found: format!("{}", bits.len()),
            });
        }
        Ok(Self { h, w, bits, origin })
    }

    pub fn empty(h: usize, w: usize, origin: MaskOrigin) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
            origin,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::ShapeMismatch {
                context: "mask comparison",
                expected: format!("{}x{}", self.h, self.w),
                found: format!("{}x{}", other.h, other.w),
            });
        }
        Ok(())
    }
}

/// Ground-truth box in pixels: top-left corner, extent, and label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GtBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub label: usize,
}

impl GtBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn check_in(&self, h: usize, w: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.x + self.w > w || self.y + self.h > h {
            return Err(invalid(format!(
                "box (x {}, y {}, w {}, h {}) outside a {h}x{w} image",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

/// Number of pixels kept by a `percentile` threshold over `n` pixels:
/// `ceil((1 - p/100) n)`. Products that land within 1e-9 of an integer are
/// rounded so that e.g. `p = 90, n = 100` gives 10 rather than 11.
pub fn covered_count(n: usize, percentile: f64) -> usize {
    let exact = (100.0 - percentile) * n as f64 / 100.0;
    let nearest = libm::round(exact);
    let count = if libm::fabs(exact - nearest) < 1e-9 {
        nearest
    } else {
        libm::ceil(exact)
    };
    (count as usize).min(n)
}

/// Marks the `covered_count` highest-valued pixels. Ties are ranked by
/// row-major position, earlier first, so the true count is exact for any input.
pub fn binarize_percentile(values: &[f64], h: usize, w: usize, percentile: f64) -> Result<BinaryMask> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(invalid(format!("percentile {percentile} outside (0, 100)")));
    }
    if values.len() != h * w {
        return Err(Error::ShapeMismatch {
            context: "binarize",
            expected: format!("{h}x{w} values"),
            found: format!("{}", values.len()),
        });
    }
    let keep = covered_count(values.len(), percentile);
    let mut order: Vec<usize> = (0..values.len()).collect();
    // NaN-free maps are guaranteed by the producers; total_cmp keeps this total anyway.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut bits = vec![false; values.len()];
    for &i in &order[..keep] {
        bits[i] = true;
    }
    BinaryMask::new(h, w, bits, MaskOrigin::Heatmap)
}

/// `|a & b| / |a | b|`, defined as 0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same(b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Default IOU threshold for localisation accuracy.
pub const LOCALISATION_THRESHOLD: f64 = 0.2;

/// Fraction of IOUs strictly above `threshold`.
pub fn localisation_accuracy(ious: &[f64], threshold: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(invalid("localisation accuracy of an empty IOU list"));
    }
    Ok(ious.iter().filter(|&&v| v > threshold).count() as f64 / ious.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    /// True mask pixels inside the box.
    pub count: usize,
    /// `count / box area`.
    pub fraction: f64,
}

/// Counts mask pixels that fall inside the box.
pub fn lime_overlap(mask: &BinaryMask, gt: &GtBox) -> Result<Overlap> {
    gt.check_in(mask.h, mask.w)?;
    let mut count = 0;
    for y in gt.y..gt.y + gt.h {
        let row = &mask.bits[y * mask.w + gt.x..y * mask.w + gt.x + gt.w];
        count += row.iter().filter(|&&b| b).count();
    }
    Ok(Overlap {
        count,
        fraction: count as f64 / gt.area() as f64,
    })
}

/// Pixels with `x <= px < x + w` and `y <= py < y + h` are true.
pub fn rasterize_box(gt: &GtBox, h: usize, w: usize) -> Result<BinaryMask> {
    gt.check_in(h, w)?;
    let mut mask = BinaryMask::empty(h, w, MaskOrigin::BoxRaster);
    for y in gt.y..gt.y + gt.h {
        mask.bits[y * w + gt.x..y * w + gt.x + gt.w].fill(true);
    }
    Ok(mask)
}

/// Summed-area table of a mask, `(h + 1) x (w + 1)`.
fn integral(mask: &BinaryMask) -> Vec<u32> {
    let (h, w) = (mask.h, mask.w);
    let mut t = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += u32::from(mask.bits[y * w + x]);
            t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
        }
    }
    t
}

/// Applies `keep(count, window_area)` over every clipped `(2r+1)^2` window.
fn window_filter(mask: &BinaryMask, radius: usize, keep: impl Fn(u32, u32) -> bool) -> BinaryMask {
    let (h, w) = (mask.h, mask.w);
    let t = integral(mask);
    let stride = w + 1;
    let mut out = BinaryMask::empty(h, w, mask.origin);
    for y in 0..h {
        let y0 = y.saturating_sub(radius);
        let y1 = (y + radius + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(radius);
            let x1 = (x + radius + 1).min(w);
            let count = t[y1 * stride + x1] + t[y0 * stride + x0] - t[y0 * stride + x1] - t[y1 * stride + x0];
            let area = ((y1 - y0) * (x1 - x0)) as u32;
            out.bits[y * w + x] = keep(count, area);
        }
    }
    out
}

/// Erosion by a square of edge `2 radius + 1`; pixels outside the image are ignored.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    window_filter(mask, radius, |count, area| count == area)
}

/// Dilation by a square of edge `2 radius + 1`.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    window_filter(mask, radius, |count, _| count > 0)
}

pub fn opening(mask: &BinaryMask, radius: usize) -> BinaryMask {
    dilate(&erode(mask, radius), radius)
}

/// Pattern spectrum of a mask under square openings of growing size.
#[derive(Clone, Debug, PartialEq)]
pub struct GranulometrySpectrum {
    /// `removed[s - 1]` is the area removed between opening sizes `s - 1` and `s`;
    /// the last entry also absorbs whatever survives the largest opening.
    pub removed: Vec<usize>,
    pub total_area: usize,
    /// Area-weighted mean size; 0 for an empty mask.
    pub mean_size: f64,
}

impl GranulometrySpectrum {
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.removed.iter().enumerate().map(|(i, &a)| (i + 1, a))
    }
}

/// For `s = 1..=max_size`, opens the mask with a square of edge `2s + 1` and
/// records the area lost relative to size `s - 1` (size 0 is the mask itself).
pub fn granulometry(mask: &BinaryMask, max_size: usize) -> Result<GranulometrySpectrum> {
    if max_size == 0 {
        return Err(invalid("granulometry needs max_size >= 1"));
    }
    let total = mask.area();
    let mut removed = vec![0usize; max_size];
    let mut prev = total;
    for s in 1..=max_size {
        if prev == 0 {
            break;
        }
        let area = opening(mask, s).area();
        removed[s - 1] = prev - area;
        prev = area;
    }
    removed[max_size - 1] += prev;
    let mean_size = if total == 0 {
        0.0
    } else {
        removed.iter().enumerate().map(|(i, &a)| (i + 1) as f64 * a as f64).sum::<f64>() / total as f64
    };
    Ok(GranulometrySpectrum {
        removed,
        total_area: total,
        mean_size,
    })
}
