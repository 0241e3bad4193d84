//! Attribution maps: input-gradient saliency, Grad-CAM at any tap, and LIME
//! over a square superpixel grid, plus Gaussian post-smoothing.
//!
//! Gradient methods take a [`Scorer`]: either the network's own classifier or
//! a probe ([`AuxHead`]) attached at a tap. Probes let every tap be explained
//! through a classifier that reads that tap directly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::metrics::{binarize_percentile, BinaryMask, MaskOrigin};
use crate::network::{backward_layers, forward_layers, run_layers, tap_and_gradient, AuxHead, ModelParams, NetworkSpec};
use crate::rng::Rng;
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Saliency,
    GradCam,
    Lime,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Saliency, Method::GradCam, Method::Lime];

    pub fn name(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::GradCam => "gradcam",
            Method::Lime => "lime",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "saliency" => Some(Method::Saliency),
            "gradcam" | "grad-cam" | "grad_cam" => Some(Method::GradCam),
            "lime" => Some(Method::Lime),
            _ => None,
        }
    }
}

/// Non-negative heatmap aligned with the input pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    pub method: Method,
    pub tap: usize,
    pub class: usize,
}

impl AttributionMap {
    pub fn binarize(&self, percentile: f64) -> Result<BinaryMask> {
        binarize_percentile(&self.values, self.h, self.w, percentile)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Which class score the gradient methods differentiate.
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a> {
    /// The network's own classifier.
    Network,
    /// A probe reading the tap it is attached to.
    Probe(&'a AuxHead),
}

fn check_image(spec: &NetworkSpec, image: &Tensor4) -> Result<()> {
    if image.shape() != spec.input_shape() {
        return Err(Error::ShapeMismatch {
            context: "explain",
            expected: format!("a single image {}", spec.input_shape()),
            found: format!("{}", image.shape()),
        });
    }
    Ok(())
}

fn check_class(classes: usize, class: usize) -> Result<()> {
    if class >= classes {
        return Err(invalid(format!("class {class} outside 0..{classes}")));
    }
    Ok(())
}

fn one_hot(classes: usize, class: usize) -> Tensor4 {
    let mut t = Tensor4::zeros(Shape4::new(1, classes, 1, 1));
    t.set(0, class, 0, 0, 1.0);
    t
}

/// Activations at `tap` and the gradient of the scorer's class score w.r.t. them.
pub fn tap_gradient(
    spec: &NetworkSpec,
    params: &ModelParams,
    scorer: Scorer<'_>,
    image: &Tensor4,
    class: usize,
    tap: usize,
) -> Result<(Tensor4, Tensor4)> {
    check_image(spec, image)?;
    match scorer {
        Scorer::Network => tap_and_gradient(spec, params, image, class, tap),
        Scorer::Probe(head) => {
            check_class(head.classes, class)?;
            if head.tap != tap {
                return Err(invalid(format!("probe is attached at tap {}, not {tap}", head.tap)));
            }
            let acts = run_layers(spec, params, image, spec.layers_between_taps(0, tap)?)?;
            let lg = head.backward(&acts, &one_hot(head.classes, class))?;
            Ok((acts, lg.d_input))
        }
    }
}

/// Gradient of the scorer's class score w.r.t. the input image.
pub fn input_gradient(
    spec: &NetworkSpec,
    params: &ModelParams,
    scorer: Scorer<'_>,
    image: &Tensor4,
    class: usize,
) -> Result<Tensor4> {
    check_image(spec, image)?;
    match scorer {
        Scorer::Network => Ok(tap_and_gradient(spec, params, image, class, 0)?.1),
        Scorer::Probe(head) => {
            check_class(head.classes, class)?;
            let range = spec.layers_between_taps(0, head.tap)?;
            let acts = forward_layers(spec, params, image, range.clone())?;
            let lg = head.backward(acts.last().expect("trace"), &one_hot(head.classes, class))?;
            Ok(backward_layers(spec, params, &acts, lg.d_input, range, false)?.0)
        }
    }
}

/// Per-pixel `|d score / d input|`, reduced over channels by maximum.
pub fn saliency(spec: &NetworkSpec, params: &ModelParams, image: &Tensor4, class: usize) -> Result<AttributionMap> {
    saliency_with(spec, params, Scorer::Network, image, class)
}

pub fn saliency_with(
    spec: &NetworkSpec,
    params: &ModelParams,
    scorer: Scorer<'_>,
    image: &Tensor4,
    class: usize,
) -> Result<AttributionMap> {
    let g = input_gradient(spec, params, scorer, image, class)?;
    let s = g.shape();
    let mut values = vec![0.0f64; s.plane()];
    for plane in g.item(0).chunks_exact(s.plane()) {
        for (v, &x) in values.iter_mut().zip(plane) {
            *v = v.max(libm::fabs(x));
        }
    }
    Ok(AttributionMap {
        h: s.h,
        w: s.w,
        values,
        method: Method::Saliency,
        tap: match scorer {
            Scorer::Network => 0,
            Scorer::Probe(h) => h.tap,
        },
        class,
    })
}

/// Grad-CAM from one item's activations `A` and gradients `dy/dA`:
/// `alpha_k = mean_ij dy/dA^k_ij`, map = `ReLU(sum_k alpha_k A^k)`.
/// Returned at the activation resolution.
pub fn grad_cam_map(acts: &Tensor4, grads: &Tensor4) -> Result<Vec<f64>> {
    if acts.shape() != grads.shape() || acts.shape().n != 1 {
        return Err(Error::ShapeMismatch {
            context: "grad-cam",
            expected: format!("matching single-item tensors, activations {}", acts.shape()),
            found: format!("gradients {}", grads.shape()),
        });
    }
    let s = acts.shape();
    let z = s.plane() as f64;
    let mut map = vec![0.0; s.plane()];
    for (a, g) in acts.item(0).chunks_exact(s.plane()).zip(grads.item(0).chunks_exact(s.plane())) {
        let alpha = g.iter().sum::<f64>() / z;
        for (m, &av) in map.iter_mut().zip(a) {
            *m += alpha * av;
        }
    }
    for m in &mut map {
        if *m < 0.0 {
            *m = 0.0;
        }
    }
    Ok(map)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn bilinear_resize(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if (h, w) == (out_h, out_w) {
        return values.to_vec();
    }
    let coord = |dst: usize, src_len: usize, dst_len: usize| {
        let s = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
        let s = s.clamp(0.0, (src_len - 1) as f64);
        let i0 = libm::floor(s) as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Grad-CAM of the network's own class score at `tap`, upsampled to the input size.
pub fn grad_cam(spec: &NetworkSpec, params: &ModelParams, image: &Tensor4, class: usize, tap: usize) -> Result<AttributionMap> {
    grad_cam_with(spec, params, Scorer::Network, image, class, tap)
}

pub fn grad_cam_with(
    spec: &NetworkSpec,
    params: &ModelParams,
    scorer: Scorer<'_>,
    image: &Tensor4,
    class: usize,
    tap: usize,
) -> Result<AttributionMap> {
    if tap == 0 || tap > spec.tap_count() {
        return Err(invalid(format!("grad-cam tap {tap} outside 1..={}", spec.tap_count())));
    }
    let (acts, grads) = tap_gradient(spec, params, scorer, image, class, tap)?;
    let map = grad_cam_map(&acts, &grads)?;
    let s = acts.shape();
    let input = spec.input_shape();
    Ok(AttributionMap {
        h: input.h,
        w: input.w,
        values: bilinear_resize(&map, s.h, s.w, input.h, input.w),
        method: Method::GradCam,
        tap,
        class,
    })
}

/// Default smoothing width: 2 px for a 32 px edge, scaled linearly.
pub fn default_sigma(edge: usize) -> f64 {
    2.0 * edge as f64 / 32.0
}

/// Half-sample symmetric reflection of index `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = libm::ceil(3.0 * sigma).max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| libm::exp(-((x * x) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable normalised Gaussian blur with symmetric borders. Preserves total
/// mass and constant maps; `sigma == 0` is the identity.
pub fn gaussian_smooth(map: &AttributionMap, sigma: f64) -> Result<AttributionMap> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma {sigma} must be a finite non-negative number")));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (map.h, map.w);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * map.values[y * w + reflect(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
            values[y * w + x] = v.max(0.0);
        }
    }
    Ok(AttributionMap { values, ..map.clone() })
}

/// Square tiling of an image into patches used as LIME features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelGrid {
    pub edge: usize,
    pub h: usize,
    pub w: usize,
    pub rows: usize,
    pub cols: usize,
    /// Patch id of each pixel, row-major.
    pub ids: Vec<usize>,
}

impl SuperpixelGrid {
    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_area(&self, patch: usize) -> usize {
        self.ids.iter().filter(|&&p| p == patch).count()
    }
}

/// Tiles an `h x w` image with `edge`-sized squares; a ragged last row or column
/// is merged into the adjacent edge patches.
pub fn superpixel_grid(h: usize, w: usize, edge: usize) -> Result<SuperpixelGrid> {
    if edge == 0 || edge > h || edge > w {
        return Err(invalid(format!("patch edge {edge} must lie in 1..={}", h.min(w))));
    }
    let rows = h / edge;
    let cols = w / edge;
    let mut ids = Vec::with_capacity(h * w);
    for y in 0..h {
        let r = (y / edge).min(rows - 1);
        for x in 0..w {
            ids.push(r * cols + (x / edge).min(cols - 1));
        }
    }
    Ok(SuperpixelGrid {
        edge,
        h,
        w,
        rows,
        cols,
        ids,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimeConfig {
    pub samples: usize,
    pub ridge_lambda: f64,
    /// Probability that a patch is kept in a perturbation.
    pub keep_prob: f64,
    pub top_k: usize,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            ridge_lambda: 1.0,
            keep_prob: 0.5,
            top_k: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimeExplanation {
    /// Ridge coefficient of each patch.
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// The `top_k` patches with the largest weights, best first.
    pub selected: Vec<usize>,
    /// Presence vector of each perturbation sample.
    pub samples: Vec<Vec<bool>>,
    /// Black-box score of each perturbation sample.
    pub scores: Vec<f64>,
}

/// Ridge regression with an unpenalised intercept:
/// minimises `|y - b - Z w|^2 + lambda |w|^2`. Returns `(w, b)`.
pub fn ridge_fit(design: &[Vec<f64>], targets: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    let n = design.len();
    if n == 0 || n != targets.len() {
        return Err(invalid(format!("ridge fit with {n} rows and {} targets", targets.len())));
    }
    if !(lambda >= 0.0) {
        return Err(invalid("ridge lambda must be non-negative"));
    }
    let p = design[0].len();
    if design.iter().any(|r| r.len() != p) {
        return Err(invalid("ragged design matrix"));
    }
    let mean_x: Vec<f64> = (0..p).map(|j| design.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mean_y = targets.iter().sum::<f64>() / n as f64;
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for (row, &y) in design.iter().zip(targets) {
        let yc = y - mean_y;
        for i in 0..p {
            let xi = row[i] - mean_x[i];
            rhs[i] += xi * yc;
            for j in 0..=i {
                gram[i * p + j] += xi * (row[j] - mean_x[j]);
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[j * p + i] = gram[i * p + j];
        }
        gram[i * p + i] += lambda;
    }
    let w = cholesky_solve(&mut gram, &rhs, p)
        .ok_or_else(|| Error::DegenerateDesign("normal equations are singular; increase ridge lambda".into()))?;
    let intercept = mean_y - mean_x.iter().zip(&w).map(|(m, c)| m * c).sum::<f64>();
    Ok((w, intercept))
}

/// Solves `A x = b` for symmetric positive definite `A` (overwritten by its factor).
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| libm::fabs(a[i * n + i])).fold(0.0, f64::max).max(1.0);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 1e-12 * scale) {
            return None;
        }
        let d = libm::sqrt(d);
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= a[k * n + i] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    Some(y)
}

/// Zeroes every pixel whose patch is absent from `present`.
pub fn occlude(image: &Tensor4, grid: &SuperpixelGrid, present: &[bool]) -> Tensor4 {
    let mut out = image.clone();
    let s = image.shape();
    for n in 0..s.n {
        for plane in out.item_mut(n).chunks_exact_mut(s.plane()) {
            for (v, &id) in plane.iter_mut().zip(&grid.ids) {
                if !present[id] {
                    *v = 0.0;
                }
            }
        }
    }
    out
}

/// Perturbs patches at random, scores each perturbed image with `black_box`
/// and fits a ridge surrogate from patch presence to score.
///
/// `black_box` receives a batch of perturbed images and returns one score per item.
pub fn lime_explain(
    mut black_box: impl FnMut(&Tensor4) -> Result<Vec<f64>>,
    image: &Tensor4,
    grid: &SuperpixelGrid,
    cfg: &LimeConfig,
    rng: &mut Rng,
) -> Result<LimeExplanation> {
    let s = image.shape();
    if s.n != 1 || (s.h, s.w) != (grid.h, grid.w) {
        return Err(Error::ShapeMismatch {
            context: "lime",
            expected: format!("one {}x{} image", grid.h, grid.w),
            found: format!("{s}"),
        });
    }
    if cfg.samples == 0 || !(0.0..=1.0).contains(&cfg.keep_prob) {
        return Err(invalid("lime needs samples >= 1 and keep_prob in [0, 1]"));
    }
    let patches = grid.patch_count();
    if cfg.top_k > patches {
        return Err(invalid(format!("top_k {} exceeds {patches} patches", cfg.top_k)));
    }
    let samples: Vec<Vec<bool>> = (0..cfg.samples)
        .map(|_| (0..patches).map(|_| rng.bernoulli(cfg.keep_prob)).collect())
        .collect();
    if samples.iter().all(|z| z == &samples[0]) {
        return Err(Error::DegenerateDesign("all perturbation samples are identical".into()));
    }
    let mut scores = Vec::with_capacity(cfg.samples);
    for chunk in samples.chunks(64) {
        let parts: Vec<Tensor4> = chunk.iter().map(|z| occlude(image, grid, z)).collect();
        let batch = Tensor4::concat(&parts)?;
        let out = black_box(&batch)?;
        if out.len() != chunk.len() {
            return Err(invalid(format!("black box returned {} scores for {} images", out.len(), chunk.len())));
        }
        scores.extend(out);
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(invalid("black box returned a non-finite score"));
    }
    let design: Vec<Vec<f64>> = samples
        .iter()
        .map(|z| z.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let (weights, intercept) = ridge_fit(&design, &scores, cfg.ridge_lambda)?;
    let mut order: Vec<usize> = (0..patches).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k);
    Ok(LimeExplanation {
        weights,
        intercept,
        selected: order,
        samples,
        scores,
    })
}

/// The image with unselected patches zeroed, and the mask of selected pixels.
pub fn lime_mask(image: &Tensor4, grid: &SuperpixelGrid, explanation: &LimeExplanation) -> Result<(Tensor4, BinaryMask)> {
    let mut present = vec![false; grid.patch_count()];
    for &p in &explanation.selected {
        *present.get_mut(p).ok_or_else(|| invalid(format!("patch {p} not in grid")))? = true;
    }
    let occluded = occlude(image, grid, &present);
    let bits = grid.ids.iter().map(|&id| present[id]).collect();
    Ok((occluded, BinaryMask::new(grid.h, grid.w, bits, MaskOrigin::Lime)?))
}

/// Heatmap view of a LIME explanation: each pixel carries its patch's positive weight.
pub fn lime_attribution(grid: &SuperpixelGrid, explanation: &LimeExplanation, tap: usize, class: usize) -> AttributionMap {
    AttributionMap {
        h: grid.h,
        w: grid.w,
        values: grid.ids.iter().map(|&id| explanation.weights[id].max(0.0)).collect(),
        method: Method::Lime,
        tap,
        class,
    }
}
