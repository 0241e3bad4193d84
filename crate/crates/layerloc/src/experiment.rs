//! The experiment pipeline behind the CLI: data, training, per-tap
//! explanations, localisation scoring, granulometry and detection.

use std::path::Path;

use anyhow::{bail, Context, Result};
use layerloc_core::detect::{
    self, iou_schedule, map_evaluate, DetectReport, DetectionData, DetectionHead, DetectionSet, ImageDetections, MapReport,
    ObjectBox,
};
use layerloc_core::explain::{
    gaussian_smooth, grad_cam_with, lime_attribution, lime_explain, lime_mask, saliency_with, superpixel_grid, AttributionMap,
    Method, Scorer,
};
use layerloc_core::metrics::{
    granulometry, iou, lime_overlap, localisation_accuracy, rasterize_box, GranulometrySpectrum, GtBox, LOCALISATION_THRESHOLD,
};
use layerloc_core::network::{build_six_layer_net, run_layers, ModelParams, NetworkSpec, Scheme};
use layerloc_core::numerics::softmax;
use layerloc_core::training::{self, make_split_plan, Dataset, ProbeSet, TrainReport};
use layerloc_core::{Rng, Tensor4};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ScorerKind};
use crate::data::generate_samples;
use crate::image::{read_image, write_image};
use crate::manifest::{class_names, image_path, split_dataset, Annotation, DatasetManifest, Split, MANIFEST_VERSION};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// All images of a dataset in id order, with their manifest.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub images: Tensor4,
}

/// The images of one split.
#[derive(Clone, Debug)]
pub struct Subset {
    pub ids: Vec<usize>,
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub boxes: Vec<GtBox>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Ok(Dataset::new(self.images.clone(), self.labels.clone())?)
    }

    /// The first `n` images.
    pub fn take(&self, n: usize) -> Subset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Subset {
            ids: self.ids[..n].to_vec(),
            images: self.images.gather(&idx),
            labels: self.labels[..n].to_vec(),
            boxes: self.boxes[..n].to_vec(),
        }
    }

    pub fn detection_data(&self) -> Result<DetectionData> {
        let objects = self.boxes.iter().map(|b| vec![ObjectBox::from(b)]).collect();
        Ok(DetectionData::new(self.images.clone(), objects)?)
    }
}

impl Corpus {
    pub fn subset(&self, split: Split) -> Subset {
        let ids = self.manifest.split_ids(split);
        let anns: Vec<&Annotation> = ids.iter().map(|&i| &self.manifest.annotations[i]).collect();
        Subset {
            images: self.images.gather(&ids),
            labels: anns.iter().map(|a| a.label).collect(),
            boxes: anns.iter().map(|a| a.bbox).collect(),
            ids,
        }
    }
}

pub fn generate_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let seeds = cfg.seeds();
    let spec = cfg.shape_spec();
    let samples = generate_samples(&spec, cfg.dataset.n_images, cfg.dataset.classes, seeds.data)?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        class_names: class_names(cfg.dataset.classes),
        seed: seeds.data,
        generator: spec.clone(),
        annotations: samples
            .iter()
            .enumerate()
            .map(|(id, s)| Annotation {
                id,
                path: image_path(Split::Train, id, spec.channels),
                label: s.label,
                bbox: s.bbox,
                split: Split::Train,
            })
            .collect(),
    };
    let manifest = if manifest.annotations.is_empty() {
        manifest
    } else {
        split_dataset(&manifest, cfg.dataset.fractions, seeds.splits)?
    };
    let images = if samples.is_empty() {
        Tensor4::zeros(layerloc_core::Shape4::new(0, spec.channels, spec.edge, spec.edge))
    } else {
        Tensor4::concat(&samples.into_iter().map(|s| s.image).collect::<Vec<_>>())?
    };
    Ok(Corpus { manifest, images })
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    for a in &corpus.manifest.annotations {
        write_image(&corpus.images.sample(a.id), &dir.join(&a.path))?;
    }
    crate::weights::write_atomic(&dir.join(MANIFEST_FILE), corpus.manifest.to_text().as_bytes())?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest = DatasetManifest::parse(&text).with_context(|| format!("in {}", path.display()))?;
    manifest.validate_files(dir)?;
    let g = &manifest.generator;
    let mut parts = Vec::with_capacity(manifest.annotations.len());
    for a in &manifest.annotations {
        let img = read_image(&dir.join(&a.path))?;
        let s = img.shape();
        if (s.c, s.h, s.w) != (g.channels, g.edge, g.edge) {
            bail!("image {}: {} does not match the generator geometry", a.id, s);
        }
        parts.push(img);
    }
    let images = if parts.is_empty() {
        Tensor4::zeros(layerloc_core::Shape4::new(0, g.channels, g.edge, g.edge))
    } else {
        Tensor4::concat(&parts)?
    };
    Ok(Corpus { manifest, images })
}

pub fn network_spec(cfg: &ExperimentConfig) -> Result<NetworkSpec> {
    let s = cfg.shape_spec();
    Ok(build_six_layer_net((s.channels, s.edge, s.edge), cfg.dataset.classes, &cfg.model.widths)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeArg {
    E2e,
    Cl,
}

impl SchemeArg {
    pub fn name(self) -> &'static str {
        match self {
            SchemeArg::E2e => "e2e",
            SchemeArg::Cl => "cl",
        }
    }

    pub fn of(params: &ModelParams) -> &'static str {
        crate::weights::scheme_name(&params.provenance.scheme)
    }
}

pub fn train_network(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    corpus: &Corpus,
    scheme: SchemeArg,
    k: Option<usize>,
) -> Result<(ModelParams, TrainReport)> {
    let seed = cfg.seeds().init;
    let train = corpus.subset(Split::Train).dataset()?;
    let val = corpus.subset(Split::Val);
    let val = (!val.is_empty()).then(|| val.dataset()).transpose()?;
    Ok(match scheme {
        SchemeArg::E2e => training::train_e2e(spec, &train, val.as_ref(), &cfg.train.e2e.to_train_config(seed))?,
        SchemeArg::Cl => {
            let plan = make_split_plan(spec.tap_count(), k.unwrap_or(cfg.train.k))?;
            training::train_cascade(spec, &train, val.as_ref(), &cfg.train.cl.to_train_config(seed), &plan)?
        }
    })
}

pub fn train_probes(cfg: &ExperimentConfig, spec: &NetworkSpec, params: &ModelParams, corpus: &Corpus) -> Result<ProbeSet> {
    let seed = Rng::new(cfg.seeds().init).derive("probes").seed();
    let train = corpus.subset(Split::Train).dataset()?;
    let val = corpus.subset(Split::Val);
    let val = (!val.is_empty()).then(|| val.dataset()).transpose()?;
    Ok(training::train_probes(spec, params, &train, val.as_ref(), &cfg.train.probe.to_train_config(seed))?)
}

/// One explained (image, method, tap).
#[derive(Clone, Debug, PartialEq)]
pub struct ExplainRecord {
    pub image_id: usize,
    pub method: Method,
    pub tap: usize,
    pub class: usize,
    pub iou: f64,
    pub overlap: Option<(usize, f64)>,
    pub spectrum: Option<GranulometrySpectrum>,
    pub map: Option<AttributionMap>,
}

#[derive(Clone, Debug)]
pub struct ExplainRequest<'a> {
    pub methods: &'a [Method],
    pub taps: &'a [usize],
    pub keep_maps: bool,
    /// Compute granulometry spectra with this maximum size.
    pub granulometry: Option<usize>,
    pub jobs: usize,
}

fn scorer<'a>(kind: ScorerKind, probes: &'a ProbeSet, tap: usize) -> Result<Scorer<'a>> {
    Ok(match kind {
        ScorerKind::Network => Scorer::Network,
        ScorerKind::Probe => Scorer::Probe(probes.head(tap)?),
    })
}

/// Class probability used as the LIME black box.
fn class_probability(
    spec: &NetworkSpec,
    params: &ModelParams,
    scorer: Scorer<'_>,
    tap: usize,
    batch: &Tensor4,
    class: usize,
) -> layerloc_core::Result<Vec<f64>> {
    let scores = match scorer {
        Scorer::Network => layerloc_core::network::forward(spec, params, batch)?,
        Scorer::Probe(head) => head.forward(&run_layers(spec, params, batch, spec.layers_between_taps(0, tap)?)?)?,
    };
    Ok((0..batch.shape().n).map(|i| softmax(scores.item(i))[class]).collect())
}

fn explain_one(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    params: &ModelParams,
    probes: &ProbeSet,
    subset: &Subset,
    k: usize,
    req: &ExplainRequest<'_>,
) -> Result<Vec<ExplainRecord>> {
    let e = &cfg.explain;
    let image = subset.images.sample(k);
    let class = subset.labels[k];
    let gt = subset.boxes[k];
    let id = subset.ids[k];
    let input = spec.input_shape();
    let truth = rasterize_box(&gt, input.h, input.w)?;
    let mut out = Vec::new();
    for &tap in req.taps {
        let sc = scorer(e.scorer, probes, tap)?;
        for &method in req.methods {
            let (map, mask, overlap) = match method {
                Method::GradCam | Method::Saliency => {
                    let raw = if method == Method::GradCam {
                        grad_cam_with(spec, params, sc, &image, class, tap)?
                    } else {
                        let mut m = saliency_with(spec, params, sc, &image, class)?;
                        m.tap = tap;
                        m
                    };
                    let map = gaussian_smooth(&raw, e.sigma)?;
                    let mask = map.binarize(e.percentile)?;
                    (map, mask, None)
                }
                Method::Lime => {
                    let grid = superpixel_grid(input.h, input.w, e.lime.patch)?;
                    let mut rng = Rng::new(cfg.seeds().lime).derive(&format!("image-{id}-tap-{tap}"));
                    let expl = lime_explain(
                        |batch| class_probability(spec, params, sc, tap, batch, class),
                        &image,
                        &grid,
                        &e.lime.to_lime_config(),
                        &mut rng,
                    )?;
                    let (_, mask) = lime_mask(&image, &grid, &expl)?;
                    let ov = lime_overlap(&mask, &gt)?;
                    (lime_attribution(&grid, &expl, tap, class), mask, Some((ov.count, ov.fraction)))
                }
            };
            let spectrum = match req.granulometry {
                Some(max) => Some(granulometry(&mask, max)?),
                None => None,
            };
            out.push(ExplainRecord {
                image_id: id,
                method,
                tap,
                class,
                iou: iou(&mask, &truth)?,
                overlap,
                spectrum,
                map: req.keep_maps.then_some(map),
            });
        }
    }
    Ok(out)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?)
}

/// Explains every image of `subset` at every requested tap and method.
/// Output is ordered by image, then tap, then method, whatever `jobs` is.
pub fn explain_subset(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    params: &ModelParams,
    probes: &ProbeSet,
    subset: &Subset,
    req: &ExplainRequest<'_>,
) -> Result<Vec<ExplainRecord>> {
    let per_image: Vec<Result<Vec<ExplainRecord>>> = pool(req.jobs)?.install(|| {
        (0..subset.len())
            .into_par_iter()
            .map(|k| explain_one(cfg, spec, params, probes, subset, k, req))
            .collect()
    });
    let mut out = Vec::new();
    for r in per_image {
        out.extend(r?);
    }
    Ok(out)
}

/// Localisation accuracy and mean IOU per (method, tap).
pub fn lacc_by_tap(records: &[ExplainRecord]) -> Result<Vec<(Method, usize, usize, f64, f64)>> {
    let mut keys: Vec<(Method, usize)> = records.iter().map(|r| (r.method, r.tap)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(m, t)| {
            let ious: Vec<f64> = records.iter().filter(|r| r.method == m && r.tap == t).map(|r| r.iou).collect();
            let mean = ious.iter().sum::<f64>() / ious.len() as f64;
            Ok((m, t, ious.len(), localisation_accuracy(&ious, LOCALISATION_THRESHOLD)?, mean))
        })
        .collect()
}

/// Paired comparison at one (method, tap).
#[derive(Clone, Debug, PartialEq)]
pub struct PairedRow {
    pub method: Method,
    pub tap: usize,
    pub images: usize,
    pub cl_better: usize,
    pub fraction: f64,
    pub cl_lacc: f64,
    pub e2e_lacc: f64,
    pub cl_mean_iou: f64,
    pub e2e_mean_iou: f64,
}

/// Pairs records by (method, tap, image) present in both arms.
pub fn paired_comparison(cl: &[ExplainRecord], e2e: &[ExplainRecord]) -> Result<Vec<PairedRow>> {
    use std::collections::BTreeMap;
    let index = |rs: &[ExplainRecord]| -> BTreeMap<(Method, usize, usize), f64> {
        rs.iter().map(|r| ((r.method, r.tap, r.image_id), r.iou)).collect()
    };
    let (a, b) = (index(cl), index(e2e));
    let mut groups: BTreeMap<(Method, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for (key, &va) in &a {
        if let Some(&vb) = b.get(key) {
            groups.entry((key.0, key.1)).or_default().push((va, vb));
        }
    }
    groups
        .into_iter()
        .map(|((method, tap), pairs)| {
            let n = pairs.len();
            let better = pairs.iter().filter(|(x, y)| x > y).count();
            let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            Ok(PairedRow {
                method,
                tap,
                images: n,
                cl_better: better,
                fraction: better as f64 / n as f64,
                cl_lacc: localisation_accuracy(&xs, LOCALISATION_THRESHOLD)?,
                e2e_lacc: localisation_accuracy(&ys, LOCALISATION_THRESHOLD)?,
                cl_mean_iou: xs.iter().sum::<f64>() / n as f64,
                e2e_mean_iou: ys.iter().sum::<f64>() / n as f64,
            })
        })
        .collect()
}

/// A trained head with its evaluation on the test split.
#[derive(Clone, Debug)]
pub struct DetectOutcome {
    pub head: DetectionHead,
    pub report: DetectReport,
    pub detections: DetectionSet,
    pub ids: Vec<usize>,
    pub metrics: MapReport,
}

pub fn detect_at_tap(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    params: &ModelParams,
    corpus: &Corpus,
    tap: usize,
    head_seed: u64,
) -> Result<DetectOutcome> {
    let train = corpus.subset(Split::Train).detection_data()?;
    let test = corpus.subset(Split::Test);
    let dcfg = cfg.detect.to_detect_config(head_seed);
    let (head, report) = detect::train_detection_head(spec, params, tap, &train, &dcfg)?;
    let dets = detect::detect(
        spec,
        params,
        &head,
        &test.images,
        cfg.detect.conf_threshold,
        cfg.detect.nms_threshold,
    )?;
    let detections = DetectionSet {
        images: dets
            .into_iter()
            .zip(&test.boxes)
            .map(|(d, b)| ImageDetections {
                detections: d,
                truth: vec![ObjectBox::from(b)],
            })
            .collect(),
    };
    let metrics = map_evaluate(&detections, &iou_schedule());
    Ok(DetectOutcome {
        head,
        report,
        detections,
        ids: test.ids,
        metrics,
    })
}

/// Head seed `i` of the configured set.
pub fn head_seed(cfg: &ExperimentConfig, i: usize) -> u64 {
    Rng::new(cfg.seeds().detect).derive(&format!("head-{i}")).seed()
}

pub fn is_cascade(params: &ModelParams) -> bool {
    matches!(params.provenance.scheme, Scheme::Cascade(_))
}
