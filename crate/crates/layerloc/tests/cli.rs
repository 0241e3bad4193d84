mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use common::*;
use layerloc::config::ExperimentConfig;
use layerloc::experiment::{self, Corpus};
use layerloc::manifest::Split;
use layerloc::report::read_table;
use layerloc::weights::{load_network, Container};
use layerloc_core::detect::{map_evaluate, iou_schedule, BoxF, Detection, DetectionSet, ImageDetections, ObjectBox};
use layerloc_core::explain::{
    gaussian_smooth, grad_cam_with, lime_explain, lime_mask, saliency_with, superpixel_grid, Scorer,
};
use layerloc_core::metrics::{covered_count, iou, lime_overlap, rasterize_box};
use layerloc_core::numerics::softmax;
use layerloc_core::Rng;

struct Pipeline {
    config: PathBuf,
    out: PathBuf,
}

/// One full tiny pipeline shared by the tests in this file.
fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-pipeline");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let config = write_config(&root, TINY);
        let out = root.join("out");
        run_pipeline(&config, &out, 2);
        run_ok(
            &config,
            &out.join("same"),
            &["--data", p(&out.join("data")), "compare", "--cl", p(&out.join("weights/e2e.llw")), "--e2e", p(&out.join("weights/e2e.llw"))],
        );
        Pipeline { config, out }
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn cfg() -> ExperimentConfig {
    ExperimentConfig::parse(TINY).unwrap()
}

fn table(path: &Path) -> (Vec<String>, Vec<BTreeMap<String, String>>) {
    let (_, header, rows) = read_table(path).unwrap();
    let rows = rows
        .into_iter()
        .map(|r| header.iter().cloned().zip(r).collect())
        .collect();
    (header, rows)
}

fn f(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

fn u(row: &BTreeMap<String, String>, key: &str) -> usize {
    row[key].parse().unwrap()
}

fn stderr_of(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), TINY);
    let out = dir.path().join("out");

    let bad_key = dir.path().join("bad-key.toml");
    std::fs::write(&bad_key, TINY.replace("[model]", "[model]\nwidhts = [1]")).unwrap();
    let o = run(&bad_key, &out, &["generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_of(&o).contains("widhts"), "{}", stderr_of(&o));

    let bad_value = dir.path().join("bad-value.toml");
    std::fs::write(&bad_value, TINY.replace("percentile = 85.0", "percentile = 100.0")).unwrap();
    let o = run(&bad_value, &out, &["generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_of(&o).contains("explain.percentile"));

    assert_eq!(run(&good, &out, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&good, &out, &["train", "--scheme", "sgd"]).status.code(), Some(2));
    assert_eq!(run(&good, &out, &["--jobs", "0", "generate"]).status.code(), Some(2));
    assert_eq!(run(Path::new("/nonexistent.toml"), &out, &["generate"]).status.code(), Some(2));

    // runtime failures: no dataset yet, then a missing weights file
    let o = run(&good, &out, &["train", "--scheme", "e2e"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_of(&o).contains("generate"));
    run_ok(&good, &out, &["generate"]);
    assert_eq!(run(&good, &out, &["train", "--scheme", "cl", "--k", "7"]).status.code(), Some(2));
    let o = run(&good, &out, &["explain", "--weights", "/nonexistent.llw"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&good, &out, &["explain", "--weights", "/nonexistent.llw", "--taps", "9"]);
    assert_eq!(o.status.code(), Some(2));

    let help = std::process::Command::new(bin()).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

/// Pinned layouts; changing any of these is a format version bump.
const GOLDEN: &[(&str, &str, &str)] = &[
    ("data/summary.csv", "manifest_summary", "split,class,images"),
    ("reports/train_cl_log.csv", "train_log", "scheme,stage,kind,taps,epoch,train_loss,train_accuracy,val_loss"),
    ("reports/train_e2e_summary.csv", "train_summary", "scheme,metric,tap,value"),
    (
        "explain/cl/explain.csv",
        "explain",
        "image_id,scheme,method,tap,class,iou,localised,overlap_pixels,overlap_fraction,heatmap",
    ),
    ("explain/e2e/lacc.csv", "lacc", "scheme,method,tap,images,lacc,mean_iou"),
    (
        "compare/compare.csv",
        "compare",
        "method,tap,images,cl_better,fraction_cl_better,cl_lacc,e2e_lacc,cl_mean_iou,e2e_mean_iou",
    ),
    ("granulometry/cl/spectra.csv", "granulometry_spectra", "scheme,tap,image_id,size,removed"),
    ("granulometry/cl/images.csv", "granulometry_images", "scheme,tap,image_id,area,mean_size"),
    ("granulometry/e2e/summary.csv", "granulometry_summary", "scheme,tap,images,mean_size"),
    ("detect/cl/tap3/detections-seed0.csv", "detections", "image_id,class,score,x,y,w,h"),
    ("detect/e2e/tap5/report-seed1.csv", "detect_report", "metric,value"),
    ("detect/cl/table.csv", "detect_table", "scheme,tap,metric,seeds,mean,std,formatted"),
];

#[test]
fn golden_table_headers() {
    let pl = pipeline();
    let c = cfg();
    let hash = c.hash();
    for (file, name, header) in GOLDEN {
        let text = std::fs::read_to_string(pl.out.join(file)).unwrap();
        let mut lines = text.lines();
        let first = lines.next().unwrap();
        let seeds = c.seeds();
        assert_eq!(
            first,
            format!(
                "# layerloc {name} v1 config={hash} seed=5 data={} splits={} init={} lime={} detect={}",
                seeds.data, seeds.splits, seeds.init, seeds.lime, seeds.detect
            ),
            "{file}"
        );
        assert_eq!(lines.next().unwrap(), *header, "{file}");
    }
}

#[test]
fn weights_record_provenance() {
    let pl = pipeline();
    let c = Container::decode(&std::fs::read(pl.out.join("weights/cl.llw")).unwrap()).unwrap();
    assert_eq!(c.meta["scheme"], "cl");
    assert_eq!(c.meta["k"], "6");
    assert_eq!(c.meta["seed"], cfg().seeds().init.to_string());
    let c = Container::decode(&std::fs::read(pl.out.join("weights/e2e.llw")).unwrap()).unwrap();
    assert_eq!(c.meta["scheme"], "e2e");
    assert!(!c.meta.contains_key("k"));
}

#[test]
fn explain_rows_and_heatmaps() {
    let pl = pipeline();
    let c = cfg();
    for scheme in ["cl", "e2e"] {
        let dir = pl.out.join("explain").join(scheme);
        let (_, rows) = table(&dir.join("explain.csv"));
        assert_eq!(rows.len(), c.explain.images * c.explain.taps.len() * c.explain.methods.len());
        for r in &rows {
            assert_eq!(r["scheme"], scheme);
            let heat = dir.join(&r["heatmap"]);
            assert!(heat.is_file(), "{}", heat.display());
            assert!(heat.with_extension("pgm.txt").is_file());
            assert_eq!(r["localised"], if f(r, "iou") > 0.2 { "1" } else { "0" });
            assert_eq!(r["overlap_pixels"].is_empty(), r["method"] != "lime");
        }
        let heatmaps = std::fs::read_dir(dir.join("heatmaps/gradcam/tap2")).unwrap().count();
        assert_eq!(heatmaps, 2 * c.explain.images);
    }
}

fn corpus(pl: &Pipeline) -> Corpus {
    experiment::load_corpus(&pl.out.join("data")).unwrap()
}

#[test]
fn explain_rows_match_library_calls() {
    let pl = pipeline();
    let c = cfg();
    let corpus = corpus(pl);
    let spec = experiment::network_spec(&c).unwrap();
    let params = load_network(&pl.out.join("weights/cl.llw"), &spec).unwrap();
    let probes = experiment::train_probes(&c, &spec, &params, &corpus).unwrap();
    let test = corpus.subset(Split::Test);
    let (_, rows) = table(&pl.out.join("explain/cl/explain.csv"));
    let grid = superpixel_grid(32, 32, c.explain.lime.patch).unwrap();

    for k in 0..5 {
        let image = test.images.sample(k);
        let (id, class, gt) = (test.ids[k], test.labels[k], test.boxes[k]);
        let truth = rasterize_box(&gt, 32, 32).unwrap();
        for &tap in &c.explain.taps {
            let head = probes.head(tap).unwrap();
            let find = |method: &str| {
                rows.iter()
                    .find(|r| u(r, "image_id") == id && u(r, "tap") == tap && r["method"] == method)
                    .unwrap()
            };
            let cam = grad_cam_with(&spec, &params, Scorer::Probe(head), &image, class, tap).unwrap();
            let mask = gaussian_smooth(&cam, c.explain.sigma).unwrap().binarize(c.explain.percentile).unwrap();
            assert_eq!(f(find("gradcam"), "iou"), iou(&mask, &truth).unwrap());

            let sal = saliency_with(&spec, &params, Scorer::Probe(head), &image, class).unwrap();
            let mask = gaussian_smooth(&sal, c.explain.sigma).unwrap().binarize(c.explain.percentile).unwrap();
            assert_eq!(f(find("saliency"), "iou"), iou(&mask, &truth).unwrap());

            let mut rng = Rng::new(c.seeds().lime).derive(&format!("image-{id}-tap-{tap}"));
            let black_box = |batch: &layerloc_core::Tensor4| {
                let acts = layerloc_core::network::run_layers(
                    &spec,
                    &params,
                    batch,
                    spec.layers_between_taps(0, tap).unwrap(),
                )?;
                let scores = head.forward(&acts)?;
                Ok((0..batch.shape().n).map(|i| softmax(scores.item(i))[class]).collect())
            };
            let expl = lime_explain(black_box, &image, &grid, &c.explain.lime.to_lime_config(), &mut rng).unwrap();
            let (_, mask) = lime_mask(&image, &grid, &expl).unwrap();
            let row = find("lime");
            assert_eq!(f(row, "iou"), iou(&mask, &truth).unwrap());
            assert_eq!(u(row, "overlap_pixels"), lime_overlap(&mask, &gt).unwrap().count);
        }
    }
}

#[test]
fn identical_weights_compare_to_nothing() {
    let pl = pipeline();
    let (_, rows) = table(&pl.out.join("same/compare/compare.csv"));
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(u(r, "cl_better"), 0);
        assert_eq!(f(r, "fraction_cl_better"), 0.0);
        assert_eq!(r["cl_lacc"], r["e2e_lacc"]);
        assert_eq!(r["cl_mean_iou"], r["e2e_mean_iou"]);
    }
    let taps: std::collections::BTreeSet<usize> = rows.iter().map(|r| u(r, "tap")).collect();
    assert_eq!(taps.into_iter().collect::<Vec<_>>(), cfg().explain.taps);
}

#[test]
fn paired_fraction_recomputes_from_rows() {
    let pl = pipeline();
    let dir = pl.out.join("compare");
    let (_, a) = table(&dir.join("explain_cl.csv"));
    let (_, b) = table(&dir.join("explain_e2e.csv"));
    let (_, rows) = table(&dir.join("compare.csv"));
    let key = |r: &BTreeMap<String, String>| (r["method"].clone(), u(r, "tap"), u(r, "image_id"));
    let e2e: BTreeMap<_, f64> = b.iter().map(|r| (key(r), f(r, "iou"))).collect();
    for row in &rows {
        let pairs: Vec<(f64, f64)> = a
            .iter()
            .filter(|r| r["method"] == row["method"] && u(r, "tap") == u(row, "tap"))
            .map(|r| (f(r, "iou"), e2e[&key(r)]))
            .collect();
        let better = pairs.iter().filter(|(x, y)| x > y).count();
        assert_eq!(u(row, "images"), pairs.len());
        assert_eq!(u(row, "cl_better"), better);
        assert_eq!(f(row, "fraction_cl_better"), better as f64 / pairs.len() as f64);
        let lacc = pairs.iter().filter(|(x, _)| *x > 0.2).count() as f64 / pairs.len() as f64;
        assert_eq!(f(row, "cl_lacc"), lacc);
    }
}

#[test]
fn detect_reports_and_table() {
    let pl = pipeline();
    let c = cfg();
    for scheme in ["cl", "e2e"] {
        let dir = pl.out.join("detect").join(scheme);
        for &tap in &c.detect.taps {
            for i in 0..c.detect.seeds {
                let (_, rows) = table(&dir.join(format!("tap{tap}/report-seed{i}.csv")));
                let keys: Vec<&str> = rows.iter().map(|r| r["metric"].as_str()).collect();
                assert_eq!(keys, ["map50", "map75", "map50_95", "miou", "dropped_objects"]);
                assert!(dir.join(format!("tap{tap}/head-seed{i}.llw")).is_file());
            }
        }
        let (_, rows) = table(&dir.join("table.csv"));
        assert_eq!(rows.len(), c.detect.taps.len() * 4);
        for r in &rows {
            assert_eq!(u(r, "seeds"), c.detect.seeds);
            let formatted = &r["formatted"];
            let (m, s) = formatted.split_once('±').unwrap();
            assert_eq!(m, format!("{:.2}", 100.0 * f(r, "mean")));
            assert_eq!(s, format!("{:.2}", 100.0 * f(r, "std")));
        }
    }
}

#[test]
fn detect_metrics_match_library_evaluation() {
    let pl = pipeline();
    let corpus = corpus(pl);
    let test = corpus.subset(Split::Test);
    for scheme in ["cl", "e2e"] {
        let dir = pl.out.join("detect").join(scheme).join("tap5");
        let (_, dets) = table(&dir.join("detections-seed1.csv"));
        let set = DetectionSet {
            images: test
                .ids
                .iter()
                .zip(&test.boxes)
                .map(|(&id, gt)| ImageDetections {
                    detections: dets
                        .iter()
                        .filter(|r| u(r, "image_id") == id)
                        .map(|r| Detection {
                            bbox: BoxF {
                                x: f(r, "x"),
                                y: f(r, "y"),
                                w: f(r, "w"),
                                h: f(r, "h"),
                            },
                            class: u(r, "class"),
                            score: f(r, "score"),
                        })
                        .collect(),
                    truth: vec![ObjectBox::from(gt)],
                })
                .collect(),
        };
        let report = map_evaluate(&set, &iou_schedule());
        let (_, rows) = table(&dir.join("report-seed1.csv"));
        for (k, v) in report.entries() {
            let row = rows.iter().find(|r| r["metric"] == k).unwrap();
            assert_eq!(f(row, "value"), v, "{scheme} {k}");
        }
    }
}

#[test]
fn granulometry_rows_conserve_area() {
    let pl = pipeline();
    let c = cfg();
    for scheme in ["cl", "e2e"] {
        let dir = pl.out.join("granulometry").join(scheme);
        let (_, spectra) = table(&dir.join("spectra.csv"));
        let (_, images) = table(&dir.join("images.csv"));
        let (_, summary) = table(&dir.join("summary.csv"));
        assert_eq!(images.len(), c.explain.images * c.explain.taps.len());
        for img in &images {
            let sum: usize = spectra
                .iter()
                .filter(|r| r["tap"] == img["tap"] && r["image_id"] == img["image_id"])
                .map(|r| u(r, "removed"))
                .sum();
            assert_eq!(sum, u(img, "area"));
            assert_eq!(u(img, "area"), covered_count(32 * 32, c.explain.percentile));
        }
        let taps: Vec<usize> = summary.iter().map(|r| u(r, "tap")).collect();
        assert_eq!(taps, c.explain.taps);
        assert!(summary.iter().all(|r| r["scheme"] == scheme));
    }
}

#[test]
fn manifest_summary_counts_splits() {
    let pl = pipeline();
    let (_, rows) = table(&pl.out.join("data/summary.csv"));
    let total: usize = rows.iter().map(|r| u(r, "images")).sum();
    assert_eq!(total, cfg().dataset.n_images);
    assert_eq!(rows.len(), 9);
    let _ = &pl.config;
}
