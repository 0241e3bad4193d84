//! Command-line driver. Exit codes: 0 success, 1 runtime failure, 2 config
//! or usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use layerloc_core::explain::Method;
use layerloc_core::network::ModelParams;
use layerloc_core::training::StageKind;

use crate::config::{ConfigError, ExperimentConfig};
use crate::experiment::{self as exp, Corpus, ExplainRecord, ExplainRequest, SchemeArg};
use crate::image::write_heatmap;
use crate::manifest::Split;
use crate::report::{format_mean_std, mean_std, num, opt, write_table};
use crate::weights::{encode_head, load_network, save_network, write_atomic};

#[derive(Parser, Debug)]
#[command(name = "layerloc", version, about = "Cascade vs end-to-end training: layer-wise localisation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file, or `preset-localise` / `preset-detect`.
    #[arg(long, global = true, default_value = "preset-localise")]
    pub config: String,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory (defaults to `<out>/data`).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Worker threads for per-image work. Output does not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SchemeFlag {
    E2e,
    Cl,
}

impl From<SchemeFlag> for SchemeArg {
    fn from(s: SchemeFlag) -> Self {
        match s {
            SchemeFlag::E2e => SchemeArg::E2e,
            SchemeFlag::Cl => SchemeArg::Cl,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset and its manifest.
    Generate,
    /// Train a network end-to-end or by cascade.
    Train {
        #[arg(long, value_enum)]
        scheme: SchemeFlag,
        /// Cascade split count (defaults to the config's).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Attribution maps and localisation scores for one network.
    Explain {
        #[arg(long)]
        weights: PathBuf,
        /// Comma-separated subset of saliency, gradcam, lime.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        taps: Option<Vec<usize>>,
        /// Skip writing heatmap images.
        #[arg(long)]
        no_heatmaps: bool,
    },
    /// Paired per-image comparison of a cascade and an end-to-end network.
    Compare {
        #[arg(long)]
        cl: PathBuf,
        #[arg(long)]
        e2e: PathBuf,
    },
    /// Train and evaluate frozen-backbone detection heads.
    Detect {
        #[arg(long)]
        weights: PathBuf,
        /// Taps to attach heads to (defaults to the config's).
        #[arg(long, value_delimiter = ',')]
        taps: Option<Vec<usize>>,
        /// Head seeds per tap (defaults to the config's).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Pattern spectra of binarised Grad-CAM maps.
    Granulometry {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_delimiter = ',')]
        taps: Option<Vec<usize>>,
    },
}

/// Parses arguments and runs; never panics on bad input.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    data: Option<PathBuf>,
    jobs: usize,
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn corpus(&self) -> Result<Corpus> {
        let dir = self.data_dir();
        if !dir.join(exp::MANIFEST_FILE).is_file() {
            anyhow::bail!("no dataset at {}; run `layerloc generate` first", dir.display());
        }
        exp::load_corpus(&dir)
    }

    fn load_weights(&self, path: &Path) -> Result<(layerloc_core::network::NetworkSpec, ModelParams)> {
        let spec = exp::network_spec(&self.cfg)?;
        let params = load_network(path, &spec).with_context(|| format!("loading {}", path.display()))?;
        Ok((spec, params))
    }
}

fn context(common: &Common) -> Result<Ctx> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.display().to_string();
    }
    cfg.validate()?;
    if common.jobs == 0 {
        return Err(ConfigError::Invalid {
            key: "--jobs".into(),
            msg: "must be at least 1".into(),
        }
        .into());
    }
    Ok(Ctx {
        out: PathBuf::from(&cfg.out),
        cfg,
        data: common.data.clone(),
        jobs: common.jobs,
    })
}

pub fn execute(cli: &Cli) -> Result<()> {
    let ctx = context(&cli.common)?;
    match &cli.command {
        Command::Generate => cmd_generate(&ctx),
        Command::Train { scheme, k } => cmd_train(&ctx, (*scheme).into(), *k),
        Command::Explain {
            weights,
            methods,
            taps,
            no_heatmaps,
        } => {
            let methods = match methods {
                Some(ms) => ms
                    .iter()
                    .map(|m| {
                        Method::parse(m).ok_or_else(|| ConfigError::Invalid {
                            key: "--methods".into(),
                            msg: format!("unknown method `{m}`"),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                None => ctx.cfg.explain.methods(),
            };
            let taps = checked_taps(&ctx, taps.clone(), &ctx.cfg.explain.taps)?;
            cmd_explain(&ctx, weights, &methods, &taps, !no_heatmaps)
        }
        Command::Compare { cl, e2e } => cmd_compare(&ctx, cl, e2e),
        Command::Detect { weights, taps, seeds } => {
            let taps = checked_taps(&ctx, taps.clone(), &ctx.cfg.detect.taps)?;
            cmd_detect(&ctx, weights, &taps, seeds.unwrap_or(ctx.cfg.detect.seeds))
        }
        Command::Granulometry { weights, taps } => {
            let taps = checked_taps(&ctx, taps.clone(), &ctx.cfg.explain.taps)?;
            cmd_granulometry(&ctx, weights, &taps)
        }
    }
}

fn checked_taps(ctx: &Ctx, flag: Option<Vec<usize>>, default: &[usize]) -> Result<Vec<usize>> {
    let taps = flag.unwrap_or_else(|| default.to_vec());
    let n = ctx.cfg.tap_count();
    if let Some(t) = taps.iter().find(|&&t| t == 0 || t > n) {
        return Err(ConfigError::Invalid {
            key: "--taps".into(),
            msg: format!("tap {t} outside 1..={n}"),
        }
        .into());
    }
    Ok(taps)
}

fn cmd_generate(ctx: &Ctx) -> Result<()> {
    let corpus = exp::generate_corpus(&ctx.cfg)?;
    let dir = ctx.data_dir();
    exp::write_corpus(&corpus, &dir)?;
    let m = &corpus.manifest;
    let mut rows = Vec::new();
    for split in Split::ALL {
        for (c, name) in m.class_names.iter().enumerate() {
            let n = m.annotations.iter().filter(|a| a.split == split && a.label == c).count();
            rows.push(vec![split.name().into(), name.clone(), n.to_string()]);
        }
    }
    write_table(&dir.join("summary.csv"), "manifest_summary", &ctx.cfg, &rows)?;
    println!(
        "generated {} images ({} train, {} val, {} test) in {}",
        m.annotations.len(),
        m.split_ids(Split::Train).len(),
        m.split_ids(Split::Val).len(),
        m.split_ids(Split::Test).len(),
        dir.display()
    );
    Ok(())
}

pub fn weights_path(out: &Path, scheme: SchemeArg) -> PathBuf {
    out.join("weights").join(format!("{}.llw", scheme.name()))
}

fn cmd_train(ctx: &Ctx, scheme: SchemeArg, k: Option<usize>) -> Result<()> {
    let corpus = ctx.corpus()?;
    let spec = exp::network_spec(&ctx.cfg)?;
    if let Some(k) = k {
        if k == 0 || k > spec.tap_count() {
            return Err(ConfigError::Invalid {
                key: "--k".into(),
                msg: format!("must lie in 1..={}", spec.tap_count()),
            }
            .into());
        }
    }
    let (params, report) = exp::train_network(&ctx.cfg, &spec, &corpus, scheme, k)?;
    let path = weights_path(&ctx.out, scheme);
    save_network(&path, &spec, &params)?;

    let mut log = Vec::new();
    for st in &report.stages {
        let (kind, taps) = match &st.kind {
            StageKind::EndToEnd => ("end_to_end", String::new()),
            StageKind::Cascade(r) => ("cascade", format!("{}-{}", r.start, r.end - 1)),
            StageKind::Classifier => ("classifier", String::new()),
            StageKind::Probe(t) => ("probe", t.to_string()),
        };
        for e in &st.epochs {
            log.push(vec![
                scheme.name().into(),
                st.stage.to_string(),
                kind.into(),
                taps.clone(),
                e.epoch.to_string(),
                num(e.train_loss),
                num(e.train_accuracy),
                opt(e.val_loss.map(num)),
            ]);
        }
    }
    let reports = ctx.out.join("reports");
    write_table(&reports.join(format!("train_{}_log.csv", scheme.name())), "train_log", &ctx.cfg, &log)?;

    let train = corpus.subset(Split::Train).dataset()?;
    let test = corpus.subset(Split::Test);
    let mut summary = vec![vec![
        scheme.name().into(),
        "train_accuracy".into(),
        String::new(),
        num(layerloc_core::training::accuracy(&spec, &params, &train)?),
    ]];
    if !test.is_empty() {
        summary.push(vec![
            scheme.name().into(),
            "test_accuracy".into(),
            String::new(),
            num(layerloc_core::training::accuracy(&spec, &params, &test.dataset()?)?),
        ]);
    }
    for (tap, acc) in &report.stage_head_accuracy {
        summary.push(vec![scheme.name().into(), "stage_head_accuracy".into(), tap.to_string(), num(*acc)]);
    }
    write_table(
        &reports.join(format!("train_{}_summary.csv", scheme.name())),
        "train_summary",
        &ctx.cfg,
        &summary,
    )?;
    println!("trained {} network, weights at {}", scheme.name(), path.display());
    Ok(())
}

fn explain_rows(scheme: &str, records: &[ExplainRecord], heatmap_paths: &[String]) -> Vec<Vec<String>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r.image_id.to_string(),
                scheme.into(),
                r.method.name().into(),
                r.tap.to_string(),
                r.class.to_string(),
                num(r.iou),
                u8::from(r.iou > layerloc_core::metrics::LOCALISATION_THRESHOLD).to_string(),
                opt(r.overlap.map(|o| o.0)),
                opt(r.overlap.map(|o| num(o.1))),
                heatmap_paths.get(i).cloned().unwrap_or_default(),
            ]
        })
        .collect()
}

fn lacc_rows(scheme: &str, records: &[ExplainRecord]) -> Result<Vec<Vec<String>>> {
    Ok(exp::lacc_by_tap(records)?
        .into_iter()
        .map(|(m, t, n, lacc, mean)| {
            vec![scheme.into(), m.name().into(), t.to_string(), n.to_string(), num(lacc), num(mean)]
        })
        .collect())
}

fn explained(
    ctx: &Ctx,
    corpus: &Corpus,
    spec: &layerloc_core::network::NetworkSpec,
    params: &ModelParams,
    req: &ExplainRequest<'_>,
) -> Result<Vec<ExplainRecord>> {
    let probes = exp::train_probes(&ctx.cfg, spec, params, corpus)?;
    let subset = corpus.subset(Split::Test).take(ctx.cfg.explain.images);
    exp::explain_subset(&ctx.cfg, spec, params, &probes, &subset, req)
}

fn cmd_explain(ctx: &Ctx, weights: &Path, methods: &[Method], taps: &[usize], heatmaps: bool) -> Result<()> {
    let corpus = ctx.corpus()?;
    let (spec, params) = ctx.load_weights(weights)?;
    let scheme = SchemeArg::of(&params);
    let req = ExplainRequest {
        methods,
        taps,
        keep_maps: heatmaps,
        granulometry: None,
        jobs: ctx.jobs,
    };
    let records = explained(ctx, &corpus, &spec, &params, &req)?;
    let dir = ctx.out.join("explain").join(scheme);
    let mut paths = Vec::new();
    if heatmaps {
        for r in &records {
            let rel = format!("heatmaps/{}/tap{}/{:06}.pgm", r.method.name(), r.tap, r.image_id);
            write_heatmap(r.map.as_ref().expect("maps kept"), &dir.join(&rel))?;
            paths.push(rel);
        }
    }
    write_table(&dir.join("explain.csv"), "explain", &ctx.cfg, &explain_rows(scheme, &records, &paths))?;
    write_table(&dir.join("lacc.csv"), "lacc", &ctx.cfg, &lacc_rows(scheme, &records)?)?;
    println!("explained {} (image, tap, method) triples into {}", records.len(), dir.display());
    Ok(())
}

fn cmd_compare(ctx: &Ctx, cl: &Path, e2e: &Path) -> Result<()> {
    let corpus = ctx.corpus()?;
    let (spec, cl_params) = ctx.load_weights(cl)?;
    let (_, e2e_params) = ctx.load_weights(e2e)?;
    let methods = ctx.cfg.explain.methods();
    let req = ExplainRequest {
        methods: &methods,
        taps: &ctx.cfg.explain.taps,
        keep_maps: false,
        granulometry: None,
        jobs: ctx.jobs,
    };
    let a = explained(ctx, &corpus, &spec, &cl_params, &req)?;
    let b = explained(ctx, &corpus, &spec, &e2e_params, &req)?;
    let dir = ctx.out.join("compare");
    write_table(&dir.join("explain_cl.csv"), "explain", &ctx.cfg, &explain_rows("cl", &a, &[]))?;
    write_table(&dir.join("explain_e2e.csv"), "explain", &ctx.cfg, &explain_rows("e2e", &b, &[]))?;
    let mut lacc = lacc_rows("cl", &a)?;
    lacc.extend(lacc_rows("e2e", &b)?);
    write_table(&dir.join("lacc.csv"), "lacc", &ctx.cfg, &lacc)?;
    let rows: Vec<Vec<String>> = exp::paired_comparison(&a, &b)?
        .into_iter()
        .map(|p| {
            vec![
                p.method.name().into(),
                p.tap.to_string(),
                p.images.to_string(),
                p.cl_better.to_string(),
                num(p.fraction),
                num(p.cl_lacc),
                num(p.e2e_lacc),
                num(p.cl_mean_iou),
                num(p.e2e_mean_iou),
            ]
        })
        .collect();
    write_table(&dir.join("compare.csv"), "compare", &ctx.cfg, &rows)?;
    println!("compared {} (method, tap) pairs into {}", rows.len(), dir.display());
    Ok(())
}

fn cmd_detect(ctx: &Ctx, weights: &Path, taps: &[usize], seeds: usize) -> Result<()> {
    let corpus = ctx.corpus()?;
    let (spec, params) = ctx.load_weights(weights)?;
    let scheme = SchemeArg::of(&params);
    let dir = ctx.out.join("detect").join(scheme);
    let mut table = Vec::new();
    for &tap in taps {
        let mut per_metric: Vec<(&'static str, Vec<f64>)> = Vec::new();
        for i in 0..seeds {
            let hs = exp::head_seed(&ctx.cfg, i);
            let o = exp::detect_at_tap(&ctx.cfg, &spec, &params, &corpus, tap, hs)?;
            let tdir = dir.join(format!("tap{tap}"));
            write_atomic(&tdir.join(format!("head-seed{i}.llw")), &encode_head(&o.head, &spec, hs))?;
            let mut det_rows = Vec::new();
            for (id, im) in o.ids.iter().zip(&o.detections.images) {
                for d in &im.detections {
                    det_rows.push(vec![
                        id.to_string(),
                        d.class.to_string(),
                        num(d.score),
                        num(d.bbox.x),
                        num(d.bbox.y),
                        num(d.bbox.w),
                        num(d.bbox.h),
                    ]);
                }
            }
            write_table(&tdir.join(format!("detections-seed{i}.csv")), "detections", &ctx.cfg, &det_rows)?;
            let entries = o.metrics.entries();
            let mut rep: Vec<Vec<String>> = entries.iter().map(|(k, v)| vec![(*k).into(), num(*v)]).collect();
            rep.push(vec!["dropped_objects".into(), o.report.dropped.to_string()]);
            write_table(&tdir.join(format!("report-seed{i}.csv")), "detect_report", &ctx.cfg, &rep)?;
            for (k, v) in entries {
                match per_metric.iter_mut().find(|(name, _)| *name == k) {
                    Some((_, vs)) => vs.push(v),
                    None => per_metric.push((k, vec![v])),
                }
            }
        }
        for (name, values) in &per_metric {
            let (m, s) = mean_std(values);
            table.push(vec![
                scheme.into(),
                tap.to_string(),
                (*name).into(),
                values.len().to_string(),
                num(m),
                num(s),
                format_mean_std(values),
            ]);
        }
    }
    write_table(&dir.join("table.csv"), "detect_table", &ctx.cfg, &table)?;
    println!("detection heads for {} taps x {seeds} seeds in {}", taps.len(), dir.display());
    Ok(())
}

fn cmd_granulometry(ctx: &Ctx, weights: &Path, taps: &[usize]) -> Result<()> {
    let corpus = ctx.corpus()?;
    let (spec, params) = ctx.load_weights(weights)?;
    let scheme = SchemeArg::of(&params);
    let req = ExplainRequest {
        methods: &[Method::GradCam],
        taps,
        keep_maps: false,
        granulometry: Some(ctx.cfg.granulometry.max_size),
        jobs: ctx.jobs,
    };
    let records = explained(ctx, &corpus, &spec, &params, &req)?;
    let mut spectra = Vec::new();
    let mut images = Vec::new();
    for r in &records {
        let s = r.spectrum.as_ref().expect("spectrum requested");
        for (size, removed) in s.entries() {
            spectra.push(vec![
                scheme.into(),
                r.tap.to_string(),
                r.image_id.to_string(),
                size.to_string(),
                removed.to_string(),
            ]);
        }
        images.push(vec![
            scheme.into(),
            r.tap.to_string(),
            r.image_id.to_string(),
            s.total_area.to_string(),
            num(s.mean_size),
        ]);
    }
    let mut summary = Vec::new();
    for &tap in taps {
        let sizes: Vec<f64> = records
            .iter()
            .filter(|r| r.tap == tap)
            .map(|r| r.spectrum.as_ref().expect("spectrum").mean_size)
            .collect();
        let mean = if sizes.is_empty() { 0.0 } else { sizes.iter().sum::<f64>() / sizes.len() as f64 };
        summary.push(vec![scheme.into(), tap.to_string(), sizes.len().to_string(), num(mean)]);
    }
    let dir = ctx.out.join("granulometry").join(scheme);
    write_table(&dir.join("spectra.csv"), "granulometry_spectra", &ctx.cfg, &spectra)?;
    write_table(&dir.join("images.csv"), "granulometry_images", &ctx.cfg, &images)?;
    write_table(&dir.join("summary.csv"), "granulometry_summary", &ctx.cfg, &summary)?;
    println!("granulometry for {} taps in {}", taps.len(), dir.display());
    Ok(())
}
