//! Dataset manifest: a line-oriented, versioned text file.
//!
//! ```text
//! layerloc-manifest 1
//! classes disk square triangle
//! seed 7
//! generator edge=32 channels=1 size_min=8 size_max=16 intensity_min=0.6 intensity_max=1 noise=0.05 distractors=2
//! image id=0 split=train label=2 box=3,4,10,12 path=images/train/000000.pgm
//! ```
//!
//! `box` is `x,y,w,h` in pixels (top-left corner, inclusive extent). Blank
//! lines and lines starting with `#` are ignored. Image lines appear in id order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use layerloc_core::metrics::GtBox;
use layerloc_core::Rng;
use thiserror::Error;

use crate::data::{ShapeKind, ShapeSpec};

pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &str = "layerloc-manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub id: usize,
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub bbox: GtBox,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub generator: ShapeSpec,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("image {id}: {msg}")]
    Invalid { id: usize, msg: String },
    #[error("image {id}: missing file {path}")]
    MissingImage { id: usize, path: String },
    #[error("unsupported manifest version {0} (expected {MANIFEST_VERSION})")]
    Version(u32),
    #[error("{0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DatasetManifest {
    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        self.annotations.iter().filter(|a| a.split == split).map(|a| a.id).collect()
    }

    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {}", self.version);
        let _ = writeln!(out, "classes {}", self.class_names.join(" "));
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(
            out,
            "generator edge={} channels={} size_min={} size_max={} intensity_min={} intensity_max={} noise={} distractors={}",
            g.edge, g.channels, g.size_min, g.size_max, g.intensity_min, g.intensity_max, g.noise, g.distractors
        );
        for a in &self.annotations {
            let b = a.bbox;
            let _ = writeln!(
                out,
                "image id={} split={} label={} box={},{},{},{} path={}",
                a.id,
                a.split.name(),
                a.label,
                b.x,
                b.y,
                b.w,
                b.h,
                a.path
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut version = None;
        let mut classes = None;
        let mut seed = None;
        let mut generator = None;
        let mut annotations = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| ManifestError::Parse { line, msg };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (head, rest) = trimmed.split_once(' ').unwrap_or((trimmed, ""));
            if version.is_none() {
                if head != MAGIC {
                    return Err(err(format!("expected `{MAGIC} <version>` header")));
                }
                let v: u32 = rest.trim().parse().map_err(|_| err(format!("bad version `{rest}`")))?;
                if v != MANIFEST_VERSION {
                    return Err(ManifestError::Version(v));
                }
                version = Some(v);
                continue;
            }
            match head {
                "classes" => classes = Some(rest.split_whitespace().map(str::to_owned).collect::<Vec<_>>()),
                "seed" => seed = Some(rest.trim().parse::<u64>().map_err(|_| err(format!("bad seed `{rest}`")))?),
                "generator" => generator = Some(parse_generator(rest).map_err(err)?),
                "image" => annotations.push(parse_image(rest).map_err(err)?),
                other => return Err(err(format!("unknown record `{other}`"))),
            }
        }
        let missing = |what: &str| ManifestError::Parse {
            line: text.lines().count(),
            msg: format!("missing `{what}` record"),
        };
        let m = Self {
            version: version.ok_or_else(|| missing(MAGIC))?,
            class_names: classes.ok_or_else(|| missing("classes"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            generator: generator.ok_or_else(|| missing("generator"))?,
            annotations,
        };
        m.validate()?;
        Ok(m)
    }

    /// Structural checks: ids in order, labels known, boxes inside the image.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let edge = self.generator.edge;
        for (k, a) in self.annotations.iter().enumerate() {
            let invalid = |msg: String| ManifestError::Invalid { id: a.id, msg };
            if a.id != k {
                return Err(invalid(format!("expected id {k}; image ids must be 0, 1, 2, ...")));
            }
            if a.label >= self.class_names.len() {
                return Err(invalid(format!("label {} but only {} classes", a.label, self.class_names.len())));
            }
            if a.bbox.label != a.label {
                return Err(invalid("box label disagrees with image label".into()));
            }
            if a.bbox.check_in(edge, edge).is_err() {
                return Err(invalid(format!("box {:?} is outside the {edge}x{edge} image", a.bbox)));
            }
            if a.path.is_empty() || a.path.contains(char::is_whitespace) {
                return Err(invalid(format!("bad path `{}`", a.path)));
            }
        }
        Ok(())
    }

    /// Checks that every referenced image exists below `root`.
    pub fn validate_files(&self, root: &Path) -> Result<(), ManifestError> {
        for a in &self.annotations {
            if !root.join(&a.path).is_file() {
                return Err(ManifestError::MissingImage {
                    id: a.id,
                    path: a.path.clone(),
                });
            }
        }
        Ok(())
    }
}

fn fields(rest: &str) -> Result<BTreeMap<&str, &str>, String> {
    rest.split_whitespace()
        .map(|kv| kv.split_once('=').ok_or_else(|| format!("field `{kv}` is not key=value")))
        .collect()
}

fn take<'a, T: std::str::FromStr>(f: &BTreeMap<&'a str, &'a str>, key: &str) -> Result<T, String> {
    let v = f.get(key).ok_or_else(|| format!("missing field `{key}`"))?;
    v.parse().map_err(|_| format!("field `{key}`: cannot parse `{v}`"))
}

fn check_keys(f: &BTreeMap<&str, &str>, allowed: &[&str]) -> Result<(), String> {
    match f.keys().find(|k| !allowed.contains(k)) {
        Some(k) => Err(format!("unknown field `{k}`")),
        None => Ok(()),
    }
}

fn parse_generator(rest: &str) -> Result<ShapeSpec, String> {
    let f = fields(rest)?;
    check_keys(
        &f,
        &["edge", "channels", "size_min", "size_max", "intensity_min", "intensity_max", "noise", "distractors"],
    )?;
    let spec = ShapeSpec {
        edge: take(&f, "edge")?,
        channels: take(&f, "channels")?,
        size_min: take(&f, "size_min")?,
        size_max: take(&f, "size_max")?,
        intensity_min: take(&f, "intensity_min")?,
        intensity_max: take(&f, "intensity_max")?,
        noise: take(&f, "noise")?,
        distractors: take(&f, "distractors")?,
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn parse_image(rest: &str) -> Result<Annotation, String> {
    let f = fields(rest)?;
    check_keys(&f, &["id", "split", "label", "box", "path"])?;
    let split = f.get("split").and_then(|s| Split::parse(s)).ok_or("field `split`: expected train, val or test")?;
    let label: usize = take(&f, "label")?;
    let raw_box = f.get("box").ok_or("missing field `box`")?;
    let nums: Vec<usize> = raw_box
        .split(',')
        .map(|v| v.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("field `box`: cannot parse `{raw_box}`"))?;
    let [x, y, w, h] = nums[..] else {
        return Err(format!("field `box`: expected x,y,w,h, got `{raw_box}`"));
    };
    Ok(Annotation {
        id: take(&f, "id")?,
        path: take(&f, "path")?,
        label,
        bbox: GtBox { x, y, w, h, label },
        split,
    })
}

pub fn image_path(split: Split, id: usize, channels: usize) -> String {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    format!("images/{}/{id:06}.{ext}", split.name())
}

pub fn class_names(count: usize) -> Vec<String> {
    ShapeKind::ALL[..count].iter().map(|k| k.name().to_owned()).collect()
}

/// Stratified seeded split: each class is shuffled and cut into contiguous
/// train/val/test runs sized by rounding the fractions. Paths are rewritten
/// to `images/<split>/<id>.<ext>`.
pub fn split_dataset(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest, ManifestError> {
    if manifest.annotations.is_empty() {
        return Err(ManifestError::Split("cannot split an empty manifest".into()));
    }
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(ManifestError::Split(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut out = manifest.clone();
    let mut rng = Rng::new(seed);
    for class in 0..manifest.class_names.len() {
        let mut ids: Vec<usize> = manifest.annotations.iter().filter(|a| a.label == class).map(|a| a.id).collect();
        rng.shuffle(&mut ids);
        let n = ids.len() as f64;
        let n_train = (fractions[0] * n).round() as usize;
        let n_val = ((fractions[1] * n).round() as usize).min(ids.len() - n_train);
        for (k, id) in ids.into_iter().enumerate() {
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            let a = &mut out.annotations[id];
            a.split = split;
            a.path = image_path(split, id, manifest.generator.channels);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetManifest {
        DatasetManifest {
            version: MANIFEST_VERSION,
            class_names: class_names(2),
            seed: 3,
            generator: ShapeSpec::default(),
            annotations: (0..4)
                .map(|id| Annotation {
                    id,
                    path: image_path(Split::Train, id, 1),
                    label: id % 2,
                    bbox: GtBox {
                        x: id,
                        y: 2,
                        w: 5,
                        h: 6,
                        label: id % 2,
                    },
                    split: Split::Train,
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip() {
        let m = tiny();
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn out_of_bounds_box_names_image() {
        let mut m = tiny();
        m.annotations[2].bbox.x = 30;
        let err = DatasetManifest::parse(&m.to_text()).unwrap_err();
        assert!(matches!(err, ManifestError::Invalid { id: 2, .. }), "{err}");
    }

    #[test]
    fn diagnostics_name_lines_and_fields() {
        let text = tiny().to_text().replace("label=1 box=1,2,5,6", "label=1 box=1,2,5");
        match DatasetManifest::parse(&text).unwrap_err() {
            ManifestError::Parse { line, msg } => {
                assert_eq!(line, 6);
                assert!(msg.contains("box"), "{msg}");
            }
            e => panic!("{e}"),
        }
        let text = tiny().to_text().replace("noise=", "nois=");
        assert!(DatasetManifest::parse(&text).unwrap_err().to_string().contains("line 4"));
        let text = tiny().to_text().replace("layerloc-manifest 1", "layerloc-manifest 9");
        assert!(matches!(DatasetManifest::parse(&text), Err(ManifestError::Version(9))));
    }

    #[test]
    fn split_fractions() {
        let m = tiny();
        let all = split_dataset(&m, [1.0, 0.0, 0.0], 1).unwrap();
        assert!(all.annotations.iter().all(|a| a.split == Split::Train));
        assert_eq!(split_dataset(&m, [0.5, 0.25, 0.25], 4).unwrap(), split_dataset(&m, [0.5, 0.25, 0.25], 4).unwrap());
        assert!(split_dataset(&m, [0.5, 0.6, 0.0], 4).is_err());
        let empty = DatasetManifest {
            annotations: vec![],
            ..m
        };
        assert!(split_dataset(&empty, [1.0, 0.0, 0.0], 4).is_err());
    }
}
