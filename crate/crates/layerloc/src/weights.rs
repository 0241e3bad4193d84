//! Binary weights container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `LLWT` |
//! | 4 | format version (`u32`) |
//! | 8 | total file length including the checksum (`u64`) |
//! | 1 | kind: 0 network, 1 detection head |
//! | 4 + n | metadata length (`u32`) and UTF-8 `key=value` lines, sorted by key |
//! | 4 | block count (`u32`) |
//! | per block | value count (`u64`) then that many `f64` |
//! | 32 | SHA-256 of every preceding byte |
//!
//! Network metadata records the canonical spec string and its hash, the
//! training scheme (`e2e`, `cl` or `untrained`), the cascade split plan, the
//! seed and the frozen flags. Head metadata records its geometry and the
//! backbone it was trained on; its blocks are the conv parameters and the
//! per-channel feature shift and scale.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use layerloc_core::detect::DetectionHead;
use layerloc_core::network::{Layer, ModelParams, NetworkSpec, Provenance, Scheme};
use layerloc_core::training::SplitPlan;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const WEIGHTS_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LLWT";
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("not a weights file (bad magic bytes)")]
    Magic,
    #[error("unsupported weights version {0} (expected {WEIGHTS_VERSION})")]
    Version(u32),
    #[error("weights file truncated: {0}")]
    Truncated(String),
    #[error("weights checksum mismatch; the file is corrupt")]
    Checksum,
    #[error("weights do not match the network: {0}")]
    ShapeMismatch(String),
    #[error("malformed weights metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Network = 0,
    DetectionHead = 1,
}

/// Decoded container before interpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub meta: BTreeMap<String, String>,
    pub blocks: Vec<Vec<f64>>,
}

/// Canonical one-line description of a network; equal strings mean
/// interchangeable parameter layouts.
pub fn spec_key(spec: &NetworkSpec) -> String {
    let s = spec.input_shape();
    let layers: Vec<String> = spec
        .layers()
        .iter()
        .map(|l| match *l {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => format!("conv{in_channels}-{out_channels}k{kernel}s{stride}p{pad}"),
            Layer::Relu => "relu".into(),
            Layer::MaxPool { window, stride } => format!("maxpool{window}s{stride}"),
            Layer::Flatten => "flatten".into(),
            Layer::Dense { inputs, outputs } => format!("dense{inputs}-{outputs}"),
        })
        .collect();
    format!("{}x{}x{}/{}/{}", s.c, s.h, s.w, layers.join(","), spec.classes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn spec_hash(spec: &NetworkSpec) -> String {
    sha256_hex(spec_key(spec).as_bytes())[..16].to_owned()
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let total = (out.len() + CHECKSUM_LEN) as u64;
        out[8..16].copy_from_slice(&total.to_le_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WeightsError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(if bytes.len() < 4 && MAGIC.starts_with(bytes) {
                WeightsError::Truncated("file shorter than the header".into())
            } else {
                WeightsError::Magic
            });
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(WeightsError::Version(version));
        }
        let total = r.u64()? as usize;
        if bytes.len() < total {
            return Err(WeightsError::Truncated(format!("{} of {total} bytes present", bytes.len())));
        }
        if bytes.len() > total || total < 16 + CHECKSUM_LEN {
            return Err(WeightsError::Checksum);
        }
        let body = &bytes[..total - CHECKSUM_LEN];
        if Sha256::digest(body).as_slice() != &bytes[total - CHECKSUM_LEN..] {
            return Err(WeightsError::Checksum);
        }
        let mut r = Reader { bytes: body, pos: 16 };
        let kind = match r.take(1)?[0] {
            0 => Kind::Network,
            1 => Kind::DetectionHead,
            k => return Err(WeightsError::Metadata(format!("unknown kind {k}"))),
        };
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| WeightsError::Metadata("metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| WeightsError::Metadata(format!("line `{line}` is not key=value")))?;
            meta.insert(k.to_owned(), v.to_owned());
        }
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks.min(1024));
        for _ in 0..n_blocks {
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| WeightsError::Truncated("block length overflows".into()))?)?;
            blocks.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
        }
        if r.pos != body.len() {
            return Err(WeightsError::Metadata("trailing bytes after the last block".into()));
        }
        Ok(Self { kind, meta, blocks })
    }

    fn get(&self, key: &str) -> Result<&str, WeightsError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| WeightsError::Metadata(format!("missing `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, WeightsError> {
        let v = self.get(key)?;
        v.parse().map_err(|_| WeightsError::Metadata(format!("`{key}` has bad value `{v}`")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| WeightsError::Truncated(format!("needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WeightsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn plan_text(plan: &SplitPlan) -> String {
    plan.parts()
        .iter()
        .map(|p| format!("{}-{}", p.start, p.end - 1))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_plan(text: &str, tap_count: usize) -> Result<SplitPlan, WeightsError> {
    let bad = || WeightsError::Metadata(format!("bad split plan `{text}`"));
    let parts = text
        .split(',')
        .map(|p| {
            let (a, b) = p.split_once('-').ok_or_else(bad)?;
            let a: usize = a.parse().map_err(|_| bad())?;
            let b: usize = b.parse().map_err(|_| bad())?;
            Ok(a..b + 1)
        })
        .collect::<Result<Vec<_>, WeightsError>>()?;
    SplitPlan::from_parts(tap_count, parts).map_err(|e| WeightsError::Metadata(e.to_string()))
}

pub fn scheme_name(scheme: &Scheme) -> &'static str {
    match scheme {
        Scheme::Untrained => "untrained",
        Scheme::EndToEnd => "e2e",
        Scheme::Cascade(_) => "cl",
    }
}

pub fn network_container(spec: &NetworkSpec, params: &ModelParams) -> Container {
    let mut meta = BTreeMap::new();
    meta.insert("spec".into(), spec_key(spec));
    meta.insert("spec_hash".into(), spec_hash(spec));
    meta.insert("scheme".into(), scheme_name(&params.provenance.scheme).into());
    if let Scheme::Cascade(plan) = &params.provenance.scheme {
        meta.insert("k".into(), plan.len().to_string());
        meta.insert("plan".into(), plan_text(plan));
    }
    meta.insert("seed".into(), params.provenance.seed.to_string());
    meta.insert(
        "frozen".into(),
        params.frozen.iter().map(|&f| if f { '1' } else { '0' }).collect(),
    );
    Container {
        kind: Kind::Network,
        meta,
        blocks: params.blocks.clone(),
    }
}

pub fn encode_network(spec: &NetworkSpec, params: &ModelParams) -> Vec<u8> {
    network_container(spec, params).encode()
}

pub fn decode_network(bytes: &[u8], spec: &NetworkSpec) -> Result<ModelParams, WeightsError> {
    let c = Container::decode(bytes)?;
    if c.kind != Kind::Network {
        return Err(WeightsError::ShapeMismatch("file holds a detection head, not a network".into()));
    }
    if c.get("spec_hash")? != spec_hash(spec) {
        return Err(WeightsError::ShapeMismatch(format!(
            "file was saved for `{}`, expected `{}`",
            c.get("spec")?,
            spec_key(spec)
        )));
    }
    let scheme = match c.get("scheme")? {
        "untrained" => Scheme::Untrained,
        "e2e" => Scheme::EndToEnd,
        "cl" => Scheme::Cascade(parse_plan(c.get("plan")?, spec.tap_count())?),
        other => return Err(WeightsError::Metadata(format!("unknown scheme `{other}`"))),
    };
    let frozen: Vec<bool> = c.get("frozen")?.chars().map(|ch| ch == '1').collect();
    let params = ModelParams {
        blocks: c.blocks.clone(),
        frozen,
        provenance: Provenance {
            scheme,
            seed: c.parse("seed")?,
        },
    };
    params
        .check_against(spec)
        .map_err(|e| WeightsError::ShapeMismatch(e.to_string()))?;
    if params.frozen.len() != params.blocks.len() {
        return Err(WeightsError::ShapeMismatch("frozen flags do not match the layer count".into()));
    }
    Ok(params)
}

pub fn save_network(path: &Path, spec: &NetworkSpec, params: &ModelParams) -> Result<(), WeightsError> {
    write_atomic(path, &encode_network(spec, params))
}

pub fn load_network(path: &Path, spec: &NetworkSpec) -> Result<ModelParams, WeightsError> {
    decode_network(&fs::read(path)?, spec)
}

pub fn encode_head(head: &DetectionHead, backbone: &NetworkSpec, seed: u64) -> Vec<u8> {
    let mut meta = BTreeMap::new();
    meta.insert("backbone_spec_hash".into(), spec_hash(backbone));
    for (k, v) in [
        ("tap", head.tap),
        ("grid", head.grid),
        ("boxes", head.boxes),
        ("classes", head.classes),
        ("channels", head.channels),
    ] {
        meta.insert(k.into(), v.to_string());
    }
    meta.insert("seed".into(), seed.to_string());
    Container {
        kind: Kind::DetectionHead,
        meta,
        blocks: vec![head.params.clone(), head.shift.clone(), head.scale.clone()],
    }
    .encode()
}

pub fn decode_head(bytes: &[u8], backbone: &NetworkSpec) -> Result<DetectionHead, WeightsError> {
    let c = Container::decode(bytes)?;
    if c.kind != Kind::DetectionHead {
        return Err(WeightsError::ShapeMismatch("file holds a network, not a detection head".into()));
    }
    if c.get("backbone_spec_hash")? != spec_hash(backbone) {
        return Err(WeightsError::ShapeMismatch("head was trained on a different backbone".into()));
    }
    let [params, shift, scale]: [Vec<f64>; 3] = c
        .blocks
        .clone()
        .try_into()
        .map_err(|b: Vec<Vec<f64>>| WeightsError::ShapeMismatch(format!("head holds {} blocks, expected 3", b.len())))?;
    let head = DetectionHead {
        tap: c.parse("tap")?,
        grid: c.parse("grid")?,
        boxes: c.parse("boxes")?,
        classes: c.parse("classes")?,
        channels: c.parse("channels")?,
        params,
        shift,
        scale,
    };
    if head.params.len() != head.layer().param_count() {
        return Err(WeightsError::ShapeMismatch(format!(
            "head parameters hold {} values, expected {}",
            head.params.len(),
            head.layer().param_count()
        )));
    }
    if head.shift.len() != head.channels || head.scale.len() != head.channels {
        return Err(WeightsError::ShapeMismatch("head standardisation does not match its channels".into()));
    }
    Ok(head)
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), WeightsError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use layerloc_core::network::build_six_layer_net;
    use layerloc_core::training::make_split_plan;

    fn net() -> (NetworkSpec, ModelParams) {
        let spec = build_six_layer_net((1, 16, 16), 3, &[2, 2, 3, 3, 4, 4]).unwrap();
        let mut params = ModelParams::init(&spec, 5);
        params.provenance.scheme = Scheme::Cascade(make_split_plan(6, 4).unwrap());
        params.frozen[0] = true;
        (spec, params)
    }

    #[test]
    fn round_trip_is_exact() {
        let (spec, params) = net();
        let bytes = encode_network(&spec, &params);
        assert_eq!(decode_network(&bytes, &spec).unwrap(), params);
        assert_eq!(encode_network(&spec, &decode_network(&bytes, &spec).unwrap()), bytes);
    }

    #[test]
    fn distinct_failure_modes() {
        let (spec, params) = net();
        let bytes = encode_network(&spec, &params);
        assert!(matches!(decode_network(&bytes[..bytes.len() - 5], &spec), Err(WeightsError::Truncated(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_network(&flipped, &spec), Err(WeightsError::Checksum)));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(decode_network(&version, &spec), Err(WeightsError::Version(9))));
        assert!(matches!(decode_network(b"P5 nope", &spec), Err(WeightsError::Magic)));
        let other = build_six_layer_net((1, 16, 16), 3, &[2, 2, 3, 3, 4, 5]).unwrap();
        assert!(matches!(decode_network(&bytes, &other), Err(WeightsError::ShapeMismatch(_))));
    }
}
