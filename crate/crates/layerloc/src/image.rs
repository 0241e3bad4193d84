//! 8-bit binary PGM (grayscale) and PPM (colour) files.

use std::fs;
use std::io::Write;
use std::path::Path;

use layerloc_core::explain::AttributionMap;
use layerloc_core::{Shape4, Tensor4};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{0}: unsupported magic bytes (expected P5 or P6)")]
    Magic(String),
    #[error("{0}: truncated image data")]
    Truncated(String),
    #[error("{path}: bad header: {msg}")]
    Header { path: String, msg: String },
    #[error("cannot write a {0}-channel image")]
    Channels(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn quantise(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes item 0 of a 1- or 3-channel tensor.
pub fn encode(image: &Tensor4) -> Result<Vec<u8>, ImageError> {
    let s = image.shape();
    let magic = match s.c {
        1 => "P5",
        3 => "P6",
        c => return Err(ImageError::Channels(c)),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    let item = image.item(0);
    let plane = s.plane();
    for p in 0..plane {
        for c in 0..s.c {
            out.push(quantise(item[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn write_image(image: &Tensor4, path: &Path) -> Result<(), ImageError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(image)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor4, ImageError> {
    decode(&fs::read(path)?, &path.display().to_string())
}

/// Parses a binary PGM/PPM with maxval 255 into a `(1, c, h, w)` tensor in `[0, 1]`.
pub fn decode(bytes: &[u8], name: &str) -> Result<Tensor4, ImageError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(ImageError::Magic(name.to_owned())),
    };
    let header_err = |msg: &str| ImageError::Header {
        path: name.to_owned(),
        msg: msg.to_owned(),
    };
    // three whitespace-separated numbers follow, with optional comments
    let mut pos = 2;
    let mut nums = [0usize; 3];
    for n in &mut nums {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ImageError::Truncated(name.to_owned())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *n = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| header_err("expected a number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::Truncated(name.to_owned()));
    }
    pos += 1;
    let [w, h, maxval] = nums;
    if maxval != 255 {
        return Err(header_err("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(header_err("zero-sized image"));
    }
    let need = w * h * channels;
    let pixels = bytes.get(pos..pos + need).ok_or_else(|| ImageError::Truncated(name.to_owned()))?;
    let plane = w * h;
    let mut data = vec![0.0; need];
    for p in 0..plane {
        for c in 0..channels {
            data[c * plane + p] = pixels[p * channels + c] as f64 / 255.0;
        }
    }
    Ok(Tensor4::from_vec(Shape4::new(1, channels, h, w), data).expect("decoded shape"))
}

/// Writes a heatmap min-max normalised to 8 bits, plus a one-line sidecar
/// `<path>.txt` recording the normalisation.
pub fn write_heatmap(map: &AttributionMap, path: &Path) -> Result<(), ImageError> {
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled: Vec<f64> = map
        .values
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    let t = Tensor4::from_vec(Shape4::new(1, 1, map.h, map.w), scaled).expect("heatmap shape");
    write_image(&t, path)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    fs::write(
        side,
        format!(
            "method={} tap={} class={} min={lo:e} max={hi:e} scale=(v-min)/(max-min)\n",
            map.method.name(),
            map.tap,
            map.class
        ),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_round_trip() {
        let t = Tensor4::zeros(Shape4::new(1, 1, 4, 5));
        assert_eq!(decode(&encode(&t).unwrap(), "z").unwrap(), t);
    }

    #[test]
    fn ramp_round_trip_within_quantisation() {
        let data: Vec<f64> = (0..3 * 6 * 7).map(|i| i as f64 / 125.0).collect();
        let t = Tensor4::from_vec(Shape4::new(1, 3, 6, 7), data).unwrap();
        let back = decode(&encode(&t).unwrap(), "ramp").unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(decode(b"P2\n1 1\n255\n0", "x"), Err(ImageError::Magic(_))));
        let mut bytes = encode(&Tensor4::zeros(Shape4::new(1, 1, 3, 3))).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes, "x"), Err(ImageError::Truncated(_))));
        assert!(matches!(decode(b"P5\n3", "x"), Err(ImageError::Truncated(_))));
    }

    #[test]
    fn header_comments_are_skipped() {
        let t = decode(b"P5 # made by hand\n2 1\n255\n\x00\xff", "c").unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }
}
