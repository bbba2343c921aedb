use std::fs;
use std::path::Path;

use super::IoError;
use crate::autodiff::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, maxval 255) from an H×W×3 tensor in [0, 1].
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<(), IoError> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => {
            return Err(IoError::format(
                path,
                format!("image tensor has shape {s:?}, expected H×W×3"),
            ))
        }
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    fs::write(path, out).map_err(|e| IoError::io(path, e))
}

/// Writes an H×W map as a grey PPM after mapping `[lo, hi]` to `[0, 1]`.
pub fn write_gray_ppm(path: &Path, map: &Tensor, lo: f64, hi: f64) -> Result<(), IoError> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        s => {
            return Err(IoError::format(
                path,
                format!("map tensor has shape {s:?}, expected H×W"),
            ))
        }
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = map.data().iter().flat_map(|&v| [(v - lo) / span; 3]).collect();
    write_ppm(path, &Tensor::new(&[h, w, 3], data).expect("shape matches buffer"))
}

/// Reads a P6 PPM with maxval 255 into an H×W×3 tensor in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    let mut fields = Vec::new();
    let mut i = 0;
    let mut line = 1;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            if bytes[i] == b'\n' {
                line += 1;
            }
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line,
                msg: "truncated header".into(),
            });
        }
        fields.push((String::from_utf8_lossy(&bytes[start..i]).to_string(), line));
    }
    // exactly one whitespace byte separates the header from the raster
    i += 1;
    let (magic, l) = &fields[0];
    if magic != "P6" {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            line: *l,
            msg: format!("expected P6 magic, found `{magic}`"),
        });
    }
    let num = |k: usize| {
        let (s, l) = &fields[k];
        s.parse::<usize>().map_err(|_| IoError::Parse {
            path: path.to_path_buf(),
            line: *l,
            msg: format!("bad header number `{s}`"),
        })
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(IoError::format(
            path,
            format!("maxval {maxval} unsupported, expected 255"),
        ));
    }
    let body = bytes.get(i..).unwrap_or(&[]);
    if body.len() != w * h * 3 {
        return Err(IoError::format(
            path,
            format!("raster has {} bytes, expected {}", body.len(), w * h * 3),
        ));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[h, w, 3], data).map_err(|e| IoError::format(path, e.to_string()))
}
