//! Label-map file formats: 16-bit binary PGM (`P5`, maxval 65535, samples
//! big-endian) for raw labels, and palette-colourised PNG for viewing.
//! Ground-truth maps may also be `int32` NPY arrays of shape `[H, W]`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::ExportError;
use crate::npy;
use crate::segmenter::LabelMap;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.to_owned(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> ExportError {
    ExportError::Format {
        path: path.to_owned(),
        detail: detail.into(),
    }
}

pub fn encode_pgm16(map: &LabelMap) -> Result<Vec<u8>, ExportError> {
    let header = format!("P5\n{} {}\n65535\n", map.width, map.height);
    let mut out = Vec::with_capacity(header.len() + map.labels.len() * 2);
    out.extend_from_slice(header.as_bytes());
    for &l in &map.labels {
        let v = u16::try_from(l).map_err(|_| format_err(Path::new("<pgm>"), format!("label {l} exceeds 65535")))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm16(path: &Path, map: &LabelMap) -> Result<(), ExportError> {
    let bytes = encode_pgm16(map).map_err(|e| match e {
        ExportError::Format { detail, .. } => format_err(path, detail),
        other => other,
    })?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Parses a binary PGM with maxval up to 65535 (8-bit samples when maxval
/// is below 256).
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<LabelMap, ExportError> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err(path, "non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(format_err(path, format!("expected P5 magic, found {}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad header field '{s}'")))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("maxval {maxval} out of range")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format_err(path, "truncated raster"))?;
    let labels = if wide {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    } else {
        raster.iter().map(|&b| b as u32).collect()
    };
    Ok(LabelMap { height, width, labels })
}

pub fn read_pgm(path: &Path) -> Result<LabelMap, ExportError> {
    decode_pgm(&fs::read(path).map_err(io_err(path))?, path)
}

/// Reads a label map from `.pgm` or an `int32` `[H, W]` `.npy`.
pub fn read_label_map(path: &Path) -> Result<LabelMap, ExportError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("npy") => {
            let (shape, data) = npy::read_array(path)
                .and_then(|a| a.into_i32())
                .map_err(|e| format_err(path, e.to_string()))?;
            let [h, w] = shape[..] else {
                return Err(format_err(path, format!("expected a 2-d label array, got {shape:?}")));
            };
            let labels = data
                .into_iter()
                .map(|v| u32::try_from(v).map_err(|_| format_err(path, format!("negative label {v}"))))
                .collect::<Result<_, _>>()?;
            Ok(LabelMap {
                height: h,
                width: w,
                labels,
            })
        }
        _ => read_pgm(path),
    }
}

/// `[r, g, b]` per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette(pub Vec<[u8; 3]>);

impl Palette {
    pub fn load(path: &Path) -> Result<Self, ExportError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let colors: Vec<[u8; 3]> =
            serde_json::from_str(&text).map_err(|e| format_err(path, format!("palette: {e}")))?;
        if colors.is_empty() {
            return Err(format_err(path, "palette is empty"));
        }
        Ok(Self(colors))
    }

    /// Colour for a label; labels past the end wrap around.
    pub fn color(&self, label: u32) -> [u8; 3] {
        self.0[label as usize % self.0.len()]
    }
}

pub fn write_color_png(path: &Path, map: &LabelMap, palette: &Palette) -> Result<(), ExportError> {
    let mut img = image::RgbImage::new(map.width as u32, map.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = image::Rgb(palette.color(map.labels[i]));
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// `<dir>/<stem>.<ext>`
pub fn output_path(dir: &Path, stem: &str, ext: &str) -> PathBuf {
    dir.join(format!("{stem}.{ext}"))
}
