//! On-disk formats: the raw complex-array format (text header + little-endian
//! f32 pair payload), network parameter checkpoints, and PNG magnitude export.

use crate::error::{Error, Result};
use crate::net::{NetArch, NetParams};
use crate::Cplx;
use ndarray::{ArrayD, IxDyn};
use sha2::Digest;
use std::io::{Read, Write};
use std::path::Path;

const ARRAY_MAGIC: &str = "raw-complex-array v1";
const CHECKPOINT_MAGIC: &str = "net-checkpoint v1";

fn digest_hex(bytes: &[u8]) -> String {
    let mut hasher = sha2::Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn header_path(base: &Path) -> std::path::PathBuf {
    base.with_extension("hdr")
}

fn payload_path(base: &Path) -> std::path::PathBuf {
    base.with_extension("raw")
}

/// Write a complex array as `<base>.hdr` (text) plus `<base>.raw`
/// (little-endian f32 real/imaginary pairs, row-major in axis order).
pub fn save_array(base: &Path, axes: &[&str], data: &ArrayD<Cplx>) -> Result<()> {
    if axes.len() != data.ndim() {
        return Err(Error::shape(format!(
            "{} axis names for a {}-d array",
            axes.len(),
            data.ndim()
        )));
    }
    let ordered = data.as_standard_layout();
    let mut payload = Vec::with_capacity(ordered.len() * 8);
    for v in ordered.iter() {
        payload.extend_from_slice(&(v.re as f32).to_le_bytes());
        payload.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    let digest = digest_hex(&payload);

    let mut header = String::new();
    header.push_str(ARRAY_MAGIC);
    header.push('\n');
    header.push_str(&format!("axes: {}\n", axes.join(",")));
    let shape: Vec<String> = data.shape().iter().map(|s| s.to_string()).collect();
    header.push_str(&format!("shape: {}\n", shape.join(" ")));
    header.push_str("dtype: complex64-f32pair\n");
    header.push_str("endian: little\n");
    header.push_str(&format!("digest: sha256:{digest}\n"));

    if let Some(parent) = base.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(header_path(base), header)?;
    std::fs::write(payload_path(base), payload)?;
    Ok(())
}

fn parse_header(path: &Path, text: &str) -> Result<(Vec<String>, Vec<usize>, String)> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != ARRAY_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("unknown magic {magic:?}"),
        });
    }
    let mut axes = None;
    let mut shape = None;
    let mut digest = None;
    for line in lines {
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "axes" => axes = Some(value.split(',').map(|s| s.trim().to_string()).collect()),
            "shape" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split_whitespace().map(|s| s.parse()).collect();
                shape = Some(parsed.map_err(|_| Error::Format {
                    path: path.display().to_string(),
                    reason: format!("bad shape {value:?}"),
                })?);
            }
            "digest" => {
                digest = value.strip_prefix("sha256:").map(|s| s.to_string());
            }
            "dtype" => {
                if value != "complex64-f32pair" {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        reason: format!("unsupported dtype {value:?}"),
                    });
                }
            }
            "endian" => {
                if value != "little" {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        reason: format!("unsupported endianness {value:?}"),
                    });
                }
            }
            _ => {}
        }
    }
    let axes = axes.ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        reason: "missing axes".into(),
    })?;
    let shape = shape.ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        reason: "missing shape".into(),
    })?;
    let digest = digest.ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        reason: "missing digest".into(),
    })?;
    Ok((axes, shape, digest))
}

/// Load an array saved by [`save_array`]; verifies the payload digest.
pub fn load_array(base: &Path) -> Result<(Vec<String>, ArrayD<Cplx>)> {
    let hdr_path = header_path(base);
    let text = std::fs::read_to_string(&hdr_path)?;
    let (axes, shape, digest) = parse_header(&hdr_path, &text)?;
    let payload = std::fs::read(payload_path(base))?;
    let expected_len: usize = shape.iter().product::<usize>() * 8;
    if payload.len() != expected_len {
        return Err(Error::Format {
            path: payload_path(base).display().to_string(),
            reason: format!("payload is {} bytes, expected {expected_len}", payload.len()),
        });
    }
    if digest_hex(&payload) != digest {
        return Err(Error::Format {
            path: payload_path(base).display().to_string(),
            reason: "payload digest mismatch".into(),
        });
    }
    let mut values = Vec::with_capacity(payload.len() / 8);
    for chunk in payload.chunks_exact(8) {
        let re = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        let im = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        values.push(Cplx::new(re as f64, im as f64));
    }
    let data = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| Error::Format {
        path: base.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok((axes, data))
}

/// Load an array and require a specific axis order.
pub fn load_array_expecting(base: &Path, axes: &[&str]) -> Result<ArrayD<Cplx>> {
    let (found, data) = load_array(base)?;
    if found.iter().map(String::as_str).ne(axes.iter().copied()) {
        return Err(Error::Format {
            path: base.display().to_string(),
            reason: format!("axes {found:?}, expected {axes:?}"),
        });
    }
    Ok(data)
}

/// Save a real array by embedding it as the real part.
pub fn save_real_array(base: &Path, axes: &[&str], data: &ArrayD<f64>) -> Result<()> {
    let complex = data.mapv(|v| Cplx::new(v, 0.0));
    save_array(base, axes, &complex)
}

/// Network checkpoint: text header plus little-endian f64 parameter payload.
pub fn save_checkpoint(path: &Path, params: &NetParams, step: u64) -> Result<()> {
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("in_channels: {}\n", params.arch.in_channels));
    header.push_str(&format!("hidden_channels: {}\n", params.arch.hidden_channels));
    header.push_str(&format!("residual_blocks: {}\n", params.arch.residual_blocks));
    header.push_str(&format!("seed: {}\n", params.seed));
    header.push_str(&format!("step: {step}\n"));
    header.push_str(&format!("params: {}\n", params.data.len()));
    header.push_str("---\n");

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    for v in &params.data {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(NetParams, u64)> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let marker = b"---\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: "missing header terminator".into(),
        })?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Format {
        path: path.display().to_string(),
        reason: "header is not utf-8".into(),
    })?;
    let payload = &bytes[split + marker.len()..];

    let mut fields = std::collections::HashMap::new();
    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("unknown magic {magic:?}"),
        });
    }
    for line in lines {
        if let Some((k, v)) = line.split_once(':') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |key: &str| -> Result<u64> {
        fields
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("missing or bad field {key:?}"),
            })
    };
    let arch = NetArch::new(
        get("in_channels")? as usize,
        get("hidden_channels")? as usize,
        get("residual_blocks")? as usize,
    );
    let seed = get("seed")?;
    let step = get("step")?;
    let count = get("params")? as usize;
    if payload.len() != count * 8 {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("payload {} bytes, expected {}", payload.len(), count * 8),
        });
    }
    if count != arch.param_count() {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "parameter count does not match architecture".into(),
        });
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((NetParams { data, arch, seed }, step))
}

/// Export a magnitude image as an 8-bit PNG with min-max windowing; the window
/// is recorded in a text sidecar.
pub fn save_png_magnitude(path: &Path, img: &ndarray::Array2<Cplx>) -> Result<()> {
    let (w, h) = img.dim();
    let mags = img.mapv(|v| v.norm());
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-30);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for ww in 0..w {
        for hh in 0..h {
            let v = ((mags[(ww, hh)] - lo) / span * 255.0).round().clamp(0.0, 255.0);
            buf.put_pixel(ww as u32, hh as u32, image::Luma([v as u8]));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    buf.save(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let meta = format!("window_min: {lo:e}\nwindow_max: {hi:e}\n");
    std::fs::write(path.with_extension("png.txt"), meta)?;
    Ok(())
}
