//! Dataset directories and field files.
//!
//! A dataset directory holds `meta.json`, `positions.csv` (header line
//! `j,x,y`), and one raw little-endian float64 intensity file
//! `frame_%05d.bin` per frame. Reconstructed fields use the same raw
//! encoding with interleaved `re, im` pairs, plus 8-bit PGM renderings
//! with phase mapped from [-pi, pi] onto [0, 255].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::field::{ComplexField, DiffractionFrame, RealField, ScanPosition};
use super::simulate::SimulatedDataset;
use super::PtychoError;

type Result<T> = std::result::Result<T, PtychoError>;

pub const META_FILE: &str = "meta.json";
pub const POSITIONS_FILE: &str = "positions.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub object_width: usize,
    pub object_height: usize,
    pub probe_width: usize,
    pub probe_height: usize,
    pub frames: usize,
    pub seed: u64,
    pub step: usize,
    /// Wavelength-free: everything is in detector pixel units.
    pub units: String,
}

pub fn frame_file_name(j: usize) -> String {
    format!("frame_{j:05}.bin")
}

/// Write a complete dataset directory, including the ground-truth fields
/// the generator knows.
pub fn write_dataset(dir: &Path, data: &SimulatedDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        schema_version: 1,
        object_width: data.object.width(),
        object_height: data.object.height(),
        probe_width: data.probe.width(),
        probe_height: data.probe.height(),
        frames: data.frames.len(),
        seed: data.spec.seed,
        step: data.spec.step,
        units: "pixel".to_string(),
    };
    fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;

    let mut csv = String::from("j,x,y\n");
    for p in &data.positions {
        csv.push_str(&format!("{},{},{}\n", p.j, p.x, p.y));
    }
    fs::write(dir.join(POSITIONS_FILE), csv)?;

    for frame in &data.frames {
        write_f64_le(&dir.join(frame_file_name(frame.j)), &frame.intensity.data)?;
    }
    write_complex_field(&dir.join("true_object.bin"), &data.object)?;
    write_complex_field(&dir.join("true_probe.bin"), &data.probe)?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    if !path.exists() {
        return Err(PtychoError::DataNotFound(dir.display().to_string()));
    }
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(path)?)?;
    Ok(meta)
}

pub fn load_positions(dir: &Path) -> Result<Vec<ScanPosition>> {
    let text = fs::read_to_string(dir.join(POSITIONS_FILE))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 {
            if line.trim() != "j,x,y" {
                return Err(PtychoError::InvalidData(format!(
                    "positions.csv: bad header {line:?}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let parse_err = || PtychoError::InvalidData(format!("positions.csv: bad line {line:?}"));
        let j: usize = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(parse_err)?;
        let x: i32 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(parse_err)?;
        let y: i32 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(parse_err)?;
        out.push(ScanPosition::new(j, x, y));
    }
    out.sort_by_key(|p| p.j);
    Ok(out)
}

pub fn load_frame(dir: &Path, j: usize, width: usize, height: usize) -> Result<DiffractionFrame> {
    let data = read_f64_le(&dir.join(frame_file_name(j)))?;
    if data.len() != width * height {
        return Err(PtychoError::InvalidData(format!(
            "frame {j}: expected {} samples, found {}",
            width * height,
            data.len()
        )));
    }
    DiffractionFrame::new(
        j,
        RealField {
            width,
            height,
            data,
        },
    )
}

/// Load the frames named by `positions` (typically one rank's block).
pub fn load_frames(
    dir: &Path,
    positions: &[ScanPosition],
    width: usize,
    height: usize,
) -> Result<Vec<DiffractionFrame>> {
    positions
        .iter()
        .map(|p| load_frame(dir, p.j, width, height))
        .collect()
}

pub fn write_f64_le(path: &Path, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_f64_le(path: &Path) -> Result<Vec<f64>> {
    let raw = fs::read(path)?;
    if raw.len() % 8 != 0 {
        return Err(PtychoError::InvalidData(format!(
            "{}: length {} not a multiple of 8",
            path.display(),
            raw.len()
        )));
    }
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_complex_field(path: &Path, field: &ComplexField) -> Result<()> {
    write_f64_le(path, &field.to_interleaved())
}

pub fn read_complex_field(path: &Path, width: usize, height: usize) -> Result<ComplexField> {
    let raw = read_f64_le(path)?;
    ComplexField::from_interleaved(width, height, &raw)
}

/// Binary PGM (P5), 8-bit.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Amplitude rendering scaled to the field's own maximum.
pub fn render_amplitude(field: &ComplexField) -> Vec<u8> {
    let amps: Vec<f64> = field.as_slice().iter().map(|z| z.norm()).collect();
    let max = amps.iter().cloned().fold(0.0f64, f64::max);
    amps.iter()
        .map(|a| {
            if max > 0.0 {
                (a / max * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Phase rendering: [-pi, pi] maps onto [0, 255].
pub fn render_phase(field: &ComplexField) -> Vec<u8> {
    let pi = std::f64::consts::PI;
    field
        .as_slice()
        .iter()
        .map(|z| (((z.arg() + pi) / (2.0 * pi)) * 255.0).round().min(255.0) as u8)
        .collect()
}

/// Write `<prefix>_amp.pgm` and `<prefix>_phase.pgm` for a field.
pub fn render_field(prefix: &Path, field: &ComplexField) -> Result<(PathBuf, PathBuf)> {
    let amp_path = with_suffix(prefix, "_amp.pgm");
    let phase_path = with_suffix(prefix, "_phase.pgm");
    write_pgm(
        &amp_path,
        field.width(),
        field.height(),
        &render_amplitude(field),
    )?;
    write_pgm(
        &phase_path,
        field.width(),
        field.height(),
        &render_phase(field),
    )?;
    Ok((amp_path, phase_path))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(suffix);
    prefix.with_file_name(name)
}
