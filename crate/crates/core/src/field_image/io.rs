//! Binary image format plus CSV and PGM exports.
//!
//! Layout (little endian): magic `FEAN`, `u32` version (1), `u8` kind,
//! `u32` N, `u32` C, then `N * N * C` `f64` values in row-major order.
//! Kind 0 marks a phase image, in which case N counts elements, not nodes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FieldImage, PhaseImage, PhysicsKind};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FEAN";
pub const FORMAT_VERSION: u32 = 1;
const PHASE_CODE: u8 = 0;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4;

/// Either kind of image the binary format can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageFile {
    Field(FieldImage),
    Phase(PhaseImage),
}

fn write_header(w: &mut impl Write, kind: u8, n: usize, c: usize) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(c as u32).to_le_bytes())?;
    Ok(())
}

fn write_payload(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_image(w: &mut impl Write, img: &FieldImage) -> Result<()> {
    write_header(w, img.kind().code(), img.n(), img.channels())?;
    write_payload(w, img.data())
}

pub fn write_phase(w: &mut impl Write, h: &PhaseImage) -> Result<()> {
    write_header(w, PHASE_CODE, h.elements(), 1)?;
    write_payload(w, h.data())
}

fn read_any(r: &mut impl Read) -> Result<ImageFile> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| Error::Parse(format!("truncated header: {e}")))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Parse("bad magic, not a FEAN image".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported format version {version}")));
    }
    let code = header[8];
    let n = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(header[13..17].try_into().unwrap()) as usize;

    let expected_c = if code == PHASE_CODE {
        1
    } else {
        PhysicsKind::from_code(code)?.channels()
    };
    if c != expected_c {
        return Err(Error::Validation(format!(
            "header claims {c} channels, kind tag {code} requires {expected_c}"
        )));
    }
    let count = n
        .checked_mul(n)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Parse("image dimensions overflow".into()))?;

    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(Error::Parse(format!(
            "payload holds {} bytes, header implies {}",
            bytes.len(),
            count * 8
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("payload contains non-finite values".into()));
    }
    if code == PHASE_CODE {
        Ok(ImageFile::Phase(PhaseImage::from_vec(n, data)?))
    } else {
        Ok(ImageFile::Field(FieldImage::from_vec(n, PhysicsKind::from_code(code)?, data)?))
    }
}

pub fn read_image(r: &mut impl Read) -> Result<FieldImage> {
    match read_any(r)? {
        ImageFile::Field(img) => Ok(img),
        ImageFile::Phase(_) => Err(Error::Validation("expected a field image, found a phase image".into())),
    }
}

pub fn read_phase(r: &mut impl Read) -> Result<PhaseImage> {
    match read_any(r)? {
        ImageFile::Phase(h) => Ok(h),
        ImageFile::Field(_) => Err(Error::Validation("expected a phase image, found a field image".into())),
    }
}

pub fn save_image(img: &FieldImage, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_image(&mut w, img)?;
    w.flush()?;
    Ok(())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<FieldImage> {
    read_image(&mut BufReader::new(File::open(path)?))
}

pub fn save_phase(h: &PhaseImage, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_phase(&mut w, h)?;
    w.flush()?;
    Ok(())
}

pub fn load_phase(path: impl AsRef<Path>) -> Result<PhaseImage> {
    read_phase(&mut BufReader::new(File::open(path)?))
}

impl ImageFile {
    pub fn load(path: impl AsRef<Path>) -> Result<ImageFile> {
        read_any(&mut BufReader::new(File::open(path)?))
    }
}

/// One row per node: `i,j,<channel values>`.
pub fn write_csv(w: &mut impl Write, img: &FieldImage) -> Result<()> {
    let labels: Vec<String> = img.labels().iter().map(|l| l.to_string()).collect();
    writeln!(w, "i,j,{}", labels.join(","))?;
    for i in 0..img.n() {
        for j in 0..img.n() {
            write!(w, "{i},{j}")?;
            for c in 0..img.channels() {
                write!(w, ",{:e}", img.get(i, j, c))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Binary 8-bit PGM of one `side x side` plane, min-max normalized.
pub fn write_pgm(w: &mut impl Write, side: usize, plane: &[f64]) -> Result<()> {
    if plane.len() != side * side {
        return Err(Error::Shape(format!(
            "plane has {} values, expected {}",
            plane.len(),
            side * side
        )));
    }
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    write!(w, "P5\n{side} {side}\n255\n")?;
    let pixels: Vec<u8> = plane
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    w.write_all(&pixels)?;
    Ok(())
}
