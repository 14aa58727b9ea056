//! File formats.
//!
//! * `PNPCUBE1`: magic, `u32` bands, height, width (LE), then `f32` samples
//!   band after band, row-major inside a band.
//! * `PNPGMM1`: magic, `u32` K, `u32` n_p, `f64` alphas, `f64` covariances
//!   (row-major), `u64` N, `f64` beta `[K][N]`. Bit-exact round trip.
//! * PSF text: `PSF h w` followed by `h·w` reals, row-major.
//! * Matrix text: `MATRIX rows cols` followed by the entries, row-major.
//! * Binary PGM (`P5`), 8 or 16 bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::admm::SolveReport;
use crate::error::{Error, Result};
use crate::geometry::{Cube, ImageGeometry};
use crate::gmm::{GmmModel, PatchWeights};

pub const CUBE_MAGIC: &[u8; 8] = b"PNPCUBE1";
pub const GMM_MAGIC: &[u8; 7] = b"PNPGMM1";

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return fmt_err(format!("truncated input at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return fmt_err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub fn encode_cube(cube: &Cube) -> Vec<u8> {
    let g = cube.geometry;
    let mut out = Vec::with_capacity(20 + 4 * cube.data.len());
    out.extend_from_slice(CUBE_MAGIC);
    for v in [g.bands, g.height, g.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for b in 0..g.bands {
        for r in 0..g.height {
            for c in 0..g.width {
                out.extend_from_slice(&(cube.data[(b, g.index(r, c))] as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_cube(bytes: &[u8]) -> Result<Cube> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    if rd.take(8)? != CUBE_MAGIC {
        return fmt_err("not a PNPCUBE1 file");
    }
    let bands = rd.u32()? as usize;
    let height = rd.u32()? as usize;
    let width = rd.u32()? as usize;
    let g = ImageGeometry::new(height, width, bands).map_err(|e| Error::Format(e.to_string()))?;
    let expected = 20 + 4 * bands * height * width;
    if bytes.len() != expected {
        return fmt_err(format!("cube has {} bytes, header implies {expected}", bytes.len()));
    }
    let mut data = DMatrix::zeros(bands, g.pixels());
    for b in 0..bands {
        for r in 0..height {
            for c in 0..width {
                data[(b, g.index(r, c))] = rd.f32()? as f64;
            }
        }
    }
    rd.finish()?;
    Cube::new(g, data)
}

pub fn write_cube(path: impl AsRef<Path>, cube: &Cube) -> Result<()> {
    fs::write(path, encode_cube(cube))?;
    Ok(())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<Cube> {
    decode_cube(&fs::read(path)?)
}

pub fn encode_gmm(model: &GmmModel, weights: &PatchWeights) -> Result<Vec<u8>> {
    let k = model.components();
    let np = model.patch_len();
    if weights.components() != k {
        return Err(Error::Dimension("weights and model disagree on K".into()));
    }
    let n = weights.patches();
    let mut out = Vec::with_capacity(7 + 8 + 8 * (k + k * np * np + 1 + k * n));
    out.extend_from_slice(GMM_MAGIC);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(np as u32).to_le_bytes());
    for a in &model.alphas {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for c in &model.covariances {
        for i in 0..np {
            for j in 0..np {
                out.extend_from_slice(&c[(i, j)].to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for j in 0..k {
        for i in 0..n {
            out.extend_from_slice(&weights.beta[(j, i)].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_gmm(bytes: &[u8]) -> Result<(GmmModel, PatchWeights)> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    if rd.take(7)? != GMM_MAGIC {
        return fmt_err("not a PNPGMM1 file");
    }
    let k = rd.u32()? as usize;
    let np = rd.u32()? as usize;
    let side = (np as f64).sqrt().round() as usize;
    if k == 0 || side * side != np {
        return fmt_err(format!("bad header: K = {k}, n_p = {np}"));
    }
    let alphas = (0..k).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
    let mut covariances = Vec::with_capacity(k);
    for _ in 0..k {
        let mut c = DMatrix::zeros(np, np);
        for i in 0..np {
            for j in 0..np {
                c[(i, j)] = rd.f64()?;
            }
        }
        covariances.push(c);
    }
    let n = rd.u64()? as usize;
    if bytes.len() != rd.pos + 8 * k * n {
        return fmt_err("beta block length differs from the header");
    }
    let mut beta = DMatrix::zeros(k, n);
    for j in 0..k {
        for i in 0..n {
            beta[(j, i)] = rd.f64()?;
        }
    }
    rd.finish()?;
    let model = GmmModel::new(alphas, covariances, side).map_err(|e| Error::Format(e.to_string()))?;
    Ok((model, PatchWeights { beta }))
}

pub fn write_gmm(path: impl AsRef<Path>, model: &GmmModel, weights: &PatchWeights) -> Result<()> {
    fs::write(path, encode_gmm(model, weights)?)?;
    Ok(())
}

pub fn read_gmm(path: impl AsRef<Path>) -> Result<(GmmModel, PatchWeights)> {
    decode_gmm(&fs::read(path)?)
}

fn parse_text_matrix(text: &str, tag: &str) -> Result<DMatrix<f64>> {
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some(tag) {
        return fmt_err(format!("expected header `{tag} rows cols`"));
    }
    let mut dim = || -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad {tag} dimensions")))
    };
    let (rows, cols) = (dim()?, dim()?);
    let values = tokens
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != rows * cols {
        return fmt_err(format!("{tag} {rows}x{cols} has {} values", values.len()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn format_text_matrix(m: &DMatrix<f64>, tag: &str) -> String {
    let mut s = format!("{tag} {} {}\n", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_psf(text: &str) -> Result<DMatrix<f64>> {
    parse_text_matrix(text, "PSF")
}

pub fn format_psf(psf: &DMatrix<f64>) -> String {
    format_text_matrix(psf, "PSF")
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    parse_text_matrix(text, "MATRIX")
}

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    format_text_matrix(m, "MATRIX")
}

/// A grayscale PGM image; `maxval` is 255 or up to 65535.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub height: usize,
    pub width: usize,
    pub maxval: u16,
    /// Row-major samples.
    pub samples: Vec<u16>,
}

impl Pgm {
    /// Band in `[0, 1]`, column-major pixel order.
    pub fn to_band(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.height * self.width];
        for r in 0..self.height {
            for c in 0..self.width {
                out[r + c * self.height] = self.samples[r * self.width + c] as f64 / self.maxval as f64;
            }
        }
        out
    }

    /// Quantizes a `[0, 1]` band (column-major) after clamping.
    pub fn from_band(band: &[f64], height: usize, width: usize, maxval: u16) -> Self {
        let mut samples = vec![0u16; height * width];
        for r in 0..height {
            for c in 0..width {
                let v = band[r + c * height].clamp(0.0, 1.0);
                samples[r * width + c] = (v * maxval as f64).round() as u16;
            }
        }
        Pgm {
            height,
            width,
            maxval,
            samples,
        }
    }
}

pub fn encode_pgm(img: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    for &s in &img.samples {
        if img.maxval < 256 {
            out.push(s as u8);
        } else {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    // header: magic, width, height, maxval, separated by whitespace and comments
    let mut pos = 0;
    let mut fields = Vec::new();
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
            return fmt_err("truncated PGM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return fmt_err("only binary P5 graymaps are supported");
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field `{s}`")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return fmt_err("PGM dimensions or maxval out of range");
    }
    pos += 1; // single whitespace before the raster
    let bps = if maxval < 256 { 1 } else { 2 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height * bps {
        return fmt_err(format!("PGM raster has {} bytes, expected {}", raster.len(), width * height * bps));
    }
    let samples = if bps == 1 {
        raster.iter().map(|&b| b as u16).collect()
    } else {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(Pgm {
        height,
        width,
        maxval: maxval as u16,
        samples,
    })
}

/// Reads a single-band image from `.pgm` or a one-band PNPCUBE1 file.
pub fn read_image(path: impl AsRef<Path>) -> Result<(Vec<f64>, ImageGeometry)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        let pgm = decode_pgm(&bytes)?;
        let g = ImageGeometry::plane(pgm.height, pgm.width)?;
        return Ok((pgm.to_band(), g));
    }
    let cube = decode_cube(&bytes)?;
    if cube.geometry.bands != 1 {
        return fmt_err(format!("{} has {} bands, expected 1", path.display(), cube.geometry.bands));
    }
    Ok((cube.band(0), cube.geometry))
}

/// Writes a single band as PGM (by extension) or PNPCUBE1.
pub fn write_image(path: impl AsRef<Path>, band: &[f64], geometry: ImageGeometry) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "pgm") {
        let pgm = Pgm::from_band(band, geometry.height, geometry.width, 255);
        fs::write(path, encode_pgm(&pgm))?;
        Ok(())
    } else {
        write_cube(path, &Cube::from_band(geometry.with_bands(1), band)?)
    }
}

pub fn write_report(path: impl AsRef<Path>, report: &SolveReport) -> Result<()> {
    let mut f = fs::File::create(path)?;
    report.write_csv(&mut f)?;
    f.flush()?;
    Ok(())
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return fmt_err(format!("line {}: expected key=value", no + 1));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_to_string(path: impl AsRef<Path>) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path)?.read_to_string(&mut s)?;
    Ok(s)
}
