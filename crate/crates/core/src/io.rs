//! Little-endian binary containers and text artifacts.
//!
//! | file              | magic  | payload                                              |
//! |-------------------|--------|------------------------------------------------------|
//! | k-space           | `RKS1` | dims, voxel size, trajectory, timestamps, samples    |
//! | motion field      | `MFD1` | dims, shape, displacement `[axis][voxel]`            |
//! | complex image     | `CIM1` | dims, shape, voxel size, interleaved complex values  |
//! | sensitivity maps  | `MAP1` | dims, coils, shape, interleaved complex values       |
//!
//! Floating point is `f32` except timestamps (`f64`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex32;

use crate::data::{GridImage, MotionField, RadialKSpace, SensitivityMaps, Shape, C64};
use crate::error::{shape_err, Error, Result};
use crate::navigator::RespiratoryTrace;
use crate::trajectory::Trajectory;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Writer(BufWriter<File>);

impl Writer {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(File::create(path)?)))
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Shape(format!("{v} exceeds u32")))?;
        self.bytes(&v.to_le_bytes())
    }
    fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn c32(&mut self, v: Complex32) -> Result<()> {
        self.f32(v.re)?;
        self.f32(v.im)
    }
    fn finish(mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

/// Cursor over a fully loaded file; running past the end is a format error.
struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn open(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
        Ok(Self { buf, pos: 0 })
    }
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return format_err("unexpected end of file");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != m {
            return format_err(format!(
                "bad magic or version: expected {:?}, found {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(got)
            ));
        }
        Ok(())
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn c32(&mut self) -> Result<Complex32> {
        Ok(Complex32::new(self.f32()?, self.f32()?))
    }
    fn dim(&mut self) -> Result<usize> {
        let d = self.u32()?;
        if d != 2 && d != 3 {
            return format_err(format!("dimension must be 2 or 3, found {d}"));
        }
        Ok(d)
    }
    fn shape(&mut self, dim: usize) -> Result<Shape> {
        let dims: Vec<usize> = (0..dim).map(|_| self.u32()).collect::<Result<_>>()?;
        Shape::new(&dims).map_err(|e| Error::Format(e.to_string()))
    }
    /// Rejects payloads whose declared size exceeds the remaining bytes before
    /// allocating for them.
    fn expect_remaining(&self, n: usize) -> Result<()> {
        if self.buf.len() - self.pos < n {
            return format_err(format!(
                "declared payload of {n} bytes but only {} remain",
                self.buf.len() - self.pos
            ));
        }
        Ok(())
    }
    fn end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return format_err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

/// Writes an RKS1 k-space file.
pub fn write_kspace(data: &RadialKSpace, traj: &Trajectory, path: &Path) -> Result<()> {
    data.validate()?;
    if traj.dim != data.dim || traj.n_spokes != data.n_spokes || traj.n_readout != data.n_readout {
        return shape_err("trajectory does not match k-space dimensions");
    }
    traj.validate()?;
    let mut w = Writer::create(path)?;
    w.bytes(b"RKS1")?;
    w.u32(data.dim)?;
    w.u32(data.n_coils)?;
    w.u32(data.n_spokes)?;
    w.u32(data.n_readout)?;
    for &v in &data.voxel_size {
        w.f32(v as f32)?;
    }
    for &c in &traj.coords {
        w.f32(c)?;
    }
    for &t in &data.timestamps {
        w.f64(t)?;
    }
    for &s in &data.samples {
        w.c32(s)?;
    }
    w.finish()
}

/// Reads an RKS1 file; density weights are recomputed from the coordinates.
pub fn read_kspace(path: &Path) -> Result<(RadialKSpace, Trajectory)> {
    let mut r = Reader::open(path)?;
    r.magic(b"RKS1")?;
    let dim = r.dim()?;
    let n_coils = r.u32()?;
    let n_spokes = r.u32()?;
    let n_readout = r.u32()?;
    if n_coils == 0 || n_spokes == 0 || n_readout < 2 {
        return format_err("empty k-space header");
    }
    let n = n_spokes
        .checked_mul(n_readout)
        .and_then(|v| v.checked_mul(n_coils))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    r.expect_remaining(4 * dim + 4 * n_spokes * n_readout * dim + 8 * n_spokes + 8 * n)?;
    let voxel_size = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    let coords = (0..n_spokes * n_readout * dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let timestamps = (0..n_spokes).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let samples = (0..n).map(|_| r.c32()).collect::<Result<Vec<_>>>()?;
    r.end()?;
    let data = RadialKSpace::new(dim, n_coils, n_spokes, n_readout, voxel_size, samples, timestamps)
        .map_err(|e| Error::Format(e.to_string()))?;
    let traj = Trajectory::from_coords(dim, n_spokes, n_readout, coords).map_err(|e| Error::Format(e.to_string()))?;
    Ok((data, traj))
}

/// Writes an MFD1 motion field.
pub fn write_field(field: &MotionField, path: &Path) -> Result<()> {
    let mut w = Writer::create(path)?;
    w.bytes(b"MFD1")?;
    w.u32(field.shape.ndim())?;
    for &d in field.shape.dims() {
        w.u32(d)?;
    }
    for comp in &field.displacement {
        for &v in comp {
            w.f32(v as f32)?;
        }
    }
    w.finish()
}

pub fn read_field(path: &Path) -> Result<MotionField> {
    let mut r = Reader::open(path)?;
    r.magic(b"MFD1")?;
    let dim = r.dim()?;
    let shape = r.shape(dim)?;
    r.expect_remaining(4 * dim * shape.len())?;
    let displacement = (0..dim)
        .map(|_| (0..shape.len()).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    r.end()?;
    MotionField::new(shape, displacement).map_err(|e| Error::Format(e.to_string()))
}

/// Path of the text sidecar stored next to a field file.
pub fn field_meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes `key=value` lines next to a field file (e.g. the mapping direction).
pub fn write_field_meta(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut f = BufWriter::new(File::create(field_meta_path(path))?);
    for (k, v) in entries {
        writeln!(f, "{k}={v}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_field_meta(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(field_meta_path(path))?;
    parse_key_values(&text)
}

fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.split_once('=') {
            Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
            None => format_err(format!("malformed line {l:?}")),
        })
        .collect()
}

/// Writes a CIM1 complex image.
pub fn write_image(img: &GridImage, path: &Path) -> Result<()> {
    let mut w = Writer::create(path)?;
    w.bytes(b"CIM1")?;
    w.u32(img.dim())?;
    for &d in img.shape.dims() {
        w.u32(d)?;
    }
    for &v in &img.voxel_size {
        w.f32(v as f32)?;
    }
    for v in &img.values {
        w.c32(Complex32::new(v.re as f32, v.im as f32))?;
    }
    w.finish()
}

pub fn read_image(path: &Path) -> Result<GridImage> {
    let mut r = Reader::open(path)?;
    r.magic(b"CIM1")?;
    let dim = r.dim()?;
    let shape = r.shape(dim)?;
    r.expect_remaining(4 * dim + 8 * shape.len())?;
    let voxel_size = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    let values = (0..shape.len())
        .map(|_| r.c32().map(|c| C64::new(c.re as f64, c.im as f64)))
        .collect::<Result<Vec<_>>>()?;
    r.end()?;
    GridImage::new(shape, voxel_size, values).map_err(|e| Error::Format(e.to_string()))
}

/// Writes a MAP1 sensitivity-map set.
pub fn write_maps(maps: &SensitivityMaps, path: &Path) -> Result<()> {
    let mut w = Writer::create(path)?;
    w.bytes(b"MAP1")?;
    w.u32(maps.shape.ndim())?;
    w.u32(maps.n_coils())?;
    for &d in maps.shape.dims() {
        w.u32(d)?;
    }
    for m in &maps.maps {
        for v in m {
            w.c32(Complex32::new(v.re as f32, v.im as f32))?;
        }
    }
    w.finish()
}

pub fn read_maps(path: &Path) -> Result<SensitivityMaps> {
    let mut r = Reader::open(path)?;
    r.magic(b"MAP1")?;
    let dim = r.dim()?;
    let n_coils = r.u32()?;
    let shape = r.shape(dim)?;
    r.expect_remaining(8 * n_coils * shape.len())?;
    let maps = (0..n_coils)
        .map(|_| {
            (0..shape.len())
                .map(|_| r.c32().map(|c| C64::new(c.re as f64, c.im as f64)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    r.end()?;
    SensitivityMaps::new(shape, maps).map_err(|e| Error::Format(e.to_string()))
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Exports the magnitude of `img` as `<base>.raw` (f32), `<base>.txt`
/// (sidecar) and one 8-bit greymap `<base>_NNN.pgm` per slice. 3D images are
/// sliced along the last axis, so each greymap shows axis 0 vertically.
/// Returns the greymap paths.
pub fn export_image(img: &GridImage, base: &Path, window: Option<(f64, f64)>) -> Result<Vec<PathBuf>> {
    if img.values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::InvalidParameter("image contains non-finite values".into()));
    }
    let mag = img.magnitude();
    let mut w = Writer::create(&with_suffix(base, ".raw"))?;
    for &v in &mag {
        w.f32(v as f32)?;
    }
    w.finish()?;

    let join = |v: &[String]| v.join(",");
    let mut side = BufWriter::new(File::create(with_suffix(base, ".txt"))?);
    writeln!(side, "dim={}", img.dim())?;
    writeln!(side, "shape={}", join(&img.shape.dims().iter().map(|d| d.to_string()).collect::<Vec<_>>()))?;
    writeln!(side, "voxel_size={}", join(&img.voxel_size.iter().map(|d| d.to_string()).collect::<Vec<_>>()))?;
    side.flush()?;

    let (lo, hi) = window.unwrap_or_else(|| {
        let lo = mag.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = mag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    let grey = |v: f64| -> u8 {
        if hi > lo {
            (255.0 * ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as u8
        } else {
            0
        }
    };
    let dims = img.shape.dims();
    let (rows, cols, n_slices) = if img.dim() == 2 { (dims[0], dims[1], 1) } else { (dims[0], dims[1], dims[2]) };
    let mut paths = Vec::with_capacity(n_slices);
    for s in 0..n_slices {
        let p = with_suffix(base, &format!("_{s:03}.pgm"));
        let mut f = BufWriter::new(File::create(&p)?);
        write!(f, "P5\n{cols} {rows}\n255\n")?;
        let mut px = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let i = if img.dim() == 2 { r * cols + c } else { (r * cols + c) * n_slices + s };
                px.push(grey(mag[i]));
            }
        }
        f.write_all(&px)?;
        f.flush()?;
        paths.push(p);
    }
    Ok(paths)
}

pub const TRACE_HEADER: &str = "spoke,time_s,value,valid,state";

/// Writes a respiratory trace; invalid spokes carry state `-1`.
pub fn write_trace(trace: &RespiratoryTrace, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{TRACE_HEADER}")?;
    for i in 0..trace.values.len() {
        let state = trace.state[i].map_or(-1, |s| s as i64);
        writeln!(
            f,
            "{},{:?},{:?},{},{}",
            i, trace.times[i], trace.values[i], trace.valid[i] as u8, state
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<RespiratoryTrace> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return format_err("missing trace header");
    }
    let bad = |l: &str| Error::Format(format!("malformed trace line {l:?}"));
    let (mut times, mut values, mut valid, mut state) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, l) in lines.filter(|l| !l.is_empty()).enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 5 || f[0].parse::<usize>().ok() != Some(i) {
            return Err(bad(l));
        }
        times.push(f[1].parse::<f64>().map_err(|_| bad(l))?);
        values.push(f[2].parse::<f64>().map_err(|_| bad(l))?);
        valid.push(match f[3] {
            "1" => true,
            "0" => false,
            _ => return Err(bad(l)),
        });
        let s: i64 = f[4].parse().map_err(|_| bad(l))?;
        state.push(if s < 0 { None } else { Some(s as usize) });
    }
    Ok(RespiratoryTrace::from_parts(times, values, valid, state))
}

/// Writes `header` then one line per row of already-formatted fields.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{}", r.join(","))?;
    }
    f.flush()?;
    Ok(())
}
