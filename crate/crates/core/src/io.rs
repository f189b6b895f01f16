//! File formats: 8-bit PGM, raw little-endian f64 images and projection sets,
//! CSV projection sets, truth sidecars and pose tables.
//!
//! Raw files start with a 16-byte header. Images: `"UTIMG\0"`, `u32` side,
//! six zero bytes. Projection sets: `"UTSIN\0"`, `u32` count, `u32` bins,
//! two zero bytes. The payload follows as row-major `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{Image, OutlierClass, Pose, Projection, ProjectionSet, TruthRecord};

pub const IMAGE_MAGIC: &[u8; 6] = b"UTIMG\0";
pub const SET_MAGIC: &[u8; 6] = b"UTSIN\0";
const HEADER_LEN: usize = 16;

/// Reads a binary (P5) 8-bit PGM; intensities are scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let data = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    pos += 1; // single whitespace before the raster
    if fields[0] != "P5" {
        return Err(Error::format(format!("expected P5 PGM, found {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(format!("bad PGM field {s}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if w != h {
        return Err(Error::format(format!("image must be square, got {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("only 8-bit PGM is supported (maxval {maxval})")));
    }
    let raster = data.get(pos..pos + w * h).ok_or_else(|| Error::format("truncated PGM raster"))?;
    let scale = 1.0 / maxval as f64;
    Image::new(w, raster.iter().map(|&b| b as f64 * scale).collect())
}

/// Writes an 8-bit P5 PGM, mapping `[0, max]` to `[0, 255]` (negatives clamp to 0).
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let max = img.pixels().iter().cloned().fold(0.0_f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", img.side(), img.side())?;
    let raster: Vec<u8> = img.pixels().iter().map(|&v| (v.max(0.0) * scale).round().min(255.0) as u8).collect();
    out.write_all(&raster)?;
    out.flush()?;
    Ok(())
}

fn header(magic: &[u8; 6], a: u32, b: Option<u32>) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..6].copy_from_slice(magic);
    h[6..10].copy_from_slice(&a.to_le_bytes());
    if let Some(b) = b {
        h[10..14].copy_from_slice(&b.to_le_bytes());
    }
    h
}

fn write_f64s(out: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()
}

fn u32_at(h: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(h[at..at + 4].try_into().expect("4 bytes"))
}

pub fn write_raw_image(path: &Path, img: &Image) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&header(IMAGE_MAGIC, img.side() as u32, None))?;
    write_f64s(&mut out, img.pixels())?;
    out.flush()?;
    Ok(())
}

pub fn read_raw_image(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN || &bytes[..6] != IMAGE_MAGIC {
        return Err(Error::format(format!("{} is not a raw image file", path.display())));
    }
    let side = u32_at(&bytes, 6) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != side * side * 8 {
        return Err(Error::format(format!("raw image payload has {} bytes", body.len())));
    }
    Image::new(side, read_f64s(body))
}

/// Reads an image by extension: `.pgm` or raw.
pub fn read_image(path: &Path) -> Result<Image> {
    match extension(path).as_deref() {
        Some("pgm") => read_pgm(path),
        _ => read_raw_image(path),
    }
}

/// Writes an image by extension: `.pgm` or raw.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    match extension(path).as_deref() {
        Some("pgm") => write_pgm(path, img),
        _ => write_raw_image(path, img),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

pub fn write_raw_projections(path: &Path, projections: &[Projection]) -> Result<()> {
    let bins = projections.first().map_or(0, Projection::len);
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&header(SET_MAGIC, projections.len() as u32, Some(bins as u32)))?;
    for p in projections {
        write_f64s(&mut out, p.bins())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_raw_projections(path: &Path) -> Result<Vec<Projection>> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN || &bytes[..6] != SET_MAGIC {
        return Err(Error::format(format!("{} is not a raw projection file", path.display())));
    }
    let count = u32_at(&bytes, 6) as usize;
    let bins = u32_at(&bytes, 10) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * bins * 8 {
        return Err(Error::format(format!("payload of {} bytes does not hold {count}x{bins} values", body.len())));
    }
    read_f64s(body).chunks(bins.max(1)).take(count).map(|c| Projection::new(c.to_vec())).collect()
}

/// One projection per row, no header.
pub fn write_csv_projections(path: &Path, projections: &[Projection]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for p in projections {
        w.write_record(p.bins().iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv_projections(path: &Path) -> Result<Vec<Projection>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bins = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| Error::format(format!("bad number `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(Projection::new(bins)?);
    }
    Ok(out)
}

/// Reads projections by extension: `.csv` or raw.
pub fn read_projections(path: &Path) -> Result<Vec<Projection>> {
    match extension(path).as_deref() {
        Some("csv") => read_csv_projections(path),
        _ => read_raw_projections(path),
    }
}

pub fn write_projections(path: &Path, projections: &[Projection]) -> Result<()> {
    match extension(path).as_deref() {
        Some("csv") => write_csv_projections(path, projections),
        _ => write_raw_projections(path, projections),
    }
}

pub fn write_truth_csv(path: &Path, truth: &[TruthRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "angle", "shift", "outlier_class"])?;
    for (i, t) in truth.iter().enumerate() {
        w.write_record([i.to_string(), t.angle.to_string(), t.shift.to_string(), t.outlier_class.code().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth_csv(path: &Path) -> Result<Vec<TruthRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field =
            |i: usize| -> Result<&str> { rec.get(i).ok_or_else(|| Error::format("truth row is missing fields")) };
        out.push(TruthRecord {
            angle: parse_f64(field(1)?)?,
            shift: parse_f64(field(2)?)?,
            outlier_class: OutlierClass::from_code(
                field(3)?.trim().parse().map_err(|_| Error::format("bad outlier class"))?,
            )?,
        });
    }
    Ok(out)
}

pub fn write_poses_csv(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "angle", "shift"])?;
    for (i, p) in poses.iter().enumerate() {
        w.write_record([i.to_string(), p.angle.to_string(), p.shift.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_poses_csv(path: &Path) -> Result<Vec<Pose>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let (a, s) = match (rec.get(1), rec.get(2)) {
            (Some(a), Some(s)) => (parse_f64(a)?, parse_f64(s)?),
            _ => return Err(Error::format("pose row is missing fields")),
        };
        out.push(Pose::new(a, s)?);
    }
    Ok(out)
}

/// Writes a table of named numeric columns.
pub fn write_columns_csv(path: &Path, names: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_columns_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let names = r.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(parse_f64).collect::<Result<Vec<_>>>()?);
    }
    Ok((names, rows))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::format(format!("bad number `{s}`")))
}

/// Flat `key=value` text, one pair per line; `#` starts a comment.
pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut map = BTreeMap::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::format(format!("line {} is not key=value", n + 1)))?;
        map.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(map)
}

pub fn write_key_values<'a>(path: &Path, pairs: impl IntoIterator<Item = (&'a str, String)>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (k, v) in pairs {
        writeln!(out, "{k}={v}")?;
    }
    out.flush()?;
    Ok(())
}

/// Paths of the three files that make up a persisted dataset.
pub struct DatasetPaths {
    pub projections: PathBuf,
    pub truth: PathBuf,
    pub meta: PathBuf,
}

impl DatasetPaths {
    /// `stem.utsin`, `stem.truth.csv`, `stem.meta`.
    pub fn from_stem(stem: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        DatasetPaths { projections: with(".utsin"), truth: with(".truth.csv"), meta: with(".meta") }
    }
}

pub fn save_dataset(stem: &Path, set: &ProjectionSet) -> Result<()> {
    let paths = DatasetPaths::from_stem(stem);
    write_raw_projections(&paths.projections, set.projections())?;
    if let Some(t) = set.truth() {
        write_truth_csv(&paths.truth, t)?;
    }
    let mut meta = vec![("count", set.len().to_string()), ("bins", set.bins().to_string())];
    if let Some(s) = set.noise_sigma() {
        meta.push(("noise_sigma", format!("{s:e}")));
    }
    write_key_values(&paths.meta, meta)
}

pub fn load_dataset(stem: &Path) -> Result<ProjectionSet> {
    let paths = DatasetPaths::from_stem(stem);
    let mut set = ProjectionSet::new(read_raw_projections(&paths.projections)?)?;
    if paths.truth.exists() {
        set = set.with_truth(read_truth_csv(&paths.truth)?)?;
    }
    if paths.meta.exists() {
        if let Some(s) = read_key_values(&paths.meta)?.get("noise_sigma") {
            set = set.with_noise_sigma(parse_f64(s)?)?;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::random_phantom;
    use crate::types::RngSeed;

    #[test]
    fn raw_image_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_phantom(20, RngSeed(3));
        let p = dir.path().join("a.utimg");
        write_raw_image(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..6], IMAGE_MAGIC);
        assert_eq!(bytes.len(), 16 + 400 * 8);
        assert_eq!(read_raw_image(&p).unwrap(), img);
    }

    #[test]
    fn pgm_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_phantom(16, RngSeed(8));
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &img).unwrap();
        let back = read_pgm(&p).unwrap();
        let max = img.pixels().iter().cloned().fold(0.0, f64::max);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a / max - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ps = vec![Projection::new(vec![1.0, 2.5, -0.125]).unwrap(); 3];
        let truth = vec![
            TruthRecord { angle: 0.1, shift: 0.3, outlier_class: OutlierClass::None },
            TruthRecord { angle: 1.1, shift: -1.0 / 3.0, outlier_class: OutlierClass::Class1 },
            TruthRecord { angle: 3.0, shift: 0.0, outlier_class: OutlierClass::Class2 },
        ];
        let set = ProjectionSet::new(ps).unwrap().with_truth(truth).unwrap().with_noise_sigma(0.7).unwrap();
        let stem = dir.path().join("data");
        save_dataset(&stem, &set).unwrap();
        assert_eq!(load_dataset(&stem).unwrap(), set);
        let csv = dir.path().join("p.csv");
        write_csv_projections(&csv, set.projections()).unwrap();
        assert_eq!(read_csv_projections(&csv).unwrap(), set.projections());
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        fs::write(&p, [0u8; 32]).unwrap();
        assert!(matches!(read_raw_image(&p), Err(Error::Format(_))));
        assert!(matches!(read_raw_projections(&p), Err(Error::Format(_))));
    }
}
