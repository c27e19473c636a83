//! CSV and JSON file formats.
//!
//! Point clouds are CSV with header `x,y,z,rcs,v_r[,aux_0..][,label]`;
//! lines starting with `#` are comments. Dense clouds append
//! `feat_0..,logit_0..,is_virtual`. Values are written and read through
//! 32-bit floats, so a save/load cycle quantises to `f32`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fpg::{DenseCloud, Provenance};
use crate::pillars::Detection;
use crate::tensor::Matrix;
use crate::types::{ClassId, ObjectBox, PointCloud, RadarPoint};

/// Rounds to the nearest `f32`, the precision of every on-disk value.
pub fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn fmt(v: f64) -> String {
    format!("{}", v as f32)
}

/// Shortest text that parses back to exactly `v`; dense clouds carry
/// computed positions and features that must survive a round trip.
fn fmt_exact(v: f64) -> String {
    format!("{v}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(f))
}

type Parser = fn(&Path, u64, &str, &str) -> Result<f64>;

fn parse_as<T: std::str::FromStr + Into<f64>>(path: &Path, line: u64, col: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .parse::<T>()
        .map_err(|_| Error::Data(format!("{}:{line}: column {col}: '{s}' is not a number", path.display())))?
        .into();
    if !v.is_finite() {
        return Err(Error::Data(format!("{}:{line}: column {col}: non-finite value", path.display())));
    }
    Ok(v)
}

/// Raw measurements are stored at `f32` precision.
fn parse(path: &Path, line: u64, col: &str, s: &str) -> Result<f64> {
    parse_as::<f32>(path, line, col, s)
}

fn parse_exact(path: &Path, line: u64, col: &str, s: &str) -> Result<f64> {
    parse_as::<f64>(path, line, col, s)
}

struct Columns {
    aux: Vec<usize>,
    label: Option<usize>,
    feats: Vec<usize>,
    logits: Vec<usize>,
    is_virtual: Option<usize>,
}

fn columns(path: &Path, header: &csv::StringRecord) -> Result<Columns> {
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 5 || names[..5] != ["x", "y", "z", "rcs", "v_r"] {
        return Err(Error::Data(format!(
            "{}: header must start with x,y,z,rcs,v_r (got {})",
            path.display(),
            names.join(",")
        )));
    }
    let prefixed = |p: &str| -> Vec<usize> {
        let mut v: Vec<(usize, usize)> = names
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.strip_prefix(p).and_then(|k| k.parse().ok()).map(|k| (k, i)))
            .collect();
        v.sort_unstable();
        v.into_iter().map(|(_, i)| i).collect()
    };
    let c = Columns {
        aux: prefixed("aux_"),
        label: names.iter().position(|&n| n == "label"),
        feats: prefixed("feat_"),
        logits: prefixed("logit_"),
        is_virtual: names.iter().position(|&n| n == "is_virtual"),
    };
    let known = 5 + c.aux.len() + c.feats.len() + c.logits.len() + c.label.is_some() as usize + c.is_virtual.is_some() as usize;
    if known != names.len() {
        return Err(Error::Data(format!("{}: unrecognised columns in header", path.display())));
    }
    Ok(c)
}

fn read_point(path: &Path, line: u64, rec: &csv::StringRecord, aux: &[usize], parse: Parser) -> Result<RadarPoint> {
    let names = ["x", "y", "z", "rcs", "v_r"];
    let mut v = [0.0; 5];
    for k in 0..5 {
        v[k] = parse(path, line, names[k], &rec[k])?;
    }
    let mut p = RadarPoint::new(v[0], v[1], v[2], v[3], v[4]);
    for (n, &c) in aux.iter().enumerate() {
        p.aux.push(parse(path, line, &format!("aux_{n}"), &rec[c])?);
    }
    Ok(p)
}

fn point_fields(p: &RadarPoint, fmt: fn(f64) -> String) -> Vec<String> {
    let mut f: Vec<String> = [p.x, p.y, p.z, p.rcs, p.v_r].iter().map(|&v| fmt(v)).collect();
    f.extend(p.aux.iter().map(|&v| fmt(v)));
    f
}

fn point_header(aux: usize) -> Vec<String> {
    let mut h: Vec<String> = ["x", "y", "z", "rcs", "v_r"].iter().map(|s| s.to_string()).collect();
    h.extend((0..aux).map(|k| format!("aux_{k}")));
    h
}

pub fn write_cloud_csv(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = create(path)?;
    let mut header = point_header(cloud.aux_len());
    if cloud.labels.is_some() {
        header.push("label".into());
    }
    let mut out = header.join(",") + "\n";
    for (i, p) in cloud.points.iter().enumerate() {
        let mut f = point_fields(p, fmt);
        if let Some(l) = &cloud.labels {
            f.push(l[i].0.to_string());
        }
        out.push_str(&f.join(","));
        out.push('\n');
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cloud_csv(path: &Path) -> Result<PointCloud> {
    let mut r = reader(path)?;
    let header = r.headers()?.clone();
    let cols = columns(path, &header)?;
    if !cols.feats.is_empty() || !cols.logits.is_empty() || cols.is_virtual.is_some() {
        return Err(Error::Data(format!("{}: dense columns in a raw cloud file", path.display())));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        points.push(read_point(path, line, &rec, &cols.aux, parse)?);
        if let Some(c) = cols.label {
            let l: usize = rec[c]
                .parse()
                .map_err(|_| Error::Data(format!("{}:{line}: bad label '{}'", path.display(), &rec[c])))?;
            labels.push(ClassId(l));
        }
    }
    let cloud = PointCloud::new(points);
    if cols.label.is_some() {
        cloud.with_labels(labels)
    } else {
        Ok(cloud)
    }
}

pub fn write_dense_csv(path: &Path, dense: &DenseCloud) -> Result<()> {
    let mut w = create(path)?;
    let aux = dense.points.first().map_or(0, |p| p.aux.len());
    let mut header = point_header(aux);
    header.extend((0..dense.features.cols()).map(|k| format!("feat_{k}")));
    header.extend((0..dense.logits.cols()).map(|k| format!("logit_{k}")));
    header.push("is_virtual".into());
    let mut out = header.join(",") + "\n";
    for (i, p) in dense.points.iter().enumerate() {
        let mut f = point_fields(p, fmt_exact);
        f.extend(dense.features.row(i).iter().map(|&v| fmt_exact(v)));
        f.extend(dense.logits.row(i).iter().map(|&v| fmt_exact(v)));
        f.push((dense.is_virtual[i] as u8).to_string());
        out.push_str(&f.join(","));
        out.push('\n');
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dense_csv(path: &Path) -> Result<DenseCloud> {
    let mut r = reader(path)?;
    let header = r.headers()?.clone();
    let cols = columns(path, &header)?;
    let Some(vcol) = cols.is_virtual else {
        return Err(Error::Data(format!("{}: missing is_virtual column", path.display())));
    };
    if cols.logits.len() < 2 {
        return Err(Error::Data(format!("{}: dense cloud needs logit columns", path.display())));
    }
    let (d, k) = (cols.feats.len(), cols.logits.len());
    let mut dense = DenseCloud {
        features: Matrix::zeros(0, d),
        logits: Matrix::zeros(0, k),
        ..Default::default()
    };
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        dense.points.push(read_point(path, line, &rec, &cols.aux, parse_exact)?);
        let row = |idx: &[usize], pre: &str| -> Result<Vec<f64>> {
            idx.iter()
                .enumerate()
                .map(|(n, &c)| parse_exact(path, line, &format!("{pre}{n}"), &rec[c]))
                .collect()
        };
        dense.features.push_row(&row(&cols.feats, "feat_")?);
        dense.logits.push_row(&row(&cols.logits, "logit_")?);
        dense.is_virtual.push(match &rec[vcol] {
            "0" => false,
            "1" => true,
            s => return Err(Error::Data(format!("{}:{line}: is_virtual must be 0 or 1, got '{s}'", path.display()))),
        });
        dense.provenance.push(Provenance::External);
    }
    Ok(dense)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(f))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_boxes(path: &Path, boxes: &[ObjectBox]) -> Result<()> {
    write_json(path, boxes)
}

pub fn read_boxes(path: &Path) -> Result<Vec<ObjectBox>> {
    read_json(path)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_json(path, dets)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    read_json(path)
}

/// Files in `dir` with the given extension, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    Ok(v)
}
