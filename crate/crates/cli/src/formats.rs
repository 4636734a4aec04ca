//! On-disk formats: raw tensors, checkpoints, dataset CSV, relation CSV,
//! PGM heatmaps, sub-structure dumps and the per-epoch metrics log.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use stsc_core::data::{Dataset, Labels};
use stsc_core::metrics::MetricsReport;
use stsc_core::model::{ConvFront, HeadMode, ImageFront, Layer, ModelParams};
use stsc_core::trainer::EpochRecord;
use stsc_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] stsc_core::Error),
}

type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(path: &Path, msg: impl Into<String>) -> FormatError {
    FormatError::Invalid {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

// ---------------------------------------------------------------- tensors

/// Appends `u64 ndim, u64 dims…, f64 data…`, all little-endian.
pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads one tensor from the front of `bytes`, returning it and the rest.
pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<(Tensor, &[u8]), String> {
    fn take(b: &[u8]) -> std::result::Result<(u64, &[u8]), String> {
        let (head, rest) = b.split_first_chunk::<8>().ok_or("truncated tensor")?;
        Ok((u64::from_le_bytes(*head), rest))
    }
    let (ndim, mut rest) = take(bytes)?;
    if ndim > 8 {
        return Err(format!("implausible tensor rank {ndim}"));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let (d, r) = take(rest)?;
        shape.push(d as usize);
        rest = r;
    }
    let n: usize = shape.iter().product();
    if rest.len() < n * 8 {
        return Err(format!("tensor payload of {n} values truncated"));
    }
    let data = rest[..n * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((t, &rest[n * 8..]))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::new();
    encode_tensor(t, &mut bytes);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (t, rest) = decode_tensor(&bytes).map_err(|m| invalid(path, m))?;
    if !rest.is_empty() {
        return Err(invalid(path, "trailing bytes after tensor"));
    }
    Ok(t)
}

// ------------------------------------------------------------ checkpoints

/// A checkpoint is `<stem>.bin` (the tensors, in [`ModelParams::tensors`]
/// order) plus `<stem>.manifest` (architecture and epoch).
pub fn save_checkpoint(stem: &Path, params: &ModelParams, epoch: usize) -> Result<()> {
    let mut bytes = Vec::new();
    for t in params.tensors() {
        encode_tensor(t, &mut bytes);
    }
    let bin = stem.with_extension("bin");
    if let Some(dir) = bin.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&bin, bytes).map_err(io_err(&bin))?;
    let dims = params.layer_dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
    let head = match params.head_mode {
        HeadMode::SingleLabel => "single",
        HeadMode::MultiLabel => "multi",
    };
    let front = params.front.as_ref().map_or("none".to_string(), |f| {
        let g = f.geometry;
        format!("{}x{}x{}x{}", g.height, g.width, g.kernel, g.channels)
    });
    let text = format!("layer_dims = {dims}\nhead_mode = {head}\nfront = {front}\nepoch = {epoch}\n");
    write_text(&stem.with_extension("manifest"), &text)
}

/// Loads a checkpoint written by [`save_checkpoint`], returning the weights
/// and the epoch they were taken at.
pub fn load_checkpoint(stem: &Path) -> Result<(ModelParams, usize)> {
    let mpath = stem.with_extension("manifest");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let (mut dims, mut head, mut front, mut epoch) = (None, None, None, None);
    for (i, line) in text.lines().enumerate() {
        let Some((k, v)) = line.split_once('=') else { continue };
        let v = v.trim();
        let bad = |m: &str| parse_err(&mpath, i + 1, m);
        match k.trim() {
            "layer_dims" => {
                dims = Some(v.split(',').map(|d| d.trim().parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad("bad layer_dims"))?)
            }
            "head_mode" => {
                head = Some(match v {
                    "single" => HeadMode::SingleLabel,
                    "multi" => HeadMode::MultiLabel,
                    _ => return Err(bad("bad head_mode")),
                })
            }
            "front" => {
                front = Some(if v == "none" {
                    None
                } else {
                    let p: Vec<usize> = v.split('x').map(|d| d.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad front"))?;
                    if p.len() != 4 {
                        return Err(bad("front needs HxWxKxC"));
                    }
                    Some(ImageFront {
                        height: p[0],
                        width: p[1],
                        kernel: p[2],
                        channels: p[3],
                    })
                })
            }
            "epoch" => epoch = Some(v.parse().map_err(|_| bad("bad epoch"))?),
            other => return Err(bad(&format!("unknown key {other}"))),
        }
    }
    let (Some(dims), Some(head), Some(front), Some(epoch)) = (dims, head, front, epoch) else {
        return Err(invalid(&mpath, "manifest needs layer_dims, head_mode, front and epoch"));
    };
    if dims.len() < 2 {
        return Err(invalid(&mpath, "layer_dims needs at least two widths"));
    }
    let bin = stem.with_extension("bin");
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    let mut rest: &[u8] = &bytes;
    let mut next = |expect: &[usize]| -> Result<Tensor> {
        let (t, r) = decode_tensor(rest).map_err(|m| invalid(&bin, m))?;
        rest = r;
        if t.shape() != expect {
            return Err(invalid(&bin, format!("tensor shape {:?}, manifest implies {:?}", t.shape(), expect)));
        }
        Ok(t)
    };
    let front = match front {
        Some(g) => {
            let k2 = g.kernel * g.kernel;
            Some(ConvFront {
                geometry: g,
                kernel: next(&[k2, g.channels])?,
                bias: next(&[1, g.channels])?,
            })
        }
        None => None,
    };
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        layers.push(Layer {
            weight: next(&[w[0], w[1]])?,
            bias: next(&[1, w[1]])?,
        });
    }
    if !rest.is_empty() {
        return Err(invalid(&bin, "trailing bytes after the last tensor"));
    }
    Ok((
        ModelParams {
            layer_dims: dims,
            head_mode: head,
            front,
            layers,
        },
        epoch,
    ))
}

// -------------------------------------------------------------- datasets

/// `id,f_0..f_{d-1},label` (single-label) or `id,f_0..,l_0..l_{c-1}`
/// (multi-label). Floats are written in shortest round-trip form.
pub fn save_csv(path: &Path, data: &Dataset) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| invalid(path, e.to_string()))?;
    let d = data.dim();
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|j| format!("f_{j}")));
    match &data.labels {
        Labels::Single { .. } => header.push("label".into()),
        Labels::Multi { classes, .. } => header.extend((0..*classes).map(|j| format!("l_{j}"))),
    }
    let csv_err = |e: csv::Error| invalid(path, e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut rec = vec![data.sample_ids[i].to_string()];
        rec.extend(data.features.row(i).iter().map(|v| v.to_string()));
        match &data.labels {
            Labels::Single { labels, .. } => rec.push(labels[i].to_string()),
            Labels::Multi { bits, .. } => rec.extend(bits[i].iter().map(|&b| if b { "1" } else { "0" }.to_string())),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Parses the [`save_csv`] layout. `classes` fixes the single-label class
/// count; without it the largest label plus one is used.
pub fn load_csv(path: &Path, classes: Option<usize>, image: Option<(usize, usize)>) -> Result<Dataset> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut text = String::new();
    file.read_to_string(&mut text).map_err(io_err(path))?;
    if text.trim().is_empty() {
        return Err(invalid(path, "empty file"));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.get(0) != Some("id") {
        return Err(parse_err(path, 1, "first column must be `id`"));
    }
    let d = header.iter().filter(|h| h.starts_with("f_")).count();
    let multi_cols = header.iter().filter(|h| h.starts_with("l_")).count();
    let single = header.iter().next_back() == Some("label");
    if d == 0 || (single == (multi_cols > 0)) {
        return Err(parse_err(path, 1, "header must be id,f_0..,label or id,f_0..,l_0.."));
    }
    let width = header.len();
    let mut feats = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut bits = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != width {
            return Err(parse_err(path, line, format!("{} columns, header has {width}", rec.len())));
        }
        ids.push(rec[0].trim().parse::<u64>().map_err(|_| parse_err(path, line, format!("bad id {:?}", &rec[0])))?);
        for j in 0..d {
            let v: f64 = rec[1 + j]
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("non-numeric feature {:?}", &rec[1 + j])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, "non-finite feature"));
            }
            feats.push(v);
        }
        if single {
            labels.push(rec[1 + d].trim().parse::<usize>().map_err(|_| parse_err(path, line, format!("bad label {:?}", &rec[1 + d])))?);
        } else {
            let row = (0..multi_cols)
                .map(|j| match rec[1 + d + j].trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(parse_err(path, line, format!("label bit must be 0 or 1, got {other:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            bits.push(row);
        }
    }
    if ids.is_empty() {
        return Err(invalid(path, "no data rows"));
    }
    let n = ids.len();
    let labels = if single {
        let c = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
        Labels::Single { classes: c, labels }
    } else {
        Labels::Multi {
            classes: multi_cols,
            bits,
        }
    };
    Ok(Dataset::new(Tensor::new(vec![n, d], feats)?, labels, ids, image)?)
}

// ------------------------------------------------------------- relations

/// Square matrix CSV with sample ids as the header row and first column.
pub fn save_relation_csv(path: &Path, ids: &[u64], m: &Tensor) -> Result<()> {
    let mut s = String::from("id");
    for id in ids {
        s.push_str(&format!(",{id}"));
    }
    s.push('\n');
    for (i, id) in ids.iter().enumerate() {
        s.push_str(&id.to_string());
        for v in m.row(i) {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn load_relation_csv(path: &Path) -> Result<(Vec<u64>, Tensor)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| invalid(path, "empty file"))?;
    let ids: Vec<u64> = header
        .split(',')
        .skip(1)
        .map(|v| v.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(path, 1, "bad id header"))?;
    let b = ids.len();
    let mut data = Vec::with_capacity(b * b);
    for (i, line) in lines.enumerate() {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != b + 1 {
            return Err(parse_err(path, i + 2, format!("{} columns, expected {}", vals.len(), b + 1)));
        }
        for v in &vals[1..] {
            data.push(v.parse::<f64>().map_err(|_| parse_err(path, i + 2, format!("bad value {v:?}")))?);
        }
    }
    if data.len() != b * b {
        return Err(invalid(path, format!("expected {b} rows")));
    }
    Ok((ids, Tensor::new(vec![b, b], data)?))
}

/// Gray level of `v` on a `[0, max]` scale: black is zero.
pub fn gray_level(v: f64, max: f64) -> u8 {
    if max <= 0.0 {
        0
    } else {
        (255.0 * (v / max).clamp(0.0, 1.0)).round() as u8
    }
}

/// Binary (P5) 8-bit PGM of a nonnegative matrix, scaled so the largest
/// entry is white. The scale is recorded in a header comment.
pub fn save_pgm(path: &Path, m: &Tensor) -> Result<()> {
    let (h, w) = (m.rows(), m.cols());
    let max = m.data().iter().cloned().fold(0.0f64, f64::max);
    let mut bytes = format!("P5\n# scale 0 {max}\n{w} {h}\n255\n").into_bytes();
    bytes.extend(m.data().iter().map(|&v| gray_level(v, max)));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads back a [`save_pgm`] file as `(width, height, pixels)`.
pub fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| invalid(path, "truncated header"))? + pos;
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| invalid(path, "bad header"))?;
        pos = end + 1;
        if line.starts_with('#') {
            continue;
        }
        fields.extend(line.split_whitespace().map(str::to_string));
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(invalid(path, "not an 8-bit P5 PGM"));
    }
    let w: usize = fields[1].parse().map_err(|_| invalid(path, "bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| invalid(path, "bad height"))?;
    let px = bytes[pos..].to_vec();
    if px.len() != w * h {
        return Err(invalid(path, "pixel count does not match header"));
    }
    Ok((w, h, px))
}

// ----------------------------------------------------------------- logs

/// One line per stable sub-structure: `batch <first id>: id id id`.
pub fn save_substructures(path: &Path, dumps: &[(stsc_core::temporal::BatchKey, Vec<Vec<u64>>)]) -> Result<()> {
    let mut s = String::new();
    for (key, comps) in dumps {
        let first = key.0.first().copied().unwrap_or(0);
        for c in comps {
            let ids = c.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
            s.push_str(&format!("batch {first}: {ids}\n"));
        }
    }
    write_text(path, &s)
}

pub const METRICS_HEADER: &str =
    "epoch,lr,lambda,l_s,l_c,l_sc,l_tc,k,val_acc,val_sen,val_spec,val_auc,val_f1,relation_distance";

pub fn metrics_row(r: &EpochRecord) -> String {
    let v = &r.val;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch,
        r.lr,
        r.lambda,
        r.l_s,
        r.l_c,
        r.l_sc,
        r.l_tc,
        r.substructures,
        v.accuracy,
        v.sensitivity,
        v.specificity,
        v.auc,
        v.f1,
        r.relation_distance
    )
}

/// Appends rows to the metrics log as epochs finish.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}").map_err(io_err(path))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn push(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.out, "{}", metrics_row(r)).map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub const REPORT_HEADER: &str = "n,accuracy,sensitivity,specificity,auc,f1";

pub fn report_row(m: &MetricsReport) -> String {
    format!("{},{},{},{},{},{}", m.n_samples, m.accuracy, m.sensitivity, m.specificity, m.auc, m.f1)
}

pub fn report_text(m: &MetricsReport) -> String {
    format!(
        "samples      {}\naccuracy     {:.4}\nsensitivity  {:.4}\nspecificity  {:.4}\nauc          {:.4}\nf1           {:.4}\n",
        m.n_samples, m.accuracy, m.sensitivity, m.specificity, m.auc, m.f1
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use stsc_core::data::{gen_multilabel, gen_rings};
    use stsc_core::model::{init_image_params, init_params};

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("stsc-formats-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn tensor_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -0.0, 3.25, 1e-300, -7.0, 0.1]).unwrap();
        let p = tmp("t.bin");
        save_tensor(&p, &t).unwrap();
        assert_eq!(load_tensor(&p).unwrap(), t);
        let mut bytes = Vec::new();
        encode_tensor(&t, &mut bytes);
        assert_eq!(bytes.len(), 8 + 16 + 48);
        assert!(decode_tensor(&bytes[..30]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params(&[2, 5, 3], HeadMode::SingleLabel, 1).unwrap();
        save_checkpoint(&tmp("mlp"), &p, 7).unwrap();
        assert_eq!(load_checkpoint(&tmp("mlp")).unwrap(), (p, 7));
        let front = ImageFront { height: 6, width: 6, kernel: 3, channels: 2 };
        let q = init_image_params(front, &[front.output_dim(), 4, 2], HeadMode::MultiLabel, 2).unwrap();
        save_checkpoint(&tmp("conv"), &q, 0).unwrap();
        assert_eq!(load_checkpoint(&tmp("conv")).unwrap(), (q, 0));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let d = gen_rings(30, 0.1, 3).unwrap();
        let p = tmp("rings.csv");
        save_csv(&p, &d).unwrap();
        assert_eq!(load_csv(&p, Some(2), None).unwrap(), d);
        let m = gen_multilabel(20, 3, 4, 1).unwrap();
        let q = tmp("ml.csv");
        save_csv(&q, &m).unwrap();
        assert_eq!(load_csv(&q, None, None).unwrap(), m);
    }

    #[test]
    fn dataset_csv_errors_name_lines() {
        let p = tmp("bad.csv");
        fs::write(&p, "id,f_0,f_1,label\n0,1.0,2.0,1\n1,3.0,0\n").unwrap();
        let msg = load_csv(&p, None, None).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
        fs::write(&p, "id,f_0,label\n0,abc,1\n").unwrap();
        let msg = load_csv(&p, None, None).unwrap_err().to_string();
        assert!(msg.contains("line 2") && msg.contains("non-numeric"), "{msg}");
        fs::write(&p, "").unwrap();
        assert!(load_csv(&p, None, None).unwrap_err().to_string().contains("empty"));
        assert!(load_csv(&tmp("missing.csv"), None, None).is_err());
    }

    #[test]
    fn pgm_matches_csv_after_scaling() {
        let m = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let p = tmp("h.pgm");
        save_pgm(&p, &m).unwrap();
        let (w, h, px) = load_pgm(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        for (v, g) in m.data().iter().zip(&px) {
            assert_eq!(*g, gray_level(*v, 1.0));
        }
        save_pgm(&p, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(load_pgm(&p).unwrap().2.iter().all(|&g| g == 0));
    }

    #[test]
    fn relation_csv_round_trip() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.3, 0.3, 1.0]).unwrap();
        let p = tmp("r.csv");
        save_relation_csv(&p, &[5, 9], &m).unwrap();
        assert_eq!(load_relation_csv(&p).unwrap(), (vec![5, 9], m));
    }
}
