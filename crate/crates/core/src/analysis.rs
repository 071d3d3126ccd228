//! Diagnostics for trained models: per-block accuracy, source/target token
//! overlap, confusion matrices, attention maps and training overhead.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::protocol::{check_compatible, forward_in_chunks, EVAL_CHUNK};
use crate::vit::{ForwardTrace, ViTModel};

/// Mean-token cosine, as written into reports.
pub const OVERLAP_FORMULA: &str =
    "cos(mean_{x in pooled sources} z_L(x), mean_{x in target} z_L(x)), z_L = final-block class token";

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits.chunks_exact(classes).map(argmax).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockProbe {
    /// Top-1 accuracy of each sub-model, block 0 first.
    pub accuracy: Vec<f64>,
}

impl BlockProbe {
    pub fn num_blocks(&self) -> usize {
        self.accuracy.len()
    }

    pub fn last(&self) -> f64 {
        *self.accuracy.last().expect("probe has at least one block")
    }

    /// Mean over blocks `0..num_blocks / 2`.
    pub fn first_half_mean(&self) -> f64 {
        let half = (self.num_blocks() / 2).max(1);
        self.accuracy[..half].iter().sum::<f64>() / half as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetric {
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(labels: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != predicted.len() {
            return Err(Error::Input(format!(
                "{} labels vs {} predictions",
                labels.len(),
                predicted.len()
            )));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&y, &p) in labels.iter().zip(predicted) {
            if y >= classes || p >= classes {
                return Err(Error::Input(format!(
                    "class pair ({y}, {p}) outside {classes} classes"
                )));
            }
            counts[y][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn off_diagonal(&self) -> u64 {
        self.total() - self.diagonal()
    }

    /// Header row `true\pred,<class names>`, then one row per true class.
    pub fn write_csv<W: Write>(&self, out: W, class_names: &[&str]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true\\pred".to_string()];
        header.extend((0..self.classes()).map(|i| class_name(class_names, i)));
        w.write_record(&header)?;
        for (i, row) in self.counts.iter().enumerate() {
            let mut rec = vec![class_name(class_names, i)];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn class_name(names: &[&str], i: usize) -> String {
    names
        .get(i)
        .map_or_else(|| i.to_string(), |s| s.to_string())
}

/// Everything the per-dataset diagnostics need, gathered in one inference
/// pass.
#[derive(Clone, Debug)]
pub struct DatasetProbe {
    pub labels: Vec<usize>,
    /// `predictions[block][example]`; the last block is the full model.
    pub predictions: Vec<Vec<usize>>,
    /// Sum of final-block class tokens.
    pub token_sum: Vec<f64>,
    /// Mean fraction of final-block class attention inside the foreground.
    pub foreground_ratio: f64,
}

impl DatasetProbe {
    pub fn run(model: &ViTModel, ds: &DomainDataset) -> Result<Self> {
        check_compatible(model, ds)?;
        if ds.is_empty() {
            return Err(Error::Input("empty dataset".into()));
        }
        let cfg = model.config();
        let classes = cfg.num_classes;
        let mut predictions = vec![Vec::with_capacity(ds.len()); cfg.num_blocks];
        let mut token_sum = vec![0.0; cfg.embed_dim];
        let mut ratio_sum = 0.0;
        let indices: Vec<usize> = (0..ds.len()).collect();
        forward_in_chunks(model, ds, &indices, EVAL_CHUNK, |trace, idx| {
            for (b, preds) in predictions.iter_mut().enumerate() {
                let logits = trace.sub_model_logits(b)?.value();
                preds.extend(argmax_rows(logits.data(), classes));
            }
            let last = trace
                .class_tokens
                .last()
                .expect("at least one block")
                .value();
            for row in last.data().chunks_exact(cfg.embed_dim) {
                for (s, v) in token_sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
            for (e, &i) in idx.iter().enumerate() {
                ratio_sum += foreground_ratio(trace, e, ds.mask(i))?;
            }
            Ok(())
        })?;
        Ok(Self {
            labels: ds.labels.clone(),
            predictions,
            token_sum,
            foreground_ratio: ratio_sum / ds.len() as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn accuracy(&self) -> f64 {
        self.block_probe().last()
    }

    pub fn block_probe(&self) -> BlockProbe {
        let accuracy = self
            .predictions
            .iter()
            .map(|preds| top1(&self.labels, preds))
            .collect();
        BlockProbe { accuracy }
    }

    pub fn confusion(&self, classes: usize) -> Result<ConfusionMatrix> {
        let last = self.predictions.last().expect("at least one block");
        ConfusionMatrix::from_predictions(&self.labels, last, classes)
    }

    pub fn mean_token(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.token_sum.iter().map(|s| s / n).collect()
    }
}

pub(crate) fn top1(labels: &[usize], predicted: &[usize]) -> f64 {
    let correct = labels.iter().zip(predicted).filter(|(y, p)| y == p).count();
    correct as f64 / labels.len() as f64
}

pub fn block_wise_accuracy(model: &ViTModel, ds: &DomainDataset) -> Result<BlockProbe> {
    Ok(DatasetProbe::run(model, ds)?.block_probe())
}

pub fn confusion_matrix(model: &ViTModel, ds: &DomainDataset) -> Result<ConfusionMatrix> {
    DatasetProbe::run(model, ds)?.confusion(model.config().num_classes)
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of {} vs {} dims",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn mean_rows(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Input("empty token set".into()))?;
    let mut mean = vec![0.0; first.len()];
    for r in rows {
        if r.len() != mean.len() {
            return Err(Error::Shape("ragged token set".into()));
        }
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    Ok(mean.into_iter().map(|m| m / n).collect())
}

/// [`OVERLAP_FORMULA`] on explicit token sets.
pub fn cosine_of_means(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    cosine(&mean_rows(source)?, &mean_rows(target)?)
}

/// Overlap between pooled sources and a target from their probes.
pub fn overlap_from_probes(
    sources: &[&DatasetProbe],
    target: &DatasetProbe,
) -> Result<OverlapMetric> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Input("no source sets".into()))?;
    let mut sum = vec![0.0; first.token_sum.len()];
    let mut n = 0usize;
    for p in sources {
        for (s, v) in sum.iter_mut().zip(&p.token_sum) {
            *s += v;
        }
        n += p.len();
    }
    let source_mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    Ok(OverlapMetric {
        cosine: cosine(&source_mean, &target.mean_token())?,
    })
}

pub fn domain_overlap(
    model: &ViTModel,
    sources: &[&DomainDataset],
    target: &DomainDataset,
) -> Result<OverlapMetric> {
    let probes = sources
        .iter()
        .map(|ds| DatasetProbe::run(model, ds))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DatasetProbe> = probes.iter().collect();
    overlap_from_probes(&refs, &DatasetProbe::run(model, target)?)
}

/// Share of the final-block class attention that lands on foreground pixels
/// after nearest-neighbour upsampling.
pub fn foreground_ratio(trace: &ForwardTrace<'_>, example: usize, mask: &[bool]) -> Result<f64> {
    let per_patch = trace.class_attention(example)?;
    let map = trace.upsample(&per_patch)?;
    if map.numel() != mask.len() {
        return Err(Error::Shape(format!(
            "mask of {} pixels for a {}-pixel map",
            mask.len(),
            map.numel()
        )));
    }
    let total: f64 = map.data().iter().sum();
    let inside: f64 = map
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    Ok(inside / total)
}

/// Relative training-time increase of `sd` over `erm`, in percent.
pub fn overhead_report(erm_time: f64, sd_time: f64) -> Result<f64> {
    if !(erm_time > 0.0 && sd_time > 0.0) || !erm_time.is_finite() || !sd_time.is_finite() {
        return Err(Error::Input(format!(
            "times must be positive, got {erm_time} and {sd_time}"
        )));
    }
    Ok(100.0 * (sd_time - erm_time) / erm_time)
}

/// Binary PPM (P6) bytes for an RGB image.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

/// Parses the P6 files written by [`encode_ppm`]: `(width, height, rgb)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ascii"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a P6 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != w * h * 3 {
        return Err(bad("raster size mismatch"));
    }
    Ok((w, h, data.to_vec()))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the normalized final-block attention map of `example` as a
/// grayscale P6 image at `path`, and a red-over-input blend next to it with
/// an `_overlay` suffix. `input` is the example's `[C, H, W]` bytes.
pub fn export_attention(
    trace: &ForwardTrace<'_>,
    example: usize,
    input: &[u8],
    path: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf)> {
    let path = path.as_ref();
    let map = trace.attention_map(example)?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let plane = h * w;
    if input.len() != 3 * plane {
        return Err(Error::Shape(format!(
            "input of {} bytes does not match a 3x{h}x{w} image",
            input.len()
        )));
    }
    let mut gray = Vec::with_capacity(3 * plane);
    let mut overlay = Vec::with_capacity(3 * plane);
    for (i, &v) in map.data().iter().enumerate() {
        let g = to_byte(v);
        gray.extend_from_slice(&[g, g, g]);
        for c in 0..3 {
            let base = f64::from(input[c * plane + i]) / 255.0;
            let heat = if c == 0 { v } else { 0.0 };
            overlay.push(to_byte(0.5 * base + 0.5 * heat));
        }
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("attention");
    let overlay_path = path.with_file_name(format!("{stem}_overlay.ppm"));
    std::fs::write(path, encode_ppm(w, h, &gray)?)?;
    std::fs::write(&overlay_path, encode_ppm(w, h, &overlay)?)?;
    Ok((path.to_path_buf(), overlay_path))
}

/// CSV of final-block class tokens, one row per example:
/// `example_id,domain,label,dim_0..dim_{d-1}`.
pub fn write_token_dump<W: Write>(
    model: &ViTModel,
    ds: &DomainDataset,
    indices: &[usize],
    out: W,
) -> Result<()> {
    let d = model.config().embed_dim;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["example_id".to_string(), "domain".into(), "label".into()];
    header.extend((0..d).map(|i| format!("dim_{i}")));
    w.write_record(&header)?;
    forward_in_chunks(model, ds, indices, EVAL_CHUNK, |trace, idx| {
        let tokens = trace
            .class_tokens
            .last()
            .expect("at least one block")
            .value();
        for (row, &i) in tokens.data().chunks_exact(d).zip(idx) {
            let mut rec = vec![i.to_string(), ds.domain.clone(), ds.labels[i].to_string()];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    w.flush()?;
    Ok(())
}
