//! Mask inspection: pairwise softmax of the two speaker masks, per-channel
//! standardization over time, and a channel reorder from average-linkage
//! clustering, annotated with which speaker is active per frame.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::host::{MultiSpeakerModel, MultiStreamModel};
use crate::layers::pad_batch;
use crate::mixsim::MixedUtterance;
use crate::sidecar::MaskTensor;

/// Rows below this standard deviation are treated as constant.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix data", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn select_rows(&self, order: &[usize]) -> Matrix {
        let data = order.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Matrix {
            rows: order.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentLabel {
    Speaker(usize),
    Overlap,
    /// No source active; only possible when a delay exceeds the first source.
    Silence,
}

impl fmt::Display for SegmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentLabel::Speaker(i) => write!(f, "spk{i}"),
            SegmentLabel::Overlap => f.write_str("overlap"),
            SegmentLabel::Silence => f.write_str("silence"),
        }
    }
}

impl FromStr for SegmentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(SegmentLabel::Overlap),
            "silence" => Ok(SegmentLabel::Silence),
            _ => s
                .strip_prefix("spk")
                .and_then(|i| i.parse().ok())
                .map(SegmentLabel::Speaker)
                .ok_or_else(|| Error::Invalid(format!("unknown segment label {s:?}"))),
        }
    }
}

impl Serialize for SegmentLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SegmentLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Half-open frame range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: SegmentLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizResult {
    /// Processed mask, channels reordered, `C x T`.
    pub matrix: Matrix,
    /// `channel_order[i]` is the original channel shown in row `i`.
    pub channel_order: Vec<usize>,
    pub speaker_segments: Vec<Segment>,
}

/// `exp(m0) / (exp(m0) + exp(m1))` elementwise, computed as a logistic of the
/// difference so large gaps saturate instead of overflowing.
pub fn softmax_pair(m0: &Matrix, m1: &Matrix) -> Result<Matrix> {
    if (m0.rows, m0.cols) != (m1.rows, m1.cols) {
        return Err(Error::shape(
            "second mask",
            format!("{}x{}", m0.rows, m0.cols),
            format!("{}x{}", m1.rows, m1.cols),
        ));
    }
    let data = m0
        .data
        .iter()
        .zip(&m1.data)
        .map(|(a, b)| {
            let d = a - b;
            if d >= 0.0 {
                1.0 / (1.0 + (-d).exp())
            } else {
                let e = d.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    Matrix::new(m0.rows, m0.cols, data)
}

/// Standardizes each row over time; near-constant rows become zeros.
pub fn channel_zscore(m: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(m.data.len());
    for r in 0..m.rows {
        let row = m.row(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < DEGENERATE_STD || !std.is_finite() {
            data.extend(std::iter::repeat_n(0.0, row.len()));
        } else {
            data.extend(row.iter().map(|x| (x - mean) / std));
        }
    }
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data,
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

struct Cluster {
    leaves: Vec<usize>,
    first: usize,
}

/// Average-linkage agglomerative clustering of the rows; returns the rows in
/// dendrogram leaf order and that order. At each merge the closest pair wins,
/// ties going to the pair whose smallest channel indices are smallest, and
/// the subtree holding the smaller channel index is placed on the left.
pub fn cluster_reorder(m: &Matrix) -> (Matrix, Vec<usize>) {
    let n = m.rows;
    if n == 0 {
        return (m.clone(), Vec::new());
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(m.row(i), m.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut clusters: Vec<Option<Cluster>> = (0..n).map(|i| Some(Cluster { leaves: vec![i], first: i })).collect();
    for _ in 1..n {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for i in 0..n {
            let Some(ci) = &clusters[i] else { continue };
            for j in i + 1..n {
                let Some(cj) = &clusters[j] else { continue };
                let d = dist[i * n + j];
                let key = (ci.first.min(cj.first), ci.first.max(cj.first));
                let better = match best {
                    None => true,
                    Some((bd, _, _, k0, k1)) => d < bd || (d == bd && key < (k0, k1)),
                };
                if better {
                    best = Some((d, i, j, key.0, key.1));
                }
            }
        }
        let (_, i, j, _, _) = best.expect("at least two live clusters");
        let a = clusters[i].take().expect("live");
        let b = clusters[j].take().expect("live");
        let (na, nb) = (a.leaves.len() as f64, b.leaves.len() as f64);
        for k in 0..n {
            if k != i && k != j && clusters[k].is_some() {
                let d = (na * dist[i * n + k] + nb * dist[j * n + k]) / (na + nb);
                dist[i * n + k] = d;
                dist[k * n + i] = d;
            }
        }
        let (left, right) = if a.first <= b.first { (a, b) } else { (b, a) };
        let mut leaves = left.leaves;
        leaves.extend(right.leaves);
        clusters[i] = Some(Cluster {
            leaves,
            first: left.first,
        });
    }
    let order = clusters.into_iter().flatten().next().expect("root").leaves;
    (m.select_rows(&order), order)
}

/// Labels each mixture frame by its active sources and merges equal runs.
pub fn annotate_segments(mixture: &MixedUtterance) -> Vec<Segment> {
    let mut segments: Vec<Segment> = Vec::new();
    for t in 0..mixture.frames {
        let active: Vec<usize> = mixture
            .sources
            .iter()
            .enumerate()
            .filter(|(_, s)| s.offset_frames <= t && t < s.end())
            .map(|(i, _)| i)
            .collect();
        let label = match active.as_slice() {
            [] => SegmentLabel::Silence,
            [i] => SegmentLabel::Speaker(*i),
            _ => SegmentLabel::Overlap,
        };
        match segments.last_mut() {
            Some(seg) if seg.label == label => seg.end = t + 1,
            _ => segments.push(Segment {
                start: t,
                end: t + 1,
                label,
            }),
        }
    }
    segments
}

/// Speaker masks as `C x T` matrices, one per speaker.
pub fn mask_matrices(masks: &MaskTensor) -> Vec<Matrix> {
    (0..masks.speakers)
        .map(|s| Matrix {
            rows: masks.channels,
            cols: masks.frames,
            data: masks.speaker(s).iter().map(|&v| f64::from(v)).collect(),
        })
        .collect()
}

/// Full pipeline for a two-speaker mask set over `mixture`.
pub fn visualize(masks: &MaskTensor, mixture: &MixedUtterance) -> Result<VizResult> {
    if masks.speakers != 2 {
        return Err(Error::shape("mask speakers", 2, masks.speakers));
    }
    if masks.frames != mixture.frames {
        return Err(Error::shape("mask frames", mixture.frames, masks.frames));
    }
    let m = mask_matrices(masks);
    let (matrix, channel_order) = cluster_reorder(&channel_zscore(&softmax_pair(&m[0], &m[1])?));
    Ok(VizResult {
        matrix,
        channel_order,
        speaker_segments: annotate_segments(mixture),
    })
}

/// Runs `model` on one mixture and returns its masks as `(N, C, T)`.
pub fn model_masks(model: &MultiSpeakerModel, mixture: &MixedUtterance) -> Result<MaskTensor> {
    let (x, mask) = pad_batch(&[(mixture.mixture.as_slice(), mixture.frames)], mixture.feature_dim)?;
    let out = model.forward(&x, &mask)?;
    let masks = out.masks.ok_or_else(|| Error::Invalid("model produced no masks".into()))?;
    // (N, 1, T, C) -> (N, C, T)
    let masks = masks.squeeze(1)?.transpose(1, 2)?.contiguous()?;
    let (speakers, channels, frames) = masks.dims3()?;
    Ok(MaskTensor {
        speakers,
        channels,
        frames,
        values: masks.flatten_all()?.to_vec1::<f32>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VizMeta {
    channel_order: Vec<usize>,
    speaker_segments: Vec<Segment>,
}

/// Paths written by [`render`].
#[derive(Debug, Clone)]
pub struct RenderedFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub png: Option<PathBuf>,
}

/// Writes `<stem>.csv` (one row per displayed channel), `<stem>.json`
/// (channel order and segments) and, if asked, `<stem>.png`.
pub fn render(viz: &VizResult, dir: &Path, stem: &str, png: bool) -> Result<RenderedFiles> {
    validate(viz)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path).map_err(csv_err)?;
    for r in 0..viz.matrix.rows {
        w.write_record(viz.matrix.row(r).iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json_path = dir.join(format!("{stem}.json"));
    let meta = VizMeta {
        channel_order: viz.channel_order.clone(),
        speaker_segments: viz.speaker_segments.clone(),
    };
    fs::write(&json_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&json_path, e))?;

    let png_path = if png {
        let p = dir.join(format!("{stem}.png"));
        write_png(&viz.matrix, &p)?;
        Some(p)
    } else {
        None
    };
    Ok(RenderedFiles {
        csv: csv_path,
        json: json_path,
        png: png_path,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

fn validate(viz: &VizResult) -> Result<()> {
    if viz.speaker_segments.is_empty() {
        return Err(Error::Invalid("speaker_segments is empty".into()));
    }
    let mut sorted = viz.channel_order.clone();
    sorted.sort_unstable();
    if sorted != (0..viz.matrix.rows).collect::<Vec<_>>() {
        return Err(Error::Invalid("channel_order is not a permutation of the rows".into()));
    }
    let mut at = 0;
    for s in &viz.speaker_segments {
        if s.start != at || s.end <= s.start {
            return Err(Error::Invalid(format!("segments do not tile: gap or overlap at frame {at}")));
        }
        at = s.end;
    }
    if at != viz.matrix.cols {
        return Err(Error::shape("segment coverage", viz.matrix.cols, at));
    }
    Ok(())
}

/// Reads a heatmap CSV written by [`render`].
pub fn read_heatmap_csv(path: &Path) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    let mut data = Vec::new();
    let (mut rows, mut cols) = (0, None);
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: rows + 1,
                msg: "ragged row".into(),
            });
        }
        for field in rec.iter() {
            data.push(field.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: rows + 1,
                msg: e.to_string(),
            })?);
        }
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), data)
}

/// Blue-white-red map over [-3, 3], four pixels per cell.
fn write_png(m: &Matrix, path: &Path) -> Result<()> {
    const SCALE: u32 = 4;
    let (w, h) = (m.cols as u32 * SCALE, m.rows as u32 * SCALE);
    let img = image::RgbImage::from_fn(w.max(1), h.max(1), |x, y| {
        if m.rows == 0 || m.cols == 0 {
            return image::Rgb([255, 255, 255]);
        }
        let v = (m.get((y / SCALE) as usize, (x / SCALE) as usize) / 3.0).clamp(-1.0, 1.0);
        let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
        if v >= 0.0 {
            image::Rgb([255, fade(v), fade(v)])
        } else {
            image::Rgb([fade(-v), fade(-v), 255])
        }
    });
    img.save(path).map_err(|e| Error::Invalid(format!("writing {}: {e}", path.display())))
}
