//! Two-speaker mixture simulation over a synthetic token corpus.
//!
//! Every voice renders every token as a fixed pattern of frames; utterances
//! are token concatenations with a little additive noise. Mixtures are formed
//! in feature space either left-aligned (shorter source fully overlapped) or
//! with the second source delayed.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::fnv1a;

pub const PATTERN_FRAMES: usize = 8;
pub const NOISE_STD: f32 = 0.05;
pub const GAIN_RANGE: (f32, f32) = (0.7, 1.0);

/// Independent generator for item `index` of stream `tag` under `seed`.
pub fn item_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let key = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(fnv1a(tag.as_bytes()))
        .rotate_left(23)
        ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    ChaCha8Rng::seed_from_u64(key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceUtterance {
    /// Row-major `frames x feature_dim`.
    pub features: Vec<f32>,
    pub frames: usize,
    pub feature_dim: usize,
    /// Token indices into the recognizer vocabulary (never the blank).
    pub transcript: Vec<usize>,
    pub voice_id: usize,
}

impl SourceUtterance {
    pub fn new(features: Vec<f32>, feature_dim: usize, transcript: Vec<usize>, voice_id: usize) -> Result<Self> {
        if feature_dim == 0 || features.is_empty() || features.len() % feature_dim != 0 {
            return Err(Error::shape("source features", format!("k * {feature_dim}, k >= 1"), features.len()));
        }
        if transcript.is_empty() {
            return Err(Error::Invalid("source transcript is empty".into()));
        }
        Ok(SourceUtterance {
            frames: features.len() / feature_dim,
            features,
            feature_dim,
            transcript,
            voice_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedSource {
    pub source: SourceUtterance,
    pub offset_frames: usize,
    pub gain: f32,
}

impl PlacedSource {
    pub fn end(&self) -> usize {
        self.offset_frames + self.source.frames
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedUtterance {
    pub id: String,
    /// Row-major `frames x feature_dim`.
    pub mixture: Vec<f32>,
    pub frames: usize,
    pub feature_dim: usize,
    pub sources: Vec<PlacedSource>,
    /// Frames covered by two or more sources, over the mixture length.
    pub overlap_ratio: f64,
}

/// Sums gain-scaled sources at their offsets, in source order.
pub fn mix_sources(id: impl Into<String>, sources: Vec<PlacedSource>) -> Result<MixedUtterance> {
    let first = sources.first().ok_or_else(|| Error::Invalid("mixture needs sources".into()))?;
    let f = first.source.feature_dim;
    for s in &sources {
        if s.source.feature_dim != f {
            return Err(Error::shape("source feature dim", f, s.source.feature_dim));
        }
        if !(s.gain > 0.0) {
            return Err(Error::Invalid(format!("gain must be positive, got {}", s.gain)));
        }
    }
    let frames = sources.iter().map(PlacedSource::end).max().unwrap_or(0);
    let mut mixture = vec![0f32; frames * f];
    for s in &sources {
        let dst = &mut mixture[s.offset_frames * f..s.end() * f];
        for (m, x) in dst.iter_mut().zip(&s.source.features) {
            *m += s.gain * x;
        }
    }
    let overlap = overlap_frames(&sources, frames);
    Ok(MixedUtterance {
        id: id.into(),
        mixture,
        frames,
        feature_dim: f,
        overlap_ratio: overlap as f64 / frames as f64,
        sources,
    })
}

fn overlap_frames(sources: &[PlacedSource], frames: usize) -> usize {
    (0..frames)
        .filter(|&t| sources.iter().filter(|s| s.offset_frames <= t && t < s.end()).count() >= 2)
        .count()
}

fn distinct_voices(s1: &SourceUtterance, s2: &SourceUtterance) -> Result<()> {
    if s1.voice_id == s2.voice_id {
        return Err(Error::Invalid(format!(
            "both sources use voice {}; a mixture needs two speakers",
            s1.voice_id
        )));
    }
    Ok(())
}

/// Both sources start at frame 0.
pub fn mix_left_aligned(id: impl Into<String>, s1: SourceUtterance, s2: SourceUtterance, gains: (f32, f32)) -> Result<MixedUtterance> {
    distinct_voices(&s1, &s2)?;
    mix_sources(
        id,
        vec![
            PlacedSource { source: s1, offset_frames: 0, gain: gains.0 },
            PlacedSource { source: s2, offset_frames: 0, gain: gains.1 },
        ],
    )
}

/// Second source starts `delay` frames after the first.
pub fn mix_with_delay(id: impl Into<String>, s1: SourceUtterance, s2: SourceUtterance, gains: (f32, f32), delay: usize) -> Result<MixedUtterance> {
    distinct_voices(&s1, &s2)?;
    mix_sources(
        id,
        vec![
            PlacedSource { source: s1, offset_frames: 0, gain: gains.0 },
            PlacedSource { source: s2, offset_frames: delay, gain: gains.1 },
        ],
    )
}

/// Delay drawn uniformly from `[1, T1]`.
pub fn mix_delayed(id: impl Into<String>, s1: SourceUtterance, s2: SourceUtterance, gains: (f32, f32), rng: &mut impl Rng) -> Result<MixedUtterance> {
    distinct_voices(&s1, &s2)?;
    let delay = rng.random_range(1..=s1.frames);
    mix_with_delay(id, s1, s2, gains, delay)
}

impl MixedUtterance {
    pub fn transcripts(&self) -> Vec<Vec<usize>> {
        self.sources.iter().map(|s| s.source.transcript.clone()).collect()
    }

    /// Source `i` scaled by its gain and placed at its offset on a
    /// mixture-length zero canvas.
    pub fn source_canvas(&self, i: usize) -> Vec<f32> {
        let f = self.feature_dim;
        let s = &self.sources[i];
        let mut out = vec![0f32; self.frames * f];
        for (o, x) in out[s.offset_frames * f..s.end() * f].iter_mut().zip(&s.source.features) {
            *o = s.gain * x;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Sources start together; the shorter is fully overlapped.
    Left,
    /// Second source delayed uniformly within the first.
    Delayed,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Protocol::Left),
            "delayed" => Ok(Protocol::Delayed),
            other => Err(Error::Invalid(format!("unknown protocol {other:?} (left|delayed)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub num_voices: usize,
    pub feature_dim: usize,
    /// Source utterances per split.
    pub utterances: SplitCounts,
    #[serde(default = "default_min_tokens")]
    pub min_tokens: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

fn default_min_tokens() -> usize {
    3
}

fn default_max_tokens() -> usize {
    8
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be >= 2"));
        }
        if self.num_voices < 2 {
            return Err(Error::config("num_voices", "must be >= 2"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be >= 1"));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::config("min_tokens", "need 1 <= min_tokens <= max_tokens"));
        }
        Ok(())
    }
}

/// Voice/token patterns plus rendered source utterances for each split.
/// Token `k` of the corpus is vocabulary index `k + 1`; index 0 is the blank.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    /// `[voice][token][frame][feature]`, flattened.
    patterns: Vec<f32>,
    pub train: Vec<SourceUtterance>,
    pub dev: Vec<SourceUtterance>,
    pub test: Vec<SourceUtterance>,
}

impl Corpus {
    pub fn pattern(&self, voice: usize, token: usize) -> &[f32] {
        let n = PATTERN_FRAMES * self.config.feature_dim;
        let start = (voice * self.config.vocab_size + token) * n;
        &self.patterns[start..start + n]
    }

    pub fn split(&self, name: &str) -> Result<&[SourceUtterance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }

    fn render(&self, transcript: Vec<usize>, voice: usize, rng: &mut impl Rng) -> SourceUtterance {
        let noise = Normal::new(0.0f32, NOISE_STD).expect("finite std");
        let mut features = Vec::with_capacity(transcript.len() * PATTERN_FRAMES * self.config.feature_dim);
        for &tok in &transcript {
            features.extend(self.pattern(voice, tok - 1).iter().map(|&p| p + noise.sample(rng)));
        }
        SourceUtterance {
            frames: transcript.len() * PATTERN_FRAMES,
            feature_dim: self.config.feature_dim,
            features,
            transcript,
            voice_id: voice,
        }
    }
}

fn draw_transcript(cfg: &CorpusConfig, rng: &mut impl Rng) -> Vec<usize> {
    let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
    (0..len).map(|_| rng.random_range(1..=cfg.vocab_size)).collect()
}

pub fn gen_synthetic_corpus(config: CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = item_rng(config.seed, "patterns", 0);
    let std_normal = Normal::new(0.0f32, 1.0).expect("finite std");
    let n = config.num_voices * config.vocab_size * PATTERN_FRAMES * config.feature_dim;
    let patterns = (0..n).map(|_| std_normal.sample(&mut rng)).collect();
    let mut corpus = Corpus {
        config: config.clone(),
        patterns,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };

    // Held-out content first; training utterances redraw on collision.
    let mut held_out = HashSet::new();
    for (name, count) in [("test", config.utterances.test), ("dev", config.utterances.dev), ("train", config.utterances.train)] {
        let mut items = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = item_rng(config.seed, name, i as u64);
            let voice = rng.random_range(0..config.num_voices);
            let mut transcript = draw_transcript(&config, &mut rng);
            if name == "train" {
                let mut attempts = 0;
                while held_out.contains(&transcript) {
                    attempts += 1;
                    if attempts > 1000 {
                        return Err(Error::Invalid("cannot draw training content disjoint from held-out splits".into()));
                    }
                    transcript = draw_transcript(&config, &mut rng);
                }
            } else {
                held_out.insert(transcript.clone());
            }
            items.push(corpus.render(transcript, voice, &mut rng));
        }
        match name {
            "test" => corpus.test = items,
            "dev" => corpus.dev = items,
            _ => corpus.train = items,
        }
    }
    Ok(corpus)
}

/// `count` two-speaker mixtures drawn from `pool`, item `i` keyed by `(seed, tag, i)`.
pub fn make_mixtures(pool: &[SourceUtterance], count: usize, protocol: Protocol, seed: u64, tag: &str) -> Result<Vec<MixedUtterance>> {
    let voices: HashSet<usize> = pool.iter().map(|s| s.voice_id).collect();
    if voices.len() < 2 {
        return Err(Error::Invalid(format!("split {tag:?} has fewer than two voices")));
    }
    (0..count)
        .map(|i| {
            let mut rng = item_rng(seed, &format!("mix-{tag}"), i as u64);
            let a = rng.random_range(0..pool.len());
            let mut b = rng.random_range(0..pool.len());
            while pool[b].voice_id == pool[a].voice_id {
                b = rng.random_range(0..pool.len());
            }
            let gains = (
                rng.random_range(GAIN_RANGE.0..=GAIN_RANGE.1),
                rng.random_range(GAIN_RANGE.0..=GAIN_RANGE.1),
            );
            let id = format!("{tag}-{i:05}");
            let (s1, s2) = (pool[a].clone(), pool[b].clone());
            match protocol {
                Protocol::Left => mix_left_aligned(id, s1, s2, gains),
                Protocol::Delayed => mix_delayed(id, s1, s2, gains, &mut rng),
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSource {
    transcript: Vec<usize>,
    offset_frames: usize,
    gain: f32,
    voice_id: usize,
    clean_features_path: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    features_path: String,
    /// `[feature_dim, frames]`
    shape: [usize; 2],
    sources: Vec<ManifestSource>,
}

pub fn write_f32_file(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Invalid(format!("{}: length {} is not a multiple of 4", path.display(), bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes one JSON object per line and the feature binaries next to the
/// manifest under `features/`. Paths inside the manifest are relative to it.
pub fn write_manifest(path: &Path, mixtures: &[MixedUtterance]) -> Result<()> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut out = Vec::new();
    for m in mixtures {
        let rel = format!("features/{}.f32", m.id);
        write_f32_file(&dir.join(&rel), &m.mixture)?;
        let mut sources = Vec::with_capacity(m.sources.len());
        for (i, s) in m.sources.iter().enumerate() {
            let clean = format!("features/{}.src{i}.f32", m.id);
            write_f32_file(&dir.join(&clean), &s.source.features)?;
            sources.push(ManifestSource {
                transcript: s.source.transcript.clone(),
                offset_frames: s.offset_frames,
                gain: s.gain,
                voice_id: s.source.voice_id,
                clean_features_path: clean,
            });
        }
        let line = ManifestLine {
            id: m.id.clone(),
            features_path: rel,
            shape: [m.feature_dim, m.frames],
            sources,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<MixedUtterance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let [f, frames] = entry.shape;
        if f == 0 || frames == 0 {
            return Err(parse_err(format!("degenerate shape {:?}", entry.shape)));
        }
        let mixture = read_f32_file(&dir.join(&entry.features_path))?;
        if mixture.len() != f * frames {
            return Err(parse_err(format!(
                "shape {:?} needs {} values, {} holds {}",
                entry.shape,
                f * frames,
                entry.features_path,
                mixture.len()
            )));
        }
        let mut sources = Vec::with_capacity(entry.sources.len());
        for s in entry.sources {
            let features = read_f32_file(&dir.join(&s.clean_features_path))?;
            let source = SourceUtterance::new(features, f, s.transcript, s.voice_id).map_err(|e| parse_err(e.to_string()))?;
            sources.push(PlacedSource {
                source,
                offset_frames: s.offset_frames,
                gain: s.gain,
            });
        }
        if sources.iter().map(PlacedSource::end).max() != Some(frames) {
            return Err(parse_err("sources do not span the mixture length".into()));
        }
        let overlap = overlap_frames(&sources, frames);
        out.push(MixedUtterance {
            id: entry.id,
            mixture,
            frames,
            feature_dim: f,
            sources,
            overlap_ratio: overlap as f64 / frames as f64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(frames: usize, voice: usize, fill: f32) -> SourceUtterance {
        let features = (0..frames * 2).map(|i| fill + i as f32 * 0.01).collect();
        SourceUtterance::new(features, 2, vec![1, 2], voice).unwrap()
    }

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            seed: 5,
            vocab_size: 6,
            num_voices: 3,
            feature_dim: 4,
            utterances: SplitCounts { train: 30, dev: 6, test: 5 },
            min_tokens: 3,
            max_tokens: 8,
        }
    }

    #[test]
    fn left_aligned_overlap_is_min_over_max() {
        let m = mix_left_aligned("m", src(100, 0, 1.0), src(60, 1, 2.0), (1.0, 1.0)).unwrap();
        assert_eq!(m.frames, 100);
        assert_eq!(m.overlap_ratio, 0.6);
        let m = mix_left_aligned("m", src(40, 0, 1.0), src(40, 1, 2.0), (1.0, 1.0)).unwrap();
        assert_eq!(m.overlap_ratio, 1.0);
    }

    #[test]
    fn same_voice_is_rejected() {
        assert!(mix_left_aligned("m", src(10, 1, 1.0), src(10, 1, 2.0), (1.0, 1.0)).is_err());
    }

    #[test]
    fn delay_arithmetic() {
        let m = mix_with_delay("m", src(100, 0, 1.0), src(80, 1, 2.0), (1.0, 1.0), 50).unwrap();
        assert_eq!(m.frames, 130);
        assert_eq!((m.overlap_ratio * 130.0).round() as usize, 50);
        let seq = mix_with_delay("m", src(100, 0, 1.0), src(80, 1, 2.0), (1.0, 1.0), 100).unwrap();
        assert_eq!(seq.overlap_ratio, 0.0);
    }

    #[test]
    fn delayed_replays_with_same_seed() {
        let run = || {
            let mut rng = item_rng(3, "t", 0);
            mix_delayed("m", src(30, 0, 1.0), src(20, 1, 2.0), (0.8, 0.9), &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        let bits = |m: &MixedUtterance| m.mixture.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.sources[1].offset_frames, b.sources[1].offset_frames);
        assert!((1..=30).contains(&a.sources[1].offset_frames));
    }

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = gen_synthetic_corpus(small_config()).unwrap();
        let b = gen_synthetic_corpus(small_config()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (30, 6, 5));
        for u in a.train.iter().chain(&a.dev) {
            assert!((3..=8).contains(&u.transcript.len()));
            assert_eq!(u.frames, u.transcript.len() * PATTERN_FRAMES);
            assert!(u.transcript.iter().all(|&t| (1..=6).contains(&t)));
        }
    }

    #[test]
    fn voices_render_tokens_differently() {
        let c = gen_synthetic_corpus(small_config()).unwrap();
        for k in 0..6 {
            let d: f32 = c.pattern(0, k).iter().zip(c.pattern(1, k)).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d > 0.0);
        }
    }

    #[test]
    fn splits_are_content_disjoint() {
        let c = gen_synthetic_corpus(small_config()).unwrap();
        let held: HashSet<_> = c.dev.iter().chain(&c.test).map(|u| u.transcript.clone()).collect();
        assert!(c.train.iter().all(|u| !held.contains(&u.transcript)));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let c = gen_synthetic_corpus(small_config()).unwrap();
        let mixes = make_mixtures(&c.dev, 4, Protocol::Delayed, 9, "dev").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.jsonl");
        write_manifest(&path, &mixes).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), mixes);

        let empty = dir.path().join("empty.jsonl");
        write_manifest(&empty, &[]).unwrap();
        assert!(read_manifest(&empty).unwrap().is_empty());

        let text = fs::read_to_string(&path).unwrap();
        let broken = text.replacen("\"shape\":[4,", "\"shape\":[5,", 1);
        let bad = dir.path().join("bad.jsonl");
        fs::write(&bad, broken).unwrap();
        let err = read_manifest(&bad).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        fs::write(&bad, format!("{}\nnot json\n", text.lines().next().unwrap())).unwrap();
        assert!(matches!(read_manifest(&bad).unwrap_err(), Error::Parse { line: 2, .. }));
    }
}
