//! Corpus generation and the on-disk corpus directory.
//!
//! Layout of a corpus directory:
//!
//! - `manifest`: `key=value` lines: `version`, `S`, `C`, `H`, `W`, `count`, `vocab_hash`
//! - `vocab.txt`: one token per line, line number = id
//! - `clips.bin`: per record, magic `AIOC`, `u32` version, `u32` S, C, H, W,
//!   then `S*C*H*W` little-endian `f32` frame values
//! - `captions.jsonl`: one JSON object per record with `id`, `text`,
//!   `shape`, `color`, `direction`, `speed`, `start_row`, `start_col`

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::clip::{
    generate_clip, render_caption, sample_spec, ClipDims, ClipSpec, Color, Direction, ShapeKind, SyntheticClip,
    OBJECT_SIZE,
};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const CORPUS_VERSION: u32 = 1;
const CLIP_MAGIC: &[u8; 4] = b"AIOC";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusConfig {
    pub count: usize,
    pub dims: ClipDims,
    pub min_speed: u32,
    pub max_speed: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { count: 2000, dims: ClipDims::DESK, min_speed: 4, max_speed: 6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dims: ClipDims,
    pub vocab: Vocabulary,
    pub clips: Vec<SyntheticClip>,
    pub captions: Vec<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

impl CorpusConfig {
    /// Rejects speed ranges whose motion cannot stay inside the frame from a
    /// centered middle-frame window.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if self.min_speed > self.max_speed {
            return Err(Error::Config(format!("min_speed {} exceeds max_speed {}", self.min_speed, self.max_speed)));
        }
        if d.frames == 0 || d.height.min(d.width) < OBJECT_SIZE {
            return Err(Error::Config(format!("clip dims {d:?} cannot hold a {OBJECT_SIZE}px object")));
        }
        let mid = (d.frames - 1) / 2;
        let reach = self.max_speed as usize * mid.max(d.frames - 1 - mid);
        let room = d.height.min(d.width) - OBJECT_SIZE;
        if 2 * reach > room {
            return Err(Error::Config(format!(
                "max_speed {} over {} frames needs {} px of travel room, {d:?} leaves {room}",
                self.max_speed,
                d.frames,
                2 * reach
            )));
        }
        Ok(())
    }
}

/// Generates `config.count` records; record `i` draws from its own stream
/// seeded with `seed ^ i`, so output does not depend on generation order.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut clips = Vec::with_capacity(config.count);
    let mut captions = Vec::with_capacity(config.count);
    for i in 0..config.count as u64 {
        let mut rng = SplitMix64::for_record(seed, i);
        let spec = sample_spec(&mut rng, config.dims, config.min_speed, config.max_speed);
        captions.push(render_caption(&spec));
        clips.push(generate_clip(&spec, config.dims, seed ^ i)?);
    }
    Ok(Corpus { dims: config.dims, vocab: Vocabulary::from_templates(), clips, captions })
}

/// Video-text matching draw: `clip` is the video shown with caption `caption`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VtmPair {
    pub clip: usize,
    pub caption: usize,
    /// 1 for the true pairing, 0 for a swapped-in video.
    pub label: usize,
}

/// Keeps the true clip for caption `index`, or with probability `p_neg`
/// swaps in a uniformly chosen different clip.
pub fn make_vtm_pair(dataset_len: usize, index: usize, p_neg: f64, rng: &mut SplitMix64) -> Result<VtmPair> {
    if index >= dataset_len {
        return Err(Error::Contract(format!("index {index} outside dataset of {dataset_len}")));
    }
    if p_neg > 0.0 && dataset_len < 2 {
        return Err(Error::Contract("negative sampling needs at least 2 clips".into()));
    }
    if rng.bernoulli(p_neg) {
        let other = rng.index(dataset_len - 1);
        let clip = if other >= index { other + 1 } else { other };
        Ok(VtmPair { clip, caption: index, label: 0 })
    } else {
        Ok(VtmPair { clip: index, caption: index, label: 1 })
    }
}

#[derive(Serialize, Deserialize)]
struct CaptionRecord {
    id: String,
    text: String,
    shape: ShapeKind,
    color: Color,
    direction: Direction,
    speed: u32,
    start_row: i64,
    start_col: i64,
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = corpus.dims;
    let manifest = format!(
        "version={CORPUS_VERSION}\nS={}\nC={}\nH={}\nW={}\ncount={}\nvocab_hash={}\n",
        d.frames,
        d.channels,
        d.height,
        d.width,
        corpus.len(),
        corpus.vocab.hash()
    );
    write_file(&dir.join("manifest"), manifest.as_bytes())?;
    write_file(&dir.join("vocab.txt"), corpus.vocab.to_file_string().as_bytes())?;

    let mut bin = Vec::with_capacity(corpus.len() * (24 + d.numel() * 4));
    for clip in &corpus.clips {
        if clip.dims != d {
            return Err(Error::DimMismatch(format!("clip {} has {:?}, corpus {:?}", clip.id, clip.dims, d)));
        }
        bin.extend_from_slice(CLIP_MAGIC);
        for v in [CORPUS_VERSION, d.frames as u32, d.channels as u32, d.height as u32, d.width as u32] {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        for v in &clip.frames {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(&dir.join("clips.bin"), &bin)?;

    let mut jsonl = Vec::new();
    for (clip, text) in corpus.clips.iter().zip(&corpus.captions) {
        let s = clip.spec;
        let record = CaptionRecord {
            id: clip.id.clone(),
            text: text.clone(),
            shape: s.shape,
            color: s.color,
            direction: s.direction,
            speed: s.speed,
            start_row: s.start.0,
            start_col: s.start.1,
        };
        serde_json::to_writer(&mut jsonl, &record).expect("serializing to memory");
        jsonl.push(b'\n');
    }
    write_file(&dir.join("captions.jsonl"), &jsonl)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses `key=value` lines, ignoring blanks.
pub(crate) fn parse_key_values(text: &str, what: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::Validation(format!("{what}: malformed line {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn required<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, what: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::Validation(format!("{what}: missing key {key}")))?
        .parse()
        .map_err(|_| Error::Validation(format!("{what}: bad value for {key}")))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_text = String::from_utf8_lossy(&read_file(&dir.join("manifest"))?).into_owned();
    let manifest = parse_key_values(&manifest_text, "manifest")?;
    let version: u32 = required(&manifest, "version", "manifest")?;
    if version != CORPUS_VERSION {
        return Err(Error::Version { what: "corpus manifest".into(), found: version, expected: CORPUS_VERSION });
    }
    let dims = ClipDims {
        frames: required(&manifest, "S", "manifest")?,
        channels: required(&manifest, "C", "manifest")?,
        height: required(&manifest, "H", "manifest")?,
        width: required(&manifest, "W", "manifest")?,
    };
    let count: usize = required(&manifest, "count", "manifest")?;
    let vocab_hash: String = required(&manifest, "vocab_hash", "manifest")?;

    let vocab_text = String::from_utf8_lossy(&read_file(&dir.join("vocab.txt"))?).into_owned();
    let vocab = Vocabulary::from_tokens(vocab_text.lines().map(String::from).collect())?;
    if vocab.hash() != vocab_hash {
        return Err(Error::Validation("vocab.txt does not match the manifest vocab_hash".into()));
    }

    let bin = read_file(&dir.join("clips.bin"))?;
    let frame_values = dims.numel();
    let mut cursor = 0usize;
    let mut frames_per_record = Vec::with_capacity(count);
    for record in 0..count {
        let header = bin
            .get(cursor..cursor + 24)
            .ok_or_else(|| Error::Truncated(format!("clips.bin header of record {record}")))?;
        if &header[..4] != CLIP_MAGIC {
            return Err(Error::Validation(format!("clips.bin record {record}: bad magic")));
        }
        let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != CORPUS_VERSION {
            return Err(Error::Version {
                what: format!("clips.bin record {record}"),
                found: word(0),
                expected: CORPUS_VERSION,
            });
        }
        let rec_dims = [word(1), word(2), word(3), word(4)].map(|v| v as usize);
        if rec_dims != [dims.frames, dims.channels, dims.height, dims.width] {
            return Err(Error::DimMismatch(format!("clips.bin record {record} has {rec_dims:?}, manifest {dims:?}")));
        }
        cursor += 24;
        let body = bin
            .get(cursor..cursor + frame_values * 4)
            .ok_or_else(|| Error::Truncated(format!("clips.bin frames of record {record}")))?;
        frames_per_record
            .push(body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect::<Vec<_>>());
        cursor += frame_values * 4;
    }
    if cursor != bin.len() {
        return Err(Error::Validation(format!("clips.bin has {} trailing bytes", bin.len() - cursor)));
    }

    let captions_text = String::from_utf8_lossy(&read_file(&dir.join("captions.jsonl"))?).into_owned();
    let lines: Vec<&str> = captions_text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != count {
        return Err(Error::Truncated(format!("captions.jsonl has {} records, manifest {count}", lines.len())));
    }
    let mut clips = Vec::with_capacity(count);
    let mut captions = Vec::with_capacity(count);
    for (i, (line, frames)) in lines.into_iter().zip(frames_per_record).enumerate() {
        let r: CaptionRecord =
            serde_json::from_str(line).map_err(|e| Error::Validation(format!("captions.jsonl record {i}: {e}")))?;
        let spec = ClipSpec {
            shape: r.shape,
            color: r.color,
            direction: r.direction,
            speed: r.speed,
            start: (r.start_row, r.start_col),
        };
        clips.push(SyntheticClip { id: r.id, spec, dims, frames });
        captions.push(r.text);
    }
    Ok(Corpus { dims, vocab, clips, captions })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize) -> Corpus {
        generate_corpus(&CorpusConfig { count, ..CorpusConfig::default() }, 17).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small(12);
        write_corpus(dir.path(), &corpus).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn empty_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small(0);
        write_corpus(dir.path(), &corpus).unwrap();
        assert!(read_corpus(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn unknown_manifest_version_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &small(2)).unwrap();
        let p = dir.path().join("manifest");
        let text = fs::read_to_string(&p).unwrap().replace("version=1", "version=9");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn truncated_clips_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &small(2)).unwrap();
        let p = dir.path().join("clips.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::Truncated(_))));
    }

    #[test]
    fn record_dims_must_match_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &small(2)).unwrap();
        let p = dir.path().join("manifest");
        let text = fs::read_to_string(&p).unwrap().replace("H=32", "H=16");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn records_are_independent_of_count() {
        let a = small(5);
        let b = small(9);
        assert_eq!(a.clips[..], b.clips[..5]);
    }

    #[test]
    fn vtm_pairs_follow_p_neg() {
        let mut rng = SplitMix64::new(4);
        for i in 0..50 {
            assert_eq!(
                make_vtm_pair(10, i % 10, 0.0, &mut rng).unwrap(),
                VtmPair { clip: i % 10, caption: i % 10, label: 1 }
            );
            let neg = make_vtm_pair(10, i % 10, 1.0, &mut rng).unwrap();
            assert_eq!(neg.label, 0);
            assert_ne!(neg.clip, neg.caption);
        }
        let negatives = (0..10_000).filter(|&i| make_vtm_pair(10, i % 10, 0.5, &mut rng).unwrap().label == 0).count();
        let frac = negatives as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
    }

    #[test]
    fn vtm_pairs_need_two_clips() {
        let mut rng = SplitMix64::new(4);
        assert!(make_vtm_pair(1, 0, 0.5, &mut rng).is_err());
        assert!(make_vtm_pair(1, 0, 0.0, &mut rng).is_ok());
    }

    #[test]
    fn speeds_must_fit_the_frame() {
        let dims = ClipDims { height: 16, width: 16, ..ClipDims::DESK };
        let cfg = |min_speed, max_speed| CorpusConfig { count: 4, dims, min_speed, max_speed };
        // 3 frames need 2 * speed px on each side of the centered window; 16 - 6 leaves 10.
        assert!(generate_corpus(&cfg(1, 5), 0).is_ok());
        assert!(matches!(generate_corpus(&cfg(1, 6), 0), Err(Error::Config(_))));
        assert!(matches!(generate_corpus(&cfg(3, 2), 0), Err(Error::Config(_))));
        CorpusConfig::default().validate().unwrap();
    }

    #[test]
    fn desk_corpus_frame_bytes() {
        // 2000 clips of 3x3x32x32 single-precision values.
        let bytes = 2000 * ClipDims::DESK.numel() * 4;
        assert_eq!(bytes, 73_728_000);
    }
}
