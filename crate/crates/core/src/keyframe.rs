//! Perceptual-change keyframe extraction.
//!
//! Each frame transition is scored by a blend of two terms, both in `[0, 1]`:
//!
//! * colour: per-channel 32-bin histogram L1 distance in YCbCr (BT.601, full
//!   range), halved to `[0, 1]` and weighted 0.6 luma / 0.2 Cb / 0.2 Cr;
//! * structure: mean absolute difference of per-pixel luma gradient magnitude
//!   (forward differences), divided by its maximum `255·√2`.
//!
//! The score is `0.5·colour + 0.5·structure`, with `score[0] = 0`.
//! Colour conversion is done in fixed point so that a uniform pixel offset that
//! is a multiple of the bin width moves luma by exactly that offset and leaves
//! chroma untouched.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::workers::bounded_map;

pub const HIST_BINS: usize = 32;
pub const BIN_WIDTH: u32 = 256 / HIST_BINS as u32;
pub const LUMA_WEIGHT: f64 = 0.6;
pub const CHROMA_WEIGHT: f64 = 0.2;
pub const COLOUR_BLEND: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum KeyframeError {
    #[error("frame {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        index: usize,
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("frame sequence is empty")]
    EmptySequence,
    #[error("frame buffer has {got} bytes, expected {want}")]
    BadBuffer { want: usize, got: usize },
    #[error("invalid keyframe config: {0}")]
    InvalidConfig(String),
    #[error("inconsistent counts: {n_keyframes} keyframes of {n_frames} frames")]
    CountInconsistent { n_frames: u64, n_keyframes: u64 },
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("line {line_no}: malformed keyframe record: {reason}")]
    MalformedLine { line_no: usize, reason: String },
}

/// An 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: u32,
    height: u32,
    rgb: Vec<u8>,
}

impl Frame {
    pub fn new(width: u32, height: u32, rgb: Vec<u8>) -> Result<Self, KeyframeError> {
        let want = width as usize * height as usize * 3;
        if rgb.len() != want || want == 0 {
            return Err(KeyframeError::BadBuffer {
                want,
                got: rgb.len(),
            });
        }
        Ok(Self { width, height, rgb })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let data = rgb.iter().copied().cycle().take(n * 3).collect();
        Self::new(width, height, data).expect("filled frame has a consistent buffer")
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data).expect("from_fn frame has a consistent buffer")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.rgb.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }
}

/// Decoded frames of one video with uniform dimensions.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    pub fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Result<Self, KeyframeError> {
        let first = frames.first().ok_or(KeyframeError::EmptySequence)?;
        let (w, h) = (first.width, first.height);
        for (index, f) in frames.iter().enumerate() {
            if f.width != w || f.height != h {
                return Err(KeyframeError::DimensionMismatch {
                    index,
                    want_w: w,
                    want_h: h,
                    got_w: f.width,
                    got_h: f.height,
                });
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-frame change scores; `scores[0]` is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceSeries<T> {
    pub scores: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframeSet {
    pub indices: Vec<usize>,
    pub n_frames: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeConfig<T> {
    pub lambda: T,
    pub min_gap: usize,
    pub smoothing_window: usize,
}

impl<T: Scalar> Default for KeyframeConfig<T> {
    fn default() -> Self {
        Self {
            lambda: T::lit(1.5),
            min_gap: 5,
            smoothing_window: 3,
        }
    }
}

impl<T: Scalar> KeyframeConfig<T> {
    pub fn validate(&self) -> Result<(), KeyframeError> {
        if !(self.lambda >= T::zero()) || !self.lambda.is_finite() {
            return Err(KeyframeError::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.min_gap < 1 {
            return Err(KeyframeError::InvalidConfig("min_gap must be >= 1".into()));
        }
        if self.smoothing_window < 1 || self.smoothing_window.is_multiple_of(2) {
            return Err(KeyframeError::InvalidConfig(format!(
                "smoothing_window must be odd and >= 1, got {}",
                self.smoothing_window
            )));
        }
        Ok(())
    }

    /// Stable 16-hex-digit token identifying the selection parameters.
    pub fn config_hash(&self) -> String {
        let canonical = format!(
            "keyframe/v1;lambda={:?};min_gap={};smoothing_window={}",
            self.lambda.as_f64(),
            self.min_gap,
            self.smoothing_window
        );
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Per-frame channel planes used by the salience score.
struct FramePlanes {
    luma: Vec<u8>,
    hist: [[u32; HIST_BINS]; 3],
    gradient: Vec<f64>,
}

/// Fixed-point BT.601 full-range conversion, results floored to `0..=255`.
#[inline]
fn ycbcr(p: [u8; 3]) -> [u8; 3] {
    let (r, g, b) = (i64::from(p[0]), i64::from(p[1]), i64::from(p[2]));
    let y = (299_000 * r + 587_000 * g + 114_000 * b).div_euclid(1_000_000);
    let cb = 128 + (-168_736 * r - 331_264 * g + 500_000 * b).div_euclid(1_000_000);
    let cr = 128 + (500_000 * r - 418_688 * g - 81_312 * b).div_euclid(1_000_000);
    [y, cb, cr].map(|v| v.clamp(0, 255) as u8)
}

impl FramePlanes {
    fn new(frame: &Frame) -> Self {
        let (w, h) = (frame.width as usize, frame.height as usize);
        let mut luma = Vec::with_capacity(w * h);
        let mut hist = [[0u32; HIST_BINS]; 3];
        for p in frame.pixels() {
            let ycc = ycbcr(p);
            for (c, v) in ycc.iter().enumerate() {
                hist[c][(*v as u32 / BIN_WIDTH) as usize] += 1;
            }
            luma.push(ycc[0]);
        }
        let mut gradient = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let here = f64::from(luma[y * w + x]);
                let gx = if x + 1 < w {
                    f64::from(luma[y * w + x + 1]) - here
                } else {
                    0.0
                };
                let gy = if y + 1 < h {
                    f64::from(luma[(y + 1) * w + x]) - here
                } else {
                    0.0
                };
                gradient.push(gx.hypot(gy));
            }
        }
        Self {
            luma,
            hist,
            gradient,
        }
    }

    fn distance(&self, prev: &FramePlanes) -> f64 {
        let npix = self.luma.len() as f64;
        let channel = |c: usize| -> f64 {
            let l1: u64 = self.hist[c]
                .iter()
                .zip(&prev.hist[c])
                .map(|(&a, &b)| u64::from(a.abs_diff(b)))
                .sum();
            l1 as f64 / npix / 2.0
        };
        let colour =
            LUMA_WEIGHT * channel(0) + CHROMA_WEIGHT * channel(1) + CHROMA_WEIGHT * channel(2);
        let structure = self
            .gradient
            .iter()
            .zip(&prev.gradient)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / npix
            / (255.0 * std::f64::consts::SQRT_2);
        COLOUR_BLEND * colour + (1.0 - COLOUR_BLEND) * structure
    }
}

/// Scores each frame by its perceptual distance to the previous frame.
pub fn frame_salience<T: Scalar>(seq: &FrameSequence) -> SalienceSeries<T> {
    let mut scores = Vec::with_capacity(seq.len());
    let mut prev: Option<FramePlanes> = None;
    for frame in seq.frames() {
        let planes = FramePlanes::new(frame);
        let score = prev.as_ref().map_or(0.0, |p| planes.distance(p));
        scores.push(T::lit(score));
        prev = Some(planes);
    }
    SalienceSeries { scores }
}

/// Centered moving average; windows are truncated at the series edges.
pub fn smooth<T: Scalar>(scores: &[T], window: usize) -> Vec<T> {
    let half = window / 2;
    (0..scores.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(scores.len());
            let sum: T = scores[lo..hi].iter().copied().sum();
            sum / T::count(hi - lo)
        })
        .collect()
}

/// Picks keyframes from a salience series.
///
/// The threshold is `mean + lambda·stddev` of the smoothed series. Candidates
/// are local maxima of the raw series whose score reaches the threshold; they
/// are accepted greedily by descending score (ties to the earlier frame),
/// skipping any within `min_gap` of an accepted index. Frame 0 is accepted up
/// front. A flat smoothed series yields `{0}`.
pub fn select_keyframes<T: Scalar>(s: &SalienceSeries<T>, cfg: &KeyframeConfig<T>) -> KeyframeSet {
    let scores = &s.scores;
    let n = scores.len();
    let mut indices = vec![0usize];
    let config_hash = cfg.config_hash();
    if n > 1 {
        let smoothed = smooth(scores, cfg.smoothing_window);
        let count = T::count(n);
        let mean = smoothed.iter().copied().sum::<T>() / count;
        let var = smoothed
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / count;
        let std = var.sqrt();
        if std > T::zero() {
            let tau = mean + cfg.lambda * std;
            let mut candidates: Vec<usize> = (1..n)
                .filter(|&i| {
                    let v = scores[i];
                    v > T::zero()
                        && v >= tau
                        && v >= scores[i - 1]
                        && (i + 1 == n || v >= scores[i + 1])
                })
                .collect();
            candidates.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for c in candidates {
                if indices.iter().all(|&k| k.abs_diff(c) >= cfg.min_gap) {
                    indices.push(c);
                }
            }
            indices.sort_unstable();
        }
    }
    KeyframeSet {
        indices,
        n_frames: n,
        config_hash,
    }
}

pub fn extract_keyframes<T: Scalar>(
    seq: &FrameSequence,
    cfg: &KeyframeConfig<T>,
) -> Result<KeyframeSet, KeyframeError> {
    cfg.validate()?;
    Ok(select_keyframes(&frame_salience::<T>(seq), cfg))
}

/// Fraction of frames discarded by keyframe selection: `1 − keyframes/frames`.
pub fn compression_ratio<T: Scalar>(n_frames: u64, n_keyframes: u64) -> Result<T, KeyframeError> {
    if n_frames == 0 || n_keyframes > n_frames {
        return Err(KeyframeError::CountInconsistent {
            n_frames,
            n_keyframes,
        });
    }
    Ok(T::one() - T::lit(n_keyframes as f64) / T::lit(n_frames as f64))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> KeyframeError {
    KeyframeError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// The `*.png` files of a frame directory in lexicographic order; frame `i`
/// of the loaded sequence is `frame_paths(dir)[i]`.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>, KeyframeError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads `dir/*.png` in lexicographic file-name order.
pub fn load_frame_dir(dir: &Path, fps: f64) -> Result<FrameSequence, KeyframeError> {
    let paths = frame_paths(dir)?;
    let frames = paths
        .iter()
        .map(|p| {
            let img = image::open(p).map_err(|e| io_err(p, e))?.to_rgb8();
            let (w, h) = img.dimensions();
            Frame::new(w, h, img.into_raw())
        })
        .collect::<Result<Vec<_>, _>>()?;
    FrameSequence::new(frames, fps)
}

/// Writes frames as `dir/000000.png`, `dir/000001.png`, ...
pub fn write_frame_dir(dir: &Path, seq: &FrameSequence) -> Result<(), KeyframeError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (i, f) in seq.frames().iter().enumerate() {
        let path = dir.join(format!("{i:06}.png"));
        image::save_buffer(&path, f.rgb(), f.width, f.height, image::ColorType::Rgb8)
            .map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Extracts keyframes for every `<frames_root>/<video_id>/` directory.
///
/// Videos are processed on up to `workers` threads; results are keyed by id.
pub fn extract_frames_root<T: Scalar>(
    frames_root: &Path,
    video_ids: &[String],
    cfg: &KeyframeConfig<T>,
    workers: usize,
) -> Result<BTreeMap<String, KeyframeSet>, KeyframeError> {
    cfg.validate()?;
    let results = bounded_map(video_ids, workers, |id| {
        let seq = load_frame_dir(&frames_root.join(id), 30.0)?;
        extract_keyframes(&seq, cfg)
    });
    video_ids
        .iter()
        .cloned()
        .zip(results)
        .map(|(id, r)| r.map(|k| (id, k)))
        .collect()
}

/// Lists the video directories directly under `frames_root`, sorted.
pub fn list_frame_dirs(frames_root: &Path) -> Result<Vec<String>, KeyframeError> {
    let mut ids: Vec<String> = fs::read_dir(frames_root)
        .map_err(|e| io_err(frames_root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_owned))
        .collect();
    ids.sort();
    Ok(ids)
}

#[derive(Serialize, Deserialize)]
struct KeyframeLine {
    video_id: String,
    n_frames: usize,
    indices: Vec<usize>,
    config_hash: String,
}

pub fn write_keyframes_jsonl<W: Write>(
    sets: &BTreeMap<String, KeyframeSet>,
    mut out: W,
) -> std::io::Result<()> {
    for (id, set) in sets {
        let line = KeyframeLine {
            video_id: id.clone(),
            n_frames: set.n_frames,
            indices: set.indices.clone(),
            config_hash: set.config_hash.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_keyframes_jsonl<R: BufRead>(
    input: R,
) -> Result<BTreeMap<String, KeyframeSet>, KeyframeError> {
    let mut out = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| KeyframeError::MalformedLine {
            line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: KeyframeLine =
            serde_json::from_str(&line).map_err(|e| KeyframeError::MalformedLine {
                line_no,
                reason: e.to_string(),
            })?;
        let ok = rec.indices.first() == Some(&0)
            && rec.indices.windows(2).all(|w| w[0] < w[1])
            && rec.indices.last().is_some_and(|&l| l < rec.n_frames);
        if !ok {
            return Err(KeyframeError::MalformedLine {
                line_no,
                reason: "indices must start at 0, increase strictly and stay below n_frames"
                    .into(),
            });
        }
        out.insert(
            rec.video_id,
            KeyframeSet {
                indices: rec.indices,
                n_frames: rec.n_frames,
                config_hash: rec.config_hash,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(scores: &[f64]) -> SalienceSeries<f64> {
        SalienceSeries {
            scores: scores.to_vec(),
        }
    }

    fn cfg() -> KeyframeConfig<f64> {
        KeyframeConfig::default()
    }

    #[test]
    fn ycbcr_of_greys_has_neutral_chroma() {
        for v in [0u8, 17, 128, 255] {
            assert_eq!(ycbcr([v, v, v]), [v, 128, 128]);
        }
    }

    #[test]
    fn identical_frames_score_zero() {
        let f = Frame::from_fn(8, 6, |x, y| [(x * 20) as u8, (y * 30) as u8, 77]);
        let seq = FrameSequence::new(vec![f; 5], 30.0).unwrap();
        assert_eq!(frame_salience::<f64>(&seq).scores, vec![0.0; 5]);
        let one = FrameSequence::new(vec![Frame::filled(4, 4, [1, 2, 3])], 30.0).unwrap();
        assert_eq!(frame_salience::<f64>(&one).scores, vec![0.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = FrameSequence::new(
            vec![Frame::filled(4, 4, [0; 3]), Frame::filled(4, 5, [0; 3])],
            30.0,
        )
        .unwrap_err();
        assert!(matches!(err, KeyframeError::DimensionMismatch { index: 1, .. }));
        assert_eq!(FrameSequence::new(vec![], 30.0).unwrap_err(), KeyframeError::EmptySequence);
    }

    #[test]
    fn all_zero_scores_select_first_frame() {
        let k = select_keyframes(&series(&[0.0; 30]), &cfg());
        assert_eq!(k.indices, vec![0]);
        assert_eq!(k.n_frames, 30);
    }

    #[test]
    fn single_spike_is_selected() {
        let mut s = vec![0.0; 20];
        s[10] = 0.8;
        assert_eq!(select_keyframes(&series(&s), &cfg()).indices, vec![0, 10]);
    }

    #[test]
    fn close_spikes_keep_the_stronger() {
        let mut s = vec![0.0; 30];
        s[10] = 0.9;
        s[12] = 0.7;
        assert_eq!(select_keyframes(&series(&s), &cfg()).indices, vec![0, 10]);
    }

    #[test]
    fn spike_near_start_is_blocked_by_first_frame() {
        let mut s = vec![0.0; 30];
        s[3] = 0.9;
        s[20] = 0.5;
        assert_eq!(select_keyframes(&series(&s), &cfg()).indices, vec![0, 20]);
    }

    #[test]
    fn config_validation_and_hash() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.smoothing_window = 4;
        assert!(c.validate().is_err());
        c.smoothing_window = 5;
        c.min_gap = 0;
        assert!(c.validate().is_err());
        c.min_gap = 5;
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        assert_eq!(cfg().config_hash(), cfg().config_hash());
        assert_eq!(cfg().config_hash().len(), 16);
        let other = KeyframeConfig { lambda: 2.0, ..cfg() };
        assert_ne!(other.config_hash(), cfg().config_hash());
        assert_eq!(KeyframeConfig::<f32>::default().config_hash(), cfg().config_hash());
    }

    #[test]
    fn compression_ratio_cases() {
        assert_eq!(compression_ratio::<f64>(100, 100).unwrap(), 0.0);
        assert_eq!(compression_ratio::<f64>(100, 0).unwrap(), 1.0);
        assert!(compression_ratio::<f64>(0, 0).is_err());
        assert!(compression_ratio::<f64>(10, 11).is_err());
    }

    #[test]
    fn keyframe_jsonl_round_trip_and_validation() {
        let mut m = BTreeMap::new();
        m.insert(
            "v1".to_string(),
            KeyframeSet { indices: vec![0, 12], n_frames: 40, config_hash: "abc".into() },
        );
        let mut buf = Vec::new();
        write_keyframes_jsonl(&m, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"video_id\":\"v1\",\"n_frames\":40,\"indices\":[0,12],\"config_hash\":\"abc\"}\n"
        );
        assert_eq!(read_keyframes_jsonl(buf.as_slice()).unwrap(), m);
        let bad = r#"{"video_id":"v","n_frames":5,"indices":[0,7],"config_hash":"x"}"#;
        assert!(read_keyframes_jsonl(bad.as_bytes()).is_err());
    }
}
