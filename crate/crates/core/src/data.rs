//! Pose sequences, the `MGPS` container format, CSV import, sliding windows,
//! the synthetic articulated-chain generator and skeleton presets.
//!
//! `MGPS` layout (little-endian throughout):
//!
//! ```text
//! "MGPS"  u8 version (=1)
//! per sequence, until end of file:
//!   u32 joints  u32 frames  f64 rate  u32 label_len  label bytes (UTF-8)
//!   f64 x frames*joints*3 coordinates, frame-major then joint then x,y,z
//! ```
//!
//! An empty file holds zero sequences.

use std::f64::consts::TAU;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::tensor::Tensor;

pub const MGPS_MAGIC: &[u8; 4] = b"MGPS";
pub const MGPS_VERSION: u8 = 1;
pub const DEFAULT_RATE: f64 = 25.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    joints: usize,
    /// `[frames, joints, 3]`, row-major.
    coords: Vec<f64>,
    pub rate: f64,
    pub label: Option<String>,
}

impl PoseSequence {
    pub fn new(joints: usize, coords: Vec<f64>, rate: f64, label: Option<String>) -> Result<Self> {
        if joints == 0 || coords.len() % (joints * 3) != 0 {
            return Err(Error::dim("pose_sequence", &[coords.len()], &[joints, 3]));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::config("coords", format!("non-finite coordinate at index {i}")));
        }
        Ok(PoseSequence {
            joints,
            coords,
            rate,
            label,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn frame_count(&self) -> usize {
        self.coords.len() / (self.joints * 3)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.joints * 3;
        &self.coords[f * n..(f + 1) * n]
    }

    /// Frames `start..start + len` as a flat slice.
    pub fn frames(&self, start: usize, len: usize) -> &[f64] {
        let n = self.joints * 3;
        &self.coords[start * n..(start + len) * n]
    }

    pub fn joint(&self, f: usize, v: usize) -> [f64; 3] {
        let p = &self.frame(f)[v * 3..v * 3 + 3];
        [p[0], p[1], p[2]]
    }
}

// ------------------------------------------------------------------ MGPS

pub fn write_sequences(seqs: &[PoseSequence]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MGPS_MAGIC);
    out.push(MGPS_VERSION);
    for s in seqs {
        out.extend_from_slice(&(s.joints as u32).to_le_bytes());
        out.extend_from_slice(&(s.frame_count() as u32).to_le_bytes());
        out.extend_from_slice(&s.rate.to_le_bytes());
        let label = s.label.as_deref().unwrap_or("").as_bytes();
        out.extend_from_slice(&(label.len() as u32).to_le_bytes());
        out.extend_from_slice(label);
        for c in &s.coords {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

pub fn save_sequences(path: impl AsRef<Path>, seqs: &[PoseSequence]) -> Result<()> {
    fs::write(path, write_sequences(seqs))?;
    Ok(())
}

pub fn load_sequences(path: impl AsRef<Path>) -> Result<Vec<PoseSequence>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_sequences(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn fail<T>(&self, offset: usize, message: String) -> Result<T> {
        Err(Error::Parse { offset, message })
    }
}

pub fn read_sequences(bytes: &[u8]) -> Result<Vec<PoseSequence>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MGPS_MAGIC {
        return cur.fail(0, "bad magic, expected \"MGPS\"".into());
    }
    let version = cur.take(1, "version")?[0];
    if version != MGPS_VERSION {
        return cur.fail(4, format!("unsupported version {version}"));
    }
    let mut seqs = Vec::new();
    while cur.pos < bytes.len() {
        let record = cur.pos;
        let joints = cur.u32("joint count")? as usize;
        if joints == 0 {
            return cur.fail(record, "joint count must be positive".into());
        }
        if let Some(first) = seqs.first().map(PoseSequence::joint_count) {
            if first != joints {
                return cur.fail(record, format!("joint count {joints} differs from first sequence ({first})"));
            }
        }
        let frames = cur.u32("frame count")? as usize;
        let rate_at = cur.pos;
        let rate = cur.f64("rate")?;
        if !(rate > 0.0 && rate.is_finite()) {
            return cur.fail(rate_at, format!("invalid frame rate {rate}"));
        }
        let label_len = cur.u32("label length")? as usize;
        let label_at = cur.pos;
        let label = std::str::from_utf8(cur.take(label_len, "label")?)
            .map_err(|_| Error::Parse {
                offset: label_at,
                message: "label is not UTF-8".into(),
            })?
            .to_owned();
        let count = frames * joints * 3;
        let mut coords = Vec::with_capacity(count);
        for _ in 0..count {
            let at = cur.pos;
            let c = cur.f64("coordinates")?;
            if !c.is_finite() {
                return cur.fail(at, format!("non-finite coordinate {c}"));
            }
            coords.push(c);
        }
        seqs.push(PoseSequence {
            joints,
            coords,
            rate,
            label: (!label.is_empty()).then_some(label),
        });
    }
    Ok(seqs)
}

// ------------------------------------------------------------------- CSV

/// Reads one sequence from CSV with header `frame,joint,x,y,z`. Every
/// `(frame, joint)` pair in the dense grid must appear exactly once.
pub fn import_csv(path: impl AsRef<Path>, rate: f64, label: Option<String>) -> Result<PoseSequence> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, rate, label)
}

pub fn parse_csv(text: &str, rate: f64, label: Option<String>) -> Result<PoseSequence> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::ParseLine {
        line: 1,
        message: e.to_string(),
    })?;
    let expected = ["frame", "joint", "x", "y", "z"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::ParseLine {
            line: 1,
            message: format!("header must be {}", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let bad = |message: String| Error::ParseLine { line, message };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", rec.len())));
        }
        let frame: usize = rec[0].parse().map_err(|_| bad(format!("bad frame `{}`", &rec[0])))?;
        let joint: usize = rec[1].parse().map_err(|_| bad(format!("bad joint `{}`", &rec[1])))?;
        let mut xyz = [0.0; 3];
        for (d, slot) in xyz.iter_mut().enumerate() {
            let v: f64 = rec[2 + d].parse().map_err(|_| bad(format!("bad coordinate `{}`", &rec[2 + d])))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite coordinate `{}`", &rec[2 + d])));
            }
            *slot = v;
        }
        rows.push((line, frame, joint, xyz));
    }
    let frames = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let joints = rows.iter().map(|r| r.2 + 1).max().unwrap_or(0);
    if rows.is_empty() {
        return Err(Error::ParseLine {
            line: 2,
            message: "no pose rows".into(),
        });
    }
    let mut coords = vec![f64::NAN; frames * joints * 3];
    let mut seen = vec![false; frames * joints];
    for (line, f, v, xyz) in rows {
        if std::mem::replace(&mut seen[f * joints + v], true) {
            return Err(Error::ParseLine {
                line,
                message: format!("duplicate entry for frame {f}, joint {v}"),
            });
        }
        coords[(f * joints + v) * 3..(f * joints + v) * 3 + 3].copy_from_slice(&xyz);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::ParseLine {
            line: 0,
            message: format!(
                "inconsistent joint count: frame {} lacks joint {}",
                missing / joints,
                missing % joints
            ),
        });
    }
    PoseSequence::new(joints, coords, rate, label)
}

// --------------------------------------------------------------- windows

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// `[T, V, 3]`
    pub input: Vec<f64>,
    /// `[K, V, 3]`, the frames immediately after `input`.
    pub target: Vec<f64>,
    pub label: Option<String>,
    /// (sequence index, first frame)
    pub origin: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct WindowSet {
    pub windows: Vec<Window>,
    pub skeleton: SkeletonGraph,
    pub input_frames: usize,
    pub output_frames: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    /// Stacks the selected windows into `([n, T, V, 3], [n, K, V, 3])`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let v = self.joint_count();
        let mut x = Vec::with_capacity(indices.len() * self.input_frames * v * 3);
        let mut y = Vec::with_capacity(indices.len() * self.output_frames * v * 3);
        for &i in indices {
            x.extend_from_slice(&self.windows[i].input);
            y.extend_from_slice(&self.windows[i].target);
        }
        let n = indices.len();
        (
            Tensor::new(x, &[n, self.input_frames, v, 3]).expect("window sizes"),
            Tensor::new(y, &[n, self.output_frames, v, 3]).expect("window sizes"),
        )
    }
}

/// Number of windows of `input + output` frames at `stride` in `frames`.
pub fn window_count(frames: usize, input: usize, output: usize, stride: usize) -> usize {
    let span = input + output;
    if frames < span {
        0
    } else {
        (frames - span) / stride + 1
    }
}

/// All windows of `T + K` consecutive frames, every `stride` frames.
pub fn make_windows(
    seqs: &[PoseSequence],
    skeleton: &SkeletonGraph,
    input_frames: usize,
    output_frames: usize,
    stride: usize,
) -> Result<WindowSet> {
    if input_frames == 0 || output_frames == 0 || stride == 0 {
        return Err(Error::config("windows", "T, K and stride must be at least 1"));
    }
    let mut windows = Vec::new();
    for (si, s) in seqs.iter().enumerate() {
        if s.joint_count() != skeleton.joint_count() {
            return Err(Error::dim(
                "make_windows",
                &[s.joint_count()],
                &[skeleton.joint_count()],
            ));
        }
        for w in 0..window_count(s.frame_count(), input_frames, output_frames, stride) {
            let start = w * stride;
            windows.push(Window {
                input: s.frames(start, input_frames).to_vec(),
                target: s.frames(start + input_frames, output_frames).to_vec(),
                label: s.label.clone(),
                origin: (si, start),
            });
        }
    }
    Ok(WindowSet {
        windows,
        skeleton: skeleton.clone(),
        input_frames,
        output_frames,
    })
}

// ------------------------------------------------------------- synthetic

/// Periodic articulated chain: unit segments, root pinned at the origin,
/// every joint angle a sinusoid of the given period.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub joints: usize,
    /// Peak joint-angle deviation in radians.
    pub amplitude: f64,
    /// Period in frames.
    pub period: f64,
    pub frames: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian coordinate noise.
    #[serde(default)]
    pub noise: f64,
    /// Index of the first generated frame.
    #[serde(default)]
    pub start_frame: usize,
}

fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn synth_kinematic(cfg: &SynthConfig) -> Result<PoseSequence> {
    if cfg.joints < 2 {
        return Err(Error::config("synthetic.joints", "need at least 2 joints"));
    }
    if !(cfg.period > 0.0) {
        return Err(Error::config("synthetic.period", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let segs = cfg.joints - 1;
    // Per segment: rest yaw, rest pitch, yaw phase, pitch phase.
    let shape: Vec<[f64; 4]> = (0..segs)
        .map(|_| {
            [
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.0..TAU),
                rng.random_range(0.0..TAU),
            ]
        })
        .collect();
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("positive std"));
    let mut coords = Vec::with_capacity(cfg.frames * cfg.joints * 3);
    for f in cfg.start_frame..cfg.start_frame + cfg.frames {
        let phase = TAU * f as f64 / cfg.period;
        let mut rot = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut pos = [0.0; 3];
        coords.extend(pos);
        for &[yaw0, pitch0, a, b] in &shape {
            let yaw = yaw0 + cfg.amplitude * (phase + a).sin();
            let pitch = pitch0 + 0.5 * cfg.amplitude * (phase + b).sin();
            rot = matmul3(&rot, &matmul3(&rot_z(yaw), &rot_y(pitch)));
            for (d, p) in pos.iter_mut().enumerate() {
                *p += rot[d][0];
            }
            coords.extend(pos);
        }
    }
    if let Some(dist) = noise {
        coords.iter_mut().for_each(|c| *c += dist.sample(&mut rng));
    }
    PoseSequence::new(cfg.joints, coords, DEFAULT_RATE, Some("synthetic".into()))
}

// --------------------------------------------------------------- presets

const H36M22: &str = include_str!("../assets/h36m22.txt");

pub const PRESETS: &str = "chain_<n>, h36m22";

/// `chain_<n>` (path graph on `n` joints) or `h36m22`.
pub fn skeleton_preset(name: &str) -> Result<SkeletonGraph> {
    let unknown = || Error::UnknownPreset {
        name: name.to_owned(),
        available: PRESETS.to_owned(),
    };
    if name == "h36m22" {
        let edges = H36M22
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                let mut it = l.split_whitespace().map(|t| t.parse::<usize>().expect("asset edge"));
                (it.next().expect("parent"), it.next().expect("child"))
            });
        return SkeletonGraph::new(22, edges);
    }
    let n: usize = name
        .strip_prefix("chain_")
        .and_then(|n| n.parse().ok())
        .filter(|&n| n >= 1)
        .ok_or_else(unknown)?;
    SkeletonGraph::new(n, (1..n).map(|i| (i - 1, i)))
}
