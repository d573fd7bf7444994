//! Binary model checkpoints.
//!
//! ```text
//! "MGCK"  u8 version (=1)
//! u32 V  u32 T  u32 K  u32 L  u32 D
//! u8 strategy (0 none, 1 plain, 2 pseudo-autoregressive, 3 anchor)
//! u32 anchor_count  f64 score_scale  u8 refine
//! 3 x channel schedule (value, query/key, refine): u32 len, u32 widths...
//! u32 edge count, then u32 pairs (skeleton edges)
//! u32 parameter count, then per parameter in declaration order:
//!   u32 name_len, name (UTF-8), u32 rank, u32 dims..., f64 values...
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::attention::Strategy;
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::model::{ForecastModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"MGCK";
pub const VERSION: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn list(&mut self, v: &[usize]) {
        self.u32(v.len());
        v.iter().for_each(|&x| self.u32(x));
    }
}

pub fn to_bytes(model: &ForecastModel) -> Vec<u8> {
    let c = model.config();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u8(VERSION);
    for v in [model.joint_count(), c.input_frames, c.output_frames, c.span, c.max_hop] {
        w.u32(v);
    }
    w.u8(c.strategy.code());
    w.u32(c.anchor_count);
    w.f64(model.attention().scale);
    w.u8(c.refine as u8);
    w.list(&c.value_channels);
    w.list(&c.query_key_channels);
    w.list(&c.refine_channels);
    let edges: Vec<(usize, usize)> = model.skeleton().edges().collect();
    w.u32(edges.len());
    for (a, b) in edges {
        w.u32(a);
        w.u32(b);
    }
    w.u32(model.params().len());
    for p in model.params().iter() {
        w.u32(p.name.len());
        w.0.extend_from_slice(p.name.as_bytes());
        w.list(&p.shape);
        p.values.iter().for_each(|&v| w.f64(v));
    }
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn error(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn list(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| self.u32()).collect()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ForecastModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected \"MGCK\"".into(),
        });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let [joints, input_frames, output_frames, span, max_hop] =
        [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    let code = r.u8()?;
    let strategy = Strategy::from_code(code).ok_or_else(|| r.error("unknown strategy code"))?;
    let anchor_count = r.u32()?;
    let score_scale = Some(r.f64()?);
    let refine = r.u8()? != 0;
    let value_channels = r.list()?;
    let query_key_channels = r.list()?;
    let refine_channels = r.list()?;
    let edge_count = r.u32()?;
    let edges = (0..edge_count)
        .map(|_| Ok((r.u32()?, r.u32()?)))
        .collect::<Result<Vec<_>>>()?;
    let skeleton = SkeletonGraph::new(joints, edges)?;
    let config = ModelConfig {
        input_frames,
        output_frames,
        span,
        max_hop,
        strategy,
        anchor_count,
        score_scale,
        refine,
        value_channels,
        query_key_channels,
        refine_channels,
    };
    let mut model = ForecastModel::new(skeleton, config, 0)?;

    let count = r.u32()?;
    if count != model.params().len() {
        return Err(r.error(&format!(
            "checkpoint has {count} parameter blocks, architecture needs {}",
            model.params().len()
        )));
    }
    for p in model.params_mut().iter_mut() {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.error("parameter name is not UTF-8"))?;
        if name != p.name {
            return Err(r.error(&format!("expected parameter `{}`, found `{name}`", p.name)));
        }
        let shape = r.list()?;
        if shape != p.shape {
            return Err(r.error(&format!("parameter `{name}` has shape {shape:?}, expected {:?}", p.shape)));
        }
        for v in p.values.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(r.error("trailing bytes after last parameter"));
    }
    Ok(model)
}

pub fn save(path: impl AsRef<Path>, model: &ForecastModel) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ForecastModel> {
    from_bytes(&fs::read(path)?)
}
