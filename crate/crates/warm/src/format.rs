//! Binary episode container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "WARM-EP1"                 8 bytes
//! version  u16
//! N K U L D                           5 x u32
//! class_ids                           N x u32
//! per cloud (N*K support, then U query):
//!   features  L*D f64, row-major
//!   labels    L u32
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use warm_core::episode::{Episode, GeneratorConfig, PointCloud};
use warm_core::Matrix;

use crate::error::{AppError, AppResult};
use crate::sidecar::Sidecar;

pub const MAGIC: &[u8; 8] = b"WARM-EP1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8 + 2 + 5 * 4;
pub const EPISODE_EXT: &str = "warm";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub n_way: u32,
    pub k_shot: u32,
    pub num_query: u32,
    pub num_points: u32,
    pub dim: u32,
}

impl Header {
    fn clouds(&self) -> u64 {
        self.n_way as u64 * self.k_shot as u64 + self.num_query as u64
    }

    fn cloud_bytes(&self, dim: u64) -> u64 {
        let l = self.num_points as u64;
        l * dim * 8 + l * 4
    }

    fn body_bytes(&self) -> u64 {
        self.n_way as u64 * 4 + self.clouds() * self.cloud_bytes(self.dim as u64)
    }
}

/// Decoding failure at a byte offset.
#[derive(Debug, Clone, PartialEq)]
pub struct FormatError {
    pub offset: u64,
    pub msg: String,
}

impl FormatError {
    fn at(offset: usize, msg: impl Into<String>) -> Self {
        Self { offset: offset as u64, msg: msg.into() }
    }

    pub fn with_path(self, path: &Path) -> AppError {
        AppError::Format { path: path.to_path_buf(), offset: self.offset, msg: self.msg }
    }
}

pub fn encode_episode(ep: &Episode) -> Vec<u8> {
    let first = &ep.support[0];
    let header = Header {
        n_way: ep.n_way as u32,
        k_shot: ep.k_shot as u32,
        num_query: ep.query.len() as u32,
        num_points: first.len() as u32,
        dim: first.dim() as u32,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + header.body_bytes() as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [header.n_way, header.k_shot, header.num_query, header.num_points, header.dim] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in &ep.class_ids {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for cloud in ep.support.iter().chain(&ep.query) {
        for v in cloud.features.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &cloud.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::at(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_header(buf: &[u8]) -> Result<Header, FormatError> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::at(0, format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(FormatError::at(8, format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut fields = [0u32; 5];
    for (f, name) in fields.iter_mut().zip(["N", "K", "U", "L", "D"]) {
        *f = cur.u32(name)?;
    }
    let [n_way, k_shot, num_query, num_points, dim] = fields;
    let header = Header { n_way, k_shot, num_query, num_points, dim };
    for (v, name, off) in [(n_way, "N", 10), (k_shot, "K", 14), (num_points, "L", 22), (dim, "D", 26)] {
        if v == 0 {
            return Err(FormatError::at(off, format!("{name} must be positive")));
        }
    }
    Ok(header)
}

/// Dimension implied by the payload length, when it is a whole number.
fn implied_dim(h: &Header, payload: u64) -> Option<u64> {
    let per_cloud = payload.checked_sub(h.n_way as u64 * 4)? / h.clouds().max(1);
    let l = h.num_points as u64;
    let feat = per_cloud.checked_sub(l * 4)?;
    let exact = h.n_way as u64 * 4 + h.clouds() * per_cloud == payload;
    (exact && feat % (8 * l) == 0).then(|| feat / (8 * l))
}

pub fn decode_episode(buf: &[u8]) -> Result<Episode, FormatError> {
    let h = decode_header(buf)?;
    let payload = (buf.len() - HEADER_LEN) as u64;
    if payload != h.body_bytes() {
        if let Some(d) = implied_dim(&h, payload) {
            if d != h.dim as u64 {
                return Err(FormatError::at(
                    26,
                    format!("header declares D={} but the payload holds D={d}", h.dim),
                ));
            }
        }
        let (offset, what) = if payload < h.body_bytes() {
            (buf.len(), "truncated payload")
        } else {
            (HEADER_LEN + h.body_bytes() as usize, "trailing bytes after payload")
        };
        return Err(FormatError::at(
            offset,
            format!("{what}: expected {} payload bytes, found {payload}", h.body_bytes()),
        ));
    }

    let mut cur = Cursor { buf, pos: HEADER_LEN };
    let class_ids = (0..h.n_way).map(|_| cur.u32("class id")).collect::<Result<Vec<_>, _>>()?;
    let (l, d) = (h.num_points as usize, h.dim as usize);
    let mut clouds = Vec::with_capacity(h.clouds() as usize);
    for _ in 0..h.clouds() {
        let start = cur.pos;
        let data: Vec<f64> =
            cur.take(l * d * 8, "features")?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::at(start + i * 8, "non-finite feature value"));
        }
        let label_start = cur.pos;
        let labels: Vec<u32> =
            cur.take(l * 4, "labels")?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = labels.iter().position(|&v| v > h.n_way) {
            return Err(FormatError::at(
                label_start + i * 4,
                format!("label {} outside 0..={}", labels[i], h.n_way),
            ));
        }
        let features = Matrix::from_vec(l, d, data).map_err(|e| FormatError::at(start, e.to_string()))?;
        clouds.push(PointCloud::new(features, labels).map_err(|e| FormatError::at(start, e.to_string()))?);
    }
    let query = clouds.split_off((h.n_way * h.k_shot) as usize);
    let ep = Episode { n_way: h.n_way as usize, k_shot: h.k_shot as usize, support: clouds, query, class_ids };
    ep.validate().map_err(|e| FormatError::at(HEADER_LEN, e.to_string()))?;
    Ok(ep)
}

pub fn save_episode(path: &Path, ep: &Episode) -> AppResult<()> {
    fs::write(path, encode_episode(ep)).map_err(|e| AppError::io(path, e))
}

pub fn load_episode(path: &Path) -> AppResult<Episode> {
    let buf = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_episode(&buf).map_err(|e| e.with_path(path))
}

/// Loads an episode and rejects it unless its features have `dim` channels.
pub fn load_episode_with_dim(path: &Path, dim: usize) -> AppResult<Episode> {
    let ep = load_episode(path)?;
    if ep.dim() != dim {
        return Err(AppError::Format {
            path: path.to_path_buf(),
            offset: 26,
            msg: format!("file has D={}, expected D={dim}", ep.dim()),
        });
    }
    Ok(ep)
}

pub fn episode_file_name(index: usize) -> String {
    format!("episode_{index:05}.{EPISODE_EXT}")
}

/// Writes `episodes` into `dir` plus a `generator.json` sidecar.
pub fn write_episode_set(dir: &Path, episodes: &[Episode], sidecar: &Sidecar<GeneratorConfig>) -> AppResult<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut paths = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let p = dir.join(episode_file_name(i));
        save_episode(&p, ep)?;
        paths.push(p);
    }
    sidecar.write(&dir.join("generator.json"))?;
    Ok(paths)
}

/// Every episode file of `dir` in name order.
pub fn read_episode_set(dir: &Path) -> AppResult<Vec<Episode>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| AppError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == EPISODE_EXT))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(AppError::Usage(format!("no .{EPISODE_EXT} files in {}", dir.display())));
    }
    paths.iter().map(|p| load_episode(p)).collect()
}
