//! Weight bundle container: versioned header, architecture block, a
//! manifest of (name, shape, dtype) entries, then contiguous little-endian
//! IEEE-754 single-precision payloads in manifest order.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8  bytes  "RPWEIGHT"
//! version    u32       currently 1
//! config     feature_dim u32, cloud_points u32,
//!            points: k u32, embed u32, state u32, blocks u32, pos_dim u32,
//!            rgb: input u32, patch u32, n_stages u32, widths[n] u32,
//!                 blocks_per_stage u32, state u32,
//!            aligner: blocks u32, heads u32, buckets u32,
//!                     min_dist f64, max_dist f64
//! count      u32       number of tensors
//! manifest   per tensor: name_len u32, name bytes,
//!            ndim u32, dims[ndim] u64, dtype u8 (0 = f32)
//! payload    per tensor, manifest order: len * 4 bytes of f32
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use refpose_core::seqmodel::{
    AlignerConfig, ModelConfig, PointsConfig, RgbConfig, Tensor, WeightBundle,
};

use super::IoError;

const MAGIC: &[u8; 8] = b"RPWEIGHT";
const VERSION: u32 = 1;

pub fn write_weights(path: &Path, bundle: &WeightBundle) -> Result<(), IoError> {
    let file = std::fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| IoError::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;

    let cfg = bundle.config();
    let mut header: Vec<u32> = vec![
        cfg.feature_dim as u32,
        cfg.cloud_points as u32,
        cfg.points.k as u32,
        cfg.points.embed as u32,
        cfg.points.state as u32,
        cfg.points.blocks as u32,
        cfg.points.pos_dim as u32,
        cfg.rgb.input as u32,
        cfg.rgb.patch as u32,
        cfg.rgb.widths.len() as u32,
    ];
    header.extend(cfg.rgb.widths.iter().map(|&v| v as u32));
    header.extend([
        cfg.rgb.blocks_per_stage as u32,
        cfg.rgb.state as u32,
        cfg.aligner.blocks as u32,
        cfg.aligner.heads as u32,
        cfg.aligner.buckets as u32,
    ]);
    for v in header {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&cfg.aligner.min_dist.to_le_bytes()).map_err(io_err)?;
    w.write_all(&cfg.aligner.max_dist.to_le_bytes()).map_err(io_err)?;

    let tensors = bundle.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(t.name.as_bytes()).map_err(io_err)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        w.write_all(&[0u8]).map_err(io_err)?; // dtype f32
    }
    for t in tensors {
        for &v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

struct Reader<'a> {
    inner: BufReader<std::fs::File>,
    path: &'a Path,
    /// Human-readable description of what is being read, for error text.
    context: String,
}

impl Reader<'_> {
    fn fail(&self, what: &str) -> IoError {
        IoError::format(
            self.path,
            format!("unexpected end of file reading {what} ({})", self.context),
        )
    }

    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N], IoError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| self.fail(what))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.bytes::<8>(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.bytes::<8>(what)?))
    }
}

pub fn read_weights(path: &Path) -> Result<WeightBundle, IoError> {
    let file = std::fs::File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(file), path, context: "header".into() };

    let magic = r.bytes::<8>("magic")?;
    if &magic != MAGIC {
        return Err(IoError::format(path, "not a weight bundle (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(IoError::format(path, format!("unsupported version {version}")));
    }

    let feature_dim = r.u32("feature_dim")? as usize;
    let cloud_points = r.u32("cloud_points")? as usize;
    let points = PointsConfig {
        k: r.u32("points.k")? as usize,
        embed: r.u32("points.embed")? as usize,
        state: r.u32("points.state")? as usize,
        blocks: r.u32("points.blocks")? as usize,
        pos_dim: r.u32("points.pos_dim")? as usize,
    };
    let rgb_input = r.u32("rgb.input")? as usize;
    let rgb_patch = r.u32("rgb.patch")? as usize;
    let n_stages = r.u32("rgb.n_stages")? as usize;
    if n_stages > 16 {
        return Err(IoError::format(path, format!("implausible stage count {n_stages}")));
    }
    let mut widths = Vec::with_capacity(n_stages);
    for i in 0..n_stages {
        widths.push(r.u32(&format!("rgb.widths[{i}]"))? as usize);
    }
    let rgb = RgbConfig {
        input: rgb_input,
        patch: rgb_patch,
        widths,
        blocks_per_stage: r.u32("rgb.blocks_per_stage")? as usize,
        state: r.u32("rgb.state")? as usize,
    };
    let aligner = AlignerConfig {
        blocks: r.u32("aligner.blocks")? as usize,
        heads: r.u32("aligner.heads")? as usize,
        buckets: r.u32("aligner.buckets")? as usize,
        min_dist: r.f64("aligner.min_dist")?,
        max_dist: r.f64("aligner.max_dist")?,
    };
    let config = ModelConfig { feature_dim, cloud_points, points, rgb, aligner };

    let count = r.u32("tensor count")? as usize;
    if count > 1_000_000 {
        return Err(IoError::format(path, format!("implausible tensor count {count}")));
    }
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    for i in 0..count {
        r.context = format!("manifest entry {i}");
        let name_len = r.u32("name length")? as usize;
        if name_len > 4096 {
            return Err(IoError::format(path, format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.inner
            .read_exact(&mut name_bytes)
            .map_err(|_| r.fail("tensor name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| IoError::format(path, format!("manifest entry {i}: invalid utf-8 name")))?;
        r.context = format!("manifest entry `{name}`");
        let ndim = r.u32("rank")? as usize;
        if ndim > 8 {
            return Err(IoError::format(path, format!("tensor `{name}`: implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let dtype = r.bytes::<1>("dtype")?[0];
        if dtype != 0 {
            return Err(IoError::format(
                path,
                format!("tensor `{name}`: unsupported dtype {dtype}"),
            ));
        }
        manifest.push((name, shape));
    }

    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in manifest {
        r.context = format!("tensor `{name}`");
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = vec![0u8; len * 4];
        r.inner
            .read_exact(&mut buf)
            .map_err(|_| IoError::format(path, format!("unexpected end of file reading tensor `{name}`")))?;
        for chunk in buf.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        tensors.push(Tensor { name, shape, data });
    }

    WeightBundle::from_tensors(config, tensors)
        .map_err(|e| IoError::format(path, e.to_string()))
}
