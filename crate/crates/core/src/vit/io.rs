//! `VQTW` weights container.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "VQTW" version
//! d m heads n_patches mlp_ratio patch image channels mode(0 paper, 1 full)
//! tensors as f32 LE, row-major, in ViTParams::visit order
//! optional trailer: "QTOK" layers T, then per layer: active flag, D*T f32 if active
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{param_shapes, Mode, ViTConfig, ViTWeights};
use crate::tensor::Tensor;
use crate::vqt::QueryTokenSet;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"VQTW";
pub const WEIGHTS_VERSION: u32 = 1;
const QTOK_MAGIC: &[u8; 4] = b"QTOK";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated while reading {0}")]
    Truncated(String),
    #[error("invalid header field {field}: {detail}")]
    Header { field: &'static str, detail: String },
    #[error("shape mismatch in {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0} trailing bytes after the last section")]
    Trailing(usize),
}

pub(crate) struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Reader { inner }
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, FormatError> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => FormatError::Truncated(what.to_string()),
            _ => FormatError::Io(e),
        })?;
        Ok(buf)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let b = self.bytes(4, "magic")?;
        let found = [b[0], b[1], b[2], b[3]];
        if &found != expected {
            return Err(FormatError::BadMagic {
                found,
                expected: *expected,
            });
        }
        Ok(())
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, FormatError> {
        let b = self.bytes(4 * n, what)?;
        let vals: Vec<f64> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(what.to_string()));
        }
        Ok(vals)
    }

    /// Reads whatever is left.
    pub(crate) fn rest(&mut self) -> Result<Vec<u8>, FormatError> {
        let mut buf = Vec::new();
        self.inner.read_to_end(&mut buf)?;
        Ok(buf)
    }
}

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f32s(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn header_u32(field: &'static str, v: usize) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::Header {
        field,
        detail: format!("{v} does not fit in u32"),
    })
}

pub fn write_weights(
    w: &mut impl Write,
    cfg: &ViTConfig,
    weights: &ViTWeights,
    queries: Option<&QueryTokenSet>,
) -> Result<(), FormatError> {
    weights.check_shapes(cfg).map_err(FormatError::Shape)?;
    w.write_all(WEIGHTS_MAGIC)?;
    put_u32(w, WEIGHTS_VERSION)?;
    let fields = [
        ("d", cfg.d),
        ("m", cfg.m),
        ("heads", cfg.heads),
        ("n", cfg.patches()),
        ("mlp_ratio", cfg.mlp_ratio),
        ("patch", cfg.patch),
        ("image", cfg.image),
        ("channels", cfg.channels),
        ("mode", if cfg.mode == Mode::Full { 1 } else { 0 }),
    ];
    for (name, v) in fields {
        put_u32(w, header_u32(name, v)?)?;
    }
    let mut res = Ok(());
    weights.visit(|_, t| {
        if res.is_ok() {
            res = put_f32s(w, t.data());
        }
    });
    res?;
    if let Some(q) = queries {
        if q.layers() != cfg.m {
            return Err(FormatError::Shape(format!(
                "query tokens for {} layers, config has {}",
                q.layers(),
                cfg.m
            )));
        }
        w.write_all(QTOK_MAGIC)?;
        put_u32(w, header_u32("layers", q.layers())?)?;
        put_u32(w, header_u32("T", q.t())?)?;
        for p in q.tokens() {
            match p {
                Some(p) => {
                    put_u32(w, 1)?;
                    put_f32s(w, p.data())?;
                }
                None => put_u32(w, 0)?,
            }
        }
    }
    Ok(())
}

pub struct WeightsFile {
    pub config: ViTConfig,
    pub weights: ViTWeights,
    pub queries: Option<QueryTokenSet>,
}

pub fn read_weights(r: impl Read) -> Result<WeightsFile, FormatError> {
    let mut r = Reader::new(r);
    r.magic(WEIGHTS_MAGIC)?;
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(FormatError::Version(version));
    }
    let mut vals = [0usize; 9];
    let names = ["d", "m", "heads", "n", "mlp_ratio", "patch", "image", "channels", "mode"];
    for (v, name) in vals.iter_mut().zip(names) {
        *v = r.u32(name)? as usize;
    }
    let mode = match vals[8] {
        0 => Mode::Paper,
        1 => Mode::Full,
        other => {
            return Err(FormatError::Header {
                field: "mode",
                detail: format!("unknown mode {other}"),
            })
        }
    };
    let config = ViTConfig {
        d: vals[0],
        m: vals[1],
        heads: vals[2],
        mlp_ratio: vals[4],
        patch: vals[5],
        image: vals[6],
        channels: vals[7],
        mode,
    };
    config.validate().map_err(|e| FormatError::Header {
        field: "config",
        detail: e.to_string(),
    })?;
    if config.patches() != vals[3] {
        return Err(FormatError::Header {
            field: "n",
            detail: format!("{} patches, image/patch sizes give {}", vals[3], config.patches()),
        });
    }
    let shapes = param_shapes(&config);
    let mut named = Vec::new();
    shapes.visit(|name, s| named.push((name, s.clone())));
    let mut tensors = Vec::with_capacity(named.len());
    for (name, shape) in &named {
        let n = shape.iter().product();
        let data = r.f32s(n, name)?;
        tensors.push(Tensor::new(shape.clone(), data).expect("sized from shape"));
    }
    let mut it = tensors.into_iter();
    let weights = shapes.map(|_| it.next().expect("one tensor per shape"));

    let rest = r.rest()?;
    let queries = if rest.is_empty() {
        None
    } else {
        let mut tr = Reader::new(rest.as_slice());
        tr.magic(QTOK_MAGIC)?;
        let layers = tr.u32("query layer count")? as usize;
        if layers != config.m {
            return Err(FormatError::Shape(format!(
                "query trailer has {layers} layers, config has {}",
                config.m
            )));
        }
        let t = tr.u32("query token count")? as usize;
        let mut tokens = Vec::with_capacity(layers);
        for m in 0..layers {
            let what = format!("query tokens of layer {m}");
            match tr.u32(&what)? {
                0 => tokens.push(None),
                1 => {
                    let data = tr.f32s(config.d * t, &what)?;
                    tokens.push(Some(Tensor::new(vec![config.d, t], data).expect("sized")));
                }
                other => {
                    return Err(FormatError::Header {
                        field: "active",
                        detail: format!("flag {other} in {what}"),
                    })
                }
            }
        }
        let left = tr.rest()?.len();
        if left != 0 {
            return Err(FormatError::Trailing(left));
        }
        Some(QueryTokenSet::from_parts(t, tokens).map_err(|e| FormatError::Shape(e.to_string()))?)
    };
    Ok(WeightsFile {
        config,
        weights,
        queries,
    })
}

pub fn save_weights(
    path: &Path,
    cfg: &ViTConfig,
    weights: &ViTWeights,
    queries: Option<&QueryTokenSet>,
) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, cfg, weights, queries)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<WeightsFile, FormatError> {
    read_weights(BufReader::new(File::open(path)?))
}

/// Loads a file and checks it against an expected configuration. A mismatch
/// names the first tensor whose shape differs, or the header field when all
/// shapes agree.
pub fn load_weights_expecting(path: &Path, cfg: &ViTConfig) -> Result<WeightsFile, FormatError> {
    let file = load_weights(path)?;
    if &file.config == cfg {
        return Ok(file);
    }
    let mut theirs = Vec::new();
    param_shapes(&file.config).visit(|name, s| theirs.push((name, s.clone())));
    let mut ours = Vec::new();
    param_shapes(cfg).visit(|name, s| ours.push((name, s.clone())));
    for (i, (name, s)) in ours.iter().enumerate() {
        match theirs.get(i) {
            Some((_, t)) if t == s => {}
            Some((_, t)) => {
                return Err(FormatError::Shape(format!(
                    "tensor {name}: file has {t:?}, config expects {s:?}"
                )))
            }
            None => {
                return Err(FormatError::Shape(format!(
                    "tensor {name}: missing from file with {} layers",
                    file.config.m
                )))
            }
        }
    }
    if theirs.len() > ours.len() {
        return Err(FormatError::Shape(format!(
            "tensor {}: file has {} layers, config expects {}",
            theirs[ours.len()].0, file.config.m, cfg.m
        )));
    }
    let field = if file.config.heads != cfg.heads {
        "heads"
    } else {
        "mode"
    };
    Err(FormatError::Header {
        field,
        detail: "file config differs from the expected one".into(),
    })
}
