//! `.semx` checkpoints: magic, version, config echo, then named f32 tensors,
//! all little-endian.

use std::path::Path;

use semix::models::ModelSpec;
use semix::{Error, Result, Tensor};

use crate::config::RunConfig;
use crate::source::build_model;

pub const MAGIC: &[u8; 4] = b"SEMX";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub echo: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Validation(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    /// Echo is the resolved config plus the shape metadata needed to rebuild
    /// the model.
    pub fn from_model(config: &RunConfig, model: &ModelSpec) -> Self {
        let shape: Vec<String> = model.input_shape().iter().map(usize::to_string).collect();
        let echo = format!("{}# input_shape = {}\n# classes = {}\n", config.to_text(), shape.join(","), model.classes());
        let tensors = model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Checkpoint { echo, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.echo.len())?;
        out.extend_from_slice(self.echo.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format { offset: 0, message: "missing SEMX magic".into() });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("checkpoint version {version}, this build reads {VERSION}"),
            });
        }
        let n = r.u32()?;
        let at = r.pos;
        let echo = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format { offset: at, message: "config echo is not UTF-8".into() })?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let n = r.u32()?;
            let at = r.pos;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Format { offset: at, message: "tensor name is not UTF-8".into() })?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::Format { offset: r.pos, message: "tensor too large".into() })?;
            let raw = r.take(len.checked_mul(4).unwrap_or(usize::MAX))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Length(format!("{} trailing bytes after tensor table", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { echo, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn meta(&self, key: &str) -> Result<&str> {
        self.echo
            .lines()
            .filter_map(|l| l.strip_prefix('#'))
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim())
            .ok_or_else(|| Error::Format { offset: 10, message: format!("config echo lacks `{key}`") })
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.echo)
    }

    /// Rebuilds the model architecture and loads the stored parameters.
    pub fn model(&self) -> Result<ModelSpec> {
        let bad = |m: String| Error::Format { offset: 10, message: m };
        let shape = self
            .meta("input_shape")?
            .split(',')
            .map(|d| d.trim().parse().map_err(|_| bad(format!("bad input_shape entry {d:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        let classes = self.meta("classes")?.parse().map_err(|_| bad("bad classes".into()))?;
        let mut model = build_model(&self.config()?.model, &shape, classes, 0)?;
        model.set_params(self.tensors.clone())?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Length(format!("checkpoint truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}
