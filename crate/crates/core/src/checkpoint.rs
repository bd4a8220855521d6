//! Checkpoint files: a text header (format version, full config echo,
//! normaliser, progress) followed by named little-endian `f64` arrays.

use crate::autodiff::Array;
use crate::config::{ConfigError, RunConfig};
use crate::data::Normalizer;
use crate::model::{Model, ModelError, ParamMap};
use crate::training::AdamState;
use std::io::{self, BufRead, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "scoretpp-checkpoint";
const END_HEADER: &str = "end-header";
const MAX_NAME_LEN: u32 = 4096;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("malformed array record: {0}")]
    Array(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// `num_types` is always filled in.
    pub config: RunConfig,
    pub normalizer: Normalizer,
    pub epoch: usize,
    pub model: Model,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(&mut io::BufReader::new(file))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        let mut config = self.config.clone();
        config.num_types = self.model.config().num_types;
        let arrays = self.model.params().len() + self.adam.m.len() + self.adam.v.len();
        writeln!(w, "{MAGIC} {FORMAT_VERSION}")?;
        writeln!(w, "epoch {}", self.epoch)?;
        writeln!(w, "adam_step {}", self.adam.step)?;
        writeln!(w, "normalizer {}", self.normalizer.to_header())?;
        writeln!(w, "arrays {arrays}")?;
        for line in config.to_text().lines() {
            writeln!(w, "config {line}")?;
        }
        writeln!(w, "{END_HEADER}")?;
        for (name, array) in self.model.params() {
            write_array(w, name, array)?;
        }
        for (name, array) in &self.adam.m {
            write_array(w, &format!("adam.m.{name}"), array)?;
        }
        for (name, array) in &self.adam.v {
            write_array(w, &format!("adam.v.{name}"), array)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let version = line
            .trim_end()
            .strip_prefix(MAGIC)
            .ok_or(CheckpointError::BadMagic)?
            .trim()
            .parse::<u32>()
            .map_err(|_| CheckpointError::BadMagic)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let mut epoch = None;
        let mut adam_step = None;
        let mut normalizer = None;
        let mut arrays = None;
        let mut config_text = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(CheckpointError::Header("missing end-header".into()));
            }
            let text = line.trim_end_matches(['\n', '\r']);
            if text == END_HEADER {
                break;
            }
            let (key, rest) = text.split_once(' ').unwrap_or((text, ""));
            let number = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| CheckpointError::Header(format!("bad {key} `{v}`")))
            };
            match key {
                "epoch" => epoch = Some(number(rest)? as usize),
                "adam_step" => adam_step = Some(number(rest)?),
                "arrays" => arrays = Some(number(rest)? as usize),
                "normalizer" => {
                    normalizer = Some(
                        Normalizer::from_header(rest)
                            .ok_or_else(|| CheckpointError::Header(format!("bad normalizer `{rest}`")))?,
                    )
                }
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                other => return Err(CheckpointError::Header(format!("unknown header line `{other}`"))),
            }
        }
        let missing = |what: &str| CheckpointError::Header(format!("missing {what}"));
        let epoch = epoch.ok_or_else(|| missing("epoch"))?;
        let step = adam_step.ok_or_else(|| missing("adam_step"))?;
        let normalizer = normalizer.ok_or_else(|| missing("normalizer"))?;
        let arrays = arrays.ok_or_else(|| missing("arrays"))?;
        let config = RunConfig::from_text(&config_text)?;

        let mut params = ParamMap::new();
        let mut m = ParamMap::new();
        let mut v = ParamMap::new();
        for _ in 0..arrays {
            let (name, array) = read_array(r)?;
            let (target, key) = if let Some(rest) = name.strip_prefix("adam.m.") {
                (&mut m, rest.to_string())
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                (&mut v, rest.to_string())
            } else {
                (&mut params, name)
            };
            if target.insert(key.clone(), array).is_some() {
                return Err(CheckpointError::Array(format!("duplicate array `{key}`")));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(CheckpointError::Array("trailing bytes after last array".into()));
        }
        let model = Model::from_params(config.model_config(config.num_types), params)?;
        Ok(Self {
            config,
            normalizer,
            epoch,
            model,
            adam: AdamState { step, m, v },
        })
    }
}

fn write_array<W: Write>(w: &mut W, name: &str, array: &Array) -> io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&(array.rows() as u64).to_le_bytes())?;
    w.write_all(&(array.cols() as u64).to_le_bytes())?;
    for x in array.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_array<R: Read>(r: &mut R) -> Result<(String, Array), CheckpointError> {
    let name_len = read_u32(r)?;
    if name_len == 0 || name_len > MAX_NAME_LEN {
        return Err(CheckpointError::Array(format!("name length {name_len}")));
    }
    let mut name = vec![0u8; name_len as usize];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| CheckpointError::Array("name is not utf-8".into()))?;
    let ndim = read_u32(r)?;
    if ndim != 2 {
        return Err(CheckpointError::Array(format!("`{name}` has {ndim} dims")));
    }
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| CheckpointError::Array(format!("`{name}` is too large")))?;
    let mut data = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    let array = Array::from_vec(rows, cols, data).map_err(|e| CheckpointError::Array(e.to_string()))?;
    Ok((name, array))
}
