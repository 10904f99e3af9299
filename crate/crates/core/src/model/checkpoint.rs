use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::{EncoderKind, GuideMode, ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSE1";

const META_CONFIG: &str = "meta.config";
const META_MODE: &str = "meta.mode";

fn config_record(cfg: &ModelConfig) -> Vec<f64> {
    let encoder = match cfg.encoder {
        EncoderKind::Conv => 0.0,
        EncoderKind::Identity => 1.0,
    };
    let mut v = vec![
        cfg.in_dim as f64,
        cfg.channels as f64,
        cfg.kernel as f64,
        cfg.attention_dim as f64,
        cfg.embedding_dim as f64,
        cfg.num_classes as f64,
        encoder,
    ];
    v.extend(cfg.dilations.iter().map(|&d| d as f64));
    v
}

fn config_from_record(v: &[f64]) -> Result<ModelConfig> {
    if v.len() < 7 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
        return Err(Error::Checkpoint("malformed model config record".into()));
    }
    let u = |i: usize| v[i] as usize;
    let encoder = match u(6) {
        0 => EncoderKind::Conv,
        1 => EncoderKind::Identity,
        k => return Err(Error::Checkpoint(format!("unknown encoder kind {k}"))),
    };
    Ok(ModelConfig {
        in_dim: u(0),
        channels: u(1),
        kernel: u(2),
        attention_dim: u(3),
        embedding_dim: u(4),
        num_classes: u(5),
        encoder,
        dilations: v[7..].iter().map(|&d| d as usize).collect(),
    })
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn write_record<W: Write>(
    w: &mut W,
    name: &str,
    shape: &[usize],
    data: &[f64],
) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Serializes parameters as little-endian f32 records after the magic.
pub fn write_checkpoint<W: Write>(w: &mut W, params: &ModelParams) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let cfg = config_record(&params.config);
    write_record(w, META_CONFIG, &[cfg.len()], &cfg)?;
    let m = params.mode;
    let mode = [
        flag(m.use_target_channel),
        flag(m.use_nontarget_channel),
        flag(m.use_attention_mask),
    ];
    write_record(w, META_MODE, &[3], &mode)?;
    for (name, t) in params.iter() {
        write_record(w, name, t.shape(), t.data())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut b[got..])?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(std::io::ErrorKind::UnexpectedEof.into())
            };
        }
        got += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn need_u32<R: Read>(r: &mut R) -> Result<u32> {
    read_u32(r)
        .map_err(|e| Error::Checkpoint(e.to_string()))?
        .ok_or_else(|| Error::Checkpoint("truncated record".into()))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut tensors = IndexMap::new();
    let mut config = None;
    let mut mode = None;
    while let Some(len) = read_u32(r).map_err(|e| Error::Checkpoint(e.to_string()))? {
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
        let rank = need_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| need_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        match name.as_str() {
            META_CONFIG => config = Some(config_from_record(&data)?),
            META_MODE => {
                if data.len() != 3 {
                    return Err(Error::Checkpoint("malformed mode record".into()));
                }
                mode = Some(GuideMode {
                    use_target_channel: data[0] != 0.0,
                    use_nontarget_channel: data[1] != 0.0,
                    use_attention_mask: data[2] != 0.0,
                });
            }
            _ => {
                let t = Tensor::new(shape, data)
                    .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
                if !t.is_finite() {
                    return Err(Error::Checkpoint(format!("{name} has non-finite values")));
                }
                if tensors.insert(name.clone(), t).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
                }
            }
        }
    }
    let config = config.ok_or_else(|| Error::Checkpoint("missing model config".into()))?;
    let mode = mode.ok_or_else(|| Error::Checkpoint("missing guide mode".into()))?;
    ModelParams::from_parts(config, mode, tensors).map_err(|e| match e {
        Error::Config(msg) => Error::Checkpoint(msg),
        other => other,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, params)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
