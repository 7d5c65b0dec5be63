use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::segnet::{param_layout, LstmMode, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const FSCK_MAGIC: [u8; 4] = *b"FSCK";
pub const FSCK_VERSION: u32 = 1;

/// Trained parameters with the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<f32>>,
    pub seed: u64,
    /// Epochs of training behind these parameters.
    pub epochs: u32,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.params
            .check_layout(&self.config)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))
}

pub fn write_checkpoint_to(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    let cfg = &ckpt.config;
    w.write_all(&FSCK_MAGIC)?;
    w.write_all(&FSCK_VERSION.to_le_bytes())?;
    for v in [cfg.num_classes, cfg.height, cfg.width] {
        w.write_all(&u32_of(v, "extent")?.to_le_bytes())?;
    }
    for &c in &cfg.widths {
        w.write_all(&u32_of(c, "width")?.to_le_bytes())?;
    }
    w.write_all(&[cfg.mode.code(), u8::from(cfg.share_directions)])?;
    w.write_all(&ckpt.seed.to_le_bytes())?;
    w.write_all(&ckpt.epochs.to_le_bytes())?;
    let named = ckpt.params.named();
    w.write_all(&u32_of(named.len(), "tensor count")?.to_le_bytes())?;
    for (name, t) in named {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name {name} is too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[4u8])?;
        for d in t.dims() {
            w.write_all(&u32_of(d, "dim")?.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

fn eof_as_truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Truncated("checkpoint")
    } else {
        Error::Io(e)
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(eof_as_truncated)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    read_array(r).map(u32::from_le_bytes)
}

pub fn read_checkpoint_from(r: &mut impl Read) -> Result<Checkpoint> {
    let magic = read_array::<4>(r)?;
    if magic != FSCK_MAGIC {
        return Err(Error::BadMagic {
            expected: FSCK_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(r)?;
    if version != FSCK_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "FSCK",
            version,
        });
    }
    let num_classes = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let width = read_u32(r)? as usize;
    let mut widths = [0usize; 4];
    for w in &mut widths {
        *w = read_u32(r)? as usize;
    }
    let [mode, share] = read_array::<2>(r)?;
    let mode = LstmMode::from_code(mode).ok_or_else(|| Error::Checkpoint(format!("unknown mode code {mode}")))?;
    let share_directions = match share {
        0 => false,
        1 => true,
        other => return Err(Error::Checkpoint(format!("invalid share flag {other}"))),
    };
    let config = ModelConfig {
        num_classes,
        height,
        width,
        widths,
        mode,
        share_directions,
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let seed = u64::from_le_bytes(read_array(r)?);
    let epochs = read_u32(r)?;
    let count = read_u32(r)? as usize;
    let layout = param_layout(&config)?;
    let expected = layout.tensor_count();
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, configuration needs {expected}"
        )));
    }
    let params = layout.try_map(|name, &dims| {
        let len = u16::from_le_bytes(read_array(r)?) as usize;
        let mut stored = vec![0u8; len];
        r.read_exact(&mut stored).map_err(eof_as_truncated)?;
        if stored != name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(&stored)
            )));
        }
        let [rank] = read_array::<1>(r)?;
        if rank != 4 {
            return Err(Error::Checkpoint(format!("{name} has rank {rank}, expected 4")));
        }
        let mut stored_dims = [0usize; 4];
        for d in &mut stored_dims {
            *d = read_u32(r)? as usize;
        }
        if stored_dims != dims {
            return Err(Error::Checkpoint(format!(
                "{name} has dims {stored_dims:?}, configuration needs {dims:?}"
            )));
        }
        let n = dims.iter().product::<usize>();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes).map_err(eof_as_truncated)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_vec(dims, data)
    })?;
    Ok(Checkpoint {
        config,
        params,
        seed,
        epochs,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint_to(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint_from(&mut BufReader::new(File::open(path)?))
}
