//! Binary model container. All integers and floats are little-endian.
//!
//! ```text
//! magic          4 bytes  "PLAB"
//! version        u32
//! config_len     u64, then config_len bytes of ModelConfig JSON
//! param_count    u64, then per parameter:
//!     name_len u64, name bytes (UTF-8)
//!     ndim u64, ndim × u64 dims
//!     product(dims) × f64 values
//! proto_count    u64, then proto_count × u64 prototype classes
//! provenance     proto_count × (u8 present, u64 image_id, u64 row, u64 col)
//! corrupted      u64 count, then count × u64 class ids
//! ```
//!
//! The prototype vectors and last-layer weights are the `prototypes` and
//! `last_layer` parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

use super::{Model, ModelConfig, ParamGroups, Provenance};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PLAB";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_LEN: u64 = 1 << 32;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes `model` into its checkpoint bytes.
pub fn write_checkpoint(model: &Model, out: &mut impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::format("checkpoint config", e))?;
    put_u64(&mut buf, config.len() as u64);
    buf.extend_from_slice(&config);
    put_u64(&mut buf, model.params.len() as u64);
    for p in model.params.iter() {
        put_u64(&mut buf, p.name.len() as u64);
        buf.extend_from_slice(p.name.as_bytes());
        put_u64(&mut buf, p.value.ndim() as u64);
        for &d in p.value.shape() {
            put_u64(&mut buf, d as u64);
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u64(&mut buf, model.prototype_class.len() as u64);
    for &c in &model.prototype_class {
        put_u64(&mut buf, c as u64);
    }
    for p in &model.provenance {
        match p {
            Some(p) => {
                buf.push(1);
                put_u64(&mut buf, p.image_id as u64);
                put_u64(&mut buf, p.row as u64);
                put_u64(&mut buf, p.col as u64);
            }
            None => {
                buf.push(0);
                buf.extend_from_slice(&[0u8; 24]);
            }
        }
    }
    put_u64(&mut buf, model.corrupted_classes.len() as u64);
    for &c in &model.corrupted_classes {
        put_u64(&mut buf, c as u64);
    }
    out.write_all(&buf).map_err(|e| Error::format("checkpoint", e))
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        if n > MAX_LEN {
            return Err(Error::format("checkpoint", format!("implausible {what} length {n}")));
        }
        Ok(n as usize)
    }
}

/// Parses checkpoint bytes back into a model.
pub fn read_checkpoint(input: impl Read) -> Result<Model> {
    let mut r = Cursor { inner: input };
    if &r.array::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let n = r.len("config")?;
    let config: ModelConfig =
        serde_json::from_slice(&r.bytes(n)?).map_err(|e| Error::format("checkpoint config", e))?;
    config.validate()?;

    let mut params = ParameterStore::new();
    for _ in 0..r.len("parameter list")? {
        let n = r.len("name")?;
        let name = String::from_utf8(r.bytes(n)?).map_err(|e| Error::format("checkpoint", e))?;
        let ndim = r.len("rank")?;
        let dims = (0..ndim).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        if count as u64 > MAX_LEN {
            return Err(Error::format("checkpoint", "tensor too large"));
        }
        let raw = r.bytes(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(&name, Tensor::new(dims, data)?);
    }

    let m = r.len("prototype list")?;
    let prototype_class = (0..m).map(|_| r.len("class")).collect::<Result<Vec<_>>>()?;
    let mut provenance = Vec::with_capacity(m);
    for _ in 0..m {
        let present = r.array::<1>()?[0];
        let (image_id, row, col) = (r.len("id")?, r.len("row")?, r.len("col")?);
        provenance.push((present == 1).then_some(Provenance { image_id, row, col }));
    }
    let corrupted_classes = (0..r.len("corrupted list")?)
        .map(|_| r.len("class"))
        .collect::<Result<Vec<_>>>()?;

    let groups = resolve_groups(&params, &config)?;
    if m != config.prototypes() || prototype_class.iter().any(|&c| c >= config.classes) {
        return Err(Error::format("checkpoint", "prototype classes disagree with config"));
    }
    let model = Model {
        config,
        params,
        groups,
        prototype_class,
        provenance,
        corrupted_classes,
    };
    check_shapes(&model)?;
    Ok(model)
}

fn resolve_groups(params: &ParameterStore, config: &ModelConfig) -> Result<ParamGroups> {
    let get = |name: String| {
        params
            .id(&name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name}")))
    };
    let pair = |prefix: &str, i: usize| -> Result<_> {
        Ok((get(format!("{prefix}{i}.weight"))?, get(format!("{prefix}{i}.bias"))?))
    };
    Ok(ParamGroups {
        base_conv: (1..=config.backbone.conv_channels.len())
            .map(|i| pair("conv", i))
            .collect::<Result<_>>()?,
        addon: (1..=2).map(|i| pair("addon", i)).collect::<Result<_>>()?,
        prototypes: get("prototypes".into())?,
        last_layer: get("last_layer".into())?,
    })
}

fn check_shapes(model: &Model) -> Result<()> {
    let reference = Model::new(model.config.clone(), 0)?;
    for id in reference.params.ids() {
        let want = reference.params.get(id);
        let have = model
            .params
            .id(&want.name)
            .map(|i| model.params.value(i).shape().to_vec());
        if have.as_deref() != Some(want.value.shape()) {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    want.name,
                    have,
                    want.value.shape()
                ),
            ));
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
