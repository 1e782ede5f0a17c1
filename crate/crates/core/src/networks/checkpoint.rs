//! Model checkpoints.
//!
//! Layout (little-endian): `SVMODEL1`, u8 network tag (1 dnn, 2 frame-dnn,
//! 3 lstm), u32 architecture fields, u8 head tag (0 none, 1 softmax followed
//! by u32 speaker count, 2 logistic), u64 scalar count, then every parameter
//! as f32 in declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DnnConfig, FrameDnnConfig, HeadConfig, LstmConfig, Model, NetworkConfig};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const MODEL_MAGIC: &[u8; 8] = b"SVMODEL1";

const WHAT: &str = "model checkpoint";

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(WHAT, format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_dnn<W: Write>(w: &mut W, c: &DnnConfig) -> Result<()> {
    for v in [c.input_frames, c.input_dims, c.patch_frames, c.patch_dims, c.units_per_patch, c.hidden.len()] {
        put_u32(w, v)?;
    }
    c.hidden.iter().try_for_each(|&h| put_u32(w, h))
}

pub fn write_model<W: Write>(mut w: W, model: &Model) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    match model.network.config() {
        NetworkConfig::Dnn(c) => {
            w.write_all(&[1])?;
            put_dnn(&mut w, &c)?;
        }
        NetworkConfig::FrameDnn(c) => {
            w.write_all(&[2])?;
            put_u32(&mut w, c.context)?;
            put_dnn(&mut w, &c.dnn)?;
        }
        NetworkConfig::Lstm(c) => {
            w.write_all(&[3])?;
            for v in [c.input_dim, c.hidden, c.window_frames] {
                put_u32(&mut w, v)?;
            }
        }
    }
    match model.head_config() {
        HeadConfig::None => w.write_all(&[0])?,
        HeadConfig::Softmax { speakers } => {
            w.write_all(&[1])?;
            put_u32(&mut w, speakers)?;
        }
        HeadConfig::E2e { .. } => w.write_all(&[2])?,
    }
    w.write_all(&(model.params.scalar_count() as u64).to_le_bytes())?;
    for m in model.params.values() {
        for &v in m.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(WHAT, format!("truncated at {field}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.bytes::<1>(field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(field)?) as usize)
    }

    fn dnn(&mut self) -> Result<DnnConfig> {
        let input_frames = self.u32("input frames")?;
        let input_dims = self.u32("input dims")?;
        let patch_frames = self.u32("patch frames")?;
        let patch_dims = self.u32("patch dims")?;
        let units_per_patch = self.u32("units per patch")?;
        let layers = self.u32("layer count")?;
        if layers > 1024 {
            return Err(Error::format(WHAT, format!("implausible layer count {layers}")));
        }
        let hidden = (0..layers).map(|_| self.u32("layer width")).collect::<Result<_>>()?;
        Ok(DnnConfig { input_frames, input_dims, patch_frames, patch_dims, units_per_patch, hidden })
    }
}

pub fn read_model<R: Read>(r: R) -> Result<Model> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>("magic")? != MODEL_MAGIC {
        return Err(Error::format(WHAT, "bad magic"));
    }
    let network = match r.u8("network tag")? {
        1 => NetworkConfig::Dnn(r.dnn()?),
        2 => {
            let context = r.u32("context")?;
            NetworkConfig::FrameDnn(FrameDnnConfig { context, dnn: r.dnn()? })
        }
        3 => NetworkConfig::Lstm(LstmConfig {
            input_dim: r.u32("input dim")?,
            hidden: r.u32("hidden")?,
            window_frames: r.u32("window frames")?,
        }),
        t => return Err(Error::format(WHAT, format!("unknown network tag {t}"))),
    };
    let head = match r.u8("head tag")? {
        0 => HeadConfig::None,
        1 => HeadConfig::Softmax { speakers: r.u32("speaker count")? },
        2 => HeadConfig::e2e_default(),
        t => return Err(Error::format(WHAT, format!("unknown head tag {t}"))),
    };
    let mut model = Model::new(&network, &head, &mut seeded(0)).map_err(|e| Error::format(WHAT, e.to_string()))?;
    let count = u64::from_le_bytes(r.bytes("scalar count")?);
    if count != model.params.scalar_count() as u64 {
        return Err(Error::format(WHAT, format!("{count} scalars stored, architecture needs {}", model.params.scalar_count())));
    }
    for m in model.params.values_mut() {
        for v in m.data_mut() {
            *v = f32::from_le_bytes(r.bytes("parameters")?) as f64;
        }
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::format(WHAT, "trailing bytes"));
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), model)
}

pub fn load_model(path: &Path) -> Result<Model> {
    read_model(BufReader::new(File::open(path)?))
}
