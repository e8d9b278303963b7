//! Binary model container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic            4 bytes  "EAGR"
//! format_version   u32
//! vocab_buckets    u32
//! embed_dim        u32
//! hidden_dim       u32
//! trace_hidden_dim u32
//! seed             u64
//! model_version    u64
//! 9 tensors        each: rows u32, cols u32, rows*cols f64
//! ```
//!
//! Tensor order is E, W1, b1, W2, b2, U1, c1, U2, c2 (vectors have cols = 1).
//! Parameters are stored as f64 so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{FeaturizerConfig, ModelConfig, Params, RepresentationError, RepresentationModel};

pub const MODEL_MAGIC: &[u8; 4] = b"EAGR";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn write_model(out: &mut impl Write, model: &RepresentationModel) -> std::io::Result<()> {
    out.write_all(MODEL_MAGIC)?;
    out.write_u32::<LittleEndian>(MODEL_FORMAT_VERSION)?;
    out.write_u32::<LittleEndian>(model.featurizer.vocab_buckets)?;
    out.write_u32::<LittleEndian>(model.config.embed_dim)?;
    out.write_u32::<LittleEndian>(model.config.hidden_dim)?;
    out.write_u32::<LittleEndian>(model.config.trace_hidden_dim)?;
    out.write_u64::<LittleEndian>(model.config.seed)?;
    out.write_u64::<LittleEndian>(model.version)?;
    for (tensor, (rows, cols)) in model.params.tensors().iter().zip(model.params.shapes()) {
        out.write_u32::<LittleEndian>(rows as u32)?;
        out.write_u32::<LittleEndian>(cols as u32)?;
        for &x in tensor.iter() {
            out.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

/// Writes to a temporary sibling and renames over `path`.
pub fn save_model(
    model: &RepresentationModel,
    path: impl AsRef<Path>,
) -> Result<(), RepresentationError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        write_model(&mut out, model)?;
        out.flush()?;
        out.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

fn truncated<R>(r: &CountingReader<R>) -> impl Fn(std::io::Error) -> RepresentationError + '_ {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            RepresentationError::Truncated { offset: r.offset }
        } else {
            RepresentationError::Io(e)
        }
    }
}

pub fn read_model(input: impl Read) -> Result<RepresentationModel, RepresentationError> {
    let mut r = CountingReader {
        inner: input,
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| truncated(&r)(e))?;
    if &magic != MODEL_MAGIC {
        return Err(RepresentationError::BadMagic);
    }
    macro_rules! rd {
        ($m:ident) => {
            match r.$m::<LittleEndian>() {
                Ok(v) => v,
                Err(e) => return Err(truncated(&r)(e)),
            }
        };
    }
    let version: u32 = rd!(read_u32);
    if version != MODEL_FORMAT_VERSION {
        return Err(RepresentationError::VersionMismatch {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let featurizer = FeaturizerConfig {
        vocab_buckets: rd!(read_u32),
    };
    let config = ModelConfig {
        embed_dim: rd!(read_u32),
        hidden_dim: rd!(read_u32),
        trace_hidden_dim: rd!(read_u32),
        seed: rd!(read_u64),
    };
    config
        .validate()
        .map_err(|e| RepresentationError::ShapeMismatch(e.to_string()))?;
    let model_version: u64 = rd!(read_u64);
    let mut params = Params::zeros(featurizer.vocab_buckets as usize, &config);
    let shapes = params.shapes();
    for (tensor, (rows, cols)) in params.tensors_mut().into_iter().zip(shapes) {
        let (fr, fc) = (rd!(read_u32) as usize, rd!(read_u32) as usize);
        if (fr, fc) != (rows, cols) {
            return Err(RepresentationError::ShapeMismatch(format!(
                "tensor stored as {fr}x{fc}, config implies {rows}x{cols}"
            )));
        }
        for x in tensor.iter_mut() {
            *x = rd!(read_f64);
        }
    }
    Ok(RepresentationModel {
        config,
        featurizer,
        params,
        version: model_version,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RepresentationModel, RepresentationError> {
    read_model(BufReader::new(File::open(path)?))
}

/// Loads a model and checks its dimensions against `expected` (the seed is
/// not compared).
pub fn load_model_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
    featurizer: &FeaturizerConfig,
) -> Result<RepresentationModel, RepresentationError> {
    let model = load_model(path)?;
    let found = (
        model.config.embed_dim,
        model.config.hidden_dim,
        model.config.trace_hidden_dim,
        model.featurizer.vocab_buckets,
    );
    let want = (
        expected.embed_dim,
        expected.hidden_dim,
        expected.trace_hidden_dim,
        featurizer.vocab_buckets,
    );
    if found != want {
        return Err(RepresentationError::ShapeMismatch(format!(
            "file has (d, h, trace_h, V) = {found:?}, expected {want:?}"
        )));
    }
    Ok(model)
}
