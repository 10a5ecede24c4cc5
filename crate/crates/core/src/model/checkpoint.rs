//! Checkpoint container.
//!
//! Layout:
//!
//! ```text
//! cress-checkpoint\n
//! <TOML header: format_version, epoch, optimizer flag, [model] config>
//! end_header\n
//! for each parameter, in the fixed layout order:
//!     u32 name length, name bytes (UTF-8), u32 ndim, ndim × u32 extents,
//!     numel × f64 values
//! if the optimizer flag is set:
//!     u64 step, f64 beta1, f64 beta2, f64 eps,
//!     for each parameter: numel × f64 first moment, numel × f64 second moment
//! ```
//!
//! All integers and floats are little-endian; values round-trip bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TranslationModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::OptimizerState;

pub const CHECKPOINT_MAGIC: &str = "cress-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const END_HEADER: &str = "end_header";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    epoch: Option<usize>,
    optimizer: bool,
    model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TranslationModel,
    pub optimizer: Option<OptimizerState>,
    pub epoch: Option<usize>,
}

impl Checkpoint {
    pub fn model_only(model: TranslationModel) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            epoch: None,
        }
    }
}

fn f64s(out: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(out: &mut impl Write, ckpt: &Checkpoint) -> std::io::Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        epoch: ckpt.epoch,
        optimizer: ckpt.optimizer.is_some(),
        model: ckpt.model.config().clone(),
    };
    let text = toml::to_string(&header).expect("header serialises");
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    out.write_all(text.as_bytes())?;
    writeln!(out, "{END_HEADER}")?;
    for (name, t) in ckpt.model.names().iter().zip(ckpt.model.params()) {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        f64s(out, t.data())?;
    }
    if let Some(opt) = &ckpt.optimizer {
        out.write_all(&opt.step.to_le_bytes())?;
        f64s(out, &[opt.beta1, opt.beta2, opt.eps])?;
        for (m, v) in opt.first.iter().zip(&opt.second) {
            f64s(out, m)?;
            f64s(out, v)?;
        }
    }
    Ok(())
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::format(self.path, format!("truncated body: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn read_checkpoint(input: impl Read, path: &Path) -> Result<Checkpoint> {
    let mut input = BufReader::new(input);
    let mut line = String::new();
    let read_line = |input: &mut BufReader<_>, line: &mut String| -> Result<()> {
        line.clear();
        input
            .read_line(line)
            .map_err(|e| Error::io(path, e))?;
        Ok(())
    };
    read_line(&mut input, &mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "missing checkpoint magic line"));
    }
    let mut header_text = String::new();
    loop {
        read_line(&mut input, &mut line)?;
        if line.is_empty() {
            return Err(Error::format(path, "header is not terminated"));
        }
        if line.trim_end() == END_HEADER {
            break;
        }
        header_text.push_str(&line);
    }
    let header: Header = toml::from_str(&header_text)
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let mut r = Reader {
        inner: input,
        path,
    };
    let expected = TranslationModel::init(header.model.clone(), 0)?;
    let mut named = Vec::with_capacity(expected.names().len());
    for _ in 0..expected.names().len() {
        let len = r.u32()? as usize;
        let mut name = vec![0u8; len];
        r.inner
            .read_exact(&mut name)
            .map_err(|e| Error::format(path, format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::format(path, "non-UTF-8 name"))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let data = r.f64s(n)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        named.push((name, t));
    }
    let model = TranslationModel::from_named(header.model, named)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let optimizer = if header.optimizer {
        let step = r.u64()?;
        let hp = r.f64s(3)?;
        let mut first = Vec::new();
        let mut second = Vec::new();
        for p in model.params() {
            first.push(r.f64s(p.numel())?);
            second.push(r.f64s(p.numel())?);
        }
        Some(OptimizerState {
            step,
            beta1: hp[0],
            beta2: hp[1],
            eps: hp[2],
            first,
            second,
        })
    } else {
        None
    };
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after checkpoint body"));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: header.epoch,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, ckpt).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(file, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::OptimizerState;

    fn small() -> TranslationModel {
        TranslationModel::init(
            ModelConfig {
                d_model: 8,
                heads: 2,
                d_ffn: 8,
                vocab_size: 9,
                d_feat: 3,
                ..ModelConfig::default()
            },
            2,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = small();
        let mut opt = OptimizerState::new(&model);
        opt.step = 17;
        opt.first[0][3] = f64::MIN_POSITIVE;
        opt.second[1][0] = 1.0 / 3.0;
        let ckpt = Checkpoint {
            model,
            optimizer: Some(opt),
            epoch: Some(4),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let back = read_checkpoint(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_is_plain_text() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &Checkpoint::model_only(small())).unwrap();
        let text = String::from_utf8_lossy(&buf[..200]);
        assert!(text.starts_with("cress-checkpoint\nformat_version = 1\n"));
        assert!(text.contains("d_model = 8"));
    }

    #[test]
    fn truncated_file_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &Checkpoint::model_only(small())).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(matches!(
            read_checkpoint(buf.as_slice(), Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }
}
