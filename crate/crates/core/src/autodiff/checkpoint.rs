//! Binary checkpoint format.
//!
//! ```text
//! "IFLW"                      magic
//! u32 LE                      format version (1)
//! u32 LE x 4                  in_channels, hidden_channels, depth, embed_dim
//! repeated until EOF:
//!   u16 LE                    name length
//!   [u8]                      UTF-8 name
//!   u8                        rank
//!   u32 LE x rank             dims
//!   f32 LE x prod(dims)       values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Network, NetworkSpec, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IFLW";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint(net: &Network, mut w: impl Write) -> Result<()> {
    let spec = net.spec();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for field in [
        spec.in_channels,
        spec.hidden_channels,
        spec.depth,
        spec.embed_dim,
    ] {
        w.write_all(&to_u32(field)?.to_le_bytes())?;
    }
    for (name, tensor) in net.parameters() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &dim in tensor.shape() {
            w.write_all(&to_u32(dim)?.to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Network> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let spec = NetworkSpec {
        in_channels: cur.u32()? as usize,
        hidden_channels: cur.u32()? as usize,
        depth: cur.u32()? as usize,
        embed_dim: cur.u32()? as usize,
    };
    let mut params = Vec::new();
    while !cur.at_end() {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.push((name, Tensor::new(dims, data)?));
    }
    Network::from_parameters(spec, params)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(net, &mut buf)?;
    let path = path.as_ref();
    fs::write(path, buf).map_err(|e| Error::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let file = fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(std::io::BufReader::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
