//! Binary network checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "PLNTNET\0"
//! version      u32       1
//! variant      u8        0 = cifar, 1 = stl
//! input        3 x u32   channels, height, width
//! conv         5 x u32   conv output channels
//! fc           2 x u32   fully connected widths
//! config_hash  u64       provenance tag of the producing run (0 if none)
//! tensors      u32       number of tensors that follow (14)
//! per tensor:
//!   dims       4 x u32
//!   values     len x f64 (IEEE-754 bits, LE)
//!   frozen     ceil(len / 8) bytes, bit i of byte j is element 8j + i
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ArchitectureSpec, ChannelConfig, Param, PlantableNetwork, Variant, CONV_LAYERS};
use crate::error::{Error, Result};
use crate::gradcore::Tensor4;

pub const MAGIC: &[u8; 8] = b"PLNTNET\0";
pub const VERSION: u32 = 1;

/// A network together with the hash of the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: PlantableNetwork,
    pub config_hash: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(network: &PlantableNetwork, config_hash: u64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match network.spec.variant {
        Variant::Cifar => 0,
        Variant::Stl => 1,
    });
    for &d in &network.spec.input {
        put_u32(&mut out, d)?;
    }
    for &c in network.channels.conv.iter().chain(&network.channels.fc) {
        put_u32(&mut out, c)?;
    }
    out.extend_from_slice(&config_hash.to_le_bytes());
    put_u32(&mut out, network.layers.len() * 2)?;
    for p in network.params() {
        for &d in &p.value.dims() {
            put_u32(&mut out, d)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut mask = vec![0u8; p.frozen.len().div_ceil(8)];
        for (i, _) in p.frozen.iter().enumerate().filter(|(_, &f)| f) {
            mask[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&mask);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let variant = match c.take(1)?[0] {
        0 => Variant::Cifar,
        1 => Variant::Stl,
        v => return Err(Error::Checkpoint(format!("unknown variant {v}"))),
    };
    let input = [c.u32()?, c.u32()?, c.u32()?];
    let mut conv = [0; CONV_LAYERS];
    for v in &mut conv {
        *v = c.u32()?;
    }
    let fc = [c.u32()?, c.u32()?];
    let config_hash = c.u64()?;
    let count = c.u32()?;
    let mut params = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let dims = [c.u32()?, c.u32()?, c.u32()?, c.u32()?];
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let raw = c.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mask = c.take(len.div_ceil(8))?;
        let frozen = (0..len).map(|i| mask[i / 8] >> (i % 8) & 1 == 1).collect();
        let value =
            Tensor4::from_vec(dims, values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.push(Param::from_parts(value, frozen)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let spec = if variant == Variant::Cifar && input == ArchitectureSpec::cifar().input {
        ArchitectureSpec::cifar()
    } else if variant == Variant::Stl && input == ArchitectureSpec::stl().input {
        ArchitectureSpec::stl()
    } else {
        if input[0] != super::INPUT_CHANNELS {
            return Err(Error::Checkpoint(format!("unsupported input {input:?}")));
        }
        ArchitectureSpec::with_input(variant, input[1], input[2])
            .map_err(|e| Error::Checkpoint(e.to_string()))?
    };
    let network = PlantableNetwork::from_parts(spec, ChannelConfig { conv, fc }, params)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Checkpoint {
        network,
        config_hash,
    })
}

pub fn write<W: Write>(mut w: W, network: &PlantableNetwork, config_hash: u64) -> Result<()> {
    w.write_all(&encode(network, config_hash)?)?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save(path: &Path, network: &PlantableNetwork, config_hash: u64) -> Result<()> {
    crate::io::write_atomic(path, &encode(network, config_hash)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}
