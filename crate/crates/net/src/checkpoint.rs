//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"PMNT"`, `u32` version, `u32` header length, JSON header holding the
//! [`NetConfig`], `u32` entry count, then per entry `u32` name length, name
//! bytes, `u32` rows, `u32` cols and `rows * cols` `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use pointmap_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::model::{NetConfig, ToyNet};

pub const MAGIC: &[u8; 4] = b"PMNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetConfig,
}

pub fn write_checkpoint(net: &ToyNet, mut w: impl Write) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: net.cfg.clone(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let ps = &net.params;
    w.write_all(&(ps.len() as u32).to_le_bytes())?;
    for id in 0..ps.len() {
        let name = ps.name(id).as_bytes();
        let v = ps.value(id);
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(v.rows as u32).to_le_bytes())?;
        w.write_all(&(v.cols as u32).to_le_bytes())?;
        for x in &v.data {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Rebuilds the network from its config and overwrites every parameter.
/// The entry set must match the architecture exactly.
pub fn read_checkpoint(mut r: impl Read) -> Result<ToyNet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = read_u32(&mut r)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf).map_err(|e| Error::Format(e.to_string()))?;
    let mut net = ToyNet::new(header.config)?;
    let count = read_u32(&mut r)? as usize;
    if count != net.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, architecture needs {}",
            net.params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let id = net
            .params
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
        let (rows, cols) = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
        if (rows, cols) != net.params.value(id).shape() || seen[id] {
            return Err(Error::Format(format!("tensor {name} has wrong shape or repeats")));
        }
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        net.params.set_value(id, &data);
        seen[id] = true;
    }
    Ok(net)
}

pub fn save(net: &ToyNet, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ToyNet> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            width: 16,
            height: 16,
            dim: 16,
            enc_blocks: 1,
            dec_blocks: 1,
            heads: 2,
            ..NetConfig::default()
        }
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let net = ToyNet::new(small()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.cfg, net.cfg);
        for id in 0..net.params.len() {
            for (a, b) in net.params.value(id).data.iter().zip(&back.params.value(id).data) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_input_rejected() {
        let net = ToyNet::new(small()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
