//! Versioned binary checkpoint container.
//!
//! Layout: an 8-byte magic, a format version, a kind tag, a JSON header, and
//! a sequence of shape-tagged float32 tensors addressed by canonical name
//! (e.g. `enc_shared.conv3.weight`). Training state, teacher, and probe
//! checkpoints all share the container; the kind tag and header distinguish
//! them.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, XganError};

pub const MAGIC: &[u8; 8] = b"XGANCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    TrainState,
    Teacher,
    Probe,
}

impl Kind {
    fn tag(self) -> u8 {
        match self {
            Kind::TrainState => 1,
            Kind::Teacher => 2,
            Kind::Probe => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Kind> {
        match tag {
            1 => Ok(Kind::TrainState),
            2 => Ok(Kind::Teacher),
            3 => Ok(Kind::Probe),
            other => Err(XganError::Checkpoint(format!("unknown kind tag {other}"))),
        }
    }
}

#[derive(Debug)]
pub struct Container {
    pub kind: Kind,
    pub header_json: String,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| XganError::io(parent, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| XganError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| XganError::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&[container.kind.tag()]).map_err(io_err)?;
    let header = container.header_json.as_bytes();
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(header).map_err(io_err)?;
    w.write_all(&(container.tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
    for t in &container.tensors {
        let name = t.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(XganError::Checkpoint(format!("tensor name too long: {}", t.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&[t.dims.len() as u8]).map_err(io_err)?;
        let mut expect = 1usize;
        for &d in &t.dims {
            expect *= d;
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        if expect != t.data.len() {
            return Err(XganError::Checkpoint(format!(
                "tensor {} dims {:?} do not match {} values",
                t.name,
                t.dims,
                t.data.len()
            )));
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let file = std::fs::File::open(path).map_err(|e| XganError::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |what: &str| XganError::Checkpoint(format!("{}: {what}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint container"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated version"))?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(XganError::Checkpoint(format!(
            "{}: format version {version} unsupported (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind).map_err(|_| bad("truncated kind"))?;
    let kind = Kind::from_tag(kind[0])?;

    r.read_exact(&mut u32buf).map_err(|_| bad("truncated header length"))?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let header_json = String::from_utf8(header).map_err(|_| bad("header is not utf-8"))?;

    r.read_exact(&mut u32buf).map_err(|_| bad("truncated tensor count"))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf).map_err(|_| bad("truncated tensor name length"))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(|_| bad("truncated tensor rank"))?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        let mut len = 1usize;
        for _ in 0..ndim[0] {
            r.read_exact(&mut u32buf)
                .map_err(|_| XganError::Checkpoint(format!("{}: truncated dims of {name}", path.display())))?;
            let d = u32::from_le_bytes(u32buf) as usize;
            dims.push(d);
            len *= d;
        }
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| XganError::Checkpoint(format!("{}: truncated data of {name}", path.display())))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    Ok(Container {
        kind,
        header_json,
        tensors,
    })
}
