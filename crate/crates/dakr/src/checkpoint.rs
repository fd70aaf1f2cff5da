//! Binary checkpoints, little-endian throughout.
//!
//! Parameters: magic `DAKRPRM\0`, u32 version, u64-prefixed config JSON,
//! u32 tensor count, then per tensor a u32 rank, u64 dims and fp64 data.
//!
//! Buffer: magic `DAKRBUF\0`, u32 version, u64 capacity, seen, entry count and
//! image side, then per entry u64 domain, u64 stream index, fp64 pixels and
//! one byte per mask pixel.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use dakr_core::metrics::Mask;
use dakr_core::replay::{BufferEntry, ReservoirBuffer};
use dakr_core::segnet::SegNet;
use dakr_core::train::RunConfig;
use dakr_core::Tensor;

use crate::config::{parse_config, to_json};
use crate::error::{CliError, CliResult};

/// File names `train` uses inside its output directory.
pub const PARAMS_FILE: &str = "model.ckpt";
pub const BUFFER_FILE: &str = "buffer.bin";

const PARAMS_MAGIC: &[u8; 8] = b"DAKRPRM\0";
const BUFFER_MAGIC: &[u8; 8] = b"DAKRBUF\0";
const VERSION: u32 = 1;
/// Upper bound on any length field, to fail fast on corrupt headers.
const MAX_LEN: u64 = 1 << 32;

pub fn write_params(w: &mut impl Write, config: &RunConfig, net: &SegNet) -> io::Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    let json = to_json(config);
    w.write_u64::<LE>(json.len() as u64)?;
    w.write_all(json.as_bytes())?;
    w.write_u32::<LE>(net.params().len() as u32)?;
    for p in net.params() {
        w.write_u32::<LE>(p.shape().len() as u32)?;
        for &d in p.shape() {
            w.write_u64::<LE>(d as u64)?;
        }
        for &v in p.data() {
            w.write_f64::<LE>(v)?;
        }
    }
    Ok(())
}

/// The config echo and a network rebuilt from it.
pub fn read_params(r: &mut impl Read, path: &Path) -> CliResult<(RunConfig, SegNet)> {
    let bad = |reason: &str| CliError::format(path, reason);
    let io_err = |e: io::Error| CliError::format(path, e.to_string());
    check_header(r, PARAMS_MAGIC, path)?;
    let len = read_len(r, path)?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io_err)?;
    let json = String::from_utf8(json).map_err(|_| bad("config echo is not UTF-8"))?;
    let config = parse_config(&json)?;
    let count = r.read_u32::<LE>().map_err(io_err)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.read_u32::<LE>().map_err(io_err)? as usize;
        if rank > 8 {
            return Err(bad("tensor rank out of range"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_len(r, path)?);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LE>(&mut data).map_err(io_err)?;
        params.push(Tensor::new(&shape, data)?);
    }
    expect_eof(r, path)?;
    let net = SegNet::from_params(config.net_config(), params)?;
    Ok((config, net))
}

pub fn save_params(path: &Path, config: &RunConfig, net: &SegNet) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_params(&mut w, config, net).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn load_params(path: &Path) -> CliResult<(RunConfig, SegNet)> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_params(&mut BufReader::new(file), path)
}

/// Buffer contents as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferFile {
    pub capacity: usize,
    pub seen: u64,
    pub image_size: usize,
    pub entries: Vec<BufferEntry>,
}

impl BufferFile {
    pub fn of(buffer: &ReservoirBuffer, image_size: usize) -> Self {
        BufferFile { capacity: buffer.capacity(), seen: buffer.seen(), image_size, entries: buffer.entries().to_vec() }
    }
}

pub fn write_buffer(w: &mut impl Write, buf: &BufferFile) -> io::Result<()> {
    w.write_all(BUFFER_MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u64::<LE>(buf.capacity as u64)?;
    w.write_u64::<LE>(buf.seen)?;
    w.write_u64::<LE>(buf.entries.len() as u64)?;
    w.write_u64::<LE>(buf.image_size as u64)?;
    for e in &buf.entries {
        w.write_u64::<LE>(e.domain_id as u64)?;
        w.write_u64::<LE>(e.stream_index)?;
        for &v in &e.image {
            w.write_f64::<LE>(v)?;
        }
        w.write_all(&e.mask.bits().iter().map(|&b| b as u8).collect::<Vec<_>>())?;
    }
    Ok(())
}

pub fn read_buffer(r: &mut impl Read, path: &Path) -> CliResult<BufferFile> {
    let io_err = |e: io::Error| CliError::format(path, e.to_string());
    check_header(r, BUFFER_MAGIC, path)?;
    let capacity = read_len(r, path)?;
    let seen = r.read_u64::<LE>().map_err(io_err)?;
    let count = read_len(r, path)?;
    let size = read_len(r, path)?;
    if count > capacity || size == 0 || size > 1 << 12 {
        return Err(CliError::format(path, "inconsistent buffer header"));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let domain = read_len(r, path)?;
        let stream_index = r.read_u64::<LE>().map_err(io_err)?;
        let mut image = vec![0.0; size * size];
        r.read_f64_into::<LE>(&mut image).map_err(io_err)?;
        let mut bytes = vec![0u8; size * size];
        r.read_exact(&mut bytes).map_err(io_err)?;
        if bytes.iter().any(|&b| b > 1) {
            return Err(CliError::format(path, "mask byte is not 0 or 1"));
        }
        let mask = Mask::new(size, size, bytes.iter().map(|&b| b == 1).collect())?;
        entries.push(BufferEntry::new(image, mask, domain, stream_index)?);
    }
    expect_eof(r, path)?;
    Ok(BufferFile { capacity, seen, image_size: size, entries })
}

pub fn save_buffer(path: &Path, buf: &BufferFile) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_buffer(&mut w, buf).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn load_buffer(path: &Path) -> CliResult<BufferFile> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_buffer(&mut BufReader::new(file), path)
}

fn check_header(r: &mut impl Read, magic: &[u8; 8], path: &Path) -> CliResult<()> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got).map_err(|e| CliError::format(path, e.to_string()))?;
    if &got != magic {
        return Err(CliError::format(path, "bad magic"));
    }
    let version = r.read_u32::<LE>().map_err(|e| CliError::format(path, e.to_string()))?;
    if version != VERSION {
        return Err(CliError::format(path, format!("unsupported version {}", version)));
    }
    Ok(())
}

fn read_len(r: &mut impl Read, path: &Path) -> CliResult<usize> {
    let n = r.read_u64::<LE>().map_err(|e| CliError::format(path, e.to_string()))?;
    if n > MAX_LEN {
        return Err(CliError::format(path, "length field out of range"));
    }
    Ok(n as usize)
}

fn expect_eof(r: &mut impl Read, path: &Path) -> CliResult<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(CliError::format(path, "trailing bytes")),
        Err(e) => Err(CliError::format(path, e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dakr_core::segnet::NetConfig;

    fn small() -> RunConfig {
        RunConfig { image_size: 8, levels: 2, base_channels: 2, ..RunConfig::default() }
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let config = small();
        let net = SegNet::init(NetConfig { seed: 5, ..config.net_config() }).unwrap();
        let mut bytes = Vec::new();
        write_params(&mut bytes, &config, &net).unwrap();
        let (c2, n2) = read_params(&mut bytes.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(c2, config);
        for (a, b) in net.params().iter().zip(n2.params()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_params_rejected() {
        let config = small();
        let net = SegNet::zeros(config.net_config()).unwrap();
        let mut bytes = Vec::new();
        write_params(&mut bytes, &config, &net).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_params(&mut bad.as_slice(), Path::new("m")).is_err());
        let short = &bytes[..bytes.len() - 3];
        assert!(read_params(&mut &short[..], Path::new("m")).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_params(&mut long.as_slice(), Path::new("m")).is_err());
    }

    #[test]
    fn buffer_round_trip() {
        let mut b = ReservoirBuffer::new(3, 1).unwrap();
        for i in 0..5u64 {
            let mut m = Mask::empty(4, 4);
            m.set(i as usize % 4, 1, true);
            b.offer(BufferEntry::new(vec![i as f64 * 0.1; 16], m, i as usize / 2, i).unwrap());
        }
        let file = BufferFile::of(&b, 4);
        let mut bytes = Vec::new();
        write_buffer(&mut bytes, &file).unwrap();
        assert_eq!(read_buffer(&mut bytes.as_slice(), Path::new("m")).unwrap(), file);
    }
}
