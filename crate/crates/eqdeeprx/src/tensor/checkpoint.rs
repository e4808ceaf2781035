//! Versioned tensor container used for model checkpoints.
//!
//! Layout: magic string, format version, a manifest of
//! (name, shape, scalar width) entries, then the raw little-endian arrays
//! in manifest order. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::RealTensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"EQRXCKPT";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save<P: AsRef<Path>>(path: P, entries: &[(&str, &RealTensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, entries.len() as u32)?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        write_u32(&mut w, bytes.len() as u32)?;
        w.write_all(bytes)?;
        write_u32(&mut w, tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            write_u64(&mut w, d as u64)?;
        }
        write_u32(&mut w, 8)?; // f64 scalars
    }
    for (_, tensor) in entries {
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<Vec<(String, RealTensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("non-utf8 tensor name".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let width = read_u32(&mut r)?;
        if width != 4 && width != 8 {
            return Err(Error::Format(format!("unsupported scalar width {width}")));
        }
        manifest.push((name, shape, width));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape, width) in manifest {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        if width == 8 {
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        } else {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        out.push((name, RealTensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let a = RealTensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.0, 1e-300, f64::MAX, -0.5])
            .unwrap();
        let b = RealTensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        save(&path, &[("layer.a", &a), ("layer.b", &b)]).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "layer.a");
        assert_eq!(loaded[0].1.data(), a.data());
        assert_eq!(loaded[1].1.shape(), &[4]);

        let path2 = dir.path().join("ck2.bin");
        let entries: Vec<(&str, &RealTensor)> =
            loaded.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save(&path2, &entries).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTMAGIC????????").unwrap();
        assert!(load(&path).is_err());
    }
}
