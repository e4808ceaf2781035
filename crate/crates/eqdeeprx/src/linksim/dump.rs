//! Self-describing slot dump container for regression fixtures.
//!
//! Layout: magic, version, config echo as JSON, then named arrays.
//! Complex arrays are stored as interleaved real/imag little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use super::{Slot, SlotConfig};
use crate::tensor::CTensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"EQRXSLOT";
const VERSION: u32 = 1;

const DTYPE_C64: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;

#[derive(Debug, Clone)]
pub enum DumpArray {
    Complex { shape: Vec<usize>, data: Vec<Complex64> },
    Real { shape: Vec<usize>, data: Vec<f64> },
    Bytes { shape: Vec<usize>, data: Vec<u8> },
}

#[derive(Debug, Clone)]
pub struct SlotDump {
    pub config: SlotConfig,
    pub arrays: Vec<(String, DumpArray)>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl SlotDump {
    /// Captures the observable grid plus the ground truth of a slot.
    pub fn from_slot(slot: &Slot) -> SlotDump {
        let c = |t: &CTensor| DumpArray::Complex {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        };
        let arrays = vec![
            ("y".to_string(), c(&slot.grid.y)),
            ("h".to_string(), c(&slot.channel.h)),
            ("interferer_h".to_string(), c(&slot.channel.interferer_h)),
            ("x".to_string(), c(&slot.tx.x)),
            (
                "bits".to_string(),
                DumpArray::Bytes {
                    shape: vec![
                        slot.cfg.n_subcarriers,
                        slot.cfg.n_symbols,
                        slot.cfg.n_layers,
                        slot.cfg.modulation_order,
                    ],
                    data: slot.tx.bits.clone(),
                },
            ),
            (
                "meta".to_string(),
                DumpArray::Real {
                    shape: vec![3],
                    data: vec![
                        slot.noise_var,
                        slot.realized_sinr_db,
                        slot.realized_inr_db.unwrap_or(f64::NEG_INFINITY),
                    ],
                },
            ),
        ];
        SlotDump {
            config: slot.cfg.clone(),
            arrays,
        }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Format(format!("config encode: {e}")))?;
        write_u32(&mut w, cfg.len() as u32)?;
        w.write_all(&cfg)?;
        write_u32(&mut w, self.arrays.len() as u32)?;
        for (name, arr) in &self.arrays {
            write_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            let (dtype, shape) = match arr {
                DumpArray::Complex { shape, .. } => (DTYPE_C64, shape),
                DumpArray::Real { shape, .. } => (DTYPE_F64, shape),
                DumpArray::Bytes { shape, .. } => (DTYPE_U8, shape),
            };
            w.write_all(&[dtype])?;
            write_u32(&mut w, shape.len() as u32)?;
            for &d in shape {
                write_u64(&mut w, d as u64)?;
            }
            match arr {
                DumpArray::Complex { data, .. } => {
                    for z in data {
                        w.write_all(&z.re.to_le_bytes())?;
                        w.write_all(&z.im.to_le_bytes())?;
                    }
                }
                DumpArray::Real { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                DumpArray::Bytes { data, .. } => w.write_all(data)?,
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<SlotDump> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad slot dump magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dump version {version}")));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let mut cfg_buf = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_buf)?;
        let config: SlotConfig = serde_json::from_slice(&cfg_buf)
            .map_err(|e| Error::Format(format!("config decode: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| Error::Format("non-utf8 name".into()))?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let arr = match dtype[0] {
                DTYPE_C64 => {
                    let mut data = Vec::with_capacity(n);
                    let mut b = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut b)?;
                        let re = f64::from_le_bytes(b);
                        r.read_exact(&mut b)?;
                        let im = f64::from_le_bytes(b);
                        data.push(Complex64::new(re, im));
                    }
                    DumpArray::Complex { shape, data }
                }
                DTYPE_F64 => {
                    let mut data = Vec::with_capacity(n);
                    let mut b = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut b)?;
                        data.push(f64::from_le_bytes(b));
                    }
                    DumpArray::Real { shape, data }
                }
                DTYPE_U8 => {
                    let mut data = vec![0u8; n];
                    r.read_exact(&mut data)?;
                    DumpArray::Bytes { shape, data }
                }
                other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
            };
            arrays.push((name, arr));
        }
        Ok(SlotDump { config, arrays })
    }
}
