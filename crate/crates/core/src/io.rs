//! Named-array container files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "M2MARRS\0"
//! version  u32      1
//! dtype    u32      1 = f32, 2 = f64
//! count    u32      number of arrays
//! repeated count times:
//!   name_len u32, name (UTF-8), ndim u32, dims u64 x ndim,
//!   data     prod(dims) values of dtype, C order
//! ```

use crate::error::{M2mError, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"M2MARRS\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(M2mError::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Ordered collection of named arrays.
pub type Arrays = Vec<(String, ArrayD<f64>)>;

pub fn write_arrays<W: Write>(mut out: W, arrays: &[(String, ArrayD<f64>)], dtype: DType) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(dtype.code())?;
    out.write_u32::<LittleEndian>(arrays.len() as u32)?;
    for (name, a) in arrays {
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        out.write_u32::<LittleEndian>(a.ndim() as u32)?;
        for &d in a.shape() {
            out.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in a.iter() {
            match dtype {
                DType::F32 => out.write_f32::<LittleEndian>(v as f32)?,
                DType::F64 => out.write_f64::<LittleEndian>(v)?,
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_arrays<R: Read>(mut input: R) -> Result<(DType, Arrays)> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| M2mError::Format("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(M2mError::Format("bad magic; not an array container".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(M2mError::Format(format!("unsupported container version {version}")));
    }
    let dtype = DType::from_code(input.read_u32::<LittleEndian>()?)?;
    let count = input.read_u32::<LittleEndian>()?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = input.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| M2mError::Format("array name is not UTF-8".into()))?;
        let ndim = input.read_u32::<LittleEndian>()? as usize;
        let dims = (0..ndim)
            .map(|_| input.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(match dtype {
                DType::F32 => input.read_f32::<LittleEndian>()? as f64,
                DType::F64 => input.read_f64::<LittleEndian>()?,
            });
        }
        let a = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| M2mError::Format(e.to_string()))?;
        arrays.push((name, a));
    }
    Ok((dtype, arrays))
}

pub fn save_arrays(path: &Path, arrays: &[(String, ArrayD<f64>)], dtype: DType) -> Result<()> {
    write_arrays(BufWriter::new(File::create(path)?), arrays, dtype)
}

pub fn load_arrays(path: &Path) -> Result<(DType, Arrays)> {
    let file = File::open(path).map_err(|e| M2mError::Missing(format!("{}: {e}", path.display())))?;
    read_arrays(BufReader::new(file))
}

/// Removes and returns the array called `name`.
pub fn take(arrays: &mut Arrays, name: &str) -> Result<ArrayD<f64>> {
    let pos = arrays
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| M2mError::Format(format!("missing array {name:?}")))?;
    Ok(arrays.remove(pos).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Arrays {
        vec![
            ("inputs".into(), ArrayD::from_shape_fn(IxDyn(&[2, 1, 3, 3]), |i| i[2] as f64 * 0.5 - i[3] as f64)),
            ("scalar".into(), ArrayD::from_elem(IxDyn(&[]), std::f64::consts::PI)),
        ]
    }

    #[test]
    fn roundtrip_f64_is_exact() {
        let mut buf = Vec::new();
        write_arrays(&mut buf, &sample(), DType::F64).unwrap();
        let (dtype, back) = read_arrays(buf.as_slice()).unwrap();
        assert_eq!(dtype, DType::F64);
        assert_eq!(back, sample());
    }

    #[test]
    fn f32_layout_is_documented_bytes() {
        let arrays = vec![("a".to_string(), ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, -2.0]).unwrap())];
        let mut buf = Vec::new();
        write_arrays(&mut buf, &arrays, DType::F32).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"M2MARRS\0");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(b'a');
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_arrays(&b"nonsense-bytes-here"[..]), Err(M2mError::Format(_))));
        let mut buf = Vec::new();
        write_arrays(&mut buf, &sample(), DType::F32).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_arrays(buf.as_slice()).is_err());
    }
}
