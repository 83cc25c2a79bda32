//! Reading and writing arrays in the numpy `.npy` format.
//!
//! Only what the toolkit stores is supported: C-order arrays of little-endian
//! `f4`, `f8`, `i4`, `i8`, `u1` and `b1`. Files are written as version 1.0;
//! versions 2.0 and 3.0 are accepted on read.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
    U8,
    Bool,
}

impl DType {
    fn from_descr(descr: &str) -> Option<Self> {
        Some(match descr {
            "<f4" => DType::F32,
            "<f8" => DType::F64,
            "<i4" => DType::I32,
            "<i8" => DType::I64,
            "|u1" | "<u1" => DType::U8,
            "|b1" => DType::Bool,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
    Bool(Vec<bool>),
}

impl NpyData {
    fn len(&self) -> usize {
        match self {
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
            NpyData::I32(v) => v.len(),
            NpyData::I64(v) => v.len(),
            NpyData::U8(v) => v.len(),
            NpyData::Bool(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            NpyData::F32(_) => DType::F32,
            NpyData::F64(_) => DType::F64,
            NpyData::I32(_) => DType::I32,
            NpyData::I64(_) => DType::I64,
            NpyData::U8(_) => DType::U8,
            NpyData::Bool(_) => DType::Bool,
        }
    }
}

/// An n-dimensional array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: NpyData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dimension(
                "npy array",
                format!("{expected} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(NpyArray { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, NpyData::F32(data))
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, NpyData::F64(data))
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        Self::new(shape, NpyData::I64(data))
    }

    pub fn bool(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        Self::new(shape, NpyData::Bool(data))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Values widened to `f64`. Integer arrays are rejected.
    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match &self.data {
            NpyData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            NpyData::F64(v) => Some(v.clone()),
            _ => None,
        }
    }

    /// Values widened to `i64`. Float arrays are rejected.
    pub fn to_i64(&self) -> Option<Vec<i64>> {
        match &self.data {
            NpyData::I32(v) => Some(v.iter().map(|&x| x as i64).collect()),
            NpyData::I64(v) => Some(v.clone()),
            NpyData::U8(v) => Some(v.iter().map(|&x| x as i64).collect()),
            _ => None,
        }
    }

    pub fn to_bool(&self) -> Option<Vec<bool>> {
        match &self.data {
            NpyData::Bool(v) => Some(v.clone()),
            NpyData::U8(v) => Some(v.iter().map(|&x| x != 0).collect()),
            _ => None,
        }
    }

    pub fn write_to<W: Write>(&self, writer: &mut W) -> io::Result<()> {
        fn put<T: npyz::AutoSerialize, W: Write>(writer: &mut W, shape: &[u64], values: &[T]) -> io::Result<()> {
            use npyz::WriterBuilder;
            let mut out = npyz::WriteOptions::new()
                .default_dtype()
                .shape(shape)
                .writer(writer)
                .begin_nd()?;
            out.extend(values.iter())?;
            out.finish()
        }
        let shape: Vec<u64> = self.shape.iter().map(|&d| d as u64).collect();
        match &self.data {
            NpyData::F32(v) => put(writer, &shape, v),
            NpyData::F64(v) => put(writer, &shape, v),
            NpyData::I32(v) => put(writer, &shape, v),
            NpyData::I64(v) => put(writer, &shape, v),
            NpyData::U8(v) => put(writer, &shape, v),
            NpyData::Bool(v) => put(writer, &shape, v),
        }
    }

    pub fn read_from<R: Read>(reader: R) -> std::result::Result<Self, String> {
        let file = npyz::NpyFile::new(reader).map_err(|e| e.to_string())?;
        if file.order() == npyz::Order::Fortran {
            return Err("fortran-order arrays are not supported".into());
        }
        let descr = match file.dtype() {
            npyz::DType::Plain(ts) => ts.to_string(),
            other => return Err(format!("unsupported dtype {:?}", other.descr())),
        };
        let dtype = DType::from_descr(&descr).ok_or_else(|| format!("unsupported dtype '{descr}'"))?;
        let shape: Vec<usize> = file.shape().iter().map(|&d| d as usize).collect();
        let short = |e: io::Error| format!("payload does not match shape {shape:?}: {e}");
        let data = match dtype {
            DType::F32 => NpyData::F32(file.into_vec().map_err(short)?),
            DType::F64 => NpyData::F64(file.into_vec().map_err(short)?),
            DType::I32 => NpyData::I32(file.into_vec().map_err(short)?),
            DType::I64 => NpyData::I64(file.into_vec().map_err(short)?),
            DType::U8 => NpyData::U8(file.into_vec().map_err(short)?),
            DType::Bool => NpyData::Bool(file.into_vec().map_err(short)?),
        };
        Ok(NpyArray { shape, data })
    }
}

pub fn write_npy(path: &Path, array: &NpyArray) -> Result<()> {
    let mut file = io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    array.write_to(&mut file).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn read_npy(path: &Path) -> Result<NpyArray> {
    let name = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            Error::format(&name, "file is missing")
        } else {
            Error::io(path, e)
        }
    })?;
    NpyArray::read_from(io::BufReader::new(file)).map_err(|msg| Error::format(name, msg))
}

/// Reads a float array and checks its shape.
pub fn read_f64_array(path: &Path, expected_shape: &[usize]) -> Result<Vec<f64>> {
    let array = read_npy(path)?;
    check_shape(path, &array, expected_shape)?;
    array
        .to_f64()
        .ok_or_else(|| Error::format(path.display().to_string(), "expected a float array"))
}

pub fn read_i64_array(path: &Path, expected_shape: &[usize]) -> Result<Vec<i64>> {
    let array = read_npy(path)?;
    check_shape(path, &array, expected_shape)?;
    array
        .to_i64()
        .ok_or_else(|| Error::format(path.display().to_string(), "expected an integer array"))
}

fn check_shape(path: &Path, array: &NpyArray, expected: &[usize]) -> Result<()> {
    if array.shape != expected {
        return Err(Error::dimension(
            path.display().to_string(),
            format!("{expected:?}"),
            format!("{:?}", array.shape),
        ));
    }
    Ok(())
}
