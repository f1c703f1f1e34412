//! The `WLB1` binary container.
//!
//! A file is a magic tag, a section table and a payload area. Every section
//! carries a name, an element type and a shape, so readers never need outside
//! knowledge of the layout. All integers and floats are little-endian.
//!
//! ```text
//! "WLB1"  u32 version  u32 section_count
//! per section: u16 name_len, name (utf-8), u8 dtype, u8 ndim, u64 dims[ndim],
//!              u64 offset (from file start), u64 byte_len
//! payload: section bodies in table order, back to back
//! ```
//!
//! See `docs/formats.md` for the section names used by each artifact.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WLB1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    I64 = 1,
    U8 = 2,
    Text = 3,
}

impl DType {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => DType::F64,
            1 => DType::I64,
            2 => DType::U8,
            3 => DType::Text,
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        })
    }

    fn width(self) -> usize {
        match self {
            DType::F64 | DType::I64 => 8,
            DType::U8 | DType::Text => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
    Text(String),
}

impl SectionData {
    fn dtype(&self) -> DType {
        match self {
            SectionData::F64(_) => DType::F64,
            SectionData::I64(_) => DType::I64,
            SectionData::U8(_) => DType::U8,
            SectionData::Text(_) => DType::Text,
        }
    }

    fn len(&self) -> usize {
        match self {
            SectionData::F64(v) => v.len(),
            SectionData::I64(v) => v.len(),
            SectionData::U8(v) => v.len(),
            SectionData::Text(s) => s.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: SectionData,
}

/// An ordered collection of named, typed sections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    sections: Vec<Section>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn contains(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: SectionData) -> Result<()> {
        if self.contains(name) {
            return Err(Error::Format(format!("duplicate section `{name}`")));
        }
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("section `{name}` header too large")));
        }
        let expected: usize = shape.iter().product();
        if !matches!(data, SectionData::Text(_)) && expected != data.len() {
            return Err(Error::Format(format!(
                "section `{name}`: shape {shape:?} holds {expected} elements, got {}",
                data.len()
            )));
        }
        self.sections.push(Section { name: name.to_string(), shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        self.push(name, shape, SectionData::F64(data))
    }

    pub fn push_i64(&mut self, name: &str, shape: &[usize], data: Vec<i64>) -> Result<()> {
        self.push(name, shape, SectionData::I64(data))
    }

    pub fn push_u8(&mut self, name: &str, shape: &[usize], data: Vec<u8>) -> Result<()> {
        self.push(name, shape, SectionData::U8(data))
    }

    pub fn push_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.push(name, &[text.len()], SectionData::Text(text.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections.iter().find(|s| s.name == name).ok_or_else(|| Error::Format(format!("missing section `{name}`")))
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let s = self.get(name)?;
        match &s.data {
            SectionData::F64(v) => Ok((&s.shape, v)),
            _ => Err(Error::Format(format!("section `{name}` is not f64"))),
        }
    }

    pub fn i64(&self, name: &str) -> Result<(&[usize], &[i64])> {
        let s = self.get(name)?;
        match &s.data {
            SectionData::I64(v) => Ok((&s.shape, v)),
            _ => Err(Error::Format(format!("section `{name}` is not i64"))),
        }
    }

    pub fn u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        let s = self.get(name)?;
        match &s.data {
            SectionData::U8(v) => Ok((&s.shape, v)),
            _ => Err(Error::Format(format!("section `{name}` is not u8"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        let s = self.get(name)?;
        match &s.data {
            SectionData::Text(t) => Ok(t),
            _ => Err(Error::Format(format!("section `{name}` is not text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header_len: usize =
            12 + self.sections.iter().map(|s| 2 + s.name.len() + 2 + 8 * s.shape.len() + 16).sum::<usize>();
        let mut out = Vec::with_capacity(header_len);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.sections.len() as u32).unwrap();
        let mut offset = header_len as u64;
        for s in &self.sections {
            let byte_len = (s.data.len() * s.data.dtype().width()) as u64;
            out.write_u16::<LittleEndian>(s.name.len() as u16).unwrap();
            out.extend_from_slice(s.name.as_bytes());
            out.write_u8(s.data.dtype() as u8).unwrap();
            out.write_u8(s.shape.len() as u8).unwrap();
            for &d in &s.shape {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            out.write_u64::<LittleEndian>(offset).unwrap();
            out.write_u64::<LittleEndian>(byte_len).unwrap();
            offset += byte_len;
        }
        debug_assert_eq!(out.len(), header_len);
        for s in &self.sections {
            match &s.data {
                SectionData::F64(v) => {
                    for &x in v {
                        out.write_f64::<LittleEndian>(x).unwrap();
                    }
                }
                SectionData::I64(v) => {
                    for &x in v {
                        out.write_i64::<LittleEndian>(x).unwrap();
                    }
                }
                SectionData::U8(v) => out.extend_from_slice(v),
                SectionData::Text(t) => out.extend_from_slice(t.as_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |_| Error::Format("truncated header".into());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, expected WLB1".into()));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = cur.read_u16::<LittleEndian>().map_err(truncated)? as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("section name is not utf-8".into()))?;
            let dtype = DType::from_u8(cur.read_u8().map_err(truncated)?)?;
            let ndim = cur.read_u8().map_err(truncated)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.read_u64::<LittleEndian>().map_err(truncated)? as usize);
            }
            let offset = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            let byte_len = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            table.push((name, dtype, shape, offset, byte_len));
        }
        let mut out = Container::new();
        for (name, dtype, shape, offset, byte_len) in table {
            let end = offset
                .checked_add(byte_len)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Format(format!("section `{name}` out of bounds")))?;
            if byte_len % dtype.width() != 0 {
                return Err(Error::Format(format!("section `{name}` has ragged length")));
            }
            let body = &bytes[offset..end];
            let mut rd = Cursor::new(body);
            let n = byte_len / dtype.width();
            let data = match dtype {
                DType::F64 => SectionData::F64((0..n).map(|_| rd.read_f64::<LittleEndian>().unwrap()).collect()),
                DType::I64 => SectionData::I64((0..n).map(|_| rd.read_i64::<LittleEndian>().unwrap()).collect()),
                DType::U8 => SectionData::U8(body.to_vec()),
                DType::Text => SectionData::Text(
                    String::from_utf8(body.to_vec())
                        .map_err(|_| Error::Format(format!("section `{name}` is not utf-8")))?,
                ),
            };
            out.push(&name, &shape, data)?;
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_shape() {
        assert!(Container::from_bytes(b"XXXX\x01\0\0\0\0\0\0\0").is_err());
        let mut c = Container::new();
        assert!(c.push_f64("a", &[2, 2], vec![1.0; 3]).is_err());
        c.push_f64("a", &[3], vec![1.0; 3]).unwrap();
        assert!(c.push_i64("a", &[1], vec![1]).is_err());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut c = Container::new();
        c.push_f64("x", &[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(f in prop::collection::vec(-1e9f64..1e9, 0..40),
                     i in prop::collection::vec(any::<i64>(), 0..40),
                     t in "[a-z ]{0,30}") {
            let mut c = Container::new();
            c.push_f64("floats", &[f.len()], f.clone()).unwrap();
            c.push_i64("ints", &[i.len()], i.clone()).unwrap();
            c.push_text("note", &t).unwrap();
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
