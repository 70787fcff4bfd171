//! Minimal reader for level-5 MAT files: numeric and char variables, optionally zlib-compressed.

use std::collections::BTreeMap;
use std::io::Read;

use flate2::read::ZlibDecoder;

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;
const MI_UTF8: u32 = 16;

const MX_CELL: u8 = 1;
const MX_STRUCT: u8 = 2;
const MX_CHAR: u8 = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum MatValue {
    /// Column-major values with their dimensions.
    Numeric { dims: Vec<usize>, data: Vec<f64> },
    Char(String),
    /// Cells, structs, sparse and object arrays are recognised but not decoded.
    Unsupported,
}

impl MatValue {
    pub fn as_numeric(&self) -> Option<(&[usize], &[f64])> {
        match self {
            MatValue::Numeric { dims, data } => Some((dims, data)),
            _ => None,
        }
    }

    /// First element of a numeric array.
    pub fn scalar(&self) -> Option<f64> {
        self.as_numeric().and_then(|(_, d)| d.first().copied())
    }

    /// A 2-D numeric array as row-major `rows × cols`.
    pub fn to_row_major(&self) -> Option<(usize, usize, Vec<f64>)> {
        let (dims, data) = self.as_numeric()?;
        if dims.len() != 2 {
            return None;
        }
        let (r, c) = (dims[0], dims[1]);
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            for i in 0..r {
                out[i * c + j] = data[j * r + i];
            }
        }
        Some((r, c, out))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MatError {
    #[error("file too short for a MAT header")]
    Header,
    #[error("big-endian MAT files are not supported")]
    BigEndian,
    #[error("truncated element at byte {0}")]
    Truncated(usize),
    #[error("unexpected element type {found} (wanted {wanted})")]
    Type { found: u32, wanted: &'static str },
    #[error("decompression failed: {0}")]
    Inflate(#[from] std::io::Error),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32, MatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MatError> {
        let end = self.pos.checked_add(n).ok_or(MatError::Truncated(self.pos))?;
        if end > self.buf.len() {
            return Err(MatError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    /// Reads one tagged element, returning its type and payload.
    fn element(&mut self) -> Result<(u32, &'a [u8]), MatError> {
        let tag = self.u32()?;
        if tag >> 16 != 0 {
            let n = (tag >> 16) as usize;
            let data = self.take(4)?;
            return Ok((tag & 0xffff, &data[..n.min(4)]));
        }
        let n = self.u32()? as usize;
        let data = self.take(n)?;
        if tag != MI_COMPRESSED {
            let pad = (8 - n % 8) % 8;
            let pad = pad.min(self.buf.len() - self.pos);
            self.pos += pad;
        }
        Ok((tag, data))
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }
}

fn decode_numbers(ty: u32, data: &[u8]) -> Result<Vec<f64>, MatError> {
    fn chunks<const N: usize>(d: &[u8], f: impl Fn([u8; N]) -> f64) -> Vec<f64> {
        d.chunks_exact(N)
            .map(|c| f(c.try_into().expect("chunk size")))
            .collect()
    }
    Ok(match ty {
        MI_INT8 => data.iter().map(|&b| b as i8 as f64).collect(),
        MI_UINT8 | MI_UTF8 => data.iter().map(|&b| b as f64).collect(),
        MI_INT16 => chunks::<2>(data, |b| i16::from_le_bytes(b) as f64),
        MI_UINT16 => chunks::<2>(data, |b| u16::from_le_bytes(b) as f64),
        MI_INT32 => chunks::<4>(data, |b| i32::from_le_bytes(b) as f64),
        MI_UINT32 => chunks::<4>(data, |b| u32::from_le_bytes(b) as f64),
        MI_SINGLE => chunks::<4>(data, |b| f32::from_le_bytes(b) as f64),
        MI_DOUBLE => chunks::<8>(data, f64::from_le_bytes),
        MI_INT64 => chunks::<8>(data, |b| i64::from_le_bytes(b) as f64),
        MI_UINT64 => chunks::<8>(data, |b| u64::from_le_bytes(b) as f64),
        other => {
            return Err(MatError::Type {
                found: other,
                wanted: "numeric",
            })
        }
    })
}

fn parse_matrix(payload: &[u8]) -> Result<(String, MatValue), MatError> {
    let mut c = Cursor { buf: payload, pos: 0 };
    if payload.is_empty() {
        return Ok((String::new(), MatValue::Unsupported));
    }
    let (_, flags) = c.element()?;
    let class = flags.first().copied().unwrap_or(0);
    let (_, dims_raw) = c.element()?;
    let dims: Vec<usize> = decode_numbers(MI_INT32, dims_raw)?
        .into_iter()
        .map(|d| d as usize)
        .collect();
    let (_, name_raw) = c.element()?;
    let name = String::from_utf8_lossy(name_raw).into_owned();
    let value = match class {
        MX_CELL | MX_STRUCT => MatValue::Unsupported,
        MX_CHAR => {
            let (ty, data) = c.element()?;
            let codes = decode_numbers(ty, data)?;
            MatValue::Char(
                codes
                    .into_iter()
                    .filter_map(|v| char::from_u32(v as u32))
                    .collect(),
            )
        }
        6..=15 => {
            let (ty, data) = c.element()?;
            MatValue::Numeric {
                dims,
                data: decode_numbers(ty, data)?,
            }
        }
        _ => MatValue::Unsupported,
    };
    Ok((name, value))
}

fn parse_elements(buf: &[u8], out: &mut BTreeMap<String, MatValue>) -> Result<(), MatError> {
    let mut c = Cursor { buf, pos: 0 };
    while !c.done() {
        if buf.len() - c.pos < 8 {
            break;
        }
        let (ty, payload) = c.element()?;
        match ty {
            MI_MATRIX => {
                let (name, value) = parse_matrix(payload)?;
                out.insert(name, value);
            }
            MI_COMPRESSED => {
                let mut inflated = Vec::new();
                ZlibDecoder::new(payload).read_to_end(&mut inflated)?;
                parse_elements(&inflated, out)?;
            }
            _ => {}
        }
    }
    Ok(())
}

/// Parses every top-level variable of a MAT v5 file image.
pub fn read_mat(bytes: &[u8]) -> Result<BTreeMap<String, MatValue>, MatError> {
    if bytes.len() < 128 {
        return Err(MatError::Header);
    }
    match &bytes[126..128] {
        b"IM" => {}
        b"MI" => return Err(MatError::BigEndian),
        _ => return Err(MatError::Header),
    }
    let mut out = BTreeMap::new();
    parse_elements(&bytes[128..], &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::ZlibEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn element(ty: u32, data: &[u8]) -> Vec<u8> {
        let mut v = ty.to_le_bytes().to_vec();
        v.extend((data.len() as u32).to_le_bytes());
        v.extend(data);
        while !v.len().is_multiple_of(8) {
            v.push(0);
        }
        v
    }

    fn double_matrix(name: &str, rows: usize, cols: usize, col_major: &[f64]) -> Vec<u8> {
        let mut body = element(MI_UINT32, &[6, 0, 0, 0, 0, 0, 0, 0]);
        let mut dims = (rows as i32).to_le_bytes().to_vec();
        dims.extend((cols as i32).to_le_bytes());
        body.extend(element(MI_INT32, &dims));
        body.extend(element(MI_INT8, name.as_bytes()));
        let data: Vec<u8> = col_major.iter().flat_map(|v| v.to_le_bytes()).collect();
        body.extend(element(MI_DOUBLE, &data));
        element(MI_MATRIX, &body)
    }

    fn header() -> Vec<u8> {
        let mut h = vec![b' '; 116];
        h.extend([0u8; 8]);
        h.extend([0x00, 0x01]);
        h.extend(b"IM");
        h
    }

    #[test]
    fn reads_plain_and_compressed_doubles() {
        let mut file = header();
        file.extend(double_matrix("a", 2, 3, &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]));
        let inner = double_matrix("sensor_readings", 2, 2, &[0.5, -1.0, 2.0, 8.0]);
        let mut z = ZlibEncoder::new(Vec::new(), Compression::default());
        z.write_all(&inner).unwrap();
        let packed = z.finish().unwrap();
        file.extend(MI_COMPRESSED.to_le_bytes());
        file.extend((packed.len() as u32).to_le_bytes());
        file.extend(&packed);

        let vars = read_mat(&file).unwrap();
        let (r, c, a) = vars["a"].to_row_major().unwrap();
        assert_eq!((r, c), (2, 3));
        assert_eq!(a, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (_, _, s) = vars["sensor_readings"].to_row_major().unwrap();
        assert_eq!(s, vec![0.5, 2.0, -1.0, 8.0]);
    }

    #[test]
    fn rejects_short_input() {
        assert!(matches!(read_mat(&[0; 10]), Err(MatError::Header)));
    }
}
