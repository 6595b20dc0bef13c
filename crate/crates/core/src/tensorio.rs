//! In-memory tensors and the on-disk formats shared by every pipeline stage.
//!
//! The SLTF layout is little-endian throughout:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "SLTF"
//! 4       2           version (u16) = 1
//! 6       1           dtype code: 1=f32 2=u8 3=u16 4=i32
//! 7       1           ndim (1..=4)
//! 8       4*ndim      dimension sizes (u32, each >= 1)
//! ..      n*size      row-major payload, last axis fastest
//! ```
//!
//! Binary PPM (`P6`) and PGM (`P5`) with maxval 255 are accepted for images
//! and masks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SLTF_MAGIC: &[u8; 4] = b"SLTF";
pub const SLTF_VERSION: u16 = 1;
pub const MAX_DIMS: usize = 4;

/// Mask value for in-distribution pixels.
pub const MASK_ID: u8 = 0;
/// Mask value for out-of-distribution pixels.
pub const MASK_OOD: u8 = 1;
/// Mask value for pixels excluded from training and evaluation.
pub const MASK_IGNORE: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    U8,
    U16,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::U8 => 2,
            DType::U16 => 3,
            DType::I32 => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => DType::F32,
            2 => DType::U8,
            3 => DType::U16,
            4 => DType::I32,
            other => return Err(Error::UnsupportedDtype(other)),
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::F32 | DType::I32 => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U16(Vec<u16>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
            TensorData::U16(_) => DType::U16,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// Bitwise equality, so NaN payloads and signed zeros round-trip observably.
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            (TensorData::U16(a), TensorData::U16(b)) => a == b,
            (TensorData::I32(a), TensorData::I32(b)) => a == b,
            _ => false,
        }
    }
}

/// An n-dimensional row-major array with up to four axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_DIMS {
        return Err(Error::shape(format!(
            "tensor must have 1..={MAX_DIMS} dimensions, got {}",
            shape.len()
        )));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if d > u32::MAX as usize {
            return Err(Error::DimensionOverflow(format!(
                "dimension {d} exceeds u32"
            )));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::DimensionOverflow(format!("{shape:?} overflows usize")))?;
    }
    Ok(n)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn from_u16(shape: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        Self::new(shape, TensorData::U16(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u16(&self) -> Option<&[u16]> {
        match &self.data {
            TensorData::U16(v) => Some(v),
            _ => None,
        }
    }

    /// Size of the SLTF encoding of this tensor in bytes.
    pub fn encoded_len(&self) -> usize {
        8 + 4 * self.shape.len() + self.len() * self.dtype().size()
    }
}

/// Writes `t` in SLTF format and returns the number of bytes written.
pub fn write_tensor<W: Write>(t: &Tensor, mut w: W) -> Result<usize> {
    let mut header = Vec::with_capacity(8 + 4 * t.shape.len());
    header.extend_from_slice(SLTF_MAGIC);
    header.extend_from_slice(&SLTF_VERSION.to_le_bytes());
    header.push(t.dtype().code());
    header.push(t.shape.len() as u8);
    for &d in &t.shape {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }
    w.write_all(&header)?;

    let mut payload = Vec::with_capacity(t.len() * t.dtype().size());
    match &t.data {
        TensorData::F32(v) => v
            .iter()
            .for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => payload.extend_from_slice(v),
        TensorData::U16(v) => v
            .iter()
            .for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v
            .iter()
            .for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(header.len() + payload.len())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    expected: buf.len(),
                    found: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Reads one SLTF tensor, consuming exactly its encoded length from `r`.
pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut fixed = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut fixed)?;
    if &fixed[0..4] != SLTF_MAGIC {
        return Err(Error::BadMagic {
            expected: "SLTF".into(),
            found: String::from_utf8_lossy(&fixed[0..4]).into_owned(),
        });
    }
    let version = u16::from_le_bytes([fixed[4], fixed[5]]);
    if version != SLTF_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(fixed[6])?;
    let ndim = fixed[7] as usize;
    if ndim == 0 || ndim > MAX_DIMS {
        return Err(Error::Format(format!("ndim {ndim} outside 1..={MAX_DIMS}")));
    }
    let mut dims = vec![0u8; 4 * ndim];
    read_exact_or_truncated(&mut r, &mut dims)?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = check_shape(&shape)?;
    let nbytes = n
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::DimensionOverflow(format!("{shape:?} payload overflows")))?;

    // Grow the buffer as bytes arrive instead of trusting the header's size.
    let mut payload = Vec::new();
    r.by_ref().take(nbytes as u64).read_to_end(&mut payload)?;
    if payload.len() != nbytes {
        return Err(Error::Truncated {
            expected: nbytes,
            found: payload.len(),
        });
    }

    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload),
        DType::U16 => TensorData::U16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
        DType::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    };
    Tensor::new(shape, data)
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?))
}

pub fn write_tensor_file(t: &Tensor, path: impl AsRef<Path>) -> Result<usize> {
    write_tensor(t, BufWriter::new(File::create(path)?))
}

// --- Netpbm -----------------------------------------------------------------

fn next_byte<R: Read>(r: &mut R) -> Result<Option<u8>> {
    let mut b = [0u8; 1];
    loop {
        match r.read(&mut b) {
            Ok(0) => return Ok(None),
            Ok(_) => return Ok(Some(b[0])),
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
/// Consumes exactly one whitespace byte after the token.
fn header_token<R: Read>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let b = next_byte(r)?.ok_or_else(|| Error::Format("truncated netpbm header".into()))?;
        if b == b'#' && tok.is_empty() {
            while let Some(c) = next_byte(r)? {
                if c == b'\n' {
                    break;
                }
            }
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
        if tok.len() > 32 {
            return Err(Error::Format("oversized netpbm header token".into()));
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ascii netpbm header".into()))
}

fn header_number<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let tok = header_token(r)?;
    tok.parse::<usize>()
        .map_err(|_| Error::Format(format!("bad netpbm {what}: {tok:?}")))
}

fn read_netpbm<R: Read>(mut r: R, magic: &str, channels: usize) -> Result<Tensor> {
    let m = header_token(&mut r)?;
    if m != magic {
        return Err(Error::BadMagic {
            expected: magic.into(),
            found: m,
        });
    }
    let width = header_number(&mut r, "width")?;
    let height = header_number(&mut r, "height")?;
    let maxval = header_number(&mut r, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {maxval}")));
    }
    let mut shape = vec![height, width];
    if channels > 1 {
        shape.push(channels);
    }
    let n = check_shape(&shape)?;
    let mut data = Vec::new();
    r.take(n as u64).read_to_end(&mut data)?;
    if data.len() != n {
        return Err(Error::Truncated {
            expected: n,
            found: data.len(),
        });
    }
    Tensor::from_u8(shape, data)
}

/// Reads a binary `P6` image into a u8 tensor of shape `[H, W, 3]`.
pub fn read_ppm<R: Read>(r: R) -> Result<Tensor> {
    read_netpbm(r, "P6", 3)
}

/// Reads a binary `P5` image into a u8 tensor of shape `[H, W]`.
pub fn read_pgm<R: Read>(r: R) -> Result<Tensor> {
    read_netpbm(r, "P5", 1)
}

pub fn write_ppm<W: Write>(t: &Tensor, mut w: W) -> Result<usize> {
    let (h, wd) = match t.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::shape(format!("PPM needs [H, W, 3], got {s:?}"))),
    };
    let data = t
        .as_u8()
        .ok_or_else(|| Error::shape("PPM needs a u8 tensor"))?;
    let header = format!("P6\n{wd} {h}\n255\n");
    w.write_all(header.as_bytes())?;
    w.write_all(data)?;
    w.flush()?;
    Ok(header.len() + data.len())
}

pub fn write_pgm<W: Write>(t: &Tensor, mut w: W) -> Result<usize> {
    let (h, wd) = match t.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::shape(format!("PGM needs [H, W], got {s:?}"))),
    };
    let data = t
        .as_u8()
        .ok_or_else(|| Error::shape("PGM needs a u8 tensor"))?;
    let header = format!("P5\n{wd} {h}\n255\n");
    w.write_all(header.as_bytes())?;
    w.write_all(data)?;
    w.flush()?;
    Ok(header.len() + data.len())
}

/// Loads an image or mask by extension: `.ppm`, `.pgm`, anything else as SLTF.
pub fn read_any_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let r = BufReader::new(File::open(path)?);
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(r),
        Some("pgm") => read_pgm(r),
        _ => read_tensor(r),
    }
}

// --- typed views ------------------------------------------------------------

fn all_finite(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Per-cell embeddings, f32 `[Hf, Wf, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let v = tensor
            .as_f32()
            .ok_or_else(|| Error::shape("feature map must be f32"))?;
        if tensor.shape().len() != 3 {
            return Err(Error::shape(format!(
                "feature map must be [Hf, Wf, D], got {:?}",
                tensor.shape()
            )));
        }
        if !all_finite(v) {
            return Err(Error::input("feature map contains non-finite values"));
        }
        Ok(Self { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let d = self.dim();
        let start = (row * self.width() + col) * d;
        &self.values()[start..start + d]
    }

    pub fn values(&self) -> &[f32] {
        self.tensor.as_f32().expect("validated f32")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// Per-pixel class logits, f32 `[H, W, K]` with `K >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    tensor: Tensor,
}

impl LogitMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let v = tensor
            .as_f32()
            .ok_or_else(|| Error::shape("logit map must be f32"))?;
        match tensor.shape() {
            [_, _, k] if *k >= 2 => {}
            s => {
                return Err(Error::shape(format!(
                    "logit map must be [H, W, K] with K >= 2, got {s:?}"
                )))
            }
        }
        if !all_finite(v) {
            return Err(Error::input("logit map contains non-finite values"));
        }
        Ok(Self { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn values(&self) -> &[f32] {
        self.tensor.as_f32().expect("validated f32")
    }

    pub fn pixel(&self, idx: usize) -> &[f32] {
        let k = self.num_classes();
        &self.values()[idx * k..(idx + 1) * k]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Class ids in `[0, K)` or 255.
    Training { num_classes: usize },
    /// 0 = ID, 1 = OOD, 255 = ignore.
    Evaluation,
}

/// A u8 `[H, W]` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    tensor: Tensor,
    kind: MaskKind,
}

impl LabelMask {
    pub fn new(tensor: Tensor, kind: MaskKind) -> Result<Self> {
        let v = tensor
            .as_u8()
            .ok_or_else(|| Error::shape("mask must be u8"))?;
        if tensor.shape().len() != 2 {
            return Err(Error::shape(format!(
                "mask must be [H, W], got {:?}",
                tensor.shape()
            )));
        }
        let bad = match kind {
            MaskKind::Training { num_classes } => v
                .iter()
                .find(|&&x| x != MASK_IGNORE && x as usize >= num_classes),
            MaskKind::Evaluation => v
                .iter()
                .find(|&&x| !matches!(x, MASK_ID | MASK_OOD | MASK_IGNORE)),
        };
        if let Some(x) = bad {
            return Err(Error::input(format!("mask value {x} invalid for {kind:?}")));
        }
        Ok(Self { tensor, kind })
    }

    pub fn training(tensor: Tensor, num_classes: usize) -> Result<Self> {
        Self::new(tensor, MaskKind::Training { num_classes })
    }

    pub fn evaluation(tensor: Tensor) -> Result<Self> {
        Self::new(tensor, MaskKind::Evaluation)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn values(&self) -> &[u8] {
        self.tensor.as_u8().expect("validated u8")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}
