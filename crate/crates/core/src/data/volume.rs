use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::io_util::{write_atomic, Reader};

pub const MAGIC: &[u8; 4] = b"TSCV";
pub const VERSION: u32 = 1;

const KIND_F32: u8 = 0;
const KIND_MASK: u8 = 1;
const HEADER_LEN: usize = 29;

/// Slice-major 3D grid `[depth][height][width]` with in-plane spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// `(spacing_y, spacing_x)` in mm per pixel.
    pub spacing: (f32, f32),
    pub data: Vec<T>,
}

pub type Volume = Grid<f32>;
pub type MaskVolume = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn new(
        depth: usize,
        height: usize,
        width: usize,
        spacing: (f32, f32),
        data: Vec<T>,
    ) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(shape_err!(
                "volume extents must be positive, got {depth}x{height}x{width}"
            ));
        }
        if data.len() != depth * height * width {
            return Err(shape_err!(
                "volume {depth}x{height}x{width} needs {} values, got {}",
                depth * height * width,
                data.len()
            ));
        }
        Ok(Self {
            depth,
            height,
            width,
            spacing,
            data,
        })
    }

    pub fn filled(depth: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            depth,
            height,
            width,
            spacing: (1.0, 1.0),
            data: vec![value; depth * height * width],
        }
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn slice(&self, d: usize) -> &[T] {
        let n = self.slice_len();
        &self.data[d * n..(d + 1) * n]
    }

    pub fn slice_mut(&mut self, d: usize) -> &mut [T] {
        let n = self.slice_len();
        &mut self.data[d * n..(d + 1) * n]
    }

    pub fn same_geometry<U>(&self, other: &Grid<U>) -> bool {
        (self.depth, self.height, self.width) == (other.depth, other.height, other.width)
    }
}

impl Volume {
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl MaskVolume {
    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

trait Payload: Copy {
    const KIND: u8;
    fn put(self, out: &mut Vec<u8>);
    fn get(r: &mut Reader<'_>) -> Result<Self>;
}

impl Payload for f32 {
    const KIND: u8 = KIND_F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(r: &mut Reader<'_>) -> Result<Self> {
        r.f32()
    }
}

impl Payload for u8 {
    const KIND: u8 = KIND_MASK;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(r: &mut Reader<'_>) -> Result<Self> {
        r.u8()
    }
}

fn encode<T: Payload>(g: &Grid<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + g.data.len() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::KIND);
    for d in [g.depth, g.height, g.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&g.spacing.0.to_le_bytes());
    out.extend_from_slice(&g.spacing.1.to_le_bytes());
    for &v in &g.data {
        v.put(&mut out);
    }
    out
}

fn decode<T: Payload>(bytes: &[u8]) -> Result<Grid<T>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "expected magic \"TSCV\", found {:?}",
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let at = r.offset();
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported volume version {version}"),
        });
    }
    let at = r.offset();
    let kind = r.u8()?;
    if kind != T::KIND {
        return Err(Error::Format {
            offset: at,
            message: format!("volume kind {kind}, expected {}", T::KIND),
        });
    }
    let at = r.offset();
    let (depth, height, width) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let spacing = (r.f32()?, r.f32()?);
    if depth == 0 || height == 0 || width == 0 {
        return Err(Error::Format {
            offset: at,
            message: format!("zero extent in {depth}x{height}x{width}"),
        });
    }
    let n = depth
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&n| n <= bytes.len())
        .ok_or_else(|| Error::Format {
            offset: r.offset(),
            message: format!("payload for {depth}x{height}x{width} exceeds the file"),
        })?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(T::get(&mut r)?);
    }
    if !r.is_empty() {
        return Err(Error::Format {
            offset: r.offset(),
            message: "trailing bytes after payload".into(),
        });
    }
    if kind == KIND_MASK {
        let mask_at = HEADER_LEN;
        if let Some(i) = bytes[mask_at..].iter().position(|&b| b > 1) {
            return Err(Error::Format {
                offset: (mask_at + i) as u64,
                message: format!("mask value {} is not 0 or 1", bytes[mask_at + i]),
            });
        }
    }
    Ok(Grid {
        depth,
        height,
        width,
        spacing,
        data,
    })
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    encode(v)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    decode(bytes)
}

pub fn encode_mask(m: &MaskVolume) -> Vec<u8> {
    encode(m)
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskVolume> {
    decode(bytes)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode(v))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| in_file(path, e))
}

pub fn write_mask(path: &Path, m: &MaskVolume) -> Result<()> {
    write_atomic(path, &encode(m))
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| in_file(path, e))
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}
