//! Tensor and still-image file I/O.
//!
//! Tensor files (little-endian):
//!
//! ```text
//! offset 0   magic "DKW1"
//! offset 4   u32 channels
//! offset 8   u32 height
//! offset 12  u32 width
//! offset 16  channels*height*width f32 samples, channel-major then row-major
//! ```
//!
//! Images are 8-bit RGB; binary PPM (P6) is always available, PNG is
//! accepted as well. Every writer stages its output in a temporary file next
//! to the destination and renames it into place, so a failed write never
//! leaves a partial file behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::{FieldMap, Plane};

pub const TENSOR_MAGIC: &[u8; 4] = b"DKW1";
pub const TENSOR_HEADER_LEN: usize = 16;
/// Largest accepted extent along any axis.
pub const MAX_AXIS: u32 = 1 << 16;

/// Serializes `map` into the tensor byte layout.
pub fn encode_tensor<T: Scalar>(map: &FieldMap<T>) -> Result<Vec<u8>> {
    let (c, h, w) = map.shape();
    for (name, v) in [("channels", c), ("height", h), ("width", w)] {
        if v > MAX_AXIS as usize {
            return Err(Error::InvalidArgument(format!(
                "{name} {v} exceeds the tensor format limit {MAX_AXIS}"
            )));
        }
    }
    let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + 4 * c * h * w);
    out.extend_from_slice(TENSOR_MAGIC);
    for v in [c, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (i, v) in map.iter().enumerate() {
        let f = to_f64(v) as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!(
                "sample {i} does not fit in 32-bit float ({v})"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parses the tensor byte layout.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<FieldMap<T>> {
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        let found = &bytes[..bytes.len().min(4)];
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(TENSOR_MAGIC),
                String::from_utf8_lossy(found)
            ),
        });
    }
    if bytes.len() < TENSOR_HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!(
                "truncated header: expected {TENSOR_HEADER_LEN} bytes, found {}",
                bytes.len()
            ),
        });
    }
    let mut dims = [0usize; 3];
    for (i, name) in ["channels", "height", "width"].iter().enumerate() {
        let off = 4 + 4 * i;
        let v = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4-byte slice"));
        if v == 0 || v > MAX_AXIS {
            return Err(Error::Format {
                offset: off as u64,
                detail: format!("{name} {v} outside 1..={MAX_AXIS}"),
            });
        }
        dims[i] = v as usize;
    }
    let [c, h, w] = dims;
    let expected = 4 * c * h * w;
    let payload = &bytes[TENSOR_HEADER_LEN..];
    if payload.len() != expected {
        let detail = if payload.len() < expected {
            format!("truncated payload: expected {expected} bytes, found {}", payload.len())
        } else {
            format!("trailing data: expected {expected} payload bytes, found {}", payload.len())
        };
        return Err(Error::Format {
            offset: (TENSOR_HEADER_LEN + payload.len().min(expected)) as u64,
            detail,
        });
    }
    let mut data = Vec::with_capacity(c * h * w);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let f = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !f.is_finite() {
            return Err(Error::Format {
                offset: (TENSOR_HEADER_LEN + 4 * i) as u64,
                detail: format!("non-finite sample {f}"),
            });
        }
        data.push(lit(f as f64));
    }
    FieldMap::from_vec(c, h, w, data)
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<FieldMap<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_tensor(&bytes)
}

pub fn write_tensor<T: Scalar>(map: &FieldMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_tensor(map)?;
    write_atomically(path.as_ref(), |f| f.write_all(&bytes))
}

/// Writes through a sibling temporary file and renames on success.
pub fn write_atomically(
    path: &Path,
    fill: impl FnOnce(&mut fs::File) -> std::io::Result<()>,
) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    fill(tmp.as_file_mut()).map_err(io_err)?;
    tmp.as_file_mut().flush().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Reads an 8-bit RGB image into three channels scaled to `[0, 1]`.
pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<FieldMap<T>> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            detail: format!("expected 8-bit RGB, found {:?}", img.color()),
        });
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let scale = lit::<T>(255.0);
    let planes = (0..3)
        .map(|c| {
            Plane::from_fn(h, w, |x, y| {
                lit::<T>(rgb.get_pixel(x as u32, y as u32)[c] as f64) / scale
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FieldMap::new(planes)
}

/// Quantizes a `[0, 1]` value to a byte: clamp, scale by 255, round half up.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    let v = to_f64(v).clamp(0.0, 1.0);
    (v * 255.0 + 0.5).floor() as u8
}

/// Writes a 3-channel map as 8-bit RGB. The format follows the extension:
/// `.png` writes PNG, anything else binary PPM.
pub fn write_image<T: Scalar>(map: &FieldMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if map.channels() != 3 {
        return Err(Error::mismatch("image channels", 3, map.channels()));
    }
    let (h, w) = map.dims();
    let mut buf = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(quantize(map.plane(c).get(x, y)));
            }
        }
    }
    let is_png = ImageFormat::from_path(path).ok() == Some(ImageFormat::Png);
    let mut encoded = Vec::new();
    let res = if is_png {
        image::codecs::png::PngEncoder::new(&mut encoded).write_image(
            &buf,
            w as u32,
            h as u32,
            image::ExtendedColorType::Rgb8,
        )
    } else {
        PnmEncoder::new(&mut encoded)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)
    };
    res.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomically(path, |f| f.write_all(&encoded))
}
