//! PNG encoding for images (8-bit RGB) and label masks (8-bit indexed with
//! the schema palette embedded).

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMask};
use crate::schema::LabelSchema;

pub fn encode_mask_png(mask: &LabelMask, schema: &LabelSchema) -> Result<Vec<u8>> {
    mask.validate(schema)?;
    let mut palette: Vec<u8> = schema.palette().into_iter().flatten().collect();
    // Pad to 256 entries so every stored index has a palette slot.
    palette.resize(256 * 3, 0);
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, mask.width() as u32, mask.height() as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(mask.data()).map_err(png_err)?;
    }
    Ok(out)
}

/// Decodes an indexed (or 8-bit grayscale) PNG into raw label ids and
/// validates them against `schema`.
pub fn decode_mask_png(bytes: &[u8], schema: &LabelSchema) -> Result<LabelMask> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(mem_err)?];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(Error::Schema(format!(
            "mask must be 8-bit indexed, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.line_size * info.height as usize);
    let (h, w) = (info.height as usize, info.width as usize);
    let data = if info.line_size == w {
        buf
    } else {
        buf.chunks(info.line_size).flat_map(|row| row[..w].to_vec()).collect()
    };
    LabelMask::new(h, w, data, schema)
}

pub fn encode_image_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&image.to_rgb8()).map_err(png_err)?;
    }
    Ok(out)
}

/// Decodes any 8/16-bit PNG into an RGB image (alpha dropped, gray expanded).
pub fn decode_image_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(mem_err)?];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = info.color_type.samples();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * stride].chunks_exact(stride) {
            match stride {
                1 | 2 => rgb.extend_from_slice(&[px[0], px[0], px[0]]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    Image::from_rgb8(h, w, &rgb)
}

fn png_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Decode(format!("png: {e}"))
}

fn mem_err() -> Error {
    Error::Decode("png: image too large".into())
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Decode(m) => Error::format(path, m),
        other => other,
    }
}

pub fn save_mask(mask: &LabelMask, schema: &LabelSchema, path: &Path) -> Result<()> {
    let bytes = encode_mask_png(mask, schema)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: &Path, schema: &LabelSchema) -> Result<LabelMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask_png(&bytes, schema).map_err(|e| with_path(path, e))
}

pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let bytes = encode_image_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image_png(&bytes).map_err(|e| with_path(path, e))
}
