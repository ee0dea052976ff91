//! PNG and binary PPM (P6) codecs for 8-bit RGB images.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use tiledit_core::imaging::Image;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        match ext.as_str() {
            "png" => Ok(ImageFormat::Png),
            "ppm" => Ok(ImageFormat::Ppm),
            _ => Err(Error::UnsupportedFormat(format!("{} (expected .png or .ppm)", path.display()))),
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    match format {
        ImageFormat::Png => decode_png(&mut r),
        ImageFormat::Ppm => decode_ppm(&mut r),
    }
}

/// Writes `img` quantized to 8 bits, format chosen by extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        ImageFormat::Png => encode_png(img, &mut w)?,
        ImageFormat::Ppm => encode_ppm(img, &mut w)?,
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_png<W: Write>(img: &Image, w: W) -> Result<()> {
    let (h, wd) = img.dims();
    let mut enc = png::Encoder::new(w, wd as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::malformed("png", e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&img.to_u8()).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Decodes 8- or 16-bit RGB, RGBA (alpha dropped) and palette PNGs.
pub fn decode_png<R: BufRead + Seek>(r: R) -> Result<Image> {
    let png_err = |e: png::DecodingError| Error::malformed("png", e.to_string());
    let mut dec = png::Decoder::new(r);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(png_err)?;
    let (color, depth) = reader.output_color_type();
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::UnsupportedFormat(format!("png color type {other:?}; RGB or RGBA required"))),
    };
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!("png bit depth {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::malformed("png", "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        for px in row[..w * channels].chunks(channels) {
            rgb.extend_from_slice(&px[..3]);
        }
    }
    Ok(Image::from_u8(h, w, &rgb)?)
}

pub fn encode_ppm<W: Write>(img: &Image, mut w: W) -> Result<()> {
    let (h, wd) = img.dims();
    let io = |e| Error::io("<ppm stream>", e);
    write!(w, "P6\n{wd} {h}\n255\n").map_err(io)?;
    w.write_all(&img.to_u8()).map_err(io)
}

/// Binary PPM with maxval 255; `#` comments in the header are skipped.
pub fn decode_ppm<R: Read>(mut r: R) -> Result<Image> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<ppm stream>", e))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed("ppm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::UnsupportedFormat(format!("ppm magic {:?}; only P6 is supported", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::malformed("ppm", format!("bad header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("ppm maxval {maxval}; only 255 is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = h * w * 3;
    if bytes.len() < pos + need {
        return Err(Error::malformed(
            "ppm",
            format!("raster has {} bytes, expected {need}", bytes.len().saturating_sub(pos)),
        ));
    }
    Ok(Image::from_u8(h, w, &bytes[pos..pos + need])?)
}
