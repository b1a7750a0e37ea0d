//! Minimal PNG read/write for dataset images and label maps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Write an 8-bit RGB image, row-major `[H, W, 3]`.
pub fn write_rgb8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), width * height * 3);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Write an 8-bit single-channel image, row-major `[H, W]`.
pub fn write_gray8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), width * height);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Read any 8-bit PNG as RGB, expanding grayscale and dropping alpha.
pub fn read_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, color, buf) = read_raw(path)?;
    let rgb = match color {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        other => return Err(png_err(path, format!("unsupported color type {other:?}"))),
    };
    Ok((w, h, rgb))
}

/// Read an 8-bit single-channel PNG.
pub fn read_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, color, buf) = read_raw(path)?;
    match color {
        png::ColorType::Grayscale => Ok((w, h, buf)),
        other => Err(png_err(
            path,
            format!("expected grayscale label image, got {other:?}"),
        )),
    }
}

fn read_raw(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_and_gray_round_trip() {
        let dir = std::env::temp_dir().join("cpca_png_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let rgb_path = dir.join("t.png");
        let data: Vec<u8> = (0..2 * 3 * 3).map(|v| (v * 7) as u8).collect();
        write_rgb8(&rgb_path, 3, 2, &data).unwrap();
        let (w, h, back) = read_rgb8(&rgb_path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, data);

        let gray_path = dir.join("g.png");
        let labels: Vec<u8> = vec![0, 1, 2, 255, 3, 0];
        write_gray8(&gray_path, 3, 2, &labels).unwrap();
        let (w, h, back) = read_gray8(&gray_path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, labels);
    }
}
