//! 8-bit grayscale PNG and binary PGM (P5) encoding, plus content hashing.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::face::FaceImage;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn encode_png(img: &FaceImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&img.to_u8()).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<FaceImage> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("expected 8-bit grayscale, got {:?}/{:?}", info.color_type, info.bit_depth)));
    }
    FaceImage::from_u8(info.width as usize, info.height as usize, &buf[..info.buffer_size()])
}

pub fn encode_pgm(img: &FaceImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<FaceImage> {
    // header: magic, width, height, maxval separated by whitespace, then one whitespace byte
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("pgm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::format("pgm", "only 8-bit P5 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::format("pgm", e));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| Error::format("pgm", "truncated pixel data"))?;
    FaceImage::from_u8(w, h, data)
}

/// Writes PNG or PGM depending on the extension; returns the written bytes.
pub fn write_image(path: &Path, img: &FaceImage) -> Result<Vec<u8>> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => encode_pgm(img),
        _ => encode_png(img)?,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn read_image(path: &Path) -> Result<FaceImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => decode_pgm(&bytes),
        _ => decode_png(&bytes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::{ActuatorVector, FaceSim};

    #[test]
    fn png_and_pgm_round_trip_quantized() {
        let img = FaceSim::default().render(&ActuatorVector::neutral(35)).unwrap();
        let q = FaceImage::from_u8(img.width(), img.height(), &img.to_u8()).unwrap();
        assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), q);
        assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), q);
        assert_eq!(encode_png(&img).unwrap(), encode_png(&img).unwrap());
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn pgm_rejects_garbage() {
        assert!(decode_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\0").is_err());
    }
}
