//! Portable float map (PFM) reading and writing.
//!
//! Files are written little-endian (negative scale) with rows stored bottom
//! to top, as the format prescribes. Samples are stored as `f32`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub fn encode_pfm(img: &Image, out: &mut impl Write) -> std::io::Result<()> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("PFM stores 1 or 3 channels, got {c}"),
            ))
        }
    };
    write!(out, "{magic}\n{} {}\n-1.0\n", img.width(), img.height())?;
    let row_len = img.width() * img.channels();
    let mut buf = Vec::with_capacity(row_len * 4);
    for row in img.data().chunks(row_len).rev() {
        buf.clear();
        for &v in row {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_pfm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    encode_pfm(img, &mut writer)
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

fn header_token(reader: &mut impl BufRead) -> Result<String> {
    let mut token = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        if reader
            .read(&mut byte)
            .map_err(|e| Error::Format(e.to_string()))?
            == 0
        {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(byte[0]);
    }
    if token.is_empty() {
        return Err(Error::Format("truncated PFM header".into()));
    }
    String::from_utf8(token).map_err(|_| Error::Format("non-ASCII PFM header".into()))
}

pub fn decode_pfm(reader: impl Read) -> Result<Image> {
    let mut reader = BufReader::new(reader);
    let channels = match header_token(&mut reader)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Format(format!("bad PFM magic {other:?}"))),
    };
    let parse = |s: String| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad PFM header field {s:?}")))
    };
    let width = parse(header_token(&mut reader)?)? as usize;
    let height = parse(header_token(&mut reader)?)? as usize;
    let scale = parse(header_token(&mut reader)?)?;
    if scale == 0.0 {
        return Err(Error::Format("PFM scale must be non-zero".into()));
    }
    let little = scale < 0.0;
    let row_len = width * channels;
    let mut bytes = vec![0u8; row_len * height * 4];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated PFM payload".into()))?;
    let mut data = vec![0.0; row_len * height];
    for (file_row, chunk) in bytes.chunks(row_len * 4).enumerate() {
        let y = height - 1 - file_row;
        for (i, raw) in chunk.chunks_exact(4).enumerate() {
            let raw = [raw[0], raw[1], raw[2], raw[3]];
            let v = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[y * row_len + i] = f64::from(v);
        }
    }
    Image::new(height, width, channels, data)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(file)
}
