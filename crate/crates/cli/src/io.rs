//! On-disk formats: the AVGT tensor container, label CSVs, PGM images and
//! parameter files.
//!
//! An AVGT record is the magic `AVGT`, a little-endian `u32` rank (always 4),
//! four `u32` dims `N, C, H, W`, then `N*C*H*W` little-endian `f32` values in
//! NCHW order. A parameter file is one record per parameter, back to back, in
//! layout order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use adaptvig_core::nn::{Layout, ParamStore};
use adaptvig_core::tensor::{Shape, Tensor4};
use anyhow::{bail, ensure, Context, Result};

pub const MAGIC: &[u8; 4] = b"AVGT";
const HEADER_LEN: usize = 4 + 4 + 16;

pub fn write_tensor(out: &mut impl Write, t: &Tensor4) -> io::Result<()> {
    let s = t.shape();
    out.write_all(MAGIC)?;
    out.write_all(&4u32.to_le_bytes())?;
    for d in [s.n, s.c, s.h, s.w] {
        let d = u32::try_from(d).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension exceeds u32"))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.numel());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_tensor(input: &mut impl Read) -> Result<Option<Tensor4>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = input.read(&mut header[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got == 0 {
        return Ok(None);
    }
    ensure!(got == HEADER_LEN, "truncated AVGT header ({got} of {HEADER_LEN} bytes)");
    ensure!(&header[..4] == MAGIC, "bad magic {:?}, expected AVGT", &header[..4]);
    let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    ensure!(word(0) == 4, "unsupported rank {}", word(0));
    let shape = Shape::new(word(1), word(2), word(3), word(4));
    let mut raw = vec![0u8; 4 * shape.numel()];
    input.read_exact(&mut raw).context("truncated AVGT payload")?;
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    Ok(Some(Tensor4::from_vec(shape, data)?))
}

pub fn save_tensor(path: &Path, t: &Tensor4) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor4> {
    let mut f = io::BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    match read_tensor(&mut f)? {
        Some(t) => Ok(t),
        None => bail!("{} is empty", path.display()),
    }
}

pub fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for t in params.values() {
        write_tensor(&mut f, t)?;
    }
    f.flush()?;
    Ok(())
}

/// Loads a parameter file written for `layout`. Values come back rounded to f32.
pub fn load_params(path: &Path, layout: &Layout) -> Result<ParamStore> {
    let mut f = io::BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut values = Vec::new();
    while let Some(t) = read_tensor(&mut f)? {
        values.push(t);
    }
    Ok(ParamStore::from_values(layout, values)?)
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "label"])?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut labels = Vec::new();
    for (row, rec) in r.deserialize::<(usize, usize)>().enumerate() {
        let (index, label) = rec?;
        ensure!(index == row, "labels out of order at row {row}");
        labels.push(label);
    }
    Ok(labels)
}

/// Binary (P5) 8-bit PGM; `values` are row-major and already in 0..=255.
pub fn write_pgm(path: &Path, w: usize, h: usize, values: &[u8]) -> Result<()> {
    ensure!(values.len() == w * h, "pgm expects {} values, got {}", w * h, values.len());
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(values)?;
    f.flush()?;
    Ok(())
}

/// Reads a P5 PGM written by [`write_pgm`]: `(w, h, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(start < pos, "truncated PGM header");
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    ensure!(fields[0] == "P5" && fields[3] == "255", "not an 8-bit P5 PGM");
    let (w, h): (usize, usize) = (fields[1].parse()?, fields[2].parse()?);
    let pixels = bytes.get(pos + 1..).unwrap_or_default().to_vec();
    ensure!(pixels.len() == w * h, "PGM payload has {} bytes, expected {}", pixels.len(), w * h);
    Ok((w, h, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_through_bytes() {
        let t = Tensor4::from_fn(Shape::new(2, 1, 2, 3), |n, _, h, w| (n * 6 + h * 3 + w) as f64 * 0.5 - 1.0).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 4 * 12);
        assert_eq!(&buf[..8], b"AVGT\x04\x00\x00\x00");
        let back = read_tensor(&mut buf.as_slice()).unwrap().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn values_are_stored_as_f32() {
        let t = Tensor4::scalar(0.1);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap().unwrap();
        assert_eq!(back.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn rejects_bad_headers() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor4::scalar(1.0)).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor(&mut bad.as_slice()).is_err());
        let mut rank3 = buf.clone();
        rank3[4] = 3;
        assert!(read_tensor(&mut rank3.as_slice()).is_err());
        assert!(read_tensor(&mut &buf[..buf.len() - 1]).is_err());
        assert!(read_tensor(&mut &buf[..10]).is_err());
        assert!(read_tensor(&mut &[][..]).unwrap().is_none());
    }
}
