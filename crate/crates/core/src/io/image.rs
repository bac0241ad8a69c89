//! 8-bit grayscale / RGB images: binary PGM (P5), PPM (P6) and PNG.
//! Tensors are `[C, H, W]` with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{missing_or_io, write_atomic};
use crate::metrics::quantize_8bit;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Pnm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("pgm" | "ppm" | "pnm") => Ok(ImageFormat::Pnm),
            Some("png") => Ok(ImageFormat::Png),
            _ => Err(Error::invalid(format!("{}: unknown image extension", path.display()))),
        }
    }
}

fn to_bytes(t: &Tensor) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (c, h, w) = t.chw()?;
    if c != 1 && c != 3 {
        return Err(Error::shape("save_image", format!("{c} channels, expected 1 or 3")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            out.push((quantize_8bit(t.data()[ch * plane + i]) * 255.0).round() as u8);
        }
    }
    Ok((c, h, w, out))
}

fn from_bytes(c: usize, h: usize, w: usize, bytes: &[u8]) -> Result<Tensor> {
    let plane = h * w;
    let mut data = vec![0.0; c * plane];
    for i in 0..plane {
        for ch in 0..c {
            data[ch * plane + i] = bytes[i * c + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn encode_pnm(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w, px) = to_bytes(t)?;
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Format(format!("PNM header: {m}"));
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("not ASCII"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator before raster"));
    }
    pos += 1;
    let c = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m:?} (binary P5/P6 only)"))),
    };
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad {what} {s:?}")));
    let (w, h, maxval) = (
        num(fields[1], "width")?,
        num(fields[2], "height")?,
        num(fields[3], "maxval")?,
    );
    if maxval != 255 {
        return Err(Error::Format(format!(
            "unsupported depth: maxval {maxval}, only 8-bit (255) is read"
        )));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero dimension"));
    }
    let need = c * w * h;
    if bytes.len() - pos != need {
        return Err(Error::Format(format!(
            "PNM raster has {} bytes, expected {need}",
            bytes.len() - pos
        )));
    }
    from_bytes(c, h, w, &bytes[pos..])
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w, px) = to_bytes(t)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(if c == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().map_err(|e| Error::Format(format!("PNG: {e}")))?;
        wr.write_image_data(&px)
            .map_err(|e| Error::Format(format!("PNG: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "unsupported depth: {:?} PNG, only 8-bit is read",
            info.bit_depth
        )));
    }
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::Format(format!("unsupported PNG colour type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format("PNG too large".into()))?
    ];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("PNG: {e}")))?;
    from_bytes(c, h, w, &buf[..frame.buffer_size()])
}

/// Load an image as `[C, H, W]` in `[0, 1]`; with `luminance` RGB is reduced to one channel.
pub fn load_image(path: impl AsRef<Path>, luminance: bool) -> Result<Tensor> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)?;
    let bytes = std::fs::read(path).map_err(|e| missing_or_io(path, e))?;
    let t = match format {
        ImageFormat::Pnm => decode_pnm(&bytes),
        ImageFormat::Png => decode_png(&bytes),
    }
    .map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if luminance {
        t.luminance()
    } else {
        Ok(t)
    }
}

/// Quantize to 8 bits and write; the format follows the extension.
pub fn save_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Pnm => encode_pnm(t)?,
        ImageFormat::Png => encode_png(t)?,
    };
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_pgm() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let t = decode_pnm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert_eq!(encode_pnm(&t).unwrap(), bytes);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let mut bytes = b"P6 # rgb\n# another\n1\t1 255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0]);
        let t = decode_pnm(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
        assert!((t.luminance().unwrap().data()[0] - 0.299).abs() < 1e-15);
    }

    #[test]
    fn malformed_headers() {
        let cases: [&[u8]; 6] = [
            b"P2\n1 1\n255\n7",
            b"P5\n1 1\n65535\n\0\0",
            b"P5\n1 1\n255\n",
            b"P5\n1 x\n255\n\0",
            b"P5\n1",
            b"P5\n1 1\n255\n\0\0",
        ];
        for c in cases {
            assert!(
                matches!(decode_pnm(c), Err(Error::Format(_))),
                "{:?}",
                String::from_utf8_lossy(c)
            );
        }
        let e = decode_pnm(b"P5\n1 1\n65535\n\0\0").unwrap_err();
        assert!(e.to_string().contains("depth"));
    }

    #[test]
    fn png_rejects_16_bit() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            enc.write_header().unwrap().write_image_data(&[1, 2]).unwrap();
        }
        assert!(decode_png(&out).unwrap_err().to_string().contains("depth"));
    }

    #[test]
    fn files_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(vec![3, 4, 5], |i| (i % 256) as f64 / 255.0);
        for name in ["a.ppm", "a.png"] {
            let p = dir.path().join(name);
            save_image(&p, &t).unwrap();
            assert_eq!(load_image(&p, false).unwrap(), t);
            assert_eq!(load_image(&p, true).unwrap(), t.luminance().unwrap());
        }
        assert!(save_image(dir.path().join("a.bmp"), &t).is_err());
        assert!(matches!(
            load_image(dir.path().join("b.png"), false),
            Err(Error::MissingInput(_))
        ));
    }

    fn arb_image() -> impl Strategy<Value = Tensor> {
        (prop_oneof![Just(1usize), Just(3usize)], 1usize..9, 1usize..9).prop_flat_map(|(c, h, w)| {
            prop::collection::vec(any::<u8>(), c * h * w)
                .prop_map(move |px| Tensor::new(vec![c, h, w], px.iter().map(|&b| b as f64 / 255.0).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn eight_bit_round_trip(t in arb_image()) {
            prop_assert_eq!(&decode_pnm(&encode_pnm(&t).unwrap()).unwrap(), &t);
            prop_assert_eq!(&decode_png(&encode_png(&t).unwrap()).unwrap(), &t);
        }
    }
}
