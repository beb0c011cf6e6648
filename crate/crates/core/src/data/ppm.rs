//! Binary PPM (P6, RGB) and PGM (P5, gray) rasters, 8 or 16 bits per
//! sample. Pixels map to `[0, 1]` as `value / maxval`.

use qfm_tensor::Tensor;

/// Decoded raster as a `C×H×W` tensor in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor, String> {
    let mut pos = 0usize;
    let magic = token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if !(1..=65535).contains(&maxval) {
        return Err(format!("maxval {maxval} out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let bps = if maxval > 255 { 2 } else { 1 };
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or("image too large")?;
    let raster = &bytes[pos..];
    if raster.len() != n * bps {
        return Err(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            n * bps
        ));
    }
    let scale = maxval as f32;
    let mut data = vec![0.0f32; n];
    let plane = width * height;
    for i in 0..plane {
        for c in 0..channels {
            let k = i * channels + c;
            let v = if bps == 1 {
                raster[k] as usize
            } else {
                ((raster[2 * k] as usize) << 8) | raster[2 * k + 1] as usize
            };
            if v > maxval {
                return Err(format!("sample {v} exceeds maxval {maxval}"));
            }
            data[c * plane + i] = v as f32 / scale;
        }
    }
    Tensor::new(vec![channels, height, width], data).map_err(|e| e.to_string())
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while let Some(&b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() {
            *pos += 1;
        } else if b == b'#' {
            while let Some(&c) = bytes.get(*pos) {
                *pos += 1;
                if c == b'\n' || c == b'\r' {
                    break;
                }
            }
        } else {
            break;
        }
    }
}

fn token(bytes: &[u8], pos: &mut usize) -> Result<String, String> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
        *pos += 1;
    }
    if start == *pos {
        return Err("truncated header".into());
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, String> {
    let t = token(bytes, pos)?;
    if t.len() > 9 || !t.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("bad {what} {t:?}"));
    }
    t.parse().map_err(|_| format!("bad {what} {t:?}"))
}

/// Encodes a `C×H×W` tensor (C = 1 or 3) with 8-bit samples, rounding
/// `clamp(v, 0, 1) · 255`.
pub fn encode(image: &Tensor) -> Result<Vec<u8>, String> {
    let [c, h, w] = image.shape() else {
        return Err(format!("expected C×H×W, got {:?}", image.shape()));
    };
    let (c, h, w) = (*c, *h, *w);
    let magic = match c {
        3 => "P6",
        1 => "P5",
        _ => return Err(format!("cannot encode {c} channels")),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(plane * c);
    for i in 0..plane {
        for ch in 0..c {
            out.push(quantize(d[ch * plane + i]));
        }
    }
    Ok(out)
}

/// Nearest 8-bit level of `v` clamped to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_of_quantized_image() {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i * 4 % 256) as f32 / 255.0).collect();
        let t = Tensor::new(vec![3, 4, 5], data).unwrap();
        let bytes = encode(&t).unwrap();
        assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
        assert!(decode(&bytes).unwrap().bit_eq(&t));
    }

    #[test]
    fn gray_with_comments_and_16_bit() {
        let bytes = b"P5 # gray\n2 1\n# max\n65535\n\x00\x00\xff\xff";
        let t = decode(bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n10\n\x0b").is_err());
        assert!(decode(b"P5\n0 1\n255\n").is_err());
        assert!(decode(b"P5\n1 1\n255").is_err());
        assert!(decode(b"").is_err());
    }
}
