use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Target sizes of the three training scales, largest first.
pub const STANDARD_SCALES: [(usize, usize); 3] = [(1792, 1024), (1344, 768), (896, 512)];

/// Luma plane normalized to [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Size(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Format("pixel outside [0, 1]".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Copies a `w x h` window at `(x, y)` into a rank-2 tensor.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Tensor<f32>> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Bounds {
                x,
                y,
                size: w.max(h),
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(w * h);
        for r in y..y + h {
            data.extend_from_slice(&self.pixels[r * self.width + x..r * self.width + x + w]);
        }
        Tensor::new(&[h, w], data)
    }

    pub fn crop_image(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        let t = self.crop(x, y, w, h)?;
        Self::new(w, h, t.into_data())
    }

    /// Pixels quantized to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p * 255.0).round() as u8).collect()
    }
}

/// Reads the next header token, skipping whitespace and `#` comments.
fn token(buf: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match buf.get(*pos) {
            Some(b'#') => {
                while buf.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("truncated header".into())),
        }
    }
    let start = *pos;
    while buf.get(*pos).is_some_and(|c| c.is_ascii_digit()) {
        *pos += 1;
    }
    std::str::from_utf8(&buf[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad header field".into()))
}

fn decode_pnm(buf: &[u8]) -> Result<GrayImage> {
    if buf.len() < 2 || buf[0] != b'P' {
        return Err(Error::Format("not a PNM file".into()));
    }
    let kind = buf[1];
    let channels = match kind {
        b'2' | b'5' => 1,
        b'3' | b'6' => 3,
        _ => return Err(Error::Format(format!("unsupported PNM type P{}", kind as char))),
    };
    let mut pos = 2;
    let width = token(buf, &mut pos)?;
    let height = token(buf, &mut pos)?;
    let maxval = token(buf, &mut pos)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad header {width}x{height} max {maxval}")));
    }
    let count = width * height * channels;
    let samples: Vec<usize> = if kind == b'2' || kind == b'3' {
        (0..count).map(|_| token(buf, &mut pos)).collect::<Result<_>>()?
    } else {
        pos += 1;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let raw = buf
            .get(pos..pos + need)
            .ok_or_else(|| Error::Format("truncated payload".into()))?;
        if wide {
            raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as usize).collect()
        } else {
            raw.iter().map(|&b| b as usize).collect()
        }
    };
    if samples.iter().any(|&s| s > maxval) {
        return Err(Error::Format("sample exceeds maxval".into()));
    }
    let m = maxval as f64;
    let pixels = if channels == 1 {
        samples.iter().map(|&s| (s as f64 / m) as f32).collect()
    } else {
        samples
            .chunks_exact(3)
            .map(|c| {
                let y = 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64;
                (y / m).clamp(0.0, 1.0) as f32
            })
            .collect()
    };
    GrayImage::new(width, height, pixels)
}

/// Raw 8-bit Y plane; dimensions come from a `<file>.size` sidecar holding `W H`.
fn decode_raw(path: &Path, buf: &[u8]) -> Result<GrayImage> {
    let mut side = path.as_os_str().to_owned();
    side.push(".size");
    let text = std::fs::read_to_string(&side)
        .map_err(|e| Error::Format(format!("raw input needs {}: {e}", Path::new(&side).display())))?;
    let dims: Vec<usize> = text
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad size sidecar {text:?}"))))
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(Error::Format(format!("size sidecar must hold 'W H', got {text:?}")));
    };
    let plane = buf
        .get(..w * h)
        .ok_or_else(|| Error::Format("truncated raw plane".into()))?;
    GrayImage::new(w, h, plane.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn load_image(path: &Path) -> Result<GrayImage> {
    let buf = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("y" | "yuv" | "raw") => decode_raw(path, &buf),
        _ => decode_pnm(&buf),
    }
}

/// Writes binary PGM, maxval 255.
pub fn save_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_u8());
    std::fs::write(path, out)?;
    Ok(())
}

/// Newline-separated paths; blank lines and `#` lines are skipped, relative
/// entries resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| dir.join(l))
        .collect())
}

/// Overlap weights of each destination cell on the source axis.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut s = a.floor() as usize;
            while (s as f64) < b && s < src {
                let overlap = (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((s, overlap / scale));
                }
                s += 1;
            }
            w
        })
        .collect()
}

/// Box-filter (area-average) resampling.
pub fn resample_area(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    if width == 0 || height == 0 {
        return Err(Error::Size("resample target must be non-empty".into()));
    }
    let wx = area_weights(img.width, width);
    let wy = area_weights(img.height, height);
    let mut rows = vec![0.0f64; img.height * width];
    for y in 0..img.height {
        let src = &img.pixels[y * img.width..(y + 1) * img.width];
        for (x, ws) in wx.iter().enumerate() {
            rows[y * width + x] = ws.iter().map(|&(s, w)| w * src[s] as f64).sum();
        }
    }
    let mut out = vec![0.0f32; width * height];
    for (y, ws) in wy.iter().enumerate() {
        for x in 0..width {
            let v: f64 = ws.iter().map(|&(s, w)| w * rows[s * width + x]).sum();
            out[y * width + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
    GrayImage::new(width, height, out)
}

/// Center-crops to 7:4 and box-downsamples to three scales in ratio
/// 1 : 0.75 : 0.5. Inputs at least 1792x1024 after cropping give the
/// standard sizes; smaller ones give the largest triplet whose base is a
/// multiple of 28x16.
pub fn multi_scale(img: &GrayImage) -> Result<[GrayImage; 3]> {
    let (w, h) = (img.width, img.height);
    let (cw, ch) = if w * 4 > h * 7 { (h * 7 / 4, h) } else { (w, w * 4 / 7) };
    let k = (cw / 28).min(ch / 16).min(STANDARD_SCALES[0].0 / 28);
    if k == 0 {
        return Err(Error::Size(format!("{w}x{h} is smaller than the 28x16 minimum crop")));
    }
    let crop = img.crop_image((w - cw) / 2, (h - ch) / 2, cw, ch)?;
    let sizes = [(28 * k, 16 * k), (21 * k, 12 * k), (14 * k, 8 * k)];
    let mut out = sizes.iter().map(|&(sw, sh)| resample_area(&crop, sw, sh));
    Ok([
        out.next().expect("three scales")?,
        out.next().expect("three scales")?,
        out.next().expect("three scales")?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_ascii_and_binary_agree() {
        let a = decode_pnm(b"P2\n# c\n2 2\n255\n0 255\n128 64\n").unwrap();
        let mut p5 = b"P5 2 2 255\n".to_vec();
        p5.extend([0u8, 255, 128, 64]);
        let b = decode_pnm(&p5).unwrap();
        assert_eq!(a, b);
        assert!((a.get(0, 1) - 0.50196).abs() < 1e-5);
        assert!((a.get(1, 1) - 0.25098).abs() < 1e-5);
        assert!(matches!(decode_pnm(b"P5 2 2 255\n\x00\x01"), Err(Error::Format(_))));
        assert!(matches!(decode_pnm(b"P7 2 2 255\n"), Err(Error::Format(_))));
    }

    #[test]
    fn ppm_uses_bt601() {
        let img = decode_pnm(b"P3 1 1 255 255 0 0").unwrap();
        assert!((img.get(0, 0) - 0.299).abs() < 1e-6);
    }

    #[test]
    fn checkerboard_halves_to_gray() {
        let px = (0..64).map(|i| ((i % 8 + i / 8) % 2) as f32).collect();
        let img = GrayImage::new(8, 8, px).unwrap();
        let half = resample_area(&img, 4, 4).unwrap();
        assert!(half.pixels().iter().all(|&p| (p - 0.5).abs() < 1e-7));
    }

    #[test]
    fn scales_for_large_and_small_inputs() {
        let img = GrayImage::filled(1792, 1024, 0.3).unwrap();
        let s = multi_scale(&img).unwrap();
        let dims: Vec<_> = s.iter().map(|i| (i.width(), i.height())).collect();
        assert_eq!(dims, STANDARD_SCALES.to_vec());
        assert!(s.iter().all(|i| i.pixels().iter().all(|&p| (p - 0.3).abs() < 1e-6)));
        let small = multi_scale(&GrayImage::filled(100, 100, 0.5).unwrap()).unwrap();
        assert_eq!((small[0].width(), small[0].height()), (84, 48));
        assert_eq!((small[2].width(), small[2].height()), (42, 24));
        assert!(matches!(multi_scale(&GrayImage::filled(20, 20, 0.5).unwrap()), Err(Error::Size(_))));
    }
}
