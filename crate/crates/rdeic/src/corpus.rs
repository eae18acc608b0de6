//! Synthetic toy-image corpus and image file I/O.
//!
//! Images are (channels, height, width) f32 arrays in [0, 1]. The
//! generator composes smooth gradients, solid shapes, oriented sinusoid
//! textures and low-amplitude filtered noise, which gives the codec both
//! flat regions (cheap to code) and structure (worth bits) — the mix the
//! rate model needs to show meaningful bit allocation.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub fn generate_image(rng: &mut Rng, size: usize) -> Array3<f32> {
    let mut img = Array3::<f32>::zeros((3, size, size));
    let s = size as f32;

    // smooth background gradient, channel-correlated
    let gx = (rng::uniform_f64(rng) as f32 - 0.5) * 0.8;
    let gy = (rng::uniform_f64(rng) as f32 - 0.5) * 0.8;
    let base: [f32; 3] = [
        0.3 + 0.4 * rng::uniform_f64(rng) as f32,
        0.3 + 0.4 * rng::uniform_f64(rng) as f32,
        0.3 + 0.4 * rng::uniform_f64(rng) as f32,
    ];
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                img[(c, y, x)] = base[c] + gx * (x as f32 / s - 0.5) + gy * (y as f32 / s - 0.5);
            }
        }
    }

    // solid rectangles
    let n_rect = rng::uniform_step(rng, 1, 4);
    for _ in 0..n_rect {
        let x0 = rng::uniform_step(rng, 0, size - 2);
        let y0 = rng::uniform_step(rng, 0, size - 2);
        let w = rng::uniform_step(rng, 2, size / 2);
        let h = rng::uniform_step(rng, 2, size / 2);
        let col: [f32; 3] = [
            rng::uniform_f64(rng) as f32,
            rng::uniform_f64(rng) as f32,
            rng::uniform_f64(rng) as f32,
        ];
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                for c in 0..3 {
                    img[(c, y, x)] = 0.2 * img[(c, y, x)] + 0.8 * col[c];
                }
            }
        }
    }

    // filled circles
    let n_circ = rng::uniform_step(rng, 0, 2);
    for _ in 0..n_circ {
        let cx = rng::uniform_step(rng, 0, size - 1) as f32;
        let cy = rng::uniform_step(rng, 0, size - 1) as f32;
        let r = (2 + rng::uniform_step(rng, 0, size / 4)) as f32;
        let col: [f32; 3] = [
            rng::uniform_f64(rng) as f32,
            rng::uniform_f64(rng) as f32,
            rng::uniform_f64(rng) as f32,
        ];
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                if d2 < r * r {
                    for c in 0..3 {
                        img[(c, y, x)] = 0.3 * img[(c, y, x)] + 0.7 * col[c];
                    }
                }
            }
        }
    }

    // oriented sinusoid texture over one band
    let freq = 0.2 + 0.6 * rng::uniform_f64(rng) as f32;
    let theta = std::f32::consts::PI * rng::uniform_f64(rng) as f32;
    let amp = 0.05 + 0.12 * rng::uniform_f64(rng) as f32;
    let band0 = rng::uniform_step(rng, 0, size / 2);
    let band1 = band0 + rng::uniform_step(rng, size / 4, size / 2);
    let (ct, st) = (theta.cos(), theta.sin());
    for y in band0..band1.min(size) {
        for x in 0..size {
            let phase = freq * (ct * x as f32 + st * y as f32);
            let v = amp * phase.sin();
            for c in 0..3 {
                img[(c, y, x)] += v;
            }
        }
    }

    // low-amplitude smoothed noise
    let mut noise = Array3::<f32>::zeros((3, size, size));
    for v in noise.iter_mut() {
        *v = (rng::uniform_f64(rng) as f32 - 0.5) * 0.1;
    }
    for c in 0..3 {
        for y in 1..size - 1 {
            for x in 1..size - 1 {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += noise[(c, y + dy - 1, x + dx - 1)];
                    }
                }
                img[(c, y, x)] += acc / 9.0;
            }
        }
    }

    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// A reproducible set of toy images.
pub fn generate_corpus(seed: u64, count: usize, size: usize) -> Vec<Array3<f32>> {
    let mut rng = rng::seeded(seed);
    (0..count).map(|_| generate_image(&mut rng, size)).collect()
}

/// Quantize to 8-bit (round half away from zero after clamping).
pub fn to_u8(img: &Array3<f32>) -> Vec<u8> {
    let (c, h, w) = img.dim();
    debug_assert_eq!(c, 3);
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ci in 0..3 {
                let v = (img[(ci, y, x)].clamp(0.0, 1.0) * 255.0).round();
                out.push(v as u8);
            }
        }
    }
    out
}

pub fn from_u8(data: &[u8], h: usize, w: usize) -> Array3<f32> {
    let mut img = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img[(c, y, x)] = data[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    img
}

/// Load an 8-bit RGB image (PNG or binary PPM) as (3, H, W) in [0, 1].
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => load_ppm(path),
        "png" => {
            let img = image::open(path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
                .to_rgb8();
            let (w, h) = img.dimensions();
            Ok(from_u8(img.as_raw(), h as usize, w as usize))
        }
        other => Err(Error::Image(format!("unsupported image format .{other}"))),
    }
}

pub fn save_image(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (_, h, w) = img.dim();
    let data = to_u8(img);
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => save_ppm(path, &data, h, w),
        "png" => {
            let buf: image::RgbImage =
                image::ImageBuffer::from_raw(w as u32, h as u32, data)
                    .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
            buf.save(path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
        }
        other => Err(Error::Image(format!("unsupported image format .{other}"))),
    }
}

fn save_ppm(path: &Path, data: &[u8], h: usize, w: usize) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(data)?;
    Ok(())
}

fn load_ppm(path: &Path) -> Result<Array3<f32>> {
    let bytes = std::fs::read(path)?;
    let header_err = || Error::Image(format!("{}: invalid PPM header", path.display()));
    let mut pos = 0usize;
    let mut fields = Vec::new();
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
            return Err(header_err());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?);
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(header_err());
    }
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    let data = &bytes[pos..];
    if data.len() < 3 * w * h {
        return Err(Error::Image(format!("{}: truncated PPM", path.display())));
    }
    Ok(from_u8(&data[..3 * w * h], h, w))
}

/// Write a corpus to a directory as PNG files named `NNNN.png`.
pub fn save_corpus(dir: &Path, images: &[Array3<f32>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, img) in images.iter().enumerate() {
        save_image(&dir.join(format!("{i:04}.png")), img)?;
    }
    Ok(())
}

/// Load every PNG/PPM in a directory, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<(String, Array3<f32>)>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("ppm")
            )
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Image(format!("no images found in {}", dir.display())));
    }
    entries
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            load_image(&p).map(|img| (name, img))
        })
        .collect()
}
