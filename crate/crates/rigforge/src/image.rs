//! 8-bit PNG input and output, and the optical-flow colour wheel.

use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::fsutil;

/// Planar-free interleaved image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The value an 8-bit round trip gives back.
pub fn quantize(x: f64) -> f64 {
    to_u8(x) as f64 / 255.0
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::Png(format!("{c} channels"))),
    };
    if img.data.len() != img.width * img.height * img.channels {
        return Err(Error::Png(format!("{} values for {}x{}x{}", img.data.len(), img.width, img.height, img.channels)));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        let bytes: Vec<u8> = img.data.iter().map(|&x| to_u8(x)).collect();
        w.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    fsutil::write_atomic(path, &encode_png(img)?)
}

pub fn load_png(path: &Path) -> Result<Image> {
    let f = std::fs::File::open(path).at(path)?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Png(format!("{}: unexpanded palette", path.display()))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h * channels].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image { width: w, height: h, channels, data })
}

fn wheel() -> Vec<[f64; 3]> {
    // segment lengths of the usual Middlebury wheel
    let (ry, yg, gc, cb, bm, mr) = (15, 6, 4, 11, 13, 6);
    let mut w = Vec::with_capacity(55);
    let f = |i: usize, n: usize| i as f64 / n as f64;
    w.extend((0..ry).map(|i| [1.0, f(i, ry), 0.0]));
    w.extend((0..yg).map(|i| [1.0 - f(i, yg), 1.0, 0.0]));
    w.extend((0..gc).map(|i| [0.0, 1.0, f(i, gc)]));
    w.extend((0..cb).map(|i| [0.0, 1.0 - f(i, cb), 1.0]));
    w.extend((0..bm).map(|i| [f(i, bm), 0.0, 1.0]));
    w.extend((0..mr).map(|i| [1.0, 0.0, 1.0 - f(i, mr)]));
    w
}

/// Colour-codes an encoded flow map (`H*W*2`, zero motion at 0.5): hue is
/// direction, saturation is magnitude relative to the largest one.
pub fn flow_to_color(flow: &[f64], width: usize, height: usize) -> Image {
    let wheel = wheel();
    let nc = wheel.len();
    let uv: Vec<(f64, f64)> = flow.chunks_exact(2).map(|c| (c[0] - 0.5, c[1] - 0.5)).collect();
    let max = uv.iter().map(|(u, v)| (u * u + v * v).sqrt()).fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut data = Vec::with_capacity(width * height * 3);
    for &(u, v) in &uv {
        let (u, v) = (u * scale, v * scale);
        let r = (u * u + v * v).sqrt();
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (nc - 1) as f64;
        let k0 = fk.floor() as usize % nc;
        let k1 = (k0 + 1) % nc;
        let t = fk - fk.floor();
        for ch in 0..3 {
            let c = (1.0 - t) * wheel[k0][ch] + t * wheel[k1][ch];
            data.push(1.0 - r.min(1.0) * (1.0 - c));
        }
    }
    Image { width, height, channels: 3, data }
}
