//! Grayscale frames and the on-disk frame formats.
//!
//! Videos are stored as a directory of 8-bit grayscale PNG files, one per
//! frame, ordered by file name. Codec decoding is left to external tooling
//! (e.g. `ffmpeg -i clip.avi -pix_fmt gray clip/%04d.png`).

use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel frame with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty frame {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "frame {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
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

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample with zero padding outside the frame.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |xi: i64, yi: i64| -> f32 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                0.0
            } else {
                self.pixels[yi as usize * self.width + xi as usize]
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Nearest-neighbour resize, used to bring frames to a model's input size.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Frame {
        if width == self.width && height == self.height {
            return self.clone();
        }
        Frame::from_fn(width, height, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }
}

/// Decode an 8-bit PNG into a grayscale frame. Color inputs are converted
/// with Rec. 601 luma weights.
pub fn decode_png(bytes: &[u8]) -> Result<Frame> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(e.to_string()))?;
    let (width, height) = {
        let info = reader.info();
        (info.width as usize, info.height as usize)
    };
    // Reject absurd headers before allocating.
    if width == 0 || height == 0 || width.saturating_mul(height) > 64 * 1024 * 1024 {
        return Err(Error::Image(format!("unsupported PNG size {width}x{height}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("PNG output buffer size overflow".into()))?;
    let mut buf = vec![0u8; size];
    let out = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(e.to_string()))?;
    let data = &buf[..out.buffer_size()];
    let stride = out.line_size;
    let channels = match out.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Image("indexed PNG was not expanded".into()))
        }
    };
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        let row = &data[y * stride..y * stride + width * channels];
        for px in row.chunks_exact(channels) {
            let v = match channels {
                1 | 2 => px[0] as f32,
                _ => 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32,
            };
            pixels.push(v / 255.0);
        }
    }
    Frame::new(width, height, pixels)
}

pub fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_png(frame, &mut out)?;
    Ok(out)
}

fn write_png<W: Write>(frame: &Frame, w: W) -> Result<()> {
    let mut encoder = png::Encoder::new(w, frame.width as u32, frame.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Image(e.to_string()))?;
    writer
        .write_image_data(&frame.to_u8())
        .map_err(|e| Error::Image(e.to_string()))?;
    writer.finish().map_err(|e| Error::Image(e.to_string()))
}

pub fn read_png(path: &Path) -> Result<Frame> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

pub fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_png(frame, BufWriter::new(file))
}

/// Load every `*.png` in `dir`, sorted by file name. All frames must share
/// the same size.
pub fn load_frame_dir(dir: &Path) -> Result<Vec<Frame>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|ext| ext.eq_ignore_ascii_case("png"))
        {
            paths.push(path);
        }
    }
    paths.sort();
    let frames = paths
        .iter()
        .map(|p| read_png(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = frames.first() {
        if let Some(bad) = frames
            .iter()
            .position(|f| f.width() != first.width() || f.height() != first.height())
        {
            return Err(Error::Shape(format!(
                "{}: frame {bad} is {}x{}, expected {}x{}",
                dir.display(),
                frames[bad].width(),
                frames[bad].height(),
                first.width(),
                first.height()
            )));
        }
    }
    Ok(frames)
}

/// Write frames as `0000.png`, `0001.png`, ... into `dir` (created if absent).
pub fn save_frame_dir(frames: &[Frame], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in frames.iter().enumerate() {
        save_png(frame, &dir.join(format!("{i:04}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let frame = Frame::from_fn(7, 5, |x, y| ((x * 31 + y * 17) % 256) as f32 / 255.0);
        let bytes = encode_png(&frame).unwrap();
        let back = decode_png(&bytes).unwrap();
        assert_eq!(back.width(), 7);
        assert_eq!(back.height(), 5);
        assert_eq!(back.to_u8(), frame.to_u8());
    }

    #[test]
    fn garbage_png_is_an_error() {
        assert!(decode_png(b"not a png").is_err());
        assert!(decode_png(&[]).is_err());
    }

    #[test]
    fn bilinear_hits_pixel_centres_exactly() {
        let frame = Frame::from_fn(4, 4, |x, y| (x + 4 * y) as f32);
        assert_eq!(frame.sample_bilinear(2.0, 3.0), 14.0);
        assert_eq!(frame.sample_bilinear(1.5, 0.0), 1.5);
        assert_eq!(frame.sample_bilinear(-5.0, 0.0), 0.0);
    }

    #[test]
    fn frame_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<_> = (0..3)
            .map(|i| Frame::from_fn(8, 8, |x, _| ((x + i) % 2) as f32))
            .collect();
        save_frame_dir(&frames, dir.path()).unwrap();
        let back = load_frame_dir(dir.path()).unwrap();
        assert_eq!(back, frames);
    }

    #[test]
    fn new_checks_pixel_count() {
        assert!(Frame::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Frame::new(0, 2, vec![]).is_err());
    }
}
