//! Rendering probe outputs: grayscale grids, signed red/blue update
//! overlays, and PNG/PGM writers.
//!
//! The PNG encoder emits stored (uncompressed) deflate blocks, so a given
//! raster always serializes to the same bytes regardless of build or
//! dependency versions; golden-file tests rely on that.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gray level used for grid borders.
const BORDER_GRAY: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colormap {
    Grayscale,
    /// Red for values above 0.5, blue below, black at the midpoint.
    SignedDiverging,
}

#[derive(Debug, Clone, Copy)]
pub struct RenderSpec {
    pub rows: usize,
    pub cols: usize,
    /// Integer upscaling per cell.
    pub scale: usize,
    pub colormap: Colormap,
    /// Border width in output pixels, drawn around and between cells.
    pub border: usize,
}

impl RenderSpec {
    pub fn grid(rows: usize, cols: usize) -> RenderSpec {
        RenderSpec {
            rows,
            cols,
            scale: 4,
            colormap: Colormap::Grayscale,
            border: 2,
        }
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    fn filled(width: usize, height: usize, gray: u8) -> Raster {
        Raster {
            width,
            height,
            pixels: vec![gray; width * height * 3],
        }
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let at = (y * self.width + x) * 3;
        self.pixels[at..at + 3].copy_from_slice(&rgb);
    }
}

fn plane_dims(t: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() < 2 {
        return Err(Error::Dimension {
            context,
            expected: "trailing (H, W) axes".into(),
            found: format!("{shape:?}"),
        });
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if t.len() != h * w {
        return Err(Error::Dimension {
            context,
            expected: "a single channel".into(),
            found: format!("{shape:?}"),
        });
    }
    Ok((h, w))
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round() as u8
}

/// Lay out equally-shaped [0,1] images on a grid, row-major.
pub fn render_grid(images: &[&Tensor], spec: &RenderSpec) -> Result<Raster> {
    if images.is_empty() {
        return Err(Error::Config("render_grid needs at least one image".into()));
    }
    if spec.scale < 1 {
        return Err(Error::Config("render scale must be >= 1".into()));
    }
    if spec.rows * spec.cols < images.len() {
        return Err(Error::Config(format!(
            "layout {}x{} too small for {} images",
            spec.rows,
            spec.cols,
            images.len()
        )));
    }
    let (h, w) = plane_dims(images[0], "render_grid")?;
    for (idx, image) in images.iter().enumerate() {
        if image.shape() != images[0].shape() {
            return Err(Error::Dimension {
                context: "render_grid",
                expected: format!("{:?}", images[0].shape()),
                found: format!("{:?} at image {idx}", image.shape()),
            });
        }
        if let Some((pixel, &v)) = image
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Range(format!(
                "image {idx} pixel {pixel} value {v} outside [0,1]"
            )));
        }
    }
    let cell_w = w * spec.scale;
    let cell_h = h * spec.scale;
    let width = spec.cols * cell_w + (spec.cols + 1) * spec.border;
    let height = spec.rows * cell_h + (spec.rows + 1) * spec.border;
    let mut raster = Raster::filled(width, height, BORDER_GRAY);
    for (idx, image) in images.iter().enumerate() {
        let (row, col) = (idx / spec.cols, idx % spec.cols);
        let x0 = spec.border + col * (cell_w + spec.border);
        let y0 = spec.border + row * (cell_h + spec.border);
        for py in 0..h {
            for px in 0..w {
                let v = image.data()[py * w + px];
                let rgb = match spec.colormap {
                    Colormap::Grayscale => {
                        let g = to_byte(v);
                        [g, g, g]
                    }
                    Colormap::SignedDiverging => {
                        let centered = 2.0 * v - 1.0;
                        [
                            to_byte(centered.max(0.0)),
                            0,
                            to_byte((-centered).max(0.0)),
                        ]
                    }
                };
                for sy in 0..spec.scale {
                    for sx in 0..spec.scale {
                        raster.put(x0 + px * spec.scale + sx, y0 + py * spec.scale + sy, rgb);
                    }
                }
            }
        }
    }
    Ok(raster)
}

/// Superimpose an update on its masked image: grayscale background with
/// positive components in red and negative in blue, both normalized by the
/// largest |update| over the whole image so relative magnitudes survive.
pub fn render_signed_overlay(masked_image: &Tensor, update: &Tensor) -> Result<Raster> {
    masked_image.check_same_shape(update, "render_signed_overlay")?;
    let (h, w) = plane_dims(masked_image, "render_signed_overlay")?;
    if let Some((pixel, &v)) = masked_image
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::Range(format!(
            "masked image pixel {pixel} value {v} outside [0,1]"
        )));
    }
    let max_abs = update.max_abs();
    let mut raster = Raster::filled(w, h, 0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = masked_image.data()[i];
            let rgb = if max_abs == 0.0 {
                let g = to_byte(v);
                [g, g, g]
            } else {
                let d = update.data()[i] / max_abs;
                let pos = d.max(0.0);
                let neg = (-d).max(0.0);
                [
                    to_byte((v * (1.0 - neg) + pos).clamp(0.0, 1.0)),
                    to_byte(v * (1.0 - pos) * (1.0 - neg)),
                    to_byte((v * (1.0 - pos) + neg).clamp(0.0, 1.0)),
                ]
            };
            raster.put(x, y, rgb);
        }
    }
    Ok(raster)
}

/// Integer-upscale a raster (nearest neighbour).
pub fn upscale(raster: &Raster, factor: usize) -> Raster {
    if factor <= 1 {
        return raster.clone();
    }
    let mut out = Raster::filled(raster.width * factor, raster.height * factor, 0);
    for y in 0..raster.height {
        for x in 0..raster.width {
            let at = (y * raster.width + x) * 3;
            let rgb = [
                raster.pixels[at],
                raster.pixels[at + 1],
                raster.pixels[at + 2],
            ];
            for sy in 0..factor {
                for sx in 0..factor {
                    out.put(x * factor + sx, y * factor + sy, rgb);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// PNG (8-bit RGB, stored deflate blocks).
// ---------------------------------------------------------------------------

fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn adler32(bytes: &[u8]) -> u32 {
    const MOD: u32 = 65_521;
    let mut a = 1u32;
    let mut b = 0u32;
    for chunk in bytes.chunks(5552) {
        for &v in chunk {
            a += v as u32;
            b += a;
        }
        a %= MOD;
        b %= MOD;
    }
    (b << 16) | a
}

fn push_chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    let mut crc_input = Vec::with_capacity(4 + data.len());
    crc_input.extend_from_slice(kind);
    crc_input.extend_from_slice(data);
    out.extend_from_slice(&crc32(&crc_input).to_be_bytes());
}

/// Encode a raster as a PNG byte vector. Deterministic: identical rasters
/// yield identical bytes.
pub fn png_bytes(raster: &Raster) -> Vec<u8> {
    // Scanlines with filter byte 0.
    let stride = raster.width * 3;
    let mut scanlines = Vec::with_capacity(raster.height * (stride + 1));
    for row in raster.pixels.chunks(stride) {
        scanlines.push(0);
        scanlines.extend_from_slice(row);
    }

    let mut idat = Vec::with_capacity(scanlines.len() + 16);
    idat.push(0x78);
    idat.push(0x01);
    let mut blocks = scanlines.chunks(65_535).peekable();
    loop {
        match blocks.next() {
            Some(block) => {
                let last = blocks.peek().is_none();
                idat.push(if last { 0x01 } else { 0x00 });
                idat.extend_from_slice(&(block.len() as u16).to_le_bytes());
                idat.extend_from_slice(&(!(block.len() as u16)).to_le_bytes());
                idat.extend_from_slice(block);
                if last {
                    break;
                }
            }
            None => {
                // Zero-byte image: single final empty block.
                idat.extend_from_slice(&[0x01, 0x00, 0x00, 0xFF, 0xFF]);
                break;
            }
        }
    }
    idat.extend_from_slice(&adler32(&scanlines).to_be_bytes());

    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(raster.width as u32).to_be_bytes());
    ihdr.extend_from_slice(&(raster.height as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]); // 8-bit, RGB, deflate, none, no interlace

    let mut out = Vec::with_capacity(idat.len() + 64);
    out.extend_from_slice(&[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]);
    push_chunk(&mut out, b"IHDR", &ihdr);
    push_chunk(&mut out, b"IDAT", &idat);
    push_chunk(&mut out, b"IEND", &[]);
    out
}

pub fn write_png(raster: &Raster, path: &Path) -> Result<()> {
    fs::write(path, png_bytes(raster)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// PGM (P2 ascii / P5 binary).
// ---------------------------------------------------------------------------

/// Serialize a [0,1] grayscale tensor as PGM; binary P5 or ascii P2.
pub fn pgm_bytes(image: &Tensor, binary: bool) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(image, "write_pgm")?;
    if let Some((pixel, &v)) = image
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::Range(format!(
            "pgm pixel {pixel} value {v} outside [0,1]"
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(if binary { b"P5\n" } else { b"P2\n" });
    out.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    if binary {
        out.extend(image.data().iter().map(|&v| to_byte(v)));
    } else {
        for row in image.data().chunks(w) {
            let line: Vec<String> = row.iter().map(|&v| to_byte(v).to_string()).collect();
            out.extend_from_slice(line.join(" ").as_bytes());
            out.push(b'\n');
        }
    }
    Ok(out)
}

pub fn write_pgm(image: &Tensor, path: &Path, binary: bool) -> Result<()> {
    fs::write(path, pgm_bytes(image, binary)?).map_err(|e| Error::io(path, e))
}

/// Canonical output file name: `<probe>_<imageid>_<mechanism>_<eta>_<patch>`.
pub fn probe_file_name(
    probe: &str,
    image_id: usize,
    mechanism: &str,
    eta: f64,
    patch: usize,
    ext: &str,
) -> String {
    format!("{probe}_{image_id:05}_{mechanism}_{eta}_{patch}.{ext}")
}
