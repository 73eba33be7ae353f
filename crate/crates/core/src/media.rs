//! PNG contact sheets and GIF animations of frame clips.

use std::path::Path;

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, ImageFormat, Rgb, RgbImage, RgbaImage};

use crate::clip::FrameClip;
use crate::error::{Error, Result};
use crate::io::write_atomic;

const GAP: u32 = 2;
const EMPTY: Rgb<u8> = Rgb([40, 40, 40]);

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn blit(img: &mut RgbImage, clip: &FrameClip, f: usize, x0: u32, y0: u32, scale: u32) {
    let (h, w) = (clip.height, clip.width);
    let frame = clip.frame(f);
    for y in 0..h {
        for x in 0..w {
            let px = Rgb([0, 1, 2].map(|c| to_u8(frame[(c.min(clip.channels - 1) * h + y) * w + x])));
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(x0 + x as u32 * scale + dx, y0 + y as u32 * scale + dy, px);
                }
            }
        }
    }
}

/// Grid with one row per entry; `None` cells are drawn as dark tiles.
pub fn contact_sheet(rows: &[Vec<Option<(&FrameClip, usize)>>], height: usize, width: usize, scale: u32) -> RgbImage {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0) as u32;
    let (th, tw) = (height as u32 * scale, width as u32 * scale);
    let mut img = RgbImage::from_pixel(
        cols * (tw + GAP) + GAP,
        rows.len() as u32 * (th + GAP) + GAP,
        Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let (x0, y0) = (GAP + c as u32 * (tw + GAP), GAP + r as u32 * (th + GAP));
            match cell {
                Some((clip, f)) => blit(&mut img, clip, *f, x0, y0, scale),
                None => {
                    for y in 0..th {
                        for x in 0..tw {
                            img.put_pixel(x0 + x, y0 + y, EMPTY);
                        }
                    }
                }
            }
        }
    }
    img
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| Error::Render(e.to_string()))?;
    write_atomic(path, bytes.get_ref())
}

/// Looping GIF, one image per frame.
pub fn write_gif(path: &Path, frames: &[RgbImage], delay_ms: u32) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut enc = GifEncoder::new_with_speed(&mut bytes, 10);
        enc.set_repeat(Repeat::Infinite)
            .map_err(|e| Error::Render(e.to_string()))?;
        for f in frames {
            let rgba: RgbaImage = image::DynamicImage::ImageRgb8(f.clone()).to_rgba8();
            enc.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(delay_ms, 1)))
                .map_err(|e| Error::Render(e.to_string()))?;
        }
    }
    write_atomic(path, &bytes)
}
