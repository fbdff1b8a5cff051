//! 8-bit grayscale PNG output for comparison panels.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes values in `[0, 1]` (clipped) as an 8-bit grayscale PNG.
pub fn write_gray_png(path: impl AsRef<Path>, h: usize, w: usize, values: &[f64]) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Shape(format!("{} values for a {h}x{w} image", values.len())));
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(())
}

/// Side-by-side panel: ground truth, reconstruction, and the absolute
/// difference amplified `gain` times. Inputs are magnitude images.
pub fn write_panel(
    path: impl AsRef<Path>,
    h: usize,
    w: usize,
    truth: &[f64],
    recon: &[f64],
    gain: f64,
) -> Result<()> {
    let pw = 3 * w;
    let mut out = vec![0.0; h * pw];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            out[r * pw + c] = truth[i];
            out[r * pw + w + c] = recon[i];
            out[r * pw + 2 * w + c] = gain * (recon[i] - truth[i]).abs();
        }
    }
    write_gray_png(path, h, pw, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_has_three_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        let truth = vec![0.5; 12];
        let recon = vec![0.6; 12];
        write_panel(&p, 3, 4, &truth, &recon, 5.0).unwrap();
        let dec = png::Decoder::new(std::fs::File::open(&p).unwrap());
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (12, 3));
        assert_eq!(buf[0], 128);
        assert_eq!(buf[4], 153);
        assert!((127..=128).contains(&buf[8])); // 5 * 0.1, up to rounding
        assert!(write_gray_png(&p, 2, 2, &[0.0; 3]).is_err());
    }
}
