//! Log-magnitude spectrogram images. Time runs left to right, frequency bottom
//! (0 Hz) to top (Nyquist), one pixel per frame and bin.

use mpsenet::dsp::{stft, StftConfig, Waveform};
use mpsenet::{Error, Result};

pub const DEFAULT_RANGE_DB: f64 = 80.0;

/// Black through purple and orange to pale yellow.
const PALETTE: [[f64; 3]; 5] = [
    [0.0, 0.0, 0.0],
    [0.27, 0.05, 0.42],
    [0.73, 0.21, 0.33],
    [0.98, 0.55, 0.04],
    [0.99, 1.0, 0.64],
];

fn colour(v: f64) -> [u8; 3] {
    let x = v.clamp(0.0, 1.0) * (PALETTE.len() - 1) as f64;
    let i = (x.floor() as usize).min(PALETTE.len() - 2);
    let t = x - i as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let a = PALETTE[i][c] + t * (PALETTE[i + 1][c] - PALETTE[i][c]);
        *o = (a * 255.0).round() as u8;
    }
    out
}

/// Encodes the spectrogram of `w` as an RGB PNG. The image carries tEXt chunks
/// with the sample rate, the frequency extent and the dB range.
pub fn render(w: &Waveform, cfg: &StftConfig, range_db: f64) -> Result<Vec<u8>> {
    if !(range_db > 0.0 && range_db.is_finite()) {
        return Err(Error::Config(format!("--range-db: must be positive, got {range_db}")));
    }
    let spec = stft(w, cfg)?;
    let (frames, bins) = spec.magnitude.dim();
    let db = spec.magnitude.mapv(|m| 20.0 * m.max(1e-12).log10());
    let peak = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = peak - range_db;
    let mut pixels = Vec::with_capacity(frames * bins * 3);
    for row in 0..bins {
        let bin = bins - 1 - row;
        for frame in 0..frames {
            let v = (db[[frame, bin]] - floor) / range_db;
            pixels.extend_from_slice(&colour(v));
        }
    }
    let nyquist = w.sample_rate() as f64 / 2.0;
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, frames as u32, bins as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let text = [
            ("sample_rate_hz", w.sample_rate().to_string()),
            ("freq_min_hz", "0".to_string()),
            ("freq_max_hz", format!("{nyquist}")),
            ("hop_length", cfg.hop_length.to_string()),
            ("range_db", format!("{range_db}")),
        ];
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v).map_err(png_err)?;
        }
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&pixels).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    Ok(bytes)
}

fn png_err(e: png::EncodingError) -> Error {
    Error::invalid(format!("png encoding failed: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn tone(len: usize) -> Waveform {
        let v = (0..len).map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16_000.0).sin()).collect();
        Waveform::new(v, 16_000).unwrap()
    }

    #[test]
    fn image_geometry_and_metadata() {
        let cfg = StftConfig::default();
        let bytes = render(&tone(3200), &cfg, 80.0).unwrap();
        let decoder = png::Decoder::new(Cursor::new(&bytes));
        let reader = decoder.read_info().unwrap();
        let info = reader.info();
        assert_eq!(info.width as usize, cfg.n_frames(3200));
        assert_eq!(info.height, 201);
        let text: Vec<_> = info
            .uncompressed_latin1_text
            .iter()
            .map(|c| (c.keyword.clone(), c.text.clone()))
            .collect();
        assert!(text.contains(&("freq_max_hz".to_string(), "8000".to_string())), "{text:?}");
    }

    #[test]
    fn deterministic_and_tone_is_bright_in_its_row() {
        let cfg = StftConfig::default();
        let a = render(&tone(3200), &cfg, 80.0).unwrap();
        assert_eq!(a, render(&tone(3200), &cfg, 80.0).unwrap());
        let mut reader = png::Decoder::new(Cursor::new(&a)).read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let frame = reader.next_frame(&mut buf).unwrap();
        let width = frame.width as usize;
        let brightness = |row: usize| -> u32 {
            let start = row * width * 3;
            buf[start..start + width * 3].iter().map(|&b| b as u32).sum()
        };
        // bin 25 is row 200 - 25
        let tone_row = brightness(175);
        assert!(tone_row > brightness(100) && tone_row > brightness(10));
        assert!(render(&tone(3200), &cfg, 0.0).is_err());
    }
}
