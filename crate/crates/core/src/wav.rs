//! Mono WAV reading and writing: 16-bit PCM or 32-bit float.

use std::io::{Cursor, Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn decode<R: Read>(reader: WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::invalid(format!(
            "expected mono audio, found {} channels",
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()?,
        (format, bits) => {
            return Err(Error::invalid(format!(
                "unsupported WAV encoding {format:?} with {bits} bits"
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Decodes a WAV file held in memory.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    decode(WavReader::new(Cursor::new(bytes))?)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    decode(reader)
}

fn encode<W: Write + Seek>(w: &Waveform, encoding: WavEncoding, sink: W) -> Result<()> {
    let spec = match encoding {
        WavEncoding::Pcm16 => WavSpec {
            channels: 1,
            sample_rate: w.sample_rate(),
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
        WavEncoding::Float32 => WavSpec {
            channels: 1,
            sample_rate: w.sample_rate(),
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::new(sink, spec)?;
    for &x in w.samples() {
        match encoding {
            WavEncoding::Pcm16 => {
                writer.write_sample((x * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?
            }
            WavEncoding::Float32 => writer.write_sample(x as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

pub fn encode_wav(w: &Waveform, encoding: WavEncoding) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    encode(w, encoding, &mut buf)?;
    Ok(buf.into_inner())
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(w, encoding)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
