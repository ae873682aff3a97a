//! 8 kHz mono 16-bit WAV files.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::{MediaError, SAMPLE_RATE};

fn wav_format() -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

fn bad(e: hound::Error) -> MediaError {
    match e {
        hound::Error::IoError(io) => MediaError::Io(io),
        other => MediaError::BadWav(other.to_string()),
    }
}

pub fn read_wav(path: &Path) -> Result<Vec<i16>, MediaError> {
    if !path.exists() {
        return Err(MediaError::FileMissing(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(bad)?;
    let s = reader.spec();
    if s.channels != 1
        || s.sample_rate != SAMPLE_RATE
        || s.bits_per_sample != 16
        || s.sample_format != hound::SampleFormat::Int
    {
        return Err(MediaError::BadWav(format!(
            "{}: need 8000 Hz mono 16-bit PCM, found {} Hz {} ch {} bit",
            path.display(),
            s.sample_rate,
            s.channels,
            s.bits_per_sample
        )));
    }
    reader.into_samples::<i16>().collect::<Result<_, _>>().map_err(bad)
}

pub fn write_wav(path: &Path, samples: &[i16]) -> Result<(), MediaError> {
    let mut rec = WavRecorder::create(path, usize::MAX)?;
    rec.push(samples);
    rec.finish()?;
    Ok(())
}

/// Incremental writer; the header is finalized by [`WavRecorder::finish`].
pub struct WavRecorder {
    path: PathBuf,
    writer: hound::WavWriter<BufWriter<File>>,
    written: usize,
    cap: usize,
}

impl WavRecorder {
    pub fn create(path: &Path, cap_samples: usize) -> Result<Self, MediaError> {
        let writer = hound::WavWriter::create(path, wav_format()).map_err(bad)?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
            written: 0,
            cap: cap_samples,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn is_full(&self) -> bool {
        self.written >= self.cap
    }

    /// Appends up to the cap; returns how many samples were taken.
    pub fn push(&mut self, samples: &[i16]) -> usize {
        let room = self.cap.saturating_sub(self.written);
        let take = samples.len().min(room);
        for &s in &samples[..take] {
            if self.writer.write_sample(s).is_err() {
                return 0;
            }
        }
        self.written += take;
        take
    }

    /// Closes the file and returns the sample count.
    pub fn finish(self) -> Result<usize, MediaError> {
        self.writer.finalize().map_err(bad)?;
        Ok(self.written)
    }
}

impl std::fmt::Debug for WavRecorder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WavRecorder")
            .field("path", &self.path)
            .field("written", &self.written)
            .finish()
    }
}
