//! Planning and writing the five dataset samples used for profiling.
//!
//! Samples are prefixes of the input: the largest one is `base_fraction` of
//! the full dataset and the other four are 1/5, 2/5, 3/5 and 4/5 of it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_COUNT: usize = 5;
pub const DEFAULT_BASE_FRACTION: f64 = 0.01;
/// Calibration attempts before giving up on the runtime target.
pub const MAX_ADJUSTMENTS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub full_dataset_bytes: u64,
    pub base_fraction: f64,
    /// Strictly increasing; the last entry is the base sample.
    pub sizes: Vec<u64>,
}

impl SamplePlan {
    pub fn base_size(&self) -> u64 {
        *self.sizes.last().expect("plan has sizes")
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "base fraction must be in (0, 1], got {fraction}"
        )))
    }
}

pub fn plan_samples(full_dataset_bytes: u64, base_fraction: f64) -> Result<SamplePlan> {
    if full_dataset_bytes == 0 {
        return Err(Error::invalid("full dataset size must be > 0"));
    }
    check_fraction(base_fraction)?;
    let base = ((full_dataset_bytes as f64) * base_fraction).round() as u64;
    let base = base.min(full_dataset_bytes);
    let n = SAMPLE_COUNT as u64;
    let sizes: Vec<u64> = (1..=n)
        .map(|i| (u128::from(base) * u128::from(i) / u128::from(n)) as u64)
        .collect();
    if sizes[0] == 0 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "base sample of {base} bytes is too small to split into {SAMPLE_COUNT} distinct sizes"
        )));
    }
    Ok(SamplePlan {
        full_dataset_bytes,
        base_fraction,
        sizes,
    })
}

/// Accepted runtime window for the base sample, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeTarget {
    pub min_seconds: f64,
    pub max_seconds: f64,
}

impl Default for RuntimeTarget {
    fn default() -> Self {
        RuntimeTarget {
            min_seconds: 30.0,
            max_seconds: 180.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Adjustment {
    Accept,
    Retry(f64),
}

impl RuntimeTarget {
    pub fn new(min_seconds: f64, max_seconds: f64) -> Result<Self> {
        if !(min_seconds > 0.0 && max_seconds >= min_seconds) {
            return Err(Error::invalid(format!(
                "runtime target must satisfy 0 < min <= max, got [{min_seconds}, {max_seconds}]"
            )));
        }
        Ok(RuntimeTarget {
            min_seconds,
            max_seconds,
        })
    }

    /// Halve the fraction when the run was too long, double it (capped at
    /// the whole dataset) when too short.
    pub fn adjust(&self, observed_runtime_seconds: f64, current_fraction: f64) -> Result<Adjustment> {
        check_fraction(current_fraction)?;
        if !(observed_runtime_seconds > 0.0) {
            return Err(Error::invalid("observed runtime must be positive"));
        }
        if observed_runtime_seconds > self.max_seconds {
            Ok(Adjustment::Retry(current_fraction / 2.0))
        } else if observed_runtime_seconds < self.min_seconds {
            Ok(Adjustment::Retry((current_fraction * 2.0).min(1.0)))
        } else {
            Ok(Adjustment::Accept)
        }
    }
}

/// [`RuntimeTarget::adjust`] with the default 30–180 s window.
pub fn adjust_base_fraction(observed_runtime_seconds: f64, current_fraction: f64) -> Result<Adjustment> {
    RuntimeTarget::default().adjust(observed_runtime_seconds, current_fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleFormat {
    /// Newline-terminated records; samples end on a record boundary.
    #[default]
    LineDelimited,
    RawBytes,
}

/// Length of the longest newline-aligned prefix of `reader` that is at most
/// `limit` bytes. A trailing record without a newline counts if it ends at EOF.
fn record_aligned_prefix<R: BufRead>(mut reader: R, limit: u64) -> std::io::Result<u64> {
    let mut aligned = 0u64;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)? as u64;
        if n == 0 || aligned + n > limit {
            return Ok(aligned);
        }
        aligned += n;
    }
}

/// Write a prefix of `dataset_path` of at most `target_bytes` to
/// `output_path` and return how many bytes were written.
pub fn materialize_sample(
    dataset_path: &Path,
    target_bytes: u64,
    output_path: &Path,
    format: SampleFormat,
) -> Result<u64> {
    let dataset_len = std::fs::metadata(dataset_path)
        .map_err(|e| Error::io(dataset_path, e))?
        .len();
    if target_bytes > dataset_len {
        return Err(Error::invalid(format!(
            "sample target of {target_bytes} bytes exceeds dataset size {dataset_len} ({})",
            dataset_path.display()
        )));
    }
    let open = || File::open(dataset_path).map_err(|e| Error::io(dataset_path, e));

    let actual = match format {
        SampleFormat::RawBytes => target_bytes,
        SampleFormat::LineDelimited => {
            record_aligned_prefix(BufReader::new(open()?), target_bytes)
                .map_err(|e| Error::io(dataset_path, e))?
        }
    };
    if actual == 0 {
        return Err(Error::invalid(format!(
            "sample target of {target_bytes} bytes is smaller than one record"
        )));
    }

    let out = File::create(output_path).map_err(|e| Error::io(output_path, e))?;
    let mut out = BufWriter::new(out);
    let copied = std::io::copy(&mut open()?.take(actual), &mut out)
        .map_err(|e| Error::io(output_path, e))?;
    out.flush().map_err(|e| Error::io(output_path, e))?;
    debug_assert_eq!(copied, actual);
    Ok(actual)
}

/// A materialized sample as listed in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFile {
    pub target_bytes: u64,
    pub actual_bytes: u64,
    pub path: PathBuf,
}
