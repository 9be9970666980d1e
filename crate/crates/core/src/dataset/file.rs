//! Dataset container: `CMNV1` header, then `label + H*W` bytes per example.
//!
//! Header (little-endian after the magic): `u32 variant, u64 seed,
//! u32 num_examples, u16 H, u16 W, f32 scale_lo, f32 scale_hi,
//! u8 distractors_lo, u8 distractors_hi`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{Dataset, DatasetConfig, DatasetVariant, Example, Split};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 5] = b"CMNV1";
const HEADER_LEN: usize = 5 + 4 + 8 + 4 + 2 + 2 + 4 + 4 + 1 + 1;

fn encode_header(config: &DatasetConfig, out: &mut Vec<u8>) {
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&config.variant.code().to_le_bytes());
    out.extend_from_slice(&config.seed.to_le_bytes());
    out.extend_from_slice(&config.num_examples.to_le_bytes());
    out.extend_from_slice(&config.height.to_le_bytes());
    out.extend_from_slice(&config.width.to_le_bytes());
    out.extend_from_slice(&config.scale.0.to_le_bytes());
    out.extend_from_slice(&config.scale.1.to_le_bytes());
    out.push(config.distractors.0);
    out.push(config.distractors.1);
}

fn check_example(config: &DatasetConfig, e: &Example) -> Result<()> {
    if e.pixels.len() != config.pixels_per_example() {
        return Err(Error::invalid(format!(
            "example {} has {} pixels, header says {}x{}",
            e.index,
            e.pixels.len(),
            config.height,
            config.width
        )));
    }
    Ok(())
}

/// Canonical byte encoding of a dataset.
pub fn encode_dataset(config: &DatasetConfig, examples: &[Example]) -> Result<Vec<u8>> {
    if examples.len() != config.num_examples as usize {
        return Err(Error::invalid(format!(
            "header announces {} examples, got {}",
            config.num_examples,
            examples.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + examples.len() * (1 + config.pixels_per_example()));
    encode_header(config, &mut out);
    for e in examples {
        check_example(config, e)?;
        out.push(e.label);
        out.extend_from_slice(&e.pixels);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, config: &DatasetConfig, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    if examples.len() != config.num_examples as usize {
        return Err(Error::invalid(format!(
            "header announces {} examples, got {}",
            config.num_examples,
            examples.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    encode_header(config, &mut header);
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for e in examples {
        check_example(config, e)?;
        w.write_all(&[e.label]).map_err(|e| Error::io(path, e))?;
        w.write_all(&e.pixels).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn decode_header(bytes: &[u8], path: &Path) -> Result<DatasetConfig> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 5 && &bytes[..5] != DATASET_MAGIC {
            return Err(Error::format(path, 0, "bad magic, expected CMNV1"));
        }
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[..5] != DATASET_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected CMNV1"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().expect("2 bytes"));
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let code = u32_at(5);
    let variant = DatasetVariant::from_code(code)
        .ok_or_else(|| Error::format(path, 5, format!("unknown dataset variant {code}")))?;
    let config = DatasetConfig {
        variant,
        seed: u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")),
        num_examples: u32_at(17),
        height: u16_at(21),
        width: u16_at(23),
        scale: (f32_at(25), f32_at(29)),
        distractors: (bytes[33], bytes[34]),
        source_split: Split::Train,
    };
    config
        .validate()
        .map_err(|e| Error::format(path, 5, format!("invalid header: {e}")))?;
    Ok(config)
}

/// Streaming reader over the examples of a dataset file.
pub struct DatasetReader {
    inner: Box<dyn Read + Send>,
    path: PathBuf,
    config: DatasetConfig,
    next: u32,
    failed: bool,
}

impl DatasetReader {
    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Example>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next >= self.config.num_examples {
            return None;
        }
        let index = self.next;
        let record = 1 + self.config.pixels_per_example();
        let offset = HEADER_LEN as u64 + index as u64 * record as u64;
        let mut buf = vec![0u8; record];
        let mut filled = 0;
        while filled < record {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::io(&self.path, e)));
                }
            }
        }
        if filled < record {
            self.failed = true;
            return Some(Err(Error::format(
                &self.path,
                offset + filled as u64,
                format!(
                    "example {index} truncated: {filled} of {record} bytes present"
                ),
            )));
        }
        let label = buf[0];
        if label > 9 {
            self.failed = true;
            return Some(Err(Error::format(
                &self.path,
                offset,
                format!("example {index} has label {label} outside 0..=9"),
            )));
        }
        buf.remove(0);
        self.next += 1;
        Some(Ok(Example {
            pixels: buf,
            label,
            index,
        }))
    }
}

/// Opens a dataset file and returns its header plus a lazy example stream.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetConfig, DatasetReader)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    (&mut r)
        .take(HEADER_LEN as u64)
        .read_to_end(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let config = decode_header(&header, path)?;
    let reader = DatasetReader {
        inner: Box::new(r),
        path: path.to_path_buf(),
        config: config.clone(),
        next: 0,
        failed: false,
    };
    Ok((config, reader))
}

/// Reads a whole dataset into memory, rejecting trailing bytes.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, path)
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let config = decode_header(bytes, path)?;
    let reader = DatasetReader {
        inner: Box::new(std::io::Cursor::new(bytes[HEADER_LEN..].to_vec())),
        path: path.to_path_buf(),
        config: config.clone(),
        next: 0,
        failed: false,
    };
    let examples = reader.collect::<Result<Vec<_>>>()?;
    let expected = HEADER_LEN + examples.len() * (1 + config.pixels_per_example());
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            expected as u64,
            format!("{} trailing bytes after the last example", bytes.len() - expected),
        ));
    }
    Ok(Dataset { config, examples })
}
