use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::real::Real;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw MNIST bytes: `len` images of `rows x cols` plus one label each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MnistSet {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl MnistSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` scaled to `[0, 1]`.
    pub fn image<F: Real>(&self, i: usize) -> Array2<F> {
        let raw = self.raw(i);
        let inv = F::one() / F::lit(255.0);
        Array2::from_shape_fn((self.rows, self.cols), |(r, c)| {
            F::lit(raw[r * self.cols + c] as f64) * inv
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn parse_idx<'a>(bytes: &'a [u8], path: &'a Path, magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let found = cur.u32_be("magic number")?;
    if found != magic {
        return Err(Error::format(
            path,
            0,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(cur.u32_be(&format!("dimension {d}"))? as usize);
    }
    let total: usize = dims.iter().product();
    let data = cur.take(total, "data section")?;
    Ok((dims, data))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses a standard (uncompressed) MNIST image/label IDX pair.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<MnistSet> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let (idims, pixels) = parse_idx(&image_bytes, images_path, IMAGES_MAGIC)?;
    let (ldims, labels) = parse_idx(&label_bytes, labels_path, LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::format(
            labels_path,
            4,
            format!(
                "label count {} does not match image count {} in {}",
                ldims[0],
                idims[0],
                images_path.display()
            ),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(Error::format(
            labels_path,
            8 + pos as u64,
            format!("label {} out of range 0..=9", labels[pos]),
        ));
    }
    Ok(MnistSet {
        rows: idims[1],
        cols: idims[2],
        pixels: pixels.to_vec(),
        labels: labels.to_vec(),
    })
}

/// Serializes images (`count x rows x cols` bytes) as an IDX3 file body.
pub fn encode_idx_images(rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let per = (rows * cols) as usize;
    let count = if per == 0 { 0 } else { pixels.len() / per };
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    out.extend_from_slice(&pixels[..count * per]);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images");
        let lp = dir.join("labels");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn two_image_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| (i * 7 % 256) as u8).collect();
        let (ip, lp) = fixture(
            dir.path(),
            &encode_idx_images(28, 28, &pixels),
            &encode_idx_labels(&[3, 9]),
        );
        let set = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!((set.rows, set.cols), (28, 28));
        assert_eq!(set.pixels, pixels);
        assert_eq!(set.labels, vec![3, 9]);
        assert_eq!(encode_idx_images(28, 28, &set.pixels), std::fs::read(&ip).unwrap());
    }

    #[test]
    fn pixel_scaling() {
        let mut pixels = vec![0u8; 4];
        pixels[1] = 255;
        let set = MnistSet {
            rows: 2,
            cols: 2,
            pixels,
            labels: vec![0],
        };
        let img = set.image::<f32>(0);
        assert_eq!(img[[0, 0]], 0.0);
        assert_eq!(img[[0, 1]], 1.0);
    }

    #[test]
    fn bad_magic_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut images = encode_idx_images(2, 2, &[0; 4]);
        images[3] = 0x04;
        let (ip, lp) = fixture(dir.path(), &images, &encode_idx_labels(&[1]));
        let err = load_mnist_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("images"), "{err}");
        assert!(err.contains("bad magic"), "{err}");
        assert!(err.contains("offset 0"), "{err}");
    }

    #[test]
    fn truncated_data_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let images = encode_idx_images(2, 2, &[0; 8]);
        let (ip, lp) = fixture(dir.path(), &images[..images.len() - 3], &encode_idx_labels(&[1, 2]));
        let err = load_mnist_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(err.contains("offset 16"), "{err}");
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(
            dir.path(),
            &encode_idx_images(2, 2, &[0; 8]),
            &encode_idx_labels(&[1, 2, 3]),
        );
        let err = load_mnist_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("does not match"), "{err}");
    }
}
