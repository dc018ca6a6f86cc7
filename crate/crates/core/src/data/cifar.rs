//! CIFAR-10 binary batches.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by a 3×32×32 channel-major image.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Concatenates the records of all files into one dataset, pixels divided by 255.
pub fn load_cifar10<P: AsRef<Path>>(batch_files: &[P]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in batch_files {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                detail: format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if record[0] > 9 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: (r * CIFAR_RECORD) as u64,
                    detail: format!("label {} outside 0..=9", record[0]),
                });
            }
            labels.push(usize::from(record[0]));
            data.extend(record[1..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::invalid("load_cifar10", "no batch files given"));
    }
    Dataset::new(Tensor::new(vec![labels.len(), 3, 32, 32], data)?, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn single_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b1.bin");
        fs::write(&p, record(7, 255)).unwrap();
        let ds = load_cifar10(&[&p]).unwrap();
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn files_concatenate_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        fs::write(&a, [record(1, 0), record(2, 0)].concat()).unwrap();
        fs::write(&b, record(3, 0)).unwrap();
        assert_eq!(load_cifar10(&[a, b]).unwrap().labels, vec![1, 2, 3]);
    }

    #[test]
    fn malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        fs::write(&p, &record(1, 0)[..3000]).unwrap();
        match load_cifar10(&[&p]) {
            Err(Error::Format { detail, .. }) => assert!(detail.contains("3073")),
            other => panic!("{other:?}"),
        }
        fs::write(&p, [record(1, 0), record(10, 0)].concat()).unwrap();
        assert!(matches!(load_cifar10(&[&p]), Err(Error::Format { offset: 3073, .. })));
        assert!(load_cifar10::<&Path>(&[]).is_err());
    }
}
