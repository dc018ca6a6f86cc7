//! Dataset specifications accepted by `--data`, `--validation` and `--batch`.
//!
//! * `mnist:DIR`  `train-images-idx3-ubyte[.gz]` and `train-labels-idx1-ubyte[.gz]` in DIR
//! * `mnist-test:DIR`  the `t10k-*` files in DIR
//! * `idx:IMAGES,LABELS`  explicit IDX files
//! * `cifar:FILE[,FILE...]`  CIFAR-10 binary batches
//! * `blobs:N,CLASSES,DIM,SEPARATION[,SEED]`  Gaussian blobs

use std::path::{Path, PathBuf};
use std::str::FromStr;

use apnorm::data::{load_cifar10, load_mnist, synthetic_blobs, Dataset};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Idx { images: PathBuf, labels: PathBuf },
    Mnist { dir: PathBuf, prefix: &'static str },
    Cifar(Vec<PathBuf>),
    Blobs { n: usize, classes: usize, dim: usize, separation: f64, seed: u64 },
}

fn with_gz(dir: &Path, name: &str) -> PathBuf {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    if !plain.exists() && gz.exists() {
        gz
    } else {
        plain
    }
}

impl Source {
    pub fn load(&self) -> CliResult<Dataset> {
        Ok(match self {
            Source::Idx { images, labels } => load_mnist(images, labels)?,
            Source::Mnist { dir, prefix } => {
                load_mnist(&with_gz(dir, &format!("{prefix}-images-idx3-ubyte")), &with_gz(dir, &format!("{prefix}-labels-idx1-ubyte")))?
            }
            Source::Cifar(files) => load_cifar10(files)?,
            &Source::Blobs { n, classes, dim, separation, seed } => synthetic_blobs(n, classes, dim, separation, seed)?,
        })
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| format!("{s:?}: expected KIND:ARGS"))?;
        let parts: Vec<&str> = rest.split(',').filter(|p| !p.is_empty()).collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| format!("{p:?} is not a count"));
        match (kind, parts.as_slice()) {
            ("mnist", [dir]) => Ok(Source::Mnist { dir: dir.into(), prefix: "train" }),
            ("mnist-test", [dir]) => Ok(Source::Mnist { dir: dir.into(), prefix: "t10k" }),
            ("idx", [images, labels]) => Ok(Source::Idx { images: images.into(), labels: labels.into() }),
            ("cifar", files) if !files.is_empty() => Ok(Source::Cifar(files.iter().map(PathBuf::from).collect())),
            ("blobs", [n, classes, dim, sep, seed @ ..]) if seed.len() <= 1 => Ok(Source::Blobs {
                n: num(n)?,
                classes: num(classes)?,
                dim: num(dim)?,
                separation: sep.parse().map_err(|_| format!("{sep:?} is not a number"))?,
                seed: seed.first().map_or(Ok(0), |s| s.parse().map_err(|_| format!("{s:?} is not a seed")))?,
            }),
            _ => Err(format!(
                "{s:?}: expected mnist:DIR, mnist-test:DIR, idx:IMAGES,LABELS, cifar:FILE[,FILE...] or blobs:N,CLASSES,DIM,SEP[,SEED]"
            )),
        }
    }
}

/// Loads `source`, keeping at most `limit` examples.
pub fn load_limited(source: &Source, limit: Option<usize>) -> CliResult<Dataset> {
    let ds = source.load()?;
    match limit {
        Some(0) => Err(CliError::usage("--limit must be positive")),
        Some(n) => Ok(ds.take(n)?),
        None => Ok(ds),
    }
}
