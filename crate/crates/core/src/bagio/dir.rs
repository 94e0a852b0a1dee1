use std::borrow::Cow;
use std::path::{Path, PathBuf};

use super::{read_bag_file, BagSource, FeatureBag};
use crate::error::{Error, Result};

pub const BAG_EXTENSION: &str = "ectb";

/// Bags stored as `<slide_id>.ectb` files in one directory, read on access.
#[derive(Debug, Clone)]
pub struct BagDir {
    ids: Vec<String>,
    paths: Vec<PathBuf>,
}

impl BagDir {
    /// The bags for `ids`, in that order; every file must exist.
    pub fn open(dir: impl AsRef<Path>, ids: &[String]) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths = Vec::with_capacity(ids.len());
        for id in ids {
            let path = dir.join(format!("{id}.{BAG_EXTENSION}"));
            if !path.is_file() {
                return Err(Error::invalid(format!("no bag file for slide {id} in {}", dir.display())));
            }
            paths.push(path);
        }
        Ok(Self { ids: ids.to_vec(), paths })
    }

    /// Every bag file in `dir`, sorted by slide id.
    pub fn scan(dir: impl AsRef<Path>) -> Result<Self> {
        let mut found: Vec<(String, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == BAG_EXTENSION) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    found.push((stem.to_string(), path.clone()));
                }
            }
        }
        found.sort();
        let (ids, paths) = found.into_iter().unzip();
        Ok(Self { ids, paths })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

impl BagSource for BagDir {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn bag(&self, index: usize) -> Result<Cow<'_, FeatureBag>> {
        let bag = read_bag_file(&self.paths[index])?;
        if bag.slide_id != self.ids[index] {
            return Err(Error::invalid(format!(
                "{} holds slide {} instead of {}",
                self.paths[index].display(),
                bag.slide_id,
                self.ids[index]
            )));
        }
        Ok(Cow::Owned(bag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagio::write_bag_file;

    #[test]
    fn scan_and_open() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["b", "a"] {
            let bag = FeatureBag::new(id, 2, vec![(0, 0)], vec![1.0, 2.0], 0.5, 512).unwrap();
            write_bag_file(&bag, dir.path().join(format!("{id}.ectb"))).unwrap();
        }
        let all = BagDir::scan(dir.path()).unwrap();
        assert_eq!(all.ids(), ["a", "b"]);
        assert_eq!(all.bag(1).unwrap().slide_id, "b");
        let some = BagDir::open(dir.path(), &["b".to_string()]).unwrap();
        assert_eq!(some.len(), 1);
        assert!(BagDir::open(dir.path(), &["zz".to_string()]).is_err());
        std::fs::copy(dir.path().join("a.ectb"), dir.path().join("c.ectb")).unwrap();
        let wrong = BagDir::open(dir.path(), &["c".to_string()]).unwrap();
        assert!(wrong.bag(0).is_err());
    }
}
