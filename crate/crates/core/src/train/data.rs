use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::read_png;
use crate::tensor::{same_shape, Tensor};
use crate::Scalar;

/// A blurred/sharp pair held in memory.
#[derive(Clone, Debug)]
pub struct Pair<T: Scalar> {
    pub name: String,
    pub blur: Tensor<T>,
    pub sharp: Tensor<T>,
}

/// Name-matched PNG pairs under `root/blur` and `root/sharp`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub root: PathBuf,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Sorted file names present in both halves. Any unmatched file is an error.
    pub fn names(&self) -> Result<Vec<String>> {
        let blur = list_pngs(&self.root.join("blur"))?;
        let sharp = list_pngs(&self.root.join("sharp"))?;
        if let Some(n) = blur.symmetric_difference(&sharp).next() {
            let side = if blur.contains(n) { "sharp" } else { "blur" };
            return Err(Error::Dataset(format!(
                "{}: {n} has no counterpart in {side}/",
                self.root.display()
            )));
        }
        if blur.is_empty() {
            return Err(Error::Dataset(format!("{}: no image pairs found", self.root.display())));
        }
        Ok(blur.into_iter().collect())
    }

    pub fn load<T: Scalar>(&self) -> Result<Vec<Pair<T>>> {
        self.names()?
            .into_iter()
            .map(|name| {
                let blur = read_png(&self.root.join("blur").join(&name))?;
                let sharp = read_png(&self.root.join("sharp").join(&name))?;
                same_shape("dataset", blur.shape(), sharp.shape())
                    .map_err(|e| Error::Dataset(format!("{name}: blur and sharp sizes differ ({e})")))?;
                Ok(Pair { name, blur, sharp })
            })
            .collect()
    }
}

fn list_pngs(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeSet::new();
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && name.to_ascii_lowercase().ends_with(".png") {
            out.insert(name);
        }
    }
    Ok(out)
}
