//! Phantom datasets on disk: `phantom_NNNN/` sample directories plus `index.csv`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, load_phantom, save_phantom, PhantomSample, PhantomSpec};
use crate::seed::derive_seed;

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

pub fn phantom_id(i: usize) -> String {
    format!("phantom_{i:04}")
}

/// Index entries for `train + eval` phantoms; seeds are derived from `seed`.
pub fn plan_dataset(train: usize, eval: usize, seed: u64) -> Vec<IndexEntry> {
    (0..train + eval)
        .map(|i| IndexEntry {
            id: phantom_id(i),
            split: if i < train { Split::Train } else { Split::Eval },
            seed: derive_seed(seed, "phantom", i as u64),
        })
        .collect()
}

/// Generates and writes every planned phantom, then the index.
pub fn generate_dataset(spec: &PhantomSpec, entries: &[IndexEntry], dir: &Path) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let sample = generate_phantom(spec, e.seed)?;
        save_phantom(&sample, dir.join(&e.id))?;
    }
    write_index(entries, &dir.join(INDEX_FILE))
}

pub fn write_index(entries: &[IndexEntry], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join(INDEX_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let mut r = csv::Reader::from_path(&path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Loads the phantoms of one split, in index order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<(String, PhantomSample)>> {
    read_index(dir)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| Ok((e.id.clone(), load_phantom(dir.join(&e.id), e.seed)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_lists_written_ids() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::default();
        let entries = plan_dataset(2, 1, 5);
        generate_dataset(&spec, &entries, dir.path()).unwrap();
        let mut dirs: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        dirs.sort();
        let index = read_index(dir.path()).unwrap();
        assert_eq!(index, entries);
        assert_eq!(dirs, index.iter().map(|e| e.id.clone()).collect::<Vec<_>>());
        let eval = load_split(dir.path(), Split::Eval).unwrap();
        assert_eq!(eval.len(), 1);
        assert_eq!(eval[0].1, generate_phantom(&spec, entries[2].seed).unwrap());
    }
}
