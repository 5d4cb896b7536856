//! Labeled image lists: the tab-separated manifest format, a class-folder
//! adapter, and stratified train/validation/test splits.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    /// Relative to the manifest root.
    pub path: PathBuf,
    /// Index into the class table.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    /// Class names in order of first appearance.
    pub class_table: Vec<String>,
}

fn load_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl DatasetManifest {
    /// Parses `path<TAB>label` lines; paths are relative to `root`. Blank
    /// lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, root: impl Into<PathBuf>, source: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut class_table: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (path, label) = line
                .split_once('\t')
                .ok_or_else(|| load_error(source, format!("line {}: expected `path<TAB>label`", lineno + 1)))?;
            let label = label.trim();
            if path.is_empty() || label.is_empty() || label.contains('\t') {
                return Err(load_error(source, format!("line {}: malformed record", lineno + 1)));
            }
            if !seen.insert(path.to_string()) {
                return Err(load_error(source, format!("line {}: duplicate path {path}", lineno + 1)));
            }
            let label = match class_table.iter().position(|c| c == label) {
                Some(i) => i,
                None => {
                    class_table.push(label.to_string());
                    class_table.len() - 1
                }
            };
            records.push(Record {
                path: PathBuf::from(path),
                label,
            });
        }
        Ok(Self {
            root: root.into(),
            records,
            class_table,
        })
    }

    /// Reads a manifest file and checks that every image exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| load_error(path, e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root, path)?;
        manifest.check_files()?;
        Ok(manifest)
    }

    /// One subdirectory per class under `dir`, classes in name order.
    pub fn from_class_folders(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut classes: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        classes.sort();
        let mut records = Vec::new();
        let mut class_table = Vec::new();
        for class_dir in classes {
            let name = class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                records.push(Record {
                    path: f.strip_prefix(dir).unwrap_or(&f).to_path_buf(),
                    label: class_table.len(),
                });
            }
            class_table.push(name);
        }
        if class_table.is_empty() {
            return Err(load_error(dir, "no class folders found"));
        }
        Ok(Self {
            root: dir.to_path_buf(),
            records,
            class_table,
        })
    }

    pub fn check_files(&self) -> Result<()> {
        for r in &self.records {
            let full = self.resolve(r);
            if !full.is_file() {
                return Err(load_error(&full, "image file not found"));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_table.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Manifest text; paths use `/` separators.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let p = r.path.to_string_lossy().replace('\\', "/");
            out.push_str(&format!("{p}\t{}\n", self.class_table[r.label]));
        }
        out
    }

    /// Writes the manifest to `path`, re-rooting records relative to its
    /// directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut copy = self.clone();
        if dir != self.root {
            for r in &mut copy.records {
                let full = self.root.join(&r.path);
                r.path = full.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(full);
            }
        }
        fs::write(path, copy.to_tsv())?;
        Ok(())
    }

    /// The same class table with the records at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            root: self.root.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            class_table: self.class_table.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: DatasetManifest,
    pub validation: DatasetManifest,
    pub test: DatasetManifest,
}

/// Stratified seeded split. Within each class the validation and test shares
/// are `floor(ratio · count)`; the remainder goes to training.
pub fn split(manifest: &DatasetManifest, ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let needed = [tr, va, te].iter().filter(|&&r| r > 0.0).count();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (label, mut idx) in by_class {
        if idx.len() < needed {
            return Err(Error::InvalidInput(format!(
                "class `{}` has {} samples, fewer than the {needed} splits",
                manifest.class_table[label],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_val = (va * n + 1e-9).floor() as usize;
        let n_test = (te * n + 1e-9).floor() as usize;
        test.extend_from_slice(&idx[..n_test]);
        val.extend_from_slice(&idx[n_test..n_test + n_val]);
        train.extend_from_slice(&idx[n_test + n_val..]);
    }
    for v in [&mut train, &mut val, &mut test] {
        v.sort_unstable();
    }
    Ok(Split {
        train: manifest.subset(&train),
        validation: manifest.subset(&val),
        test: manifest.subset(&test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(counts: &[usize]) -> DatasetManifest {
        let mut text = String::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                text.push_str(&format!("c{c}/{i}.png\tclass{c}\n"));
            }
        }
        DatasetManifest::parse(&text, "", Path::new("m.tsv")).unwrap()
    }

    #[test]
    fn class_table_follows_first_appearance() {
        let m = DatasetManifest::parse("a.png\tlatin\nb.png\tarabic\nc.png\tlatin\n", "", Path::new("m")).unwrap();
        assert_eq!(m.class_table, vec!["latin", "arabic"]);
        assert_eq!(m.labels(), vec![0, 1, 0]);
    }

    #[test]
    fn duplicate_path_is_rejected() {
        let r = DatasetManifest::parse("a.png\tx\na.png\ty\n", "", Path::new("m"));
        assert!(matches!(r, Err(Error::Load { .. })));
    }

    #[test]
    fn malformed_line_is_rejected() {
        assert!(DatasetManifest::parse("a.png latin\n", "", Path::new("m")).is_err());
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"").unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "a.png\tx\nmissing.png\ty\n").unwrap();
        let err = DatasetManifest::load(&m).unwrap_err();
        assert!(err.to_string().contains("missing.png"), "{err}");
    }

    #[test]
    fn class_folders_give_one_entry_per_folder() {
        let dir = tempfile::tempdir().unwrap();
        for c in 0..13 {
            let d = dir.path().join(format!("script{c:02}"));
            fs::create_dir(&d).unwrap();
            fs::write(d.join("0.png"), b"").unwrap();
        }
        let m = DatasetManifest::from_class_folders(dir.path()).unwrap();
        assert_eq!(m.n_classes(), 13);
        assert_eq!(m.len(), 13);
        m.check_files().unwrap();
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("img")).unwrap();
        for n in ["a", "b"] {
            fs::write(dir.path().join("img").join(format!("{n}.png")), b"").unwrap();
        }
        let m = DatasetManifest::parse("img/a.png\tx\nimg/b.png\ty\n", dir.path(), Path::new("m")).unwrap();
        let out = dir.path().join("m.tsv");
        m.save(&out).unwrap();
        assert_eq!(DatasetManifest::load(&out).unwrap(), m);
    }

    #[test]
    fn sixty_ten_thirty_per_stratum() {
        let m = synthetic(&[100]);
        let s = split(&m, (0.6, 0.1, 0.3), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (60, 10, 30));
    }

    #[test]
    fn remainder_goes_to_training() {
        let m = synthetic(&[7, 7]);
        let s = split(&m, (0.6, 0.1, 0.3), 1).unwrap();
        // per class: test floor(2.1)=2, val floor(0.7)=0, train 5
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (10, 0, 4));
    }

    #[test]
    fn split_is_seeded_disjoint_and_exhaustive() {
        let m = synthetic(&[20, 13, 9]);
        let a = split(&m, (0.6, 0.1, 0.3), 3).unwrap();
        assert_eq!(a, split(&m, (0.6, 0.1, 0.3), 3).unwrap());
        assert_ne!(a, split(&m, (0.6, 0.1, 0.3), 4).unwrap());
        let mut all: Vec<_> = [&a.train, &a.validation, &a.test]
            .iter()
            .flat_map(|s| s.records.iter().map(|r| r.path.clone()))
            .collect();
        all.sort();
        let mut orig: Vec<_> = m.records.iter().map(|r| r.path.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn tiny_class_is_an_error() {
        let m = synthetic(&[10, 2]);
        assert!(matches!(split(&m, (0.6, 0.1, 0.3), 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bad_ratios_are_rejected() {
        assert!(split(&synthetic(&[10]), (0.5, 0.1, 0.3), 0).is_err());
    }
}
