//! Line-oriented dataset manifests.
//!
//! ```text
//! dcseg-manifest v1
//! seed 42
//! note synthetic phantoms, desk-scale split
//! labeled_train<TAB>images/labeled_train_000.vol<TAB>labels/labeled_train_000.vol
//! unlabeled_train<TAB>images/unlabeled_train_000.vol<TAB>-
//! ```
//!
//! Labeled splits (training, validation, test) must carry a label path;
//! the unlabeled split must not; no image path may appear twice.

use super::IoError;
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

const HEADER: &str = "dcseg-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    LabeledTrain,
    UnlabeledTrain,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::LabeledTrain,
        Split::UnlabeledTrain,
        Split::Val,
        Split::Test,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Split::LabeledTrain => "labeled_train",
            Split::UnlabeledTrain => "unlabeled_train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn from_name(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }

    pub fn labeled(&self) -> bool {
        !matches!(self, Split::UnlabeledTrain)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub seed: u64,
    pub notes: Vec<String>,
    labeled_train: Vec<ManifestEntry>,
    unlabeled_train: Vec<ManifestEntry>,
    val: Vec<ManifestEntry>,
    test: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(seed: u64) -> Self {
        Manifest {
            seed,
            ..Default::default()
        }
    }

    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::LabeledTrain => &self.labeled_train,
            Split::UnlabeledTrain => &self.unlabeled_train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn push(
        &mut self,
        split: Split,
        image: PathBuf,
        label: Option<PathBuf>,
    ) -> Result<(), IoError> {
        if split.labeled() && label.is_none() {
            return Err(IoError::ManifestInvariant(format!(
                "{split} entry {} is missing a label",
                image.display()
            )));
        }
        if !split.labeled() && label.is_some() {
            return Err(IoError::ManifestInvariant(format!(
                "{split} entry {} must not carry a label",
                image.display()
            )));
        }
        let list = match split {
            Split::LabeledTrain => &mut self.labeled_train,
            Split::UnlabeledTrain => &mut self.unlabeled_train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        };
        list.push(ManifestEntry { image, label });
        Ok(())
    }

    /// Re-check all invariants (used after parsing).
    pub fn validate(&self) -> Result<(), IoError> {
        let mut seen: BTreeSet<&Path> = BTreeSet::new();
        for split in Split::ALL {
            for e in self.entries(split) {
                if split.labeled() && e.label.is_none() {
                    return Err(IoError::ManifestInvariant(format!(
                        "{split} entry {} is missing a label",
                        e.image.display()
                    )));
                }
                if !split.labeled() && e.label.is_some() {
                    return Err(IoError::ManifestInvariant(format!(
                        "{split} entry {} must not carry a label",
                        e.image.display()
                    )));
                }
                if !seen.insert(e.image.as_path()) {
                    return Err(IoError::ManifestInvariant(format!(
                        "image {} appears in more than one split",
                        e.image.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        Split::ALL.iter().map(|&s| self.entries(s).len()).sum()
    }

    pub fn total_labeled(&self) -> usize {
        Split::ALL
            .iter()
            .flat_map(|&s| self.entries(s))
            .filter(|e| e.label.is_some())
            .count()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), IoError> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        out.push_str(&format!("seed {}\n", self.seed));
        for n in &self.notes {
            out.push_str(&format!("note {n}\n"));
        }
        for split in Split::ALL {
            for e in self.entries(split) {
                let label = e
                    .label
                    .as_ref()
                    .map(|l| l.display().to_string())
                    .unwrap_or_else(|| "-".to_string());
                out.push_str(&format!("{}\t{}\t{}\n", split, e.image.display(), label));
            }
        }
        std::fs::write(path, out).map_err(|e| IoError::File {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, IoError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| IoError::File {
            path: path.display().to_string(),
            source: e,
        })?;
        let parse_err = |line: usize, detail: String| IoError::ManifestParse {
            path: path.display().to_string(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == HEADER => {}
            other => {
                return Err(parse_err(
                    1,
                    format!("expected header `{HEADER}`, found {:?}", other.map(|(_, l)| l)),
                ))
            }
        }
        let mut manifest = Manifest::default();
        let mut seed_seen = false;
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("seed ") {
                manifest.seed = rest
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad seed `{rest}`")))?;
                seed_seen = true;
                continue;
            }
            if let Some(rest) = line.strip_prefix("note ") {
                manifest.notes.push(rest.to_string());
                continue;
            }
            let mut fields = line.split('\t');
            let split = fields
                .next()
                .and_then(Split::from_name)
                .ok_or_else(|| parse_err(lineno, format!("unknown split in `{line}`")))?;
            let image = fields
                .next()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| parse_err(lineno, "missing image path".into()))?;
            let label = fields
                .next()
                .ok_or_else(|| parse_err(lineno, "missing label column (use `-`)".into()))?;
            if fields.next().is_some() {
                return Err(parse_err(lineno, "too many columns".into()));
            }
            let label = (label != "-").then(|| PathBuf::from(label));
            manifest.push(split, PathBuf::from(image), label)?;
        }
        if !seed_seen {
            return Err(parse_err(0, "missing `seed` line".into()));
        }
        manifest.validate()?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        let mut m = Manifest::new(42);
        m.notes.push("synthetic phantoms".into());
        m.push(
            Split::LabeledTrain,
            "images/lt_0.vol".into(),
            Some("labels/lt_0.vol".into()),
        )
        .unwrap();
        m.push(Split::UnlabeledTrain, "images/ut_0.vol".into(), None)
            .unwrap();
        m.push(
            Split::Val,
            "images/val_0.vol".into(),
            Some("labels/val_0.vol".into()),
        )
        .unwrap();
        m.push(
            Split::Test,
            "images/test_0.vol".into(),
            Some("labels/test_0.vol".into()),
        )
        .unwrap();
        m
    }

    #[test]
    fn write_read_round_trip() {
        let m = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        m.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.notes, m.notes);
        for split in Split::ALL {
            assert_eq!(back.entries(split), m.entries(split));
        }
    }

    #[test]
    fn labeled_split_requires_label() {
        let mut m = Manifest::new(0);
        assert!(m
            .push(Split::LabeledTrain, "img.vol".into(), None)
            .is_err());
        assert!(m
            .push(
                Split::UnlabeledTrain,
                "img.vol".into(),
                Some("lbl.vol".into())
            )
            .is_err());
    }

    #[test]
    fn duplicate_paths_across_splits_are_rejected() {
        let mut m = Manifest::new(0);
        m.push(Split::UnlabeledTrain, "same.vol".into(), None).unwrap();
        m.push(Split::Test, "same.vol".into(), Some("l.vol".into()))
            .unwrap();
        assert!(matches!(
            m.validate(),
            Err(IoError::ManifestInvariant(_))
        ));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(
            &path,
            "dcseg-manifest v1\nseed 1\nbogus_split\tx.vol\t-\n",
        )
        .unwrap();
        match Manifest::read(&path) {
            Err(IoError::ManifestParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
