//! Dataset ingestion, the per-subject split protocol, augmentation,
//! preprocessing, and the synthetic ridge-image generator.
//!
//! On-disk layout: one subdirectory per subject holding `.pgm`/`.ppm`
//! images; subjects are sorted lexicographically into contiguous class
//! indices, and images are sorted within each subject.

pub mod augment;
pub mod pnm;
pub mod preprocess;
pub mod split;
pub mod synth;
mod warp;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng;
use pnm::GrayImage;

/// One labeled image.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Contiguous class index within the dataset.
    pub subject_id: usize,
    /// Subject directory name; stable across listing order.
    pub subject_name: String,
    /// Image file name within the subject directory.
    pub image_name: String,
    pub image: GrayImage,
    pub source_path: PathBuf,
    pub is_augmented: bool,
}

impl Sample {
    /// Stable identity used to derive augmentation randomness.
    pub fn uid(&self) -> u64 {
        rng::fnv1a64(format!("{}/{}", self.subject_name, self.image_name).as_bytes())
    }
}

/// A subject-labeled image collection with contiguous class indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Class index -> subject name, sorted lexicographically.
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, classes: Vec<String>) -> Self {
        Dataset { samples, classes }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Sample indices grouped by class.
    pub fn by_subject(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.classes.len()];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.subject_id].push(i);
        }
        groups
    }
}

const SUPPORTED_EXTENSIONS: [&str; 2] = ["pgm", "ppm"];

/// Load a directory-per-subject dataset.
///
/// Subjects are the subdirectories of `root`, sorted lexicographically;
/// plain files directly under `root` are ignored. Every file inside a
/// subject directory must be a readable PGM/PPM image.
pub fn ingest_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut subject_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            subject_dirs.push((name, path));
        }
    }
    if subject_dirs.is_empty() {
        return Err(Error::Data(format!(
            "dataset root {} contains no subject directories",
            root.display()
        )));
    }
    subject_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut samples = Vec::new();
    let mut classes = Vec::new();
    for (subject_id, (subject_name, dir)) in subject_dirs.into_iter().enumerate() {
        let mut files: Vec<(String, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            let name = entry.file_name().to_string_lossy().into_owned();
            if path.is_dir() {
                return Err(Error::UnsupportedFile {
                    path,
                    reason: "nested directories are not allowed inside a subject".to_string(),
                });
            }
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !SUPPORTED_EXTENSIONS.contains(&ext.as_str()) {
                return Err(Error::UnsupportedFile {
                    path,
                    reason: format!("extension \"{ext}\" is not a portable graymap/pixmap"),
                });
            }
            files.push((name, path));
        }
        if files.is_empty() {
            return Err(Error::Data(format!(
                "subject \"{subject_name}\" has no images"
            )));
        }
        files.sort_by(|a, b| a.0.cmp(&b.0));
        for (image_name, path) in files {
            let image = pnm::read_pnm(&path)?;
            samples.push(Sample {
                subject_id,
                subject_name: subject_name.clone(),
                image_name,
                image,
                source_path: path,
                is_augmented: false,
            });
        }
        classes.push(subject_name);
    }
    Ok(Dataset { samples, classes })
}


#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_subject(root: &Path, name: &str, images: usize) {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..images {
            let img = GrayImage::filled(3, 3, (i * 40) as u8);
            pnm::write_pgm_binary(dir.join(format!("i{i:02}.pgm")), &img).unwrap();
        }
    }

    #[test]
    fn ingest_sorts_subjects_and_images() {
        let tmp = tempfile::tempdir().unwrap();
        write_subject(tmp.path(), "s002", 2);
        write_subject(tmp.path(), "s001", 3);
        // A stray file at root level is ignored (not a subject directory).
        fs::write(tmp.path().join("notes.txt"), "x").unwrap();

        let ds = ingest_dataset(tmp.path()).unwrap();
        assert_eq!(ds.classes, vec!["s001", "s002"]);
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.samples[0].subject_id, 0);
        assert_eq!(ds.samples[0].image_name, "i00.pgm");
        assert!(ds.samples.iter().all(|s| !s.is_augmented));

        let again = ingest_dataset(tmp.path()).unwrap();
        assert_eq!(again.classes, ds.classes);
        let names: Vec<_> = ds.samples.iter().map(|s| s.image_name.clone()).collect();
        let names2: Vec<_> = again.samples.iter().map(|s| s.image_name.clone()).collect();
        assert_eq!(names, names2, "class-index mapping is deterministic");
    }

    #[test]
    fn single_subject_single_image_is_valid() {
        let tmp = tempfile::tempdir().unwrap();
        write_subject(tmp.path(), "only", 1);
        let ds = ingest_dataset(tmp.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.num_classes(), 1);
    }

    #[test]
    fn distinct_ingest_errors() {
        let tmp = tempfile::tempdir().unwrap();
        match ingest_dataset(tmp.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("no subject directories"), "{msg}"),
            other => panic!("expected Data error, got {other:?}"),
        }

        write_subject(tmp.path(), "s001", 1);
        fs::create_dir_all(tmp.path().join("empty")).unwrap();
        match ingest_dataset(tmp.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("empty"), "{msg}"),
            other => panic!("expected Data error, got {other:?}"),
        }
        fs::remove_dir(tmp.path().join("empty")).unwrap();

        fs::write(tmp.path().join("s001").join("readme.md"), "hello").unwrap();
        match ingest_dataset(tmp.path()) {
            Err(Error::UnsupportedFile { path, .. }) => {
                assert!(path.ends_with("readme.md"));
            }
            other => panic!("expected UnsupportedFile, got {other:?}"),
        }
        fs::remove_file(tmp.path().join("s001").join("readme.md")).unwrap();

        fs::write(tmp.path().join("s001").join("bad.pgm"), b"P5\n9 9\n255\nxx").unwrap();
        match ingest_dataset(tmp.path()) {
            Err(Error::UnreadableImage { path, .. }) => assert!(path.ends_with("bad.pgm")),
            other => panic!("expected UnreadableImage, got {other:?}"),
        }
    }
}
