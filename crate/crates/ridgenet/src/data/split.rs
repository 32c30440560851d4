//! Seeded per-subject train/validation/test partition.
//!
//! Per subject, a seeded shuffle of its (sorted) image names assigns exactly
//! 4 to test, `val_per_subject` to validation, and the remainder to train.
//! The plan is a pure function of the sorted dataset listing and the seed.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

use super::Dataset;

/// Images held out for testing, per subject.
pub const TEST_PER_SUBJECT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectSplit {
    pub subject: String,
    pub test: Vec<String>,
    pub val: Vec<String>,
    pub train: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub seed: u64,
    pub val_per_subject: usize,
    /// Sorted by subject name.
    pub subjects: Vec<SubjectSplit>,
}

/// Resolved sample indices for one dataset.
#[derive(Debug, Clone)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partition every subject of `dataset`.
pub fn split(dataset: &Dataset, seed: u64, val_per_subject: usize) -> Result<SplitPlan> {
    let minimum = TEST_PER_SUBJECT + val_per_subject + 1;
    let groups = dataset.by_subject();
    let mut subjects = Vec::with_capacity(groups.len());
    for (class, indices) in groups.iter().enumerate() {
        let subject = dataset.classes[class].clone();
        if indices.len() < minimum {
            return Err(Error::Data(format!(
                "subject \"{subject}\" has {} images but the split needs at least {minimum} \
                 ({TEST_PER_SUBJECT} test + {val_per_subject} validation + 1 train)",
                indices.len()
            )));
        }
        let mut names: Vec<String> = indices
            .iter()
            .map(|&i| dataset.samples[i].image_name.clone())
            .collect();
        names.sort();
        let mut r = rng::stream(rng::mix(&[0x73706c_6974, seed, rng::fnv1a64(subject.as_bytes())]));
        names.shuffle(&mut r);
        let test = names[..TEST_PER_SUBJECT].to_vec();
        let val = names[TEST_PER_SUBJECT..TEST_PER_SUBJECT + val_per_subject].to_vec();
        let train = names[TEST_PER_SUBJECT + val_per_subject..].to_vec();
        subjects.push(SubjectSplit {
            subject,
            test,
            val,
            train,
        });
    }
    Ok(SplitPlan {
        seed,
        val_per_subject,
        subjects,
    })
}

impl SplitPlan {
    /// Text form: one line per image, `subject<TAB>image<TAB>{train|val|test}`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.subjects {
            for (names, tag) in [(&s.train, "train"), (&s.val, "val"), (&s.test, "test")] {
                let mut sorted = names.clone();
                sorted.sort();
                for n in sorted {
                    out.push_str(&format!("{}\t{}\t{}\n", s.subject, n, tag));
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<SplitPlan> {
        let mut map: HashMap<String, SubjectSplit> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (subject, image, tag) = match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(i), Some(t)) if parts.next().is_none() => (s, i, t),
                _ => {
                    return Err(Error::Data(format!(
                        "split line {} is not subject<TAB>image<TAB>tag: {line:?}",
                        lineno + 1
                    )))
                }
            };
            let entry = map.entry(subject.to_string()).or_insert_with(|| {
                order.push(subject.to_string());
                SubjectSplit {
                    subject: subject.to_string(),
                    test: Vec::new(),
                    val: Vec::new(),
                    train: Vec::new(),
                }
            });
            match tag {
                "train" => entry.train.push(image.to_string()),
                "val" => entry.val.push(image.to_string()),
                "test" => entry.test.push(image.to_string()),
                other => {
                    return Err(Error::Data(format!(
                        "split line {} has unknown tag \"{other}\"",
                        lineno + 1
                    )))
                }
            }
        }
        if map.is_empty() {
            return Err(Error::Data("split file is empty".to_string()));
        }
        let mut subjects: Vec<SubjectSplit> = order.into_iter().map(|s| map.remove(&s).unwrap()).collect();
        subjects.sort_by(|a, b| a.subject.cmp(&b.subject));
        let val_per_subject = subjects[0].val.len();
        Ok(SplitPlan {
            seed: 0,
            val_per_subject,
            subjects,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SplitPlan> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SplitPlan::parse(&text)
    }

    /// Resolve the plan against a dataset, checking that the plan covers
    /// exactly the dataset's images.
    pub fn indices(&self, dataset: &Dataset) -> Result<SplitIndices> {
        let mut lookup: HashMap<(&str, &str), usize> = HashMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            lookup.insert((s.subject_name.as_str(), s.image_name.as_str()), i);
        }
        let mut out = SplitIndices {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        let mut seen = 0usize;
        for s in &self.subjects {
            for (names, bucket) in [
                (&s.train, &mut out.train),
                (&s.val, &mut out.val),
                (&s.test, &mut out.test),
            ] {
                for n in names {
                    let idx = lookup.get(&(s.subject.as_str(), n.as_str())).ok_or_else(|| {
                        Error::Data(format!(
                            "split references {}/{} which is not in the dataset",
                            s.subject, n
                        ))
                    })?;
                    bucket.push(*idx);
                    seen += 1;
                }
            }
        }
        if seen != dataset.len() {
            return Err(Error::Data(format!(
                "split covers {seen} images but the dataset has {}",
                dataset.len()
            )));
        }
        Ok(out)
    }
}
