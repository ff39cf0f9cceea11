//! Directory loader for posed-expression photo sets named like `AF01ANS.JPG`:
//! session letter, subject code, two-letter emotion, camera angle. Labels
//! come from the emotion code; the train/val/test split is subject-disjoint
//! so no identity leaks across splits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walkdir::WalkDir;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class order is fixed: neutral first, then the six emotions alphabetically.
pub fn class_names() -> Vec<String> {
    ["neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

const EMOTION_CODES: [(&str, usize); 7] = [
    ("NE", 0),
    ("AN", 1),
    ("DI", 2),
    ("AF", 3), // afraid
    ("HA", 4),
    ("SA", 5),
    ("SU", 6),
];

const ANGLES: [&str; 5] = ["S", "FL", "FR", "HL", "HR"];
const IMAGE_EXTS: [&str; 6] = ["jpg", "jpeg", "png", "bmp", "pgm", "ppm"];

struct Parsed {
    subject: String,
    label: usize,
    straight: bool,
}

fn parse_stem(stem: &str) -> Option<Parsed> {
    if stem.len() < 7 || !stem.is_ascii() {
        return None;
    }
    let session = &stem[..1];
    if session != "A" && session != "B" {
        return None;
    }
    // subject code (gender letter + two digits) identifies a person across
    // both sessions
    let subject = &stem[1..4];
    if !subject.starts_with(['F', 'M'])
        || !subject[1..].chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    let emotion = &stem[4..6];
    let label = EMOTION_CODES.iter().find(|(code, _)| *code == emotion)?.1;
    let angle = &stem[6..];
    if !ANGLES.contains(&angle) {
        return None;
    }
    Some(Parsed { subject: subject.to_string(), label, straight: angle == "S" })
}

fn decode_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(vec![h, w], img.into_raw().into_iter().map(f32::from).collect())
}

/// Load every recognized image under `dir`. Only straight-on shots are kept
/// unless `all_angles` is set. `seed` drives the subject shuffle for the
/// 80/10/10 split.
pub fn load(dir: &Path, all_angles: bool, seed: u64) -> Result<Dataset> {
    // subject -> (label, path) groups; BTreeMap plus sorted walk keep the
    // subject order independent of filesystem iteration order
    let mut by_subject: BTreeMap<String, Vec<(usize, std::path::PathBuf)>> = BTreeMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.display().to_string(),
            detail: e.to_string(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if !IMAGE_EXTS.contains(&ext.as_str()) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_ascii_uppercase();
        let Some(parsed) = parse_stem(&stem) else {
            return Err(Error::Config {
                detail: format!("unrecognized image name `{}`", path.display()),
            });
        };
        if !parsed.straight && !all_angles {
            continue;
        }
        by_subject
            .entry(parsed.subject)
            .or_default()
            .push((parsed.label, path.to_path_buf()));
    }
    if by_subject.is_empty() {
        return Err(Error::EmptySplit { part: "train" });
    }

    let mut subjects: Vec<String> = by_subject.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..subjects.len()).rev() {
        let j = rng.random_range(0..=i);
        subjects.swap(i, j);
    }
    let n = subjects.len();
    let n_val = (n / 10).max(1);
    let n_test = (n / 10).max(1);
    if n <= n_val + n_test {
        return Err(Error::EmptySplit { part: "train" });
    }

    let mut ds = Dataset {
        name: "kdef".into(),
        class_names: class_names(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, subject) in subjects.iter().enumerate() {
        let split = if i < n - n_val - n_test {
            &mut ds.train
        } else if i < n - n_test {
            &mut ds.val
        } else {
            &mut ds.test
        };
        for (label, path) in &by_subject[subject] {
            split.push(Sample { gray: decode_gray(path)?, label: *label });
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::io::Write;

    fn write_pgm(path: &Path, side: usize, fill: u8) {
        let mut f = fs::File::create(path).unwrap();
        write!(f, "P5\n{side} {side}\n255\n").unwrap();
        f.write_all(&vec![fill; side * side]).unwrap();
    }

    fn fixture(dir: &Path, subjects: usize) {
        for s in 1..=subjects {
            for (emo, fill) in [("NE", 10u8), ("HA", 200u8)] {
                let name = format!("AF{s:02}{emo}S.pgm");
                write_pgm(&dir.join(name), 4, fill.wrapping_add(s as u8));
            }
        }
    }

    #[test]
    fn split_is_subject_disjoint_and_labels_follow_codes() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 12);
        let ds = load(dir.path(), false, 9).unwrap();
        assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 24);
        assert_eq!(ds.val.len(), 2, "one subject, two images");
        assert_eq!(ds.test.len(), 2);
        // labels: NE -> 0, HA -> 4
        let mut seen: Vec<usize> = ds.train.iter().map(|s| s.label).collect();
        seen.sort_unstable();
        assert!(seen.iter().all(|&l| l == 0 || l == 4));
        // subject identity is encoded in the fill value: splits must not share
        let sig = |s: &Sample| s.gray.at(&[0, 0]) as i32 - if s.label == 4 { 200 } else { 10 };
        let train_subj: Vec<i32> = ds.train.iter().map(sig).collect();
        for s in ds.val.iter().chain(&ds.test) {
            assert!(!train_subj.contains(&sig(s)));
        }
    }

    #[test]
    fn same_seed_reproduces_the_split() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 12);
        let a = load(dir.path(), false, 3).unwrap();
        let b = load(dir.path(), false, 3).unwrap();
        let key = |ds: &Dataset| {
            ds.test
                .iter()
                .map(|s| (s.label, s.gray.at(&[0, 0]) as u32))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn angled_shots_are_skipped_unless_requested() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 12);
        write_pgm(&dir.path().join("AF01SUHL.pgm"), 4, 77);
        write_pgm(&dir.path().join("BM02AFFR.pgm"), 4, 78);
        let straight = load(dir.path(), false, 1).unwrap();
        let all = load(dir.path(), true, 1).unwrap();
        let count = |ds: &Dataset| ds.train.len() + ds.val.len() + ds.test.len();
        assert_eq!(count(&straight), 24);
        assert_eq!(count(&all), 26);
    }

    #[test]
    fn unrecognized_names_error_instead_of_silently_dropping() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 12);
        write_pgm(&dir.path().join("portrait.pgm"), 4, 1);
        assert!(matches!(load(dir.path(), false, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn too_few_subjects_cannot_fill_three_splits() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 2);
        assert!(matches!(load(dir.path(), false, 1), Err(Error::EmptySplit { part: "train" })));
    }
}
