//! Binary dataset cache: one record file per split plus a text sidecar, so
//! slow source parsing (large CSVs, image decoding) happens once.
//!
//! Split file layout, little endian: u32 count, u32 h, u32 w, then `count`
//! records of 1 label byte followed by h*w intensity bytes.

use std::fs;
use std::path::Path;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.txt";
const MAGIC: &str = "ferkit-dataset v1";
const SPLITS: [&str; 3] = ["train", "val", "test"];

fn encode_split(samples: &[Sample]) -> Result<Vec<u8>> {
    let (h, w) = match samples.first() {
        Some(s) => (s.gray.shape()[0], s.gray.shape()[1]),
        None => (0, 0),
    };
    let mut buf = Vec::with_capacity(12 + samples.len() * (1 + h * w));
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for s in samples {
        if s.gray.shape() != [h, w] {
            return Err(Error::Config {
                detail: format!("mixed image sizes in split: {:?} vs {h}x{w}", s.gray.shape()),
            });
        }
        if s.label > u8::MAX as usize {
            return Err(Error::Config { detail: format!("label {} exceeds 255", s.label) });
        }
        buf.push(s.label as u8);
        for &v in s.gray.data() {
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::Config {
                    detail: format!("intensity {v} is not a raw 0..255 value"),
                });
            }
            buf.push(v as u8);
        }
    }
    Ok(buf)
}

fn decode_split(bytes: &[u8], path: &Path) -> Result<Vec<Sample>> {
    let bad = |detail: String| Error::Io { path: path.display().to_string(), detail };
    let word = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| bad("truncated header".into()))
    };
    let count = word(0)?;
    let h = word(4)?;
    let w = word(8)?;
    let rec = 1 + h * w;
    if bytes.len() != 12 + count * rec {
        return Err(bad(format!(
            "{} bytes, expected {} for {count} records of {h}x{w}",
            bytes.len(),
            12 + count * rec
        )));
    }
    let mut out = Vec::with_capacity(count);
    for r in 0..count {
        let at = 12 + r * rec;
        let label = bytes[at] as usize;
        let data: Vec<f32> = bytes[at + 1..at + rec].iter().map(|&b| b as f32).collect();
        out.push(Sample { gray: Tensor::new(vec![h, w], data)?, label });
    }
    Ok(out)
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = format!("{MAGIC}\nname: {}\nclasses: {}\n", ds.name, ds.class_names.join(","));
    let mp = dir.join(META_FILE);
    fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))?;
    for (split, samples) in SPLITS.iter().zip([&ds.train, &ds.val, &ds.test]) {
        let path = dir.join(format!("{split}.bin"));
        fs::write(&path, encode_split(samples)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let mp = dir.join(META_FILE);
    let meta = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let mut lines = meta.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Config { detail: format!("{}: missing `{MAGIC}`", mp.display()) });
    }
    let mut name = None;
    let mut classes = None;
    for line in lines {
        match line.split_once(": ") {
            Some(("name", v)) => name = Some(v.to_string()),
            Some(("classes", v)) => classes = Some(v.split(',').map(str::to_string).collect::<Vec<_>>()),
            _ => {}
        }
    }
    let (Some(name), Some(class_names)) = (name, classes) else {
        return Err(Error::Config { detail: format!("{}: incomplete metadata", mp.display()) });
    };
    let mut splits = Vec::with_capacity(3);
    for split in SPLITS {
        let path = dir.join(format!("{split}.bin"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        splits.push(decode_split(&bytes, &path)?);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    let ds = Dataset { name, class_names, train, val, test };
    ds.check_labels()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;

    #[test]
    fn roundtrip_is_exact() {
        let ds = synth::oriented_bars(2, 1, 1, 3);
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.name, ds.name);
        assert_eq!(back.class_names, ds.class_names);
        assert_eq!(back.train.len(), ds.train.len());
        for (a, b) in ds.train.iter().zip(&back.train) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.gray.data(), b.gray.data());
        }
        assert_eq!(back.val.len(), ds.val.len());
        assert_eq!(back.test.len(), ds.test.len());
    }

    #[test]
    fn truncated_split_file_is_detected() {
        let ds = synth::oriented_bars(2, 1, 1, 3);
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let tp = dir.path().join("train.bin");
        let bytes = fs::read(&tp).unwrap();
        fs::write(&tp, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn non_integer_intensities_cannot_be_cached() {
        let mut ds = synth::oriented_bars(1, 0, 0, 3);
        ds.train[0].gray.data_mut()[0] = 12.5;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(save(&ds, dir.path()), Err(Error::Config { .. })));
    }

    #[test]
    fn labels_outside_the_class_list_fail_on_load() {
        let ds = synth::oriented_bars(1, 1, 1, 3);
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let mp = dir.path().join(META_FILE);
        let meta = fs::read_to_string(&mp).unwrap().replace(
            "classes: bars0,bars1,bars2,bars3,bars4,bars5,bars6,bars7",
            "classes: bars0,bars1",
        );
        fs::write(&mp, meta).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::LabelOutOfRange { .. })));
    }
}
