//! CSV loader: 48x48 pixel strings from one file, ten annotator-vote columns
//! from a second, joined strictly by row order. Split assignment and labels
//! both come from the vote file; the emotion column of the pixel file is
//! ignored in favor of the vote majority.

use std::path::Path;

use crate::data::{emotion_classes, majority_vote, parse_pixels, Dataset, Sample};
use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 48;
pub const PIXELS_FILE: &str = "fer2013.csv";
pub const VOTES_FILE: &str = "fer2013new.csv";

const PIXELS_HEADER: [&str; 3] = ["emotion", "pixels", "Usage"];
const VOTES_HEADER: [&str; 12] = [
    "usage", "Image name", "neutral", "happiness", "surprise", "sadness", "anger", "disgust",
    "fear", "contempt", "unknown", "NF",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    /// joined rows seen
    pub total: usize,
    /// rows dropped by the vote rule (unknown/not-face majority)
    pub rejected: usize,
}

fn open(path: &Path, expected: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let got = reader.headers().map_err(|e| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if got.iter().ne(expected.iter().copied()) {
        return Err(Error::CsvHeader {
            path: path.display().to_string(),
            expected: expected.join(","),
            got: got.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(reader)
}

fn bad_row(row: usize, detail: impl Into<String>) -> Error {
    Error::BadRow { row, detail: detail.into() }
}

/// Load `fer2013.csv` + `fer2013new.csv` from `dir`.
pub fn load(dir: &Path) -> Result<(Dataset, LoadStats)> {
    let pixels_path = dir.join(PIXELS_FILE);
    let votes_path = dir.join(VOTES_FILE);
    let mut pixels = open(&pixels_path, &PIXELS_HEADER)?;
    let mut votes = open(&votes_path, &VOTES_HEADER)?;

    let mut ds = Dataset {
        name: "ferplus".into(),
        class_names: emotion_classes(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut stats = LoadStats::default();

    let mut pixel_rows = pixels.records();
    let mut vote_rows = votes.records();
    let mut row = 0usize;
    loop {
        row += 1;
        let (p, v) = match (pixel_rows.next(), vote_rows.next()) {
            (Some(p), Some(v)) => (p, v),
            (None, None) => break,
            // one file ended early: drain the other so the error reports
            // both true row counts
            (p, v) => {
                let mut np = row - 1 + usize::from(p.is_some());
                let mut nv = row - 1 + usize::from(v.is_some());
                np += pixel_rows.count();
                nv += vote_rows.count();
                return Err(Error::RowCountMismatch { pixels: np, votes: nv });
            }
        };
        let p = p.map_err(|e| bad_row(row, e.to_string()))?;
        let v = v.map_err(|e| bad_row(row, e.to_string()))?;
        stats.total += 1;

        let pix_str = p.get(1).ok_or_else(|| bad_row(row, "missing pixels column"))?;
        let usage = v.get(0).ok_or_else(|| bad_row(row, "missing usage column"))?;
        let mut counts = [0u32; 10];
        for (k, slot) in counts.iter_mut().enumerate() {
            let cell = v
                .get(2 + k)
                .ok_or_else(|| bad_row(row, format!("missing vote column {}", VOTES_HEADER[2 + k])))?;
            *slot = cell
                .trim()
                .parse()
                .map_err(|_| bad_row(row, format!("vote `{cell}` is not a count")))?;
        }
        let Some(label) = majority_vote(&counts) else {
            stats.rejected += 1;
            continue;
        };
        let gray = parse_pixels(pix_str, IMAGE_SIDE, IMAGE_SIDE)
            .map_err(|e| bad_row(row, e.to_string()))?;
        let sample = Sample { gray, label };
        match usage.trim() {
            "Training" => ds.train.push(sample),
            "PublicTest" => ds.val.push(sample),
            "PrivateTest" => ds.test.push(sample),
            other => return Err(bad_row(row, format!("unknown usage `{other}`"))),
        }
    }
    Ok((ds, stats))
}
