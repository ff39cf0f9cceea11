//! Checkpoints: a raw little-endian f32 blob plus a line-oriented manifest.
//!
//! The manifest pins the architecture, build seed, blob checksum, and every
//! tensor's name, shape, and byte offset in state-visit order. Loading
//! rebuilds the model from the spec and refuses blobs that do not match the
//! manifest exactly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::{by_name, Model, Variant};

pub const MAGIC: &str = "ferkit-checkpoint v1";

fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("manifest")
}

fn blob_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn dims_of(t: &Tensor<f32>) -> String {
    t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save(model: &mut Model<f32>, base: &Path) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut tensor_lines = Vec::new();
    model.visit_state_mut(&mut |name, t| {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensor_lines.push(format!("tensor: {name} {} @{offset}", dims_of(t)));
    });
    let mut flags = String::new();
    model.visit_bn_mut(&mut |bn| flags.push(if bn.initialized { '1' } else { '0' }));
    if flags.is_empty() {
        flags.push('-');
    }

    let spec = &model.spec;
    let mut manifest = format!(
        "{MAGIC}\n\
         arch: {}\n\
         variant: {}\n\
         stl: {}\n\
         share-streams: {}\n\
         classes: {}\n\
         input: {}x{}\n\
         seed: {}\n\
         blob-bytes: {}\n\
         sha256: {}\n\
         bn-init: {flags}\n",
        spec.name,
        spec.variant.name(),
        spec.stl,
        spec.share_streams,
        spec.classes,
        spec.input_hw.0,
        spec.input_hw.1,
        model.seed,
        blob.len(),
        hex(&Sha256::digest(&blob)),
    );
    for line in &tensor_lines {
        manifest.push_str(line);
        manifest.push('\n');
    }

    let mp = manifest_path(base);
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    let bp = blob_path(base);
    fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint { detail: detail.into() }
}

struct Manifest {
    headers: HashMap<String, String>,
    tensors: Vec<(String, Vec<usize>, usize)>,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("missing `{MAGIC}` header")));
    }
    let mut headers = HashMap::new();
    let mut tensors = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| bad(format!("unparseable line `{line}`")))?;
        if key == "tensor" {
            let mut parts = value.split(' ');
            let name = parts.next().ok_or_else(|| bad("tensor line without name"))?;
            let dims = parts.next().ok_or_else(|| bad(format!("tensor {name} without dims")))?;
            let offset = parts
                .next()
                .and_then(|o| o.strip_prefix('@'))
                .and_then(|o| o.parse::<usize>().ok())
                .ok_or_else(|| bad(format!("tensor {name} without @offset")))?;
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("tensor {name} dims `{dims}`"))))
                .collect::<Result<_>>()?;
            tensors.push((name.to_string(), shape, offset));
        } else {
            headers.insert(key.to_string(), value.to_string());
        }
    }
    Ok(Manifest { headers, tensors })
}

impl Manifest {
    fn get(&self, key: &str) -> Result<&str> {
        self.headers
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing header `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| bad(format!("header `{key}: {}` unparseable", self.get(key).unwrap_or(""))))
    }
}

pub fn load(base: &Path) -> Result<Model<f32>> {
    let mp = manifest_path(base);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let m = parse_manifest(&text)?;

    let classes: usize = m.parse("classes")?;
    let mut spec = by_name(m.get("arch")?, classes)?
        .with_variant(Variant::parse(m.get("variant")?)?)
        .with_stl(m.parse("stl")?)
        .with_shared_streams(m.parse("share-streams")?);
    let input = m.get("input")?;
    let (h, w) = input
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| bad(format!("input `{input}`")))?;
    spec.input_hw = (h, w);
    let seed: u64 = m.parse("seed")?;

    let bp = blob_path(base);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let expect_bytes: usize = m.parse("blob-bytes")?;
    if blob.len() != expect_bytes {
        return Err(bad(format!("blob is {} bytes, manifest says {expect_bytes}", blob.len())));
    }
    let digest = hex(&Sha256::digest(&blob));
    if digest != m.get("sha256")? {
        return Err(bad("blob checksum mismatch"));
    }

    let mut model = Model::<f32>::build(&spec, seed)?;
    let mut cursor = 0usize;
    let mut idx = 0usize;
    let mut fill_err: Option<Error> = None;
    model.visit_state_mut(&mut |name, t| {
        if fill_err.is_some() {
            return;
        }
        let Some((mname, mshape, moffset)) = m.tensors.get(idx) else {
            fill_err = Some(bad(format!("manifest ends before tensor {name}")));
            return;
        };
        if mname != name || mshape != t.shape() || *moffset != cursor {
            fill_err = Some(bad(format!(
                "tensor {idx}: manifest has {mname} {mshape:?} @{moffset}, model expects {name} {:?} @{cursor}",
                t.shape()
            )));
            return;
        }
        let bytes = t.numel() * 4;
        let Some(chunk) = blob.get(cursor..cursor + bytes) else {
            fill_err = Some(bad(format!("blob truncated at tensor {name}")));
            return;
        };
        for (v, b) in t.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        cursor += bytes;
        idx += 1;
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    if idx != m.tensors.len() {
        return Err(bad(format!("manifest lists {} tensors, model has {idx}", m.tensors.len())));
    }
    if cursor != blob.len() {
        return Err(bad(format!("blob has {} trailing bytes", blob.len() - cursor)));
    }

    let flags = m.get("bn-init")?;
    if flags != "-" {
        let bits: Vec<char> = flags.chars().collect();
        let mut count = 0usize;
        let mut flag_err = false;
        model.visit_bn_mut(&mut |bn| {
            match bits.get(count) {
                Some('1') => bn.initialized = true,
                Some('0') => bn.initialized = false,
                _ => flag_err = true,
            }
            count += 1;
        });
        if flag_err || count != bits.len() {
            return Err(bad(format!("bn-init `{flags}` does not cover {count} batch norms")));
        }
    }
    Ok(model)
}
