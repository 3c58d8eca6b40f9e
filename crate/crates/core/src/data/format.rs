//! Dataset directory layout:
//!
//! ```text
//! manifest.json   {"format", "version", "n_records", "n_identities",
//!                  "patch_grid", "patch_pixels", "schema", "train", "test",
//!                  "records": [{identity, attributes}]}
//! records.bin     "LAIPREC1" | u32 version | u64 count | per record:
//!                 u64 identity | f64 × (rows·cols·patch_pixels) | u32 len | UTF-8 caption
//! ```
//!
//! All integers and floats little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Attributes, Dataset, PersonRecord, Slot};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DATASET_VERSION: u32 = 1;
pub const RECORDS_MAGIC: &[u8; 8] = b"LAIPREC1";
const FORMAT: &str = "laip-dataset";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMeta {
    identity: usize,
    attributes: Attributes,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    n_records: usize,
    n_identities: usize,
    patch_grid: (usize, usize),
    patch_pixels: usize,
    schema: BTreeMap<String, Vec<String>>,
    train: Vec<usize>,
    test: Vec<usize>,
    records: Vec<RecordMeta>,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    blob.extend_from_slice(RECORDS_MAGIC);
    blob.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    blob.extend_from_slice(&(ds.records.len() as u64).to_le_bytes());
    for r in &ds.records {
        blob.extend_from_slice(&(r.identity as u64).to_le_bytes());
        for v in r.image.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        blob.extend_from_slice(&(r.caption.len() as u32).to_le_bytes());
        blob.extend_from_slice(r.caption.as_bytes());
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: DATASET_VERSION,
        n_records: ds.records.len(),
        n_identities: ds.n_identities(),
        patch_grid: ds.patch_grid,
        patch_pixels: ds.patch_pixels,
        schema: Slot::ALL
            .iter()
            .map(|s| (s.name().to_string(), s.values().iter().map(|v| v.to_string()).collect()))
            .collect(),
        train: ds.train.clone(),
        test: ds.test.clone(),
        records: ds
            .records
            .iter()
            .map(|r| RecordMeta {
                identity: r.identity,
                attributes: r.attributes.clone(),
            })
            .collect(),
    };
    fs::write(dir.join("records.bin"), blob)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated records.bin reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != FORMAT {
        return Err(Error::format(0, format!("not a dataset manifest: {:?}", manifest.format)));
    }
    if manifest.version != DATASET_VERSION {
        return Err(Error::format(
            0,
            format!("dataset version {} unsupported (expected {DATASET_VERSION})", manifest.version),
        ));
    }
    let bytes = fs::read(dir.join("records.bin"))?;
    let mut rd = Reader { bytes: &bytes, pos: 0 };
    if rd.take(8, "magic")? != RECORDS_MAGIC {
        return Err(Error::format(0, "bad magic in records.bin"));
    }
    let at = rd.pos as u64;
    let version = rd.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(at, format!("records.bin version {version} unsupported")));
    }
    let at = rd.pos as u64;
    let count = rd.u64("record count")? as usize;
    if count != manifest.n_records || count != manifest.records.len() {
        return Err(Error::format(
            at,
            format!("records.bin holds {count} records, manifest lists {}", manifest.records.len()),
        ));
    }
    let (rows, cols) = manifest.patch_grid;
    let numel = rows * cols * manifest.patch_pixels;
    let mut records = Vec::with_capacity(count);
    for meta in manifest.records {
        let at = rd.pos as u64;
        let identity = rd.u64("identity")? as usize;
        if identity != meta.identity {
            return Err(Error::format(at, format!("identity {identity} disagrees with manifest {}", meta.identity)));
        }
        let raw = rd.take(numel * 8, "image")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let image = Tensor::new(vec![rows, cols, manifest.patch_pixels], data)
            .map_err(|e| Error::format(at, format!("image: {e}")))?;
        let len = rd.u32("caption length")? as usize;
        let at = rd.pos as u64;
        let caption = String::from_utf8(rd.take(len, "caption")?.to_vec())
            .map_err(|_| Error::format(at, "caption is not UTF-8"))?;
        records.push(PersonRecord {
            identity,
            attributes: meta.attributes,
            image,
            caption,
        });
    }
    if rd.pos != bytes.len() {
        return Err(Error::format(rd.pos as u64, "trailing bytes after last record"));
    }
    for &i in manifest.train.iter().chain(&manifest.test) {
        if i >= count {
            return Err(Error::format(0, format!("split index {i} out of {count} records")));
        }
    }
    Ok(Dataset {
        patch_grid: manifest.patch_grid,
        patch_pixels: manifest.patch_pixels,
        records,
        train: manifest.train,
        test: manifest.test,
    })
}
