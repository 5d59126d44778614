//! Offline teacher-logit store.
//!
//! One file per image: magic `KDL1`, `u32` version, the 32-byte teacher
//! contract hash, `u32` id length and id bytes, then nine `KDT1` records
//! (scales 0..2 × cls, reg, obj), each `[1, C, H, W]`. `index.json` maps
//! image ids to file names.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataaug::Sample;
use crate::detector::{FpnLogits, Model, ModelSpec, ScaleLogits};
use crate::error::{Error, Result};
use crate::serial::{read_tensor, write_tensor};

pub const LOGIT_MAGIC: [u8; 4] = *b"KDL1";
pub const LOGIT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
const MAX_ID_LEN: u32 = 4096;

#[derive(Debug, Clone)]
pub struct LogitRecord {
    pub image_id: String,
    pub spec_hash: [u8; 32],
    /// Batch of one.
    pub logits: FpnLogits,
}

pub fn write_record(w: &mut impl Write, rec: &LogitRecord) -> std::io::Result<()> {
    w.write_all(&LOGIT_MAGIC)?;
    w.write_all(&LOGIT_VERSION.to_le_bytes())?;
    w.write_all(&rec.spec_hash)?;
    w.write_all(&(rec.image_id.len() as u32).to_le_bytes())?;
    w.write_all(rec.image_id.as_bytes())?;
    for lv in &rec.logits.scales {
        for t in lv.tensors() {
            write_tensor(w, t)?;
        }
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Corrupt(format!("truncated logit record ({what}): {e}")))
}

pub fn read_record(r: &mut impl Read) -> Result<LogitRecord> {
    let mut word = [0u8; 4];
    read_exact(r, &mut word, "magic")?;
    if word != LOGIT_MAGIC {
        return Err(Error::Corrupt(format!(
            "bad logit record magic {:?}, expected \"KDL1\"",
            String::from_utf8_lossy(&word)
        )));
    }
    read_exact(r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != LOGIT_VERSION {
        return Err(Error::Corrupt(format!("logit record version {version} is not supported")));
    }
    let mut spec_hash = [0u8; 32];
    read_exact(r, &mut spec_hash, "spec hash")?;
    read_exact(r, &mut word, "id length")?;
    let len = u32::from_le_bytes(word);
    if len > MAX_ID_LEN {
        return Err(Error::Corrupt(format!("image id length {len} too large")));
    }
    let mut id = vec![0u8; len as usize];
    read_exact(r, &mut id, "image id")?;
    let image_id = String::from_utf8(id).map_err(|_| Error::Corrupt("image id is not UTF-8".into()))?;
    let mut scales = Vec::with_capacity(3);
    for _ in 0..3 {
        scales.push(ScaleLogits {
            cls: read_tensor(r)?,
            reg: read_tensor(r)?,
            obj: read_tensor(r)?,
        });
    }
    Ok(LogitRecord {
        image_id,
        spec_hash,
        logits: FpnLogits { scales },
    })
}

pub fn encode_record(rec: &LogitRecord) -> Vec<u8> {
    let mut buf = Vec::new();
    write_record(&mut buf, rec).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode_record(mut bytes: &[u8]) -> Result<LogitRecord> {
    let rec = read_record(&mut bytes)?;
    if !bytes.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes after logit record", bytes.len())));
    }
    Ok(rec)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    format_version: u32,
    spec_hash: String,
    records: BTreeMap<String, PathBuf>,
}

/// A directory of logit records plus its index.
#[derive(Debug, Clone)]
pub struct LogitStore {
    pub dir: PathBuf,
    spec_hash: [u8; 32],
    records: BTreeMap<String, PathBuf>,
}

impl LogitStore {
    pub fn open(dir: &Path) -> Result<LogitStore> {
        let ipath = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let index: Index = serde_json::from_str(&text)?;
        if index.format_version != LOGIT_VERSION {
            return Err(Error::Corrupt(format!(
                "logit index version {} is not supported",
                index.format_version
            )));
        }
        let h = &index.spec_hash;
        if h.len() != 64 || !h.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Corrupt("logit index spec hash must be 64 hex digits".into()));
        }
        let mut spec_hash = [0u8; 32];
        for (i, byte) in spec_hash.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&h[2 * i..2 * i + 2], 16).expect("checked hex");
        }
        Ok(LogitStore {
            dir: dir.to_path_buf(),
            spec_hash,
            records: index.records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn spec_hash(&self) -> [u8; 32] {
        self.spec_hash
    }

    /// Fails unless the store was produced for `student`'s input contract.
    pub fn check_contract(&self, student: &ModelSpec) -> Result<()> {
        let want = student.logit_contract_hash();
        if want != self.spec_hash {
            return Err(Error::SpecHashMismatch(format!(
                "store {} has {}, student expects {} (input {}x{}, {} classes)",
                self.dir.display(),
                hex(&self.spec_hash),
                hex(&want),
                student.input_size.0,
                student.input_size.1,
                student.num_classes
            )));
        }
        Ok(())
    }

    /// Loads the record for `image_id`, verifying id and contract hash.
    pub fn load(&self, image_id: &str) -> Result<LogitRecord> {
        let rel = self
            .records
            .get(image_id)
            .ok_or_else(|| Error::MissingLogits(image_id.to_string()))?;
        let path = self.dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let rec = decode_record(&bytes)
            .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        if rec.image_id != image_id {
            return Err(Error::Corrupt(format!(
                "{} holds logits for `{}`, expected `{image_id}`",
                path.display(),
                rec.image_id
            )));
        }
        if rec.spec_hash != self.spec_hash {
            return Err(Error::SpecHashMismatch(format!(
                "{} disagrees with the store index",
                path.display()
            )));
        }
        Ok(rec)
    }
}

/// Loads one record and checks it against the student's contract.
pub fn load_teacher_logits(dir: &Path, image_id: &str, student: &ModelSpec) -> Result<LogitRecord> {
    let store = LogitStore::open(dir)?;
    store.check_contract(student)?;
    store.load(image_id)
}

fn file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.kdl")
}

/// Runs `teacher` (no gradients) over `samples` in batches and writes one
/// record per sample. Images must already match the teacher's input size.
pub fn dump_teacher_logits(teacher: &Model, samples: &[Sample], dir: &Path, batch: usize) -> Result<LogitStore> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec_hash = teacher.spec.logit_contract_hash();
    let mut records = BTreeMap::new();
    let mut names = BTreeSet::new();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = super::batch_images(&refs, &teacher.spec)?;
        let logits = teacher.infer(&images)?;
        for (i, s) in chunk.iter().enumerate() {
            let name = file_name(&s.id);
            if records.contains_key(&s.id) || !names.insert(name.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate or colliding image id `{}`", s.id)));
            }
            let rec = LogitRecord {
                image_id: s.id.clone(),
                spec_hash,
                logits: logits.item(i)?,
            };
            let path = dir.join(&name);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            write_record(&mut w, &rec)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
            records.insert(s.id.clone(), PathBuf::from(name));
        }
    }
    let index = Index {
        format_version: LOGIT_VERSION,
        spec_hash: hex(&spec_hash),
        records: records.clone(),
    };
    let ipath = dir.join(INDEX_FILE);
    fs::write(&ipath, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&ipath, e))?;
    Ok(LogitStore {
        dir: dir.to_path_buf(),
        spec_hash,
        records,
    })
}
