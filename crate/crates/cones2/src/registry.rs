//! Persistent residual store and training-free composition.
//!
//! Entry file layout (little-endian):
//! magic `CONES2R\0`, format version u16, d_text u32, length-prefixed
//! base category, length-prefixed subject name, d_text IEEE-754 f32
//! values, length-prefixed fingerprint JSON, trailing CRC-32 over all
//! prior bytes. A residual for d_text 1024 fits in under 5 KB.

use crate::encoder::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::residual::{Fingerprint, ResidualEmbedding};
use crate::text::{TokenizedPrompt, Vocabulary};
use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 8] = b"CONES2R\0";
pub const FORMAT_VERSION: u16 = 1;
pub const FILE_EXT: &str = "residual";

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub subject: String,
    pub base_category: String,
    pub d_text: usize,
    pub delta: Vec<f32>,
    pub fingerprint: Fingerprint,
}

impl RegistryEntry {
    pub fn from_residual(r: &ResidualEmbedding) -> Self {
        RegistryEntry {
            subject: r.subject.clone(),
            base_category: r.base_category.clone(),
            d_text: r.delta.len(),
            delta: r.delta.data().iter().map(|&v| v as f32).collect(),
            fingerprint: r.fingerprint.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_text as u32).to_le_bytes());
        write_str(&mut out, &self.base_category);
        write_str(&mut out, &self.subject);
        for v in &self.delta {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let fp = serde_json::to_vec(&self.fingerprint).expect("fingerprint serializes");
        out.extend_from_slice(&(fp.len() as u16).to_le_bytes());
        out.extend_from_slice(&fp);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
            return Err(corrupt("file too short"));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut cur = body;
        let magic = take(&mut cur, 8, origin)?;
        if magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes(take(&mut cur, 2, origin)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let d_text = u32::from_le_bytes(take(&mut cur, 4, origin)?.try_into().unwrap()) as usize;
        let base_category = read_str(&mut cur, origin)?;
        let subject = read_str(&mut cur, origin)?;
        let mut delta = Vec::with_capacity(d_text);
        for _ in 0..d_text {
            let b = take(&mut cur, 4, origin)?;
            delta.push(f32::from_le_bytes(b.try_into().unwrap()));
        }
        let fp_len =
            u16::from_le_bytes(take(&mut cur, 2, origin)?.try_into().unwrap()) as usize;
        let fp_bytes = take(&mut cur, fp_len, origin)?;
        let fingerprint: Fingerprint =
            serde_json::from_slice(fp_bytes).map_err(|e| corrupt(&format!("fingerprint: {e}")))?;
        if !cur.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(corrupt("non-finite residual values"));
        }
        Ok(RegistryEntry { subject, base_category, d_text, delta, fingerprint })
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn take<'a>(cur: &mut &'a [u8], n: usize, origin: &str) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Corrupt { path: origin.to_string(), reason: "truncated".into() });
    }
    let (head, rest) = cur.split_at(n);
    *cur = rest;
    Ok(head)
}

fn read_str(cur: &mut &[u8], origin: &str) -> Result<String> {
    let len = u16::from_le_bytes(take(cur, 2, origin)?.try_into().unwrap()) as usize;
    let bytes = take(cur, len, origin)?;
    String::from_utf8(bytes.to_vec())
        .map_err(|_| Error::Corrupt { path: origin.to_string(), reason: "bad utf-8".into() })
}

/// Directory-backed map from subject name to entry file.
#[derive(Debug, Clone)]
pub struct ResidualRegistry {
    dir: PathBuf,
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Validation("registry entry name is empty".into()));
    }
    if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(Error::Validation(format!(
            "registry name {name:?} may only use [A-Za-z0-9_-]"
        )));
    }
    Ok(())
}

impl ResidualRegistry {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(ResidualRegistry { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.{FILE_EXT}"))
    }

    /// Writes the entry via a temp file and an atomic rename.
    pub fn save(&self, entry: &RegistryEntry, overwrite: bool) -> Result<PathBuf> {
        validate_name(&entry.subject)?;
        let path = self.path_of(&entry.subject);
        if path.exists() && !overwrite {
            return Err(Error::Validation(format!(
                "registry entry {:?} already exists (pass overwrite to replace)",
                entry.subject
            )));
        }
        let bytes = entry.to_bytes();
        let tmp = self.dir.join(format!(".{}.tmp", entry.subject));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(&self, name: &str) -> Result<RegistryEntry> {
        validate_name(name)?;
        let path = self.path_of(name);
        if !path.exists() {
            return Err(Error::MissingEntry(name.to_string()));
        }
        let bytes = std::fs::read(&path)?;
        let entry = RegistryEntry::from_bytes(&bytes, &path.display().to_string())?;
        if entry.subject != name {
            return Err(Error::Corrupt {
                path: path.display().to_string(),
                reason: format!("file names {name:?} but contains {:?}", entry.subject),
            });
        }
        Ok(entry)
    }

    /// Entry names in lexicographic order.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for e in std::fs::read_dir(&self.dir)? {
            let p = e?.path();
            if p.extension().and_then(|s| s.to_str()) == Some(FILE_EXT) {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    names.push(stem.to_string());
                }
            }
        }
        names.sort();
        Ok(names)
    }
}

/// One subject attachment: which prompt word (and optionally which
/// occurrence, 1-based) receives which stored residual.
#[derive(Debug, Clone)]
pub struct Binding {
    pub word: String,
    pub occurrence: Option<usize>,
    pub entry: RegistryEntry,
}

impl Binding {
    /// Token positions this binding edits within `prompt`.
    pub fn positions(&self, prompt: &TokenizedPrompt, vocab: &Vocabulary) -> Result<Vec<usize>> {
        let all = vocab.subject_positions(prompt, &self.word);
        if all.is_empty() {
            return Err(Error::BindingWordAbsent(self.word.clone()));
        }
        match self.occurrence {
            None => Ok(all),
            Some(k) => {
                if k == 0 || k > all.len() {
                    return Err(Error::Validation(format!(
                        "word {:?} has {} occurrences, requested #{k}",
                        self.word,
                        all.len()
                    )));
                }
                Ok(vec![all[k - 1]])
            }
        }
    }
}

/// Adds each bound residual onto the embedding rows of its subject-token
/// occurrences. No parameters are touched; rows outside the bound
/// positions are bit-identical to the input.
pub fn compose_embedding(
    base: &EmbeddingSequence,
    prompt: &TokenizedPrompt,
    bindings: &[Binding],
    vocab: &Vocabulary,
) -> Result<EmbeddingSequence> {
    if base.prompt.ids != prompt.ids {
        return Err(Error::Validation(
            "embedding sequence was produced for a different prompt".into(),
        ));
    }
    let d = base.vectors.cols();
    let mut covered: HashSet<usize> = HashSet::new();
    let mut edits: Vec<(usize, &RegistryEntry)> = Vec::new();
    for b in bindings {
        if b.entry.d_text != d {
            return Err(Error::DTextMismatch { stored: b.entry.d_text, expected: d });
        }
        for p in b.positions(prompt, vocab)? {
            if !covered.insert(p) {
                return Err(Error::DuplicateBinding(b.word.clone()));
            }
            edits.push((p, &b.entry));
        }
    }
    let mut out = base.clone();
    for (p, entry) in edits {
        let row = out.vectors.row_mut(p);
        for (r, dv) in row.iter_mut().zip(&entry.delta) {
            *r += *dv as f64;
        }
    }
    Ok(out)
}
