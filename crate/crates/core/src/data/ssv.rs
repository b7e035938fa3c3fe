use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{DatasetSplit, Split, VolumeSample};
use crate::binio;
use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Tensor};

const MAGIC: [u8; 4] = *b"SSV1";
pub const MANIFEST: &str = "manifest.tsv";

/// Serialize one sample as SSV1. The id and ambiguity are not stored.
pub fn write_volume<W: Write>(w: &mut W, s: &VolumeSample) -> Result<()> {
    w.write_all(&MAGIC)?;
    for dim in s.shape() {
        let d = u32::try_from(dim).map_err(|_| Error::DimensionOverflow)?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[u8::from(s.label.is_some()), u8::from(s.is_labeled)])?;
    binio::write_f64s(w, s.volume.data())?;
    if let Some(l) = &s.label {
        w.write_all(l)?;
    }
    Ok(())
}

pub fn read_volume<R: Read>(r: &mut R, id: &str) -> Result<VolumeSample> {
    binio::read_magic(r, MAGIC)?;
    let mut shape = [0usize; 3];
    for d in &mut shape {
        *d = binio::read_u32(r)? as usize;
    }
    let n = checked_numel(&shape)?;
    n.checked_mul(8).ok_or(Error::DimensionOverflow)?;
    let has_label = flag(binio::read_u8(r)?)?;
    let is_labeled = flag(binio::read_u8(r)?)?;
    let data = binio::read_f64s(r, n)?;
    let label = if has_label {
        let mut l = vec![0u8; n];
        binio::read_exact(r, &mut l)?;
        Some(l)
    } else {
        None
    };
    VolumeSample::new(id, Tensor::new(shape.to_vec(), data)?, label, is_labeled)
}

fn flag(b: u8) -> Result<bool> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::InvalidArgument(format!("flag byte {other}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
}

pub fn write_manifest<W: Write>(w: &mut W, entries: &[ManifestEntry]) -> Result<()> {
    for e in entries {
        writeln!(w, "{}\t{}\t{}", e.id, e.path.display(), e.split)?;
    }
    Ok(())
}

pub fn read_manifest<R: Read>(r: R) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, path, split] = fields[..] else {
            return Err(Error::InvalidArgument(format!("manifest line {}: expected 3 fields", n + 1)));
        };
        out.push(ManifestEntry { id: id.to_string(), path: PathBuf::from(path), split: split.parse()? });
    }
    Ok(out)
}

/// Write every sample in `split` as `<dir>/<id>.ssv` plus a manifest.
pub fn save_dataset(dir: &Path, samples: &[VolumeSample], split: &DatasetSplit) -> Result<()> {
    split.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for s in samples {
        let Some(which) = split.split_of(&s.id) else { continue };
        let path = PathBuf::from(format!("{}.ssv", s.id));
        let mut w = BufWriter::new(File::create(dir.join(&path))?);
        write_volume(&mut w, s)?;
        w.flush()?;
        entries.push(ManifestEntry { id: s.id.clone(), path, split: which });
    }
    let mut w = BufWriter::new(File::create(dir.join(MANIFEST))?);
    write_manifest(&mut w, &entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<VolumeSample>, DatasetSplit)> {
    let entries = read_manifest(File::open(dir.join(MANIFEST))?)?;
    let mut samples = Vec::with_capacity(entries.len());
    let mut split = DatasetSplit::default();
    for e in entries {
        let mut r = BufReader::new(File::open(dir.join(&e.path))?);
        samples.push(read_volume(&mut r, &e.id)?);
        match e.split {
            Split::Labeled => split.labeled.push(e.id),
            Split::Unlabeled => split.unlabeled.push(e.id),
            Split::Test => split.test.push(e.id),
        }
    }
    split.validate()?;
    Ok((samples, split))
}
