//! Flat binary export/import of generated datasets.
//!
//! Layout (all little-endian):
//!   magic  b"SMDG"            4 bytes
//!   M, C, K                   u32 each
//!   dims[M]                   u32 each
//!   per domain k in 0..K:
//!     n_l, n_u                u32 each
//!     labeled block:   n_l * (id u64, sum(dims) f64 values, label i32)
//!     unlabeled block: n_u * (id u64, sum(dims) f64 values, hidden i32)
//!
//! A JSON sidecar at `<path>.json` echoes the TaskSpec.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, DomainDataset, Sample, TaskSpec};

const MAGIC: &[u8; 4] = b"SMDG";

pub fn export_datasets(
    path: &Path,
    spec: &TaskSpec,
    datasets: &[DomainDataset],
) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for v in [spec.num_modalities, spec.num_classes, spec.num_domains] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for &d in &spec.input_dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for ds in datasets {
        w.write_all(&(ds.labeled.len() as u32).to_le_bytes())?;
        w.write_all(&(ds.unlabeled.len() as u32).to_le_bytes())?;
        for (s, y) in &ds.labeled {
            write_sample(&mut w, s, *y as i32)?;
        }
        for (s, y) in ds.unlabeled.iter().zip(&ds.hidden_labels) {
            write_sample(&mut w, s, *y as i32)?;
        }
    }
    w.flush()?;

    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(sidecar, json)?;
    Ok(())
}

pub fn import_datasets(path: &Path) -> Result<(TaskSpec, Vec<DomainDataset>), DataError> {
    let spec: TaskSpec = serde_json::from_str(
        &std::fs::read_to_string(sidecar_path(path))?,
    )
    .map_err(|e| DataError::Corrupt(format!("sidecar: {e}")))?;

    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::Corrupt("bad magic".into()));
    }
    let m = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    if m != spec.num_modalities || c != spec.num_classes || k != spec.num_domains {
        return Err(DataError::Corrupt("header disagrees with sidecar".into()));
    }
    let dims: Vec<usize> = (0..m)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<_, _>>()?;
    if dims != spec.input_dims {
        return Err(DataError::Corrupt("dims disagree with sidecar".into()));
    }

    let mut datasets = Vec::with_capacity(k);
    for domain in 0..k {
        let n_l = read_u32(&mut r)? as usize;
        let n_u = read_u32(&mut r)? as usize;
        let mut labeled = Vec::with_capacity(n_l);
        for _ in 0..n_l {
            let (s, y) = read_sample(&mut r, domain, &dims)?;
            labeled.push((s, y));
        }
        let mut unlabeled = Vec::with_capacity(n_u);
        let mut hidden = Vec::with_capacity(n_u);
        for _ in 0..n_u {
            let (s, y) = read_sample(&mut r, domain, &dims)?;
            unlabeled.push(s);
            hidden.push(y);
        }
        datasets.push(DomainDataset::from_parts(domain, labeled, unlabeled, hidden));
    }
    Ok((spec, datasets))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

fn write_sample<W: Write>(w: &mut W, s: &Sample, label: i32) -> std::io::Result<()> {
    w.write_all(&s.id.to_le_bytes())?;
    for modality in &s.inputs {
        for &v in modality {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&label.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_sample<R: Read>(
    r: &mut R,
    domain: usize,
    dims: &[usize],
) -> Result<(Sample, usize), DataError> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let id = u64::from_le_bytes(b8);
    let mut inputs = Vec::with_capacity(dims.len());
    for &d in dims {
        let mut v = Vec::with_capacity(d);
        for _ in 0..d {
            r.read_exact(&mut b8)?;
            v.push(f64::from_le_bytes(b8));
        }
        inputs.push(v);
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let label = i32::from_le_bytes(b4);
    if label < 0 {
        return Err(DataError::Corrupt(format!("negative label {label}")));
    }
    Ok((
        Sample {
            id,
            domain,
            inputs,
        },
        label as usize,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_task, sample_split, LabelBudget, TaskSpec};

    #[test]
    fn export_import_roundtrip() {
        let spec = TaskSpec::default();
        let task = make_task(&spec).unwrap();
        let ds = sample_split(&task, LabelBudget::Count(2), 21, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        export_datasets(&path, &spec, &ds).unwrap();
        let (spec2, ds2) = import_datasets(&path).unwrap();
        assert_eq!(spec2.num_classes, spec.num_classes);
        assert_eq!(ds.len(), ds2.len());
        for (a, b) in ds.iter().zip(&ds2) {
            assert_eq!(a.labeled, b.labeled);
            assert_eq!(a.unlabeled, b.unlabeled);
            assert_eq!(a.hidden_labels_for_metrics(), b.hidden_labels_for_metrics());
        }
    }
}
