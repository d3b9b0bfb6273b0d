//! Per-slide bag files and the slide label table.
//!
//! Bag file, integers little-endian:
//!
//! ```text
//! magic      4 bytes  "SSMB"
//! version    u16      1
//! reserved   u16      0
//! embed_dim  u32
//! n_tiles    u32
//! slide id   u16 length + UTF-8
//! coords     n_tiles x (u32 row, u32 col)
//! embedding  n_tiles x embed_dim f32, row-major
//! ```
//!
//! The label table is CSV with a `slide_id` column and one column per
//! task; an empty cell is a missing label.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::checkpoint::Reader;
use crate::mil::{Bag, TaskKind, TaskSpec, Target};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SSMB";
pub const VERSION: u16 = 1;
pub const EXTENSION: &str = "bag";

pub fn to_bytes(bag: &Bag) -> Result<Vec<u8>> {
    bag.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    let d = u32::try_from(bag.embed_dim()).map_err(|_| Error::Invalid("embed_dim exceeds u32".into()))?;
    let n = u32::try_from(bag.n_tiles()).map_err(|_| Error::Invalid("n_tiles exceeds u32".into()))?;
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    let id = bag.slide_id.as_bytes();
    let idlen = u16::try_from(id.len()).map_err(|_| Error::Invalid("slide id too long".into()))?;
    out.extend_from_slice(&idlen.to_le_bytes());
    out.extend_from_slice(id);
    for &(r, c) in &bag.coords {
        out.extend_from_slice(&r.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
    }
    for &v in bag.embeddings.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Decodes a bag without labels.
pub fn from_bytes(bytes: &[u8]) -> Result<Bag> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("bag", "bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format("bag", format!("unsupported version {version}")));
    }
    r.take(2)?;
    let d = r.u32()? as usize;
    let n = r.u32()? as usize;
    let idlen = r.u16()? as usize;
    let id = std::str::from_utf8(r.take(idlen)?)
        .map_err(|_| Error::format("bag", "slide id is not UTF-8"))?
        .to_string();
    let coords = (0..n).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<Vec<_>>>()?;
    let size = n.checked_mul(d).and_then(|x| x.checked_mul(4)).ok_or_else(|| Error::format("bag", "size overflow"))?;
    let data: Vec<f32> = r.take(size)?.chunks_exact(4).map(f32::read_le).collect();
    if r.pos != bytes.len() {
        return Err(Error::format("bag", format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let emb = Tensor::new(vec![n, d], data).map_err(|e| Error::format("bag", e.to_string()))?;
    Bag::new(id, emb, coords)
}

pub fn save(path: &Path, bag: &Bag) -> Result<()> {
    fs::write(path, to_bytes(bag)?).map_err(|e| Error::file(path, e))
}

pub fn load(path: &Path) -> Result<Bag> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::file(path, e))
}

/// Parses one label cell for `task`; empty means missing.
pub fn parse_target(task: &TaskSpec, cell: &str) -> Result<Option<Target>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let bad = || Error::Invalid(format!("bad label `{cell}` for task `{}`", task.name));
    Ok(Some(match task.kind {
        TaskKind::Classification => Target::Class(cell.parse().map_err(|_| bad())?),
        TaskKind::Regression => Target::Value(cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad)?),
    }))
}

/// Slide id to labels. Columns not naming a task are an error.
pub fn read_labels(path: &Path, tasks: &[TaskSpec]) -> Result<Vec<(String, BTreeMap<String, Target>)>> {
    let err = |e: csv::Error| Error::file(path, e);
    let mut rd = csv::Reader::from_path(path).map_err(err)?;
    let header = rd.headers().map_err(err)?.clone();
    if header.get(0) != Some("slide_id") {
        return Err(Error::file(path, "first column must be `slide_id`"));
    }
    let cols = header
        .iter()
        .skip(1)
        .map(|h| {
            tasks
                .iter()
                .find(|t| t.name == h)
                .ok_or_else(|| Error::file(path, format!("column `{h}` is not a configured task")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(err)?;
        let id = row.get(0).unwrap_or_default().to_string();
        let mut labels = BTreeMap::new();
        for (task, cell) in cols.iter().zip(row.iter().skip(1)) {
            if let Some(t) = parse_target(task, cell).map_err(|e| Error::file(path, e))? {
                labels.insert(task.name.clone(), t);
            }
        }
        out.push((id, labels));
    }
    Ok(out)
}

/// Writes a label table with one column per task.
pub fn write_labels(path: &Path, tasks: &[TaskSpec], bags: &[Bag]) -> Result<()> {
    let err = |e: csv::Error| Error::file(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["slide_id".to_string()];
    header.extend(tasks.iter().map(|t| t.name.clone()));
    w.write_record(&header).map_err(err)?;
    for b in bags {
        let mut row = vec![b.slide_id.clone()];
        row.extend(tasks.iter().map(|t| match b.labels.get(&t.name) {
            None => String::new(),
            Some(Target::Class(c)) => c.to_string(),
            Some(Target::Value(v)) => v.to_string(),
        }));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

/// Loads `<dir>/<slide_id>.bag` for every row of the label table.
pub fn load_labelled(dir: &Path, labels: &Path, tasks: &[TaskSpec]) -> Result<Vec<Bag>> {
    read_labels(labels, tasks)?
        .into_iter()
        .map(|(id, l)| {
            let path = dir.join(format!("{id}.{EXTENSION}"));
            let mut bag = load(&path)?;
            if bag.slide_id != id {
                return Err(Error::file(&path, format!("holds slide `{}`, expected `{id}`", bag.slide_id)));
            }
            bag.labels = l;
            Ok(bag)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let bag = Bag::new("slide-1", Tensor::from_fn(&[3, 5], |i| i as f32 / 7.0), vec![(2, 0), (0, 1), (9, 9)]).unwrap();
        assert_eq!(from_bytes(&to_bytes(&bag).unwrap()).unwrap(), bag);
    }

    #[test]
    fn label_cells() {
        let c = TaskSpec::classification("grade", 6);
        let r = TaskSpec::regression("os");
        assert_eq!(parse_target(&c, " 3 ").unwrap(), Some(Target::Class(3)));
        assert_eq!(parse_target(&c, "").unwrap(), None);
        assert!(parse_target(&c, "2.5").is_err());
        assert_eq!(parse_target(&r, "12.5").unwrap(), Some(Target::Value(12.5)));
        assert!(parse_target(&r, "nan").is_err());
    }
}
