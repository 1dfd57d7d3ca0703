//! Checkpoint files: a text manifest naming tensors, shapes and offsets,
//! followed by one blob of little-endian f32s in manifest order.

use super::optim::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &str = "ICRL-CKPT-1";

/// Write `store` plus free-form metadata. When `with_moments` is set, the
/// blob holds all values, then all first moments, then all second moments,
/// each run in manifest order.
pub fn write_checkpoint(
    store: &ParameterStore,
    metas: &[(String, String)],
    with_moments: bool,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{CKPT_MAGIC}")?;
    for (k, v) in metas {
        writeln!(w, "meta {k}={v}")?;
    }
    writeln!(w, "step_count={}", store.step_count())?;
    writeln!(w, "moments={}", if with_moments { 1 } else { 0 })?;
    let mut offset = 0usize;
    for (name, e) in store.entries() {
        let shape = e
            .value
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        writeln!(w, "tensor {name} {shape} {offset} {}", e.value.len())?;
        offset += e.value.len();
    }
    writeln!(w, "end")?;
    for (_, e) in store.entries() {
        write_f32s(&mut w, &e.value.data)?;
    }
    if with_moments {
        for (_, e) in store.entries() {
            write_f32s(&mut w, &e.m1.data)?;
        }
        for (_, e) in store.entries() {
            write_f32s(&mut w, &e.m2.data)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_checkpoint(path: &Path) -> Result<(ParameterStore, BTreeMap<String, String>)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut header = Vec::new();
    // read the manifest byte-wise up to the `end` line; the blob follows
    let mut line = Vec::new();
    let mut lines: Vec<String> = Vec::new();
    loop {
        line.clear();
        let mut byte = [0u8; 1];
        loop {
            match r.read_exact(&mut byte) {
                Ok(()) => {}
                Err(_) => return Err(Error::Format("truncated checkpoint manifest".into())),
            }
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        let s = String::from_utf8(line.clone())
            .map_err(|_| Error::Format("non-utf8 checkpoint manifest".into()))?;
        if s == "end" {
            break;
        }
        lines.push(s);
        header.push(());
        if header.len() > 100_000 {
            return Err(Error::Format("manifest missing end marker".into()));
        }
    }

    let mut it = lines.iter();
    match it.next() {
        Some(magic) if magic == CKPT_MAGIC => {}
        Some(other) => {
            return Err(Error::Format(format!(
                "checkpoint version mismatch: expected {CKPT_MAGIC}, found {other}"
            )))
        }
        None => return Err(Error::Format("empty checkpoint".into())),
    }

    let mut metas = BTreeMap::new();
    let mut step_count = 0u64;
    let mut with_moments = false;
    let mut tensors: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    for s in it {
        if let Some(rest) = s.strip_prefix("meta ") {
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad meta line: {s}")))?;
            metas.insert(k.to_string(), v.to_string());
        } else if let Some(rest) = s.strip_prefix("step_count=") {
            step_count = rest
                .parse()
                .map_err(|_| Error::Format(format!("bad step_count: {rest}")))?;
        } else if let Some(rest) = s.strip_prefix("moments=") {
            with_moments = rest == "1";
        } else if let Some(rest) = s.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!("bad tensor line: {s}")));
            }
            let shape: Vec<usize> = parts[1]
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::Format(format!("bad shape: {s}"))))
                .collect::<Result<_>>()?;
            let offset: usize = parts[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad offset: {s}")))?;
            let len: usize = parts[3]
                .parse()
                .map_err(|_| Error::Format(format!("bad len: {s}")))?;
            if shape.iter().product::<usize>() != len {
                return Err(Error::Format(format!("shape/len mismatch: {s}")));
            }
            tensors.push((parts[0].to_string(), shape, offset, len));
        } else {
            return Err(Error::Format(format!("unrecognized manifest line: {s}")));
        }
    }

    let total: usize = tensors.iter().map(|t| t.3).sum();
    let runs = if with_moments { 3 } else { 1 };
    let mut blob = vec![0u8; total * 4 * runs];
    r.read_exact(&mut blob)
        .map_err(|_| Error::Format("truncated checkpoint blob".into()))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint blob".into()));
    }

    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut store = ParameterStore::new();
    for (name, shape, offset, len) in &tensors {
        let value = Tensor::new(shape.clone(), floats[*offset..offset + len].to_vec());
        store.insert(name, value);
    }
    if with_moments {
        for run in 1..=2 {
            for (name, shape, offset, len) in &tensors {
                let base = total * run + offset;
                let t = Tensor::new(shape.clone(), floats[base..base + len].to_vec());
                let e = store.entry_mut(name);
                if run == 1 {
                    e.m1 = t;
                } else {
                    e.m2 = t;
                }
            }
        }
    }
    store.set_step_count(step_count);
    Ok((store, metas))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.25, -0.125]));
        s.insert("a.b", Tensor::new(vec![3], vec![0.5, 0.25, -1.0]));
        s.set_step_count(42);
        s
    }

    #[test]
    fn round_trip_with_moments() {
        let dir = std::env::temp_dir().join("icrl_ckpt_test_a");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        let mut store = sample_store();
        store.entry_mut("a.w").m1.data[2] = 9.0;
        store.entry_mut("a.b").m2.data[1] = 4.0;
        let metas = vec![("component".to_string(), "vae".to_string())];
        write_checkpoint(&store, &metas, true, &path).unwrap();
        let (mut loaded, metas2) = read_checkpoint(&path).unwrap();
        assert_eq!(metas2.get("component").unwrap(), "vae");
        assert_eq!(loaded.step_count(), 42);
        assert_eq!(loaded.value("a.w").data, store.value("a.w").data);
        assert_eq!(loaded.entry_mut("a.w").m1.data[2], 9.0);
        assert_eq!(loaded.checksum(), store.checksum());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = std::env::temp_dir().join("icrl_ckpt_test_b");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ckpt");
        write_checkpoint(&sample_store(), &[], false, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_magic_is_a_version_error() {
        let dir = std::env::temp_dir().join("icrl_ckpt_test_c");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"ICRL-CKPT-9\nend\n").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version mismatch"), "{err}");
    }
}
