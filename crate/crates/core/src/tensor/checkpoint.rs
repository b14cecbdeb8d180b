//! Checkpoint files.
//!
//! Layout: a UTF-8 manifest terminated by a line `end`, followed by the raw
//! little-endian `f32` payloads of every tensor in manifest order.
//!
//! ```text
//! AIRNET-CHECKPOINT 1
//! meta seed 7
//! param enc.init.delta.0.w f32 3x64
//! param enc.init.delta.0.b f32 64
//! end
//! <payload bytes>
//! ```

use super::{ParamStore, Scalar, Tensor};
use std::io::{BufRead, Read, Write};
use thiserror::Error;

const MAGIC: &str = "AIRNET-CHECKPOINT 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match model: {0}")]
    Layout(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<StoredTensor>,
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>, CheckpointError> {
    if s == "scalar" {
        return Ok(vec![]);
    }
    s.split('x')
        .map(|p| p.parse().map_err(|_| CheckpointError::Format(format!("bad shape {s}"))))
        .collect()
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, meta: Vec<(String, String)>) -> Self {
        let tensors = store
            .entries()
            .iter()
            .map(|e| StoredTensor {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                data: e.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self { meta, tensors }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn write(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(CheckpointError::Format(format!("bad meta record {k}")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for t in &self.tensors {
            header.push_str(&format!("param {} f32 {}\n", t.name, shape_str(&t.shape)));
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for t in &self.tensors {
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<Self, CheckpointError> {
        let mut r = std::io::BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(CheckpointError::Format("missing header".into()));
        }
        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(CheckpointError::Format("manifest not terminated".into()));
            }
            let rec = line.trim_end_matches('\n');
            if rec == "end" {
                break;
            }
            let mut parts = rec.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts.next().unwrap_or_default().to_string();
                    let v = parts.next().unwrap_or_default().to_string();
                    ck.meta.push((k, v));
                }
                Some("param") => {
                    let fields: Vec<&str> = rec.split(' ').collect();
                    if fields.len() != 4 || fields[2] != "f32" {
                        return Err(CheckpointError::Format(format!("bad record: {rec}")));
                    }
                    shapes.push((fields[1].to_string(), parse_shape(fields[3])?));
                }
                _ => return Err(CheckpointError::Format(format!("bad record: {rec}"))),
            }
        }
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)
                .map_err(|_| CheckpointError::Format(format!("truncated payload for {name}")))?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.tensors.push(StoredTensor { name, shape, data });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::Format("trailing bytes after payload".into()));
        }
        Ok(ck)
    }

    /// Copies stored values into a store with identical names and shapes.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        if store.len() != self.tensors.len() {
            return Err(CheckpointError::Layout(format!(
                "{} tensors in file, {} in model",
                self.tensors.len(),
                store.len()
            )));
        }
        for (entry, t) in store.entries_mut().iter_mut().zip(&self.tensors) {
            if entry.name != t.name || entry.tensor.shape() != t.shape.as_slice() {
                return Err(CheckpointError::Layout(format!(
                    "expected {} {:?}, found {} {:?}",
                    entry.name,
                    entry.tensor.shape(),
                    t.name,
                    t.shape
                )));
            }
            entry.tensor = Tensor::new(
                t.shape.clone(),
                t.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
            )
            .map_err(|e| CheckpointError::Layout(e.to_string()))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::read(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-8, -7.0]).unwrap(), true);
        s.add("a.rm", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(), false);
        s.add("s", Tensor::scalar(4.0), true);
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = store();
        let ck = Checkpoint::from_store(&s, vec![("seed".into(), "7".into())]);
        let mut bytes = Vec::new();
        ck.write(&mut bytes).unwrap();
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("seed"), Some("7"));
        let mut t = store();
        t.get_mut(crate::tensor::ParamId(0)).data_mut()[0] = 99.0;
        back.load_into(&mut t).unwrap();
        assert_eq!(t.get(crate::tensor::ParamId(0)), s.get(crate::tensor::ParamId(0)));
    }

    #[test]
    fn manifest_is_text_then_le_payload() {
        let ck = Checkpoint::from_store(&store(), vec![]);
        let mut bytes = Vec::new();
        ck.write(&mut bytes).unwrap();
        let text = "AIRNET-CHECKPOINT 1\nparam a.w f32 2x3\nparam a.rm f32 3\nparam s f32 scalar\nend\n";
        assert!(bytes.starts_with(text.as_bytes()));
        let payload = &bytes[text.len()..];
        assert_eq!(payload.len(), 10 * 4);
        assert_eq!(&payload[4..8], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn truncated_or_mismatched_files_fail() {
        let ck = Checkpoint::from_store(&store(), vec![]);
        let mut bytes = Vec::new();
        ck.write(&mut bytes).unwrap();
        assert!(Checkpoint::read(&bytes[..bytes.len() - 1]).is_err());
        let mut other = ParamStore::<f32>::new();
        other.add("x", Tensor::zeros(vec![1]), true);
        assert!(ck.load_into(&mut other).is_err());
    }
}
