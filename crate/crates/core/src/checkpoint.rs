//! `s2d-ckpt` container: one JSON header line, a blank line, then little-endian
//! `f64` payloads. Offsets are relative to the first payload byte.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::train::model::{Activation, Attention, Linear, ToyModel, ATTN_NAMES};

pub const FORMAT: &str = "s2d-ckpt";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (name, _) in &tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate tensor name {name:?}")));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Every name in `wanted` that is absent, as one error.
    pub fn require(&self, wanted: &[String]) -> Result<()> {
        let missing: Vec<String> = wanted
            .iter()
            .filter(|w| self.get(w).is_none())
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingTensors(missing))
        }
    }

    pub fn header(&self) -> Header {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let e = TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                    offset,
                };
                offset += m.rows() * m.cols() * 8;
                e
            })
            .collect();
        Header {
            format: FORMAT.to_string(),
            version: VERSION,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, m)| m.data().len() * 8).sum();
        let mut out = Vec::with_capacity(header.len() + 2 + payload);
        out.extend_from_slice(&header);
        out.extend_from_slice(b"\n\n");
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |offset: usize, reason: String| Error::Checkpoint { offset, reason };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(bytes.len(), "no header line terminator".into()))?;
        let header_text = std::str::from_utf8(&bytes[..nl])
            .map_err(|e| bad(e.valid_up_to(), "header is not UTF-8".into()))?;
        let header: Header = serde_json::from_str(header_text)
            .map_err(|e| bad(byte_of(header_text, e.line(), e.column()), format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(bad(0, format!("format {:?}, expected {FORMAT:?}", header.format)));
        }
        if header.version != VERSION {
            return Err(bad(0, format!("unsupported version {}", header.version)));
        }
        if bytes.get(nl + 1) != Some(&b'\n') {
            return Err(bad(nl + 1, "expected blank line after header".into()));
        }
        let base = nl + 2;
        let payload = &bytes[base..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0usize;
        for t in &header.tensors {
            if t.rows == 0 || t.cols == 0 {
                return Err(bad(base + t.offset, format!("tensor {:?} has an empty shape", t.name)));
            }
            if t.offset != expected {
                return Err(bad(
                    base + t.offset,
                    format!("tensor {:?} offset {} does not follow the previous payload at {expected}", t.name, t.offset),
                ));
            }
            let len = t
                .rows
                .checked_mul(t.cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| bad(base + t.offset, format!("tensor {:?} is too large", t.name)))?;
            let end = t.offset + len;
            if end > payload.len() {
                return Err(bad(
                    base + payload.len(),
                    format!("tensor {:?} needs {len} bytes at offset {}, file ends early", t.name, t.offset),
                ));
            }
            let mut data = Vec::with_capacity(t.rows * t.cols);
            for (i, chunk) in payload[t.offset..end].chunks_exact(8).enumerate() {
                let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                if !v.is_finite() {
                    return Err(bad(base + t.offset + 8 * i, format!("non-finite value in {:?}", t.name)));
                }
                data.push(v);
            }
            tensors.push((t.name.clone(), Matrix::from_vec(t.rows, t.cols, data)?));
            expected = end;
        }
        if expected != payload.len() {
            return Err(bad(base + expected, "trailing bytes after last tensor".into()));
        }
        Self::new(tensors).map_err(|e| bad(0, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_model(model: &ToyModel) -> Self {
        let tensors = model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(n, p)| (n, p.clone()))
            .collect();
        Self { tensors }
    }

    /// Rebuilds a model from `fc1.weight`, `fc1.bias`, ... (and `attn.*.weight` when
    /// present). Hidden layers use `hidden`; the last layer is linear.
    pub fn to_model(&self, hidden: Activation) -> Result<ToyModel> {
        let mut n_layers = 0;
        while self.get(&format!("fc{}.weight", n_layers + 1)).is_some() {
            n_layers += 1;
        }
        if n_layers == 0 {
            return Err(Error::MissingTensors(vec!["fc1.weight".into()]));
        }
        let attn_names: Vec<String> = ATTN_NAMES.iter().map(|n| format!("{n}.weight")).collect();
        let has_attn = attn_names.iter().any(|n| self.get(n).is_some());
        let mut wanted: Vec<String> = (1..=n_layers).map(|i| format!("fc{i}.bias")).collect();
        if has_attn {
            wanted.extend(attn_names.iter().cloned());
        }
        self.require(&wanted)?;

        let layers = (1..=n_layers)
            .map(|i| {
                let w = self.get(&format!("fc{i}.weight")).expect("checked").clone();
                let b = self.get(&format!("fc{i}.bias")).expect("checked");
                if b.rows() != 1 || b.cols() != w.rows() {
                    return Err(Error::ShapeMismatch {
                        op: "checkpoint bias",
                        lhs: format!("fc{i}.bias {:?}", b.shape()),
                        rhs: format!("(1, {})", w.rows()),
                    });
                }
                let act = if i == n_layers { Activation::None } else { hidden };
                Ok(Linear::new(format!("fc{i}"), w, b.data().to_vec(), act))
            })
            .collect::<Result<Vec<_>>>()?;
        let attention = if has_attn {
            let get = |n: &str| self.get(&format!("{n}.weight")).expect("checked").clone();
            let wq = get("attn.q");
            let dim = wq.rows();
            let input = layers[0].in_dim();
            if dim == 0 || input % dim != 0 {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint attention",
                    lhs: format!("attn dim {dim}"),
                    rhs: format!("input width {input}"),
                });
            }
            Some(Attention {
                tokens: input / dim,
                dim,
                wq,
                wk: get("attn.k"),
                wv: get("attn.v"),
                wo: get("attn.o"),
            })
        } else {
            None
        };
        ToyModel::new(attention, layers)
    }
}

fn byte_of(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split('\n').take(line - 1).map(|l| l.len() + 1).sum();
    (start + column).saturating_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(vec![
            ("a".into(), Matrix::from_fn(2, 3, |i, j| (i as f64 - j as f64) / 3.0)),
            ("b".into(), Matrix::from_rows(&[vec![f64::MIN_POSITIVE, -0.0, 1e300]]).unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let bits = |c: &Checkpoint| -> Vec<u64> {
            c.tensors.iter().flat_map(|(_, m)| m.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&sample()));
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        let text = std::str::from_utf8(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).unwrap();
        assert_eq!(
            text,
            r#"{"format":"s2d-ckpt","version":1,"tensors":[{"name":"a","rows":2,"cols":3,"offset":0},{"name":"b","rows":1,"cols":3,"offset":48}]}"#
        );
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 5);
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nan_payload_reports_its_offset() {
        let mut bytes = sample().to_bytes();
        let at = bytes.len() - 8;
        bytes[at..].copy_from_slice(&f64::NAN.to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint { offset, .. }) => assert_eq!(offset, at),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_blank_line() {
        let bytes = sample().to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut broken = bytes.clone();
        broken[nl + 1] = b'x';
        match Checkpoint::from_bytes(&broken) {
            Err(Error::Checkpoint { offset, .. }) => assert_eq!(offset, nl + 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn garbage_header() {
        assert!(matches!(
            Checkpoint::from_bytes(b"{\"format\": 3}\n\n"),
            Err(Error::Checkpoint { .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(b"no newline"), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn model_round_trip() {
        let w1 = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let w2 = Matrix::from_fn(1, 3, |_, j| j as f64);
        let m = ToyModel::new(
            None,
            vec![
                Linear::new("fc1", w1, vec![0.5; 3], Activation::Gelu),
                Linear::new("fc2", w2, vec![0.0], Activation::None),
            ],
        )
        .unwrap();
        let ck = Checkpoint::from_bytes(&Checkpoint::from_model(&m).to_bytes()).unwrap();
        assert_eq!(ck.to_model(Activation::Gelu).unwrap(), m);
    }

    #[test]
    fn missing_tensors_are_listed() {
        let ck = Checkpoint::new(vec![
            ("fc1.weight".into(), Matrix::identity(2)),
            ("fc2.weight".into(), Matrix::identity(2)),
        ])
        .unwrap();
        match ck.to_model(Activation::Gelu) {
            Err(Error::MissingTensors(names)) => assert_eq!(names, vec!["fc1.bias", "fc2.bias"]),
            other => panic!("{other:?}"),
        }
    }
}
