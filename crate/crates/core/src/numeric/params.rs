//! Named parameter storage and its binding onto a [`Tape`].
//!
//! File layout: an 8-byte little-endian header length, a JSON header listing
//! `{name, shape}` per tensor, then all values as little-endian `f64` in
//! header order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: [usize; 2],
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if n.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| HeaderEntry {
                    name: n.clone(),
                    shape: [t.rows(), t.cols()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.tensors {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::InvalidConfig("parameter header too large".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut out = Params::new();
        for e in header.tensors {
            let n = e.shape[0] * e.shape[1];
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if out.index.contains_key(&e.name) {
                return Err(Error::InvalidConfig(format!("duplicate parameter {}", e.name)));
            }
            out.add(e.name, Tensor::new(e.shape[0], e.shape[1], data)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Copies values from `other` for every name present in both with equal shape.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &Params) -> usize {
        let mut n = 0;
        for (name, &i) in &self.index {
            if let Some(&j) = other.index.get(name)
                && other.tensors[j].shape() == self.tensors[i].shape() {
                    self.tensors[i] = other.tensors[j].clone();
                    n += 1;
                }
        }
        n
    }
}

/// Parameters bound to tape variables for one forward pass.
pub struct Session<'t> {
    tape: &'t Tape,
    vars: Vec<Var>,
}

impl<'t> Session<'t> {
    /// Binds every parameter as a differentiable leaf when `trainable`,
    /// otherwise as a constant.
    pub fn new(tape: &'t Tape, params: &Params, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self { tape, vars }
    }

    /// Session over variables already on the tape, one per parameter in order.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var>) -> Self {
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient per parameter, zeros for parameters that did not contribute.
    pub fn param_grads(&self, grads: &Gradients, params: &Params) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&params.tensors)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let mut p = Params::new();
        p.add("a.w", Tensor::from_rows(&[[1.0, -2.5], [3.25, 1e-300]]).unwrap());
        p.add("b", Tensor::row(&[f64::MIN_POSITIVE, 7.0, -0.0]));
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = Params::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q.get(q.id("a.w").unwrap()), p.get(p.id("a.w").unwrap()));
        assert_eq!(q.get(q.id("b").unwrap()), p.get(p.id("b").unwrap()));
        assert!(Params::read_from(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn session_gradients_align_with_params() {
        let mut p = Params::new();
        let a = p.add("a", Tensor::row(&[1.0, 2.0]));
        let _unused = p.add("b", Tensor::row(&[5.0]));
        let tape = Tape::new();
        let s = Session::new(&tape, &p, true);
        let y = tape.sum(tape.square(s.var(a)));
        let g = tape.backward(y).unwrap();
        let gs = s.param_grads(&g, &p);
        assert_eq!(gs[0].data(), &[2.0, 4.0]);
        assert_eq!(gs[1].data(), &[0.0]);
    }
}
