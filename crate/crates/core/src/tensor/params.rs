use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const PARAMS_HEADER: &str = "DGDF-PARAMS v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Writes the versioned checkpoint: header line, then little-endian
    /// `(name, shape, values)` records.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(PARAMS_HEADER.as_bytes())?;
        out.write_all(b"\n")?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint as a fresh set.
    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut header = vec![0u8; PARAMS_HEADER.len() + 1];
        input.read_exact(&mut header)?;
        if &header[..PARAMS_HEADER.len()] != PARAMS_HEADER.as_bytes()
            || header[PARAMS_HEADER.len()] != b'\n'
        {
            return Err(Error::Format("bad parameter checkpoint header".into()));
        }
        let count = read_u32(&mut input)? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut input)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let ndim = read_u32(&mut input)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut input)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                input.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            set.add(name, Tensor::new(shape, data)?);
        }
        Ok(set)
    }

    /// Loads values into an existing layout, rejecting any name or shape
    /// mismatch.
    pub fn load_into<R: Read>(&mut self, input: R) -> Result<()> {
        let loaded = ParamSet::load(input)?;
        if loaded.names != self.names {
            return Err(Error::Format(format!(
                "checkpoint parameters {:?} do not match model parameters {:?}",
                loaded.names, self.names
            )));
        }
        for (i, (mine, theirs)) in self.tensors.iter().zip(&loaded.tensors).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?} in checkpoint, model expects {:?}",
                    self.names[i],
                    theirs.shape(),
                    mine.shape()
                )));
            }
        }
        self.tensors = loaded.tensors;
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Dense gradient accumulator laid out like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn clear(&mut self) {
        self.grads.iter_mut().flatten().for_each(|g| *g = 0.0);
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.as_slice()))
    }
}
