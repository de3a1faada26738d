//! Named parameter storage and the binary weights file.
//!
//! Weights file layout (little-endian):
//!
//! ```text
//! magic "DSV2" | version u32 | tensor count u32
//! per tensor: name length u16 | UTF-8 name | 4 × u32 dims | n·c·h·w × f32
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"DSV2";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Persistent state that is not optimized, e.g. running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, tensor });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            if e.kind == ParamKind::Trainable {
                e.tensor.zero_grad();
            }
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Blend a batch statistic into a running buffer:
    /// `running = momentum · running + (1 − momentum) · batch`.
    pub fn blend_buffer(&mut self, id: ParamId, batch: &[f64], momentum: f64) {
        let t = &mut self.entries[id.0].tensor;
        for (r, &b) in t.data_mut().iter_mut().zip(batch) {
            *r = T::from_f64_lossy(momentum * r.as_f64() + (1.0 - momentum) * b);
        }
    }

    pub fn write_weights<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_u32::<LittleEndian>(WEIGHTS_VERSION)?;
        out.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.write_u16::<LittleEndian>(name.len() as u16)?;
            out.write_all(name)?;
            for d in e.tensor.shape().dims() {
                out.write_u32::<LittleEndian>(d as u32)?;
            }
            for v in e.tensor.data() {
                out.write_f32::<LittleEndian>(v.as_f64() as f32)?;
            }
        }
        out.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_weights(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    /// Replace values with those from a weights file. Every parameter must
    /// be present with a matching shape and the file may not carry extras.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let tensors = read_weights(BufReader::new(file), &path.display().to_string())?;
        self.assign(tensors, &path.display().to_string())
    }

    pub fn assign(&mut self, tensors: Vec<(String, Tensor<f32>)>, context: &str) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::format(
                context,
                format!("expected {} tensors, found {}", self.entries.len(), tensors.len()),
            ));
        }
        for (name, t) in tensors {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::format(context, format!("unknown tensor {name}")))?;
            let entry = &mut self.entries[id.0];
            if entry.tensor.shape() != t.shape() {
                return Err(Error::format(
                    context,
                    format!("tensor {name}: shape {} != expected {}", t.shape(), entry.tensor.shape()),
                ));
            }
            entry.tensor = t.cast();
        }
        Ok(())
    }

    /// Serialized size of the weights file in bytes.
    pub fn serialized_size(&self) -> usize {
        12 + self
            .entries
            .iter()
            .map(|e| 2 + e.name.len() + 16 + 4 * e.tensor.len())
            .sum::<usize>()
    }
}

pub fn read_weights<R: Read>(mut input: R, context: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let io = |e: std::io::Error| Error::format(context, e.to_string());
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::format(context, "bad magic, not a DSV2 weights file"));
    }
    let version = input.read_u32::<LittleEndian>().map_err(io)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::format(context, format!("unsupported weights version {version}")));
    }
    let count = input.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = input.read_u16::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| Error::format(context, e.to_string()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = input.read_u32::<LittleEndian>().map_err(io)? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut data = vec![0f32; shape.numel()];
        input.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing).map_err(io)? != 0 {
        return Err(Error::format(context, "trailing bytes after last tensor"));
    }
    Ok(tensors)
}
