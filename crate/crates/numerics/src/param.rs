//! Named parameters, their gradient accumulators, and AdamW moment buffers.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"CTPS"
//! version u32 (= 1)
//! step    u64            optimizer step counter
//! count   u32            number of records
//! record* { name_len u32, name utf-8, rows u32, cols u32, rows*cols f64 }
//! ```
//!
//! Parameters are written under their own name; AdamW moments follow as
//! `<name>#m` and `<name>#v` records.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{NumericsError, Result};
use crate::matrix::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTPS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Matrix,
    grad: Matrix,
    m: Matrix,
    v: Matrix,
    frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
    step: u64,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    XavierUniform,
    /// Uniform in ±sqrt(6 / fan_in) scaled by `gain`; suited to ReLU stacks.
    HeUniform(f64),
    Constant(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics if the name is already taken.
    pub fn add(&mut self, name: &str, value: Matrix) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        let (r, c) = value.shape();
        self.entries.push(Entry {
            name: name.to_string(),
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            value,
            frozen: false,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn add_init(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut impl Rng) -> ParamId {
        let value = init_matrix(rows, cols, init, rng);
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].grad
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Matrix) {
        self.entries[id.0].grad.add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for e in &mut self.entries {
            e.grad.scale_in_place(s);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.iter().all(|e| e.grad.is_finite())
    }

    /// Copies values (not optimizer state) of every same-named, same-shaped
    /// parameter from `other`. Returns how many were copied.
    pub fn load_values_from(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if let Some(id) = other.id(&e.name) {
                let src = other.value(id);
                if src.shape() == e.value.shape() {
                    e.value = src.clone();
                    n += 1;
                }
            }
        }
        n
    }

    pub(crate) fn adam_parts(&mut self, id: ParamId) -> (&mut Matrix, &Matrix, &mut Matrix, &mut Matrix, bool) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad, &mut e.m, &mut e.v, e.frozen)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&((self.entries.len() * 3) as u32).to_le_bytes())?;
        for e in &self.entries {
            write_record(&mut w, &e.name, &e.value)?;
        }
        for e in &self.entries {
            write_record(&mut w, &format!("{}#m", e.name), &e.m)?;
            write_record(&mut w, &format!("{}#v", e.name), &e.v)?;
        }
        Ok(())
    }

    /// Reads records into a fresh store. Moment records are attached to
    /// their parameter; records are registered in file order.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NumericsError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut step_buf = [0u8; 8];
        r.read_exact(&mut step_buf)?;
        let step = u64::from_le_bytes(step_buf);
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        store.step = step;
        let mut moments = Vec::new();
        for _ in 0..count {
            let (name, m) = read_record(&mut r)?;
            if let Some(base) = name.strip_suffix("#m") {
                moments.push((base.to_string(), true, m));
            } else if let Some(base) = name.strip_suffix("#v") {
                moments.push((base.to_string(), false, m));
            } else {
                store.add(&name, m);
            }
        }
        for (base, is_m, m) in moments {
            let id = store
                .id(&base)
                .ok_or_else(|| NumericsError::Checkpoint(format!("moment for unknown parameter {base}")))?;
            let e = &mut store.entries[id.0];
            if m.shape() != e.value.shape() {
                return Err(NumericsError::Checkpoint(format!("moment shape mismatch for {base}")));
            }
            if is_m {
                e.m = m;
            } else {
                e.v = m;
            }
        }
        Ok(store)
    }

    /// Restores values, moments and step from a checkpoint store into this
    /// (structurally identical) store. Errors name the first missing or
    /// mis-shaped parameter.
    pub fn restore_from(&mut self, ckpt: &ParamStore) -> Result<()> {
        self.restore_prefix(ckpt, "")
    }

    /// Restores values and moments of every parameter under `prefix`, plus
    /// the step counter. Other parameters are untouched.
    pub fn restore_prefix(&mut self, ckpt: &ParamStore, prefix: &str) -> Result<()> {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            let id = ckpt
                .id(&e.name)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing parameter {}", e.name)))?;
            let src = &ckpt.entries[id.0];
            if src.value.shape() != e.value.shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    e.name,
                    src.value.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.value.clone();
            e.m = src.m.clone();
            e.v = src.v.clone();
        }
        self.step = ckpt.step;
        Ok(())
    }

    /// Copy holding only the parameters under `prefix`, with their moments
    /// and the step counter.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            let id = out.add(&e.name, e.value.clone());
            out.entries[id.0].m = e.m.clone();
            out.entries[id.0].v = e.v.clone();
        }
        out.step = self.step;
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

fn write_record<W: Write>(w: &mut W, name: &str, m: &Matrix) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_record<R: Read>(r: &mut R) -> Result<(String, Matrix)> {
    let len = read_u32(r)? as usize;
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((name, Matrix::from_vec(rows, cols, data)?))
}

pub fn init_matrix(rows: usize, cols: usize, init: Init, rng: &mut impl Rng) -> Matrix {
    // Weights are stored d_out × d_in, so fan_in = cols.
    let (fan_in, fan_out) = (cols.max(1) as f64, rows.max(1) as f64);
    match init {
        Init::Zeros => Matrix::zeros(rows, cols),
        Init::Constant(c) => Matrix::filled(rows, cols, c),
        Init::XavierUniform => {
            let a = (6.0 / (fan_in + fan_out)).sqrt();
            uniform(rows, cols, a, rng)
        }
        Init::HeUniform(gain) => {
            let a = gain * (6.0 / fan_in).sqrt();
            uniform(rows, cols, a, rng)
        }
    }
}

fn uniform(rows: usize, cols: usize, a: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}
