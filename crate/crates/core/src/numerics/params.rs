use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

const FORMAT_HEADER: &str = "dialcrit-params v1";

/// Named collection of trainable tensors with insertion-ordered iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: IndexMap<String, Tensor>,
}

/// Graph leaves created for every tensor of a [`ParameterSet`], in set order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Panics on unknown names: a network asking for a parameter it did not
    /// register is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Adds the leaves of `other`; names already present are kept.
    pub fn extend(&mut self, other: Bound) {
        for (k, v) in other.vars {
            self.vars.entry(k).or_insert(v);
        }
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    /// Registers a `rows x cols` matrix initialized uniformly in
    /// `±sqrt(6 / (rows + cols))`.
    pub fn insert_scaled_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, values)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(&[rows, cols]))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Union of several sets; names must be distinct.
    pub fn merged(sets: &[&ParameterSet]) -> Result<ParameterSet> {
        let mut out = ParameterSet::new();
        for s in sets {
            for (k, t) in &s.params {
                out.insert(k.clone(), t.clone())?;
            }
        }
        Ok(out)
    }

    /// The tensors whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
        }
    }

    /// Copies every tensor into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t)))
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of every bound leaf into the tensors' gradient
    /// buffers. Parameters the loss does not reach receive zeros.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let v = bound
                .try_get(name)
                .ok_or_else(|| Error::ParameterMismatch(format!("`{name}` was not bound")))?;
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.len()])?,
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::clear_grad);
    }

    fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::ParameterMismatch(format!(
                "{} vs {} parameters",
                self.params.len(),
                other.params.len()
            )));
        }
        for (name, t) in &self.params {
            let o = other
                .params
                .get(name)
                .ok_or_else(|| Error::ParameterMismatch(format!("`{name}` missing")))?;
            if o.shape() != t.shape() {
                return Err(Error::shape("parameter", t.shape(), o.shape()));
            }
        }
        Ok(())
    }

    /// `self <- tau * source + (1 - tau) * self`.
    pub fn soft_update(&mut self, source: &ParameterSet, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!("tau must be in [0, 1], got {tau}")));
        }
        self.check_compatible(source)?;
        for (name, t) in self.params.iter_mut() {
            let src = source.params[name].values();
            if tau == 1.0 {
                t.values_mut().copy_from_slice(src);
            } else if tau > 0.0 {
                t.values_mut()
                    .iter_mut()
                    .zip(src)
                    .for_each(|(x, s)| *x = tau * s + (1.0 - tau) * *x);
            }
        }
        Ok(())
    }

    /// Overwrites the values of every parameter that also exists in `source`
    /// with a matching shape. Returns how many tensors were copied.
    pub fn copy_matching(&mut self, source: &ParameterSet, rename: impl Fn(&str) -> String) -> usize {
        let mut n = 0;
        for (name, t) in self.params.iter_mut() {
            if let Some(s) = source.params.get(&rename(name)) {
                if s.shape() == t.shape() {
                    t.values_mut().copy_from_slice(s.values());
                    n += 1;
                }
            }
        }
        n
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .params
            .iter()
            .map(|(k, t)| t.max_abs_diff(&other.params[k]))
            .fold(0.0, f64::max))
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Text serialization: a version header followed by one
    /// `name<TAB>shape<TAB>values` record per parameter in iteration order.
    /// Values use the shortest representation that round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{FORMAT_HEADER}").unwrap();
        for (name, t) in &self.params {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            write!(out, "{name}\t{}\t", shape.join(",")).unwrap();
            for (i, v) in t.values().iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let malformed = |line: usize, message: String| Error::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == FORMAT_HEADER => {}
            Some((_, h)) => return Err(malformed(1, format!("unsupported header `{h}`"))),
            None => return Err(malformed(1, "empty parameter file".into())),
        }
        let mut set = ParameterSet::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let mut fields = line.split('\t');
            let (Some(name), Some(shape), Some(values), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(malformed(lineno, "expected name, shape and values".into()));
            };
            let shape: Vec<usize> = shape
                .split(',')
                .map(|d| d.parse().map_err(|e| malformed(lineno, format!("bad shape: {e}"))))
                .collect::<Result<_>>()?;
            let values: Vec<f64> = values
                .split(' ')
                .map(|v| v.parse().map_err(|e| malformed(lineno, format!("bad value `{v}`: {e}"))))
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape, values).map_err(|e| malformed(lineno, e.to_string()))?;
            set.insert(name, t).map_err(|e| malformed(lineno, e.to_string()))?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, path)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}
