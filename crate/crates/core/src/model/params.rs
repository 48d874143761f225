use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::diffcore::{Array, Grads, Scalar, Tape, Var};
use crate::error::{invalid, Result};
use crate::rng::normal;

/// Ordered collection of named trainable arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array<T>) -> ParamId {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    pub fn values(&self) -> &[Array<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array<T>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces every value from `(name, array)` pairs; names and shapes must
    /// match the existing layout.
    pub fn load<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, Array<T>)>,
    ) -> Result<()> {
        let mut seen = 0;
        for (name, arr) in entries {
            let i = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| invalid(alloc::format!("unknown parameter {}", name)))?;
            if self.values[i].shape() != arr.shape() {
                return Err(invalid(alloc::format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    name,
                    arr.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = arr;
            seen += 1;
        }
        if seen != self.values.len() {
            return Err(invalid(alloc::format!(
                "loaded {} of {} parameters",
                seen,
                self.values.len()
            )));
        }
        Ok(())
    }

    /// Registers every parameter on `tape`; constants when `frozen`.
    pub fn bind(&self, tape: &mut Tape<T>, frozen: bool) -> Result<Bound> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if frozen {
                    tape.constant(v.clone())
                } else {
                    tape.leaf(v.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    pub fn zeros_like(&self) -> Vec<Array<T>> {
        self.values
            .iter()
            .map(|v| Array::zeros(v.shape()))
            .collect()
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Adds `scale * grad` of every parameter into `acc`.
    pub fn accumulate<T: Scalar>(&self, grads: &Grads<T>, scale: T, acc: &mut [Array<T>]) {
        for (v, a) in self.vars.iter().zip(acc.iter_mut()) {
            if let Some(g) = grads.get(*v) {
                for (o, &x) in a.data_mut().iter_mut().zip(g.data()) {
                    *o += scale * x;
                }
            }
        }
    }
}

pub(crate) fn xavier<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array<T> {
    let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.gen_range(-a..a)))
        .collect();
    Array::new(&[fan_in, fan_out], data).expect("xavier shape")
}

pub(crate) fn gaussian<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Array<T> {
    let n: usize = shape.iter().product();
    Array::new(shape, (0..n).map(|_| T::of(std * normal(rng))).collect()).expect("gaussian shape")
}
