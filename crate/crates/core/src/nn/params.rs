use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Uniform fan-in initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(name, Mat { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self
                .params
                .iter()
                .map(|p| Mat::zeros(p.value.rows, p.value.cols))
                .collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        for p in &mut self.params {
            p.value.data.iter_mut().for_each(|x| *x = v);
        }
    }

    /// Rounds every parameter to `f32`, the checkpoint storage precision.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            p.value.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// Copies values from `named` into the matching slots. Every parameter must
    /// be present with its exact shape.
    pub fn load_named(&mut self, named: BTreeMap<String, Mat>) -> Result<()> {
        let mut named = named;
        for p in &mut self.params {
            let m = named
                .remove(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if !m.same_shape(&p.value) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {}x{}, expected {}x{}",
                    p.name, m.rows, m.cols, p.value.rows, p.value.cols
                )));
            }
            p.value = m;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub(crate) data: Vec<Mat>,
}

impl Grads {
    #[inline]
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.data[id.0]
    }

    #[inline]
    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.data[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in &mut self.data {
            m.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|m| m.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flat_map(|m| m.data.iter()).all(|v| v.is_finite())
    }
}
