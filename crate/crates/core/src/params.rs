//! Named parameter storage shared by every layer, the optimizer and the
//! checkpoint format.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    tensors: Vec<ParamTensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, trainable: bool, rng: &mut impl Rng) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![S::zero(); len],
            Init::Ones => vec![S::one(); len],
            Init::Normal(std) => (0..len)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    S::c(z * std)
                })
                .collect(),
        };
        self.tensors.push(ParamTensor { name, shape: shape.to_vec(), data, trainable });
        ParamId(self.tensors.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[S] {
        &self.tensors[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor<S> {
        &self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[ParamTensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<S>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.data.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| T::c(v.f64())).collect(),
                    trainable: t.trainable,
                })
                .collect(),
        }
    }
}

/// Gradient buffers laid out exactly like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S> {
    data: Vec<Vec<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Grads { data: store.tensors().iter().map(|t| vec![S::zero(); t.data.len()]).collect() }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[S] {
        &self.data[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.data[id.0]
    }

    pub fn by_index(&self, i: usize) -> &[S] {
        &self.data[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().flatten().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }
}
