use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the optimizer updates a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Dense,
    /// Embedding table updated row by row (sparse Adam).
    SparseRows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named, ordered collection of learned tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Gradient of one parameter. `touched` lists the rows written by sparse
/// lookups when the parameter was only reached through them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub values: Vec<T>,
    pub touched: Option<Vec<usize>>,
}

/// Gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<T> {
    pub(crate) params: Vec<Option<ParamGrad<T>>>,
    pub(crate) leaves: Vec<(usize, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&ParamGrad<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut ParamGrad<T>> {
        self.params.get_mut(id.0).and_then(Option::as_mut)
    }

    /// Gradient of an input leaf created with `Graph::leaf(.., true)`.
    pub fn leaf(&self, var: super::Var) -> Option<&[T]> {
        self.leaves
            .iter()
            .find(|(i, _)| *i == var.0)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (ParamId, &ParamGrad<T>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamGrad<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    pub(crate) fn all_values_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.params
            .iter_mut()
            .filter_map(|g| g.as_mut().map(|g| &mut g.values))
            .chain(self.leaves.iter_mut().map(|(_, g)| g))
    }

    pub(crate) fn all_values(&self) -> impl Iterator<Item = &Vec<T>> {
        self.params
            .iter()
            .filter_map(|g| g.as_ref().map(|g| &g.values))
            .chain(self.leaves.iter().map(|(_, g)| g))
    }
}
