use std::sync::Arc;

use aslstm_tensor::{Scalar, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct Param<F> {
    pub name: String,
    pub value: Arc<Tensor<F>>,
    pub grad: Option<Tensor<F>>,
    pub trainable: bool,
}

/// Named parameter tensors with gradient slots.
///
/// Values are shared with tapes through `Arc`, so placing a parameter on a
/// tape does not copy it. Mutation goes through [`Arc::make_mut`] and
/// therefore only copies while a tape still holds the old value.
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            value: Arc::new(value),
            grad: None,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Places a parameter on a tape. Frozen parameters do not request gradients.
    pub fn var(&self, tape: &mut Tape<F>, id: ParamId) -> Var {
        let p = &self.params[id.0];
        tape.param(Arc::clone(&p.value), id.0, p.trainable)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    /// Adds the gradients of every tagged leaf on `tape` into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>) {
        for (tag, g) in tape.tagged_grads() {
            let p = &mut self.params[tag];
            if !p.trainable {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn snapshot(&self) -> Vec<Tensor<F>> {
        self.params.iter().map(|p| (*p.value).clone()).collect()
    }

    pub fn restore(&mut self, values: Vec<Tensor<F>>) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = Arc::new(v);
        }
    }
}
