use indexmap::IndexMap;

use super::graph::{Graph, NodeGrads, Var};
use super::tensor::{Scalar, Tensor};
use super::NumericError;

/// One named parameter with its AdamW state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F: Scalar = f32> {
    pub value: Tensor<F>,
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub step: u64,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self { value, m, v, step: 0 }
    }
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Scalar = f32> {
    params: IndexMap<String, Param<F>>,
}

/// Named gradients, in the order of the store they were computed for.
pub type Gradients<F = f32> = IndexMap<String, Tensor<F>>;

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<(), NumericError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericError::DuplicateParam(name));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn insert_param(&mut self, name: impl Into<String>, p: Param<F>) -> Result<(), NumericError> {
        let name = name.into();
        if p.m.shape() != p.value.shape() || p.v.shape() != p.value.shape() {
            return Err(NumericError::ShapeMismatch {
                context: "optimizer state",
                expected: p.value.shape().to_vec(),
                found: p.m.shape().to_vec(),
            });
        }
        if self.params.contains_key(&name) {
            return Err(NumericError::DuplicateParam(name));
        }
        self.params.insert(name, p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
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

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Values converted to another precision; optimizer state is carried over.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            m: p.m.cast(),
                            v: p.v.cast(),
                            step: p.step,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, F>) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), g.param(&p.value)))
                .collect(),
        }
    }
}

/// Graph handles for the parameters of a store.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Panics on an unknown name: parameter names are fixed by the model layout.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects per-parameter gradients; unreached parameters get zeros.
    pub fn gradients<F: Scalar>(&self, store: &ParamStore<F>, grads: &mut NodeGrads<F>) -> Gradients<F> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads.take(v).unwrap_or_else(|| {
                    Tensor::zeros(store.get(k).expect("bound name exists").shape())
                });
                (k.clone(), g)
            })
            .collect()
    }
}

/// Gradient of a scalar loss built by `loss_fn` with respect to every parameter.
pub fn reverse_gradient<F, L>(params: &ParamStore<F>, loss_fn: L) -> Result<(F, Gradients<F>), NumericError>
where
    F: Scalar,
    L: for<'a> FnOnce(&mut Graph<'a, F>, &BoundParams) -> Result<Var, NumericError>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = loss_fn(&mut g, &bound)?;
    g.check()?;
    let value = g.value(loss).item();
    let mut node_grads = g.backward(loss)?;
    Ok((value, bound.gradients(params, &mut node_grads)))
}

/// Global L2 norm over a set of gradients.
pub fn global_norm<F: Scalar>(grads: &Gradients<F>) -> F {
    grads.values().map(Tensor::sum_squares).sum::<F>().sqrt()
}
