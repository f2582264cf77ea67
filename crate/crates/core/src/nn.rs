//! Named parameters and the small layer helpers shared by encoder and decoder.

use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::{Graph, Result, Scalar, Tensor, Var};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-b, b)`.
    Uniform(f64),
    Zeros,
}

/// Shape and initializer of one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameters of a linear map `[fan_in] -> [fan_out]`, uniform in `±1/sqrt(fan_in)`.
pub fn linear_specs(prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Vec<ParamSpec> {
    let b = 1.0 / (fan_in as f64).sqrt();
    let mut v = vec![ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::Uniform(b),
    }];
    if bias {
        v.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![fan_out],
            init: Init::Uniform(b),
        });
    }
    v
}

pub fn conv3x3_specs(prefix: &str, cin: usize, cout: usize) -> Vec<ParamSpec> {
    let b = 1.0 / ((9 * cin) as f64).sqrt();
    vec![
        ParamSpec {
            name: format!("{prefix}.weight"),
            shape: vec![3, 3, cin, cout],
            init: Init::Uniform(b),
        },
        ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![cout],
            init: Init::Uniform(b),
        },
    ]
}

/// Named tensors of one model, kept in name order.
#[derive(Clone, PartialEq, Debug)]
pub struct ParamStore<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter in `specs` order from `rng`.
    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut tensors = BTreeMap::new();
        for s in specs {
            let n = s.numel();
            let data: Vec<T> = match s.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Uniform(b) => (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-b..=b))).collect(),
            };
            let prev = tensors.insert(s.name.clone(), Tensor::new(&s.shape, data).expect("spec shape"));
            assert!(prev.is_none(), "duplicate parameter name {}", s.name);
        }
        ParamStore { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Binds a stored tensor into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> Var {
        let t = self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"));
        g.param(name, t)
    }

    /// Checks that the store holds exactly `specs`, with matching shapes.
    pub fn matches(&self, specs: &[ParamSpec]) -> std::result::Result<(), String> {
        if specs.len() != self.tensors.len() {
            return Err(format!("expected {} parameters, found {}", specs.len(), self.tensors.len()));
        }
        for s in specs {
            match self.tensors.get(&s.name) {
                None => return Err(format!("missing parameter {}", s.name)),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(format!("{}: shape {:?}, expected {:?}", s.name, t.shape(), s.shape))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// `x · W + b` with parameters `<prefix>.weight` and, if present, `<prefix>.bias`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = store.bind(g, &format!("{prefix}.weight"));
    let y = g.matmul(x, w)?;
    let bias = format!("{prefix}.bias");
    if store.get(&bias).is_some() {
        let b = store.bind(g, &bias);
        g.add(y, b)
    } else {
        Ok(y)
    }
}

pub fn conv3x3<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = store.bind(g, &format!("{prefix}.weight"));
    let b = store.bind(g, &format!("{prefix}.bias"));
    g.conv2d(x, w, b)
}
