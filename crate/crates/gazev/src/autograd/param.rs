use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

struct ParamData {
    id: u64,
    name: String,
    shape: Vec<usize>,
    value: Vec<f32>,
}

/// A trainable value. Forward passes take a snapshot leaf; the optimizer
/// mutates the stored value in place between steps.
#[derive(Clone)]
pub struct Param {
    inner: Rc<RefCell<ParamData>>,
}

impl Param {
    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tape leaf carrying the current value.
    pub fn leaf(&self) -> Tensor {
        let d = self.inner.borrow();
        Tensor::leaf_for_param(d.id, d.value.clone(), d.shape.clone())
    }

    pub fn value(&self) -> Vec<f32> {
        self.inner.borrow().value.clone()
    }

    pub fn set_value(&self, value: Vec<f32>) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(value.len(), d.value.len(), "param {}: size mismatch", d.name);
        d.value = value;
    }

    pub fn update(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.inner.borrow_mut().value);
    }

    /// Sum of squares of the current value (used by update-partition audits).
    pub fn sq_norm(&self) -> f64 {
        self.inner
            .borrow()
            .value
            .iter()
            .map(|v| (*v as f64) * (*v as f64))
            .sum()
    }
}

/// Weight initializers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, sqrt(2 / fan_in)) - used for conv and linear weights.
    HeNormal { fan_in: usize },
    /// Normal(0, std).
    Normal { std: f32 },
}

impl Init {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeNormal { fan_in } => {
                let std = (2.0 / *fan_in as f32).sqrt();
                (0..n).map(|_| gaussian(rng) * std).collect()
            }
            Init::Normal { std } => (0..n).map(|_| gaussian(rng) * std).collect(),
        }
    }
}

/// Box-Muller standard normal; two uniform draws per sample keeps the RNG
/// word consumption fixed, which matters for resumable determinism.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Ordered collection of parameters for one model; insertion order is the
/// canonical iteration order for optimizers and checkpoints.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    next_id: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Param {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n: usize = shape.iter().product();
        self.next_id += 1;
        let p = Param {
            inner: Rc::new(RefCell::new(ParamData {
                id: self.next_id,
                name: name.to_string(),
                shape: shape.to_vec(),
                value: init.sample(n, rng),
            })),
        };
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn with_prefix(&self, prefix: &str) -> Vec<Param> {
        self.params
            .iter()
            .filter(|p| p.name().starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}
