use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::Real;

/// A named weight buffer with its accumulated gradient.
///
/// Non-trainable params (batch-norm running statistics) are persisted in checkpoints
/// but skipped by the optimizer and by gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self { value, grad, shape: shape.to_vec(), trainable: true }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self::new(shape, vec![v; shape.iter().product()])
    }

    pub fn buffer(shape: &[usize], v: T) -> Self {
        let mut p = Self::filled(shape, v);
        p.trainable = false;
        p
    }

    /// Uniform He-style initialisation, `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`.
    pub fn kaiming_uniform(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        Self::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameter traversal in a fixed, deterministic order.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}
