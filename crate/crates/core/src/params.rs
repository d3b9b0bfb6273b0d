//! Named parameter tensors and the per-forward binding context.
//!
//! Every module describes its weights as a list of [`ParamSpec`]s. The same
//! list drives initialization, exact parameter counting and checkpoint
//! layout, so the three can never disagree.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// `ln(1), ln(2), ..., ln(n)` along the single axis.
    LogRange,
    /// Inverse-softplus of step sizes drawn log-uniformly in `[min, max]`.
    InvSoftplus { min: f64, max: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Exact number of scalar parameters described by `specs`.
pub fn count(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

/// `prefix.name`, or `name` when the prefix is empty.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fan-in uniform bound used for weights.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn sample_init<T: Scalar, R: Rng + ?Sized>(spec: &ParamSpec, rng: &mut R) -> Tensor<T> {
    let n = spec.numel();
    let data: Vec<f64> = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform(bound) => {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::LogRange => (0..n).map(|i| ((i + 1) as f64).ln()).collect(),
        Init::InvSoftplus { min, max } => {
            let dist = Uniform::new_inclusive(min.ln(), max.ln()).expect("finite range");
            (0..n)
                .map(|_| {
                    let dt: f64 = dist.sample(rng).exp();
                    // softplus^-1(dt) = ln(exp(dt) - 1)
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect()
        }
    };
    Tensor::from_parts(spec.shape.clone(), data.into_iter().map(T::from_f64_lossy).collect())
}

/// Ordered map of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initializes every spec in order from `rng`.
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let tensors = specs
            .iter()
            .map(|s| (s.name.clone(), sample_init(s, rng)))
            .collect();
        ParamStore { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Copies every tensor whose name starts with `prefix` from `other`,
    /// checking shapes. Returns how many tensors were copied.
    pub fn load_prefix(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, src) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let dst = self.get_mut(name)?;
            if dst.shape() != src.shape() {
                return Err(Error::shape(
                    "load",
                    format!("{name}: {:?} vs checkpoint {:?}", dst.shape(), src.shape()),
                ));
            }
            *dst = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Checks that the store holds exactly the tensors described by `specs`.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.len() {
            return Err(Error::Invalid(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.len()
            )));
        }
        for s in specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::shape(
                    "load",
                    format!("{}: {:?} vs expected {:?}", s.name, t.shape(), s.shape),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds a [`ParamStore`] onto a tape for one forward pass.
///
/// In [`Mode::Train`] batch-norm layers use batch statistics and write
/// updated running statistics into the context's buffers, which the caller
/// takes back with [`Ctx::into_buffers`].
pub struct Ctx<'t, T: Scalar> {
    tape: &'t Tape<T>,
    vars: IndexMap<String, Var<'t, T>>,
    buffers: RefCell<ParamStore<T>>,
    mode: Mode,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    /// `track` decides whether parameters are gradient-receiving leaves.
    pub fn new(
        tape: &'t Tape<T>,
        params: &ParamStore<T>,
        buffers: ParamStore<T>,
        mode: Mode,
        track: bool,
    ) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if track {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Ctx {
            tape,
            vars,
            buffers: RefCell::new(buffers),
            mode,
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Rebinds parameter `name` to `var`, e.g. a probe variable in a
    /// finite-difference check.
    pub fn rebind(&mut self, name: &str, var: Var<'t, T>) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != var.shape() {
            return Err(Error::shape(
                "rebind",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), var.shape()),
            ));
        }
        *slot = var;
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Result<Tensor<T>> {
        self.buffers.borrow().get(name).cloned()
    }

    pub fn set_buffer(&self, name: &str, value: Tensor<T>) -> Result<()> {
        *self.buffers.borrow_mut().get_mut(name)? = value;
        Ok(())
    }

    pub fn into_buffers(self) -> ParamStore<T> {
        self.buffers.into_inner()
    }

    /// Collects parameter gradients by name, zeros where none flowed.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seed_deterministic() {
        let specs = vec![
            ParamSpec::new("a", &[3, 4], Init::Uniform(0.5)),
            ParamSpec::new("b", &[4], Init::InvSoftplus { min: 1e-3, max: 1e-1 }),
        ];
        let s1 = ParamStore::<f32>::init(&specs, &mut ChaCha8Rng::seed_from_u64(7));
        let s2 = ParamStore::<f32>::init(&specs, &mut ChaCha8Rng::seed_from_u64(7));
        let s3 = ParamStore::<f32>::init(&specs, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(s1, s2);
        assert_ne!(s1, s3);
        assert_eq!(count(&specs), 16);
    }

    #[test]
    fn inv_softplus_init_lands_in_range() {
        let spec = ParamSpec::new("dt", &[256], Init::InvSoftplus { min: 1e-3, max: 1e-1 });
        let t = ParamStore::<f64>::init(&[spec], &mut ChaCha8Rng::seed_from_u64(1));
        for &v in t.get("dt").unwrap().data() {
            let dt = v.exp().ln_1p();
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn log_range_init() {
        let t = ParamStore::<f64>::init(
            &[ParamSpec::new("a", &[4], Init::LogRange)],
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let a: Vec<f64> = t.get("a").unwrap().data().iter().map(|v| v.exp()).collect();
        for (i, v) in a.iter().enumerate() {
            assert!((v - (i + 1) as f64).abs() < 1e-12);
        }
    }
}
