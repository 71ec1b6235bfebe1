//! Named parameter tensors: declaration, seeded initialization, binding onto
//! a tape and gradient collection.
//!
//! Keys are dotted paths such as `c01.backbone.enc1.0.attn.qkv.w`; the first
//! segment is `cNN` for per-cascade components and `shared` otherwise.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::derive_seed;
use crate::{Error, Float, Gradients, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    /// The usual `1 / sqrt(fan_in)` bound.
    pub fn fan_in(fan_in: usize) -> Init {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub key: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter declarations.
#[derive(Clone, Debug, Default)]
pub struct Specs(pub Vec<ParamSpec>);

impl Specs {
    pub fn add(&mut self, key: impl Into<String>, shape: &[usize], init: Init) {
        self.0.push(ParamSpec { key: key.into(), shape: shape.to_vec(), init });
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamSpec> {
        self.0.iter()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

/// Parameter values keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    /// Draws every declared tensor from its own stream seeded by `(seed, key)`,
    /// so adding or removing one parameter leaves the others unchanged.
    pub fn init(specs: &Specs, seed: u64) -> Result<Self> {
        let mut map = BTreeMap::new();
        for s in specs.iter() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &s.key));
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Const(v) => Tensor::full(&s.shape, T::c(v)),
                Init::Uniform(b) => Tensor::from_fn(&s.shape, |_| T::c(rng.random_range(-b..=b))),
            };
            if map.insert(s.key.clone(), t).is_some() {
                return Err(Error::Param { key: s.key.clone(), detail: "declared twice".into() });
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, key: &str) -> Result<&Tensor<T>> {
        self.map.get(key).ok_or_else(|| Error::Param { key: key.into(), detail: "missing".into() })
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(key).ok_or_else(|| Error::Param { key: key.into(), detail: "missing".into() })
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor<T>) -> Option<Tensor<T>> {
        self.map.insert(key.into(), value)
    }

    pub fn remove(&mut self, key: &str) -> Option<Tensor<T>> {
        self.map.remove(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Total elements of keys starting with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.map.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Checks that keys and shapes match `specs` exactly, naming the first
    /// offending key in sorted order.
    pub fn check(&self, specs: &Specs) -> Result<()> {
        let want: BTreeMap<&str, &[usize]> = specs.iter().map(|s| (s.key.as_str(), s.shape.as_slice())).collect();
        let mut keys: Vec<&str> = want.keys().copied().chain(self.map.keys().map(|k| k.as_str())).collect();
        keys.sort_unstable();
        keys.dedup();
        for k in keys {
            match (want.get(k), self.map.get(k)) {
                (Some(s), Some(t)) if t.shape() == *s => {}
                (Some(s), Some(t)) => {
                    return Err(Error::Param { key: k.into(), detail: format!("shape {:?}, expected {s:?}", t.shape()) })
                }
                (Some(_), None) => return Err(Error::Param { key: k.into(), detail: "missing".into() }),
                (None, _) => return Err(Error::Param { key: k.into(), detail: "not part of this model".into() }),
            }
        }
        Ok(())
    }
}

/// Parameters recorded on a tape, as leaves (trainable) or constants.
pub struct Bound<'t, T: Float> {
    tape: &'t Tape<T>,
    vars: BTreeMap<String, Var<'t, T>>,
    drop_rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'t, T: Float> Bound<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &ParamStore<T>, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, v)| (k.clone(), if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) }))
            .collect();
        Self { tape, vars, drop_rng: None }
    }

    /// Binds externally created variables, e.g. inputs of a gradient check.
    pub fn from_vars(tape: &'t Tape<T>, vars: impl IntoIterator<Item = (String, Var<'t, T>)>) -> Self {
        Self { tape, vars: vars.into_iter().collect(), drop_rng: None }
    }

    /// Enables stochastic residual-branch dropping for this forward pass.
    pub fn with_drop_path(mut self, seed: u64) -> Self {
        self.drop_rng = Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    /// Scale for a residual branch dropped with probability `rate`: `None`
    /// when dropped, `1 / (1 - rate)` when kept, and 1 outside training.
    pub fn branch_scale(&self, rate: f64) -> Option<T> {
        match &self.drop_rng {
            Some(rng) if rate > 0.0 => (rng.borrow_mut().random::<f64>() >= rate).then(|| T::c(1.0 / (1.0 - rate))),
            _ => Some(T::one()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, key: &str) -> Result<Var<'t, T>> {
        self.vars.get(key).copied().ok_or_else(|| Error::Param { key: key.into(), detail: "not bound".into() })
    }

    pub fn has(&self, key: &str) -> bool {
        self.vars.contains_key(key)
    }

    /// Gradients of every bound parameter that took part in the graph.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g))).collect()
    }
}

/// Replaces every parameter with small random values; used to probe
/// gradient flow through layers that start at zero.
pub fn perturb<T: Float>(store: &mut ParamStore<T>, scale: f64, seed: u64) {
    for (k, t) in store.iter_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k));
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += T::c(scale * z);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Specs {
        let mut s = Specs::default();
        s.add("a.w", &[2, 3], Init::fan_in(3));
        s.add("a.b", &[2], Init::Zeros);
        s.add("t", &[1], Init::Const(1.0));
        s
    }

    #[test]
    fn per_key_streams_are_independent() {
        let a = ParamStore::<f32>::init(&specs(), 1).unwrap();
        let mut fewer = Specs::default();
        fewer.add("a.w", &[2, 3], Init::fan_in(3));
        let b = ParamStore::<f32>::init(&fewer, 1).unwrap();
        assert_eq!(a.get("a.w").unwrap(), b.get("a.w").unwrap());
        let bound = 1.0 / 3f32.sqrt();
        assert!(a.get("a.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(a.get("t").unwrap().item(), 1.0);
    }

    #[test]
    fn check_names_first_mismatch() {
        let mut a = ParamStore::<f32>::init(&specs(), 1).unwrap();
        a.insert("a.b", Tensor::zeros(&[3]));
        let err = a.check(&specs()).unwrap_err().to_string();
        assert!(err.contains("`a.b`"), "{err}");
        a.remove("a.b");
        assert!(a.check(&specs()).unwrap_err().to_string().contains("`a.b`"));
    }
}
