//! Named parameter tensors for the networks, with deterministic
//! initialization and tape binding.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{GradStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered map of named parameters. Iteration order is the lexicographic
/// name order, which keeps optimizer state and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "param {name}: shape {shape:?} vs {} values", data.len());
        let prev = self.params.insert(name.clone(), Param { shape, data });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Zero every parameter whose name satisfies the predicate. Used to put
    /// residual/fusion heads into their exact-identity regime.
    pub fn zero_matching(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if pred(name) {
                p.data.iter_mut().for_each(|v| *v = 0.0);
                n += 1;
            }
        }
        n
    }

    /// Register parameters as differentiable leaves on a tape.
    pub fn bind(&self, tape: &mut Tape) -> ParamTensors {
        let map = self
            .params
            .iter()
            .map(|(name, p)| {
                let t = Tensor::from_vec(p.shape.clone(), p.data.clone());
                (name.clone(), tape.leaf(&t))
            })
            .collect();
        ParamTensors { map }
    }

    /// Constant (frozen) tensors: no gradients are recorded through them.
    pub fn bind_frozen(&self) -> ParamTensors {
        let map = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), Tensor::from_vec(p.shape.clone(), p.data.clone())))
            .collect();
        ParamTensors { map }
    }

    /// FNV-1a digest over names, shapes and value bits; bit-identical
    /// stores agree.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, p) in &self.params {
            for b in name.as_bytes() {
                eat(*b);
            }
            for &d in &p.shape {
                for b in (d as u64).to_le_bytes() {
                    eat(b);
                }
            }
            for &v in &p.data {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// Tape-bound (or frozen) tensors for one forward pass.
pub struct ParamTensors {
    map: BTreeMap<String, Tensor>,
}

impl ParamTensors {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"))
    }

    pub fn try_get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("unknown parameter {name}")))
    }

    /// Collect gradients per parameter after a backward pass; parameters
    /// the graph never reached get zero gradients.
    pub fn gradients(&self, grads: &GradStore) -> BTreeMap<String, Vec<f64>> {
        self.map
            .iter()
            .map(|(name, t)| {
                let g = grads
                    .get(t)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Register a conv layer `{name}.w` + `{name}.b`. Weights are fan-in
/// scaled uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]` (variance
/// 2/fan_in, which keeps activation scale roughly constant through deep
/// leaky-relu stacks), biases zero; `zero_init` makes the whole layer zero
/// for exact-identity residual heads.
pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    out_c: usize,
    in_c_per_group: usize,
    k: usize,
    zero_init: bool,
) {
    let fan_in = (in_c_per_group * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let numel = out_c * in_c_per_group * k * k;
    let w: Vec<f64> = if zero_init {
        vec![0.0; numel]
    } else {
        (0..numel).map(|_| rng.uniform(-bound, bound)).collect()
    };
    store.insert(format!("{name}.w"), vec![out_c, in_c_per_group, k, k], w);
    store.insert(format!("{name}.b"), vec![out_c], vec![0.0; out_c]);
}

/// Register layer-norm affine parameters `{name}.g` (ones) and `{name}.b`
/// (zeros) over `c` channels.
pub fn init_norm(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(format!("{name}.g"), vec![c], vec![1.0; c]);
    store.insert(format!("{name}.b"), vec![c], vec![0.0; c]);
}

/// Register a scalar parameter.
pub fn init_scalar(store: &mut ParamStore, name: &str, value: f64) {
    store.insert(name, vec![1], vec![value]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_value_bits() {
        let mut rng = Rng::new(1);
        let mut a = ParamStore::new();
        init_conv(&mut a, &mut rng, "layer", 4, 2, 3, false);
        let d0 = a.digest();
        assert_eq!(d0, a.clone().digest());
        a.get_mut("layer.w").unwrap().data[0] += 1e-12;
        assert_ne!(d0, a.digest());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = Rng::new(3);
        let mut s = ParamStore::new();
        init_conv(&mut s, &mut rng, "c", 8, 4, 3, false);
        let bound = (6.0f64 / (4.0 * 9.0)).sqrt();
        for &v in &s.get("c.w").unwrap().data {
            assert!(v.abs() <= bound);
        }
        assert!(s.get("c.b").unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_matching_hits_heads_only() {
        let mut rng = Rng::new(5);
        let mut s = ParamStore::new();
        init_conv(&mut s, &mut rng, "block.c1", 4, 4, 3, false);
        init_conv(&mut s, &mut rng, "block.head", 2, 4, 3, false);
        let n = s.zero_matching(|name| name.contains(".head."));
        assert_eq!(n, 2);
        assert!(s.get("block.head.w").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(s.get("block.c1.w").unwrap().data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn bind_roundtrips_values_and_collects_grads() {
        let mut rng = Rng::new(9);
        let mut s = ParamStore::new();
        init_conv(&mut s, &mut rng, "c", 2, 1, 1, false);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let w = p.get("c.w");
        assert_eq!(w.data(), s.get("c.w").unwrap().data.as_slice());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let by_name = p.gradients(&grads);
        let gw = &by_name["c.w"];
        for (g, v) in gw.iter().zip(w.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
        // untouched bias gets zeros
        assert!(by_name["c.b"].iter().all(|&g| g == 0.0));
    }
}
