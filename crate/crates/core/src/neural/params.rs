use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MspError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named parameters, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(MspError::Contract(format!("duplicate parameter '{name}'")));
        }
        self.params.insert(name, t.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| MspError::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| MspError::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sub-store of the parameters whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| {
                    let mut v = v.clone();
                    v.zero_grad();
                    (k.clone(), v)
                })
                .collect(),
        }
    }

    /// Put every parameter on the tape; differentiable iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let mut t = v.clone();
                t.zero_grad();
                (k.clone(), tape.leaf(t.with_requires_grad(trainable)))
            })
            .collect();
        Bound { vars }
    }

    /// Add the tape gradients of `bound` into each parameter's grad buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (name, &var) in &bound.vars {
            let g = tape.grad(var);
            self.get_mut(name)?.accumulate_grad(g.data())?;
        }
        Ok(())
    }

    pub fn accumulate_grad_map(&mut self, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, v) in &self.params {
            feed(k.as_bytes());
            for d in v.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for x in v.data() {
                feed(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Parameter names mapped to their leaves on one tape.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| MspError::Contract(format!("parameter '{name}' not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.vars.iter().map(|(k, v)| (k.clone(), tape.grad(*v).into_data())).collect()
    }
}

/// Register `{name}.w` (`[fan_in, fan_out]`, Glorot-uniform) and optionally
/// `{name}.b` (zeros).
pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    store.insert(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w)?)?;
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

/// `x * {name}.w (+ {name}.b)`.
pub fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var, bias: bool) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{name}.w"))?)?;
    if bias {
        tape.add(y, p.get(&format!("{name}.b"))?)
    } else {
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn names_unique_and_ordered() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::zeros(&[1])).unwrap();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut rng = stream(1, &[]);
        let mut s = ParamStore::new();
        init_linear(&mut s, "l", 3, 4, true, &mut rng).unwrap();
        let c0 = s.checksum();
        s.get_mut("l.b").unwrap().data_mut()[0] = 1e-300;
        assert_ne!(c0, s.checksum());
    }

    #[test]
    fn grads_flow_into_store() {
        let mut rng = stream(2, &[]);
        let mut s = ParamStore::new();
        init_linear(&mut s, "l", 2, 2, true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, true);
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = linear(&mut tape, &b, "l", x, true).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        s.accumulate_grads(&tape, &b).unwrap();
        assert_eq!(s.get("l.b").unwrap().grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(s.get("l.w").unwrap().grad().unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
