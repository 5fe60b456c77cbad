//! Multi-head attention restricted to k-nearest-neighbor key sets.
//!
//! For query `i` with neighbors `j` in its k-NN row:
//!
//! ```text
//! q_i  = x_i Wq + bq
//! k_ij = y_j Wk + bk + (p_j - p_i) Wpos
//! v_j  = y_j Wv + bv
//! a_ij = softmax_j(<q_i, k_ij>_h / sqrt(C/H))      per head h
//! o_i  = (sum_j a_ij v_j) Wo + bo
//! z_i  = LN1(x_i + o_i)
//! out  = LN2(z_i + FFN(z_i)),  FFN = relu(z W1 + b1) W2 + b2,  width 4C
//! ```

use rand_chacha::ChaCha8Rng;

use super::knn::KnnIndex;
use super::params::{init_linear, linear, Bound, ParamStore};
use crate::error::{MspError, Result};
use crate::scene::Point;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LocalAttentionBlock {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
    pub ln_eps: f64,
}

/// Intermediate values of one block evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    /// Attention weights `[n * heads, k]`.
    pub weights: Var,
    /// Output projection before the first residual, `[n, C]`.
    pub attended: Var,
    pub out: Var,
}

impl LocalAttentionBlock {
    pub fn new(prefix: impl Into<String>, width: usize, heads: usize, ln_eps: f64) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(MspError::InvalidSpec(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(LocalAttentionBlock { prefix: prefix.into(), width, heads, ln_eps })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = self.width;
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, &self.name(proj), c, c, true, rng)?;
        }
        init_linear(store, &self.name("pos"), 3, c, false, rng)?;
        init_linear(store, &self.name("ff1"), c, 4 * c, true, rng)?;
        init_linear(store, &self.name("ff2"), 4 * c, c, true, rng)?;
        for ln in ["ln1", "ln2"] {
            store.insert(self.name(&format!("{ln}.g")), Tensor::full(&[c], 1.0))?;
            store.insert(self.name(&format!("{ln}.b")), Tensor::zeros(&[c]))?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        query_pos: &[Point],
        key: Var,
        key_pos: &[Point],
        knn: &KnnIndex,
    ) -> Result<Var> {
        Ok(self.forward_traced(tape, p, query, query_pos, key, key_pos, knn)?.out)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        query_pos: &[Point],
        key: Var,
        key_pos: &[Point],
        knn: &KnnIndex,
    ) -> Result<AttentionTrace> {
        let c = self.width;
        let n = query_pos.len();
        let kk = knn.k;
        let qshape = tape.shape(query).to_vec();
        let kshape = tape.shape(key).to_vec();
        if qshape != [n, c] || kshape != [key_pos.len(), c] {
            return Err(MspError::shape("local_attention", &qshape, &kshape));
        }
        if knn.queries() != n || kk == 0 || knn.max_index().is_some_and(|m| m >= key_pos.len()) {
            return Err(MspError::shape("local_attention", &qshape, &[knn.queries(), kk]));
        }

        let q = linear(tape, p, &self.name("q"), query, true)?;
        // <q_i, k_j + (p_j - p_i) Wpos> differs from <q_i, k_j + p_j Wpos>
        // by a term constant over j, which the softmax cancels, so the
        // position map is applied once per key rather than per edge.
        let key_xyz: Vec<f64> = key_pos.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let key_xyz = tape.constant(Tensor::matrix(key_pos.len(), 3, key_xyz)?);
        let pe = linear(tape, p, &self.name("pos"), key_xyz, false)?;
        let k_all = linear(tape, p, &self.name("k"), key, true)?;
        let k_all = tape.add(k_all, pe)?;
        let v_all = linear(tape, p, &self.name("v"), key, true)?;
        let keys = tape.gather_rows(k_all, &knn.idx)?;
        let v_g = tape.gather_rows(v_all, &knn.idx)?;

        let scores = tape.neighbor_scores(q, keys, self.heads, kk)?;
        let scores = tape.scale(scores, 1.0 / ((c / self.heads) as f64).sqrt());
        let weights = tape.softmax_lastdim(scores)?;
        let mixed = tape.neighbor_mix(weights, v_g, self.heads, kk)?;
        let attended = linear(tape, p, &self.name("o"), mixed, true)?;

        let res = tape.add(query, attended)?;
        let z = tape.layer_norm(res, p.get(&self.name("ln1.g"))?, p.get(&self.name("ln1.b"))?, self.ln_eps)?;
        let h = linear(tape, p, &self.name("ff1"), z, true)?;
        let h = tape.relu(h);
        let h = linear(tape, p, &self.name("ff2"), h, true)?;
        let res2 = tape.add(z, h)?;
        let out = tape.layer_norm(res2, p.get(&self.name("ln2.g"))?, p.get(&self.name("ln2.b"))?, self.ln_eps)?;
        Ok(AttentionTrace { weights, attended, out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::knn_search;
    use crate::rng::stream;
    use rand::Rng;

    fn setup(n_keys: usize, seed: u64) -> (LocalAttentionBlock, ParamStore, Vec<Point>, Tensor) {
        let block = LocalAttentionBlock::new("blk", 8, 2, 1e-5).unwrap();
        let mut rng = stream(seed, &[]);
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng).unwrap();
        let pos: Vec<Point> = (0..n_keys).map(|_| Point::new(rng.random(), rng.random(), rng.random())).collect();
        let feats = Tensor::matrix(n_keys, 8, (0..n_keys * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (block, store, pos, feats)
    }

    #[test]
    fn width_must_divide() {
        assert!(LocalAttentionBlock::new("x", 10, 4, 1e-5).is_err());
    }

    #[test]
    fn single_neighbor_takes_its_value() {
        let (block, store, pos, feats) = setup(4, 1);
        let knn = knn_search(&pos[..2], &pos, 1).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let kf = tape.constant(feats.clone());
        let qf = tape.constant(feats.gather_rows(&[0, 1]));
        let tr = block.forward_traced(&mut tape, &p, qf, &pos[..2], kf, &pos, &knn).unwrap();
        assert!(tape.value(tr.weights).data().iter().all(|&w| w == 1.0));
        // expected: (y_j Wv + bv) Wo + bo for the single neighbor j
        let mut t2 = Tape::new();
        let p2 = store.bind(&mut t2, false);
        let y = t2.constant(feats.gather_rows(knn.row(0)));
        let v = linear(&mut t2, &p2, "blk.v", y, true).unwrap();
        let o = linear(&mut t2, &p2, "blk.o", v, true).unwrap();
        let got = tape.value(tr.attended).row(0).to_vec();
        for (a, b) in got.iter().zip(t2.value(o).row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (block, store, _, feats) = setup(5, 2);
        let row = feats.row(0).to_vec();
        let same = Tensor::matrix(5, 8, row.repeat(5)).unwrap();
        let pos = vec![Point::new(0.2, 0.1, 0.3); 5];
        let q = [Point::new(0.5, 0.5, 0.5)];
        let knn = knn_search(&q, &pos, 5).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let kf = tape.constant(same);
        let qf = tape.constant(feats.gather_rows(&[1]));
        let tr = block.forward_traced(&mut tape, &p, qf, &q, kf, &pos, &knn).unwrap();
        for w in tape.value(tr.weights).data() {
            assert!((w - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (block, store, pos, feats) = setup(4, 3);
        let knn = knn_search(&pos, &pos, 2).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let kf = tape.constant(feats.gather_rows(&[0, 1, 2]));
        let qf = tape.constant(feats.clone());
        assert!(block.forward(&mut tape, &p, qf, &pos, kf, &pos, &knn).is_err());
    }
}
