//! Parameter storage, the transformer-encoder layer, attention pooling and
//! the Adam optimizer shared by the alignment model and the reader.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Feature-extractor weights (trained with a reduced learning rate).
    FeatureEncoder,
    Model,
}

impl ParamGroup {
    fn tag(self) -> u8 {
        match self {
            ParamGroup::FeatureEncoder => 0,
            ParamGroup::Model => 1,
        }
    }

    fn from_tag(tag: u8, at: u64) -> Result<Self> {
        match tag {
            0 => Ok(ParamGroup::FeatureEncoder),
            1 => Ok(ParamGroup::Model),
            _ => Err(Error::format(at, format!("unknown parameter group {tag}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameters. Declaration order is the
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        w.len_u32(self.params.len());
        for p in &self.params {
            w.str(&p.name);
            w.u8(p.group.tag());
            w.len_u32(p.value.shape().len());
            for &d in p.value.shape() {
                w.len_u32(d);
            }
            for &x in p.value.data() {
                w.f64(x);
            }
        }
    }

    /// Reads parameters and checks them against the names and shapes of
    /// `template`, which a freshly constructed model provides.
    pub(crate) fn read_into(template: &ParamStore, r: &mut ByteReader<'_>) -> Result<ParamStore> {
        let at = r.offset();
        let n = r.u32("parameter count")? as usize;
        if n != template.params.len() {
            return Err(Error::format(
                at,
                format!("expected {} parameter tensors, found {n}", template.params.len()),
            ));
        }
        let mut out = ParamStore::default();
        for expected in &template.params {
            let at = r.offset();
            let name = r.str("parameter name")?;
            if name != expected.name {
                return Err(Error::format(
                    at,
                    format!("expected parameter {:?}, found {name:?}", expected.name),
                ));
            }
            let at = r.offset();
            let group = ParamGroup::from_tag(r.u8("parameter group")?, at)?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            if shape != expected.value.shape() {
                return Err(Error::format(
                    at,
                    format!(
                        "parameter {name} has shape {shape:?}, expected {:?}",
                        expected.value.shape()
                    ),
                ));
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64("parameter data")?);
            }
            out.add(name, group, Tensor::new(shape, data)?);
        }
        Ok(out)
    }
}

/// Binds parameters onto one tape lazily, so unused parameters cost nothing.
pub(crate) struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| tape.param(self.store.get(id)))
    }

    /// Adds this tape's parameter gradients into `acc` in declaration order.
    pub fn accumulate(&self, grads: &Gradients, acc: &mut GradAccum) {
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                acc.add(ParamId(i), g);
            }
        }
    }
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Debug)]
pub struct GradAccum {
    grads: Vec<Option<Tensor>>,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
}

/// Xavier-uniform initialisation.
pub(crate) fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )
}

pub(crate) fn filled(rows: usize, cols: usize, v: f64) -> Tensor {
    Tensor::matrix(rows, cols, vec![v; rows * cols])
}

const LN_EPS: f64 = 1e-5;

/// Post-norm transformer encoder layer: multi-head self-attention then a
/// ReLU feed-forward block, each followed by residual + layer norm.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EncoderLayer {
    heads: usize,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ff: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Model;
        let mut lin = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            let w = store.add(format!("{prefix}.{name}.weight"), g, xavier(rng, i, o));
            let b = store.add(format!("{prefix}.{name}.bias"), g, filled(1, o, 0.0));
            (w, b)
        };
        let (wq, bq) = lin(store, "attn.q", d, d);
        let (wk, bk) = lin(store, "attn.k", d, d);
        let (wv, bv) = lin(store, "attn.v", d, d);
        let (wo, bo) = lin(store, "attn.out", d, d);
        let ln1_g = store.add(format!("{prefix}.ln1.gain"), g, filled(1, d, 1.0));
        let ln1_b = store.add(format!("{prefix}.ln1.bias"), g, filled(1, d, 0.0));
        let (w1, b1) = lin(store, "ff.in", d, ff);
        let (w2, b2) = lin(store, "ff.out", ff, d);
        let ln2_g = store.add(format!("{prefix}.ln2.gain"), g, filled(1, d, 1.0));
        let ln2_b = store.add(format!("{prefix}.ln2.bias"), g, filled(1, d, 0.0));
        Self {
            heads,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln1_g,
            ln1_b,
            w1,
            b1,
            w2,
            b2,
            ln2_g,
            ln2_b,
        }
    }

    fn linear(
        tape: &mut Tape,
        b: &mut Binder<'_>,
        x: Var,
        w: ParamId,
        bias: ParamId,
    ) -> Result<Var> {
        let wv = b.var(tape, w);
        let bv = b.var(tape, bias);
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    }

    /// `x` is `[L, d]`; output has the same shape.
    pub fn forward(&self, tape: &mut Tape, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let d = tape.value(x).cols();
        let dh = d / self.heads;
        let q = Self::linear(tape, b, x, self.wq, self.bq)?;
        let k = Self::linear(tape, b, x, self.wk, self.bk)?;
        let v = Self::linear(tape, b, x, self.wv, self.bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let attn = Self::linear(tape, b, cat, self.wo, self.bo)?;
        let res = tape.add(x, attn)?;
        let g1 = b.var(tape, self.ln1_g);
        let b1 = b.var(tape, self.ln1_b);
        let h = tape.layer_norm_rows(res, g1, b1, LN_EPS)?;
        let f = Self::linear(tape, b, h, self.w1, self.b1)?;
        let f = tape.relu(f);
        let f = Self::linear(tape, b, f, self.w2, self.b2)?;
        let res = tape.add(h, f)?;
        let g2 = b.var(tape, self.ln2_g);
        let b2 = b.var(tape, self.ln2_b);
        tape.layer_norm_rows(res, g2, b2, LN_EPS)
    }
}

/// Single-query attention pooling over the rows of `h` (`[L, d]`).
/// Returns the pooled `[1, d]` vector and the `[1, L]` weights.
pub(crate) fn attention_pool(tape: &mut Tape, h: Var, query: Var) -> Result<(Var, Var)> {
    let d = tape.value(h).cols();
    let s = tape.matmul_nt(query, h)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let w = tape.softmax_rows(s)?;
    let pooled = tape.matmul(w, h)?;
    Ok((pooled, w))
}

/// Fixed sinusoidal position code of width `dim` for position `pos`.
pub fn sinusoidal(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * rate;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Adam with bias correction and per-group learning rates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// Adds an optimizer slot for a tensor that lives outside the store;
    /// returns its slot index for [`Adam::update_slot`].
    pub fn push_slot(&mut self, size: usize) -> usize {
        self.m.push(vec![0.0; size]);
        self.v.push(vec![0.0; size]);
        self.m.len() - 1
    }

    /// Advances the step counter and updates every store parameter that has a gradient.
    pub fn step<F>(&mut self, store: &mut ParamStore, grads: &GradAccum, lr_for: F)
    where
        F: Fn(ParamGroup) -> f64,
    {
        self.t += 1;
        for (i, p) in store.iter_mut().enumerate() {
            if let Some(g) = grads.grads[i].as_ref() {
                let lr = lr_for(p.group);
                self.update_slot(i, p.value.data_mut(), g.data(), lr);
            }
        }
    }

    /// Applies one bias-corrected update to `values` using the current step count.
    pub fn update_slot(&mut self, slot: usize, values: &mut [f64], grad: &[f64], lr: f64) {
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for (j, (x, gj)) in values.iter_mut().zip(grad).enumerate() {
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *x -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoder_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let layer = EncoderLayer::new(&mut store, "l", 8, 12, 2, &mut rng);
        let q = store.add("q", ParamGroup::Model, xavier(&mut rng, 1, 8));
        let x = xavier(&mut rng, 5, 8);
        fn eval<'s>(
            layer: &EncoderLayer,
            q: ParamId,
            store: &'s ParamStore,
            x: &Tensor,
        ) -> (f64, Tape, Binder<'s>, Var, Var) {
            let mut tape = Tape::new();
            let mut b = Binder::new(store);
            let xv = tape.param(x);
            let h = layer.forward(&mut tape, &mut b, xv).unwrap();
            let qv = b.var(&mut tape, q);
            let (p, _) = attention_pool(&mut tape, h, qv).unwrap();
            let s = tape.dot(p, p).unwrap();
            (tape.value(s).data()[0], tape, b, xv, s)
        }
        let (_, tape, b, xv, s) = eval(&layer, q, &store, &x);
        let grads = tape.backward(s).unwrap();
        let analytic = grads.get(xv).unwrap().data().to_vec();
        let numeric = finite_difference(&x, 1e-5, |x| eval(&layer, q, &store, x).0);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() / a.abs().max(1.0) < 1e-4, "{a} vs {n}");
        }
        let mut acc = GradAccum::new(&store);
        b.accumulate(&grads, &mut acc);
        let wq = layer.wq;
        let analytic = acc.get(wq).unwrap().data().to_vec();
        let base = store.get(wq).clone();
        let numeric = finite_difference(&base, 1e-5, |w| {
            let mut s2 = store.clone();
            *s2.get_mut(wq) = w.clone();
            eval(&layer, q, &s2, &x).0
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() / a.abs().max(1.0) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::default();
        let id = store.add("w", ParamGroup::Model, Tensor::row_vector(vec![3.0, -2.0]));
        let mut adam = Adam::new(&store);
        for _ in 0..2000 {
            let mut acc = GradAccum::new(&store);
            let g = store.get(id).data().iter().map(|x| 2.0 * x).collect();
            acc.add(id, &Tensor::row_vector(g));
            adam.step(&mut store, &acc, |_| 0.01);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn param_store_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        EncoderLayer::new(&mut store, "l", 4, 8, 2, &mut rng);
        let mut w = ByteWriter::new();
        store.write(&mut w);
        let bytes = w.finish();
        let back = ParamStore::read_into(&store, &mut ByteReader::new(&bytes)).unwrap();
        assert_eq!(back, store);
        let truncated = &bytes[..bytes.len() - 3];
        assert!(ParamStore::read_into(&store, &mut ByteReader::new(truncated)).is_err());
    }
}
