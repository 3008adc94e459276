//! Parameter storage and the small set of layers every network here is
//! assembled from.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, SeededRng};
use crate::tensor::gradcheck::GradCheck;
use crate::tensor::{Mask, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with gradient buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter {name} registered twice"
        );
        self.grads.push(vec![0.0; value.len()]);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
    }

    /// Element count over trainable parameters.
    pub fn trainable_size(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.get(id).len())
            .sum()
    }

    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<f64>)], scale: f64) {
        for (id, g) in grads {
            self.grads[id.0]
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += scale * b);
        }
    }

    pub fn to_named(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (format!("{prefix}{n}"), v.clone()))
            .collect()
    }

    /// Overwrites every parameter from `named[prefix + name]`.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let key = format!("{prefix}{name}");
            let t = named
                .get(&key)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {key}")))?;
            if t.shape() != value.shape() {
                return Err(Error::dim("load_named", value.shape(), t.shape()));
            }
            *value = t.clone();
        }
        Ok(())
    }
}

/// A tape bound to a parameter store. Each parameter becomes a leaf the first
/// time it is used; trainable ones require gradient.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .tape
            .leaf(self.params.get(id).clone(), self.params.is_trainable(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Gradients reached by the last backward pass, keyed by parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Registers parameters under a dotted name prefix with seeded init.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut SeededRng,
    prefix: String,
    trainable: bool,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut SeededRng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            trainable: true,
        }
    }

    /// Parameters registered from now on are excluded from optimization.
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        Builder {
            prefix: format!("{}{name}.", self.prefix),
            store: self.store,
            rng: self.rng,
            trainable: self.trainable,
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = shape.iter().product();
        let data = normal_vec(self.rng, n, std);
        self.tensor(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n = shape.iter().product();
        self.tensor(name, Tensor::new(shape.to_vec(), vec![value; n]).expect("shape"))
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> ParamId {
        self.store
            .add(format!("{}{name}", self.prefix), t, self.trainable)
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        self.rng
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = b.scope(name);
        let w = s.normal("w", &[d_in, d_out], 1.0 / (d_in as f64).sqrt());
        let bias = s.constant("b", &[d_out], 0.0);
        Self {
            w,
            b: bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            gamma: s.constant("gamma", &[d], 1.0),
            beta: s.constant("beta", &[d], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder<'_>, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            fc1: Linear::new(&mut s, "fc1", d_in, d_hidden),
            fc2: Linear::new(&mut s, "fc2", d_hidden, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// Queries of width `d`, keys and values read from inputs of width `d_kv`.
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize, d_kv: usize, heads: usize) -> Self {
        assert_eq!(d % heads, 0, "{heads} heads must divide width {d}");
        let mut s = b.scope(name);
        Self {
            q: Linear::new(&mut s, "q", d, d),
            k: Linear::new(&mut s, "k", d_kv, d),
            v: Linear::new(&mut s, "v", d_kv, d),
            o: Linear::new(&mut s, "o", d, d),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, kv: Var, mask: Mask) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, kv)?;
        let v = self.v.forward(g, kv)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, a)
    }
}

/// Pre-norm transformer block: self-attention, optional cross-attention,
/// feed-forward, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln_ff: LayerNorm,
    pub ff: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Width of the cross-attended memory, when the block has one.
    pub d_cross: Option<usize>,
}

impl Block {
    pub fn new(b: &mut Builder<'_>, name: &str, dims: BlockDims) -> Self {
        let mut s = b.scope(name);
        let d = dims.d;
        Self {
            ln_self: LayerNorm::new(&mut s, "ln_self", d),
            self_attn: Attention::new(&mut s, "self_attn", d, d, dims.heads),
            cross: dims.d_cross.map(|dc| {
                (
                    LayerNorm::new(&mut s, "ln_cross", d),
                    Attention::new(&mut s, "cross_attn", d, dc, dims.heads),
                )
            }),
            ln_ff: LayerNorm::new(&mut s, "ln_ff", d),
            ff: Mlp::new(&mut s, "ff", d, dims.d_ff, d),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, memory: Option<Var>, mask: Mask) -> Result<Var> {
        let h = self.ln_self.forward(g, x)?;
        let a = self.self_attn.forward(g, h, h, mask)?;
        let mut x = g.add(x, a)?;
        if let Some((ln, attn)) = &self.cross {
            let mem = memory.ok_or_else(|| Error::Contract("cross-attention block needs memory".into()))?;
            let h = ln.forward(g, x)?;
            let c = attn.forward(g, h, mem, Mask::None)?;
            x = g.add(x, c)?;
        }
        let h = self.ln_ff.forward(g, x)?;
        let f = self.ff.forward(g, h)?;
        g.add(x, f)
    }
}

/// A stack of [`Block`]s followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
}

impl Stack {
    pub fn new(b: &mut Builder<'_>, name: &str, layers: usize, dims: BlockDims) -> Self {
        let mut s = b.scope(name);
        let blocks = (0..layers)
            .map(|i| Block::new(&mut s, &format!("block{i}"), dims))
            .collect();
        Self {
            blocks,
            ln_out: LayerNorm::new(&mut s, "ln_out", dims.d),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var, memory: Option<Var>, mask: Mask) -> Result<Var> {
        for blk in &self.blocks {
            x = blk.forward(g, x, memory, mask)?;
        }
        self.ln_out.forward(g, x)
    }
}

/// Central-difference check of the gradient that `f` sends to every
/// trainable parameter of `store`. Parameters with more than `max_coords`
/// entries are checked on a random subset of that size.
pub fn gradcheck_params<F>(
    store: &ParamStore,
    h: f64,
    max_coords: usize,
    rng: &mut SeededRng,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    g.backward(out)?;
    let analytic: BTreeMap<ParamId, Vec<f64>> = g.param_grads().into_iter().collect();
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let out = f(&mut g)?;
        Ok(g.item(out))
    };
    let mut work = store.clone();
    let mut rel_err = Vec::new();
    let mut max_abs_err: f64 = 0.0;
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, max_coords).into_vec()
        };
        let zeros = vec![0.0; n];
        let an = analytic.get(&id).unwrap_or(&zeros);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for j in coords {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * h);
            let d = an[j] - num;
            max_abs_err = max_abs_err.max(d.abs());
            diff2 += d * d;
            a2 += an[j] * an[j];
            n2 += num * num;
        }
        let denom = a2.sqrt() + n2.sqrt();
        rel_err.push(if denom < 1e-8 { diff2.sqrt() } else { diff2.sqrt() / denom });
    }
    Ok(GradCheck { rel_err, max_abs_err })
}

/// Standard sine/cosine position table, `len × d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * rate;
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("shape")
}

/// Adds the sinusoidal table to a `T × d` input.
pub fn add_positions(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let (t, d) = (g.rows(x), g.cols(x));
    let pe = g.constant(sinusoidal_positions(t, d));
    g.add(x, pe)
}
