use std::sync::atomic::{AtomicU32, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{ConvGeom, Op};
use super::{axis_split, gemm, DiffArray, TensorError, CLAMP_MIN};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) tape: u32,
    pub(crate) idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

pub(crate) struct Node {
    pub(crate) value: DiffArray,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, which is a topological order: an op
/// can only reference handles that already exist. The tape owns a seeded
/// generator used for dropout masks, so rebuilding a pass on a tape with the
/// same seed replays identical masks.
pub struct Tape {
    id: u32,
    pub(crate) nodes: Vec<Node>,
    pub(crate) rng: ChaCha8Rng,
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter or variable under test).
    pub fn leaf(&mut self, value: DiffArray) -> Var {
        self.attach(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: DiffArray) -> Var {
        self.attach(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new gradient-free node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).detached();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &DiffArray {
        &self.nodes[self.slot(v)].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.slot(v)].requires_grad
    }

    /// Gradient left by the last [`Tape::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.value(v).grad()
    }

    pub(crate) fn slot(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "handle belongs to a different or freed tape");
        v.idx as usize
    }

    pub(crate) fn attach(&mut self, mut value: DiffArray, op: Op, requires_grad: bool) -> Var {
        let var = Var {
            tape: self.id,
            idx: u32::try_from(self.nodes.len()).expect("tape overflow"),
        };
        value.tape_id = Some(var);
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        var
    }

    /// Reverse sweep from a one-element `root`. Earlier gradients are cleared.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let r = self.slot(root);
        if self.nodes[r].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[r].value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !self.nodes[r].requires_grad {
            return Ok(());
        }
        self.nodes[r].value.grad = Some(vec![1.0]);
        for i in (0..=r).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            let contributions = backward_node(&self.nodes, i, &g);
            self.nodes[i].value.grad = Some(g);
            for (j, c) in contributions {
                let target = &mut self.nodes[j].value.grad;
                match target {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    None => *target = Some(c),
                }
            }
        }
        Ok(())
    }
}

fn backward_node(nodes: &[Node], i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let needs = |v: &Var| nodes[v.idx as usize].requires_grad;
    let val = |v: &Var| nodes[v.idx as usize].value.data();
    let shp = |v: &Var| nodes[v.idx as usize].value.shape();
    let out = nodes[i].value.data();
    let mut res: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut push = |v: &Var, c: Vec<f64>| res.push((v.idx as usize, c));

    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (shp(a)[0], shp(a)[1]);
            let n = shp(b)[1];
            if needs(a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, (n, 1), val(b), (1, n), &mut ga, 0.0);
                push(a, ga);
            }
            if needs(b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, val(a), (1, k), g, (n, 1), &mut gb, 0.0);
                push(b, gb);
            }
        }
        Op::Transpose { x } => {
            let (r, c) = (shp(x)[0], shp(x)[1]);
            let mut gx = vec![0.0; r * c];
            for p in 0..r {
                for q in 0..c {
                    gx[p * c + q] = g[q * r + p];
                }
            }
            push(x, gx);
        }
        Op::Add { a, b } => {
            if needs(a) {
                push(a, g.to_vec());
            }
            if needs(b) {
                push(b, g.to_vec());
            }
        }
        Op::Sub { a, b } => {
            if needs(a) {
                push(a, g.to_vec());
            }
            if needs(b) {
                push(b, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul { a, b } => {
            if needs(a) {
                push(a, g.iter().zip(val(b)).map(|(g, b)| g * b).collect());
            }
            if needs(b) {
                push(b, g.iter().zip(val(a)).map(|(g, a)| g * a).collect());
            }
        }
        Op::Div { a, b } => {
            let (av, bv) = (val(a), val(b));
            if needs(a) {
                push(a, g.iter().zip(bv).map(|(g, b)| g / b.max(CLAMP_MIN)).collect());
            }
            if needs(b) {
                let gb = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (a, b))| if *b > CLAMP_MIN { -g * a / (b * b) } else { 0.0 })
                    .collect();
                push(b, gb);
            }
        }
        Op::AddRow { x, bias } => {
            if needs(x) {
                push(x, g.to_vec());
            }
            if needs(bias) {
                let n = shp(bias)[0];
                let mut gb = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                push(bias, gb);
            }
        }
        Op::Scale { x, c } => push(x, g.iter().map(|v| v * c).collect()),
        Op::AddScalar { x } | Op::Reshape { x } => push(x, g.to_vec()),
        Op::Exp { x } => push(x, g.iter().zip(out).map(|(g, y)| g * y).collect()),
        Op::Log { x } => push(
            x,
            g.iter()
                .zip(val(x))
                .map(|(g, x)| if *x > CLAMP_MIN { g / x } else { 0.0 })
                .collect(),
        ),
        Op::Relu { x } => push(
            x,
            g.iter().zip(val(x)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
        ),
        Op::Softplus { x } => push(
            x,
            g.iter().zip(val(x)).map(|(g, x)| g * sigmoid(*x)).collect(),
        ),
        Op::Sigmoid { x } => push(x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()),
        Op::Abs { x } => push(
            x,
            g.iter().zip(val(x)).map(|(g, x)| g * sign(*x)).collect(),
        ),
        Op::Square { x } => push(x, g.iter().zip(val(x)).map(|(g, x)| 2.0 * g * x).collect()),
        Op::Minimum { a, b } | Op::Maximum { a, b } => {
            let take_a: Vec<bool> = {
                let is_min = matches!(nodes[i].op, Op::Minimum { .. });
                val(a)
                    .iter()
                    .zip(val(b))
                    .map(|(a, b)| if is_min { a <= b } else { a >= b })
                    .collect()
            };
            if needs(a) {
                push(a, g.iter().zip(&take_a).map(|(g, t)| if *t { *g } else { 0.0 }).collect());
            }
            if needs(b) {
                push(b, g.iter().zip(&take_a).map(|(g, t)| if *t { 0.0 } else { *g }).collect());
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(shp(x), *axis);
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for q in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + q;
                    let dot: f64 = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                    for k in 0..len {
                        gx[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            push(x, gx);
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = axis_split(shp(x), *axis);
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for q in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + q;
                    let total: f64 = (0..len).map(|k| g[idx(k)]).sum();
                    for k in 0..len {
                        gx[idx(k)] = g[idx(k)] - out[idx(k)].exp() * total;
                    }
                }
            }
            push(x, gx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = shp(gamma)[0];
            let gm = val(gamma);
            if needs(x) {
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, xr), gxr)) in g
                    .chunks_exact(n)
                    .zip(xhat.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                    .enumerate()
                {
                    let dxhat: Vec<f64> = gr.iter().zip(gm).map(|(g, w)| g * w).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx =
                        dxhat.iter().zip(xr).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                    for k in 0..n {
                        gxr[k] = rstd[r] * (dxhat[k] - mean_d - xr[k] * mean_dx);
                    }
                }
                push(x, gx);
            }
            if needs(gamma) {
                let mut gg = vec![0.0; n];
                for (gr, xr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for k in 0..n {
                        gg[k] += gr[k] * xr[k];
                    }
                }
                push(gamma, gg);
            }
            if needs(beta) {
                let mut gb = vec![0.0; n];
                for gr in g.chunks_exact(n) {
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
                push(beta, gb);
            }
        }
        Op::Linear { x, w, b } => {
            let (k, n) = (shp(w)[0], shp(w)[1]);
            let m = g.len() / n;
            if needs(x) {
                let mut gx = vec![0.0; m * k];
                gemm(m, n, k, g, (n, 1), val(w), (1, n), &mut gx, 0.0);
                push(x, gx);
            }
            if needs(w) {
                let mut gw = vec![0.0; k * n];
                gemm(k, m, n, val(x), (1, k), g, (n, 1), &mut gw, 0.0);
                push(w, gw);
            }
            if needs(b) {
                let mut gb = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                push(b, gb);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let c = shp(logits)[1];
            let mut gx = probs.clone();
            for (r, (&t, row)) in targets.iter().zip(gx.chunks_exact_mut(c)).enumerate() {
                row[t] -= 1.0;
                row.iter_mut().for_each(|v| *v *= g[r]);
            }
            push(logits, gx);
        }
        Op::Sum { x } => push(x, vec![g[0]; val(x).len()]),
        Op::Mean { x } => {
            let n = val(x).len();
            push(x, vec![g[0] / n as f64; n]);
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = axis_split(shp(x), *axis);
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    for q in 0..inner {
                        gx[(o * len + k) * inner + q] = g[o * inner + q];
                    }
                }
            }
            push(x, gx);
        }
        Op::Concat { xs, axis } => {
            let out_shape = nodes[i].value.shape();
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut offset = 0;
            for x in xs {
                let len = shp(x)[*axis];
                if needs(x) {
                    let mut gx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[start..start + len * inner]);
                    }
                    push(x, gx);
                }
                offset += len;
            }
        }
        Op::Slice {
            x,
            axis,
            start,
            end,
        } => {
            let (outer, len, inner) = axis_split(shp(x), *axis);
            let width = (end - start) * inner;
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let dst = (o * len + start) * inner;
                gx[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            push(x, gx);
        }
        Op::SelectRows { x, rows } => {
            let c: usize = shp(x)[1..].iter().product();
            let mut gx = vec![0.0; val(x).len()];
            for (k, &r) in rows.iter().enumerate() {
                for q in 0..c {
                    gx[r * c + q] += g[k * c + q];
                }
            }
            push(x, gx);
        }
        Op::Dropout { x, mask } => push(x, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
        Op::Im2Col { x, geom } => {
            let mut gx = vec![0.0; val(x).len()];
            geom.scatter_add(g, &mut gx);
            push(x, gx);
        }
    }
    res
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl ConvGeom {
    fn scatter_add(&self, cols: &[f64], input_grad: &mut [f64]) {
        let ConvGeom {
            height,
            width,
            channels,
            kernel,
            stride,
            pad,
        } = *self;
        let (oh, ow) = self.output_hw();
        let row_len = kernel * kernel * channels;
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * row_len;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let src = base + (ky * kernel + kx) * channels;
                        let dst = (iy as usize * width + ix as usize) * channels;
                        for ch in 0..channels {
                            input_grad[dst + ch] += cols[src + ch];
                        }
                    }
                }
            }
        }
    }
}
