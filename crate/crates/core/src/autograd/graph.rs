use std::cell::RefCell;
use std::f64::consts::LN_10;
use std::rc::Rc;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::signal::StftPlan;

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// index is a valid topological order for the backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

struct GruCache {
    batch: usize,
    steps: usize,
    hidden: usize,
    // [T, B, H] time-major gate activations
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Tanh(usize),
    Sigmoid(usize),
    SoftmaxAxis1 {
        x: usize,
        batch: usize,
        axis: usize,
        inner: usize,
    },
    Concat {
        a: usize,
        b: usize,
        na: usize,
        nb: usize,
    },
    Unfold {
        x: usize,
        batch: usize,
        steps: usize,
        channels: usize,
        kernel: usize,
    },
    Gru {
        x: usize,
        wh: usize,
        bh: usize,
        cache: GruCache,
    },
    ComplexMul(usize, usize),
    MagPow {
        x: usize,
        exponent: f64,
    },
    Istft {
        x: usize,
        plan: Arc<StftPlan>,
        frames: usize,
    },
    SiSdr {
        x: usize,
        target: Rc<Tensor>,
        // per row: (<x, s>, ||s||^2, ||e||^2 + eps)
        stats: Vec<(f64, f64, f64)>,
    },
    L1Mean(usize, usize),
    SelectRows {
        x: usize,
        idx: Vec<usize>,
    },
    Sum(usize),
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape().to_vec(), 1.0));
        for id in (0..=root.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut emit = |pid: usize, t: Tensor| {
                if !nodes[pid].needs_grad {
                    return;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            backward_node(&nodes, id, &g, &mut emit);
        }
        Gradients { grads }
    }
}

/// Gradients from one [`Graph::backward`] call, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when it did not influence the root.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            emit(*a, g.clone());
            emit(*b, g.clone());
        }
        Op::Sub(a, b) => {
            emit(*a, g.clone());
            let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
            emit(*b, Tensor::new(g.shape().to_vec(), neg));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga: Vec<f64> = gd.iter().zip(bv.data()).map(|(g, b)| g * b).collect();
            let gb: Vec<f64> = gd.iter().zip(av.data()).map(|(g, a)| g * a).collect();
            emit(*a, Tensor::new(av.shape().to_vec(), ga));
            emit(*b, Tensor::new(bv.shape().to_vec(), gb));
        }
        Op::AddBias(x, b) => {
            emit(*x, g.clone());
            let n = val(*b).len();
            let mut gb = vec![0.0; n];
            for row in gd.chunks(n) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            emit(*b, Tensor::new(vec![n], gb));
        }
        Op::Scale(x, c) => {
            emit(*x, Tensor::new(g.shape().to_vec(), gd.iter().map(|v| v * c).collect()));
        }
        Op::AddScalar(x) => emit(*x, g.clone()),
        Op::MatMul(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let k = wv.shape()[0];
            let n = wv.shape()[1];
            let rows = xv.len() / k;
            if nodes[*x].needs_grad {
                let mut gx = vec![0.0; xv.len()];
                gemm(rows, n, k, 1.0, gd, false, wv.data(), true, 0.0, &mut gx);
                emit(*x, Tensor::new(xv.shape().to_vec(), gx));
            }
            if nodes[*w].needs_grad {
                let mut gw = vec![0.0; wv.len()];
                gemm(k, rows, n, 1.0, xv.data(), true, gd, false, 0.0, &mut gw);
                emit(*w, Tensor::new(wv.shape().to_vec(), gw));
            }
        }
        Op::Bmm {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
        } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (*m, *k, *n);
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for bi in 0..*batch {
                let am = &av.data()[bi * m * k..(bi + 1) * m * k];
                let bm = &bv.data()[bi * k * n..(bi + 1) * k * n];
                let gm = &gd[bi * m * n..(bi + 1) * m * n];
                let gam = &mut ga[bi * m * k..(bi + 1) * m * k];
                let gbm = &mut gb[bi * k * n..(bi + 1) * k * n];
                match (*ta, *tb) {
                    (false, false) => {
                        gemm(m, n, k, 1.0, gm, false, bm, true, 0.0, gam);
                        gemm(k, m, n, 1.0, am, true, gm, false, 0.0, gbm);
                    }
                    (false, true) => {
                        gemm(m, n, k, 1.0, gm, false, bm, false, 0.0, gam);
                        gemm(n, m, k, 1.0, gm, true, am, false, 0.0, gbm);
                    }
                    (true, false) => {
                        gemm(k, n, m, 1.0, bm, false, gm, true, 0.0, gam);
                        gemm(k, m, n, 1.0, am, false, gm, false, 0.0, gbm);
                    }
                    (true, true) => {
                        gemm(k, n, m, 1.0, bm, true, gm, true, 0.0, gam);
                        gemm(n, m, k, 1.0, gm, true, am, true, 0.0, gbm);
                    }
                }
            }
            emit(*a, Tensor::new(av.shape().to_vec(), ga));
            emit(*b, Tensor::new(bv.shape().to_vec(), gb));
        }
        Op::Tanh(x) => {
            let gx = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
            emit(*x, Tensor::new(out.shape().to_vec(), gx));
        }
        Op::Sigmoid(x) => {
            let gx = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
            emit(*x, Tensor::new(out.shape().to_vec(), gx));
        }
        Op::SoftmaxAxis1 {
            x,
            batch,
            axis,
            inner,
        } => {
            let s = out.data();
            let mut gx = vec![0.0; s.len()];
            for b in 0..*batch {
                let base = b * axis * inner;
                for j in 0..*inner {
                    let dot: f64 = (0..*axis)
                        .map(|i| s[base + i * inner + j] * gd[base + i * inner + j])
                        .sum();
                    for i in 0..*axis {
                        let p = base + i * inner + j;
                        gx[p] = s[p] * (gd[p] - dot);
                    }
                }
            }
            emit(*x, Tensor::new(out.shape().to_vec(), gx));
        }
        Op::Concat { a, b, na, nb } => {
            let rows = gd.len() / (na + nb);
            let mut ga = Vec::with_capacity(rows * na);
            let mut gb = Vec::with_capacity(rows * nb);
            for row in gd.chunks(na + nb) {
                ga.extend_from_slice(&row[..*na]);
                gb.extend_from_slice(&row[*na..]);
            }
            emit(*a, Tensor::new(val(*a).shape().to_vec(), ga));
            emit(*b, Tensor::new(val(*b).shape().to_vec(), gb));
        }
        Op::Unfold {
            x,
            batch,
            steps,
            channels,
            kernel,
        } => {
            let (t_len, c, k) = (*steps, *channels, *kernel);
            let pad = k / 2;
            let mut gx = vec![0.0; batch * t_len * c];
            for b in 0..*batch {
                for t in 0..t_len {
                    let orow = (b * t_len + t) * k * c;
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let xrow = (b * t_len + src as usize) * c;
                        for ch in 0..c {
                            gx[xrow + ch] += gd[orow + j * c + ch];
                        }
                    }
                }
            }
            emit(*x, Tensor::new(val(*x).shape().to_vec(), gx));
        }
        Op::Gru { x, wh, bh, cache } => gru_backward(nodes, *x, *wh, *bh, cache, out, g, emit),
        Op::ComplexMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let width = av.last_dim();
            let f = width / 2;
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for r in 0..av.rows() {
                let o = r * width;
                for i in 0..f {
                    let (ar, ai) = (av.data()[o + i], av.data()[o + f + i]);
                    let (br, bi) = (bv.data()[o + i], bv.data()[o + f + i]);
                    let (gr, gi) = (gd[o + i], gd[o + f + i]);
                    ga[o + i] = gr * br + gi * bi;
                    ga[o + f + i] = -gr * bi + gi * br;
                    gb[o + i] = gr * ar + gi * ai;
                    gb[o + f + i] = -gr * ai + gi * ar;
                }
            }
            emit(*a, Tensor::new(av.shape().to_vec(), ga));
            emit(*b, Tensor::new(bv.shape().to_vec(), gb));
        }
        Op::MagPow { x, exponent } => {
            let xv = val(*x);
            let width = xv.last_dim();
            let f = width / 2;
            let q = exponent - 1.0;
            let mut gx = vec![0.0; xv.len()];
            for r in 0..xv.rows() {
                let o = r * width;
                for i in 0..f {
                    let (re, im) = (xv.data()[o + i], xv.data()[o + f + i]);
                    let (gr, gi) = (gd[o + i], gd[o + f + i]);
                    let mag = re.hypot(im);
                    if mag == 0.0 {
                        // subgradient choice at the origin
                        if q == 0.0 {
                            gx[o + i] = gr;
                            gx[o + f + i] = gi;
                        }
                        continue;
                    }
                    let rq = mag.powf(q);
                    let c = q * mag.powf(q - 2.0);
                    let j_rr = rq + c * re * re;
                    let j_ii = rq + c * im * im;
                    let j_ri = c * re * im;
                    gx[o + i] = gr * j_rr + gi * j_ri;
                    gx[o + f + i] = gr * j_ri + gi * j_ii;
                }
            }
            emit(*x, Tensor::new(xv.shape().to_vec(), gx));
        }
        Op::Istft { x, plan, frames } => {
            let xv = val(*x);
            let batch = xv.shape()[0];
            let out_len = out.shape()[1];
            let per = xv.len() / batch;
            let mut gx = Vec::with_capacity(xv.len());
            for b in 0..batch {
                let gb = plan.synthesize_adjoint(&gd[b * out_len..(b + 1) * out_len], *frames);
                debug_assert_eq!(gb.len(), per);
                gx.extend(gb);
            }
            emit(*x, Tensor::new(xv.shape().to_vec(), gx));
        }
        Op::SiSdr { x, target, stats } => {
            let xv = val(*x);
            let len = xv.last_dim();
            let c = 10.0 / LN_10;
            let mut gx = vec![0.0; xv.len()];
            for (row, &(a, s2, denom)) in stats.iter().enumerate() {
                let xs = &xv.data()[row * len..(row + 1) * len];
                let ss = &target.data()[row * len..(row + 1) * len];
                let alpha = a / s2;
                let scale = gd[row] * c;
                for i in 0..len {
                    let e = xs[i] - alpha * ss[i];
                    let d = if a != 0.0 { 2.0 * ss[i] / a } else { 0.0 };
                    gx[row * len + i] = scale * (d - 2.0 * e / denom);
                }
            }
            emit(*x, Tensor::new(xv.shape().to_vec(), gx));
        }
        Op::L1Mean(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let len = av.last_dim();
            let mut ga = vec![0.0; av.len()];
            for (i, (x, y)) in av.data().iter().zip(bv.data()).enumerate() {
                let d = x - y;
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                ga[i] = gd[i / len] * s / len as f64;
            }
            let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
            emit(*a, Tensor::new(av.shape().to_vec(), ga));
            emit(*b, Tensor::new(bv.shape().to_vec(), gb));
        }
        Op::SelectRows { x, idx } => {
            let xv = val(*x);
            let per = xv.len() / xv.shape()[0];
            let mut gx = vec![0.0; xv.len()];
            for (o, &i) in idx.iter().enumerate() {
                for p in 0..per {
                    gx[i * per + p] += gd[o * per + p];
                }
            }
            emit(*x, Tensor::new(xv.shape().to_vec(), gx));
        }
        Op::Sum(x) => {
            let xv = val(*x);
            emit(*x, Tensor::full(xv.shape().to_vec(), gd[0]));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gru_backward(
    nodes: &[Node],
    x: usize,
    wh: usize,
    bh: usize,
    cache: &GruCache,
    out: &Tensor,
    g: &Tensor,
    emit: &mut dyn FnMut(usize, Tensor),
) {
    let (bsz, steps, h) = (cache.batch, cache.steps, cache.hidden);
    let whv = &nodes[wh].value;
    let mut gx = vec![0.0; bsz * steps * 3 * h];
    let mut gwh = vec![0.0; h * 3 * h];
    let mut gbh = vec![0.0; 3 * h];
    let mut dh_next = vec![0.0; bsz * h];
    let mut h_prev = vec![0.0; bsz * h];
    let mut dhp = vec![0.0; bsz * 3 * h];
    let gd = g.data();
    let od = out.data();
    for t in (0..steps).rev() {
        for b in 0..bsz {
            for j in 0..h {
                h_prev[b * h + j] = if t == 0 {
                    0.0
                } else {
                    od[(b * steps + t - 1) * h + j]
                };
            }
        }
        let tb = t * bsz * h;
        for b in 0..bsz {
            for j in 0..h {
                let c = tb + b * h + j;
                let (r, z, n, hn) = (cache.r[c], cache.z[c], cache.n[c], cache.hn[c]);
                let dh = gd[(b * steps + t) * h + j] + dh_next[b * h + j];
                let hp = h_prev[b * h + j];
                let dn = dh * (1.0 - z);
                let dz = dh * (hp - n);
                let dan = dn * (1.0 - n * n);
                let dr = dan * hn;
                let dar = dr * r * (1.0 - r);
                let daz = dz * z * (1.0 - z);
                let xo = (b * steps + t) * 3 * h;
                gx[xo + j] = dar;
                gx[xo + h + j] = daz;
                gx[xo + 2 * h + j] = dan;
                let po = b * 3 * h;
                dhp[po + j] = dar;
                dhp[po + h + j] = daz;
                dhp[po + 2 * h + j] = dan * r;
                dh_next[b * h + j] = dh * z;
            }
        }
        gemm(h, bsz, 3 * h, 1.0, &h_prev, true, &dhp, false, 1.0, &mut gwh);
        for row in dhp.chunks(3 * h) {
            for (acc, v) in gbh.iter_mut().zip(row) {
                *acc += v;
            }
        }
        gemm(bsz, 3 * h, h, 1.0, &dhp, false, whv.data(), true, 1.0, &mut dh_next);
    }
    emit(x, Tensor::new(nodes[x].value.shape().to_vec(), gx));
    emit(wh, Tensor::new(whv.shape().to_vec(), gwh));
    emit(bh, Tensor::new(vec![3 * h], gbh));
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(value, op, needs)
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.graph.needs(&[self.id, other.id]);
        self.graph.push(value, op, needs)
    }

    fn zip_with(&self, other: Var<'g>, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        let v = self.zip_with(other, |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        let v = self.zip_with(other, |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        let v = self.zip_with(other, |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    /// Broadcast-add a `[n]` bias over the trailing axis.
    pub fn add_bias(&self, bias: Var<'g>) -> Var<'g> {
        let (x, b) = (self.value(), bias.value());
        let n = b.len();
        assert_eq!(x.last_dim(), n, "bias width mismatch");
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        self.binary(bias, Tensor::new(x.shape().to_vec(), data), Op::AddBias(self.id, bias.id))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let x = self.value();
        let v = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect());
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let x = self.value();
        let v = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect());
        self.unary(v, Op::AddScalar(self.id))
    }

    /// `[..., K] x [K, N] -> [..., N]`.
    pub fn matmul(&self, w: Var<'g>) -> Var<'g> {
        let (x, wv) = (self.value(), w.value());
        assert_eq!(wv.shape().len(), 2, "matmul weight must be 2-D");
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(x.last_dim(), k, "matmul inner dimension mismatch");
        let rows = x.len() / k;
        let mut data = vec![0.0; rows * n];
        gemm(rows, k, n, 1.0, x.data(), false, wv.data(), false, 0.0, &mut data);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.binary(w, Tensor::new(shape, data), Op::MatMul(self.id, w.id))
    }

    /// Batched `op(a) x op(b)` over 3-D tensors; `ta`/`tb` transpose the
    /// trailing two axes.
    pub fn bmm(&self, other: Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert!(a.shape().len() == 3 && b.shape().len() == 3, "bmm needs 3-D inputs");
        let batch = a.shape()[0];
        assert_eq!(batch, b.shape()[0], "bmm batch mismatch");
        let (m, k) = if ta {
            (a.shape()[2], a.shape()[1])
        } else {
            (a.shape()[1], a.shape()[2])
        };
        let (k2, n) = if tb {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        assert_eq!(k, k2, "bmm inner dimension mismatch");
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                1.0,
                &a.data()[bi * m * k..(bi + 1) * m * k],
                ta,
                &b.data()[bi * k * n..(bi + 1) * k * n],
                tb,
                0.0,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        self.binary(
            other,
            Tensor::new(vec![batch, m, n], data),
            Op::Bmm {
                a: self.id,
                b: other.id,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
        )
    }

    pub fn tanh(&self) -> Var<'g> {
        let x = self.value();
        let v = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.tanh()).collect());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let x = self.value();
        let v = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| sigmoid(*v)).collect());
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// Softmax of a `[B, N, M]` tensor over the middle axis, so every
    /// `[:, :, j]` column sums to one.
    pub fn softmax_axis1(&self) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.shape().len(), 3, "softmax_axis1 needs a 3-D input");
        let (batch, axis, inner) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let xd = x.data();
        let mut data = vec![0.0; xd.len()];
        for b in 0..batch {
            let base = b * axis * inner;
            for j in 0..inner {
                let max = (0..axis)
                    .map(|i| xd[base + i * inner + j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..axis {
                    let e = (xd[base + i * inner + j] - max).exp();
                    data[base + i * inner + j] = e;
                    total += e;
                }
                for i in 0..axis {
                    data[base + i * inner + j] /= total;
                }
            }
        }
        self.unary(
            Tensor::new(x.shape().to_vec(), data),
            Op::SoftmaxAxis1 {
                x: self.id,
                batch,
                axis,
                inner,
            },
        )
    }

    /// Concatenate along the trailing axis.
    pub fn concat(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (na, nb) = (a.last_dim(), b.last_dim());
        assert_eq!(a.rows(), b.rows(), "concat leading shape mismatch");
        let mut data = Vec::with_capacity(a.len() + b.len());
        for (ra, rb) in a.data().chunks(na).zip(b.data().chunks(nb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = na + nb;
        self.binary(
            other,
            Tensor::new(shape, data),
            Op::Concat {
                a: self.id,
                b: other.id,
                na,
                nb,
            },
        )
    }

    /// `[B, T, C] -> [B, T, k*C]` stacking frames `t - k/2 ..= t + k/2`
    /// (zero outside the sequence). Followed by `matmul` this is a
    /// same-padded temporal convolution.
    pub fn unfold_time(&self, kernel: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.shape().len(), 3, "unfold_time needs [B, T, C]");
        assert!(kernel % 2 == 1, "kernel must be odd");
        let (batch, steps, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let pad = kernel / 2;
        let mut data = vec![0.0; batch * steps * kernel * c];
        for b in 0..batch {
            for t in 0..steps {
                let orow = (b * steps + t) * kernel * c;
                for j in 0..kernel {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= steps as isize {
                        continue;
                    }
                    let xrow = (b * steps + src as usize) * c;
                    data[orow + j * c..orow + (j + 1) * c].copy_from_slice(&x.data()[xrow..xrow + c]);
                }
            }
        }
        self.unary(
            Tensor::new(vec![batch, steps, kernel * c], data),
            Op::Unfold {
                x: self.id,
                batch,
                steps,
                channels: c,
                kernel,
            },
        )
    }

    /// GRU recurrence over `[B, T, 3H]` input projections (gate order
    /// reset, update, candidate), zero initial state. Returns `[B, T, H]`.
    pub fn gru(&self, wh: Var<'g>, bh: Var<'g>) -> Var<'g> {
        let x = self.value();
        let whv = wh.value();
        let bhv = bh.value();
        assert_eq!(x.shape().len(), 3, "gru input must be [B, T, 3H]");
        let (bsz, steps, h3) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = h3 / 3;
        assert_eq!(whv.shape(), &[h, h3], "gru recurrent weight shape");
        assert_eq!(bhv.len(), h3, "gru recurrent bias shape");
        let mut out = vec![0.0; bsz * steps * h];
        let mut cache = GruCache {
            batch: bsz,
            steps,
            hidden: h,
            r: vec![0.0; steps * bsz * h],
            z: vec![0.0; steps * bsz * h],
            n: vec![0.0; steps * bsz * h],
            hn: vec![0.0; steps * bsz * h],
        };
        let mut h_prev = vec![0.0; bsz * h];
        let mut hp = vec![0.0; bsz * h3];
        let xd = x.data();
        for t in 0..steps {
            for row in hp.chunks_mut(h3) {
                row.copy_from_slice(bhv.data());
            }
            gemm(bsz, h, h3, 1.0, &h_prev, false, whv.data(), false, 1.0, &mut hp);
            for b in 0..bsz {
                let xo = (b * steps + t) * h3;
                let po = b * h3;
                for j in 0..h {
                    let r = sigmoid(xd[xo + j] + hp[po + j]);
                    let z = sigmoid(xd[xo + h + j] + hp[po + h + j]);
                    let hn = hp[po + 2 * h + j];
                    let n = (xd[xo + 2 * h + j] + r * hn).tanh();
                    let hv = (1.0 - z) * n + z * h_prev[b * h + j];
                    let c = t * bsz * h + b * h + j;
                    cache.r[c] = r;
                    cache.z[c] = z;
                    cache.n[c] = n;
                    cache.hn[c] = hn;
                    out[(b * steps + t) * h + j] = hv;
                }
            }
            for b in 0..bsz {
                h_prev[b * h..(b + 1) * h]
                    .copy_from_slice(&out[(b * steps + t) * h..(b * steps + t + 1) * h]);
            }
        }
        let needs = self.graph.needs(&[self.id, wh.id, bh.id]);
        self.graph.push(
            Tensor::new(vec![bsz, steps, h], out),
            Op::Gru {
                x: self.id,
                wh: wh.id,
                bh: bh.id,
                cache,
            },
            needs,
        )
    }

    /// Complex product over the trailing axis, which holds `F` real parts
    /// followed by `F` imaginary parts.
    pub fn complex_mul(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "complex_mul shape mismatch");
        let width = a.last_dim();
        assert!(width % 2 == 0, "complex axis must be even");
        let f = width / 2;
        let mut data = vec![0.0; a.len()];
        for r in 0..a.rows() {
            let o = r * width;
            for i in 0..f {
                let (ar, ai) = (a.data()[o + i], a.data()[o + f + i]);
                let (br, bi) = (b.data()[o + i], b.data()[o + f + i]);
                data[o + i] = ar * br - ai * bi;
                data[o + f + i] = ar * bi + ai * br;
            }
        }
        self.binary(other, Tensor::new(a.shape().to_vec(), data), Op::ComplexMul(self.id, other.id))
    }

    /// Raise the magnitude of every complex bin (same layout as
    /// [`Var::complex_mul`]) to `exponent`, keeping phase. Zero bins stay
    /// zero with zero gradient.
    pub fn mag_pow(&self, exponent: f64) -> Var<'g> {
        let x = self.value();
        let width = x.last_dim();
        let f = width / 2;
        let mut data = vec![0.0; x.len()];
        for r in 0..x.rows() {
            let o = r * width;
            for i in 0..f {
                let (re, im) = (x.data()[o + i], x.data()[o + f + i]);
                let mag = re.hypot(im);
                if mag > 0.0 {
                    let g = mag.powf(exponent - 1.0);
                    data[o + i] = re * g;
                    data[o + f + i] = im * g;
                }
            }
        }
        self.unary(
            Tensor::new(x.shape().to_vec(), data),
            Op::MagPow {
                x: self.id,
                exponent,
            },
        )
    }

    /// Frame-major `[B, T, 2F]` spectrograms to `[B, out_len]` waveforms.
    pub fn istft(&self, plan: Arc<StftPlan>, out_len: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.shape().len(), 3, "istft input must be [B, T, 2F]");
        let (batch, frames, width) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(width, 2 * plan.n_bins(), "istft bin count mismatch");
        let per = frames * width;
        let mut data = Vec::with_capacity(batch * out_len);
        for b in 0..batch {
            data.extend(plan.synthesize(&x.data()[b * per..(b + 1) * per], frames, out_len));
        }
        self.unary(
            Tensor::new(vec![batch, out_len], data),
            Op::Istft {
                x: self.id,
                plan,
                frames,
            },
        )
    }

    /// Row-wise unclamped SI-SDR in dB against constant `[B, L]` targets.
    /// The error energy is guarded by `eps_rel * ||s||^2`.
    pub fn si_sdr(&self, target: Rc<Tensor>, eps_rel: f64) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "si_sdr shape mismatch");
        let len = x.last_dim();
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows);
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let xs = &x.data()[r * len..(r + 1) * len];
            let ss = &target.data()[r * len..(r + 1) * len];
            let a: f64 = xs.iter().zip(ss).map(|(p, q)| p * q).sum();
            let s2: f64 = ss.iter().map(|v| v * v).sum();
            let alpha = a / s2;
            let e2: f64 = xs.iter().zip(ss).map(|(p, q)| (p - alpha * q).powi(2)).sum();
            let denom = e2 + eps_rel * s2;
            out.push(10.0 * (alpha * alpha * s2 / denom).log10());
            stats.push((a, s2, denom));
        }
        self.unary(
            Tensor::new(vec![rows], out),
            Op::SiSdr {
                x: self.id,
                target,
                stats,
            },
        )
    }

    /// Row-wise mean absolute difference, `[B, L] x [B, L] -> [B]`.
    pub fn l1_mean(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "l1_mean shape mismatch");
        let len = a.last_dim();
        let out: Vec<f64> = a
            .data()
            .chunks(len)
            .zip(b.data().chunks(len))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / len as f64)
            .collect();
        let rows = out.len();
        self.binary(other, Tensor::new(vec![rows], out), Op::L1Mean(self.id, other.id))
    }

    /// Gather entries along the leading axis.
    pub fn select_rows(&self, idx: &[usize]) -> Var<'g> {
        let x = self.value();
        let lead = x.shape()[0];
        let per = x.len() / lead;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            assert!(i < lead, "select_rows index {i} out of range {lead}");
            data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        self.unary(
            Tensor::new(shape, data),
            Op::SelectRows {
                x: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn sum(&self) -> Var<'g> {
        let x = self.value();
        let total = x.data().iter().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }
}
