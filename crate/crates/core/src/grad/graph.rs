use std::cell::RefCell;

use super::kernels::{axpy_shifted, dot, dot_shifted};
use super::tensor::{lit, Real, Tensor};
use super::GradError;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// Each of the `coeffs.len()` leading slices scaled by its own constant.
    ScaleBatch(Var, Vec<T>),
    MatMul {
        a: Var,
        b: Var,
        n: usize,
        k: usize,
        m: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        inp: usize,
        out: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    /// `(B, C, L) + (B, C)` broadcast over the last axis.
    AddOverTime {
        x: Var,
        v: Var,
        len: usize,
    },
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    len: usize,
    kernel: usize,
    dilation: usize,
}

impl ConvGeom {
    fn offset(&self, k: usize) -> isize {
        (k as isize - (self.kernel / 2) as isize) * self.dilation as isize
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record-on-execute tape for reverse-mode differentiation.
///
/// Operations append nodes; [`Graph::backward`] walks them in reverse. Leaf
/// gradients persist on the graph and accumulate across `backward` calls
/// until [`Graph::zero_grad`].
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Vec<T>>>>,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> GradError {
    GradError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.borrow_mut().push(None);
        Var(nodes.len() - 1)
    }

    /// Records a copy of `t`; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn param(&self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), nodes[v.0].value.clone())
            .expect("recorded nodes have consistent shapes")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Vec<T>> {
        self.leaf_grads.borrow()[v.0].clone()
    }

    pub fn zero_grad(&self) {
        for g in self.leaf_grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    fn elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, GradError> {
        let (shape, value, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                return Err(mismatch(name, &na.shape, &nb.shape));
            }
            let value = na
                .value
                .iter()
                .zip(&nb.value)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                na.shape.clone(),
                value,
                na.requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(shape, value, op, rg))
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (shape, value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (
                n.shape.clone(),
                n.value.iter().map(|&x| f(x)).collect(),
                n.requires_grad,
            )
        };
        self.push(shape, value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Scales slice `i` along the leading axis by `coeffs[i]`.
    pub fn scale_batch(&self, a: Var, coeffs: &[T]) -> Result<Var, GradError> {
        let (shape, value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if n.shape[0] != coeffs.len() {
                return Err(mismatch("scale_batch", &n.shape, &[coeffs.len()]));
            }
            let stride = n.value.len() / coeffs.len();
            let value = n
                .value
                .chunks(stride)
                .zip(coeffs)
                .flat_map(|(row, &c)| row.iter().map(move |&x| x * c))
                .collect();
            (n.shape.clone(), value, n.requires_grad)
        };
        Ok(self.push(shape, value, Op::ScaleBatch(a, coeffs.to_vec()), rg))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].value.iter().copied().sum::<T>(),
                nodes[a.0].requires_grad,
            )
        };
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let sum: T = n.value.iter().copied().sum();
            (sum / lit(n.value.len() as f64), n.requires_grad)
        };
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var, GradError> {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                return Err(mismatch("mse", &na.shape, &nb.shape));
            }
            let sum: T = na
                .value
                .iter()
                .zip(&nb.value)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            (
                sum / lit(na.value.len() as f64),
                na.requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(vec![1], vec![s], Op::Mse(a, b), rg))
    }

    /// `(n, k) x (k, m) -> (n, m)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, GradError> {
        let (n, k, m, value, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(mismatch("matmul", &na.shape, &nb.shape));
            }
            let (n, k, m) = (na.shape[0], na.shape[1], nb.shape[1]);
            let out = matmul_kernel(&na.value, &nb.value, n, k, m);
            (n, k, m, out, na.requires_grad || nb.requires_grad)
        };
        Ok(self.push(vec![n, m], value, Op::MatMul { a, b, n, k, m }, rg))
    }

    /// `x (B, In) or (In)` times `w (In, Out)` plus optional `b (Out)`.
    pub fn dense(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var, GradError> {
        let (shape, value, batch, inp, out, rg) = {
            let nodes = self.nodes.borrow();
            let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
            let (batch, inp) = match nx.shape.as_slice() {
                [i] => (1, *i),
                [bs, i] => (*bs, *i),
                _ => return Err(mismatch("dense", &nx.shape, &nw.shape)),
            };
            if nw.shape.len() != 2 || nw.shape[0] != inp {
                return Err(mismatch("dense", &nx.shape, &nw.shape));
            }
            let out = nw.shape[1];
            let mut value = matmul_kernel(&nx.value, &nw.value, batch, inp, out);
            let mut rg = nx.requires_grad || nw.requires_grad;
            if let Some(b) = b {
                let nb = &nodes[b.0];
                if nb.shape != [out] {
                    return Err(mismatch("dense", &nw.shape, &nb.shape));
                }
                for row in value.chunks_mut(out) {
                    for (v, &bias) in row.iter_mut().zip(&nb.value) {
                        *v += bias;
                    }
                }
                rg |= nb.requires_grad;
            }
            let shape = if nx.shape.len() == 1 {
                vec![out]
            } else {
                vec![batch, out]
            };
            (shape, value, batch, inp, out, rg)
        };
        Ok(self.push(
            shape,
            value,
            Op::Dense {
                x,
                w,
                b,
                batch,
                inp,
                out,
            },
            rg,
        ))
    }

    /// Stride-1 "same" convolution: `x (B, Cin, L)`, `w (Cout, Cin, K)`,
    /// optional `b (Cout)`, zero padding of `dilation * (K - 1) / 2` per side.
    pub fn conv1d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    ) -> Result<Var, GradError> {
        let (geom, value, rg) = {
            let nodes = self.nodes.borrow();
            let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
            if nx.shape.len() != 3 || nw.shape.len() != 3 || nx.shape[1] != nw.shape[1] {
                return Err(mismatch("conv1d", &nx.shape, &nw.shape));
            }
            let kernel = nw.shape[2];
            if kernel % 2 == 0 {
                return Err(GradError::EvenKernel(kernel));
            }
            if dilation == 0 {
                return Err(GradError::ZeroDilation);
            }
            let geom = ConvGeom {
                batch: nx.shape[0],
                cin: nx.shape[1],
                cout: nw.shape[0],
                len: nx.shape[2],
                kernel,
                dilation,
            };
            let mut rg = nx.requires_grad || nw.requires_grad;
            let bias = match b {
                Some(b) => {
                    let nb = &nodes[b.0];
                    if nb.shape != [geom.cout] {
                        return Err(mismatch("conv1d", &nw.shape, &nb.shape));
                    }
                    rg |= nb.requires_grad;
                    Some(nb.value.as_slice())
                }
                None => None,
            };
            (geom, conv_forward(&nx.value, &nw.value, bias, geom), rg)
        };
        Ok(self.push(
            vec![geom.batch, geom.cout, geom.len],
            value,
            Op::Conv1d { x, w, b, geom },
            rg,
        ))
    }

    /// Adds `v (B, C)` to every time step of `x (B, C, L)`.
    pub fn add_over_time(&self, x: Var, v: Var) -> Result<Var, GradError> {
        let (shape, value, len, rg) = {
            let nodes = self.nodes.borrow();
            let (nx, nv) = (&nodes[x.0], &nodes[v.0]);
            if nx.shape.len() != 3 || nv.shape != nx.shape[..2] {
                return Err(mismatch("add_over_time", &nx.shape, &nv.shape));
            }
            let len = nx.shape[2];
            let value = nx
                .value
                .chunks(len)
                .zip(&nv.value)
                .flat_map(|(row, &c)| row.iter().map(move |&x| x + c))
                .collect();
            (
                nx.shape.clone(),
                value,
                len,
                nx.requires_grad || nv.requires_grad,
            )
        };
        Ok(self.push(shape, value, Op::AddOverTime { x, v, len }, rg))
    }

    /// Back-propagates from a one-element `loss`, adding `d loss / d leaf`
    /// into every gradient-tracking leaf.
    pub fn backward(&self, loss: Var) -> Result<(), GradError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(GradError::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Err(GradError::Detached);
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let mut leaf = self.leaf_grads.borrow_mut();
                match &mut leaf[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
    f(slot);
}

fn propagate<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)
            });
            accumulate(nodes, grads, *b, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)
            });
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)
            });
            accumulate(nodes, grads, *b, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g)
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate(nodes, grads, *a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                    *d += g * y;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                    *d += g * x;
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(nodes, grads, *a, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c)
            });
        }
        Op::ScaleBatch(a, coeffs) => {
            let stride = g.len() / coeffs.len();
            accumulate(nodes, grads, *a, |d| {
                for ((drow, grow), &c) in d.chunks_mut(stride).zip(g.chunks(stride)).zip(coeffs) {
                    drow.iter_mut().zip(grow).for_each(|(d, &g)| *d += g * c);
                }
            });
        }
        Op::Relu(a) => {
            let va = &nodes[a.0].value;
            accumulate(nodes, grads, *a, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                    if x > T::zero() {
                        *d += g;
                    }
                }
            });
        }
        Op::Tanh(a) => {
            let out = &node.value;
            accumulate(nodes, grads, *a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * (T::one() - y * y);
                }
            });
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean(a) => {
            let n: T = lit(nodes[a.0].value.len() as f64);
            accumulate(nodes, grads, *a, |d| {
                d.iter_mut().for_each(|d| *d += g[0] / n)
            });
        }
        Op::Mse(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let c = lit::<T>(2.0) * g[0] / lit(va.len() as f64);
            accumulate(nodes, grads, *a, |d| {
                for ((d, &x), &y) in d.iter_mut().zip(va).zip(vb) {
                    *d += c * (x - y);
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, &x), &y) in d.iter_mut().zip(va).zip(vb) {
                    *d -= c * (x - y);
                }
            });
        }
        Op::MatMul { a, b, n, k, m } => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            matmul_backward(nodes, grads, (*a, va), (*b, vb), g, *n, *k, *m);
        }
        Op::Dense {
            x,
            w,
            b,
            batch,
            inp,
            out,
        } => {
            let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
            matmul_backward(nodes, grads, (*x, vx), (*w, vw), g, *batch, *inp, *out);
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |d| {
                    for row in g.chunks(*out) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                });
            }
        }
        Op::Conv1d { x, w, b, geom } => {
            let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
            let geom = *geom;
            let len = geom.len;
            accumulate(nodes, grads, *x, |dx| {
                for bi in 0..geom.batch {
                    for o in 0..geom.cout {
                        let grow = &g[(bi * geom.cout + o) * len..][..len];
                        for i in 0..geom.cin {
                            let dxrow = &mut dx[(bi * geom.cin + i) * len..][..len];
                            for k in 0..geom.kernel {
                                let wv = vw[(o * geom.cin + i) * geom.kernel + k];
                                // out[l] used x[l + off]; so dx[j] += w g[j - off].
                                axpy_shifted(dxrow, grow, -geom.offset(k), wv);
                            }
                        }
                    }
                }
            });
            accumulate(nodes, grads, *w, |dw| {
                for bi in 0..geom.batch {
                    for o in 0..geom.cout {
                        let grow = &g[(bi * geom.cout + o) * len..][..len];
                        for i in 0..geom.cin {
                            let xrow = &vx[(bi * geom.cin + i) * len..][..len];
                            for k in 0..geom.kernel {
                                dw[(o * geom.cin + i) * geom.kernel + k] +=
                                    dot_shifted(grow, xrow, geom.offset(k));
                            }
                        }
                    }
                }
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |db| {
                    for bi in 0..geom.batch {
                        for (o, d) in db.iter_mut().enumerate() {
                            let grow = &g[(bi * geom.cout + o) * len..][..len];
                            *d += grow.iter().copied().sum::<T>();
                        }
                    }
                });
            }
        }
        Op::AddOverTime { x, v, len } => {
            accumulate(nodes, grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)
            });
            accumulate(nodes, grads, *v, |d| {
                for (d, row) in d.iter_mut().zip(g.chunks(*len)) {
                    *d += row.iter().copied().sum::<T>();
                }
            });
        }
    }
}

fn matmul_kernel<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let orow = &mut out[i * m..][..m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..][..m];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    (a, va): (Var, &[T]),
    (b, vb): (Var, &[T]),
    g: &[T],
    n: usize,
    k: usize,
    m: usize,
) {
    // dA = G B^T, dB = A^T G
    accumulate(nodes, grads, a, |da| {
        for i in 0..n {
            let grow = &g[i * m..][..m];
            for p in 0..k {
                da[i * k + p] += dot(grow, &vb[p * m..][..m]);
            }
        }
    });
    accumulate(nodes, grads, b, |db| {
        for i in 0..n {
            let grow = &g[i * m..][..m];
            for p in 0..k {
                let av = va[i * k + p];
                db[p * m..][..m]
                    .iter_mut()
                    .zip(grow)
                    .for_each(|(d, &gv)| *d += av * gv);
            }
        }
    });
}

fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, geom: ConvGeom) -> Vec<T> {
    let len = geom.len;
    let mut out = vec![T::zero(); geom.batch * geom.cout * len];
    for bi in 0..geom.batch {
        for o in 0..geom.cout {
            let orow = &mut out[(bi * geom.cout + o) * len..][..len];
            if let Some(bias) = bias {
                orow.iter_mut().for_each(|v| *v = bias[o]);
            }
            for i in 0..geom.cin {
                let xrow = &x[(bi * geom.cin + i) * len..][..len];
                for k in 0..geom.kernel {
                    let wv = w[(o * geom.cin + i) * geom.kernel + k];
                    axpy_shifted(orow, xrow, geom.offset(k), wv);
                }
            }
        }
    }
    out
}
