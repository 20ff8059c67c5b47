//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Operations record a vector-Jacobian closure per operand during the forward
//! pass; `Tape::backward` replays the tape once in reverse. Values are
//! immutable, so closures capture `Rc<Tensor>` handles instead of copies.

use crate::error::{invalid, Error, Result};
use crate::params::{GradMap, ParamSet};
use crate::tensor::Tensor;
use std::cell::{Cell, RefCell};
use std::rc::Rc;

type VjpFn = Box<dyn Fn(&Tensor) -> Tensor>;

struct Node {
    parents: Vec<usize>,
    vjps: Vec<VjpFn>,
    param: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    value: Rc<Tensor>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, vjps: Vec<VjpFn>, param: Option<String>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node { parents, vjps, param });
        Var {
            tape: self,
            idx,
            value: Rc::new(value),
        }
    }

    /// A leaf with no adjoint of interest.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], vec![], None)
    }

    pub fn constant_scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// A named leaf whose gradient is reported by `backward`. Registering the
    /// same name more than once is allowed; gradients sum.
    pub fn param(&self, name: &str, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), vec![], vec![], Some(name.to_string()))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// parameter in `params`; parameters unreachable from the loss get zeros.
    /// A tape can be swept once.
    pub fn backward(&self, loss: &Var<'_>, params: &ParamSet) -> Result<GradMap> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(invalid("backward: loss from a different tape"));
        }
        if loss.value.numel() != 1 {
            return Err(invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.value.shape()
            )));
        }
        if self.spent.replace(true) {
            return Err(invalid("backward invoked twice on one tape"));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(Tensor::full(loss.value.shape(), 1.0));

        let mut out = GradMap::new();
        for idx in (0..=loss.idx).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if let Some(name) = &node.param {
                match out.get_mut(name) {
                    Some(acc) => *acc = acc.add(&grad)?,
                    None => {
                        out.insert(name.clone(), grad.clone());
                    }
                }
            }
            for (parent, vjp) in node.parents.iter().zip(&node.vjps) {
                let pg = vjp(&grad);
                grads[*parent] = Some(match grads[*parent].take() {
                    Some(acc) => acc.add(&pg)?,
                    None => pg,
                });
            }
        }
        for (name, p) in params.iter() {
            out.entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
        }
        Ok(out)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(sigmoid(z)).
pub fn log_sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    fn unop(&self, out: Tensor, vjp: VjpFn) -> Var<'t> {
        self.tape.push(out, vec![self.idx], vec![vjp], None)
    }

    fn binop(&self, other: &Var<'t>, out: Tensor, vjp_a: VjpFn, vjp_b: VjpFn) -> Var<'t> {
        self.tape
            .push(out, vec![self.idx, other.idx], vec![vjp_a, vjp_b], None)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value.add(&other.value)?;
        Ok(self.binop(other, out, Box::new(|g| g.clone()), Box::new(|g| g.clone())))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value.sub(&other.value)?;
        Ok(self.binop(other, out, Box::new(|g| g.clone()), Box::new(|g| g.scale(-1.0))))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value.mul(&other.value)?;
        let a = self.value.clone();
        let b = other.value.clone();
        Ok(self.binop(
            other,
            out,
            Box::new(move |g| g.mul(&b).expect("shape checked")),
            Box::new(move |g| g.mul(&a).expect("shape checked")),
        ))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unop(self.value.scale(c), Box::new(move |g| g.scale(c)))
    }

    pub fn relu(&self) -> Var<'t> {
        let mask = self.value.clone();
        self.unop(
            self.value.map(|v| v.max(0.0)),
            Box::new(move |g| {
                g.zip(&mask, "relu_vjp", |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                    .expect("shape checked")
            }),
        )
    }

    pub fn exp(&self) -> Var<'t> {
        let out = self.value.map(f64::exp);
        let saved = out.clone();
        self.unop(out, Box::new(move |g| g.mul(&saved).expect("shape checked")))
    }

    pub fn log_sigmoid(&self) -> Var<'t> {
        let x = self.value.clone();
        self.unop(
            self.value.map(log_sigmoid_scalar),
            Box::new(move |g| {
                g.zip(&x, "log_sigmoid_vjp", |gi, xi| gi * sigmoid(-xi))
                    .expect("shape checked")
            }),
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value.clone();
        self.unop(
            self.value.map(|v| v.clamp(lo, hi)),
            Box::new(move |g| {
                g.zip(&x, "clamp_vjp", |gi, xi| if xi >= lo && xi <= hi { gi } else { 0.0 })
                    .expect("shape checked")
            }),
        )
    }

    /// Elementwise minimum; ties route the adjoint to `self`.
    pub fn min2(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value.zip(&other.value, "min2", f64::min)?;
        let a = self.value.clone();
        let b = other.value.clone();
        let a2 = a.clone();
        let b2 = b.clone();
        Ok(self.binop(
            other,
            out,
            Box::new(move |g| {
                let sel = a.zip(&b, "min2_vjp", |x, y| if x <= y { 1.0 } else { 0.0 }).unwrap();
                g.mul(&sel).expect("shape checked")
            }),
            Box::new(move |g| {
                let sel = a2.zip(&b2, "min2_vjp", |x, y| if x <= y { 0.0 } else { 1.0 }).unwrap();
                g.mul(&sel).expect("shape checked")
            }),
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let shape = self.value.shape().to_vec();
        self.unop(
            Tensor::scalar(self.value.sum()),
            Box::new(move |g| Tensor::full(&shape, g.item())),
        )
    }

    pub fn mean(&self) -> Var<'t> {
        let shape = self.value.shape().to_vec();
        let n = self.value.numel() as f64;
        self.unop(
            Tensor::scalar(self.value.sum() / n),
            Box::new(move |g| Tensor::full(&shape, g.item() / n)),
        )
    }

    /// Row sums of a 2-D tensor: [n, m] -> [n].
    pub fn row_sum(&self) -> Result<Var<'t>> {
        let shape = self.value.shape().to_vec();
        if shape.len() != 2 {
            return Err(invalid(format!("row_sum needs 2-D, got {shape:?}")));
        }
        let (n, m) = (shape[0], shape[1]);
        let out: Vec<f64> = (0..n).map(|i| self.value.row(i).iter().sum()).collect();
        Ok(self.unop(
            Tensor::new(vec![n], out)?,
            Box::new(move |g| {
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        d[i * m + j] = g.data()[i];
                    }
                }
                Tensor::new(vec![n, m], d).unwrap()
            }),
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let diff = self.value.sub(&other.value)?;
        let n = diff.numel() as f64;
        let out = Tensor::scalar(diff.norm_sq() / n);
        let d1 = diff.clone();
        let d2 = diff;
        Ok(self.binop(
            other,
            out,
            Box::new(move |g| d1.scale(2.0 * g.item() / n)),
            Box::new(move |g| d2.scale(-2.0 * g.item() / n)),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value.reshaped(shape)?;
        let back = self.value.shape().to_vec();
        Ok(self.unop(out, Box::new(move |g| g.reshaped(&back).expect("same numel"))))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value.matmul(&other.value)?;
        let a = self.value.clone();
        let b = other.value.clone();
        Ok(self.binop(
            other,
            out,
            Box::new(move |g| g.matmul(&b.transposed().unwrap()).unwrap()),
            Box::new(move |g| a.transposed().unwrap().matmul(g).unwrap()),
        ))
    }

    /// Fused affine map: x [n, i] * w^T [i, o] + b [o] broadcast over rows.
    pub fn linear(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let xs = self.value.shape();
        let ws = w.value.shape();
        let bs = b.value.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if bs != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "linear_bias",
                lhs: ws.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let xr = self.value.row(r);
            let orow = &mut out[r * o..(r + 1) * o];
            orow.copy_from_slice(b.value.data());
            for c in 0..i {
                let xv = xr[c];
                if xv == 0.0 {
                    continue;
                }
                for (j, oj) in orow.iter_mut().enumerate() {
                    *oj += xv * w.value.data()[j * i + c];
                }
            }
        }
        let xv = self.value.clone();
        let wv = w.value.clone();
        let vjp_x: VjpFn = Box::new(move |g| g.matmul(&wv).unwrap());
        let vjp_w: VjpFn = Box::new(move |g| g.transposed().unwrap().matmul(&xv).unwrap());
        let vjp_b: VjpFn = Box::new(move |g| {
            let (n, o) = (g.shape()[0], g.shape()[1]);
            let mut d = vec![0.0; o];
            for r in 0..n {
                for j in 0..o {
                    d[j] += g.data()[r * o + j];
                }
            }
            Tensor::new(vec![o], d).unwrap()
        });
        Ok(self.tape.push(
            Tensor::new(vec![n, o], out)?,
            vec![self.idx, w.idx, b.idx],
            vec![vjp_x, vjp_w, vjp_b],
            None,
        ))
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(invalid("concat_cols: empty input"));
        }
        let n = parts[0].value.shape()[0];
        for p in parts {
            if p.value.shape().len() != 2 || p.value.shape()[0] != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].value.shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.value.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(p.value.row(r));
            }
            off += w;
        }
        let mut vjps: Vec<VjpFn> = Vec::with_capacity(parts.len());
        let mut off = 0;
        for &w in &widths {
            let start = off;
            vjps.push(Box::new(move |g: &Tensor| {
                let n = g.shape()[0];
                let mut d = vec![0.0; n * w];
                for r in 0..n {
                    d[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[start..start + w]);
                }
                Tensor::new(vec![n, w], d).unwrap()
            }));
            off += w;
        }
        let parents = parts.iter().map(|p| p.idx).collect();
        Ok(parts[0]
            .tape
            .push(Tensor::new(vec![n, total], out)?, parents, vjps, None))
    }

    /// Row gather from a 2-D table; the adjoint scatter-adds into the table.
    pub fn gather_rows(table: &Var<'t>, indices: &[usize]) -> Result<Var<'t>> {
        let ts = table.value.shape();
        if ts.len() != 2 {
            return Err(invalid(format!("gather_rows needs 2-D table, got {ts:?}")));
        }
        let (rows, d) = (ts[0], ts[1]);
        for &i in indices {
            if i >= rows {
                return Err(invalid(format!("gather_rows: index {i} out of {rows}")));
            }
        }
        let n = indices.len();
        let mut out = vec![0.0; n * d];
        for (r, &i) in indices.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(table.value.row(i));
        }
        let idx: Vec<usize> = indices.to_vec();
        Ok(table.unop(
            Tensor::new(vec![n, d], out)?,
            Box::new(move |g| {
                let mut grad = vec![0.0; rows * d];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        grad[i * d + j] += g.data()[r * d + j];
                    }
                }
                Tensor::new(vec![rows, d], grad).unwrap()
            }),
        ))
    }

    /// 2-D cross-correlation: input [c_in, h, w], kernels [c_out, c_in, kh, kw].
    pub fn conv2d(&self, kernels: &Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let is = self.value.shape().to_vec();
        let ks = kernels.value.shape().to_vec();
        if is.len() != 3 || ks.len() != 4 || is[0] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: is,
                rhs: ks,
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d: stride must be positive"));
        }
        let (c_in, h, w) = (is[0], is[1], is[2]);
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        let hp = h + 2 * padding;
        let wp = w + 2 * padding;
        if kh > hp || kw > wp {
            return Err(invalid(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp}"
            )));
        }
        if (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(invalid(format!(
                "conv2d: non-integral output extent for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
            )));
        }
        let oh = (hp - kh) / stride + 1;
        let ow = (wp - kw) / stride + 1;

        let inp = self.value.clone();
        let ker = kernels.value.clone();
        let mut out = vec![0.0; c_out * oh * ow];
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += inp.data()[(ic * h + iy as usize) * w + ix as usize]
                                    * ker.data()[((oc * c_in + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }

        let ker_b = ker.clone();
        let vjp_input: VjpFn = Box::new(move |g| {
            let mut d = vec![0.0; c_in * h * w];
            for oc in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g.data()[(oc * oh + oy) * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ic in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    d[(ic * h + iy as usize) * w + ix as usize] +=
                                        gv * ker_b.data()[((oc * c_in + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![c_in, h, w], d).unwrap()
        });
        let inp_b = inp;
        let vjp_kernels: VjpFn = Box::new(move |g| {
            let mut d = vec![0.0; c_out * c_in * kh * kw];
            for oc in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g.data()[(oc * oh + oy) * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ic in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    d[((oc * c_in + ic) * kh + ky) * kw + kx] +=
                                        gv * inp_b.data()[(ic * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![c_out, c_in, kh, kw], d).unwrap()
        });
        Ok(self.tape.push(
            Tensor::new(vec![c_out, oh, ow], out)?,
            vec![self.idx, kernels.idx],
            vec![vjp_input, vjp_kernels],
            None,
        ))
    }

    /// Global mean pooling: [c, h, w] -> [c].
    pub fn mean_pool2d(&self) -> Result<Var<'t>> {
        let s = self.value.shape().to_vec();
        if s.len() != 3 {
            return Err(invalid(format!("mean_pool2d needs 3-D, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let area = (h * w) as f64;
        let out: Vec<f64> = (0..c)
            .map(|ch| self.value.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / area)
            .collect();
        Ok(self.unop(
            Tensor::new(vec![c], out)?,
            Box::new(move |g| {
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gv = g.data()[ch] / area;
                    for v in &mut d[ch * h * w..(ch + 1) * h * w] {
                        *v = gv;
                    }
                }
                Tensor::new(vec![c, h, w], d).unwrap()
            }),
        ))
    }
}
