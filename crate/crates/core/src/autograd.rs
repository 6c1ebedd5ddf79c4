//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every operation evaluates eagerly and, when any input requires a
//! gradient, records a closure that maps the output gradient onto its
//! inputs. [`Graph::backward`] replays the tape in reverse.

use crate::scalar::{self, Scalar};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(Var, &Matrix<T>, &mut Grads<'_, T>)>;

struct Node<T> {
    value: Matrix<T>,
    needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Gradient accumulator handed to backward closures.
pub struct Grads<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Matrix<T>>],
}

impl<T: Scalar> Grads<'_, T> {
    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn acc(&mut self, v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "gradient shape");
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Matrix<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), recording: true }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&mut self, value: Matrix<T>) -> Var {
        let needs_grad = self.recording;
        self.nodes.push(Node { value, needs_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node { value, needs_grad: false, backward: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a custom operation. `backward` receives the output variable,
    /// its gradient and the accumulator.
    pub fn custom(
        &mut self,
        value: Matrix<T>,
        parents: &[Var],
        backward: impl Fn(Var, &Matrix<T>, &mut Grads<'_, T>) + 'static,
    ) -> Var {
        let needs_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let backward: Option<BackwardFn<T>> = if needs_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { value, needs_grad, backward });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        self.grads[loss.0] = Some(Matrix::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            if let Some(bw) = &self.nodes[id].backward {
                let mut ctx = Grads { nodes: &self.nodes, grads: &mut self.grads };
                bw(Var(id), &g, &mut ctx);
            }
            self.grads[id] = Some(g);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.custom(value, &[a, b], move |_, g, ctx| {
            if ctx.needs(a) {
                let ga = g.matmul_nt(ctx.value(b));
                ctx.acc(a, ga);
            }
            if ctx.needs(b) {
                let gb = ctx.value(a).matmul_tn(g);
                ctx.acc(b, gb);
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(value, &[a, b], move |_, g, ctx| {
            ctx.acc(a, g.clone());
            ctx.acc(b, g.clone());
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(value, &[a, b], move |_, g, ctx| {
            ctx.acc(a, g.clone());
            ctx.acc(b, g.scale(-T::one()));
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(value, &[a, b], move |_, g, ctx| {
            if ctx.needs(a) {
                let ga = g.zip_map(ctx.value(b), |x, y| x * y);
                ctx.acc(a, ga);
            }
            if ctx.needs(b) {
                let gb = g.zip_map(ctx.value(a), |x, y| x * y);
                ctx.acc(b, gb);
            }
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.custom(value, &[a], move |_, g, ctx| ctx.acc(a, g.scale(s)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (rows, cols) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, cols), "add_row width");
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..rows {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.custom(value, &[a, row], move |_, g, ctx| {
            ctx.acc(a, g.clone());
            ctx.acc(row, g.column_sums());
        })
    }

    /// Multiplies row `i` of `a` by `col[i]` (`col` is `rows x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (rows, _) = self.value(a).shape();
        assert_eq!(self.value(col).shape(), (rows, 1), "mul_col height");
        let mut value = self.value(a).clone();
        for i in 0..rows {
            let s = self.value(col).get(i, 0);
            value.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        self.custom(value, &[a, col], move |_, g, ctx| {
            let rows = g.rows();
            if ctx.needs(a) {
                let c = ctx.value(col);
                let mut ga = g.clone();
                for i in 0..rows {
                    let s = c.get(i, 0);
                    ga.row_mut(i).iter_mut().for_each(|v| *v *= s);
                }
                ctx.acc(a, ga);
            }
            if ctx.needs(col) {
                let av = ctx.value(a);
                let gc = Matrix::from_fn(rows, 1, |i, _| {
                    g.row(i).iter().zip(av.row(i)).map(|(&x, &y)| x * y).sum()
                });
                ctx.acc(col, gc);
            }
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(scalar::silu);
        self.custom(value, &[a], move |_, g, ctx| {
            let ga = g.zip_map(ctx.value(a), |gv, x| {
                let s = scalar::sigmoid(x);
                gv * s * (T::one() + x * (T::one() - s))
            });
            ctx.acc(a, ga);
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(scalar::softplus);
        self.custom(value, &[a], move |_, g, ctx| {
            let ga = g.zip_map(ctx.value(a), |gv, x| gv * scalar::sigmoid(x));
            ctx.acc(a, ga);
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.custom(value, &[a], move |_, g, ctx| {
            let (r, c) = ctx.value(a).shape();
            ctx.acc(a, Matrix::filled(r, c, g.item()));
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `1 x cols` column sums.
    pub fn column_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).column_sums();
        self.custom(value, &[a], move |_, g, ctx| {
            let rows = ctx.value(a).rows();
            let ga = Matrix::from_fn(rows, g.cols(), |_, c| g.get(0, c));
            ctx.acc(a, ga);
        })
    }

    /// Rows of `a` in the order given by `idx` (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).select_rows(&idx);
        self.custom(value, &[a], move |_, g, ctx| {
            let (r, c) = ctx.value(a).shape();
            let mut ga = Matrix::zeros(r, c);
            for (i, &src) in idx.iter().enumerate() {
                for (d, &s) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                    *d += s;
                }
            }
            ctx.acc(a, ga);
        })
    }

    /// A `total_rows x cols` matrix where row `idx[i]` accumulates row `i` of `a`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Vec<usize>, total_rows: usize) -> Var {
        let cols = self.value(a).cols();
        let mut value = Matrix::zeros(total_rows, cols);
        for (i, &dst) in idx.iter().enumerate() {
            let src = self.value(a).row(i).to_vec();
            for (d, s) in value.row_mut(dst).iter_mut().zip(src) {
                *d += s;
            }
        }
        self.custom(value, &[a], move |_, g, ctx| ctx.acc(a, g.select_rows(&idx)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats).expect("concat_rows: column counts differ");
        let parts = parts.to_vec();
        self.custom(value, &parts.clone(), move |_, g, ctx| {
            let mut offset = 0;
            for &p in &parts {
                let n = ctx.value(p).rows();
                if ctx.needs(p) {
                    let idx: Vec<usize> = (offset..offset + n).collect();
                    ctx.acc(p, g.select_rows(&idx));
                }
                offset += n;
            }
        })
    }

    /// Column vector of the entries `a[rows[i], cols[i]]`.
    pub fn gather_entries(&mut self, a: Var, rows: Vec<usize>, cols: Vec<usize>) -> Var {
        assert_eq!(rows.len(), cols.len());
        let src = self.value(a);
        let value = Matrix::from_fn(rows.len(), 1, |i, _| src.get(rows[i], cols[i]));
        self.custom(value, &[a], move |_, g, ctx| {
            let (r, c) = ctx.value(a).shape();
            let mut ga = Matrix::zeros(r, c);
            for i in 0..rows.len() {
                let cur = ga.get(rows[i], cols[i]);
                ga.set(rows[i], cols[i], cur + g.get(i, 0));
            }
            ctx.acc(a, ga);
        })
    }

    /// Row-wise layer normalisation with learned `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (rows, d) = xv.shape();
        let dn = T::of(d as f64);
        let mut xhat = Matrix::zeros(rows, d);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut value = xhat.clone();
        for i in 0..rows {
            for ((o, &gg), &bb) in value.row_mut(i).iter_mut().zip(&gv).zip(&bv) {
                *o = *o * gg + bb;
            }
        }
        self.custom(value, &[x, gain, bias], move |_, g, ctx| {
            if ctx.needs(gain) {
                let gg = g.zip_map(&xhat, |a, b| a * b).column_sums();
                ctx.acc(gain, gg);
            }
            if ctx.needs(bias) {
                ctx.acc(bias, g.column_sums());
            }
            if ctx.needs(x) {
                let gamma = ctx.value(gain).data().to_vec();
                let mut gx = Matrix::zeros(rows, d);
                for i in 0..rows {
                    let dxhat: Vec<T> = g.row(i).iter().zip(&gamma).map(|(&a, &b)| a * b).collect();
                    let xh = xhat.row(i);
                    let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                    let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for ((o, &dv), &xv) in gx.row_mut(i).iter_mut().zip(&dxhat).zip(xh) {
                        *o = rstd[i] * (dv - mean_d - xv * mean_dx);
                    }
                }
                ctx.acc(x, gx);
            }
        })
    }

    /// `Σ_r w_r Σ_c (pred_rc − target_rc)²` as a `1 x 1` value.
    pub fn weighted_sq_error(&mut self, pred: Var, target: Matrix<T>, row_weights: Vec<T>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "weighted_sq_error shape");
        assert_eq!(row_weights.len(), pv.rows());
        let mut total = T::zero();
        for (r, &w) in row_weights.iter().enumerate() {
            let s: T = pv.row(r).iter().zip(target.row(r)).map(|(&p, &t)| (p - t) * (p - t)).sum();
            total += w * s;
        }
        self.custom(Matrix::scalar(total), &[pred], move |_, g, ctx| {
            let gs = g.item();
            let pv = ctx.value(pred);
            let mut gp = Matrix::zeros(pv.rows(), pv.cols());
            for (r, &w) in row_weights.iter().enumerate() {
                let k = T::of(2.0) * w * gs;
                for ((o, &p), &t) in gp.row_mut(r).iter_mut().zip(pv.row(r)).zip(target.row(r)) {
                    *o = k * (p - t);
                }
            }
            ctx.acc(pred, gp);
        })
    }
}


#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;

    fn m(rows: usize, cols: usize, seed: f64) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |r, c| ((r * cols + c) as f64 * 0.731 + seed).sin())
    }

    #[test]
    fn matmul_and_elementwise_gradients() {
        let err = check(&[m(3, 4, 0.1), m(4, 2, 0.7), m(3, 2, 1.3)], |g, v| {
            let p = g.matmul(v[0], v[1]);
            let q = g.mul(p, v[2]);
            let r = g.silu(q);
            let s = g.softplus(r);
            let t = g.sub(s, v[2]);
            let u = g.scale(t, 0.7);
            let w = g.mul(u, u);
            g.mean(w)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn broadcast_and_indexing_gradients() {
        let err = check(&[m(4, 3, 0.2), m(1, 3, 0.5), m(4, 1, 0.9)], |g, v| {
            let a = g.add_row(v[0], v[1]);
            let b = g.mul_col(a, v[2]);
            let c = g.gather_rows(b, vec![3, 0, 0, 2]);
            let d = g.scatter_add_rows(c, vec![1, 1, 0, 4], 5);
            let e = g.concat_rows(&[d, v[1], a]);
            let f = g.column_sums(e);
            let h = g.gather_entries(e, vec![0, 2, 5], vec![1, 0, 2]);
            let f2 = g.mul(f, f);
            let s1 = g.sum(f2);
            let h2 = g.mul(h, h);
            let s2 = g.sum(h2);
            g.add(s1, s2)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_gradient() {
        let err = check(&[m(5, 6, 0.3), m(1, 6, 0.8), m(1, 6, 1.1), m(5, 6, 2.0)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            let z = g.mul(y, v[3]);
            let z = g.silu(z);
            g.sum(z)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn weighted_sq_error_gradient() {
        let target = m(3, 4, 5.0);
        let err = check(&[m(3, 4, 0.4)], move |g, v| g.weighted_sq_error(v[0], target.clone(), vec![0.5, 0.0, 2.0]));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(m(2, 8, 0.0));
        let one = g.constant(Matrix::filled(1, 8, 1.0));
        let zero = g.constant(Matrix::zeros(1, 8));
        let y = g.layer_norm(x, one, zero, 0.0);
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Matrix::filled(2, 2, 1.0));
        let c = g.constant(Matrix::filled(2, 2, 3.0));
        let p = g.mul(a, c);
        let l = g.sum(p);
        g.backward(l);
        assert_eq!(g.grad(a).unwrap().data(), &[3.0; 4]);
        assert!(g.grad(c).is_none());
    }
}
