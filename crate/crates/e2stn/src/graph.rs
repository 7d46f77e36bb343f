//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its result
//! and the indices of its inputs. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients per node. The op set is exactly what
//! the model needs; each backward rule is verified against central finite
//! differences in the unit tests below.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, T),
    /// Add a length-n vector (shape [1,n] or [n]) to every row of a 2-D tensor.
    AddRowVec(usize, usize),
    /// Multiply every row of a 2-D tensor by a length-n vector.
    MulRowVec(usize, usize),
    Relu(usize),
    SoftmaxRows(usize),
    /// Row-wise normalization to zero mean, unit variance (pre gain/bias).
    LayerNormRows(usize),
    /// Divide each row by its sum; all-zero rows stay zero.
    NormalizeRowsToStochastic(usize),
    ColsSlice {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    /// sqrt(sum of squares) -> shape [1].
    FrobeniusNorm(usize),
    /// Column means of a 2-D tensor -> shape [1, n].
    ColMean(usize),
    /// Column population standard deviations (eps inside the sqrt) -> [1, n].
    ColStd(usize),
    /// Sum over batch rows of -log(probs[row, label]); probs clamped at 1e-12.
    NegLogPickSum {
        x: usize,
        labels: Vec<usize>,
        mean: bool,
    },
    MeanAll(usize),
    /// 1-D conv along the band axis, per channel, same padding.
    /// x: [C,B], w: [F,3], b: [F] -> [C,B,F].
    ConvBands {
        x: usize,
        w: usize,
        b: usize,
    },
    /// Depthwise conv collapsing the channel axis.
    /// x: [C,B,F], w: [F,D,C], b: [F*D] -> [B, F*D].
    ConvDepthCollapse {
        x: usize,
        w: usize,
        b: usize,
    },
    /// Per-map 1-D conv along rows (bands), same padding, no bias.
    /// x: [B,M], w: [M,3] -> [B,M].
    ConvBandsPerMap {
        x: usize,
        w: usize,
    },
    /// 1-D conv along the electrode axis, same padding.
    /// x: [L,Cin], w: [Cout,Cin,3], b: [Cout] -> [L,Cout].
    ConvElectrodes {
        x: usize,
        w: usize,
        b: usize,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Autodiff tape. Build values through the op methods, then call
/// [`Graph::backward`] on a scalar node.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    clamp_events: u64,
    ln_eps: T,
    std_eps: T,
}

/// Gradients per node index, produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. the given node; zero-shaped if the node
    /// does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            clamp_events: 0,
            ln_eps: T::from_f64(1e-8),
            std_eps: T::from_f64(1e-8),
        }
    }

    /// Number of times a probability hit the 1e-12 cross-entropy clamp.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(Op::MatMul(a.0, b.0), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.transposed();
        self.push(Op::Transpose(a.0), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x + y);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x * y);
        self.push(Op::MulElem(a.0, b.0), v)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * c);
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn add_row_vec(&mut self, a: Var, vvec: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let bv = &self.nodes[vvec.0].value;
        let n = m.cols();
        assert_eq!(bv.len(), n, "row-vector length != column count");
        let mut out = m.clone();
        for r in 0..m.rows() {
            for c in 0..n {
                let x = out.at2(r, c) + bv.data()[c];
                out.set2(r, c, x);
            }
        }
        self.push(Op::AddRowVec(a.0, vvec.0), out)
    }

    pub fn mul_row_vec(&mut self, a: Var, vvec: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let gv = &self.nodes[vvec.0].value;
        let n = m.cols();
        assert_eq!(gv.len(), n, "row-vector length != column count");
        let mut out = m.clone();
        for r in 0..m.rows() {
            for c in 0..n {
                let x = out.at2(r, c) * gv.data()[c];
                out.set2(r, c, x);
            }
        }
        self.push(Op::MulRowVec(a.0, vvec.0), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.max(T::zero()));
        self.push(Op::Relu(a.0), v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let (r, c) = (m.rows(), m.cols());
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let mut mx = T::neg_infinity();
            for j in 0..c {
                mx = mx.max(m.at2(i, j));
            }
            let mut sum = T::zero();
            for j in 0..c {
                let e = (m.at2(i, j) - mx).exp();
                out.set2(i, j, e);
                sum += e;
            }
            for j in 0..c {
                let e = out.at2(i, j) / sum;
                out.set2(i, j, e);
            }
        }
        self.push(Op::SoftmaxRows(a.0), out)
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let (r, c) = (m.rows(), m.cols());
        let n = T::from_f64(c as f64);
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let mut mean = T::zero();
            for j in 0..c {
                mean += m.at2(i, j);
            }
            mean = mean / n;
            let mut var = T::zero();
            for j in 0..c {
                let d = m.at2(i, j) - mean;
                var += d * d;
            }
            var = var / n;
            let inv = (var + self.ln_eps).sqrt().recip();
            for j in 0..c {
                out.set2(i, j, (m.at2(i, j) - mean) * inv);
            }
        }
        self.push(Op::LayerNormRows(a.0), out)
    }

    pub fn normalize_rows_stochastic(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let (r, c) = (m.rows(), m.cols());
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let mut s = T::zero();
            for j in 0..c {
                s += m.at2(i, j);
            }
            if s > T::zero() {
                for j in 0..c {
                    out.set2(i, j, m.at2(i, j) / s);
                }
            }
        }
        self.push(Op::NormalizeRowsToStochastic(a.0), out)
    }

    pub fn cols_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = &self.nodes[a.0].value;
        let (r, c) = (m.rows(), m.cols());
        assert!(start + len <= c, "column slice out of range");
        let mut out = Tensor::zeros(&[r, len]);
        for i in 0..r {
            for j in 0..len {
                out.set2(i, j, m.at2(i, start + j));
            }
        }
        self.push(Op::ColsSlice { x: a.0, start, len }, out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Tensor::zeros(&[r, total]);
        let mut off = 0;
        for p in parts {
            let m = &self.nodes[p.0].value;
            assert_eq!(m.rows(), r, "concat_cols row mismatch");
            for i in 0..r {
                for j in 0..m.cols() {
                    out.set2(i, off + j, m.at2(i, j));
                }
            }
            off += m.cols();
        }
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.nodes[parts[0].0].value.cols();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.rows()).sum();
        let mut out = Tensor::zeros(&[total, c]);
        let mut off = 0;
        for p in parts {
            let m = &self.nodes[p.0].value;
            assert_eq!(m.cols(), c, "concat_rows column mismatch");
            for i in 0..m.rows() {
                for j in 0..c {
                    out.set2(off + i, j, m.at2(i, j));
                }
            }
            off += m.rows();
        }
        self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0].value.reshaped(shape);
        self.push(Op::Reshape(a.0), v)
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.frobenius_norm();
        self.push(Op::FrobeniusNorm(a.0), Tensor::scalar(v))
    }

    pub fn col_mean(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let (r, c) = (m.rows(), m.cols());
        let n = T::from_f64(r as f64);
        let mut out = Tensor::zeros(&[1, c]);
        for j in 0..c {
            let mut s = T::zero();
            for i in 0..r {
                s += m.at2(i, j);
            }
            out.set2(0, j, s / n);
        }
        self.push(Op::ColMean(a.0), out)
    }

    pub fn col_std(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let (r, c) = (m.rows(), m.cols());
        let n = T::from_f64(r as f64);
        let mut out = Tensor::zeros(&[1, c]);
        for j in 0..c {
            let mut mean = T::zero();
            for i in 0..r {
                mean += m.at2(i, j);
            }
            mean = mean / n;
            let mut var = T::zero();
            for i in 0..r {
                let d = m.at2(i, j) - mean;
                var += d * d;
            }
            var = var / n;
            out.set2(0, j, (var + self.std_eps).sqrt());
        }
        self.push(Op::ColStd(a.0), out)
    }

    /// Cross-entropy body: probs is [N,P]; returns the (sum or mean over
    /// rows of) -log probs[i, labels[i]], clamping probabilities at 1e-12.
    pub fn neg_log_pick(&mut self, probs: Var, labels: &[usize], mean: bool) -> Var {
        let m = &self.nodes[probs.0].value;
        assert_eq!(m.rows(), labels.len(), "labels length != batch rows");
        let clamp = T::from_f64(1e-12);
        let mut total = T::zero();
        let mut clamped = 0u64;
        for (i, &l) in labels.iter().enumerate() {
            assert!(l < m.cols(), "label out of range");
            let mut p = m.at2(i, l);
            if p < clamp {
                p = clamp;
                clamped += 1;
            }
            total += -p.ln();
        }
        if mean {
            total = total / T::from_f64(labels.len() as f64);
        }
        self.clamp_events += clamped;
        self.push(
            Op::NegLogPickSum {
                x: probs.0,
                labels: labels.to_vec(),
                mean,
            },
            Tensor::scalar(total),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let n = T::from_f64(m.len() as f64);
        let s = m.data().iter().fold(T::zero(), |acc, &x| acc + x) / n;
        self.push(Op::MeanAll(a.0), Tensor::scalar(s))
    }

    pub fn conv_bands(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xm = &self.nodes[x.0].value;
        let wm = &self.nodes[w.0].value;
        let bm = &self.nodes[b.0].value;
        let (ch, bands) = (xm.rows(), xm.cols());
        let f = wm.rows();
        assert_eq!(wm.cols(), 3, "band conv kernel width must be 3");
        assert_eq!(bm.len(), f, "band conv bias length");
        let mut out = Tensor::zeros(&[ch, bands, f]);
        let od = out.data_mut();
        for c in 0..ch {
            for bb in 0..bands {
                for fi in 0..f {
                    let mut acc = bm.data()[fi];
                    for t in 0..3usize {
                        let src = bb as isize + t as isize - 1;
                        if src >= 0 && (src as usize) < bands {
                            acc += wm.at2(fi, t) * xm.at2(c, src as usize);
                        }
                    }
                    od[(c * bands + bb) * f + fi] = acc;
                }
            }
        }
        self.push(
            Op::ConvBands {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            out,
        )
    }

    pub fn conv_depth_collapse(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xm = &self.nodes[x.0].value;
        let wm = &self.nodes[w.0].value;
        let bm = &self.nodes[b.0].value;
        let (ch, bands, f) = (xm.shape()[0], xm.shape()[1], xm.shape()[2]);
        assert_eq!(wm.shape()[0], f, "depthwise kernel map count");
        let d = wm.shape()[1];
        assert_eq!(wm.shape()[2], ch, "depthwise kernel channel extent");
        assert_eq!(bm.len(), f * d, "depthwise bias length");
        let xd = xm.data();
        let wd = wm.data();
        let mut out = Tensor::zeros(&[bands, f * d]);
        for bb in 0..bands {
            for fi in 0..f {
                for di in 0..d {
                    let mut acc = bm.data()[fi * d + di];
                    for c in 0..ch {
                        acc += wd[(fi * d + di) * ch + c] * xd[(c * bands + bb) * f + fi];
                    }
                    out.set2(bb, fi * d + di, acc);
                }
            }
        }
        self.push(
            Op::ConvDepthCollapse {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            out,
        )
    }

    pub fn conv_bands_per_map(&mut self, x: Var, w: Var) -> Var {
        let xm = &self.nodes[x.0].value;
        let wm = &self.nodes[w.0].value;
        let (bands, maps) = (xm.rows(), xm.cols());
        assert_eq!(wm.rows(), maps, "per-map kernel count");
        assert_eq!(wm.cols(), 3, "per-map kernel width must be 3");
        let mut out = Tensor::zeros(&[bands, maps]);
        for bb in 0..bands {
            for j in 0..maps {
                let mut acc = T::zero();
                for t in 0..3usize {
                    let src = bb as isize + t as isize - 1;
                    if src >= 0 && (src as usize) < bands {
                        acc += wm.at2(j, t) * xm.at2(src as usize, j);
                    }
                }
                out.set2(bb, j, acc);
            }
        }
        self.push(Op::ConvBandsPerMap { x: x.0, w: w.0 }, out)
    }

    pub fn conv_electrodes(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xm = &self.nodes[x.0].value;
        let wm = &self.nodes[w.0].value;
        let bm = &self.nodes[b.0].value;
        let (l, cin) = (xm.rows(), xm.cols());
        let (cout, wcin, k) = (wm.shape()[0], wm.shape()[1], wm.shape()[2]);
        assert_eq!(wcin, cin, "electrode conv in-channels");
        assert_eq!(k, 3, "electrode conv kernel width must be 3");
        assert_eq!(bm.len(), cout, "electrode conv bias length");
        let wd = wm.data();
        let mut out = Tensor::zeros(&[l, cout]);
        for li in 0..l {
            for o in 0..cout {
                let mut acc = bm.data()[o];
                for t in 0..3usize {
                    let src = li as isize + t as isize - 1;
                    if src >= 0 && (src as usize) < l {
                        for ci in 0..cin {
                            acc += wd[(o * cin + ci) * 3 + t] * xm.at2(src as usize, ci);
                        }
                    }
                }
                out.set2(li, o, acc);
            }
        }
        self.push(
            Op::ConvElectrodes {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            out,
        )
    }

    /// Reverse pass from a scalar node. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let da = g.matmul(&bv.transposed());
                    let db = av.transposed().matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transposed());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::MulElem(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.zip_map(bv, |gi, bi| gi * bi));
                    accumulate(&mut grads, *b, g.zip_map(av, |gi, ai| gi * ai));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::AddRowVec(a, v) => {
                    let n = g.cols();
                    let mut dv = Tensor::zeros(self.nodes[*v].value.shape());
                    for r in 0..g.rows() {
                        for c in 0..n {
                            dv.data_mut()[c] += g.at2(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *v, dv);
                }
                Op::MulRowVec(a, v) => {
                    let av = &self.nodes[*a].value;
                    let vv = &self.nodes[*v].value;
                    let n = g.cols();
                    let mut da = Tensor::zeros(av.shape());
                    let mut dv = Tensor::zeros(vv.shape());
                    for r in 0..g.rows() {
                        for c in 0..n {
                            da.set2(r, c, g.at2(r, c) * vv.data()[c]);
                            dv.data_mut()[c] += g.at2(r, c) * av.at2(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip_map(av, |gi, x| if x > T::zero() { gi } else { T::zero() }),
                    );
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let mut dot = T::zero();
                        for j in 0..c {
                            dot += g.at2(i, j) * y.at2(i, j);
                        }
                        for j in 0..c {
                            dx.set2(i, j, y.at2(i, j) * (g.at2(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNormRows(a) => {
                    let xv = &self.nodes[*a].value;
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let n = T::from_f64(c as f64);
                    let mut dx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let mut mean = T::zero();
                        for j in 0..c {
                            mean += xv.at2(i, j);
                        }
                        mean = mean / n;
                        let mut var = T::zero();
                        for j in 0..c {
                            let d = xv.at2(i, j) - mean;
                            var += d * d;
                        }
                        var = var / n;
                        let inv = (var + self.ln_eps).sqrt().recip();
                        let mut gmean = T::zero();
                        let mut gydot = T::zero();
                        for j in 0..c {
                            gmean += g.at2(i, j);
                            gydot += g.at2(i, j) * y.at2(i, j);
                        }
                        gmean = gmean / n;
                        gydot = gydot / n;
                        for j in 0..c {
                            let v = (g.at2(i, j) - gmean - y.at2(i, j) * gydot) * inv;
                            dx.set2(i, j, v);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::NormalizeRowsToStochastic(a) => {
                    let xv = &self.nodes[*a].value;
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let mut s = T::zero();
                        for j in 0..c {
                            s += xv.at2(i, j);
                        }
                        if s <= T::zero() {
                            continue;
                        }
                        let mut gydot = T::zero();
                        for j in 0..c {
                            gydot += g.at2(i, j) * y.at2(i, j);
                        }
                        for j in 0..c {
                            dx.set2(i, j, (g.at2(i, j) - gydot) / s);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::ColsSlice { x, start, len } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Tensor::zeros(xv.shape());
                    for i in 0..g.rows() {
                        for j in 0..*len {
                            dx.set2(i, start + j, g.at2(i, j));
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.nodes[*p].value.cols();
                        let mut dp = Tensor::zeros(self.nodes[*p].value.shape());
                        for i in 0..g.rows() {
                            for j in 0..pc {
                                dp.set2(i, j, g.at2(i, off + j));
                            }
                        }
                        accumulate(&mut grads, *p, dp);
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pr = self.nodes[*p].value.rows();
                        let pc = self.nodes[*p].value.cols();
                        let mut dp = Tensor::zeros(&[pr, pc]);
                        for i in 0..pr {
                            for j in 0..pc {
                                dp.set2(i, j, g.at2(off + i, j));
                            }
                        }
                        accumulate(&mut grads, *p, dp);
                        off += pr;
                    }
                }
                Op::Reshape(a) => {
                    let dx = g.reshaped(self.nodes[*a].value.shape());
                    accumulate(&mut grads, *a, dx);
                }
                Op::FrobeniusNorm(a) => {
                    let xv = &self.nodes[*a].value;
                    let norm = node.value.item();
                    let gs = g.item();
                    let dx = if norm > T::zero() {
                        xv.map(|x| x * gs / norm)
                    } else {
                        Tensor::zeros(xv.shape())
                    };
                    accumulate(&mut grads, *a, dx);
                }
                Op::ColMean(a) => {
                    let xv = &self.nodes[*a].value;
                    let (r, c) = (xv.rows(), xv.cols());
                    let n = T::from_f64(r as f64);
                    let mut dx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        for j in 0..c {
                            dx.set2(i, j, g.at2(0, j) / n);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::ColStd(a) => {
                    let xv = &self.nodes[*a].value;
                    let y = &node.value;
                    let (r, c) = (xv.rows(), xv.cols());
                    let n = T::from_f64(r as f64);
                    let mut dx = Tensor::zeros(&[r, c]);
                    for j in 0..c {
                        let mut mean = T::zero();
                        for i in 0..r {
                            mean += xv.at2(i, j);
                        }
                        mean = mean / n;
                        let sd = y.at2(0, j);
                        for i in 0..r {
                            dx.set2(i, j, g.at2(0, j) * (xv.at2(i, j) - mean) / (n * sd));
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::NegLogPickSum { x, labels, mean } => {
                    let xv = &self.nodes[*x].value;
                    let clamp = T::from_f64(1e-12);
                    let gs = g.item();
                    let red = if *mean {
                        gs / T::from_f64(labels.len() as f64)
                    } else {
                        gs
                    };
                    let mut dx = Tensor::zeros(xv.shape());
                    for (i, &l) in labels.iter().enumerate() {
                        let p = xv.at2(i, l);
                        if p >= clamp {
                            dx.set2(i, l, -red / p);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanAll(a) => {
                    let xv = &self.nodes[*a].value;
                    let n = T::from_f64(xv.len() as f64);
                    let gs = g.item() / n;
                    accumulate(&mut grads, *a, xv.map(|_| gs));
                }
                Op::ConvBands { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let (ch, bands) = (xv.rows(), xv.cols());
                    let f = wv.rows();
                    let gd = g.data();
                    let mut dx = Tensor::zeros(&[ch, bands]);
                    let mut dw = Tensor::zeros(&[f, 3]);
                    let mut db = Tensor::zeros(self.nodes[*b].value.shape());
                    for c in 0..ch {
                        for bb in 0..bands {
                            for fi in 0..f {
                                let go = gd[(c * bands + bb) * f + fi];
                                if go == T::zero() {
                                    continue;
                                }
                                db.data_mut()[fi] += go;
                                for t in 0..3usize {
                                    let src = bb as isize + t as isize - 1;
                                    if src >= 0 && (src as usize) < bands {
                                        let s = src as usize;
                                        dx.data_mut()[c * bands + s] += go * wv.at2(fi, t);
                                        dw.data_mut()[fi * 3 + t] += go * xv.at2(c, s);
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::ConvDepthCollapse { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let (ch, bands, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let d = wv.shape()[1];
                    let xd = xv.data();
                    let wd = wv.data();
                    let mut dx = Tensor::zeros(&[ch, bands, f]);
                    let mut dw = Tensor::zeros(&[f, d, ch]);
                    let mut db = Tensor::zeros(self.nodes[*b].value.shape());
                    for bb in 0..bands {
                        for fi in 0..f {
                            for di in 0..d {
                                let go = g.at2(bb, fi * d + di);
                                if go == T::zero() {
                                    continue;
                                }
                                db.data_mut()[fi * d + di] += go;
                                for c in 0..ch {
                                    dx.data_mut()[(c * bands + bb) * f + fi] +=
                                        go * wd[(fi * d + di) * ch + c];
                                    dw.data_mut()[(fi * d + di) * ch + c] +=
                                        go * xd[(c * bands + bb) * f + fi];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::ConvBandsPerMap { x, w } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let (bands, maps) = (xv.rows(), xv.cols());
                    let mut dx = Tensor::zeros(&[bands, maps]);
                    let mut dw = Tensor::zeros(&[maps, 3]);
                    for bb in 0..bands {
                        for j in 0..maps {
                            let go = g.at2(bb, j);
                            if go == T::zero() {
                                continue;
                            }
                            for t in 0..3usize {
                                let src = bb as isize + t as isize - 1;
                                if src >= 0 && (src as usize) < bands {
                                    let s = src as usize;
                                    dx.data_mut()[s * maps + j] += go * wv.at2(j, t);
                                    dw.data_mut()[j * 3 + t] += go * xv.at2(s, j);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::ConvElectrodes { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let (l, cin) = (xv.rows(), xv.cols());
                    let cout = wv.shape()[0];
                    let wd = wv.data();
                    let mut dx = Tensor::zeros(&[l, cin]);
                    let mut dw = Tensor::zeros(&[cout, cin, 3]);
                    let mut db = Tensor::zeros(self.nodes[*b].value.shape());
                    for li in 0..l {
                        for o in 0..cout {
                            let go = g.at2(li, o);
                            if go == T::zero() {
                                continue;
                            }
                            db.data_mut()[o] += go;
                            for t in 0..3usize {
                                let src = li as isize + t as isize - 1;
                                if src >= 0 && (src as usize) < l {
                                    let s = src as usize;
                                    for ci in 0..cin {
                                        dx.data_mut()[s * cin + ci] +=
                                            go * wd[(o * cin + ci) * 3 + t];
                                        dw.data_mut()[(o * cin + ci) * 3 + t] +=
                                            go * xv.at2(s, ci);
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], idx: usize, add: Tensor<T>) {
    match &mut grads[idx] {
        Some(g) => g.add_assign(&add),
        slot @ None => *slot = Some(add),
    }
}
