//! Computation tape: define-by-run forward recording with reverse replay.
//!
//! Each training step builds a fresh [`Tape`]. Parameters enter as leaves,
//! every primitive appends a node (topological order by construction), and
//! [`Tape::backward`] walks the record once in reverse, accumulating
//! gradients into the parameters.

use super::kernels;
use super::{Parameter, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Handle to a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

enum Op<F: Scalar> {
    Leaf {
        param: usize,
    },
    Input,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    GruCell {
        gi: NodeId,
        gh: NodeId,
        h: NodeId,
        gates: Vec<F>,
    },
    Embed {
        table: NodeId,
        ids: Vec<u32>,
    },
    StackTime {
        steps: Vec<(NodeId, usize)>,
    },
    GatherTime {
        x: NodeId,
        t_idx: Vec<usize>,
    },
    PermuteRows {
        x: NodeId,
        perm: Vec<usize>,
    },
    PrefixRows {
        x: NodeId,
    },
    AttnScores {
        q: NodeId,
        ann: NodeId,
    },
    AttnContext {
        w: NodeId,
        ann: NodeId,
    },
    MaskedSoftmax {
        x: NodeId,
        valid: Vec<usize>,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<F>,
    },
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<u32>,
        ignore: u32,
        probs: Vec<F>,
        counted: usize,
    },
}

pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    training: bool,
}

impl<F: Scalar> Tape<F> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].data
    }

    /// Leading dimension (batch rows) of a node.
    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].shape[0]
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar_value(&self, id: NodeId) -> F {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a parameter as a leaf (copies the current values).
    pub fn leaf(&mut self, param_idx: usize, t: &Tensor<F>) -> NodeId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: param_idx },
            t.requires_grad(),
        )
    }

    /// Record a constant input (no gradient flows into it).
    pub fn input(&mut self, shape: &[usize], data: Vec<F>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data, Op::Input, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::ZERO; m * n];
        kernels::gemm(m, k, n, self.data(a), self.data(b), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }, ng))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (r, c) = (sx[0], sx[1]);
        let mut out = self.data(x).to_vec();
        kernels::add_bias(r, c, &mut out, self.data(bias));
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(vec![r, c], out, Op::AddBias { x, bias }, ng))
    }

    fn binary_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if sb == [1] {
            Ok(sa.to_vec())
        } else if sa == [1] {
            Ok(sb.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(F, F) -> F,
        make: impl Fn(NodeId, NodeId) -> Op<F>,
    ) -> Result<NodeId> {
        let shape = self.binary_shape(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<F> = if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            da.iter().map(|&x| f(x, db[0])).collect()
        } else {
            db.iter().map(|&y| f(da[0], y)).collect()
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, make(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = vec![F::ZERO; self.data(x).len()];
        kernels::sigmoid_slice(self.data(x), &mut out);
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(x));
        self.push(shape, out, Op::Sigmoid { x }, ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut out = vec![F::ZERO; self.data(x).len()];
        kernels::tanh_slice(self.data(x), &mut out);
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(x));
        self.push(shape, out, Op::Tanh { x }, ng)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = F::ZERO;
        for &v in self.data(x) {
            acc += v;
        }
        let ng = self.needs(x);
        self.push(vec![1], vec![acc], Op::SumAll { x }, ng)
    }

    /// One GRU cell given the two pre-activation blocks (`[rows×3H]`, gate
    /// order reset/update/candidate) and the previous state (`[rows×H]`).
    pub fn gru_cell(&mut self, gi: NodeId, gh: NodeId, h: NodeId) -> Result<NodeId> {
        let (sgi, sgh, sh) = (self.shape(gi), self.shape(gh), self.shape(h));
        let ok = sgi.len() == 2
            && sgh == sgi
            && sh.len() == 2
            && sh[0] == sgi[0]
            && sgi[1] == 3 * sh[1];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "gru_cell",
                lhs: sgi.to_vec(),
                rhs: sh.to_vec(),
            });
        }
        let (rows, hidden) = (sh[0], sh[1]);
        let mut gates = vec![F::ZERO; rows * 3 * hidden];
        let mut h_new = vec![F::ZERO; rows * hidden];
        kernels::gru_cell_forward(
            rows,
            hidden,
            self.data(gi),
            self.data(gh),
            self.data(h),
            &mut gates,
            &mut h_new,
        );
        let ng = self.needs(gi) || self.needs(gh) || self.needs(h);
        Ok(self.push(
            vec![rows, hidden],
            h_new,
            Op::GruCell { gi, gh, h, gates },
            ng,
        ))
    }

    /// Embedding lookup: `table[V×E]` gathered by token ids.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embed",
                lhs: st.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, e) = (st[0], st[1]);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::InvalidTokenId {
                    id,
                    vocab_size: v,
                });
            }
        }
        let data = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            out.extend_from_slice(&data[id as usize * e..(id as usize + 1) * e]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), e],
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Stack per-timestep states `[r_s×H]` into annotations `[B×S×H]`.
    /// Rows beyond a step's `r_s` are zero (padded positions).
    pub fn stack_time(&mut self, steps: &[NodeId]) -> Result<NodeId> {
        assert!(!steps.is_empty(), "stack_time of zero steps");
        let h = self.shape(steps[0])[1];
        let b = steps.iter().map(|&s| self.rows(s)).max().unwrap();
        let s_len = steps.len();
        for &s in steps {
            if self.shape(s).len() != 2 || self.shape(s)[1] != h {
                return Err(Error::ShapeMismatch {
                    op: "stack_time",
                    lhs: self.shape(steps[0]).to_vec(),
                    rhs: self.shape(s).to_vec(),
                });
            }
        }
        let mut out = vec![F::ZERO; b * s_len * h];
        let mut meta = Vec::with_capacity(s_len);
        let mut ng = false;
        for (s, &step) in steps.iter().enumerate() {
            let rows = self.rows(step);
            meta.push((step, rows));
            ng |= self.needs(step);
            let data = self.data(step);
            for r in 0..rows {
                let dst = (r * s_len + s) * h;
                out[dst..dst + h].copy_from_slice(&data[r * h..(r + 1) * h]);
            }
        }
        Ok(self.push(vec![b, s_len, h], out, Op::StackTime { steps: meta }, ng))
    }

    /// Pick one time slice per row: `out[b] = x[b, t_idx[b], :]`.
    pub fn gather_time(&mut self, x: NodeId, t_idx: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 3 || t_idx.len() != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "gather_time",
                lhs: sx.to_vec(),
                rhs: vec![t_idx.len()],
            });
        }
        let (b, s_len, h) = (sx[0], sx[1], sx[2]);
        assert!(t_idx.iter().all(|&t| t < s_len), "gather_time index");
        let data = self.data(x);
        let mut out = Vec::with_capacity(b * h);
        for (r, &t) in t_idx.iter().enumerate() {
            let src = (r * s_len + t) * h;
            out.extend_from_slice(&data[src..src + h]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            vec![b, h],
            out,
            Op::GatherTime {
                x,
                t_idx: t_idx.to_vec(),
            },
            ng,
        ))
    }

    /// Reorder leading-dimension rows: `out[i] = x[perm[i]]`.
    pub fn permute_rows(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if perm.len() != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "permute_rows",
                lhs: sx,
                rhs: vec![perm.len()],
            });
        }
        let row_len: usize = sx[1..].iter().product();
        let data = self.data(x);
        let mut out = Vec::with_capacity(data.len());
        for &p in perm {
            assert!(p < sx[0], "permute_rows index");
            out.extend_from_slice(&data[p * row_len..(p + 1) * row_len]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            sx,
            out,
            Op::PermuteRows {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// First `rows` leading-dimension rows of `x`.
    pub fn prefix_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if rows > sx[0] {
            return Err(Error::ShapeMismatch {
                op: "prefix_rows",
                lhs: sx,
                rhs: vec![rows],
            });
        }
        if rows == sx[0] {
            return Ok(x);
        }
        let row_len: usize = sx[1..].iter().product();
        let out = self.data(x)[..rows * row_len].to_vec();
        let mut shape = sx;
        shape[0] = rows;
        let ng = self.needs(x);
        Ok(self.push(shape, out, Op::PrefixRows { x }, ng))
    }

    /// Attention scores: `out[b,s] = dot(q[b], ann[b,s])`; `q` may cover a
    /// prefix of `ann`'s batch rows.
    pub fn attn_scores(&mut self, q: NodeId, ann: NodeId) -> Result<NodeId> {
        let (sq, sa) = (self.shape(q), self.shape(ann));
        if sq.len() != 2 || sa.len() != 3 || sq[1] != sa[2] || sq[0] > sa[0] {
            return Err(Error::ShapeMismatch {
                op: "attn_scores",
                lhs: sq.to_vec(),
                rhs: sa.to_vec(),
            });
        }
        let (rows, s_len, h) = (sq[0], sa[1], sa[2]);
        let mut out = vec![F::ZERO; rows * s_len];
        kernels::attn_scores(rows, s_len, h, self.data(q), self.data(ann), &mut out);
        let ng = self.needs(q) || self.needs(ann);
        Ok(self.push(vec![rows, s_len], out, Op::AttnScores { q, ann }, ng))
    }

    /// Attention context: `out[b] = Σ_s w[b,s]·ann[b,s]`.
    pub fn attn_context(&mut self, w: NodeId, ann: NodeId) -> Result<NodeId> {
        let (sw, sa) = (self.shape(w), self.shape(ann));
        if sw.len() != 2 || sa.len() != 3 || sw[1] != sa[1] || sw[0] > sa[0] {
            return Err(Error::ShapeMismatch {
                op: "attn_context",
                lhs: sw.to_vec(),
                rhs: sa.to_vec(),
            });
        }
        let (rows, s_len, h) = (sw[0], sa[1], sa[2]);
        let mut out = vec![F::ZERO; rows * h];
        kernels::attn_context(rows, s_len, h, self.data(w), self.data(ann), &mut out);
        let ng = self.needs(w) || self.needs(ann);
        Ok(self.push(vec![rows, h], out, Op::AttnContext { w, ann }, ng))
    }

    /// Row softmax over the first `valid[b]` columns (PAD tail masked out).
    pub fn masked_softmax(&mut self, x: NodeId, valid: Vec<usize>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || valid.len() != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: sx,
                rhs: vec![valid.len()],
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        if valid.iter().any(|&v| v == 0 || v > cols) {
            return Err(Error::Config(format!(
                "masked_softmax: valid lengths must be in 1..={cols}"
            )));
        }
        let mut out = self.data(x).to_vec();
        kernels::softmax_rows_masked(rows, cols, &mut out, &valid);
        let ng = self.needs(x);
        Ok(self.push(sx, out, Op::MaskedSoftmax { x, valid }, ng))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (r, c1, c2) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            out.extend_from_slice(&da[i * c1..(i + 1) * c1]);
            out.extend_from_slice(&db[i * c2..(i + 1) * c2]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![r, c1 + c2], out, Op::ConcatCols { a, b }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_rows of zero parts");
        let c = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[1] != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            rows += sp[0];
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![rows, c],
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1/(1-rate)`. Identity when not training or `rate == 0`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut RngState) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let scale = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.data(x).len())
            .map(|_| {
                if rng.uniform() < rate {
                    F::ZERO
                } else {
                    scale
                }
            })
            .collect();
        let out: Vec<F> = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(x));
        Ok(self.push(shape, out, Op::Dropout { x, mask }, ng))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[M×V]`, skipping positions whose target equals `ignore`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        ignore: u32,
    ) -> Result<NodeId> {
        let sl = self.shape(logits);
        if sl.len() != 2 || targets.len() != sl[0] {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: sl.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (m, v) = (sl[0], sl[1]);
        for &t in targets {
            if t != ignore && t as usize >= v {
                return Err(Error::InvalidTokenId {
                    id: t,
                    vocab_size: v,
                });
            }
        }
        let counted = targets.iter().filter(|&&t| t != ignore).count();
        if counted == 0 {
            return Err(Error::EmptyInput(
                "cross entropy with every position ignored".into(),
            ));
        }
        let data = self.data(logits);
        let mut probs = vec![F::ZERO; m * v];
        let mut total = 0.0f64;
        for i in 0..m {
            let row = &data[i * v..(i + 1) * v];
            let mut max = row[0];
            for &e in row {
                if e > max {
                    max = e;
                }
            }
            let mut sum = F::ZERO;
            let prow = &mut probs[i * v..(i + 1) * v];
            for (p, &e) in prow.iter_mut().zip(row) {
                *p = (e - max).exp();
                sum += *p;
            }
            for p in prow.iter_mut() {
                *p = *p / sum;
            }
            let t = targets[i];
            if t != ignore {
                let lse = sum.ln().to_f64() + max.to_f64();
                total += lse - row[t as usize].to_f64();
            }
        }
        let loss = F::from_f64(total / counted as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                counted,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar loss; accumulates into `params[i].tensor`
    /// gradients for every leaf recorded with index `i`.
    pub fn backward(&mut self, loss: NodeId, params: &mut [Parameter<F>]) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.nodes[loss.0].shape.clone(),
                rhs: vec![1],
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads, params);
        }
        Ok(())
    }

    fn grad_buf<'a>(
        &self,
        grads: &'a mut [Option<Vec<F>>],
        id: NodeId,
    ) -> Option<&'a mut Vec<F>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let len = self.nodes[id.0].data.len();
        Some(grads[id.0].get_or_insert_with(|| vec![F::ZERO; len]))
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        params: &mut [Parameter<F>],
    ) {
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Leaf { param } => {
                let dst = params[*param].tensor.grad_mut();
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Matmul { a, b } => {
                let sa = &self.nodes[a.0].shape;
                let (m, k) = (sa[0], sa[1]);
                let n = self.nodes[b.0].shape[1];
                if let Some(da) = self.grad_buf(grads, *a) {
                    kernels::gemm_nt_acc(m, n, k, g, &self.nodes[b.0].data, da);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    kernels::gemm_tn_acc(m, k, n, &self.nodes[a.0].data, g, db);
                }
            }
            Op::AddBias { x, bias } => {
                let c = self.nodes[bias.0].data.len();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (d, &s) in dx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *bias) {
                    for row in g.chunks_exact(c) {
                        for (d, &s) in db.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                self.acc_broadcast(grads, *a, g, None);
                self.acc_broadcast(grads, *b, g, None);
            }
            Op::Sub { a, b } => {
                self.acc_broadcast(grads, *a, g, None);
                self.acc_broadcast_neg(grads, *b, g);
            }
            Op::Mul { a, b } => {
                let (da_src, db_src) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                self.acc_broadcast(grads, *a, g, Some(db_src));
                self.acc_broadcast(grads, *b, g, Some(da_src));
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].data;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, &s), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += s * yv * (F::ONE - yv);
                    }
                }
            }
            Op::Tanh { x } => {
                let y = &self.nodes[i].data;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, &s), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += s * (F::ONE - yv * yv);
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::GruCell { gi, gh, h, gates } => {
                let hidden = self.nodes[h.0].shape[1];
                let rows = self.nodes[h.0].shape[0];
                // Split borrows: gi/gh/h grads live in distinct slots.
                let mut d_gi = vec![F::ZERO; rows * 3 * hidden];
                let mut d_gh = vec![F::ZERO; rows * 3 * hidden];
                let mut d_h = vec![F::ZERO; rows * hidden];
                kernels::gru_cell_backward(
                    rows,
                    hidden,
                    &self.nodes[gh.0].data,
                    &self.nodes[h.0].data,
                    gates,
                    g,
                    &mut d_gi,
                    &mut d_gh,
                    &mut d_h,
                );
                self.acc_into(grads, *gi, &d_gi);
                self.acc_into(grads, *gh, &d_gh);
                self.acc_into(grads, *h, &d_h);
            }
            Op::Embed { table, ids } => {
                let e = self.nodes[table.0].shape[1];
                if let Some(dt) = self.grad_buf(grads, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * e..(id as usize + 1) * e];
                        let src = &g[row * e..(row + 1) * e];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::StackTime { steps } => {
                let s_len = steps.len();
                let h = self.nodes[i].shape[2];
                for (s, &(step, rows)) in steps.iter().enumerate() {
                    if let Some(ds) = self.grad_buf(grads, step) {
                        for r in 0..rows {
                            let src = (r * s_len + s) * h;
                            let dst = &mut ds[r * h..(r + 1) * h];
                            for (d, &v) in dst.iter_mut().zip(&g[src..src + h]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::GatherTime { x, t_idx } => {
                let sx = &self.nodes[x.0].shape;
                let (s_len, h) = (sx[1], sx[2]);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (r, &t) in t_idx.iter().enumerate() {
                        let dst = (r * s_len + t) * h;
                        for (d, &v) in dx[dst..dst + h].iter_mut().zip(&g[r * h..(r + 1) * h]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::PermuteRows { x, perm } => {
                let row_len: usize = self.nodes[x.0].shape[1..].iter().product();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (i_out, &p) in perm.iter().enumerate() {
                        let dst = &mut dx[p * row_len..(p + 1) * row_len];
                        let src = &g[i_out * row_len..(i_out + 1) * row_len];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
            Op::PrefixRows { x } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (d, &v) in dx.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::AttnScores { q, ann } => {
                let sa = &self.nodes[ann.0].shape;
                let (s_len, h) = (sa[1], sa[2]);
                let rows = self.nodes[q.0].shape[0];
                if let Some(dq) = self.grad_buf(grads, *q) {
                    // dq[b] += Σ_s g[b,s]·ann[b,s] — same form as a context.
                    let mut tmp = vec![F::ZERO; rows * h];
                    kernels::attn_context(rows, s_len, h, g, &self.nodes[ann.0].data, &mut tmp);
                    for (d, &v) in dq.iter_mut().zip(&tmp) {
                        *d += v;
                    }
                }
                if let Some(dann) = self.grad_buf(grads, *ann) {
                    let qd = &self.nodes[q.0].data;
                    for b in 0..rows {
                        for s in 0..s_len {
                            let w = g[b * s_len + s];
                            if w.to_f64() == 0.0 {
                                continue;
                            }
                            let dst = &mut dann[(b * s_len + s) * h..(b * s_len + s + 1) * h];
                            let src = &qd[b * h..(b + 1) * h];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += w * v;
                            }
                        }
                    }
                }
            }
            Op::AttnContext { w, ann } => {
                let sa = &self.nodes[ann.0].shape;
                let (s_len, h) = (sa[1], sa[2]);
                let rows = self.nodes[w.0].shape[0];
                if let Some(dw) = self.grad_buf(grads, *w) {
                    // dw[b,s] = dot(g[b], ann[b,s]) — same form as scores.
                    let mut tmp = vec![F::ZERO; rows * s_len];
                    kernels::attn_scores(rows, s_len, h, g, &self.nodes[ann.0].data, &mut tmp);
                    for (d, &v) in dw.iter_mut().zip(&tmp) {
                        *d += v;
                    }
                }
                if let Some(dann) = self.grad_buf(grads, *ann) {
                    let wd = &self.nodes[w.0].data;
                    for b in 0..rows {
                        for s in 0..s_len {
                            let ws = wd[b * s_len + s];
                            if ws.to_f64() == 0.0 {
                                continue;
                            }
                            let dst = &mut dann[(b * s_len + s) * h..(b * s_len + s + 1) * h];
                            let src = &g[b * h..(b + 1) * h];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += ws * v;
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, valid } => {
                let y = &self.nodes[i].data;
                let cols = self.nodes[i].shape[1];
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (b, &v) in valid.iter().enumerate() {
                        let yr = &y[b * cols..b * cols + v];
                        let gr = &g[b * cols..b * cols + v];
                        let mut dot = F::ZERO;
                        for (&yv, &gv) in yr.iter().zip(gr) {
                            dot += yv * gv;
                        }
                        let dr = &mut dx[b * cols..b * cols + v];
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let c1 = self.nodes[a.0].shape[1];
                let c2 = self.nodes[b.0].shape[1];
                let rows = self.nodes[a.0].shape[0];
                if let Some(da) = self.grad_buf(grads, *a) {
                    for r in 0..rows {
                        let src = &g[r * (c1 + c2)..r * (c1 + c2) + c1];
                        for (d, &v) in da[r * c1..(r + 1) * c1].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for r in 0..rows {
                        let src = &g[r * (c1 + c2) + c1..(r + 1) * (c1 + c2)];
                        for (d, &v) in db[r * c2..(r + 1) * c2].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    if let Some(dp) = self.grad_buf(grads, p) {
                        for (d, &v) in dp.iter_mut().zip(&g[offset..offset + len]) {
                            *d += v;
                        }
                    }
                    offset += len;
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, &s), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                ignore,
                probs,
                counted,
            } => {
                let v = self.nodes[logits.0].shape[1];
                let scale = g[0] / F::from_f64(*counted as f64);
                if let Some(dl) = self.grad_buf(grads, *logits) {
                    for (row, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let dst = &mut dl[row * v..(row + 1) * v];
                        let src = &probs[row * v..(row + 1) * v];
                        for (j, (d, &p)) in dst.iter_mut().zip(src).enumerate() {
                            let onehot = if j as u32 == t { F::ONE } else { F::ZERO };
                            *d += scale * (p - onehot);
                        }
                    }
                }
            }
        }
    }

    fn acc_into(&self, grads: &mut [Option<Vec<F>>], target: NodeId, src: &[F]) {
        if let Some(dt) = self.grad_buf(grads, target) {
            for (d, &s) in dt.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<F>>],
        target: NodeId,
        g: &[F],
        scale_by: Option<&Vec<F>>,
    ) {
        let len = self.nodes[target.0].data.len();
        if let Some(dt) = self.grad_buf(grads, target) {
            if len == g.len() {
                match scale_by {
                    Some(other) if other.len() == g.len() => {
                        for ((d, &s), &o) in dt.iter_mut().zip(g).zip(other) {
                            *d += s * o;
                        }
                    }
                    Some(other) => {
                        // other is scalar
                        let o = other[0];
                        for (d, &s) in dt.iter_mut().zip(g) {
                            *d += s * o;
                        }
                    }
                    None => {
                        for (d, &s) in dt.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            } else {
                // target is scalar: reduce
                let mut acc = F::ZERO;
                match scale_by {
                    Some(other) => {
                        for (&s, &o) in g.iter().zip(other) {
                            acc += s * o;
                        }
                    }
                    None => {
                        for &s in g {
                            acc += s;
                        }
                    }
                }
                dt[0] += acc;
            }
        }
    }

    fn acc_broadcast_neg(&self, grads: &mut [Option<Vec<F>>], target: NodeId, g: &[F]) {
        let len = self.nodes[target.0].data.len();
        if let Some(dt) = self.grad_buf(grads, target) {
            if len == g.len() {
                for (d, &s) in dt.iter_mut().zip(g) {
                    *d += -s;
                }
            } else {
                let mut acc = F::ZERO;
                for &s in g {
                    acc += s;
                }
                dt[0] += -acc;
            }
        }
    }
}
