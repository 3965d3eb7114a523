//! Wengert-list tape: records primitive ops during the forward pass, then
//! walks them once in reverse to accumulate gradients.
//!
//! Nodes are appended in execution order, so the list is its own topological
//! order. A tape generation counter makes [`ValueId`]s from a previous graph
//! (or reads after `reset`) hard errors instead of silent garbage.

use crate::autodiff::ops::{
    bn_backward, bn_forward, conv2d_backward, conv2d_forward, softmax_xent_backward,
    softmax_xent_forward, BnDims, BnSaved, ConvDims,
};
use crate::autodiff::tensor::{check_finite, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Valid only for the generation
/// that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId {
    idx: usize,
    gen: u64,
}

enum OpKind<E: Element> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        dims: ConvDims,
        batch: Option<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        dims: BnDims,
        train: bool,
        saved: BnSaved<E>,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    ConcatChannels {
        parts: Vec<usize>,
        channels: Vec<usize>,
    },
    CenterPixel {
        x: usize,
    },
    Sum {
        x: usize,
    },
    SoftmaxXent {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    needs_grad: bool,
    op: OpKind<E>,
}

/// Reverse-mode tape over [`Tensor`] values.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    gen: u64,
    done: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            gen: 0,
            done: false,
        }
    }

    /// Discard the recorded graph and start a new generation. Outstanding
    /// [`ValueId`]s become stale.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.gen += 1;
        self.done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn open(&self) -> Result<()> {
        if self.done {
            return Err(Error::StaleTape);
        }
        Ok(())
    }

    fn lookup(&self, id: ValueId) -> Result<usize> {
        if id.gen != self.gen || id.idx >= self.nodes.len() {
            return Err(Error::StaleTape);
        }
        Ok(id.idx)
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: OpKind<E>) -> Result<ValueId> {
        check_finite(value.data(), "forward value")?;
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Ok(ValueId { idx, gen: self.gen })
    }

    /// Record an input tensor. It is trainable iff it carries a gradient
    /// buffer (`requires_grad`).
    pub fn leaf(&mut self, tensor: Tensor<E>) -> Result<ValueId> {
        self.open()?;
        let needs_grad = tensor.requires_grad();
        self.push(tensor, needs_grad, OpKind::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor<E>) -> Result<ValueId> {
        self.open()?;
        self.push(tensor, false, OpKind::Leaf)
    }

    pub fn value(&self, id: ValueId) -> Result<&Tensor<E>> {
        Ok(&self.nodes[self.lookup(id)?].value)
    }

    /// Gradient of the last `backward` root with respect to this node.
    pub fn grad(&self, id: ValueId) -> Result<&[E]> {
        let idx = self.lookup(id)?;
        if !self.done {
            return Err(Error::Invalid("gradients read before backward".into()));
        }
        self.nodes[idx]
            .value
            .grad()
            .ok_or_else(|| Error::Invalid("node does not require gradients".into()))
    }

    /// Batch statistics computed by a train-mode batch norm node.
    pub fn bn_batch_stats(&self, id: ValueId) -> Result<(&[E], &[E])> {
        let idx = self.lookup(id)?;
        match &self.nodes[idx].op {
            OpKind::BatchNorm { saved, train, .. } if *train => Ok((&saved.mean, &saved.var)),
            _ => Err(Error::Invalid("not a train-mode batch norm node".into())),
        }
    }

    // --- op builders -------------------------------------------------------

    /// Zero-padded stride-1 cross-correlation, no bias. Accepts `[ci,h,w]`
    /// or batched `[n,ci,h,w]` input; kernel is `[co,ci,kh,kw]`.
    pub fn conv2d(&mut self, input: ValueId, kernel: ValueId, pad: usize) -> Result<ValueId> {
        self.open()?;
        let ii = self.lookup(input)?;
        let ki = self.lookup(kernel)?;
        let ishape = self.nodes[ii].value.shape().to_vec();
        let kshape = self.nodes[ki].value.shape().to_vec();
        if kshape.len() != 4 {
            return Err(Error::Shape(format!("conv kernel must be rank 4, got {kshape:?}")));
        }
        let (batch, ci, h, w) = match ishape.as_slice() {
            [c, h, w] => (None, *c, *h, *w),
            [n, c, h, w] => (Some(*n), *c, *h, *w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv input must be rank 3 or 4, got {ishape:?}"
                )))
            }
        };
        if kshape[1] != ci {
            return Err(Error::Shape(format!(
                "conv input has {ci} channels, kernel expects {}",
                kshape[1]
            )));
        }
        let dims = ConvDims {
            ci,
            h,
            w,
            co: kshape[0],
            kh: kshape[2],
            kw: kshape[3],
            pad,
        };
        dims.check()?;
        let (oh, ow) = dims.out_hw();
        let per = dims.co * oh * ow;
        let n = batch.unwrap_or(1);
        let mut out = vec![E::zero(); n * per];
        let in_per = ci * h * w;
        for s in 0..n {
            conv2d_forward(
                &dims,
                &self.nodes[ii].value.data()[s * in_per..(s + 1) * in_per],
                self.nodes[ki].value.data(),
                &mut out[s * per..(s + 1) * per],
            );
        }
        let shape = match batch {
            None => vec![dims.co, oh, ow],
            Some(n) => vec![n, dims.co, oh, ow],
        };
        let needs = self.nodes[ii].needs_grad || self.nodes[ki].needs_grad;
        self.push(
            Tensor::new(shape, out)?,
            needs,
            OpKind::Conv2d {
                input: ii,
                kernel: ki,
                dims,
                batch,
            },
        )
    }

    /// Batch normalization over `[n,c,h,w]`. `stats = None` uses batch
    /// statistics (train mode); `Some((mean, var))` uses the supplied fixed
    /// statistics (eval mode).
    pub fn batchnorm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        stats: Option<(&[E], &[E])>,
        eps: E,
    ) -> Result<ValueId> {
        self.open()?;
        let xi = self.lookup(x)?;
        let gi = self.lookup(gamma)?;
        let bi = self.lookup(beta)?;
        let xs = self.nodes[xi].value.shape();
        let [n, c, h, w] = match xs {
            [n, c, h, w] => [*n, *c, *h, *w],
            _ => {
                return Err(Error::Shape(format!(
                    "batch norm input must be rank 4, got {xs:?}"
                )))
            }
        };
        for (name, idx) in [("gamma", gi), ("beta", bi)] {
            let s = self.nodes[idx].value.shape();
            if s != [c] {
                return Err(Error::Shape(format!("{name} must be [{c}], got {s:?}")));
            }
        }
        let dims = BnDims { n, c, h, w };
        let train = stats.is_none();
        if train && dims.m() < 2 {
            return Err(Error::Invalid(
                "train-mode batch norm needs at least 2 samples per channel".into(),
            ));
        }
        if let Some((m, v)) = stats {
            if m.len() != c || v.len() != c {
                return Err(Error::Shape(format!(
                    "fixed statistics must have {c} channels, got {}/{}",
                    m.len(),
                    v.len()
                )));
            }
        }
        let needs = self.nodes[xi].needs_grad
            || self.nodes[gi].needs_grad
            || self.nodes[bi].needs_grad;
        let mut out = vec![E::zero(); self.nodes[xi].value.numel()];
        let saved = bn_forward(
            &dims,
            self.nodes[xi].value.data(),
            self.nodes[gi].value.data(),
            self.nodes[bi].value.data(),
            stats,
            eps,
            needs,
            &mut out,
        );
        self.push(
            Tensor::new(xs.to_vec(), out)?,
            needs,
            OpKind::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                dims,
                train,
                saved,
            },
        )
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.open()?;
        let xi = self.lookup(x)?;
        let node = &self.nodes[xi];
        let out: Vec<E> = node
            .value
            .data()
            .iter()
            .map(|&v| if v > E::zero() { v } else { E::zero() })
            .collect();
        let needs = node.needs_grad;
        let shape = node.value.shape().to_vec();
        self.push(Tensor::new(shape, out)?, needs, OpKind::Relu { x: xi })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.open()?;
        let ai = self.lookup(a)?;
        let bi = self.lookup(b)?;
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa != sb {
            return Err(Error::Shape(format!("add shape mismatch: {sa:?} vs {sb:?}")));
        }
        let out: Vec<E> = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        let shape = sa.to_vec();
        self.push(Tensor::new(shape, out)?, needs, OpKind::Add { a: ai, b: bi })
    }

    /// Channel-axis concatenation: rank-3 parts `[ci,h,w]` joined on axis 0,
    /// rank-4 parts `[n,ci,h,w]` joined on axis 1.
    pub fn concat_channels(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        self.open()?;
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let idxs: Vec<usize> = parts
            .iter()
            .map(|&p| self.lookup(p))
            .collect::<Result<_>>()?;
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        let rank = first.len();
        if rank != 3 && rank != 4 {
            return Err(Error::Shape(format!(
                "concat parts must be rank 3 or 4, got {first:?}"
            )));
        }
        let chan_axis = rank - 3;
        let mut channels = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            if s.len() != rank
                || s[..chan_axis] != first[..chan_axis]
                || s[chan_axis + 1..] != first[chan_axis + 1..]
            {
                return Err(Error::Shape(format!(
                    "concat part {s:?} incompatible with {first:?}"
                )));
            }
            channels.push(s[chan_axis]);
        }
        let total: usize = channels.iter().sum();
        let mut shape = first.clone();
        shape[chan_axis] = total;
        let plane: usize = first[chan_axis + 1..].iter().product();
        let n = if rank == 4 { first[0] } else { 1 };
        let mut out = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (&i, &ch) in idxs.iter().zip(&channels) {
                let src = self.nodes[i].value.data();
                out.extend_from_slice(&src[s * ch * plane..(s + 1) * ch * plane]);
            }
        }
        let needs = idxs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(
            Tensor::new(shape, out)?,
            needs,
            OpKind::ConcatChannels {
                parts: idxs,
                channels,
            },
        )
    }

    /// Extract the center spatial position of a `[n,c,h,w]` map as `[n,c]`.
    /// Spatial extents must be odd.
    pub fn center_pixel(&mut self, x: ValueId) -> Result<ValueId> {
        self.open()?;
        let xi = self.lookup(x)?;
        let s = self.nodes[xi].value.shape();
        let [n, c, h, w] = match s {
            [n, c, h, w] => [*n, *c, *h, *w],
            _ => {
                return Err(Error::Shape(format!(
                    "center_pixel input must be rank 4, got {s:?}"
                )))
            }
        };
        if h % 2 == 0 || w % 2 == 0 {
            return Err(Error::Shape(format!(
                "center_pixel needs odd spatial extents, got {h}x{w}"
            )));
        }
        let data = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(n * c);
        for ni in 0..n {
            for ci in 0..c {
                out.push(data[((ni * c + ci) * h + h / 2) * w + w / 2]);
            }
        }
        let needs = self.nodes[xi].needs_grad;
        self.push(
            Tensor::new(vec![n, c], out)?,
            needs,
            OpKind::CenterPixel { x: xi },
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        self.open()?;
        let xi = self.lookup(x)?;
        let total: f64 = self.nodes[xi].value.data().iter().map(|v| v.as_f64()).sum();
        let needs = self.nodes[xi].needs_grad;
        self.push(
            Tensor::scalar(E::from_f64(total)),
            needs,
            OpKind::Sum { x: xi },
        )
    }

    /// Mean softmax cross-entropy over the rows of `[n,c]` logits.
    pub fn softmax_xent(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        self.open()?;
        let li = self.lookup(logits)?;
        let s = self.nodes[li].value.shape();
        let [n, c] = match s {
            [n, c] => [*n, *c],
            _ => return Err(Error::Shape(format!("logits must be rank 2, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{n} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
        }
        let (loss, probs) = softmax_xent_forward(self.nodes[li].value.data(), n, c, labels);
        let needs = self.nodes[li].needs_grad;
        self.push(
            Tensor::scalar(loss),
            needs,
            OpKind::SoftmaxXent {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    // --- backward ----------------------------------------------------------

    /// Accumulate d(root)/d(node) into every node that needs gradients, in
    /// one reverse sweep. Consumes the tape generation: a second call (or
    /// further op recording) without `reset` is an error.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        self.open()?;
        let ri = self.lookup(root)?;
        let rshape = self.nodes[ri].value.shape();
        if rshape != [1] {
            return Err(Error::NonScalarRoot(rshape.to_vec()));
        }
        if !self.nodes[ri].needs_grad {
            return Err(Error::Invalid("backward root does not require gradients".into()));
        }
        let mut grads: Vec<Option<Vec<E>>> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                (i <= ri && n.needs_grad).then(|| vec![E::zero(); n.value.numel()])
            })
            .collect();
        grads[ri].as_mut().unwrap()[0] = E::one();

        let nodes = &self.nodes;
        for idx in (0..=ri).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            step_backward(nodes, idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = grad {
                check_finite(&g, "gradient")?;
                node.value.enable_grad();
                node.value.grad_mut().unwrap().copy_from_slice(&g);
            }
        }
        self.done = true;
        Ok(())
    }
}

/// Propagate one node's output gradient to its inputs.
fn step_backward<E: Element>(
    nodes: &[Node<E>],
    idx: usize,
    gout: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    match &nodes[idx].op {
        OpKind::Leaf => {}
        OpKind::Conv2d {
            input,
            kernel,
            dims,
            batch,
        } => {
            let n = batch.unwrap_or(1);
            let (oh, ow) = dims.out_hw();
            let per_out = dims.co * oh * ow;
            let per_in = dims.ci * dims.h * dims.w;
            // two passes so an input aliased as both operands still works
            if grads[*input].is_some() {
                let mut din = grads[*input].take().unwrap();
                for s in 0..n {
                    conv2d_backward(
                        dims,
                        &nodes[*input].value.data()[s * per_in..(s + 1) * per_in],
                        nodes[*kernel].value.data(),
                        &gout[s * per_out..(s + 1) * per_out],
                        Some(&mut din[s * per_in..(s + 1) * per_in]),
                        None,
                    );
                }
                grads[*input] = Some(din);
            }
            if grads[*kernel].is_some() {
                let mut dk = grads[*kernel].take().unwrap();
                for s in 0..n {
                    conv2d_backward(
                        dims,
                        &nodes[*input].value.data()[s * per_in..(s + 1) * per_in],
                        nodes[*kernel].value.data(),
                        &gout[s * per_out..(s + 1) * per_out],
                        None,
                        Some(&mut dk),
                    );
                }
                grads[*kernel] = Some(dk);
            }
        }
        OpKind::BatchNorm {
            x,
            gamma,
            beta,
            dims,
            train,
            saved,
        } => {
            let mut dx = grads[*x].take();
            let mut dg = grads[*gamma].take();
            let mut db = grads[*beta].take();
            bn_backward(
                dims,
                saved,
                nodes[*gamma].value.data(),
                gout,
                *train,
                dx.as_deref_mut(),
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(v) = dx {
                grads[*x] = Some(v);
            }
            if let Some(v) = dg {
                grads[*gamma] = Some(v);
            }
            if let Some(v) = db {
                grads[*beta] = Some(v);
            }
        }
        OpKind::Relu { x } => {
            if let Some(dx) = grads[*x].as_mut() {
                for (i, &v) in nodes[*x].value.data().iter().enumerate() {
                    if v > E::zero() {
                        dx[i] = dx[i] + gout[i];
                    }
                }
            }
        }
        OpKind::Add { a, b } => {
            for &src in &[*a, *b] {
                if let Some(d) = grads[src].as_mut() {
                    for (di, &gi) in d.iter_mut().zip(gout) {
                        *di = *di + gi;
                    }
                }
            }
        }
        OpKind::ConcatChannels { parts, channels } => {
            let out_shape = nodes[idx].value.shape();
            let rank = out_shape.len();
            let plane: usize = out_shape[rank - 2..].iter().product();
            let n = if rank == 4 { out_shape[0] } else { 1 };
            let total: usize = channels.iter().sum();
            for s in 0..n {
                let mut offset = s * total * plane;
                for (&p, &ch) in parts.iter().zip(channels) {
                    let len = ch * plane;
                    if let Some(d) = grads[p].as_mut() {
                        let dst = &mut d[s * len..(s + 1) * len];
                        for (di, &gi) in dst.iter_mut().zip(&gout[offset..offset + len]) {
                            *di = *di + gi;
                        }
                    }
                    offset += len;
                }
            }
        }
        OpKind::CenterPixel { x } => {
            if let Some(dx) = grads[*x].as_mut() {
                let s = nodes[*x].value.shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                for ni in 0..n {
                    for ci in 0..c {
                        let at = ((ni * c + ci) * h + h / 2) * w + w / 2;
                        dx[at] = dx[at] + gout[ni * c + ci];
                    }
                }
            }
        }
        OpKind::Sum { x } => {
            if let Some(dx) = grads[*x].as_mut() {
                for di in dx.iter_mut() {
                    *di = *di + gout[0];
                }
            }
        }
        OpKind::SoftmaxXent {
            logits,
            labels,
            probs,
        } => {
            if let Some(dl) = grads[*logits].as_mut() {
                let s = nodes[*logits].value.shape();
                softmax_xent_backward(probs, s[0], s[1], labels, gout[0], dl);
            }
        }
    }
}
