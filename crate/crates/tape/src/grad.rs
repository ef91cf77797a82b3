use std::collections::HashMap;

use crate::tensor::{Op, Tensor};

/// Reduces `g` back to `shape` by summing the axes that broadcasting
/// expanded. Adjoint of `broadcast_to`.
fn sum_to(g: &Tensor, shape: &[usize]) -> Tensor {
    let gs = g.shape();
    if gs == shape {
        return g.clone();
    }
    let extra = gs.len() - shape.len();
    let mut axes: Vec<usize> = (0..extra).collect();
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && gs[extra + i] != 1 {
            axes.push(extra + i);
        }
    }
    g.sum_axes(&axes, true).reshape(shape)
}

fn constant_mask(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::constant(x.with_value(|v| v.mapv(&f)))
}

/// Cotangent contributions of `node`'s parents given its own cotangent `g`.
/// Every contribution is built from public graph ops, which is what makes
/// the returned gradients differentiable again.
fn vjp(node: &Tensor, g: &Tensor) -> Vec<(Tensor, Tensor)> {
    match &node.inner.op {
        Op::Leaf | Op::Detach => vec![],
        Op::Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
        Op::Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.neg())],
        Op::Mul(a, b) => vec![(a.clone(), g.mul(b)), (b.clone(), g.mul(a))],
        Op::Div(a, b) => {
            let ga = g.div(b);
            let gb = g.mul(a).div(&b.mul(b)).neg();
            vec![(a.clone(), ga), (b.clone(), gb)]
        }
        Op::Neg(x) => vec![(x.clone(), g.neg())],
        Op::AddScalar(x) => vec![(x.clone(), g.clone())],
        Op::MulScalar(x, c) => vec![(x.clone(), g.mul_s(*c))],
        Op::PowScalar(x, p) => vec![(x.clone(), g.mul(&x.powf(p - 1.0).mul_s(*p)))],
        Op::Exp(x) => vec![(x.clone(), g.mul(node))],
        Op::Ln(x) => vec![(x.clone(), g.div(x))],
        Op::Tanh(x) => {
            let one_minus_sq = node.mul(node).neg().add_s(1.0);
            vec![(x.clone(), g.mul(&one_minus_sq))]
        }
        Op::Sigmoid(x) => {
            let d = node.mul(&node.neg().add_s(1.0));
            vec![(x.clone(), g.mul(&d))]
        }
        Op::Softplus(x) => vec![(x.clone(), g.mul(&x.sigmoid()))],
        Op::Relu(x) => {
            let mask = constant_mask(x, |v| if v > 0.0 { 1.0 } else { 0.0 });
            vec![(x.clone(), g.mul(&mask))]
        }
        Op::LeakyRelu(x, slope) => {
            let s = *slope;
            let mask = constant_mask(x, move |v| if v > 0.0 { 1.0 } else { s });
            vec![(x.clone(), g.mul(&mask))]
        }
        Op::Abs(x) => {
            let sign = constant_mask(x, f64::signum);
            vec![(x.clone(), g.mul(&sign))]
        }
        Op::Clamp(x, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            let mask = constant_mask(x, move |v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
            vec![(x.clone(), g.mul(&mask))]
        }
        Op::Sum { x, axes, keep } => {
            let xshape = x.shape();
            let gk = if *keep {
                g.clone()
            } else {
                let mut shape = xshape.clone();
                let mut sorted = axes.clone();
                sorted.sort_unstable();
                sorted.dedup();
                for &ax in &sorted {
                    shape[ax] = 1;
                }
                g.reshape(&shape)
            };
            vec![(x.clone(), gk.broadcast_to(&xshape))]
        }
        Op::Broadcast { x, .. } => vec![(x.clone(), sum_to(g, &x.shape()))],
        Op::Reshape { x, .. } => vec![(x.clone(), g.reshape(&x.shape()))],
        Op::Permute { x, axes } => {
            let mut inv = vec![0usize; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            vec![(x.clone(), g.permute(&inv))]
        }
        Op::Matmul(a, b) => vec![
            (a.clone(), g.matmul(&b.t())),
            (b.clone(), a.t().matmul(g)),
        ],
        Op::Conv2d { x, w, stride, pad } => {
            let xs = x.shape();
            let gx = g.conv2d_transpose(w, *stride, *pad, (xs[2], xs[3]));
            let ws = w.shape();
            let gw = x.conv2d_wgrad(g, *stride, *pad, (ws[0], ws[1], ws[2], ws[3]));
            vec![(x.clone(), gx), (w.clone(), gw)]
        }
        Op::ConvT2d { y, w, stride, pad } => {
            let gy = g.conv2d(w, *stride, *pad);
            let ws = w.shape();
            let gw = g.conv2d_wgrad(y, *stride, *pad, (ws[0], ws[1], ws[2], ws[3]));
            vec![(y.clone(), gy), (w.clone(), gw)]
        }
        Op::ConvWG { x, gy, stride, pad } => {
            let xs = x.shape();
            let gx = gy.conv2d_transpose(g, *stride, *pad, (xs[2], xs[3]));
            let ggy = x.conv2d(g, *stride, *pad);
            vec![(x.clone(), gx), (gy.clone(), ggy)]
        }
        Op::Concat { parts, axis } => {
            let mut out = Vec::with_capacity(parts.len());
            let mut offset = 0usize;
            for p in parts {
                let len = p.shape()[*axis];
                out.push((p.clone(), g.slice_axis(*axis, offset, len)));
                offset += len;
            }
            out
        }
        Op::SliceAxis { x, axis, start, len } => {
            let total = x.shape()[*axis];
            vec![(x.clone(), g.pad_zero(*axis, *start, total - start - len))]
        }
        Op::PadZero { x, axis, before, .. } => {
            let len = x.shape()[*axis];
            vec![(x.clone(), g.slice_axis(*axis, *before, len))]
        }
        Op::Rows { x, ids } => {
            let rows = x.shape()[0];
            vec![(x.clone(), g.scatter_rows(ids, rows))]
        }
        Op::ScatterRows { x, ids, .. } => vec![(x.clone(), g.rows(ids))],
    }
}

fn parents(t: &Tensor) -> Vec<Tensor> {
    match &t.inner.op {
        Op::Leaf | Op::Detach => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
            vec![a.clone(), b.clone()]
        }
        Op::Neg(x)
        | Op::AddScalar(x)
        | Op::MulScalar(x, _)
        | Op::PowScalar(x, _)
        | Op::Exp(x)
        | Op::Ln(x)
        | Op::Tanh(x)
        | Op::Sigmoid(x)
        | Op::Softplus(x)
        | Op::Relu(x)
        | Op::LeakyRelu(x, _)
        | Op::Abs(x)
        | Op::Clamp(x, _, _) => vec![x.clone()],
        Op::Sum { x, .. }
        | Op::Broadcast { x, .. }
        | Op::Reshape { x, .. }
        | Op::Permute { x, .. }
        | Op::SliceAxis { x, .. }
        | Op::PadZero { x, .. }
        | Op::Rows { x, .. }
        | Op::ScatterRows { x, .. } => vec![x.clone()],
        Op::Conv2d { x, w, .. } => vec![x.clone(), w.clone()],
        Op::ConvT2d { y, w, .. } => vec![y.clone(), w.clone()],
        Op::ConvWG { x, gy, .. } => vec![x.clone(), gy.clone()],
        Op::Concat { parts, .. } => parts.clone(),
    }
}

/// Gradients of `output` (summed if non-scalar) with respect to `wrt`.
/// Disconnected tensors get zero gradients. The results are graph tensors,
/// so they can be differentiated again.
pub fn grad(output: &Tensor, wrt: &[&Tensor]) -> Vec<Tensor> {
    let seed = Tensor::ones(&output.shape());
    grad_seeded(output, &seed, wrt)
}

/// Like [`grad`] with an explicit output cotangent (e.g. a one-hot seed for
/// extracting Jacobian rows).
pub fn grad_seeded(output: &Tensor, seed: &Tensor, wrt: &[&Tensor]) -> Vec<Tensor> {
    assert_eq!(
        output.shape(),
        seed.shape(),
        "grad seed shape {:?} must match output shape {:?}",
        seed.shape(),
        output.shape()
    );
    let mut reach: HashMap<u64, Tensor> = HashMap::new();
    if output.requires_grad() {
        let mut stack = vec![output.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || reach.contains_key(&t.id()) {
                continue;
            }
            reach.insert(t.id(), t.clone());
            for p in parents(&t) {
                if p.requires_grad() {
                    stack.push(p);
                }
            }
        }
    }

    let mut cot: HashMap<u64, Tensor> = HashMap::new();
    if reach.contains_key(&output.id()) {
        cot.insert(output.id(), seed.clone());
    }
    // Node ids increase from parents to children, so descending id order is
    // a reverse topological order of the DAG.
    let mut order: Vec<u64> = reach.keys().copied().collect();
    order.sort_unstable_by(|a, b| b.cmp(a));
    for id in order {
        let Some(g) = cot.get(&id).cloned() else {
            continue;
        };
        let node = &reach[&id];
        for (parent, contrib) in vjp(node, &g) {
            if !parent.requires_grad() {
                continue;
            }
            debug_assert_eq!(
                contrib.shape(),
                parent.shape(),
                "vjp shape mismatch for node {id}"
            );
            cot.entry(parent.id())
                .and_modify(|acc| *acc = acc.add(&contrib))
                .or_insert(contrib);
        }
    }

    wrt.iter()
        .map(|t| {
            cot.get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&t.shape()))
        })
        .collect()
}
