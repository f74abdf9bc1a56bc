use std::collections::{HashMap, HashSet};

use crate::float::Float;
use crate::tensor::Tensor;
use crate::var::{with_grad_mode, Op, Var};

/// Gradients of `output` with respect to each of `wrt`.
///
/// `output` is seeded with ones, so for a scalar loss this is the usual
/// gradient. With `create_graph` the returned gradients are themselves
/// differentiable functions of the graph's leaves; otherwise they are
/// constants. Inputs the output does not depend on get zero gradients.
pub fn grad<T: Float>(output: &Var<T>, wrt: &[Var<T>], create_graph: bool) -> Vec<Var<T>> {
    let seed = Var::constant(Tensor::ones(output.shape()));
    grad_with_seed(output, &seed, wrt, create_graph)
}

pub fn grad_with_seed<T: Float>(
    output: &Var<T>,
    seed: &Var<T>,
    wrt: &[Var<T>],
    create_graph: bool,
) -> Vec<Var<T>> {
    assert_eq!(output.shape(), seed.shape(), "seed shape must match output");
    let order = topo_order(output);
    let mut grads: HashMap<usize, Var<T>> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), seed.clone());
    }
    let wanted: HashSet<usize> = wrt.iter().map(|v| v.id()).collect();
    let mut results: HashMap<usize, Var<T>> = HashMap::new();

    with_grad_mode(create_graph, || {
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if wanted.contains(&node.id()) {
                results.insert(node.id(), g.clone());
            }
            let Some(op) = node.op() else {
                continue;
            };
            let parents = op.parents();
            let pgrads = backward_op(op, &g);
            for (parent, pg) in parents.into_iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape mismatch");
                let merged = match grads.remove(&parent.id()) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(parent.id(), merged);
            }
        }
    });

    wrt.iter()
        .map(|v| {
            results
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}

/// Nodes reachable from `output` through recorded ops, parents before
/// children.
fn topo_order<T: Float>(output: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(op) = v.op() {
            for p in op.parents() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn need<T: Float>(v: &Var<T>) -> bool {
    v.requires_grad()
}

fn backward_op<T: Float>(op: &Op<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
    use Op::*;
    match op {
        Add(a, b) => vec![need(a).then(|| g.clone()), need(b).then(|| g.clone())],
        Sub(a, b) => vec![need(a).then(|| g.clone()), need(b).then(|| g.neg())],
        Mul(a, b) => vec![need(a).then(|| g.mul(b)), need(b).then(|| g.mul(a))],
        Scale(_, c) => vec![Some(g.scale(*c))],
        AddScalar(_) => vec![Some(g.clone())],
        Exp(a) => vec![Some(g.mul(&a.exp()))],
        Log(a) => vec![Some(g.mul(&a.recip()))],
        Recip(a) => {
            let r = a.recip();
            vec![Some(g.mul(&r.mul(&r)).neg())]
        }
        Powf(a, p) => vec![Some(g.mul(&a.powf(*p - T::one())).scale(*p))],
        Relu(a) => {
            let mask = a
                .value()
                .map(|x| if x > T::zero() { T::one() } else { T::zero() });
            vec![Some(g.mul(&Var::constant(mask)))]
        }
        Abs(a) => {
            let sign = a.value().map(|x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            });
            vec![Some(g.mul(&Var::constant(sign)))]
        }
        MatMul(a, b) => vec![
            need(a).then(|| g.matmul(&b.t())),
            need(b).then(|| a.t().matmul(g)),
        ],
        Transpose(_) => vec![Some(g.t())],
        Reshape(a) => vec![Some(g.reshape(a.shape()))],
        BroadcastTo(a) => vec![Some(g.sum_to(a.shape()))],
        SumTo(a) => vec![Some(g.broadcast_to(a.shape()))],
        Conv2d(x, w) => {
            let k = w.shape()[2];
            vec![
                need(x).then(|| g.conv2d(&w.flip_transpose())),
                need(w).then(|| x.conv2d_weight_grad(g, k)),
            ]
        }
        ConvWeightGrad(x, up) => vec![
            need(x).then(|| up.conv2d(&g.flip_transpose())),
            need(up).then(|| x.conv2d(g)),
        ],
        FlipTranspose(_) => vec![Some(g.flip_transpose())],
        Gather(a, idx) => vec![Some(g.scatter(idx.clone(), a.shape()))],
        Scatter(a, idx) => vec![Some(g.gather(idx.clone(), a.shape()))],
    }
}
