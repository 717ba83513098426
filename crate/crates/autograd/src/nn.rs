//! Layer building blocks in two phases: `register_*` writes initialized
//! parameters into a [`ParamStore`] under a dotted name prefix, and the apply
//! functions wire those parameters into a [`Graph`] through a [`Binder`].

use ndarray::prelude::*;
use rand::Rng;

use crate::graph::{Arr, Graph, NodeId};
use crate::init;
use crate::store::{Binder, ParamStore};
use crate::Result;

/// Linear layer; weight is stored (in, out) so forward needs no transpose.
pub fn register_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    din: usize,
    dout: usize,
    bias: bool,
) {
    store.insert(
        format!("{name}.w"),
        init::xavier_normal(rng, &[din, dout], din, dout),
    );
    if bias {
        store.insert(format!("{name}.b"), init::zeros(&[dout]));
    }
}

/// Applies a registered linear to a 2-d `(N, in)` or 3-d `(B, T, in)` input.
pub fn linear(g: &mut Graph, b: &Binder, name: &str, x: NodeId) -> Result<NodeId> {
    let w = b.node(&format!("{name}.w"))?;
    let din = g.value(w).shape()[0];
    let dout = g.value(w).shape()[1];
    let xshape = g.value(x).shape().to_vec();
    assert_eq!(
        *xshape.last().unwrap(),
        din,
        "linear '{name}': input {xshape:?} vs weight in-dim {din}"
    );
    let rows: usize = xshape[..xshape.len() - 1].iter().product();
    let x2 = g.reshape(x, &[rows, din]);
    let mut y = g.matmul(x2, w);
    if let Ok(bias) = b.node(&format!("{name}.b")) {
        y = g.add(y, bias);
    }
    let mut out_shape = xshape[..xshape.len() - 1].to_vec();
    out_shape.push(dout);
    Ok(g.reshape(y, &out_shape))
}

pub fn register_conv2d(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    let fan_in = cin * k * k;
    store.insert(
        format!("{name}.w"),
        init::he_normal(rng, &[cout, cin, k, k], fan_in),
    );
    store.insert(format!("{name}.b"), init::zeros(&[cout]));
}

pub fn conv2d(
    g: &mut Graph,
    b: &Binder,
    name: &str,
    x: NodeId,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    let w = b.node(&format!("{name}.w"))?;
    let bias = b.node(&format!("{name}.b"))?;
    let cout = g.value(w).shape()[0];
    let y = g.conv2d(x, w, stride, padding);
    let bias4 = g.reshape(bias, &[1, cout, 1, 1]);
    Ok(g.add(y, bias4))
}

pub fn register_group_norm(store: &mut ParamStore, name: &str, channels: usize) {
    store.insert(format!("{name}.g"), init::ones(&[channels]));
    store.insert(format!("{name}.b"), init::zeros(&[channels]));
}

pub fn group_norm(
    g: &mut Graph,
    b: &Binder,
    name: &str,
    x: NodeId,
    groups: usize,
) -> Result<NodeId> {
    let gamma = b.node(&format!("{name}.g"))?;
    let beta = b.node(&format!("{name}.b"))?;
    Ok(g.group_norm(x, gamma, beta, groups, 1e-5))
}

pub fn register_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), init::ones(&[dim]));
    store.insert(format!("{name}.b"), init::zeros(&[dim]));
}

pub fn layer_norm(g: &mut Graph, b: &Binder, name: &str, x: NodeId) -> Result<NodeId> {
    let gamma = b.node(&format!("{name}.g"))?;
    let beta = b.node(&format!("{name}.b"))?;
    Ok(g.layer_norm(x, gamma, beta, 1e-5))
}

/// Sinusoidal position/timestep features: `[sin(t*f_i), cos(t*f_i)]` with
/// log-spaced frequencies from 1 down to 1/10000. Pure function of `t`.
pub fn sinusoidal_embedding(timesteps: &[f64], dim: usize) -> Arr {
    assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((timesteps.len(), dim));
    for (r, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out[[r, i]] = (t * freq).sin();
            out[[r, half + i]] = (t * freq).cos();
        }
    }
    out.into_dyn()
}

/// Multi-head attention core on pre-projected tensors.
///
/// `q`: (B, Tq, D), `k`/`v`: (B, Tk, D), D divisible by `heads`.
/// `key_mask`: per-(batch, key) additive bias, 0.0 for live positions and
/// `-inf` for padding, so padded positions carry exactly zero weight.
pub fn attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    key_mask: Option<&Array2<f64>>,
) -> NodeId {
    let (bq, tq, d) = {
        let s = g.value(q).shape();
        (s[0], s[1], s[2])
    };
    let tk = g.value(k).shape()[1];
    assert!(d % heads == 0, "attention dim {d} not divisible by {heads} heads");
    let dh = d / heads;

    let split = |g: &mut Graph, x: NodeId, t: usize| -> NodeId {
        let x = g.reshape(x, &[bq, t, heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[bq * heads, t, dh])
    };
    let qh = split(g, q, tq);
    let kh = split(g, k, tk);
    let vh = split(g, v, tk);

    let kt = g.permute(kh, &[0, 2, 1]);
    let scores = g.batch_matmul(qh, kt);
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(mask) = key_mask {
        assert_eq!(mask.dim(), (bq, tk), "key_mask shape");
        let mut m = Array3::<f64>::zeros((bq * heads, tq, tk));
        for bi in 0..bq {
            for h in 0..heads {
                for ti in 0..tq {
                    for tj in 0..tk {
                        m[[bi * heads + h, ti, tj]] = mask[[bi, tj]];
                    }
                }
            }
        }
        let mnode = g.constant(m.into_dyn());
        scores = g.add(scores, mnode);
    }
    let attn = g.softmax_last(scores);
    let out = g.batch_matmul(attn, vh);
    let out = g.reshape(out, &[bq, heads, tq, dh]);
    let out = g.permute(out, &[0, 2, 1, 3]);
    g.reshape(out, &[bq, tq, d])
}
