//! Layers composed from graph primitives.

use super::graph::{Graph, NodeId};

/// `x W + b` with parameters `{prefix}.weight` `[in, out]` and `{prefix}.bias` `[out]`.
pub fn linear(g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
    let w = g.param(&format!("{prefix}.weight"));
    let b = g.param(&format!("{prefix}.bias"));
    let xw = g.matmul(x, w);
    g.add(xw, b)
}

pub fn layer_norm(g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
    let gain = g.param(&format!("{prefix}.gain"));
    let bias = g.param(&format!("{prefix}.bias"));
    g.layer_norm(x, gain, bias, 1e-5)
}

/// Geometry of a batch of token sets: `sets` independent sets of `tokens`
/// tokens each, `width` features per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetShape {
    pub sets: usize,
    pub tokens: usize,
    pub width: usize,
}

/// Multi-head scaled dot-product self-attention over each set independently.
/// `x` is `[sets, tokens, width]`; projections live under
/// `{prefix}.{q,k,v,out}`.
pub fn self_attention(g: &mut Graph, x: NodeId, prefix: &str, shape: SetShape, heads: usize, dropout: f64) -> NodeId {
    let SetShape { sets, tokens, width } = shape;
    assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
    let dh = width / heads;
    let split = |g: &mut Graph, name: &str| {
        let p = linear(g, x, &format!("{prefix}.{name}"));
        let p = g.reshape(p, &[sets, tokens, heads, dh]);
        let p = g.permute(p, &[0, 2, 1, 3]);
        g.reshape(p, &[sets * heads, tokens, dh])
    };
    let q = split(g, "q");
    let k = split(g, "k");
    let v = split(g, "v");
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores, 2);
    let attn = g.dropout(attn, dropout);
    let ctx = g.matmul(attn, v);
    let ctx = g.reshape(ctx, &[sets, heads, tokens, dh]);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[sets, tokens, width]);
    linear(g, ctx, &format!("{prefix}.out"))
}

/// Post-norm encoder layer: `x = LN(x + SA(x)); x = LN(x + FF(x))` with a
/// gelu feed-forward block.
pub fn encoder_layer(g: &mut Graph, x: NodeId, prefix: &str, shape: SetShape, heads: usize, dropout: f64) -> NodeId {
    let sa = self_attention(g, x, &format!("{prefix}.attn"), shape, heads, dropout);
    let sa = g.dropout(sa, dropout);
    let x = g.add(x, sa);
    let x = layer_norm(g, x, &format!("{prefix}.norm1"));
    let ff = linear(g, x, &format!("{prefix}.ff1"));
    let ff = g.gelu(ff);
    let ff = g.dropout(ff, dropout);
    let ff = linear(g, ff, &format!("{prefix}.ff2"));
    let ff = g.dropout(ff, dropout);
    let x = g.add(x, ff);
    layer_norm(g, x, &format!("{prefix}.norm2"))
}
