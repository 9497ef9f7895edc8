//! U-Net layout, forward passes and their backward counterparts.
//!
//! Encoder block `i` (1-based) runs at `H / 2^(i-1)` with
//! `base * 2^(i-1)` channels and is followed by 2x2 max pooling; the
//! bottleneck doubles the deepest width. Decoder block `l` mirrors encoder
//! block `l`: a 2x2 transposed convolution, concatenation with the skip and
//! a conv block. Each decoder level has a two-layer point-wise head; the
//! level-1 head feeds the final 1x1 prediction convolution, so its output is
//! the per-pixel embedding right before the classifier.

use super::ops::{self, ConvCache, Fmap, NormCache};
use super::params::{Grads, Init, ParamStore};
use super::NetworkConfig;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct Up {
    w: usize,
    b: usize,
    cout: usize,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    encoder: Vec<Block>,
    bottleneck: Block,
    /// Indexed by `level - 1`.
    ups: Vec<Up>,
    decoder: Vec<Block>,
    heads: Vec<Head>,
    predict: Conv,
    fc1: Linear,
    fc2: Linear,
}

fn conv(p: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, seed: u64) -> Conv {
    let fan_in = cin * k * k;
    Conv {
        w: p.register(format!("{name}.weight"), vec![cout, cin, k, k], Init::He(fan_in), seed),
        b: p.register(format!("{name}.bias"), vec![cout], Init::Const(0.0), seed),
        cout,
        k,
    }
}

fn norm(p: &mut ParamStore, name: &str, c: usize, seed: u64) -> Norm {
    Norm {
        g: p.register(format!("{name}.gamma"), vec![c], Init::Const(1.0), seed),
        b: p.register(format!("{name}.beta"), vec![c], Init::Const(0.0), seed),
    }
}

fn block(p: &mut ParamStore, name: &str, cin: usize, cout: usize, seed: u64) -> Block {
    Block {
        conv1: conv(p, &format!("{name}.conv1"), cin, cout, 3, seed),
        norm1: norm(p, &format!("{name}.norm1"), cout, seed),
        conv2: conv(p, &format!("{name}.conv2"), cout, cout, 3, seed),
        norm2: norm(p, &format!("{name}.norm2"), cout, seed),
    }
}

impl Layout {
    /// Registers all parameters in a fixed order and returns their ids.
    pub(crate) fn build(cfg: &NetworkConfig, params: &mut ParamStore, seed: u64) -> Self {
        let nb = cfg.encoder_blocks;
        let width = |i: usize| cfg.base_channels << (i - 1);
        let mut encoder = Vec::with_capacity(nb);
        for i in 1..=nb {
            let cin = if i == 1 { 1 } else { width(i - 1) };
            encoder.push(block(params, &format!("encoder.block{i}"), cin, width(i), seed));
        }
        let deep = 2 * width(nb);
        let bottleneck = block(params, "encoder.bottleneck", width(nb), deep, seed);
        let fc1 = Linear {
            w: params.register("global_head.fc1.weight".into(), vec![deep, deep], Init::He(deep), seed),
            b: params.register("global_head.fc1.bias".into(), vec![deep], Init::Const(0.0), seed),
        };
        let fc2 = Linear {
            w: params.register(
                "global_head.fc2.weight".into(),
                vec![cfg.projection_dim, deep],
                Init::He(deep),
                seed,
            ),
            b: params.register("global_head.fc2.bias".into(), vec![cfg.projection_dim], Init::Const(0.0), seed),
        };
        let mut ups = Vec::with_capacity(nb);
        let mut decoder = Vec::with_capacity(nb);
        let mut heads = Vec::with_capacity(nb);
        for l in 1..=nb {
            let cin = if l == nb { deep } else { width(l + 1) };
            let c = width(l);
            ups.push(Up {
                w: params.register(format!("decoder.block{l}.up.weight"), vec![c * 4, cin], Init::He(cin), seed),
                b: params.register(format!("decoder.block{l}.up.bias"), vec![c], Init::Const(0.0), seed),
                cout: c,
            });
            decoder.push(block(params, &format!("decoder.block{l}"), 2 * c, c, seed));
            let out = cfg.local_channels(l);
            heads.push(Head {
                conv1: conv(params, &format!("local_head.level{l}.conv1"), c, c, 1, seed),
                conv2: conv(params, &format!("local_head.level{l}.conv2"), c, out, 1, seed),
            });
        }
        let predict = conv(params, "predict", cfg.local_channels(1), cfg.num_classes, 1, seed);
        Self { encoder, bottleneck, ups, decoder, heads, predict, fc1, fc2 }
    }
}

fn conv_fwd(p: &ParamStore, c: Conv, x: &Fmap) -> (Fmap, ConvCache) {
    ops::conv_forward(x, p.data(c.w), p.data(c.b), c.cout, c.k)
}

fn conv_bwd(p: &ParamStore, g: &mut Grads, c: Conv, cache: &ConvCache, dout: &Fmap) -> Fmap {
    let (dw, db) = g.pair_mut(c.w, c.b);
    ops::conv_backward(cache, p.data(c.w), dout, c.k, dw, db)
}

fn norm_fwd(p: &ParamStore, n: Norm, x: &Fmap) -> (Fmap, NormCache) {
    ops::instance_norm_forward(x, p.data(n.g), p.data(n.b))
}

fn norm_bwd(p: &ParamStore, g: &mut Grads, n: Norm, cache: &NormCache, dout: &Fmap) -> Fmap {
    let (dg, db) = g.pair_mut(n.g, n.b);
    ops::instance_norm_backward(cache, p.data(n.g), dout, dg, db)
}

#[derive(Debug, Clone)]
struct BlockTrace {
    c1: ConvCache,
    n1: NormCache,
    a1: Fmap,
    c2: ConvCache,
    n2: NormCache,
    out: Fmap,
}

fn block_fwd(p: &ParamStore, b: &Block, x: &Fmap) -> BlockTrace {
    let (y, c1) = conv_fwd(p, b.conv1, x);
    let (mut a1, n1) = norm_fwd(p, b.norm1, &y);
    ops::relu_inplace(&mut a1);
    let (y, c2) = conv_fwd(p, b.conv2, &a1);
    let (mut out, n2) = norm_fwd(p, b.norm2, &y);
    ops::relu_inplace(&mut out);
    BlockTrace { c1, n1, a1, c2, n2, out }
}

fn block_bwd(p: &ParamStore, g: &mut Grads, b: &Block, t: &BlockTrace, mut dout: Fmap) -> Fmap {
    ops::relu_backward(&t.out, &mut dout);
    let d = norm_bwd(p, g, b.norm2, &t.n2, &dout);
    let mut d = conv_bwd(p, g, b.conv2, &t.c2, &d);
    ops::relu_backward(&t.a1, &mut d);
    let d = norm_bwd(p, g, b.norm1, &t.n1, &d);
    conv_bwd(p, g, b.conv1, &t.c1, &d)
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderTrace {
    blocks: Vec<BlockTrace>,
    pools: Vec<Vec<u32>>,
    bottleneck: BlockTrace,
}

#[derive(Debug, Clone)]
struct LevelTrace {
    up_in: Fmap,
    block: BlockTrace,
}

#[derive(Debug, Clone)]
struct HeadTrace {
    c1: ConvCache,
    hidden: Fmap,
    c2: ConvCache,
}

/// Everything needed to backpropagate from a decoder-level head output.
#[derive(Debug, Clone)]
pub(crate) struct LocalTrace {
    encoder: EncoderTrace,
    /// Deepest level first.
    levels: Vec<LevelTrace>,
    level: usize,
    head: HeadTrace,
}

#[derive(Debug, Clone)]
pub(crate) struct SegmentTrace {
    local: LocalTrace,
    predict: ConvCache,
}

#[derive(Debug, Clone)]
pub(crate) struct GlobalTrace {
    encoder: EncoderTrace,
    pooled: Vec<f32>,
    hidden: Vec<f32>,
}

impl Layout {
    pub(crate) fn encode(&self, p: &ParamStore, x: &Fmap) -> EncoderTrace {
        let mut blocks = Vec::with_capacity(self.encoder.len());
        let mut pools = Vec::with_capacity(self.encoder.len());
        let mut cur = x.clone();
        for b in &self.encoder {
            let t = block_fwd(p, b, &cur);
            let (pooled, arg) = ops::maxpool_forward(&t.out);
            blocks.push(t);
            pools.push(arg);
            cur = pooled;
        }
        let bottleneck = block_fwd(p, &self.bottleneck, &cur);
        EncoderTrace { blocks, pools, bottleneck }
    }

    /// Backpropagates into the encoder given gradients at the bottleneck and
    /// at each skip output (indexed by `level - 1`).
    fn encode_bwd(&self, p: &ParamStore, g: &mut Grads, t: &EncoderTrace, dbottom: Fmap, mut dskips: Vec<Option<Fmap>>) {
        let mut d = block_bwd(p, g, &self.bottleneck, &t.bottleneck, dbottom);
        for i in (0..self.encoder.len()).rev() {
            let out = &t.blocks[i].out;
            let mut dout = ops::maxpool_backward(&t.pools[i], &d, out.c, out.h, out.w);
            if let Some(s) = dskips[i].take() {
                dout.add_assign(&s);
            }
            d = block_bwd(p, g, &self.encoder[i], &t.blocks[i], dout);
        }
    }

    pub(crate) fn global_fwd(&self, p: &ParamStore, x: &Fmap) -> (Vec<f32>, GlobalTrace) {
        let encoder = self.encode(p, x);
        let pooled = ops::global_avg_pool(&encoder.bottleneck.out);
        let mut hidden = ops::linear_forward(&pooled, p.data(self.fc1.w), p.data(self.fc1.b));
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let z = ops::linear_forward(&hidden, p.data(self.fc2.w), p.data(self.fc2.b));
        (z, GlobalTrace { encoder, pooled, hidden })
    }

    pub(crate) fn global_bwd(&self, p: &ParamStore, g: &mut Grads, t: &GlobalTrace, dz: &[f32]) {
        let (dw, db) = g.pair_mut(self.fc2.w, self.fc2.b);
        let mut dh = ops::linear_backward(&t.hidden, p.data(self.fc2.w), dz, dw, db);
        for (d, &h) in dh.iter_mut().zip(&t.hidden) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        let (dw, db) = g.pair_mut(self.fc1.w, self.fc1.b);
        let dpooled = ops::linear_backward(&t.pooled, p.data(self.fc1.w), &dh, dw, db);
        let b = &t.encoder.bottleneck.out;
        let dbottom = ops::global_avg_pool_backward(&dpooled, b.c, b.h, b.w);
        self.encode_bwd(p, g, &t.encoder, dbottom, vec![None; self.encoder.len()]);
    }

    /// Runs the decoder down to `level` and that level's head. Returns the
    /// raw head output.
    pub(crate) fn local_fwd(&self, p: &ParamStore, x: &Fmap, level: usize) -> (Fmap, LocalTrace) {
        let encoder = self.encode(p, x);
        let nb = self.encoder.len();
        let mut cur = encoder.bottleneck.out.clone();
        let mut levels = Vec::new();
        for l in (level..=nb).rev() {
            let up = self.ups[l - 1];
            let upsampled = ops::upconv_forward(&cur, p.data(up.w), p.data(up.b), up.cout);
            let cat = ops::concat(&upsampled, &encoder.blocks[l - 1].out);
            let block = block_fwd(p, &self.decoder[l - 1], &cat);
            let next = block.out.clone();
            levels.push(LevelTrace { up_in: std::mem::replace(&mut cur, next), block });
        }
        let head = self.heads[level - 1];
        let (h, c1) = conv_fwd(p, head.conv1, &cur);
        let mut hidden = h;
        ops::relu_inplace(&mut hidden);
        let (out, c2) = conv_fwd(p, head.conv2, &hidden);
        (out, LocalTrace { encoder, levels, level, head: HeadTrace { c1, hidden, c2 } })
    }

    pub(crate) fn local_bwd(&self, p: &ParamStore, g: &mut Grads, t: &LocalTrace, dout: &Fmap) {
        let head = self.heads[t.level - 1];
        let mut d = conv_bwd(p, g, head.conv2, &t.head.c2, dout);
        ops::relu_backward(&t.head.hidden, &mut d);
        let mut d = conv_bwd(p, g, head.conv1, &t.head.c1, &d);
        let nb = self.encoder.len();
        let mut dskips: Vec<Option<Fmap>> = vec![None; nb];
        // levels are stored deepest first; walk them shallowest first
        for (lt, l) in t.levels.iter().rev().zip(t.level..=nb) {
            let dcat = block_bwd(p, g, &self.decoder[l - 1], &lt.block, d);
            let up = self.ups[l - 1];
            let (dup, dskip) = ops::split(&dcat, up.cout);
            dskips[l - 1] = Some(dskip);
            let (dw, db) = g.pair_mut(up.w, up.b);
            d = ops::upconv_backward(&lt.up_in, p.data(up.w), &dup, dw, db);
        }
        self.encode_bwd(p, g, &t.encoder, d, dskips);
    }

    /// Full segmentation pass: returns raw logits and the level-1 head
    /// output (the embedding fed to the classifier).
    pub(crate) fn segment_fwd(&self, p: &ParamStore, x: &Fmap) -> (Fmap, Fmap, SegmentTrace) {
        let (f1, local) = self.local_fwd(p, x, 1);
        let (logits, predict) = conv_fwd(p, self.predict, &f1);
        (logits, f1, SegmentTrace { local, predict })
    }

    pub(crate) fn segment_bwd(&self, p: &ParamStore, g: &mut Grads, t: &SegmentTrace, dlogits: &Fmap) {
        let df = conv_bwd(p, g, self.predict, &t.predict, dlogits);
        self.local_bwd(p, g, &t.local, &df);
    }
}
