//! Sequential block layouts and their forward pass on a [`Graph`].

use keygate_tensor::{Bindings, ConvParams, Graph, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Block {
    /// `name.w`, `name.b`; square kernel taken from the weight shape.
    Conv { name: String, stride: usize, padding: usize, act: Activation },
    /// `x + conv2(relu(conv1(x)))`, both 3×3.
    Mid { name: String },
    /// Nearest ×2 upsample, 3×3 conv, relu.
    Up { name: String },
    /// Stride-2 3×3 conv, relu.
    Down { name: String },
    /// Key-conditioned depthwise residual; identity when no key is supplied.
    Fuser { name: String, channels: usize },
    Relu,
}

impl Block {
    pub fn name(&self) -> Option<&str> {
        match self {
            Block::Conv { name, .. }
            | Block::Mid { name }
            | Block::Up { name }
            | Block::Down { name }
            | Block::Fuser { name, .. } => Some(name),
            Block::Relu => None,
        }
    }
}

fn conv<T: Scalar>(g: &mut Graph<T>, b: &Bindings, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(bias), ConvParams::new(stride, padding))?)
}

fn activate<T: Scalar>(g: &mut Graph<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

/// `F + depthwise(F)` with kernels and biases generated from the key.
///
/// `key` is the bipolar key as a `1×128` node.
pub fn fuser_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    name: &str,
    channels: usize,
    x: Var,
    key: Var,
) -> Result<Var> {
    let p = |s: &str| b.var(&format!("{name}.{s}"));
    let v = g.linear(key, p("emb.w")?, Some(p("emb.b")?))?;
    let h = g.linear(v, p("gen1.w")?, Some(p("gen1.b")?))?;
    let h = g.relu(h);
    let out = g.linear(h, p("gen2.w")?, Some(p("gen2.b")?))?;
    let kernels = g.slice_flat(out, 0, &[channels, 1, 3, 3])?;
    let bias = g.slice_flat(out, channels * 9, &[channels])?;
    let dynamic = g.conv2d(x, kernels, Some(bias), ConvParams::new(1, 1).grouped(channels))?;
    Ok(g.add(dynamic, x)?)
}

/// Runs `blocks` in order. Fuser blocks pass `x` through untouched when `key` is `None`.
pub fn run_blocks<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    blocks: &[Block],
    mut x: Var,
    key: Option<Var>,
) -> Result<Var> {
    for block in blocks {
        x = match block {
            Block::Conv { name, stride, padding, act } => {
                let y = conv(g, b, name, x, *stride, *padding)?;
                activate(g, y, *act)
            }
            Block::Mid { name } => {
                let h = conv(g, b, &format!("{name}.conv1"), x, 1, 1)?;
                let h = g.relu(h);
                let h = conv(g, b, &format!("{name}.conv2"), h, 1, 1)?;
                g.add(x, h)?
            }
            Block::Up { name } => {
                let u = g.upsample_nearest2x(x)?;
                let y = conv(g, b, name, u, 1, 1)?;
                g.relu(y)
            }
            Block::Down { name } => {
                let y = conv(g, b, name, x, 2, 1)?;
                g.relu(y)
            }
            Block::Fuser { name, channels } => match key {
                Some(k) => fuser_forward(g, b, name, *channels, x, k)?,
                None => x,
            },
            Block::Relu => g.relu(x),
        };
    }
    Ok(x)
}
