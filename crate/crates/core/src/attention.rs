//! Attention gate on the decoder skip connections.
//!
//! Fuses a high-level map `x1` (`N×C1×H/2×W/2`) with the matching low-level
//! encoder map `x2` (`N×C2×H×W`):
//!
//! ```text
//! u          = upsample(x1)
//! c          = u·W1                       (C1 -> 3·C2, per pixel)
//! c1, c2, c3 = split(c)
//! s          = (c1 + x2)·W2
//! y1         = s ⊙ x2
//! y2         = sigmoid(c2) ⊙ tanh(c3)
//! y          = sigmoid(y1 + y2)·W3
//! z          = concat(y, u)               (C2 + C1 channels)
//! ```
//!
//! Every `·W` is a 1×1 convolution with bias and `⊙` is the Hadamard
//! product.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Bound, Conv2d, Init, ParamStore};

#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub w1: Conv2d,
    pub w2: Conv2d,
    pub w3: Conv2d,
    pub high_channels: usize,
    pub low_channels: usize,
}

/// Every intermediate of one gate evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GateActivations {
    pub u: Var,
    pub c: Var,
    pub c1: Var,
    pub c2: Var,
    pub c3: Var,
    pub s: Var,
    pub y1: Var,
    pub y2: Var,
    /// `sigmoid(y1 + y2)`, the activation fed to `W3`.
    pub gate: Var,
    pub y: Var,
    pub z: Var,
}

impl AttentionGate {
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        high_channels: usize,
        low_channels: usize,
    ) -> Self {
        Self {
            w1: Conv2d::pointwise(store, init, &format!("{name}.w1"), high_channels, 3 * low_channels),
            w2: Conv2d::pointwise(store, init, &format!("{name}.w2"), low_channels, low_channels),
            w3: Conv2d::pointwise(store, init, &format!("{name}.w3"), low_channels, low_channels),
            high_channels,
            low_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.high_channels + self.low_channels
    }

    pub fn weight_count(&self) -> usize {
        self.w1.weight_count() + self.w2.weight_count() + self.w3.weight_count()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x1: Var, x2: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, x1, x2)?.z)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        p: &Bound,
        x1: Var,
        x2: Var,
    ) -> Result<GateActivations> {
        let (n1, c1, h1, w1) = g.value(x1).dims4()?;
        let (n2, c2, h2, w2) = g.value(x2).dims4()?;
        if n1 != n2 || h2 != 2 * h1 || w2 != 2 * w1 {
            return Err(Error::shape(format!(
                "attention gate needs x1 at half the spatial size of x2, got {:?} and {:?}",
                g.shape(x1),
                g.shape(x2)
            )));
        }
        if c1 != self.high_channels || c2 != self.low_channels {
            return Err(Error::shape(format!(
                "attention gate built for {}/{} channels, got {c1}/{c2}",
                self.high_channels, self.low_channels
            )));
        }
        let u = g.upsample2x(x1)?;
        let c = self.w1.forward(g, p, u)?;
        let parts = g.split_channels(c, 3)?;
        let (c1, c2, c3) = (parts[0], parts[1], parts[2]);
        let sum = g.add(c1, x2)?;
        let s = self.w2.forward(g, p, sum)?;
        let y1 = g.mul(s, x2)?;
        let sig = g.sigmoid(c2);
        let th = g.tanh(c3);
        let y2 = g.mul(sig, th)?;
        let pre = g.add(y1, y2)?;
        let gate = g.sigmoid(pre);
        let y = self.w3.forward(g, p, gate)?;
        let z = g.concat_channels(&[y, u])?;
        Ok(GateActivations {
            u,
            c,
            c1,
            c2,
            c3,
            s,
            y1,
            y2,
            gate,
            y,
            z,
        })
    }
}

/// The gateless skip connection: `concat(x2, upsample(x1))`.
pub fn plain_skip(g: &mut Graph, x1: Var, x2: Var) -> Result<Var> {
    let u = g.upsample2x(x1)?;
    g.concat_channels(&[x2, u])
}
