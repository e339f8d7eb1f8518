//! Cross-scale coefficient fusion.
//!
//! The coarse map `x_l` is bilinearly upsampled to the fine grid. Queries
//! come from it, keys and values from the fine map `x_h`. Tokens are the
//! channels, so the attention map is `C × C`:
//!
//! ```text
//! Q̃ = DW(Conv(LN(up(x_l)))),  K̃ = DW(Conv(LN(x_h))),  Ṽ = DW(Conv(LN(x_h)))
//! A = softmax_cols(K̃ Q̃ᵀ / √HW)          (column j: weights of query channel j)
//! out = x_h + Conv_o(Aᵀ Ṽ)
//! ```
//!
//! `Conv_o` is zero-initialised, so an untrained fusion is the identity on `x_h`.

use rand::Rng;
use tensor::{Conv2d, Ctx, Init, ParamStore, Tensor, Var};

use crate::error::{CoreError, Result};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Msfum {
    pub high: usize,
    pub low: usize,
    prefix: String,
}

impl Msfum {
    /// Fuses a `low`-channel coarse map into a `high`-channel fine map.
    pub fn new(high: usize, low: usize, prefix: impl Into<String>) -> Self {
        Msfum {
            high,
            low,
            prefix: prefix.into(),
        }
    }

    fn n(&self, s: &str) -> String {
        format!("{}{}", self.prefix, s)
    }

    fn embed(&self, which: &str) -> (Conv2d, Conv2d) {
        let inc = if which == "q" { self.low } else { self.high };
        (
            Conv2d::new(self.n(which), inc, self.high, 1),
            Conv2d::depthwise(self.n(&format!("{}dw", which)), self.high, 3),
        )
    }

    fn out_conv(&self) -> Conv2d {
        Conv2d::new(self.n("o"), self.high, self.high, 1)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for (name, c) in [("ln_l", self.low), ("ln_h", self.high)] {
            store.insert(self.n(&format!("{}.g", name)), Tensor::ones(vec![c]));
            store.insert(self.n(&format!("{}.b", name)), Tensor::zeros(vec![c]));
        }
        for w in ["q", "k", "v"] {
            let (pw, dw) = self.embed(w);
            pw.init(store, Init::He, rng);
            dw.init(store, Init::Normal(0.2), rng);
        }
        self.out_conv().init(store, Init::Zeros, rng);
    }

    /// Attention map `[N, C, C]` (keys × queries) and the value tokens
    /// `[N, C, HW]`.
    pub fn attention<'t>(&self, ctx: Ctx<'t>, x_h: Var<'t>, x_l: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let [n, ch, h, w] = x_h.value().dims4()?;
        let [nl, cl, hl, wl] = x_l.value().dims4()?;
        if ch != self.high || cl != self.low || nl != n || hl * 2 != h || wl * 2 != w {
            return Err(CoreError::Usage(format!(
                "fusion expects [N, {}, H, W] and [N, {}, H/2, W/2], got {:?} and {:?}",
                self.high,
                self.low,
                x_h.shape(),
                x_l.shape()
            )));
        }
        let ln = |x: Var<'t>, name: &str| -> Result<Var<'t>> {
            let g = ctx.param(&self.n(&format!("{}.g", name)))?;
            let b = ctx.param(&self.n(&format!("{}.b", name)))?;
            Ok(x.layer_norm(g, b, 1, LN_EPS)?)
        };
        let up = ln(x_l.upsample2()?, "ln_l")?;
        let hn = ln(x_h, "ln_h")?;
        let tok = |which: &str, src: Var<'t>| -> Result<Var<'t>> {
            let (pw, dw) = self.embed(which);
            Ok(dw.forward(ctx, pw.forward(ctx, src)?)?.reshape(vec![n, ch, h * w])?)
        };
        let (q, k, v) = (tok("q", up)?, tok("k", hn)?, tok("v", hn)?);
        let a = k.matmul_t(q, false, true)?.scale(1.0 / ((h * w) as f64).sqrt())?.softmax(1)?;
        Ok((a, v))
    }

    pub fn fuse<'t>(&self, ctx: Ctx<'t>, x_h: Var<'t>, x_l: Var<'t>) -> Result<Var<'t>> {
        let shape = x_h.shape();
        let (a, v) = self.attention(ctx, x_h, x_l)?;
        let mixed = a.matmul_t(v, true, false)?.reshape(shape)?;
        Ok(x_h.add(self.out_conv().forward(ctx, mixed)?)?)
    }
}
