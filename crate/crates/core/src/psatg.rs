//! Prompt-guided scale-adaptive threshold generator.
//!
//! For one scale's coefficients `c` the generator produces a nonnegative,
//! spatially variant threshold map of the same shape:
//!
//! ```text
//! h    = Shallow(Adaptᵢ(c))
//! u    = k₁ ⊙ [LIEB(h), RIEB(h), GIEB(h)] + b₁
//! f    = FSM(u)
//! eps  = softplus(Outᵢ(ReLU(Conv(k₂ ⊙ f + b₂))))
//! ```
//!
//! `k₁, b₁, k₂, b₂` come from the prompt `P = (x̃, m, d)` through a small
//! strided conv extractor, global pooling and four fully connected heads.
//! Everything except the per-scale adapters `Adaptᵢ`/`Outᵢ` is shared across
//! scales, and the whole parameter set is shared across unfolding stages.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensor::{concat, Conv2d, Ctx, Init, Linear, ParamStore, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::physics::{to_hu, DoseLevel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// HU window mapped to `[0, 1]` for the image channel.
    pub window_hu: [f64; 2],
    /// Pixels of `x̃` above this HU value form the metal-mask channel.
    pub metal_threshold_hu: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            window_hu: [-1000.0, 3000.0],
            metal_threshold_hu: 2500.0,
        }
    }
}

/// Binary mask of `x̃` (attenuation units) above the configured HU level.
pub fn threshold_mask(x_tilde: &Tensor, cfg: &PromptConfig) -> Tensor {
    to_hu(x_tilde).map(|v| if v > cfg.metal_threshold_hu { 1.0 } else { 0.0 })
}

/// `P = Concat(x̃, m, d)` for `x̃, m: [N, 1, H, W]`, one dose per sample.
pub fn build_prompt(x_tilde: &Tensor, mask: &Tensor, doses: &[DoseLevel], cfg: &PromptConfig) -> Result<Tensor> {
    let [n, c, h, w] = x_tilde.dims4()?;
    if c != 1 || mask.shape() != x_tilde.shape() {
        return Err(CoreError::Usage(format!(
            "prompt needs x̃ and m both [N, 1, H, W], got {:?} and {:?}",
            x_tilde.shape(),
            mask.shape()
        )));
    }
    if doses.len() != n {
        return Err(CoreError::Usage(format!("{} doses for a batch of {}", doses.len(), n)));
    }
    let [lo, hi] = cfg.window_hu;
    if !(hi > lo) {
        return Err(CoreError::Config(format!("prompt window {:?} is empty", cfg.window_hu)));
    }
    let hu = to_hu(x_tilde);
    let plane = h * w;
    let mut out = Vec::with_capacity(n * 3 * plane);
    for (s, dose) in doses.iter().enumerate() {
        let xs = &hu.data()[s * plane..(s + 1) * plane];
        out.extend(xs.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)));
        out.extend_from_slice(&mask.data()[s * plane..(s + 1) * plane]);
        out.extend(std::iter::repeat_n(dose.reciprocal(), plane));
    }
    Ok(Tensor::new(vec![n, 3, h, w], out)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsatgConfig {
    pub features: usize,
    pub window: usize,
    pub stripe: usize,
    pub anchors: usize,
    /// Hidden width of the feature-selection bottleneck.
    pub fsm_hidden: usize,
    pub use_rieb: bool,
    pub use_gieb: bool,
    /// Prompt path (F_ext + modulators). Off for the blind variant.
    pub prompt: bool,
    /// Initial bias of the pre-softplus output, i.e. `eps ≈ softplus(bias)`.
    pub eps_bias: f64,
}

impl Default for PsatgConfig {
    fn default() -> Self {
        PsatgConfig {
            features: 8,
            window: 4,
            stripe: 4,
            anchors: 2,
            fsm_hidden: 6,
            use_rieb: true,
            use_gieb: true,
            prompt: true,
            eps_bias: -4.0,
        }
    }
}

const EXT_WIDTHS: [usize; 4] = [3, 8, 8, 64];

/// Per-sample channel modulators from the prompt, shaped `[N, C]`.
#[derive(Clone, Copy)]
pub struct Modulators<'t> {
    pub k1: Var<'t>,
    pub b1: Var<'t>,
    pub k2: Var<'t>,
    pub b2: Var<'t>,
}

/// Token regrouping of `[N, C, H, W]` into `[G, T, C]` rectangular windows.
#[derive(Clone, Debug)]
pub struct Partition {
    fwd: Rc<Vec<usize>>,
    inv: Rc<Vec<usize>>,
    groups: usize,
    tokens: usize,
    shape: [usize; 4],
}

impl Partition {
    pub fn new(shape: [usize; 4], wh: usize, ww: usize) -> Result<Self> {
        let [n, c, h, w] = shape;
        if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
            return Err(CoreError::Usage(format!("window {}×{} does not tile {}×{}", wh, ww, h, w)));
        }
        let mut fwd = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for by in 0..h / wh {
                for bx in 0..w / ww {
                    for dy in 0..wh {
                        for dx in 0..ww {
                            let (y, x) = (by * wh + dy, bx * ww + dx);
                            fwd.extend((0..c).map(|ch| ((b * c + ch) * h + y) * w + x));
                        }
                    }
                }
            }
        }
        let mut inv = vec![0; fwd.len()];
        for (i, &j) in fwd.iter().enumerate() {
            inv[j] = i;
        }
        Ok(Partition {
            fwd: Rc::new(fwd),
            inv: Rc::new(inv),
            groups: n * (h / wh) * (w / ww),
            tokens: wh * ww,
            shape,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn split<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let c = self.shape[1];
        Ok(x.gather(self.fwd.clone(), vec![self.groups, self.tokens, c])?)
    }

    pub fn merge<'t>(&self, t: Var<'t>) -> Result<Var<'t>> {
        Ok(t.gather(self.inv.clone(), self.shape.to_vec())?)
    }
}

fn dims(x: &Var) -> Result<[usize; 4]> {
    Ok(x.value().dims4()?)
}

/// Non-overlapping `w × w` single-head self-attention on `[N, C, H, W]`
/// query/key/value maps. The window is clamped to the spatial size.
pub fn window_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, window: usize) -> Result<Var<'t>> {
    let shape = dims(&q)?;
    let (wh, ww) = (window.min(shape[2]), window.min(shape[3]));
    let part = Partition::new(shape, wh, ww)?;
    let (qt, kt, vt) = (part.split(q)?, part.split(k)?, part.split(v)?);
    let scores = qt.matmul_t(kt, false, true)?.scale(1.0 / (shape[1] as f64).sqrt())?;
    part.merge(scores.softmax(2)?.matmul(vt)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stripe {
    /// `s × W` stripes.
    Horizontal,
    /// `H × s` stripes.
    Vertical,
}

/// Anchored stripe attention. Within each stripe the `T` tokens are split
/// into `n_anchors` contiguous segments whose mean features, projected by
/// `anchor_w: [C, C]`, act as intermediaries:
///
/// ```text
/// A  = Pool(x) W_aᵀ
/// out = softmax(Q Aᵀ/√C) · softmax(A Kᵀ/√C) · V
/// ```
///
/// Cost is `O(T · n_anchors · C)` per stripe instead of `O(T² C)`.
pub fn anchored_stripe_attention<'t>(
    x: Var<'t>,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    anchor_w: Var<'t>,
    dir: Stripe,
    stripe: usize,
    n_anchors: usize,
) -> Result<Var<'t>> {
    let shape = dims(&q)?;
    let [_, c, h, w] = shape;
    let part = match dir {
        Stripe::Horizontal => Partition::new(shape, stripe.min(h), w)?,
        Stripe::Vertical => Partition::new(shape, h, stripe.min(w))?,
    };
    let t = part.tokens();
    if n_anchors == 0 || t % n_anchors != 0 {
        return Err(CoreError::Usage(format!("{} anchors do not divide {} stripe tokens", n_anchors, t)));
    }
    let seg = t / n_anchors;
    let mut pool = Tensor::zeros(vec![n_anchors, t]);
    for a in 0..n_anchors {
        for j in 0..seg {
            pool.data_mut()[a * t + a * seg + j] = 1.0 / seg as f64;
        }
    }
    let pool = q.tape().constant(pool)?;
    let anchors = pool.matmul(part.split(x)?)?.matmul_t(anchor_w, false, true)?;
    let inv = 1.0 / (c as f64).sqrt();
    let (qt, kt, vt) = (part.split(q)?, part.split(k)?, part.split(v)?);
    let to_anchor = qt.matmul_t(anchors, false, true)?.scale(inv)?.softmax(2)?;
    let from_anchor = anchors.matmul_t(kt, false, true)?.scale(inv)?.softmax(2)?;
    part.merge(to_anchor.matmul(from_anchor.matmul(vt)?)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Psatg {
    pub cfg: PsatgConfig,
    channels: Vec<usize>,
    prefix: String,
}

impl Psatg {
    /// `channels[s]` is the coefficient channel count of scale `s`.
    pub fn new(cfg: PsatgConfig, channels: &[usize], prefix: impl Into<String>) -> Result<Self> {
        if cfg.features == 0 || cfg.window == 0 || cfg.stripe == 0 || cfg.anchors == 0 || cfg.fsm_hidden == 0 {
            return Err(CoreError::Config(format!("PSATG sizes must be positive: {:?}", cfg)));
        }
        if channels.is_empty() {
            return Err(CoreError::Config("PSATG needs at least one scale".into()));
        }
        Ok(Psatg {
            cfg,
            channels: channels.to_vec(),
            prefix: prefix.into(),
        })
    }

    fn n(&self, s: &str) -> String {
        format!("{}{}", self.prefix, s)
    }

    fn conv(&self, name: &str, i: usize, o: usize, k: usize) -> Conv2d {
        Conv2d::new(self.n(name), i, o, k)
    }

    fn adapter(&self, s: usize) -> Conv2d {
        self.conv(&format!("adapt{}", s + 1), self.channels[s], self.cfg.features, 1)
    }

    fn out_conv(&self, s: usize) -> Conv2d {
        self.conv(&format!("out{}", s + 1), self.cfg.features, self.channels[s], 3)
    }

    fn ext(&self) -> Vec<Conv2d> {
        (0..3)
            .map(|i| self.conv(&format!("ext{}", i + 1), EXT_WIDTHS[i], EXT_WIDTHS[i + 1], 3).stride(2))
            .collect()
    }

    fn heads(&self) -> [Linear; 4] {
        let (e, f) = (EXT_WIDTHS[3], self.cfg.features);
        [
            Linear::new(self.n("fc.k1"), e, 3 * f),
            Linear::new(self.n("fc.b1"), e, 3 * f),
            Linear::new(self.n("fc.k2"), e, f),
            Linear::new(self.n("fc.b2"), e, f),
        ]
    }

    fn gieb_names(&self, d: &str) -> [Conv2d; 4] {
        let f = self.cfg.features;
        ["q", "k", "v", "o"].map(|p| self.conv(&format!("gieb.{}.{}", d, p), f, f, 1))
    }

    fn rieb_names(&self) -> [Conv2d; 4] {
        let f = self.cfg.features;
        ["q", "k", "v", "o"].map(|p| self.conv(&format!("rieb.{}", p), f, f, 1))
    }

    fn fsm(&self) -> (Linear, Linear, Conv2d) {
        let f = self.cfg.features;
        (
            Linear::new(self.n("fsm.fc1"), 3 * f, self.cfg.fsm_hidden),
            Linear::new(self.n("fsm.fc2"), self.cfg.fsm_hidden, 3 * f),
            self.conv("fsm.proj", 3 * f, f, 1),
        )
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let f = self.cfg.features;
        for s in 0..self.channels.len() {
            self.adapter(s).init(store, Init::He, rng);
            let out = self.out_conv(s);
            out.init(store, Init::Normal(1e-2), rng);
            store.insert(out.bias_name(), Tensor::full(vec![self.channels[s]], self.cfg.eps_bias));
        }
        self.conv("shallow", f, f, 3).init(store, Init::He, rng);
        self.conv("lieb.c1", f, f, 3).init(store, Init::He, rng);
        self.conv("lieb.c2", f, f, 3).init(store, Init::Normal(0.05), rng);
        if self.cfg.use_rieb {
            for c in self.rieb_names() {
                c.init(store, Init::He, rng);
            }
        }
        if self.cfg.use_gieb {
            for d in ["h", "v"] {
                for c in self.gieb_names(d) {
                    c.init(store, Init::He, rng);
                }
                let mut eye = Tensor::zeros(vec![f, f]);
                for i in 0..f {
                    eye.data_mut()[i * f + i] = 1.0;
                }
                store.insert(self.n(&format!("gieb.{}.anchor", d)), eye);
            }
        }
        let (fc1, fc2, proj) = self.fsm();
        fc1.init(store, Init::He, 0.0, rng);
        fc2.init(store, Init::Normal(0.1), 0.0, rng);
        proj.init(store, Init::He, rng);
        self.conv("head.c1", f, f, 3).init(store, Init::He, rng);
        if self.cfg.prompt {
            for c in self.ext() {
                c.init(store, Init::He, rng);
            }
            for (i, h) in self.heads().iter().enumerate() {
                h.init(store, Init::Zeros, if i % 2 == 0 { 1.0 } else { 0.0 }, rng);
            }
        }
    }

    /// `(k₁, b₁, k₂, b₂)` from `P: [N, 3, H, W]`; `None` when the prompt
    /// path is disabled.
    pub fn modulators<'t>(&self, ctx: Ctx<'t>, prompt: Var<'t>) -> Result<Option<Modulators<'t>>> {
        if !self.cfg.prompt {
            return Ok(None);
        }
        let [_, c, _, _] = dims(&prompt)?;
        if c != 3 {
            return Err(CoreError::Usage(format!("prompt has {} channels, expected 3", c)));
        }
        let mut z = prompt;
        for conv in self.ext() {
            z = conv.forward(ctx, z)?.relu()?;
        }
        let g = z.global_avg_pool()?;
        let [k1, b1, k2, b2] = self.heads().map(|h| h.forward(ctx, g));
        Ok(Some(Modulators {
            k1: k1?,
            b1: b1?,
            k2: k2?,
            b2: b2?,
        }))
    }

    fn rieb<'t>(&self, ctx: Ctx<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let [q, k, v, o] = self.rieb_names();
        let a = window_attention(q.forward(ctx, h)?, k.forward(ctx, h)?, v.forward(ctx, h)?, self.cfg.window)?;
        h.add(o.forward(ctx, a)?).map_err(Into::into)
    }

    fn gieb<'t>(&self, ctx: Ctx<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let mut x = h;
        for (d, dir) in [("h", Stripe::Horizontal), ("v", Stripe::Vertical)] {
            let [q, k, v, o] = self.gieb_names(d);
            let a = anchored_stripe_attention(
                x,
                q.forward(ctx, x)?,
                k.forward(ctx, x)?,
                v.forward(ctx, x)?,
                ctx.param(&self.n(&format!("gieb.{}.anchor", d)))?,
                dir,
                self.cfg.stripe,
                self.cfg.anchors,
            )?;
            x = x.add(o.forward(ctx, a)?)?;
        }
        Ok(x)
    }

    fn check_scale(&self, scale: usize, c: &Var) -> Result<()> {
        let [_, ch, _, _] = dims(c)?;
        match self.channels.get(scale) {
            Some(&e) if e == ch => Ok(()),
            Some(&e) => Err(CoreError::Usage(format!(
                "scale {} has {} channels, PSATG expects {}",
                scale + 1,
                ch,
                e
            ))),
            None => Err(CoreError::Usage(format!("PSATG has no scale {}", scale + 1))),
        }
    }

    /// Branch concatenation, `k₁/b₁` modulation and feature selection;
    /// returns `[N, F, H, W]`.
    pub fn deep_extract<'t>(&self, ctx: Ctx<'t>, scale: usize, c: Var<'t>, m: Option<&Modulators<'t>>) -> Result<Var<'t>> {
        self.check_scale(scale, &c)?;
        let f = self.cfg.features;
        let h = self.conv("shallow", f, f, 3).forward(ctx, self.adapter(scale).forward(ctx, c)?)?;
        let lieb = {
            let r = self.conv("lieb.c1", f, f, 3).forward(ctx, h)?.relu()?;
            h.add(self.conv("lieb.c2", f, f, 3).forward(ctx, r)?)?
        };
        let rieb = if self.cfg.use_rieb { self.rieb(ctx, h)? } else { h };
        let gieb = if self.cfg.use_gieb { self.gieb(ctx, h)? } else { h };
        let mut u = concat(&[lieb, rieb, gieb], 1)?;
        if let Some(m) = m {
            u = u.mul_channels(m.k1)?.add_channels(m.b1)?;
        }
        let (fc1, fc2, proj) = self.fsm();
        let gate = fc2.forward(ctx, fc1.forward(ctx, u.global_avg_pool()?)?.relu()?)?.sigmoid()?;
        Ok(proj.forward(ctx, u.mul_channels(gate)?)?)
    }

    /// Threshold map `eps ≥ 0` shaped like `c`.
    pub fn thresholds<'t>(&self, ctx: Ctx<'t>, scale: usize, c: Var<'t>, m: Option<&Modulators<'t>>) -> Result<Var<'t>> {
        let f = self.cfg.features;
        let mut x = self.deep_extract(ctx, scale, c, m)?;
        if let Some(m) = m {
            x = x.mul_channels(m.k2)?.add_channels(m.b2)?;
        }
        let r = self.conv("head.c1", f, f, 3).forward(ctx, x)?.relu()?;
        Ok(self.out_conv(scale).forward(ctx, r)?.softplus()?)
    }

    /// Plain-tensor thresholds for every scale (no gradient tracking).
    pub fn thresholds_tensor(&self, store: &ParamStore, coeffs: &[Tensor], prompt: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store);
        let m = match prompt {
            Some(p) => self.modulators(ctx, tape.constant(p.clone())?)?,
            None => None,
        };
        coeffs
            .iter()
            .enumerate()
            .map(|(s, c)| Ok(self.thresholds(ctx, s, tape.constant(c.clone())?, m.as_ref())?.value().as_ref().clone()))
            .collect()
    }
}
