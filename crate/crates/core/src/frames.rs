//! Multi-scale sparsifying frame `W` and its adjoint.
//!
//! The image is split into a detail part and a half-resolution part with
//! the orthonormal Haar decimator `D` (2×2 mean scaled by 2, so `DDᵀ = I`):
//!
//! ```text
//! f₁ = x,  f_{i+1} = D fᵢ
//! cᵢ = Kᵢ (I − DᵀD) fᵢ   (i < n),     c_n = K_n f_n
//! ```
//!
//! Each `Kᵢ` is a stride-1 cross-correlation bank of `kᵢ²` filters of size
//! `kᵢ × kᵢ`. With circular padding and the scaled DCT-II initialisation
//! `KᵢᵀKᵢ = I`, hence `WᵀW = I`; for arbitrary (trained) kernels `W` and
//! `synthesize` remain an exact adjoint pair.

use serde::{Deserialize, Serialize};
use tensor::{ConvSpec, Ctx, PadMode, ParamStore, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

/// Kernel sizes of the four scales; scale `i` has `kᵢ²` channels.
pub const DEFAULT_KERNELS: [usize; 4] = [5, 7, 9, 11];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameConfig {
    pub kernels: Vec<usize>,
    pub pad: PadMode,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            kernels: DEFAULT_KERNELS.to_vec(),
            pad: PadMode::Circular,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameBank {
    pub cfg: FrameConfig,
    prefix: String,
}

/// Orthonormal 2-D DCT-II basis of size `k`: row `u·k + v` is the filter for
/// frequencies `(u, v)`, flattened row-major; row 0 is the constant filter.
pub fn dct_basis(k: usize) -> Vec<Vec<f64>> {
    let kf = k as f64;
    let c1 = |u: usize, m: usize| {
        let a = if u == 0 { (1.0 / kf).sqrt() } else { (2.0 / kf).sqrt() };
        a * (std::f64::consts::PI * (2 * m + 1) as f64 * u as f64 / (2.0 * kf)).cos()
    };
    let mut out = Vec::with_capacity(k * k);
    for u in 0..k {
        for v in 0..k {
            out.push((0..k * k).map(|i| c1(u, i / k) * c1(v, i % k)).collect());
        }
    }
    out
}

fn haar_kernel() -> Tensor {
    let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
    for i in [4, 5, 7, 8] {
        k.data_mut()[i] = 0.5;
    }
    k
}

const HAAR: ConvSpec = ConvSpec {
    pad: PadMode::Zero,
    stride: 2,
    groups: 1,
};

impl FrameBank {
    pub fn new(cfg: FrameConfig, prefix: impl Into<String>) -> Result<Self> {
        if cfg.kernels.is_empty() || cfg.kernels.iter().any(|&k| k % 2 == 0) {
            return Err(CoreError::Config(format!(
                "frame kernels must be a non-empty list of odd sizes, got {:?}",
                cfg.kernels
            )));
        }
        Ok(FrameBank {
            cfg,
            prefix: prefix.into(),
        })
    }

    pub fn n_scales(&self) -> usize {
        self.cfg.kernels.len()
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.cfg.kernels[scale] * self.cfg.kernels[scale]
    }

    pub fn kernel_name(&self, scale: usize) -> String {
        format!("{}k{}", self.prefix, scale + 1)
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.cfg.pad, 1)
    }

    /// Fills every scale with the scaled DCT-II bank (`KᵀK = I`).
    pub fn init_tight(&self, store: &mut ParamStore) {
        for s in 0..self.n_scales() {
            let k = self.cfg.kernels[s];
            let data = dct_basis(k).into_iter().flatten().map(|v| v / k as f64).collect();
            store.insert(self.kernel_name(s), Tensor::new(vec![k * k, 1, k, k], data).expect("bank shape"));
        }
    }

    /// Spatial size of each scale for an `h × w` input.
    pub fn scale_dims(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let f = 1usize << (self.n_scales() - 1);
        if h % f != 0 || w % f != 0 {
            return Err(CoreError::Usage(format!(
                "{}-scale frame needs dims divisible by {}, got {}×{}",
                self.n_scales(),
                f,
                h,
                w
            )));
        }
        Ok((0..self.n_scales()).map(|s| (h >> s, w >> s)).collect())
    }

    /// Coefficient pyramid of `x: [N, 1, H, W]`, finest scale first.
    pub fn analyze<'t>(&self, ctx: Ctx<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let [_, c, h, w] = x.value().dims4()?;
        if c != 1 {
            return Err(CoreError::Usage(format!("frames act on single-channel images, got {}", c)));
        }
        self.scale_dims(h, w)?;
        let d = ctx.tape.constant(haar_kernel())?;
        let mut f = x;
        let mut out = Vec::with_capacity(self.n_scales());
        for s in 0..self.n_scales() {
            let k = ctx.param(&self.kernel_name(s))?;
            if s + 1 < self.n_scales() {
                let coarse = f.conv2d(d, HAAR)?;
                let (fh, fw) = (f.shape()[2], f.shape()[3]);
                let detail = f.sub(coarse.conv2d_transpose(d, HAAR, (fh, fw))?)?;
                out.push(detail.conv2d(k, self.spec())?);
                f = coarse;
            } else {
                out.push(f.conv2d(k, self.spec())?);
            }
        }
        Ok(out)
    }

    /// `Kᵢᵀ cᵢ` for one scale, back in image space at that scale's resolution.
    pub fn synthesize_scale<'t>(&self, ctx: Ctx<'t>, scale: usize, c: Var<'t>) -> Result<Var<'t>> {
        let k = ctx.param(&self.kernel_name(scale))?;
        let (h, w) = (c.shape()[2], c.shape()[3]);
        Ok(c.conv2d_transpose(k, self.spec(), (h, w))?)
    }

    /// Exact adjoint of [`FrameBank::analyze`].
    pub fn synthesize<'t>(&self, ctx: Ctx<'t>, coeffs: &[Var<'t>]) -> Result<Var<'t>> {
        if coeffs.len() != self.n_scales() {
            return Err(CoreError::Usage(format!(
                "expected {} scales, got {}",
                self.n_scales(),
                coeffs.len()
            )));
        }
        for (s, c) in coeffs.iter().enumerate() {
            if c.shape()[1] != self.channels(s) {
                return Err(CoreError::Usage(format!(
                    "scale {} has {} channels, bank expects {}",
                    s + 1,
                    c.shape()[1],
                    self.channels(s)
                )));
            }
        }
        let d = ctx.tape.constant(haar_kernel())?;
        let last = self.n_scales() - 1;
        let mut g = self.synthesize_scale(ctx, last, coeffs[last])?;
        for s in (0..last).rev() {
            let e = self.synthesize_scale(ctx, s, coeffs[s])?;
            let (h, w) = (e.shape()[2], e.shape()[3]);
            if g.shape()[2] * 2 != h || g.shape()[3] * 2 != w {
                return Err(CoreError::Usage("coefficient pyramid dims do not halve per scale".into()));
            }
            let proj = e.sub(e.conv2d(d, HAAR)?.conv2d_transpose(d, HAAR, (h, w))?)?;
            g = proj.add(g.conv2d_transpose(d, HAAR, (h, w))?)?;
        }
        Ok(g)
    }

    /// Plain-tensor analysis (no gradient tracking).
    pub fn analyze_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store);
        let c = self.analyze(ctx, tape.constant(x.clone())?)?;
        Ok(c.iter().map(|v| v.value().as_ref().clone()).collect())
    }

    pub fn synthesize_tensor(&self, store: &ParamStore, coeffs: &[Tensor]) -> Result<Tensor> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store);
        let vars = coeffs
            .iter()
            .map(|c| tape.constant(c.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(self.synthesize(ctx, &vars)?.value().as_ref().clone())
    }
}

/// `sign(μ)·max(|μ| − ε, 0)`; `eps` is a scalar or matches `c`'s shape.
pub fn soft_threshold(c: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps.data().iter().any(|&e| e < 0.0 || e.is_nan()) {
        return Err(CoreError::Usage("soft_threshold: thresholds must be non-negative".into()));
    }
    let f = |m: f64, e: f64| m.signum() * (m.abs() - e).max(0.0);
    if eps.len() == 1 {
        let e = eps.data()[0];
        return Ok(c.map(|m| f(m, e)));
    }
    Ok(c.zip_map(eps, f)?)
}
