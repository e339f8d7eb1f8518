//! Unrolled dual-domain solver.
//!
//! Minimises (half form)
//!
//! ```text
//! ½‖Px − ỹ⊙s̃‖² + (α/2)‖ỹ⊙s̃ − y‖² + λ₁R₁(s̃) + λ₂‖Wx‖₁
//! ```
//!
//! by alternating one proximal-gradient step per block and stage:
//!
//! ```text
//! s̃ ← prox₁(s̃ − η₁[ỹ⊙(ỹ⊙s̃ − Px) + α ỹ⊙(ỹ⊙s̃ − y)])
//! x ← prox₂(x − η₂ Pᵀ(Px − ỹ⊙s̃))
//! ```
//!
//! The solver works in normalised units: images are divided by the water
//! attenuation and sinograms by `σ = μ_w ‖P‖ / √ρ`, so the effective operator
//! `A = (μ_w/σ) P` has `‖A‖² = ρ` (default `ρ = 1/η₂`). `ỹ` is scaled to a
//! maximum of one, which makes `η₁ = 1` a descent step for
//! `L₁ = (1 + α) max ỹ² = 1 + α`.
//!
//! In learned mode `prox₁` is a small residual CNN and `prox₂` is PMSRNet; in
//! classical mode both are soft thresholding in an orthonormal one-level
//! Haar basis, and the objective is recorded after every stage.

use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensor::{Conv2d, Ctx, Init, LinearMap, ParamStore, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::physics::{fbp, Apodization, DoseLevel, FanBeamGeometry, Projector, MU_WATER};
use crate::pmsrnet::{Pmsrnet, PmsrnetConfig, ThresholdOverride};
use crate::psatg::{build_prompt, threshold_mask, PromptConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    #[default]
    Learned,
    Classical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct YTildeConfig {
    /// Rays above this fraction of `max y` define the object support.
    pub support_fraction: f64,
    pub sigma_detectors: f64,
    pub sigma_views: f64,
    pub floor: f64,
    /// Learned multiplicative refinement `ỹ ⊙ exp(net(y))`.
    pub refine: bool,
}

impl Default for YTildeConfig {
    fn default() -> Self {
        YTildeConfig {
            support_fraction: 0.02,
            sigma_detectors: 2.0,
            sigma_views: 1.0,
            floor: 1e-3,
            refine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub stages: usize,
    pub alpha: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub mode: SolverMode,
    /// When false the sinogram branch is dropped (image-only variant).
    pub dual_domain: bool,
    /// Classical-mode regularisation weights.
    pub lambda1: f64,
    pub lambda2: f64,
    /// `‖A‖²` of the normalised operator.
    pub operator_norm_sq: f64,
    pub snet_width: usize,
    pub ytilde: YTildeConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            stages: 3,
            alpha: 0.5,
            eta1: 1.0,
            eta2: 5.0,
            mode: SolverMode::Learned,
            dual_domain: true,
            lambda1: 1e-3,
            lambda2: 1e-3,
            operator_norm_sq: 0.2,
            snet_width: 8,
            ytilde: YTildeConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("operator_norm_sq", self.operator_norm_sq),
            ("ytilde.floor", self.ytilde.floor),
        ];
        for (n, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CoreError::Config(format!("solver.{} must be positive, got {}", n, v)));
            }
        }
        if !(self.alpha >= 0.0) || !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(CoreError::Config("alpha and lambdas must be nonnegative".into()));
        }
        if self.snet_width == 0 {
            return Err(CoreError::Config("solver.snet_width must be positive".into()));
        }
        Ok(())
    }

    /// Checks the descent conditions `η₁ < 2/L₁`, `η₂ < 2/‖A‖²`.
    pub fn check_step_bounds(&self) -> Result<()> {
        let l1 = 1.0 + self.alpha;
        if self.eta1 * l1 >= 2.0 || self.eta2 * self.operator_norm_sq >= 2.0 {
            return Err(CoreError::Config(format!(
                "step sizes violate descent bounds: η₁·L₁ = {}, η₂·‖A‖² = {}",
                self.eta1 * l1,
                self.eta2 * self.operator_norm_sq
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- operators

/// `c · P` on `[N, 1, H, W]` ↔ `[N, 1, V, D]`.
pub struct ScaledProjector {
    proj: Arc<Projector>,
    scale: f64,
    batch: usize,
}

impl ScaledProjector {
    pub fn new(proj: Arc<Projector>, scale: f64, batch: usize) -> Self {
        ScaledProjector { proj, scale, batch }
    }
}

impl LinearMap for ScaledProjector {
    fn in_shape(&self) -> Vec<usize> {
        let [h, w] = self.proj.geometry().image_shape();
        vec![self.batch, 1, h, w]
    }

    fn out_shape(&self) -> Vec<usize> {
        let [v, d] = self.proj.geometry().sino_shape();
        vec![self.batch, 1, v, d]
    }

    fn apply(&self, x: &Tensor) -> tensor::Result<Tensor> {
        Ok(self.proj.forward_project(x)?.scale(self.scale))
    }

    fn adjoint(&self, y: &Tensor) -> tensor::Result<Tensor> {
        Ok(self.proj.back_project(y)?.scale(self.scale))
    }
}

/// `s̃ − η₁[ỹ⊙(ỹ⊙s̃ − Px) + α ỹ⊙(ỹ⊙s̃ − y)]`.
pub fn s_grad_step(s: &Tensor, yt: &Tensor, y: &Tensor, px: &Tensor, alpha: f64, eta1: f64) -> Result<Tensor> {
    let ys = yt.mul(s)?;
    let g = yt.mul(&ys.sub(px)?)?.add(&yt.mul(&ys.sub(y)?)?.scale(alpha))?;
    Ok(s.sub(&g.scale(eta1))?)
}

/// `x − η₂ Pᵀ(Px − ỹ⊙s̃)`.
pub fn x_grad_step(x: &Tensor, s: &Tensor, yt: &Tensor, op: &dyn LinearMap, eta2: f64) -> Result<Tensor> {
    let r = op.apply(x)?.sub(&yt.mul(s)?)?;
    Ok(x.sub(&op.adjoint(&r)?.scale(eta2))?)
}

/// `f₁(s̃) = ½‖Px − ỹ⊙s̃‖² + (α/2)‖ỹ⊙s̃ − y‖²`.
pub fn f1(s: &Tensor, yt: &Tensor, y: &Tensor, px: &Tensor, alpha: f64) -> Result<f64> {
    let ys = yt.mul(s)?;
    let a = ys.sub(px)?.norm();
    let b = ys.sub(y)?.norm();
    Ok(0.5 * a * a + 0.5 * alpha * b * b)
}

// ---------------------------------------------------------------- Haar prox

/// Orthonormal one-level 2-D Haar analysis of every trailing `[H, W]` plane.
/// Sub-bands are stored in place of each 2×2 block: `(LL, LH, HL, HH)`.
pub fn haar_forward(t: &Tensor) -> Result<Tensor> {
    haar_apply(t)
}

/// Inverse of [`haar_forward`] (the block transform is its own inverse).
pub fn haar_inverse(t: &Tensor) -> Result<Tensor> {
    haar_apply(t)
}

fn haar_apply(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() < 2 || s[s.len() - 1] % 2 != 0 || s[s.len() - 2] % 2 != 0 {
        return Err(CoreError::Usage(format!("Haar transform needs even trailing dims, got {:?}", s)));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = t.clone();
    let d = out.data_mut();
    for p in 0..t.len() / (h * w) {
        let base = p * h * w;
        for by in (0..h).step_by(2) {
            for bx in (0..w).step_by(2) {
                let i = [base + by * w + bx, base + by * w + bx + 1, base + (by + 1) * w + bx, base + (by + 1) * w + bx + 1];
                let [a, b, c, e] = i.map(|k| t.data()[k]);
                d[i[0]] = 0.5 * (a + b + c + e);
                d[i[1]] = 0.5 * (a - b + c - e);
                d[i[2]] = 0.5 * (a + b - c - e);
                d[i[3]] = 0.5 * (a - b - c + e);
            }
        }
    }
    Ok(out)
}

/// `argmin_z ½‖z − u‖² + λ‖Hz‖₁ = Hᵀ S_λ(Hu)` for the orthonormal Haar `H`.
pub fn haar_prox(u: &Tensor, lambda: f64) -> Result<Tensor> {
    let c = haar_forward(u)?;
    haar_inverse(&crate::frames::soft_threshold(&c, &Tensor::scalar(lambda))?)
}

pub fn haar_l1(u: &Tensor) -> Result<f64> {
    Ok(haar_forward(u)?.data().iter().map(|v| v.abs()).sum())
}

// ---------------------------------------------------------------- ỹ

/// Separable Gaussian smoothing of `[V, D]`: clamped edges along
/// detectors, circular along views.
fn smooth(sino: &[f64], v: usize, d: usize, sig_d: f64, sig_v: f64) -> Vec<f64> {
    let taps = |s: f64| -> Vec<f64> {
        if s <= 0.0 {
            return vec![1.0];
        }
        let r = (3.0 * s).ceil() as i64;
        let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp()).collect();
        let z: f64 = k.iter().sum();
        k.into_iter().map(|x| x / z).collect()
    };
    let (kd, kv) = (taps(sig_d), taps(sig_v));
    let (rd, rv) = ((kd.len() / 2) as i64, (kv.len() / 2) as i64);
    let mut tmp = vec![0.0; v * d];
    for a in 0..v {
        for j in 0..d {
            tmp[a * d + j] = kd
                .iter()
                .enumerate()
                .map(|(i, w)| w * sino[a * d + (j as i64 + i as i64 - rd).clamp(0, d as i64 - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; v * d];
    for a in 0..v {
        for j in 0..d {
            out[a * d + j] = kv
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp[(a as i64 + i as i64 - rv).rem_euclid(v as i64) as usize * d + j])
                .sum();
        }
    }
    out
}

/// Physics-based normalisation estimate for one `[V, D]` sinogram: the
/// smoothed projection of a centred disk covering the detected support,
/// scaled to a maximum of one and clamped below at `floor`.
pub fn estimate_ytilde(y: &Tensor, proj: &Projector, cfg: &YTildeConfig) -> Result<Tensor> {
    let g = proj.geometry();
    let [nv, nd] = g.sino_shape();
    if y.shape() != [nv, nd] {
        return Err(CoreError::Geometry(format!("sinogram {:?} does not match {:?}", y.shape(), [nv, nd])));
    }
    y.ensure_finite("ytilde input")?;
    let ymax = y.max();
    let mut radius: f64 = 0.0;
    if ymax > 0.0 {
        for a in 0..nv {
            for j in 0..nd {
                if y.data()[a * nd + j] > cfg.support_fraction * ymax {
                    radius = radius.max(g.source_to_center * g.detector_angle(j).sin().abs());
                }
            }
        }
    }
    if radius <= 0.0 {
        radius = g.fov_radius();
    }
    // one pixel of margin so the estimate covers partially filled edge pixels
    let radius_px = (radius / g.pixel_spacing + 1.0).min(g.image_size as f64 / 2.0);
    let disk = crate::physics::phantom::disk_phantom(g.image_size, radius_px, 1.0);
    let p = proj.forward_project(&disk)?;
    let sm = smooth(p.data(), nv, nd, cfg.sigma_detectors, cfg.sigma_views);
    let m = sm.iter().cloned().fold(0.0, f64::max);
    let data = sm.into_iter().map(|v| if m > 0.0 { (v / m).max(cfg.floor) } else { 1.0 }).collect();
    Ok(Tensor::new(vec![nv, nd], data)?)
}

// ---------------------------------------------------------------- modules

fn snet_convs(prefix: &str, width: usize) -> Vec<Conv2d> {
    let mut v = vec![Conv2d::new(format!("{}in", prefix), 1, width, 3)];
    for b in 0..3 {
        for c in 0..2 {
            v.push(Conv2d::new(format!("{}res{}.c{}", prefix, b + 1, c + 1), width, width, 3));
        }
    }
    v.push(Conv2d::new(format!("{}out", prefix), width, 1, 3));
    v
}

fn refine_convs(prefix: &str) -> Vec<Conv2d> {
    vec![
        Conv2d::new(format!("{}c1", prefix), 1, 8, 3),
        Conv2d::new(format!("{}c2", prefix), 8, 8, 3),
        Conv2d::new(format!("{}c3", prefix), 8, 1, 3),
    ]
}

/// Inputs derived once per measurement and shared by every stage.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub batch: usize,
    /// Measured sinogram in line-integral units, `[N, 1, V, D]`.
    pub y: Tensor,
    /// `y / σ`.
    pub y_scaled: Tensor,
    pub ytilde: Tensor,
    /// FBP of `y` (attenuation units), `[N, 1, H, W]`.
    pub fbp: Tensor,
    pub prompt: Option<Tensor>,
    pub sigma: f64,
}

/// Final-stage outputs on a tape.
pub struct Outputs<'t> {
    /// Image in attenuation units.
    pub x: Var<'t>,
    /// Sinogram `ỹ⊙s̃` in line-integral units.
    pub s: Var<'t>,
    pub ytilde: Var<'t>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconReport {
    pub mode: SolverMode,
    pub stages: usize,
    /// Objective before the first stage and after every stage (classical mode).
    pub objectives: Vec<f64>,
    #[serde(skip)]
    pub x: Tensor,
    #[serde(skip)]
    pub s: Tensor,
    #[serde(skip)]
    pub ytilde: Tensor,
}

pub struct DualDomain {
    pub cfg: SolverConfig,
    pub net: Pmsrnet,
    pub prompt_cfg: PromptConfig,
    proj: Arc<Projector>,
}

impl DualDomain {
    pub fn new(proj: Arc<Projector>, net: PmsrnetConfig, prompt_cfg: PromptConfig, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let g = proj.geometry();
        net_fits(&net, g)?;
        Ok(DualDomain {
            net: Pmsrnet::new(net, "x.")?,
            cfg,
            prompt_cfg,
            proj,
        })
    }

    pub fn projector(&self) -> &Arc<Projector> {
        &self.proj
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        self.proj.geometry()
    }

    /// `σ = μ_w ‖P‖ / √ρ`.
    pub fn sigma(&self) -> f64 {
        MU_WATER * self.proj.norm() / self.cfg.operator_norm_sq.sqrt()
    }

    pub fn operator(&self, batch: usize) -> ScaledProjector {
        ScaledProjector::new(self.proj.clone(), MU_WATER / self.sigma(), batch)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.net.init(store, rng);
        if self.cfg.dual_domain {
            let convs = snet_convs("s.", self.cfg.snet_width);
            let last = convs.len() - 1;
            for (i, c) in convs.iter().enumerate() {
                c.init(store, if i == last { Init::Zeros } else { Init::He }, rng);
            }
            if self.cfg.ytilde.refine {
                let convs = refine_convs("yt.");
                for (i, c) in convs.iter().enumerate() {
                    c.init(store, if i == 2 { Init::Zeros } else { Init::He }, rng);
                }
            }
        }
    }

    /// Precomputes `ỹ`, FBP, scaled data and the prompt for `y: [N, V, D]`
    /// or `[N, 1, V, D]`.
    pub fn prepare(&self, y: &Tensor, doses: &[DoseLevel]) -> Result<Prepared> {
        let g = self.geometry();
        let [nv, nd] = g.sino_shape();
        let n = y.len() / (nv * nd).max(1);
        if y.len() != n * nv * nd || y.shape()[y.ndim() - 2..] != [nv, nd] || n == 0 {
            return Err(CoreError::Geometry(format!("sinogram batch {:?} does not match {:?}", y.shape(), [nv, nd])));
        }
        if doses.len() != n {
            return Err(CoreError::Usage(format!("{} doses for {} sinograms", doses.len(), n)));
        }
        y.ensure_finite("measured sinogram")?;
        let sigma = self.sigma();
        let (mut yt, mut im) = (Vec::new(), Vec::new());
        for b in 0..n {
            let yb = Tensor::new(vec![nv, nd], y.data()[b * nv * nd..(b + 1) * nv * nd].to_vec())?;
            yt.extend_from_slice(estimate_ytilde(&yb, &self.proj, &self.cfg.ytilde)?.data());
            im.extend_from_slice(fbp(&yb, g, Apodization::None)?.data());
        }
        let [h, w] = g.image_shape();
        let y4 = y.clone().reshape(vec![n, 1, nv, nd])?;
        let fbp_img = Tensor::new(vec![n, 1, h, w], im)?;
        let prompt = if self.cfg.mode == SolverMode::Learned && self.net.cfg.psatg.prompt {
            let mask = threshold_mask(&fbp_img, &self.prompt_cfg);
            Some(build_prompt(&fbp_img, &mask, doses, &self.prompt_cfg)?)
        } else {
            None
        };
        Ok(Prepared {
            batch: n,
            y_scaled: y4.scale(1.0 / sigma),
            y: y4,
            ytilde: Tensor::new(vec![n, 1, nv, nd], yt)?,
            fbp: fbp_img,
            prompt,
            sigma,
        })
    }

    fn snet<'t>(&self, ctx: Ctx<'t>, s: Var<'t>) -> Result<Var<'t>> {
        let convs = snet_convs("s.", self.cfg.snet_width);
        let mut h = convs[0].forward(ctx, s)?.relu()?;
        for b in 0..3 {
            let r = convs[1 + 2 * b].forward(ctx, h)?.relu()?;
            h = h.add(convs[2 + 2 * b].forward(ctx, r)?)?.relu()?;
        }
        Ok(s.add(convs[7].forward(ctx, h)?)?)
    }

    fn ytilde_var<'t>(&self, ctx: Ctx<'t>, prep: &Prepared) -> Result<Var<'t>> {
        let base = ctx.tape.constant(prep.ytilde.clone())?;
        if !(self.cfg.dual_domain && self.cfg.ytilde.refine && self.cfg.mode == SolverMode::Learned) {
            return Ok(base);
        }
        let ymax = prep.y_scaled.max_abs().max(f64::MIN_POSITIVE);
        let mut z = ctx.tape.constant(prep.y_scaled.scale(1.0 / ymax))?;
        let convs = refine_convs("yt.");
        for (i, c) in convs.iter().enumerate() {
            z = c.forward(ctx, z)?;
            if i < 2 {
                z = z.relu()?;
            }
        }
        Ok(base.mul(z.exp()?)?)
    }

    /// Learned-mode forward pass on a tape.
    pub fn forward<'t>(&self, ctx: Ctx<'t>, prep: &Prepared, over: ThresholdOverride) -> Result<Outputs<'t>> {
        let t = ctx.tape;
        let yt = self.ytilde_var(ctx, prep)?;
        if self.cfg.stages == 0 {
            return Ok(Outputs {
                x: t.constant(prep.fbp.clone())?,
                s: t.constant(prep.y.clone())?,
                ytilde: yt,
            });
        }
        let op: Rc<dyn LinearMap> = Rc::new(self.operator(prep.batch));
        let y = t.constant(prep.y_scaled.clone())?;
        let mods = self.net.modulators(ctx, prep.prompt.as_ref().map(|p| t.constant(p.clone())).transpose()?)?;
        let mut v = t.constant(prep.fbp.scale(1.0 / MU_WATER))?;
        let mut s = y.div(yt)?;
        let (a, e1, e2) = (self.cfg.alpha, self.cfg.eta1, self.cfg.eta2);
        for _ in 0..self.cfg.stages {
            let av = v.linear_map(op.clone())?;
            let target = if self.cfg.dual_domain {
                let ys = yt.mul(s)?;
                let grad = yt.mul(ys.sub(av)?)?.add(yt.mul(ys.sub(y)?)?.scale(a)?)?;
                s = self.snet(ctx, s.sub(grad.scale(e1)?)?)?;
                yt.mul(s)?
            } else {
                y
            };
            let v_half = v.sub(av.sub(target)?.linear_adjoint(op.clone())?.scale(e2)?)?;
            v = self.net.forward(ctx, v_half, mods.as_ref(), over)?;
        }
        let s_out = if self.cfg.dual_domain { yt.mul(s)?.scale(prep.sigma)? } else { t.constant(prep.y.clone())? };
        Ok(Outputs {
            x: v.scale(MU_WATER)?,
            s: s_out,
            ytilde: yt,
        })
    }

    /// Objective in normalised units.
    pub fn objective(&self, prep: &Prepared, s: &Tensor, v: &Tensor) -> Result<f64> {
        let op = self.operator(prep.batch);
        let av = op.apply(v)?;
        let fit = f1(s, &prep.ytilde, &prep.y_scaled, &av, self.cfg.alpha)?;
        Ok(fit + self.cfg.lambda1 * haar_l1(s)? + self.cfg.lambda2 * haar_l1(v)?)
    }

    /// Classical alternating proximal-gradient iterations.
    pub fn run_classical(&self, prep: &Prepared) -> Result<ReconReport> {
        self.cfg.check_step_bounds()?;
        let op = self.operator(prep.batch);
        let (yt, y) = (&prep.ytilde, &prep.y_scaled);
        let mut v = prep.fbp.scale(1.0 / MU_WATER);
        let mut s = y.zip_map(yt, |a, b| a / b)?;
        let mut objectives = vec![self.objective(prep, &s, &v)?];
        for _ in 0..self.cfg.stages {
            let av = op.apply(&v)?;
            let s_half = s_grad_step(&s, yt, y, &av, self.cfg.alpha, self.cfg.eta1)?;
            s = haar_prox(&s_half, self.cfg.lambda1 * self.cfg.eta1)?;
            let v_half = x_grad_step(&v, &s, yt, &op, self.cfg.eta2)?;
            v = haar_prox(&v_half, self.cfg.lambda2 * self.cfg.eta2)?;
            let obj = self.objective(prep, &s, &v)?;
            if !obj.is_finite() {
                return Err(CoreError::Numeric("classical objective became non-finite".into()));
            }
            objectives.push(obj);
        }
        Ok(ReconReport {
            mode: SolverMode::Classical,
            stages: self.cfg.stages,
            objectives,
            x: v.scale(MU_WATER),
            s: yt.mul(&s)?.scale(prep.sigma),
            ytilde: yt.clone(),
        })
    }

    /// Reconstructs `y` in the configured mode. `T = 0` returns the FBP image.
    pub fn run(&self, store: Option<&ParamStore>, y: &Tensor, doses: &[DoseLevel]) -> Result<ReconReport> {
        let prep = self.prepare(y, doses)?;
        if self.cfg.stages == 0 {
            return Ok(ReconReport {
                mode: self.cfg.mode,
                stages: 0,
                objectives: Vec::new(),
                x: prep.fbp.clone(),
                s: prep.y.clone(),
                ytilde: prep.ytilde.clone(),
            });
        }
        match self.cfg.mode {
            SolverMode::Classical => self.run_classical(&prep),
            SolverMode::Learned => {
                let store = store.ok_or_else(|| CoreError::Usage("learned mode requires a checkpoint".into()))?;
                let tape = Tape::inference();
                let out = self.forward(Ctx::new(&tape, store), &prep, ThresholdOverride::None)?;
                Ok(ReconReport {
                    mode: SolverMode::Learned,
                    stages: self.cfg.stages,
                    objectives: Vec::new(),
                    x: out.x.value().as_ref().clone(),
                    s: out.s.value().as_ref().clone(),
                    ytilde: out.ytilde.value().as_ref().clone(),
                })
            }
        }
    }
}

fn net_fits(net: &PmsrnetConfig, g: &FanBeamGeometry) -> Result<()> {
    let f = 1usize << (net.frames.kernels.len().saturating_sub(1));
    if g.image_size % f != 0 {
        return Err(CoreError::Config(format!(
            "image size {} is not divisible by {} required by the {}-scale frame",
            g.image_size,
            f,
            net.frames.kernels.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haar_is_orthonormal_and_self_inverse() {
        let x = Tensor::randn(vec![2, 4, 6], 1.0, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1));
        let c = haar_forward(&x).unwrap();
        assert!((c.norm() - x.norm()).abs() < 1e-12);
        assert!(haar_inverse(&c).unwrap().sub(&x).unwrap().max_abs() < 1e-14);
        assert!(haar_forward(&Tensor::zeros(vec![3, 4])).is_err());
    }

    #[test]
    fn scalar_system_step_matches_hand_computation() {
        // 1×1 "sinogram": s̃=2, ỹ=0.5, y=1.2, Px=0.7, α=0.5, η₁=0.8
        let t = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let got = s_grad_step(&t(2.0), &t(0.5), &t(1.2), &t(0.7), 0.5, 0.8).unwrap().item().unwrap();
        let want = 2.0 - 0.8 * (0.5 * (0.5 * 2.0 - 0.7) + 0.5 * 0.5 * (0.5 * 2.0 - 1.2));
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn stationary_point_gives_zero_step() {
        let yt = Tensor::new(vec![2, 2], vec![0.5, 1.0, 0.25, 2.0]).unwrap();
        let s = Tensor::new(vec![2, 2], vec![1.0, -2.0, 4.0, 0.5]).unwrap();
        let ys = yt.mul(&s).unwrap();
        let out = s_grad_step(&s, &yt, &ys, &ys, 0.5, 1.0).unwrap();
        assert_eq!(out.data(), s.data());
    }

    #[test]
    fn step_bounds_are_enforced() {
        let mut c = SolverConfig::default();
        assert!(c.check_step_bounds().is_ok());
        c.eta1 = 1.5;
        assert!(c.check_step_bounds().is_err());
        c.eta1 = 1.0;
        c.eta2 = 10.0;
        assert!(c.check_step_bounds().is_err());
        assert!(SolverConfig { eta2: -1.0, ..Default::default() }.validate().is_err());
    }
}
