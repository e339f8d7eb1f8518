//! Image-domain network: multi-scale frame analysis, PSATG-driven
//! shrinkage and MSFuM-fused synthesis,
//!
//! ```text
//! cᵢ = (W x)ᵢ,   zᵢ = S_{εᵢ}(cᵢ),   z_n ← z_n,  zᵢ ← MSFuMᵢ(zᵢ, z_{i+1}),   x⁺ = Wᵀ z
//! ```
//!
//! With a tight bank, zero thresholds and untrained fusion the network is
//! the identity.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensor::{Ctx, ParamStore, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::frames::{FrameBank, FrameConfig};
use crate::msfum::Msfum;
use crate::psatg::{Modulators, Psatg, PsatgConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PmsrnetConfig {
    pub frames: FrameConfig,
    pub psatg: PsatgConfig,
    /// Cross-scale fusion during synthesis.
    pub fusion: bool,
}

impl Default for PmsrnetConfig {
    fn default() -> Self {
        PmsrnetConfig {
            frames: FrameConfig::default(),
            psatg: PsatgConfig::default(),
            fusion: true,
        }
    }
}

/// Replaces the generated thresholds, for identity and ablation checks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum ThresholdOverride {
    #[default]
    None,
    Zero,
    Value(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pmsrnet {
    pub cfg: PmsrnetConfig,
    pub bank: FrameBank,
    pub psatg: Psatg,
    fusions: Vec<Msfum>,
}

impl Pmsrnet {
    pub fn new(cfg: PmsrnetConfig, prefix: &str) -> Result<Self> {
        let bank = FrameBank::new(cfg.frames.clone(), format!("{}frames.", prefix))?;
        let channels: Vec<usize> = (0..bank.n_scales()).map(|s| bank.channels(s)).collect();
        let psatg = Psatg::new(cfg.psatg.clone(), &channels, format!("{}psatg.", prefix))?;
        let fusions = if cfg.fusion {
            (0..channels.len() - 1)
                .map(|s| Msfum::new(channels[s], channels[s + 1], format!("{}fuse{}.", prefix, s + 1)))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Pmsrnet {
            cfg,
            bank,
            psatg,
            fusions,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.bank.init_tight(store);
        self.psatg.init(store, rng);
        for f in &self.fusions {
            f.init(store, rng);
        }
    }

    /// Prompt modulators, computed once and reused by every stage.
    pub fn modulators<'t>(&self, ctx: Ctx<'t>, prompt: Option<Var<'t>>) -> Result<Option<Modulators<'t>>> {
        match prompt {
            Some(p) => self.psatg.modulators(ctx, p),
            None if self.cfg.psatg.prompt => Err(CoreError::Usage("prompt-guided network called without a prompt".into())),
            None => Ok(None),
        }
    }

    pub fn forward<'t>(
        &self,
        ctx: Ctx<'t>,
        x: Var<'t>,
        mods: Option<&Modulators<'t>>,
        over: ThresholdOverride,
    ) -> Result<Var<'t>> {
        let coeffs = self.bank.analyze(ctx, x)?;
        let mut z = Vec::with_capacity(coeffs.len());
        for (s, &c) in coeffs.iter().enumerate() {
            let eps = match over {
                ThresholdOverride::None => self.psatg.thresholds(ctx, s, c, mods)?,
                ThresholdOverride::Zero => ctx.tape.constant(Tensor::zeros(c.shape()))?,
                ThresholdOverride::Value(v) => ctx.tape.constant(Tensor::full(c.shape(), v))?,
            };
            z.push(c.soft_threshold(eps)?);
        }
        for (s, f) in self.fusions.iter().enumerate().rev() {
            z[s] = f.fuse(ctx, z[s], z[s + 1])?;
        }
        self.bank.synthesize(ctx, &z)
    }

    /// Convenience wrapper building modulators from `prompt` first.
    pub fn apply<'t>(&self, ctx: Ctx<'t>, x: Var<'t>, prompt: Option<Var<'t>>, over: ThresholdOverride) -> Result<Var<'t>> {
        let mods = if self.cfg.psatg.prompt { self.modulators(ctx, prompt)? } else { None };
        self.forward(ctx, x, mods.as_ref(), over)
    }

    /// Plain-tensor forward pass.
    pub fn apply_tensor(&self, store: &ParamStore, x: &Tensor, prompt: Option<&Tensor>, over: ThresholdOverride) -> Result<Tensor> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store);
        let p = prompt.map(|p| tape.constant(p.clone())).transpose()?;
        Ok(self.apply(ctx, tape.constant(x.clone())?, p, over)?.value().as_ref().clone())
    }
}
