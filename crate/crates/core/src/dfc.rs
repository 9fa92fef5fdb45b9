//! Dynamic frequency coupling of backbone features with their Haar sub-bands.
//!
//! Low-level levels (1, 2) merge the three detail bands, hard-threshold the
//! result with an iteration-decaying strength, and fuse it back into the
//! same-phase feature map (ASFF). High-level levels (3, 4) fuse each phase's
//! features with the *other* phase's approximation band (BTFF).
//!
//! Alternative couplings used for ablations are selected by [`DfcVariant`];
//! they only change which band of which phase enters each fusion.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::layers::ConvLayer;
use crate::tensor::{Band, Float, Graph, ParamStore, Tensor, Var};
use crate::Phase;

/// Exponentially decaying sparsity strength `λ(p) = λ₀·e^(−γp)` and the
/// threshold scale `g`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityScheduler {
    pub lambda0: f64,
    pub gamma: f64,
    pub g: f64,
}

impl Default for SparsityScheduler {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            gamma: 1e-4,
            g: 0.1,
        }
    }
}

impl SparsityScheduler {
    pub fn new(lambda0: f64, gamma: f64, g: f64) -> Result<Self> {
        let s = Self { lambda0, gamma, g };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda0 > 0.0 && self.lambda0.is_finite(),
            "lambda0 must be positive, got {}",
            self.lambda0
        );
        ensure!(self.gamma >= 0.0, "gamma must be non-negative, got {}", self.gamma);
        ensure!(self.g >= 0.0, "g must be non-negative, got {}", self.g);
        Ok(())
    }

    pub fn strength(&self, p: u64) -> f64 {
        self.lambda0 * (-self.gamma * p as f64).exp()
    }

    /// Magnitude an entry must strictly exceed to survive at iteration `p`.
    pub fn threshold(&self, p: u64) -> f64 {
        self.g * self.strength(p)
    }
}

/// `λ₀·e^(−γp)`.
pub fn sparsity_strength(scheduler: &SparsityScheduler, p: u64) -> f64 {
    scheduler.strength(p)
}

fn keep_mask<T: Float>(values: &[T], threshold: f64) -> Vec<bool> {
    values.iter().map(|v| v.abs().to_f64() > threshold).collect()
}

/// Hard threshold: keep entries with `|h| > g·λ(p)`, zero the rest.
pub fn sparse_threshold<T: Float>(h: &Tensor<T>, scheduler: &SparsityScheduler, p: u64) -> Tensor<T> {
    let thr = scheduler.threshold(p);
    h.map(|v| if v.abs().to_f64() > thr { v } else { T::zero() })
}

/// Differentiable [`sparse_threshold`] with a straight-through gradient on
/// the retained entries.
pub fn sparse_threshold_var<T: Float>(g: &mut Graph<T>, h: Var, scheduler: &SparsityScheduler, p: u64) -> Result<Var> {
    let mask = keep_mask(g.value(h).data(), scheduler.threshold(p));
    g.mask_pass(h, mask)
}

/// Handles to the four sub-bands of one feature map on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BandVars {
    pub ll: Var,
    pub hl: Var,
    pub lh: Var,
    pub hh: Var,
}

impl BandVars {
    pub fn analyse<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Self> {
        Ok(Self {
            ll: g.dwt_band(x, Band::LL)?,
            hl: g.dwt_band(x, Band::HL)?,
            lh: g.dwt_band(x, Band::LH)?,
            hh: g.dwt_band(x, Band::HH)?,
        })
    }
}

fn check_half_resolution<T: Float>(g: &Graph<T>, full: Var, half: Var, what: &str) -> Result<()> {
    let (fs, hs) = (g.shape(full), g.shape(half));
    ensure!(
        fs.len() == 4 && hs.len() == 4 && fs[2] == 2 * hs[2] && fs[3] == 2 * hs[3] && fs[0] == hs[0],
        "{what}: band {hs:?} is not half the resolution of feature {fs:?}"
    );
    Ok(())
}

/// Intermediate values of one ASFF application, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AsffOutput {
    pub merged: Var,
    pub sparse: Var,
    pub fused: Var,
}

/// Adaptive sparse frequency fusion for one pyramid level.
#[derive(Clone, Debug)]
pub struct AsffBlock {
    pub merge: ConvLayer,
    pub fuse: ConvLayer,
    pub scheduler: SparsityScheduler,
}

impl AsffBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        scheduler: SparsityScheduler,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            merge: ConvLayer::new(store, &format!("{prefix}.merge"), 3 * channels, channels, 3, 1, rng)?,
            fuse: ConvLayer::new(store, &format!("{prefix}.fuse"), 2 * channels, channels, 3, 1, rng)?,
            scheduler,
        })
    }

    /// `P = Conv(Cat(Up(S(Conv(Cat(HL, LH, HH)))), F))`.
    pub fn fuse<T: Float>(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        f_low: Var,
        bands: &BandVars,
        p: u64,
    ) -> Result<AsffOutput> {
        for b in [bands.hl, bands.lh, bands.hh] {
            check_half_resolution(g, f_low, b, "asff")?;
        }
        let detail = g.concat(&[bands.hl, bands.lh, bands.hh])?;
        let merged = self.merge.forward(g, bound, detail)?;
        let sparse = sparse_threshold_var(g, merged, &self.scheduler, p)?;
        let up = g.upsample(sparse, 2)?;
        let cat = g.concat(&[up, f_low])?;
        let fused = self.fuse.forward(g, bound, cat)?;
        Ok(AsffOutput { merged, sparse, fused })
    }
}

/// Free-function form of [`AsffBlock::fuse`] returning the fused map.
pub fn asff_fuse<T: Float>(
    block: &AsffBlock,
    g: &mut Graph<T>,
    bound: &[Var],
    f_low: Var,
    bands: &BandVars,
    p: u64,
) -> Result<Var> {
    Ok(block.fuse(g, bound, f_low, bands, p)?.fused)
}

/// Fusion of a feature map with an upsampled approximation band.
#[derive(Clone, Debug)]
pub struct BtffBlock {
    pub fuse: ConvLayer,
}

impl BtffBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fuse: ConvLayer::new(store, &format!("{prefix}.fuse"), 2 * channels, channels, 3, 1, rng)?,
        })
    }

    /// `Conv(Cat(Up(LL), F))` without a phase check; used by ablation wirings.
    pub(crate) fn fuse_unchecked<T: Float>(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        feature: Var,
        ll: Var,
    ) -> Result<Var> {
        check_half_resolution(g, feature, ll, "low-frequency fusion")?;
        let up = g.upsample(ll, 2)?;
        let cat = g.concat(&[up, feature])?;
        self.fuse.forward(g, bound, cat)
    }
}

/// Cross-temporal fusion `P^t = Conv(Cat(Up(LL^{t'}), F^t))`; refuses same-phase pairs.
pub fn btff_fuse<T: Float>(
    block: &BtffBlock,
    g: &mut Graph<T>,
    bound: &[Var],
    f_high: Var,
    phase: Phase,
    ll_other: Var,
    other_phase: Phase,
) -> Result<Var> {
    ensure!(
        phase != other_phase,
        "bidirectional temporal fusion pairs {phase} features with {other_phase} low-frequency band; phases must differ"
    );
    block.fuse_unchecked(g, bound, f_high, ll_other)
}

/// Coupling layouts: the default plus the alternatives used in ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfcVariant {
    /// Levels 1–2 fuse same-phase detail bands, levels 3–4 the other phase's approximation band.
    #[default]
    AsffBtff,
    /// Every level fuses the other phase's detail bands.
    AllHigh,
    /// Every level fuses its own phase's approximation band.
    AllLow,
    /// Levels 1–2 fuse the other phase's detail bands; levels 3–4 pass through.
    CrossHigh,
    /// Levels 3–4 fuse their own phase's approximation band; levels 1–2 pass through.
    SameLow,
    /// Only the same-phase detail fusion on levels 1–2.
    AsffOnly,
    /// Only the cross-phase approximation fusion on levels 3–4.
    BtffOnly,
}

impl DfcVariant {
    pub const ALL: [DfcVariant; 7] = [
        DfcVariant::AsffBtff,
        DfcVariant::AllHigh,
        DfcVariant::AllLow,
        DfcVariant::CrossHigh,
        DfcVariant::SameLow,
        DfcVariant::AsffOnly,
        DfcVariant::BtffOnly,
    ];

    /// Coupling applied at pyramid level `level` (1-based).
    pub fn coupling(self, level: usize) -> Option<(BandKind, Source)> {
        let low_level = level <= 2;
        use BandKind::*;
        use Source::*;
        match self {
            DfcVariant::AsffBtff => Some(if low_level { (High, Same) } else { (Low, Cross) }),
            DfcVariant::AllHigh => Some((High, Cross)),
            DfcVariant::AllLow => Some((Low, Same)),
            DfcVariant::CrossHigh => low_level.then_some((High, Cross)),
            DfcVariant::SameLow => (!low_level).then_some((Low, Same)),
            DfcVariant::AsffOnly => low_level.then_some((High, Same)),
            DfcVariant::BtffOnly => (!low_level).then_some((Low, Cross)),
        }
    }
}

impl fmt::Display for DfcVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned));
        f.write_str(s.as_deref().unwrap_or("?"))
    }
}

/// Which half of the spectrum enters a fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum BandKind {
    /// Merged (and sparsified) detail bands HL, LH, HH.
    High,
    /// Approximation band LL.
    Low,
}

/// Whether the band comes from the feature's own phase or the other one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Source {
    Same,
    Cross,
}

/// Instrumentation record: one fusion convolution's inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct FusionRecord {
    pub level: usize,
    pub feature_phase: Phase,
    pub band: BandKind,
    pub band_phase: Phase,
}

#[derive(Clone, Debug)]
enum LevelBlock {
    High(AsffBlock),
    Low(BtffBlock),
}

/// What one coupler pass did: the fusion wiring and how many merged
/// high-frequency coefficients survived thresholding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DfcTrace {
    pub records: Vec<FusionRecord>,
    pub kept: usize,
    pub total: usize,
}

impl DfcTrace {
    /// Share of thresholded coefficients kept; `None` if nothing was thresholded.
    pub fn retained_fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.kept as f64 / self.total as f64)
    }
}

/// The full coupler over four pyramid levels and two phases.
#[derive(Clone, Debug)]
pub struct Dfc {
    pub variant: DfcVariant,
    levels: Vec<Option<(LevelBlock, Source)>>,
}

/// Per-phase, per-level maps flowing through the coupler: `maps[phase][level - 1]`.
pub type PhaseLevels = [[Var; 4]; 2];

impl Dfc {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        variant: DfcVariant,
        channels: [usize; 4],
        scheduler: SparsityScheduler,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(4);
        for (i, &c) in channels.iter().enumerate() {
            let level = i + 1;
            let prefix = format!("dfc.level{level}");
            levels.push(match variant.coupling(level) {
                None => None,
                Some((BandKind::High, src)) => Some((
                    LevelBlock::High(AsffBlock::new(store, &prefix, c, scheduler, rng)?),
                    src,
                )),
                Some((BandKind::Low, src)) => Some((LevelBlock::Low(BtffBlock::new(store, &prefix, c, rng)?), src)),
            });
        }
        Ok(Self { variant, levels })
    }

    /// Couple both phases' features. Levels without a coupling pass through.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        feats: &PhaseLevels,
        p: u64,
        trace: &mut DfcTrace,
    ) -> Result<PhaseLevels> {
        let mut out = *feats;
        for (li, entry) in self.levels.iter().enumerate() {
            let Some((block, source)) = entry else { continue };
            let bands = [BandVars::analyse(g, feats[0][li])?, BandVars::analyse(g, feats[1][li])?];
            for phase in Phase::BOTH {
                let band_phase = match source {
                    Source::Same => phase,
                    Source::Cross => phase.other(),
                };
                let f = feats[phase.index()][li];
                let src = &bands[band_phase.index()];
                let (fused, kind) = match block {
                    LevelBlock::High(b) => {
                        let o = b.fuse(g, bound, f, src, p)?;
                        let sparse = g.value(o.sparse).data();
                        trace.kept += sparse.iter().filter(|v| **v != T::zero()).count();
                        trace.total += sparse.len();
                        (o.fused, BandKind::High)
                    }
                    LevelBlock::Low(b) => {
                        let v = match source {
                            Source::Cross => btff_fuse(b, g, bound, f, phase, src.ll, band_phase)?,
                            Source::Same => b.fuse_unchecked(g, bound, f, src.ll)?,
                        };
                        (v, BandKind::Low)
                    }
                };
                trace.records.push(FusionRecord {
                    level: li + 1,
                    feature_phase: phase,
                    band: kind,
                    band_phase,
                });
                out[phase.index()][li] = fused;
            }
        }
        Ok(out)
    }
}
