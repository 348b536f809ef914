//! Experiment configs: one TOML file holding a `[common]` block and the
//! table of the experiment being run.

use serde::Deserialize;
use std::path::{Path, PathBuf};

use pilotwave_core::cosmo::{ExpandingMode, ModeRelaxConfig};
use pilotwave_core::experiments::{
    BranchingSetup, EprConfig, MomentumEnsemble, MomentumSetup, OscWave1d, PointerCoupling, SystemEnsemble,
};
use pilotwave_core::mini::{MiniComponent, A_MIN};
use pilotwave_core::relaxation::GridSpec;
use pilotwave_core::{IntegratorConfig, SuperpositionSpec, C64};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub common: Common,
    pub relax: Option<RelaxTable>,
    pub scaling: Option<ScalingTable>,
    pub mode: Option<ModeTable>,
    pub xi: Option<XiTable>,
    pub spectrum: Option<SpectrumTable>,
    pub mini: Option<MiniTable>,
    pub taubh: Option<TauTable>,
    pub branch: Option<BranchTable>,
    pub momentum: Option<MomentumTable>,
    pub subq: Option<SubqTable>,
    pub epr: Option<EprTable>,
    pub discriminate: Option<DiscriminateTable>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Common {
    /// Root seed; every random draw in a run derives from it.
    pub seed: u64,
    #[serde(default)]
    pub integrator: IntegratorConfig,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDensity {
    Gaussian { center: [f64; 2], sigma: [f64; 2] },
    /// `|psi(q, 0)|^2`.
    Equilibrium,
    /// `|psi(q, 0)|^2` squeezed about `center` by `factor`.
    Contracted {
        factor: f64,
        #[serde(default)]
        center: [f64; 2],
    },
    /// Ground state of the box.
    BoxGround,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxTable {
    /// Phases generated from `levels` use the root seed unless `seed` is given here.
    pub wave: SuperpositionSpec,
    pub initial: InitialDensity,
    pub grid: GridSpec,
    /// Coarse-graining cell side.
    pub eps: f64,
    pub t_end: f64,
    /// Uniform sample times from 0 to `t_end`, inclusive.
    pub samples: usize,
    /// Sample indices whose density fields are written out.
    #[serde(default)]
    pub snapshots: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingTable {
    pub m_list: Vec<u32>,
    pub n: usize,
    pub cells: usize,
    pub t_end: f64,
    pub samples: usize,
    /// Phase seeds; defaults to the root seed alone.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// Per-mode settings; their `seed` is replaced by the root seed.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeTable {
    pub k: f64,
    #[serde(default = "one")]
    pub a0: f64,
    #[serde(default = "one")]
    pub t0: f64,
    #[serde(default)]
    pub settings: ModeRelaxConfig,
}

impl ModeTable {
    pub fn mode(&self) -> pilotwave_core::Result<ExpandingMode> {
        ExpandingMode::new(self.k, self.a0, self.t0)
    }
}

fn ratio_lo() -> f64 {
    0.1
}

fn ratio_hi() -> f64 {
    4.0
}

fn eight() -> usize {
    8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XiTable {
    #[serde(default = "one")]
    pub a0: f64,
    #[serde(default = "one")]
    pub t0: f64,
    /// `lambda / H^{-1}` at `t0` runs from `ratio_hi` (first mode) down to `ratio_lo`.
    #[serde(default = "ratio_lo")]
    pub ratio_lo: f64,
    #[serde(default = "ratio_hi")]
    pub ratio_hi: f64,
    #[serde(default = "eight")]
    pub n_modes: usize,
    #[serde(default)]
    pub settings: ModeRelaxConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLaw {
    pub amplitude: f64,
    #[serde(default = "one")]
    pub n_s: f64,
    #[serde(default = "one")]
    pub pivot: f64,
}

impl PowerLaw {
    pub fn eval(&self, k: f64) -> f64 {
        self.amplitude * (k / self.pivot).powf(self.n_s - 1.0)
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum XiInput {
    /// `atan(c1 k / pi + c2) - pi / 2 + c3`.
    Fitted { c1: f64, c2: f64, c3: f64 },
    /// A `k,xi` CSV such as the one written by `xi`; relative paths resolve against the config file.
    Table { path: PathBuf },
    Unity,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    #[serde(default = "one")]
    pub a0: f64,
    #[serde(default = "one")]
    pub t0: f64,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub n: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumTable {
    #[serde(default)]
    pub ks: Vec<f64>,
    pub band: Option<Band>,
    pub p_qt: PowerLaw,
    pub xi: XiInput,
}

fn default_nodes() -> usize {
    64
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MiniWaveInput {
    Components {
        m_p: f64,
        components: Vec<MiniComponent>,
    },
    /// Gaussian packets in `k` of both chiralities.
    Packets {
        m_p: f64,
        k0: f64,
        sigma: f64,
        #[serde(default = "default_nodes")]
        nodes: usize,
        minus_weight: C64,
    },
}

fn a_min() -> f64 {
    A_MIN
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiniTable {
    pub wave: MiniWaveInput,
    /// Initial `(a, phi)` of each trajectory.
    pub starts: Vec<[f64; 2]>,
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    #[serde(default = "a_min")]
    pub a_min: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauTable {
    pub m_over_mp: Vec<f64>,
    pub kappa: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchTable {
    pub setup: BranchingSetup,
    pub ensemble: Option<SystemEnsemble>,
    pub runs: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumTable {
    pub setup: MomentumSetup,
    pub ensemble: Option<MomentumEnsemble>,
    pub runs: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackTable {
    pub x0: f64,
    pub times: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubqTable {
    /// Oscillator amplitudes at `t = 0`; normalized on use.
    pub psi: Vec<C64>,
    pub coupling: PointerCoupling,
    pub runs: u64,
    pub track: Option<TrackTable>,
}

impl SubqTable {
    pub fn wave(&self) -> pilotwave_core::Result<OscWave1d> {
        OscWave1d::new(self.psi.clone())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EprTable {
    pub config: EprConfig,
    pub pairs: u64,
}

fn horizon() -> f64 {
    2.0
}

fn ten() -> usize {
    10
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminateTable {
    /// Builds the two-mode pair with this overlap; otherwise `psi1` and `psi2` are required.
    pub overlap: Option<f64>,
    #[serde(default)]
    pub psi1: Vec<C64>,
    #[serde(default)]
    pub psi2: Vec<C64>,
    pub coupling: PointerCoupling,
    #[serde(default = "horizon")]
    pub horizon: f64,
    #[serde(default = "ten")]
    pub samples: usize,
    pub runs: u64,
}

pub struct Loaded {
    pub config: Config,
    pub path: PathBuf,
    pub bytes: Vec<u8>,
}

impl Loaded {
    /// Resolves `p` against the directory holding the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

pub fn load(path: &Path) -> Result<Loaded, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| format!("config {} is not UTF-8: {e}", path.display()))?;
    let config: Config = toml::from_str(text).map_err(|e| format!("config {}: {e}", path.display()))?;
    Ok(Loaded { config, path: path.to_path_buf(), bytes })
}
