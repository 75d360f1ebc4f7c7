//! Command-line pipeline: run configuration, presets and the three commands.
//!
//! A run is fully determined by its resolved [`RunConfig`]; every random
//! stream is derived from the master `seed`, so reruns reproduce all rasters
//! and CSVs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_fan_geometry, FanGeometry, GridSpec};
use crate::inr::{
    init_inr, ArchKind, Architecture, HashConfig, InrModel, PreparedGrid, ReluFourierConfig, SirenConfig,
};
use crate::io_formats::{export_png, read_image, read_sinogram, write_atomic, write_checkpoint, write_raster};
use crate::optim::LrSchedule;
use crate::phantom_sim::{
    add_poisson_noise, downsample_image, generate_phantom, simulate_sinogram, NoiseConfig, PhantomConfig,
};
use crate::projector::{FanProjector, Image, Sinogram};
use crate::recon::{
    admm_reconstruct, condition_ratio_experiment, log_grid, mse, train_inr, tv_sweep, AdmmSettings, LossKind, TrainLog,
};
use crate::sino_filter::{fbp_reconstruct, FilterOperator, FilterPower};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum Method {
    #[serde(rename = "fbp")]
    #[value(name = "fbp")]
    Fbp,
    #[serde(rename = "tv")]
    #[value(name = "tv")]
    Tv,
    #[serde(rename = "inr-ls")]
    #[value(name = "inr-ls")]
    InrLs,
    #[serde(rename = "inr-fls")]
    #[value(name = "inr-fls")]
    InrFls,
    #[serde(rename = "inr-admm")]
    #[value(name = "inr-admm")]
    InrAdmm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fbp => "fbp",
            Method::Tv => "tv",
            Method::InrLs => "inr-ls",
            Method::InrFls => "inr-fls",
            Method::InrAdmm => "inr-admm",
        }
    }

    pub fn uses_inr(self) -> bool {
        matches!(self, Method::InrLs | Method::InrFls | Method::InrAdmm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n_side: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub n_views: usize,
    pub n_det: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub enabled: bool,
    /// Incident photons summed over all rays.
    pub total_photons: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Gradient steps, each one `P` and one `Pᵀ`.
    pub iters: usize,
    /// Initial learning rate; defaults per architecture.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau0: Option<f64>,
    /// Fraction of `iters` run at `tau0` before dropping.
    pub drop_fraction: f64,
    pub drop_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmSection {
    /// Penalty; defaults per architecture and scale.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    pub outer: usize,
    pub adam_iters: usize,
    /// Inner Adam rate; defaults per architecture and scale.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_lr: Option<f64>,
    pub cgls_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvSection {
    pub iters: usize,
    /// Fixed weight; when absent λ is tuned against the ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n_lambdas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondSection {
    pub n_side: usize,
    pub n_views: usize,
    pub n_det: usize,
    pub n_seeds: usize,
    /// Refuse to run when `pixels · W` exceeds this.
    pub max_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    /// Directory holding the simulated rasters; defaults to `out`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub sinogram: String,
    /// Empty string skips MSE reporting.
    pub ground_truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// PNG display window; defaults to `[0, peak phantom attenuation]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub png_window: Option<[f64; 2]>,
    /// Write wall-clock seconds into logs (breaks byte-identical reruns).
    pub timing: bool,
}

/// Fully resolved run description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,
    pub out: PathBuf,
    pub method: Method,
    pub grid: GridSection,
    pub geometry: GeometrySection,
    pub phantom: PhantomConfig,
    pub noise: NoiseSection,
    pub arch: Architecture,
    pub train: TrainSection,
    pub admm: AdmmSection,
    pub tv: TvSection,
    pub cond: CondSection,
    pub input: InputSection,
    pub output: OutputSection,
}

/// Streams drawn from the master seed.
const STREAM_PHANTOM: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_COND: u64 = 1 << 32;

/// SplitMix64 finalizer over `master + stream`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Preset network for each architecture at each scale.
pub fn arch_preset(scale: Scale, kind: ArchKind) -> Architecture {
    match (scale, kind) {
        (Scale::Paper, ArchKind::ReluFourier) => Architecture::ReluFourier(ReluFourierConfig::default()),
        (Scale::Paper, ArchKind::Siren) => Architecture::Siren(SirenConfig::default()),
        (Scale::Paper, ArchKind::Hash) => Architecture::Hash(HashConfig::default()),
        (Scale::Desk, ArchKind::ReluFourier) => {
            Architecture::ReluFourier(ReluFourierConfig { depth: 4, width: 64, k_max: 15 })
        }
        (Scale::Desk, ArchKind::Siren) => Architecture::Siren(SirenConfig { depth: 4, width: 64, omega0: 75.0 }),
        (Scale::Desk, ArchKind::Hash) => {
            Architecture::Hash(HashConfig { log2_table_size: 16, mlp_depth: 4, mlp_width: 64, ..HashConfig::default() })
        }
    }
}

/// Initial learning rate of the LS/FLS schedule.
pub fn default_tau0(kind: ArchKind) -> f64 {
    match kind {
        ArchKind::ReluFourier => 1e-3,
        ArchKind::Siren | ArchKind::Hash => 1e-4,
    }
}

/// `(μ, inner Adam rate)` for ADMM.
pub fn default_admm(scale: Scale, kind: ArchKind) -> (f64, f64) {
    match (scale, kind) {
        (Scale::Paper, ArchKind::ReluFourier) => (1.0, 1e-4),
        (Scale::Paper, ArchKind::Siren) => (3.0, 1e-4),
        (Scale::Paper, ArchKind::Hash) => (2.5, 1e-3),
        (Scale::Desk, ArchKind::ReluFourier) => (100.0, 1e-3),
        (Scale::Desk, ArchKind::Siren) => (100.0, 1e-4),
        (Scale::Desk, ArchKind::Hash) => (100.0, 1e-3),
    }
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        let desk = scale == Scale::Desk;
        let phantom = PhantomConfig { n_hi: if desk { 256 } else { 2048 }, ..PhantomConfig::default() };
        RunConfig {
            scale,
            seed: 0,
            out: PathBuf::from("out"),
            method: Method::InrFls,
            grid: GridSection { n_side: if desk { 128 } else { 512 } },
            geometry: if desk {
                GeometrySection { n_views: 64, n_det: 256 }
            } else {
                GeometrySection { n_views: 128, n_det: 1024 }
            },
            phantom,
            noise: NoiseSection { enabled: true, total_photons: 32e10 },
            arch: arch_preset(scale, ArchKind::ReluFourier),
            train: TrainSection {
                iters: if desk { 300 } else { 1000 },
                tau0: None,
                drop_fraction: 0.5,
                drop_factor: 10.0,
            },
            admm: AdmmSection {
                mu: None,
                outer: if desk { 6 } else { 20 },
                adam_iters: 50,
                adam_lr: None,
                cgls_iters: 50,
            },
            tv: TvSection {
                iters: if desk { 300 } else { 1000 },
                lambda: None,
                lambda_min: 1e-3,
                lambda_max: 1.0,
                n_lambdas: 8,
            },
            cond: if desk {
                CondSection { n_side: 32, n_views: 24, n_det: 64, n_seeds: 20, max_entries: 1 << 22 }
            } else {
                CondSection { n_side: 512, n_views: 128, n_det: 1024, n_seeds: 100, max_entries: 1 << 22 }
            },
            input: InputSection {
                dir: None,
                sinogram: "sinogram_noisy.ras".into(),
                ground_truth: "ground_truth.ras".into(),
            },
            output: OutputSection { png_window: None, timing: false },
        }
    }

    /// Parses a TOML file body over the preset it names (or `scale`).
    ///
    /// Tables merge key by key. Naming a different `arch.arch` swaps in that
    /// architecture's preset before the remaining keys apply.
    pub fn from_toml_over_preset(text: &str, scale: Option<Scale>) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (section, key) in [("phantom", "seed"), ("phantom", "fov"), ("noise", "seed")] {
            if user.get(section).and_then(|s| s.get(key)).is_some() {
                return Err(Error::Config(format!(
                    "{section}.{key} is derived; set the top-level `seed` or `fov` instead"
                )));
            }
        }
        let chosen = match (scale, user.get("scale")) {
            (Some(s), _) => s,
            (None, Some(v)) => Scale::deserialize(v.clone()).map_err(|e| Error::Config(format!("scale: {e}")))?,
            (None, None) => Scale::Desk,
        };
        let mut base = toml::Table::try_from(RunConfig::preset(chosen)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(kind) = user.get("arch").and_then(|a| a.get("arch")) {
            let kind: ArchKind =
                kind.as_str().ok_or_else(|| Error::Config("arch.arch must be a string".into()))?.parse()?;
            let arch = toml::Value::try_from(arch_preset(chosen, kind)).map_err(|e| Error::Config(e.to_string()))?;
            base.insert("arch".into(), arch);
        }
        let fov = user.get("fov").cloned();
        let mut user = user;
        user.remove("fov");
        merge(&mut base, user);
        base.insert("scale".into(), toml::Value::try_from(chosen).map_err(|e| Error::Config(e.to_string()))?);
        if let Some(f) = fov {
            let phantom = base.get_mut("phantom").and_then(|p| p.as_table_mut()).expect("preset has a phantom table");
            phantom.insert("fov".into(), f);
        }
        let cfg: RunConfig =
            toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.phantom.validate()?;
        self.arch.validate()?;
        self.recon_grid()?;
        if !self.phantom.n_hi.is_multiple_of(self.grid.n_side) || self.phantom.n_hi / self.grid.n_side < 2 {
            return bad(format!(
                "phantom.n_hi = {} must be an integer multiple (>= 2) of grid.n_side = {}",
                self.phantom.n_hi, self.grid.n_side
            ));
        }
        if self.geometry.n_views == 0 || self.geometry.n_det < 2 {
            return bad("geometry needs at least one view and two detector bins".into());
        }
        if self.noise.enabled && !(self.noise.total_photons > 0.0 && self.noise.total_photons.is_finite()) {
            return bad(format!("noise.total_photons must be positive, got {}", self.noise.total_photons));
        }
        let t = &self.train;
        if t.iters == 0 {
            return bad("train.iters must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&t.drop_fraction) || !(t.drop_factor > 0.0) {
            return bad("train.drop_fraction must lie in [0, 1] and drop_factor be positive".into());
        }
        if matches!(t.tau0, Some(v) if !(v > 0.0 && v.is_finite())) {
            return bad("train.tau0 must be positive".into());
        }
        self.admm_settings().validate()?;
        let tv = &self.tv;
        if tv.iters == 0 || tv.n_lambdas == 0 || !(tv.lambda_min > 0.0 && tv.lambda_min <= tv.lambda_max) {
            return bad("tv needs iters >= 1, n_lambdas >= 1 and 0 < lambda_min <= lambda_max".into());
        }
        if matches!(tv.lambda, Some(l) if !(l >= 0.0 && l.is_finite())) {
            return bad("tv.lambda must be non-negative".into());
        }
        let c = &self.cond;
        if c.n_side == 0 || c.n_views == 0 || c.n_det < 2 || c.n_seeds == 0 {
            return bad("cond needs a non-empty grid, geometry and at least one seed".into());
        }
        if let Some([lo, hi]) = self.output.png_window {
            if !(lo < hi) {
                return bad(format!("output.png_window [{lo}, {hi}] is empty"));
            }
        }
        Ok(())
    }

    pub fn recon_grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.n_side, self.phantom.fov).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn geometry(&self) -> Result<FanGeometry> {
        make_fan_geometry(self.geometry.n_views, self.geometry.n_det, self.recon_grid()?)
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig { seed: derive_seed(self.seed, STREAM_PHANTOM), ..self.phantom.clone() }
    }

    pub fn noise_config(&self) -> Option<NoiseConfig> {
        self.noise.enabled.then(|| NoiseConfig {
            total_photons: self.noise.total_photons,
            seed: derive_seed(self.seed, STREAM_NOISE),
        })
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_INIT)
    }

    pub fn cond_seeds(&self) -> Vec<u64> {
        (0..self.cond.n_seeds as u64).map(|i| derive_seed(self.seed, STREAM_COND + i)).collect()
    }

    pub fn schedule(&self) -> LrSchedule {
        let tau0 = self.train.tau0.unwrap_or_else(|| default_tau0(self.arch.kind()));
        LrSchedule {
            tau0,
            drop_at: (self.train.iters as f64 * self.train.drop_fraction).round() as usize,
            drop_factor: self.train.drop_factor,
        }
    }

    pub fn admm_settings(&self) -> AdmmSettings {
        let (mu, lr) = default_admm(self.scale, self.arch.kind());
        AdmmSettings {
            mu: self.admm.mu.unwrap_or(mu),
            outer: self.admm.outer,
            adam_iters: self.admm.adam_iters,
            adam_lr: self.admm.adam_lr.unwrap_or(lr),
            cgls_iters: self.admm.cgls_iters,
        }
    }

    pub fn tv_lambdas(&self) -> Vec<f64> {
        match self.tv.lambda {
            Some(l) => vec![l],
            None => log_grid(self.tv.lambda_min, self.tv.lambda_max, self.tv.n_lambdas),
        }
    }

    pub fn png_window(&self) -> (f64, f64) {
        self.output.png_window.map_or((0.0, self.phantom.max_attenuation()), |[lo, hi]| (lo, hi))
    }

    /// File stem shared by a reconstruction's outputs.
    pub fn label(&self) -> String {
        if self.method.uses_inr() {
            format!("{}_{}", self.method.name(), self.arch.kind())
        } else {
            self.method.name().to_string()
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Simulated data set.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub phantom_hi: Image<f64>,
    pub ground_truth: Image<f64>,
    pub sinogram_clean: Sinogram<f64>,
    pub sinogram_noisy: Sinogram<f64>,
}

/// Phantom, ground truth and sinograms for `cfg`. Without noise the noisy
/// sinogram equals the clean one.
pub fn simulate(cfg: &RunConfig) -> Result<Simulation> {
    let geom = cfg.geometry()?;
    let pc = cfg.phantom_config();
    let phantom_hi: Image<f64> = generate_phantom(&pc)?;
    let ground_truth = downsample_image(&phantom_hi, pc.n_hi / cfg.grid.n_side)?;
    let sinogram_clean = simulate_sinogram(&phantom_hi, &geom)?;
    let sinogram_noisy = match cfg.noise_config() {
        Some(n) => add_poisson_noise(&sinogram_clean, &n)?,
        None => sinogram_clean.clone(),
    };
    Ok(Simulation { phantom_hi, ground_truth, sinogram_clean, sinogram_noisy })
}

/// Result of one reconstruction method.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: Image<f64>,
    pub log: Option<TrainLog>,
    pub admm_residuals: Option<String>,
    pub tv_scores: Option<Vec<(f64, f64)>>,
    pub model: Option<InrModel<f64>>,
}

/// Runs `cfg.method` on `sino`.
pub fn reconstruct(cfg: &RunConfig, sino: &Sinogram<f64>, truth: Option<&Image<f64>>) -> Result<Reconstruction> {
    let geom = &sino.geom;
    let grid = geom.grid;
    if let Some(t) = truth {
        if t.grid != grid {
            return Err(Error::Config("ground truth grid differs from the sinogram's reconstruction grid".into()));
        }
    }
    let truth_data = truth.map(|t| t.data.as_slice());
    let mut out =
        Reconstruction { image: Image::zeros(grid), log: None, admm_residuals: None, tv_scores: None, model: None };
    match cfg.method {
        Method::Fbp => out.image = fbp_reconstruct(sino)?,
        Method::Tv => {
            let proj = FanProjector::new(geom.clone())?;
            let lambdas = cfg.tv_lambdas();
            let sweep = match truth_data {
                Some(t) => tv_sweep(&proj, grid.n_side, &sino.data, &lambdas, cfg.tv.iters, t)?,
                None if lambdas.len() == 1 => {
                    let x =
                        crate::optim::chambolle_pock_tv(&proj, grid.n_side, &sino.data, lambdas[0], cfg.tv.iters)?.x;
                    crate::recon::TvSweep { lambda: lambdas[0], x, scores: vec![(lambdas[0], f64::NAN)] }
                }
                None => return Err(Error::Config("tuning tv.lambda needs a ground truth; set tv.lambda".into())),
            };
            out.image = Image::from_vec(grid, sweep.x)?;
            out.tv_scores = Some(sweep.scores);
        }
        Method::InrLs | Method::InrFls | Method::InrAdmm => {
            let proj = FanProjector::new(geom.clone())?;
            let pg = PreparedGrid::for_grid(&cfg.arch, &grid)?;
            let model: InrModel<f64> = init_inr(&cfg.arch, cfg.init_seed())?;
            let (model, log) = if cfg.method == Method::InrAdmm {
                let (m, state, log) =
                    admm_reconstruct(model, &pg, &proj, &sino.data, &cfg.admm_settings(), truth_data, None)?;
                out.admm_residuals = Some(state.residuals_csv());
                (m, log)
            } else {
                let (kind, filter) = if cfg.method == Method::InrFls {
                    (LossKind::Fls, Some(FilterOperator::new(geom, FilterPower::Full)?))
                } else {
                    (LossKind::Ls, None)
                };
                let sched = cfg.schedule();
                train_inr(model, &pg, &proj, &sino.data, kind, filter.as_ref(), &sched, cfg.train.iters, truth_data)?
            };
            out.image = model.evaluate_image(&pg)?;
            out.log = Some(log);
            out.model = Some(model);
        }
    }
    if out.image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{} produced non-finite pixels", cfg.method.name())));
    }
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(name = "ctinr", version, about = "Sparse-view fan-beam CT with implicit neural representations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize the phantom and simulate clean and noisy sinograms.
    Simulate(CommonArgs),
    /// Reconstruct from a simulated sinogram.
    Reconstruct(ReconstructArgs),
    /// Condition numbers of PQ and F^{1/2}PQ at initialization.
    Cond(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration; omitted keys come from the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the reduced preset (the default).
    #[arg(long, conflicts_with = "paper_scale")]
    pub desk_scale: bool,
    /// Use the full-size preset.
    #[arg(long)]
    pub paper_scale: bool,
    /// Replace outputs whose manifest records a different run.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Overrides `method` from the config.
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Directory with the simulated rasters (defaults to the output directory).
    #[arg(long)]
    pub input: Option<PathBuf>,
}

impl CommonArgs {
    fn scale(&self) -> Option<Scale> {
        match (self.desk_scale, self.paper_scale) {
            (true, _) => Some(Scale::Desk),
            (_, true) => Some(Scale::Paper),
            _ => None,
        }
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = RunConfig::from_toml_over_preset(&text, self.scale())?;
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
    seeds: Seeds,
    outputs: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Seeds {
    master: u64,
    phantom: u64,
    noise: u64,
    init: u64,
}

fn manifest_bytes(command: &str, cfg: &RunConfig, outputs: &[&str]) -> Result<Vec<u8>> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        seeds: Seeds {
            master: cfg.seed,
            phantom: derive_seed(cfg.seed, STREAM_PHANTOM),
            noise: derive_seed(cfg.seed, STREAM_NOISE),
            init: cfg.init_seed(),
        },
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let mut s = serde_json::to_vec_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

/// Fails when `path` holds a manifest for a different run, unless overwriting.
fn check_manifest(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    match fs::read(path) {
        Ok(old) if old != bytes && !overwrite => {
            Err(Error::Config(format!("{} records a different run; pass --overwrite to replace it", path.display())))
        }
        Ok(_) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let outputs = ["phantom_hi.ras", "ground_truth.ras", "sinogram_clean.ras", "sinogram_noisy.ras"];
    let manifest = manifest_bytes("simulate", &cfg, &outputs)?;
    let mpath = cfg.out.join("manifest_simulate.json");
    check_manifest(&mpath, &manifest, args.overwrite)?;
    let sim = simulate(&cfg)?;
    prepare_out(&cfg.out)?;
    write_raster(cfg.out.join(outputs[0]), &sim.phantom_hi)?;
    write_raster(cfg.out.join(outputs[1]), &sim.ground_truth)?;
    write_raster(cfg.out.join(outputs[2]), &sim.sinogram_clean)?;
    write_raster(cfg.out.join(outputs[3]), &sim.sinogram_noisy)?;
    write_atomic(&mpath, &manifest)?;
    println!("wrote {} simulation rasters to {}", outputs.len(), cfg.out.display());
    Ok(())
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(i) = &args.input {
        cfg.input.dir = Some(i.clone());
    }
    let input = cfg.input.dir.clone().unwrap_or_else(|| cfg.out.clone());
    let label = cfg.label();
    let mut outputs = vec![format!("{label}.ras"), format!("{label}.png")];
    match cfg.method {
        Method::Fbp => {}
        Method::Tv => outputs.push(format!("{label}_lambda.csv")),
        _ => {
            outputs.push(format!("{label}_log.csv"));
            outputs.push(format!("{label}.ckpt"));
            if cfg.method == Method::InrAdmm {
                outputs.push(format!("{label}_admm.csv"));
            }
        }
    }
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    let manifest = manifest_bytes("reconstruct", &cfg, &names)?;
    let mpath = cfg.out.join(format!("manifest_{label}.json"));
    check_manifest(&mpath, &manifest, args.common.overwrite)?;

    let sino: Sinogram<f64> = read_sinogram(input.join(&cfg.input.sinogram))?;
    let expected = cfg.geometry()?;
    if sino.geom != expected {
        return Err(Error::Config(format!(
            "{} was simulated with a different geometry than this config describes",
            cfg.input.sinogram
        )));
    }
    let truth: Option<Image<f64>> = if cfg.input.ground_truth.is_empty() {
        None
    } else {
        let p = input.join(&cfg.input.ground_truth);
        if p.exists() {
            Some(read_image(&p)?)
        } else {
            None
        }
    };
    let start = Instant::now();
    let rec = reconstruct(&cfg, &sino, truth.as_ref())?;
    prepare_out(&cfg.out)?;
    write_raster(cfg.out.join(&outputs[0]), &rec.image)?;
    export_png(cfg.out.join(&outputs[1]), &rec.image, cfg.png_window())?;
    if let Some(scores) = &rec.tv_scores {
        let mut s = String::from("lambda,mse\n");
        for (l, m) in scores {
            s.push_str(&format!("{l:e},{m:e}\n"));
        }
        write_atomic(&cfg.out.join(&outputs[2]), s.as_bytes())?;
    }
    if let Some(log) = &rec.log {
        write_atomic(&cfg.out.join(&outputs[2]), log.to_csv(cfg.output.timing).as_bytes())?;
    }
    if let Some(model) = &rec.model {
        write_checkpoint(cfg.out.join(&outputs[3]), model)?;
    }
    if let Some(res) = &rec.admm_residuals {
        write_atomic(&cfg.out.join(&outputs[4]), res.as_bytes())?;
    }
    write_atomic(&mpath, &manifest)?;
    match &truth {
        Some(t) => println!("{label}: mse {:.6e} ({:.1} s)", mse(&rec.image, t)?, start.elapsed().as_secs_f64()),
        None => println!("{label}: done ({:.1} s)", start.elapsed().as_secs_f64()),
    }
    Ok(())
}

pub fn cmd_cond(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let c = &cfg.cond;
    let entries = (c.n_side * c.n_side).saturating_mul(cfg.arch.feature_width());
    if entries > c.max_entries {
        return Err(Error::Config(format!(
            "dense feature matrix has {entries} entries (pixels x width), above the cap cond.max_entries = {}",
            c.max_entries
        )));
    }
    let kind = cfg.arch.kind();
    let name = format!("cond_{kind}.csv");
    let manifest = manifest_bytes("cond", &cfg, &[&name])?;
    let mpath = cfg.out.join(format!("manifest_cond_{kind}.json"));
    check_manifest(&mpath, &manifest, args.overwrite)?;
    let grid = GridSpec::new(c.n_side, cfg.phantom.fov)?;
    let geom = make_fan_geometry(c.n_views, c.n_det, grid)?;
    let report = condition_ratio_experiment(&cfg.arch, &geom, cfg.cond_seeds())?;
    prepare_out(&cfg.out)?;
    write_atomic(&cfg.out.join(&name), report.to_csv().as_bytes())?;
    write_atomic(&mpath, &manifest)?;
    let (m, s) = report.ratio_stats();
    println!(
        "{kind}: kappa_fls/kappa_ls = {m:.4e} +- {s:.2e} over {} seeds ({} rank-deficient)",
        report.samples.len() - report.excluded(),
        report.excluded()
    );
    Ok(())
}

/// Process exit status for an error: 2 for configuration problems, 3 for
/// numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Geometry(_) | Error::Dimension(_) => 2,
        Error::Numerical(_) => 3,
        Error::Format(_) | Error::Io { .. } => 1,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Cond(a) => cmd_cond(a),
    }
}
