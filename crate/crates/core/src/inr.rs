//! Coordinate networks over `[0, 1]^2`: initialization, grid evaluation,
//! reverse-mode gradients and last-layer feature matrices.
//!
//! Every architecture is an input encoding followed by an MLP whose final
//! layer is linear, `f(r) = a · h(r) + b`. `depth` counts linear layers, so a
//! depth-`d` network has `d - 1` hidden layers and the feature matrix `Q`
//! collects the `width` outputs of the last hidden layer.
//!
//! The flat parameter vector is laid out as: hash tables (level by level,
//! entry-major, `features_per_level` values per entry), then for each dense
//! layer its row-major `fan_out x fan_in` weights followed by its biases.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_grid_coords, GridSpec};
use crate::projector::Image;
use crate::scalar::{all_finite, Real};

/// Points processed per batched layer evaluation.
const CHUNK: usize = 2048;
/// Fourier embeddings up to this many values are computed once per grid.
const EMBEDDING_CACHE_LIMIT: usize = 1 << 25;
/// Forward activations kept for the backward pass up to this many values;
/// larger grids recompute the forward pass chunk by chunk.
const TAPE_LIMIT: usize = 1 << 26;

/// Spatial hash multipliers for the x and y vertex coordinates.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    ReluFourier,
    Siren,
    Hash,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [ArchKind::ReluFourier, ArchKind::Siren, ArchKind::Hash];

    pub fn tag(self) -> u8 {
        match self {
            ArchKind::ReluFourier => 1,
            ArchKind::Siren => 2,
            ArchKind::Hash => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::ReluFourier => "relu_fourier",
            ArchKind::Siren => "siren",
            ArchKind::Hash => "hash",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReluFourierConfig {
    pub depth: usize,
    pub width: usize,
    /// Frequencies `2πk` for integer `k` with `|k| <= k_max`.
    pub k_max: usize,
}

impl Default for ReluFourierConfig {
    fn default() -> Self {
        ReluFourierConfig { depth: 6, width: 256, k_max: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SirenConfig {
    pub depth: usize,
    pub width: usize,
    /// Scales every sine layer's pre-activation.
    pub omega0: f64,
}

impl Default for SirenConfig {
    fn default() -> Self {
        SirenConfig { depth: 6, width: 256, omega0: 75.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashConfig {
    pub log2_table_size: u32,
    pub levels: usize,
    pub features_per_level: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub mlp_depth: usize,
    pub mlp_width: usize,
}

impl Default for HashConfig {
    fn default() -> Self {
        HashConfig {
            log2_table_size: 23,
            levels: 16,
            features_per_level: 2,
            n_min: 16,
            n_max: 256,
            mlp_depth: 6,
            mlp_width: 128,
        }
    }
}

impl HashConfig {
    /// Grid resolution of every level, geometric from `n_min` to `n_max`.
    pub fn resolutions(&self) -> Vec<usize> {
        if self.levels == 1 {
            return vec![self.n_min];
        }
        let growth = ((self.n_max as f64).ln() - (self.n_min as f64).ln()) / (self.levels - 1) as f64;
        (0..self.levels)
            .map(|l| ((self.n_min as f64).ln() + growth * l as f64).exp())
            // absorb rounding so the last level lands exactly on n_max
            .map(|r| (r * (1.0 + 1e-12)).floor() as usize)
            .collect()
    }

    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Architecture {
    ReluFourier(ReluFourierConfig),
    Siren(SirenConfig),
    Hash(HashConfig),
}

impl Architecture {
    pub fn kind(&self) -> ArchKind {
        match self {
            Architecture::ReluFourier(_) => ArchKind::ReluFourier,
            Architecture::Siren(_) => ArchKind::Siren,
            Architecture::Hash(_) => ArchKind::Hash,
        }
    }

    /// Linear layers and hidden width.
    fn mlp_shape(&self) -> (usize, usize) {
        match self {
            Architecture::ReluFourier(c) => (c.depth, c.width),
            Architecture::Siren(c) => (c.depth, c.width),
            Architecture::Hash(c) => (c.mlp_depth, c.mlp_width),
        }
    }

    /// Width `W` of the last hidden layer.
    pub fn feature_width(&self) -> usize {
        self.mlp_shape().1
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::ReluFourier(c) => 2 * fourier_frequencies(c.k_max).len(),
            Architecture::Siren(_) => 2,
            Architecture::Hash(c) => c.levels * c.features_per_level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (depth, width) = self.mlp_shape();
        if depth < 2 {
            return Err(Error::Config(format!("depth must be at least 2, got {depth}")));
        }
        if width == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        match self {
            Architecture::ReluFourier(_) => {}
            Architecture::Siren(c) => {
                if !(c.omega0 > 0.0 && c.omega0.is_finite()) {
                    return Err(Error::Config(format!("omega0 must be positive, got {}", c.omega0)));
                }
            }
            Architecture::Hash(c) => {
                if c.levels == 0 || c.features_per_level == 0 {
                    return Err(Error::Config("hash encoding needs levels and features".into()));
                }
                if c.n_min == 0 || c.n_max < c.n_min || (c.levels == 1 && c.n_max != c.n_min) {
                    return Err(Error::Config(format!(
                        "invalid hash resolutions n_min={} n_max={} for {} levels",
                        c.n_min, c.n_max, c.levels
                    )));
                }
                if c.log2_table_size == 0 || c.log2_table_size > 32 {
                    return Err(Error::Config(format!("log2 table size must be in 1..=32, got {}", c.log2_table_size)));
                }
            }
        }
        Ok(())
    }
}

/// Retained half of the integer lattice `{k : |k| <= k_max}`: one of each
/// `±k` pair plus `k = 0`.
pub fn fourier_frequencies(k_max: usize) -> Vec<[i64; 2]> {
    let km = k_max as i64;
    let mut out = Vec::new();
    for kx in 0..=km {
        for ky in -km..=km {
            if kx * kx + ky * ky > km * km {
                continue;
            }
            if kx > 0 || ky >= 0 {
                out.push([kx, ky]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashLevel {
    pub resolution: usize,
    /// Offset of entry 0 of this level in the parameter vector.
    pub offset: usize,
    pub entries: usize,
    /// Vertices are indexed directly instead of hashed.
    pub direct: bool,
}

/// Offsets of every parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub hash_levels: Vec<HashLevel>,
    pub features_per_level: usize,
    pub dense: Vec<DenseSlot>,
    pub len: usize,
}

impl ParamLayout {
    pub fn for_arch(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut offset = 0;
        let mut hash_levels = Vec::new();
        let mut features_per_level = 0;
        if let Architecture::Hash(c) = arch {
            features_per_level = c.features_per_level;
            for resolution in c.resolutions() {
                let vertices = (resolution + 1) * (resolution + 1);
                let direct = vertices <= c.table_size();
                let entries = vertices.min(c.table_size());
                hash_levels.push(HashLevel { resolution, offset, entries, direct });
                offset += entries * c.features_per_level;
            }
        }
        let (depth, width) = arch.mlp_shape();
        let mut dense = Vec::with_capacity(depth);
        let mut fan_in = arch.input_dim();
        for layer in 0..depth {
            let fan_out = if layer + 1 == depth { 1 } else { width };
            let weight = offset;
            let bias = weight + fan_in * fan_out;
            offset = bias + fan_out;
            dense.push(DenseSlot { fan_in, fan_out, weight, bias });
            fan_in = fan_out;
        }
        Ok(ParamLayout { hash_levels, features_per_level, dense, len: offset })
    }

    pub fn output(&self) -> DenseSlot {
        *self.dense.last().expect("layout has at least two dense layers")
    }

    /// Range of the final-layer weights `a`.
    pub fn last_layer_weights(&self) -> std::ops::Range<usize> {
        let s = self.output();
        s.weight..s.weight + s.fan_in
    }

    /// Index of the output bias.
    pub fn output_bias(&self) -> usize {
        self.output().bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InrModel<T> {
    pub arch: Architecture,
    pub params: Vec<T>,
    layout: ParamLayout,
}

/// Seeded initialization.
///
/// relu_fourier and the hash MLP use Kaiming-uniform weights with negative
/// slope `sqrt(5)`, i.e. `U(±1/sqrt(fan_in))`, and zero biases;
/// hash tables are `U(-1e-4, 1e-4)`. SIREN uses `U(±1/fan_in)` in the first
/// layer, `U(±sqrt(6/fan_in)/omega0)` afterwards, `U(±1/sqrt(fan_in))` sine
/// biases and a zero output bias.
pub fn init_inr<T: Real>(arch: &Architecture, seed: u64) -> Result<InrModel<T>> {
    let layout = ParamLayout::for_arch(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![T::zero(); layout.len];
    let mut uniform = |dst: &mut [T], bound: f64| {
        for v in dst {
            *v = T::of(rng.random_range(-bound..=bound));
        }
    };
    for level in &layout.hash_levels {
        let n = level.entries * layout.features_per_level;
        uniform(&mut params[level.offset..level.offset + n], 1e-4);
    }
    let last = layout.dense.len() - 1;
    for (i, s) in layout.dense.iter().enumerate() {
        let fan_in = s.fan_in as f64;
        let w = &mut params[s.weight..s.weight + s.fan_in * s.fan_out];
        match arch {
            Architecture::Siren(c) => {
                let bound = if i == 0 { 1.0 / fan_in } else { (6.0 / fan_in).sqrt() / c.omega0 };
                uniform(w, bound);
                if i != last {
                    uniform(&mut params[s.bias..s.bias + s.fan_out], 1.0 / fan_in.sqrt());
                }
            }
            _ => uniform(w, 1.0 / fan_in.sqrt()),
        }
    }
    Ok(InrModel { arch: arch.clone(), params, layout })
}

/// The `n x W` INR feature matrix, row-major (one row per grid point).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub n: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn column(&self, i: usize) -> Vec<T> {
        (0..self.n).map(|p| self.data[p * self.width + i]).collect()
    }
}

#[derive(Debug, Clone)]
enum Input<T> {
    /// Fourier frequencies in radians per unit length, and the cached embedding.
    Fourier {
        freqs: Vec<[f64; 2]>,
        cached: Option<Vec<T>>,
    },
    Raw(Vec<T>),
    /// Four `(parameter offset, weight)` corners per point and level.
    Hash(Vec<(usize, T)>),
}

/// Coordinates with their parameter-independent encoding precomputed.
#[derive(Debug, Clone)]
pub struct PreparedGrid<T> {
    arch: Architecture,
    grid: Option<GridSpec>,
    coords: Vec<[f64; 2]>,
    input: Input<T>,
}

impl<T: Real> PreparedGrid<T> {
    pub fn new(arch: &Architecture, coords: Vec<[f64; 2]>) -> Result<Self> {
        let layout = ParamLayout::for_arch(arch)?;
        if let Some(c) = coords.iter().find(|c| !(c[0].is_finite() && c[1].is_finite())) {
            return Err(Error::dim(format!("non-finite coordinate {c:?}")));
        }
        let input = match arch {
            Architecture::ReluFourier(c) => {
                let freqs: Vec<[f64; 2]> = fourier_frequencies(c.k_max)
                    .into_iter()
                    .map(|k| [2.0 * std::f64::consts::PI * k[0] as f64, 2.0 * std::f64::consts::PI * k[1] as f64])
                    .collect();
                let dim = 2 * freqs.len();
                let cached = (coords.len() * dim <= EMBEDDING_CACHE_LIMIT).then(|| {
                    let mut e = vec![T::zero(); coords.len() * dim];
                    fourier_embed(&freqs, &coords, &mut e);
                    e
                });
                Input::Fourier { freqs, cached }
            }
            Architecture::Siren(_) => Input::Raw(coords.iter().flat_map(|c| [T::of(c[0]), T::of(c[1])]).collect()),
            Architecture::Hash(c) => Input::Hash(hash_corners(c, &layout, &coords)),
        };
        Ok(PreparedGrid { arch: arch.clone(), grid: None, coords, input })
    }

    /// All pixel centers of `grid`, in image order.
    pub fn for_grid(arch: &Architecture, grid: &GridSpec) -> Result<Self> {
        let mut g = Self::new(arch, make_grid_coords(grid))?;
        g.grid = Some(*grid);
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn grid(&self) -> Option<GridSpec> {
        self.grid
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }
}

fn fourier_embed<T: Real>(freqs: &[[f64; 2]], coords: &[[f64; 2]], out: &mut [T]) {
    let dim = 2 * freqs.len();
    for (c, row) in coords.iter().zip(out.chunks_mut(dim)) {
        for (k, pair) in freqs.iter().zip(row.chunks_mut(2)) {
            let (s, co) = (k[0] * c[0] + k[1] * c[1]).sin_cos();
            pair[0] = T::of(co);
            pair[1] = T::of(s);
        }
    }
}

/// Table entry of vertex `(ix, iy)` at one level.
pub fn hash_vertex(level: &HashLevel, ix: usize, iy: usize) -> usize {
    if level.direct {
        iy * (level.resolution + 1) + ix
    } else {
        let h = (ix as u32).wrapping_mul(HASH_PRIMES[0]) ^ (iy as u32).wrapping_mul(HASH_PRIMES[1]);
        h as usize & (level.entries - 1)
    }
}

fn hash_corners<T: Real>(c: &HashConfig, layout: &ParamLayout, coords: &[[f64; 2]]) -> Vec<(usize, T)> {
    let f = c.features_per_level;
    let mut out = Vec::with_capacity(coords.len() * layout.hash_levels.len() * 4);
    for p in coords {
        for level in &layout.hash_levels {
            let res = level.resolution;
            let cell = |x: f64| {
                let pos = x * res as f64;
                let i = (pos.floor().max(0.0) as usize).min(res - 1);
                (i, pos - i as f64)
            };
            let (ix, fx) = cell(p[0]);
            let (iy, fy) = cell(p[1]);
            for (dx, dy, w) in
                [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)]
            {
                let entry = hash_vertex(level, ix + dx, iy + dy);
                out.push((level.offset + entry * f, T::of(w)));
            }
        }
    }
    out
}

/// Saved activations of one chunk.
struct ChunkTape<T> {
    /// Encoding of the chunk when it is not served from the grid cache.
    input: Option<Vec<T>>,
    pre: Vec<Vec<T>>,
    post: Vec<Vec<T>>,
    output: Vec<T>,
}

/// Forward activations for a whole grid, reusable by [`InrModel::backprop_with`].
pub struct Tape<T> {
    chunks: Vec<ChunkTape<T>>,
}

impl<T: Real> Tape<T> {
    /// `z > 0` for every hidden pre-activation, i.e. the ReLU activation pattern.
    pub fn positive_pre_activations(&self) -> Vec<bool> {
        self.chunks.iter().flat_map(|c| c.pre.iter().flatten().map(|&z| z > T::zero())).collect()
    }
}

impl<T: Real> InrModel<T> {
    pub fn from_params(arch: &Architecture, params: Vec<T>) -> Result<Self> {
        let layout = ParamLayout::for_arch(arch)?;
        if params.len() != layout.len {
            return Err(Error::dim(format!("{} parameters given, layout needs {}", params.len(), layout.len)));
        }
        if !all_finite(&params) {
            return Err(Error::Numerical("non-finite model parameters".into()));
        }
        Ok(InrModel { arch: arch.clone(), params, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Final-layer weights `a`.
    pub fn last_layer(&self) -> &[T] {
        &self.params[self.layout.last_layer_weights()]
    }

    pub fn last_layer_mut(&mut self) -> &mut [T] {
        let r = self.layout.last_layer_weights();
        &mut self.params[r]
    }

    pub fn output_bias(&self) -> T {
        self.params[self.layout.output_bias()]
    }

    pub fn set_output_bias(&mut self, b: T) {
        let i = self.layout.output_bias();
        self.params[i] = b;
    }

    fn check_grid(&self, grid: &PreparedGrid<T>) -> Result<()> {
        if grid.arch != self.arch {
            return Err(Error::dim("grid was prepared for a different architecture"));
        }
        Ok(())
    }

    /// `𝓔{f_θ}` over prepared coordinates.
    pub fn evaluate(&self, grid: &PreparedGrid<T>) -> Result<Vec<T>> {
        self.check_grid(grid)?;
        let mut out = Vec::with_capacity(grid.len());
        for start in (0..grid.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(grid.len());
            out.extend(self.forward_chunk(grid, start, end, false).output);
        }
        Ok(out)
    }

    /// Evaluation as an image; the grid must have been prepared with [`PreparedGrid::for_grid`].
    pub fn evaluate_image(&self, grid: &PreparedGrid<T>) -> Result<Image<T>> {
        let spec = grid.grid.ok_or_else(|| Error::dim("prepared coordinates are not a pixel grid"))?;
        Ok(Image { grid: spec, data: self.evaluate(grid)? })
    }

    /// Single-point evaluation.
    pub fn evaluate_point(&self, r: [f64; 2]) -> Result<T> {
        let grid = PreparedGrid::new(&self.arch, vec![r])?;
        Ok(self.evaluate(&grid)?[0])
    }

    /// Evaluates and keeps the activations when they fit in memory.
    pub fn evaluate_with_tape(&self, grid: &PreparedGrid<T>) -> Result<(Vec<T>, Option<Tape<T>>)> {
        self.check_grid(grid)?;
        let (depth, width) = self.arch.mlp_shape();
        let keep = grid.len() * width * 2 * (depth - 1) <= TAPE_LIMIT;
        if !keep {
            return Ok((self.evaluate(grid)?, None));
        }
        let mut out = Vec::with_capacity(grid.len());
        let mut chunks = Vec::new();
        for start in (0..grid.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(grid.len());
            let tape = self.forward_chunk(grid, start, end, true);
            out.extend_from_slice(&tape.output);
            chunks.push(tape);
        }
        Ok((out, Some(Tape { chunks })))
    }

    /// `∂⟨upstream, 𝓔{f_θ}⟩ / ∂θ`.
    pub fn backprop(&self, grid: &PreparedGrid<T>, upstream: &[T]) -> Result<Vec<T>> {
        self.backprop_with(grid, None, upstream)
    }

    /// As [`backprop`](Self::backprop), reusing a tape from [`evaluate_with_tape`](Self::evaluate_with_tape)
    /// taken at the current parameters.
    pub fn backprop_with(&self, grid: &PreparedGrid<T>, tape: Option<&Tape<T>>, upstream: &[T]) -> Result<Vec<T>> {
        self.check_grid(grid)?;
        if upstream.len() != grid.len() {
            return Err(Error::dim(format!(
                "upstream gradient has {} entries for {} points",
                upstream.len(),
                grid.len()
            )));
        }
        let mut grad = vec![T::zero(); self.params.len()];
        for (ci, start) in (0..grid.len()).step_by(CHUNK).enumerate() {
            let end = (start + CHUNK).min(grid.len());
            match tape {
                Some(t) => self.backward_chunk(grid, start, end, &t.chunks[ci], &upstream[start..end], &mut grad),
                None => {
                    let t = self.forward_chunk(grid, start, end, true);
                    self.backward_chunk(grid, start, end, &t, &upstream[start..end], &mut grad)
                }
            }
        }
        Ok(grad)
    }

    /// Last-hidden-layer features over the grid.
    pub fn feature_matrix(&self, grid: &PreparedGrid<T>) -> Result<FeatureMatrix<T>> {
        self.check_grid(grid)?;
        let width = self.arch.feature_width();
        let mut data = Vec::with_capacity(grid.len() * width);
        for start in (0..grid.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(grid.len());
            let mut t = self.forward_chunk(grid, start, end, true);
            data.extend(t.post.pop().expect("at least one hidden layer"));
        }
        Ok(FeatureMatrix { n: grid.len(), width, data })
    }

    /// `Q a + b` for the model's own output layer and a given feature matrix.
    pub fn apply_output_layer(&self, q: &FeatureMatrix<T>) -> Vec<T> {
        let mut out = vec![T::zero(); q.n];
        self.dense(self.layout.output(), &q.data, q.n, &mut out);
        out
    }

    /// `out = input · Wᵀ + b` for `n` row-major input rows.
    fn dense(&self, slot: DenseSlot, input: &[T], n: usize, out: &mut [T]) {
        let bias = &self.params[slot.bias..slot.bias + slot.fan_out];
        for row in out.chunks_mut(slot.fan_out) {
            row.copy_from_slice(bias);
        }
        let w = &self.params[slot.weight..slot.weight + slot.fan_in * slot.fan_out];
        T::gemm(
            n,
            slot.fan_in,
            slot.fan_out,
            T::one(),
            input,
            slot.fan_in as isize,
            1,
            w,
            1,
            slot.fan_in as isize,
            T::one(),
            out,
            slot.fan_out as isize,
            1,
        );
    }

    fn encode_chunk(&self, grid: &PreparedGrid<T>, start: usize, end: usize) -> Option<Vec<T>> {
        let n = end - start;
        match &grid.input {
            Input::Fourier { cached: Some(_), .. } | Input::Raw(_) => None,
            Input::Fourier { freqs, cached: None } => {
                let mut e = vec![T::zero(); n * 2 * freqs.len()];
                fourier_embed(freqs, &grid.coords[start..end], &mut e);
                Some(e)
            }
            Input::Hash(corners) => {
                let levels = self.layout.hash_levels.len();
                let f = self.layout.features_per_level;
                let mut e = vec![T::zero(); n * levels * f];
                let corners = &corners[start * levels * 4..end * levels * 4];
                for (slot, cs) in e.chunks_mut(f).zip(corners.chunks(4)) {
                    for &(offset, w) in cs {
                        for (s, &t) in slot.iter_mut().zip(&self.params[offset..offset + f]) {
                            *s += w * t;
                        }
                    }
                }
                Some(e)
            }
        }
    }

    fn chunk_input<'a>(
        grid: &'a PreparedGrid<T>,
        tape_input: &'a Option<Vec<T>>,
        start: usize,
        end: usize,
        dim: usize,
    ) -> &'a [T] {
        match (&grid.input, tape_input) {
            (_, Some(e)) => e,
            (Input::Fourier { cached: Some(c), .. }, None) => &c[start * dim..end * dim],
            (Input::Raw(r), None) => &r[start * dim..end * dim],
            _ => unreachable!("encoding missing for chunk"),
        }
    }

    fn forward_chunk(&self, grid: &PreparedGrid<T>, start: usize, end: usize, keep: bool) -> ChunkTape<T> {
        let n = end - start;
        let input = self.encode_chunk(grid, start, end);
        let dense = &self.layout.dense;
        let omega = match &self.arch {
            Architecture::Siren(c) => Some(T::of(c.omega0)),
            _ => None,
        };
        let mut pre = Vec::new();
        let mut post: Vec<Vec<T>> = Vec::new();
        let mut current: Option<Vec<T>> = None;
        for slot in &dense[..dense.len() - 1] {
            let x: &[T] = match &current {
                Some(h) => h,
                None => Self::chunk_input(grid, &input, start, end, slot.fan_in),
            };
            let mut z = vec![T::zero(); n * slot.fan_out];
            self.dense(*slot, x, n, &mut z);
            let h: Vec<T> = match omega {
                Some(w) => z.iter().map(|&v| (w * v).sin()).collect(),
                None => z.iter().map(|&v| v.max(T::zero())).collect(),
            };
            if keep {
                pre.push(z);
                if let Some(prev) = current.take() {
                    post.push(prev);
                }
            }
            current = Some(h);
        }
        let last = current.expect("at least one hidden layer");
        let mut output = vec![T::zero(); n];
        self.dense(self.layout.output(), &last, n, &mut output);
        if keep {
            post.push(last);
        }
        ChunkTape { input, pre, post, output }
    }

    fn backward_chunk(
        &self,
        grid: &PreparedGrid<T>,
        start: usize,
        end: usize,
        tape: &ChunkTape<T>,
        upstream: &[T],
        grad: &mut [T],
    ) {
        let n = end - start;
        let dense = &self.layout.dense;
        let hidden = dense.len() - 1;
        let out = self.layout.output();
        let h_last = &tape.post[hidden - 1];
        // output layer: da = h_lastᵀ δ, db = Σ δ
        T::gemm(
            1,
            n,
            out.fan_in,
            T::one(),
            upstream,
            n as isize,
            1,
            h_last,
            out.fan_in as isize,
            1,
            T::one(),
            &mut grad[out.weight..out.weight + out.fan_in],
            out.fan_in as isize,
            1,
        );
        grad[out.bias] += upstream.iter().fold(T::zero(), |a, &v| a + v);
        let a = &self.params[out.weight..out.weight + out.fan_in];
        let mut delta: Vec<T> = upstream.iter().flat_map(|&u| a.iter().map(move |&w| u * w)).collect();
        let omega = match &self.arch {
            Architecture::Siren(c) => Some(T::of(c.omega0)),
            _ => None,
        };
        for l in (0..hidden).rev() {
            let slot = dense[l];
            let z = &tape.pre[l];
            match omega {
                Some(w) => delta.iter_mut().zip(z).for_each(|(d, &zv)| *d *= w * (w * zv).cos()),
                None => delta.iter_mut().zip(z).for_each(|(d, &zv)| {
                    if !(zv > T::zero()) {
                        *d = T::zero()
                    }
                }),
            }
            let x: &[T] =
                if l == 0 { Self::chunk_input(grid, &tape.input, start, end, slot.fan_in) } else { &tape.post[l - 1] };
            // dW += δᵀ x
            T::gemm(
                slot.fan_out,
                n,
                slot.fan_in,
                T::one(),
                &delta,
                1,
                slot.fan_out as isize,
                x,
                slot.fan_in as isize,
                1,
                T::one(),
                &mut grad[slot.weight..slot.weight + slot.fan_in * slot.fan_out],
                slot.fan_in as isize,
                1,
            );
            let db = &mut grad[slot.bias..slot.bias + slot.fan_out];
            for row in delta.chunks(slot.fan_out) {
                for (g, &d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            let need_input_grad = l > 0 || matches!(grid.input, Input::Hash(_));
            if !need_input_grad {
                break;
            }
            let w = &self.params[slot.weight..slot.weight + slot.fan_in * slot.fan_out];
            let mut next = vec![T::zero(); n * slot.fan_in];
            T::gemm(
                n,
                slot.fan_out,
                slot.fan_in,
                T::one(),
                &delta,
                slot.fan_out as isize,
                1,
                w,
                slot.fan_in as isize,
                1,
                T::zero(),
                &mut next,
                slot.fan_in as isize,
                1,
            );
            delta = next;
        }
        if let Input::Hash(corners) = &grid.input {
            let levels = self.layout.hash_levels.len();
            let f = self.layout.features_per_level;
            let corners = &corners[start * levels * 4..end * levels * 4];
            for (d, cs) in delta.chunks(f).zip(corners.chunks(4)) {
                for &(offset, w) in cs {
                    for (g, &dv) in grad[offset..offset + f].iter_mut().zip(d) {
                        *g += w * dv;
                    }
                }
            }
        }
    }
}

/// `𝓔{f_θ}` over a pixel grid.
pub fn evaluate_grid<T: Real>(model: &InrModel<T>, grid: &PreparedGrid<T>) -> Result<Vec<T>> {
    model.evaluate(grid)
}

pub fn backprop_grid<T: Real>(model: &InrModel<T>, grid: &PreparedGrid<T>, upstream: &[T]) -> Result<Vec<T>> {
    model.backprop(grid, upstream)
}

pub fn feature_matrix<T: Real>(model: &InrModel<T>, grid: &PreparedGrid<T>) -> Result<FeatureMatrix<T>> {
    model.feature_matrix(grid)
}
