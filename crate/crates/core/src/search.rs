//! Training-free per-head mask search over a deterministic toy attention
//! stack, plus per-head recall statistics.
//!
//! The toy model is a residual stream of token vectors; each layer applies
//! multi-head masked attention (with an output projection) and adds the
//! result back. Every head carries a planted locality component: a
//! cosine/sine positional embedding of the token's grid coordinate is added
//! to both Q and K. Paired cos/sin features make the planted part of the
//! logit an exact sum of cosines of the coordinate difference, so a key at
//! the query's own position always scores the planted maximum and the score
//! decays over roughly `window/2` tokens per axis. `sharpness` is that
//! maximum in nats (after the `1/sqrt(d)` attention scaling); the larger it
//! is, the more of the softmax mass stays inside the planted window.
//! Content projections are deliberately scaled down so they diversify heads
//! without drowning the plant. All parameters derive from the CBG-1 counter
//! generator, so the forward pass is bit-reproducible given the config.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attn::{attention_recall, dense_attention_oracle_spec, HeadTensor};
use crate::error::{Error, Result};
use crate::grid::{Dims3, GridConfig, TokenOrder, VideoGrid};
use crate::masks::{sparsity, MaskSpec, SeqMask};
use crate::prng;

// CBG-1 stream ids. Parameter streams are keyed by (layer, head, role);
// input streams by prompt index under the caller's seed.
const PARAM_STREAM_BASE: u64 = 0x1000;
const INPUT_STREAM_BASE: u64 = 0x9000_0000;
const ROLE_WQ: u64 = 0;
const ROLE_WK: u64 = 1;
const ROLE_WV: u64 = 2;
const ROLE_WO: u64 = 3;

/// Scale on the content part of Q and K relative to the planted part.
const CONTENT_SCALE: f64 = 0.25;

fn param_stream(layer: usize, head: usize, role: u64) -> u64 {
    PARAM_STREAM_BASE + ((layer as u64) * 256 + head as u64) * 8 + role
}

/// Locality planted into one head: attention mass concentrates within
/// `window` tokens, with `sharpness` nats separating near from far keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub window: Dims3,
    pub sharpness: f64,
}

/// Serializable description of a toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub grid: GridConfig,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub seed: u64,
    /// One entry per (layer, head), layer-major.
    pub planted: Vec<PlantedHead>,
}

impl ToyModelConfig {
    /// The default desk-scale model: 512 tokens, 2 layers x 4 heads, heads
    /// alternating between a local plant (window (2,2,2)) and a global
    /// plant (window (6,6,6)).
    ///
    /// The head dimension is 24: the planted embedding needs four exact
    /// cos/sin frequency pairs per axis to cover an extent-8 grid without
    /// aliased score peaks, and 3 axes x 4 pairs x 2 = 24.
    pub fn two_regime_default(seed: u64) -> Self {
        let layers = 2;
        let heads = 4;
        let planted = (0..layers * heads)
            .map(|i| {
                if i % 2 == 0 {
                    PlantedHead {
                        window: Dims3::new(2, 2, 2).expect("static dims"),
                        sharpness: 40.0,
                    }
                } else {
                    PlantedHead {
                        window: Dims3::new(6, 6, 6).expect("static dims"),
                        sharpness: 16.0,
                    }
                }
            })
            .collect();
        ToyModelConfig {
            grid: GridConfig {
                dims: Dims3::new(8, 8, 8).expect("static dims"),
                tile: Dims3::new(2, 2, 2).expect("static dims"),
            },
            layers,
            heads,
            head_dim: 24,
            seed,
            planted,
        }
    }

    /// True for heads planted with the local regime of
    /// [`ToyModelConfig::two_regime_default`].
    pub fn is_local_head(&self, layer: usize, head: usize) -> bool {
        self.planted[layer * self.heads + head].window.product()
            <= self.grid.tile.product()
    }
}

/// A built toy model: seeded projections plus per-head planted locality.
pub struct ToyModel {
    grid: VideoGrid,
    layers: usize,
    heads: usize,
    head_dim: usize,
    width: usize,
    cfg: ToyModelConfig,
    /// Per (layer, head): width x head_dim.
    wq: Vec<HeadTensor<f64>>,
    wk: Vec<HeadTensor<f64>>,
    wv: Vec<HeadTensor<f64>>,
    /// Per layer: width x width.
    wo: Vec<HeadTensor<f64>>,
    /// Per (layer, head): N x head_dim, added to both Q and K.
    planted_qk: Vec<HeadTensor<f64>>,
}

impl ToyModel {
    pub fn build(cfg: &ToyModelConfig) -> Result<Self> {
        let grid = VideoGrid::new(cfg.grid.dims, cfg.grid.tile)?;
        if cfg.planted.len() != cfg.layers * cfg.heads {
            return Err(Error::InvalidSpec(format!(
                "planted list must have layers*heads = {} entries, got {}",
                cfg.layers * cfg.heads,
                cfg.planted.len()
            )));
        }
        if cfg.layers == 0 || cfg.heads == 0 || cfg.head_dim == 0 {
            // A zero-layer model is still useful (identity); heads and
            // head_dim must be positive whenever layers > 0.
            if cfg.layers > 0 {
                return Err(Error::InvalidSpec(
                    "heads and head_dim must be positive".to_string(),
                ));
            }
        }
        let width = cfg.heads * cfg.head_dim;
        let n = grid.num_tokens();
        let coords = grid.coord_table(TokenOrder::Zigzag);

        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        let mut wo = Vec::new();
        let mut planted_qk = Vec::new();

        let proj = |layer: usize, head: usize, role: u64, rows: usize, cols: usize| {
            let vals = prng::standard_normals(cfg.seed, param_stream(layer, head, role), rows * cols);
            let scale = 1.0 / (rows as f64).sqrt();
            HeadTensor::from_fn(rows, cols, |r, c| vals[r * cols + c] * scale)
        };

        for layer in 0..cfg.layers {
            for head in 0..cfg.heads {
                let scaled = |m: HeadTensor<f64>| {
                    HeadTensor::from_fn(m.rows(), m.cols(), |r, c| CONTENT_SCALE * m.get(r, c))
                };
                wq.push(scaled(proj(layer, head, ROLE_WQ, width, cfg.head_dim)));
                wk.push(scaled(proj(layer, head, ROLE_WK, width, cfg.head_dim)));
                wv.push(proj(layer, head, ROLE_WV, width, cfg.head_dim));

                let plant = &cfg.planted[layer * cfg.heads + head];
                let d = cfg.head_dim;
                if !d.is_multiple_of(2) {
                    return Err(Error::InvalidSpec(
                        "head_dim must be even for paired cos/sin planting".to_string(),
                    ));
                }
                // Feature pair p embeds one axis at one dyadic frequency:
                // axis = p mod 3, octave j = p div 3, frequency
                // pi / (window_axis/2 * 2^j). cos/sin pairing makes the
                // planted logit an exact sum of cos(f * delta) terms, so a
                // key at the query's coordinate always attains the maximum.
                // amp normalizes that maximum to `sharpness` after the
                // 1/sqrt(d) attention scaling.
                let pairs = d / 2;
                let freqs: Vec<(usize, f64)> = (0..pairs)
                    .map(|p| {
                        let axis = p % 3;
                        let octave = (p / 3) as i32;
                        let radius = (plant.window.as_array()[axis] as f64 / 2.0).max(0.5);
                        (axis, std::f64::consts::PI / (radius * 2f64.powi(octave)))
                    })
                    .collect();
                let amp = (plant.sharpness * (d as f64).sqrt() / pairs as f64).sqrt();
                planted_qk.push(HeadTensor::from_fn(n, d, |row, col| {
                    let c = coords[row].as_array();
                    let (axis, f) = freqs[col / 2];
                    let arg = f * c[axis] as f64;
                    if col % 2 == 0 {
                        amp * arg.cos()
                    } else {
                        amp * arg.sin()
                    }
                }));
            }
            wo.push(proj(layer, 0, ROLE_WO, width, width));
        }

        Ok(ToyModel {
            grid,
            layers: cfg.layers,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            width,
            cfg: cfg.clone(),
            wq,
            wk,
            wv,
            wo,
            planted_qk,
        })
    }

    pub fn grid(&self) -> &VideoGrid {
        &self.grid
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    /// Deterministic standard-normal input matrix for a given seed and
    /// prompt/step index.
    pub fn input_matrix(&self, seed: u64, index: u64) -> HeadTensor<f64> {
        let n = self.grid.num_tokens();
        let vals = prng::standard_normals(seed, INPUT_STREAM_BASE + index, n * self.width);
        HeadTensor::from_fn(n, self.width, |r, c| vals[r * self.width + c])
    }

    fn head_index(&self, layer: usize, head: usize) -> usize {
        layer * self.heads + head
    }

    /// Forward pass under a per-head mask assignment. When `capture` is
    /// given, the per-head Q and K matrices of every layer are recorded.
    fn forward_inner(
        &self,
        x: &HeadTensor<f64>,
        assignment: &MaskAssignment,
        mut capture: Option<&mut CapturedQk>,
    ) -> Result<HeadTensor<f64>> {
        if x.rows() != self.grid.num_tokens() || x.cols() != self.width {
            return Err(Error::ShapeMismatch {
                what: "toy model input",
                expected_rows: self.grid.num_tokens(),
                expected_cols: self.width,
                rows: x.rows(),
                cols: x.cols(),
            });
        }
        let n = x.rows();
        let mut stream = x.clone();
        for layer in 0..self.layers {
            let mut layer_capture = Vec::new();
            let mut concat = HeadTensor::<f64>::zeros(n, self.width);
            for head in 0..self.heads {
                let spec = assignment.get(layer, head)?;
                let idx = self.head_index(layer, head);
                let planted = &self.planted_qk[idx];
                let mut q = matmul(&stream, &self.wq[idx]);
                let mut k = matmul(&stream, &self.wk[idx]);
                add_assign(&mut q, planted);
                add_assign(&mut k, planted);
                let v = matmul(&stream, &self.wv[idx]);
                let mask = SeqMask::new(spec, &self.grid, TokenOrder::Zigzag)?;
                let o = dense_attention_oracle_spec(&q, &k, &v, &mask)?;
                for r in 0..n {
                    concat.row_mut(r)[head * self.head_dim..(head + 1) * self.head_dim]
                        .copy_from_slice(o.row(r));
                }
                if capture.is_some() {
                    layer_capture.push((q, k));
                }
            }
            let y = matmul(&concat, &self.wo[layer]);
            add_assign(&mut stream, &y);
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(layer_capture);
            }
        }
        Ok(stream)
    }

    /// Forward pass; the all-full assignment defines the reference output.
    pub fn forward(&self, x: &HeadTensor<f64>, assignment: &MaskAssignment) -> Result<HeadTensor<f64>> {
        self.forward_inner(x, assignment, None)
    }

    /// Forward pass that also returns per-(layer, head) Q and K.
    pub fn forward_captured(
        &self,
        x: &HeadTensor<f64>,
        assignment: &MaskAssignment,
    ) -> Result<(HeadTensor<f64>, CapturedQk)> {
        let mut cap = Vec::new();
        let out = self.forward_inner(x, assignment, Some(&mut cap))?;
        Ok((out, cap))
    }
}

/// Q and K matrices captured per layer, then per head.
pub type CapturedQk = Vec<Vec<(HeadTensor<f64>, HeadTensor<f64>)>>;

fn matmul(a: &HeadTensor<f64>, b: &HeadTensor<f64>) -> HeadTensor<f64> {
    assert_eq!(a.cols(), b.rows(), "matmul inner dimension");
    let (n, inner, m) = (a.rows(), a.cols(), b.cols());
    let mut out = HeadTensor::<f64>::zeros(n, m);
    for r in 0..n {
        let ar = a.row(r);
        let or = out.row_mut(r);
        for (i, &av) in ar.iter().enumerate().take(inner) {
            let br = b.row(i);
            for c in 0..m {
                or[c] += av * br[c];
            }
        }
    }
    out
}

fn add_assign(a: &mut HeadTensor<f64>, b: &HeadTensor<f64>) {
    debug_assert_eq!(a.rows(), b.rows());
    debug_assert_eq!(a.cols(), b.cols());
    for r in 0..a.rows() {
        let br = b.row(r);
        for (av, bv) in a.row_mut(r).iter_mut().zip(br) {
            *av += bv;
        }
    }
}

/// Mean squared difference over all entries.
pub fn mse(a: &HeadTensor<f64>, b: &HeadTensor<f64>) -> Result<f64> {
    a.check_same_shape(b, "mse operands")?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum();
    Ok(total / a.data().len() as f64)
}

fn mean_square(a: &HeadTensor<f64>) -> f64 {
    a.data().iter().map(|x| x * x).sum::<f64>() / a.data().len() as f64
}

/// A per-head mask assignment covering a `layers x heads` stack.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskAssignment {
    layers: usize,
    heads: usize,
    specs: Vec<Option<MaskSpec>>,
}

impl MaskAssignment {
    /// Every head assigned the full mask.
    pub fn full(layers: usize, heads: usize) -> Self {
        MaskAssignment {
            layers,
            heads,
            specs: vec![Some(MaskSpec::Full); layers * heads],
        }
    }

    /// No head assigned; `get` errors until every slot is set.
    pub fn unassigned(layers: usize, heads: usize) -> Self {
        MaskAssignment {
            layers,
            heads,
            specs: vec![None; layers * heads],
        }
    }

    pub fn set(&mut self, layer: usize, head: usize, spec: MaskSpec) {
        self.specs[layer * self.heads + head] = Some(spec);
    }

    pub fn get(&self, layer: usize, head: usize) -> Result<&MaskSpec> {
        self.specs[layer * self.heads + head]
            .as_ref()
            .ok_or(Error::MissingAssignment { layer, head })
    }
}

/// Search controls. `delta` is compared with strict inequality; when
/// `relative` is set the MSE is divided by the reference output's mean
/// square. `cumulative` keeps accepted sparse masks in place while later
/// heads are searched (within a step) instead of restoring to full.
#[derive(Debug, Clone, Copy)]
pub struct SearchParams {
    pub delta: f64,
    pub steps: usize,
    pub inputs_per_step: usize,
    pub seed: u64,
    pub relative: bool,
    pub cumulative: bool,
}

impl Default for SearchParams {
    /// The documented desk-scale defaults: relative threshold 1e-3, three
    /// steps, one input per step, isolated (restore-after-test) heads.
    fn default() -> Self {
        SearchParams {
            delta: 1e-3,
            steps: 3,
            inputs_per_step: 1,
            seed: 0,
            relative: true,
            cumulative: false,
        }
    }
}

/// Chosen mask per (step, layer, head).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchDict(pub BTreeMap<(usize, usize, usize), MaskSpec>);

impl SearchDict {
    pub fn get(&self, step: usize, layer: usize, head: usize) -> Option<&MaskSpec> {
        self.0.get(&(step, layer, head))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Serialize for SearchDict {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for ((t, l, h), spec) in &self.0 {
            map.serialize_entry(&format!("{t}/{l}/{h}"), spec)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for SearchDict {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw: BTreeMap<String, MaskSpec> = BTreeMap::deserialize(deserializer)?;
        let mut out = BTreeMap::new();
        for (key, spec) in raw {
            let parts: Vec<&str> = key.split('/').collect();
            if parts.len() != 3 {
                return Err(D::Error::custom(format!("bad dict key `{key}`")));
            }
            let mut idx = [0usize; 3];
            for (slot, p) in idx.iter_mut().zip(&parts) {
                *slot = p
                    .parse()
                    .map_err(|_| D::Error::custom(format!("bad dict key `{key}`")))?;
            }
            out.insert((idx[0], idx[1], idx[2]), spec);
        }
        Ok(SearchDict(out))
    }
}

/// Search result plus the exact number of model forward passes executed.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub dict: SearchDict,
    pub forward_passes: u64,
}

fn validate_patterns(model: &ToyModel, patterns: &[MaskSpec]) -> Result<Vec<f64>> {
    if patterns.is_empty() {
        return Err(Error::EmptyPatternList);
    }
    if *patterns.last().unwrap() != MaskSpec::Full {
        return Err(Error::LastPatternNotFull);
    }
    let mut sparsities = Vec::with_capacity(patterns.len());
    for p in patterns {
        p.validate(model.grid())?;
        sparsities.push(sparsity(p, model.grid())?);
    }
    for i in 1..sparsities.len() {
        if sparsities[i] > sparsities[i - 1] + 1e-12 {
            return Err(Error::PatternsNotSorted {
                index: i,
                sparsity: sparsities[i],
                prev: sparsities[i - 1],
            });
        }
    }
    Ok(sparsities)
}

/// Per-head mask search: for each step, each head tries candidate patterns
/// in order of descending sparsity and keeps the first whose output MSE
/// against the step's all-full reference stays strictly below `delta`.
/// When no pattern passes (including `delta = 0`, where even the full
/// mask's zero MSE fails the strict test), the final full pattern is
/// recorded, so the search always terminates with a complete dictionary.
///
/// The full-mask candidate is never executed as a trial: by the model's
/// determinism its output equals the reference bit for bit, so its MSE is
/// exactly zero.
pub fn mask_search(
    model: &ToyModel,
    patterns: &[MaskSpec],
    params: &SearchParams,
) -> Result<SearchOutcome> {
    validate_patterns(model, patterns)?;
    let mut dict = BTreeMap::new();
    let mut passes: u64 = 0;
    let full_assignment = MaskAssignment::full(model.layers(), model.heads());
    let num_inputs = params.inputs_per_step.max(1);

    for step in 0..params.steps {
        let inputs: Vec<HeadTensor<f64>> = (0..num_inputs)
            .map(|j| model.input_matrix(params.seed, (step * num_inputs + j) as u64))
            .collect();
        let refs: Vec<HeadTensor<f64>> = inputs
            .iter()
            .map(|x| model.forward(x, &full_assignment))
            .collect::<Result<_>>()?;
        passes += refs.len() as u64;
        let denom = if params.relative {
            let ms = refs.iter().map(mean_square).sum::<f64>() / refs.len() as f64;
            if ms > 0.0 {
                ms
            } else {
                1.0
            }
        } else {
            1.0
        };

        let head_list: Vec<(usize, usize)> = (0..model.layers())
            .flat_map(|l| (0..model.heads()).map(move |h| (l, h)))
            .collect();

        if params.cumulative {
            let mut assignment = full_assignment.clone();
            for (l, h) in head_list {
                let (choice, tried) = search_one_head(
                    model, patterns, params, &inputs, &refs, denom, &mut assignment, l, h,
                )?;
                passes += tried;
                dict.insert((step, l, h), patterns[choice].clone());
            }
        } else {
            // Restore-after-test isolates heads, so they can run in parallel;
            // the dictionary matches the sequential execution exactly.
            let results: Vec<Result<(usize, usize, usize, u64)>> = head_list
                .par_iter()
                .map(|&(l, h)| {
                    let mut assignment = full_assignment.clone();
                    let (choice, tried) = search_one_head(
                        model, patterns, params, &inputs, &refs, denom, &mut assignment, l, h,
                    )?;
                    Ok((l, h, choice, tried))
                })
                .collect();
            for r in results {
                let (l, h, choice, tried) = r?;
                passes += tried;
                dict.insert((step, l, h), patterns[choice].clone());
            }
        }
    }

    Ok(SearchOutcome {
        dict: SearchDict(dict),
        forward_passes: passes,
    })
}

/// Tries patterns for one head against the step reference; returns the
/// chosen pattern index and the number of forward passes spent. On success
/// in cumulative mode the accepted pattern is left in the assignment;
/// otherwise the head is restored to full.
#[allow(clippy::too_many_arguments)]
fn search_one_head(
    model: &ToyModel,
    patterns: &[MaskSpec],
    params: &SearchParams,
    inputs: &[HeadTensor<f64>],
    refs: &[HeadTensor<f64>],
    denom: f64,
    assignment: &mut MaskAssignment,
    layer: usize,
    head: usize,
) -> Result<(usize, u64)> {
    let mut passes = 0u64;
    let restore = assignment.get(layer, head)?.clone();
    for (idx, p) in patterns.iter().enumerate() {
        if *p == MaskSpec::Full {
            // MSE is exactly zero; passes iff the threshold admits it.
            if 0.0 < params.delta {
                assignment.set(layer, head, restore);
                return Ok((idx, passes));
            }
            continue;
        }
        assignment.set(layer, head, p.clone());
        let mut total = 0.0;
        for (x, reference) in inputs.iter().zip(refs) {
            let out = model.forward(x, assignment)?;
            passes += 1;
            total += mse(reference, &out)?;
        }
        let err = total / inputs.len() as f64 / denom;
        if err < params.delta {
            if params.cumulative {
                // Keep the accepted pattern in place.
            } else {
                assignment.set(layer, head, restore);
            }
            return Ok((idx, passes));
        }
    }
    // Nothing passed the strict test; record the final full pattern.
    assignment.set(layer, head, restore);
    Ok((patterns.len() - 1, passes))
}

/// Per-head recall aggregated over prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadRecall {
    pub layer: usize,
    pub head: usize,
    pub mean_recall: f64,
    pub std_recall: f64,
}

/// Runs full attention on each prompt and aggregates per-head recall at the
/// given window: mean and sample standard deviation across prompts.
pub fn recall_stats(
    model: &ToyModel,
    prompts: &[HeadTensor<f64>],
    window: Dims3,
) -> Result<Vec<HeadRecall>> {
    if prompts.len() < 2 {
        return Err(Error::TooFewPrompts { got: prompts.len() });
    }
    let full = MaskAssignment::full(model.layers(), model.heads());
    let mut per_head: Vec<Vec<f64>> = vec![Vec::new(); model.layers() * model.heads()];
    for x in prompts {
        let (_, captured) = model.forward_captured(x, &full)?;
        for (l, layer_qk) in captured.iter().enumerate() {
            for (h, (q, k)) in layer_qk.iter().enumerate() {
                let r = attention_recall(q, k, model.grid(), window)?;
                per_head[l * model.heads() + h].push(r);
            }
        }
    }
    let n = prompts.len() as f64;
    let mut out = Vec::new();
    for l in 0..model.layers() {
        for h in 0..model.heads() {
            let xs = &per_head[l * model.heads() + h];
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            out.push(HeadRecall {
                layer: l,
                head: h,
                mean_recall: mean,
                std_recall: var.sqrt(),
            });
        }
    }
    Ok(out)
}
