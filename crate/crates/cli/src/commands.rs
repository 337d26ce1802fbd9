//! Implementations of the CLI subcommands.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sta_core::attn::{
    attention_recall, block_sparse_attention, dense_attention_oracle_spec, flops_estimate,
    AttnConfig, HeadTensor,
};
use sta_core::grid::{Dims3, TokenOrder, VideoGrid};
use sta_core::losses::{attn_distill_loss, data_loss, final_layer_loss, LossWeights};
use sta_core::masks::{
    classify_blocks, natten_block_counts_analytic, sta_block_counts_analytic, BlockCounts,
    BlockMap, MaskSpec, SeqMask,
};
use sta_core::prng::standard_normals;
use sta_core::search::{
    mask_search, recall_stats as core_recall_stats, SearchParams, ToyModel, ToyModelConfig,
};
use sta_core::tensorio::{read_tensor_file, write_tensor_file, TensorFile};

use crate::{CliError, CliResult, Format, GridArgs, LossKind};

// Streams of the CBG-1 generator used by gen-tensors.
const STREAM_Q: u64 = 0;
const STREAM_K: u64 = 1;
const STREAM_V: u64 = 2;

fn make_grid(args: &GridArgs) -> CliResult<VideoGrid> {
    Ok(VideoGrid::new(args.dims, args.tile)?)
}

/// A mask spec argument is either inline JSON or a file path.
fn load_mask_spec(arg: &str) -> CliResult<MaskSpec> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg)
            .map_err(|e| CliError::Io(format!("cannot read mask spec `{arg}`: {e}")))?
    };
    Ok(serde_json::from_str(&text)?)
}

fn read_stack(path: &Path) -> CliResult<(Vec<HeadTensor<f32>>, Vec<u64>)> {
    let t = read_tensor_file(path)
        .map_err(|e| match e {
            sta_core::Error::Io(io) => {
                CliError::Io(format!("cannot read `{}`: {io}", path.display()))
            }
            other => CliError::from(other),
        })?;
    let dims = t.dims.clone();
    let stack = t.as_head_stack()?;
    if stack.is_empty() {
        return Err(CliError::Validation(format!(
            "`{}` contains no heads",
            path.display()
        )));
    }
    Ok((stack, dims))
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

#[derive(Serialize)]
struct AnalyticReport {
    dense: u64,
    mixed: u64,
    delta_dense: i64,
    delta_mixed: i64,
}

#[derive(Serialize)]
struct MaskStatsReport {
    dense: u64,
    mixed: u64,
    empty: u64,
    sparsity: f64,
    attended_pairs: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    analytic: Option<AnalyticReport>,
}

fn analytic_counts(spec: &MaskSpec, grid: &VideoGrid, counts: &BlockCounts) -> CliResult<AnalyticReport> {
    let (dense, mixed) = match spec {
        MaskSpec::Sta { window } => (sta_block_counts_analytic(grid, *window)?, 0),
        MaskSpec::Natten { window } | MaskSpec::TiledNatten { window } => {
            let c = natten_block_counts_analytic(grid, *window);
            (c.dense, c.mixed)
        }
        other => {
            return Err(CliError::Validation(format!(
                "--analytic is not defined for the `{}` family",
                other.family()
            )))
        }
    };
    Ok(AnalyticReport {
        dense,
        mixed,
        delta_dense: counts.dense as i64 - dense as i64,
        delta_mixed: counts.mixed as i64 - mixed as i64,
    })
}

pub fn mask_stats(grid: &GridArgs, mask: &str, analytic: bool, format: Format) -> CliResult {
    let g = make_grid(grid)?;
    let spec = load_mask_spec(mask)?;
    let map = classify_blocks(&spec, &g)?;
    let counts = map.counts();
    let report = MaskStatsReport {
        dense: counts.dense,
        mixed: counts.mixed,
        empty: counts.empty,
        sparsity: map.sparsity(),
        attended_pairs: map.attended_pairs(),
        analytic: if analytic {
            Some(analytic_counts(&spec, &g, &counts)?)
        } else {
            None
        },
    };
    match format {
        Format::Json => print_json(&report),
        Format::Csv => {
            println!("dense,mixed,empty,sparsity,attended_pairs");
            println!(
                "{},{},{},{},{}",
                report.dense, report.mixed, report.empty, report.sparsity, report.attended_pairs
            );
            Ok(())
        }
    }
}

pub fn mask_render(grid: &GridArgs, mask: &str, out: &Path) -> CliResult {
    let g = make_grid(grid)?;
    let spec = load_mask_spec(mask)?;
    let map = classify_blocks(&spec, &g)?;
    let file = std::fs::File::create(out)
        .map_err(|e| CliError::Io(format!("cannot create `{}`: {e}", out.display())))?;
    let mut writer = std::io::BufWriter::new(file);
    map.write_pgm(&mut writer)?;
    use std::io::Write;
    writer.flush().map_err(CliError::from)?;
    print_json(&serde_json::json!({
        "out": out.display().to_string(),
        "blocks": map.num_blocks(),
    }))
}

/// Runs the executor on one head, handling the ordering permutation.
fn run_head(
    q: &HeadTensor<f32>,
    k: &HeadTensor<f32>,
    v: &HeadTensor<f32>,
    map: &BlockMap,
    perm: &[usize],
) -> CliResult<HeadTensor<f32>> {
    Ok(match map.ordering() {
        TokenOrder::Tiled => block_sparse_attention(
            &q.scatter_rows(perm),
            &k.scatter_rows(perm),
            &v.scatter_rows(perm),
            map,
        )?
        .gather_rows(perm),
        TokenOrder::Zigzag => block_sparse_attention(q, k, v, map)?,
    })
}

#[derive(Serialize)]
struct OracleCheck {
    max_abs_err: f64,
    tol: f64,
    ok: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn attn(
    q_path: &Path,
    k_path: &Path,
    v_path: &Path,
    mask: &str,
    grid: &GridArgs,
    out: &Path,
    check_oracle: bool,
    tol: f64,
) -> CliResult {
    let g = make_grid(grid)?;
    let spec = load_mask_spec(mask)?;
    let (q_heads, q_dims) = read_stack(q_path)?;
    let (k_heads, _) = read_stack(k_path)?;
    let (v_heads, _) = read_stack(v_path)?;
    if q_heads.len() != k_heads.len() || q_heads.len() != v_heads.len() {
        return Err(CliError::Validation(format!(
            "head counts differ: q={}, k={}, v={}",
            q_heads.len(),
            k_heads.len(),
            v_heads.len()
        )));
    }
    let n = g.num_tokens();
    for (name, stack) in [("q", &q_heads), ("k", &k_heads), ("v", &v_heads)] {
        for t in stack.iter() {
            if t.rows() != n {
                return Err(CliError::Validation(format!(
                    "{name}: {} rows per head, but the grid has {n} tokens",
                    t.rows()
                )));
            }
        }
    }
    let map = classify_blocks(&spec, &g)?;
    let perm = g.tile_permutation();

    let mut outputs = Vec::with_capacity(q_heads.len());
    for ((q, k), v) in q_heads.iter().zip(&k_heads).zip(&v_heads) {
        outputs.push(run_head(q, k, v, &map, &perm)?);
    }

    let tensor = if q_dims.len() == 2 {
        TensorFile::new(
            vec![outputs[0].rows() as u64, outputs[0].cols() as u64],
            outputs[0].data().to_vec(),
        )?
    } else {
        TensorFile::from_head_stack(&outputs)?
    };
    write_tensor_file(out, &tensor)?;

    if check_oracle {
        let mask = SeqMask::new(&spec, &g, TokenOrder::Zigzag)?;
        let mut max_abs_err: f64 = 0.0;
        for ((q, k), (v, o)) in q_heads.iter().zip(&k_heads).zip(v_heads.iter().zip(&outputs)) {
            let want = dense_attention_oracle_spec(q, k, v, &mask)?;
            max_abs_err = max_abs_err.max(o.max_abs_diff(&want)?);
        }
        let ok = max_abs_err <= tol;
        print_json(&OracleCheck {
            max_abs_err,
            tol,
            ok,
        })?;
        if !ok {
            return Err(CliError::Validation(format!(
                "oracle check failed: max_abs_err {max_abs_err:.3e} > tol {tol:.3e}"
            )));
        }
    } else {
        print_json(&serde_json::json!({ "out": out.display().to_string() }))?;
    }
    Ok(())
}

pub fn recall(q_path: &Path, k_path: &Path, dims: Dims3, window: Dims3) -> CliResult {
    // Unit tiles: recall is token-level and needs only the dims.
    let g = VideoGrid::new(dims, Dims3::new(1, 1, 1)?)?;
    let (q_heads, _) = read_stack(q_path)?;
    let (k_heads, _) = read_stack(k_path)?;
    if q_heads.len() != k_heads.len() {
        return Err(CliError::Validation(format!(
            "head counts differ: q={}, k={}",
            q_heads.len(),
            k_heads.len()
        )));
    }
    let per_head: Vec<f64> = q_heads
        .iter()
        .zip(&k_heads)
        .map(|(q, k)| attention_recall(q, k, &g, window))
        .collect::<Result<_, _>>()?;
    let mean = per_head.iter().sum::<f64>() / per_head.len() as f64;
    print_json(&serde_json::json!({ "recall": mean, "per_head": per_head }))
}

fn load_model(path: &Path) -> CliResult<ToyModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read `{}`: {e}", path.display())))?;
    let cfg: ToyModelConfig = serde_json::from_str(&text)?;
    Ok(ToyModel::build(&cfg)?)
}

pub fn recall_stats(
    model_path: &Path,
    window: Dims3,
    prompts: usize,
    seed: u64,
    format: Format,
) -> CliResult {
    let model = load_model(model_path)?;
    let inputs: Vec<HeadTensor<f64>> = (0..prompts)
        .map(|j| model.input_matrix(seed, j as u64))
        .collect();
    let stats = core_recall_stats(&model, &inputs, window)?;
    match format {
        Format::Csv => {
            println!("layer,head,mean_recall,std_recall");
            for s in &stats {
                println!("{},{},{},{}", s.layer, s.head, s.mean_recall, s.std_recall);
            }
            Ok(())
        }
        Format::Json => print_json(&stats),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn search(
    model_path: &Path,
    patterns_path: &Path,
    delta: f64,
    steps: usize,
    seed: u64,
    out: &Path,
    inputs_per_step: usize,
    cumulative: bool,
    absolute: bool,
) -> CliResult {
    let model = load_model(model_path)?;
    let text = std::fs::read_to_string(patterns_path)
        .map_err(|e| CliError::Io(format!("cannot read `{}`: {e}", patterns_path.display())))?;
    let patterns: Vec<MaskSpec> = serde_json::from_str(&text)?;
    let params = SearchParams {
        delta,
        steps,
        inputs_per_step,
        seed,
        relative: !absolute,
        cumulative,
    };
    let outcome = mask_search(&model, &patterns, &params)?;
    let mut json = serde_json::to_string_pretty(&outcome.dict)?;
    json.push('\n');
    std::fs::write(out, json)
        .map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", out.display())))?;
    print_json(&serde_json::json!({
        "out": out.display().to_string(),
        "entries": outcome.dict.len(),
        "forward_passes": outcome.forward_passes,
    }))
}

fn read_stack_f64(path: &Path) -> CliResult<Vec<HeadTensor<f64>>> {
    let (stack, _) = read_stack(path)?;
    Ok(stack.iter().map(|t| t.cast::<f64>()).collect())
}

fn read_matrix_f64(path: &Path, what: &str) -> CliResult<HeadTensor<f64>> {
    let stack = read_stack_f64(path)?;
    if stack.len() != 1 {
        return Err(CliError::Validation(format!(
            "{what}: expected a single matrix, got {} layers",
            stack.len()
        )));
    }
    Ok(stack.into_iter().next().unwrap())
}

fn parse_weights(text: &str) -> CliResult<LossWeights> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Validation(format!(
            "expected three comma-separated weights alpha,beta,gamma, got `{text}`"
        )));
    }
    let mut vals = [0.0f64; 3];
    for (slot, p) in vals.iter_mut().zip(&parts) {
        *slot = p
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("`{p}` is not a number in `{text}`")))?;
    }
    Ok(LossWeights::new(vals[0], vals[1], vals[2])?)
}

#[derive(Serialize)]
struct LossReport {
    value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    weighted: Option<f64>,
}

pub fn loss(
    kind: LossKind,
    student: &Path,
    teacher: Option<&Path>,
    f: Option<&Path>,
    x0: Option<&Path>,
    weights: Option<&str>,
) -> CliResult {
    let weights = weights.map(parse_weights).transpose()?;
    fn require<'a>(opt: Option<&'a Path>, flag: &str) -> CliResult<&'a Path> {
        opt.ok_or_else(|| CliError::Validation(format!("--{flag} is required for this kind")))
    }
    let value = match kind {
        LossKind::Attn => {
            let s = read_stack_f64(student)?;
            let t = read_stack_f64(require(teacher, "teacher")?)?;
            attn_distill_loss(&s, &t)?
        }
        LossKind::Final => {
            let s = read_matrix_f64(student, "student")?;
            let t = read_matrix_f64(require(teacher, "teacher")?, "teacher")?;
            final_layer_loss(&s, &t)?
        }
        LossKind::Data => {
            let model_out = read_matrix_f64(student, "student (model output)")?;
            let f = read_matrix_f64(require(f, "f")?, "f")?;
            let x0 = read_matrix_f64(require(x0, "x0")?, "x0")?;
            data_loss(&model_out, &f, &x0)?
        }
    };
    let weighted = weights.map(|w| {
        value
            * match kind {
                LossKind::Data => w.alpha,
                LossKind::Final => w.beta,
                LossKind::Attn => w.gamma,
            }
    });
    print_json(&LossReport { value, weighted })
}

#[derive(Serialize)]
struct BenchBlocks {
    dense: u64,
    mixed: u64,
    empty: u64,
}

#[derive(Serialize)]
struct BenchReport {
    sparsity: f64,
    flops_estimate: f64,
    blocks: BenchBlocks,
    #[serde(skip_serializing_if = "Option::is_none")]
    executor_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_abs_err: Option<f64>,
}

pub fn bench(
    grid: &GridArgs,
    mask: &str,
    heads: usize,
    d: usize,
    repeats: usize,
    seed: u64,
) -> CliResult {
    let g = make_grid(grid)?;
    let spec = load_mask_spec(mask)?;
    let cfg = AttnConfig::new(heads, d);
    let map = classify_blocks(&spec, &g)?;
    let counts = map.counts();
    let sparsity = map.sparsity();
    let n = g.num_tokens();

    let mut report = BenchReport {
        sparsity,
        flops_estimate: flops_estimate(n, cfg.head_dim, cfg.heads, sparsity),
        blocks: BenchBlocks {
            dense: counts.dense,
            mixed: counts.mixed,
            empty: counts.empty,
        },
        executor_ms: None,
        oracle_ms: None,
        max_abs_err: None,
    };

    if repeats > 0 {
        let perm = g.tile_permutation();
        let tensors: Vec<[HeadTensor<f32>; 3]> = (0..heads)
            .map(|h| {
                let base = seed.wrapping_add(h as u64);
                [
                    head_tensor_from_stream(base, STREAM_Q, n, d),
                    head_tensor_from_stream(base, STREAM_K, n, d),
                    head_tensor_from_stream(base, STREAM_V, n, d),
                ]
            })
            .collect();

        let started = Instant::now();
        let mut outputs = Vec::new();
        for _ in 0..repeats {
            outputs.clear();
            for [q, k, v] in &tensors {
                outputs.push(run_head(q, k, v, &map, &perm)?);
            }
        }
        let executor_ms = started.elapsed().as_secs_f64() * 1e3 / repeats as f64;

        let mask = SeqMask::new(&spec, &g, TokenOrder::Zigzag)?;
        let started = Instant::now();
        let mut max_abs_err: f64 = 0.0;
        for ([q, k, v], o) in tensors.iter().zip(&outputs) {
            let want = dense_attention_oracle_spec(q, k, v, &mask)?;
            max_abs_err = max_abs_err.max(o.max_abs_diff(&want)?);
        }
        let oracle_ms = started.elapsed().as_secs_f64() * 1e3;

        report.executor_ms = Some(executor_ms);
        report.oracle_ms = Some(oracle_ms);
        report.max_abs_err = Some(max_abs_err);
    }

    print_json(&report)
}

fn head_tensor_from_stream(seed: u64, stream: u64, rows: usize, cols: usize) -> HeadTensor<f32> {
    let vals = standard_normals(seed, stream, rows * cols);
    HeadTensor::from_fn(rows, cols, |r, c| vals[r * cols + c] as f32)
}

pub fn gen_tensors(seed: u64, n: usize, d: usize, heads: usize, out: &Path) -> CliResult {
    if n == 0 || d == 0 || heads == 0 {
        return Err(CliError::Validation(
            "n, d, and heads must be positive".to_string(),
        ));
    }
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Io(format!("cannot create `{}`: {e}", out.display())))?;
    let count = heads * n * d;
    let mut files = Vec::new();
    for (name, stream) in [("q.stat", STREAM_Q), ("k.stat", STREAM_K), ("v.stat", STREAM_V)] {
        let data: Vec<f32> = standard_normals(seed, stream, count)
            .into_iter()
            .map(|x| x as f32)
            .collect();
        let tensor = TensorFile::new(vec![heads as u64, n as u64, d as u64], data)?;
        let path = out.join(name);
        write_tensor_file(&path, &tensor)
            .map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", path.display())))?;
        files.push(path.display().to_string());
    }
    print_json(&serde_json::json!({
        "files": files,
        "dims": [heads, n, d],
        "seed": seed,
    }))
}
