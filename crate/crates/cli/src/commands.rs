use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use midus::layers::{LayerKind, MemoryBlock, MemoryForward, MemoryLayerKind};
use midus::memory::{fused_cartesian_topk, score_subkeys, two_stage_topk, ProductKeyBank};
use midus::numerics::macs;
use midus::params::ParamTree;
use midus::train::gradcheck::{run_gradcheck, GradcheckConfig};
use midus::train::{evaluate, head_importance, train, Sequence};
use midus::transformer::{block_index, Model, TransformerBlockParams};
use midus::upscale::{policy_indices, PlacementPolicy, TrainMode};
use midus::{Precision, Rng, Scalar, Tensor};

use crate::checkpoint::{self, AnyModel};
use crate::config::{ExperimentConfig, UpscaleMethod};
use crate::costs;
use crate::error::CliError;
use crate::setup;

const TOPK_STREAM: u64 = 20;
const PREFILL_STREAM: u64 = 21;
const DATASET_STREAM: u64 = 22;

/// Where a command's tables go: files under a directory, or stdout.
#[derive(Clone, Debug)]
pub struct Output {
    pub dir: Option<PathBuf>,
}

impl Output {
    pub fn emit(&self, file: &str, body: &str) -> Result<(), CliError> {
        match &self.dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
                let p = dir.join(file);
                fs::write(&p, body).map_err(|e| CliError::io(&p, e))
            }
            None => {
                let mut stdout = std::io::stdout().lock();
                match stdout.write_all(body.as_bytes()).and_then(|()| stdout.flush()) {
                    Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("<stdout>", e)),
                    _ => Ok(()),
                }
            }
        }
    }
}

macro_rules! dispatch {
    ($prec:expr, $f:ident($($arg:expr),*)) => {
        match $prec {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Digest of every tensor that does not belong to an inserted block.
pub fn base_checksum<T: Scalar>(model: &Model<T>) -> String {
    let named = model.named();
    checkpoint::digest(
        named
            .iter()
            .filter(|(n, _)| block_index(n).is_none_or(|i| !model.inserted[i]))
            .map(|(_, t)| *t),
    )
}

pub fn train_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    dispatch!(cfg.precision, train_typed(cfg, out))
}

fn train_typed<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let corpus = setup::corpus(cfg)?;
    let base = setup::pretrained_base::<T>(cfg, corpus.as_ref())?;
    let (mut model, inserted) = setup::upscale(cfg, &base)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let before = base_checksum(&model);
    let tc = cfg.train_config(cfg.train.steps, cfg.seed);
    let report = train(&mut model, corpus.as_ref(), &tc)?;
    let after = base_checksum(&model);
    let eval_loss = evaluate(&model, corpus.as_ref(), cfg.eval.sequences, cfg.train.seq_len, cfg.seed)?;
    let tail = (cfg.train.steps / 10).max(1);
    let summary = json!({
        "method": cfg.upscale.method,
        "precision": T::PRECISION,
        "layout": model.labels(),
        "inserted": inserted,
        "trainable_params": model.trainable_param_count(),
        "total_params": model.param_count(),
        "initial_loss": report.initial_loss(),
        "final_loss": report.final_loss(),
        "tail_loss": report.tail_loss(tail),
        "tail_steps": tail,
        "eval_loss": eval_loss,
        "base_checksum_before": before,
        "base_checksum_after": after,
        "base_unchanged": before == after,
        "scatter_contributions": report.scatter.contributions,
        "scatter_unique": report.scatter.unique,
        "scatter_global_writes": report.scatter.global_writes,
    });
    let write = |name: &str, body: &str| {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| CliError::io(&p, e))
    };
    write("config.toml", &cfg.to_toml())?;
    write("train.csv", &report.to_csv())?;
    write("summary.json", &format!("{:#}\n", summary))?;
    checkpoint::save(&out.join("model.ckpt"), cfg, &model)?;
    println!(
        "trained {} steps: loss {:.4} -> {:.4} (tail {:.4}), eval {:.4}; artifacts in {}",
        report.records.len(),
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_loss().unwrap_or(f64::NAN),
        report.tail_loss(tail).unwrap_or(f64::NAN),
        eval_loss,
        out.display()
    );
    Ok(())
}

pub const EVAL_CSV_HEADER: &str = "sequences,seq_len,loss";

pub fn eval_cmd(ckpt: &Path, sequences: Option<usize>, seed: Option<u64>, out: &Output) -> Result<(), CliError> {
    let (cfg, model) = checkpoint::load_any(ckpt)?;
    let n = sequences.unwrap_or(cfg.eval.sequences);
    let seed = seed.unwrap_or(cfg.seed);
    let corpus = setup::corpus(&cfg)?;
    let loss = match &model {
        AnyModel::F32(m) => evaluate(m, corpus.as_ref(), n, cfg.train.seq_len, seed)?,
        AnyModel::F64(m) => evaluate(m, corpus.as_ref(), n, cfg.train.seq_len, seed)?,
    };
    out.emit(
        "eval.csv",
        &format!("{EVAL_CSV_HEADER}\n{n},{},{loss:.9}\n", cfg.train.seq_len),
    )
}

pub const TOPK_CSV_HEADER: &str = "n,k,tokens,two_stage_ns,fused_ns,equal";

/// Times both product-key selection kernels over a token-count sweep.
/// Timing columns are wall-clock minima over `reps` runs; everything else
/// is deterministic.
pub fn bench_topk_cmd(cfg: &ExperimentConfig, tokens: &[usize], reps: usize, out: &Output) -> Result<(), CliError> {
    dispatch!(cfg.precision, bench_topk_typed(cfg, tokens, reps, out))
}

fn bench_topk_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    tokens: &[usize],
    reps: usize,
    out: &Output,
) -> Result<(), CliError> {
    let mem = cfg.memory_config()?;
    let mut rng = Rng::new(cfg.seed).stream(TOPK_STREAM);
    let bank = ProductKeyBank::<T>::random(&mem, &mut rng);
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut csv = format!("{TOPK_CSV_HEADER}\n");
    for &s in &sorted {
        let q: Tensor<T> = rng.normal_tensor(&[s, 2 * mem.sub_dim()], 1.0);
        let (row, col) = score_subkeys(&q, &bank, 0)?;
        let k = mem.top_k();
        let (mut best_two, mut best_fused) = (u128::MAX, u128::MAX);
        let mut equal = true;
        for _ in 0..reps.max(1) {
            let t0 = Instant::now();
            let a = two_stage_topk(&row, &col, k)?;
            let t1 = Instant::now();
            let b = fused_cartesian_topk(&row, &col, k)?;
            let t2 = Instant::now();
            best_two = best_two.min((t1 - t0).as_nanos());
            best_fused = best_fused.min((t2 - t1).as_nanos());
            equal &= a.indices == b.indices;
        }
        let _ = writeln!(csv, "{},{k},{s},{best_two},{best_fused},{equal}", mem.sub_keys());
    }
    out.emit("bench_topk.csv", &csv)
}

pub const PREFILL_CSV_HEADER: &str = "length,block_kind,forward_ns,mac_count,attention_macs,measured_macs";

/// Prompt-length sweep over one transformer block and one HML block.
/// `mac_count` is the analytic count of the length-linear terms;
/// `attention_macs` is the causal score/mix term; `measured_macs` comes
/// from the kernel counter. `forward_ns` is wall-clock.
pub fn bench_prefill_cmd(cfg: &ExperimentConfig, lengths: &[usize], reps: usize, out: &Output) -> Result<(), CliError> {
    dispatch!(cfg.precision, bench_prefill_typed(cfg, lengths, reps, out))
}

fn bench_prefill_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    lengths: &[usize],
    reps: usize,
    out: &Output,
) -> Result<(), CliError> {
    let mem = cfg.memory_config()?;
    let (d, heads, d_ff) = (cfg.model.d, cfg.model.heads, cfg.model.d_ff);
    let mut rng = Rng::new(cfg.seed).stream(PREFILL_STREAM);
    let dense = TransformerBlockParams::<T>::random(d, heads, d_ff, &mut rng);
    let kind = MemoryLayerKind {
        kind: LayerKind::Hml,
        ..cfg.memory.layer_kind()
    };
    let mut mem_block = MemoryBlock::<T>::new(kind, mem, &mut rng)?;
    if !kind.toggles.output_projection {
        mem_block.attn = dense.attn.without_output();
    }
    let path = cfg.retrieval_path();
    let mut csv = format!("{PREFILL_CSV_HEADER}\n");
    for &s in lengths {
        let x: Tensor<T> = rng.normal_tensor(&[s, d], 1.0);
        for kind_name in ["transformer", "hml"] {
            let mut best = u128::MAX;
            let mut measured = 0;
            for _ in 0..reps.max(1) {
                let t0 = Instant::now();
                let (r, m) = macs::measure(|| match kind_name {
                    "transformer" => dense.forward(&x).map(|_| ()),
                    _ => mem_block
                        .forward(
                            &x,
                            MemoryForward {
                                path,
                                ..MemoryForward::default()
                            },
                        )
                        .map(|_| ()),
                });
                best = best.min(t0.elapsed().as_nanos());
                r?;
                measured = m;
            }
            let _ = writeln!(
                csv,
                "{s},{kind_name},{best},{},{},{measured}",
                costs::prefill_macs(cfg, kind_name, s),
                costs::attention_macs(d, s)
            );
        }
    }
    out.emit("bench_prefill.csv", &csv)
}

pub const PARAMS_CSV_HEADER: &str = "method,inserts,trainable_params,total_params,keys,values,query_proj,attention,ffn,norm";

pub const PARAM_METHODS: [&str; 4] = ["dus_copy", "midus_linear", "midus_pkm", "midus_hml"];

/// Config for one row of the parameter table: the given config with the
/// method and memory kind replaced, in continual-pretraining mode.
pub fn method_config(cfg: &ExperimentConfig, method: &str) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.upscale.mode = TrainMode::Cpt;
    match method {
        "dus_copy" => {
            c.upscale.method = UpscaleMethod::Dus;
            c.upscale.policy = PlacementPolicy::LlamaPro;
            c.upscale.init_source = None;
        }
        other => {
            c.upscale.method = UpscaleMethod::Midus;
            c.memory.kind = other.trim_start_matches("midus_").parse().expect("known memory kind");
            c.memory.query_batchnorm = None;
            c.memory.query_layernorm = None;
            c.memory.internal_residual = None;
            c.memory.output_projection = None;
        }
    }
    c
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub keys: usize,
    pub values: usize,
    pub query_proj: usize,
    pub attention: usize,
    pub ffn: usize,
    pub norm: usize,
}

/// Parameter counts of the inserted blocks, grouped by role.
pub fn inserted_breakdown<T: Scalar>(model: &Model<T>) -> ParamBreakdown {
    let mut b = ParamBreakdown::default();
    for (name, t) in model.named() {
        let Some(i) = block_index(&name) else { continue };
        if !model.inserted[i] {
            continue;
        }
        let field = name.splitn(3, '.').nth(2).unwrap_or("");
        let slot = if field.starts_with("mem.keys") {
            &mut b.keys
        } else if field.starts_with("mem.values") {
            &mut b.values
        } else if field.starts_with("mem.w_q") {
            &mut b.query_proj
        } else if field.starts_with("attn.") {
            &mut b.attention
        } else if field.starts_with("ffn.") {
            &mut b.ffn
        } else {
            &mut b.norm
        };
        *slot += t.len();
    }
    b
}

pub fn params_table(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let mut csv = format!("{PARAMS_CSV_HEADER}\n");
    for method in PARAM_METHODS {
        let c = method_config(cfg, method);
        c.validate()?;
        let model = setup::skeleton::<f32>(&c)?;
        let b = inserted_breakdown(&model);
        let _ = writeln!(
            csv,
            "{method},{},{},{},{},{},{},{},{},{}",
            c.upscale.inserts,
            model.trainable_param_count(),
            model.param_count(),
            b.keys,
            b.values,
            b.query_proj,
            b.attention,
            b.ffn,
            b.norm
        );
    }
    Ok(csv)
}

pub fn params_cmd(cfg: &ExperimentConfig, out: &Output) -> Result<(), CliError> {
    out.emit("params.csv", &params_table(cfg)?)
}

pub fn format_indices(idx: &[usize]) -> String {
    let items: Vec<String> = idx.iter().map(usize::to_string).collect();
    format!("{{{}}}", items.join(","))
}

pub fn policy_cmd(l: usize, k: usize, policy: Option<PlacementPolicy>) -> Result<String, CliError> {
    match policy {
        Some(p) => Ok(format!("{}\n", format_indices(&policy_indices(p, l, k)?))),
        None => {
            let mut s = String::new();
            for p in PlacementPolicy::ALL {
                let _ = writeln!(s, "{p} {}", format_indices(&policy_indices(p, l, k)?));
            }
            Ok(s)
        }
    }
}

/// Dataset for head importance: `n` sequences drawn from the config's corpus.
pub fn importance_dataset(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<Vec<Sequence>, CliError> {
    let corpus = setup::corpus(cfg)?;
    let mut rng = Rng::new(seed).stream(DATASET_STREAM);
    (0..n)
        .map(|_| Ok(corpus.sample(&mut rng, cfg.train.seq_len)?))
        .collect()
}

/// Scores either a checkpoint or, without one, the untrained model built
/// from `cfg`. When both are given their model sections must agree.
pub fn head_importance_cmd(
    cfg: Option<&ExperimentConfig>,
    ckpt: Option<&Path>,
    sequences: Option<usize>,
    seed: Option<u64>,
    out: &Output,
) -> Result<(), CliError> {
    let (cfg, model) = match (ckpt, cfg) {
        (Some(p), given) => {
            let (c, m) = checkpoint::load_any(p)?;
            if let Some(g) = given {
                check_compatible(g, &c, p)?;
            }
            (c, m)
        }
        (None, Some(c)) => {
            let m = match c.precision {
                Precision::F32 => AnyModel::F32(setup::skeleton(c)?),
                Precision::F64 => AnyModel::F64(setup::skeleton(c)?),
            };
            (c.clone(), m)
        }
        (None, None) => return Err(CliError::Config("head-importance needs --checkpoint or --config".into())),
    };
    let data = importance_dataset(&cfg, sequences.unwrap_or(cfg.eval.sequences), seed.unwrap_or(cfg.seed))?;
    let report = match &model {
        AnyModel::F32(m) => head_importance(m, &data)?,
        AnyModel::F64(m) => head_importance(m, &data)?,
    };
    out.emit("head_importance.csv", &report.to_csv())?;
    out.emit("head_variance.csv", &report.variance_csv())
}

/// A checkpoint used together with an explicit config must agree with it on
/// model shape.
fn check_compatible(given: &ExperimentConfig, stored: &ExperimentConfig, path: &Path) -> Result<(), CliError> {
    if given.model != stored.model {
        return Err(CliError::Config(format!(
            "checkpoint {} was written for model {:?}, config specifies {:?}",
            path.display(),
            stored.model,
            given.model
        )));
    }
    Ok(())
}

pub fn gradcheck_cmd(seed: u64, corrupt: Option<String>, out: &Output) -> Result<(), CliError> {
    let cfg = GradcheckConfig {
        seed,
        corrupt,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    out.emit("gradcheck.csv", &report.to_csv())?;
    if report.passed() {
        eprintln!(
            "gradcheck passed: {} cases, {} coordinates checked",
            report.cases.len(),
            report.checked()
        );
        Ok(())
    } else {
        let msg: Vec<String> = report
            .failures()
            .iter()
            .map(|c| {
                let w = c.worst.as_ref();
                format!(
                    "{} (worst {}[{}], rel err {:.3e})",
                    c.name,
                    w.map_or("-", |w| w.param.as_str()),
                    w.map_or(0, |w| w.index),
                    c.max_rel_err
                )
            })
            .collect();
        Err(CliError::Gradcheck(msg.join("; ")))
    }
}
