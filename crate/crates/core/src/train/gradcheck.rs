//! Central finite-difference verification of the analytic backward passes.
//!
//! Every case builds a small 64-bit instance, computes analytic gradients
//! once, then compares sampled coordinates against
//! `(L(θ + h) − L(θ − h)) / 2h`. Coordinates whose perturbation changes any
//! Top-k selection are skipped and counted, since the loss is not
//! differentiable across a routing change.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layers::{LayerKind, MemoryBlock, MemoryLayerKind, Toggles};
use crate::memory::MemoryConfig;
use crate::numerics::{rms_norm, rms_norm_backward, Rng, Tensor};
use crate::params::{join, ParamTree};
use crate::transformer::{
    cross_entropy, AttentionParams, Block, FeedForward, ForwardOptions, Model, ModelDims, TransformerBlockParams,
};
use crate::upscale::{build_midus, UpscalePlan};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Sampled coordinates per case (at least one per tensor).
    pub coords: usize,
    /// Sampled coordinates for the full-model case.
    pub model_coords: usize,
    pub seed: u64,
    /// Name of a case whose analytic gradient is deliberately scaled, for
    /// exercising the failure path.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            coords: 64,
            model_coords: 320,
            seed: 0,
            corrupt: None,
        }
    }
}

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
}

pub const GRADCHECK_CSV_HEADER: &str = "case,checked,skipped,max_rel_err,worst_param,worst_index,passed";

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn checked(&self) -> usize {
        self.cases.iter().map(|c| c.checked).sum()
    }

    pub fn failures(&self) -> Vec<&CaseReport> {
        self.cases.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{GRADCHECK_CSV_HEADER}\n");
        for c in &self.cases {
            let (p, i) = c
                .worst
                .as_ref()
                .map_or((String::new(), String::new()), |w| (w.param.clone(), w.index.to_string()));
            let _ = writeln!(
                s,
                "{},{},{},{:.3e},{},{},{}",
                c.name, c.checked, c.skipped, c.max_rel_err, p, i, c.passed
            );
        }
        s
    }
}

struct Eval {
    loss: f64,
    routing: Vec<usize>,
}

/// Compares `grads` with finite differences of `eval` on sampled
/// coordinates of `params`.
fn check_tree<P: ParamTree<f64> + Clone>(
    name: &str,
    params: &P,
    grads: &P,
    eval: impl Fn(&P) -> Result<Eval>,
    coords: usize,
    cfg: &GradcheckConfig,
    rng: &mut Rng,
) -> Result<CaseReport> {
    let base = eval(params)?;
    let names: Vec<(String, usize)> = params.named().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let grad_list = grads.named();
    let scale = if cfg.corrupt.as_deref() == Some(name) { 1.01 } else { 1.0 };
    let mut work = params.clone();
    let mut report = CaseReport {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst: None,
        passed: true,
    };
    let total = coords.max(names.len());
    for c in 0..total {
        let t = c % names.len();
        let (pname, len) = &names[t];
        if *len == 0 {
            continue;
        }
        let idx = rng.below(*len);
        let orig = params.named()[t].1.data()[idx];
        let set = |w: &mut P, v: f64| {
            w.named_mut()[t].1.data_mut()[idx] = v;
        };
        set(&mut work, orig + cfg.step);
        let plus = eval(&work)?;
        set(&mut work, orig - cfg.step);
        let minus = eval(&work)?;
        set(&mut work, orig);
        if plus.routing != base.routing || minus.routing != base.routing {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
        let analytic = grad_list[t].1.data()[idx] * scale;
        let err = rel_err(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some(Worst {
                param: pname.clone(),
                index: idx,
                analytic,
                numeric,
            });
        }
    }
    report.passed = report.checked > 0 && report.max_rel_err < cfg.tolerance;
    Ok(report)
}

/// Standalone layer instance with its input treated as a parameter.
#[derive(Clone)]
struct LayerCase<L> {
    x: Tensor<f64>,
    layer: L,
}

impl<L: ParamTree<f64>> ParamTree<f64> for LayerCase<L> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<f64>)>) {
        out.push((join(prefix, "x"), &self.x));
        self.layer.visit(prefix, out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<f64>)>) {
        out.push((join(prefix, "x"), &mut self.x));
        self.layer.visit_mut(prefix, out);
    }
}

#[derive(Clone)]
struct Gain(Tensor<f64>);

impl ParamTree<f64> for Gain {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<f64>)>) {
        out.push((join(prefix, "gain"), &self.0));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<f64>)>) {
        out.push((join(prefix, "gain"), &mut self.0));
    }
}

const S: usize = 5;
const D: usize = 8;
const H: usize = 2;

fn dims() -> ModelDims {
    ModelDims {
        vocab: 13,
        d: D,
        heads: H,
        d_ff: 16,
    }
}

fn mem_cfg() -> MemoryConfig {
    MemoryConfig::new(H, 4, 2, D).expect("valid gradcheck memory config")
}

fn linear_loss(out: &Tensor<f64>, c: &Tensor<f64>) -> f64 {
    out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn check_rms(cfg: &GradcheckConfig, rng: &mut Rng) -> Result<CaseReport> {
    let case = LayerCase {
        x: rng.normal_tensor(&[S, D], 1.0),
        layer: Gain(rng.normal_tensor(&[D], 1.0)),
    };
    let c: Tensor<f64> = rng.normal_tensor(&[S, D], 1.0);
    let (_, inv) = rms_norm(&case.x, &case.layer.0, 1e-5)?;
    let mut g = case.clone();
    g.zero_params();
    g.x = rms_norm_backward(&case.x, &case.layer.0, &inv, &c, Some(&mut g.layer.0));
    let eval = |p: &LayerCase<Gain>| {
        Ok(Eval {
            loss: linear_loss(&rms_norm(&p.x, &p.layer.0, 1e-5)?.0, &c),
            routing: Vec::new(),
        })
    };
    check_tree("rms_norm", &case, &g, eval, cfg.coords, cfg, rng)
}

fn check_attention(project: bool, cfg: &GradcheckConfig, rng: &mut Rng) -> Result<CaseReport> {
    let case = LayerCase {
        x: rng.normal_tensor(&[S, D], 1.0),
        layer: AttentionParams::random(D, H, project, rng),
    };
    let c: Tensor<f64> = rng.normal_tensor(&[S, D], 1.0);
    let (_, cache) = case.layer.forward(&case.x, project)?;
    let mut g = case.clone();
    g.zero_params();
    g.x = case.layer.backward(&cache, &c, Some(&mut g.layer))?.0;
    let eval = |p: &LayerCase<AttentionParams<f64>>| {
        Ok(Eval {
            loss: linear_loss(&p.layer.forward(&p.x, project)?.0, &c),
            routing: Vec::new(),
        })
    };
    let name = if project { "attention" } else { "attention_no_projection" };
    check_tree(name, &case, &g, eval, cfg.coords, cfg, rng)
}

fn check_ffn(cfg: &GradcheckConfig, rng: &mut Rng) -> Result<CaseReport> {
    let case = LayerCase {
        x: rng.normal_tensor(&[S, D], 1.0),
        layer: FeedForward::random(D, 16, rng),
    };
    let c: Tensor<f64> = rng.normal_tensor(&[S, D], 1.0);
    let (_, cache) = case.layer.forward(&case.x)?;
    let mut g = case.clone();
    g.zero_params();
    g.x = case.layer.backward(&cache, &c, Some(&mut g.layer))?;
    let eval = |p: &LayerCase<FeedForward<f64>>| {
        Ok(Eval {
            loss: linear_loss(&p.layer.forward(&p.x)?.0, &c),
            routing: Vec::new(),
        })
    };
    check_tree("ffn", &case, &g, eval, cfg.coords, cfg, rng)
}

/// Fills every parameter tensor of `model` whose name contains `pattern`
/// with Gaussian noise.
fn randomize<P: ParamTree<f64>>(model: &mut P, pattern: &str, std: f64, rng: &mut Rng) {
    for (n, t) in model.named_mut() {
        if n.contains(pattern) {
            let shape = t.shape().to_vec();
            *t = rng.normal_tensor(&shape, std);
        }
    }
}

fn model_eval(model: &Model<f64>, tokens: &[usize], targets: &[usize]) -> Result<Eval> {
    let (logits, cache) = model.forward_with(tokens, &ForwardOptions::train())?;
    let (loss, _) = cross_entropy(&logits, targets, None)?;
    let routing = cache.retrieved_indices().concat();
    Ok(Eval { loss, routing })
}

fn check_model(
    name: &str,
    model: &Model<f64>,
    coords: usize,
    cfg: &GradcheckConfig,
    rng: &mut Rng,
) -> Result<CaseReport> {
    let seq = 6;
    let tokens: Vec<usize> = (0..seq).map(|_| rng.below(model.dims.vocab)).collect();
    let targets: Vec<usize> = (0..seq).map(|_| rng.below(model.dims.vocab)).collect();
    let (logits, cache) = model.forward_with(&tokens, &ForwardOptions::train())?;
    let (_, dlogits) = cross_entropy(&logits, &targets, None)?;
    let mut grads = model.zeros_like();
    model.backward(&cache, &dlogits, Some(&mut grads), false)?;
    check_tree(name, model, &grads, |m| model_eval(m, &tokens, &targets), coords, cfg, rng)
}

fn trainable_everywhere(mut m: Model<f64>) -> Model<f64> {
    m.trainable = vec![true; m.depth()];
    m.io_trainable = true;
    m
}

fn single_block_model(block: Block<f64>, rng: &mut Rng) -> Result<Model<f64>> {
    let mut m = Model::base(dims(), 0, rng)?;
    m.blocks.push(block);
    m.trainable.push(true);
    m.inserted.push(false);
    m.validate()?;
    Ok(m)
}

fn memory_model(kind: MemoryLayerKind, rng: &mut Rng) -> Result<Model<f64>> {
    let mut block = MemoryBlock::new(kind, mem_cfg(), rng)?;
    randomize(&mut block, "values", 1.0, rng);
    randomize(&mut block, "norm", 1.0, rng);
    single_block_model(Block::Memory(block), rng)
}

/// Runs the full suite.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.step > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(Error::Config("gradcheck step and tolerance must be positive".into()));
    }
    let mut rng = Rng::new(cfg.seed).stream(3);
    let mut cases = vec![
        check_rms(cfg, &mut rng)?,
        check_attention(true, cfg, &mut rng)?,
        check_attention(false, cfg, &mut rng)?,
        check_ffn(cfg, &mut rng)?,
    ];

    let mut tb = TransformerBlockParams::random(D, H, 16, &mut rng);
    randomize(&mut tb, "norm", 1.0, &mut rng);
    let m = single_block_model(Block::Transformer(tb), &mut rng)?;
    cases.push(check_model("transformer_block", &m, cfg.coords, cfg, &mut rng)?);

    let variants: [(&str, MemoryLayerKind); 7] = [
        ("memory_linear", MemoryLayerKind::new(LayerKind::Linear)),
        ("memory_pkm", MemoryLayerKind::new(LayerKind::Pkm)),
        ("memory_hml", MemoryLayerKind::new(LayerKind::Hml)),
        (
            "hml_query_batchnorm",
            MemoryLayerKind::with_toggles(
                LayerKind::Hml,
                Toggles {
                    query_batchnorm: true,
                    ..Toggles::default()
                },
            ),
        ),
        (
            "hml_query_layernorm",
            MemoryLayerKind::with_toggles(
                LayerKind::Hml,
                Toggles {
                    query_layernorm: true,
                    ..Toggles::default()
                },
            ),
        ),
        (
            "hml_internal_residual",
            MemoryLayerKind::with_toggles(
                LayerKind::Hml,
                Toggles {
                    internal_residual: true,
                    ..Toggles::default()
                },
            ),
        ),
        (
            "hml_output_projection",
            MemoryLayerKind::with_toggles(
                LayerKind::Hml,
                Toggles {
                    output_projection: true,
                    ..Toggles::default()
                },
            ),
        ),
    ];
    for (name, kind) in variants {
        let m = memory_model(kind, &mut rng)?;
        cases.push(check_model(name, &m, cfg.coords, cfg, &mut rng)?);
    }

    let base = Model::base(dims(), 2, &mut rng)?;
    let plan = UpscalePlan::midus(MemoryLayerKind::new(LayerKind::Hml), mem_cfg(), 2);
    let (mut m, _) = build_midus(&base, &plan, &mut rng)?;
    randomize(&mut m, "values.base", 1.0, &mut rng);
    let m = trainable_everywhere(m);
    cases.push(check_model("midus_hml_model", &m, cfg.model_coords, cfg, &mut rng)?);
    Ok(GradcheckReport { cases })
}
