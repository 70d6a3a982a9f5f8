//! End-to-end orchestration: teacher pretraining, training with the composite
//! objective, evaluation and the ablation matrix.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{RunConfig, SEED_ENV};

use crate::error::{LgdError, Result};
use crate::losses::{
    cosine_distill, cross_entropy, membrane_dice, nuclei_mse, total_loss, CosineMode,
    LossBreakdown, LossTerms,
};
use crate::metrics::MetricsReport;
use crate::model::{argmax_rows, Batch, LgdNet, ModelKind, Variant, NUM_CLASSES};
use crate::rng::{derive_seed, SplitMix64};
use crate::synth::{DatasetManifest, Split, SplitData};
use crate::tensor::{cosine_lr, AdamW, Graph, ParamStore, Tensor};

/// Inference checkpoint (teacher and decoders removed).
pub const MODEL_CKPT: &str = "model.ckpt";
/// Checkpoint with every trained parameter.
pub const FULL_CKPT: &str = "full.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const CONFIG_ECHO: &str = "config.cfg";
pub const RESULTS_CSV: &str = "results.csv";

const EVAL_BATCH: usize = 64;
const SHUFFLE_TAG: u64 = 0x5348_5546;

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cls: f64,
    pub dist: f64,
    pub nuc: f64,
    pub mem: f64,
    pub total: f64,
    pub lr: f64,
}

impl EpochLog {
    fn new(epoch: usize, b: &LossBreakdown, lr: f64) -> Self {
        Self {
            epoch,
            cls: b.cls,
            dist: b.dist,
            nuc: b.nuc,
            mem: b.mem,
            total: b.total,
            lr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: RunConfig,
    /// Test-split metrics from the inference path.
    pub metrics: MetricsReport,
    pub epochs: Vec<EpochLog>,
    pub seconds: f64,
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub full_checkpoint: PathBuf,
    /// Mean test cosine between hallucinated and teacher features before
    /// and after training, for variants with a hallucinator.
    pub distill_cosine: Option<(f64, f64)>,
}

/// Frozen-teacher features of a whole split, one `[C, h, w]` block per sample.
struct FeatureCache {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FeatureCache {
    fn build(net: &LgdNet, data: &SplitData) -> Result<Self> {
        let mut shape = Vec::new();
        let mut out = Vec::new();
        for idx in chunks(data.len(), EVAL_BATCH) {
            let mut g = Graph::new();
            let x = g.constant(data.ihc(&idx));
            let z = net.encode_teacher(&mut g, x)?;
            shape = g.shape(z)[1..].to_vec();
            out.extend_from_slice(g.value(z).data());
        }
        Ok(Self { shape, data: out })
    }

    fn gather(&self, idx: &[usize]) -> Tensor {
        let per: usize = self.shape.iter().product();
        let mut buf = Vec::with_capacity(per * idx.len());
        for &i in idx {
            buf.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.shape);
        Tensor::new(&shape, buf).expect("consistent cache")
    }
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(size).map(move |s| (s..(s + size).min(n)).collect())
}

fn batch_of(data: &SplitData, idx: &[usize], cache: Option<&FeatureCache>) -> Batch {
    Batch {
        he: data.he(idx),
        ihc: data.ihc(idx),
        labels: data.labels_of(idx),
        density: data.density(idx),
        mask: data.mask(idx),
        teacher_features: cache.map(|c| c.gather(idx)),
    }
}

fn loss_variant(kind: ModelKind) -> Variant {
    kind.variant().unwrap_or(Variant::A)
}

/// Builds the loss graph of one batch. Returns the total node and its
/// breakdown.
fn batch_loss(
    g: &mut Graph,
    net: &LgdNet,
    batch: &Batch,
    cfg: &RunConfig,
) -> Result<(crate::tensor::Var, LossBreakdown)> {
    let out = net.forward_train(g, batch)?;
    let cls = cross_entropy(g, out.logits, &batch.labels)?;
    let dist = match (out.z_hat, out.z_ihc) {
        (Some(zh), Some(zt)) => Some(cosine_distill(g, zh, zt, cfg.cosine)?),
        _ => None,
    };
    let nuc = match out.nuclei {
        Some(k) => {
            let target = g.constant(batch.density.clone());
            Some(nuclei_mse(g, k, target)?)
        }
        None => None,
    };
    let mem = match out.membrane {
        Some(m) => {
            let target = g.constant(batch.mask.clone());
            Some(membrane_dice(g, m, target)?)
        }
        None => None,
    };
    let terms = LossTerms {
        cls,
        dist,
        nuc,
        mem,
    };
    total_loss(g, &terms, &cfg.weights, loss_variant(net.kind()))
}

/// Test-split metrics through the inference path only.
pub fn evaluate_net(net: &LgdNet, data: &SplitData) -> Result<MetricsReport> {
    let needs_ihc = net.kind().uses_ihc_at_inference();
    let mut predicted = Vec::with_capacity(data.len());
    for idx in chunks(data.len(), EVAL_BATCH) {
        let ihc = needs_ihc.then(|| data.ihc(&idx));
        let logits = net.predict_logits(&data.he(&idx), ihc.as_ref())?;
        predicted.extend(argmax_rows(&logits));
    }
    MetricsReport::from_predictions(NUM_CLASSES, &data.labels, &predicted)
}

fn mean_distill_cosine(net: &LgdNet, data: &SplitData, cache: &FeatureCache) -> Result<f64> {
    let mut sum = 0.0;
    for idx in chunks(data.len(), EVAL_BATCH) {
        let mut g = Graph::new();
        let x = g.constant(data.he(&idx));
        let z = net.encode_student(&mut g, x)?;
        let zh = net.hallucinate(&mut g, z)?;
        let zt = g.constant(cache.gather(&idx));
        let d = cosine_distill(&mut g, zh, zt, CosineMode::Pooled)?;
        sum += (1.0 - f64::from(g.value(d).item())) * idx.len() as f64;
    }
    Ok(sum / data.len() as f64)
}

fn load_teacher(path: &Path) -> Result<ParamStore> {
    let store = ParamStore::load(path)?;
    if !store.contains("teacher.conv1.weight") {
        return Err(LgdError::NotPretrained(format!(
            "{} holds no teacher encoder",
            path.display()
        )));
    }
    Ok(store)
}

/// Loads `cfg.teacher_ckpt`, or pretrains a teacher when none is given.
fn resolve_teacher(cfg: &RunConfig) -> Result<ParamStore> {
    match &cfg.teacher_ckpt {
        Some(path) => load_teacher(path),
        None => {
            log::info!("no teacher checkpoint given; pretraining one");
            let ckpt = pretrain_teacher(cfg)?.checkpoint;
            load_teacher(&ckpt)
        }
    }
}

fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LgdError::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| LgdError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| LgdError::io(path, e))
}

/// Trains the teacher encoder and its head on IHC alone. The returned
/// checkpoint keeps the teacher parameters.
pub fn pretrain_teacher(cfg: &RunConfig) -> Result<RunResult> {
    let mut tcfg = cfg.clone();
    tcfg.variant = ModelKind::IhcUnimodal;
    tcfg.teacher_ckpt = None;
    train(&tcfg)
}

/// Full training run; writes all artifacts under `cfg.run_dir()`.
pub fn train(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let started = Instant::now();
    let manifest = DatasetManifest::load(&cfg.dataset)?;
    let train_data = SplitData::load(&manifest, Split::Train)?;
    let test_data = SplitData::load(&manifest, Split::Test)?;
    if train_data.is_empty() || test_data.is_empty() {
        return Err(LgdError::InvalidArgument(
            "dataset needs both train and test samples".into(),
        ));
    }

    let mut net = LgdNet::new(cfg.variant, cfg.seed)?;
    let mut train_cache = None;
    let mut test_cache = None;
    if cfg.variant.needs_teacher() {
        net.attach_teacher(&resolve_teacher(cfg)?)?;
        train_cache = Some(FeatureCache::build(&net, &train_data)?);
        if net.variant().is_some_and(|v| v.hallucination) {
            test_cache = Some(FeatureCache::build(&net, &test_data)?);
        }
    }
    let cosine_before = match &test_cache {
        Some(c) => Some(mean_distill_cosine(&net, &test_data, c)?),
        None => None,
    };

    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| LgdError::io(&run_dir, e))?;
    fs::write(run_dir.join(CONFIG_ECHO), cfg.to_text())
        .map_err(|e| LgdError::io(run_dir.join(CONFIG_ECHO), e))?;

    let mut opt = AdamW::new(cfg.base_lr, (0.9, 0.999), 1e-4);
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, SHUFFLE_TAG));
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut log_rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)?;
        rng.shuffle(&mut order);
        let mut sum = LossBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            let batch = batch_of(&train_data, idx, train_cache.as_ref());
            let mut g = Graph::new();
            let (total, parts) = batch_loss(&mut g, &net, &batch, cfg)?;
            if !parts.total.is_finite() {
                return Err(LgdError::Diverged { epoch: epoch + 1 });
            }
            g.backward(total)?;
            let params = net.params_mut();
            g.write_param_grads(params)?;
            opt.step(params, lr)?;
            params.zero_grad();
            sum.accumulate(&parts.scaled(idx.len() as f64));
        }
        let mean = sum.scaled(1.0 / train_data.len() as f64);
        let row = EpochLog::new(epoch + 1, &mean, lr);
        log::info!(
            "{} epoch {}/{}: total {:.4} (cls {:.4} dist {:.4} nuc {:.4} mem {:.4}) lr {:.2e}",
            cfg.run_name(),
            row.epoch,
            cfg.epochs,
            row.total,
            row.cls,
            row.dist,
            row.nuc,
            row.mem,
            lr
        );
        log_rows.push(row);
    }
    write_log(&run_dir.join(TRAIN_LOG), &log_rows)?;

    let full_checkpoint = run_dir.join(FULL_CKPT);
    let mut full = net.params().clone();
    full.zero_grad();
    full.save(&full_checkpoint)?;
    let inference = net.inference_params();
    let checkpoint = run_dir.join(MODEL_CKPT);
    inference.save(&checkpoint)?;

    let infer_net = LgdNet::from_params(net.kind(), inference);
    let metrics = evaluate_net(&infer_net, &test_data)?;
    let distill_cosine = match (&test_cache, cosine_before) {
        (Some(c), Some(before)) => Some((before, mean_distill_cosine(&net, &test_data, c)?)),
        _ => None,
    };
    fs::write(run_dir.join(METRICS_JSON), metrics.to_json())
        .map_err(|e| LgdError::io(run_dir.join(METRICS_JSON), e))?;
    log::info!("{}: {metrics}", cfg.run_name());

    Ok(RunResult {
        config: cfg.clone(),
        metrics,
        epochs: log_rows,
        seconds: started.elapsed().as_secs_f64(),
        run_dir,
        checkpoint,
        full_checkpoint,
        distill_cosine,
    })
}

/// Evaluates a checkpoint on the test split of `manifest`. The network kind
/// is inferred from the parameter names.
pub fn evaluate(ckpt: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<MetricsReport> {
    let params = ParamStore::load(ckpt.as_ref())?;
    let kind = LgdNet::infer_kind(&params)?;
    let net = LgdNet::from_params(kind, params);
    let manifest = DatasetManifest::load(manifest)?;
    let data = SplitData::load(&manifest, Split::Test)?;
    for (class, &n) in data.class_counts().iter().enumerate() {
        if n == 0 {
            log::warn!("class {class} is absent from the test split");
        }
    }
    evaluate_net(&net, &data)
}

/// One line of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub run: String,
    pub variant: ModelKind,
    /// Metrics, or the error message of a failed run.
    pub outcome: std::result::Result<MetricsReport, String>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub csv_path: PathBuf,
    /// Full results of the runs that succeeded, in row order.
    pub results: Vec<RunResult>,
}

/// Row order of the ablation matrix.
pub const ABLATION_ORDER: [ModelKind; 8] = [
    ModelKind::A,
    ModelKind::B,
    ModelKind::C,
    ModelKind::D,
    ModelKind::E,
    ModelKind::F,
    ModelKind::IhcUnimodal,
    ModelKind::FeatureConcat,
];

fn results_row(row: &AblationRow) -> [String; 6] {
    match &row.outcome {
        Ok(m) => [
            row.run.clone(),
            row.variant.to_string(),
            format!("{:.6}", m.accuracy),
            format!("{:.6}", m.macro_f1),
            format!("{:.6}", m.kappa),
            m.n.to_string(),
        ],
        Err(_) => [
            row.run.clone(),
            row.variant.to_string(),
            "failed".into(),
            "failed".into(),
            "failed".into(),
            "0".into(),
        ],
    }
}

/// Runs A-F, the IHC-unimodal teacher and the feature-concat baseline under
/// the seed of `base`, sharing one teacher. Failed runs become failed rows.
pub fn run_ablation_matrix(base: &RunConfig) -> Result<AblationReport> {
    base.validate()?;
    fs::create_dir_all(&base.out_dir).map_err(|e| LgdError::io(&base.out_dir, e))?;

    let mut results = Vec::new();
    let mut outcomes: Vec<(ModelKind, String, std::result::Result<MetricsReport, String>)> =
        Vec::new();

    let mut tcfg = base.clone();
    tcfg.variant = ModelKind::IhcUnimodal;
    let teacher_ckpt = match &base.teacher_ckpt {
        Some(path) => {
            let outcome = evaluate(path, &base.dataset).map_err(|e| e.to_string());
            outcomes.push((ModelKind::IhcUnimodal, tcfg.run_name(), outcome));
            Some(path.clone())
        }
        None => match train(&tcfg) {
            Ok(r) => {
                let ckpt = r.checkpoint.clone();
                outcomes.push((ModelKind::IhcUnimodal, tcfg.run_name(), Ok(r.metrics.clone())));
                results.push(r);
                Some(ckpt)
            }
            Err(e) => {
                log::error!("{}: {e}", tcfg.run_name());
                outcomes.push((ModelKind::IhcUnimodal, tcfg.run_name(), Err(e.to_string())));
                None
            }
        },
    };

    for kind in ABLATION_ORDER {
        if kind == ModelKind::IhcUnimodal {
            continue;
        }
        let mut cfg = base.clone();
        cfg.variant = kind;
        cfg.teacher_ckpt = teacher_ckpt.clone();
        let outcome = if kind.needs_teacher() && teacher_ckpt.is_none() {
            Err("teacher pretraining failed".to_string())
        } else {
            match train(&cfg) {
                Ok(r) => {
                    let m = r.metrics.clone();
                    results.push(r);
                    Ok(m)
                }
                Err(e) => {
                    log::error!("{}: {e}", cfg.run_name());
                    Err(e.to_string())
                }
            }
        };
        outcomes.push((kind, cfg.run_name(), outcome));
    }

    let rows: Vec<AblationRow> = ABLATION_ORDER
        .iter()
        .filter_map(|k| {
            outcomes
                .iter()
                .find(|(kind, _, _)| kind == k)
                .map(|(variant, run, outcome)| AblationRow {
                    run: run.clone(),
                    variant: *variant,
                    outcome: outcome.clone(),
                })
        })
        .collect();
    results.sort_by_key(|r| {
        ABLATION_ORDER
            .iter()
            .position(|k| *k == r.config.variant)
            .unwrap_or(usize::MAX)
    });

    let csv_path = base.out_dir.join(RESULTS_CSV);
    write_results(&csv_path, &rows)?;
    Ok(AblationReport {
        rows,
        csv_path,
        results,
    })
}

/// Writes `run,variant,acc,f1,kappa,n` rows.
pub fn write_results(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LgdError::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    let csv_err = |e| LgdError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    w.write_record(["run", "variant", "acc", "f1", "kappa", "n"])
        .map_err(csv_err)?;
    for row in rows {
        w.write_record(results_row(row)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| LgdError::io(path, e))
}

/// Renders the ablation table with one aligned line per row.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "yes" } else { "no" };
    let mut out = Vec::new();
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "variant", "Halluc.", "Attn.", "Bio-Reg", "Acc", "F1", "κ"
    );
    for row in rows {
        let (halluc, attn, bio) = match row.variant.variant() {
            Some(v) => (
                mark(v.hallucination),
                if v.attention {
                    "attn"
                } else if v.hallucination {
                    "concat"
                } else {
                    "-"
                },
                match (v.nuclei_aux, v.membrane_aux) {
                    (true, true) => "K+M",
                    (true, false) => "K",
                    (false, true) => "M",
                    (false, false) => "-",
                },
            ),
            None => ("-", "-", "-"),
        };
        let metrics = match &row.outcome {
            Ok(m) => format!(
                "{:>8.2} {:>8.4} {:>8.4}",
                100.0 * m.accuracy,
                m.macro_f1,
                m.kappa
            ),
            Err(_) => format!("{:>8} {:>8} {:>8}", "failed", "-", "-"),
        };
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8} {metrics}",
            row.variant.to_string(),
            halluc,
            attn,
            bio
        );
    }
    String::from_utf8(out).expect("utf-8 table")
}
