//! End-to-end runs: train with recording, verify the dual form, attribute,
//! aggregate agreement over seeds, and bundle reports.
//!
//! A run directory holds `run.cfg` (the effective configuration, single
//! seed), `model.ckpt`, one `<layer>.dualkv` trace per recorded layer,
//! `train_log.csv` and `summary.csv`. Analyses write next to them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    agreement_table, attention_profile, class_sums_weighted, default_context_radius, interference_cases, lm_attribution,
    seed_agreement, topk_csv, topk_per_class, value_norms, AgreementTable, ClassId, ClassKeySums, QuerySource,
};
use crate::config::{Mode, RunConfig};
use crate::dataio::{
    build_char_corpus, build_word_corpus, load_split, make_stream, ImageExample, ImageSets, Split, TaskId, TokenCorpus,
    IMAGE_DIM, TASK_FASHION, TASK_MNIST,
};
use crate::dual::{verify_duality, DualityReport, Probes};
use crate::error::{Error, Result};
use crate::nn::{accuracy, lstm_train, train_mlp, LmTrainConfig, LstmLmModel, MlpModel, ModelCheckpoint, CHECKPOINT_FILE};
use crate::recorder::{open_reader, open_writer, trace_file_size, trace_path, Dtype, KvMemory, TraceReader, TraceSink};
use crate::report::{bundle_report, render_class_bars, render_topk_strips, write_svg, ChartKind, ChartSpec, ManifestEntry};

pub const RUN_CONFIG_FILE: &str = "run.cfg";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const DUALITY_FILE: &str = "duality.csv";
pub const INTERFERENCE_FILE: &str = "interference.csv";

/// Output and weight-reconstruction tolerances used by `verify` for a dtype.
pub fn verify_tolerances(dtype: Dtype) -> (f64, f64) {
    match dtype {
        Dtype::F32 => (1e-3, 1e-4),
        Dtype::F16 => (5e-2, 5e-2),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Seed of the example stream for a run seed, kept apart from the weight-init seed.
pub fn stream_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

fn dir_for_task(cfg: &RunConfig, task: TaskId) -> Result<PathBuf> {
    match task {
        TASK_MNIST => Ok(cfg.mnist_path()),
        TASK_FASHION => Ok(cfg.fashion_path()),
        other => Err(Error::Config(format!("no dataset for task {other}"))),
    }
}

/// Loads one split of every task the configuration's schedule uses.
pub fn load_images(cfg: &RunConfig, split: Split) -> Result<ImageSets> {
    cfg.schedule
        .tasks()
        .into_iter()
        .map(|t| Ok((t, load_split(&dir_for_task(cfg, t)?, split, t)?)))
        .collect()
}

pub fn load_corpus(cfg: &RunConfig) -> Result<TokenCorpus> {
    let path = cfg
        .corpus_path()
        .ok_or_else(|| Error::Config("language-model mode needs `corpus`".into()))?;
    let corpus = match cfg.mode {
        Mode::LmWord => build_word_corpus(&path)?,
        _ => build_char_corpus(&path)?,
    };
    if cfg.mode == Mode::LmChar && cfg.expect_vocab != 0 && corpus.vocab_size() != cfg.expect_vocab {
        return Err(Error::Ingest {
            path,
            offset: 0,
            msg: format!(
                "character vocabulary has {} symbols, expected {} (set expect_vocab = 0 to accept any)",
                corpus.vocab_size(),
                cfg.expect_vocab
            ),
        });
    }
    Ok(corpus)
}

/// Total bytes the run's traces will occupy.
pub fn estimate_trace_bytes(cfg: &RunConfig) -> u64 {
    if cfg.mode.is_language_model() {
        let slots = (cfg.steps * cfg.batch_size * cfg.segment_len) as u64;
        trace_file_size(cfg.embed_dim + cfg.hidden_dim, 4 * cfg.hidden_dim, cfg.dtype, slots)
    } else {
        let slots = (cfg.schedule.total_steps() * cfg.batch_size) as u64;
        let mut dims = vec![IMAGE_DIM];
        dims.extend(&cfg.hidden_dims);
        dims.push(10);
        dims.windows(2).map(|w| trace_file_size(w[0], w[1], cfg.dtype, slots)).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Required for word-level language models, whose traces are very large.
    pub allow_large_trace: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub mode: Mode,
    pub seed: u64,
    pub slots: u64,
    pub metrics: BTreeMap<String, f64>,
}

impl RunSummary {
    fn to_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        let _ = writeln!(s, "slots,{}", self.slots);
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

/// Reads `summary.csv` of a finished run.
pub fn read_summary(run_dir: &Path) -> Result<BTreeMap<String, f64>> {
    let path = run_dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').ok_or_else(|| Error::Ingest {
                path: path.clone(),
                offset: 0,
                msg: format!("malformed summary line {l:?}"),
            })?;
            let v = v.parse().map_err(|_| Error::Ingest {
                path: path.clone(),
                offset: 0,
                msg: format!("malformed summary value {v:?}"),
            })?;
            Ok((k.to_string(), v))
        })
        .collect()
}

/// Trains one seed of `cfg`, recording every linear layer, and writes the
/// run directory. `log` receives human-readable progress lines.
pub fn train_run(cfg: &RunConfig, seed: u64, opts: TrainOptions, log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    cfg.validate()?;
    let bytes = estimate_trace_bytes(cfg);
    log(&format!(
        "{} seed {seed}: traces will take about {:.2} GB",
        cfg.mode,
        bytes as f64 / 1e9
    ));
    if cfg.mode == Mode::LmWord && !opts.allow_large_trace {
        return Err(Error::Config(format!(
            "word-level runs record about {:.1} GB of traces; pass --allow-large-trace to proceed",
            bytes as f64 / 1e9
        )));
    }
    let run_dir = cfg.run_dir(seed);
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let mut single = cfg.clone();
    single.seeds = vec![seed];
    write(&run_dir.join(RUN_CONFIG_FILE), &single.to_text())?;
    if cfg.mode.is_language_model() {
        train_lm(&single, seed, &run_dir, log)
    } else {
        train_images(&single, seed, &run_dir, log)
    }
}

fn train_images(cfg: &RunConfig, seed: u64, run_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    let train = load_images(cfg, Split::Train)?;
    let test = load_images(cfg, Split::Test)?;
    let mut dims = vec![IMAGE_DIM];
    dims.extend(&cfg.hidden_dims);
    dims.push(10);
    let mut model = MlpModel::new(&dims, seed)?;
    let mut writers = (0..dims.len() - 1)
        .map(|i| open_writer(&trace_path(run_dir, i as u8), i as u8, dims[i], dims[i + 1], cfg.dtype))
        .collect::<Result<Vec<_>>>()?;
    let stream = make_stream(&train, cfg.schedule.clone(), cfg.batch_size, stream_seed(seed))?;
    let total = cfg.schedule.total_steps();
    let tasks: Vec<TaskId> = test.keys().copied().collect();
    let mut csv = String::from("step,loss,batch_accuracy");
    for t in &tasks {
        let _ = write!(csv, ",test_accuracy_task{t}");
    }
    csv.push('\n');
    {
        let mut sinks: Vec<&mut dyn TraceSink> = writers.iter_mut().map(|w| w as &mut dyn TraceSink).collect();
        train_mlp(&mut model, &train, stream, cfg.lr, &mut sinks, |m, r| {
            let _ = write!(csv, "{},{:.6},{:.4}", r.step, r.mean_loss, r.batch_accuracy);
            let step = r.step as usize + 1;
            if (cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every)) || step == total {
                let mut line = format!("step {step}/{total} loss {:.4}", r.mean_loss);
                for (t, set) in &test {
                    let acc = accuracy(m, set)?;
                    let _ = write!(csv, ",{acc:.4}");
                    let _ = write!(line, " test[{t}] {acc:.4}");
                }
                log(&line);
            } else {
                csv.push_str(&",".repeat(tasks.len()));
            }
            csv.push('\n');
            Ok(())
        })?;
    }
    let mut slots = 0;
    for w in writers {
        slots = w.finalize()?.slots;
    }
    write(&run_dir.join(TRAIN_LOG_FILE), &csv)?;
    ModelCheckpoint::Mlp(model.clone()).save(&run_dir.join(CHECKPOINT_FILE))?;
    let mut metrics = BTreeMap::new();
    for (t, set) in &test {
        metrics.insert(format!("test_accuracy_task{t}"), accuracy(&model, set)?);
    }
    let summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        mode: cfg.mode,
        seed,
        slots,
        metrics,
    };
    write(&run_dir.join(SUMMARY_FILE), &summary.to_csv())?;
    Ok(summary)
}

fn train_lm(cfg: &RunConfig, seed: u64, run_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    let corpus = load_corpus(cfg)?;
    let (train, held_out) = corpus.split_tail(cfg.held_out_fraction);
    log(&format!(
        "corpus: {} tokens, vocabulary {}, {} held out",
        corpus.len(),
        corpus.vocab_size(),
        held_out.len()
    ));
    let mut model = LstmLmModel::new(corpus.vocab_size(), cfg.embed_dim, cfg.hidden_dim, seed)?;
    let mut writer = open_writer(
        &trace_path(run_dir, 0),
        0,
        model.grouped_input_dim(),
        4 * cfg.hidden_dim,
        cfg.dtype,
    )?;
    let eval = &held_out[..held_out.len().min(cfg.eval_tokens)];
    let lm_cfg = LmTrainConfig {
        lr: cfg.lr,
        clip_norm: cfg.clip_norm,
        batch_size: cfg.batch_size,
        segment_len: cfg.segment_len,
        steps: cfg.steps,
    };
    let mut csv = String::from("step,loss_bits,grad_norm,clip_scale,held_out_bits\n");
    let total = cfg.steps;
    lstm_train(&mut model, train, 0, &lm_cfg, Some(&mut writer), |m, r| {
        let bits = r.mean_loss / std::f64::consts::LN_2;
        let _ = write!(csv, "{},{bits:.5},{:.4},{:.4},", r.step, r.grad_norm, r.clip_scale);
        let step = r.step + 1;
        if eval.len() >= 2 && ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == total) {
            let held = m.bits_per_token(eval)?;
            let _ = write!(csv, "{held:.5}");
            log(&format!("step {step}/{total} train {bits:.4} bits/token, held-out {held:.4}"));
        } else if step % 10 == 0 {
            log(&format!("step {step}/{total} train {bits:.4} bits/token"));
        }
        csv.push('\n');
        Ok(())
    })?;
    let slots = writer.finalize()?.slots;
    write(&run_dir.join(TRAIN_LOG_FILE), &csv)?;
    let mut metrics = BTreeMap::from([
        ("vocab".to_string(), corpus.vocab_size() as f64),
        ("train_tokens".to_string(), train.len() as f64),
    ]);
    if eval.len() >= 2 {
        metrics.insert("held_out_bits_per_token".into(), model.bits_per_token(eval)?);
    }
    ModelCheckpoint::Lstm { model, seed }.save(&run_dir.join(CHECKPOINT_FILE))?;
    let summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        mode: cfg.mode,
        seed,
        slots,
        metrics,
    };
    write(&run_dir.join(SUMMARY_FILE), &summary.to_csv())?;
    Ok(summary)
}

/// A finished run opened for analysis.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub seed: u64,
    pub checkpoint: ModelCheckpoint,
    pub traces: Vec<TraceReader>,
}

impl Run {
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "run directory does not exist"),
            ));
        }
        let config = RunConfig::load(&dir.join(RUN_CONFIG_FILE))?;
        let checkpoint = ModelCheckpoint::load(&dir.join(CHECKPOINT_FILE))?;
        let n = checkpoint.recorded_layers().len();
        let traces = (0..n)
            .map(|i| open_reader(&trace_path(dir, i as u8)))
            .collect::<Result<Vec<_>>>()?;
        for (i, (t, (w0, _))) in traces.iter().zip(checkpoint.recorded_layers()).enumerate() {
            if t.d_in() != w0.cols() || t.d_out() != w0.rows() {
                return Err(Error::contract(format!("trace {i} does not match the checkpoint's layer shape")));
            }
        }
        Ok(Run {
            dir: dir.to_path_buf(),
            seed: config.seeds[0],
            config,
            checkpoint,
            traces,
        })
    }

    pub fn memories(&self) -> Vec<&dyn KvMemory> {
        self.traces.iter().map(|t| t as &dyn KvMemory).collect()
    }

    pub fn mlp(&self) -> Result<&MlpModel> {
        match &self.checkpoint {
            ModelCheckpoint::Mlp(m) => Ok(m),
            _ => Err(Error::contract("this run holds a language model, not an image classifier")),
        }
    }

    pub fn lm(&self) -> Result<&LstmLmModel> {
        match &self.checkpoint {
            ModelCheckpoint::Lstm { model, .. } => Ok(model),
            _ => Err(Error::contract("this run holds an image classifier, not a language model")),
        }
    }
}

/// Picks `n` verification probes deterministically from the run's held-out data.
pub fn select_probes(run: &Run, n: usize, seed: u64) -> Result<Probes> {
    if n == 0 {
        return Err(Error::contract("need at least one probe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if run.config.mode.is_language_model() {
        let corpus = load_corpus(&run.config)?;
        let (_, held) = corpus.split_tail(run.config.held_out_fraction);
        let src = if held.len() >= 8 { held } else { &corpus.tokens[..] };
        const LEN: usize = 8;
        let windows = n.div_ceil(LEN).max(1);
        let span = src.len().saturating_sub(LEN).max(1);
        let seqs = (0..windows)
            .map(|_| {
                let start = rand::Rng::gen_range(&mut rng, 0..span);
                src[start..(start + LEN).min(src.len())].to_vec()
            })
            .collect();
        Ok(Probes::Tokens(seqs))
    } else {
        let test = load_images(&run.config, Split::Test)?;
        let all: Vec<&ImageExample> = test.values().flatten().collect();
        let picks = sample(&mut rng, all.len(), n.min(all.len()));
        Ok(Probes::Images(picks.iter().map(|i| all[i].pixels.clone()).collect()))
    }
}

/// Checks the dual form of every layer against `probes` held-out inputs,
/// writes `duality.csv` and fails with a verification error when a layer is
/// outside the tolerances for the run's trace dtype.
pub fn verify_run(run_dir: &Path, probes: usize, seed: u64) -> Result<DualityReport> {
    let run = Run::open(run_dir)?;
    let probes = select_probes(&run, probes, seed)?;
    let report = verify_duality(&run.checkpoint, &run.memories(), &probes)?;
    report.write_csv(&run_dir.join(DUALITY_FILE))?;
    let (out_tol, w_tol) = verify_tolerances(run.config.dtype);
    report.check(out_tol, w_tol)?;
    Ok(report)
}

/// What to attribute.
#[derive(Clone, Debug, PartialEq)]
pub enum AttributeInput {
    /// Pixels in `[0, 1]`, with the true label if known.
    Image { pixels: Vec<f32>, label: Option<u8> },
    /// An example of a run task's test split.
    TestSample { task: TaskId, index: usize },
    Prompt(String),
}

/// Reads an image from a file: either exactly 784 raw bytes, or text with
/// 784 numbers in `[0, 1]` separated by commas or whitespace.
pub fn read_image_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ingest = |offset: u64, msg: String| Error::Ingest {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    // 784 numbers as text need more than 784 bytes, so the size alone decides
    if bytes.len() == IMAGE_DIM {
        return Ok(bytes.iter().map(|&b| f32::from(b) / 255.0).collect());
    }
    let text = std::str::from_utf8(&bytes).map_err(|e| ingest(e.valid_up_to() as u64, "not UTF-8 text".into()))?;
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f32>().map_err(|_| ingest(0, format!("not a number: {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != IMAGE_DIM {
        return Err(ingest(0, format!("expected {IMAGE_DIM} pixel values, found {}", values.len())));
    }
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(ingest(0, "pixel values must lie in [0, 1]".into()));
    }
    Ok(values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageAttribution {
    pub prediction: usize,
    pub label: Option<u8>,
    /// Argmax (task, class) of the per-class totals, per layer.
    pub argmax: Vec<ClassId>,
    pub weighted_argmax: Option<Vec<ClassId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Attribution {
    Image(ImageAttribution),
    Text(Vec<crate::analysis::ContextHit>),
}

/// Scores an input against every layer's memory and writes top-k and
/// per-class CSV/SVG files (images) or ranked context windows (text) into
/// `out_dir`.
pub fn attribute_run(run_dir: &Path, input: &AttributeInput, k: usize, weight_by_value_norm: bool, out_dir: &Path) -> Result<Attribution> {
    let run = Run::open(run_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match input {
        AttributeInput::Prompt(text) => {
            let model = run.lm()?;
            let corpus = load_corpus(&run.config)?;
            let prompt = corpus.encode(text)?;
            let radius = default_context_radius(&corpus);
            let hits = lm_attribution(model, &run.traces[0], &corpus, &prompt, k, radius)?;
            let mut csv = String::from("rank,position,score,window\n");
            let mut txt = format!("query: {text:?}\n\n");
            for (i, h) in hits.iter().enumerate() {
                let _ = writeln!(csv, "{i},{},{:e},\"{}\"", h.position, h.score, h.window.replace('"', "\"\"").replace('\n', "\\n"));
                let _ = writeln!(txt, "#{} position {} score {:.4e}\n  {}\n", i + 1, h.position, h.score, h.window.replace('\n', " "));
            }
            write(&out_dir.join("lm_contexts.csv"), &csv)?;
            write(&out_dir.join("lm_contexts.txt"), &txt)?;
            Ok(Attribution::Text(hits))
        }
        _ => {
            let model = run.mlp()?;
            let (pixels, label, source) = match input {
                AttributeInput::Image { pixels, label } => (pixels.clone(), *label, QuerySource::Unspecified),
                AttributeInput::TestSample { task, index } => {
                    let dir = dir_for_task(&run.config, *task)?;
                    let test = load_split(&dir, Split::Test, *task)?;
                    let ex = test
                        .get(*index)
                        .ok_or_else(|| Error::contract(format!("test index {index} out of range ({})", test.len())))?;
                    (
                        ex.pixels.clone(),
                        Some(ex.label),
                        QuerySource::Sample {
                            task: *task,
                            sample_id: ex.sample_id,
                        },
                    )
                }
                AttributeInput::Prompt(_) => unreachable!(),
            };
            let fwd = model.forward(&pixels)?;
            let prediction = fwd.prediction();
            let mut argmax = Vec::new();
            let mut weighted = Vec::new();
            let mut summary = format!("prediction {prediction}, label {label:?}\n");
            for (layer, trace) in run.traces.iter().enumerate() {
                let mut profile = attention_profile(trace, &fwd.inputs[layer])?;
                profile.source = source.clone();
                let metas = trace.metas()?;
                let topk = topk_per_class(&profile, &metas, k)?;
                write(&out_dir.join(format!("layer{layer}_topk.csv")), &topk_csv(&topk, &metas))?;
                let title = format!("layer {layer}: top-{k} attention scores per class");
                write_svg(
                    &out_dir.join(format!("layer{layer}_topk.svg")),
                    &render_topk_strips(&topk, &ChartSpec::new(ChartKind::TopkStrips, title))?,
                )?;
                let agg = class_sums_weighted(&profile, &metas, layer, None)?;
                write(&out_dir.join(format!("layer{layer}_class_sums.csv")), &agg.to_csv())?;
                let title = format!("layer {layer}: total attention per class");
                write_svg(
                    &out_dir.join(format!("layer{layer}_class_bars.svg")),
                    &render_class_bars(&agg, &ChartSpec::new(ChartKind::ClassBars, title))?,
                )?;
                let best = agg.argmax().ok_or_else(|| Error::contract("empty memory"))?;
                let _ = writeln!(summary, "layer {layer}: argmax class {}:{}", best.0, best.1);
                argmax.push(best);
                if weight_by_value_norm {
                    let norms = value_norms(trace)?;
                    let wagg = class_sums_weighted(&profile, &metas, layer, Some(&norms))?;
                    write(&out_dir.join(format!("layer{layer}_class_sums_weighted.csv")), &wagg.to_csv())?;
                    let title = format!("layer {layer}: value-norm weighted attention per class");
                    write_svg(
                        &out_dir.join(format!("layer{layer}_class_bars_weighted.svg")),
                        &render_class_bars(&wagg, &ChartSpec::new(ChartKind::ClassBars, title))?,
                    )?;
                    let wbest = wagg.argmax().ok_or_else(|| Error::contract("empty memory"))?;
                    let _ = writeln!(summary, "layer {layer}: weighted argmax class {}:{}", wbest.0, wbest.1);
                    weighted.push(wbest);
                }
            }
            write(&out_dir.join("attribution.txt"), &summary)?;
            Ok(Attribution::Image(ImageAttribution {
                prediction,
                label,
                argmax,
                weighted_argmax: weight_by_value_norm.then_some(weighted),
            }))
        }
    }
}

fn key_sums(run: &Run, weight_by_value_norm: bool) -> Result<Vec<ClassKeySums>> {
    run.traces
        .iter()
        .map(|t| {
            let norms = if weight_by_value_norm { Some(value_norms(t)?) } else { None };
            ClassKeySums::build(t, norms.as_deref())
        })
        .collect()
}

/// Agreement of per-class attention argmax with targets and model outputs,
/// over the test split of each run; writes `table1.csv` and `table1.txt`.
pub fn table1(run_dirs: &[PathBuf], weight_by_value_norm: bool, out_dir: &Path) -> Result<AgreementTable> {
    if run_dirs.len() < 2 {
        return Err(Error::contract("the agreement table needs runs of at least two seeds"));
    }
    let mut counts = Vec::with_capacity(run_dirs.len());
    let mut mode = None;
    for dir in run_dirs {
        let run = Run::open(dir)?;
        if run.config.mode.is_language_model() {
            return Err(Error::contract("the agreement table applies to image classifiers only"));
        }
        if *mode.get_or_insert(run.config.mode) != run.config.mode {
            return Err(Error::contract("runs of different modes cannot share one table"));
        }
        let test: Vec<ImageExample> = load_images(&run.config, Split::Test)?.into_values().flatten().collect();
        counts.push(seed_agreement(run.mlp()?, &key_sums(&run, weight_by_value_norm)?, &test)?);
    }
    let table = agreement_table(&counts)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join("table1.csv"), &table.to_csv())?;
    write(&out_dir.join("table1.txt"), &table.to_text())?;
    Ok(table)
}

/// MNIST test misclassifications whose attention at the last layer peaks at
/// a Fashion-MNIST class, written to `interference.csv`.
pub fn interference_report(run: &Run) -> Result<Vec<crate::analysis::InterferenceCase>> {
    let model = run.mlp()?;
    let last = run.traces.len() - 1;
    let ks = ClassKeySums::build(&run.traces[last], None)?;
    let test = load_split(&run.config.mnist_path(), Split::Test, TASK_MNIST)?;
    let cases = interference_cases(model, &ks, last, &test)?;
    let mut csv = String::from("sample_id,label,prediction,argmax_task,argmax_class,argmax_total\n");
    for c in &cases {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:e}",
            c.sample_id, c.label, c.prediction, c.argmax.0, c.argmax.1, c.aggregate.totals[&c.argmax]
        );
    }
    write(&run.dir.join(INTERFERENCE_FILE), &csv)?;
    Ok(cases)
}

/// Adds run-level analyses (the cross-task interference list for runs that
/// saw both image tasks) and writes a checksummed manifest of the directory.
pub fn report_run(run_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let run = Run::open(run_dir)?;
    if !run.config.mode.is_language_model() && run.config.schedule.tasks().len() > 1 {
        interference_report(&run)?;
    }
    bundle_report(run_dir)
}
