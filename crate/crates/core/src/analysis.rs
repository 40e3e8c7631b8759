//! Attribution analyses over recorded memories.
//!
//! For a query `q` at some layer, every training slot gets the attention
//! weight `αₜ = kₜᵀ q`. The views here aggregate those weights: top-k slots
//! per class, per-class totals, agreement of the class argmax with the label
//! and the model output across a test set, and, for language models, totals
//! per training-corpus position.
//!
//! Per-class totals use `|αₜ|` at the input layer (layer 0) and `αₜ`
//! elsewhere.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::dataio::{ImageExample, TaskId, TokenCorpus};
use crate::dual::sorted_magnitude_sum;
use crate::error::{ensure_dims, Error, Result};
use crate::linalg::{axpy_f32, dot_f32, dot_f32_f64};
use crate::nn::{LstmLmModel, MlpModel};
use crate::recorder::{KvMemory, SlotMeta};

/// Where a query came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QuerySource {
    Sample { task: TaskId, sample_id: u32 },
    Prompt { text: String },
    Unspecified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProfile {
    pub layer_id: u8,
    pub source: QuerySource,
    /// `αₜ` for every slot, in slot order.
    pub scores: Vec<f64>,
}

/// Scores every slot of `memory` against `query` in one streaming pass.
pub fn attention_profile(memory: &dyn KvMemory, query: &[f32]) -> Result<AttentionProfile> {
    Ok(attention_profiles(memory, &[query])?.pop().expect("one query"))
}

/// Profiles for several queries from a single pass over the memory.
pub fn attention_profiles(memory: &dyn KvMemory, queries: &[&[f32]]) -> Result<Vec<AttentionProfile>> {
    for q in queries {
        ensure_dims("query", memory.d_in(), q.len())?;
    }
    let mut scores = vec![Vec::with_capacity(memory.len()); queries.len()];
    memory.scan(&mut |_, _, key, _| {
        for (q, s) in queries.iter().zip(scores.iter_mut()) {
            s.push(dot_f32(key, q));
        }
        Ok(())
    })?;
    Ok(scores
        .into_iter()
        .map(|scores| AttentionProfile {
            layer_id: memory.layer_id(),
            source: QuerySource::Unspecified,
            scores,
        })
        .collect())
}

/// True when every key entry is non-negative.
pub fn keys_nonnegative(memory: &dyn KvMemory) -> Result<bool> {
    let mut ok = true;
    memory.scan(&mut |_, _, key, _| {
        ok &= key.iter().all(|&v| v >= 0.0);
        Ok(())
    })?;
    Ok(ok)
}

/// `‖vₜ‖₂` for every slot.
pub fn value_norms(memory: &dyn KvMemory) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(memory.len());
    memory.scan(&mut |_, _, _, value| {
        out.push(dot_f32(value, value).sqrt());
        Ok(())
    })?;
    Ok(out)
}

/// A (task, class) pair; classes of different tasks are distinct.
pub type ClassId = (TaskId, u8);

fn class_of(meta: &SlotMeta) -> ClassId {
    (meta.task, meta.class_or_reserved)
}

fn check_aligned(profile: &AttentionProfile, metas: &[SlotMeta]) -> Result<()> {
    if profile.scores.len() != metas.len() {
        return Err(Error::contract(format!(
            "profile has {} scores but memory has {} slots",
            profile.scores.len(),
            metas.len()
        )));
    }
    Ok(())
}

/// Highest `k` slots of every class, descending; ties go to the lower slot.
pub fn topk_per_class(profile: &AttentionProfile, metas: &[SlotMeta], k: usize) -> Result<BTreeMap<ClassId, Vec<(usize, f64)>>> {
    check_aligned(profile, metas)?;
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    let mut by_class: BTreeMap<ClassId, Vec<(usize, f64)>> = BTreeMap::new();
    for (t, (meta, &s)) in metas.iter().zip(&profile.scores).enumerate() {
        by_class.entry(class_of(meta)).or_default().push((t, s));
    }
    for list in by_class.values_mut() {
        let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if list.len() > k {
            list.select_nth_unstable_by(k - 1, cmp);
            list.truncate(k);
        }
        list.sort_unstable_by(cmp);
    }
    Ok(by_class)
}

/// Per-class attention totals for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAggregate {
    pub totals: BTreeMap<ClassId, f64>,
}

impl ClassAggregate {
    /// Class with the largest total; the lowest (task, class) wins ties.
    pub fn argmax(&self) -> Option<ClassId> {
        let mut best: Option<(ClassId, f64)> = None;
        for (&c, &v) in &self.totals {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        best.map(|(c, _)| c)
    }

    pub fn total(&self) -> f64 {
        self.totals.values().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,class,total\n");
        for ((task, class), total) in &self.totals {
            let _ = writeln!(s, "{task},{class},{total:e}");
        }
        s
    }
}

/// Whether layer `layer_index` sums absolute scores.
pub fn uses_abs_rule(layer_index: usize) -> bool {
    layer_index == 0
}

/// Per-class totals of one profile, each summed in sorted-magnitude order so
/// the result does not depend on slot order.
pub fn class_sums(profile: &AttentionProfile, metas: &[SlotMeta], layer_index: usize) -> Result<ClassAggregate> {
    class_sums_weighted(profile, metas, layer_index, None)
}

/// As [`class_sums`], with each slot's contribution multiplied by `weights[t]`
/// (for instance the norm of its value vector).
pub fn class_sums_weighted(
    profile: &AttentionProfile,
    metas: &[SlotMeta],
    layer_index: usize,
    weights: Option<&[f64]>,
) -> Result<ClassAggregate> {
    check_aligned(profile, metas)?;
    if let Some(w) = weights {
        ensure_dims("slot weights", metas.len(), w.len())?;
    }
    let abs = uses_abs_rule(layer_index);
    let mut terms: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
    for (t, (meta, &s)) in metas.iter().zip(&profile.scores).enumerate() {
        let mut v = if abs { s.abs() } else { s };
        if let Some(w) = weights {
            v *= w[t];
        }
        terms.entry(class_of(meta)).or_default().push(v);
    }
    Ok(ClassAggregate {
        totals: terms
            .into_iter()
            .map(|(c, mut v)| (c, sorted_magnitude_sum(&mut v)))
            .collect(),
    })
}

/// Per-class sums of keys, `K_c = Σ_{t ∈ c} wₜ kₜ`.
///
/// Since `Σ_{t ∈ c} wₜ (kₜᵀ q) = K_cᵀ q`, class totals for any query follow
/// from one pass over the memory plus one dot product per class. Under the
/// absolute-value rule this holds only when every score is non-negative,
/// which is guaranteed when keys, query and weights are all non-negative;
/// [`ClassKeySums::class_sums`] refuses otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassKeySums {
    pub layer_id: u8,
    pub classes: Vec<ClassId>,
    pub sums: Vec<Vec<f64>>,
    pub keys_nonnegative: bool,
    weighted: bool,
}

impl ClassKeySums {
    pub fn build(memory: &dyn KvMemory, weights: Option<&[f64]>) -> Result<Self> {
        if let Some(w) = weights {
            ensure_dims("slot weights", memory.len(), w.len())?;
            if w.iter().any(|&x| x < 0.0) {
                return Err(Error::contract("slot weights must be non-negative"));
            }
        }
        let d_in = memory.d_in();
        let mut index: BTreeMap<ClassId, usize> = BTreeMap::new();
        let mut sums: Vec<Vec<f64>> = Vec::new();
        let mut nonneg = true;
        memory.scan(&mut |t, meta, key, _| {
            let next = sums.len();
            let slot = *index.entry(class_of(meta)).or_insert(next);
            if slot == sums.len() {
                sums.push(vec![0.0; d_in]);
            }
            nonneg &= key.iter().all(|&v| v >= 0.0);
            axpy_f32(&mut sums[slot], weights.map_or(1.0, |w| w[t]), key);
            Ok(())
        })?;
        let order: Vec<(ClassId, usize)> = index.into_iter().collect();
        let mut taken: Vec<Option<Vec<f64>>> = sums.into_iter().map(Some).collect();
        Ok(ClassKeySums {
            layer_id: memory.layer_id(),
            classes: order.iter().map(|(c, _)| *c).collect(),
            sums: order.iter().map(|(_, i)| taken[*i].take().expect("each class once")).collect(),
            keys_nonnegative: nonneg,
            weighted: weights.is_some(),
        })
    }

    pub fn is_weighted(&self) -> bool {
        self.weighted
    }

    pub fn class_sums(&self, query: &[f32], layer_index: usize) -> Result<ClassAggregate> {
        if let Some(first) = self.sums.first() {
            ensure_dims("query", first.len(), query.len())?;
        }
        if uses_abs_rule(layer_index) && !(self.keys_nonnegative && query.iter().all(|&v| v >= 0.0)) {
            return Err(Error::contract(
                "class key sums cannot apply the absolute-value rule to possibly negative scores",
            ));
        }
        Ok(ClassAggregate {
            totals: self
                .classes
                .iter()
                .zip(&self.sums)
                .map(|(&c, k)| (c, dot_f32_f64(query, k)))
                .collect(),
        })
    }
}

/// Agreement counts for one run, per layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCounts {
    pub correct: usize,
    pub correct_target: usize,
    pub correct_output: usize,
    pub wrong: usize,
    pub wrong_target: usize,
    pub wrong_output: usize,
}

impl LayerCounts {
    fn frac(n: usize, d: usize) -> f64 {
        if d == 0 {
            0.0
        } else {
            n as f64 / d as f64
        }
    }

    pub fn fractions(&self) -> [f64; 4] {
        [
            Self::frac(self.correct_target, self.correct),
            Self::frac(self.correct_output, self.correct),
            Self::frac(self.wrong_target, self.wrong),
            Self::frac(self.wrong_output, self.wrong),
        ]
    }
}

/// Runs the test set through the model and, per layer, compares the argmax
/// class of the per-class totals with the true label (matching task and
/// class) and with the model's output class.
pub fn seed_agreement(model: &MlpModel, key_sums: &[ClassKeySums], test: &[ImageExample]) -> Result<Vec<LayerCounts>> {
    if key_sums.len() != model.layers().len() {
        return Err(Error::contract(format!(
            "{} class key sums for {} layers",
            key_sums.len(),
            model.layers().len()
        )));
    }
    let mut counts = vec![LayerCounts::default(); key_sums.len()];
    for ex in test {
        let fwd = model.forward(&ex.pixels)?;
        let pred = fwd.prediction();
        let correct = pred == usize::from(ex.label);
        for (layer, ks) in key_sums.iter().enumerate() {
            let agg = ks.class_sums(&fwd.inputs[layer], layer)?;
            let (task, class) = agg.argmax().ok_or_else(|| Error::contract("empty memory"))?;
            let hits_target = task == ex.task && class == ex.label;
            let hits_output = usize::from(class) == pred;
            let c = &mut counts[layer];
            if correct {
                c.correct += 1;
                c.correct_target += usize::from(hits_target);
                c.correct_output += usize::from(hits_output);
            } else {
                c.wrong += 1;
                c.wrong_target += usize::from(hits_target);
                c.wrong_output += usize::from(hits_output);
            }
        }
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementLayer {
    pub correct_target: Stat,
    pub correct_output: Stat,
    pub wrong_target: Stat,
    pub wrong_output: Stat,
}

/// Agreement fractions per layer, mean and spread over runs.
#[derive(Clone, Debug, PartialEq)]
pub struct AgreementTable {
    pub runs: usize,
    pub layers: Vec<AgreementLayer>,
}

pub fn agreement_table(runs: &[Vec<LayerCounts>]) -> Result<AgreementTable> {
    let first = runs.first().ok_or_else(|| Error::contract("agreement table needs at least one run"))?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::contract("runs disagree on the number of layers"));
    }
    let layers = (0..first.len())
        .map(|l| {
            let col = |i: usize| Stat::of(&runs.iter().map(|r| r[l].fractions()[i]).collect::<Vec<_>>());
            AgreementLayer {
                correct_target: col(0),
                correct_output: col(1),
                wrong_target: col(2),
                wrong_output: col(3),
            }
        })
        .collect();
    Ok(AgreementTable { runs: runs.len(), layers })
}

impl AgreementTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,bucket,target_pct,target_std,output_pct,output_std,runs\n");
        for (l, row) in self.layers.iter().enumerate() {
            for (bucket, t, o) in [
                ("correct", row.correct_target, row.correct_output),
                ("wrong", row.wrong_target, row.wrong_output),
            ] {
                let _ = writeln!(
                    s,
                    "{l},{bucket},{:.2},{:.2},{:.2},{:.2},{}",
                    100.0 * t.mean,
                    100.0 * t.std,
                    100.0 * o.mean,
                    100.0 * o.std,
                    self.runs
                );
            }
        }
        s
    }

    /// Plain-text rendering in the usual Target/Output layout.
    pub fn to_text(&self) -> String {
        let mut s = String::from("layer | correct: Target    Output   | wrong: Target     Output\n");
        for (l, r) in self.layers.iter().enumerate() {
            let f = |x: Stat| format!("{:5.1} ± {:3.1}", 100.0 * x.mean, 100.0 * x.std);
            let _ = writeln!(
                s,
                "{l:5} | {} {} | {} {}",
                f(r.correct_target),
                f(r.correct_output),
                f(r.wrong_target),
                f(r.wrong_output)
            );
        }
        s
    }
}

/// A misclassified example whose attention mass points at another task.
#[derive(Clone, Debug, PartialEq)]
pub struct InterferenceCase {
    pub sample_id: u32,
    pub label: u8,
    pub prediction: usize,
    pub argmax: ClassId,
    pub aggregate: ClassAggregate,
}

/// Misclassified examples of `test` whose per-class totals at `layer` peak
/// at a class of a different task.
pub fn interference_cases(model: &MlpModel, key_sums: &ClassKeySums, layer: usize, test: &[ImageExample]) -> Result<Vec<InterferenceCase>> {
    let mut out = Vec::new();
    for ex in test {
        let fwd = model.forward(&ex.pixels)?;
        let pred = fwd.prediction();
        if pred == usize::from(ex.label) {
            continue;
        }
        let agg = key_sums.class_sums(&fwd.inputs[layer], layer)?;
        if let Some(argmax) = agg.argmax() {
            if argmax.0 != ex.task {
                out.push(InterferenceCase {
                    sample_id: ex.sample_id,
                    label: ex.label,
                    prediction: pred,
                    argmax,
                    aggregate: agg,
                });
            }
        }
    }
    Ok(out)
}

/// Sums scores per training-corpus position; descending by total, ties by
/// lower position.
pub fn token_position_aggregate(profile: &AttentionProfile, metas: &[SlotMeta]) -> Result<Vec<(u64, f64)>> {
    check_aligned(profile, metas)?;
    let mut totals: HashMap<u64, Vec<f64>> = HashMap::new();
    for (meta, &s) in metas.iter().zip(&profile.scores) {
        if !meta.is_language_model() {
            return Err(Error::contract("token-position aggregation needs a language-model trace"));
        }
        totals.entry(meta.sample_or_position).or_default().push(s);
    }
    let mut out: Vec<(u64, f64)> = totals
        .into_iter()
        .map(|(p, mut v)| (p, sorted_magnitude_sum(&mut v)))
        .collect();
    out.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

pub const CENTER_OPEN: &str = "[[";
pub const CENTER_CLOSE: &str = "]]";

/// Detokenized `[position − radius, position + radius]`, clipped to the
/// corpus, with the center token wrapped in `[[…]]`.
pub fn context_window(corpus: &TokenCorpus, position: usize, radius: usize) -> Result<String> {
    if position >= corpus.len() {
        return Err(Error::contract(format!(
            "position {position} outside corpus of {} tokens",
            corpus.len()
        )));
    }
    let lo = position.saturating_sub(radius);
    let hi = (position + radius + 1).min(corpus.len());
    let left = corpus.detokenize(&corpus.tokens[lo..position]);
    let center = corpus.detokenize(&corpus.tokens[position..position + 1]);
    let right = corpus.detokenize(&corpus.tokens[position + 1..hi]);
    let sep = match corpus.level {
        crate::dataio::Level::Character => "",
        crate::dataio::Level::Word => " ",
    };
    let mut s = left;
    if !s.is_empty() {
        s.push_str(sep);
    }
    s.push_str(CENTER_OPEN);
    s.push_str(&center);
    s.push_str(CENTER_CLOSE);
    if !right.is_empty() {
        s.push_str(sep);
        s.push_str(&right);
    }
    Ok(s)
}

pub fn default_context_radius(corpus: &TokenCorpus) -> usize {
    match corpus.level {
        crate::dataio::Level::Character => 60,
        crate::dataio::Level::Word => 12,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextHit {
    pub position: u64,
    pub score: f64,
    pub window: String,
}

/// Ranks training positions by their total attention from the query of
/// `prompt` and returns the top `k` with their context windows. `corpus`
/// must hold the tokens the positions refer to.
pub fn lm_attribution(
    model: &LstmLmModel,
    memory: &dyn KvMemory,
    corpus: &TokenCorpus,
    prompt: &[u32],
    k: usize,
    radius: usize,
) -> Result<Vec<ContextHit>> {
    let query = model.query_for_prompt(prompt)?;
    let profile = attention_profile(memory, &query)?;
    let metas = memory.metas()?;
    token_position_aggregate(&profile, &metas)?
        .into_iter()
        .take(k)
        .map(|(position, score)| {
            Ok(ContextHit {
                position,
                score,
                window: context_window(corpus, position as usize, radius)?,
            })
        })
        .collect()
}

/// CSV of top-k rows: `task,class,rank,slot,step,sample_id,score`.
pub fn topk_csv(topk: &BTreeMap<ClassId, Vec<(usize, f64)>>, metas: &[SlotMeta]) -> String {
    let mut s = String::from("task,class,rank,slot,step,sample_id,score\n");
    for ((task, class), list) in topk {
        for (rank, &(slot, score)) in list.iter().enumerate() {
            let m = &metas[slot];
            let _ = writeln!(s, "{task},{class},{rank},{slot},{},{},{score:e}", m.step, m.sample_or_position);
        }
    }
    s
}
