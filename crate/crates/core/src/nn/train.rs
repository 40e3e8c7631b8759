//! The recording MLP training loop.

use crate::dataio::{ImageExample, ImageSets, TrainingStream};
use crate::error::{Error, Result};
use crate::recorder::{SlotMeta, TraceSink};

use super::mlp::MlpModel;

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u32,
    pub mean_loss: f64,
    /// Fraction of the batch the model classified correctly before the update.
    pub batch_accuracy: f64,
}

/// Runs every batch of `stream` through one SGD step at learning rate `lr`.
///
/// When `sinks` is non-empty it must hold one sink per linear layer; every
/// example of every step then appends one slot to each, in step order and
/// batch order, before the step's update is applied.
pub fn train_mlp(
    model: &mut MlpModel,
    data: &ImageSets,
    stream: TrainingStream,
    lr: f32,
    sinks: &mut [&mut dyn TraceSink],
    mut on_step: impl FnMut(&MlpModel, &StepReport) -> Result<()>,
) -> Result<()> {
    let n_layers = model.layers().len();
    if !sinks.is_empty() && sinks.len() != n_layers {
        return Err(Error::contract(format!("{} trace sinks for {n_layers} layers", sinks.len())));
    }
    for batch in stream {
        let examples: Vec<&ImageExample> = batch
            .examples
            .iter()
            .map(|r| {
                data.get(&r.task)
                    .and_then(|set| set.get(r.index as usize))
                    .ok_or_else(|| Error::contract(format!("stream refers to missing example {:?}", r)))
            })
            .collect::<Result<_>>()?;
        let inputs: Vec<&[f32]> = examples.iter().map(|e| e.pixels.as_slice()).collect();
        let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
        let trace = model.batch_trace(&inputs, &labels, lr)?;
        for (layer, sink) in sinks.iter_mut().enumerate() {
            for (b, ex) in examples.iter().enumerate() {
                let meta = SlotMeta {
                    step: batch.step,
                    index_in_batch: b as u16,
                    task: ex.task,
                    class_or_reserved: ex.label,
                    sample_or_position: u64::from(ex.sample_id),
                };
                sink.append(&meta, &trace.keys[layer][b], &trace.values[layer][b])?;
            }
        }
        model.apply_batch(&trace)?;
        let correct = trace
            .predictions
            .iter()
            .zip(&labels)
            .filter(|(p, l)| **p == usize::from(**l))
            .count();
        let report = StepReport {
            step: batch.step,
            mean_loss: trace.losses.iter().sum::<f64>() / trace.losses.len() as f64,
            batch_accuracy: correct as f64 / labels.len() as f64,
        };
        on_step(model, &report)?;
    }
    Ok(())
}

/// Fraction of `examples` the model classifies correctly.
pub fn accuracy(model: &MlpModel, examples: &[ImageExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("cannot measure accuracy on an empty set"));
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(256) {
        let inputs: Vec<&[f32]> = chunk.iter().map(|e| e.pixels.as_slice()).collect();
        let preds = model.predict_batch(&inputs)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(p, e)| **p == usize::from(e.label))
            .count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{make_stream, Schedule};
    use crate::linalg::add_outer_products;
    use crate::recorder::{InMemoryTrace, KvMemory};
    use std::collections::BTreeMap;

    fn toy_data() -> ImageSets {
        let examples = (0..6u32)
            .map(|i| ImageExample {
                pixels: vec![(i % 3) as f32 / 2.0, 1.0 - (i % 2) as f32],
                label: (i % 2) as u8,
                task: 0,
                sample_id: i,
            })
            .collect();
        BTreeMap::from([(0, examples)])
    }

    #[test]
    fn zero_steps_leave_weights_and_traces_empty() {
        let data = toy_data();
        let mut m = MlpModel::new(&[2, 3, 2], 4).unwrap();
        let stream = make_stream(&data, Schedule::single(0, 0), 2, 0).unwrap();
        let mut t0 = InMemoryTrace::new(0, 2, 3);
        let mut t1 = InMemoryTrace::new(1, 3, 2);
        train_mlp(&mut m, &data, stream, 0.1, &mut [&mut t0, &mut t1], |_, _| Ok(())).unwrap();
        assert_eq!(m.layers(), m.init_layers());
        assert!(t0.is_empty() && t1.is_empty());
    }

    #[test]
    fn replayed_trace_equals_trained_weights() {
        let data = toy_data();
        let mut m = MlpModel::new(&[2, 3, 2], 4).unwrap();
        let stream = make_stream(&data, Schedule::single(0, 7), 3, 1).unwrap();
        let mut t0 = InMemoryTrace::new(0, 2, 3);
        let mut t1 = InMemoryTrace::new(1, 3, 2);
        let mut steps = 0;
        train_mlp(&mut m, &data, stream, 0.3, &mut [&mut t0, &mut t1], |_, _| {
            steps += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(steps, 7);
        for (layer, trace) in [&t0, &t1].into_iter().enumerate() {
            assert_eq!(trace.len(), 21);
            let mut w = m.init_layers()[layer].clone();
            for s in 0..7 {
                let pairs: Vec<(&[f32], &[f32])> = (3 * s..3 * s + 3).map(|t| (trace.value(t), trace.key(t))).collect();
                add_outer_products(&mut w, &pairs).unwrap();
            }
            assert_eq!(&w, &m.layers()[layer]);
        }
        let metas = t0.metas().unwrap();
        assert!(metas.windows(2).all(|w| w[0].step <= w[1].step));
        assert!(metas.iter().all(|mt| u32::from(mt.class_or_reserved) == mt.sample_or_position as u32 % 2));
    }

    #[test]
    fn sink_count_must_match() {
        let data = toy_data();
        let mut m = MlpModel::new(&[2, 3, 2], 4).unwrap();
        let stream = make_stream(&data, Schedule::single(0, 1), 1, 0).unwrap();
        let mut t0 = InMemoryTrace::new(0, 2, 3);
        assert!(train_mlp(&mut m, &data, stream, 0.1, &mut [&mut t0], |_, _| Ok(())).is_err());
    }
}
