//! Source-model training with validation-based stopping.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::decoding::{greedy_decode, DecodeOptions};
use crate::error::{Error, Result};
use crate::harness::config::TrainSettings;
use crate::metrics::ter;
use crate::model::{backward_and_step, Model, OptimState};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    /// Optimizer updates applied so far.
    pub steps: u64,
    pub train_loss: f64,
    pub valid_ter: f64,
}

#[derive(Debug, Clone)]
pub struct SourceRun {
    pub model: Model,
    pub optim: OptimState,
    /// Rows of earlier runs followed by the rows of this one.
    pub curve: Vec<CurveRow>,
    pub converged: bool,
}

/// Greedy-decoding TER of `model` on a referenced corpus.
pub fn decode_ter(model: &Model, corpus: &Corpus, opts: &DecodeOptions) -> Result<f64> {
    model.ensure_vocab(&corpus.vocab)?;
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut refs = Vec::with_capacity(corpus.len());
    for u in &corpus.utterances {
        let r = u
            .reference
            .clone()
            .ok_or_else(|| Error::Input(format!("utterance {} has no reference", u.id)))?;
        hyps.push(greedy_decode(model, u, opts)?.content().to_vec());
        refs.push(r);
    }
    ter(&hyps, &refs)
}

fn is_converged(row: &CurveRow, settings: &TrainSettings) -> bool {
    row.epoch >= settings.min_epochs && row.valid_ter <= settings.target_ter
}

/// Teacher-forced training on references until the validation TER reaches
/// `target_ter` or `max_epochs` epochs have completed in total. Epochs
/// listed in `curve` count as already done.
pub fn train_source(
    model: Model,
    optim: Option<OptimState>,
    curve: Vec<CurveRow>,
    train: &Corpus,
    valid: &Corpus,
    settings: &TrainSettings,
    seed_value: u64,
) -> Result<SourceRun> {
    model.ensure_vocab(&train.vocab)?;
    model.ensure_vocab(&valid.vocab)?;
    let targets = train
        .utterances
        .iter()
        .map(|u| {
            let r = u
                .reference
                .as_deref()
                .ok_or_else(|| Error::Input(format!("utterance {} has no reference", u.id)))?;
            model.check_target(u, r)?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    if targets.is_empty() {
        return Err(Error::Input("source training corpus is empty".into()));
    }
    let mut model = model;
    let mut optim = match optim {
        Some(o) => o,
        None => OptimState::new(&model, settings.lr, settings.grad_accum)?,
    };
    let mut curve = curve;
    let mut converged = curve.last().is_some_and(|r| is_converged(r, settings));
    let mut order: Vec<usize> = (0..targets.len()).collect();
    while !converged && curve.len() < settings.max_epochs {
        let epoch = curve.len();
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(seed_value, epoch as u64)));
        let mut total = 0.0;
        for &i in &order {
            let graph = model.loss_graph(&train.utterances[i], targets[i], None)?;
            total += graph.loss;
            backward_and_step(&mut model, &mut optim, &graph)?;
        }
        if optim.pending() > 0 {
            optim.apply(&mut model);
        }
        let row = CurveRow {
            epoch: epoch + 1,
            steps: model.step_count,
            train_loss: total / targets.len() as f64,
            valid_ter: decode_ter(&model, valid, &DecodeOptions::default())?,
        };
        converged = is_converged(&row, settings);
        curve.push(row);
    }
    Ok(SourceRun {
        model,
        optim,
        curve,
        converged,
    })
}

pub fn write_curve(curve: &[CurveRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in curve {
        w.serialize(row).map_err(|e| Error::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<curve>", e))
}

pub fn read_curve(input: impl Read) -> Result<Vec<CurveRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}
