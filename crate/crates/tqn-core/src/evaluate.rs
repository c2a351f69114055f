//! Evaluation: accuracy metrics, confusion matrices, localization scoring,
//! and the CSV export/recompute round trip.
//!
//! Evaluation always computes clip features fully online — the bank is a
//! training-only device. Per-video accuracy is the plain fraction of correct
//! sequences; per-class accuracy is the unweighted mean of per-class recalls
//! over classes present in the split.

use std::fmt::Write as _;

use crate::decoder::TqnModel;
use crate::encoder::ToyEncoder;
use crate::factorization::FactorizationSchema;
use crate::synth::{Split, SyntheticDataset, SyntheticSequence};
use crate::variants::{VariantError, VariantModel};

/// One evaluated sequence, in the exact shape of the prediction export.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRow {
    pub sequence_id: u32,
    pub true_class: usize,
    pub pred_class: usize,
    /// Per-query local answer slots (0 = null).
    pub per_query_true: Vec<usize>,
    pub per_query_pred: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalMetrics {
    pub per_video: f64,
    pub per_class: f64,
    /// `[true_class][pred_class]` counts.
    pub class_confusion: Vec<Vec<usize>>,
    /// Per query: `[true_local][pred_local]` counts over its answer set.
    pub query_confusion: Vec<Vec<Vec<usize>>>,
    pub predictions: Vec<PredictionRow>,
}

/// Evaluates a variant on one split with fully online features.
pub fn evaluate(
    model: &VariantModel,
    encoder: &ToyEncoder,
    dataset: &SyntheticDataset,
    split: Split,
) -> Result<EvalMetrics, VariantError> {
    let schema = &dataset.schema;
    let sequences: Vec<&SyntheticSequence> = dataset.split(split).collect();
    if sequences.is_empty() {
        return Err(VariantError::Other(format!(
            "cannot evaluate an empty {} split",
            split.as_str()
        )));
    }
    let n = schema.class_count();
    let mut class_confusion = vec![vec![0usize; n]; n];
    let mut query_confusion: Vec<Vec<Vec<usize>>> = schema
        .arities()
        .iter()
        .map(|&a| vec![vec![0usize; a]; a])
        .collect();
    let mut predictions = Vec::with_capacity(sequences.len());

    for seq in &sequences {
        let phi = encoder.encode_tensor(&seq.frames)?;
        let (pred_class, per_query_pred) = match model.tqn() {
            Some(tqn) => {
                let p = tqn.predict(&phi)?;
                (p.class_index, p.per_query_locals)
            }
            None => {
                let c = model.predict(schema, &phi)?;
                (c, schema.local_indices(c)?)
            }
        };
        let per_query_true = schema.local_indices(seq.class_index)?;
        class_confusion[seq.class_index][pred_class] += 1;
        for (q, (&t, &p)) in per_query_true.iter().zip(&per_query_pred).enumerate() {
            query_confusion[q][t][p] += 1;
        }
        predictions.push(PredictionRow {
            sequence_id: seq.id,
            true_class: seq.class_index,
            pred_class,
            per_query_true,
            per_query_pred,
        });
    }

    let (per_video, per_class) = accuracy_from_confusion(&class_confusion);
    Ok(EvalMetrics {
        per_video,
        per_class,
        class_confusion,
        query_confusion,
        predictions,
    })
}

/// `(per_video, per_class)` from a `[true][pred]` count matrix.
pub fn accuracy_from_confusion(confusion: &[Vec<usize>]) -> (f64, f64) {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut recall_sum = 0.0;
    let mut classes_present = 0usize;
    for (class, row) in confusion.iter().enumerate() {
        let class_total: usize = row.iter().sum();
        correct += row[class];
        total += class_total;
        if class_total > 0 {
            recall_sum += row[class] as f64 / class_total as f64;
            classes_present += 1;
        }
    }
    let per_video = if total > 0 {
        correct as f64 / total as f64
    } else {
        0.0
    };
    let per_class = if classes_present > 0 {
        recall_sum / classes_present as f64
    } else {
        0.0
    };
    (per_video, per_class)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationReport {
    pub hits: usize,
    pub total: usize,
    pub hit_fraction: f64,
    /// Expected hit fraction of a uniform-random clip guess: mean of
    /// `span / t_v` over the scored events.
    pub chance_rate: f64,
    /// `(hits, total)` per query index.
    pub per_query: Vec<(usize, usize)>,
}

/// Scores event localization given any per-(sequence, query) peak-clip rule.
/// Every planted event of every sequence is scored once.
pub fn localization_from_argmax<'a>(
    sequences: impl IntoIterator<Item = &'a SyntheticSequence>,
    query_count: usize,
    mut argmax_clip: impl FnMut(&SyntheticSequence, usize) -> usize,
) -> LocalizationReport {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut chance = 0.0;
    let mut per_query = vec![(0usize, 0usize); query_count];
    for seq in sequences {
        for event in &seq.events {
            let peak = argmax_clip(seq, event.query_index);
            let hit = event.contains_clip(peak);
            hits += usize::from(hit);
            total += 1;
            chance += event.span() as f64 / seq.clip_count() as f64;
            let (h, t) = &mut per_query[event.query_index];
            *h += usize::from(hit);
            *t += 1;
        }
    }
    LocalizationReport {
        hits,
        total,
        hit_fraction: if total > 0 { hits as f64 / total as f64 } else { 0.0 },
        chance_rate: if total > 0 { chance / total as f64 } else { 0.0 },
        per_query,
    }
}

/// Localization of the query decoder's aggregate cross-attention: a hit when
/// the argmax clip of the event's query row falls inside the planted span.
pub fn localization_score(
    tqn: &TqnModel,
    encoder: &ToyEncoder,
    dataset: &SyntheticDataset,
    split: Split,
) -> Result<LocalizationReport, VariantError> {
    let sequences: Vec<&SyntheticSequence> = dataset.split(split).collect();
    if sequences.is_empty() {
        return Err(VariantError::Other(format!(
            "cannot score localization on an empty {} split",
            split.as_str()
        )));
    }
    let mut peaks: Vec<Vec<usize>> = Vec::with_capacity(sequences.len());
    for seq in &sequences {
        let phi = encoder.encode_tensor(&seq.frames)?;
        let map = tqn.extract_attention(&phi)?;
        peaks.push(
            (0..dataset.schema.query_count())
                .map(|q| map.argmax_clip(q))
                .collect(),
        );
    }
    let by_seq: std::collections::BTreeMap<u32, &Vec<usize>> = sequences
        .iter()
        .zip(&peaks)
        .map(|(s, p)| (s.id, p))
        .collect();
    Ok(localization_from_argmax(
        sequences.iter().copied(),
        dataset.schema.query_count(),
        |seq, query| by_seq[&seq.id][query],
    ))
}

/// `sequence_id,true_class,pred_class,per_query_true,per_query_pred`; the
/// per-query fields join local slots with `|`.
pub fn predictions_to_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("sequence_id,true_class,pred_class,per_query_true,per_query_pred\n");
    for r in rows {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join("|")
        };
        writeln!(
            out,
            "{},{},{},{},{}",
            r.sequence_id,
            r.true_class,
            r.pred_class,
            join(&r.per_query_true),
            join(&r.per_query_pred)
        )
        .expect("string write");
    }
    out
}

/// Parses the prediction export back; used by the recompute oracle and the
/// report command.
pub fn parse_predictions_csv(text: &str) -> Result<Vec<PredictionRow>, VariantError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| VariantError::Other("empty prediction file".into()))?;
    if header != "sequence_id,true_class,pred_class,per_query_true,per_query_pred" {
        return Err(VariantError::Other(format!(
            "unexpected prediction header `{header}`"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(VariantError::Other(format!(
                "prediction line {} has {} fields",
                i + 2,
                fields.len()
            )));
        }
        let parse_locals = |s: &str| -> Result<Vec<usize>, VariantError> {
            s.split('|')
                .map(|x| {
                    x.parse::<usize>().map_err(|_| {
                        VariantError::Other(format!("bad local slot `{x}` on line {}", i + 2))
                    })
                })
                .collect()
        };
        let parse_num = |s: &str, what: &str| -> Result<usize, VariantError> {
            s.parse::<usize>()
                .map_err(|_| VariantError::Other(format!("bad {what} `{s}` on line {}", i + 2)))
        };
        rows.push(PredictionRow {
            sequence_id: parse_num(fields[0], "sequence id")? as u32,
            true_class: parse_num(fields[1], "true class")?,
            pred_class: parse_num(fields[2], "predicted class")?,
            per_query_true: parse_locals(fields[3])?,
            per_query_pred: parse_locals(fields[4])?,
        });
    }
    Ok(rows)
}

/// Recomputes `(per_video, per_class)` from exported prediction rows.
pub fn metrics_from_predictions(rows: &[PredictionRow], class_count: usize) -> (f64, f64) {
    let mut confusion = vec![vec![0usize; class_count]; class_count];
    for r in rows {
        confusion[r.true_class][r.pred_class] += 1;
    }
    accuracy_from_confusion(&confusion)
}

/// Aggregate attention as CSV: one row per query (the category query is
/// named `category`), one column per clip.
/// One sequence's attention export: a per-query aggregate row for each
/// attribute query (labelled with its name) plus a final `query_average` row
/// that is the arithmetic mean of those per-query rows.
pub fn attention_to_csv(
    schema: &FactorizationSchema,
    aggregate: &crate::decoder::AttentionMap,
) -> String {
    let t = aggregate.aggregate.shape()[1];
    let k = schema.query_count();
    let mut out = String::from("query");
    for j in 0..t {
        write!(out, ",clip_{j}").expect("string write");
    }
    out.push('\n');
    let mut mean = vec![0.0; t];
    for q in 0..k {
        let row = aggregate.aggregate.row(q);
        out.push_str(&schema.queries()[q].name);
        for (j, v) in row.iter().enumerate() {
            mean[j] += v / k as f64;
            write!(out, ",{v:.12}").expect("string write");
        }
        out.push('\n');
    }
    out.push_str("query_average");
    for v in mean {
        write!(out, ",{v:.12}").expect("string write");
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_dataset, GeneratorConfig};
    use crate::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn attention_csv_has_query_rows_plus_their_average() {
        let schema = crate::factorization::bundled::synthetic().unwrap();
        let k = schema.query_count();
        let t = 5;
        let mut rng = crate::rngs::stream_rng(3, 0);
        // K query rows plus the category query, softmax-normalised.
        let rows: Vec<Vec<f64>> = (0..k + 1)
            .map(|_| {
                let raw: Vec<f64> = (0..t).map(|_| rng.gen::<f64>() + 0.1).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let aggregate = Tensor::from_rows(&rows).unwrap();
        let map = crate::decoder::AttentionMap {
            per_layer_head: Vec::new(),
            aggregate,
        };
        let csv = attention_to_csv(&schema, &map);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + k + 1, "header + K query rows + average");
        assert!(lines[0].starts_with("query,clip_0"));
        for (q, line) in lines[1..=k].iter().enumerate() {
            assert!(line.starts_with(&schema.queries()[q].name));
        }
        let parse_row = |line: &str| -> Vec<f64> {
            line.split(',')
                .skip(1)
                .map(|v| v.parse::<f64>().unwrap())
                .collect()
        };
        let avg = parse_row(lines[k + 1]);
        assert!(lines[k + 1].starts_with("query_average"));
        for j in 0..t {
            let mean: f64 = (0..k).map(|q| rows[q][j]).sum::<f64>() / k as f64;
            assert!((avg[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_and_constant_predictors_hit_the_analytic_accuracies() {
        // Perfect predictor: diagonal confusion, both accuracies 1.
        let mut confusion = vec![vec![0usize; 3]; 3];
        for c in 0..3 {
            confusion[c][c] = 5 + c;
        }
        let (pv, pc) = accuracy_from_confusion(&confusion);
        assert_eq!((pv, pc), (1.0, 1.0));

        // Constant predictor on a balanced 4-class split: 1/4 everywhere.
        let mut confusion = vec![vec![0usize; 4]; 4];
        for row in confusion.iter_mut() {
            row[2] = 10;
        }
        let (pv, pc) = accuracy_from_confusion(&confusion);
        assert!((pv - 0.25).abs() < 1e-15);
        assert!((pc - 0.25).abs() < 1e-15);
    }

    #[test]
    fn prediction_export_recompute_matches_within_tolerance() {
        let rows: Vec<PredictionRow> = (0..40)
            .map(|i| PredictionRow {
                sequence_id: i,
                true_class: (i % 5) as usize,
                pred_class: ((i * 3) % 5) as usize,
                per_query_true: vec![i as usize % 3, 1],
                per_query_pred: vec![(i as usize + 1) % 3, 0],
            })
            .collect();
        let csv = predictions_to_csv(&rows);
        let back = parse_predictions_csv(&csv).unwrap();
        assert_eq!(back, rows);
        let (pv_direct, pc_direct) = {
            let mut confusion = vec![vec![0usize; 5]; 5];
            for r in &rows {
                confusion[r.true_class][r.pred_class] += 1;
            }
            accuracy_from_confusion(&confusion)
        };
        let (pv, pc) = metrics_from_predictions(&back, 5);
        assert!((pv - pv_direct).abs() < 1e-12);
        assert!((pc - pc_direct).abs() < 1e-12);
    }

    #[test]
    fn uniform_random_argmax_scores_near_chance() {
        let schema = crate::factorization::bundled::synthetic().unwrap();
        let cfg = GeneratorConfig {
            train_count: 400,
            test_count: 1,
            clip_len: 1,
            input_dim: 2,
            ..GeneratorConfig::default()
        };
        let ds = gen_dataset(&cfg, &schema, 31).unwrap();
        let mut rng = crate::rngs::stream_rng(99, 0);
        let report = localization_from_argmax(
            ds.train().iter(),
            schema.query_count(),
            |seq, _query| rng.gen_range(0..seq.clip_count()),
        );
        // A uniform guess hits with probability span/t_v per event, which is
        // the definition of the chance rate; allow 3 sigma of binomial noise.
        let sigma = (report.chance_rate * (1.0 - report.chance_rate)
            / report.total as f64)
            .sqrt();
        assert!(
            (report.hit_fraction - report.chance_rate).abs() <= 3.0 * sigma,
            "hit {:.4} vs chance {:.4} (sigma {:.4})",
            report.hit_fraction,
            report.chance_rate,
            sigma
        );
        let per_query_total: usize = report.per_query.iter().map(|(_, t)| t).sum();
        assert_eq!(per_query_total, report.total);
    }

    #[test]
    fn delta_peaked_argmax_scores_one() {
        let schema = crate::factorization::bundled::synthetic().unwrap();
        let cfg = GeneratorConfig {
            train_count: 30,
            test_count: 1,
            clip_len: 1,
            input_dim: 2,
            ..GeneratorConfig::default()
        };
        let ds = gen_dataset(&cfg, &schema, 32).unwrap();
        let report = localization_from_argmax(
            ds.train().iter(),
            schema.query_count(),
            |seq, query| seq.event_for_query(query).unwrap().start_clip,
        );
        assert_eq!(report.hit_fraction, 1.0);
        assert!(report.chance_rate < 0.5);
    }
}
