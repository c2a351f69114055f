//! `tqn report`: tabulate completed runs and check the comparison gates.

use std::fs;
use std::path::Path;

use tqn_core::variants::VariantKind;

use crate::error::{CliError, CliResult};
use crate::summary::RunSummary;
use crate::ReportArgs;

/// Margin (absolute accuracy) the query decoder must hold over average
/// pooling, and the updated bank over the frozen bank.
pub const ACCURACY_MARGIN: f64 = 0.05;
/// Margin the localization hit fraction must hold over chance.
pub const LOCALIZATION_MARGIN: f64 = 0.3;

struct Gate {
    name: String,
    passed: bool,
    detail: String,
}

pub fn run(args: &ReportArgs) -> CliResult<()> {
    let rows = collect_rows(&args.out)?;
    if rows.is_empty() {
        return Err(CliError::Data(format!(
            "no completed runs (summary.json) under {}",
            args.out.display()
        )));
    }
    print_table(&rows);
    write_csv(&args.out.join("report.csv"), &rows)?;

    let missing: Vec<&str> = VariantKind::ALL
        .iter()
        .filter(|k| pick(&rows, k.as_str()).is_none())
        .map(|k| k.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "missing runs for: {}",
            missing.join(", ")
        )));
    }

    let gates = evaluate_gates(&rows);
    println!();
    for g in &gates {
        println!(
            "gate {:<40} {} ({})",
            g.name,
            if g.passed { "PASS" } else { "FAIL" },
            g.detail
        );
    }
    let failures: Vec<&str> = gates
        .iter()
        .filter(|g| !g.passed)
        .map(|g| g.name.as_str())
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gate(failures.join(", ")))
    }
}

fn collect_rows(dir: &Path) -> CliResult<Vec<RunSummary>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut rows = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Data(e.to_string()))?;
        let summary_path = entry.path().join("summary.json");
        if summary_path.is_file() {
            rows.push(RunSummary::load(&summary_path)?);
        }
    }
    // Canonical variants first, then everything else, stable by label.
    let rank = |r: &RunSummary| -> (usize, String) {
        let vr = VariantKind::ALL
            .iter()
            .position(|k| k.as_str() == r.variant)
            .unwrap_or(VariantKind::ALL.len());
        let lr = if r.label == r.variant { 0 } else { 1 };
        (vr * 2 + lr, r.label.clone())
    };
    rows.sort_by_key(rank);
    Ok(rows)
}

/// The run for a label: exact label match first, else the only run of that
/// variant if unambiguous.
fn pick<'a>(rows: &'a [RunSummary], label: &str) -> Option<&'a RunSummary> {
    if let Some(row) = rows.iter().find(|r| r.label == label) {
        return Some(row);
    }
    let of_variant: Vec<&RunSummary> = rows.iter().filter(|r| r.variant == label).collect();
    match of_variant.as_slice() {
        [only] => Some(only),
        _ => None,
    }
}

fn print_table(rows: &[RunSummary]) {
    println!(
        "{:<16} {:<16} {:>10} {:>10} {:>13} {:>8}",
        "label", "variant", "per_video", "per_class", "localization", "chance"
    );
    for r in rows {
        let (loc, chance) = match &r.localization {
            Some(l) => (format!("{:.4}", l.hit_fraction), format!("{:.4}", l.chance_rate)),
            None => ("-".to_string(), "-".to_string()),
        };
        println!(
            "{:<16} {:<16} {:>10.4} {:>10.4} {:>13} {:>8}",
            r.label, r.variant, r.per_video_acc, r.per_class_acc, loc, chance
        );
    }
}

fn write_csv(path: &Path, rows: &[RunSummary]) -> CliResult<()> {
    let mut out =
        String::from("label,variant,per_video_acc,per_class_acc,localization,chance_rate\n");
    for r in rows {
        let (loc, chance) = match &r.localization {
            Some(l) => (l.hit_fraction.to_string(), l.chance_rate.to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label, r.variant, r.per_video_acc, r.per_class_acc, loc, chance
        ));
    }
    fs::write(path, out)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn evaluate_gates(rows: &[RunSummary]) -> Vec<Gate> {
    let mut gates = Vec::new();
    let tqn = pick(rows, "tqn").expect("checked present");
    let avgpool = pick(rows, "avgpool").expect("checked present");
    let selfattn = pick(rows, "selfattn_cls").expect("checked present");
    let multilabel = pick(rows, "multilabel_bce").expect("checked present");
    let seq2seq = pick(rows, "seq2seq").expect("checked present");

    gates.push(Gate {
        name: "tqn_above_avgpool_by_margin".into(),
        passed: tqn.per_video_acc >= avgpool.per_video_acc + ACCURACY_MARGIN,
        detail: format!(
            "{:.4} vs {:.4} + {}",
            tqn.per_video_acc, avgpool.per_video_acc, ACCURACY_MARGIN
        ),
    });
    let best_baseline = [avgpool, selfattn, multilabel, seq2seq]
        .iter()
        .map(|r| r.per_video_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    gates.push(Gate {
        name: "tqn_at_least_every_baseline".into(),
        passed: tqn.per_video_acc >= best_baseline,
        detail: format!("{:.4} vs best baseline {:.4}", tqn.per_video_acc, best_baseline),
    });
    let multiclass_floor = avgpool.per_video_acc.min(selfattn.per_video_acc);
    gates.push(Gate {
        name: "structured_decoding_below_multiclass".into(),
        passed: seq2seq.per_video_acc < multiclass_floor
            && multilabel.per_video_acc < multiclass_floor,
        detail: format!(
            "seq2seq {:.4}, multilabel {:.4} vs floor {:.4}",
            seq2seq.per_video_acc, multilabel.per_video_acc, multiclass_floor
        ),
    });
    match &tqn.localization {
        Some(l) => gates.push(Gate {
            name: "localization_above_chance_by_margin".into(),
            passed: l.hit_fraction >= l.chance_rate + LOCALIZATION_MARGIN,
            detail: format!(
                "{:.4} vs chance {:.4} + {}",
                l.hit_fraction, l.chance_rate, LOCALIZATION_MARGIN
            ),
        }),
        None => gates.push(Gate {
            name: "localization_above_chance_by_margin".into(),
            passed: false,
            detail: "tqn run has no localization score".into(),
        }),
    }
    if let Some(frozen) = rows.iter().find(|r| r.label == "tqn_frozen") {
        gates.push(Gate {
            name: "updated_bank_above_frozen_by_margin".into(),
            passed: tqn.per_video_acc >= frozen.per_video_acc + ACCURACY_MARGIN,
            detail: format!(
                "{:.4} vs {:.4} + {}",
                tqn.per_video_acc, frozen.per_video_acc, ACCURACY_MARGIN
            ),
        });
    }
    if let Some(crop) = rows.iter().find(|r| r.label == "avgpool_crop") {
        gates.push(Gate {
            name: "crop_training_below_bank_training".into(),
            passed: crop.per_video_acc < avgpool.per_video_acc,
            detail: format!("{:.4} vs {:.4}", crop.per_video_acc, avgpool.per_video_acc),
        });
    }
    gates
}
