//! Report rendering: main results table, failure map, Pareto scatter data,
//! and an index of per-run training-dynamics traces.

use std::path::Path;

use seedprop_core::metrics::{BinRow, EvalSummary};

use crate::ledger::RunRecord;

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

/// Plain-text table: pads every column to its widest cell.
fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let render = |cells: &[String], widths: &[usize], out: &mut String| {
        let line: Vec<String> =
            cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    };
    render(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>(), &widths, &mut out);
    render(
        &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
        &widths,
        &mut out,
    );
    for row in rows {
        render(row, &widths, &mut out);
    }
    out
}

/// Human-readable evaluation report.
pub fn eval_report_text(summary: &EvalSummary, bins: &[BinRow], threshold: f64) -> String {
    let mut out = String::new();
    out.push_str(&format!("evaluation at threshold {threshold}\n"));
    out.push_str(&format!(
        "  miou {:.4}  niou {:.4}  pd {:.4}  fa {:.2}  area-ratio {}\n",
        summary.miou,
        summary.niou,
        summary.pd,
        summary.fa,
        fmt_opt(summary.area_ratio, 4)
    ));
    if let (Some(bt), Some(bm)) = (summary.best_threshold, summary.best_miou) {
        out.push_str(&format!("  best threshold {bt:.2} -> miou {bm:.4}\n"));
    }
    let rows: Vec<Vec<String>> = bins
        .iter()
        .map(|r| {
            vec![
                r.bin.label().to_string(),
                r.count.to_string(),
                fmt_opt(r.iou, 4),
                fmt_opt(r.area_ratio, 4),
                fmt_opt(r.pd, 4),
            ]
        })
        .collect();
    out.push_str(&text_table(&["bin", "count", "iou", "area_ratio", "pd"], &rows));
    out
}

fn active_failures(rec: &RunRecord) -> Vec<String> {
    let mut active = Vec::new();
    if let Some(obj) = rec.resolved_config.get("failures").and_then(|v| v.as_object()) {
        for (k, v) in obj {
            if v.as_bool() == Some(true) {
                active.push(k.clone());
            }
        }
    }
    active
}

/// Writes the full report bundle into `out`.
pub fn write_report(records: &[RunRecord], out: &Path) -> anyhow::Result<()> {
    // Main results.
    let mut csv = String::from("run_id,kind,label,miou,niou,pd,fa,area_ratio,best_miou\n");
    let mut rows = Vec::new();
    for rec in records {
        let o = rec.outcome.clone().unwrap_or(EvalSummary {
            miou: f64::NAN,
            niou: f64::NAN,
            pd: f64::NAN,
            fa: f64::NAN,
            area_ratio: None,
            best_threshold: None,
            best_miou: None,
        });
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            rec.run_id,
            rec.kind,
            rec.label,
            o.miou,
            o.niou,
            o.pd,
            o.fa,
            o.area_ratio.map(|v| v.to_string()).unwrap_or_default(),
            o.best_miou.map(|v| v.to_string()).unwrap_or_default(),
        ));
        rows.push(vec![
            rec.run_id.clone(),
            rec.kind.clone(),
            rec.label.clone(),
            format!("{:.4}", o.miou),
            format!("{:.4}", o.niou),
            format!("{:.4}", o.pd),
            format!("{:.2}", o.fa),
            fmt_opt(o.area_ratio, 3),
            fmt_opt(o.best_miou, 4),
        ]);
    }
    std::fs::write(out.join("main_results.csv"), &csv)?;
    std::fs::write(
        out.join("main_results.txt"),
        text_table(
            &["run", "kind", "label", "miou", "niou", "pd", "fa", "area_ratio", "best_miou"],
            &rows,
        ),
    )?;

    // Failure map: only runs with an active failure switch.
    let failure_rows: Vec<Vec<String>> = records
        .iter()
        .filter_map(|rec| {
            let active = active_failures(rec);
            if active.is_empty() {
                return None;
            }
            let o = rec.outcome.as_ref()?;
            Some(vec![
                rec.run_id.clone(),
                active.join("+"),
                format!("{:.4}", o.miou),
                format!("{:.4}", o.pd),
                format!("{:.2}", o.fa),
                fmt_opt(o.area_ratio, 3),
            ])
        })
        .collect();
    if !failure_rows.is_empty() {
        let mut fcsv = String::from("run_id,failure_mode,miou,pd,fa,area_ratio\n");
        for row in &failure_rows {
            fcsv.push_str(&row.join(","));
            fcsv.push('\n');
        }
        std::fs::write(out.join("failure_map.csv"), &fcsv)?;
        std::fs::write(
            out.join("failure_map.txt"),
            text_table(&["run", "failure_mode", "miou", "pd", "fa", "area_ratio"], &failure_rows),
        )?;
    }

    // Pareto scatter: overlap vs false alarms, one point per run.
    let mut pareto = String::from("run_id,label,miou,fa\n");
    for rec in records {
        if let Some(o) = &rec.outcome {
            pareto.push_str(&format!("{},{},{},{}\n", rec.run_id, rec.label, o.miou, o.fa));
        }
    }
    std::fs::write(out.join("pareto.csv"), pareto)?;

    // Training-dynamics index: where each run's epoch trace lives.
    let mut dynamics = String::from("run_id,label,epochs_csv\n");
    for rec in records {
        if let Some(a) = rec.artifacts.iter().find(|a| a.path.ends_with("epochs.csv")) {
            dynamics.push_str(&format!("{},{},{}\n", rec.run_id, rec.label, a.path));
        }
    }
    std::fs::write(out.join("dynamics_index.csv"), dynamics)?;
    Ok(())
}
