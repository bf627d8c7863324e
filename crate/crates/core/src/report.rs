//! Report generation: Markdown tables (clients as columns, methods as rows)
//! and plot-ready CSV series, regenerated deterministically from a results
//! tree.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, SimError};
use crate::harness::{AggRow, InsideReport, OutsideReport};

/// Recursively collects files named `name` under `root`, sorted by path so
/// regeneration is byte-identical.
fn find_files(root: &Path, name: &str) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if !dir.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()) == Some(name) {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn find_with_prefix(root: &Path, prefix: &str, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if !dir.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                if name.starts_with(prefix) && name.ends_with(suffix) {
                    found.push(path);
                }
            }
        }
    }
    found.sort();
    Ok(found)
}

fn cell(rows: &[AggRow], group: &str, method: &str, class: usize) -> String {
    rows.iter()
        .find(|r| r.group == group && r.method == method && r.class == class)
        .map(|r| format!("{:.4} ({:.4})", r.mean, r.std))
        .unwrap_or_else(|| "-".into())
}

fn inside_table(md: &mut String, source: &Path, report: &InsideReport) {
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = report.aggregate.iter().map(|r| r.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let groups: Vec<String> = {
        let mut g: Vec<String> = report.aggregate.iter().map(|r| r.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    };
    let methods: Vec<&str> = {
        let mut m: Vec<&str> = report.aggregate.iter().map(|r| r.method.as_str()).collect();
        m.sort();
        m.dedup();
        // stable reporting order
        let order = ["single-site", "global", "personalized"];
        let mut ordered: Vec<&str> = order.iter().filter(|o| m.contains(o)).copied().collect();
        for x in m {
            if !ordered.contains(&x) {
                ordered.push(x);
            }
        }
        ordered
    };
    for &class in &classes {
        md.push_str(&format!(
            "\n### Inside clients — {} (class {class})\n\n",
            source.display()
        ));
        md.push_str("| Method |");
        for g in &groups {
            md.push_str(&format!(" {g} |"));
        }
        md.push_str(" Avg |\n|---|");
        for _ in &groups {
            md.push_str("---|");
        }
        md.push_str("---|\n");
        for method in &methods {
            md.push_str(&format!("| {method} |"));
            let mut vals = Vec::new();
            for g in &groups {
                md.push_str(&format!(" {} |", cell(&report.aggregate, g, method, class)));
                if let Some(r) = report
                    .aggregate
                    .iter()
                    .find(|r| &r.group == g && r.method == *method && r.class == class)
                {
                    vals.push(r.mean);
                }
            }
            let avg = if vals.is_empty() {
                "-".into()
            } else {
                format!("{:.4}", vals.iter().sum::<f64>() / vals.len() as f64)
            };
            md.push_str(&format!(" {avg} |\n"));
        }
    }
}

fn outside_table(md: &mut String, source: &Path, report: &OutsideReport) {
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = report.aggregate.iter().map(|r| r.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    md.push_str(&format!(
        "\n### Outside client {} — {}\n\n",
        report.holdout,
        source.display()
    ));
    md.push_str("| Strategy |");
    for class in &classes {
        md.push_str(&format!(" class {class} |"));
    }
    md.push_str(" Mean |\n|---|");
    for _ in &classes {
        md.push_str("---|");
    }
    md.push_str("---|\n");
    let order = ["global", "average", "ensemble", "routed"];
    for method in order {
        if !report.aggregate.iter().any(|r| r.method == method) {
            continue;
        }
        md.push_str(&format!("| {method} |"));
        let mut vals = Vec::new();
        for &class in &classes {
            md.push_str(&format!(" {} |", cell(&report.aggregate, "outside", method, class)));
            if let Some(r) = report
                .aggregate
                .iter()
                .find(|r| r.method == method && r.class == class)
            {
                vals.push(r.mean);
            }
        }
        md.push_str(&format!(
            " {:.4} |\n",
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        ));
    }
}

/// Builds `report.md` plus `curves/` CSV series from every report found
/// under `results_dir`. Pure function of the directory contents.
pub fn cmd_report(results_dir: &Path) -> Result<PathBuf> {
    if !results_dir.is_dir() {
        return Err(SimError::InvalidInput(format!(
            "results directory {} does not exist",
            results_dir.display()
        )));
    }
    let inside = find_files(results_dir, "inside_report.json")?;
    let outside = find_files(results_dir, "outside_report.json")?;
    let sweeps = find_with_prefix(results_dir, "sweep_", ".csv")?;
    let traces = find_files(results_dir, "round_trace.csv")?;
    let adapt_losses = find_files(results_dir, "adapt_loss.csv")?;
    if inside.is_empty() && outside.is_empty() && sweeps.is_empty() {
        return Err(SimError::InvalidInput(format!(
            "no reports found under {}",
            results_dir.display()
        )));
    }

    let report_dir = results_dir.join("report");
    let curves_dir = report_dir.join("curves");
    fs::create_dir_all(&curves_dir)?;

    let mut md = String::from("# Experiment report\n\nDice scores as mean (std) over seeds.\n");
    for path in &inside {
        let report: InsideReport = serde_json::from_str(&fs::read_to_string(path)?)?;
        let rel = path.strip_prefix(results_dir).unwrap_or(path);
        inside_table(&mut md, rel, &report);
    }
    for path in &outside {
        let report: OutsideReport = serde_json::from_str(&fs::read_to_string(path)?)?;
        let rel = path.strip_prefix(results_dir).unwrap_or(path);
        outside_table(&mut md, rel, &report);
    }
    if !sweeps.is_empty() {
        md.push_str("\n## Sweeps\n");
        for path in &sweeps {
            let rel = path.strip_prefix(results_dir).unwrap_or(path);
            md.push_str(&format!("\n- `{}` (copied under curves/)\n", rel.display()));
        }
    }
    fs::write(report_dir.join("report.md"), &md)?;

    // plot-ready series: validation Dice per round, adaptation loss, sweeps
    let mut dice_curves = String::from("source,round,client_id,train_loss,val_dice\n");
    for path in &traces {
        let rel = path.strip_prefix(results_dir).unwrap_or(path).display().to_string();
        let text = fs::read_to_string(path)?;
        for line in text.lines().skip(1) {
            dice_curves.push_str(&format!("{rel},{line}\n"));
        }
    }
    fs::write(curves_dir.join("val_dice.csv"), dice_curves)?;

    let mut loss_curves = String::from("source,epoch,mean_loss\n");
    for path in &adapt_losses {
        let rel = path.strip_prefix(results_dir).unwrap_or(path).display().to_string();
        let text = fs::read_to_string(path)?;
        for line in text.lines().skip(1) {
            loss_curves.push_str(&format!("{rel},{line}\n"));
        }
    }
    fs::write(curves_dir.join("adapt_loss.csv"), loss_curves)?;

    for path in &sweeps {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("sweep.csv");
        fs::copy(path, curves_dir.join(name))?;
    }
    Ok(report_dir)
}
