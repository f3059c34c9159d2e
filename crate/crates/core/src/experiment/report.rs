use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{average_accuracy, read_reports};
use crate::analysis::plot::{bar_plot, cdf_plot};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::types::EvalReport;

const PLOT_W: usize = 480;
const PLOT_H: usize = 320;

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn pct_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), pct)
}

fn load_config(run_dir: &Path) -> Option<ExperimentConfig> {
    let raw = fs::read(run_dir.join("config.json")).ok()?;
    serde_json::from_slice(&raw).ok()
}

fn session_row(label: &str, reports: &[EvalReport]) -> String {
    let mut row = format!("| {label} |");
    for r in reports {
        let _ = write!(row, " {} |", pct(r.session_top1));
    }
    let _ = write!(row, " {} |", pct(average_accuracy(reports)));
    row
}

fn session_header(sessions: usize) -> String {
    let mut h = String::from("| Run |");
    let mut rule = String::from("|---|");
    for t in 0..sessions {
        let _ = write!(h, " {t} |");
        rule.push_str("---|");
    }
    h.push_str(" Average Acc. |\n");
    rule.push_str("---|\n");
    h + &rule
}

fn write_png(path: &Path, img: &crate::data::Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_png(path)
}

/// Writes `report.md` and `plots/*.png` for one run directory. Missing pieces
/// of an incomplete run are listed instead of failing.
pub fn render_report(run_dir: &Path) -> Result<PathBuf> {
    let mut md = String::new();
    let mut gaps = Vec::new();
    let cfg = load_config(run_dir);
    let title = cfg.as_ref().map_or_else(|| run_dir.display().to_string(), |c| c.run_id());
    let _ = writeln!(md, "# Run `{title}`\n");
    match &cfg {
        Some(c) => {
            let _ = writeln!(
                md,
                "lambda = {}, beta = {}, threshold = {}, temperature = {}, epochs = {} + {}\n",
                c.rdi.lambda, c.rdi.beta, c.rdi.threshold, c.protocol.temperature, c.protocol.base_epochs, c.protocol.rdi_epochs
            );
        }
        None => gaps.push("config.json"),
    }

    let reports = read_reports(run_dir)?;
    let expected = cfg.as_ref().map(|c| c.data.sessions + 1);
    if reports.is_empty() {
        gaps.push("reports/session_0.json");
    } else {
        md.push_str("## Accuracy per session (%)\n\n");
        md.push_str(&session_header(reports.len()));
        md.push_str(&session_row(&title, &reports));
        md.push_str("\n\n## Base/novel confusion (%)\n\n| Session | BA | NA | AA | NN | NN - NA |\n|---|---|---|---|---|---|\n");
        for r in &reports {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} |",
                r.session,
                pct(r.ba_acc),
                pct_opt(r.na_acc),
                pct(r.aa_acc),
                pct_opt(r.nn_acc),
                pct_opt(r.confusion_gap)
            );
        }
        let bars: Vec<Vec<f64>> = reports
            .iter()
            .filter_map(|r| Some(vec![r.nn_acc?, r.na_acc?]))
            .collect();
        if !bars.is_empty() {
            write_png(&run_dir.join("plots").join("confusion.png"), &bar_plot(&bars, 1.0, PLOT_W, PLOT_H))?;
            md.push_str("\n![NN (blue) and NA (red) accuracy per session](plots/confusion.png)\n");
        }
    }
    if let Some(n) = expected {
        if reports.len() < n {
            let _ = writeln!(md, "\n**Incomplete:** {} of {n} session reports present.", reports.len());
        }
    }

    if let Some(d) = reports.first().and_then(|r| r.diagnostics.as_ref()) {
        md.push_str("\n## Diagnostics (base-class test set)\n");
        if let Some(s) = &d.patch_similarity {
            let _ = writeln!(
                md,
                "\n### Patch similarity (threshold {})\n\n| Patches | Count | exp(tau cos) own class | sum exp(tau cos) other classes |\n|---|---|---|---|",
                s.threshold
            );
            for (name, cat) in [("central", s.central), ("redundant", s.redundant)] {
                match cat {
                    Some(c) => {
                        let _ = writeln!(md, "| {name} | {} | {:.2} | {:.2} |", c.patches, c.own_class, c.other_classes);
                    }
                    None => {
                        let _ = writeln!(md, "| {name} | 0 | - | - |");
                    }
                }
            }
        }
        if let Some(c) = &d.distance_cdfs {
            let _ = writeln!(
                md,
                "\n### Cosine distances\n\nintra-class mean {:.4}, inter-class mean {:.4}\n",
                c.intra_mean, c.inter_mean
            );
            let intra: Vec<(f64, f64)> = c.intra.iter().map(|p| (p.distance, p.cumulative)).collect();
            let inter: Vec<(f64, f64)> = c.inter.iter().map(|p| (p.distance, p.cumulative)).collect();
            let x_max = intra.iter().chain(&inter).map(|p| p.0).fold(0.0, f64::max);
            write_png(
                &run_dir.join("plots").join("distance_cdf.png"),
                &cdf_plot(&[&intra, &inter], x_max, PLOT_W, PLOT_H),
            )?;
            md.push_str("![intra-class (blue) and inter-class (red) distance CDFs](plots/distance_cdf.png)\n");
        }
        if let Some(a) = &d.redundancy_alignment {
            let _ = writeln!(
                md,
                "\n### Planted regions\n\nALI mass in nuisance boxes {:.3} (chance {:.3}, lift {:.2}x); ALR mass in signal boxes {:.3} (chance {:.3})",
                a.ali_in_nuisance,
                a.nuisance_base_rate,
                a.nuisance_lift(),
                a.alr_in_signal,
                a.signal_base_rate
            );
        }
    }

    if !gaps.is_empty() {
        let _ = writeln!(md, "\n**Missing:** {}", gaps.join(", "));
    }
    let path = run_dir.join("report.md");
    fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Side-by-side session rows and confusion-gap bars for several runs.
pub fn render_comparison(run_dirs: &[PathBuf], out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut runs = Vec::new();
    for dir in run_dirs {
        let name = load_config(dir).map_or_else(|| dir.display().to_string(), |c| c.run_id());
        runs.push((name, read_reports(dir)?));
    }
    let sessions = runs.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
    let mut md = String::from("# Comparison\n\n## Accuracy per session (%)\n\n");
    md.push_str(&session_header(sessions));
    for (name, reports) in &runs {
        md.push_str(&session_row(name, reports));
        md.push('\n');
    }
    md.push_str("\n## Confusion gap NN - NA (%)\n\n| Session |");
    for (name, _) in &runs {
        let _ = write!(md, " {name} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(runs.len()));
    md.push('\n');
    let mut bars = Vec::new();
    for t in 1..sessions {
        let _ = write!(md, "| {t} |");
        let mut group = Vec::new();
        for (_, reports) in &runs {
            let g = reports.get(t).and_then(|r| r.confusion_gap);
            let _ = write!(md, " {} |", pct_opt(g));
            group.push(g.unwrap_or(0.0).max(0.0));
        }
        md.push('\n');
        bars.push(group);
    }
    if !bars.is_empty() {
        let y_max = bars.iter().flatten().copied().fold(0.0, f64::max).max(0.01);
        write_png(&out_dir.join("confusion_gap.png"), &bar_plot(&bars, y_max, PLOT_W, PLOT_H))?;
        md.push_str("\n![confusion gap per session, one bar per run in table order](confusion_gap.png)\n");
    }
    let path = out_dir.join("comparison.md");
    fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
