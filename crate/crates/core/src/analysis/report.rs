//! CSV and SVG emission for routing diagnostics. Output is byte-deterministic
//! for a fixed snapshot; SVGs are self-contained SVG 1.1 documents.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::moe::TaskId;

use super::{per_layer_entropy, routing_entropy, top1_dominance, RoutingSnapshot};

#[derive(Debug, thiserror::Error)]
#[error("failed to write {path}: {source}")]
pub struct AnalysisError {
    pub path: String,
    #[source]
    pub source: std::io::Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
}

fn write_file(path: &Path, contents: &str) -> Result<(), AnalysisError> {
    std::fs::write(path, contents).map_err(|source| AnalysisError {
        path: path.display().to_string(),
        source,
    })
}

/// Entropy per task, one row each.
pub fn entropy_csv(snapshot: &RoutingSnapshot) -> String {
    let mut out = String::from("task,entropy\n");
    for (task, h) in routing_entropy(snapshot) {
        let _ = writeln!(out, "{task},{h:.9}");
    }
    out
}

/// One row per (layer, task, expert) with the dense probability and a
/// top-1 marker.
pub fn dominance_csv(snapshot: &RoutingSnapshot) -> String {
    let mut out = String::from("layer,task,expert,probability,top1\n");
    let dominance = top1_dominance(snapshot);
    for ((layer, task), gate) in &snapshot.gates {
        let (top_expert, _) = dominance[&(*layer, *task)];
        for (expert, &p) in gate.dense.iter().enumerate() {
            let _ = writeln!(
                out,
                "{layer},{task},{expert},{p:.9},{}",
                u8::from(expert == top_expert)
            );
        }
    }
    out
}

/// 3x3 layer-averaged gate cosine matrix.
pub fn similarity_csv(snapshot: &RoutingSnapshot) -> String {
    let matrix = super::gate_similarity_matrix(snapshot);
    let mut out = String::from("task,pol,imp,rea\n");
    for (i, task) in TaskId::ALL.iter().enumerate() {
        let _ = writeln!(
            out,
            "{task},{:.9},{:.9},{:.9}",
            matrix[i][0], matrix[i][1], matrix[i][2]
        );
    }
    out
}

fn heat_color(p: f64) -> String {
    // white -> deep blue
    let p = p.clamp(0.0, 1.0);
    let r = (255.0 * (1.0 - p)) as u8;
    let g = (255.0 * (1.0 - 0.65 * p)) as u8;
    format!("rgb({r},{g},255)")
}

/// Heatmap of dense routing probabilities: one panel per routed layer,
/// rows are tasks, columns are experts.
pub fn heatmap_svg(snapshot: &RoutingSnapshot) -> String {
    const CELL: usize = 46;
    const LEFT: usize = 70;
    const TOP: usize = 34;
    const PANEL_GAP: usize = 28;
    let n = snapshot.n_experts.max(1);
    let layers = snapshot.layers();
    let panel_h = TOP + 3 * CELL;
    let width = LEFT + n * CELL + 20;
    let height = if layers.is_empty() {
        60
    } else {
        layers.len() * (panel_h + PANEL_GAP)
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"11\">\n"
    );
    if layers.is_empty() {
        svg.push_str("<text x=\"10\" y=\"30\">no routed layers</text>\n</svg>\n");
        return svg;
    }
    for (pi, layer) in layers.iter().enumerate() {
        let oy = pi * (panel_h + PANEL_GAP);
        let _ = writeln!(
            svg,
            "<text x=\"{LEFT}\" y=\"{}\" font-size=\"13\">layer {layer}: dense gate per task</text>",
            oy + 16
        );
        for (ti, task) in TaskId::ALL.iter().enumerate() {
            let y = oy + TOP + ti * CELL;
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{task}</text>",
                LEFT - 8,
                y + CELL / 2 + 4
            );
            let gate = &snapshot.gates[&(*layer, *task)];
            for (ei, &p) in gate.dense.iter().enumerate() {
                let x = LEFT + ei * CELL;
                let _ = writeln!(
                    svg,
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\" stroke=\"#888\"/>",
                    heat_color(p)
                );
                let text_fill = if p > 0.55 { "#ffffff" } else { "#000000" };
                let _ = writeln!(
                    svg,
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{text_fill}\">{p:.2}</text>",
                    x + CELL / 2,
                    y + CELL / 2 + 4
                );
            }
        }
        for ei in 0..n {
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">e{ei}</text>",
                LEFT + ei * CELL + CELL / 2,
                oy + TOP + 3 * CELL + 14
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Per-layer entropy line chart, one polyline per task.
pub fn entropy_svg(snapshot: &RoutingSnapshot) -> String {
    const W: usize = 420;
    const H: usize = 260;
    const ML: usize = 50;
    const MB: usize = 40;
    const MT: usize = 20;
    let layers = snapshot.layers();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{W}\" height=\"{H}\" font-family=\"monospace\" font-size=\"11\">\n"
    );
    if layers.is_empty() {
        svg.push_str("<text x=\"10\" y=\"30\">no routed layers</text>\n</svg>\n");
        return svg;
    }
    let per_layer = per_layer_entropy(snapshot);
    let h_max = (snapshot.n_experts.max(2) as f64).ln();
    let plot_w = W - ML - 20;
    let plot_h = H - MT - MB;
    let x_of = |i: usize| {
        ML as f64
            + if layers.len() == 1 {
                plot_w as f64 / 2.0
            } else {
                plot_w as f64 * i as f64 / (layers.len() - 1) as f64
            }
    };
    let y_of = |h: f64| MT as f64 + plot_h as f64 * (1.0 - (h / h_max).clamp(0.0, 1.0));
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"#000\"/>",
        MT + plot_h
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#000\"/>",
        MT + plot_h,
        ML + plot_w,
        MT + plot_h
    );
    let _ = writeln!(
        svg,
        "<text x=\"8\" y=\"{}\" >ln N={h_max:.2}</text>",
        MT + 8
    );
    let _ = writeln!(svg, "<text x=\"8\" y=\"{}\">0</text>", MT + plot_h);
    let colors = ["#c0392b", "#2980b9", "#27ae60"];
    for (ti, task) in TaskId::ALL.iter().enumerate() {
        let points: Vec<String> = layers
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{:.2},{:.2}", x_of(i), y_of(per_layer[&(*l, *task)])))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            colors[ti],
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{task}</text>",
            ML + plot_w - 30,
            MT + 14 + 14 * ti,
            colors[ti]
        );
    }
    for (i, layer) in layers.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{layer}</text>",
            x_of(i),
            MT + plot_h + 16
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the diagnostics in the requested format under `dir`, returning
/// the created file paths.
pub fn emit_report(
    snapshot: &RoutingSnapshot,
    format: ReportFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>, AnalysisError> {
    std::fs::create_dir_all(dir).map_err(|source| AnalysisError {
        path: dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            for (name, contents) in [
                ("entropy.csv", entropy_csv(snapshot)),
                ("dominance.csv", dominance_csv(snapshot)),
                ("similarity.csv", similarity_csv(snapshot)),
            ] {
                let path = dir.join(name);
                write_file(&path, &contents)?;
                written.push(path);
            }
        }
        ReportFormat::Svg => {
            for (name, contents) in [
                ("dominance_heatmap.svg", heatmap_svg(snapshot)),
                ("entropy_by_layer.svg", entropy_svg(snapshot)),
            ] {
                let path = dir.join(name);
                write_file(&path, &contents)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn snapshot() -> RoutingSnapshot {
        let cfg = ModelConfig::tiny(32);
        let model: Model<f64> = Model::from_config(&cfg).unwrap();
        RoutingSnapshot::from_model(&model).unwrap()
    }

    #[test]
    fn dominance_row_count_is_layers_by_tasks_by_experts() {
        let snap = snapshot();
        let csv = dominance_csv(&snap);
        let rows = csv.lines().count() - 1;
        assert_eq!(rows, 2 * 3 * 3); // |M| * tasks * N for the tiny config
    }

    #[test]
    fn empty_snapshot_yields_header_only_csv() {
        let empty = RoutingSnapshot::default();
        assert_eq!(entropy_csv(&empty), "task,entropy\n");
        assert_eq!(dominance_csv(&empty), "layer,task,expert,probability,top1\n");
        let sim = similarity_csv(&empty);
        assert!(sim.starts_with("task,pol,imp,rea\n"));
    }

    #[test]
    fn svg_output_is_deterministic_and_self_contained() {
        let snap = snapshot();
        let a = heatmap_svg(&snap);
        let b = heatmap_svg(&snap);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg xmlns="));
        assert!(a.ends_with("</svg>\n"));
        assert!(!a.contains("href"));
        let e = entropy_svg(&snap);
        assert!(e.contains("polyline"));
    }

    #[test]
    fn emit_writes_requested_files() {
        let snap = snapshot();
        let dir = tempfile::tempdir().unwrap();
        let csvs = emit_report(&snap, ReportFormat::Csv, dir.path()).unwrap();
        assert_eq!(csvs.len(), 3);
        let svgs = emit_report(&snap, ReportFormat::Svg, dir.path()).unwrap();
        assert_eq!(svgs.len(), 2);
        for p in csvs.iter().chain(&svgs) {
            assert!(p.exists(), "{p:?}");
        }
    }
}
