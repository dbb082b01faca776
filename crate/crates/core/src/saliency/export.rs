use std::fmt::Write as _;
use std::io::Write;

use super::{ClusterTree, SaliencyMatrix};
use crate::error::{Error, Result};

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("writing csv: {e}"))
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        v.to_string()
    }
}

/// Header row of symbols, one row per layer; missing cells are `NA`.
pub fn write_matrix_csv<W: Write>(out: W, values: &[f64], layers: &[String], symbols: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["layer".to_string()];
    header.extend(symbols.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (l, name) in layers.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(values[l * symbols.len()..(l + 1) * symbols.len()].iter().map(|&v| cell(v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Input(format!("writing csv: {e}")))
}

pub fn write_tree_csv<W: Write>(out: W, tree: &ClusterTree, labels: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "left", "right", "height", "size", "left_label", "right_label"])
        .map_err(csv_err)?;
    let label = |id: usize| labels.get(id).cloned().unwrap_or_else(|| format!("cluster{id}"));
    for (i, m) in tree.merges.iter().enumerate() {
        w.write_record([
            i.to_string(),
            m.left.to_string(),
            m.right.to_string(),
            m.height.to_string(),
            m.size.to_string(),
            label(m.left),
            label(m.right),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Input(format!("writing csv: {e}")))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn color(v: f64) -> String {
    if v.is_nan() {
        return "#bbbbbb".into();
    }
    // dark blue -> teal -> yellow
    let stops = [(0.0, (68, 1, 84)), (0.5, (33, 145, 140)), (1.0, (253, 231, 37))];
    let v = v.clamp(0.0, 1.0);
    let (lo, hi) = if v <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let t = (v - lo.0) / (hi.0 - lo.0);
    let mix = |a: i32, b: i32| (a as f64 + (b - a) as f64 * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(lo.1 .0, hi.1 .0),
        mix(lo.1 .1, hi.1 .1),
        mix(lo.1 .2, hi.1 .2)
    )
}

/// Line segments of a dendrogram in (leaf-axis position, height) space.
fn dendrogram_segments(tree: &ClusterTree) -> Vec<[(f64, f64); 2]> {
    let order = tree.leaf_order();
    let mut pos = vec![0.0; tree.n_leaves + tree.merges.len()];
    let mut height = vec![0.0; tree.n_leaves + tree.merges.len()];
    for (i, &leaf) in order.iter().enumerate() {
        pos[leaf] = i as f64 + 0.5;
    }
    let mut segs = Vec::new();
    for (i, m) in tree.merges.iter().enumerate() {
        let id = tree.n_leaves + i;
        pos[id] = (pos[m.left] + pos[m.right]) / 2.0;
        height[id] = m.height;
        segs.push([(pos[m.left], height[m.left]), (pos[m.left], m.height)]);
        segs.push([(pos[m.right], height[m.right]), (pos[m.right], m.height)]);
        segs.push([(pos[m.left], m.height), (pos[m.right], m.height)]);
    }
    segs
}

/// Heatmap of `s` with rows and columns in dendrogram order, a row
/// dendrogram on the left and a column dendrogram on top.
pub fn render_clustermap(s: &SaliencyMatrix, rows: &ClusterTree, cols: &ClusterTree, title: &str) -> String {
    const CELL: f64 = 16.0;
    const DENDRO: f64 = 100.0;
    const LABEL: f64 = 130.0;
    const TOP: f64 = 30.0;
    let (l, k) = (s.n_layers(), s.n_classes());
    let x0 = DENDRO;
    let y0 = TOP + DENDRO;
    let width = x0 + k as f64 * CELL + LABEL;
    let height = y0 + l as f64 * CELL + 40.0;
    let row_order = rows.leaf_order();
    let col_order = cols.leaf_order();

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(svg, r#"<text x="4" y="16" font-size="13">{}</text>"#, escape(title));
    for (ri, &r) in row_order.iter().enumerate() {
        for (ci, &c) in col_order.iter().enumerate() {
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                x0 + ci as f64 * CELL,
                y0 + ri as f64 * CELL,
                color(s.get(r, c))
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{}</text>"#,
            x0 + k as f64 * CELL + 4.0,
            y0 + ri as f64 * CELL + CELL * 0.75,
            escape(&s.layer_names[r])
        );
    }
    for (ci, &c) in col_order.iter().enumerate() {
        let x = x0 + ci as f64 * CELL + CELL * 0.7;
        let y = y0 + l as f64 * CELL + 6.0;
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" transform="rotate(90 {x} {y})">{}</text>"#,
            escape(&s.phoneme_symbols[c])
        );
    }
    let max_h = |t: &ClusterTree| t.merges.iter().map(|m| m.height).fold(0.0, f64::max).max(1e-12);
    let (rh, ch) = (max_h(rows), max_h(cols));
    for [(p1, h1), (p2, h2)] in dendrogram_segments(rows) {
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            x0 - 4.0 - h1 / rh * (DENDRO - 10.0),
            y0 + p1 * CELL,
            x0 - 4.0 - h2 / rh * (DENDRO - 10.0),
            y0 + p2 * CELL
        );
    }
    for [(p1, h1), (p2, h2)] in dendrogram_segments(cols) {
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            x0 + p1 * CELL,
            y0 - 4.0 - h1 / ch * (DENDRO - 10.0),
            x0 + p2 * CELL,
            y0 - 4.0 - h2 / ch * (DENDRO - 10.0)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
