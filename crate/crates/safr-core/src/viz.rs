//! Self-contained SVG emitters: capacity barchart, token interference
//! heatmap, capacity/correlation token graph, and cross-layer panels.
//! All output is deterministic text — same trace and settings, same bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;

use crate::model::ForwardTrace;
use crate::repr_metrics::{self, LayerTag, RepresentationMatrix};
use crate::rng::stream_rng;

pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.3;
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const RADIUS_FLOOR: f64 = 2.0;
const LAYOUT_ITERS: usize = 200;
const SPRING_L0: f64 = 180.0;

#[derive(Debug, Clone)]
pub struct VizSpec {
    pub edge_threshold: f64,
    pub layout_seed: u64,
}

impl Default for VizSpec {
    fn default() -> Self {
        VizSpec {
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            layout_seed: 0,
        }
    }
}

fn fmt(v: f64) -> String {
    // fixed-point keeps output byte-identical across platforms
    format!("{:.2}", v)
}

fn svg_open(out: &mut String, title: &str) {
    out.push_str(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"640\" height=\"480\" viewBox=\"0 0 640 480\">\n",
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    out.push_str("<rect x=\"0\" y=\"0\" width=\"640\" height=\"480\" fill=\"#ffffff\"/>\n");
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Diverging scale over [-1, 1]: red for positive, blue for negative,
/// white at zero.
fn diverging_color(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if v >= 0.0 {
        format!("#ff{0:02x}{0:02x}", fade(v))
    } else {
        format!("#{0:02x}{0:02x}ff", fade(-v))
    }
}

/// One bar per token, height proportional to its value (capacity or p_i).
pub fn barchart_svg(tokens: &[String], values: &[f64], title: &str) -> String {
    assert_eq!(tokens.len(), values.len());
    let t = tokens.len();
    let mut out = String::new();
    svg_open(&mut out, title);
    let max = values.iter().cloned().fold(0.0_f64, f64::max).max(1e-12);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let slot = plot_w / t as f64;
    let bar_w = slot * 0.8;
    for (i, (tok, &v)) in tokens.iter().zip(values).enumerate() {
        let h = plot_h * (v / max);
        let x = MARGIN + i as f64 * slot + slot * 0.1;
        let y = HEIGHT - MARGIN - h;
        let _ = writeln!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#4878cf\"/>",
            fmt(x),
            fmt(y),
            fmt(bar_w),
            fmt(h)
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            fmt(x + bar_w / 2.0),
            fmt(HEIGHT - MARGIN + 14.0),
            escape(tok)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// T x T grid colored by the cosine matrix, labels on both axes.
pub fn heatmap_svg(tokens: &[String], cosine: &Array2<f64>, title: &str) -> String {
    let t = tokens.len();
    assert_eq!(cosine.nrows(), t);
    assert_eq!(cosine.ncols(), t);
    let mut out = String::new();
    svg_open(&mut out, title);
    let plot = (WIDTH.min(HEIGHT)) - 2.0 * MARGIN;
    let cell = plot / t as f64;
    for i in 0..t {
        for j in 0..t {
            let x = MARGIN + j as f64 * cell;
            let y = MARGIN + i as f64 * cell;
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\" stroke=\"#cccccc\" stroke-width=\"0.5\"/>",
                fmt(x),
                fmt(y),
                fmt(cell),
                fmt(cell),
                diverging_color(cosine[[i, j]])
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            fmt(MARGIN - 6.0),
            fmt(MARGIN + i as f64 * cell + cell / 2.0 + 3.0),
            escape(&tokens[i])
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            fmt(MARGIN + i as f64 * cell + cell / 2.0),
            fmt(MARGIN - 8.0),
            escape(&tokens[i])
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Seeded force-directed layout. Springs pull connected pairs toward
/// (1 - |cos|) * L0; a mild all-pairs repulsion keeps nodes apart.
fn force_layout(cosine: &Array2<f64>, threshold: f64, seed: u64) -> Vec<(f64, f64)> {
    let t = cosine.nrows();
    let mut rng = stream_rng(seed, "token-graph-layout");
    let cx = WIDTH / 2.0;
    let cy = HEIGHT / 2.0;
    let r0 = (WIDTH.min(HEIGHT)) / 2.0 - MARGIN;
    let mut pos: Vec<(f64, f64)> = (0..t)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / t as f64
                + rng.gen_range(-0.1..0.1);
            (cx + r0 * angle.cos(), cy + r0 * angle.sin())
        })
        .collect();
    if t < 2 {
        return pos;
    }
    for iter in 0..LAYOUT_ITERS {
        let step = 0.05 * (1.0 - iter as f64 / LAYOUT_ITERS as f64) + 0.005;
        let mut force = vec![(0.0_f64, 0.0_f64); t];
        for i in 0..t {
            for j in (i + 1)..t {
                let dx = pos[j].0 - pos[i].0;
                let dy = pos[j].1 - pos[i].1;
                let dist = (dx * dx + dy * dy).sqrt().max(1e-6);
                let (ux, uy) = (dx / dist, dy / dist);
                // repulsion
                let rep = 2000.0 / (dist * dist);
                force[i].0 -= ux * rep;
                force[i].1 -= uy * rep;
                force[j].0 += ux * rep;
                force[j].1 += uy * rep;
                let c = cosine[[i, j]];
                if c.abs() >= threshold {
                    let rest = (1.0 - c.abs()) * SPRING_L0;
                    let pull = dist - rest;
                    force[i].0 += ux * pull;
                    force[i].1 += uy * pull;
                    force[j].0 -= ux * pull;
                    force[j].1 -= uy * pull;
                }
            }
        }
        for i in 0..t {
            pos[i].0 = (pos[i].0 + step * force[i].0).clamp(MARGIN, WIDTH - MARGIN);
            pos[i].1 = (pos[i].1 + step * force[i].1).clamp(MARGIN, HEIGHT - MARGIN);
        }
    }
    pos
}

/// Token graph: circle radius proportional to sqrt(capacity) with a 2 px
/// floor; edges where |cosine| >= threshold, red positive / blue negative.
pub fn token_graph_svg(
    tokens: &[String],
    capacities: &[f64],
    cosine: &Array2<f64>,
    spec: &VizSpec,
    title: &str,
) -> String {
    let t = tokens.len();
    assert_eq!(capacities.len(), t);
    let mut out = String::new();
    svg_open(&mut out, title);
    let pos = force_layout(cosine, spec.edge_threshold, spec.layout_seed);
    for i in 0..t {
        for j in (i + 1)..t {
            let c = cosine[[i, j]];
            if c.abs() >= spec.edge_threshold {
                let color = if c >= 0.0 { "#d62728" } else { "#1f77b4" };
                let _ = writeln!(
                    out,
                    "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"{}\"/>",
                    fmt(pos[i].0),
                    fmt(pos[i].1),
                    fmt(pos[j].0),
                    fmt(pos[j].1),
                    color,
                    fmt(0.5 + 2.0 * c.abs())
                );
            }
        }
    }
    let cap_max = capacities.iter().cloned().fold(0.0_f64, f64::max).max(1e-12);
    for i in 0..t {
        let radius = (18.0 * (capacities[i] / cap_max).sqrt()).max(RADIUS_FLOOR);
        let _ = writeln!(
            out,
            "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"#4878cf\" fill-opacity=\"0.8\"/>",
            fmt(pos[i].0),
            fmt(pos[i].1),
            fmt(radius)
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            fmt(pos[i].0),
            fmt(pos[i].1 - radius - 4.0),
            escape(&tokens[i])
        );
    }
    out.push_str("</svg>\n");
    out
}

fn write_file(path: &Path, content: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, content)
}

pub fn emit_capacity_barchart(
    trace: &ForwardTrace,
    tokens: &[String],
    layer: LayerTag,
    path: &Path,
) -> std::io::Result<()> {
    let cap = repr_metrics::capacity(trace.layer(layer)).expect("non-empty trace");
    let svg = barchart_svg(
        tokens,
        cap.as_slice().unwrap(),
        &format!("capacity {}", layer.name()),
    );
    write_file(path, &svg)
}

pub fn emit_interference_heatmap(
    trace: &ForwardTrace,
    tokens: &[String],
    layer: LayerTag,
    path: &Path,
) -> std::io::Result<()> {
    let cos = repr_metrics::cosine_matrix(trace.layer(layer)).expect("non-empty trace");
    let svg = heatmap_svg(tokens, &cos, &format!("interference {}", layer.name()));
    write_file(path, &svg)
}

pub fn emit_token_graph(
    trace: &ForwardTrace,
    tokens: &[String],
    layer: LayerTag,
    spec: &VizSpec,
    path: &Path,
) -> std::io::Result<()> {
    let cap = repr_metrics::capacity(trace.layer(layer)).expect("non-empty trace");
    let cos = repr_metrics::cosine_matrix(trace.layer(layer)).expect("non-empty trace");
    let svg = token_graph_svg(
        tokens,
        cap.as_slice().unwrap(),
        &cos,
        spec,
        &format!("token graph {}", layer.name()),
    );
    write_file(path, &svg)
}

/// Head-averaged attention with each row renormalized to sum 1.
pub fn mean_attention(trace: &ForwardTrace) -> Array2<f64> {
    let mut mean = trace.attn_weights[0].clone();
    for a in &trace.attn_weights[1..] {
        mean = mean + a;
    }
    mean /= trace.attn_weights.len() as f64;
    for mut row in mean.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    mean
}

/// Capacity + interference panel per layer (embedding, vmask, attention,
/// fc1, fc2): 10 files named `{example_id}_{layer}_{panel}.svg`. The vmask
/// capacity panel plots p_i; the attention panels are computed on rows of
/// the head-averaged attention matrix.
pub fn emit_cross_layer(
    trace: &ForwardTrace,
    tokens: &[String],
    example_id: &str,
    dir: &Path,
) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let attn_rows = RepresentationMatrix::new(LayerTag::AttentionOut, mean_attention(trace));
    let panels: Vec<(&str, Vec<f64>, Array2<f64>)> = vec![
        (
            "embedding",
            repr_metrics::capacity(&trace.embedding).unwrap().to_vec(),
            repr_metrics::cosine_matrix(&trace.embedding).unwrap(),
        ),
        (
            "vmask",
            trace.mask_probs.to_vec(),
            repr_metrics::cosine_matrix(&trace.vmask_out).unwrap(),
        ),
        (
            "attention",
            repr_metrics::capacity(&attn_rows).unwrap().to_vec(),
            repr_metrics::cosine_matrix(&attn_rows).unwrap(),
        ),
        (
            "fc1",
            repr_metrics::capacity(&trace.fc1_out).unwrap().to_vec(),
            repr_metrics::cosine_matrix(&trace.fc1_out).unwrap(),
        ),
        (
            "fc2",
            repr_metrics::capacity(&trace.fc2_out).unwrap().to_vec(),
            repr_metrics::cosine_matrix(&trace.fc2_out).unwrap(),
        ),
    ];
    for (name, values, cosine) in &panels {
        let cap_path = dir.join(format!("{example_id}_{name}_capacity.svg"));
        write_file(
            &cap_path,
            &barchart_svg(tokens, values, &format!("capacity {name}")),
        )?;
        written.push(cap_path);
        let int_path = dir.join(format!("{example_id}_{name}_interference.svg"));
        write_file(
            &int_path,
            &heatmap_svg(tokens, cosine, &format!("interference {name}")),
        )?;
        written.push(int_path);
    }
    Ok(written)
}
