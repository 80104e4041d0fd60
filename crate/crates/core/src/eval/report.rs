// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tab-separated report tables. Lines starting with `#` are metadata.

use std::io::Write;

use super::composition::CompositionCell;
use super::metrics::{BetaRow, ConfigReport, MetricReport, SuppressionReport};
use crate::attribution::ModeFilter;

/// Prompt construction note carried by every eval table.
pub const BOS_NOTE: &str = "one BOS token prepended per prompt";

fn pct(x: f64) -> String {
    format!("{:.0}%", 100.0 * x)
}

fn signed(x: f64) -> String {
    format!("{x:+.1}")
}

fn header<W: Write>(w: &mut W, meta: &[(&str, String)]) -> std::io::Result<()> {
    writeln!(w, "# {BOS_NOTE}")?;
    for (k, v) in meta {
        writeln!(w, "# {k}: {v}")?;
    }
    Ok(())
}

fn metric_cells(m: &MetricReport) -> [String; 3] {
    [pct(m.io_gt_s1), pct(m.io_gt_s2), pct(m.top1)]
}

fn suppression_cells(s: &SuppressionReport) -> [String; 5] {
    [s.c_to_c, s.s2_to_s, s.c_to_b, s.s1_to_s, s.s1_s2_gap].map(signed)
}

/// Token attribution per config.
pub fn write_token_table<W: Write>(mut w: W, rows: &[ConfigReport], meta: &[(&str, String)]) -> std::io::Result<()> {
    header(&mut w, meta)?;
    writeln!(w, "Configuration\tIO>S1\tIO>S2\tTop-1\tTop-1*\tMean IO")?;
    for r in rows {
        let [a, b, c] = metric_cells(&r.metrics);
        writeln!(
            w,
            "{}\t{a}\t{b}\t{c}\t{}\t{}%",
            r.label,
            pct(r.metrics.top1_star),
            signed(r.metrics.mean_io_share)
        )?;
    }
    Ok(())
}

/// Duplicate-position credit per config.
pub fn write_suppression_table<W: Write>(
    mut w: W,
    rows: &[ConfigReport],
    meta: &[(&str, String)],
) -> std::io::Result<()> {
    header(&mut w, meta)?;
    writeln!(w, "Configuration\tC→C\tS2→S\tC→B\tS1→S\tS1–S2 gap")?;
    for r in rows {
        writeln!(w, "{}\t{}", r.label, suppression_cells(&r.suppression).join("\t"))?;
    }
    Ok(())
}

fn composition_row<W: Write>(
    w: &mut W,
    cells: &[CompositionCell],
    filter: ModeFilter,
    root: &str,
    uproles: &[String],
) -> std::io::Result<()> {
    let mut line = format!("{filter}\t{root}");
    for up in uproles {
        let cell = cells
            .iter()
            .find(|c| c.filter == filter && c.root_role == root && &c.upstream_role == up);
        line.push('\t');
        line.push_str(&cell.map_or_else(|| "--".into(), CompositionCell::display));
    }
    writeln!(w, "{line}")
}

fn upstream_roles(cells: &[CompositionCell]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in cells {
        if !out.contains(&c.upstream_role) {
            out.push(c.upstream_role.clone());
        }
    }
    out
}

/// Full matrix: every filter, every root role.
pub fn write_composition_matrix<W: Write>(
    mut w: W,
    cells: &[CompositionCell],
    meta: &[(&str, String)],
) -> std::io::Result<()> {
    header(&mut w, meta)?;
    let ups = upstream_roles(cells);
    writeln!(w, "Filter\tRoot\t{}", ups.join("\t"))?;
    let mut seen: Vec<(ModeFilter, &str)> = Vec::new();
    for c in cells {
        let key = (c.filter, c.root_role.as_str());
        if !seen.contains(&key) {
            seen.push(key);
            composition_row(&mut w, cells, key.0, key.1, &ups)?;
        }
    }
    Ok(())
}

/// Summary rows: each root role under its stated mode.
pub fn write_composition_summary<W: Write>(
    mut w: W,
    cells: &[CompositionCell],
    rows: &[(ModeFilter, &str)],
    meta: &[(&str, String)],
) -> std::io::Result<()> {
    header(&mut w, meta)?;
    let ups = upstream_roles(cells);
    writeln!(w, "Mode\tRoot\t{}", ups.join("\t"))?;
    for &(f, root) in rows {
        composition_row(&mut w, cells, f, root, &ups)?;
    }
    Ok(())
}

/// Default summary rows for the standard role table.
pub const SUMMARY_ROWS: [(ModeFilter, &str); 3] =
    [(ModeFilter::Q, "NM"), (ModeFilter::V, "S-Inh"), (ModeFilter::K, "Ind")];

pub fn write_beta_table<W: Write>(mut w: W, rows: &[BetaRow], meta: &[(&str, String)]) -> std::io::Result<()> {
    header(&mut w, meta)?;
    writeln!(w, "β\tIO>S1\tIO>S2\tS1→S\tS2→S\tS1–S2 gap\tMean IO")?;
    for r in rows {
        let s = &r.suppression;
        writeln!(
            w,
            "{:.1}\t{}\t{}\t{}\t{}\t{}\t{}%",
            r.beta,
            pct(r.metrics.io_gt_s1),
            pct(r.metrics.io_gt_s2),
            signed(s.s1_to_s),
            signed(s.s2_to_s),
            signed(s.s1_s2_gap),
            signed(r.metrics.mean_io_share)
        )?;
    }
    Ok(())
}

/// Token attribution, one row per model.
pub fn write_model_token_table<W: Write>(
    mut w: W,
    rows: &[(String, MetricReport)],
    meta: &[(&str, String)],
) -> std::io::Result<()> {
    header(&mut w, meta)?;
    writeln!(w, "Model\tIO>S1\tIO>S2\tTop-1\tMean IO\tP(IO)")?;
    for (name, m) in rows {
        let [a, b, c] = metric_cells(m);
        writeln!(w, "{name}\t{a}\t{b}\t{c}\t{}%\t{:.3}", signed(m.mean_io_share), m.mean_p_io)?;
    }
    Ok(())
}

/// Duplicate-position credit, one row per model.
pub fn write_model_suppression_table<W: Write>(
    mut w: W,
    rows: &[(String, SuppressionReport)],
    meta: &[(&str, String)],
) -> std::io::Result<()> {
    header(&mut w, meta)?;
    writeln!(w, "Model\tC→C\tS2→S\tC→B\tS1→S\tS1–S2 gap")?;
    for (name, s) in rows {
        writeln!(w, "{name}\t{}", suppression_cells(s).join("\t"))?;
    }
    Ok(())
}
