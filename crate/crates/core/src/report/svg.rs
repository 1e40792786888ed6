// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write;

use crate::cma::{EffectMatrix, RowAxis};
use crate::error::{Error, Result};

use super::Palette;

const CELL: usize = 28;
const LEFT: usize = 80;
const TOP: usize = 48;
const LEGEND: usize = 90;

pub(super) fn parse_hex(c: &str) -> Result<[u8; 3]> {
    let bad = || Error::InvalidConfig(format!("color `{c}` is not #rrggbb"));
    let h = c.strip_prefix('#').ok_or_else(bad)?;
    let v = hex::decode(h).map_err(|_| bad())?;
    v.try_into().map_err(|_| bad())
}

fn to_hex(c: [u8; 3]) -> String {
    format!("#{}", hex::encode(c))
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for i in 0..3 {
        out[i] = (a[i] as f64 + (b[i] as f64 - a[i] as f64) * t).round() as u8;
    }
    out
}

/// Diverging color for `v`, with `±scale` at the palette ends.
fn diverging(v: f64, scale: f64, p: &Palette) -> Result<String> {
    let zero = parse_hex(&p.zero)?;
    if scale == 0.0 {
        return Ok(to_hex(zero));
    }
    let t = (v / scale).clamp(-1.0, 1.0);
    let end = if t >= 0.0 {
        parse_hex(&p.positive)?
    } else {
        parse_hex(&p.negative)?
    };
    Ok(to_hex(lerp(zero, end, t.abs())))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn header(out: &mut String, width: usize, height: usize, comment: &str, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, "<!-- {} -->", comment.replace("--", "- -"));
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" font-size="14">{}</text>"#,
        LEFT,
        escape(title)
    );
}

/// Layer-by-row heatmap with a color scale centred at zero.
pub fn render_heatmap(
    m: &EffectMatrix,
    title: &str,
    palette: &Palette,
    comment: &str,
) -> Result<String> {
    if m.n_rows == 0 || m.n_layers == 0 {
        return Err(Error::Data("cannot render an empty matrix".into()));
    }
    let scale = m.max_abs();
    if !scale.is_finite() {
        return Err(Error::NonFiniteActivation("heatmap values".into()));
    }
    let width = LEFT + m.n_layers * CELL + LEGEND;
    let height = TOP + m.n_rows * CELL + 40;
    let mut out = String::new();
    header(&mut out, width, height, comment, title);
    let row_name = match m.row_axis {
        RowAxis::TokenPos => "token",
        RowAxis::Head => "head",
    };
    for r in 0..m.n_rows {
        let y = TOP + r * CELL;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{row_name} {r}</text>"#,
            LEFT - 6,
            y + CELL / 2 + 4
        );
        for l in 0..m.n_layers {
            let v = m.get(r, l);
            let _ = writeln!(
                out,
                r#"<rect class="cell" x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>{row_name} {r}, layer {l}: {v:.6}</title></rect>"#,
                LEFT + l * CELL,
                diverging(v, scale, palette)?
            );
        }
    }
    let base = TOP + m.n_rows * CELL;
    for l in 0..m.n_layers {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{l}</text>"#,
            LEFT + l * CELL + CELL / 2,
            base + 14
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">layer</text>"#,
        LEFT + m.n_layers * CELL / 2,
        base + 32
    );
    let lx = LEFT + m.n_layers * CELL + 20;
    for (i, (v, label)) in [
        (scale, format!("{scale:.4}")),
        (0.0, "0".to_string()),
        (-scale, format!("{:.4}", -scale)),
    ]
    .into_iter()
    .enumerate()
    {
        let y = TOP + i * 20;
        let _ = writeln!(
            out,
            r#"<rect x="{lx}" y="{y}" width="14" height="14" fill="{}"/><text x="{}" y="{}">{label}</text>"#,
            diverging(v, scale, palette)?,
            lx + 18,
            y + 11
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Horizontal bar chart, one bar per label, in the given order.
pub fn render_bar_chart(
    title: &str,
    labels: &[String],
    values: &[f64],
    palette: &Palette,
    comment: &str,
) -> Result<String> {
    if labels.is_empty() || labels.len() != values.len() {
        return Err(Error::Data(format!(
            "bar chart needs matching non-empty labels ({}) and values ({})",
            labels.len(),
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Data(
            "bar values must be finite and non-negative".into(),
        ));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let span = 300.0;
    let bar = 18;
    let width = LEFT + span as usize + 80;
    let height = TOP + labels.len() * (bar + 4) + 20;
    let mut out = String::new();
    header(&mut out, width, height, comment, title);
    parse_hex(&palette.bar)?;
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let y = TOP + i * (bar + 4);
        let w = if max > 0.0 { v / max * span } else { 0.0 };
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text><rect class="bar" x="{LEFT}" y="{y}" width="{w:.3}" height="{bar}" fill="{}"/><text x="{:.3}" y="{}">{v:.4}</text>"#,
            LEFT - 6,
            y + 13,
            escape(label),
            palette.bar,
            LEFT as f64 + w + 4.0,
            y + 13
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
