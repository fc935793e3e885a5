use std::fmt::Write;
use std::path::Path;

use crate::error::Result;
use crate::layout::{raster_sort, BBox, CategoryVocab, Layout};
use crate::train::write_atomic;

/// Golden-angle hue spacing keeps neighbouring ids visually distinct.
pub fn category_hue(id: u32) -> f64 {
    (f64::from(id) * 137.508) % 360.0
}

fn num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Rectangle attributes for a unit-canvas box drawn on a `w x h` canvas.
pub fn svg_rect(b: &BBox, canvas_w: f64, canvas_h: f64) -> String {
    format!(
        r#"x="{}" y="{}" width="{}" height="{}""#,
        num((b.cx - b.w / 2.0) * canvas_w),
        num((b.cy - b.h / 2.0) * canvas_h),
        num(b.w * canvas_w),
        num(b.h * canvas_h)
    )
}

/// SVG 1.1 document with one labelled rectangle per element, drawn in
/// raster order.
pub fn render_svg(layout: &Layout, categories: &CategoryVocab) -> Result<String> {
    let (w, h) = (layout.canvas_w, layout.canvas_h);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        num(w),
        num(h),
        num(w),
        num(h)
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"#, num(w), num(h));
    let font = num((h / 40.0).max(6.0));
    for e in &raster_sort(layout).elements {
        let b = e.to_box(layout.bits)?;
        let hue = num(category_hue(e.category));
        let label = escape(categories.name(e.category).unwrap_or("?"));
        let _ = writeln!(
            s,
            r#"<rect {} fill="hsl({hue}, 70%, 60%)" fill-opacity="0.5" stroke="hsl({hue}, 70%, 35%)"/>"#,
            svg_rect(&b, w, h)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="{font}" font-family="sans-serif">{label}</text>"#,
            num((b.cx - b.w / 2.0) * w + 2.0),
            num((b.cy - b.h / 2.0) * h + (h / 40.0).max(6.0))
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg(layout: &Layout, categories: &CategoryVocab, path: &Path) -> Result<()> {
    write_atomic(path, render_svg(layout, categories)?.as_bytes())
}
