use std::fmt::Write as _;

use crate::synthworld::{Shape, Size, Slot, WorldImage};

/// Canvas edge in SVG user units.
pub const CANVAS: f64 = 200.0;

fn slot_svg(out: &mut String, slot: &Slot, cx: f64, cy: f64) {
    let r = match slot.size {
        Size::Small => 20.0,
        Size::Large => 38.0,
    };
    let fill = slot.color.css();
    let _ = match slot.shape {
        Shape::Circle => write!(out, r#"<circle cx="{cx}" cy="{cy}" r="{r}" fill="{fill}"/>"#),
        Shape::Square => write!(
            out,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}"/>"#,
            cx - r,
            cy - r,
            2.0 * r,
            2.0 * r
        ),
        Shape::Triangle => write!(
            out,
            r#"<polygon points="{},{} {},{} {},{}" fill="{fill}"/>"#,
            cx,
            cy - r,
            cx - r,
            cy + r,
            cx + r,
            cy + r
        ),
    };
}

/// Draws the image on a fixed square canvas, one grid cell per slot in
/// reading order. Absent slots leave their cell empty.
pub fn render_svg(image: &WorldImage) -> String {
    let n = image.slots.len().max(1);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (cw, ch) = (CANVAS / cols as f64, CANVAS / rows as f64);
    let mut out = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {CANVAS} {CANVAS}" width="{CANVAS}" height="{CANVAS}"><rect width="{CANVAS}" height="{CANVAS}" fill="#f4f4f4" stroke="#888"/>"##
    );
    for (i, slot) in image.slots.iter().enumerate() {
        if !slot.present {
            continue;
        }
        let (c, r) = (i % cols, i / cols);
        slot_svg(&mut out, slot, (c as f64 + 0.5) * cw, (r as f64 + 0.5) * ch);
    }
    out.push_str("</svg>");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::Color;

    #[test]
    fn one_element_per_present_slot() {
        let mut slots = vec![Slot::absent(); 4];
        slots[0] = Slot {
            present: true,
            shape: Shape::Circle,
            color: Color::Blue,
            size: Size::Large,
        };
        slots[3] = Slot {
            present: true,
            shape: Shape::Triangle,
            color: Color::Red,
            size: Size::Small,
        };
        let svg = render_svg(&WorldImage {
            slots,
            domain: crate::synthworld::DomainTag::Base,
        });
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert!(svg.contains(Color::Blue.css()));
    }
}
