//! SVG rendering of `(dx, dy, pen)` stroke sequences.

use std::fmt::Write;

use swavenet::{Dataset, Sequence};

const MARGIN: f64 = 2.0;

/// Absolute pen positions split into strokes. A frame whose pen channel
/// exceeds 0.5 moves the pen without drawing and starts a new stroke.
pub fn polylines(seq: &Sequence) -> Vec<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    let (mut x, mut y) = (0.0, 0.0);
    let mut current = vec![(x, y)];
    for t in 0..seq.len() {
        let f = seq.frame(t);
        x += f[0];
        y += f[1];
        if f[2] > 0.5 {
            if current.len() >= 2 {
                out.push(std::mem::take(&mut current));
            }
            current = vec![(x, y)];
        } else {
            current.push((x, y));
        }
    }
    if current.len() >= 2 {
        out.push(current);
    }
    out
}

fn bounds(lines: &[Vec<(f64, f64)>]) -> (f64, f64, f64, f64) {
    let pts = lines.iter().flatten();
    pts.fold((0.0f64, 0.0f64, 0.0f64, 0.0f64), |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)))
}

/// One row per sequence, stacked top to bottom; `y` points up.
pub fn render(data: &Dataset) -> String {
    let rows: Vec<_> = data.sequences.iter().map(polylines).collect();
    let boxes: Vec<_> = rows.iter().map(|r| bounds(r)).collect();
    let width = boxes.iter().map(|b| b.2 - b.0).fold(0.0, f64::max) + 2.0 * MARGIN;
    let height: f64 = boxes.iter().map(|b| b.3 - b.1 + 2.0 * MARGIN).sum::<f64>().max(2.0 * MARGIN);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.3}" height="{h:.3}" viewBox="0 0 {w:.3} {h:.3}">"#,
        w = width,
        h = height
    )
    .unwrap();
    let mut top = 0.0;
    for (i, (lines, b)) in rows.iter().zip(&boxes).enumerate() {
        writeln!(svg, r#"<g id="sequence-{i}">"#).unwrap();
        for line in lines {
            let pts: Vec<String> = line
                .iter()
                .map(|&(x, y)| format!("{:.3},{:.3}", x - b.0 + MARGIN, top + b.3 - y + MARGIN))
                .collect();
            writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="black" stroke-width="0.3" stroke-linecap="round"/>"#,
                pts.join(" ")
            )
            .unwrap();
        }
        svg.push_str("</g>\n");
        top += b.3 - b.1 + 2.0 * MARGIN;
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: &[[f64; 3]]) -> Sequence {
        Sequence::new(frames.iter().flatten().copied().collect(), 3).unwrap()
    }

    #[test]
    fn pen_lifts_split_strokes() {
        let s = seq(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 5.0, 1.0], [0.0, 1.0, 0.0], [2.0, 0.0, 0.9]]);
        let lines = polylines(&s);
        assert_eq!(lines, vec![vec![(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], vec![(2.0, 5.0), (2.0, 6.0)]]);
    }

    #[test]
    fn pen_up_everywhere_draws_nothing() {
        let s = seq(&[[1.0, 1.0, 1.0], [0.5, 0.0, 1.0], [0.5, 0.0, 0.7]]);
        assert!(polylines(&s).is_empty());
        assert!(!render(&Dataset::new(vec![s])).contains("<polyline"));
    }

    #[test]
    fn rows_stack_without_overlap() {
        let a = seq(&[[1.0, 2.0, 0.0]]);
        let svg = render(&Dataset::new(vec![a.clone(), a]));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(r#"points="2.000,4.000 3.000,2.000""#), "{svg}");
        assert!(svg.contains(r#"points="2.000,10.000 3.000,8.000""#), "{svg}");
    }
}
