//! Hand-emitted SVG bar charts. No plotting dependency, no timestamps, so
//! output bytes depend only on the data.

/// One bar: label and height.
#[derive(Debug, Clone)]
pub struct Bar {
    pub label: String,
    pub value: f64,
}

/// Optional error whiskers per bar, same order as the bars.
#[derive(Debug, Clone, Default)]
pub struct ChartOptions {
    pub errors: Vec<f64>,
    /// Thin out x-axis labels to every n-th bar (0 = auto).
    pub label_every: usize,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 54.0;
const MARGIN_RIGHT: f64 = 16.0;
const MARGIN_TOP: f64 = 34.0;
const MARGIN_BOTTOM: f64 = 46.0;

fn fmt(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

/// Render a bar chart. Values may be counts or scores; the y-axis starts at
/// zero (or at the most negative value when bars go negative).
pub fn bar_chart(title: &str, bars: &[Bar], opts: &ChartOptions) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let max = bars
        .iter()
        .enumerate()
        .map(|(i, b)| b.value + opts.errors.get(i).copied().unwrap_or(0.0))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let min = bars.iter().map(|b| b.value).fold(0.0f64, f64::min);
    let span = max - min;
    let y_of = |v: f64| MARGIN_TOP + plot_h * (1.0 - (v - min) / span);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    ));

    // axes
    let x0 = MARGIN_LEFT;
    let y0 = y_of(min.min(0.0));
    svg.push_str(&format!(
        "  <line x1=\"{x0}\" y1=\"{}\" x2=\"{x0}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_TOP, MARGIN_TOP + plot_h
    ));
    svg.push_str(&format!(
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        MARGIN_LEFT + plot_w
    ));
    // y ticks
    for t in 0..=4 {
        let v = min + span * t as f64 / 4.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{y}\" x2=\"{x0}\" y2=\"{y}\" stroke=\"black\"/>\n",
            x0 - 4.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            x0 - 7.0,
            y + 4.0,
            fmt(v)
        ));
    }

    if bars.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let slot = plot_w / bars.len() as f64;
    let bar_w = (slot * 0.8).min(60.0);
    let label_every = if opts.label_every > 0 {
        opts.label_every
    } else {
        (bars.len() / 16).max(1)
    };
    for (i, bar) in bars.iter().enumerate() {
        let cx = MARGIN_LEFT + slot * (i as f64 + 0.5);
        let y_top = y_of(bar.value.max(0.0));
        let y_bot = y_of(bar.value.min(0.0));
        svg.push_str(&format!(
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"#4878a8\" stroke=\"none\"/>\n",
            cx - bar_w / 2.0,
            y_top,
            bar_w,
            (y_bot - y_top).max(0.0)
        ));
        if let Some(&e) = opts.errors.get(i) {
            if e > 0.0 {
                let y_hi = y_of(bar.value + e);
                let y_lo = y_of(bar.value - e);
                svg.push_str(&format!(
                    "  <line x1=\"{cx:.2}\" y1=\"{y_hi:.2}\" x2=\"{cx:.2}\" y2=\"{y_lo:.2}\" \
                     stroke=\"black\"/>\n"
                ));
            }
        }
        if i % label_every == 0 {
            svg.push_str(&format!(
                "  <text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                cx,
                MARGIN_TOP + plot_h + 16.0,
                xml_escape(&bar.label)
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_well_formed() {
        let bars = vec![
            Bar { label: "a".into(), value: 1.0 },
            Bar { label: "b".into(), value: 2.5 },
            Bar { label: "<c>".into(), value: 0.5 },
        ];
        let opts = ChartOptions {
            errors: vec![0.1, 0.2, 0.0],
            label_every: 1,
        };
        let a = bar_chart("scores", &bars, &opts);
        let b = bar_chart("scores", &bars, &opts);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert!(a.contains("&lt;c&gt;"));
        assert_eq!(a.matches("<rect").count(), 3);
    }

    #[test]
    fn empty_chart_has_axes_only() {
        let svg = bar_chart("empty", &[], &ChartOptions::default());
        assert!(svg.contains("<line"));
        assert_eq!(svg.matches("<rect").count(), 0);
    }
}
