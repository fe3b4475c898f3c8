use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvements {
    pub s1: f64,
    pub s2: f64,
    pub merged: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperlinearityReport {
    pub acc_base: f64,
    pub acc_s1: f64,
    pub acc_s2: f64,
    pub acc_merged: f64,
    /// `(accᵢ − base) / base`; `None` when the base accuracy is 0.
    pub relative: Option<Improvements>,
    /// `accᵢ − base`.
    pub absolute: Improvements,
    /// `base + (s1 − base) + (s2 − base)`.
    pub additive_bound: f64,
    /// `merged − additive_bound`.
    pub excess: f64,
    pub superlinear: bool,
}

impl SuperlinearityReport {
    pub fn to_table(&self) -> String {
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let rel = |f: fn(&Improvements) -> f64| {
            self.relative.as_ref().map_or_else(|| "n/a".to_string(), |r| format!("{:+.0}%", 100.0 * f(r)))
        };
        let mut out = String::new();
        out.push_str(&format!("{:<10} {:>9} {:>11}\n", "model", "acc (%)", "rel. gain"));
        out.push_str(&format!("{:<10} {:>9} {:>11}\n", "base", pct(self.acc_base), "-"));
        out.push_str(&format!("{:<10} {:>9} {:>11}\n", "skill 1", pct(self.acc_s1), rel(|r| r.s1)));
        out.push_str(&format!("{:<10} {:>9} {:>11}\n", "skill 2", pct(self.acc_s2), rel(|r| r.s2)));
        out.push_str(&format!("{:<10} {:>9} {:>11}\n", "merged", pct(self.acc_merged), rel(|r| r.merged)));
        out.push_str(&format!(
            "additive bound {} pts, excess {:+.2} pts, super-linear: {}\n",
            pct(self.additive_bound),
            100.0 * self.excess,
            self.superlinear
        ));
        out
    }
}

/// Compares the merged model's gain against the sum of the single-skill
/// gains. Accuracies are fractions in `[0, 1]`.
pub fn superlinearity_report(acc_base: f64, acc_s1: f64, acc_s2: f64, acc_merged: f64) -> Result<SuperlinearityReport> {
    for (name, v) in [("base", acc_base), ("s1", acc_s1), ("s2", acc_s2), ("merged", acc_merged)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(format!("accuracy {name} = {v} outside [0, 1]")));
        }
    }
    let absolute = Improvements { s1: acc_s1 - acc_base, s2: acc_s2 - acc_base, merged: acc_merged - acc_base };
    let relative = (acc_base > 0.0).then(|| Improvements {
        s1: absolute.s1 / acc_base,
        s2: absolute.s2 / acc_base,
        merged: absolute.merged / acc_base,
    });
    let additive_bound = acc_base + absolute.s1 + absolute.s2;
    let excess = acc_merged - additive_bound;
    let superlinear = match &relative {
        Some(r) => r.merged > r.s1 + r.s2,
        None => absolute.merged > absolute.s1 + absolute.s2,
    };
    Ok(SuperlinearityReport { acc_base, acc_s1, acc_s2, acc_merged, relative, absolute, additive_bound, excess, superlinear })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal SVG bar chart; values are plotted against the largest one.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let (w, h, pad, bar_w) = (80 * bars.len().max(1) + 60, 260, 40, 50);
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2,
        escape(title)
    );
    let plot_h = (h - 2 * pad - 20) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let bh = (v / max * plot_h).max(0.0);
        let x = pad + i * 80;
        let y = (h - pad) as f64 - bh;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y:.1}\" width=\"{bar_w}\" height=\"{bh:.1}\" fill=\"#4a7ab5\"/>\n\
             <text x=\"{}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            x + bar_w / 2,
            y - 4.0,
            x + bar_w / 2,
            h - pad + 15,
            escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
