//! Static HTML heatmaps.
//!
//! Words are shaded by signed score on a diverging scale (red positive, blue
//! negative, no shading at zero), relative to the largest absolute score.
//! Frozen words are hatched grey; active words are underlined.

use std::fmt::Write;

use focal_core::surrogate::Provenance;

use crate::output::ExplanationRecord;

const TEMPLATE: &str = include_str!("../templates/report.html");

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn page(title: &str, content: &str) -> String {
    TEMPLATE
        .replace("{{title}}", &escape(title))
        .replace("{{content}}", content)
}

/// Background colour for `score`, or `None` for neutral.
pub fn shade(score: f64, max_abs: f64) -> Option<String> {
    if score == 0.0 || max_abs <= 0.0 || !score.is_finite() {
        return None;
    }
    let a = (score.abs() / max_abs).min(1.0);
    let (r, g, b) = if score > 0.0 { (214, 39, 40) } else { (31, 119, 180) };
    Some(format!("rgba({r},{g},{b},{a:.3})"))
}

pub fn render(rec: &ExplanationRecord) -> String {
    let d = &rec.diagnostics;
    let max_abs = rec.scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let mut html = String::new();
    let _ = write!(
        html,
        "<h1>{}</h1>\n<table class=\"meta\"><tr><td>method</td><td>{}</td></tr>\
         <tr><td>question</td><td>{}</td></tr><tr><td>answer</td><td>{}</td></tr>\
         <tr><td>active units</td><td>{} of {}</td></tr></table>\n",
        escape(&rec.id),
        d.method.as_str(),
        escape(&d.question),
        d.answer.as_str(),
        d.fit.n_active,
        rec.units.len()
    );
    html.push_str(
        "<p class=\"legend\"><span style=\"background:rgba(214,39,40,0.8)\">supports</span>\
         <span style=\"background:rgba(31,119,180,0.8)\">opposes</span>\
         <span class=\"frozen\">frozen</span><span class=\"active\">active</span>\
         <span class=\"ev\">evidence</span></p>\n",
    );

    let evidence = |u: &crate::output::UnitOut| {
        d.evidence.iter().any(|s| s.start < u.end && u.start < s.end)
    };
    html.push_str("<div class=\"doc\"><p>");
    for (i, u) in rec.units.iter().enumerate() {
        let frozen = d.provenance.get(i) == Some(&Provenance::Frozen);
        let mut class = String::from("w");
        class.push_str(if frozen { " frozen" } else { " active" });
        if evidence(u) {
            class.push_str(" ev");
        }
        let style = if frozen {
            String::new()
        } else {
            shade(rec.scores[i], max_abs)
                .map(|c| format!(" style=\"background:{c}\""))
                .unwrap_or_default()
        };
        let _ = write!(
            html,
            "<span class=\"{class}\"{style} title=\"#{i} {:.4}\">{}</span>",
            rec.scores[i],
            escape(&u.surface)
        );
        if d.paragraph_breaks.binary_search(&i).is_ok() {
            html.push_str("</p>\n<p>");
        } else if i + 1 < rec.units.len() {
            html.push(' ');
        }
    }
    html.push_str("</p></div>\n");

    if let Some(trace) = &d.scout {
        let _ = write!(
            html,
            "<h2>Scouting</h2>\n<p>stopped: {:?}, target samples {}, density floor {}</p>\n\
             <table class=\"grid\"><tr><th>t</th><th>level</th><th>units</th><th>kept</th>\
             <th>coverage</th><th>proxy samples</th></tr>\n<tr><td>0</td><td>document</td>\
             <td>1</td><td>1</td><td>{}</td><td>0</td></tr>\n",
            trace.stop, trace.k_target, trace.density_floor, trace.initial_coverage
        );
        for it in &trace.iterations {
            let _ = writeln!(
                html,
                "<tr><td>{}</td><td>{:?}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
                it.t,
                it.level,
                it.units.len(),
                it.kept.len(),
                it.coverage,
                it.proxy_samples
            );
        }
        html.push_str("</table>\n");
        if let Some(w) = &trace.warning {
            let _ = writeln!(html, "<p class=\"error\">{}</p>", escape(w));
        }
    }

    let b = &d.budget;
    let _ = write!(
        html,
        "<h2>Budget</h2>\n<table class=\"grid\"><tr><th></th><th>limit</th><th>tokens</th></tr>\n\
         <tr><td>target (scouting)</td><td></td><td>{}</td></tr>\n\
         <tr><td>target (scrutiny)</td><td></td><td>{}</td></tr>\n\
         <tr><td>target</td><td>{}</td><td>{}</td></tr>\n\
         <tr><td>proxy</td><td>{}</td><td>{}</td></tr>\n</table>\n\
         <p>prompt cost {}, samples planned {}, used {} (density {:.2})</p>\n",
        b.target_tokens_scout,
        b.target_tokens_scrutinize,
        limit(b.target_limit),
        b.target_tokens_total,
        limit(b.proxy_limit),
        b.proxy_tokens,
        b.prompt_cost,
        b.k_target,
        b.k_used,
        d.fit.density
    );
    page(&format!("{} ({})", rec.id, d.method.as_str()), &html)
}

fn limit(v: u64) -> String {
    if v == 0 {
        "unlimited".into()
    } else {
        v.to_string()
    }
}

pub fn render_error(name: &str, message: &str) -> String {
    page(
        name,
        &format!(
            "<h1>{}</h1>\n<p class=\"error\">{}</p>\n",
            escape(name),
            escape(message)
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("<b>\"x\" & 'y'</b>"), "&lt;b&gt;&quot;x&quot; &amp; &#39;y&#39;&lt;/b&gt;");
    }

    #[test]
    fn shading_is_diverging() {
        assert_eq!(shade(0.0, 1.0), None);
        assert_eq!(shade(0.5, 0.0), None);
        assert_eq!(shade(0.5, 1.0).unwrap(), "rgba(214,39,40,0.500)");
        assert_eq!(shade(-1.0, 1.0).unwrap(), "rgba(31,119,180,1.000)");
    }

    #[test]
    fn error_page_is_self_contained() {
        let html = render_error("bad.json", "expected value at line 1 <oops>");
        assert!(html.contains("&lt;oops&gt;"));
        assert!(!html.contains("http://") && !html.contains("https://"));
    }
}
