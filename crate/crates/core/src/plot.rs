//! Plain SVG plots: smoothed learning curve and top-down trajectories.

use std::fmt::Write as _;
use std::io::BufRead;

use crate::ddpg::{EpisodeRecord, Source};
use crate::eval::StepRecord;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("nothing to plot: {0}")]
    Empty(&'static str),
    #[error("log line {line}: {message}")]
    BadLine { line: usize, message: String },
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

pub fn read_train_log<R: BufRead>(input: R) -> Result<Vec<EpisodeRecord>, PlotError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let bad = |message: String| PlotError::BadLine { line: i + 1, message };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?);
        }
    }
    Ok(out)
}

/// Trailing moving average over `window` points.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, equal: bool) -> Self {
        let lo = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
        let hi = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
        let (mut x0, mut x1) = (lo(&mut xs.clone()), hi(&mut xs.clone()));
        let (mut y0, mut y1) = (lo(&mut ys.clone()), hi(&mut ys.clone()));
        if x1 - x0 < 1e-9 {
            x0 -= 1.0;
            x1 += 1.0;
        }
        if y1 - y0 < 1e-9 {
            y0 -= 1.0;
            y1 += 1.0;
        }
        if equal {
            // same cm per pixel on both axes
            let sx = (x1 - x0) / (W - 2.0 * MARGIN);
            let sy = (y1 - y0) / (H - 2.0 * MARGIN);
            let s = sx.max(sy);
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            x0 = cx - s * (W - 2.0 * MARGIN) / 2.0;
            x1 = cx + s * (W - 2.0 * MARGIN) / 2.0;
            y0 = cy - s * (H - 2.0 * MARGIN) / 2.0;
            y1 = cy + s * (H - 2.0 * MARGIN) / 2.0;
        }
        Axes { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        (
            MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN),
            H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN),
        )
    }

    fn polyline(&self, id: &str, color: &str, pts: impl Iterator<Item = (f64, f64)>) -> String {
        let mut d = String::new();
        for (x, y) in pts {
            let (a, b) = self.px(x, y);
            let _ = write!(d, "{a:.2},{b:.2} ");
        }
        format!("<polyline id=\"{id}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n", d.trim_end())
    }

    fn frame(&self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n");
        s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
        let _ = writeln!(
            s,
            "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
            W - 2.0 * MARGIN,
            H - 2.0 * MARGIN
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"30\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>", W / 2.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{xlabel}</text>", W / 2.0, H - 12.0);
        let _ = writeln!(
            s,
            "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{ylabel}</text>",
            H / 2.0,
            H / 2.0
        );
        for (v, anchor, x, y) in [
            (self.x0, "start", MARGIN, H - MARGIN + 16.0),
            (self.x1, "end", W - MARGIN, H - MARGIN + 16.0),
        ] {
            let _ = writeln!(s, "<text x=\"{x}\" y=\"{y}\" text-anchor=\"{anchor}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>", tick(v));
        }
        for (v, y) in [(self.y0, H - MARGIN), (self.y1, MARGIN + 8.0)] {
            let _ = writeln!(s, "<text x=\"{}\" y=\"{y}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{}</text>", MARGIN - 4.0, tick(v));
        }
        s
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Episode against smoothed mean step reward, one line per source that
/// occurs in the log. Records are sorted by episode first.
pub fn learning_curve_svg(records: &[EpisodeRecord], window: usize) -> Result<String, PlotError> {
    if records.is_empty() {
        return Err(PlotError::Empty("training log has no episodes"));
    }
    let mut sorted: Vec<&EpisodeRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.episode);
    let series: Vec<(Source, Vec<(f64, f64)>)> = [Source::Actor, Source::Htg]
        .into_iter()
        .filter_map(|src| {
            let rs: Vec<&&EpisodeRecord> = sorted.iter().filter(|r| r.source == src).collect();
            if rs.is_empty() {
                return None;
            }
            let ys = smooth(&rs.iter().map(|r| r.mean_reward).collect::<Vec<_>>(), window);
            Some((src, rs.iter().map(|r| r.episode as f64).zip(ys).collect()))
        })
        .collect();
    let all = series.iter().flat_map(|(_, p)| p.iter().copied());
    let ax = Axes::fit(all.clone().map(|p| p.0), all.map(|p| p.1).chain([0.0]), false);
    let mut s = ax.frame("Average episode reward", "episode", "mean step reward");
    for (src, pts) in &series {
        let color = if *src == Source::Actor { "#1f77b4" } else { "#d62728" };
        s += &ax.polyline(src.as_str(), color, pts.iter().copied());
    }
    for (i, (src, _)) in series.iter().enumerate() {
        let color = if *src == Source::Actor { "#1f77b4" } else { "#d62728" };
        let y = MARGIN + 16.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>",
            MARGIN + 8.0,
            src.as_str()
        );
    }
    s += "</svg>\n";
    Ok(s)
}

/// Top-down view of one evaluation run: tracker and target paths.
pub fn trajectory_svg(log: &[StepRecord], run: usize) -> Result<String, PlotError> {
    let steps: Vec<&StepRecord> = log.iter().filter(|r| r.run == run).collect();
    if steps.is_empty() {
        return Err(PlotError::Empty("no steps for this run"));
    }
    let xs = steps.iter().flat_map(|r| [r.tracker.x, r.target.x]);
    let ys = steps.iter().flat_map(|r| [r.tracker.y, r.target.y]);
    let ax = Axes::fit(xs, ys, true);
    let mut s = ax.frame(&format!("Run {run}"), "x (cm)", "y (cm)");
    s += &ax.polyline("tracker", "#1f77b4", steps.iter().map(|r| (r.tracker.x, r.tracker.y)));
    s += &ax.polyline("target", "#d62728", steps.iter().map(|r| (r.target.x, r.target.y)));
    for (pose, color) in [(&steps[0].tracker, "#1f77b4"), (&steps[0].target, "#d62728")] {
        let (x, y) = ax.px(pose.x, pose.y);
        let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"{color}\"/>");
    }
    s += "</svg>\n";
    Ok(s)
}

/// Distinct run indices in order of first appearance.
pub fn runs_in(log: &[StepRecord]) -> Vec<usize> {
    let mut runs: Vec<usize> = Vec::new();
    for r in log {
        if runs.last() != Some(&r.run) && !runs.contains(&r.run) {
            runs.push(r.run);
        }
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{run_scenario, EvalPolicy, EvalSettings, Scenario};

    fn rec(episode: u64, source: Source, r: f64) -> EpisodeRecord {
        EpisodeRecord {
            episode,
            worker: 0,
            source,
            steps: 10,
            total_reward: r * 10.0,
            mean_reward: r,
            updates: 0,
            critic_loss: None,
            actor_loss: None,
            aux_loss: None,
        }
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smooth(&[2.0; 5], 10), vec![2.0; 5]);
    }

    fn polyline_xs(svg: &str, id: &str) -> Vec<f64> {
        let start = svg.find(&format!("id=\"{id}\"")).unwrap();
        let pts = &svg[start..];
        let pts = &pts[pts.find("points=\"").unwrap() + 8..];
        let pts = &pts[..pts.find('"').unwrap()];
        pts.split(' ').map(|p| p.split(',').next().unwrap().parse().unwrap()).collect()
    }

    #[test]
    fn learning_curve_x_axis_is_monotone() {
        let recs: Vec<_> = [3, 0, 2, 1, 4, 5].iter().map(|&e| rec(e, if e % 2 == 0 { Source::Actor } else { Source::Htg }, e as f64 * 0.01)).collect();
        let svg = learning_curve_svg(&recs, 2).unwrap();
        assert!(svg.starts_with("<svg"));
        for id in ["actor", "htg"] {
            let xs = polyline_xs(&svg, id);
            assert_eq!(xs.len(), 3);
            assert!(xs.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(matches!(learning_curve_svg(&[], 5), Err(PlotError::Empty(_))));
    }

    #[test]
    fn trajectory_has_both_paths() {
        let sc: Scenario = "circular:5:5:0.01".parse().unwrap();
        let s = EvalSettings {
            runs: 2,
            steps: 30,
            ..EvalSettings::default()
        };
        let (_, log) = run_scenario(&EvalPolicy::Htg, &sc, &s).unwrap();
        assert_eq!(runs_in(&log), vec![0, 1]);
        let svg = trajectory_svg(&log, 1).unwrap();
        assert_eq!(polyline_xs(&svg, "tracker").len(), 30);
        assert_eq!(polyline_xs(&svg, "target").len(), 30);
        assert!(trajectory_svg(&log, 9).is_err());
    }

    #[test]
    fn reads_train_log_lines() {
        let text = format!("{}\n\n{}\n", serde_json::to_string(&rec(0, Source::Htg, 0.1)).unwrap(), serde_json::to_string(&rec(1, Source::Actor, 0.2)).unwrap());
        let recs = read_train_log(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(matches!(read_train_log(&b"{oops"[..]), Err(PlotError::BadLine { line: 1, .. })));
    }
}
