//! Static SVG summary of one episode: top-down trajectories, leader distance per
//! follower over time, and minimum follower separation over time.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::trajectory::{Role, TrajectoryRow};

pub const PANEL_WIDTH: f64 = 360.0;
pub const PANEL_HEIGHT: f64 = 300.0;
pub const MARGIN: f64 = 40.0;
pub const PANEL_TITLES: [&str; 3] = ["trajectories", "distance to leader (m)", "min follower distance (m)"];

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Affine map from data coordinates to a pixel rectangle, y pointing up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewTransform {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Pixel rectangle `(left, top, width, height)`.
    pub rect: (f64, f64, f64, f64),
}

impl ViewTransform {
    /// Fits the data bounds, widening degenerate ranges to one unit.
    pub fn fit(points: impl IntoIterator<Item = (f64, f64)>, rect: (f64, f64, f64, f64)) -> Self {
        let mut xr = (f64::INFINITY, f64::NEG_INFINITY);
        let mut yr = (f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points {
            xr = (xr.0.min(x), xr.1.max(x));
            yr = (yr.0.min(y), yr.1.max(y));
        }
        ViewTransform {
            x_range: widen(xr),
            y_range: widen(yr),
            rect,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (left, top, w, h) = self.rect;
        let u = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0);
        let v = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        (left + u * w, top + (1.0 - v) * h)
    }
}

fn widen(r: (f64, f64)) -> (f64, f64) {
    if !r.0.is_finite() || !r.1.is_finite() {
        (0.0, 1.0)
    } else if r.1 - r.0 < 1e-9 {
        (r.0 - 0.5, r.1 + 0.5)
    } else {
        r
    }
}

/// Pixel rectangle of panel `index` (0, 1, 2 from left to right).
pub fn panel_rect(index: usize) -> (f64, f64, f64, f64) {
    (
        MARGIN + index as f64 * (PANEL_WIDTH + MARGIN),
        MARGIN,
        PANEL_WIDTH,
        PANEL_HEIGHT,
    )
}

/// Per-step minimum pairwise follower distance, in `t` order.
pub fn min_pair_distances(rows: &[TrajectoryRow]) -> Vec<(usize, f64)> {
    let mut by_t: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.role == Role::Follower) {
        by_t.entry(r.t).or_default().push((r.x, r.y));
    }
    by_t.into_iter()
        .filter_map(|(t, pts)| {
            let mut best = f64::INFINITY;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    best = best.min((pts[i].0 - pts[j].0).hypot(pts[i].1 - pts[j].1));
                }
            }
            best.is_finite().then_some((t, best))
        })
        .collect()
}

/// Leader distance per follower id, each in `t` order.
pub fn leader_distances(rows: &[TrajectoryRow]) -> BTreeMap<usize, Vec<(usize, f64)>> {
    let leader: BTreeMap<usize, (f64, f64)> = rows
        .iter()
        .filter(|r| r.role == Role::Leader)
        .map(|r| (r.t, (r.x, r.y)))
        .collect();
    let mut out: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.role == Role::Follower) {
        if let Some(&(lx, ly)) = leader.get(&r.t) {
            out.entry(r.uav_id).or_default().push((r.t, (r.x - lx).hypot(r.y - ly)));
        }
    }
    for series in out.values_mut() {
        series.sort_by_key(|p| p.0);
    }
    out
}

fn polyline(svg: &mut String, view: &ViewTransform, pts: &[(f64, f64)], colour: &str, class: &str) {
    if pts.is_empty() {
        return;
    }
    let coords: Vec<String> = pts
        .iter()
        .map(|&(x, y)| {
            let (px, py) = view.apply(x, y);
            format!("{px:.3},{py:.3}")
        })
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline class="{class}" fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
        coords.join(" ")
    );
}

fn axes(svg: &mut String, index: usize, view: &ViewTransform, x_label: &str) {
    let (left, top, w, h) = view.rect;
    let _ = writeln!(
        svg,
        r##"<g class="axes"><rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="#444"/><text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text><text x="{}" y="{}" text-anchor="middle" font-size="11">{x_label}</text><text x="{left}" y="{}" font-size="10">{:.1}</text><text x="{}" y="{}" font-size="10" text-anchor="end">{:.1}</text><text x="{}" y="{}" font-size="10" text-anchor="end">{:.1}</text><text x="{}" y="{}" font-size="10" text-anchor="end">{:.1}</text></g>"##,
        left + w / 2.0,
        top - 12.0,
        PANEL_TITLES[index],
        left + w / 2.0,
        top + h + 30.0,
        top + h + 14.0,
        view.x_range.0,
        left + w,
        top + h + 14.0,
        view.x_range.1,
        left - 4.0,
        top + h,
        view.y_range.0,
        left - 4.0,
        top + 10.0,
        view.y_range.1,
    );
}

/// Renders all rows of one episode into a three-panel SVG document.
pub fn render_svg(rows: &[TrajectoryRow]) -> String {
    let width = 3.0 * PANEL_WIDTH + 4.0 * MARGIN;
    let height = PANEL_HEIGHT + 2.5 * MARGIN;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    // Trajectories.
    let mut tracks: BTreeMap<(u8, usize), Vec<(usize, f64, f64)>> = BTreeMap::new();
    for r in rows {
        let key = (if r.role == Role::Leader { 0 } else { 1 }, r.uav_id);
        tracks.entry(key).or_default().push((r.t, r.x, r.y));
    }
    for track in tracks.values_mut() {
        track.sort_by_key(|p| p.0);
    }
    let view = ViewTransform::fit(rows.iter().map(|r| (r.x, r.y)), panel_rect(0));
    axes(&mut svg, 0, &view, "x (m)");
    for (&(role, id), track) in &tracks {
        let pts: Vec<(f64, f64)> = track.iter().map(|p| (p.1, p.2)).collect();
        if role == 0 {
            polyline(&mut svg, &view, &pts, "#000", "leader");
        } else {
            polyline(&mut svg, &view, &pts, PALETTE[(id - 1) % PALETTE.len()], "follower");
        }
    }

    // Distance to leader.
    let rho = leader_distances(rows);
    let view = ViewTransform::fit(
        rho.values().flatten().map(|&(t, d)| (t as f64, d)),
        panel_rect(1),
    );
    axes(&mut svg, 1, &view, "t (s)");
    for (id, series) in &rho {
        let pts: Vec<(f64, f64)> = series.iter().map(|&(t, d)| (t as f64, d)).collect();
        polyline(&mut svg, &view, &pts, PALETTE[(id - 1) % PALETTE.len()], "rho");
    }

    // Minimum separation.
    let mins = min_pair_distances(rows);
    let pts: Vec<(f64, f64)> = mins.iter().map(|&(t, d)| (t as f64, d)).collect();
    let view = ViewTransform::fit(pts.iter().copied(), panel_rect(2));
    axes(&mut svg, 2, &view, "t (s)");
    polyline(&mut svg, &view, &pts, "#d62728", "mindist");

    svg.push_str("</svg>\n");
    svg
}
