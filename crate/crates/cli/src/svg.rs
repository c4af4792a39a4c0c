//! Top-down SVG rendering of a scene, a ground-truth and an estimated pose,
//! and optional token activation maps.

use std::fmt::Write;

use situ3d::geometry::SituationVector;
use situ3d::scenegen::Scene;

const PX_PER_M: f64 = 80.0;
const MARGIN: f64 = 20.0;
const ARROW_LEN: f64 = 0.6;

pub struct Activations<'a> {
    pub anchors: &'a [[f64; 2]],
    pub pitch: f64,
    pub before: &'a [f64],
    pub after: &'a [f64],
}

struct Panel {
    x0: f64,
    y0: f64,
    depth: f64,
}

impl Panel {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        // scene y grows upward on the page
        (self.x0 + x * PX_PER_M, self.y0 + (self.depth - y) * PX_PER_M)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn arrow(out: &mut String, panel: &Panel, s: &SituationVector, class: &str, color: &str) {
    let h = s.heading();
    let (x0, y0) = panel.px(s.pos.x, s.pos.y);
    let (x1, y1) = panel.px(s.pos.x + ARROW_LEN * h.x, s.pos.y + ARROW_LEN * h.y);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len = (dx * dx + dy * dy).sqrt().max(1e-9);
    let (ux, uy) = (dx / len, dy / len);
    let (hx, hy) = (x1 - 12.0 * ux, y1 - 12.0 * uy);
    let (lx, ly) = (hx - 6.0 * uy, hy + 6.0 * ux);
    let (rx, ry) = (hx + 6.0 * uy, hy - 6.0 * ux);
    let _ = writeln!(
        out,
        r#"<path class="arrow {class}" d="M{x0:.2},{y0:.2} L{x1:.2},{y1:.2} M{lx:.2},{ly:.2} L{x1:.2},{y1:.2} L{rx:.2},{ry:.2}" stroke="{color}" stroke-width="3" fill="none"/>"#
    );
}

fn room(out: &mut String, panel: &Panel, scene: &Scene) {
    let (x, y) = panel.px(0.0, scene.depth);
    let _ = writeln!(
        out,
        r##"<rect class="room" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#fafafa" stroke="#333" stroke-width="2"/>"##,
        scene.width * PX_PER_M,
        scene.depth * PX_PER_M
    );
}

fn heat_panel(out: &mut String, panel: &Panel, scene: &Scene, act: &Activations, values: &[f64], title: &str) {
    room(out, panel, scene);
    let max = values.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let half = act.pitch / 2.0;
    for (a, v) in act.anchors.iter().zip(values) {
        let (x, y) = panel.px(a[0] - half, a[1] + half);
        let _ = writeln!(
            out,
            r##"<rect class="token" x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{w:.2}" fill="#d62" fill-opacity="{:.3}"/>"##,
            v / max,
            w = act.pitch * PX_PER_M
        );
    }
    let (tx, ty) = panel.px(0.0, scene.depth);
    let _ = writeln!(out, r#"<text x="{tx:.2}" y="{:.2}" font-size="13">{title}</text>"#, ty - 6.0);
}

/// Renders the room, its objects, the ground-truth pose in red and the
/// estimate in blue. Activation maps are drawn as two extra panels.
pub fn render(
    scene: &Scene,
    gt: &SituationVector,
    estimate: &SituationVector,
    caption: &str,
    activations: Option<&Activations>,
) -> String {
    let panel_w = scene.width * PX_PER_M;
    let panel_h = scene.depth * PX_PER_M;
    let panels = if activations.is_some() { 3.0 } else { 1.0 };
    let width = panels * (panel_w + MARGIN) + MARGIN;
    let height = panel_h + 2.0 * MARGIN + 40.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.2} {height:.2}">"#
    );
    let main = Panel {
        x0: MARGIN,
        y0: MARGIN + 20.0,
        depth: scene.depth,
    };
    room(&mut out, &main, scene);
    for o in &scene.objects {
        let [x0, y0, x1, y1] = o.footprint();
        let (px, py) = main.px(x0, y1);
        let _ = writeln!(
            out,
            r##"<rect class="object" data-category="{}" x="{px:.2}" y="{py:.2}" width="{:.2}" height="{:.2}" fill="#cfd8dc" stroke="#546e7a"/>"##,
            o.category_name(),
            (x1 - x0) * PX_PER_M,
            (y1 - y0) * PX_PER_M
        );
        let (cx, cy) = main.px(o.center.x, o.center.y);
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{cy:.2}" font-size="11" text-anchor="middle">{} {}</text>"#,
            o.color_name(),
            o.category_name()
        );
    }
    arrow(&mut out, &main, gt, "gt", "red");
    arrow(&mut out, &main, estimate, "pred", "blue");
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{:.2}" font-size="13">{}</text>"#,
        MARGIN + 8.0,
        escape(caption)
    );
    if let Some(act) = activations {
        for (k, (values, title)) in [(act.before, "before re-encoding"), (act.after, "after re-encoding")]
            .into_iter()
            .enumerate()
        {
            let p = Panel {
                x0: MARGIN + (k as f64 + 1.0) * (panel_w + MARGIN),
                y0: main.y0,
                depth: scene.depth,
            };
            heat_panel(&mut out, &p, scene, act, values, title);
        }
    }
    out.push_str("</svg>\n");
    out
}
