//! DXF, SVG and JSON export of recovered primitives, plus minimal readers
//! for the DXF and SVG this module writes.
//!
//! Normalized coordinates are y-up. DXF keeps that orientation and multiplies
//! by `scale`; SVG flips y so the drawing appears upright on screen.

use std::fmt::Write as _;

use log::warn;
use quick_xml::events::Event;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{arc_sweep, circumcircle, Primitive, PrimitiveKind};

pub const DEFAULT_SCALE: f64 = 100.0;
const POINT_DOT_RADIUS: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ExportError {
    #[error("scale {0} must be positive and finite")]
    BadScale(f64),
    #[error("unknown export format {0:?}")]
    UnknownFormat(String),
    #[error("malformed DXF: {0}")]
    Dxf(String),
    #[error("malformed SVG: {0}")]
    Svg(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Dxf,
    Svg,
    Json,
}

impl ExportFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            Self::Dxf => "application/dxf",
            Self::Svg => "image/svg+xml",
            Self::Json => "application/json",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Dxf => "dxf",
            Self::Svg => "svg",
            Self::Json => "json",
        }
    }
}

impl std::str::FromStr for ExportFormat {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self, ExportError> {
        match s.to_ascii_lowercase().as_str() {
            "dxf" => Ok(Self::Dxf),
            "svg" => Ok(Self::Svg),
            "json" => Ok(Self::Json),
            _ => Err(ExportError::UnknownFormat(s.to_string())),
        }
    }
}

fn check_scale(scale: f64) -> Result<(), ExportError> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(ExportError::BadScale(scale))
    }
}

/// Arc in center form: angles in degrees, counter-clockwise from `start_deg` to `end_deg`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterArc {
    pub center: [f64; 2],
    pub radius: f64,
    pub start_deg: f64,
    pub end_deg: f64,
}

fn wrap_deg(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Center form of a three-point arc, or `None` when the points are collinear.
pub fn center_arc(p: &[f64; 6]) -> Option<CenterArc> {
    let (s, m, e) = ([p[0], p[1]], [p[2], p[3]], [p[4], p[5]]);
    let (center, radius) = circumcircle(s, m, e).ok()?;
    let (t0, sweep) = arc_sweep(center, s, m, e);
    let (a, b) = if sweep >= 0.0 { (t0, t0 + sweep) } else { (t0 + sweep, t0) };
    Some(CenterArc { center, radius, start_deg: wrap_deg(a.to_degrees()), end_deg: wrap_deg(b.to_degrees()) })
}

/// Fixed-point text with trailing zeros trimmed; stable across platforms.
fn num(x: f64) -> String {
    let x = if x.abs() < 5e-11 { 0.0 } else { x };
    let mut s = format!("{x:.10}");
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    s
}

fn group(out: &mut String, code: u16, value: &str) {
    let _ = write!(out, "{code}\r\n{value}\r\n");
}

fn dxf_xy(out: &mut String, base: u16, p: [f64; 2], scale: f64) {
    group(out, base, &num(p[0] * scale));
    group(out, base + 10, &num(p[1] * scale));
    group(out, base + 20, "0.0");
}

fn dxf_line(out: &mut String, a: [f64; 2], b: [f64; 2], scale: f64) {
    group(out, 0, "LINE");
    group(out, 8, "0");
    dxf_xy(out, 10, a, scale);
    dxf_xy(out, 11, b, scale);
}

/// Minimal ASCII DXF (R12 entities). Collinear arcs become a LINE from start to end.
pub fn export_dxf(prims: &[Primitive], scale: f64) -> Result<Vec<u8>, ExportError> {
    check_scale(scale)?;
    let mut out = String::new();
    group(&mut out, 0, "SECTION");
    group(&mut out, 2, "HEADER");
    group(&mut out, 9, "$ACADVER");
    group(&mut out, 1, "AC1009");
    group(&mut out, 9, "$INSUNITS");
    group(&mut out, 70, "4");
    group(&mut out, 0, "ENDSEC");
    group(&mut out, 0, "SECTION");
    group(&mut out, 2, "ENTITIES");
    for prim in prims {
        let p = &prim.params;
        match prim.kind {
            PrimitiveKind::Line => dxf_line(&mut out, [p[0], p[1]], [p[2], p[3]], scale),
            PrimitiveKind::Circle => {
                group(&mut out, 0, "CIRCLE");
                group(&mut out, 8, "0");
                dxf_xy(&mut out, 10, [p[0], p[1]], scale);
                group(&mut out, 40, &num(p[2] * scale));
            }
            PrimitiveKind::Arc => match center_arc(p) {
                Some(a) => {
                    group(&mut out, 0, "ARC");
                    group(&mut out, 8, "0");
                    dxf_xy(&mut out, 10, a.center, scale);
                    group(&mut out, 40, &num(a.radius * scale));
                    group(&mut out, 50, &num(a.start_deg));
                    group(&mut out, 51, &num(a.end_deg));
                }
                None => {
                    warn!("degenerate arc {p:?} exported as LINE");
                    dxf_line(&mut out, [p[0], p[1]], [p[4], p[5]], scale);
                }
            },
            PrimitiveKind::Point => {
                group(&mut out, 0, "POINT");
                group(&mut out, 8, "0");
                dxf_xy(&mut out, 10, [p[0], p[1]], scale);
            }
        }
    }
    group(&mut out, 0, "ENDSEC");
    group(&mut out, 0, "EOF");
    Ok(out.into_bytes())
}

/// Entity as read back from DXF, in output units.
#[derive(Clone, Debug, PartialEq)]
pub enum DxfEntity {
    Line { a: [f64; 2], b: [f64; 2] },
    Circle { center: [f64; 2], radius: f64 },
    Arc(CenterArc),
    Point([f64; 2]),
}

/// Reads the ENTITIES section of a DXF made of LINE, CIRCLE, ARC and POINT.
pub fn read_dxf(bytes: &[u8]) -> Result<Vec<DxfEntity>, ExportError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ExportError::Dxf(e.to_string()))?;
    let lines: Vec<&str> = text.lines().map(str::trim).collect();
    if lines.len() % 2 != 0 {
        return Err(ExportError::Dxf("odd number of lines".into()));
    }
    let pairs: Vec<(u16, &str)> = lines
        .chunks(2)
        .map(|c| c[0].parse::<u16>().map(|code| (code, c[1])).map_err(|_| ExportError::Dxf(format!("bad group code {:?}", c[0]))))
        .collect::<Result<_, _>>()?;
    if pairs.last() != Some(&(0, "EOF")) {
        return Err(ExportError::Dxf("missing EOF".into()));
    }
    let start = pairs
        .windows(2)
        .position(|w| w[0] == (0, "SECTION") && w[1] == (2, "ENTITIES"))
        .ok_or_else(|| ExportError::Dxf("no ENTITIES section".into()))?
        + 2;
    let mut entities = Vec::new();
    let mut i = start;
    loop {
        let (code, name) = *pairs.get(i).ok_or_else(|| ExportError::Dxf("unterminated ENTITIES".into()))?;
        if code != 0 {
            return Err(ExportError::Dxf(format!("expected entity start, found code {code}")));
        }
        if name == "ENDSEC" {
            break;
        }
        let mut j = i + 1;
        let mut fields = std::collections::BTreeMap::new();
        while j < pairs.len() && pairs[j].0 != 0 {
            let v: f64 = pairs[j].1.parse().unwrap_or(f64::NAN);
            fields.insert(pairs[j].0, v);
            j += 1;
        }
        let get = |c: u16| fields.get(&c).copied().filter(|v| v.is_finite()).ok_or_else(|| ExportError::Dxf(format!("{name} lacks group {c}")));
        entities.push(match name {
            "LINE" => DxfEntity::Line { a: [get(10)?, get(20)?], b: [get(11)?, get(21)?] },
            "CIRCLE" => DxfEntity::Circle { center: [get(10)?, get(20)?], radius: get(40)? },
            "ARC" => DxfEntity::Arc(CenterArc {
                center: [get(10)?, get(20)?],
                radius: get(40)?,
                start_deg: get(50)?,
                end_deg: get(51)?,
            }),
            "POINT" => DxfEntity::Point([get(10)?, get(20)?]),
            other => return Err(ExportError::Dxf(format!("unsupported entity {other}"))),
        });
        i = j;
    }
    Ok(entities)
}

fn svg_xy(p: [f64; 2], scale: f64) -> [f64; 2] {
    [p[0] * scale, (1.0 - p[1]) * scale]
}

/// SVG 1.1 drawing of `scale x scale` user units. Each element carries a `data-kind` attribute.
pub fn export_svg(prims: &[Primitive], scale: f64) -> Result<Vec<u8>, ExportError> {
    check_scale(scale)?;
    let s = num(scale);
    let mut out = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">\n<g fill=\"none\" stroke=\"black\" stroke-width=\"{}\">\n",
        num(scale / 200.0)
    );
    let line = |out: &mut String, a: [f64; 2], b: [f64; 2]| {
        let (a, b) = (svg_xy(a, scale), svg_xy(b, scale));
        let _ = writeln!(
            out,
            "<line data-kind=\"line\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/>",
            num(a[0]),
            num(a[1]),
            num(b[0]),
            num(b[1])
        );
    };
    for prim in prims {
        let p = &prim.params;
        match prim.kind {
            PrimitiveKind::Line => line(&mut out, [p[0], p[1]], [p[2], p[3]]),
            PrimitiveKind::Circle => {
                let c = svg_xy([p[0], p[1]], scale);
                let _ = writeln!(
                    out,
                    "<circle data-kind=\"circle\" cx=\"{}\" cy=\"{}\" r=\"{}\"/>",
                    num(c[0]),
                    num(c[1]),
                    num(p[2] * scale)
                );
            }
            PrimitiveKind::Arc => match circumcircle([p[0], p[1]], [p[2], p[3]], [p[4], p[5]]) {
                Ok((center, radius)) => {
                    let (_, sweep) = arc_sweep(center, [p[0], p[1]], [p[2], p[3]], [p[4], p[5]]);
                    let (a, b) = (svg_xy([p[0], p[1]], scale), svg_xy([p[4], p[5]], scale));
                    let large = u8::from(sweep.abs() > std::f64::consts::PI);
                    // Flipping y turns counter-clockwise into SVG's negative-angle direction.
                    let flag = u8::from(sweep < 0.0);
                    let r = num(radius * scale);
                    let _ = writeln!(
                        out,
                        "<path data-kind=\"arc\" d=\"M {} {} A {r} {r} 0 {large} {flag} {} {}\"/>",
                        num(a[0]),
                        num(a[1]),
                        num(b[0]),
                        num(b[1])
                    );
                }
                Err(_) => {
                    warn!("degenerate arc {p:?} exported as line");
                    line(&mut out, [p[0], p[1]], [p[4], p[5]]);
                }
            },
            PrimitiveKind::Point => {
                let c = svg_xy([p[0], p[1]], scale);
                let _ = writeln!(
                    out,
                    "<circle data-kind=\"point\" cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"black\"/>",
                    num(c[0]),
                    num(c[1]),
                    num(POINT_DOT_RADIUS * scale / 100.0)
                );
            }
        }
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out.into_bytes())
}

/// SVG element as read back, in SVG user units.
#[derive(Clone, Debug, PartialEq)]
pub enum SvgElement {
    Line { a: [f64; 2], b: [f64; 2] },
    Circle { center: [f64; 2], radius: f64 },
    Arc { from: [f64; 2], radius: f64, large: bool, sweep: bool, to: [f64; 2] },
    Point([f64; 2]),
}

fn parse_arc_path(d: &str) -> Result<SvgElement, ExportError> {
    let bad = || ExportError::Svg(format!("unsupported path {d:?}"));
    let tok: Vec<&str> = d.split_whitespace().collect();
    if tok.len() != 11 || tok[0] != "M" || tok[3] != "A" {
        return Err(bad());
    }
    let f = |i: usize| tok[i].parse::<f64>().map_err(|_| bad());
    let flag = |i: usize| match tok[i] {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(bad()),
    };
    Ok(SvgElement::Arc { from: [f(1)?, f(2)?], radius: f(4)?, large: flag(7)?, sweep: flag(8)?, to: [f(9)?, f(10)?] })
}

/// Reads the elements written by [`export_svg`]; the document must be well-formed XML.
pub fn read_svg(bytes: &[u8]) -> Result<Vec<SvgElement>, ExportError> {
    let mut reader = quick_xml::Reader::from_reader(bytes);
    let mut buf = Vec::new();
    let mut out = Vec::new();
    let mut saw_root = false;
    loop {
        let ev = reader.read_event_into(&mut buf).map_err(|e| ExportError::Svg(e.to_string()))?;
        let e = match ev {
            Event::Eof => break,
            Event::Start(e) | Event::Empty(e) => e.into_owned(),
            _ => {
                buf.clear();
                continue;
            }
        };
        let mut attrs = std::collections::HashMap::new();
        for a in e.attributes() {
            let a = a.map_err(|e| ExportError::Svg(e.to_string()))?;
            let v = a.normalized_value(quick_xml::XmlVersion::Implicit1_0).map_err(|e| ExportError::Svg(e.to_string()))?;
            attrs.insert(a.key.as_ref().to_string(), v.into_owned());
        }
        let f = |k: &str| -> Result<f64, ExportError> {
            attrs.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| ExportError::Svg(format!("missing numeric attribute {k}")))
        };
        match e.name().as_ref() {
            "svg" => saw_root = true,
            "line" => out.push(SvgElement::Line { a: [f("x1")?, f("y1")?], b: [f("x2")?, f("y2")?] }),
            "circle" if attrs.get("data-kind").map(String::as_str) == Some("point") => out.push(SvgElement::Point([f("cx")?, f("cy")?])),
            "circle" => out.push(SvgElement::Circle { center: [f("cx")?, f("cy")?], radius: f("r")? }),
            "path" => out.push(parse_arc_path(attrs.get("d").map(String::as_str).unwrap_or(""))?),
            _ => {}
        }
        buf.clear();
    }
    if !saw_root {
        return Err(ExportError::Svg("no svg root element".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct JsonPrimitive {
    kind: String,
    params: [f64; 6],
}

/// `[{"kind": "line", "params": [...]}, ...]` in normalized coordinates.
pub fn export_json(prims: &[Primitive]) -> Vec<u8> {
    let items: Vec<JsonPrimitive> = prims.iter().map(|p| JsonPrimitive { kind: p.kind.name().to_string(), params: p.params }).collect();
    serde_json::to_vec_pretty(&items).expect("primitives serialize")
}

pub fn export(prims: &[Primitive], format: ExportFormat, scale: f64) -> Result<Vec<u8>, ExportError> {
    match format {
        ExportFormat::Dxf => export_dxf(prims, scale),
        ExportFormat::Svg => export_svg(prims, scale),
        ExportFormat::Json => {
            check_scale(scale)?;
            Ok(export_json(prims))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-6
    }

    fn close2(a: [f64; 2], b: [f64; 2]) -> bool {
        close(a[0], b[0]) && close(a[1], b[1])
    }

    #[test]
    fn dxf_examples() {
        let ents = read_dxf(&export_dxf(&[Primitive::line(0.0, 0.0, 1.0, 0.0)], 100.0).unwrap()).unwrap();
        assert_eq!(ents, vec![DxfEntity::Line { a: [0.0, 0.0], b: [100.0, 0.0] }]);
        let ents = read_dxf(&export_dxf(&[Primitive::circle(0.5, 0.5, 0.25)], 100.0).unwrap()).unwrap();
        assert_eq!(ents, vec![DxfEntity::Circle { center: [50.0, 50.0], radius: 25.0 }]);
        let empty = export_dxf(&[], 100.0).unwrap();
        assert_eq!(read_dxf(&empty).unwrap(), vec![]);
        assert!(String::from_utf8(empty).unwrap().contains("ENTITIES\r\n0\r\nENDSEC"));
        assert_eq!(export_dxf(&[], 0.0), Err(ExportError::BadScale(0.0)));
    }

    #[test]
    fn dxf_arc_angles_run_counter_clockwise_through_mid() {
        // Upper half of the circle about (0.5, 0): 0 deg to 180 deg counter-clockwise.
        let up = Primitive::arc([1.0, 0.0], [0.5, 0.5], [0.0, 0.0]);
        let ents = read_dxf(&export_dxf(&[up], 100.0).unwrap()).unwrap();
        assert_eq!(ents, vec![DxfEntity::Arc(CenterArc { center: [50.0, 0.0], radius: 50.0, start_deg: 0.0, end_deg: 180.0 })]);
        // Same endpoints traversed clockwise via the lower half: still written 180 -> 360.
        let down = Primitive::arc([0.0, 0.0], [0.5, -0.5], [1.0, 0.0]);
        let ents = read_dxf(&export_dxf(&[down], 100.0).unwrap()).unwrap();
        let DxfEntity::Arc(a) = ents[0] else { panic!("{ents:?}") };
        assert!(close(a.start_deg, 180.0) && (close(a.end_deg, 0.0) || close(a.end_deg, 360.0)), "{a:?}");
    }

    #[test]
    fn degenerate_arc_becomes_line() {
        let flat = Primitive { kind: PrimitiveKind::Arc, params: [0.1, 0.1, 0.5, 0.5, 0.9, 0.9] };
        let ents = read_dxf(&export_dxf(&[flat], 10.0).unwrap()).unwrap();
        assert_eq!(ents, vec![DxfEntity::Line { a: [1.0, 1.0], b: [9.0, 9.0] }]);
        let els = read_svg(&export_svg(&[flat], 10.0).unwrap()).unwrap();
        assert_eq!(els, vec![SvgElement::Line { a: [1.0, 9.0], b: [9.0, 1.0] }]);
    }

    fn deg_on_arc(a: &CenterArc, deg: f64) -> bool {
        let span = (a.end_deg - a.start_deg).rem_euclid(360.0);
        (deg - a.start_deg).rem_euclid(360.0) <= span + 1e-9
    }

    #[test]
    fn dxf_round_trip_on_generated_sketches() {
        for seed in 0..40 {
            let sketch = crate::dataset::generate_sketch(seed);
            let scale = 100.0;
            let ents = read_dxf(&export_dxf(&sketch.primitives, scale).unwrap()).unwrap();
            assert_eq!(ents.len(), sketch.len());
            for (prim, ent) in sketch.primitives.iter().zip(&ents) {
                let p = prim.params.map(|v| v * scale);
                match (prim.kind, ent) {
                    (PrimitiveKind::Line, DxfEntity::Line { a, b }) => assert!(close2(*a, [p[0], p[1]]) && close2(*b, [p[2], p[3]])),
                    (PrimitiveKind::Circle, DxfEntity::Circle { center, radius }) => {
                        assert!(close2(*center, [p[0], p[1]]) && close(*radius, p[2]))
                    }
                    (PrimitiveKind::Point, DxfEntity::Point(q)) => assert!(close2(*q, [p[0], p[1]])),
                    (PrimitiveKind::Arc, DxfEntity::Arc(a)) => {
                        let at = |deg: f64| {
                            let t = deg.to_radians();
                            [a.center[0] + a.radius * t.cos(), a.center[1] + a.radius * t.sin()]
                        };
                        let (s, m, e) = ([p[0], p[1]], [p[2], p[3]], [p[4], p[5]]);
                        let ends = [at(a.start_deg), at(a.end_deg)];
                        assert!((close2(ends[0], s) && close2(ends[1], e)) || (close2(ends[0], e) && close2(ends[1], s)), "{a:?} vs {p:?}");
                        let mid_deg = (m[1] - a.center[1]).atan2(m[0] - a.center[0]).to_degrees();
                        assert!(deg_on_arc(a, mid_deg));
                        assert!(close(((m[0] - a.center[0]).powi(2) + (m[1] - a.center[1]).powi(2)).sqrt(), a.radius));
                    }
                    (PrimitiveKind::Arc, DxfEntity::Line { .. }) => {}
                    other => panic!("unexpected pairing {other:?}"),
                }
            }
        }
    }

    #[test]
    fn dxf_golden_bytes() {
        let prims = [
            Primitive::line(0.1, 0.2, 0.7, 0.8),
            Primitive::circle(0.5, 0.5, 0.25),
            Primitive::arc([1.0, 0.0], [0.5, 0.5], [0.0, 0.0]),
            Primitive::point(0.3, 0.9),
        ];
        let got = export_dxf(&prims, 100.0).unwrap();
        let golden = include_bytes!("../tests/golden/basic.dxf");
        assert_eq!(String::from_utf8_lossy(&got), String::from_utf8_lossy(golden));
    }

    /// Endpoint-to-center conversion for circular SVG arcs with rx = ry and no rotation.
    fn svg_arc_points(from: [f64; 2], r: f64, large: bool, sweep: bool, to: [f64; 2], n: usize) -> Vec<[f64; 2]> {
        let mx = (from[0] - to[0]) / 2.0;
        let my = (from[1] - to[1]) / 2.0;
        let d2 = mx * mx + my * my;
        let mut coef = ((r * r - d2) / d2).max(0.0).sqrt();
        if large == sweep {
            coef = -coef;
        }
        let cx = coef * my + (from[0] + to[0]) / 2.0;
        let cy = -coef * mx + (from[1] + to[1]) / 2.0;
        let t1 = (from[1] - cy).atan2(from[0] - cx);
        let t2 = (to[1] - cy).atan2(to[0] - cx);
        let mut dt = t2 - t1;
        if sweep && dt < 0.0 {
            dt += std::f64::consts::TAU;
        }
        if !sweep && dt > 0.0 {
            dt -= std::f64::consts::TAU;
        }
        (0..n)
            .map(|i| {
                let t = t1 + dt * i as f64 / (n - 1) as f64;
                [cx + r * t.cos(), cy + r * t.sin()]
            })
            .collect()
    }

    #[test]
    fn svg_round_trip_and_arc_passes_mid() {
        let mut rng = seeds::rng(31, 0);
        let scale = 100.0;
        for seed in 0..40 {
            let sketch = crate::dataset::generate_sketch(seed);
            let mut prims = sketch.primitives.clone();
            let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
            prims.push(Primitive::arc([a, b], [0.5, 0.5], [b, a]));
            let bytes = export_svg(&prims, scale).unwrap();
            let els = read_svg(&bytes).unwrap();
            assert_eq!(els.len(), prims.len());
            for (prim, el) in prims.iter().zip(&els) {
                let p = prim.params;
                let xy = |i: usize| svg_xy([p[i], p[i + 1]], scale);
                match (prim.kind, el) {
                    (PrimitiveKind::Line, SvgElement::Line { a, b }) => assert!(close2(*a, xy(0)) && close2(*b, xy(2))),
                    (PrimitiveKind::Circle, SvgElement::Circle { center, radius }) => {
                        assert!(close2(*center, xy(0)) && close(*radius, p[2] * scale))
                    }
                    (PrimitiveKind::Point, SvgElement::Point(q)) => assert!(close2(*q, xy(0))),
                    (PrimitiveKind::Arc, SvgElement::Arc { from, radius, large, sweep, to }) => {
                        assert!(close2(*from, xy(0)) && close2(*to, xy(4)));
                        let pts = svg_arc_points(*from, *radius, *large, *sweep, *to, 2001);
                        let mid = xy(2);
                        let nearest = pts.iter().map(|q| ((q[0] - mid[0]).powi(2) + (q[1] - mid[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
                        assert!(nearest < 0.5, "arc misses mid point by {nearest}");
                    }
                    (PrimitiveKind::Arc, SvgElement::Line { .. }) => {}
                    other => panic!("unexpected pairing {other:?}"),
                }
            }
        }
        let empty = export_svg(&[], scale).unwrap();
        assert_eq!(read_svg(&empty).unwrap(), vec![]);
        assert!(read_svg(b"<svg><line x1=\"1\"").is_err());
    }

    #[test]
    fn json_export_lists_kinds() {
        let bytes = export(&[Primitive::point(0.25, 0.75)], ExportFormat::Json, 1.0).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v[0]["kind"], "point");
        assert_eq!(v[0]["params"][1], 0.75);
        assert_eq!("SVG".parse::<ExportFormat>().unwrap(), ExportFormat::Svg);
        assert!("png".parse::<ExportFormat>().is_err());
    }
}
