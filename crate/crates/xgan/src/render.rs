//! Procedural layered sprite renderer.
//!
//! Two renderers share one attribute schema and one geometry family, so the
//! semantic content of a sample is identical across styles while the pixels
//! are not: style A is flat-shaded, style B is outlined, hatched, and uses a
//! shifted palette. Layers composite back-to-front in the schema's Z-order.

use crate::domains::{AttributeSchema, AttributeVector, StyleId};
use crate::error::{Result, XganError};

pub const MIN_RENDER_SIZE: usize = 16;

type Rgb = [f32; 3]; // linear [0,1]

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
    /// Axis-aligned rounded rectangle with half-extents hx, hy.
    RRect { cx: f32, cy: f32, hx: f32, hy: f32, r: f32 },
    Tri { a: (f32, f32), b: (f32, f32), c: (f32, f32) },
    Ring { cx: f32, cy: f32, r_out: f32, r_in: f32 },
}

impl Shape {
    fn contains(&self, u: f32, v: f32) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (du, dv) = ((u - cx) / rx, (v - cy) / ry);
                du * du + dv * dv <= 1.0
            }
            Shape::RRect { cx, cy, hx, hy, r } => {
                let (du, dv) = ((u - cx).abs(), (v - cy).abs());
                if du > hx || dv > hy {
                    return false;
                }
                let (qx, qy) = ((du - (hx - r)).max(0.0), (dv - (hy - r)).max(0.0));
                qx * qx + qy * qy <= r * r
            }
            Shape::Tri { a, b, c } => {
                let sign = |p: (f32, f32), q: (f32, f32), r: (f32, f32)| {
                    (p.0 - r.0) * (q.1 - r.1) - (q.0 - r.0) * (p.1 - r.1)
                };
                let d1 = sign((u, v), a, b);
                let d2 = sign((u, v), b, c);
                let d3 = sign((u, v), c, a);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
            Shape::Ring { cx, cy, r_out, r_in } => {
                let d2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
        }
    }

    /// Grows the shape outward by `w` (used to paint outlines underneath).
    fn expand(&self, w: f32) -> Shape {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => Shape::Ellipse {
                cx,
                cy,
                rx: rx + w,
                ry: ry + w,
            },
            Shape::RRect { cx, cy, hx, hy, r } => Shape::RRect {
                cx,
                cy,
                hx: hx + w,
                hy: hy + w,
                r: r + w,
            },
            Shape::Tri { a, b, c } => {
                let cx = (a.0 + b.0 + c.0) / 3.0;
                let cy = (a.1 + b.1 + c.1) / 3.0;
                let grow = |p: (f32, f32)| {
                    let (dx, dy) = (p.0 - cx, p.1 - cy);
                    let len = (dx * dx + dy * dy).sqrt().max(1e-6);
                    (p.0 + w * dx / len * 2.0, p.1 + w * dy / len * 2.0)
                };
                Shape::Tri {
                    a: grow(a),
                    b: grow(b),
                    c: grow(c),
                }
            }
            Shape::Ring { cx, cy, r_out, r_in } => Shape::Ring {
                cx,
                cy,
                r_out: r_out + w,
                r_in: (r_in - w).max(0.0),
            },
        }
    }
}

struct Canvas {
    size: usize,
    /// RGB in [0,1], row-major interleaved.
    px: Vec<f32>,
}

const SUBS: usize = 3; // 3x3 coverage supersampling

impl Canvas {
    fn white(size: usize) -> Canvas {
        Canvas {
            size,
            px: vec![1.0; size * size * 3],
        }
    }

    fn paint(&mut self, shape: &Shape, color: Rgb, hatch: Option<f32>) {
        let s = self.size as f32;
        for y in 0..self.size {
            for x in 0..self.size {
                let mut hits = 0;
                for sy in 0..SUBS {
                    for sx in 0..SUBS {
                        let u = (x as f32 + (sx as f32 + 0.5) / SUBS as f32) / s;
                        let v = (y as f32 + (sy as f32 + 0.5) / SUBS as f32) / s;
                        if shape.contains(u, v) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let mut alpha = hits as f32 / (SUBS * SUBS) as f32;
                if let Some(period) = hatch {
                    let stripe = ((x + y) as f32 / period) as usize % 2 == 0;
                    if !stripe {
                        alpha *= 0.55;
                    }
                }
                let idx = (y * self.size + x) * 3;
                for c in 0..3 {
                    self.px[idx + c] = self.px[idx + c] * (1.0 - alpha) + color[c] * alpha;
                }
            }
        }
    }
}

struct StyleParams {
    outline: Option<(f32, Rgb)>,
    hatch_period: Option<f32>,
    face_scale: f32,
    eye_scale: f32,
    skin: [Rgb; 3],
    hair: [Rgb; 4],
    eye_color: Rgb,
    brow_color: Rgb,
    mouth_color: Rgb,
    glasses_color: Rgb,
}

fn style_params(style: StyleId, size: usize) -> StyleParams {
    match style {
        StyleId::StyleA => StyleParams {
            outline: None,
            hatch_period: None,
            face_scale: 1.0,
            eye_scale: 1.0,
            skin: [[0.99, 0.87, 0.75], [0.85, 0.64, 0.42], [0.45, 0.30, 0.18]],
            hair: [
                [0.10, 0.09, 0.11],
                [0.44, 0.27, 0.12],
                [0.95, 0.83, 0.32],
                [0.80, 0.18, 0.10],
            ],
            eye_color: [0.08, 0.08, 0.10],
            brow_color: [0.20, 0.14, 0.10],
            mouth_color: [0.65, 0.22, 0.20],
            glasses_color: [0.12, 0.12, 0.14],
        },
        StyleId::StyleB => StyleParams {
            outline: Some((0.012, [0.10, 0.08, 0.16])),
            hatch_period: Some((size as f32 / 10.0).max(2.0)),
            face_scale: 1.07,
            eye_scale: 0.90,
            skin: [[0.93, 0.80, 0.86], [0.78, 0.55, 0.56], [0.40, 0.26, 0.30]],
            hair: [
                [0.16, 0.13, 0.30],
                [0.36, 0.18, 0.05],
                [0.98, 0.92, 0.45],
                [0.88, 0.10, 0.28],
            ],
            eye_color: [0.06, 0.10, 0.30],
            brow_color: [0.10, 0.10, 0.26],
            mouth_color: [0.55, 0.10, 0.30],
            glasses_color: [0.06, 0.06, 0.20],
        },
    }
}

/// Normalized (u0, v0, u1, v1) bound of everything a layer may paint,
/// including style-B outlines. Used by the locality tests and documented as
/// part of the schema contract.
pub fn layer_region(layer: &str) -> Option<(f32, f32, f32, f32)> {
    match layer {
        "hair_back" | "hair_front" => Some((0.02, 0.04, 0.98, 0.96)),
        "face" => Some((0.11, 0.17, 0.89, 0.97)),
        "eyes" => Some((0.25, 0.41, 0.75, 0.64)),
        "eyebrows" => Some((0.26, 0.36, 0.74, 0.50)),
        "mouth" => Some((0.27, 0.60, 0.73, 0.84)),
        "facial_hair" => Some((0.30, 0.58, 0.70, 0.92)),
        "glasses" => Some((0.18, 0.37, 0.82, 0.69)),
        _ => None,
    }
}

/// Attribute indices that drive a layer's artwork, including interaction
/// rules (e.g. the mouth variant following face_shape).
pub fn layer_dependencies(schema: &AttributeSchema, layer: &str) -> Result<Vec<usize>> {
    let base: &[&str] = match layer {
        "hair_back" | "hair_front" => &["hair_style", "hair_color"],
        "face" => &["face_shape", "skin_tone"],
        "eyes" => &["eye_type"],
        "eyebrows" | "facial_hair" => &[],
        "mouth" => &[],
        "glasses" => &["glasses"],
        other => {
            return Err(XganError::Schema(format!("unknown layer '{other}'")));
        }
    };
    let mut deps = Vec::new();
    for name in base {
        deps.push(schema.attr_index(name)?);
    }
    for rule in &schema.interaction_rules {
        if rule.layer == layer {
            deps.push(schema.attr_index(&rule.depends_on)?);
        }
    }
    deps.sort_unstable();
    deps.dedup();
    Ok(deps)
}

struct Look {
    face_shape: usize,
    hair_style: usize,
    hair_color: usize,
    eye_type: usize,
    glasses: usize,
    skin_tone: usize,
}

fn resolve_look(schema: &AttributeSchema, attrs: &AttributeVector) -> Result<Look> {
    let get = |name: &str| -> Result<usize> {
        let idx = schema.attr_index(name)?;
        Ok(attrs.values[idx])
    };
    Ok(Look {
        face_shape: get("face_shape")?,
        hair_style: get("hair_style")?,
        hair_color: get("hair_color")?,
        eye_type: get("eye_type")?,
        glasses: get("glasses")?,
        skin_tone: get("skin_tone")?,
    })
}

/// Artwork variant index for a layer, resolved through the schema's
/// interaction rules.
fn variant_for(schema: &AttributeSchema, attrs: &AttributeVector, layer: &str) -> Result<usize> {
    for rule in &schema.interaction_rules {
        if rule.layer == layer {
            let idx = schema.attr_index(&rule.depends_on).map_err(|_| {
                XganError::Schema(format!(
                    "interaction rule for layer '{layer}' depends on unknown attribute '{}'",
                    rule.depends_on
                ))
            })?;
            return Ok(attrs.values[idx]);
        }
    }
    Ok(0)
}

fn paint_with_style(canvas: &mut Canvas, sp: &StyleParams, shape: Shape, color: Rgb) {
    if let Some((w, oc)) = sp.outline {
        canvas.paint(&shape.expand(w), oc, None);
    }
    canvas.paint(&shape, color, sp.hatch_period);
}

/// Renders one sprite as an RGB buffer in [-1, 1], length 3 * size * size,
/// channel-planar to match the image batch layout.
pub fn render_sprite(
    schema: &AttributeSchema,
    attrs: &AttributeVector,
    style: StyleId,
    size: usize,
) -> Result<Vec<f32>> {
    if size < MIN_RENDER_SIZE {
        return Err(XganError::Config(format!(
            "image_size: render needs at least {MIN_RENDER_SIZE} px, got {size}"
        )));
    }
    schema.check_attrs(attrs)?;
    let look = resolve_look(schema, attrs)?;
    let sp = style_params(style, size);
    let mut canvas = Canvas::white(size);

    let face_cy = 0.57;
    let fs = sp.face_scale;
    let face_shape = match look.face_shape {
        0 => Shape::Ellipse {
            cx: 0.5,
            cy: face_cy,
            rx: 0.29 * fs,
            ry: 0.29 * fs,
        },
        1 => Shape::RRect {
            cx: 0.5,
            cy: face_cy,
            hx: 0.27 * fs,
            hy: 0.28 * fs,
            r: 0.08,
        },
        _ => Shape::Ellipse {
            cx: 0.5,
            cy: face_cy + 0.01,
            rx: 0.235 * fs,
            ry: 0.33 * fs,
        },
    };
    let skin = sp.skin[look.skin_tone.min(sp.skin.len() - 1)];
    let hair = sp.hair[look.hair_color.min(sp.hair.len() - 1)];

    for layer in &schema.layers {
        match layer.as_str() {
            "hair_back" => {
                if look.hair_style == 1 {
                    // long: mane behind the face
                    paint_with_style(
                        &mut canvas,
                        &sp,
                        Shape::Ellipse {
                            cx: 0.5,
                            cy: 0.55,
                            rx: 0.36,
                            ry: 0.38,
                        },
                        hair,
                    );
                    for cx in [0.185, 0.815] {
                        paint_with_style(
                            &mut canvas,
                            &sp,
                            Shape::RRect {
                                cx,
                                cy: 0.62,
                                hx: 0.055,
                                hy: 0.24,
                                r: 0.04,
                            },
                            hair,
                        );
                    }
                }
            }
            "face" => {
                paint_with_style(&mut canvas, &sp, face_shape, skin);
            }
            "hair_front" => match look.hair_style {
                0 => {
                    // buzz: low tight cap
                    paint_with_style(
                        &mut canvas,
                        &sp,
                        Shape::Ellipse {
                            cx: 0.5,
                            cy: 0.345,
                            rx: 0.265,
                            ry: 0.105,
                        },
                        hair,
                    );
                }
                1 | 2 => {
                    // long and short share the front cap
                    paint_with_style(
                        &mut canvas,
                        &sp,
                        Shape::Ellipse {
                            cx: 0.5,
                            cy: 0.355,
                            rx: 0.305,
                            ry: 0.145,
                        },
                        hair,
                    );
                }
                _ => {
                    // spiky: a row of triangles
                    for i in 0..5 {
                        let cx = 0.30 + 0.10 * i as f32;
                        paint_with_style(
                            &mut canvas,
                            &sp,
                            Shape::Tri {
                                a: (cx - 0.055, 0.40),
                                b: (cx + 0.055, 0.40),
                                c: (cx, 0.205),
                            },
                            hair,
                        );
                    }
                }
            },
            "eyes" => {
                let es = sp.eye_scale;
                for cx in [0.38, 0.62] {
                    let shape = match look.eye_type {
                        0 => Shape::Ellipse {
                            cx,
                            cy: 0.52,
                            rx: 0.042 * es,
                            ry: 0.042 * es,
                        },
                        1 => Shape::Ring {
                            cx,
                            cy: 0.52,
                            r_out: 0.060 * es,
                            r_in: 0.030 * es,
                        },
                        _ => Shape::Ellipse {
                            cx,
                            cy: 0.52,
                            rx: 0.070 * es,
                            ry: 0.030 * es,
                        },
                    };
                    // eyes are drawn without outline so the ring stays crisp
                    canvas.paint(&shape, sp.eye_color, None);
                }
            }
            "eyebrows" => {
                for cx in [0.38, 0.62] {
                    canvas.paint(
                        &Shape::RRect {
                            cx,
                            cy: 0.435,
                            hx: 0.052,
                            hy: 0.011,
                            r: 0.01,
                        },
                        sp.brow_color,
                        None,
                    );
                }
            }
            "mouth" => {
                let variant = variant_for(schema, attrs, "mouth")?;
                let shape = match variant {
                    0 => Shape::Ellipse {
                        cx: 0.5,
                        cy: 0.72,
                        rx: 0.10,
                        ry: 0.035,
                    },
                    1 => Shape::RRect {
                        cx: 0.5,
                        cy: 0.72,
                        hx: 0.085,
                        hy: 0.016,
                        r: 0.012,
                    },
                    _ => Shape::Ellipse {
                        cx: 0.5,
                        cy: 0.725,
                        rx: 0.055,
                        ry: 0.030,
                    },
                };
                canvas.paint(&shape, sp.mouth_color, None);
            }
            "facial_hair" => {
                // no facial-hair attribute in the default schema; the layer
                // exists for Z-order completeness
            }
            "glasses" => {
                if look.glasses == 1 {
                    for cx in [0.38, 0.62] {
                        canvas.paint(
                            &Shape::Ring {
                                cx,
                                cy: 0.52,
                                r_out: 0.088,
                                r_in: 0.072,
                            },
                            sp.glasses_color,
                            None,
                        );
                    }
                    canvas.paint(
                        &Shape::RRect {
                            cx: 0.5,
                            cy: 0.505,
                            hx: 0.042,
                            hy: 0.008,
                            r: 0.006,
                        },
                        sp.glasses_color,
                        None,
                    );
                }
            }
            other => {
                return Err(XganError::Schema(format!("unknown layer '{other}'")));
            }
        }
    }

    // planar [-1, 1] output
    let mut out = vec![0.0f32; 3 * size * size];
    for i in 0..size * size {
        for c in 0..3 {
            out[c * size * size + i] = (canvas.px[i * 3 + c] * 2.0 - 1.0).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::default_schema;

    #[test]
    fn render_is_deterministic() {
        let schema = default_schema();
        let attrs = AttributeVector {
            values: vec![0, 1, 2, 1, 1, 0],
        };
        let a = render_sprite(&schema, &attrs, StyleId::StyleA, 32).unwrap();
        let b = render_sprite(&schema, &attrs, StyleId::StyleA, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_canvas_is_rejected() {
        let schema = default_schema();
        let attrs = AttributeVector {
            values: vec![0, 0, 0, 0, 0, 0],
        };
        assert!(render_sprite(&schema, &attrs, StyleId::StyleA, 8).is_err());
    }

    #[test]
    fn zorder_upper_layer_wins() {
        // hair_front paints over the face: at the cap center the pixel is
        // hair-colored, not skin-colored
        let schema = default_schema();
        let attrs = AttributeVector {
            values: vec![0, 2, 0, 0, 0, 0], // long hair, black
        };
        let img = render_sprite(&schema, &attrs, StyleId::StyleA, 64).unwrap();
        let size = 64;
        let (u, v) = (0.5, 0.33); // inside both the face top and the cap
        let (x, y) = ((u * size as f32) as usize, (v * size as f32) as usize);
        let r = img[y * size + x];
        let g = img[size * size + y * size + x];
        let b = img[2 * size * size + y * size + x];
        // style A black hair is (0.10, 0.09, 0.11) in [0,1]
        assert!((r - (0.10 * 2.0 - 1.0)).abs() < 0.05, "r {r}");
        assert!((g - (0.09 * 2.0 - 1.0)).abs() < 0.05, "g {g}");
        assert!((b - (0.11 * 2.0 - 1.0)).abs() < 0.05, "b {b}");
    }

    #[test]
    fn single_attribute_change_stays_in_its_region() {
        let schema = default_schema();
        let size = 48;
        let base = AttributeVector {
            values: vec![0, 2, 1, 0, 0, 1],
        };
        for (attr_idx, alt) in [(3usize, 2usize), (4, 1), (2, 3), (0, 1)] {
            let mut changed = base.clone();
            changed.values[attr_idx] = alt;
            for style in [StyleId::StyleA, StyleId::StyleB] {
                let a = render_sprite(&schema, &base, style, size).unwrap();
                let b = render_sprite(&schema, &changed, style, size).unwrap();

                // union of regions of the layers driven by this attribute
                let mut regions = Vec::new();
                for layer in &schema.layers {
                    let deps = layer_dependencies(&schema, layer).unwrap();
                    if deps.contains(&attr_idx) {
                        regions.push(layer_region(layer).unwrap());
                    }
                }
                assert!(!regions.is_empty());

                let mut out_of_region = 0;
                for i in 0..size * size {
                    let differs = (0..3).any(|c| a[c * size * size + i] != b[c * size * size + i]);
                    if !differs {
                        continue;
                    }
                    let (x, y) = (i % size, i / size);
                    let (u, v) = ((x as f32 + 0.5) / size as f32, (y as f32 + 0.5) / size as f32);
                    let inside = regions
                        .iter()
                        .any(|&(u0, v0, u1, v1)| u >= u0 && u <= u1 && v >= v0 && v <= v1);
                    if !inside {
                        out_of_region += 1;
                    }
                }
                assert_eq!(
                    out_of_region, 0,
                    "attr {attr_idx} leaked {out_of_region} pixels outside its region ({style:?})"
                );
            }
        }
    }

    #[test]
    fn styles_are_pixel_distinct() {
        let schema = default_schema();
        let attrs = AttributeVector {
            values: vec![1, 0, 1, 1, 1, 2],
        };
        let a = render_sprite(&schema, &attrs, StyleId::StyleA, 32).unwrap();
        let b = render_sprite(&schema, &attrs, StyleId::StyleB, 32).unwrap();
        let mad: f32 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.len() as f32;
        assert!(mad > 0.1, "mean abs pixel difference {mad}");
    }
}
