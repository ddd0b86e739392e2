//! Procedural stroke fonts for fixtures and demos.
//!
//! Each Latin letter is a handful of line and arc primitives in a unit em
//! box (x right, y down). A [`FontStyle`] varies weight, slant, width and
//! serifs, and glyphs are rendered with analytic anti-aliasing as dark ink
//! on a white background.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::store::{Dataset, FontCatalog, GlyphImage};

#[derive(Clone, Copy, Debug)]
enum Prim {
    Line(f64, f64, f64, f64),
    /// Center, radii, start and end angle in degrees. Angles run
    /// counter-clockwise with y pointing up.
    Arc(f64, f64, f64, f64, f64, f64),
    Dot(f64, f64),
}

use Prim::{Arc, Dot, Line};

fn letter(ch: char) -> Option<Vec<Prim>> {
    let p = match ch {
        'A' => vec![Line(0.2, 0.82, 0.5, 0.12), Line(0.5, 0.12, 0.8, 0.82), Line(0.32, 0.55, 0.68, 0.55)],
        'B' => vec![
            Line(0.25, 0.12, 0.25, 0.82),
            Line(0.25, 0.12, 0.55, 0.12),
            Arc(0.55, 0.295, 0.2, 0.175, 90.0, -90.0),
            Line(0.25, 0.47, 0.58, 0.47),
            Arc(0.58, 0.645, 0.2, 0.175, 90.0, -90.0),
            Line(0.25, 0.82, 0.58, 0.82),
        ],
        'C' => vec![Arc(0.52, 0.47, 0.3, 0.35, 45.0, 315.0)],
        'D' => vec![
            Line(0.25, 0.12, 0.25, 0.82),
            Line(0.25, 0.12, 0.45, 0.12),
            Arc(0.45, 0.47, 0.3, 0.35, 90.0, -90.0),
            Line(0.25, 0.82, 0.45, 0.82),
        ],
        'E' => vec![
            Line(0.25, 0.12, 0.25, 0.82),
            Line(0.25, 0.12, 0.75, 0.12),
            Line(0.25, 0.47, 0.65, 0.47),
            Line(0.25, 0.82, 0.75, 0.82),
        ],
        'F' => vec![Line(0.25, 0.12, 0.25, 0.82), Line(0.25, 0.12, 0.75, 0.12), Line(0.25, 0.47, 0.65, 0.47)],
        'G' => vec![Arc(0.52, 0.47, 0.3, 0.35, 45.0, 360.0), Line(0.82, 0.47, 0.6, 0.47)],
        'H' => vec![Line(0.22, 0.12, 0.22, 0.82), Line(0.78, 0.12, 0.78, 0.82), Line(0.22, 0.47, 0.78, 0.47)],
        'I' => vec![Line(0.5, 0.12, 0.5, 0.82), Line(0.35, 0.12, 0.65, 0.12), Line(0.35, 0.82, 0.65, 0.82)],
        'J' => vec![Line(0.65, 0.12, 0.65, 0.65), Arc(0.45, 0.65, 0.2, 0.17, 0.0, -180.0)],
        'K' => vec![Line(0.25, 0.12, 0.25, 0.82), Line(0.75, 0.12, 0.25, 0.55), Line(0.4, 0.45, 0.78, 0.82)],
        'L' => vec![Line(0.25, 0.12, 0.25, 0.82), Line(0.25, 0.82, 0.75, 0.82)],
        'M' => vec![
            Line(0.18, 0.82, 0.18, 0.12),
            Line(0.18, 0.12, 0.5, 0.6),
            Line(0.5, 0.6, 0.82, 0.12),
            Line(0.82, 0.12, 0.82, 0.82),
        ],
        'N' => vec![Line(0.22, 0.82, 0.22, 0.12), Line(0.22, 0.12, 0.78, 0.82), Line(0.78, 0.82, 0.78, 0.12)],
        'O' => vec![Arc(0.5, 0.47, 0.3, 0.35, 0.0, 360.0)],
        'P' => vec![
            Line(0.25, 0.12, 0.25, 0.82),
            Line(0.25, 0.12, 0.55, 0.12),
            Arc(0.55, 0.3, 0.2, 0.18, 90.0, -90.0),
            Line(0.25, 0.48, 0.55, 0.48),
        ],
        'Q' => vec![Arc(0.5, 0.47, 0.3, 0.35, 0.0, 360.0), Line(0.58, 0.65, 0.82, 0.88)],
        'R' => vec![
            Line(0.25, 0.12, 0.25, 0.82),
            Line(0.25, 0.12, 0.55, 0.12),
            Arc(0.55, 0.3, 0.2, 0.18, 90.0, -90.0),
            Line(0.25, 0.48, 0.55, 0.48),
            Line(0.45, 0.48, 0.78, 0.82),
        ],
        'S' => vec![Arc(0.5, 0.3, 0.25, 0.18, 30.0, 270.0), Arc(0.5, 0.64, 0.25, 0.18, 90.0, -150.0)],
        'T' => vec![Line(0.2, 0.12, 0.8, 0.12), Line(0.5, 0.12, 0.5, 0.82)],
        'U' => vec![
            Line(0.22, 0.12, 0.22, 0.6),
            Arc(0.5, 0.6, 0.28, 0.22, 180.0, 360.0),
            Line(0.78, 0.6, 0.78, 0.12),
        ],
        'V' => vec![Line(0.2, 0.12, 0.5, 0.82), Line(0.5, 0.82, 0.8, 0.12)],
        'W' => vec![
            Line(0.12, 0.12, 0.3, 0.82),
            Line(0.3, 0.82, 0.5, 0.35),
            Line(0.5, 0.35, 0.7, 0.82),
            Line(0.7, 0.82, 0.88, 0.12),
        ],
        'X' => vec![Line(0.22, 0.12, 0.78, 0.82), Line(0.78, 0.12, 0.22, 0.82)],
        'Y' => vec![Line(0.2, 0.12, 0.5, 0.47), Line(0.8, 0.12, 0.5, 0.47), Line(0.5, 0.47, 0.5, 0.82)],
        'Z' => vec![Line(0.22, 0.12, 0.78, 0.12), Line(0.78, 0.12, 0.22, 0.82), Line(0.22, 0.82, 0.78, 0.82)],
        'a' => vec![Arc(0.48, 0.64, 0.2, 0.18, 0.0, 360.0), Line(0.68, 0.42, 0.68, 0.82)],
        'b' => vec![Line(0.3, 0.12, 0.3, 0.82), Arc(0.5, 0.62, 0.2, 0.2, 0.0, 360.0)],
        'c' => vec![Arc(0.52, 0.62, 0.22, 0.21, 45.0, 315.0)],
        'd' => vec![Arc(0.5, 0.62, 0.2, 0.2, 0.0, 360.0), Line(0.7, 0.12, 0.7, 0.82)],
        'e' => vec![Line(0.3, 0.62, 0.72, 0.62), Arc(0.51, 0.62, 0.21, 0.21, 0.0, 315.0)],
        'f' => vec![
            Line(0.46, 0.26, 0.46, 0.82),
            Arc(0.6, 0.26, 0.14, 0.14, 180.0, 20.0),
            Line(0.32, 0.42, 0.66, 0.42),
        ],
        'g' => vec![
            Arc(0.5, 0.6, 0.2, 0.19, 0.0, 360.0),
            Line(0.7, 0.41, 0.7, 0.82),
            Arc(0.5, 0.82, 0.2, 0.14, 0.0, -150.0),
        ],
        'h' => vec![
            Line(0.3, 0.12, 0.3, 0.82),
            Arc(0.5, 0.6, 0.2, 0.18, 180.0, 0.0),
            Line(0.7, 0.6, 0.7, 0.82),
        ],
        'i' => vec![Line(0.5, 0.42, 0.5, 0.82), Dot(0.5, 0.26)],
        'j' => vec![Line(0.55, 0.42, 0.55, 0.85), Arc(0.4, 0.85, 0.15, 0.12, 0.0, -160.0), Dot(0.55, 0.26)],
        'k' => vec![Line(0.3, 0.12, 0.3, 0.82), Line(0.68, 0.42, 0.3, 0.68), Line(0.42, 0.6, 0.7, 0.82)],
        'l' => vec![Line(0.5, 0.12, 0.5, 0.82)],
        'm' => vec![
            Line(0.2, 0.42, 0.2, 0.82),
            Arc(0.35, 0.58, 0.15, 0.16, 180.0, 0.0),
            Line(0.5, 0.58, 0.5, 0.82),
            Arc(0.65, 0.58, 0.15, 0.16, 180.0, 0.0),
            Line(0.8, 0.58, 0.8, 0.82),
        ],
        'n' => vec![
            Line(0.3, 0.42, 0.3, 0.82),
            Arc(0.5, 0.6, 0.2, 0.18, 180.0, 0.0),
            Line(0.7, 0.6, 0.7, 0.82),
        ],
        'o' => vec![Arc(0.5, 0.62, 0.21, 0.21, 0.0, 360.0)],
        'p' => vec![Line(0.3, 0.42, 0.3, 0.97), Arc(0.5, 0.62, 0.2, 0.2, 0.0, 360.0)],
        'q' => vec![Arc(0.5, 0.62, 0.2, 0.2, 0.0, 360.0), Line(0.7, 0.42, 0.7, 0.97)],
        'r' => vec![Line(0.33, 0.42, 0.33, 0.82), Arc(0.5, 0.6, 0.17, 0.17, 180.0, 60.0)],
        's' => vec![Arc(0.5, 0.52, 0.17, 0.1, 30.0, 270.0), Arc(0.5, 0.72, 0.17, 0.1, 90.0, -150.0)],
        't' => vec![
            Line(0.45, 0.2, 0.45, 0.72),
            Arc(0.55, 0.72, 0.1, 0.1, 180.0, 300.0),
            Line(0.3, 0.42, 0.65, 0.42),
        ],
        'u' => vec![
            Line(0.3, 0.42, 0.3, 0.64),
            Arc(0.5, 0.64, 0.2, 0.18, 180.0, 360.0),
            Line(0.7, 0.42, 0.7, 0.82),
        ],
        'v' => vec![Line(0.28, 0.42, 0.5, 0.82), Line(0.5, 0.82, 0.72, 0.42)],
        'w' => vec![
            Line(0.15, 0.42, 0.32, 0.82),
            Line(0.32, 0.82, 0.5, 0.52),
            Line(0.5, 0.52, 0.68, 0.82),
            Line(0.68, 0.82, 0.85, 0.42),
        ],
        'x' => vec![Line(0.28, 0.42, 0.72, 0.82), Line(0.72, 0.42, 0.28, 0.82)],
        'y' => vec![Line(0.28, 0.42, 0.5, 0.82), Line(0.72, 0.42, 0.4, 0.97)],
        'z' => vec![Line(0.28, 0.42, 0.72, 0.42), Line(0.72, 0.42, 0.28, 0.82), Line(0.28, 0.82, 0.72, 0.82)],
        _ => return None,
    };
    Some(p)
}

/// The 52 Latin letters, uppercase first.
pub fn latin_alphabet() -> Vec<char> {
    ('A'..='Z').chain('a'..='z').collect()
}

/// Rendering parameters for one synthetic font.
#[derive(Clone, Debug, PartialEq)]
pub struct FontStyle {
    pub name: String,
    /// Stroke width as a fraction of the em size.
    pub weight: f64,
    /// Horizontal shear per unit height (positive leans right).
    pub slant: f64,
    /// Horizontal scale about the em center.
    pub width: f64,
    /// Serif length as a fraction of the em size; zero disables serifs.
    pub serif: f64,
}

impl FontStyle {
    pub fn regular(name: &str) -> Self {
        FontStyle {
            name: name.to_string(),
            weight: 0.075,
            slant: 0.0,
            width: 1.0,
            serif: 0.0,
        }
    }

    fn segments(&self, ch: char) -> Option<Vec<[f64; 4]>> {
        let prims = letter(ch)?;
        let mut segs = Vec::new();
        for p in prims {
            match p {
                Line(x0, y0, x1, y1) => {
                    segs.push([x0, y0, x1, y1]);
                    if self.serif > 0.0 && (y1 - y0).abs() > 2.0 * (x1 - x0).abs() {
                        let half = self.serif / 2.0;
                        for (x, y) in [(x0, y0), (x1, y1)] {
                            segs.push([x - half, y, x + half, y]);
                        }
                    }
                }
                Arc(cx, cy, rx, ry, a0, a1) => {
                    let n = (((a1 - a0).abs() / 10.0).ceil() as usize).max(2);
                    let pt = |t: f64| {
                        let t = t.to_radians();
                        (cx + rx * t.cos(), cy - ry * t.sin())
                    };
                    for k in 0..n {
                        let (xa, ya) = pt(a0 + (a1 - a0) * k as f64 / n as f64);
                        let (xb, yb) = pt(a0 + (a1 - a0) * (k + 1) as f64 / n as f64);
                        segs.push([xa, ya, xb, yb]);
                    }
                }
                Dot(x, y) => segs.push([x, y, x, y]),
            }
        }
        // Em-box transform: horizontal scale about the center, then shear
        // about the baseline.
        let baseline = 0.82;
        for s in &mut segs {
            for (xi, yi) in [(0, 1), (2, 3)] {
                let (x, y) = (s[xi], s[yi]);
                s[xi] = 0.5 + (x - 0.5) * self.width + self.slant * (baseline - y);
            }
        }
        Some(segs)
    }

    /// Renders `ch` at `size`×`size`, dark ink on white. `None` for
    /// characters outside the built-in alphabet.
    pub fn render(&self, ch: char, size: usize) -> Option<GlyphImage> {
        let segs = self.segments(ch)?;
        let s = size as f64;
        let half_width = (self.weight * s / 2.0).max(0.5);
        let mut px = vec![1.0f32; size * size];
        for r in 0..size {
            for c in 0..size {
                let (x, y) = ((c as f64 + 0.5) / s, (r as f64 + 0.5) / s);
                let d = segs
                    .iter()
                    .map(|seg| point_segment_distance(x, y, seg))
                    .fold(f64::INFINITY, f64::min)
                    * s;
                let coverage = (half_width + 0.5 - d).clamp(0.0, 1.0);
                px[r * size + c] = (1.0 - coverage) as f32;
            }
        }
        Some(GlyphImage::new(size, size, px, 0, 0))
    }
}

fn point_segment_distance(x: f64, y: f64, seg: &[f64; 4]) -> f64 {
    let [x0, y0, x1, y1] = *seg;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (px, py) = (x0 + t * dx, y0 + t * dy);
    ((x - px).powi(2) + (y - py).powi(2)).sqrt()
}

/// `n` distinct styles drawn deterministically from `seed`. The first style
/// is always a plain regular face, suitable as the content font.
pub fn style_family(n: usize, seed: u64) -> Vec<FontStyle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        out.push(FontStyle::regular("font00"));
    }
    for i in 1..n {
        out.push(FontStyle {
            name: format!("font{i:02}"),
            weight: rng.random_range(0.05..0.16),
            slant: if rng.random_bool(0.4) { rng.random_range(0.1..0.3) } else { 0.0 },
            width: rng.random_range(0.8..1.15),
            serif: if rng.random_bool(0.4) { rng.random_range(0.12..0.22) } else { 0.0 },
        });
    }
    out
}

/// Builds an in-memory dataset: every style renders every char in `chars`.
/// Font 0 is the content font; the last `n_unseen` fonts are held out.
pub fn fixture_dataset(styles: &[FontStyle], chars: &[char], size: usize, n_unseen: usize) -> Result<Dataset> {
    let mut chars: Vec<char> = chars.to_vec();
    chars.sort_unstable();
    chars.dedup();
    let fonts: Vec<String> = styles.iter().map(|s| s.name.clone()).collect();
    let unseen: BTreeSet<usize> = (styles.len().saturating_sub(n_unseen)..styles.len()).collect();
    let catalog = FontCatalog::new(fonts, chars.iter().map(|&c| c as u32).collect(), 0, unseen)?;
    let glyphs = styles
        .iter()
        .map(|s| chars.iter().map(|&c| s.render(c, size)).collect())
        .collect();
    Dataset::from_glyphs(catalog, glyphs)
}

/// Approximate ink fraction of a glyph (dark pixels on a light field).
pub fn ink_fraction(g: &GlyphImage) -> f64 {
    g.pixels().iter().map(|&v| 1.0 - f64::from(v)).sum::<f64>() / g.pixels().len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::binarize;

    #[test]
    fn every_letter_renders_with_ink() {
        let style = FontStyle::regular("r");
        for ch in latin_alphabet() {
            let g = style.render(ch, 64).unwrap();
            let ink = binarize(&g, 0.5).count();
            assert!(ink > 40, "{ch} has only {ink} ink pixels");
        }
        assert!(style.render('1', 64).is_none());
    }

    #[test]
    fn family_is_deterministic() {
        assert_eq!(style_family(6, 3), style_family(6, 3));
        assert_ne!(style_family(6, 3), style_family(6, 4));
    }

    #[test]
    fn bolder_style_has_more_ink() {
        let mut light = FontStyle::regular("l");
        light.weight = 0.05;
        let mut bold = light.clone();
        bold.weight = 0.15;
        let a = ink_fraction(&light.render('H', 64).unwrap());
        let b = ink_fraction(&bold.render('H', 64).unwrap());
        assert!(b > a * 2.0);
    }
}
