//! Seed and context assignment maps rendered as PPM and SVG.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::temporal::{ContextSet, SeedSelection};
use crate::vision::VideoClip;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VizOptions {
    /// Pixel magnification.
    pub scale: usize,
    /// Gap between frame panels, in output pixels.
    pub gap: usize,
    /// Brightness factor for non-seed patches.
    pub dim: f64,
}

impl Default for VizOptions {
    fn default() -> Self {
        Self { scale: 4, gap: 4, dim: 0.3 }
    }
}

/// An RGB raster, row-major, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![[255; 3]; width * height] }
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }
}

/// Fully saturated colour at hue `h` in `[0, 1)`.
pub fn hue(h: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rendered map plus the outline colours it uses.
#[derive(Debug, Clone)]
pub struct AssignmentMap {
    pub image: Image,
    pub svg: String,
    pub outline_hues: BTreeSet<[u8; 3]>,
}

/// One panel per frame: non-seed patches dimmed, seed patches filled with
/// the mean input colour of their context's sources and outlined in the
/// context's hue.
pub fn render_assignment_map<T: Scalar>(clip: &VideoClip<T>, patch: usize, seeds: &SeedSelection<T>, ctx: &ContextSet<T>, opts: &VizOptions) -> Result<AssignmentMap> {
    let (frames, h, w) = (clip.len(), clip.height(), clip.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 || seeds.frames() != frames || ctx.assignment.len() != seeds.len() {
        return Err(Error::invalid("render_assignment_map", "clip, seeds and contexts disagree in shape"));
    }
    let gw = w / patch;
    let seed_list: Vec<(usize, usize)> = seeds.seeds().collect();
    let pixel = |t: usize, y: usize, x: usize| -> [f64; 3] {
        let f = clip.frame(t);
        let i = (y * w + x) * 3;
        [f[i].as_f64(), f[i + 1].as_f64(), f[i + 2].as_f64()]
    };
    let patch_mean = |t: usize, p: usize| -> [f64; 3] {
        let (py, px) = (p / gw * patch, p % gw * patch);
        let mut acc = [0.0; 3];
        for y in py..py + patch {
            for x in px..px + patch {
                let c = pixel(t, y, x);
                (0..3).for_each(|k| acc[k] += c[k]);
            }
        }
        acc.map(|a| a / (patch * patch) as f64)
    };
    let members = ctx.members();
    let fills: Vec<[u8; 3]> = members
        .iter()
        .map(|m| {
            let mut acc = [0.0; 3];
            for &s in m {
                let (t, p) = seed_list[s];
                let c = patch_mean(t, p);
                (0..3).for_each(|k| acc[k] += c[k]);
            }
            acc.map(|a| to_byte(a / m.len().max(1) as f64))
        })
        .collect();
    let outlines: Vec<[u8; 3]> = (0..ctx.len()).map(|j| hue(j as f64 / ctx.len() as f64)).collect();
    let mut owner = vec![None; frames * (h / patch) * gw];
    for (s, &(t, p)) in seed_list.iter().enumerate() {
        owner[t * (h / patch) * gw + p] = Some(ctx.assignment[s]);
    }
    let s = opts.scale.max(1);
    let panel_w = w * s;
    let mut img = Image::new(frames * panel_w + frames.saturating_sub(1) * opts.gap, h * s);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}">"#, img.width, img.height);
    let mut used = BTreeSet::new();
    for t in 0..frames {
        let ox = t * (panel_w + opts.gap);
        for y in 0..h {
            for x in 0..w {
                let p = (y / patch) * gw + x / patch;
                let c = match owner[t * (h / patch) * gw + p] {
                    Some(j) => {
                        let (ly, lx) = (y % patch, x % patch);
                        if ly == 0 || lx == 0 || ly == patch - 1 || lx == patch - 1 {
                            used.insert(outlines[j]);
                            outlines[j]
                        } else {
                            fills[j]
                        }
                    }
                    None => pixel(t, y, x).map(|v| to_byte(v * opts.dim)),
                };
                for dy in 0..s {
                    for dx in 0..s {
                        img.put(ox + x * s + dx, y * s + dy, c);
                    }
                }
            }
        }
        for p in 0..(h / patch) * gw {
            let (x, y) = (ox + (p % gw) * patch * s, (p / gw) * patch * s);
            let size = patch * s;
            match owner[t * (h / patch) * gw + p] {
                Some(j) => {
                    let [fr, fg, fb] = fills[j];
                    let [sr, sg, sb] = outlines[j];
                    let _ = writeln!(svg, r#"<rect x="{x}" y="{y}" width="{size}" height="{size}" fill="rgb({fr},{fg},{fb})" stroke="rgb({sr},{sg},{sb})" stroke-width="2"/>"#);
                }
                None => {
                    let m = patch_mean(t, p).map(|v| to_byte(v * opts.dim));
                    let _ = writeln!(svg, r#"<rect x="{x}" y="{y}" width="{size}" height="{size}" fill="rgb({},{},{})"/>"#, m[0], m[1], m[2]);
                }
            }
        }
    }
    svg.push_str("</svg>\n");
    Ok(AssignmentMap { image: img, svg, outline_hues: used })
}

/// Writes `<stem>.ppm` and, when `svg` is set, `<stem>.svg`.
pub fn write_assignment_map(map: &AssignmentMap, stem: &Path, svg: bool) -> Result<()> {
    fs::write(stem.with_extension("ppm"), map.image.to_ppm())?;
    if svg {
        fs::write(stem.with_extension("svg"), &map.svg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AggregationMethod;
    use crate::rng::SplitMix64;
    use crate::temporal::{select_seeds, summarize_context};
    use crate::tensor::Tensor;

    fn fixture(method: AggregationMethod, k: usize) -> AssignmentMap {
        let mut rng = SplitMix64::new(1);
        let clip = VideoClip::new(Tensor::<f64>::from_fn(&[3, 8, 8, 3], |_| rng.uniform()), None).unwrap();
        let scores = Tensor::from_fn(&[3, 4], |_| rng.uniform());
        let sel = select_seeds(&scores, 0.5).unwrap();
        let feats = Tensor::from_fn(&[6, 3], |_| rng.normal());
        let ctx = summarize_context(&feats, None, &method, k, 100).unwrap();
        render_assignment_map(&clip, 4, &sel, &ctx, &VizOptions::default()).unwrap()
    }

    #[test]
    fn one_context_uses_one_hue() {
        assert_eq!(fixture(AggregationMethod::Bipartite, 1).outline_hues.len(), 1);
    }

    #[test]
    fn identity_contexts_use_one_hue_per_seed() {
        assert_eq!(fixture(AggregationMethod::None, 1).outline_hues.len(), 6);
    }

    #[test]
    fn six_seed_example_renders_four_hues() {
        let clip = VideoClip::new(Tensor::<f64>::full(&[3, 8, 8, 3], 0.5), None).unwrap();
        let scores = Tensor::from_f64(&[3, 4], &[0.4, 0.3, 0.2, 0.1, 0.4, 0.3, 0.2, 0.1, 0.4, 0.3, 0.2, 0.1]).unwrap();
        let sel = select_seeds(&scores, 0.5).unwrap();
        let feats = Tensor::from_f64(&[6, 2], &[1., 0., 0.99, 0.1, 0., 1., 0.1, 0.99, -1., 0., 0.7, 0.7]).unwrap();
        let (ctx, _) = crate::temporal::bipartite_merge(&feats, None, 4, 2).unwrap();
        let map = render_assignment_map(&clip, 4, &sel, &ctx, &VizOptions::default()).unwrap();
        assert_eq!(map.outline_hues.len(), 4);
        let ppm = map.image.to_ppm();
        assert!(ppm.starts_with(b"P6\n"));
        assert_eq!(map.svg.matches("stroke=").count(), 6);
    }

    #[test]
    fn hues_are_distinct_around_the_wheel() {
        let hs: BTreeSet<[u8; 3]> = (0..12).map(|j| hue(j as f64 / 12.0)).collect();
        assert_eq!(hs.len(), 12);
        assert_eq!(hue(0.0), [255, 0, 0]);
    }
}
