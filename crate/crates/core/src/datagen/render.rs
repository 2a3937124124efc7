//! Anti-aliased rasterization of scenes (4x4 supersampling per pixel).

use super::scene::{Background, SceneObject, SceneSpec, Shape, Size, GRID};

const SUPER: usize = 4;

fn background_value(bg: Background, x: usize, y: usize) -> f32 {
    match bg {
        Background::Plain => 0.50,
        Background::Striped => {
            if (y / 2) % 2 == 0 {
                0.45
            } else {
                0.55
            }
        }
        Background::Dotted => {
            if x % 4 == 1 && y % 4 == 1 {
                0.40
            } else {
                0.52
            }
        }
        Background::Checkered => {
            if ((x / 4) + (y / 4)) % 2 == 0 {
                0.44
            } else {
                0.56
            }
        }
    }
}

fn inside(o: &SceneObject, cx: f32, cy: f32, r: f32, px: f32, py: f32) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match o.shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => {
            let h = r * 0.85;
            dx.abs() <= h && dy.abs() <= h
        }
        Shape::Triangle => {
            // Apex up: (0, -r), base corners (-r, r) and (r, r).
            if dy > r || dy < -r {
                return false;
            }
            let half_width = r * (dy + r) / (2.0 * r);
            dx.abs() <= half_width
        }
    }
}

/// Renders the scene to interleaved RGB bytes, row-major, `side x side`.
pub fn render(scene: &SceneSpec, side: usize) -> Vec<u8> {
    let cell = side as f32 / GRID as f32;
    let mut img = vec![0f32; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let v = background_value(scene.background(), x, y);
            img[(y * side + x) * 3..(y * side + x) * 3 + 3].fill(v);
        }
    }
    for o in scene.objects() {
        let cx = (o.cell.1 as f32 + 0.5) * cell;
        let cy = (o.cell.0 as f32 + 0.5) * cell;
        let r = match o.size {
            Size::Small => 0.36 * cell,
            Size::Large => 0.50 * cell,
        };
        let rgb = o.color.rgb();
        let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + r + 1.0).ceil() as usize).min(side);
        let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + r + 1.0).ceil() as usize).min(side);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUPER {
                    for sx in 0..SUPER {
                        let px = x as f32 + (sx as f32 + 0.5) / SUPER as f32;
                        let py = y as f32 + (sy as f32 + 0.5) / SUPER as f32;
                        if inside(o, cx, cy, r, px, py) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = hits as f32 / (SUPER * SUPER) as f32;
                let p = &mut img[(y * side + x) * 3..(y * side + x) * 3 + 3];
                for c in 0..3 {
                    p[c] = p[c] * (1.0 - a) + rgb[c] * a;
                }
            }
        }
    }
    img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::super::scene::Color;
    use super::*;

    #[test]
    fn object_colour_appears_at_cell_centre() {
        let o = SceneObject {
            shape: Shape::Square,
            color: Color::Red,
            size: Size::Large,
            cell: (1, 2),
        };
        let scene = SceneSpec::new(vec![o], Background::Plain).unwrap();
        let img = render(&scene, 32);
        let (x, y) = (2 * 8 + 4, 8 + 4);
        let p = &img[(y * 32 + x) * 3..(y * 32 + x) * 3 + 3];
        assert_eq!(p, &[219, 41, 41]);
        // Far corner keeps the plain background.
        assert_eq!(&img[0..3], &[128, 128, 128]);
    }

    #[test]
    fn edges_are_antialiased() {
        let o = SceneObject {
            shape: Shape::Circle,
            color: Color::Blue,
            size: Size::Large,
            cell: (0, 0),
        };
        let scene = SceneSpec::new(vec![o], Background::Plain).unwrap();
        let img = render(&scene, 32);
        let partial = img
            .chunks(3)
            .filter(|p| p[2] > 128 && p[2] < 219 && p[0] < 128)
            .count();
        assert!(partial > 0, "no partially covered pixels");
    }
}
