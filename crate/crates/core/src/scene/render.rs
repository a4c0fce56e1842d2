use super::{Color, ObjectClass, SceneGraph, Theme, CELL, IMAGE_SIZE};

/// RGB raster, row-major `H×W×3`, values are bytes scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneImage {
    bytes: Vec<u8>,
}

impl SceneImage {
    pub fn from_bytes(bytes: Vec<u8>) -> Option<Self> {
        (bytes.len() == IMAGE_SIZE * IMAGE_SIZE * 3).then_some(Self { bytes })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn width(&self) -> usize {
        IMAGE_SIZE
    }

    pub fn height(&self) -> usize {
        IMAGE_SIZE
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * IMAGE_SIZE + col) * 3;
        [0, 1, 2].map(|c| self.bytes[i + c] as f64 / 255.0)
    }

    pub fn pixels(&self) -> Vec<f64> {
        self.bytes.iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub(crate) fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * IMAGE_SIZE + col) * 3;
        self.bytes[i..i + 3].copy_from_slice(&rgb);
    }
}

pub(crate) fn color_rgb(c: Color) -> [u8; 3] {
    match c {
        Color::Red => [200, 40, 40],
        Color::Gray => [128, 128, 128],
        Color::Green => [40, 160, 60],
        Color::White => [245, 245, 245],
        Color::Blue => [40, 80, 200],
        Color::Brown => [130, 80, 30],
    }
}

pub(crate) fn background_rgb(t: Option<Theme>) -> [u8; 3] {
    match t {
        Some(Theme::Residential) => [222, 204, 160],
        Some(Theme::Industrial) => [88, 84, 100],
        Some(Theme::Rural) => [170, 196, 110],
        Some(Theme::Airport) => [186, 170, 140],
        Some(Theme::Harbor) => [56, 112, 150],
        None => [0, 0, 0],
    }
}

/// 4×4 stamp drawn in each filled quadrant of an object's cell.
fn pattern(class: ObjectClass) -> [&'static str; 4] {
    match class {
        ObjectClass::Building => ["####", "####", "####", "####"],
        ObjectClass::Road => ["....", "####", "####", "...."],
        ObjectClass::Tree => [".##.", "####", "####", ".##."],
        ObjectClass::Plane => ["#..#", ".##.", ".##.", "#..#"],
        ObjectClass::Tank => ["####", "#..#", "#..#", "####"],
        ObjectClass::Boat => [".##.", ".##.", ".##.", ".##."],
        ObjectClass::Field => ["#.#.", ".#.#", "#.#.", ".#.#"],
    }
}

/// Rasterises a scene: theme background, then for each object its class
/// stamp in `count` quadrants (top-left, top-right, bottom-left,
/// bottom-right) of its cell, in the object's color.
pub fn render(g: &SceneGraph) -> SceneImage {
    let bg = background_rgb(g.theme);
    let mut img = SceneImage {
        bytes: bg.repeat(IMAGE_SIZE * IMAGE_SIZE),
    };
    let half = CELL / 2;
    for o in &g.objects {
        let Some(cell) = o.cell else { continue };
        let rgb = color_rgb(o.color);
        let stamp = pattern(o.class);
        for q in 0..o.count.min(4) as usize {
            let top = cell.row as usize * CELL + (q / 2) * half;
            let left = cell.col as usize * CELL + (q % 2) * half;
            for (dy, line) in stamp.iter().enumerate() {
                for (dx, ch) in line.bytes().enumerate() {
                    if ch == b'#' {
                        img.set(top + dy, left + dx, rgb);
                    }
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Cell, SceneObject};

    fn one_building(color: Color) -> SceneGraph {
        SceneGraph {
            theme: Some(Theme::Residential),
            objects: vec![SceneObject {
                class: ObjectClass::Building,
                color,
                count: 1,
                cell: Some(Cell::new(0, 0)),
            }],
            relations: vec![],
        }
    }

    #[test]
    fn building_at_origin_is_red() {
        let img = render(&one_building(Color::Red));
        let red = color_rgb(Color::Red).map(|b| b as f64 / 255.0);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(img.pixel(r, c), red);
            }
        }
        let bg = background_rgb(Some(Theme::Residential)).map(|b| b as f64 / 255.0);
        assert_eq!(img.pixel(31, 31), bg);
    }

    #[test]
    fn color_change_touches_only_that_cell() {
        let mut g = one_building(Color::Red);
        g.objects.push(SceneObject {
            class: ObjectClass::Tree,
            color: Color::Green,
            count: 3,
            cell: Some(Cell::new(2, 3)),
        });
        let a = render(&g);
        g.objects[1].color = Color::Blue;
        let b = render(&g);
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                let inside = (16..24).contains(&r) && (24..32).contains(&c);
                if !inside {
                    assert_eq!(a.pixel(r, c), b.pixel(r, c));
                }
            }
        }
        assert_ne!(a, b);
    }
}
