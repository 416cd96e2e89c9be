//! Procedural scenes: up to four coloured shapes on a 4×4 grid.
//!
//! Canonical text form, used in manifests:
//!
//! ```text
//! scene  := "bg:" BACKGROUND (";" object)*
//! object := COLOR "-" SHAPE "-" SIZE "@" ROW "," COL
//! ```
//!
//! Objects are listed in row-major cell order, so every scene has exactly
//! one spelling. Example: `bg:white;red-circle-large@0,1;blue-square-small@3,3`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

pub const GRID: usize = 4;
pub const MAX_OBJECTS: usize = 4;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$variant),)+
                    other => Err(Error::Scene(format!("unknown {} {other:?}", stringify!($name).to_lowercase()))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Cyan => "cyan",
    Magenta => "magenta",
    Orange => "orange",
    Purple => "purple",
});
word_enum!(Size { Small => "small", Large => "large" });
word_enum!(Background { White => "white", Black => "black", Gray => "gray" });

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 0.75, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
            Color::Purple => [0.5, 0.0, 0.5],
        }
    }
}

impl Background {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Background::White => [1.0, 1.0, 1.0],
            Background::Black => [0.0, 0.0, 0.0],
            Background::Gray => [0.5, 0.5, 0.5],
        }
    }
}

/// Grid cell, `(row, col)` with row 0 at the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Result<Self> {
        if row >= GRID || col >= GRID {
            return Err(Error::Scene(format!("cell ({row}, {col}) outside the {GRID}x{GRID} grid")));
        }
        Ok(Cell { row: row as u8, col: col as u8 })
    }

    pub fn all() -> impl Iterator<Item = Cell> {
        (0..GRID as u8).flat_map(|row| (0..GRID as u8).map(move |col| Cell { row, col }))
    }

    /// Spoken position, e.g. "top left" or "lower midright".
    pub fn phrase(self) -> String {
        const ROWS: [&str; GRID] = ["top", "upper", "lower", "bottom"];
        const COLS: [&str; GRID] = ["left", "midleft", "midright", "right"];
        format!("{} {}", ROWS[self.row as usize], COLS[self.col as usize])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub cell: Cell,
    pub size: Size,
}

impl SceneObject {
    /// "large red circle"
    pub fn description(&self) -> String {
        format!("{} {} {}", self.size, self.color, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SceneSpec {
    background: Background,
    objects: Vec<SceneObject>,
}

impl SceneSpec {
    /// Validates the object count and cell uniqueness; sorts objects by cell.
    pub fn new(background: Background, mut objects: Vec<SceneObject>) -> Result<Self> {
        if objects.len() > MAX_OBJECTS {
            return Err(Error::Scene(format!("{} objects, at most {MAX_OBJECTS} allowed", objects.len())));
        }
        objects.sort_by_key(|o| o.cell);
        if let Some(w) = objects.windows(2).find(|w| w[0].cell == w[1].cell) {
            return Err(Error::Scene(format!("two objects share cell ({}, {})", w[0].cell.row, w[0].cell.col)));
        }
        Ok(SceneSpec { background, objects })
    }

    pub fn empty(background: Background) -> Self {
        SceneSpec { background, objects: Vec::new() }
    }

    pub fn background(&self) -> Background {
        self.background
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn object_at(&self, cell: Cell) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        Cell::all().filter(|c| self.object_at(*c).is_none()).collect()
    }

    /// Templated description of every object, then the background.
    pub fn caption(&self) -> String {
        if self.objects.is_empty() {
            return format!("an empty {} background", self.background);
        }
        let parts: Vec<String> =
            self.objects.iter().map(|o| format!("a {} at the {}", o.description(), o.cell.phrase())).collect();
        format!("{} on a {} background", parts.join(" and "), self.background)
    }

    /// Deterministic raster: `image_size / 4` pixels per cell, hard edges.
    pub fn render(&self, image_size: usize) -> Result<ImageGrid> {
        if image_size == 0 || image_size % GRID != 0 {
            return Err(Error::Scene(format!("image size {image_size} is not a positive multiple of {GRID}")));
        }
        let cell = image_size / GRID;
        let bg = self.background.rgb();
        let mut pixels = Vec::with_capacity(image_size * image_size * 3);
        for _ in 0..image_size * image_size {
            pixels.extend_from_slice(&bg);
        }
        for o in &self.objects {
            let rgb = o.color.rgb();
            let (y0, x0) = (o.cell.row as usize * cell, o.cell.col as usize * cell);
            for dy in 0..cell {
                for dx in 0..cell {
                    if covers(o.shape, o.size, cell, dx, dy) {
                        let p = ((y0 + dy) * image_size + x0 + dx) * 3;
                        pixels[p..p + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
        ImageGrid::new(image_size, 3, pixels)
    }
}

/// Whether the pixel at `(dx, dy)` inside a cell of side `cell` is covered.
/// Coordinates are taken at pixel centres relative to the cell centre.
pub fn covers(shape: Shape, size: Size, cell: usize, dx: usize, dy: usize) -> bool {
    let c = cell as f64 / 2.0;
    let x = dx as f64 + 0.5 - c;
    let y = dy as f64 + 0.5 - c;
    let half = match size {
        Size::Large => 0.45 * cell as f64,
        Size::Small => 0.25 * cell as f64,
    };
    match shape {
        Shape::Circle => x * x + y * y <= half * half,
        Shape::Square => x.abs() <= half && y.abs() <= half,
        // apex up: the half-width grows from 0 at the top to `half` at the base
        Shape::Triangle => y.abs() <= half && x.abs() <= (y + half) / 2.0,
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bg:{}", self.background)?;
        for o in &self.objects {
            write!(f, ";{}-{}-{}@{},{}", o.color, o.shape, o.size, o.cell.row, o.cell.col)?;
        }
        Ok(())
    }
}

fn parse_object(s: &str) -> Result<SceneObject> {
    let bad = || Error::Scene(format!("malformed object {s:?}"));
    let (attrs, pos) = s.split_once('@').ok_or_else(bad)?;
    let mut parts = attrs.split('-');
    let (Some(color), Some(shape), Some(size), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(bad());
    };
    let (row, col) = pos.split_once(',').ok_or_else(bad)?;
    let row: usize = row.parse().map_err(|_| bad())?;
    let col: usize = col.parse().map_err(|_| bad())?;
    Ok(SceneObject { shape: shape.parse()?, color: color.parse()?, cell: Cell::new(row, col)?, size: size.parse()? })
}

impl FromStr for SceneSpec {
    type Err = Error;

    /// Accepts only the canonical spelling.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(';');
        let head = parts.next().unwrap_or_default();
        let bg = head.strip_prefix("bg:").ok_or_else(|| Error::Scene(format!("scene {s:?} lacks a bg: prefix")))?;
        let objects = parts.map(parse_object).collect::<Result<Vec<_>>>()?;
        let scene = SceneSpec::new(bg.parse()?, objects)?;
        if scene.to_string() != s {
            return Err(Error::Scene(format!("scene {s:?} is not in canonical form")));
        }
        Ok(scene)
    }
}

impl TryFrom<String> for SceneSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SceneSpec> for String {
    fn from(s: SceneSpec) -> String {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obj(color: Color, shape: Shape, size: Size, row: usize, col: usize) -> SceneObject {
        SceneObject { shape, color, size, cell: Cell::new(row, col).unwrap() }
    }

    #[test]
    fn empty_white_scene_is_all_ones() {
        let img = SceneSpec::empty(Background::White).render(32).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn red_circle_lights_red_only_inside_its_disc() {
        let s = SceneSpec::new(Background::Black, vec![obj(Color::Red, Shape::Circle, Size::Large, 0, 0)]).unwrap();
        let img = s.render(32).unwrap();
        let mut lit = 0;
        for y in 0..32 {
            for x in 0..32 {
                let r = img.get(y, x, 0);
                let (cx, cy) = (x as f64 + 0.5 - 4.0, y as f64 + 0.5 - 4.0);
                let inside = x < 8 && y < 8 && cx * cx + cy * cy <= 3.6 * 3.6;
                assert_eq!(r > 0.0, inside, "pixel ({y}, {x})");
                lit += inside as usize;
                assert_eq!(img.get(y, x, 1), 0.0);
                assert_eq!(img.get(y, x, 2), 0.0);
            }
        }
        assert!(lit > 20);
    }

    #[test]
    fn color_change_only_touches_its_cell() {
        let a = SceneSpec::new(
            Background::Gray,
            vec![obj(Color::Red, Shape::Square, Size::Large, 1, 2), obj(Color::Blue, Shape::Triangle, Size::Small, 3, 0)],
        )
        .unwrap();
        let b = SceneSpec::new(
            Background::Gray,
            vec![obj(Color::Green, Shape::Square, Size::Large, 1, 2), obj(Color::Blue, Shape::Triangle, Size::Small, 3, 0)],
        )
        .unwrap();
        let (ia, ib) = (a.render(32).unwrap(), b.render(32).unwrap());
        let mut changed = 0;
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    if ia.get(y, x, c) != ib.get(y, x, c) {
                        assert!((8..16).contains(&y) && (16..24).contains(&x));
                        changed += 1;
                    }
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn shared_cells_and_crowds_are_rejected() {
        let o = obj(Color::Red, Shape::Circle, Size::Small, 2, 2);
        assert!(SceneSpec::new(Background::White, vec![o, o]).is_err());
        let five: Vec<_> = (0..5).map(|i| obj(Color::Red, Shape::Circle, Size::Small, i % 4, i / 4)).collect();
        assert!(SceneSpec::new(Background::White, five).is_err());
    }

    #[test]
    fn captions_are_templated() {
        let s = SceneSpec::new(
            Background::White,
            vec![obj(Color::Blue, Shape::Square, Size::Small, 3, 3), obj(Color::Red, Shape::Circle, Size::Large, 0, 1)],
        )
        .unwrap();
        assert_eq!(
            s.caption(),
            "a large red circle at the top midleft and a small blue square at the bottom right on a white background"
        );
        assert_eq!(s.to_string(), "bg:white;red-circle-large@0,1;blue-square-small@3,3");
    }

    #[test]
    fn non_canonical_spellings_are_rejected() {
        assert!("bg:white;blue-square-small@3,3;red-circle-large@0,1".parse::<SceneSpec>().is_err());
        assert!("white;red-circle-large@0,1".parse::<SceneSpec>().is_err());
        assert!("bg:white;red-circle-huge@0,1".parse::<SceneSpec>().is_err());
        assert!("bg:white;red-circle-large@4,1".parse::<SceneSpec>().is_err());
        assert!("bg:white".parse::<SceneSpec>().is_ok());
    }

    fn arb_scene() -> impl Strategy<Value = SceneSpec> {
        let object = (0..3usize, 0..8usize, 0..2usize);
        (0..3usize, proptest::sample::subsequence((0..16usize).collect::<Vec<_>>(), 0..=4), proptest::collection::vec(object, 4))
            .prop_map(|(bg, cells, attrs)| {
                let objects = cells
                    .iter()
                    .zip(attrs)
                    .map(|(&c, (s, col, sz))| SceneObject {
                        shape: Shape::ALL[s],
                        color: Color::ALL[col],
                        size: Size::ALL[sz],
                        cell: Cell::new(c / 4, c % 4).unwrap(),
                    })
                    .collect();
                SceneSpec::new(Background::ALL[bg], objects).unwrap()
            })
    }

    proptest! {
        #[test]
        fn canonical_string_round_trips(scene in arb_scene()) {
            let text = scene.to_string();
            let back: SceneSpec = text.parse().unwrap();
            prop_assert_eq!(&back, &scene);
            prop_assert_eq!(back.render(16).unwrap(), scene.render(16).unwrap());
        }
    }
}
