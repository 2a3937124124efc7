use std::fmt;
use std::str::FromStr;

use brivl_tensor::SplitMix64;

use crate::error::{Error, Result};

pub const GRID: usize = 4;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$variant),)+
                    _ => Err(Error::Data(format!("unknown {} `{s}`", stringify!($name).to_lowercase()))),
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
    Purple => "purple",
    Orange => "orange",
});
word_enum!(Size { Small => "small", Large => "large" });
word_enum!(Background { Plain => "plain", Striped => "striped", Dotted => "dotted", Checkered => "checkered" });

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.86, 0.16, 0.16],
            Color::Green => [0.16, 0.70, 0.24],
            Color::Blue => [0.16, 0.31, 0.86],
            Color::Yellow => [0.90, 0.82, 0.16],
            Color::Purple => [0.59, 0.24, 0.75],
            Color::Orange => [0.94, 0.55, 0.12],
        }
    }
}

fn pick<T: Copy>(rng: &mut SplitMix64, items: &[T]) -> T {
    items[rng.below(items.len())]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// `(row, col)` in the 4x4 placement grid.
    pub cell: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    objects: Vec<SceneObject>,
    background: Background,
}

impl SceneSpec {
    pub fn new(objects: Vec<SceneObject>, background: Background) -> Result<Self> {
        if objects.is_empty() || objects.len() > 3 {
            return Err(Error::Data(format!("a scene holds 1 to 3 objects, got {}", objects.len())));
        }
        for (i, a) in objects.iter().enumerate() {
            if a.cell.0 >= GRID || a.cell.1 >= GRID {
                return Err(Error::Data(format!("cell {:?} outside the {GRID}x{GRID} grid", a.cell)));
            }
            if objects[..i].iter().any(|b| b.cell == a.cell) {
                return Err(Error::Data(format!("two objects share cell {:?}", a.cell)));
            }
        }
        Ok(Self { objects, background })
    }

    pub fn random(rng: &mut SplitMix64, n_objects: usize) -> Result<Self> {
        let mut cells: Vec<usize> = (0..GRID * GRID).collect();
        rng.shuffle(&mut cells);
        let objects = (0..n_objects)
            .map(|i| SceneObject {
                shape: pick(rng, Shape::ALL),
                color: pick(rng, Color::ALL),
                size: pick(rng, Size::ALL),
                cell: (cells[i % cells.len()] / GRID, cells[i % cells.len()] % GRID),
            })
            .collect();
        let background = pick(rng, Background::ALL);
        Self::new(objects, background)
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn background(&self) -> Background {
        self.background
    }

    /// Every attribute word the scene supports.
    pub fn attribute_words(&self) -> Vec<&'static str> {
        let mut w: Vec<&'static str> = self
            .objects
            .iter()
            .flat_map(|o| [o.shape.word(), o.color.word(), o.size.word()])
            .collect();
        w.push(self.background.word());
        w
    }

    /// `bg=<texture>;<shape>,<color>,<size>,<row>,<col>;...`
    pub fn descriptor(&self) -> String {
        let mut s = format!("bg={}", self.background);
        for o in &self.objects {
            s.push_str(&format!(";{},{},{},{},{}", o.shape, o.color, o.size, o.cell.0, o.cell.1));
        }
        s
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let mut parts = text.split(';');
        let bg = parts
            .next()
            .and_then(|p| p.strip_prefix("bg="))
            .ok_or_else(|| Error::Data(format!("scene descriptor `{text}` lacks a background")))?;
        let background = bg.parse()?;
        let mut objects = Vec::new();
        for part in parts {
            let f: Vec<&str> = part.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Data(format!("bad object `{part}` in scene descriptor")));
            }
            let cell = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad cell `{s}`")));
            objects.push(SceneObject {
                shape: f[0].parse()?,
                color: f[1].parse()?,
                size: f[2].parse()?,
                cell: (cell(f[3])?, cell(f[4])?),
            });
        }
        Self::new(objects, background)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_objects_rejected() {
        assert!(SceneSpec::new(vec![], Background::Plain).is_err());
    }

    #[test]
    fn shared_cell_rejected() {
        let o = SceneObject {
            shape: Shape::Circle,
            color: Color::Red,
            size: Size::Large,
            cell: (1, 1),
        };
        assert!(SceneSpec::new(vec![o, o], Background::Plain).is_err());
    }

    #[test]
    fn descriptor_round_trip() {
        let mut rng = SplitMix64::new(5);
        for n in 1..=3 {
            let s = SceneSpec::random(&mut rng, n).unwrap();
            assert_eq!(SceneSpec::from_descriptor(&s.descriptor()).unwrap(), s);
        }
    }
}
