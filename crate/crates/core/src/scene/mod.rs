//! Synthetic overhead scenes: a scene graph, its 32×32 raster, and templated
//! three-part captions with exact per-aspect ground truth.

mod caption;
mod dataset;
mod lexicon;
mod parse;
mod render;

pub use caption::{caption_of, caption_variant, reference_captions, CaptionBundle, Role, SEP_TEXT};
pub use dataset::{generate, instruction_for, Dataset, Sample, DATASET_VERSION};
pub use lexicon::{grammar_words, synonym_groups, INSTRUCTIONS};
pub use parse::{parse_caption, ParsedCaption};
pub use render::{render, SceneImage};

use std::fmt;

/// Side length of the square image in pixels.
pub const IMAGE_SIZE: usize = 32;
/// Number of cells per grid side.
pub const GRID: usize = 4;
/// Pixels per cell side.
pub const CELL: usize = IMAGE_SIZE / GRID;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(Theme {
    Residential => "residential",
    Industrial => "industrial",
    Rural => "rural",
    Airport => "airport",
    Harbor => "harbor",
});

word_enum!(ObjectClass {
    Building => "building",
    Road => "road",
    Tree => "tree",
    Plane => "plane",
    Tank => "tank",
    Boat => "boat",
    Field => "field",
});

word_enum!(Color {
    Red => "red",
    Gray => "gray",
    Green => "green",
    White => "white",
    Blue => "blue",
    Brown => "brown",
});

word_enum!(RelationKind {
    LeftOf => "left-of",
    RightOf => "right-of",
    Above => "above",
    Below => "below",
    AdjacentTo => "adjacent-to",
});

impl RelationKind {
    /// The relation read from the other object's point of view.
    pub fn converse(self) -> Self {
        match self {
            RelationKind::LeftOf => RelationKind::RightOf,
            RelationKind::RightOf => RelationKind::LeftOf,
            RelationKind::Above => RelationKind::Below,
            RelationKind::Below => RelationKind::Above,
            RelationKind::AdjacentTo => RelationKind::AdjacentTo,
        }
    }

    /// Whether the relation holds between two cells.
    pub fn holds(self, subject: Cell, object: Cell) -> bool {
        let (sr, sc) = (subject.row as i32, subject.col as i32);
        let (or, oc) = (object.row as i32, object.col as i32);
        match self {
            RelationKind::LeftOf => sc < oc,
            RelationKind::RightOf => sc > oc,
            RelationKind::Above => sr < or,
            RelationKind::Below => sr > or,
            RelationKind::AdjacentTo => (sr - or).abs().max((sc - oc).abs()) == 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn new(row: u8, col: u8) -> Self {
        Self { row, col }
    }

    pub fn chebyshev(self, other: Cell) -> u8 {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub color: Color,
    pub count: u8,
    /// Known for generated scenes; recovered from captions only when they
    /// carry a positions sentence.
    pub cell: Option<Cell>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Relation {
    pub subject: usize,
    pub object: usize,
    pub kind: RelationKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SceneGraph {
    pub theme: Option<Theme>,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
}

/// Relation with endpoints resolved to classes, in a direction-free form.
pub type CanonicalRelation = (ObjectClass, RelationKind, ObjectClass);

impl SceneGraph {
    /// Checks the structural invariants of a generated scene.
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=4).contains(&self.objects.len()) {
            return Err(format!("{} objects, expected 1..=4", self.objects.len()));
        }
        let mut cells = Vec::new();
        for o in &self.objects {
            let cell = o.cell.ok_or("object without a cell")?;
            if cell.row as usize >= GRID || cell.col as usize >= GRID {
                return Err(format!("cell {cell:?} outside the grid"));
            }
            if cells.contains(&cell) {
                return Err(format!("cell {cell:?} used twice"));
            }
            if !(1..=4).contains(&o.count) {
                return Err(format!("count {} outside 1..=4", o.count));
            }
            cells.push(cell);
        }
        for r in &self.relations {
            let (Some(s), Some(o)) = (self.objects.get(r.subject), self.objects.get(r.object)) else {
                return Err(format!("relation {r:?} references a missing object"));
            };
            if !r.kind.holds(s.cell.unwrap(), o.cell.unwrap()) {
                return Err(format!("relation {r:?} contradicts the cell positions"));
            }
        }
        Ok(())
    }

    /// Count of relations that disagree with the objects' cells (relations
    /// between objects without cells are skipped).
    pub fn geometric_violations(&self) -> usize {
        self.relations
            .iter()
            .filter(|r| {
                match (
                    self.objects.get(r.subject).and_then(|o| o.cell),
                    self.objects.get(r.object).and_then(|o| o.cell),
                ) {
                    (Some(s), Some(o)) => !r.kind.holds(s, o),
                    _ => true,
                }
            })
            .count()
    }

    pub fn canonical_relations(&self) -> Vec<CanonicalRelation> {
        let mut out: Vec<_> = self
            .relations
            .iter()
            .filter_map(|r| {
                let a = self.objects.get(r.subject)?.class;
                let b = self.objects.get(r.object)?.class;
                Some(canonical(a, r.kind, b))
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Sorted `(class, color, count)` triples.
    pub fn object_keys(&self) -> Vec<(ObjectClass, Color, u8)> {
        let mut keys: Vec<_> = self.objects.iter().map(|o| (o.class, o.color, o.count)).collect();
        keys.sort();
        keys
    }

    /// Equivalence used for round-trip and memorization checks: same theme,
    /// same multiset of (class, color, count) and the same relation set up to
    /// converse direction. Cell positions are ignored.
    pub fn equivalent(&self, other: &SceneGraph) -> bool {
        self.theme == other.theme
            && self.object_keys() == other.object_keys()
            && self.canonical_relations() == other.canonical_relations()
    }
}

fn canonical(a: ObjectClass, kind: RelationKind, b: ObjectClass) -> CanonicalRelation {
    match kind {
        RelationKind::RightOf | RelationKind::Below => (b, kind.converse(), a),
        RelationKind::AdjacentTo if b < a => (b, kind, a),
        _ => (a, kind, b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relation_predicates() {
        let a = Cell::new(0, 0);
        let b = Cell::new(1, 2);
        assert!(RelationKind::LeftOf.holds(a, b));
        assert!(RelationKind::RightOf.holds(b, a));
        assert!(RelationKind::Above.holds(a, b));
        assert!(RelationKind::Below.holds(b, a));
        assert!(!RelationKind::AdjacentTo.holds(a, b));
        assert!(RelationKind::AdjacentTo.holds(a, Cell::new(1, 1)));
    }

    #[test]
    fn converse_relations_are_equivalent() {
        let obj = |class, col| SceneObject {
            class,
            color: Color::Red,
            count: 1,
            cell: Some(Cell::new(0, col)),
        };
        let g1 = SceneGraph {
            theme: Some(Theme::Rural),
            objects: vec![obj(ObjectClass::Tree, 0), obj(ObjectClass::Road, 2)],
            relations: vec![Relation {
                subject: 0,
                object: 1,
                kind: RelationKind::LeftOf,
            }],
        };
        let mut g2 = g1.clone();
        g2.relations[0] = Relation {
            subject: 1,
            object: 0,
            kind: RelationKind::RightOf,
        };
        assert!(g1.equivalent(&g2));
        g2.relations[0].kind = RelationKind::LeftOf;
        assert!(!g1.equivalent(&g2));
    }
}
