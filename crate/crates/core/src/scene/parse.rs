use super::lexicon::{class_from_word, color_from_word, COL_WORDS, COUNT_WORDS, ROW_WORDS};
use super::{Cell, ObjectClass, Relation, RelationKind, SceneGraph, SceneObject, Theme};

/// Result of lenient caption parsing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedCaption {
    pub graph: SceneGraph,
    /// Clauses that matched no grammar rule, plus relation/position clauses
    /// naming an object the caption never introduced.
    pub dropped: usize,
}

enum Clause {
    Theme(Theme),
    Object(SceneObject),
    Relation(ObjectClass, RelationKind, ObjectClass),
    Position(ObjectClass, Cell),
    Filler,
}

fn relation_at(t: &[&str]) -> Option<(RelationKind, usize)> {
    match t {
        ["left", "of", ..] => Some((RelationKind::LeftOf, 2)),
        ["right", "of", ..] => Some((RelationKind::RightOf, 2)),
        ["above", ..] => Some((RelationKind::Above, 1)),
        ["below", ..] => Some((RelationKind::Below, 1)),
        ["adjacent", "to", ..] => Some((RelationKind::AdjacentTo, 2)),
        _ => None,
    }
}

fn parse_clause(t: &[&str]) -> Option<Clause> {
    if let Some(theme) = t.iter().find_map(|w| Theme::from_word(w)) {
        return Some(Clause::Theme(theme));
    }
    if t.contains(&"notable") {
        return Some(Clause::Filler);
    }
    for w in t.windows(3) {
        let count = COUNT_WORDS.iter().position(|c| *c == w[0]);
        if let (Some(count), Some(color), Some(class)) =
            (count, color_from_word(w[1]), class_from_word(w[2]))
        {
            return Some(Clause::Object(SceneObject {
                class,
                color,
                count: count as u8 + 1,
                cell: None,
            }));
        }
    }
    for i in 0..t.len() {
        if t[i] != "the" || i + 2 >= t.len() {
            continue;
        }
        let Some(subject) = class_from_word(t[i + 1]) else { continue };
        if !matches!(t[i + 2], "is" | "lies") {
            continue;
        }
        let rest = &t[i + 3..];
        if let ["at", row, col, ..] = rest {
            let row = ROW_WORDS.iter().position(|w| w == row)?;
            let col = COL_WORDS.iter().position(|w| w == col)?;
            return Some(Clause::Position(subject, Cell::new(row as u8, col as u8)));
        }
        let (kind, used) = relation_at(rest)?;
        if let ["the", obj, ..] = &rest[used..] {
            return Some(Clause::Relation(subject, kind, class_from_word(obj)?));
        }
        return None;
    }
    None
}

/// Best-effort extraction of a scene graph from caption text. Clauses are
/// delimited by `.`, `,` and `and`; each is matched independently, so one
/// garbled clause does not affect the others.
pub fn parse_caption(text: &str) -> ParsedCaption {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let clauses = tokens
        .split(|w| matches!(*w, "." | "," | "and"))
        .filter(|c| !c.is_empty());

    let mut out = ParsedCaption::default();
    let mut relations = Vec::new();
    let mut positions = Vec::new();
    for clause in clauses {
        match parse_clause(clause) {
            Some(Clause::Theme(t)) => {
                out.graph.theme.get_or_insert(t);
            }
            Some(Clause::Object(o)) => out.graph.objects.push(o),
            Some(Clause::Relation(a, k, b)) => relations.push((a, k, b)),
            Some(Clause::Position(c, cell)) => positions.push((c, cell)),
            Some(Clause::Filler) => {}
            None => out.dropped += 1,
        }
    }
    let index_of = |g: &SceneGraph, c: ObjectClass| g.objects.iter().position(|o| o.class == c);
    for (a, kind, b) in relations {
        match (index_of(&out.graph, a), index_of(&out.graph, b)) {
            (Some(subject), Some(object)) if subject != object => out.graph.relations.push(Relation {
                subject,
                object,
                kind,
            }),
            _ => out.dropped += 1,
        }
    }
    for (class, cell) in positions {
        match index_of(&out.graph, class) {
            Some(i) => out.graph.objects[i].cell = Some(cell),
            None => out.dropped += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{caption_of, Color};

    #[test]
    fn empty_text() {
        let p = parse_caption("");
        assert_eq!(p.graph, SceneGraph::default());
        assert_eq!(p.dropped, 0);
    }

    #[test]
    fn parses_canonical_caption() {
        let p = parse_caption(
            "a rural area . there are two red buildings and one grey street . the road is right of the building",
        );
        assert_eq!(p.dropped, 0);
        assert_eq!(p.graph.theme, Some(Theme::Rural));
        assert_eq!(p.graph.objects.len(), 2);
        assert_eq!(p.graph.objects[1].color, Color::Gray);
        assert_eq!(p.graph.objects[1].class, ObjectClass::Road);
        assert_eq!(p.graph.relations[0].kind, RelationKind::RightOf);
    }

    #[test]
    fn garbled_clause_is_dropped() {
        let p = parse_caption("a rural area . there are two red buildings , field blue see . no notable relations");
        assert_eq!(p.dropped, 1);
        assert_eq!(p.graph.objects.len(), 1);
        assert_eq!(p.graph.theme, Some(Theme::Rural));
    }

    #[test]
    fn relation_to_unknown_object_is_dropped() {
        let p = parse_caption("there are one red tree . the tree is above the boat");
        assert_eq!(p.dropped, 1);
        assert!(p.graph.relations.is_empty());
    }

    #[test]
    fn positions_fill_cells() {
        let p = parse_caption("there are one red tree . the tree is at lower midright");
        assert_eq!(p.graph.objects[0].cell, Some(Cell::new(2, 2)));
        let g = SceneGraph {
            theme: None,
            objects: p.graph.objects.clone(),
            relations: vec![],
        };
        assert_eq!(caption_of(&g).position_sentence, "the tree is at lower midright");
    }
}
