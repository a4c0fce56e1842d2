use std::fmt;

use super::lexicon::{
    article, class_form, color_form, relation_phrase, COL_WORDS, COUNT_WORDS, NO_RELATIONS,
    ROW_WORDS,
};
use super::{SceneGraph, SceneObject};

/// Rendered form of the separator token between caption aspects.
pub const SEP_TEXT: &str = ".";

/// Caption aspect an expert decoder is responsible for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// The whole three-part caption; the single decoder of a one-expert model.
    Full,
    Theme,
    Objects,
    Positions,
    Relations,
    /// Objects and relations together, for the two-expert split.
    Details,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Full => "full",
            Role::Theme => "theme",
            Role::Objects => "objects",
            Role::Positions => "positions",
            Role::Relations => "relations",
            Role::Details => "details",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        [
            Role::Full,
            Role::Theme,
            Role::Objects,
            Role::Positions,
            Role::Relations,
            Role::Details,
        ]
        .into_iter()
        .find(|r| r.label() == s)
    }

    /// Expert roles in aggregation order for an `n`-expert model.
    pub fn for_experts(n: usize) -> Option<Vec<Role>> {
        match n {
            1 => Some(vec![Role::Full]),
            2 => Some(vec![Role::Theme, Role::Details]),
            3 => Some(vec![Role::Theme, Role::Objects, Role::Relations]),
            4 => Some(vec![Role::Theme, Role::Objects, Role::Positions, Role::Relations]),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Canonical captions of one scene, one sentence per aspect.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionBundle {
    pub theme_sentence: String,
    pub object_sentence: String,
    pub relation_sentence: String,
    /// Absolute cell positions; only supervised in the four-expert split.
    pub position_sentence: String,
}

impl CaptionBundle {
    /// Theme, objects and relations joined by the separator.
    pub fn full_caption(&self) -> String {
        join_segments([
            self.theme_sentence.as_str(),
            &self.object_sentence,
            &self.relation_sentence,
        ])
    }

    pub fn target(&self, role: Role) -> String {
        match role {
            Role::Full => self.full_caption(),
            Role::Theme => self.theme_sentence.clone(),
            Role::Objects => self.object_sentence.clone(),
            Role::Positions => self.position_sentence.clone(),
            Role::Relations => self.relation_sentence.clone(),
            Role::Details => format!("{} , {}", self.object_sentence, self.relation_sentence),
        }
    }
}

pub(crate) fn join_segments<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    parts.into_iter().collect::<Vec<_>>().join(&format!(" {SEP_TEXT} "))
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(" , ")),
    }
}

fn object_phrase(o: &SceneObject, synonym: bool) -> String {
    format!(
        "{} {} {}",
        COUNT_WORDS[o.count as usize - 1],
        color_form(o.color, synonym),
        class_form(o.class, o.count, synonym)
    )
}

fn theme_sentence(g: &SceneGraph, variant: usize) -> String {
    let Some(theme) = g.theme else {
        return String::new();
    };
    let t = theme.word();
    let a = article(t);
    match variant % 5 {
        0 => format!("{a} {t} area"),
        1 => format!("this is {a} {t} area"),
        2 => format!("{a} {t} region"),
        3 => format!("the image shows {a} {t} zone"),
        _ => format!("an overhead view of {a} {t} area"),
    }
}

fn object_sentence(g: &SceneGraph, variant: usize) -> String {
    let synonym = matches!(variant % 5, 2 | 4);
    let mut items: Vec<String> = g.objects.iter().map(|o| object_phrase(o, synonym)).collect();
    if variant % 5 == 1 {
        items.reverse();
    }
    let single = g.objects.len() == 1 && g.objects[0].count == 1;
    let lead = match variant % 5 {
        2 => "we can see",
        3 => "the scene contains",
        _ if single => "there is",
        _ => "there are",
    };
    format!("{lead} {}", join_list(&items))
}

fn relation_sentence(g: &SceneGraph, variant: usize) -> String {
    if g.relations.is_empty() {
        return NO_RELATIONS.to_string();
    }
    let synonym = variant % 5 == 4;
    let name = |i: usize| {
        let o = &g.objects[i];
        class_form(o.class, 1, synonym)
    };
    let mut clauses: Vec<String> = g
        .relations
        .iter()
        .map(|r| match variant % 5 {
            1 => format!(
                "the {} is {} the {}",
                name(r.object),
                relation_phrase(r.kind.converse()),
                name(r.subject)
            ),
            2 => format!("the {} lies {} the {}", name(r.subject), relation_phrase(r.kind), name(r.object)),
            _ => format!("the {} is {} the {}", name(r.subject), relation_phrase(r.kind), name(r.object)),
        })
        .collect();
    if variant % 5 == 3 {
        clauses.reverse();
    }
    clauses.join(" and ")
}

fn position_sentence(g: &SceneGraph) -> String {
    let clauses: Vec<String> = g
        .objects
        .iter()
        .filter_map(|o| {
            let cell = o.cell?;
            Some(format!(
                "the {} is at {} {}",
                o.class.word(),
                ROW_WORDS[cell.row as usize],
                COL_WORDS[cell.col as usize]
            ))
        })
        .collect();
    clauses.join(" and ")
}

/// Canonical captions of a scene.
pub fn caption_of(g: &SceneGraph) -> CaptionBundle {
    CaptionBundle {
        theme_sentence: theme_sentence(g, 0),
        object_sentence: object_sentence(g, 0),
        relation_sentence: relation_sentence(g, 0),
        position_sentence: position_sentence(g),
    }
}

/// One of five paraphrases (synonym and ordering swaps) of the full caption;
/// variant 0 is the canonical caption.
pub fn caption_variant(g: &SceneGraph, variant: usize) -> String {
    join_segments([
        theme_sentence(g, variant).as_str(),
        &object_sentence(g, variant),
        &relation_sentence(g, variant),
    ])
}

/// The five reference captions used for metric evaluation.
pub fn reference_captions(g: &SceneGraph) -> Vec<String> {
    (0..5).map(|v| caption_variant(g, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Cell, Color, ObjectClass, Relation, RelationKind, Theme};

    fn scene() -> SceneGraph {
        SceneGraph {
            theme: Some(Theme::Airport),
            objects: vec![
                SceneObject {
                    class: ObjectClass::Building,
                    color: Color::Red,
                    count: 2,
                    cell: Some(Cell::new(0, 0)),
                },
                SceneObject {
                    class: ObjectClass::Road,
                    color: Color::Gray,
                    count: 1,
                    cell: Some(Cell::new(0, 2)),
                },
            ],
            relations: vec![Relation {
                subject: 0,
                object: 1,
                kind: RelationKind::LeftOf,
            }],
        }
    }

    #[test]
    fn canonical_sentences() {
        let c = caption_of(&scene());
        assert_eq!(c.theme_sentence, "an airport area");
        assert_eq!(c.object_sentence, "there are two red buildings and one gray road");
        assert_eq!(c.relation_sentence, "the building is left of the road");
        assert_eq!(c.position_sentence, "the building is at top left and the road is at top midright");
        assert_eq!(
            c.full_caption(),
            "an airport area . there are two red buildings and one gray road . the building is left of the road"
        );
    }

    #[test]
    fn single_object_without_relations() {
        let mut g = scene();
        g.objects.truncate(1);
        g.objects[0].count = 1;
        g.relations.clear();
        let c = caption_of(&g);
        assert_eq!(c.relation_sentence, "no notable relations");
        assert_eq!(c.object_sentence, "there is one red building");
    }

    #[test]
    fn variants_are_distinct() {
        let refs = reference_captions(&scene());
        assert_eq!(refs[0], caption_of(&scene()).full_caption());
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(refs[i], refs[j]);
            }
        }
    }

    #[test]
    fn expert_roles() {
        assert_eq!(Role::for_experts(3).unwrap().len(), 3);
        assert!(Role::for_experts(5).is_none());
        assert_eq!(Role::from_label("details"), Some(Role::Details));
    }
}
