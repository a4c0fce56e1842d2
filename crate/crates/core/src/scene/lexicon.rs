use super::{Color, ObjectClass, RelationKind, Theme};

/// Instructions shown to the model. Sample `i` uses `INSTRUCTIONS[i % 4]`.
pub const INSTRUCTIONS: [&str; 4] = [
    "describe the image in detail",
    "describe this remote sensing image",
    "write a caption for the image",
    "what does this image show",
];

pub(crate) const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];
pub(crate) const ROW_WORDS: [&str; 4] = ["top", "upper", "lower", "bottom"];
pub(crate) const COL_WORDS: [&str; 4] = ["left", "midleft", "midright", "right"];
pub(crate) const NO_RELATIONS: &str = "no notable relations";

pub(crate) fn plural(class: ObjectClass) -> &'static str {
    match class {
        ObjectClass::Building => "buildings",
        ObjectClass::Road => "roads",
        ObjectClass::Tree => "trees",
        ObjectClass::Plane => "planes",
        ObjectClass::Tank => "tanks",
        ObjectClass::Boat => "boats",
        ObjectClass::Field => "fields",
    }
}

/// Paraphrase synonym for a class, as (singular, plural).
pub(crate) fn class_synonym(class: ObjectClass) -> (&'static str, &'static str) {
    match class {
        ObjectClass::Building => ("house", "houses"),
        ObjectClass::Road => ("street", "streets"),
        ObjectClass::Boat => ("ship", "ships"),
        ObjectClass::Plane => ("aircraft", "aircraft"),
        ObjectClass::Tree => ("tree", "trees"),
        ObjectClass::Tank => ("tank", "tanks"),
        ObjectClass::Field => ("farmland", "farmlands"),
    }
}

pub(crate) fn class_form(class: ObjectClass, count: u8, synonym: bool) -> &'static str {
    match (synonym, count == 1) {
        (false, true) => class.word(),
        (false, false) => plural(class),
        (true, true) => class_synonym(class).0,
        (true, false) => class_synonym(class).1,
    }
}

pub(crate) fn class_from_word(w: &str) -> Option<ObjectClass> {
    ObjectClass::ALL.iter().copied().find(|&c| {
        let (s, p) = class_synonym(c);
        w == c.word() || w == plural(c) || w == s || w == p
    })
}

pub(crate) fn color_form(color: Color, synonym: bool) -> &'static str {
    match (color, synonym) {
        (Color::Gray, true) => "grey",
        (c, _) => c.word(),
    }
}

pub(crate) fn color_from_word(w: &str) -> Option<Color> {
    match w {
        "grey" => Some(Color::Gray),
        other => Color::from_word(other),
    }
}

pub(crate) fn article(next: &str) -> &'static str {
    if next.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

/// Surface form of a relation, e.g. "left of".
pub(crate) fn relation_phrase(kind: RelationKind) -> &'static str {
    match kind {
        RelationKind::LeftOf => "left of",
        RelationKind::RightOf => "right of",
        RelationKind::Above => "above",
        RelationKind::Below => "below",
        RelationKind::AdjacentTo => "adjacent to",
    }
}

pub(crate) const THEME_NOUNS: [&str; 3] = ["area", "region", "zone"];

/// Every word any template can emit, in a fixed order.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = vec![","];
    let fixed = [
        "a", "an", "this", "is", "the", "image", "shows", "overhead", "view", "of", "there",
        "are", "we", "can", "see", "scene", "contains", "and", "lies", "at", "no", "notable",
        "relations", "left", "right", "above", "below", "adjacent", "to",
    ];
    words.extend(fixed);
    words.extend(THEME_NOUNS);
    words.extend(Theme::ALL.iter().map(|t| t.word()));
    for &c in ObjectClass::ALL {
        let (s, p) = class_synonym(c);
        words.extend([c.word(), plural(c), s, p]);
    }
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.push("grey");
    words.extend(COUNT_WORDS);
    words.extend(ROW_WORDS);
    words.extend(COL_WORDS);
    for inst in INSTRUCTIONS {
        words.extend(inst.split_whitespace());
    }
    let mut seen = std::collections::HashSet::new();
    words.retain(|w| seen.insert(*w));
    words
}

/// Groups of interchangeable words used by the paraphrase templates. This is
/// the closed synonym table for METEOR's synonym stage.
pub fn synonym_groups() -> Vec<Vec<&'static str>> {
    let mut groups = vec![THEME_NOUNS.to_vec(), vec!["gray", "grey"]];
    for &c in ObjectClass::ALL {
        let (s, p) = class_synonym(c);
        if s != c.word() {
            groups.push(vec![c.word(), s]);
        }
        if p != plural(c) {
            groups.push(vec![plural(c), p]);
        }
    }
    groups.push(vec!["is", "lies"]);
    groups
}
