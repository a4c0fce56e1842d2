use std::fmt::Write as _;
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::caption::{caption_of, CaptionBundle};
use super::lexicon::INSTRUCTIONS;
use super::render::{render, SceneImage};
use super::{
    Cell, Color, ObjectClass, Relation, RelationKind, SceneGraph, SceneObject, Theme, GRID,
};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

/// Instruction paired with sample `index`.
pub fn instruction_for(index: usize) -> &'static str {
    INSTRUCTIONS[index % INSTRUCTIONS.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub graph: SceneGraph,
    pub image: SceneImage,
    pub captions: CaptionBundle,
}

impl Sample {
    pub fn from_graph(index: usize, graph: SceneGraph) -> Self {
        Self {
            index,
            image: render(&graph),
            captions: caption_of(&graph),
            graph,
        }
    }

    pub fn instruction(&self) -> &'static str {
        instruction_for(self.index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub samples: Vec<Sample>,
}

/// Spatial relation reported between two objects, chosen by a fixed rule so
/// captions are a function of the image: same row or column gives a
/// horizontal/vertical relation, diagonal neighbours are adjacent, otherwise
/// the dominant axis decides.
fn relation_between(s: Cell, o: Cell) -> RelationKind {
    let dr = s.row as i32 - o.row as i32;
    let dc = s.col as i32 - o.col as i32;
    let horizontal = if dc < 0 { RelationKind::LeftOf } else { RelationKind::RightOf };
    let vertical = if dr < 0 { RelationKind::Above } else { RelationKind::Below };
    if dr == 0 {
        horizontal
    } else if dc == 0 {
        vertical
    } else if dr.abs().max(dc.abs()) == 1 {
        RelationKind::AdjacentTo
    } else if dc.abs() >= dr.abs() {
        horizontal
    } else {
        vertical
    }
}

fn random_scene(theme: Theme, rng: &mut ChaCha8Rng) -> SceneGraph {
    let n = rng.gen_range(2..=4);
    let mut classes = ObjectClass::ALL.to_vec();
    classes.shuffle(rng);
    let mut cells: Vec<Cell> = (0..GRID * GRID)
        .map(|i| Cell::new((i / GRID) as u8, (i % GRID) as u8))
        .collect();
    cells.shuffle(rng);
    let mut objects: Vec<SceneObject> = (0..n)
        .map(|i| SceneObject {
            class: classes[i],
            color: *Color::ALL.choose(rng).expect("non-empty"),
            count: rng.gen_range(1..=4),
            cell: Some(cells[i]),
        })
        .collect();
    objects.sort_by_key(|o| o.cell);

    // Consecutive objects in reading order that are at most two cells apart,
    // at most two relations; the lower class is the subject.
    let mut relations = Vec::new();
    for i in 0..objects.len() - 1 {
        if relations.len() == 2 {
            break;
        }
        let (a, b) = (&objects[i], &objects[i + 1]);
        let (ca, cb) = (a.cell.unwrap(), b.cell.unwrap());
        if ca.chebyshev(cb) > 2 {
            continue;
        }
        let (subject, object) = if a.class < b.class { (i, i + 1) } else { (i + 1, i) };
        let kind = relation_between(
            objects[subject].cell.unwrap(),
            objects[object].cell.unwrap(),
        );
        relations.push(Relation {
            subject,
            object,
            kind,
        });
    }
    SceneGraph {
        theme: Some(theme),
        objects,
        relations,
    }
}

/// Deterministic dataset of `n` scenes. Themes are assigned by shuffled
/// blocks of five, so counts are balanced to within one.
pub fn generate(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut themes = Vec::with_capacity(n + 5);
    while themes.len() < n {
        let mut block = Theme::ALL.to_vec();
        block.shuffle(&mut rng);
        themes.extend(block);
    }
    let samples = themes
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(index, theme)| Sample::from_graph(index, random_scene(theme, &mut rng)))
        .collect();
    Dataset { seed, samples }
}

fn encode_objects(g: &SceneGraph) -> String {
    g.objects
        .iter()
        .map(|o| {
            let cell = o.cell.expect("generated objects have cells");
            format!("{}:{}:{}:{},{}", o.class, o.color, o.count, cell.row, cell.col)
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn encode_relations(g: &SceneGraph) -> String {
    g.relations
        .iter()
        .map(|r| format!("{}>{}:{}", r.subject, r.object, r.kind))
        .collect::<Vec<_>>()
        .join(";")
}

fn bad(line: usize, what: impl std::fmt::Display) -> Error {
    Error::Data(format!("dataset line {line}: {what}"))
}

fn decode_objects(s: &str, line: usize) -> Result<Vec<SceneObject>> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(|p| {
            let f: Vec<&str> = p.split(':').collect();
            let [class, color, count, cell] = f.as_slice() else {
                return Err(bad(line, format!("malformed object `{p}`")));
            };
            let (row, col) = cell.split_once(',').ok_or_else(|| bad(line, "malformed cell"))?;
            Ok(SceneObject {
                class: ObjectClass::from_word(class).ok_or_else(|| bad(line, "unknown class"))?,
                color: Color::from_word(color).ok_or_else(|| bad(line, "unknown color"))?,
                count: count.parse().map_err(|e| bad(line, e))?,
                cell: Some(Cell::new(
                    row.parse().map_err(|e| bad(line, e))?,
                    col.parse().map_err(|e| bad(line, e))?,
                )),
            })
        })
        .collect()
}

fn decode_relations(s: &str, line: usize) -> Result<Vec<Relation>> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (pair, kind) = p.split_once(':').ok_or_else(|| bad(line, "malformed relation"))?;
            let (a, b) = pair.split_once('>').ok_or_else(|| bad(line, "malformed relation"))?;
            Ok(Relation {
                subject: a.parse().map_err(|e| bad(line, e))?,
                object: b.parse().map_err(|e| bad(line, e))?,
                kind: RelationKind::from_word(kind).ok_or_else(|| bad(line, "unknown relation"))?,
            })
        })
        .collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Serialises as tab-separated `key=value` lines: a header line with the
    /// format version, seed and size, then one record per sample.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#rsmoe-dataset\tversion={DATASET_VERSION}\tseed={}\tn={}\n",
            self.seed,
            self.samples.len()
        );
        for s in &self.samples {
            let _ = writeln!(
                out,
                "id={}\ttheme={}\tobjects={}\trelations={}\timage={}\ttheme_sentence={}\tobject_sentence={}\trelation_sentence={}",
                s.index,
                s.graph.theme.map_or("", |t| t.word()),
                encode_objects(&s.graph),
                encode_relations(&s.graph),
                B64.encode(s.image.bytes()),
                s.captions.theme_sentence,
                s.captions.object_sentence,
                s.captions.relation_sentence,
            );
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Parses the text format. Stored images and captions must agree with
    /// re-rendering the stored scene graph.
    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Data("empty dataset file".into()))?;
        let header = header?;
        let mut fields = header.split('\t');
        if fields.next() != Some("#rsmoe-dataset") {
            return Err(bad(1, "missing dataset header"));
        }
        let mut seed = None;
        let mut n = None;
        for f in fields {
            match f.split_once('=') {
                Some(("version", v)) if v != DATASET_VERSION.to_string() => {
                    return Err(Error::Version {
                        found: v.to_string(),
                        expected: DATASET_VERSION.to_string(),
                    })
                }
                Some(("seed", v)) => seed = Some(v.parse().map_err(|e| bad(1, e))?),
                Some(("n", v)) => n = Some(v.parse::<usize>().map_err(|e| bad(1, e))?),
                _ => {}
            }
        }
        let seed = seed.ok_or_else(|| bad(1, "header lacks seed"))?;
        let mut samples = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let get = |key: &str| -> Result<&str> {
                line.split('\t')
                    .find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                    .ok_or_else(|| bad(lineno, format!("missing `{key}`")))
            };
            let index = get("id")?.parse().map_err(|e| bad(lineno, e))?;
            let theme = Theme::from_word(get("theme")?);
            let graph = SceneGraph {
                theme,
                objects: decode_objects(get("objects")?, lineno)?,
                relations: decode_relations(get("relations")?, lineno)?,
            };
            graph.validate().map_err(|e| bad(lineno, e))?;
            let bytes = B64.decode(get("image")?).map_err(|e| bad(lineno, e))?;
            let image = SceneImage::from_bytes(bytes).ok_or_else(|| bad(lineno, "image size"))?;
            let sample = Sample::from_graph(index, graph);
            if sample.image != image {
                return Err(bad(lineno, "stored image disagrees with the scene graph"));
            }
            if sample.captions.theme_sentence != get("theme_sentence")?
                || sample.captions.object_sentence != get("object_sentence")?
                || sample.captions.relation_sentence != get("relation_sentence")?
            {
                return Err(bad(lineno, "stored captions disagree with the scene graph"));
            }
            samples.push(sample);
        }
        if let Some(n) = n {
            if n != samples.len() {
                return Err(Error::Data(format!(
                    "header declares {n} records, file has {}",
                    samples.len()
                )));
            }
        }
        Ok(Dataset { seed, samples })
    }

    /// First `n_train` samples and the rest.
    pub fn split(&self, n_train: usize) -> (Vec<Sample>, Vec<Sample>) {
        let n_train = n_train.min(self.samples.len());
        (
            self.samples[..n_train].to_vec(),
            self.samples[n_train..].to_vec(),
        )
    }
}
