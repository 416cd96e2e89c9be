//! Single-attribute scene edits with templated instructions.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Cell, Color, SceneObject, SceneSpec, Shape, Size, MAX_OBJECTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Color,
    Shape,
    Position,
    Add,
    Remove,
}

impl EditKind {
    pub const ALL: [EditKind; 5] = [EditKind::Color, EditKind::Shape, EditKind::Position, EditKind::Add, EditKind::Remove];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edit {
    pub kind: EditKind,
    pub instruction: String,
    pub target: SceneSpec,
}

impl Edit {
    pub fn target_caption(&self) -> String {
        self.target.caption()
    }
}

/// How an instruction names an object: colour and shape, plus the position
/// when that pair alone is ambiguous.
fn reference(scene: &SceneSpec, o: &SceneObject) -> String {
    let twins = scene.objects().iter().filter(|p| p.color == o.color && p.shape == o.shape).count();
    if twins > 1 {
        format!("the {} {} at the {}", o.color, o.shape, o.cell.phrase())
    } else {
        format!("the {} {}", o.color, o.shape)
    }
}

fn replace(scene: &SceneSpec, at: Cell, with: Option<SceneObject>) -> Result<SceneSpec> {
    let mut objects: Vec<SceneObject> = scene.objects().iter().filter(|o| o.cell != at).copied().collect();
    objects.extend(with);
    SceneSpec::new(scene.background(), objects)
}

fn pick<T: Copy, R: Rng>(items: &[T], rng: &mut R) -> Option<T> {
    items.choose(rng).copied()
}

/// One random edit of `kind` drawing colours from `palette`, or `None`
/// when the scene has no legal edit of that kind.
pub fn random_edit<R: Rng>(source: &SceneSpec, kind: EditKind, palette: &[Color], rng: &mut R) -> Result<Option<Edit>> {
    let objects = source.objects();
    let target_obj = pick(objects, rng);
    let edit = match kind {
        EditKind::Color => {
            let Some(o) = target_obj else { return Ok(None) };
            let others: Vec<Color> = palette.iter().copied().filter(|&c| c != o.color).collect();
            let Some(c) = pick(&others, rng) else { return Ok(None) };
            let instruction = format!("make {} {}", reference(source, &o), c);
            Edit { kind, instruction, target: replace(source, o.cell, Some(SceneObject { color: c, ..o }))? }
        }
        EditKind::Shape => {
            let Some(o) = target_obj else { return Ok(None) };
            let others: Vec<Shape> = Shape::ALL.iter().copied().filter(|&s| s != o.shape).collect();
            let s = pick(&others, rng).expect("several shapes");
            let instruction = format!("turn {} into a {}", reference(source, &o), s);
            Edit { kind, instruction, target: replace(source, o.cell, Some(SceneObject { shape: s, ..o }))? }
        }
        EditKind::Position => {
            let Some(o) = target_obj else { return Ok(None) };
            let Some(cell) = pick(&source.free_cells(), rng) else { return Ok(None) };
            let instruction = format!("move {} to the {}", reference(source, &o), cell.phrase());
            Edit { kind, instruction, target: replace(source, o.cell, Some(SceneObject { cell, ..o }))? }
        }
        EditKind::Add => {
            if objects.len() >= MAX_OBJECTS {
                return Ok(None);
            }
            let Some(cell) = pick(&source.free_cells(), rng) else { return Ok(None) };
            let o = SceneObject {
                shape: pick(Shape::ALL, rng).expect("shapes"),
                color: match pick(palette, rng) {
                    Some(c) => c,
                    None => return Ok(None),
                },
                size: pick(Size::ALL, rng).expect("sizes"),
                cell,
            };
            let instruction = format!("add a {} at the {}", o.description(), cell.phrase());
            Edit { kind, instruction, target: replace(source, cell, Some(o))? }
        }
        EditKind::Remove => {
            let Some(o) = target_obj else { return Ok(None) };
            let instruction = format!("remove {}", reference(source, &o));
            Edit { kind, instruction, target: replace(source, o.cell, None)? }
        }
    };
    Ok(Some(edit))
}

/// `k` edits with pairwise-distinct instructions and targets, none equal
/// to the source.
pub fn generate_edits<R: Rng>(source: &SceneSpec, k: usize, rng: &mut R) -> Result<Vec<Edit>> {
    generate_edits_with(source, k, Color::ALL, rng)
}

pub fn generate_edits_with<R: Rng>(source: &SceneSpec, k: usize, palette: &[Color], rng: &mut R) -> Result<Vec<Edit>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 edits per source, got {k}")));
    }
    let mut out: Vec<Edit> = Vec::with_capacity(k);
    let budget = 50 * k;
    for _ in 0..budget {
        if out.len() == k {
            break;
        }
        let kind = *EditKind::ALL.choose(rng).expect("kinds");
        let Some(edit) = random_edit(source, kind, palette, rng)? else { continue };
        if edit.target == *source || out.iter().any(|e| e.target == edit.target || e.instruction == edit.instruction) {
            continue;
        }
        out.push(edit);
    }
    if out.len() < k {
        return Err(Error::Scene(format!("found only {} distinct edits of {source} after {budget} tries", out.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::scene::Background;
    use super::*;
    use crate::testutil::rng;

    fn one_object() -> SceneSpec {
        let o = SceneObject { shape: Shape::Circle, color: Color::Red, size: Size::Large, cell: Cell::new(1, 1).unwrap() };
        SceneSpec::new(Background::White, vec![o]).unwrap()
    }

    #[test]
    fn three_distinct_edits_of_a_single_object_scene() {
        let src = one_object();
        for seed in 0..50 {
            let edits = generate_edits(&src, 3, &mut rng(seed)).unwrap();
            assert_eq!(edits.len(), 3);
            for (i, a) in edits.iter().enumerate() {
                assert_ne!(a.target, src);
                for b in &edits[i + 1..] {
                    assert_ne!(a.target, b.target);
                }
            }
        }
    }

    #[test]
    fn colour_edit_changes_only_the_colour() {
        let src = one_object();
        let mut r = rng(1);
        let e = random_edit(&src, EditKind::Color, Color::ALL, &mut r).unwrap().unwrap();
        let (a, b) = (src.objects()[0], e.target.objects()[0]);
        assert_ne!(a.color, b.color);
        assert_eq!((a.shape, a.size, a.cell), (b.shape, b.size, b.cell));
        assert_eq!(e.instruction, format!("make the red circle {}", b.color));
    }

    #[test]
    fn impossible_edits_are_reported() {
        let empty = SceneSpec::empty(Background::Gray);
        let mut r = rng(2);
        for kind in [EditKind::Color, EditKind::Shape, EditKind::Position, EditKind::Remove] {
            assert!(random_edit(&empty, kind, Color::ALL, &mut r).unwrap().is_none());
        }
        assert!(random_edit(&empty, EditKind::Add, Color::ALL, &mut r).unwrap().is_some());
        assert!(generate_edits(&empty, 1, &mut r).is_err());
    }

    #[test]
    fn ambiguous_objects_are_named_by_position() {
        let a = SceneObject { shape: Shape::Square, color: Color::Blue, size: Size::Small, cell: Cell::new(0, 0).unwrap() };
        let b = SceneObject { cell: Cell::new(3, 3).unwrap(), ..a };
        let s = SceneSpec::new(Background::White, vec![a, b]).unwrap();
        assert_eq!(reference(&s, &a), "the blue square at the top left");
    }
}
