//! Text-to-document records: a short passage plus a figure, and a query
//! that needs both.
//!
//! Documents come in groups that share a topic and subtopic, so the
//! passage alone narrows a query down to its group; the figure's object
//! (colour and shape, never named in the passage) picks the member.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Background, Cell, Color, SceneObject, SceneSpec, Shape, Size};
use crate::error::{Error, Result};

pub const TOPICS: [(&str, [&str; 8]); 16] = [
    ("rivers", ["deltas", "floods", "dams", "rapids", "estuaries", "tributaries", "meanders", "springs"]),
    ("volcanoes", ["eruptions", "lava", "craters", "ash", "magma", "geysers", "calderas", "vents"]),
    ("birds", ["migration", "nests", "feathers", "songs", "eggs", "beaks", "flocks", "wings"]),
    ("trains", ["locomotives", "tracks", "stations", "tunnels", "signals", "carriages", "timetables", "bridges"]),
    ("castles", ["moats", "towers", "sieges", "drawbridges", "dungeons", "ramparts", "gates", "knights"]),
    ("forests", ["canopies", "mushrooms", "wildfires", "moss", "logging", "ferns", "roots", "clearings"]),
    ("planets", ["orbits", "moons", "rings", "atmospheres", "comets", "telescopes", "gravity", "seasons"]),
    ("deserts", ["dunes", "oases", "cacti", "mirages", "caravans", "sandstorms", "scorpions", "canyons"]),
    ("oceans", ["tides", "reefs", "currents", "whales", "trenches", "plankton", "waves", "kelp"]),
    ("cities", ["skylines", "subways", "markets", "parks", "traffic", "zoning", "plazas", "harbors"]),
    ("music", ["rhythm", "harmony", "orchestras", "choirs", "melodies", "drums", "violins", "concerts"]),
    ("cooking", ["spices", "baking", "soups", "knives", "ovens", "sauces", "pastry", "grilling"]),
    ("glaciers", ["icebergs", "crevasses", "moraines", "fjords", "meltwater", "snowfields", "avalanches", "permafrost"]),
    ("insects", ["beetles", "ants", "butterflies", "bees", "larvae", "hives", "crickets", "dragonflies"]),
    ("weather", ["storms", "rainbows", "droughts", "hail", "fog", "lightning", "monsoons", "frost"]),
    ("sports", ["marathons", "referees", "stadiums", "tactics", "trophies", "coaches", "relays", "tournaments"]),
];

const DISTRACTORS: [&str; 12] = [
    "readers often return to this material during long winter evenings",
    "the author gathered notes from several older field guides",
    "many details were checked twice before the final version",
    "some passages were shortened to keep the page readable",
    "a short glossary at the end defines the harder words",
    "earlier editions contained fewer examples and no summary",
    "teachers sometimes use the page as a warm up exercise",
    "the writing style stays plain and avoids heavy jargon",
    "several friends reviewed the draft and suggested changes",
    "the page was first published as part of a larger series",
    "a few numbers were rounded to make them easier to remember",
    "the closing paragraph points to further reading for beginners",
];

pub const DOC_GROUP_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct T2itRecord {
    pub doc_id: String,
    pub group_id: String,
    pub query: String,
    pub doc_text: String,
    pub doc_image: SceneSpec,
}

fn passage<R: Rng>(topic: &str, subtopic: &str, rng: &mut R) -> String {
    let n = rng.gen_range(2..=4);
    let picked: Vec<&str> = DISTRACTORS.choose_multiple(rng, n).copied().collect();
    let mut sentences = vec![format!("this article explains {subtopic} and their role in {topic}")];
    sentences.extend(picked.iter().map(|s| s.to_string()));
    sentences.push("a small figure accompanies the text".to_string());
    sentences.join(". ") + "."
}

/// `n` records in groups of `group_size` sharing topic and subtopic; group
/// members carry pairwise-distinct (colour, shape) figures.
pub fn generate_t2it_grouped<R: Rng>(
    n: usize,
    group_size: usize,
    palette: &[Color],
    rng: &mut R,
) -> Result<Vec<T2itRecord>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one record".into()));
    }
    let combos = palette.len() * Shape::ALL.len();
    if group_size == 0 || group_size > combos {
        return Err(Error::InvalidArgument(format!("group size must be in 1..={combos}, got {group_size}")));
    }
    let mut keys: Vec<(usize, usize)> = (0..TOPICS.len()).flat_map(|t| (0..8).map(move |s| (t, s))).collect();
    keys.shuffle(rng);
    let mut out = Vec::with_capacity(n);
    let mut group = 0;
    while out.len() < n {
        let (t, s) = keys[group % keys.len()];
        let (topic, subtopic) = (TOPICS[t].0, TOPICS[t].1[s]);
        let mut looks: Vec<(Color, Shape)> =
            palette.iter().flat_map(|&c| Shape::ALL.iter().map(move |&sh| (c, sh))).collect();
        looks.shuffle(rng);
        for &(color, shape) in looks.iter().take(group_size.min(n - out.len())) {
            let cell = Cell::new(rng.gen_range(0..4), rng.gen_range(0..4))?;
            let size = *Size::ALL.choose(rng).expect("sizes");
            let bg = *Background::ALL.choose(rng).expect("backgrounds");
            let doc_image = SceneSpec::new(bg, vec![SceneObject { shape, color, cell, size }])?;
            out.push(T2itRecord {
                doc_id: format!("t2it-d{:06}", out.len()),
                group_id: format!("t2it-g{group:05}"),
                query: format!("{color} {shape} figure about {subtopic} in {topic}"),
                doc_text: passage(topic, subtopic, rng),
                doc_image,
            });
        }
        group += 1;
    }
    Ok(out)
}

pub fn generate_t2it<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<T2itRecord>> {
    generate_t2it_grouped(n, DOC_GROUP_SIZE, Color::ALL, rng)
}
