//! Seeded toy knowledge bases and corpora.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kb::{AnnotatedDocument, Annotation, CandidateMap, Entity, EntityStore};

const GIVEN: [&str; 20] = [
    "Alice", "Bruno", "Chiara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas", "Keiko", "Luca", "Mira",
    "Nils", "Olga", "Pavel", "Rosa", "Sven", "Tara", "Viktor",
];

const SURNAMES: [&str; 10] = [
    "Abbott", "Brandt", "Castillo", "Duarte", "Eriksen", "Fischer", "Galloway", "Horvath", "Iversen", "Jansen",
];

const JOBS: [&str; 8] = [
    "painter", "chemist", "sprinter", "novelist", "architect", "cellist", "surgeon", "diplomat",
];

const CITIES: [&str; 10] = [
    "Lisbon", "Oslo", "Krakow", "Porto", "Ghent", "Turin", "Leipzig", "Bergen", "Seville", "Tartu",
];

const VERBS: [&str; 6] = ["visited", "left", "praised", "returned to", "painted", "toured"];

/// `given × surname` people, `n ≤ 200` of them, ids `E000`, `E001`, ….
pub fn people_kb(n: usize, seed: u64) -> EntityStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(usize, usize)> = (0..GIVEN.len())
        .flat_map(|g| (0..SURNAMES.len()).map(move |s| (g, s)))
        .collect();
    pairs.shuffle(&mut rng);
    let ents = pairs.into_iter().take(n).enumerate().map(|(i, (g, s))| Entity {
        id: format!("E{i:03}"),
        title: format!("{} {}", GIVEN[g], SURNAMES[s]),
        description: format!(
            "{} {} is a {} from {} .",
            GIVEN[g],
            SURNAMES[s],
            JOBS[rng.gen_range(0..JOBS.len())],
            CITIES[rng.gen_range(0..CITIES.len())]
        ),
    });
    EntityStore::from_entities(ents).expect("generated ids and titles are unique")
}

/// Documents of short sentences, each naming one KB entity by its full
/// title. Every mention is annotated.
pub fn people_corpus(store: &EntityStore, n_docs: usize, sentences: usize, seed: u64) -> Vec<AnnotatedDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ents = store.entities();
    (0..n_docs)
        .map(|d| {
            let mut text = String::new();
            let mut annotations = Vec::new();
            for _ in 0..sentences {
                let e = &ents[rng.gen_range(0..ents.len())];
                if !text.is_empty() {
                    text.push(' ');
                }
                let start = text.chars().count();
                text.push_str(&e.title);
                annotations.push(Annotation {
                    start,
                    end: start + e.title.chars().count(),
                    entity_id: e.id.clone(),
                });
                let verb = VERBS[rng.gen_range(0..VERBS.len())];
                let city = CITIES[rng.gen_range(0..CITIES.len())];
                text.push_str(&format!(" {verb} {city} ."));
            }
            AnnotatedDocument {
                doc_id: format!("doc{d:02}"),
                text,
                annotations,
            }
        })
        .collect()
}

/// Full titles and bare surnames mapped to the matching entities, in id
/// order.
pub fn people_candidates(store: &EntityStore) -> CandidateMap {
    let mut map = CandidateMap::new();
    for e in store.iter() {
        map.insert(&e.title, [e.id.clone()]);
        if let Some(surname) = e.title.split(' ').nth(1) {
            map.insert(surname, [e.id.clone()]);
        }
    }
    map
}

struct Sense {
    id: &'static str,
    title: &'static str,
    description: &'static str,
    clues: &'static [&'static str],
}

const CHARLTON: [Sense; 4] = [
    Sense {
        id: "Q1",
        title: "Charlton Athletic F.C.",
        description: "English professional football club based in Charlton , south-east London .",
        clues: &["the Valley", "the club", "the Addicks", "promotion"],
    },
    Sense {
        id: "Q2",
        title: "Jack Charlton",
        description: "English footballer and manager of the Republic of Ireland national team .",
        clues: &["Leeds", "Ireland", "the manager", "Big Jack"],
    },
    Sense {
        id: "Q3",
        title: "Bobby Charlton",
        description: "English footballer who played for Manchester United and England .",
        clues: &["Old Trafford", "United", "the striker", "Sir Bobby"],
    },
    Sense {
        id: "Q4",
        title: "Suzanne Charlton",
        description: "English weather presenter for the BBC .",
        clues: &["the forecast", "rain", "the BBC", "the weather"],
    },
];

const FILLER: [&str; 8] = [
    "on Saturday", "in the evening", "after the match", "last season", "on television", "once again", "that week",
    "in March",
];

/// Four entities sharing the surface `Charlton`.
pub fn charlton_kb() -> EntityStore {
    EntityStore::from_entities(CHARLTON.iter().map(|s| Entity {
        id: s.id.into(),
        title: s.title.into(),
        description: s.description.into(),
    }))
    .expect("fixed fixture")
}

/// `n` one-mention documents. Each mentions `Charlton` next to a clue that
/// only fits the gold sense; the candidate map lists all four senses.
pub fn charlton_fixture(n: usize, seed: u64) -> (EntityStore, CandidateMap, Vec<AnnotatedDocument>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = charlton_kb();
    let mut map = CandidateMap::new();
    map.insert("Charlton", CHARLTON.iter().map(|s| s.id.to_string()));
    let docs = (0..n)
        .map(|i| {
            let sense = &CHARLTON[i % CHARLTON.len()];
            let clue = sense.clues[rng.gen_range(0..sense.clues.len())];
            let filler = FILLER[rng.gen_range(0..FILLER.len())];
            let lead = format!("Reporters spoke about {clue} {filler} , and");
            let start = lead.chars().count() + 1;
            let text = format!("{lead} Charlton was mentioned {}.", FILLER[rng.gen_range(0..FILLER.len())]);
            AnnotatedDocument {
                doc_id: format!("ed{i:02}"),
                text,
                annotations: vec![Annotation {
                    start,
                    end: start + "Charlton".len(),
                    entity_id: sense.id.into(),
                }],
            }
        })
        .collect();
    (store, map, docs)
}

/// Every word of titles, descriptions and document texts, for building a
/// vocabulary.
pub fn vocabulary_corpus(store: &EntityStore, docs: &[AnnotatedDocument]) -> Vec<String> {
    store
        .iter()
        .map(|e| format!("{} {}", e.title, e.description))
        .chain(docs.iter().map(|d| d.text.clone()))
        .collect()
}
